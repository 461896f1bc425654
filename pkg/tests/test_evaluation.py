import json

import numpy as np
import pytest
import torch

from gvilm.evaluation import (
    GroundingReport,
    _voxel_object_overlap,
    boundary_gap,
    encode_pool,
    frame_similarity_matrix,
    grounding_accuracy,
    heatmap_png,
    noun_group_masks,
    parameter_hash,
    report,
    retrieval_metrics,
    similarity_matrix,
    temporal_row_labels,
    write_summary,
)
from gvilm.encoders import PatchGrid, build_model
from gvilm.synthcorpus import CaptionedVideo
from gvilm.trainer import build_run_model, train

from conftest import TINY_MODEL


# -- brute-force oracles --------------------------------------------------------


def oracle_retrieval(sim):
    """Rank by explicit sort with (score desc, index asc) tie-break."""
    n = sim.shape[1]
    ranks = []
    for j in range(n):
        order = sorted(range(sim.shape[0]), key=lambda i: (-sim[i, j], i))
        ranks.append(order.index(j) + 1)
    r = np.array(ranks)
    return (
        100.0 * (r <= 1).mean(),
        100.0 * (r <= 5).mean(),
        100.0 * (r <= 10).mean(),
        float(np.median(r)),
    )


def oracle_gap(matrix, labels):
    within, cross = [], []
    n = len(labels)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            (within if labels[i] == labels[j] else cross).append(matrix[i, j])
    return sum(within) / len(within) - sum(cross) / len(cross)


class TestRetrievalMetrics:
    def test_identity_dominant_perfect(self):
        sim = np.eye(6)
        rep = retrieval_metrics(sim)
        assert rep.r1 == 100.0 and rep.medr == 1.0

    def test_constant_matrix_tie_break(self):
        b = 7
        rep = retrieval_metrics(np.ones((b, b)))
        # true rank for caption j is j+1 under ascending-index tie-break
        assert rep.medr == (b + 1) / 2

    def test_random_instances_match_oracle(self, rng):
        for _ in range(20):
            sim = rng.standard_normal((5, 5))
            rep = retrieval_metrics(sim)
            r1, r5, r10, medr = oracle_retrieval(sim)
            assert (rep.r1, rep.r5, rep.r10, rep.medr) == (r1, r5, r10, medr)

    def test_monotone_recalls(self, rng):
        rep = retrieval_metrics(rng.standard_normal((12, 12)))
        assert rep.r1 <= rep.r5 <= rep.r10

    def test_non_square_needs_pairing(self):
        with pytest.raises(ValueError, match="pairing"):
            retrieval_metrics(np.ones((3, 4)))

    def test_explicit_pairing(self):
        sim = np.zeros((3, 2))
        sim[2, 0] = 1.0
        sim[0, 1] = 1.0
        rep = retrieval_metrics(sim, pairing=np.array([2, 0]))
        assert rep.r1 == 100.0

    def test_temperature_invariance(self, rng):
        sim = rng.standard_normal((8, 8))
        base = retrieval_metrics(sim)
        for tau in (0.05, 0.07, 1.0):
            scaled = retrieval_metrics(sim / tau)
            assert scaled == base


class TestBoundaryGap:
    def test_block_diagonal_gap_one(self):
        m = np.kron(np.eye(2), np.ones((2, 2)))
        assert boundary_gap(m, np.array([0, 0, 1, 1])) == pytest.approx(1.0)

    def test_constant_matrix_zero(self):
        assert boundary_gap(np.full((4, 4), 0.3), np.array([0, 0, 1, 1])) == pytest.approx(0.0)

    def test_random_matches_oracle(self, rng):
        for _ in range(20):
            m = rng.standard_normal((4, 4))
            labels = np.array([0, 1, 0, 1])
            assert boundary_gap(m, labels) == pytest.approx(oracle_gap(m, labels), abs=1e-12)

    def test_single_scene_rejected(self):
        with pytest.raises(ValueError, match="two scenes"):
            boundary_gap(np.eye(3), np.zeros(3))

    def test_row_labels_majority(self):
        labels = np.array([0, 0, 0, 1, 1, 1, 1, 1], dtype=np.int8)
        np.testing.assert_array_equal(temporal_row_labels(labels, 2), [0, 0, 1, 1])


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(4)
    return build_model(TINY_MODEL, 8, 32, 32)


class TestFrameSimilarity:
    def test_diagonal_and_symmetry(self, model, tiny_corpus):
        m = frame_similarity_matrix(model, tiny_corpus.items[0].video)
        assert m.shape == (4, 4)
        np.testing.assert_allclose(np.diag(m), np.ones(4), atol=1e-6)
        np.testing.assert_allclose(m, m.T, atol=1e-6)

    def test_static_video_near_constant(self, model):
        from gvilm.synthcorpus import ObjectSpec, SceneSpec, render_video

        scene = SceneSpec(
            objects=(ObjectSpec("square", "red", "static", (0.5, 0.5), 4),),
            background=0.1,
            frames=8,
            height=32,
            width=32,
            seed=0,
        )
        video, _ = render_video(scene)
        m = frame_similarity_matrix(model, video)
        assert m.min() > 0.9  # identical frames differ only via positional embeddings


class TestGrounding:
    def test_voxel_overlap_perfect_assignment(self):
        grid = PatchGrid(8, 32, 32, (2, 8, 8))
        item = CaptionedVideo(
            video=np.zeros((8, 32, 32, 3), dtype=np.float32),
            caption="a red circle stays still",
            noun_spans=((2, 12, 0),),
            region_masks=np.zeros((1, 8, 32, 32), dtype=bool),
            scene_label=np.zeros(8, dtype=np.int8),
        )
        # object occupies exactly the pixel block of voxel (t=0, h=1, w=2)
        item.region_masks[0, 0:2, 8:16, 16:24] = True
        assignment = np.zeros((64, 4))
        assignment[:, 3] = 1.0  # everything in group 3 ...
        voxel_index = 0 * 16 + 1 * 4 + 2
        assignment[voxel_index] = [0, 0, 1, 0]  # ... except the object voxel in group 2
        score = _voxel_object_overlap(assignment, item, grid)
        assert score[2, 0] == 1.0  # group 2 = exactly the object voxel
        assert score[3, 0] == 0.0  # group 3 covers everything else
        assert score[0, 0] == 0.0  # empty group can never score

    def test_k_zero_vacuous(self, model, tiny_corpus, tiny_config):
        from gvilm.config import replace

        cfg = replace(tiny_config, model_nouns_k=0)
        rep = grounding_accuracy(model, tiny_corpus.items[:2], cfg)
        assert rep == GroundingReport(accuracy=1.0, chance=0.0, n_pairs=0)

    def test_untrained_accuracy_near_chance(self, model, tiny_corpus, tiny_config):
        rep = grounding_accuracy(model, tiny_corpus.items[:8], tiny_config)
        assert rep.n_pairs == 16
        assert 0.0 <= rep.accuracy <= 1.0
        # untrained selection is uninformed: within 3 permutation-null sigmas
        sigma = max(np.sqrt(rep.chance * (1 - rep.chance) / rep.n_pairs), 1 / rep.n_pairs)
        assert abs(rep.accuracy - rep.chance) <= 4 * sigma

    def test_overlays_shapes(self, model, tiny_corpus, tiny_config):
        overlays = noun_group_masks(model, tiny_corpus.items[0], tiny_config)
        assert len(overlays) == tiny_config.model.nouns_k
        for phrase, pred, true in overlays:
            assert pred.shape == (32, 32) and true.shape == (32, 32)
            assert isinstance(phrase, str) and phrase


class TestEvaluationPurity:
    def test_model_parameters_untouched(self, model, tiny_corpus, tiny_config):
        before = parameter_hash(model)
        similarity_matrix(model, tiny_corpus.items[:4], tiny_config)
        grounding_accuracy(model, tiny_corpus.items[:4], tiny_config)
        frame_similarity_matrix(model, tiny_corpus.items[0].video)
        assert parameter_hash(model) == before


class TestReportFiles:
    def test_heatmap_dimensions(self, tmp_path):
        from PIL import Image

        heatmap_png(np.random.default_rng(0).random((4, 6)), tmp_path / "h.png", scale=16)
        with Image.open(tmp_path / "h.png") as img:
            assert img.size == (6 * 16, 4 * 16)

    def test_constant_matrix_midgray(self, tmp_path):
        from PIL import Image

        heatmap_png(np.full((2, 2), 0.7), tmp_path / "c.png", scale=1)
        with Image.open(tmp_path / "c.png") as img:
            assert set(np.asarray(img).flatten()) == {128}

    def test_summary_byte_identical_on_rerun(self, tiny_config, tiny_corpus, tmp_path):
        run_dir = tmp_path / "run"
        train(tiny_config, tiny_corpus, run_dir)
        out1, out2 = tmp_path / "rep1", tmp_path / "rep2"
        report(run_dir, out1)
        report(run_dir, out2)
        assert (out1 / "summary.json").read_bytes() == (out2 / "summary.json").read_bytes()

    def test_missing_metrics_fields_omitted(self, tmp_path):
        run_dir = tmp_path / "empty_run"
        run_dir.mkdir()
        write_summary({"grounding": {"accuracy": 0.5}}, run_dir / "grounding.json")
        report(run_dir, tmp_path / "rep")
        summary = json.loads((tmp_path / "rep" / "summary.json").read_text())
        assert "grounding" in summary
        assert "steps" not in summary and "retrieval" not in summary

    def test_report_renders_npy_heatmaps(self, tmp_path, rng):
        run_dir = tmp_path / "r"
        run_dir.mkdir()
        np.save(run_dir / "frame_sim_000.npy", rng.random((4, 4)))
        written = report(run_dir, tmp_path / "out")
        assert (tmp_path / "out" / "frame_sim_000.png").exists()
        assert any(p.name == "summary.json" for p in written)


class TestEncodePool:
    def test_shapes_and_norms(self, model, tiny_corpus, tiny_config):
        f_v, f_c = encode_pool(model, tiny_corpus.items[:5], tiny_config, batch=2)
        assert f_v.shape == (5, 16) and f_c.shape == (5, 16)
        np.testing.assert_allclose(np.linalg.norm(f_v, axis=1), 1.0, atol=1e-6)
        np.testing.assert_allclose(np.linalg.norm(f_c, axis=1), 1.0, atol=1e-6)

    def test_batching_invariance(self, model, tiny_corpus, tiny_config):
        a = encode_pool(model, tiny_corpus.items[:5], tiny_config, batch=2)
        b = encode_pool(model, tiny_corpus.items[:5], tiny_config, batch=5)
        np.testing.assert_allclose(a[0], b[0], atol=1e-6)
        np.testing.assert_allclose(a[1], b[1], atol=1e-6)
