"""Evaluation: zero-shot retrieval, temporal diagnostics, grounding accuracy.

Everything here is read-only over the model (wrapped in no_grad) and
deterministic: gumbel noise is off, assignments are pure argmax, ranking
ties break by ascending item index, and report files carry no timestamps.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .config import TrainConfig
from .encoders import DualEncoder, extract_noun_pairs, prompt_noun, tokenize_batch
from .synthcorpus import CaptionedVideo


@dataclass
class RetrievalReport:
    r1: float  # percent
    r5: float
    r10: float
    medr: float
    direction: str
    pool_size: int

    def as_dict(self) -> dict:
        return {
            "R@1": self.r1,
            "R@5": self.r5,
            "R@10": self.r10,
            "MedR": self.medr,
            "direction": self.direction,
            "pool_size": self.pool_size,
        }


def retrieval_metrics(sim: np.ndarray, pairing: np.ndarray | None = None) -> RetrievalReport:
    """Text->video retrieval over a similarity matrix sim[video, caption].

    Each caption ranks all videos by similarity, ties broken by ascending
    video index; ``pairing[j]`` names caption j's true video (defaults to the
    diagonal, which requires a square matrix).
    """
    sim = np.asarray(sim)
    n_videos, n_captions = sim.shape
    if pairing is None:
        if n_videos != n_captions:
            raise ValueError("non-square similarity matrix needs an explicit pairing")
        pairing = np.arange(n_captions)
    ranks = np.zeros(n_captions, dtype=np.int64)
    for j in range(n_captions):
        scores = sim[:, j]
        true = int(pairing[j])
        better = int(np.sum(scores > scores[true]))
        tied_ahead = int(np.sum(scores[:true] == scores[true]))
        ranks[j] = 1 + better + tied_ahead
    return RetrievalReport(
        r1=100.0 * float(np.mean(ranks <= 1)),
        r5=100.0 * float(np.mean(ranks <= 5)),
        r10=100.0 * float(np.mean(ranks <= 10)),
        medr=float(np.median(ranks)),
        direction="text->video",
        pool_size=n_videos,
    )


def encode_pool(
    model: DualEncoder, items: list[CaptionedVideo], config: TrainConfig, batch: int = 32
) -> tuple[np.ndarray, np.ndarray]:
    """Pooled video and caption embeddings for a retrieval pool (noise off)."""
    f_v, f_c = [], []
    max_len = config.model.text_max_len
    with torch.no_grad():
        for lo in range(0, len(items), batch):
            chunk = items[lo : lo + batch]
            videos = torch.from_numpy(np.stack([it.video for it in chunk]))
            out = model.encode_video(videos, generator=None, hard=True)
            ids = tokenize_batch([it.caption for it in chunk], max_len)
            f_v.append(out.f_v.numpy())
            f_c.append(model.encode_text(ids).numpy())
    return np.concatenate(f_v), np.concatenate(f_c)


def similarity_matrix(
    model: DualEncoder, items: list[CaptionedVideo], config: TrainConfig
) -> np.ndarray:
    f_v, f_c = encode_pool(model, items, config)
    return f_v @ f_c.T


def frame_similarity_matrix(model: DualEncoder, video: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity between per-temporal-row features.

    Features are the spatial mean of the last-layer tokens at each temporal
    grid index, unit-normalized; output is (T', T').
    """
    with torch.no_grad():
        out = model.encode_video(
            torch.from_numpy(video).unsqueeze(0), generator=None, hard=True, with_groups=False
        )
        gt, gh, gw = model.grid.grid
        rows = out.z_v[0].reshape(gt, gh * gw, -1).mean(dim=1)
        rows = torch.nn.functional.normalize(rows, dim=-1)
        return (rows @ rows.T).numpy().astype(np.float64)


def temporal_row_labels(scene_label: np.ndarray, temporal_patch: int) -> np.ndarray:
    """Per-temporal-row scene labels by majority over each row's frames (ties -> 0)."""
    label = np.asarray(scene_label)
    rows = label.reshape(-1, temporal_patch)
    return (rows.mean(axis=1) > 0.5).astype(np.int64)


def boundary_gap(matrix: np.ndarray, labels: np.ndarray) -> float:
    """Mean within-scene similarity minus mean cross-scene similarity.

    The diagonal (self-similarity) is excluded from the within-scene mean.
    """
    matrix = np.asarray(matrix)
    labels = np.asarray(labels)
    if len(labels) != matrix.shape[0]:
        raise ValueError("label length must match the matrix size")
    if len(np.unique(labels)) != 2:
        raise ValueError("boundary gap needs exactly two scenes")
    same = labels[:, None] == labels[None, :]
    offdiag = ~np.eye(len(labels), dtype=bool)
    within = matrix[same & offdiag].mean()
    cross = matrix[~same].mean()
    return float(within - cross)


@dataclass
class GroundingReport:
    accuracy: float
    chance: float  # permutation null: expectation over a uniform group choice
    n_pairs: int

    def as_dict(self) -> dict:
        return {"accuracy": self.accuracy, "chance": self.chance, "n_pairs": self.n_pairs}


def _voxel_object_overlap(
    assignment: np.ndarray, item: CaptionedVideo, grid
) -> np.ndarray:
    """score[m, o] = 1 if >50% of group m's voxels intersect object o's mask."""
    gt, gh, gw = grid.grid
    pt, ph, pw = grid.patch
    n_tokens, n_groups = assignment.shape
    n_objects = item.region_masks.shape[0]
    # voxel -> does it contain any pixel of object o
    overlap = np.zeros((n_tokens, n_objects), dtype=bool)
    masks = item.region_masks
    for n in range(n_tokens):
        ti, rem = divmod(n, gh * gw)
        hi, wi = divmod(rem, gw)
        block = masks[
            :,
            ti * pt : (ti + 1) * pt,
            hi * ph : (hi + 1) * ph,
            wi * pw : (wi + 1) * pw,
        ]
        overlap[n] = block.any(axis=(1, 2, 3))
    score = np.zeros((n_groups, n_objects), dtype=np.float64)
    members = assignment.argmax(axis=1)
    for m in range(n_groups):
        sel = members == m
        if not sel.any():
            continue  # empty group can never majority-overlap
        frac = overlap[sel].mean(axis=0)
        score[m] = frac > 0.5
    return score


def grounding_accuracy(
    model: DualEncoder,
    items: list[CaptionedVideo],
    config: TrainConfig,
    rng: np.random.Generator | None = None,
) -> GroundingReport:
    """Fraction of (noun, object) pairs grounded by the best-matching group.

    For each noun the group token with maximum cosine similarity is selected;
    the pair scores 1 when more than half of that group's voxels intersect
    the object's ground-truth mask. The chance rate replaces the argmax with
    a uniform group choice, reported as its exact expectation (the mean score
    over all groups), which is the label-permutation baseline.
    """
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence([0]))
    k = config.model.nouns_k
    if k == 0:
        return GroundingReport(accuracy=1.0, chance=0.0, n_pairs=0)
    max_len = config.model.text_max_len
    hits, chances, n_pairs = 0.0, 0.0, 0
    with torch.no_grad():
        for item in items:
            pairs = extract_noun_pairs(item, k)
            prompts = [prompt_noun(phrase, rng) for phrase, _ in pairs]
            nouns = model.encode_text(tokenize_batch(prompts, max_len)).numpy()
            out = model.encode_video(
                torch.from_numpy(item.video).unsqueeze(0), generator=None, hard=True
            )
            groups = out.groups_common[0].numpy()  # (M, d_c)
            assignment = out.assignments[-1][0].numpy()  # (N, M) one-hot
            score = _voxel_object_overlap(assignment, item, model.grid)
            for (phrase, obj), noun in zip(pairs, nouns):
                best = int(np.argmax(groups @ noun))
                hits += score[best, obj]
                chances += score[:, obj].mean()
                n_pairs += 1
    if n_pairs == 0:
        return GroundingReport(accuracy=1.0, chance=0.0, n_pairs=0)
    return GroundingReport(
        accuracy=hits / n_pairs, chance=chances / n_pairs, n_pairs=n_pairs
    )


def noun_group_masks(
    model: DualEncoder,
    item: CaptionedVideo,
    config: TrainConfig,
    rng: np.random.Generator | None = None,
) -> list[tuple[str, np.ndarray, np.ndarray]]:
    """Per-noun (phrase, predicted pixels, true pixels) as 2D any-over-time masks.

    The predicted region is the pixel footprint of the voxels assigned to the
    noun's best-matching group token; used for grounding overlay images.
    """
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence([0]))
    k = config.model.nouns_k
    if k == 0:
        return []
    grid = model.grid
    gt, gh, gw = grid.grid
    pt, ph, pw = grid.patch
    with torch.no_grad():
        pairs = extract_noun_pairs(item, k)
        prompts = [prompt_noun(phrase, rng) for phrase, _ in pairs]
        nouns = model.encode_text(tokenize_batch(prompts, config.model.text_max_len)).numpy()
        out = model.encode_video(
            torch.from_numpy(item.video).unsqueeze(0), generator=None, hard=True
        )
        groups = out.groups_common[0].numpy()
        members = out.assignments[-1][0].numpy().argmax(axis=1)
    overlays = []
    for (phrase, obj), noun in zip(pairs, nouns):
        best = int(np.argmax(groups @ noun))
        pred = np.zeros((item.video.shape[0], grid.height, grid.width), dtype=bool)
        for n in np.flatnonzero(members == best):
            ti, rem = divmod(int(n), gh * gw)
            hi, wi = divmod(rem, gw)
            pred[
                ti * pt : (ti + 1) * pt,
                hi * ph : (hi + 1) * ph,
                wi * pw : (wi + 1) * pw,
            ] = True
        overlays.append((phrase, pred.any(axis=0), item.region_masks[obj].any(axis=0)))
    return overlays


def parameter_hash(model: DualEncoder) -> str:
    digest = hashlib.sha256()
    for name, param in sorted(model.state_dict().items()):
        digest.update(name.encode())
        digest.update(param.detach().numpy().tobytes())
    return digest.hexdigest()


# -- report rendering ----------------------------------------------------------


def heatmap_png(matrix: np.ndarray, path, scale: int = 16) -> None:
    """Monochrome nearest-neighbor heatmap; image size = matrix shape x scale.

    The value range is mapped affinely to 0..255 (constant matrices render
    mid-gray), with no metadata, so identical matrices give identical bytes.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    lo, hi = matrix.min(), matrix.max()
    if hi > lo:
        scaled = (matrix - lo) / (hi - lo)
    else:
        scaled = np.full_like(matrix, 0.5)
    img = Image.fromarray(np.round(scaled * 255).astype(np.uint8), mode="L")
    h, w = matrix.shape
    img = img.resize((w * scale, h * scale), Image.NEAREST)
    img.save(path, format="PNG")


def overlay_png(pred_mask: np.ndarray, true_mask: np.ndarray, path, scale: int = 8) -> None:
    """Grounding overlay: 0.5 * predicted-region + 0.5 * ground-truth, grayscale."""
    blend = 0.5 * pred_mask.astype(np.float64) + 0.5 * true_mask.astype(np.float64)
    heatmap_png(blend, path, scale=scale)


def loss_curves_png(records: list[dict], path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    steps = [r["step"] for r in records]
    fig, ax = plt.subplots(figsize=(7, 4))
    for key, label in (
        ("loss_total", "total"),
        ("loss_t", "temporal"),
        ("loss_g", "grounding"),
        ("loss_c", "contrastive"),
    ):
        ax.plot(steps, [r[key] for r in records], label=label, linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def write_summary(summary: dict, path) -> None:
    """Deterministic summary record: sorted keys, no timestamps."""
    Path(path).write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def report(run_dir, out_dir) -> list[Path]:
    """Collect a run directory into a report: summary, curves, heatmaps.

    Reads metrics.jsonl plus any eval summaries (retrieval.json,
    temporal.json, grounding.json) and matrix artifacts (*.npy) the eval
    commands left in the run directory. Missing pieces are omitted from the
    summary rather than null-filled.
    """
    from .trainer import read_metrics

    run_dir = Path(run_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    summary: dict = {}

    metrics_path = run_dir / "metrics.jsonl"
    if metrics_path.exists():
        records = read_metrics(metrics_path)
        if records:
            first, last = records[0], records[-1]
            summary["steps"] = len(records)
            summary["loss_total_first"] = first["loss_total"]
            summary["loss_total_final"] = last["loss_total"]
            curves = out_dir / "loss_curves.png"
            loss_curves_png(records, curves)
            written.append(curves)

    for name in ("retrieval", "temporal", "grounding"):
        src = run_dir / f"{name}.json"
        if src.exists():
            summary[name] = json.loads(src.read_text(encoding="utf-8"))

    for npy in sorted(run_dir.glob("*.npy")):
        png = out_dir / (npy.stem + ".png")
        heatmap_png(np.load(npy), png)
        written.append(png)

    summary_path = out_dir / "summary.json"
    write_summary(summary, summary_path)
    written.append(summary_path)
    return written
