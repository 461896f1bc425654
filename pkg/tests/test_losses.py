import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gvilm.config import LossConfig
from gvilm.encoders import PatchGrid
from gvilm.losses import (
    LossError,
    clip_pool,
    global_contrastive_loss,
    grounding_loss,
    grounding_matrix,
    grounding_similarity,
    scaled_softmax,
    temporal_assignment,
    temporal_grouping_loss,
    total_loss,
    weighted_ce_directions,
)

# -- independent scalar oracles (pure python + math) ---------------------------


def oracle_softmax(xs, tau):
    m = max(x / tau for x in xs)
    exps = [math.exp(x / tau - m) for x in xs]
    z = sum(exps)
    return [e / z for e in exps]


def oracle_grounding_similarity(groups, nouns, tau):
    # groups: M x d, nouns: K x d lists of unit vectors
    total = 0.0
    for n in nouns:
        sims = [sum(gi * ni for gi, ni in zip(g, n)) for g in groups]
        weights = oracle_softmax(sims, tau)
        agg = [sum(w * g[i] for w, g in zip(weights, groups)) for i in range(len(n))]
        norm_a = math.sqrt(sum(a * a for a in agg))
        norm_n = math.sqrt(sum(x * x for x in n))
        total += sum(a * x for a, x in zip(agg, n)) / (norm_a * norm_n)
    return total / len(nouns)


def oracle_weighted_ce(scores, wv, wc, tau):
    # scores[i][j] compares video i and caption j; returns (v->c, c->v)
    b = len(scores)
    loss_v2c = 0.0
    for i in range(b):
        logp = [math.log(p) for p in oracle_softmax(scores[i], tau)]
        loss_v2c -= sum(wv[i][j] * logp[j] for j in range(b))
    loss_c2v = 0.0
    for i in range(b):
        column = [scores[j][i] for j in range(b)]
        logp = [math.log(p) for p in oracle_softmax(column, tau)]
        loss_c2v -= sum(wc[i][j] * logp[j] for j in range(b))
    return loss_v2c / b, loss_c2v / b


def oracle_temporal_loss(assign, masks):
    b, n_t = len(assign), len(assign[0])
    total = 0.0
    for i in range(b):
        acc = 0.0
        for j in range(n_t):
            onehot = (1.0, 0.0) if masks[i][j] == 0 else (0.0, 1.0)
            acc += (assign[i][j][0] - onehot[0]) ** 2 + (assign[i][j][1] - onehot[1]) ** 2
        total += acc / (n_t * 2)
    return total / b


def unit_rows(rng, *shape):
    x = rng.standard_normal(shape)
    return torch.from_numpy(x / np.linalg.norm(x, axis=-1, keepdims=True))


class TestScaledSoftmax:
    def test_symmetric_pair(self):
        out = scaled_softmax(torch.tensor([0.0, 0.0]), 1.0)
        np.testing.assert_allclose(out.numpy(), [0.5, 0.5])

    def test_closed_form(self):
        out = scaled_softmax(torch.tensor([1.0, 0.0], dtype=torch.float64), 1.0)
        e = math.e
        np.testing.assert_allclose(out.numpy(), [e / (e + 1), 1 / (e + 1)], atol=1e-12)

    @given(st.lists(st.floats(-30, 30), min_size=1, max_size=8), st.floats(0.05, 2.0))
    @settings(max_examples=80, deadline=None)
    def test_sums_to_one(self, xs, tau):
        out = scaled_softmax(torch.tensor(xs, dtype=torch.float64), tau)
        assert abs(float(out.sum()) - 1.0) <= 1e-12

    def test_nonfinite_rejected(self):
        with pytest.raises(LossError):
            scaled_softmax(torch.tensor([float("inf"), 0.0]), 1.0)

    def test_nonpositive_tau_rejected(self):
        with pytest.raises(ValueError):
            scaled_softmax(torch.tensor([1.0]), 0.0)


class TestGroundingSimilarity:
    def test_single_group_single_noun_collapses_to_dot(self, rng):
        g = unit_rows(rng, 1, 8)
        n = unit_rows(rng, 1, 8)
        got = float(grounding_similarity(g, n, 1.0))
        assert abs(got - float(g[0] @ n[0])) <= 1e-12

    def test_worked_two_group_example(self):
        groups = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
        noun = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        got = float(grounding_similarity(groups, noun, 1.0))
        expected = oracle_grounding_similarity(
            [[1.0, 0.0], [0.0, 1.0]], [[1.0, 0.0]], 1.0
        )
        assert abs(got - expected) <= 1e-12
        assert round(expected, 4) == 0.9385

    def test_orthogonal_noun_scores_zero(self):
        groups = torch.tensor([[1.0, 0, 0], [0, 1.0, 0]], dtype=torch.float64)
        noun = torch.tensor([[0.0, 0, 1.0]], dtype=torch.float64)
        assert abs(float(grounding_similarity(groups, noun, 1.0))) <= 1e-12

    def test_matrix_matches_oracle(self, rng):
        groups = unit_rows(rng, 3, 4, 6)
        nouns = unit_rows(rng, 3, 2, 6)
        got = grounding_matrix(groups, nouns, 0.07)
        for i in range(3):
            for j in range(3):
                expected = oracle_grounding_similarity(
                    groups[i].tolist(), nouns[j].tolist(), 0.07
                )
                assert abs(float(got[i, j]) - expected) <= 1e-10


class TestGroundingLoss:
    def test_batch_of_one_is_zero(self):
        g = torch.tensor([[0.3]], dtype=torch.float64)
        eye = torch.ones(1, 1, dtype=torch.float64)
        assert abs(float(grounding_loss(g, eye, eye, 0.07))) <= 1e-12

    def test_dominant_diagonal_drives_loss_to_zero(self):
        g = 50.0 * torch.eye(4, dtype=torch.float64)
        eye = torch.eye(4, dtype=torch.float64)
        assert float(grounding_loss(g, eye, eye, 1.0)) < 1e-8

    def test_random_instance_matches_oracle(self, rng):
        b = 3
        g = torch.from_numpy(rng.standard_normal((b, b)))
        betas = rng.uniform(0.25, 1.0, size=b)
        partners = np.array([1, 2, 0])
        wv = np.zeros((b, b))
        for i in range(b):
            wv[i, i] += betas[i]
            wv[i, partners[i]] += 1 - betas[i]
        wv_t = torch.from_numpy(wv)
        got = float(grounding_loss(g, wv_t, wv_t.T, 0.07))
        v2c, c2v = oracle_weighted_ce(g.tolist(), wv.tolist(), wv.T.tolist(), 0.07)
        assert abs(got - (v2c + c2v)) <= 1e-10


class TestClipPool:
    GRID = PatchGrid(8, 32, 32, (2, 8, 8))

    def test_constant_tokens(self):
        z = torch.full((2, 64, 5), 3.25)
        out = clip_pool(z, self.GRID, 2)
        assert out.shape == (2, 4, 5)
        np.testing.assert_allclose(out.numpy(), 3.25)

    def test_spatial_permutation_invariance(self, rng):
        z = torch.from_numpy(rng.standard_normal((1, 64, 3)))
        out = clip_pool(z, self.GRID, 2)
        zp = z.reshape(1, 4, 16, 3)[:, :, torch.randperm(16), :].reshape(1, 64, 3)
        np.testing.assert_allclose(clip_pool(zp, self.GRID, 2).numpy(), out.numpy(), atol=1e-12)

    def test_misaligned_window_rejected(self):
        with pytest.raises(ValueError, match="multiple of the temporal patch"):
            clip_pool(torch.zeros(1, 64, 3), self.GRID, 3)


class TestTemporalAssignment:
    def test_closed_form_logits(self):
        # rows: bg center (0,1); fg center (1,0); probe row equals fg center
        z = torch.tensor([[0.0, 1.0], [1.0, 0.0], [1.0, 0.0]], dtype=torch.float64)
        mask = torch.tensor([0, 1, 1])
        a = temporal_assignment(z, mask)
        p = oracle_softmax([0.0, 1.0], 1.0)
        np.testing.assert_allclose(a[1].numpy(), p, atol=1e-12)

    def test_equal_centers_give_uniform(self):
        z = torch.full((4, 3), 0.7, dtype=torch.float64)
        a = temporal_assignment(z, torch.tensor([0, 1, 1, 0]))
        np.testing.assert_allclose(a.numpy(), 0.5)

    def test_rows_sum_to_one(self, rng):
        z = torch.from_numpy(rng.standard_normal((2, 6, 4)))
        masks = torch.tensor([[0, 1, 1, 0, 0, 1], [1, 1, 0, 0, 1, 0]])
        a = temporal_assignment(z, masks)
        np.testing.assert_allclose(a.sum(-1).numpy(), 1.0, atol=1e-12)

    def test_single_class_mask_rejected(self):
        with pytest.raises(ValueError, match="both"):
            temporal_assignment(torch.zeros(3, 2), torch.tensor([1, 1, 1]))


class TestTemporalGroupingLoss:
    def test_perfect_assignment_is_zero(self):
        masks = torch.tensor([[0, 1, 1, 0]])
        onehot = torch.stack([1.0 - masks.float(), masks.float()], dim=-1)
        assert float(temporal_grouping_loss(onehot, masks)) == 0.0

    def test_uniform_assignment_quarter(self):
        masks = torch.tensor([[0, 1, 1, 0]])
        a = torch.full((1, 4, 2), 0.5)
        assert abs(float(temporal_grouping_loss(a, masks)) - 0.25) <= 1e-12

    def test_random_matches_oracle(self, rng):
        a = torch.from_numpy(rng.uniform(size=(2, 5, 2)))
        masks = torch.from_numpy(rng.integers(0, 2, size=(2, 5)))
        got = float(temporal_grouping_loss(a, masks))
        expected = oracle_temporal_loss(a.tolist(), masks.tolist())
        assert abs(got - expected) <= 1e-12


class TestGlobalContrastive:
    def test_orthonormal_identity_weights(self):
        f = torch.eye(2, dtype=torch.float64)
        eye = torch.eye(2, dtype=torch.float64)
        got = float(global_contrastive_loss(f, f, eye, eye, 1.0))
        per_direction = -math.log(math.e / (math.e + 1))
        assert abs(got - 2 * per_direction) <= 1e-12
        assert round(per_direction, 4) == 0.3133

    def test_identity_weights_equal_infonce_oracle(self, rng):
        b = 4
        f_v, f_c = unit_rows(rng, b, 8), unit_rows(rng, b, 8)
        eye = torch.eye(b, dtype=torch.float64)
        got = float(global_contrastive_loss(f_v, f_c, eye, eye, 0.07))
        scores = (f_v @ f_c.T).tolist()
        v2c, c2v = oracle_weighted_ce(scores, np.eye(b).tolist(), np.eye(b).tolist(), 0.07)
        assert abs(got - (v2c + c2v)) <= 1e-10

    def test_batch_of_one_zero(self):
        f = torch.ones(1, 4, dtype=torch.float64) / 2.0
        one = torch.ones(1, 1, dtype=torch.float64)
        assert abs(float(global_contrastive_loss(f, f, one, one, 0.07))) <= 1e-12


class TestTotalLoss:
    def test_plain_sum_at_unit_weights(self):
        parts = [torch.tensor(0.5), torch.tensor(1.5), torch.tensor(2.0)]
        assert float(total_loss(*parts, LossConfig())) == 4.0

    def test_contrastive_only(self):
        parts = [torch.tensor(0.5), torch.tensor(1.5), torch.tensor(2.0)]
        weights = LossConfig(w_temporal=0.0, w_grounding=0.0, w_contrastive=1.0)
        assert float(total_loss(*parts, weights)) == 2.0

    def test_scenario_three_weights(self):
        parts = [torch.tensor(0.5), torch.tensor(1.5), torch.tensor(2.0)]
        weights = LossConfig(w_temporal=1.0, w_grounding=0.0, w_contrastive=1.0)
        assert float(total_loss(*parts, weights)) == 2.5

    def test_nonfinite_component_named(self):
        with pytest.raises(LossError, match="grounding"):
            total_loss(torch.tensor(0.0), torch.tensor(float("nan")), torch.tensor(0.0), LossConfig())


class TestLossProperties:
    def _soft_weights(self, rng, b):
        betas = rng.uniform(0.25, 1.0, size=b)
        partners = (np.arange(b) + 1 + rng.integers(0, b - 1, size=b)) % b
        wv = np.zeros((b, b))
        for i in range(b):
            wv[i, i] += betas[i]
            wv[i, partners[i]] += 1 - betas[i]
        return torch.from_numpy(wv)

    def test_batch_permutation_invariance(self, rng):
        b = 5
        f_v, f_c = unit_rows(rng, b, 8), unit_rows(rng, b, 8)
        wv = self._soft_weights(rng, b)
        base = float(global_contrastive_loss(f_v, f_c, wv, wv.T, 0.07))
        perm = torch.from_numpy(rng.permutation(b))
        permuted = float(
            global_contrastive_loss(
                f_v[perm], f_c[perm], wv[perm][:, perm], wv.T[perm][:, perm], 0.07
            )
        )
        assert abs(base - permuted) <= 1e-10

    def test_cross_entropy_floor_per_direction(self, rng):
        b = 6
        scores = torch.from_numpy(rng.standard_normal((b, b)))
        wv = self._soft_weights(rng, b)
        wc = wv.T.contiguous()
        v2c, c2v = weighted_ce_directions(scores, wv, wc, 0.07)
        def mean_entropy(w):
            rows = w.numpy()
            h = 0.0
            for row in rows:
                h += -sum(p * math.log(p) for p in row if p > 0)
            return h / len(rows)
        assert float(v2c) >= mean_entropy(wv) - 1e-12
        assert float(c2v) >= mean_entropy(wc) - 1e-12

    def test_ranking_invariance_across_taus(self, rng):
        scores = torch.from_numpy(rng.standard_normal((6, 6)))
        argmaxes = [
            torch.softmax(scores / tau, dim=1).argmax(dim=1) for tau in (0.05, 0.07, 1.0)
        ]
        assert torch.equal(argmaxes[0], argmaxes[1])
        assert torch.equal(argmaxes[1], argmaxes[2])

    def test_infonce_reduction_grounding(self, rng):
        # augmentation disabled: Wv = I recovers the one-hot grounding loss
        b = 4
        groups = unit_rows(rng, b, 4, 6)
        nouns = unit_rows(rng, b, 2, 6)
        g = grounding_matrix(groups, nouns, 0.07)
        eye = torch.eye(b, dtype=torch.float64)
        got = float(grounding_loss(g, eye, eye, 0.07))
        v2c, c2v = oracle_weighted_ce(g.tolist(), np.eye(b).tolist(), np.eye(b).tolist(), 0.07)
        assert abs(got - (v2c + c2v)) <= 1e-10
