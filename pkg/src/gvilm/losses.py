"""Training objectives: grounding, temporal grouping, weighted contrastive.

All functions are pure and dtype-polymorphic (float32 for training, float64
for gradient checks and oracle comparisons). Batch reductions use fixed
summation order so repeated runs are bit-identical.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .config import LossConfig
from .encoders import PatchGrid


class LossError(RuntimeError):
    """Raised when a loss input or component is not finite."""


def scaled_softmax(x: torch.Tensor, tau: float) -> torch.Tensor:
    """softmax(x / tau) along the last dim (log-sum-exp stabilized)."""
    if tau <= 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    if not torch.isfinite(x).all():
        raise LossError("scaled_softmax received non-finite input")
    return torch.softmax(x / tau, dim=-1)


def grounding_matrix(
    groups: torch.Tensor, nouns: torch.Tensor, tau: float
) -> torch.Tensor:
    """All-pairs grounding similarity G[i, j] between videos i and captions j.

    ``groups`` is (B, M, d_c) per-video group tokens and ``nouns`` is
    (B, K, d_c) per-caption noun tokens, all unit-norm. For every noun, group
    tokens are aggregated with softmax(tau)-weighted similarities and the
    score is the cosine between the noun and its aggregate, averaged over
    the K nouns.
    """
    sim = torch.einsum("imd,jkd->ijkm", groups, nouns)  # (Bv, Bc, K, M)
    weights = scaled_softmax(sim, tau)
    agg = torch.einsum("ijkm,imd->ijkd", weights, groups)
    cos = F.cosine_similarity(agg, nouns.unsqueeze(0), dim=-1)  # (Bv, Bc, K)
    return cos.mean(dim=-1)


def grounding_similarity(
    groups: torch.Tensor, nouns: torch.Tensor, tau: float
) -> torch.Tensor:
    """Grounding similarity G(v, c) for a single video/caption pair."""
    return grounding_matrix(groups.unsqueeze(0), nouns.unsqueeze(0), tau)[0, 0]


def weighted_ce_directions(
    scores: torch.Tensor, wv: torch.Tensor, wc: torch.Tensor, tau: float
) -> tuple[torch.Tensor, torch.Tensor]:
    """Both soft-label cross-entropy directions over a score matrix.

    ``scores[i, j]`` compares video i with caption j. The video->caption
    direction softmaxes each row over captions under weights wv; the
    caption->video direction softmaxes each column over videos under wc.
    Each direction is bounded below by the mean entropy of its weight rows.
    """
    if not torch.isfinite(scores).all():
        raise LossError("similarity scores are not finite")
    b = scores.shape[0]
    logp_v2c = F.log_softmax(scores / tau, dim=1)
    logp_c2v = F.log_softmax(scores / tau, dim=0)
    loss_v2c = -(wv * logp_v2c).sum() / b
    # wc[i, j] weights caption i against video j; logp_c2v[j, i] is that term
    loss_c2v = -(wc * logp_c2v.T).sum() / b
    return loss_v2c, loss_c2v


def grounding_loss(
    g_matrix: torch.Tensor, wv: torch.Tensor, wc: torch.Tensor, tau: float
) -> torch.Tensor:
    """Soft-label grounding loss over a precomputed G matrix (both directions)."""
    v2c, c2v = weighted_ce_directions(g_matrix, wv, wc, tau)
    return v2c + c2v


def global_contrastive_loss(
    f_v: torch.Tensor, f_c: torch.Tensor, wv: torch.Tensor, wc: torch.Tensor, tau: float
) -> torch.Tensor:
    """Weighted bidirectional contrastive loss over pooled embeddings."""
    v2c, c2v = weighted_ce_directions(f_v @ f_c.T, wv, wc, tau)
    return v2c + c2v


def clip_pool(z_v: torch.Tensor, grid: PatchGrid, window_size: int) -> torch.Tensor:
    """Clip-level features: spatial mean, then mean over each clip's rows.

    (B, N, d) tokens -> (B, N_t, d) with N_t = frames / window_size. The clip
    window must cover a whole number of temporal grid rows.
    """
    pt = grid.patch[0]
    if window_size % pt != 0:
        raise ValueError(
            f"clip window {window_size} is not a multiple of the temporal patch {pt}"
        )
    gt, gh, gw = grid.grid
    rows_per_clip = window_size // pt
    if gt % rows_per_clip != 0:
        raise ValueError(
            f"temporal grid {gt} is not divisible by rows per clip {rows_per_clip}"
        )
    b, n, d = z_v.shape
    if n != grid.n_tokens:
        raise ValueError(f"expected {grid.n_tokens} tokens, got {n}")
    x = z_v.reshape(b, gt, gh * gw, d).mean(dim=2)
    return x.reshape(b, gt // rows_per_clip, rows_per_clip, d).mean(dim=2)


def temporal_assignment(z_clip: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    """Soft background/foreground assignment per clip.

    Cluster centers are the mask-averaged clip features; the assignment is a
    plain softmax over the two dot products (column 0 = background, column 1
    = foreground). Masks must contain both classes.
    """
    if z_clip.ndim == 2:
        return temporal_assignment(z_clip.unsqueeze(0), masks.unsqueeze(0))[0]
    m = masks.to(z_clip.dtype)
    n_fg = m.sum(dim=1)
    n_bg = (1.0 - m).sum(dim=1)
    if (n_fg == 0).any() or (n_bg == 0).any():
        raise ValueError("clip mask must contain both foreground and background")
    z_b = ((1.0 - m).unsqueeze(-1) * z_clip).sum(dim=1) / n_bg.unsqueeze(-1)
    z_f = (m.unsqueeze(-1) * z_clip).sum(dim=1) / n_fg.unsqueeze(-1)
    centers = torch.stack([z_b, z_f], dim=-1)  # (B, d, 2)
    logits = torch.bmm(z_clip, centers)  # (B, N_t, 2)
    return torch.softmax(logits, dim=-1)


def temporal_grouping_loss(assign: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    """Mean squared error between assignments and the one-hot clip mask.

    One-hot orientation follows the (background, foreground) center order:
    m=0 -> (1, 0), m=1 -> (0, 1). The per-item mean runs over all N_t x 2
    entries, then over the batch.
    """
    if assign.ndim == 2:
        assign = assign.unsqueeze(0)
        masks = masks.unsqueeze(0)
    m = masks.to(assign.dtype)
    onehot = torch.stack([1.0 - m, m], dim=-1)
    return ((assign - onehot) ** 2).mean(dim=(1, 2)).mean()


def total_loss(
    loss_t: torch.Tensor, loss_g: torch.Tensor, loss_c: torch.Tensor, weights: LossConfig
) -> torch.Tensor:
    """Weighted sum of the three objectives; aborts naming any non-finite part."""
    for name, value in (("temporal", loss_t), ("grounding", loss_g), ("contrastive", loss_c)):
        if not torch.isfinite(torch.as_tensor(value)).all():
            raise LossError(f"{name} loss is not finite: {value}")
    return (
        weights.w_temporal * loss_t
        + weights.w_grounding * loss_g
        + weights.w_contrastive * loss_c
    )
