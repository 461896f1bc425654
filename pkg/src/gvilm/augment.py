"""Temporal cut-and-paste augmentation.

A video is split into N_t clips of t frames. For each batch item we sample a
clip window [s, e] (never the full video), paste those clips of the item onto
a randomly chosen partner video, and record the foreground ratio beta. The
soft positive-label matrix Wv has beta at the item's own caption and 1-beta
at the partner's caption; Wc is its transpose.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ConfigError


@dataclass(frozen=True)
class PasteWindow:
    s: int  # start clip index (inclusive)
    e: int  # end clip index (inclusive)
    n_clips: int
    t: int  # frames per clip

    def __post_init__(self):
        if self.n_clips < 2:
            raise ConfigError(f"need at least 2 clips, got {self.n_clips}")
        if not (0 <= self.s <= self.e < self.n_clips):
            raise ValueError(f"invalid window ({self.s}, {self.e}) for {self.n_clips} clips")
        if self.s == 0 and self.e == self.n_clips - 1:
            raise ValueError("full-video window is excluded; the blend must mix two sources")
        if self.t < 1:
            raise ValueError("clip window size t must be >= 1")


def sample_window(n_clips: int, rng: np.random.Generator, t: int = 1) -> PasteWindow:
    """Uniform draw over all windows 0 <= s <= e < N_t except the full one."""
    if n_clips < 2:
        raise ConfigError(f"cut-and-paste needs at least 2 clips, got {n_clips}")
    pairs = [
        (s, e)
        for s in range(n_clips)
        for e in range(s, n_clips)
        if not (s == 0 and e == n_clips - 1)
    ]
    s, e = pairs[int(rng.integers(len(pairs)))]
    return PasteWindow(s=s, e=e, n_clips=n_clips, t=t)


def make_mask(window: PasteWindow) -> np.ndarray:
    """Binary clip mask: 1 on [s, e] inclusive, 0 elsewhere."""
    mask = np.zeros(window.n_clips, dtype=np.int8)
    mask[window.s : window.e + 1] = 1
    return mask


def foreground_ratios(masks: np.ndarray, beta_literal: bool = False) -> np.ndarray:
    """beta per item: fraction of foreground clips.

    Default is the inclusive count mean(mask) = (e - s + 1) / N_t; the
    ``beta_literal`` flag reproduces the exclusive form (e - s) / N_t instead.
    """
    masks = np.asarray(masks)
    if not beta_literal:
        return masks.mean(axis=1, dtype=np.float64)
    n_clips = masks.shape[1]
    out = np.zeros(masks.shape[0], dtype=np.float64)
    for i, m in enumerate(masks):
        ones = np.flatnonzero(m)
        out[i] = (ones[-1] - ones[0]) / n_clips
    return out


def weight_matrices(
    masks: np.ndarray,
    partners: np.ndarray,
    batch_size: int,
    beta_literal: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Soft positive-label matrices (Wv, Wc) from clip masks and partners.

    Row i of Wv carries beta_i at column i and 1-beta_i at column partner[i];
    when an item is its own partner the two contributions accumulate to 1.
    """
    masks = np.asarray(masks)
    if masks.shape[0] != batch_size or len(partners) != batch_size:
        raise ValueError("masks/partners do not match the batch size")
    if np.any((partners < 0) | (partners >= batch_size)):
        raise ValueError("partner indices out of range")
    betas = foreground_ratios(masks, beta_literal=beta_literal)
    wv = np.zeros((batch_size, batch_size), dtype=np.float64)
    rows = np.arange(batch_size)
    np.add.at(wv, (rows, rows), betas)
    np.add.at(wv, (rows, partners), 1.0 - betas)
    return wv, wv.T.copy()


@dataclass
class BlendedBatch:
    videos: np.ndarray  # float32 (B, T, H, W, C), the blended inputs
    partners: np.ndarray  # int64 (B,)
    masks: np.ndarray  # int8 (B, N_t)
    betas: np.ndarray  # float64 (B,)
    wv: np.ndarray  # float64 (B, B), rows sum to 1
    wc: np.ndarray  # float64 (B, B) == wv.T


def cut_and_paste(
    videos: np.ndarray,
    window_size: int,
    rng: np.random.Generator,
    enabled: bool = True,
    beta_literal: bool = False,
) -> BlendedBatch:
    """Blend each video's sampled clip window onto a random partner.

    ``videos`` is (B, T, H, W, C) with a shared shape. Partners are drawn
    uniformly from the rest of the batch (a singleton batch pairs with
    itself, which makes the blend the identity). With ``enabled=False`` the
    batch passes through unchanged: all-ones masks, beta = 1 and Wv = I.
    """
    videos = np.asarray(videos)
    if videos.ndim != 5:
        raise ValueError(f"expected (B, T, H, W, C) videos, got shape {videos.shape}")
    b, t_frames = videos.shape[0], videos.shape[1]
    if b < 1:
        raise ValueError("batch must contain at least one video")
    if t_frames % window_size != 0:
        raise ConfigError(
            f"frame count {t_frames} is not divisible by the clip window size {window_size}"
        )
    n_clips = t_frames // window_size

    if not enabled:
        eye = np.eye(b, dtype=np.float64)
        return BlendedBatch(
            videos=videos.copy(),
            partners=np.arange(b, dtype=np.int64),
            masks=np.ones((b, n_clips), dtype=np.int8),
            betas=np.ones(b, dtype=np.float64),
            wv=eye,
            wc=eye.copy(),
        )

    masks = np.zeros((b, n_clips), dtype=np.int8)
    partners = np.zeros(b, dtype=np.int64)
    blended = np.empty_like(videos)
    for i in range(b):
        window = sample_window(n_clips, rng, t=window_size)
        masks[i] = make_mask(window)
        if b == 1:
            partners[i] = 0
        else:
            offset = int(rng.integers(1, b))
            partners[i] = (i + offset) % b
        frame_mask = np.repeat(masks[i].astype(bool), window_size)
        blended[i] = np.where(frame_mask[:, None, None, None], videos[i], videos[partners[i]])

    wv, wc = weight_matrices(masks, partners, b, beta_literal=beta_literal)
    betas = foreground_ratios(masks, beta_literal=beta_literal)
    return BlendedBatch(
        videos=blended, partners=partners, masks=masks, betas=betas, wv=wv, wc=wc
    )
