"""Dual encoder: video transformer with grouping blocks, text transformer.

Video side: the clip is cut into non-overlapping 3D voxels, linearly
projected and run through a pre-norm transformer. Learnable group tokens
live in a parallel branch: at a fixed set of layers a grouping block reads
the current token snapshot and updates the group tokens by hard-assigning
every video token to one group (gumbel-softmax straight-through). The
branch never writes back into the token stream, so the last-layer tokens
stay available for clip-level pooling.

Text side: whitespace tokenizer over the closed corpus vocabulary, a small
pre-norm transformer, and the [CLS] representation projected into the
common space. Noun phrases are wrapped in one of 12 prompt templates before
encoding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ConfigError, ModelConfig
from .synthcorpus import COLORS, MOTION_PHRASES, SHAPES, CaptionedVideo

PAD_ID = 0
CLS_ID = 1
UNK_ID = 2

PROMPT_TEMPLATES = (
    "A footage of a {}.",
    "A footage of the {}.",
    "A footage of one {}.",
    "A video of a {}.",
    "A video of the {}.",
    "A video of one {}.",
    "A portrait of a {}.",
    "A portrait of the {}.",
    "A portrait of one {}.",
    "A video footage of a {}.",
    "A video footage of the {}.",
    "A video footage of one {}.",
)


def _normalize(word: str) -> str:
    return word.lower().strip(".,!?")


def _build_vocab() -> dict[str, int]:
    words = {"a", "and", "then"}
    words.update(COLORS)
    words.update(SHAPES)
    for phrase in MOTION_PHRASES.values():
        words.update(phrase.split())
    for template in PROMPT_TEMPLATES:
        words.update(_normalize(w) for w in template.format("x").split())
    words.discard("")
    vocab = {"[PAD]": PAD_ID, "[CLS]": CLS_ID, "[UNK]": UNK_ID}
    for i, word in enumerate(sorted(words), start=len(vocab)):
        vocab[word] = i
    return vocab


VOCAB = _build_vocab()
VOCAB_SIZE = len(VOCAB)


def tokenize(text: str, max_len: int = 32) -> list[int]:
    """[CLS] + word ids, padded/truncated to ``max_len``. OOV words map to [UNK]."""
    ids = [CLS_ID]
    for word in text.split():
        ids.append(VOCAB.get(_normalize(word), UNK_ID))
        if len(ids) == max_len:
            break
    ids.extend([PAD_ID] * (max_len - len(ids)))
    return ids


def tokenize_batch(texts: list[str], max_len: int = 32) -> torch.Tensor:
    return torch.tensor([tokenize(t, max_len) for t in texts], dtype=torch.long)


def extract_noun_pairs(item: CaptionedVideo, k: int) -> list[tuple[str, int]]:
    """First k ground-truth (noun phrase, object id) pairs of a caption.

    Short captions repeat the last pair to reach k; k=0 disables grounding
    and returns an empty list.
    """
    if k == 0:
        return []
    if not item.noun_spans:
        raise ValueError("caption carries no noun spans")
    pairs = [
        (item.caption[start:end], obj) for start, end, obj in item.noun_spans[:k]
    ]
    while len(pairs) < k:
        pairs.append(pairs[-1])
    return pairs


def extract_nouns(item: CaptionedVideo, k: int) -> list[str]:
    return [phrase for phrase, _ in extract_noun_pairs(item, k)]


def prompt_noun(noun: str, rng: np.random.Generator) -> str:
    """Wrap a noun phrase in one of the 12 templates, chosen uniformly."""
    if not noun:
        raise ValueError("noun phrase must be nonempty")
    return PROMPT_TEMPLATES[int(rng.integers(len(PROMPT_TEMPLATES)))].format(noun)


@dataclass(frozen=True)
class PatchGrid:
    frames: int
    height: int
    width: int
    patch: tuple[int, int, int]

    def __post_init__(self):
        pt, ph, pw = self.patch
        for name, dim, p in (
            ("frames", self.frames, pt),
            ("height", self.height, ph),
            ("width", self.width, pw),
        ):
            if dim % p != 0:
                raise ConfigError(f"{name}={dim} is not divisible by patch size {p}")

    @property
    def grid(self) -> tuple[int, int, int]:
        pt, ph, pw = self.patch
        return self.frames // pt, self.height // ph, self.width // pw

    @property
    def n_tokens(self) -> int:
        gt, gh, gw = self.grid
        return gt * gh * gw

    @property
    def voxel_dim(self) -> int:
        pt, ph, pw = self.patch
        return pt * ph * pw * 3


def voxelize(video: torch.Tensor, grid: PatchGrid) -> torch.Tensor:
    """Flatten (B, T, H, W, 3) into (B, N, voxel_dim), row-major over (T', H', W')."""
    b = video.shape[0]
    if video.shape[1:] != (grid.frames, grid.height, grid.width, 3):
        raise ValueError(f"video shape {tuple(video.shape)} does not match the grid")
    pt, ph, pw = grid.patch
    gt, gh, gw = grid.grid
    x = video.reshape(b, gt, pt, gh, ph, gw, pw, 3)
    x = x.permute(0, 1, 3, 5, 2, 4, 6, 7)
    return x.reshape(b, grid.n_tokens, grid.voxel_dim)


def gumbel_assign(
    logits: torch.Tensor,
    temp: float,
    hard: bool,
    generator: torch.Generator | None,
) -> torch.Tensor:
    """Per-token assignment over groups (last dim).

    With a generator, gumbel noise is added (training); otherwise the softmax
    is noise-free (evaluation / gradcheck). ``hard`` selects the
    straight-through one-hot: hard values forward, soft gradients backward.
    """
    if generator is not None:
        noise = -torch.empty_like(logits).exponential_(generator=generator).log()
        logits = logits + noise
    y_soft = torch.softmax(logits / temp, dim=-1)
    if not hard:
        return y_soft
    index = y_soft.argmax(dim=-1, keepdim=True)
    y_hard = torch.zeros_like(y_soft).scatter_(-1, index, 1.0)
    return y_hard - y_soft.detach() + y_soft


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads != 0:
            raise ConfigError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, key_mask: torch.Tensor | None = None):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn_mask = None
        if key_mask is not None:
            # True = attend; broadcast over heads and query positions
            attn_mask = key_mask[:, None, None, :]
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=attn_mask)
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio * dim)

    def forward(self, x, key_mask=None):
        x = x + self.attn(self.norm1(x), key_mask)
        x = x + self.mlp(self.norm2(x))
        return x


class GroupingBlock(nn.Module):
    """K-means-style attention: assign tokens to groups, update the groups.

    Assignment logits are scaled query-key similarities between group tokens
    (queries) and video tokens (keys). Each token is assigned to exactly one
    group (straight-through gumbel-softmax in hard mode); every group is
    updated with the mean of its members' value projections, then a pre-norm
    residual MLP. Empty groups keep their residual only.
    """

    def __init__(self, dim: int, mlp_ratio: int = 4):
        super().__init__()
        # bias-free projections: an empty group's pooled value is exactly
        # zero, so it receives nothing from the attention path
        self.wq = nn.Linear(dim, dim, bias=False)
        self.wk = nn.Linear(dim, dim, bias=False)
        self.wv = nn.Linear(dim, dim, bias=False)
        self.wo = nn.Linear(dim, dim, bias=False)
        # pre-norm on both attention inputs keeps assignment logits bounded;
        # without it the logit gaps grow until one group absorbs every token
        self.norm_groups = nn.LayerNorm(dim)
        self.norm_tokens = nn.LayerNorm(dim)
        self.norm = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio * dim)
        self.scale = dim**-0.5

    def forward(
        self,
        groups: torch.Tensor,  # (B, M, d)
        tokens: torch.Tensor,  # (B, N, d)
        temp: float = 1.0,
        hard: bool = True,
        generator: torch.Generator | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        groups_n = self.norm_groups(groups)
        tokens = self.norm_tokens(tokens)
        q = self.wq(groups_n)
        k = self.wk(tokens)
        logits = torch.bmm(k, q.transpose(1, 2)) * self.scale  # (B, N, M)
        assign = gumbel_assign(logits, temp, hard, generator)
        values = self.wv(tokens)
        pooled = torch.bmm(assign.transpose(1, 2), values)  # (B, M, d)
        population = assign.sum(dim=1).unsqueeze(-1)
        if hard:
            denom = population.clamp(min=1.0)
        else:
            # soft populations vary continuously; keep the guard smooth
            denom = population + 1e-6
        groups = groups + self.wo(pooled / denom)
        groups = groups + self.mlp(self.norm(groups))
        return groups, assign


@dataclass
class VideoOutput:
    z_v: torch.Tensor  # (B, N, d) last-layer video tokens
    groups: torch.Tensor  # (B, M, d) final group tokens
    groups_common: torch.Tensor  # (B, M, d_c) projected + unit-norm
    f_v: torch.Tensor  # (B, d_c) pooled video embedding, unit-norm
    assignments: list[torch.Tensor]  # per grouping block, (B, N, M)


class DualEncoder(nn.Module):
    """Video and text encoders sharing one common projection space."""

    def __init__(self, config: ModelConfig, grid: PatchGrid):
        super().__init__()
        self.config = config
        self.grid = grid
        d = config.dim

        self.patch_proj = nn.Linear(grid.voxel_dim, d)
        self.video_pos = nn.Parameter(torch.zeros(1, grid.n_tokens, d))
        self.video_blocks = nn.ModuleList(
            TransformerBlock(d, config.heads) for _ in range(config.layers)
        )
        self.video_norm = nn.LayerNorm(d)
        self.group_tokens = nn.Parameter(torch.zeros(config.groups_m, d))
        self.grouping_blocks = nn.ModuleList(
            GroupingBlock(d) for _ in config.grouping_layers
        )
        # readout norm for the grouping branch (the token stream has
        # video_norm, text has text_norm): without it the projected group
        # tokens are ~init-scale and unit-normalization blows up gradients
        self.group_norm = nn.LayerNorm(d)
        self.video_proj = nn.Linear(d, config.common_dim)

        self.token_embed = nn.Embedding(VOCAB_SIZE, d)
        self.text_pos = nn.Parameter(torch.zeros(1, config.text_max_len, d))
        self.text_blocks = nn.ModuleList(
            TransformerBlock(d, config.heads) for _ in range(config.text_layers)
        )
        self.text_norm = nn.LayerNorm(d)
        self.text_proj = nn.Linear(d, config.common_dim)

        self.reset_parameters()

    def reset_parameters(self, std: float | None = None, bias_std: float = 0.0) -> None:
        """Gaussian weights, zero (or Gaussian) biases, identity layer norms.

        ``std=None`` scales each linear layer by 1/sqrt(fan_in) and the
        embedding-like tensors by 1/sqrt(dim): activations stay O(1), which
        plain SGD needs (a flat tiny init collapses the contrastive
        objectives at any stable learning rate). A fixed ``std`` overrides
        the scaling everywhere; the gradient checker uses that to probe a
        well-conditioned random point.
        """
        for module in self.modules():
            if isinstance(module, nn.Linear):
                scale = std if std is not None else module.in_features**-0.5
                nn.init.normal_(module.weight, std=scale)
                if module.bias is not None:
                    if bias_std > 0:
                        nn.init.normal_(module.bias, std=bias_std)
                    else:
                        nn.init.zeros_(module.bias)
            elif isinstance(module, nn.Embedding):
                scale = std if std is not None else module.embedding_dim**-0.5
                nn.init.normal_(module.weight, std=scale)
            elif isinstance(module, nn.LayerNorm):
                nn.init.ones_(module.weight)
                nn.init.zeros_(module.bias)
        token_std = std if std is not None else self.config.dim**-0.5
        nn.init.normal_(self.video_pos, std=token_std)
        nn.init.normal_(self.text_pos, std=token_std)
        nn.init.normal_(self.group_tokens, std=token_std)

    def patchify_embed(self, video: torch.Tensor) -> torch.Tensor:
        """(B, T, H, W, 3) -> (B, N, d): voxel flatten, project, add positions."""
        return self.patch_proj(voxelize(video, self.grid)) + self.video_pos

    def encode_video(
        self,
        video: torch.Tensor,
        *,
        generator: torch.Generator | None = None,
        hard: bool = True,
        with_groups: bool = True,
    ) -> VideoOutput:
        """Run the video trunk and, in parallel, the grouping branch.

        ``generator`` enables gumbel noise (training); evaluation passes None
        for pure argmax assignments. ``with_groups=False`` skips the grouping
        branch entirely; the token stream is unaffected either way.
        """
        x = self.patchify_embed(video)
        b = x.shape[0]
        groups = self.group_tokens.unsqueeze(0).expand(b, -1, -1)
        assignments: list[torch.Tensor] = []
        layer_set = set(self.config.grouping_layers)
        block_idx = 0
        for i, block in enumerate(self.video_blocks, start=1):
            x = block(x)
            if with_groups and i in layer_set:
                groups, assign = self.grouping_blocks[block_idx](
                    groups, x, self.config.gumbel_temp, hard, generator
                )
                block_idx += 1
                assignments.append(assign)
        z_v = self.video_norm(x)
        if with_groups:
            normed = self.group_norm(groups)
            groups_common = F.normalize(self.video_proj(normed), dim=-1)
            f_v = F.normalize(self.video_proj(normed.mean(dim=1)), dim=-1)
        else:
            groups_common = torch.zeros(
                b, self.config.groups_m, self.config.common_dim, dtype=x.dtype
            )
            f_v = torch.zeros(b, self.config.common_dim, dtype=x.dtype)
        return VideoOutput(
            z_v=z_v,
            groups=groups,
            groups_common=groups_common,
            f_v=f_v,
            assignments=assignments,
        )

    def encode_text(self, ids: torch.Tensor) -> torch.Tensor:
        """(B, max_len) token ids -> (B, d_c) unit-norm [CLS] embeddings."""
        if ids.shape[1] != self.config.text_max_len:
            raise ValueError(
                f"expected sequences of length {self.config.text_max_len}, got {ids.shape[1]}"
            )
        x = self.token_embed(ids) + self.text_pos
        key_mask = ids != PAD_ID
        for block in self.text_blocks:
            x = block(x, key_mask)
        x = self.text_norm(x)
        return F.normalize(self.text_proj(x[:, 0]), dim=-1)


def build_model(config: ModelConfig, frames: int, height: int, width: int) -> DualEncoder:
    grid = PatchGrid(frames=frames, height=height, width=width, patch=config.patch)
    return DualEncoder(config, grid)
