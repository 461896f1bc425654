"""Optimization loop: SGD with momentum, warmup+cosine schedule, checkpoints.

Reproducibility model: all randomness is derived statelessly from
(config.seed, step) via numpy SeedSequence, so a run is fully determined by
(config, corpus, seed) and resuming from a checkpoint replays the exact
uninterrupted tail. The step RNG is consumed in a fixed order: batch
indices, then per-item paste windows and partners, then noun prompt
templates; gumbel noise uses its own per-step torch generator.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from .augment import BlendedBatch, cut_and_paste
from .config import ConfigError, TrainConfig, config_hash, dump_config
from .encoders import DualEncoder, build_model, extract_noun_pairs, prompt_noun, tokenize_batch
from .synthcorpus import CaptionedVideo, Corpus, corpus_hash

CHECKPOINT_FORMAT = 1
_STREAM_STEP = 0
_STREAM_INIT = 1
_STREAM_GUMBEL = 2

METRIC_FIELDS = ("step", "lr", "loss_total", "loss_t", "loss_g", "loss_c", "wallclock")


class TrainError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


def lr_schedule(step: int, config: TrainConfig) -> float:
    """Linear ramp 0 -> lr over the warmup steps, then cosine decay to 0."""
    warmup_steps = int(config.warmup * config.steps)
    if warmup_steps > 0 and step <= warmup_steps:
        return config.lr * step / warmup_steps
    progress = (step - warmup_steps) / (config.steps - warmup_steps)
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def sgd_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor | None],
    buffers: dict[str, torch.Tensor],
    lr: float,
    momentum: float,
) -> None:
    """In-place heavy-ball update: buf <- momentum*buf + grad; p <- p - lr*buf."""
    with torch.no_grad():
        for name, param in params.items():
            grad = grads.get(name)
            if grad is None:
                grad = torch.zeros_like(param)
            if not torch.isfinite(grad).all():
                raise TrainError(f"non-finite gradient for parameter {name!r}")
            buffers[name].mul_(momentum).add_(grad)
            param.add_(buffers[name], alpha=-lr)


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, _STREAM_STEP, step]))


def _derived_seed(seed: int, stream: int, *extra: int) -> int:
    ss = np.random.SeedSequence([seed, stream, *extra])
    return int(ss.generate_state(1, dtype=np.uint64)[0]) & (2**63 - 1)


def gumbel_generator(seed: int, step: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(_derived_seed(seed, _STREAM_GUMBEL, step))
    return gen


@dataclass
class StepLosses:
    total: torch.Tensor
    temporal: torch.Tensor
    grounding: torch.Tensor
    contrastive: torch.Tensor


def batch_noun_ids(
    items: list[CaptionedVideo], k: int, max_len: int, rng: np.random.Generator
) -> torch.Tensor:
    """Prompted noun token ids for a batch, shape (B*K, max_len)."""
    prompts = []
    for item in items:
        for phrase, _ in extract_noun_pairs(item, k):
            prompts.append(prompt_noun(phrase, rng))
    return tokenize_batch(prompts, max_len)


def compute_losses(
    model: DualEncoder,
    blend: BlendedBatch,
    caption_ids: torch.Tensor,
    noun_ids: torch.Tensor | None,
    config: TrainConfig,
    generator: torch.Generator | None,
    hard: bool = True,
) -> StepLosses:
    """One batch forward through both encoders and all three objectives.

    Losses whose inputs exist are always computed (and logged) even when
    their weight is zero, so ablation runs stay step-for-step comparable.
    """
    videos = torch.from_numpy(blend.videos) if isinstance(blend.videos, np.ndarray) else blend.videos
    dtype = next(model.parameters()).dtype
    videos = videos.to(dtype)
    out = model.encode_video(videos, generator=generator, hard=hard)
    f_c = model.encode_text(caption_ids)

    wv = torch.as_tensor(blend.wv, dtype=dtype)
    wc = torch.as_tensor(blend.wc, dtype=dtype)
    tau = config.loss.tau
    zero = torch.zeros((), dtype=dtype)

    if config.aug.enabled:
        z_clip = L.clip_pool(out.z_v, model.grid, config.aug.window_size_t)
        masks = torch.as_tensor(blend.masks)
        assign = L.temporal_assignment(z_clip, masks)
        loss_t = L.temporal_grouping_loss(assign, masks)
    else:
        loss_t = zero

    if noun_ids is not None and config.model.nouns_k > 0:
        b = videos.shape[0]
        nouns = model.encode_text(noun_ids).reshape(b, config.model.nouns_k, -1)
        g_matrix = L.grounding_matrix(out.groups_common, nouns, tau)
        loss_g = L.grounding_loss(g_matrix, wv, wc, tau)
    else:
        loss_g = zero

    loss_c = L.global_contrastive_loss(out.f_v, f_c, wv, wc, tau)
    total = L.total_loss(loss_t, loss_g, loss_c, config.loss)
    return StepLosses(total=total, temporal=loss_t, grounding=loss_g, contrastive=loss_c)


def metrics_line(record: dict) -> str:
    ordered = {k: record[k] for k in METRIC_FIELDS}
    return json.dumps(ordered)


def read_metrics(path) -> list[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def deterministic_metrics_view(path) -> str:
    """Metrics log re-serialized without the wallclock field.

    Wallclock is physical time and cannot reproduce; every other field is
    deterministic, so byte-comparing this view is the reproducibility check.
    """
    lines = []
    for record in read_metrics(path):
        record.pop("wallclock", None)
        lines.append(json.dumps(record))
    return "\n".join(lines) + "\n"


def save_checkpoint(state: dict, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(state, tmp)
    os.replace(tmp, path)


def load_checkpoint(path, expected_config_hash: str | None = None) -> dict:
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    required = {"format", "config_hash", "step", "model", "momentum", "seed"}
    if not isinstance(state, dict) or not required.issubset(state):
        raise CheckpointError(f"checkpoint {path} is missing required fields")
    if state["format"] != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {state['format']}")
    if expected_config_hash is not None and state["config_hash"] != expected_config_hash:
        raise CheckpointError(
            "config hash mismatch: checkpoint has "
            f"{state['config_hash']}, current config is {expected_config_hash}"
        )
    return state


@dataclass
class TrainResult:
    checkpoint_path: Path
    metrics_path: Path
    records: list[dict]
    model: DualEncoder


def build_run_model(config: TrainConfig, corpus: Corpus) -> DualEncoder:
    """Seeded model construction; identical (config, corpus shape) -> identical init."""
    spec = corpus.spec
    torch.manual_seed(_derived_seed(config.seed, _STREAM_INIT))
    return build_model(config.model, spec.frames, spec.height, spec.width)


def _validate_train_setup(config: TrainConfig, corpus: Corpus) -> np.ndarray:
    train_idx = corpus.indices("train")
    if len(train_idx) == 0:
        raise ConfigError("corpus has no train split")
    if config.batch > len(train_idx):
        raise ConfigError(
            f"batch size {config.batch} exceeds the train split ({len(train_idx)} items)"
        )
    if corpus.spec.frames % config.aug.window_size_t != 0:
        raise ConfigError(
            f"frames={corpus.spec.frames} not divisible by aug.window_size_t="
            f"{config.aug.window_size_t}"
        )
    return train_idx


def train(
    config: TrainConfig,
    corpus: Corpus,
    out_dir,
    resume_from=None,
    log_every: int = 0,
) -> TrainResult:
    """Run the full optimization loop, logging one metrics record per step.

    Checkpoints land in ``out_dir`` every ``checkpoint_every`` steps and at
    the end; ``resume_from`` restarts mid-run and reproduces the
    uninterrupted run's remaining steps exactly.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    # single-thread math: reduction order (and thus the metrics log) no longer
    # depends on the host's core count, and tiny matmuls run faster anyway
    torch.set_num_threads(1)
    train_idx = _validate_train_setup(config, corpus)
    cfg_hash = config_hash(config)
    data_hash = corpus_hash(corpus)

    model = build_run_model(config, corpus)
    params = dict(model.named_parameters())
    buffers = {name: torch.zeros_like(p) for name, p in params.items()}
    start_step = 0
    if resume_from is not None:
        state = load_checkpoint(resume_from, expected_config_hash=cfg_hash)
        if state.get("corpus_hash") != data_hash:
            raise CheckpointError(
                "corpus hash mismatch: checkpoint has "
                f"{state.get('corpus_hash')}, current corpus is {data_hash}"
            )
        model.load_state_dict(state["model"])
        for name in buffers:
            buffers[name] = state["momentum"][name].clone()
        start_step = int(state["step"])

    max_len = config.model.text_max_len
    all_caption_ids = tokenize_batch([item.caption for item in corpus.items], max_len)
    k = config.model.nouns_k

    def checkpoint_state(step: int) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "config_hash": cfg_hash,
            "config_text": dump_config(config),
            "corpus_hash": data_hash,
            "step": step,
            "model": model.state_dict(),
            "momentum": buffers,
            "seed": config.seed,
        }

    metrics_path = out_dir / "metrics.jsonl"
    records: list[dict] = []
    final_path = out_dir / "checkpoint_final.pt"
    with open(metrics_path, "w", encoding="utf-8") as metrics_file:
        for step in range(start_step, config.steps):
            t0 = time.perf_counter()
            rng = step_rng(config.seed, step)
            lr = lr_schedule(step, config)
            batch_idx = rng.choice(train_idx, size=config.batch, replace=False)
            items = [corpus.items[int(i)] for i in batch_idx]
            videos = np.stack([item.video for item in items])
            blend = cut_and_paste(
                videos,
                config.aug.window_size_t,
                rng,
                enabled=config.aug.enabled,
                beta_literal=config.aug.beta_literal,
            )
            caption_ids = all_caption_ids[torch.from_numpy(batch_idx.astype(np.int64))]
            noun_ids = batch_noun_ids(items, k, max_len, rng) if k > 0 else None
            gen = gumbel_generator(config.seed, step)

            step_losses = compute_losses(
                model, blend, caption_ids, noun_ids, config, generator=gen, hard=True
            )
            record = {
                "step": step,
                "lr": lr,
                "loss_total": float(step_losses.total.detach()),
                "loss_t": float(step_losses.temporal.detach()),
                "loss_g": float(step_losses.grounding.detach()),
                "loss_c": float(step_losses.contrastive.detach()),
            }
            if not math.isfinite(record["loss_total"]):
                record["wallclock"] = time.perf_counter() - t0
                metrics_file.write(metrics_line(record) + "\n")
                raise TrainError(f"non-finite loss at step {step}: {record}")

            model.zero_grad(set_to_none=True)
            step_losses.total.backward()
            grads = {name: p.grad for name, p in params.items()}
            sgd_step(params, grads, buffers, lr, config.momentum)

            record["wallclock"] = time.perf_counter() - t0
            records.append(record)
            metrics_file.write(metrics_line(record) + "\n")
            metrics_file.flush()
            if log_every and (step % log_every == 0 or step == config.steps - 1):
                print(
                    f"step {step:6d} lr {lr:.5f} total {record['loss_total']:.4f} "
                    f"t {record['loss_t']:.4f} g {record['loss_g']:.4f} "
                    f"c {record['loss_c']:.4f}"
                )

            done = step + 1
            if done % config.checkpoint_every == 0 or done == config.steps:
                save_checkpoint(checkpoint_state(done), out_dir / f"checkpoint_{done:06d}.pt")
        save_checkpoint(checkpoint_state(config.steps), final_path)
    return TrainResult(
        checkpoint_path=final_path, metrics_path=metrics_path, records=records, model=model
    )


def load_model_from_checkpoint(path, config: TrainConfig, corpus: Corpus) -> DualEncoder:
    state = load_checkpoint(path, expected_config_hash=config_hash(config))
    model = build_run_model(config, corpus)
    model.load_state_dict(state["model"])
    model.eval()
    return model


# -- gradient checking --------------------------------------------------------


def fd_gradient(fn, x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Central finite differences of a scalar function, coordinate-wise."""
    x = x.detach().clone()
    out = torch.zeros_like(x)
    flat = x.reshape(-1)
    grad = out.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        plus = float(fn(x))
        flat[i] = orig - eps
        minus = float(fn(x))
        flat[i] = orig
        grad[i] = (plus - minus) / (2 * eps)
    return out


@dataclass
class GradcheckReport:
    max_rel_err: dict[str, float]  # per loss name
    worst_param: dict[str, str]
    seed: int
    coords_per_param: int

    def passed(self, tol: float = 1e-4) -> bool:
        return all(v <= tol for v in self.max_rel_err.values())


def _micro_batch(rng: np.random.Generator, frames=4, height=8, width=8) -> list[CaptionedVideo]:
    items = []
    captions = [
        "a red circle moves left to right",
        "a blue square stays still",
    ]
    spans = [((2, 12, 0),), ((2, 13, 0),)]
    for caption, span in zip(captions, spans):
        video = rng.random((frames, height, width, 3)).astype(np.float32)
        items.append(
            CaptionedVideo(
                video=video,
                caption=caption,
                noun_spans=span,
                region_masks=np.ones((1, frames, height, width), dtype=bool),
                scene_label=np.zeros(frames, dtype=np.int8),
            )
        )
    return items


def gradcheck(
    seed: int = 0,
    eps: float = 1e-5,
    coords_per_param: int = 4,
    exhaustive: bool = False,
) -> GradcheckReport:
    """Compare analytic gradients of every loss to central finite differences.

    Runs a double-precision micro model (B=2, N=8, M=4, d=8) with gumbel
    noise off and soft assignments, so the objective is smooth. Each
    parameter tensor is probed at its largest-gradient coordinate plus
    ``coords_per_param`` seeded random coordinates (``exhaustive`` probes
    all of them). Relative error uses an absolute floor of 1e-3 in the
    denominator so near-zero gradients compare by absolute difference.
    """
    from .config import AugmentConfig, LossConfig, ModelConfig
    from .config import TrainConfig as TC

    torch.set_num_threads(1)
    model_cfg = ModelConfig(
        layers=2,
        dim=8,
        groups_m=4,
        grouping_layers=(),
        common_dim=4,
        text_layers=1,
        gumbel_temp=1.0,
        patch=(2, 4, 4),
        text_max_len=8,
        nouns_k=1,
    )
    config = TC(
        steps=1,
        batch=2,
        lr=0.0,
        seed=seed,
        model=model_cfg,
        aug=AugmentConfig(window_size_t=2),
        loss=LossConfig(),
    )
    rng = np.random.default_rng(np.random.SeedSequence([seed, 77]))
    items = _micro_batch(rng)

    torch.manual_seed(_derived_seed(seed, _STREAM_INIT))
    model = build_model(model_cfg, 4, 8, 8).double()
    # probe a generically scaled random point: the 0.02 training init leaves
    # the pre-normalization vectors so short that central differences at
    # eps=1e-5 are dominated by curvature (truncation error ~ eps^2)
    model.reset_parameters(std=0.3, bias_std=0.1)
    videos = np.stack([item.video for item in items]).astype(np.float64)
    blend = cut_and_paste(videos, config.aug.window_size_t, rng)
    caption_ids = tokenize_batch([i.caption for i in items], model_cfg.text_max_len)
    noun_ids = batch_noun_ids(items, 1, model_cfg.text_max_len, rng)

    def forward() -> dict[str, torch.Tensor]:
        out = compute_losses(
            model, blend, caption_ids, noun_ids, config, generator=None, hard=False
        )
        return {
            "temporal": out.temporal,
            "grounding": out.grounding,
            "contrastive": out.contrastive,
            "total": out.total,
        }

    params = dict(model.named_parameters())
    losses = forward()
    analytic: dict[str, dict[str, torch.Tensor]] = {}
    for name, value in losses.items():
        grads = torch.autograd.grad(
            value, list(params.values()), retain_graph=True, allow_unused=True
        )
        analytic[name] = {
            pname: (g if g is not None else torch.zeros_like(p))
            for (pname, p), g in zip(params.items(), grads)
        }

    max_rel = {name: 0.0 for name in losses}
    worst = {name: "" for name in losses}
    coord_rng = np.random.default_rng(np.random.SeedSequence([seed, 88]))
    with torch.no_grad():
        for pname, param in params.items():
            flat = param.reshape(-1)
            n = flat.numel()
            if exhaustive:
                coords = range(n)
            else:
                picks = set(int(c) for c in coord_rng.integers(0, n, size=coords_per_param))
                # always probe the steepest coordinate of each loss
                for name in losses:
                    picks.add(int(analytic[name][pname].reshape(-1).abs().argmax()))
                coords = sorted(picks)
            for c in coords:
                orig = flat[c].item()
                flat[c] = orig + eps
                plus = {k: float(v) for k, v in forward().items()}
                flat[c] = orig - eps
                minus = {k: float(v) for k, v in forward().items()}
                flat[c] = orig
                for name in losses:
                    fd = (plus[name] - minus[name]) / (2 * eps)
                    an = float(analytic[name][pname].reshape(-1)[c])
                    rel = abs(an - fd) / max(abs(an), abs(fd), 1e-3)
                    if rel > max_rel[name]:
                        max_rel[name] = rel
                        worst[name] = f"{pname}[{c}]"
    return GradcheckReport(
        max_rel_err=max_rel, worst_param=worst, seed=seed, coords_per_param=coords_per_param
    )
