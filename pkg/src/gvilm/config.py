"""Run configuration: dataclasses plus the flat ``key = value`` config file format.

Every knob reachable from a config file lives here so that a run is fully
described by one small text file. ``config_hash`` over the canonical dump is
what checkpoints use to refuse resuming under a different configuration.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    """Raised for malformed config files or incompatible settings."""


def default_grouping_layers(layers: int) -> tuple[int, ...]:
    """Layer indices (1-based) whose token snapshots feed the grouping blocks.

    Mirrors the placement pattern "middle, three-quarters, last": for 4 layers
    this is (2, 3, 4).
    """
    raw = [math.ceil(layers / 2), math.ceil(3 * layers / 4), layers]
    return tuple(sorted(set(raw)))


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 4
    dim: int = 64
    groups_m: int = 8
    grouping_layers: tuple[int, ...] = ()
    common_dim: int = 32
    text_layers: int = 2
    gumbel_temp: float = 1.0
    patch: tuple[int, int, int] = (2, 8, 8)
    text_max_len: int = 32
    nouns_k: int = 2

    def __post_init__(self):
        if not self.grouping_layers:
            object.__setattr__(self, "grouping_layers", default_grouping_layers(self.layers))
        if self.layers < 1 or self.text_layers < 1:
            raise ConfigError("model.layers and model.text_layers must be >= 1")
        if self.groups_m < 2:
            raise ConfigError("model.groups_M must be >= 2")
        if any(p < 1 for p in self.patch):
            raise ConfigError("model.patch entries must be >= 1")
        bad = [i for i in self.grouping_layers if not (1 <= i <= self.layers)]
        if bad:
            raise ConfigError(f"model.grouping_layers out of range 1..{self.layers}: {bad}")
        if self.gumbel_temp <= 0:
            raise ConfigError("model.gumbel_temp must be > 0")

    @property
    def heads(self) -> int:
        return max(1, self.dim // 16)


@dataclass(frozen=True)
class AugmentConfig:
    window_size_t: int = 2
    enabled: bool = True
    beta_literal: bool = False

    def __post_init__(self):
        if self.window_size_t < 1:
            raise ConfigError("aug.window_size_t must be >= 1")


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.07
    w_temporal: float = 1.0
    w_grounding: float = 1.0
    w_contrastive: float = 1.0

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError("loss.tau must be > 0")
        if min(self.w_temporal, self.w_grounding, self.w_contrastive) < 0:
            raise ConfigError("loss weights must be nonnegative")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    batch: int = 32
    # plain SGD collapses the contrastive objectives above ~8e-3 (symmetric
    # all-embeddings-equal fixed point); 3e-3 trains reliably at toy scale
    lr: float = 0.003
    momentum: float = 0.9
    warmup: float = 0.05
    seed: int = 0
    checkpoint_every: int = 500
    model: ModelConfig = field(default_factory=ModelConfig)
    aug: AugmentConfig = field(default_factory=AugmentConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("train.steps must be >= 1")
        if self.batch < 1:
            raise ConfigError("train.batch must be >= 1")
        if not (0.0 <= self.warmup < 1.0):
            raise ConfigError("train.warmup must be in [0, 1)")
        if self.checkpoint_every < 1:
            raise ConfigError("train.checkpoint_every must be >= 1")
        if self.loss.w_temporal > 0 and not self.aug.enabled:
            raise ConfigError(
                "loss.w_temporal > 0 requires aug.enabled=true "
                "(the temporal objective needs a two-class clip mask)"
            )


# flat-file key -> (dataclass section, field name, parser)
def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("true", "1", "yes", "on"):
        return True
    if v in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


def _parse_int_tuple(s: str) -> tuple[int, ...]:
    parts = [p for p in s.replace("x", ",").split(",") if p.strip()]
    return tuple(int(p) for p in parts)


_KEYS = {
    "model.layers": ("model", "layers", int),
    "model.dim": ("model", "dim", int),
    "model.groups_M": ("model", "groups_m", int),
    "model.grouping_layers": ("model", "grouping_layers", _parse_int_tuple),
    "model.common_dim": ("model", "common_dim", int),
    "model.text_layers": ("model", "text_layers", int),
    "model.gumbel_temp": ("model", "gumbel_temp", float),
    "model.patch": ("model", "patch", _parse_int_tuple),
    "text.max_len": ("model", "text_max_len", int),
    "nouns.K": ("model", "nouns_k", int),
    "aug.window_size_t": ("aug", "window_size_t", int),
    "aug.enabled": ("aug", "enabled", _parse_bool),
    "aug.beta_literal": ("aug", "beta_literal", _parse_bool),
    "loss.tau": ("loss", "tau", float),
    "loss.w_temporal": ("loss", "w_temporal", float),
    "loss.w_grounding": ("loss", "w_grounding", float),
    "loss.w_contrastive": ("loss", "w_contrastive", float),
    "train.steps": ("train", "steps", int),
    "train.batch": ("train", "batch", int),
    "train.lr": ("train", "lr", float),
    "train.momentum": ("train", "momentum", float),
    "train.warmup": ("train", "warmup", float),
    "train.seed": ("train", "seed", int),
    "train.checkpoint_every": ("train", "checkpoint_every", int),
}


def parse_config_text(text: str) -> TrainConfig:
    """Parse the flat ``key = value`` format (``#`` comments, blank lines ok)."""
    sections: dict[str, dict] = {"model": {}, "aug": {}, "loss": {}, "train": {}}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _KEYS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        section, attr, parser = _KEYS[key]
        try:
            sections[section][attr] = parser(value.strip())
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc

    model = ModelConfig(**sections["model"])
    aug = AugmentConfig(**sections["aug"])
    loss = LossConfig(**sections["loss"])
    return TrainConfig(model=model, aug=aug, loss=loss, **sections["train"])


def load_config(path: str | Path) -> TrainConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(config: TrainConfig) -> str:
    """Canonical flat dump: every key, sorted, one per line."""
    objs = {"model": config.model, "aug": config.aug, "loss": config.loss, "train": config}
    lines = []
    for key in sorted(_KEYS):
        section, attr, _ = _KEYS[key]
        lines.append(f"{key} = {_format_value(getattr(objs[section], attr))}")
    return "\n".join(lines) + "\n"


def config_hash(config: TrainConfig) -> str:
    return hashlib.sha256(dump_config(config).encode("utf-8")).hexdigest()


def config_as_dict(config: TrainConfig) -> dict:
    """Flat-key dict view (for manifests and reports)."""
    objs = {"model": config.model, "aug": config.aug, "loss": config.loss, "train": config}
    out = {}
    for key in sorted(_KEYS):
        section, attr, _ = _KEYS[key]
        value = getattr(objs[section], attr)
        out[key] = list(value) if isinstance(value, tuple) else value
    return out


def replace(config: TrainConfig, **kwargs) -> TrainConfig:
    """dataclasses.replace that also reaches into the nested sections.

    Accepts flat field names for TrainConfig plus ``model_*``, ``aug_*`` and
    ``loss_*`` prefixed names for the nested sections.
    """
    model_kw, aug_kw, loss_kw, top_kw = {}, {}, {}, {}
    for name, value in kwargs.items():
        if name.startswith("model_"):
            model_kw[name[len("model_"):]] = value
        elif name.startswith("aug_"):
            aug_kw[name[len("aug_"):]] = value
        elif name.startswith("loss_"):
            loss_kw[name[len("loss_"):]] = value
        else:
            top_kw[name] = value
    if model_kw:
        top_kw["model"] = dataclasses.replace(config.model, **model_kw)
    if aug_kw:
        top_kw["aug"] = dataclasses.replace(config.aug, **aug_kw)
    if loss_kw:
        top_kw["loss"] = dataclasses.replace(config.loss, **loss_kw)
    return dataclasses.replace(config, **top_kw)
