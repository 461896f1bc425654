"""Synthetic moving-shapes video corpus with exact ground truth.

Each item is a short video of 1-3 hard-edged colored shapes moving over a
dark background, captioned by a fixed grammar whose noun phrases map to
per-object region masks. A configurable fraction of items concatenates two
scenes at mid-video, giving a known scene boundary for temporal diagnostics.

Everything is reproducible from (spec, seed): per-item RNG streams are
derived from the corpus seed and the item index, so generation order (or
parallelization) cannot change the output.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .config import ConfigError

FORMAT_VERSION = 1
_MAGIC = b"GVLMCORP"

SHAPES = ("circle", "square", "triangle", "cross")
COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "white": (1.0, 1.0, 1.0),
}
# unit direction per motion class; actual velocity is MOTION_SPEED px/frame
MOTIONS = {
    "static": (0, 0),
    "horizontal": (1, 0),
    "vertical": (0, 1),
    "diagonal": (1, 1),
}
MOTION_PHRASES = {
    "static": "stays still",
    "horizontal": "moves left to right",
    "vertical": "moves top to bottom",
    "diagonal": "moves diagonally",
}
MOTION_SPEED = 2
BACKGROUND_LEVELS = (0.0, 0.05, 0.10, 0.15, 0.20)

SPLIT_NAMES = ("train", "val", "test")


@dataclass(frozen=True)
class ObjectSpec:
    shape: str
    color: str
    motion: str
    start: tuple[float, float]  # normalized (x, y) of the center at frame 0
    size: int  # half-extent in pixels

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.color not in COLORS:
            raise ValueError(f"unknown color {self.color!r}")
        if self.motion not in MOTIONS:
            raise ValueError(f"unknown motion {self.motion!r}")
        if self.size < 1:
            raise ValueError("object size must be >= 1 pixel")


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple[ObjectSpec, ...]
    background: float
    frames: int
    height: int
    width: int
    seed: int

    def __post_init__(self):
        if not (1 <= len(self.objects) <= 3):
            raise ValueError(f"scenes need 1-3 objects, got {len(self.objects)}")
        if self.frames < 1:
            raise ValueError("frames must be >= 1")
        for i, obj in enumerate(self.objects):
            for t in (0, self.frames - 1):
                cx, cy = _center_at(obj, t, self.height, self.width)
                if not (obj.size <= cx <= self.width - 1 - obj.size):
                    raise ValueError(f"object {i} leaves the frame horizontally at t={t}")
                if not (obj.size <= cy <= self.height - 1 - obj.size):
                    raise ValueError(f"object {i} leaves the frame vertically at t={t}")


def _center_at(obj: ObjectSpec, t: int, height: int, width: int) -> tuple[int, int]:
    dx, dy = MOTIONS[obj.motion]
    cx = int(round(obj.start[0] * width)) + dx * MOTION_SPEED * t
    cy = int(round(obj.start[1] * height)) + dy * MOTION_SPEED * t
    return cx, cy


def _shape_mask(shape: str, cx: int, cy: int, r: int, height: int, width: int) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width]
    dx = np.abs(xx - cx)
    dy = np.abs(yy - cy)
    if shape == "circle":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    if shape == "square":
        return np.maximum(dx, dy) <= r
    if shape == "triangle":
        # apex at the top, base at the bottom
        rel = yy - (cy - r)
        return (rel >= 0) & (yy <= cy + r) & (2 * dx <= rel)
    if shape == "cross":
        w = max(1, r // 2)
        return ((dx <= r) & (dy <= w)) | ((dx <= w) & (dy <= r))
    raise ValueError(f"unknown shape {shape!r}")


def _draw_masks(scene: SceneSpec) -> np.ndarray:
    """Per-object raw (pre-occlusion) masks, shape (O, T, H, W)."""
    masks = np.zeros((len(scene.objects), scene.frames, scene.height, scene.width), dtype=bool)
    for i, obj in enumerate(scene.objects):
        for t in range(scene.frames):
            cx, cy = _center_at(obj, t, scene.height, scene.width)
            masks[i, t] = _shape_mask(obj.shape, cx, cy, obj.size, scene.height, scene.width)
    return masks


def _visible_masks(raw: np.ndarray) -> np.ndarray:
    """Apply z-order occlusion: later-listed objects overwrite earlier ones."""
    visible = raw.copy()
    n = raw.shape[0]
    for i in range(n - 1):
        for j in range(i + 1, n):
            visible[i] &= ~raw[j]
    return visible


def render_video(scene: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Rasterize a scene.

    Returns (video, region_masks): video is float32 (T, H, W, 3) in [0, 1];
    region_masks is bool (O, T, H, W) and marks exactly the visible pixels of
    each object (occluded pixels belong to the topmost object only).
    """
    raw = _draw_masks(scene)
    visible = _visible_masks(raw)
    video = np.full(
        (scene.frames, scene.height, scene.width, 3), scene.background, dtype=np.float32
    )
    for i, obj in enumerate(scene.objects):
        video[visible[i]] = np.asarray(COLORS[obj.color], dtype=np.float32)
    return video, visible


def caption_for(scene: SceneSpec) -> tuple[str, tuple[tuple[int, int, int], ...]]:
    """Caption a scene with the fixed grammar.

    Grammar: "a {color} {shape} {motion phrase}", object clauses joined by
    " and ". Noun spans cover exactly the "{color} {shape}" substrings, in
    object order, tagged with the object index.
    """
    parts = []
    spans = []
    cursor = 0
    for i, obj in enumerate(scene.objects):
        clause = f"a {obj.color} {obj.shape} {MOTION_PHRASES[obj.motion]}"
        noun_start = cursor + 2  # past "a "
        noun_end = noun_start + len(obj.color) + 1 + len(obj.shape)
        spans.append((noun_start, noun_end, i))
        parts.append(clause)
        cursor += len(clause) + len(" and ")
    caption = " and ".join(parts)
    return caption, tuple(spans)


@dataclass
class CaptionedVideo:
    video: np.ndarray  # float32 (T, H, W, 3) in [0, 1]
    caption: str
    noun_spans: tuple[tuple[int, int, int], ...]  # (char start, char end, object id)
    region_masks: np.ndarray  # bool (O, T, H, W)
    scene_label: np.ndarray  # int8 (T,), nonzero only for two-scene items

    def validate(self) -> None:
        t, h, w, c = self.video.shape
        if c != 3:
            raise ValueError("video must have 3 channels")
        if self.video.dtype != np.float32:
            raise ValueError("video must be float32")
        if self.video.min() < 0.0 or self.video.max() > 1.0:
            raise ValueError("video values must lie in [0, 1]")
        if self.region_masks.shape[1:] != (t, h, w):
            raise ValueError("region_masks shape does not match the video")
        if len(self.scene_label) != t:
            raise ValueError("scene_label length does not match frame count")
        n_objects = self.region_masks.shape[0]
        for start, end, obj in self.noun_spans:
            if not (0 <= start < end <= len(self.caption)):
                raise ValueError(f"span ({start},{end}) outside the caption")
            if not (0 <= obj < n_objects):
                raise ValueError(f"span references unknown object {obj}")
            if not self.region_masks[obj].any():
                raise ValueError(f"object {obj} has an empty region mask")


def _scene_item(scene: SceneSpec) -> CaptionedVideo:
    video, masks = render_video(scene)
    caption, spans = caption_for(scene)
    return CaptionedVideo(
        video=video,
        caption=caption,
        noun_spans=spans,
        region_masks=masks,
        scene_label=np.zeros(scene.frames, dtype=np.int8),
    )


def make_twoscene(scene_a: SceneSpec, scene_b: SceneSpec, cut_frame: int) -> CaptionedVideo:
    """Concatenate two scenes at ``cut_frame`` with a known boundary.

    Frames [0, cut) come from scene_a, [cut, T) from scene_b; scene_label is
    0 before the cut and 1 after. Captions are joined with " then " and
    scene_b's object ids are offset past scene_a's.
    """
    if (scene_a.frames, scene_a.height, scene_a.width) != (
        scene_b.frames,
        scene_b.height,
        scene_b.width,
    ):
        raise ValueError("two-scene parts must share frames, height and width")
    t_total = scene_a.frames
    if not (0 < cut_frame < t_total):
        raise ValueError(f"cut_frame must be in (0, {t_total}), got {cut_frame}")

    vid_a, masks_a = render_video(scene_a)
    vid_b, masks_b = render_video(scene_b)
    video = np.concatenate([vid_a[:cut_frame], vid_b[cut_frame:]], axis=0)

    n_a, n_b = masks_a.shape[0], masks_b.shape[0]
    h, w = scene_a.height, scene_a.width
    masks = np.zeros((n_a + n_b, t_total, h, w), dtype=bool)
    masks[:n_a, :cut_frame] = masks_a[:, :cut_frame]
    masks[n_a:, cut_frame:] = masks_b[:, cut_frame:]

    cap_a, spans_a = caption_for(scene_a)
    cap_b, spans_b = caption_for(scene_b)
    joiner = " then "
    offset = len(cap_a) + len(joiner)
    spans = tuple(spans_a) + tuple((s + offset, e + offset, obj + n_a) for s, e, obj in spans_b)

    label = np.zeros(t_total, dtype=np.int8)
    label[cut_frame:] = 1
    return CaptionedVideo(
        video=video,
        caption=cap_a + joiner + cap_b,
        noun_spans=spans,
        region_masks=masks,
        scene_label=label,
    )


def random_scene(
    seed: int, frames: int, height: int, width: int, max_objects: int = 3
) -> SceneSpec:
    """Draw a valid SceneSpec from a seed (deterministic retry on occlusion).

    Objects get distinct (color, shape) pairs so caption noun phrases within
    a scene are unambiguous, and scenes are redrawn until every object is
    visible (>= 1 pixel) in every frame.
    """
    if not (1 <= max_objects <= 3):
        raise ValueError("max_objects must be in 1..3")
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    combos = [(c, s) for c in COLORS for s in SHAPES]
    displacement = MOTION_SPEED * (frames - 1)
    for _ in range(200):
        n_objects = int(rng.integers(1, max_objects + 1))
        picked = rng.choice(len(combos), size=n_objects, replace=False)
        objects = []
        feasible = True
        for idx in picked:
            color, shape = combos[idx]
            size = int(rng.integers(3, 6))
            allowed = [
                m
                for m, (dx, dy) in MOTIONS.items()
                if size <= width - 1 - size - dx * displacement
                and size <= height - 1 - size - dy * displacement
            ]
            if not allowed:
                feasible = False
                break
            motion = allowed[int(rng.integers(len(allowed)))]
            dx, dy = MOTIONS[motion]
            cx = int(rng.integers(size, width - size - dx * displacement))
            cy = int(rng.integers(size, height - size - dy * displacement))
            objects.append(
                ObjectSpec(
                    shape=shape,
                    color=color,
                    motion=motion,
                    start=(cx / width, cy / height),
                    size=size,
                )
            )
        if not feasible:
            continue
        scene = SceneSpec(
            objects=tuple(objects),
            background=float(rng.choice(BACKGROUND_LEVELS)),
            frames=frames,
            height=height,
            width=width,
            seed=seed,
        )
        visible = _visible_masks(_draw_masks(scene))
        if visible.any(axis=(2, 3)).all():
            return scene
    raise ValueError(
        f"could not place objects in a {height}x{width} frame; "
        "frame too small for the configured sizes and motions"
    )


@dataclass(frozen=True)
class CorpusSpec:
    size: int = 320
    frames: int = 8
    height: int = 32
    width: int = 32
    patch: tuple[int, int, int] = (2, 8, 8)
    val_size: int = 32
    test_size: int = 32
    twoscene_frac: float = 0.25
    max_objects: int = 3

    def __post_init__(self):
        if self.size < 1:
            raise ConfigError("corpus size must be >= 1")
        if self.val_size + self.test_size >= self.size:
            raise ConfigError("val_size + test_size must leave at least one train item")
        if not (0.0 <= self.twoscene_frac <= 1.0):
            raise ConfigError("twoscene_frac must be in [0, 1]")
        pt, ph, pw = self.patch
        for name, dim, p in (
            ("frames", self.frames, pt),
            ("height", self.height, ph),
            ("width", self.width, pw),
        ):
            if dim % p != 0:
                raise ConfigError(
                    f"{name}={dim} is not divisible by its patch size {p}"
                )
        if self.frames % 2 != 0:
            raise ConfigError("frames must be even (two-scene items cut at mid-video)")

    def as_dict(self) -> dict:
        return {
            "size": self.size,
            "frames": self.frames,
            "height": self.height,
            "width": self.width,
            "patch": list(self.patch),
            "val_size": self.val_size,
            "test_size": self.test_size,
            "twoscene_frac": self.twoscene_frac,
            "max_objects": self.max_objects,
        }


@dataclass
class Corpus:
    items: list[CaptionedVideo]
    splits: np.ndarray  # uint8 (size,): 0 train, 1 val, 2 test
    seed: int
    spec: CorpusSpec
    version: int = FORMAT_VERSION

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.splits == SPLIT_NAMES.index(split))

    def split_items(self, split: str) -> list[CaptionedVideo]:
        return [self.items[i] for i in self.indices(split)]


def generate_item(spec: CorpusSpec, corpus_seed: int, index: int) -> CaptionedVideo:
    """One corpus item from its independent per-item RNG stream."""
    rng = np.random.default_rng(np.random.SeedSequence([corpus_seed, index]))
    twoscene = rng.random() < spec.twoscene_frac
    if twoscene:
        seed_a = int(rng.integers(0, 2**63))
        seed_b = int(rng.integers(0, 2**63))
        scene_a = random_scene(seed_a, spec.frames, spec.height, spec.width, spec.max_objects)
        scene_b = random_scene(seed_b, spec.frames, spec.height, spec.width, spec.max_objects)
        # mid-video cut keeps both scenes' objects visible in T/2 frames
        return make_twoscene(scene_a, scene_b, spec.frames // 2)
    seed = int(rng.integers(0, 2**63))
    scene = random_scene(seed, spec.frames, spec.height, spec.width, spec.max_objects)
    return _scene_item(scene)


def generate_corpus(spec: CorpusSpec, seed: int) -> Corpus:
    """Generate the full corpus; identical (spec, seed) gives identical output.

    Split layout is deterministic: the first ``size - val - test`` items are
    train, then val, then test.
    """
    items = [generate_item(spec, seed, i) for i in range(spec.size)]
    splits = np.zeros(spec.size, dtype=np.uint8)
    n_train = spec.size - spec.val_size - spec.test_size
    splits[n_train : n_train + spec.val_size] = 1
    splits[n_train + spec.val_size :] = 2
    return Corpus(items=items, splits=splits, seed=seed, spec=spec)


# -- container file format ----------------------------------------------------
#
# magic, version, seed, spec JSON, item count, then per item: split tag,
# caption, noun spans, scene labels, raw little-endian float32 video and
# bit-packed boolean region masks. Self-contained and byte-stable.


def _write_item(buf: io.BufferedIOBase, item: CaptionedVideo, split: int) -> None:
    caption = item.caption.encode("utf-8")
    buf.write(struct.pack("<BI", split, len(caption)))
    buf.write(caption)
    buf.write(struct.pack("<I", len(item.noun_spans)))
    for start, end, obj in item.noun_spans:
        buf.write(struct.pack("<III", start, end, obj))
    buf.write(struct.pack("<I", item.region_masks.shape[0]))
    buf.write(np.ascontiguousarray(item.scene_label, dtype=np.int8).tobytes())
    buf.write(item.video.astype("<f4").tobytes())
    packed = np.packbits(item.region_masks)
    buf.write(struct.pack("<I", len(packed)))
    buf.write(packed.tobytes())


def corpus_bytes(corpus: Corpus) -> bytes:
    buf = io.BytesIO()
    buf.write(_MAGIC)
    spec_json = json.dumps(corpus.spec.as_dict(), sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<IQI", corpus.version, corpus.seed, len(spec_json)))
    buf.write(spec_json)
    buf.write(struct.pack("<I", len(corpus.items)))
    for item, split in zip(corpus.items, corpus.splits):
        _write_item(buf, item, int(split))
    return buf.getvalue()


def save_corpus(corpus: Corpus, path) -> None:
    data = corpus_bytes(corpus)
    with open(path, "wb") as fh:
        fh.write(data)


def load_corpus(path) -> Corpus:
    with open(path, "rb") as fh:
        data = fh.read()
    return corpus_from_bytes(data)


def corpus_from_bytes(data: bytes) -> Corpus:
    view = memoryview(data)
    if bytes(view[:8]) != _MAGIC:
        raise ValueError("not a corpus file (bad magic)")
    off = 8
    version, seed, spec_len = struct.unpack_from("<IQI", view, off)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported corpus format version {version}")
    off += struct.calcsize("<IQI")
    spec_dict = json.loads(bytes(view[off : off + spec_len]).decode("utf-8"))
    off += spec_len
    spec_dict["patch"] = tuple(spec_dict["patch"])
    spec = CorpusSpec(**spec_dict)
    (n_items,) = struct.unpack_from("<I", view, off)
    off += 4

    t, h, w = spec.frames, spec.height, spec.width
    video_nbytes = t * h * w * 3 * 4
    items = []
    splits = np.zeros(n_items, dtype=np.uint8)
    for i in range(n_items):
        split, cap_len = struct.unpack_from("<BI", view, off)
        off += struct.calcsize("<BI")
        caption = bytes(view[off : off + cap_len]).decode("utf-8")
        off += cap_len
        (n_spans,) = struct.unpack_from("<I", view, off)
        off += 4
        spans = []
        for _ in range(n_spans):
            spans.append(struct.unpack_from("<III", view, off))
            off += 12
        (n_objects,) = struct.unpack_from("<I", view, off)
        off += 4
        scene_label = np.frombuffer(view, dtype=np.int8, count=t, offset=off).copy()
        off += t
        video = (
            np.frombuffer(view, dtype="<f4", count=t * h * w * 3, offset=off)
            .reshape(t, h, w, 3)
            .copy()
        )
        off += video_nbytes
        (packed_len,) = struct.unpack_from("<I", view, off)
        off += 4
        packed = np.frombuffer(view, dtype=np.uint8, count=packed_len, offset=off)
        off += packed_len
        n_bits = n_objects * t * h * w
        masks = np.unpackbits(packed, count=n_bits).astype(bool).reshape(n_objects, t, h, w)
        splits[i] = split
        items.append(
            CaptionedVideo(
                video=video,
                caption=caption,
                noun_spans=tuple((s, e, o) for s, e, o in spans),
                region_masks=masks,
                scene_label=scene_label,
            )
        )
    return Corpus(items=items, splits=splits, seed=seed, spec=spec, version=version)


def corpus_hash(corpus: Corpus) -> str:
    return hashlib.sha256(corpus_bytes(corpus)).hexdigest()


def file_hash(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
