"""Synthetic sequence tasks: moving shapes (4-way video classification) and
Cat & Dog (per-frame distance since the single cat frame)."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

TRIANGLE, CIRCLE = 0, 1
LEFT, RIGHT = 0, 1
SHAPE_NAMES = ("triangle", "circle")
DIRECTION_NAMES = ("left", "right")

CLASSIFY = "classify"
REGRESS = "regress"


def shape_raster(shape_class: int, size: int = 5) -> np.ndarray:
    """Binary mask of a triangle (apex up) or a disc in a size x size box."""
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0
    if shape_class == TRIANGLE:
        half_width = (yy + 1) * (size / 2.0) / size
        return (np.abs(xx - c) <= half_width - 0.25).astype(np.float64)
    if shape_class == CIRCLE:
        return ((xx - c) ** 2 + (yy - c) ** 2 <= (c + 0.3) ** 2).astype(np.float64)
    raise ValueError(f"unknown shape class {shape_class}")


@dataclass
class MovingShapeSample:
    frames: np.ndarray  # [T, 1, H, W]
    shape_class: int
    direction_class: int

    @property
    def label(self) -> int:
        return 2 * self.shape_class + self.direction_class

    @property
    def name(self) -> str:
        return f"{SHAPE_NAMES[self.shape_class]} moving {DIRECTION_NAMES[self.direction_class]}"


def gen_moving_shapes(n: int, seq_len: int = 8, image_size: int = 16, speed: int = 1,
                      rng: np.random.Generator | None = None, noise: float = 0.0,
                      shape_size: int = 5) -> list[MovingShapeSample]:
    """Shapes translating horizontally with wrap-around at the borders.

    Classes are assigned round-robin, so any ``n`` divisible by 4 is exactly
    balanced.
    """
    if speed == 0:
        raise ValueError("speed must be non-zero: the motion class is undefined otherwise")
    if shape_size > image_size:
        raise ValueError(f"a {shape_size}px shape does not fit a {image_size}px image")
    rng = rng if rng is not None else np.random.default_rng()
    out = []
    for i in range(n):
        label = i % 4
        shape_class, direction = divmod(label, 2)
        raster = shape_raster(shape_class, shape_size)
        canvas = np.zeros((image_size, image_size))
        y0 = int(rng.integers(0, image_size - shape_size + 1))
        canvas[y0:y0 + shape_size, :shape_size] = raster
        x0 = int(rng.integers(0, image_size))
        step = -abs(speed) if direction == LEFT else abs(speed)
        frames = np.empty((seq_len, 1, image_size, image_size))
        for t in range(seq_len):
            frames[t, 0] = np.roll(canvas, x0 + step * t, axis=1)
        if noise:
            frames = frames + noise * rng.standard_normal(frames.shape)
        out.append(MovingShapeSample(frames, shape_class, direction))
    return out


def catdog_labels(cat_position: int, seq_len: int) -> np.ndarray:
    """-1 before the cat, then the distance to the cat frame (0 at the cat)."""
    t = np.arange(seq_len)
    return np.where(t < cat_position, -1, t - cat_position).astype(np.int64)


CAT_GLYPH = np.array([
    [1, 0, 0, 0, 1],
    [1, 1, 1, 1, 1],
    [1, 0, 1, 0, 1],
    [1, 1, 1, 1, 1],
    [0, 1, 1, 1, 0],
], dtype=np.float64)

DOG_GLYPH = np.array([
    [1, 1, 0, 0, 0],
    [1, 1, 1, 1, 1],
    [0, 1, 1, 1, 1],
    [0, 1, 0, 0, 1],
    [0, 1, 0, 0, 1],
], dtype=np.float64)


@dataclass
class CatDogSequence:
    frames: np.ndarray  # [T, 1, H, W]
    cat_position: int
    labels: np.ndarray  # [T]


def render_glyph(glyph: np.ndarray, height: int, width: int) -> np.ndarray:
    gh, gw = glyph.shape
    if gh > height or gw > width:
        raise ValueError(f"{gh}x{gw} glyph does not fit a {height}x{width} frame")
    canvas = np.zeros((height, width))
    canvas[:gh, :gw] = glyph
    return canvas


def gen_catdog(n: int, seq_len: int, max_gap: int, rng: np.random.Generator | None = None,
               height: int = 5, width: int = 56, noise: float = 0.1) -> list[CatDogSequence]:
    """Sequences of dog glyphs with exactly one cat glyph.

    The cat position is uniform over the last ``max_gap + 1`` frames, so
    distances range over ``0..max_gap`` and the longest gap occurs in some
    samples.  Every frame gets fresh Gaussian pixel noise.
    """
    if seq_len < 2:
        raise ValueError("seq_len must be at least 2")
    if not 0 <= max_gap < seq_len:
        raise ValueError("max_gap must satisfy 0 <= max_gap < seq_len")
    rng = rng if rng is not None else np.random.default_rng()
    cat = render_glyph(CAT_GLYPH, height, width)
    dog = render_glyph(DOG_GLYPH, height, width)
    out = []
    for _ in range(n):
        p = int(rng.integers(seq_len - 1 - max_gap, seq_len))
        frames = np.broadcast_to(dog, (seq_len, height, width)).copy()
        frames[p] = cat
        if noise:
            frames += noise * rng.standard_normal(frames.shape)
        out.append(CatDogSequence(frames[:, None], p, catdog_labels(p, seq_len)))
    return out


@dataclass
class SequenceSet:
    """Stacked equal-length sequences ready for batching.

    ``targets`` is [n, T]: the class label repeated per frame for
    classification, the per-frame distance for regression.  ``meta`` holds
    one number per sequence (joint class or cat position).
    """

    kind: str
    frames: np.ndarray  # [n, T, C, H, W]
    targets: np.ndarray  # [n, T]
    meta: np.ndarray  # [n]

    def __len__(self) -> int:
        return len(self.frames)

    def subset(self, idx) -> "SequenceSet":
        return SequenceSet(self.kind, self.frames[idx], self.targets[idx], self.meta[idx])

    @property
    def seq_len(self) -> int:
        return self.frames.shape[1]

    @classmethod
    def from_shapes(cls, samples: list[MovingShapeSample]) -> "SequenceSet":
        frames = np.stack([s.frames for s in samples])
        labels = np.array([s.label for s in samples])
        targets = np.repeat(labels[:, None], frames.shape[1], axis=1)
        return cls(CLASSIFY, frames, targets.astype(np.float64), labels.astype(np.float64))

    @classmethod
    def from_catdog(cls, seqs: list[CatDogSequence]) -> "SequenceSet":
        frames = np.stack([s.frames for s in seqs])
        targets = np.stack([s.labels for s in seqs]).astype(np.float64)
        meta = np.array([s.cat_position for s in seqs], dtype=np.float64)
        return cls(REGRESS, frames, targets, meta)


_MAGIC = b"CBMSEQ\x00\x01"
_VERSION = 1
_KINDS = {CLASSIFY: 0, REGRESS: 1}


def save_dataset(path, ds: SequenceSet) -> None:
    """Binary container: magic, version, kind, (n, T, C, H, W) as
    little-endian u32, then frames, targets and meta as little-endian f64."""
    n, T, C, H, W = ds.frames.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<7I", _VERSION, _KINDS[ds.kind], n, T, C, H, W))
        for arr in (ds.frames, ds.targets, ds.meta):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_dataset(path) -> SequenceSet:
    raw = Path(path).read_bytes()
    if raw[:len(_MAGIC)] != _MAGIC:
        raise ValueError(f"{path}: not a sequence dataset file")
    off = len(_MAGIC)
    version, kind, n, T, C, H, W = struct.unpack_from("<7I", raw, off)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    off += struct.calcsize("<7I")
    sizes = [n * T * C * H * W, n * T, n]
    arrays = []
    for size in sizes:
        arrays.append(np.frombuffer(raw, dtype="<f8", count=size, offset=off).astype(np.float64))
        off += 8 * size
    if off != len(raw):
        raise ValueError(f"{path}: trailing or missing bytes")
    kind_name = {v: k for k, v in _KINDS.items()}[kind]
    return SequenceSet(kind_name, arrays[0].reshape(n, T, C, H, W), arrays[1].reshape(n, T), arrays[2])


@dataclass
class TaskMetrics:
    accuracy: float | None = None
    exact_match: float | None = None
    mae: float | None = None
    exact_match_after_cat: float | None = None

    def as_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


def evaluate_classification(model, dataset: SequenceSet) -> TaskMetrics:
    """Accuracy of the prediction at the last frame of each full sequence."""
    scores = model.predict(dataset.frames)  # n T K
    pred = np.argmax(scores[:, -1], axis=-1)
    truth = dataset.meta.astype(np.int64)
    return TaskMetrics(accuracy=float(np.mean(pred == truth)))


def evaluate_distance(model, dataset: SequenceSet) -> TaskMetrics:
    """Per-frame exact match after rounding, over all frames; MAE over frames
    at or after the cat."""
    pred = model.predict(dataset.frames)[..., 0]  # n T
    truth = dataset.targets
    hit = np.rint(pred) == truth
    post = truth >= 0
    return TaskMetrics(
        exact_match=float(np.mean(hit)),
        mae=float(np.mean(np.abs(pred - truth)[post])),
        exact_match_after_cat=float(np.mean(hit[post])),
    )
