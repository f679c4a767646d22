"""Overlap coherence training: clip sampling, the overlap registry, hidden
state hand-off between clips and the combined objective."""

from __future__ import annotations

import logging
import math
import time
from contextlib import nullcontext
from dataclasses import dataclass, field
from itertools import combinations
from typing import Hashable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cell import CbmState, TdSchedule

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Clip:
    sequence_id: Hashable
    start: int
    length: int

    def __post_init__(self):
        if self.start < 0 or self.length < 1:
            raise ValueError(f"bad clip span start={self.start} length={self.length}")

    @property
    def end(self) -> int:
        return self.start + self.length

    def covers(self, t: int) -> bool:
        return self.start <= t < self.end

    def frames(self, sequence: np.ndarray) -> np.ndarray:
        return sequence[self.start:self.end]


@dataclass
class CoherenceConfig:
    lam: float = 0.8
    overlap_rate: float = 0.25
    clip_len_min: int = 8
    clip_len_max: int = 10

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if not 0.0 <= self.overlap_rate < 1.0:
            raise ValueError("overlap_rate must be in [0, 1)")
        if self.clip_len_min < 2:
            raise ValueError("clip_len_min must be >= 2")
        if self.clip_len_max < self.clip_len_min:
            raise ValueError("clip_len_max must be >= clip_len_min")


def _half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def sample_clips(sequence_length: int, cfg: CoherenceConfig, rng: np.random.Generator,
                 sequence_id: Hashable = 0) -> list[Clip]:
    """Cover ``[0, sequence_length)`` left to right with overlapping clips.

    Lengths are uniform in ``[clip_len_min, clip_len_max]``.  Each clip after
    the first starts so that it shares ``round(overlap_rate * prev_length)``
    frames with its predecessor, jittered by -1/0/+1 and kept within
    ``[1, prev_length - 1]``.  The last clip ends at the sequence end and may
    be shorter than ``clip_len_min``; it is never shorter than 2 frames.
    With ``overlap_rate == 0`` the clips partition the sequence, unless a
    fixed clip length would leave a 1-frame tail.
    """
    L = int(sequence_length)
    if L < 1:
        raise ValueError("sequence_length must be positive")
    if L <= cfg.clip_len_min:
        return [Clip(sequence_id, 0, L)]
    clips: list[Clip] = []
    s = 0
    while True:
        remaining = L - s
        if remaining <= cfg.clip_len_max:
            if remaining >= 2:
                clips.append(Clip(sequence_id, s, remaining))
            else:
                clips.append(Clip(sequence_id, L - 2, 2))
            return clips
        n = int(rng.integers(cfg.clip_len_min, cfg.clip_len_max + 1))
        if cfg.overlap_rate > 0:
            jitter = int(rng.integers(-1, 2))
            ov = min(max(_half_up(cfg.overlap_rate * n) + jitter, 1), n - 1)
        else:
            ov = 0
            if L - (s + n) == 1:
                # a 1-frame tail cannot form a clip; absorb or avoid it, and
                # when the length range allows neither the tail clip steps
                # back one frame
                if n + 1 <= cfg.clip_len_max:
                    n += 1
                elif n - 1 >= cfg.clip_len_min:
                    n -= 1
        clips.append(Clip(sequence_id, s, n))
        s = s + n - ov


def adjacent_overlap_fractions(clips: Sequence[Clip]) -> list[float]:
    """Shared frames of each consecutive pair over the earlier clip's length."""
    out = []
    for a, b in zip(clips, clips[1:]):
        shared = max(0, min(a.end, b.end) - max(a.start, b.start))
        out.append(shared / a.length)
    return out


@dataclass
class OverlapRegistry:
    """Aligned output pairs ``(a, b, t)`` with clip indices ``a < b``."""

    clips: list[Clip]
    pairs: list[tuple[int, int, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.pairs)

    def restricted_to(self, members: set[int]) -> "OverlapRegistry":
        return OverlapRegistry(self.clips, [p for p in self.pairs if p[0] in members and p[1] in members])


def build_overlap_registry(clips: Sequence[Clip]) -> OverlapRegistry:
    clips = list(clips)
    pairs = []
    for a, b in combinations(range(len(clips)), 2):
        ca, cb = clips[a], clips[b]
        lo, hi = max(ca.start, cb.start), min(ca.end, cb.end)
        pairs.extend((a, b, t) for t in range(lo, hi))
    return OverlapRegistry(clips, pairs)


class StateStore:
    """Latest detached memory per (sequence, layer, timestamp)."""

    def __init__(self):
        self._data: dict[tuple[Hashable, int, int], np.ndarray] = {}

    def put(self, sequence_id: Hashable, layer: int, t: int, value: np.ndarray) -> None:
        self._data[(sequence_id, layer, t)] = np.array(value, dtype=np.float64)

    def get(self, sequence_id: Hashable, layer: int, t: int) -> np.ndarray | None:
        v = self._data.get((sequence_id, layer, t))
        return None if v is None else v.copy()

    def has(self, sequence_id: Hashable, layer: int, t: int) -> bool:
        return (sequence_id, layer, t) in self._data

    def __len__(self) -> int:
        return len(self._data)

    def items(self):
        return self._data.items()

    def clear(self) -> None:
        self._data.clear()


def _members(clip: Clip) -> tuple[list[Hashable], bool]:
    if isinstance(clip.sequence_id, tuple):
        return list(clip.sequence_id), True
    return [clip.sequence_id], False


def clip_ready(clip: Clip, store: StateStore, num_layers: int) -> bool:
    if clip.start == 0:
        return True
    ids, _ = _members(clip)
    return all(store.has(s, layer, clip.start - 1) for s in ids for layer in range(num_layers))


def init_clip_state(clip: Clip, store: StateStore, num_layers: int,
                    shape: Sequence[int]) -> CbmState:
    """Initial memory for ``clip``: the stored state at ``clip.start - 1``
    where one exists, zeros otherwise.  A clip whose ``sequence_id`` is a
    tuple stands for a batch of sequences and gets a stacked state."""
    ids, batched = _members(clip)
    memory = []
    for layer in range(num_layers):
        rows = []
        for s in ids:
            v = store.get(s, layer, clip.start - 1) if clip.start > 0 else None
            rows.append(np.zeros(shape) if v is None else v)
        memory.append(Tensor(np.stack(rows) if batched else rows[0]))
    return CbmState(memory)


def write_clip_states(clip: Clip, states: Sequence[CbmState], store: StateStore) -> None:
    ids, batched = _members(clip)
    for k, st in enumerate(states):
        t = clip.start + k
        for layer, mem in enumerate(st.memory):
            for j, s in enumerate(ids):
                store.put(s, layer, t, mem.data[j] if batched else mem.data)


def coherence_loss(registry: OverlapRegistry, outputs: Sequence[Sequence[Tensor] | None]) -> Tensor:
    """Mean over the registry of the MSE between the two clips' outputs at the
    shared timestamp.  ``outputs[k][j]`` is clip k's output at its step j."""
    if not registry.pairs:
        return Tensor(0.0)
    terms = []
    for a, b, t in registry.pairs:
        ca, cb = registry.clips[a], registry.clips[b]
        v = outputs[a][t - ca.start]
        u = outputs[b][t - cb.start]
        terms.append(ad.mse(v, u))
    return ad.scale(ad.add_n(terms), 1.0 / len(terms))


def total_objective(task_losses: Sequence[Tensor], coherence: Tensor, lam: float) -> Tensor:
    task = ad.add_n(list(task_losses))
    if lam == 0:
        return task
    return ad.add(task, ad.scale(coherence, lam))


def plan_waves(clips: Sequence[Clip], store: StateStore, num_layers: int) -> list[list[int]]:
    """Greedy schedule: a wave holds every pending clip whose initial state is
    available before the wave starts; its writes unlock the next wave."""
    pending = sorted(range(len(clips)), key=lambda k: clips[k].start)
    available: set[tuple[Hashable, int]] = set()
    waves = []
    while pending:
        wave = [k for k in pending
                if clip_ready(clips[k], store, num_layers)
                or all((s, clips[k].start - 1) in available for s in _members(clips[k])[0])]
        if not wave:
            raise RuntimeError("clip schedule stalled: clips do not cover the sequence")
        waves.append(wave)
        for k in wave:
            c = clips[k]
            for s in _members(c)[0]:
                available.update((s, t) for t in range(c.start, c.end))
        pending = [k for k in pending if k not in wave]
    return waves


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class EpochMetrics:
    epoch: int
    task_loss: float
    coherence_loss: float
    grad_norm: float
    td_rate: float
    lr: float
    waves: int
    clips: int
    max_tape_depth: int
    seconds: float = 0.0


def train_epoch(model, dataset, coh: CoherenceConfig, optimizer, td_schedule: TdSchedule,
                epoch: int, rngs: dict, store: StateStore, batch_size: int = 16,
                lr: float | None = None, update: bool = True) -> EpochMetrics:
    """One pass over ``dataset`` with overlapping clips.

    Sequences are grouped into mini-batches that share one clip layout.  For
    each group the clips run wave by wave; each wave is one objective, one
    backward pass and one optimizer step.  With ``update=False`` nothing is
    learned or stored and the call only measures losses.
    """
    t0 = time.perf_counter()
    td_rate = td_schedule.rate(epoch)
    sampler, gates = rngs["sampler"], rngs["gates"]
    order = sampler.permutation(len(dataset))
    num_layers = model.cfg.num_layers
    task_sum = coh_sum = gnorm_sum = 0.0
    n_waves = n_clips = coh_count = max_depth = 0
    for g0 in range(0, len(order), batch_size):
        idx = np.sort(order[g0:g0 + batch_size])
        group = tuple(int(i) for i in idx)
        frames = dataset.frames[idx]  # n T C H W
        targets = dataset.targets[idx]
        clips = sample_clips(frames.shape[1], coh, sampler, sequence_id=group)
        registry = build_overlap_registry(clips)
        for wave in plan_waves(clips, store, num_layers):
            outputs: list = [None] * len(clips)
            runs = {}
            task_losses = []
            for k in wave:
                clip = clips[k]
                init = init_clip_state(clip, store, num_layers, model.state_shape)
                clip_frames = np.swapaxes(frames[:, clip.start:clip.end], 0, 1)
                with (ad.no_grad() if not update else nullcontext()):
                    run = model.unroll(clip_frames, init, td_rate, gates)
                    loss = model.clip_loss(run.outputs, targets[:, clip.start:clip.end])
                if not math.isfinite(loss.item()):
                    raise TrainingDiverged(
                        f"non-finite task loss {loss.item()} in epoch {epoch}, "
                        f"sequences {group}, clip [{clip.start}, {clip.end})"
                    )
                outputs[k] = run.outputs
                runs[k] = run
                task_losses.append(loss)
                max_depth = max(max_depth, run.tape.depth)
            sub = registry.restricted_to(set(wave))
            with (ad.no_grad() if not update else nullcontext()):
                coh_term = coherence_loss(sub, outputs)
                objective = total_objective(task_losses, coh_term, coh.lam)
            if not math.isfinite(objective.item()):
                raise TrainingDiverged(f"non-finite objective in epoch {epoch}, sequences {group}")
            if update:
                ad.backward(objective)
                gnorm = math.sqrt(sum(float(np.sum(p.grad ** 2)) for p in model.parameters()
                                      if p.grad is not None))
                optimizer.step(lr)
                optimizer.zero_grad()
                gnorm_sum += gnorm
                for k in wave:
                    write_clip_states(clips[k], runs[k].states, store)
            task_sum += sum(t.item() for t in task_losses)
            if len(sub):
                coh_sum += coh_term.item()
                coh_count += 1
            n_waves += 1
            n_clips += len(wave)
    return EpochMetrics(
        epoch=epoch,
        task_loss=task_sum / max(n_clips, 1),
        coherence_loss=coh_sum / coh_count if coh_count else 0.0,
        grad_norm=gnorm_sum / max(n_waves, 1) if update else 0.0,
        td_rate=td_rate,
        lr=optimizer.lr if lr is None else lr,
        waves=n_waves,
        clips=n_clips,
        max_tape_depth=max_depth,
        seconds=time.perf_counter() - t0,
    )
