"""Context Bridge Module cell, deep stacking and Temporal Dropout gating.

Each layer splits into a representation unit R (per-frame convolution) and a
temporal unit T (convolution over the previous memory concatenated with the
layer input); a merge function combines the two.  The edge carrying the
layer input into T is gated: a blocked gate leaves the forward value alone
and cuts the gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import BLOCK, PASS, Tensor
from .optim import xavier_init

PRODUCTION = "production"
ADDITION = "addition"
MERGE_KINDS = (PRODUCTION, ADDITION)


@dataclass
class StackConfig:
    num_layers: int = 3
    channels: int = 3
    in_channels: int = 1
    merge_kind: str = PRODUCTION
    use_shortcuts: bool = False
    constant_bridge: bool = False
    kernel_size: int = 3

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError("num_layers must be positive")
        if self.channels < 1 or self.in_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.merge_kind not in MERGE_KINDS:
            raise ValueError(f"merge_kind must be one of {MERGE_KINDS}, got {self.merge_kind!r}")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")

    def layer_channels(self) -> list[tuple[int, int]]:
        ins = [self.in_channels] + [self.channels] * (self.num_layers - 1)
        return [(c_in, self.channels) for c_in in ins]


@dataclass
class CbmLayerParams:
    """R weights (``psi``) and T weights (``phi``) of one layer.

    ``phi_w`` sees the previous memory and the layer input stacked along
    channels, memory first: shape [C_out, C_out + C_in, k, k].
    """

    psi_w: Tensor
    psi_b: Tensor
    phi_w: Tensor
    phi_b: Tensor

    def __post_init__(self):
        c_out, c_in = self.psi_w.shape[:2]
        if self.phi_w.shape[:2] != (c_out, c_out + c_in):
            raise ValueError(
                f"phi kernel {self.phi_w.shape} does not map {c_out}+{c_in} -> {c_out} channels"
            )
        if self.psi_b.shape != (c_out,) or self.phi_b.shape != (c_out,):
            raise ValueError("bias shapes must equal (C_out,)")

    @property
    def in_channels(self) -> int:
        return self.psi_w.shape[1]

    @property
    def out_channels(self) -> int:
        return self.psi_w.shape[0]

    def tensors(self) -> list[Tensor]:
        return [self.psi_w, self.psi_b, self.phi_w, self.phi_b]

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.psi_w": self.psi_w,
            f"{prefix}.psi_b": self.psi_b,
            f"{prefix}.phi_w": self.phi_w,
            f"{prefix}.phi_b": self.phi_b,
        }

    @classmethod
    def init(cls, c_in: int, c_out: int, rng: np.random.Generator, kernel_size: int = 3):
        k = kernel_size
        return cls(
            psi_w=Tensor(xavier_init((c_out, c_in, k, k), rng), requires_grad=True),
            psi_b=Tensor(np.zeros(c_out), requires_grad=True),
            phi_w=Tensor(xavier_init((c_out, c_out + c_in, k, k), rng), requires_grad=True),
            phi_b=Tensor(np.zeros(c_out), requires_grad=True),
        )


def init_stack(cfg: StackConfig, rng: np.random.Generator) -> list[CbmLayerParams]:
    return [CbmLayerParams.init(ci, co, rng, cfg.kernel_size) for ci, co in cfg.layer_channels()]


@dataclass
class CbmState:
    """Per-layer memory ``c``; a fresh state is all zeros."""

    memory: list[Tensor]

    @classmethod
    def zeros(cls, cfg: StackConfig, height: int, width: int, batch: int | None = None):
        lead = () if batch is None else (batch,)
        return cls([Tensor(np.zeros(lead + (cfg.channels, height, width))) for _ in range(cfg.num_layers)])

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray]):
        return cls([Tensor(a) for a in arrays])

    def detach(self) -> "CbmState":
        return CbmState([m.detach() for m in self.memory])

    def arrays(self) -> list[np.ndarray]:
        return [m.data for m in self.memory]

    def __len__(self) -> int:
        return len(self.memory)


@dataclass
class TdSchedule:
    """Piecewise-constant Temporal Dropout rate: ``milestones`` holds
    ``(first_epoch, rate)`` pairs sorted by epoch, starting at epoch 0."""

    milestones: list[tuple[int, float]] = field(
        default_factory=lambda: [(0, 1.0), (2, 0.8), (4, 0.5)]
    )

    def __post_init__(self):
        ms = [(int(e), float(r)) for e, r in self.milestones]
        if not ms or ms[0][0] != 0:
            raise ValueError("TD schedule must start at epoch 0")
        for (e0, r0), (e1, r1) in zip(ms, ms[1:]):
            if e1 <= e0:
                raise ValueError("TD schedule epochs must be strictly increasing")
            if r1 > r0:
                raise ValueError("TD rates must be non-increasing over epochs")
        for _, r in ms:
            if not 0.0 <= r <= 1.0:
                raise ValueError(f"TD rate {r} outside [0, 1]")
        self.milestones = ms

    def rate(self, epoch: int) -> float:
        current = self.milestones[0][1]
        for start, r in self.milestones:
            if epoch >= start:
                current = r
        return current

    @classmethod
    def constant(cls, rate: float) -> "TdSchedule":
        return cls([(0, rate)])

    @classmethod
    def decaying_to(cls, final: float, step: int = 2) -> "TdSchedule":
        """1.0, then 0.8 (or ``final`` if larger) after ``step`` epochs, then
        ``final`` after another ``step``."""
        mid = max(final, 0.8)
        return cls([(0, 1.0), (step, mid), (2 * step, final)])


def _check_gate(gate: str) -> str:
    if gate not in (PASS, BLOCK):
        raise ValueError(f"td gate must be {PASS!r} or {BLOCK!r}, got {gate!r}")
    return gate


def _cell(o_prev: Tensor, c_prev: Tensor, params: CbmLayerParams, merge_kind: str,
          td_gate: str, constant_bridge: bool = False):
    pad = params.psi_w.shape[-1] // 2
    t_in = ad.concat([c_prev, ad.gated_edge(o_prev, _check_gate(td_gate))], axis=-3)
    pre_c = ad.conv2d(t_in, params.phi_w, params.phi_b, pad)
    if merge_kind == PRODUCTION:
        c = ad.sigmoid(pre_c)
    elif merge_kind == ADDITION:
        c = ad.relu(pre_c)
    else:
        raise ValueError(f"unknown merge kind {merge_kind!r}")
    if c.shape != c_prev.shape:
        raise ValueError(f"memory shape {c_prev.shape} does not match cell output {c.shape}")
    if constant_bridge:
        r = Tensor._wrap(np.ones_like(c.data))
    else:
        r = ad.relu(ad.conv2d(o_prev, params.psi_w, params.psi_b, pad))
    o = ad.mul(r, c) if merge_kind == PRODUCTION else ad.add(r, c)
    return o, c, r


def cbm_cell_step(o_prev: Tensor, c_prev: Tensor, params: CbmLayerParams,
                  merge_kind: str = PRODUCTION, td_gate: str = PASS,
                  constant_bridge: bool = False) -> tuple[Tensor, Tensor]:
    """One layer at one time step; returns the merged output and new memory."""
    o, c, _ = _cell(o_prev, c_prev, params, merge_kind, td_gate, constant_bridge)
    return o, c


@dataclass
class StepTrace:
    r: list[np.ndarray]
    c: list[np.ndarray]


def stack_step(frame: Tensor, state: CbmState, layers: Sequence[CbmLayerParams],
               cfg: StackConfig, td_gates: Sequence[str], trace: list | None = None):
    """Run every layer for one frame.  Returns (top features, new state)."""
    if len(state) != len(layers) or len(td_gates) != len(layers):
        raise ValueError(
            f"state has {len(state)} layers, params {len(layers)}, gates {len(td_gates)}"
        )
    outs = [frame]
    new_mem = []
    rs = []
    for i, (params, c_prev, gate) in enumerate(zip(layers, state.memory, td_gates), start=1):
        o, c, r = _cell(outs[-1], c_prev, params, cfg.merge_kind, gate, cfg.constant_bridge)
        if cfg.use_shortcuts and i % 2 == 0 and outs[i - 2].shape == o.shape:
            o = ad.add(o, outs[i - 2])
        outs.append(o)
        new_mem.append(c)
        rs.append(r.data)
    if trace is not None:
        trace.append(StepTrace(rs, [c.data for c in new_mem]))
    return outs[-1], CbmState(new_mem)


@dataclass
class ClipRun:
    outputs: list[Tensor]
    final_state: CbmState
    tape: ad.Tape
    states: list[CbmState]
    gates: np.ndarray
    trace: list[StepTrace] | None = None


def draw_gates(rng: np.random.Generator, steps: int, num_layers: int, td_rate: float) -> np.ndarray:
    """Boolean [steps, layers] array, True where the gate blocks."""
    if not 0.0 <= td_rate <= 1.0:
        raise ValueError(f"td_rate {td_rate} outside [0, 1]")
    # one uniform per (step, layer) regardless of rate keeps rng streams aligned
    return rng.random((steps, num_layers)) < td_rate


def unroll_clip(frames, init_state: CbmState, layers: Sequence[CbmLayerParams],
                cfg: StackConfig, td_rate: float = 0.0,
                rng: np.random.Generator | None = None, gates: np.ndarray | None = None,
                record_trace: bool = False) -> ClipRun:
    """Unroll the stack over ``frames`` ([S, C, H, W] or [S, N, C, H, W]).

    Gates are drawn per (time step, layer) from ``rng`` unless given
    explicitly.  All records land on one fresh tape whose depth is the
    number of steps.
    """
    frames = np.asarray(frames, dtype=np.float64)
    steps = frames.shape[0] if frames.ndim else 0
    if steps == 0:
        raise ValueError("unroll_clip: empty frame sequence")
    if gates is None:
        if rng is None:
            raise ValueError("unroll_clip: need rng or explicit gates")
        gates = draw_gates(rng, steps, len(layers), td_rate)
    gates = np.asarray(gates, dtype=bool)
    if gates.shape != (steps, len(layers)):
        raise ValueError(f"gates shape {gates.shape} != {(steps, len(layers))}")
    trace = [] if record_trace else None
    outputs, states = [], []
    state = init_state
    with ad.Tape() as tape:
        for t in range(steps):
            step_gates = [BLOCK if g else PASS for g in gates[t]]
            out, state = stack_step(Tensor._wrap(frames[t]), state, layers, cfg, step_gates, trace)
            outputs.append(out)
            states.append(state)
            tape.mark_step()
    return ClipRun(outputs, state, tape, states, gates, trace)
