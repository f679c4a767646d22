"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Only the primitives the recurrent cell and its losses need are provided.
Shapes must match exactly for elementwise ops; there is no broadcasting
apart from the bias terms of ``conv2d`` and ``affine`` and an optional
leading batch axis on ``conv2d``/``affine``/``softmax_xent``.

Operations record themselves while any operand requires a gradient.  Each
record carries a global sequence number, so creation order is a valid
topological order and ``backward`` simply replays records in reverse.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

PASS = "pass"
BLOCK = "block"

_seq = itertools.count()
_local = threading.local()


def _state():
    st = _local.__dict__
    if "tapes" not in st:
        st["tapes"] = []
        st["grad_enabled"] = True
        st["replay"] = None
    return st


class Tensor:
    """Dense array node.  Leaves are tensors without a producing record."""

    __slots__ = ("data", "requires_grad", "grad", "_record", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._record: _Record | None = None
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = False
        t.grad = None
        t._record = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._record is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


class _Record:
    __slots__ = ("seq", "op", "inputs", "output", "backward", "gate", "done")

    def __init__(self, op, inputs, output, backward, gate=None):
        self.seq = next(_seq)
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward
        self.gate = gate
        self.done = False


class Tape:
    """Groups the records created while it is active.

    Backpropagation itself does not need the tape (records link to their
    operands), but the tape is what gets instrumented: ``steps`` counts the
    unrolled time steps and ``records`` keeps the op order.
    """

    def __init__(self, name: str = ""):
        self.name = name
        self.records: list[_Record] = []
        self.steps = 0

    def mark_step(self) -> None:
        self.steps += 1

    @property
    def depth(self) -> int:
        return self.steps

    def gates(self) -> list[str]:
        return [r.gate for r in self.records if r.gate is not None]

    def __enter__(self) -> "Tape":
        _state()["tapes"].append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _state()["tapes"]
        stack.remove(self)

    def __len__(self) -> int:
        return len(self.records)


@contextmanager
def no_grad():
    st = _state()
    prev = st["grad_enabled"]
    st["grad_enabled"] = False
    try:
        yield
    finally:
        st["grad_enabled"] = prev


def _make(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward, gate=None) -> Tensor:
    out = Tensor._wrap(data)
    st = _state()
    if st["grad_enabled"] and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        rec = _Record(op, tuple(inputs), out, backward, gate)
        out._record = rec
        for tape in st["tapes"]:
            tape.records.append(rec)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape} (no broadcasting)")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


ewise_add = add
ewise_mul = mul


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make("scale", x.data * c, (x,), lambda g: (g * c,))


def add_n(terms: Sequence[Tensor]) -> Tensor:
    if not terms:
        raise ValueError("add_n needs at least one term")
    shape = terms[0].shape
    for t in terms[1:]:
        _same_shape(terms[0], t, "add_n")
    data = np.zeros(shape)
    for t in terms:
        data = data + t.data
    n = len(terms)
    return _make("add_n", data, tuple(terms), lambda g: (g,) * n)


def tensor_sum(x: Tensor) -> Tensor:
    shape = x.shape
    return _make("sum", np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def spatial_mean(x: Tensor) -> Tensor:
    """Mean over the last two (spatial) axes."""
    shape = x.shape
    area = shape[-1] * shape[-2]
    return _make("spatial_mean", x.data.mean(axis=(-2, -1)), (x,),
                 lambda g: (np.broadcast_to(g[..., None, None] / area, shape).copy(),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return _make("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    datas = [p.data for p in parts]
    out = np.concatenate(datas, axis=axis)
    bounds = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make("concat", out, tuple(parts), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _make("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def gated_edge(x: Tensor, gate: str) -> Tensor:
    """Identity in the forward pass; in ``block`` mode the backward pass
    contributes nothing to ``x``.  The gate is decided by the caller."""
    if gate not in (PASS, BLOCK):
        raise ValueError(f"gate must be {PASS!r} or {BLOCK!r}, got {gate!r}")
    data = x.data
    replay = _state()["replay"]
    if gate == BLOCK and replay is not None:
        data = replay.visit(data)
    if gate == PASS:
        return _make("gate", data.copy(), (x,), lambda g: (g,), gate=PASS)
    return _make("gate", data.copy(), (x,), lambda g: (None,), gate=BLOCK)


def _im2col(x: np.ndarray, kh: int, kw: int) -> tuple[np.ndarray, int, int]:
    n, c = x.shape[:2]
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # n c ho wo kh kw
    ho, wo = win.shape[2], win.shape[3]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw), ho, wo


def _conv_out(x: np.ndarray, kmat: np.ndarray, kh: int, kw: int) -> np.ndarray:
    cols, ho, wo = _im2col(x, kh, kw)
    out = cols @ kmat.T
    return out.reshape(x.shape[0], ho, wo, -1).transpose(0, 3, 1, 2)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` [C,H,W] (or [N,C,H,W]) with ``kernel``
    [C_out,C_in,kH,kW] plus ``bias`` [C_out]."""
    if kernel.data.ndim != 4:
        raise ValueError(f"conv2d: kernel must be 4-d, got shape {kernel.shape}")
    c_out, c_in, kh, kw = kernel.shape
    if padding < 0:
        raise ValueError("conv2d: padding must be >= 0")
    if bias.shape != (c_out,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match C_out={c_out}")
    batched = x.data.ndim == 4
    if x.data.ndim not in (3, 4):
        raise ValueError(f"conv2d: input must be [C,H,W] or [N,C,H,W], got {x.shape}")
    xd = x.data if batched else x.data[None]
    if xd.shape[1] != c_in:
        raise ValueError(
            f"conv2d: kernel expects {c_in} input channels, input has {xd.shape[1]}"
        )
    h, w = xd.shape[2:]
    if h + 2 * padding - kh + 1 < 1 or w + 2 * padding - kw + 1 < 1:
        raise ValueError(f"conv2d: {kh}x{kw} kernel does not fit {h}x{w} input with padding {padding}")
    p = padding
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    kd = kernel.data
    kmat = kd.reshape(c_out, -1)
    out = _conv_out(xp, kmat, kh, kw) + bias.data[None, :, None, None]

    def backward(g):
        g4 = g if batched else g[None]
        n, _, ho, wo = g4.shape
        gmat = g4.transpose(0, 2, 3, 1).reshape(-1, c_out)
        # the unrolled patches are rebuilt here; keeping them alive between
        # forward and backward costs kH*kW times the input's memory
        gk = (gmat.T @ _im2col(xp, kh, kw)[0]).reshape(kd.shape)
        gb = g4.sum(axis=(0, 2, 3))
        gpad = np.pad(g4, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
        kflip = kd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c_in, -1)
        gxp = _conv_out(gpad, kflip, kh, kw)
        gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        return (gx if batched else gx[0]), gk, gb

    return _make("conv2d", out if batched else out[0], (x, kernel, bias), backward)


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``weight @ x + bias`` for x [D_in] or a batch [N, D_in]."""
    d_out, d_in = weight.shape
    if x.shape[-1] != d_in or x.data.ndim not in (1, 2):
        raise ValueError(f"affine: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (d_out,):
        raise ValueError(f"affine: bias {bias.shape} incompatible with weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T + bias.data

    def backward(g):
        if xd.ndim == 1:
            return wd.T @ g, np.outer(g, xd), g
        return g @ wd, g.T @ xd, g.sum(axis=0)

    return _make("affine", out, (x, weight, bias), backward)


def softmax_xent(logits: Tensor, label) -> Tensor:
    """Softmax cross-entropy; averaged over the batch for [N, K] logits."""
    z = logits.data
    batched = z.ndim == 2
    z2 = z if batched else z[None]
    labels = np.atleast_1d(np.asarray(label))
    k = z2.shape[1]
    if labels.shape != (z2.shape[0],) or not np.issubdtype(labels.dtype, np.integer):
        raise ValueError(f"softmax_xent: bad label {label!r} for logits {logits.shape}")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"softmax_xent: label out of range [0, {k})")
    shifted = z2 - z2.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(len(labels))
    n = len(labels)
    loss = float(np.mean(logsum - shifted[rows, labels]))
    probs = np.exp(shifted - logsum[:, None])
    probs[rows, labels] -= 1.0
    probs /= n
    grad = probs if batched else probs[0]
    return _make("softmax_xent", np.array(loss), (logits,), lambda g: (float(g) * grad,))


def mse(pred: Tensor, target) -> Tensor:
    """Mean of squared differences.  ``target`` may be a Tensor or an array."""
    target = as_tensor(target)
    _same_shape(pred, target, "mse")
    diff = pred.data - target.data
    n = diff.size
    loss = np.array(np.mean(diff * diff))

    def backward(g):
        gp = (2.0 * float(g) / n) * diff
        return gp, -gp

    return _make("mse", loss, (pred, target), backward)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Gradients must be reset explicitly between passes: a leaf that already
    holds a gradient, or a graph that was already backpropagated, is an error.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._record is None:
        if loss.requires_grad:
            _accumulate_leaf(loss, np.ones_like(loss.data))
        return

    records: list[_Record] = []
    leaves: dict[int, Tensor] = {}
    seen: set[int] = set()
    stack = [loss._record]
    while stack:
        rec = stack.pop()
        if id(rec) in seen:
            continue
        seen.add(id(rec))
        if rec.done:
            raise RuntimeError("backward: graph was already backpropagated; rebuild it")
        records.append(rec)
        for t in rec.inputs:
            if not t.requires_grad:
                continue
            if t._record is None:
                leaves[id(t)] = t
            else:
                stack.append(t._record)
    for leaf in leaves.values():
        if leaf.grad is not None:
            raise RuntimeError(
                "backward: leaf already holds a gradient; reset grads (zero_grad) first"
            )

    records.sort(key=lambda r: r.seq, reverse=True)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in records:
        rec.done = True
        g = grads.pop(id(rec.output), None)
        inputs, fn = rec.inputs, rec.backward
        # drop the closure and operand links so the graph's buffers are freed
        # now rather than whenever the cycle collector runs
        rec.inputs, rec.backward = (), None
        if g is None:
            continue
        in_grads = fn(g)
        for t, gi in zip(inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t._record is None:
                _accumulate_leaf(t, gi)
            else:
                key = id(t)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
    for leaf in leaves.values():
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=np.float64).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

class _GateReplay:
    """Freezes the values passing through blocked gates so that a
    finite-difference pair differentiates the same stop-gradient function
    the analytic pass does."""

    def __init__(self):
        self.values: list[np.ndarray] = []
        self.recording = True
        self.cursor = 0

    def visit(self, data: np.ndarray) -> np.ndarray:
        if self.recording:
            self.values.append(data.copy())
            return data
        if self.cursor >= len(self.values):
            raise ValueError("grad_check: graph structure changed between evaluations")
        out = self.values[self.cursor]
        self.cursor += 1
        return out


@contextmanager
def _replaying(replay: _GateReplay):
    st = _state()
    prev = st["replay"]
    st["replay"] = replay
    try:
        yield
    finally:
        st["replay"] = prev


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    epsilon: float
    tolerance: float
    coords: dict[str, int] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def summary(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict} max_rel_err={self.max_error:.3e} (eps={self.epsilon:g}, tol={self.tolerance:g})"


def relative_error(a, n):
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor] | Sequence[Tensor],
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    max_coords: int = 64,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` must rebuild the graph from ``params`` on every call and be
    deterministic; any gate draws have to be fixed by the caller.  Tensors
    larger than ``max_coords`` (at least 32) are checked on a random subset.
    """
    if isinstance(params, Mapping):
        named = dict(params)
    else:
        named = {p.name or f"param{i}": p for i, p in enumerate(params)}
    max_coords = max(32, int(max_coords))
    rng = rng or np.random.default_rng(0)

    replay = _GateReplay()
    zero_grad(named.values())
    with _replaying(replay):
        loss = f()
        base = loss.item()
        backward(loss)
    # a parameter the loss does not reach has a zero gradient
    analytic = {k: np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for k, p in named.items()}
    replay.recording = False

    def value() -> float:
        replay.cursor = 0
        with no_grad(), _replaying(replay):
            v = f().item()
        if replay.cursor != len(replay.values):
            raise ValueError("grad_check: graph structure changed between evaluations")
        return v

    if value() != base:
        raise ValueError("grad_check: f is not deterministic; fix all random draws before checking")

    errors: dict[str, float] = {}
    counts: dict[str, int] = {}
    for name, p in named.items():
        size = p.data.size
        if size <= max_coords:
            idx = np.arange(size)
        else:
            idx = rng.choice(size, size=max_coords, replace=False)
        worst = 0.0
        for i in idx:
            pos = np.unravel_index(i, p.shape)
            orig = p.data[pos]
            p.data[pos] = orig + epsilon
            fp = value()
            p.data[pos] = orig - epsilon
            fm = value()
            p.data[pos] = orig
            num = (fp - fm) / (2.0 * epsilon)
            worst = max(worst, float(relative_error(analytic[name][pos], num)))
        errors[name] = worst
        counts[name] = len(idx)
    zero_grad(named.values())
    return GradCheckReport(errors, epsilon, tolerance, counts)
