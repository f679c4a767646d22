"""Randomized finite-difference checks for every primitive and the full cell.

Each case builds a fresh random instance and reduces the op's output to a
scalar with a random weighting, so every output coordinate contributes an
O(1) gradient.  ReLU inputs are kept away from the kink so the central
difference never straddles it: the relu case draws its input that way, and
composite cases are redrawn until no ReLU sees an input near zero.
"""

from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import BLOCK, PASS, Tensor
from .cell import ADDITION, PRODUCTION, CbmLayerParams, CbmState, StackConfig, init_stack, unroll_clip

KINK_MARGIN = 1e-3


def _leaf(rng, shape, scale=1.0, name=None, away_from_zero=False):
    x = scale * rng.standard_normal(shape)
    if away_from_zero:
        x = np.where(np.abs(x) < KINK_MARGIN, np.sign(x + 1e-300) * KINK_MARGIN * 2, x)
    return Tensor(x, requires_grad=True, name=name)


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return ad.tensor_sum(ad.mul(out, Tensor(w)))


def _shape(rng, ndim=None):
    ndim = ndim or int(rng.integers(1, 4))
    return tuple(int(s) for s in rng.integers(1, 5, size=ndim))


Case = Callable[[np.random.Generator], tuple[Callable[[], Tensor], dict[str, Tensor]]]


def _case_add(rng):
    s = _shape(rng)
    a, b, w = _leaf(rng, s), _leaf(rng, s), rng.standard_normal(s)
    return (lambda: _weighted(ad.add(a, b), w)), {"a": a, "b": b}


def _case_mul(rng):
    s = _shape(rng)
    a, b, w = _leaf(rng, s), _leaf(rng, s), rng.standard_normal(s)
    return (lambda: _weighted(ad.mul(a, b), w)), {"a": a, "b": b}


def _case_scale(rng):
    s = _shape(rng)
    a, w, c = _leaf(rng, s), rng.standard_normal(s), float(rng.normal())
    return (lambda: _weighted(ad.scale(a, c), w)), {"a": a}


def _case_add_n(rng):
    s = _shape(rng)
    xs = {f"x{i}": _leaf(rng, s) for i in range(int(rng.integers(1, 5)))}
    w = rng.standard_normal(s)
    return (lambda: _weighted(ad.add_n(list(xs.values())), w)), xs


def _case_sum(rng):
    a = _leaf(rng, _shape(rng))
    c = float(rng.normal())
    return (lambda: ad.scale(ad.tensor_sum(a), c)), {"a": a}


def _case_relu(rng):
    s = _shape(rng)
    a, w = _leaf(rng, s, away_from_zero=True), rng.standard_normal(s)
    return (lambda: _weighted(ad.relu(a), w)), {"a": a}


def _case_sigmoid(rng):
    s = _shape(rng)
    a, w = _leaf(rng, s, scale=2.0), rng.standard_normal(s)
    return (lambda: _weighted(ad.sigmoid(a), w)), {"a": a}


def _case_concat(rng):
    s = list(_shape(rng, 3))
    axis = int(rng.integers(0, 3))
    s2 = list(s)
    s2[axis] = int(rng.integers(1, 4))
    a, b = _leaf(rng, tuple(s)), _leaf(rng, tuple(s2))
    out_shape = list(s)
    out_shape[axis] += s2[axis]
    w = rng.standard_normal(out_shape)
    return (lambda: _weighted(ad.concat([a, b], axis=axis), w)), {"a": a, "b": b}


def _case_reshape(rng):
    s = _shape(rng, 3)
    a = _leaf(rng, s)
    new = (s[0] * s[1], s[2])
    w = rng.standard_normal(new)
    return (lambda: _weighted(ad.reshape(a, new), w)), {"a": a}


def _case_spatial_mean(rng):
    s = _shape(rng, 3)
    a = _leaf(rng, s)
    w = rng.standard_normal(s[:1])
    return (lambda: _weighted(ad.spatial_mean(a), w)), {"a": a}


def _case_gate(rng):
    s = _shape(rng)
    a, w = _leaf(rng, s), rng.standard_normal(s)
    gate = PASS if rng.random() < 0.5 else BLOCK
    # a second route keeps the blocked case from having an all-zero gradient
    return (lambda: ad.add(_weighted(ad.gated_edge(a, gate), w), _weighted(ad.mul(a, a), w))), {"a": a}


def _case_conv2d(rng):
    batched = rng.random() < 0.5
    c_in, c_out = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    k = int(rng.choice([1, 3]))
    h, wd = int(rng.integers(k, 7)), int(rng.integers(k, 7))
    pad = int(rng.integers(0, k // 2 + 1))
    lead = (int(rng.integers(1, 4)),) if batched else ()
    x = _leaf(rng, lead + (c_in, h, wd), name="x")
    kern = _leaf(rng, (c_out, c_in, k, k), scale=0.5, name="kernel")
    b = _leaf(rng, (c_out,), name="bias")
    out_shape = lead + (c_out, h + 2 * pad - k + 1, wd + 2 * pad - k + 1)
    w = rng.standard_normal(out_shape)
    return (lambda: _weighted(ad.conv2d(x, kern, b, pad), w)), {"x": x, "kernel": kern, "bias": b}


def _case_affine(rng):
    d_in, d_out = int(rng.integers(1, 6)), int(rng.integers(1, 6))
    lead = (int(rng.integers(1, 4)),) if rng.random() < 0.5 else ()
    x = _leaf(rng, lead + (d_in,))
    wt = _leaf(rng, (d_out, d_in))
    b = _leaf(rng, (d_out,))
    w = rng.standard_normal(lead + (d_out,))
    return (lambda: _weighted(ad.affine(x, wt, b), w)), {"x": x, "weight": wt, "bias": b}


def _case_softmax_xent(rng):
    n, k = int(rng.integers(1, 5)), int(rng.integers(2, 6))
    z = _leaf(rng, (n, k))
    labels = rng.integers(0, k, size=n)
    return (lambda: ad.softmax_xent(z, labels)), {"logits": z}


def _case_mse(rng):
    s = _shape(rng)
    a, b = _leaf(rng, s), _leaf(rng, s)
    return (lambda: ad.mse(a, b)), {"pred": a, "target": b}


def _relu_margin(f: Callable[[], Tensor]) -> float:
    """Smallest |input| seen by any ReLU while evaluating ``f``."""
    seen = [np.inf]
    original = ad.relu

    def spy(x):
        if x.data.size:
            seen[0] = min(seen[0], float(np.min(np.abs(x.data))))
        return original(x)

    ad.relu = spy
    try:
        with ad.no_grad():
            f()
    finally:
        ad.relu = original
    return seen[0]


def _away_from_kinks(case: Case, tries: int = 200) -> Case:
    """Redraw composite instances until every ReLU input clears the kink
    margin; a central difference across the kink measures nothing."""
    def wrapped(rng):
        for _ in range(tries):
            f, named = case(rng)
            if _relu_margin(f) >= KINK_MARGIN:
                return f, named
        raise RuntimeError("could not draw an instance away from the ReLU kink")
    return wrapped


def _cell_case(merge_kind, constant_bridge=False):
    def case(rng):
        c_in, c_out = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        h, wd = int(rng.integers(2, 6)), int(rng.integers(2, 6))
        params = CbmLayerParams.init(c_in, c_out, rng)
        params.psi_b.data[:] = rng.normal(0, 0.1, c_out)
        params.phi_b.data[:] = rng.normal(0, 0.1, c_out)
        x = _leaf(rng, (c_in, h, wd), name="o_prev")
        c_prev = _leaf(rng, (c_out, h, wd), name="c_prev")
        gate = PASS if rng.random() < 0.5 else BLOCK
        wo, wc = rng.standard_normal((c_out, h, wd)), rng.standard_normal((c_out, h, wd))

        def f():
            from .cell import cbm_cell_step
            o, c = cbm_cell_step(x, c_prev, params, merge_kind, gate, constant_bridge)
            return ad.add(_weighted(o, wo), _weighted(c, wc))

        named = params.named("cell")
        named.update({"o_prev": x, "c_prev": c_prev})
        return f, named
    return case


def _stack_case(td_rate: float, gate_seed: int | None):
    def case(rng):
        L = int(rng.integers(1, 4))
        steps = int(rng.integers(1, 4))
        cfg = StackConfig(num_layers=L, channels=int(rng.integers(1, 3)),
                          merge_kind=PRODUCTION if rng.random() < 0.5 else ADDITION,
                          use_shortcuts=bool(rng.random() < 0.5))
        h, wd = int(rng.integers(2, 5)), int(rng.integers(2, 5))
        layers = init_stack(cfg, rng)
        for lp in layers:
            # zero biases over all-zero inputs would sit exactly on the ReLU kink
            lp.psi_b.data[:] = rng.normal(0, 0.1, lp.out_channels)
            lp.phi_b.data[:] = rng.normal(0, 0.1, lp.out_channels)
        frames = rng.standard_normal((steps, 1, h, wd))
        grng = np.random.default_rng(gate_seed) if gate_seed is not None else rng
        gates = grng.random((steps, L)) < td_rate
        weights = [rng.standard_normal((cfg.channels, h, wd)) for _ in range(steps)]

        def f():
            state = CbmState.zeros(cfg, h, wd)
            run = unroll_clip(frames, state, layers, cfg, gates=gates)
            return ad.add_n([_weighted(o, w) for o, w in zip(run.outputs, weights)])

        named = {}
        for i, lp in enumerate(layers):
            named.update(lp.named(f"layer{i}"))
        return f, named
    return case


PRIMITIVES: dict[str, Case] = {
    "add": _case_add,
    "mul": _case_mul,
    "scale": _case_scale,
    "add_n": _case_add_n,
    "sum": _case_sum,
    "relu": _case_relu,
    "sigmoid": _case_sigmoid,
    "concat": _case_concat,
    "reshape": _case_reshape,
    "spatial_mean": _case_spatial_mean,
    "gated_edge": _case_gate,
    "conv2d": _case_conv2d,
    "affine": _case_affine,
    "softmax_xent": _case_softmax_xent,
    "mse": _case_mse,
}

CELLS: dict[str, Case] = {
    "cell_production": _away_from_kinks(_cell_case(PRODUCTION)),
    "cell_addition": _away_from_kinks(_cell_case(ADDITION)),
    "cell_constant_bridge": _away_from_kinks(_cell_case(PRODUCTION, constant_bridge=True)),
}


@dataclass
class SuiteResult:
    errors: dict[str, float] = field(default_factory=dict)
    instances: dict[str, int] = field(default_factory=dict)
    seconds: float = 0.0
    tolerance: float = 1e-4

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.errors.values())

    def failures(self) -> list[str]:
        return [k for k, e in self.errors.items() if not e < self.tolerance]


def run_suite(instances: int = 100, seed: int = 0, epsilon: float = 1e-5, tolerance: float = 1e-4,
              td_rate: float = 0.0, gate_seed: int | None = None,
              include: list[str] | None = None) -> SuiteResult:
    """Check every primitive and every cell variant on ``instances`` random
    instances each, plus a gated multi-step stack on half as many."""
    cases = dict(PRIMITIVES)
    cases.update(CELLS)
    cases["stack_unroll"] = _away_from_kinks(_stack_case(td_rate, gate_seed))
    if include is not None:
        cases = {k: v for k, v in cases.items() if k in include}
    result = SuiteResult(tolerance=tolerance)
    t0 = time.perf_counter()
    for k, (name, case) in enumerate(cases.items()):
        rng = np.random.default_rng([seed, k])
        worst = 0.0
        # the unrolled stack has up to a dozen tensors and costs a full
        # unroll per probe; it runs on half as many instances
        count = max(1, instances // 2) if name == "stack_unroll" else instances
        for _ in range(count):
            f, params = case(rng)
            report = ad.grad_check(f, params, epsilon=epsilon, tolerance=tolerance,
                                   max_coords=32, rng=rng)
            worst = max(worst, report.max_error)
        result.errors[name] = worst
        result.instances[name] = count
    result.seconds = time.perf_counter() - t0
    return result


@contextmanager
def injected_fault():
    """Replace the sigmoid with one whose derivative is slightly wrong.
    Negative control for the checker; never used in training."""
    original = ad.sigmoid

    def faulty(x: Tensor) -> Tensor:
        s = original(x).data
        return ad._make("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s) * 1.01,))

    ad.sigmoid = faulty
    try:
        yield
    finally:
        ad.sigmoid = original
