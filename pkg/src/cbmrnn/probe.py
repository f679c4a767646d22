"""Activity probes on a trained stack: how much the representation and
temporal units change over time where the input itself never changes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import binary_dilation

from . import autodiff as ad
from .cell import CbmState


def static_mask(frames: np.ndarray, radius: int, threshold: float = 0.0) -> np.ndarray:
    """Pixels farther than ``radius`` (Chebyshev distance) from any pixel
    that exceeds ``threshold`` in any frame of the sequence.

    ``frames`` is [n, T, C, H, W]; returns a boolean [n, H, W].  With
    radius at least the stack depth, a pure feed-forward path through the
    layers sees only constant input there.
    """
    frames = np.asarray(frames)
    active = (np.abs(frames) > threshold).any(axis=(1, 2))  # n H W
    if radius <= 0:
        return ~active
    structure = np.ones((1, 2 * radius + 1, 2 * radius + 1), bool)
    return ~binary_dilation(active, structure=structure)


@dataclass
class UnitActivity:
    """Mean temporal variance of each unit's features over a pixel set."""

    r_var: list[float]  # per layer
    c_var: list[float]
    pixels: int

    @property
    def ratio(self) -> float:
        """Temporal-unit over representation-unit variance, pooled over
        layers.  Infinite when the representation units are exactly
        constant."""
        r, c = float(np.mean(self.r_var)), float(np.mean(self.c_var))
        if r == 0.0:
            return np.inf if c > 0 else np.nan
        return c / r


def unit_activity(model, frames: np.ndarray, mask: np.ndarray) -> UnitActivity:
    """Run full sequences from a zero state and measure, per layer, the
    variance across time of the R and T outputs at the masked pixels.

    Variances are taken per (sequence, channel, pixel) and averaged.
    """
    frames = np.asarray(frames, dtype=np.float64)
    n, T = frames.shape[:2]
    if mask.shape != (n,) + frames.shape[-2:]:
        raise ValueError(f"mask shape {mask.shape} does not match frames {frames.shape}")
    pixels = int(mask.sum())
    if pixels == 0:
        raise ValueError("empty pixel mask")
    with ad.no_grad():
        state = CbmState.zeros(model.cfg, *frames.shape[-2:], batch=n)
        run = model.unroll(np.swapaxes(frames, 0, 1), state,
                           gates=np.zeros((T, model.cfg.num_layers), bool), record_trace=True)
    r_var, c_var = [], []
    for layer in range(model.cfg.num_layers):
        r = np.stack([step.r[layer] for step in run.trace], axis=1)  # n T C H W
        c = np.stack([step.c[layer] for step in run.trace], axis=1)
        sel = np.broadcast_to(mask[:, None, :, :], (n, r.shape[2]) + mask.shape[1:])
        r_var.append(float(r.var(axis=1)[sel].mean()))
        c_var.append(float(c.var(axis=1)[sel].mean()))
    return UnitActivity(r_var, c_var, pixels)
