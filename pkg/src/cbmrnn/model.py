"""A CBM stack with a per-step linear read-out head."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cell import CbmState, ClipRun, StackConfig, init_stack, unroll_clip
from .optim import xavier_init

CLASSIFY = "classify"
REGRESS = "regress"
FLATTEN = "flatten"
MEAN = "mean"


class CbmModel:
    """Stacked CBM layers followed by a linear head on the top features.

    The head reads either the flattened feature map (``pool='flatten'``) or
    the per-channel spatial mean (``pool='mean'``, translation invariant).

    ``head_kind='classify'`` gives ``num_classes`` logits per step trained
    with softmax cross-entropy.  ``'regress'`` gives one scalar per step
    trained with MSE against ``target / target_scale``; predictions are
    scaled back.
    """

    def __init__(self, cfg: StackConfig, image_shape: tuple[int, int], head_kind: str = CLASSIFY,
                 num_classes: int = 4, rng: np.random.Generator | None = None,
                 target_scale: float = 1.0, pool: str = FLATTEN):
        if pool not in (FLATTEN, MEAN):
            raise ValueError(f"unknown pooling {pool!r}")
        if head_kind not in (CLASSIFY, REGRESS):
            raise ValueError(f"unknown head kind {head_kind!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.image_shape = tuple(image_shape)
        self.head_kind = head_kind
        self.target_scale = float(target_scale)
        self.pool = pool
        self.layers = init_stack(cfg, rng)
        h, w = self.image_shape
        d_in = cfg.channels * h * w if pool == FLATTEN else cfg.channels
        d_out = num_classes if head_kind == CLASSIFY else 1
        self.head_w = Tensor(xavier_init((d_out, d_in), rng), requires_grad=True)
        self.head_b = Tensor(np.zeros(d_out), requires_grad=True)

    @property
    def state_shape(self) -> tuple[int, int, int]:
        return (self.cfg.channels,) + self.image_shape

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named(f"layer{i}"))
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        for name, t in out.items():
            t.name = name
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def unroll(self, frames, init_state: CbmState, td_rate: float = 0.0,
               rng: np.random.Generator | None = None, gates=None,
               record_trace: bool = False) -> ClipRun:
        return unroll_clip(frames, init_state, self.layers, self.cfg, td_rate, rng,
                           gates=gates, record_trace=record_trace)

    def head(self, features: Tensor) -> Tensor:
        n = features.shape[0]
        if self.pool == MEAN:
            c = features.shape[1]
            pooled = ad.spatial_mean(features)
            return ad.affine(ad.reshape(pooled, (n, c)), self.head_w, self.head_b)
        return ad.affine(ad.reshape(features, (n, -1)), self.head_w, self.head_b)

    def clip_loss(self, outputs: Sequence[Tensor], targets: np.ndarray) -> Tensor:
        """Mean over steps of the per-step task loss; ``targets`` is [N, S]."""
        targets = np.asarray(targets)
        if targets.shape[1] != len(outputs):
            raise ValueError(f"{len(outputs)} outputs but targets cover {targets.shape[1]} steps")
        terms = []
        for j, feat in enumerate(outputs):
            y = self.head(feat)
            if self.head_kind == CLASSIFY:
                terms.append(ad.softmax_xent(y, targets[:, j].astype(np.int64)))
            else:
                terms.append(ad.mse(y, targets[:, j:j + 1] / self.target_scale))
        return ad.scale(ad.add_n(terms), 1.0 / len(terms))

    def predict(self, frames: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Full-sequence inference from a zero state, no clipping.

        ``frames`` is [n, T, C, H, W]; returns [n, T, K] head outputs
        (logits, or rescaled regression values with K = 1).
        """
        frames = np.asarray(frames, dtype=np.float64)
        n, T = frames.shape[:2]
        out = []
        with ad.no_grad():
            for b0 in range(0, n, batch_size):
                chunk = np.swapaxes(frames[b0:b0 + batch_size], 0, 1)
                state = CbmState.zeros(self.cfg, *self.image_shape, batch=chunk.shape[1])
                run = self.unroll(chunk, state, gates=np.zeros((T, self.cfg.num_layers), bool))
                ys = np.stack([self.head(o).data for o in run.outputs], axis=1)
                out.append(ys)
        ys = np.concatenate(out, axis=0)
        return ys * self.target_scale if self.head_kind == REGRESS else ys

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.named_parameters().items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        if set(arrays) != set(params):
            missing = sorted(set(params) - set(arrays))
            extra = sorted(set(arrays) - set(params))
            raise ValueError(f"parameter mismatch: missing {missing}, unexpected {extra}")
        for k, t in params.items():
            a = np.asarray(arrays[k], dtype=np.float64)
            if a.shape != t.shape:
                raise ValueError(f"{k}: shape {a.shape} != {t.shape}")
            t.data[...] = a
