"""Counting backward paths through an unrolled CBM stack under Temporal Dropout.

Backward paths start at the top-layer output of the last step.  From a
cell output ``o[i,t]`` a path may descend through R to ``o[i-1,t]`` or step
into the memory ``c[i,t]``.  From ``c[i,t]`` it may go back in time to
``c[i,t-1]`` or, if gate ``(i,t)`` passes, descend to ``o[i-1,t]``.
A path "reaches" cell ``(i,t)`` when it arrives at ``c[i,t]``, i.e. at the
temporal unit of that cell.  Every hop changes either the layer or the
step by one, so a path's length is ``(L - i) + (S - t)``.
"""

from __future__ import annotations

from collections import defaultdict

import numpy as np


def _grid_counts(num_layers: int, num_steps: int, keep) -> np.ndarray:
    """``keep(i, t)`` is the (expected) pass weight of gate at layer i, step t
    (1-based).  Returns counts into c[i, t] as an [L+1, S+1] array."""
    L, S = num_layers, num_steps
    to_o = np.zeros((L + 2, S + 2))
    to_c = np.zeros((L + 2, S + 2))
    for i in range(L, 0, -1):
        for t in range(S, 0, -1):
            if i == L:
                to_o[i, t] = 1.0 if t == S else 0.0
            else:
                to_o[i, t] = to_o[i + 1, t] + keep(i + 1, t) * to_c[i + 1, t]
            to_c[i, t] = to_o[i, t] + to_c[i, t + 1]
    return to_c


def _group(to_c: np.ndarray, num_layers: int, num_steps: int) -> dict[int, float]:
    out: dict[int, float] = defaultdict(float)
    for i in range(1, num_layers + 1):
        for t in range(1, num_steps + 1):
            out[(num_layers - i) + (num_steps - t)] += float(to_c[i, t])
    return dict(sorted(out.items()))


def expected_backprop_paths(num_layers: int, num_steps: int, td_rate: float) -> dict[int, float]:
    """Expected number of backward paths of each length, over independent
    per-(layer, step) gates that block with probability ``td_rate``.

    Gate ``(i, t)`` is independent of every count it multiplies (those only
    involve gates of higher layers), so expectations propagate through the
    same recursion as the counts themselves.
    """
    if num_layers < 1 or num_steps < 1:
        raise ValueError("grid must have at least one layer and one step")
    if not 0.0 <= td_rate <= 1.0:
        raise ValueError(f"td_rate {td_rate} outside [0, 1]")
    keep = 1.0 - td_rate
    return _group(_grid_counts(num_layers, num_steps, lambda i, t: keep), num_layers, num_steps)


def backprop_path_counts(num_layers: int, num_steps: int, blocked: np.ndarray) -> dict[int, float]:
    """Exact path counts for one gate draw; ``blocked`` is [steps, layers]."""
    blocked = np.asarray(blocked, dtype=bool)
    return _group(
        _grid_counts(num_layers, num_steps, lambda i, t: 0.0 if blocked[t - 1, i - 1] else 1.0),
        num_layers, num_steps,
    )
