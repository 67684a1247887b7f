"""Baseline dropout strategies and the top-k sparsifier that stacks on them.

All baselines emit patterns at the same row granularity as the adaptive
strategy, so every strategy shares one wire format and one byte-accounting
path.  The sparsifier implements top-magnitude selection with residual
accumulation: entries that miss the cut stay in a per-client residual and
compete again on later calls, so no coordinate is starved forever.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .nn import ModelParams
from .patterns import DroppingPattern, RowLayout, sample_pattern

FEDBIAD = "fedbiad"
FEDAVG = "fedavg"
RANDOM_DROP = "random_drop"
ORDERED_DROP = "ordered_drop"
MAGNITUDE_PRUNE = "magnitude_prune"
STRATEGIES = (FEDBIAD, FEDAVG, RANDOM_DROP, ORDERED_DROP, MAGNITUDE_PRUNE)


def check_strategy(tag: str, p: float) -> None:
    if tag not in STRATEGIES:
        raise ValueError(f"unknown strategy {tag!r}; choose from {STRATEGIES}")
    if tag != FEDAVG and not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate {p} invalid for strategy {tag!r}")


@dataclass(frozen=True)
class TopKConfig:
    """Sketched-compression stage stacked on a dropout strategy.

    ``k_fraction`` is the fraction of kept-row entries transmitted per
    upload (floored, at least one).  Each transmitted entry costs an
    index plus a value (twice the dense per-entry cost), so stacking
    shrinks uploads only for fractions below one half.  The per-client
    residual accumulator lives in the client state, not here.
    """

    k_fraction: float

    def __post_init__(self):
        if not 0.0 < self.k_fraction <= 1.0:
            raise ValueError("k_fraction must lie in (0, 1]")


def random_drop_pattern(layout: RowLayout, rng: np.random.Generator) -> DroppingPattern:
    """Uniform quota-subset per layer, drawn once per round and then fixed."""
    return sample_pattern(layout, rng)


def ordered_drop_pattern(layout: RowLayout) -> DroppingPattern:
    """Keep the first quota rows of each layer, drop the trailing ones."""
    bits = np.zeros(layout.J, dtype=np.uint8)
    for lr, sl in zip(layout.droppable_layers, layout.droppable_slices()):
        bits[sl][: layout.quota(lr)] = 1
    return DroppingPattern(bits)


def magnitude_prune_pattern(means: ModelParams, layout: RowLayout) -> DroppingPattern:
    """Keep the quota rows with the largest L2 norms, ties to lower index."""
    droppable = [m for m, drop in zip(means.matrices, means.droppable) if drop]
    if [m.shape[0] for m in droppable] != [lr.rows for lr in layout.droppable_layers]:
        raise ShapeError("means do not match the layout's droppable layers")
    bits = np.zeros(layout.J, dtype=np.uint8)
    for m, lr, sl in zip(droppable, layout.droppable_layers, layout.droppable_slices()):
        norms = np.sqrt(np.einsum("ij,ij->i", m, m))
        order = np.lexsort((np.arange(lr.rows), -norms))
        bits[sl][order[: layout.quota(lr)]] = 1
    return DroppingPattern(bits)


def topk_sparsify(
    delta: np.ndarray,
    residual: np.ndarray,
    k_fraction: float,
    selectable: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Select the top-magnitude entries of ``residual + delta``.

    ``delta`` must already be restricted to kept rows (zero elsewhere);
    ``selectable`` marks the flat entries eligible this call, i.e. the
    kept-row entries.  Returns ``(indices, values, new_residual)`` with
    indices ascending.  Exactly ``max(1, floor(k_fraction * n_selectable))``
    entries are transmitted; everything untransmitted stays in the
    residual, so ``transmitted + new_residual == residual + delta`` holds
    entry for entry.
    """
    if delta.shape != residual.shape or delta.shape != selectable.shape:
        raise ShapeError("delta, residual, and selectable must share one flat shape")
    if not 0.0 < k_fraction <= 1.0:
        raise ValueError("k_fraction must lie in (0, 1]")
    combined = residual + delta
    candidates = np.flatnonzero(selectable)
    if candidates.size == 0:
        return np.empty(0, dtype=np.int64), np.empty(0), combined
    k = max(1, int(k_fraction * candidates.size))
    order = np.lexsort((candidates, -np.abs(combined[candidates])))
    chosen = np.sort(candidates[order[:k]])
    values = combined[chosen].copy()
    new_residual = combined.copy()
    new_residual[chosen] = 0.0
    return chosen, values, new_residual
