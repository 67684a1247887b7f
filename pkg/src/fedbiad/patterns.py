"""Row-dropout patterns, the loss-trend controller, and experience scores.

A dropping pattern is a binary vector over all droppable weight rows,
layer-major and row-ascending.  Each droppable layer keeps an exact quota
of rows, ``quota = round((1 - p) * rows)`` and never fewer than one, so a
drawn pattern can never silence an entire layer.  Non-droppable layers
(the readout) carry no pattern bits and are always transmitted in full.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .nn import ModelParams


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class LayerRows:
    rows: int
    width: int
    droppable: bool = True


@dataclass(frozen=True)
class RowLayout:
    """Per-layer row geometry plus the dropout rate that fixes the quotas.

    ``J`` counts droppable rows only; ``S`` counts every scalar that an
    update transmits (kept droppable rows plus all non-droppable rows).
    """

    layers: tuple[LayerRows, ...]
    p: float

    def __post_init__(self):
        if not self.layers:
            raise ValueError("layout needs at least one layer")
        if not 0.0 <= self.p < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {self.p}")
        for lr in self.layers:
            if lr.rows < 1 or lr.width < 1:
                raise ValueError("layer rows and width must be >= 1")

    @classmethod
    def from_params(cls, params: ModelParams, p: float) -> "RowLayout":
        layers = tuple(
            LayerRows(m.shape[0], m.shape[1], drop)
            for m, drop in zip(params.matrices, params.droppable)
        )
        return cls(layers, p)

    def quota(self, layer: LayerRows) -> int:
        if not layer.droppable:
            return layer.rows
        return max(1, _round_half_up((1.0 - self.p) * layer.rows))

    @property
    def quotas(self) -> tuple[int, ...]:
        return tuple(self.quota(lr) for lr in self.layers)

    @property
    def droppable_layers(self) -> tuple[LayerRows, ...]:
        return tuple(lr for lr in self.layers if lr.droppable)

    @property
    def total_rows(self) -> tuple[int, ...]:
        return tuple(lr.rows for lr in self.layers)

    @property
    def J(self) -> int:
        return sum(lr.rows for lr in self.droppable_layers)

    @property
    def S(self) -> int:
        return sum(self.quota(lr) * lr.width for lr in self.layers)

    @property
    def dense_scalars(self) -> int:
        return sum(lr.rows * lr.width for lr in self.layers)

    def droppable_slices(self) -> list[slice]:
        """Slice of the pattern bit vector owned by each droppable layer."""
        out, ofs = [], 0
        for lr in self.droppable_layers:
            out.append(slice(ofs, ofs + lr.rows))
            ofs += lr.rows
        return out

    def check_pattern(self, bits: np.ndarray) -> None:
        if bits.shape != (self.J,):
            raise ShapeError(f"pattern length {bits.shape} != droppable rows ({self.J},)")
        for lr, sl in zip(self.droppable_layers, self.droppable_slices()):
            kept = int(bits[sl].sum())
            if kept != self.quota(lr):
                raise ShapeError(
                    f"layer with {lr.rows} rows keeps {kept} rows, quota is {self.quota(lr)}"
                )


@dataclass
class DroppingPattern:
    """Binary keep/drop mask over all droppable rows (layer-major)."""

    bits: np.ndarray

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.uint8)
        if self.bits.ndim != 1 or not np.isin(self.bits, (0, 1)).all():
            raise ValueError("pattern bits must form a 1-D 0/1 vector")

    def __eq__(self, other) -> bool:
        return isinstance(other, DroppingPattern) and np.array_equal(self.bits, other.bits)

    def kept_count(self) -> int:
        return int(self.bits.sum())


def full_pattern(layout: RowLayout) -> DroppingPattern:
    """The all-ones pattern; only valid for layouts with p = 0 quotas."""
    return DroppingPattern(np.ones(layout.J, dtype=np.uint8))


def sample_pattern(layout: RowLayout, rng: np.random.Generator) -> DroppingPattern:
    """Keep a uniformly random quota-subset of rows, independently per layer."""
    bits = np.zeros(layout.J, dtype=np.uint8)
    for lr, sl in zip(layout.droppable_layers, layout.droppable_slices()):
        keep = rng.permutation(lr.rows)[: layout.quota(lr)]
        bits[sl][keep] = 1
    return DroppingPattern(bits)


@dataclass
class LossWindow:
    """Append-only per-iteration loss history with a window length ``tau``."""

    tau: int
    history: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.tau < 1:
            raise ValueError("tau must be >= 1")

    def append(self, loss: float) -> None:
        self.history.append(float(loss))

    def __len__(self) -> int:
        return len(self.history)


def loss_gap(window: LossWindow, v: int) -> float:
    """Difference of adjacent window means at 1-based iteration ``v``:

        mean(history[v-tau+1 .. v]) - mean(history[v-2*tau+1 .. v-tau])

    Requires ``v >= 2*tau`` and a history covering iterations ``1..v``.
    """
    tau = window.tau
    if v < 2 * tau:
        raise ValueError(f"loss gap needs v >= 2*tau ({2 * tau}), got v={v}")
    if len(window.history) < v:
        raise ValueError(f"history has {len(window.history)} entries, needs {v}")
    h = window.history
    recent = sum(h[v - tau:v]) / tau
    earlier = sum(h[v - 2 * tau:v - tau]) / tau
    return recent - earlier


def adapt_pattern(
    current: DroppingPattern,
    delta: float,
    layout: RowLayout,
    rng: np.random.Generator,
) -> DroppingPattern:
    """Keep the pattern while the loss trend is non-increasing, else resample."""
    if delta <= 0.0:
        return current
    return sample_pattern(layout, rng)


@dataclass
class WeightScores:
    """Per-row participation counters; non-negative and non-decreasing."""

    scores: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.int64)
        if self.scores.ndim != 1 or (self.scores < 0).any():
            raise ValueError("scores must form a 1-D non-negative vector")

    @classmethod
    def zeros(cls, layout: RowLayout) -> "WeightScores":
        return cls(np.zeros(layout.J, dtype=np.int64))


def update_scores(
    scores: WeightScores,
    delta: float,
    next_pattern: DroppingPattern,
    current_pattern: DroppingPattern,
) -> WeightScores:
    """Credit rows that were held during the just-finished training block.

    When the block lowered the loss (``delta <= 0``) every held row gains
    one point; otherwise a held row gains a point only if the freshly
    chosen pattern holds it again.  Rows dropped during the block are
    untouched either way.
    """
    if next_pattern.bits.shape != current_pattern.bits.shape:
        raise ShapeError("patterns must cover the same rows")
    if scores.scores.shape != current_pattern.bits.shape:
        raise ShapeError("scores and pattern cover different row counts")
    held = current_pattern.bits == 1
    if delta <= 0.0:
        gain = held.astype(np.int64)
    else:
        gain = (held & (next_pattern.bits == 1)).astype(np.int64)
    return WeightScores(scores.scores + gain)


def stage_two_pattern(scores: WeightScores, layout: RowLayout) -> DroppingPattern:
    """Keep the highest-scoring quota rows of each layer, deterministically.

    Ties break toward the lower row index, which keeps the quota exact
    where a strict score threshold could not.
    """
    if scores.scores.shape != (layout.J,):
        raise ShapeError(f"scores length {scores.scores.shape} != droppable rows ({layout.J},)")
    bits = np.zeros(layout.J, dtype=np.uint8)
    for lr, sl in zip(layout.droppable_layers, layout.droppable_slices()):
        s = scores.scores[sl]
        order = np.lexsort((np.arange(lr.rows), -s))
        bits[sl][order[: layout.quota(lr)]] = 1
    return DroppingPattern(bits)
