"""Spike-and-slab variational training math.

Each droppable weight row follows ``beta_j * N(mu_j, s2 * I) +
(1 - beta_j) * delta(0)``: kept rows are Gaussian around their mean row,
dropped rows are exactly zero.  Training minimizes a tempered objective

    (alpha / (2 * sigma2)) * sum_i dataterm_i  +  kl_regularizer

with a single reparameterized weight sample per evaluation.  The KL term
is realized as its L2 surrogate over transmitted rows under a
``N(0, prior_var * I)`` prior.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .nn import GradientSet, ModelParams, backward, forward, softmax
from .patterns import DroppingPattern

REGRESSION = "regression"
CLASSIFICATION = "classification"


@dataclass
class VariationalParams:
    """Mean rows plus the scalars that fix the variational family."""

    means: ModelParams
    s2: float
    alpha: float = 0.5
    sigma2: float = 1.0
    prior_var: float = 1.0

    def __post_init__(self):
        if self.s2 < 0:
            raise ValueError("posterior variance must be >= 0")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("temper alpha must lie in (0, 1)")
        if self.sigma2 <= 0 or self.prior_var <= 0:
            raise ValueError("sigma2 and prior_var must be positive")


@dataclass
class SampledWeights:
    theta: ModelParams
    pattern_used: DroppingPattern


def _row_masks(params: ModelParams, pattern: DroppingPattern) -> list[np.ndarray | None]:
    """Per-matrix keep mask (None for non-droppable matrices)."""
    masks: list[np.ndarray | None] = []
    ofs = 0
    for m, drop in zip(params.matrices, params.droppable):
        if drop:
            masks.append(pattern.bits[ofs:ofs + m.shape[0]])
            ofs += m.shape[0]
        else:
            masks.append(None)
    if ofs != pattern.bits.shape[0]:
        raise ShapeError(
            f"pattern covers {pattern.bits.shape[0]} rows, model has {ofs} droppable rows"
        )
    return masks


def mask_rows(params: ModelParams, pattern: DroppingPattern) -> ModelParams:
    """Zero every dropped row; non-droppable matrices pass through unchanged."""
    out = []
    for m, mask in zip(params.matrices, _row_masks(params, pattern)):
        out.append(m.copy() if mask is None else m * mask[:, np.newaxis])
    return ModelParams(params.spec, out, params.droppable)


def sample_weights(
    vp: VariationalParams, pattern: DroppingPattern, rng: np.random.Generator
) -> SampledWeights:
    """Draw one weight set: kept rows from ``N(mu_j, s2*I)``, dropped rows zero.

    Non-droppable matrices are sampled as if every row were kept.
    """
    s = math.sqrt(vp.s2)
    mats = []
    for m, mask in zip(vp.means.matrices, _row_masks(vp.means, pattern)):
        theta = m + s * rng.standard_normal(m.shape) if s > 0.0 else m.copy()
        if mask is not None:
            theta = theta * mask[:, np.newaxis]
        mats.append(theta)
    return SampledWeights(ModelParams(vp.means.spec, mats, vp.means.droppable), pattern)


def kl_regularizer(vp: VariationalParams, pattern: DroppingPattern) -> float:
    """L2 surrogate for the KL term: sum of ||mu_j||^2 / (2 * prior_var)
    over kept droppable rows and every non-droppable row."""
    total = 0.0
    for m, mask in zip(vp.means.matrices, _row_masks(vp.means, pattern)):
        sq = np.einsum("ij,ij->i", m, m)
        total += float(sq.sum() if mask is None else (sq * mask).sum())
    return total / (2.0 * vp.prior_var)


def data_term(
    logits: np.ndarray, targets: np.ndarray, task: str, alpha: float, sigma2: float
) -> tuple[float, np.ndarray]:
    """Summed data loss over the batch and its gradient at the logits.

    Regression uses the tempered Gaussian likelihood
    ``(alpha / (2*sigma2)) * sum ||y - f||^2``; classification uses
    cross-entropy scaled by the same temper ``alpha``.
    """
    if task == REGRESSION:
        y = np.asarray(targets, dtype=np.float64)
        if y.ndim == 1:
            y = y[:, np.newaxis]
        if y.shape != logits.shape:
            raise ShapeError(f"targets shape {y.shape} != outputs {logits.shape}")
        r = logits - y
        value = (alpha / (2.0 * sigma2)) * float(np.sum(r * r))
        return value, (alpha / sigma2) * r
    if task == CLASSIFICATION:
        y = np.asarray(targets)
        if y.ndim != 1 or y.shape[0] != logits.shape[0]:
            raise ShapeError("classification targets must be one label per row")
        probs = softmax(logits)
        picked = probs[np.arange(len(y)), y]
        value = alpha * float(-np.log(picked).sum())
        grad = probs.copy()
        grad[np.arange(len(y)), y] -= 1.0
        return value, alpha * grad
    raise ValueError(f"unknown task {task!r}")


def tempered_loss(
    vp: VariationalParams,
    pattern: DroppingPattern,
    inputs: np.ndarray,
    targets: np.ndarray,
    task: str,
    rng: np.random.Generator,
) -> tuple[float, GradientSet]:
    """One-sample estimate of the tempered objective and its mean gradient.

    Draws a single reparameterized weight sample ``theta = beta o (U + s*eps)``,
    evaluates the summed data term plus the KL surrogate, and returns the
    gradient with respect to the means, already masked by the pattern.
    """
    X = np.asarray(inputs, dtype=np.float64)
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    sampled = sample_weights(vp, pattern, rng)
    logits, cache = forward(sampled.theta, X)
    value, dlogits = data_term(logits, targets, task, vp.alpha, vp.sigma2)
    grads = backward(sampled.theta, cache, dlogits)

    out = []
    for g, u, mask in zip(grads.matrices, vp.means.matrices, _row_masks(vp.means, pattern)):
        total = g + u / vp.prior_var
        if mask is not None:
            total = total * mask[:, np.newaxis]
        out.append(total)
    return value + kl_regularizer(vp, pattern), GradientSet(out)


def posterior_variance(S: float, m: float, d: int, D: int, B: float, L: int) -> float:
    """Closed-form constant posterior variance for the row-Gaussian family:

        s2 = S / (16 * m * d^2)
             * 1 / log(3*D)
             * (2*B*D)^(-2*L)
             * 1 / ((d + 1 + 1/(B*D-1))^2 + 1/((B*D)^2 - 1) + 2/(B*D-1)^2)

    with natural logarithms.  Decreasing in the sample count ``m`` and
    increasing in the transmitted-weight count ``S``.
    """
    if min(S, m, L) < 1 or d < 1:
        raise ValueError("S, m, d, L must all be >= 1")
    if B < 2:
        raise ValueError("weight bound B must be >= 2")
    if D < 2:
        raise ValueError("hidden width D must be >= 2")
    bd = B * D
    brace = (d + 1.0 + 1.0 / (bd - 1.0)) ** 2 + 1.0 / (bd * bd - 1.0) + 2.0 / (bd - 1.0) ** 2
    decay = float(2.0 * bd) ** (-2.0 * L)
    if decay > 0.0 and not math.isinf(decay):
        return S / (16.0 * m * d * d) / math.log(3.0 * D) * decay / brace
    # Deep or wide enough to underflow the direct product; fall back to logs,
    # clamping to the smallest positive float where even that underflows.
    log_s2 = (
        math.log(S)
        - math.log(16.0 * m * d * d)
        - math.log(math.log(3.0 * D))
        - 2.0 * L * math.log(2.0 * bd)
        - math.log(brace)
    )
    return max(math.exp(log_s2), math.ulp(0.0))
