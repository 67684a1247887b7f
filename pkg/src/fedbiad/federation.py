"""Federated round engine.

One round runs as: the server picks a client subset and broadcasts the
global mean rows; each selected client trains its local variational means
for ``V`` full-batch iterations under a row-dropout pattern (adapting that
pattern from the loss trend while in stage one); clients upload only the
pattern and the transmitted rows; the server reconstructs and aggregates
by data-size-weighted averaging.

After a preset round boundary the adaptive strategy stops exploring:
each client fixes its pattern from the experience scores its rows earned
while exploration was still on.

Everything is deterministic given (seed, config, data): per-purpose RNG
streams are derived from the master seed, the round index, and the client
id, so neither scheduling order nor repetition can change results.  All
means cross the wire as 32-bit floats; the server keeps its state at that
precision so the broadcast always equals the state.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .bayes import VariationalParams, mask_rows, posterior_variance, tempered_loss
from .datasets import Dataset, Partition
from .errors import ConfigError, ShapeError
from .metrics import RoundReport, epsilon_bound, top_k_accuracy
from .nn import ModelParams, ModelSpec, forward, init_params
from .patterns import (
    DroppingPattern,
    LossWindow,
    RowLayout,
    WeightScores,
    adapt_pattern,
    full_pattern,
    loss_gap,
    sample_pattern,
    stage_two_pattern,
    update_scores,
)
from .strategies import (
    FEDAVG,
    FEDBIAD,
    MAGNITUDE_PRUNE,
    ORDERED_DROP,
    RANDOM_DROP,
    TopKConfig,
    check_strategy,
    magnitude_prune_pattern,
    ordered_drop_pattern,
    topk_sparsify,
)
from .wire import CommLedger, SparseUpdate, deserialize, serialize

LITERAL = "literal"
MASKED = "masked"
AGG_MODES = (LITERAL, MASKED)

# Stream tags keep the derived RNG purposes disjoint.
_TAG_INIT = 1
_TAG_SELECT = 2
_TAG_CLIENT = 3


@dataclass(frozen=True)
class FedConfig:
    """Round-engine knobs; see `check_strategy` for the strategy tags."""

    K: int
    kappa: float
    V: int
    R: int
    R_b: int
    tau: int
    eta: float
    seed: int = 0
    strategy: str = FEDBIAD
    agg_mode: str = LITERAL
    p: float = 0.2

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if not 0.0 < self.kappa <= 1.0:
            raise ConfigError("kappa must lie in (0, 1]")
        if self.tau < 1:
            raise ConfigError("tau must be >= 1")
        if self.V < 2 * self.tau:
            raise ConfigError(f"V must be >= 2*tau = {2 * self.tau} for one adaptation")
        if self.R < 0:
            raise ConfigError("R must be >= 0")
        if self.R_b < 1:
            raise ConfigError("R_b must be >= 1")
        if self.R >= 1 and self.R_b > self.R:
            raise ConfigError(f"R_b ({self.R_b}) must not exceed R ({self.R})")
        if self.eta <= 0:
            raise ConfigError("learning rate eta must be positive")
        if self.agg_mode not in AGG_MODES:
            raise ConfigError(f"agg_mode must be one of {AGG_MODES}")
        try:
            check_strategy(self.strategy, self.p)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def n_selected(self) -> int:
        return max(int(math.floor(self.kappa * self.K)), 1)

    @property
    def effective_p(self) -> float:
        return 0.0 if self.strategy == FEDAVG else self.p


@dataclass(frozen=True)
class VariationalSettings:
    """Scalars of the variational family plus the assumed weight bound.

    ``s2`` is either a fixed posterior variance or "auto", which evaluates
    the closed-form variance with the client's cumulative input count
    (data size x iterations x rounds) during training.
    """

    alpha: float = 0.5
    sigma2: float = 1.0
    prior_var: float = 1.0
    s2: float | str = "auto"
    weight_bound: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("alpha must lie in (0, 1)")
        if self.sigma2 <= 0 or self.prior_var <= 0:
            raise ConfigError("sigma2 and prior_var must be positive")
        if isinstance(self.s2, str):
            if self.s2 != "auto":
                raise ConfigError(f"s2 must be a number or 'auto', got {self.s2!r}")
        elif self.s2 < 0:
            raise ConfigError("s2 must be >= 0")
        if self.weight_bound < 2:
            raise ConfigError("weight_bound must be >= 2")


@dataclass(frozen=True)
class TimingModel:
    """How the per-round local-training time is obtained.

    The default derives it from the workload (iterations x samples of the
    slowest selected client, times a fixed per-unit cost) so repeated runs
    emit byte-identical reports; "measured" records wall time instead.
    """

    mode: str = "modeled"
    seconds_per_sample_iteration: float = 2e-5

    def __post_init__(self):
        if self.mode not in ("modeled", "measured"):
            raise ConfigError("timing mode must be 'modeled' or 'measured'")
        if self.seconds_per_sample_iteration <= 0:
            raise ConfigError("seconds_per_sample_iteration must be positive")


@dataclass
class ClientState:
    """Everything a client keeps between its participations."""

    id: int
    indices: np.ndarray
    scores: WeightScores
    data_size: int
    topk_residual: np.ndarray | None = None


@dataclass
class ServerState:
    global_means: ModelParams
    round: int = 0
    reports: list[RoundReport] = field(default_factory=list)


def narrow32(params: ModelParams) -> ModelParams:
    """Round every entry to its nearest 32-bit float (wire precision)."""
    mats = [m.astype(np.float32).astype(np.float64) for m in params.matrices]
    return ModelParams(params.spec, mats, params.droppable)


def _rng(*entropy: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(entropy)))


def select_clients(K: int, kappa: float, round_idx: int, seed: int) -> np.ndarray:
    """Uniform random subset of max(floor(kappa*K), 1) clients, deterministic
    in (seed, round) and independent of any other random stream."""
    c = max(int(math.floor(kappa * K)), 1)
    rng = _rng(seed, round_idx, _TAG_SELECT)
    return np.sort(rng.permutation(K)[:c])


def client_rng(seed: int, round_idx: int, client_id: int) -> np.random.Generator:
    return _rng(seed, round_idx, client_id, _TAG_CLIENT)


@dataclass
class RoundContext:
    """Shared, read-only inputs of one training run."""

    fed: FedConfig
    var: VariationalSettings
    spec: ModelSpec
    layout: RowLayout
    task: str
    inputs: np.ndarray
    labels: np.ndarray
    topk: TopKConfig | None = None


def _client_s2(ctx: RoundContext, data_size: int, round_idx: int) -> float:
    if ctx.var.s2 == "auto":
        m = data_size * ctx.fed.V * round_idx
        return posterior_variance(
            ctx.layout.S,
            m,
            ctx.spec.in_dim,
            ctx.spec.hidden_dim,
            ctx.var.weight_bound,
            ctx.spec.n_layers,
        )
    return float(ctx.var.s2)


def _initial_pattern(
    ctx: RoundContext,
    round_idx: int,
    client: ClientState,
    global_means: ModelParams,
    rng: np.random.Generator,
) -> DroppingPattern:
    s = ctx.fed.strategy
    if s == FEDAVG:
        return full_pattern(ctx.layout)
    if s == ORDERED_DROP:
        return ordered_drop_pattern(ctx.layout)
    if s == MAGNITUDE_PRUNE:
        return magnitude_prune_pattern(global_means, ctx.layout)
    if s == RANDOM_DROP:
        return sample_pattern(ctx.layout, rng)
    if round_idx <= ctx.fed.R_b:
        return sample_pattern(ctx.layout, rng)
    return stage_two_pattern(client.scores, ctx.layout)


def kept_entry_mask(params: ModelParams, pattern: DroppingPattern) -> np.ndarray:
    """Boolean mask over the flat parameter vector marking transmitted
    entries: kept droppable rows plus every non-droppable entry."""
    parts = []
    ofs = 0
    for m, drop in zip(params.matrices, params.droppable):
        if drop:
            rows = pattern.bits[ofs:ofs + m.shape[0]].astype(bool)
            ofs += m.shape[0]
            parts.append(np.repeat(rows, m.shape[1]))
        else:
            parts.append(np.ones(m.size, dtype=bool))
    return np.concatenate(parts)


def client_update(
    global_means: ModelParams,
    round_idx: int,
    ctx: RoundContext,
    client: ClientState,
    rng: np.random.Generator,
) -> tuple[SparseUpdate, WeightScores, list[float]]:
    """One client's local work for the round.

    Runs ``V`` masked gradient iterations from the received means.  While
    the adaptive strategy is in stage one, every ``tau``-th iteration from
    ``2*tau`` on compares adjacent loss windows, keeps or resamples the
    pattern, and credits the rows that were held; in stage two (and for
    every baseline) the pattern is fixed for the whole round.  Returns the
    sparse upload, the updated scores, and the per-iteration loss trace.
    """
    if round_idx < 1:
        raise ConfigError("round index starts at 1")
    X = ctx.inputs[client.indices]
    y = ctx.labels[client.indices]
    fed = ctx.fed
    vp = VariationalParams(
        global_means.copy(),
        _client_s2(ctx, client.data_size, round_idx),
        ctx.var.alpha,
        ctx.var.sigma2,
        ctx.var.prior_var,
    )
    pattern = _initial_pattern(ctx, round_idx, client, global_means, rng)
    scores = client.scores
    window = LossWindow(fed.tau)
    adaptive = fed.strategy == FEDBIAD and round_idx <= fed.R_b

    for v in range(1, fed.V + 1):
        loss, grads = tempered_loss(vp, pattern, X, y, ctx.task, rng)
        window.append(loss)
        for m, g in zip(vp.means.matrices, grads.matrices):
            m -= fed.eta * g
        if adaptive and v >= 2 * fed.tau and v % fed.tau == 0:
            delta = loss_gap(window, v)
            nxt = adapt_pattern(pattern, delta, ctx.layout, rng)
            scores = update_scores(scores, delta, nxt, pattern)
            pattern = nxt

    if ctx.topk is not None:
        selectable = kept_entry_mask(vp.means, pattern)
        delta = np.where(selectable, vp.means.flat() - global_means.flat(), 0.0)
        residual = (
            client.topk_residual
            if client.topk_residual is not None
            else np.zeros(vp.means.n_params)
        )
        idx, vals, client.topk_residual = topk_sparsify(
            delta, residual, ctx.topk.k_fraction, selectable
        )
        update = SparseUpdate.from_topk(ctx.layout, pattern, idx, vals, client.data_size)
    else:
        update = SparseUpdate.from_means(ctx.layout, pattern, vp.means, client.data_size)
    return update, scores, window.history


def _pattern_bits_per_matrix(
    params: ModelParams, pattern: DroppingPattern
) -> list[np.ndarray | None]:
    out: list[np.ndarray | None] = []
    ofs = 0
    for m, drop in zip(params.matrices, params.droppable):
        if drop:
            out.append(pattern.bits[ofs:ofs + m.shape[0]])
            ofs += m.shape[0]
        else:
            out.append(None)
    return out


def _reconstruct(update: SparseUpdate, broadcast: ModelParams) -> list[np.ndarray]:
    """Dense masked means for one update, as the server sees them."""
    if not update.is_topk:
        return update.reconstruct_rows()
    flat = broadcast.flat()
    flat[update.topk_indices] += update.topk_values.astype(np.float64)
    rebuilt = broadcast.with_flat(flat)
    return mask_rows(rebuilt, update.pattern).matrices


def aggregate(
    updates: list[SparseUpdate],
    prev_means: ModelParams,
    agg_mode: str = LITERAL,
) -> ModelParams:
    """Data-size-weighted average of the reconstructed client means.

    literal: one total-data denominator; a row kept by no client becomes
    zero.  masked: per-row denominators over the clients that kept the
    row; a row kept by no client retains the previous global value.
    Non-droppable matrices always use the plain weighted average.
    """
    if not updates:
        raise ValueError("empty update list")
    if agg_mode not in AGG_MODES:
        raise ValueError(f"agg_mode must be one of {AGG_MODES}")
    digest = updates[0].digest
    if any(u.digest != digest for u in updates):
        raise ShapeError("updates disagree on the row layout")

    weights = [float(u.data_size) for u in updates]
    total_w = sum(weights)
    recons = [_reconstruct(u, prev_means) for u in updates]
    bit_rows = [_pattern_bits_per_matrix(prev_means, u.pattern) for u in updates]

    out = []
    for i, prev in enumerate(prev_means.matrices):
        num = np.zeros_like(prev)
        for w, rec in zip(weights, recons):
            num += w * rec[i]
        if prev_means.droppable[i] and agg_mode == MASKED:
            den = np.zeros(prev.shape[0])
            for w, bits in zip(weights, bit_rows):
                den += w * bits[i]
            covered = den > 0
            merged = prev.copy()
            merged[covered] = num[covered] / den[covered, np.newaxis]
            out.append(merged)
        else:
            out.append(num / total_w)
    return ModelParams(prev_means.spec, out, prev_means.droppable)


def evaluate_classification(
    params: ModelParams, inputs: np.ndarray, labels: np.ndarray
) -> tuple[float, float]:
    logits, _ = forward(params, inputs)
    return top_k_accuracy(logits, labels, 1), top_k_accuracy(logits, labels, 3)


def mc_generalization_error(
    means: ModelParams,
    s2: float,
    teacher: ModelParams,
    probe_inputs: np.ndarray,
    n_samples: int,
    rng: np.random.Generator,
) -> float:
    """Monte-Carlo estimate of the generalization error of the mean-centered
    weight distribution: average over weight draws of the mean squared L2
    distance between model and teacher outputs on the probe points."""
    if means.spec.in_dim != teacher.spec.in_dim or means.spec.out_dim != teacher.spec.out_dim:
        raise ShapeError("student and teacher must agree on input/output dims")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    target, _ = forward(teacher, probe_inputs)
    s = math.sqrt(s2)
    total = 0.0
    for _ in range(n_samples):
        if s > 0.0:
            mats = [m + s * rng.standard_normal(m.shape) for m in means.matrices]
            theta = ModelParams(means.spec, mats, means.droppable)
        else:
            theta = means
        out, _ = forward(theta, probe_inputs)
        diff = out - target
        total += float(np.einsum("ij,ij->i", diff, diff).mean())
    return total / n_samples


class FederatedTrainer:
    """Stateful runner for one training configuration.

    `run` executes all configured rounds; `run_round` steps a single round,
    which keeps intermediate global means observable for reference checks.
    """

    def __init__(
        self,
        fed: FedConfig,
        spec: ModelSpec,
        var: VariationalSettings,
        train: Dataset,
        partition: Partition,
        test: Dataset | None = None,
        topk: TopKConfig | None = None,
        timing: TimingModel | None = None,
    ):
        if len(partition) != fed.K:
            raise ConfigError(f"partition has {len(partition)} clients, config says {fed.K}")
        if train.task == "classification" and train.n_classes != spec.out_dim:
            raise ConfigError(
                f"model out_dim {spec.out_dim} != dataset classes {train.n_classes}"
            )
        self.fed = fed
        self.spec = spec
        self.var = var
        self.timing = timing or TimingModel()
        init = narrow32(init_params(spec, _rng(fed.seed, _TAG_INIT)))
        self.layout = RowLayout.from_params(init, fed.effective_p)
        self.clients = []
        for cid, idx in enumerate(partition.clients):
            if idx.size == 0:
                raise ConfigError(f"client {cid} has no data")
            self.clients.append(
                ClientState(cid, idx, WeightScores.zeros(self.layout), int(idx.size))
            )
        self.ctx = RoundContext(
            fed, var, spec, self.layout, train.task, train.model_inputs(), train.labels, topk
        )
        self.server = ServerState(init)
        self.ledger = CommLedger()
        self._min_data = min(c.data_size for c in self.clients)
        self._down_bytes = 4 * init.n_params
        if test is not None:
            self._test_inputs = test.model_inputs()
            self._test_labels = test.labels
            self._test_task = test.task
        else:
            self._test_inputs = None

    def run_round(self) -> RoundReport:
        fed = self.fed
        r = self.server.round + 1
        ids = select_clients(fed.K, fed.kappa, r, fed.seed)
        received, up_bytes, last_losses, sizes, durations = [], [], [], [], []
        for cid in ids:
            client = self.clients[cid]
            t0 = time.perf_counter()
            update, scores, losses = client_update(
                self.server.global_means, r, self.ctx, client, client_rng(fed.seed, r, cid)
            )
            durations.append(time.perf_counter() - t0)
            client.scores = scores
            blob = serialize(update)
            up_bytes.append(len(blob))
            received.append(deserialize(blob, self.layout))
            last_losses.append(losses[-1])
            sizes.append(client.data_size)

        merged = aggregate(received, self.server.global_means, fed.agg_mode)
        self.server.global_means = narrow32(merged)
        for m in self.server.global_means.matrices:
            if not np.isfinite(m).all():
                raise FloatingPointError(
                    f"non-finite global means after round {r}; lower eta or check data"
                )
        self.server.round = r
        self.ledger.add_round(up_bytes, self._down_bytes)

        if self.timing.mode == "measured":
            lttr = max(durations)
        else:
            lttr = fed.V * max(sizes) * self.timing.seconds_per_sample_iteration
        top1 = top3 = float("nan")
        if self._test_inputs is not None and self._test_task == "classification":
            top1, top3 = evaluate_classification(
                self.server.global_means, self._test_inputs, self._test_labels
            )
        m_r = r * fed.V * self._min_data
        report = RoundReport(
            round=r,
            train_loss=float(sum(last_losses) / sum(sizes)),
            test_top1=top1,
            test_top3=top3,
            up_bytes=max(up_bytes),
            down_bytes=self._down_bytes,
            lttr_s=lttr,
            m_r=m_r,
            epsilon_bound=epsilon_bound(
                self.layout.S,
                self.spec.n_layers,
                self.spec.hidden_dim,
                self.var.weight_bound,
                self.spec.in_dim,
                m_r,
            ),
        )
        self.server.reports.append(report)
        return report

    def run(self) -> list[RoundReport]:
        for _ in range(self.fed.R):
            self.run_round()
        return list(self.server.reports)


def run_training(
    fed: FedConfig,
    spec: ModelSpec,
    var: VariationalSettings,
    train: Dataset,
    partition: Partition,
    test: Dataset | None = None,
    topk: TopKConfig | None = None,
    timing: TimingModel | None = None,
) -> list[RoundReport]:
    """Run the full federated schedule and return one report per round."""
    return FederatedTrainer(fed, spec, var, train, partition, test, topk, timing).run()
