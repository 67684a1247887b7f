"""Dense linear-algebra kernels for the two supported model families.

Both families are bias-free stacks of weight matrices, evaluated in 64-bit
floats with exact manual backpropagation:

* feed-forward net:  ``a_l = act(W_l a_{l-1})`` for ``l = 1..n_layers``,
  followed by a linear readout ``logits = W_out a_L``;
* simple recurrent net:  ``h_t = act(W_x x_t + W_h h_{t-1})`` with
  ``h_0 = 0``, followed by ``logits = W_out h_T``.

The readout is linear here; a softmax, when configured, is applied by the
loss / prediction code, never inside ``forward``.  A central-difference
gradient oracle (`finite_diff_grad`) is provided for verification and is
kept independent of the analytic backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError

MLP = "mlp"
RNN = "rnn"

HIDDEN_ACTIVATIONS = ("relu", "tanh", "identity")
READOUT_ACTIVATIONS = ("softmax", "identity")


def activation(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "identity":
        return z
    raise ValueError(f"unknown activation {name!r}")


def activation_grad_from_output(name: str, a: np.ndarray) -> np.ndarray:
    """Derivative of the activation expressed through its own output."""
    if name == "relu":
        return (a > 0.0).astype(np.float64)
    if name == "tanh":
        return 1.0 - a * a
    if name == "identity":
        return np.ones_like(a)
    raise ValueError(f"unknown activation {name!r}")


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, shifted for stability."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class ModelSpec:
    """Architecture descriptor.

    ``n_layers`` is the hidden depth for the feed-forward family and the
    nominal unroll length for the recurrent one.  All hidden layers share
    the width ``hidden_dim``.
    """

    kind: str
    n_layers: int
    in_dim: int
    hidden_dim: int
    out_dim: int
    hidden_activation: str = ""
    readout_activation: str = "softmax"

    def __post_init__(self):
        if self.kind not in (MLP, RNN):
            raise ValueError(f"kind must be '{MLP}' or '{RNN}', got {self.kind!r}")
        if self.n_layers < 1 or min(self.in_dim, self.hidden_dim, self.out_dim) < 1:
            raise ValueError("n_layers and all dimensions must be >= 1")
        if not self.hidden_activation:
            default = "relu" if self.kind == MLP else "tanh"
            object.__setattr__(self, "hidden_activation", default)
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.readout_activation not in READOUT_ACTIVATIONS:
            raise ValueError(f"unknown readout activation {self.readout_activation!r}")

    def matrix_shapes(self) -> list[tuple[int, int]]:
        d, D, out = self.in_dim, self.hidden_dim, self.out_dim
        if self.kind == MLP:
            shapes = [(D, d)] + [(D, D)] * (self.n_layers - 1)
        else:
            shapes = [(D, d), (D, D)]
        return shapes + [(out, D)]

    def droppable_flags(self) -> tuple[bool, ...]:
        # Every hidden-producing matrix is row-droppable; the readout never
        # is (dropping its rows would delete output classes).
        n = len(self.matrix_shapes())
        return tuple([True] * (n - 1) + [False])


@dataclass
class ModelParams:
    """Ordered dense weight matrices together with their droppability flags."""

    spec: ModelSpec
    matrices: list[np.ndarray]
    droppable: tuple[bool, ...] = ()

    def __post_init__(self):
        expected = self.spec.matrix_shapes()
        got = [m.shape for m in self.matrices]
        if got != expected:
            raise ShapeError(f"matrix shapes {got} do not chain; expected {expected}")
        if not self.droppable:
            self.droppable = self.spec.droppable_flags()
        if len(self.droppable) != len(self.matrices):
            raise ShapeError("droppable flags must cover every matrix")
        self.matrices = [np.asarray(m, dtype=np.float64) for m in self.matrices]

    @property
    def n_params(self) -> int:
        return sum(m.size for m in self.matrices)

    def copy(self) -> "ModelParams":
        return ModelParams(self.spec, [m.copy() for m in self.matrices], self.droppable)

    def flat(self) -> np.ndarray:
        """All matrices raveled C-order and concatenated, in matrix order."""
        return np.concatenate([m.ravel() for m in self.matrices])

    def with_flat(self, flat: np.ndarray) -> "ModelParams":
        if flat.size != self.n_params:
            raise ShapeError(f"flat vector has {flat.size} entries, expected {self.n_params}")
        out, ofs = [], 0
        for m in self.matrices:
            out.append(np.asarray(flat[ofs:ofs + m.size], dtype=np.float64).reshape(m.shape).copy())
            ofs += m.size
        return ModelParams(self.spec, out, self.droppable)


@dataclass
class GradientSet:
    """Per-matrix gradients, shape-congruent with the owning ModelParams."""

    matrices: list[np.ndarray]

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "GradientSet":
        return cls([np.zeros_like(m) for m in params.matrices])

    def check_congruent(self, params: ModelParams) -> None:
        if [g.shape for g in self.matrices] != [m.shape for m in params.matrices]:
            raise ShapeError("gradient shapes do not match the model parameters")


def init_params(spec: ModelSpec, rng: np.random.Generator) -> ModelParams:
    """Fan-in-scaled Gaussian initialization (scale 2/fan_in under relu)."""
    gain = 2.0 if spec.hidden_activation == "relu" else 1.0
    mats = []
    shapes = spec.matrix_shapes()
    for i, (rows, cols) in enumerate(shapes):
        scale = 1.0 / np.sqrt(cols) if i == len(shapes) - 1 else np.sqrt(gain / cols)
        mats.append(rng.normal(0.0, scale, size=(rows, cols)))
    return ModelParams(spec, mats)


@dataclass
class ForwardCache:
    """Everything the matching backward pass needs.

    For the feed-forward family ``hiddens`` holds the post-activation of
    each hidden layer; for the recurrent family it holds ``h_0 .. h_T``.
    ``single`` records whether the caller passed one sample (1-D input).
    """

    kind: str
    inputs: np.ndarray
    hiddens: list[np.ndarray] = field(default_factory=list)
    single: bool = False


def _as_batch(x: np.ndarray, dims: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == dims - 1:
        return x[np.newaxis, ...], True
    if x.ndim == dims:
        return x, False
    raise ShapeError(f"input must have {dims - 1} or {dims} dimensions, got {x.ndim}")


def mlp_forward(params: ModelParams, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Evaluate the feed-forward recursion; returns linear readout logits.

    ``x`` may be a single length-``in_dim`` vector or an ``(n, in_dim)``
    batch; the output mirrors that choice.
    """
    if params.spec.kind != MLP:
        raise ShapeError(f"mlp_forward called on a {params.spec.kind!r} model")
    X, single = _as_batch(x, 2)
    if X.shape[1] != params.spec.in_dim:
        raise ShapeError(f"input width {X.shape[1]} != in_dim {params.spec.in_dim}")
    act = params.spec.hidden_activation
    cache = ForwardCache(MLP, X, single=single)
    a = X
    for w in params.matrices[:-1]:
        a = activation(act, a @ w.T)
        cache.hiddens.append(a)
    logits = a @ params.matrices[-1].T
    return (logits[0] if single else logits), cache


def rnn_forward(params: ModelParams, seq: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Unroll the recurrence over a ``(steps, in_dim)`` sequence or an
    ``(n, steps, in_dim)`` batch of sequences; ``h_0`` is the zero vector."""
    if params.spec.kind != RNN:
        raise ShapeError(f"rnn_forward called on a {params.spec.kind!r} model")
    X, single = _as_batch(np.asarray(seq, dtype=np.float64), 3)
    if X.shape[1] == 0:
        raise ValueError("empty input sequence")
    if X.shape[2] != params.spec.in_dim:
        raise ShapeError(f"step width {X.shape[2]} != in_dim {params.spec.in_dim}")
    w_in, w_rec, w_out = params.matrices
    act = params.spec.hidden_activation
    n, steps, _ = X.shape
    h = np.zeros((n, params.spec.hidden_dim))
    cache = ForwardCache(RNN, X, hiddens=[h], single=single)
    for t in range(steps):
        h = activation(act, X[:, t, :] @ w_in.T + h @ w_rec.T)
        cache.hiddens.append(h)
    logits = h @ w_out.T
    return (logits[0] if single else logits), cache


def forward(params: ModelParams, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    if params.spec.kind == MLP:
        return mlp_forward(params, x)
    return rnn_forward(params, x)


def backward(params: ModelParams, cache: ForwardCache, output_grad: np.ndarray) -> GradientSet:
    """Exact gradients of a scalar loss w.r.t. every matrix entry.

    ``output_grad`` is the loss gradient at the linear readout, shaped like
    the forward output.  Recurrent gradients accumulate across time steps.
    """
    if cache.kind != params.spec.kind:
        raise ShapeError("cache was produced by a different model kind")
    g = np.asarray(output_grad, dtype=np.float64)
    if cache.single:
        g = g[np.newaxis, ...]
    n = cache.inputs.shape[0]
    if g.shape != (n, params.spec.out_dim):
        raise ShapeError(f"output_grad shape {g.shape} != ({n}, {params.spec.out_dim})")
    act = params.spec.hidden_activation

    if cache.kind == MLP:
        grads: list[np.ndarray] = []
        h_last = cache.hiddens[-1]
        grads.append(g.T @ h_last)  # readout
        da = g @ params.matrices[-1]
        for l in range(params.spec.n_layers - 1, -1, -1):
            a = cache.hiddens[l]
            dz = da * activation_grad_from_output(act, a)
            below = cache.inputs if l == 0 else cache.hiddens[l - 1]
            grads.append(dz.T @ below)
            if l > 0:
                da = dz @ params.matrices[l]
        grads.reverse()
        return GradientSet(grads)

    w_in, w_rec, _w_out = params.matrices
    d_in = np.zeros_like(w_in)
    d_rec = np.zeros_like(w_rec)
    d_out = g.T @ cache.hiddens[-1]
    dh = g @ params.matrices[-1]
    steps = cache.inputs.shape[1]
    for t in range(steps, 0, -1):
        h = cache.hiddens[t]
        dz = dh * activation_grad_from_output(act, h)
        d_in += dz.T @ cache.inputs[:, t - 1, :]
        d_rec += dz.T @ cache.hiddens[t - 1]
        dh = dz @ w_rec
    return GradientSet([d_in, d_rec, d_out])


def finite_diff_grad(loss_fn, params: ModelParams, eps: float = 1e-5) -> GradientSet:
    """Central-difference gradient of ``loss_fn(params)``, entry by entry.

    Intended as a slow, independent oracle for small models only.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    work = params.copy()
    grads = []
    for m in work.matrices:
        g = np.zeros_like(m)
        it = np.nditer(m, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = m[idx]
            m[idx] = orig + eps
            hi = loss_fn(work)
            m[idx] = orig - eps
            lo = loss_fn(work)
            m[idx] = orig
            g[idx] = (hi - lo) / (2.0 * eps)
        grads.append(g)
    return GradientSet(grads)


def max_relative_error(analytic: GradientSet, numeric: GradientSet) -> float:
    """max over entries of |a - n| / (|a| + 1e-8)."""
    worst = 0.0
    for a, b in zip(analytic.matrices, numeric.matrices):
        err = np.abs(a - b) / (np.abs(a) + 1e-8)
        if err.size:
            worst = max(worst, float(err.max()))
    return worst
