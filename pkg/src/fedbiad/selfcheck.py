"""On-demand property checks behind the ``verify`` subcommand.

Each check is a compact, self-contained probe of one library invariant;
`run_all` prints one line per check and reports overall success.  The
random-update helpers here are also reused by the test suite's fuzzers.
"""

from __future__ import annotations

import numpy as np

from . import bayes, metrics, nn, patterns, strategies, wire
from .errors import DecodeError


def random_layout(rng: np.random.Generator) -> patterns.RowLayout:
    n_layers = int(rng.integers(1, 4))
    layers = [
        patterns.LayerRows(int(rng.integers(2, 24)), int(rng.integers(1, 16)), True)
        for _ in range(n_layers)
    ]
    if rng.random() < 0.5:
        layers.append(patterns.LayerRows(int(rng.integers(1, 8)), int(rng.integers(1, 16)), False))
    return patterns.RowLayout(tuple(layers), float(rng.uniform(0.0, 0.9)))


def random_update(layout: patterns.RowLayout, rng: np.random.Generator) -> wire.SparseUpdate:
    pattern = patterns.sample_pattern(layout, rng)
    data_size = int(rng.integers(1, 10_000))
    if rng.random() < 0.3:
        n = int(rng.integers(0, 50))
        span = max(layout.dense_scalars, 1)
        idx = np.sort(rng.choice(span, size=min(n, span), replace=False)).astype(np.uint32)
        vals = rng.standard_normal(idx.size).astype(np.float32)
        return wire.SparseUpdate.from_topk(layout, pattern, idx, vals, data_size)
    rows = [
        rng.standard_normal((layout.quota(lr) if lr.droppable else lr.rows, lr.width)).astype(
            np.float32
        )
        for lr in layout.layers
    ]
    return wire.SparseUpdate(layout, pattern, data_size, rows=rows)


def _check_gradients(rng) -> str | None:
    for kind in (nn.MLP, nn.RNN):
        spec = nn.ModelSpec(kind, 2, 3, 4, 2, readout_activation="identity")
        params = nn.init_params(spec, rng)
        x = rng.standard_normal((2, 2, 3) if kind == nn.RNN else (2, 3))
        target = rng.standard_normal((2, 2))

        def loss_fn(p):
            out, _ = nn.forward(p, x)
            return 0.5 * float(np.sum((out - target) ** 2))

        out, cache = nn.forward(params, x)
        analytic = nn.backward(params, cache, out - target)
        numeric = nn.finite_diff_grad(loss_fn, params)
        err = nn.max_relative_error(analytic, numeric)
        if err >= 1e-4:
            return f"{kind} gradient error {err:.2e}"
    return None


def _check_wire_roundtrip(rng) -> str | None:
    for _ in range(100):
        layout = random_layout(rng)
        update = random_update(layout, rng)
        back = wire.deserialize(wire.serialize(update), layout)
        if back.data_size != update.data_size or back.pattern != update.pattern:
            return "roundtrip changed header fields"
        if update.is_topk:
            if not (
                np.array_equal(back.topk_indices, update.topk_indices)
                and np.array_equal(back.topk_values, update.topk_values)
            ):
                return "roundtrip changed top-k payload"
        elif any(not np.array_equal(a, b) for a, b in zip(back.rows, update.rows)):
            return "roundtrip changed row payload"
    return None


def _check_wire_rejects(rng) -> str | None:
    layout = random_layout(rng)
    blob = bytearray(wire.serialize(random_update(layout, rng)))
    cases = {
        "magic": bytes(b"XXXX") + bytes(blob[4:]),
        "version": bytes(blob[:4]) + b"\x63\x00" + bytes(blob[6:]),
        "digest": bytes(blob[:6]) + bytes([blob[6] ^ 0xFF]) + bytes(blob[7:]),
        "truncation": bytes(blob[:-1]),
    }
    for name, bad in cases.items():
        try:
            wire.deserialize(bad, layout)
            return f"{name} corruption accepted"
        except DecodeError:
            pass
    return None


def _check_patterns(rng) -> str | None:
    layout = patterns.RowLayout((patterns.LayerRows(8, 4), patterns.LayerRows(6, 4)), 0.5)
    for _ in range(50):
        pat = patterns.sample_pattern(layout, rng)
        layout.check_pattern(pat.bits)
    window = patterns.LossWindow(1, [3.0, 5.0])
    if patterns.loss_gap(window, 2) != 2.0:
        return "loss gap mismatch"
    scores = patterns.WeightScores.zeros(layout)
    held = patterns.sample_pattern(layout, rng)
    scores = patterns.update_scores(scores, -1.0, held, held)
    if int(scores.scores.sum()) != held.kept_count():
        return "score credit mismatch"
    return None


def _check_bounds(_rng) -> str | None:
    s2_small = bayes.posterior_variance(100, 1000, 8, 16, 2.0, 2)
    if not 0 < bayes.posterior_variance(100, 500, 8, 16, 2.0, 2) == 2 * s2_small:
        return "posterior variance not inverse in m"
    e1 = metrics.epsilon_bound(20, 2, 10, 2.0, 4, 1000)
    e2 = metrics.epsilon_bound(20, 2, 10, 2.0, 4, 2000)
    if not e1 > e2 > 0:
        return "error bound not decreasing in m"
    return None


def _check_lipschitz(rng) -> str | None:
    a = rng.standard_normal(500)
    b = rng.standard_normal(500)
    for name in nn.HIDDEN_ACTIVATIONS:
        if np.any(np.abs(nn.activation(name, a) - nn.activation(name, b)) > np.abs(a - b) + 1e-12):
            return f"{name} not 1-Lipschitz"
    return None


def _check_topk(rng) -> str | None:
    delta = rng.standard_normal(64)
    residual = rng.standard_normal(64)
    selectable = np.ones(64, dtype=bool)
    idx, vals, new_res = strategies.topk_sparsify(delta, residual, 0.25, selectable)
    recon = new_res.copy()
    recon[idx] += vals
    if not np.array_equal(recon, residual + delta):
        return "top-k mass not conserved"
    return None


CHECKS = (
    ("gradient check (analytic vs central differences)", _check_gradients),
    ("wire roundtrip fuzz", _check_wire_roundtrip),
    ("wire corruption rejection", _check_wire_rejects),
    ("pattern quotas, loss gap, score credit", _check_patterns),
    ("variance and error-bound monotonicity", _check_bounds),
    ("activation Lipschitz bound", _check_lipschitz),
    ("top-k mass conservation", _check_topk),
)


def run_all(seed: int = 0) -> bool:
    ok = True
    for name, check in CHECKS:
        failure = check(np.random.default_rng(seed))
        if failure is None:
            print(f"[ok]   {name}")
        else:
            print(f"[FAIL] {name}: {failure}")
            ok = False
    return ok
