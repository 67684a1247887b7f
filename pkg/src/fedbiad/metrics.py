"""Round reports, the generalization-error bound, modeled time-to-accuracy,
and CSV/JSON report emission.

Report files are deterministic given the report list: floats are printed
with 17 significant digits (enough to round-trip a 64-bit float exactly),
field order is fixed, and no timestamps are embedded.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CSV_FIELDS = (
    "round",
    "train_loss",
    "test_top1",
    "test_top3",
    "up_bytes",
    "down_bytes",
    "lttr_s",
    "m_r",
    "epsilon_bound",
)
_INT_FIELDS = {"round", "up_bytes", "down_bytes", "m_r"}


@dataclass
class RoundReport:
    round: int
    train_loss: float
    test_top1: float
    test_top3: float
    up_bytes: int
    down_bytes: int
    lttr_s: float
    m_r: int
    epsilon_bound: float


@dataclass(frozen=True)
class LinkModel:
    """Modeled network: asymmetric link speeds plus a fixed per-round
    aggregation cost."""

    downlink_mbps: float = 110.6
    uplink_mbps: float = 14.0
    agg_seconds: float = 0.0

    def __post_init__(self):
        if self.downlink_mbps <= 0 or self.uplink_mbps <= 0:
            raise ValueError("link speeds must be positive")


def epsilon_bound(S: float, L: int, D: int, B: float, d: int, m_r: float) -> float:
    """Per-round upper-bound term on the average generalization error:

        (S*L/m)*log(2*B*D) + (3*S/m)*log(L*D) + S*B^2/(2*m)
            + (2*S/m)*log(4*d*max(m/S, 1))

    with natural logarithms and m the minimum cumulative client input
    count.  Strictly decreasing in m once m >= S*e.
    """
    if min(S, L, D, d, m_r) < 1:
        raise ValueError("S, L, D, d, m_r must all be >= 1")
    if B < 2:
        raise ValueError("weight bound B must be >= 2")
    m = float(m_r)
    return (
        (S * L / m) * math.log(2.0 * B * D)
        + (3.0 * S / m) * math.log(L * D)
        + (S * B * B) / (2.0 * m)
        + (2.0 * S / m) * math.log(4.0 * d * max(m / S, 1.0))
    )


def top_k_accuracy(logits: np.ndarray, labels: np.ndarray, k: int) -> float:
    """Fraction of rows whose label is among the k largest logits.

    Ties resolve by ascending class index, so the value is deterministic.
    """
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return float((order == np.asarray(labels)[:, np.newaxis]).any(axis=1).mean())


def save_ratio(dense_bytes: float, method_bytes: float) -> float:
    """How many times smaller the method's upload is than the dense one."""
    if method_bytes <= 0:
        raise ValueError("method_bytes must be positive")
    return dense_bytes / method_bytes


def tta_estimate(
    reports: list[RoundReport],
    link: LinkModel,
    target_metric: str,
    target_value: float,
) -> float | None:
    """Modeled seconds until the target test metric is first reached.

    Each round contributes its local training time, modeled uplink and
    downlink transfer times, and the aggregation constant.  Returns None
    when no round reaches the target.
    """
    if not reports:
        raise ValueError("reports must be nonempty")
    total = 0.0
    for rep in reports:
        total += (
            rep.lttr_s
            + rep.up_bytes * 8.0 / (link.uplink_mbps * 1e6)
            + rep.down_bytes * 8.0 / (link.downlink_mbps * 1e6)
            + link.agg_seconds
        )
        metric = getattr(rep, target_metric)
        if not math.isnan(metric) and metric >= target_value:
            return total
    return None


def _fmt(field: str, value) -> str:
    if field in _INT_FIELDS:
        return str(int(value))
    value = float(value)
    if math.isnan(value):
        return "NaN"  # json.loads accepts this spelling; float() does too
    return format(value, ".17g")


def emit_reports(reports: list[RoundReport], fmt: str, path: str | Path) -> None:
    """Write reports as CSV (fixed header) or JSON (array of objects)."""
    path = Path(path)
    try:
        if fmt == "csv":
            lines = [",".join(CSV_FIELDS)]
            for rep in reports:
                lines.append(",".join(_fmt(f, getattr(rep, f)) for f in CSV_FIELDS))
            path.write_text("\n".join(lines) + "\n")
        elif fmt == "json":
            rows = []
            for rep in reports:
                pairs = ", ".join(f'"{f}": {_fmt(f, getattr(rep, f))}' for f in CSV_FIELDS)
                rows.append("  {" + pairs + "}")
            path.write_text("[\n" + ",\n".join(rows) + "\n]\n" if rows else "[]\n")
        else:
            raise ValueError(f"unknown report format {fmt!r}")
    except OSError as exc:
        raise OSError(f"cannot write reports to {path}: {exc}") from exc


def read_reports_csv(path: str | Path) -> list[RoundReport]:
    lines = Path(path).read_text().strip().splitlines()
    if not lines or lines[0] != ",".join(CSV_FIELDS):
        raise ValueError(f"{path}: unexpected CSV header")
    out = []
    for line in lines[1:]:
        vals = line.split(",")
        kw = {}
        for field, raw in zip(CSV_FIELDS, vals):
            kw[field] = int(raw) if field in _INT_FIELDS else float(raw)
        out.append(RoundReport(**kw))
    return out


def read_reports_json(path: str | Path) -> list[RoundReport]:
    rows = json.loads(Path(path).read_text())
    return [
        RoundReport(**{f: (int(r[f]) if f in _INT_FIELDS else float(r[f])) for f in CSV_FIELDS})
        for r in rows
    ]
