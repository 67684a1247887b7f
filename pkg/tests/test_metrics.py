"""Error-bound evaluator, modeled TTA, save ratios, and report emission."""

import math

import mpmath
import numpy as np
import pytest

from fedbiad.metrics import (
    CSV_FIELDS,
    LinkModel,
    RoundReport,
    emit_reports,
    epsilon_bound,
    read_reports_csv,
    read_reports_json,
    save_ratio,
    top_k_accuracy,
    tta_estimate,
)


def mp_epsilon_bound(S, L, D, B, d, m):
    with mpmath.workdps(60):
        S, L, D, B, d, m = map(mpmath.mpf, (S, L, D, B, d, m))
        return float(
            (S * L / m) * mpmath.log(2 * B * D)
            + (3 * S / m) * mpmath.log(L * D)
            + S * B**2 / (2 * m)
            + (2 * S / m) * mpmath.log(4 * d * max(m / S, mpmath.mpf(1)))
        )


def report(r, top1=0.0, up=100, lttr=1.0, m_r=10, eps=1.0, down=200):
    return RoundReport(
        round=r, train_loss=1.0, test_top1=top1, test_top3=top1, up_bytes=up,
        down_bytes=down, lttr_s=lttr, m_r=m_r, epsilon_bound=eps,
    )


class TestEpsilonBound:
    def test_positive_for_valid_inputs(self):
        assert epsilon_bound(20, 2, 10, 2.0, 4, 1000) > 0

    def test_strictly_decreasing_in_m_beyond_se(self):
        S = 50
        start = int(S * math.e) + 1
        for m in (start, 2 * start, 10 * start, 100 * start):
            assert epsilon_bound(S, 2, 10, 2.0, 4, 2 * m) < epsilon_bound(S, 2, 10, 2.0, 4, m)

    def test_increasing_in_s_for_fixed_m(self):
        m = 10_000
        assert epsilon_bound(40, 2, 10, 2.0, 4, m) > epsilon_bound(20, 2, 10, 2.0, 4, m)

    def test_matches_high_precision_oracle_to_12_digits(self):
        args = (20, 2, 10, 2.0, 4, 1000)
        got = epsilon_bound(*args)
        want = mp_epsilon_bound(*args)
        assert abs(got - want) <= 0.5e-12 * abs(want)

    def test_domain_violations(self):
        with pytest.raises(ValueError):
            epsilon_bound(0, 1, 1, 2.0, 1, 1)
        with pytest.raises(ValueError):
            epsilon_bound(1, 1, 1, 1.0, 1, 1)


class TestTta:
    def test_target_met_at_round_one(self):
        link = LinkModel(100.0, 10.0, agg_seconds=0.5)
        reps = [report(1, top1=0.95, up=10**6, lttr=2.0), report(2, top1=0.99)]
        got = tta_estimate(reps, link, "test_top1", 0.9)
        expected = 2.0 + 10**6 * 8 / (10.0 * 1e6) + 200 * 8 / (100.0 * 1e6) + 0.5
        assert got == pytest.approx(expected, rel=1e-12)

    def test_doubling_uplink_bytes_increases_tta(self):
        link = LinkModel()
        a = tta_estimate([report(1, top1=1.0, up=10**6)], link, "test_top1", 0.5)
        b = tta_estimate([report(1, top1=1.0, up=2 * 10**6)], link, "test_top1", 0.5)
        assert b > a

    def test_paper_link_speed_arithmetic(self):
        # A 16.4 MB upload through a 14 Mbps uplink costs ~9.37 s.
        link = LinkModel(downlink_mbps=110.6, uplink_mbps=14.0)
        up = int(16.4e6)
        reps = [report(1, top1=1.0, up=up, lttr=0.0, down=0)]
        # down=0 is invalid physically but isolates the uplink term.
        got = tta_estimate(reps, link, "test_top1", 0.5)
        assert got == pytest.approx(16.4e6 * 8 / 14e6, rel=1e-9)
        assert round(got, 2) == 9.37

    def test_unreached_target_returns_none(self):
        assert tta_estimate([report(1, top1=0.1)], LinkModel(), "test_top1", 0.9) is None

    def test_nan_metric_never_reaches(self):
        reps = [report(1, top1=float("nan"))]
        assert tta_estimate(reps, LinkModel(), "test_top1", 0.0) is None

    def test_empty_reports_rejected(self):
        with pytest.raises(ValueError):
            tta_estimate([], LinkModel(), "test_top1", 0.5)


class TestSaveRatio:
    def test_equal_bytes_is_one(self):
        assert save_ratio(100, 100) == 1.0

    def test_zero_method_bytes_rejected(self):
        with pytest.raises(ValueError):
            save_ratio(100, 0)


class TestTopKAccuracy:
    def test_top1_and_top3(self):
        logits = np.array([[0.1, 0.9, 0.0], [0.8, 0.1, 0.1], [0.2, 0.3, 0.5]])
        labels = np.array([1, 1, 2])
        assert top_k_accuracy(logits, labels, 1) == pytest.approx(2 / 3)
        assert top_k_accuracy(logits, labels, 3) == 1.0

    def test_tie_breaks_to_lower_class(self):
        logits = np.array([[0.5, 0.5]])
        assert top_k_accuracy(logits, np.array([0]), 1) == 1.0
        assert top_k_accuracy(logits, np.array([1]), 1) == 0.0


class TestEmitReports:
    def _reports(self):
        return [
            report(1, top1=0.123456789012345678, up=111, lttr=0.25, m_r=100, eps=3.5),
            report(2, top1=float("nan"), up=222, lttr=0.5, m_r=200, eps=1.75),
        ]

    def test_empty_csv_is_header_only(self, tmp_path):
        emit_reports([], "csv", tmp_path / "r.csv")
        assert (tmp_path / "r.csv").read_text() == ",".join(CSV_FIELDS) + "\n"

    def test_empty_json_is_empty_array(self, tmp_path):
        emit_reports([], "json", tmp_path / "r.json")
        assert (tmp_path / "r.json").read_text().strip() == "[]"

    def _values_equal(self, a, b):
        for f in CSV_FIELDS:
            x, y = getattr(a, f), getattr(b, f)
            if isinstance(x, float) and math.isnan(x):
                assert math.isnan(y)
            else:
                assert x == y

    def test_csv_roundtrip_numerically_identical(self, tmp_path):
        reps = self._reports()
        emit_reports(reps, "csv", tmp_path / "r.csv")
        back = read_reports_csv(tmp_path / "r.csv")
        assert len(back) == 2
        for a, b in zip(reps, back):
            self._values_equal(a, b)

    def test_json_roundtrip_numerically_identical(self, tmp_path):
        reps = self._reports()
        emit_reports(reps, "json", tmp_path / "r.json")
        back = read_reports_json(tmp_path / "r.json")
        for a, b in zip(reps, back):
            self._values_equal(a, b)

    def test_field_order_fixed(self, tmp_path):
        emit_reports(self._reports(), "csv", tmp_path / "r.csv")
        header = (tmp_path / "r.csv").read_text().splitlines()[0]
        assert header == (
            "round,train_loss,test_top1,test_top3,up_bytes,down_bytes,"
            "lttr_s,m_r,epsilon_bound"
        )

    def test_deterministic_bytes(self, tmp_path):
        emit_reports(self._reports(), "csv", tmp_path / "a.csv")
        emit_reports(self._reports(), "csv", tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_unwritable_path_mentions_path(self, tmp_path):
        with pytest.raises(OSError, match="no/such"):
            emit_reports([], "csv", tmp_path / "no" / "such" / "r.csv")

    def test_unknown_format_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            emit_reports([], "xml", tmp_path / "r.xml")
