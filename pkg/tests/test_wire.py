"""Wire format: byte-exact layout, fuzzed roundtrips, fail-closed decoding."""

import struct

import numpy as np
import pytest

from fedbiad.errors import DecodeError, EncodeError
from fedbiad.nn import ModelParams, ModelSpec
from fedbiad.patterns import DroppingPattern, LayerRows, RowLayout, sample_pattern
from fedbiad.selfcheck import random_layout, random_update
from fedbiad.wire import (
    HEADER_BYTES,
    CommLedger,
    SparseUpdate,
    dense_message_bytes,
    deserialize,
    layout_digest,
    message_bytes,
    payload_bytes,
    serialize,
    upload_bytes,
)


def updates_equal(a, b):
    if (a.data_size, a.digest) != (b.data_size, b.digest) or a.pattern != b.pattern:
        return False
    if a.is_topk != b.is_topk:
        return False
    if a.is_topk:
        return np.array_equal(a.topk_indices, b.topk_indices) and np.array_equal(
            a.topk_values, b.topk_values
        )
    return all(np.array_equal(x, y) for x, y in zip(a.rows, b.rows))


class TestFormatArithmetic:
    def test_header_is_26_bytes_before_pattern(self):
        assert HEADER_BYTES == 4 + 2 + 8 + 8 + 4 == 26

    def test_lsb_first_pattern_packing(self):
        # Keep rows 0 and 2 of 8: byte 0b00000101 = 0x05.
        layout = RowLayout((LayerRows(8, 1),), 0.75)
        assert layout.quotas == (2,)
        update = SparseUpdate(
            layout,
            DroppingPattern([1, 0, 1, 0, 0, 0, 0, 0]),
            data_size=1,
            rows=[np.zeros((2, 1), dtype=np.float32)],
        )
        assert serialize(update)[HEADER_BYTES] == 0x05

    def test_half_dropout_byte_count_example(self):
        layout = RowLayout((LayerRows(1024, 256),), 0.5)
        assert message_bytes(layout) == 26 + 128 + 4 * 512 * 256 == 524_442

    def test_pattern_overhead_for_2400_rows(self):
        layout = RowLayout((LayerRows(2400, 8),), 0.5)
        assert message_bytes(layout) - 26 - 4 * layout.S == 300

    def test_message_bytes_matches_serialized_length(self, rng):
        for _ in range(50):
            layout = random_layout(rng)
            update = random_update(layout, rng)
            count = len(update.topk_indices) if update.is_topk else None
            assert len(serialize(update)) == message_bytes(layout, count)
            assert upload_bytes(update) == message_bytes(layout, count)

    def test_byte_count_independent_of_values(self, rng):
        layout = RowLayout((LayerRows(16, 4),), 0.5)
        pat = sample_pattern(layout, rng)
        a = SparseUpdate(layout, pat, 5, rows=[np.zeros((8, 4), np.float32)])
        b = SparseUpdate(layout, pat, 5, rows=[np.full((8, 4), 1e9, np.float32)])
        assert upload_bytes(a) == upload_bytes(b)

    @pytest.mark.parametrize("p", [0.2, 0.5])
    def test_save_ratio_band_for_large_models(self, p):
        # >= 100 KB of droppable payload keeps the ratio within 0.01 of
        # the ideal 1/(1-p).
        layout = RowLayout((LayerRows(512, 128), LayerRows(512, 64)), p)
        ratio = dense_message_bytes(layout) / message_bytes(layout)
        assert dense_message_bytes(layout) >= 100_000
        assert abs(ratio - 1.0 / (1.0 - p)) <= 0.01


class TestRoundtrip:
    def test_fuzzed_roundtrip_identity(self):
        rng = np.random.default_rng(2024)
        for _ in range(1000):
            layout = random_layout(rng)
            update = random_update(layout, rng)
            assert updates_equal(update, deserialize(serialize(update), layout))

    def test_file_roundtrip(self, rng, tmp_path):
        layout = random_layout(rng)
        update = random_update(layout, rng)
        path = tmp_path / "update.fbad"
        path.write_bytes(serialize(update))
        assert updates_equal(update, deserialize(path.read_bytes(), layout))


class TestFailClosed:
    @pytest.fixture
    def blob_and_layout(self, rng):
        layout = RowLayout((LayerRows(16, 4), LayerRows(8, 4, droppable=False)), 0.5)
        rows = [
            rng.standard_normal((8, 4)).astype(np.float32),
            rng.standard_normal((8, 4)).astype(np.float32),
        ]
        update = SparseUpdate(layout, sample_pattern(layout, rng), 7, rows=rows)
        return bytearray(serialize(update)), layout

    def test_bad_magic(self, blob_and_layout):
        blob, layout = blob_and_layout
        blob[:4] = b"NOPE"
        with pytest.raises(DecodeError, match="magic"):
            deserialize(bytes(blob), layout)

    def test_bad_version(self, blob_and_layout):
        blob, layout = blob_and_layout
        blob[4:6] = struct.pack("<H", 99)
        with pytest.raises(DecodeError, match="version"):
            deserialize(bytes(blob), layout)

    def test_digest_flip(self, blob_and_layout):
        blob, layout = blob_and_layout
        blob[6] ^= 0xFF
        with pytest.raises(DecodeError, match="digest"):
            deserialize(bytes(blob), layout)

    def test_truncation_never_partial(self, blob_and_layout):
        blob, layout = blob_and_layout
        for cut in (3, HEADER_BYTES - 1, HEADER_BYTES + 1, len(blob) - 1):
            with pytest.raises(DecodeError):
                deserialize(bytes(blob[:cut]), layout)

    def test_trailing_garbage_rejected(self, blob_and_layout):
        blob, layout = blob_and_layout
        with pytest.raises(DecodeError, match="trailing"):
            deserialize(bytes(blob) + b"\x00", layout)

    def test_popcount_violation(self, blob_and_layout):
        blob, layout = blob_and_layout
        blob[HEADER_BYTES] ^= 0b1  # flips row 0 of the first layer
        with pytest.raises(DecodeError, match="popcount"):
            deserialize(bytes(blob), layout)

    def test_encode_rejects_bad_quota(self, rng):
        layout = RowLayout((LayerRows(8, 2),), 0.5)
        bad = SparseUpdate(
            layout,
            DroppingPattern([1, 1, 1, 1, 1, 0, 0, 0]),  # popcount 5, quota 4
            data_size=1,
            rows=[np.zeros((4, 2), np.float32)],
        )
        with pytest.raises(EncodeError):
            serialize(bad)

    def test_digest_depends_on_quota(self):
        a = RowLayout((LayerRows(8, 2),), 0.5)
        b = RowLayout((LayerRows(8, 2),), 0.25)
        assert layout_digest(a) != layout_digest(b)


class TestReconstruct:
    def test_dense_reconstruction_zeroes_dropped_rows(self, rng):
        spec = ModelSpec("mlp", 1, 3, 6, 2)
        params = ModelParams(
            spec, [rng.standard_normal((6, 3)), rng.standard_normal((2, 6))]
        )
        layout = RowLayout.from_params(params, 0.5)
        pat = sample_pattern(layout, rng)
        update = SparseUpdate.from_means(layout, pat, params, 3)
        dense = update.reconstruct_rows()
        for j in range(6):
            if pat.bits[j]:
                np.testing.assert_allclose(dense[0][j], params.matrices[0][j], rtol=1e-6)
            else:
                assert np.array_equal(dense[0][j], np.zeros(3))
        np.testing.assert_allclose(dense[1], params.matrices[1], rtol=1e-6)


class TestTopkPayload:
    def test_topk_message_size(self):
        layout = RowLayout((LayerRows(8, 4),), 0.5)
        assert message_bytes(layout, topk_count=5) == 26 + 1 + 4 + 8 * 5
        assert payload_bytes(layout, topk_count=5) == 40
        assert payload_bytes(layout) == 4 * layout.S

    @pytest.mark.parametrize("k_fraction", [0.05, 0.1, 0.25, 0.4])
    def test_stacking_never_grows_uploads_below_half(self, k_fraction):
        # Indexed entries cost twice a dense entry, so any fraction below
        # one half stays at or under the unstacked message size.
        for layout in (
            RowLayout((LayerRows(64, 784), LayerRows(10, 64, droppable=False)), 0.2),
            RowLayout((LayerRows(128, 32),), 0.5),
        ):
            count = max(1, int(k_fraction * layout.S))
            assert message_bytes(layout, count) <= message_bytes(layout)

    def test_update_file_helpers(self, rng, tmp_path):
        from fedbiad.wire import read_update, write_update

        layout = random_layout(rng)
        update = random_update(layout, rng)
        write_update(update, tmp_path / "u.fbad")
        back = read_update(tmp_path / "u.fbad", layout)
        assert updates_equal(update, back)

    def test_topk_index_validation_fail_closed(self, rng):
        layout = RowLayout((LayerRows(8, 4),), 0.5)
        pat = sample_pattern(layout, rng)
        good = SparseUpdate.from_topk(layout, pat, np.array([1, 5]), np.array([1.0, 2.0]), 1)
        deserialize(serialize(good), layout)
        descending = SparseUpdate.from_topk(
            layout, pat, np.array([5, 1]), np.array([1.0, 2.0]), 1
        )
        with pytest.raises(DecodeError, match="increasing"):
            deserialize(serialize(descending), layout)
        oob = SparseUpdate.from_topk(
            layout, pat, np.array([layout.dense_scalars]), np.array([1.0]), 1
        )
        with pytest.raises(DecodeError, match="outside"):
            deserialize(serialize(oob), layout)


class TestCommLedger:
    def test_totals_accumulate_monotonically(self):
        ledger = CommLedger()
        ledger.add_round([10, 30, 20], 100)
        ledger.add_round([5, 5, 5], 100)
        assert ledger.per_round_up == [30, 5]
        assert ledger.total_up == 75
        assert ledger.total_down == 600

    def test_empty_round_rejected(self):
        with pytest.raises(ValueError):
            CommLedger().add_round([], 10)
