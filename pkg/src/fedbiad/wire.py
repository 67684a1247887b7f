"""Bit-exact serialization of sparse updates and the communication ledger.

Message layout (all multi-byte integers little-endian):

    magic   "FBAD"                      4 bytes
    version u16 (1 = row payload, 2 = top-k payload)
    digest  u64 checksum of the RowLayout
    size    u64 client data count
    J       u32 droppable row count
    pattern ceil(J/8) bytes, bit j at byte j//8, LSB-first
    payload row mode:   kept rows as f32, layer-major, index-ascending,
                        with non-droppable layers transmitted in full;
            top-k mode: count u32, then count * (index u32, value f32)

The 26-byte header precedes the pattern.  Deserialization is fail-closed:
magic, version, digest, length, and per-layer popcounts are all validated
before any field is returned.  Updates written to disk use the ``.fbad``
extension.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DecodeError, EncodeError, ShapeError
from .nn import ModelParams
from .patterns import DroppingPattern, RowLayout

MAGIC = b"FBAD"
VERSION_ROWS = 1
VERSION_TOPK = 2
_HEADER = struct.Struct("<4sHQQI")
HEADER_BYTES = _HEADER.size  # 26


def layout_digest(layout: RowLayout) -> int:
    """64-bit checksum over the canonical layout encoding (rows, width,
    droppability, and quota of every layer)."""
    h = hashlib.blake2b(digest_size=8)
    for lr in layout.layers:
        h.update(struct.pack("<IIBI", lr.rows, lr.width, int(lr.droppable), layout.quota(lr)))
    return int.from_bytes(h.digest(), "little")


@dataclass
class SparseUpdate:
    """One client's upload: pattern plus either kept rows or top-k entries."""

    layout: RowLayout
    pattern: DroppingPattern
    data_size: int
    rows: list[np.ndarray] | None = None
    topk_indices: np.ndarray | None = None
    topk_values: np.ndarray | None = None
    digest: int = field(init=False)

    def __post_init__(self):
        self.digest = layout_digest(self.layout)

    @property
    def is_topk(self) -> bool:
        return self.topk_indices is not None

    @classmethod
    def from_means(
        cls,
        layout: RowLayout,
        pattern: DroppingPattern,
        means: ModelParams,
        data_size: int,
    ) -> "SparseUpdate":
        """Extract the transmitted rows (kept droppable + all non-droppable)
        from dense means, narrowing to 32-bit floats."""
        rows: list[np.ndarray] = []
        ofs = 0
        for m, drop in zip(means.matrices, means.droppable):
            if drop:
                mask = pattern.bits[ofs:ofs + m.shape[0]] == 1
                ofs += m.shape[0]
                rows.append(m[mask].astype(np.float32))
            else:
                rows.append(m.astype(np.float32))
        return cls(layout, pattern, data_size, rows=rows)

    @classmethod
    def from_topk(
        cls,
        layout: RowLayout,
        pattern: DroppingPattern,
        indices: np.ndarray,
        values: np.ndarray,
        data_size: int,
    ) -> "SparseUpdate":
        return cls(
            layout,
            pattern,
            data_size,
            topk_indices=np.asarray(indices, dtype=np.uint32),
            topk_values=np.asarray(values, dtype=np.float32),
        )

    def reconstruct_rows(self) -> list[np.ndarray]:
        """Dense float64 matrices with dropped rows exactly zero (row mode)."""
        if self.rows is None:
            raise ValueError("top-k updates reconstruct against base means, not alone")
        out: list[np.ndarray] = []
        ofs = 0
        for lr, payload in zip(self.layout.layers, self.rows):
            full = np.zeros((lr.rows, lr.width))
            if lr.droppable:
                mask = self.pattern.bits[ofs:ofs + lr.rows] == 1
                ofs += lr.rows
                full[mask] = payload.astype(np.float64)
            else:
                full[:] = payload.astype(np.float64)
            out.append(full)
        return out


def _validate(update: SparseUpdate) -> None:
    layout = update.layout
    try:
        layout.check_pattern(update.pattern.bits)
    except ShapeError as exc:
        raise EncodeError(str(exc)) from exc
    if update.data_size < 0:
        raise EncodeError("data_size must be non-negative")
    if update.is_topk:
        if update.topk_values is None or len(update.topk_indices) != len(update.topk_values):
            raise EncodeError("top-k indices and values must pair up")
        return
    if update.rows is None:
        raise EncodeError("update carries neither rows nor top-k entries")
    expected = [
        (layout.quota(lr) if lr.droppable else lr.rows, lr.width) for lr in layout.layers
    ]
    got = [r.shape for r in update.rows]
    if got != expected:
        raise EncodeError(f"row payload shapes {got} != expected {expected}")


def serialize(update: SparseUpdate) -> bytes:
    """Encode an update; raises EncodeError if its invariants do not hold."""
    _validate(update)
    layout = update.layout
    version = VERSION_TOPK if update.is_topk else VERSION_ROWS
    head = _HEADER.pack(MAGIC, version, update.digest, update.data_size, layout.J)
    pattern = np.packbits(update.pattern.bits, bitorder="little").tobytes()
    if update.is_topk:
        payload = struct.pack("<I", len(update.topk_indices))
        pairs = np.empty(len(update.topk_indices), dtype=[("i", "<u4"), ("v", "<f4")])
        pairs["i"] = update.topk_indices
        pairs["v"] = update.topk_values
        payload += pairs.tobytes()
    else:
        payload = b"".join(r.astype("<f4").tobytes() for r in update.rows)
    return head + pattern + payload


def deserialize(data: bytes, layout: RowLayout) -> SparseUpdate:
    """Exact inverse of `serialize`; fail-closed against the given layout."""
    if len(data) < HEADER_BYTES:
        raise DecodeError(f"truncated header: {len(data)} bytes < {HEADER_BYTES}")
    magic, version, digest, data_size, j = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise DecodeError(f"bad magic {magic!r}")
    if version not in (VERSION_ROWS, VERSION_TOPK):
        raise DecodeError(f"unsupported format version {version}")
    if digest != layout_digest(layout):
        raise DecodeError("layout digest mismatch")
    if j != layout.J:
        raise DecodeError(f"row count {j} != layout droppable rows {layout.J}")
    pat_len = (j + 7) // 8
    body = HEADER_BYTES + pat_len
    if len(data) < body:
        raise DecodeError("truncated pattern section")
    bits = np.unpackbits(
        np.frombuffer(data[HEADER_BYTES:body], dtype=np.uint8), bitorder="little"
    )[:j]
    try:
        layout.check_pattern(bits)
    except ShapeError as exc:
        raise DecodeError(f"pattern popcount invalid: {exc}") from exc
    pattern = DroppingPattern(bits)

    if version == VERSION_TOPK:
        if len(data) < body + 4:
            raise DecodeError("truncated top-k count")
        (count,) = struct.unpack_from("<I", data, body)
        expected = body + 4 + 8 * count
        if len(data) != expected:
            raise DecodeError(f"top-k payload is {len(data) - body - 4} bytes, expected {8 * count}")
        pairs = np.frombuffer(data, dtype=[("i", "<u4"), ("v", "<f4")], count=count, offset=body + 4)
        idx = pairs["i"]
        if count > 1 and not (idx[1:] > idx[:-1]).all():
            raise DecodeError("top-k indices must be strictly increasing")
        if count and int(idx.max()) >= layout.dense_scalars:
            raise DecodeError(f"top-k index {int(idx.max())} outside {layout.dense_scalars} scalars")
        return SparseUpdate.from_topk(layout, pattern, idx.copy(), pairs["v"].copy(), data_size)

    rows: list[np.ndarray] = []
    ofs = body
    for lr in layout.layers:
        n = layout.quota(lr) if lr.droppable else lr.rows
        nbytes = 4 * n * lr.width
        if len(data) < ofs + nbytes:
            raise DecodeError(f"truncated row payload at byte {ofs}")
        rows.append(
            np.frombuffer(data, dtype="<f4", count=n * lr.width, offset=ofs)
            .reshape(n, lr.width)
            .copy()
        )
        ofs += nbytes
    if ofs != len(data):
        raise DecodeError(f"{len(data) - ofs} trailing bytes after row payload")
    return SparseUpdate(layout, pattern, data_size, rows=rows)


def upload_bytes(update: SparseUpdate) -> int:
    """Exact serialized length of the update."""
    return len(serialize(update))


def write_update(update: SparseUpdate, path) -> None:
    """Persist an update; the conventional extension is ``.fbad``."""
    from pathlib import Path

    Path(path).write_bytes(serialize(update))


def read_update(path, layout: RowLayout) -> SparseUpdate:
    from pathlib import Path

    return deserialize(Path(path).read_bytes(), layout)


def message_bytes(layout: RowLayout, topk_count: int | None = None) -> int:
    """Byte count as a pure function of layout geometry and top-k count."""
    n = HEADER_BYTES + (layout.J + 7) // 8
    if topk_count is None:
        return n + 4 * layout.S
    return n + 4 + 8 * topk_count


def payload_bytes(layout: RowLayout, topk_count: int | None = None) -> int:
    """Bytes spent on parameter content alone, excluding framing
    (header, pattern bitset, and the top-k count field)."""
    return 4 * layout.S if topk_count is None else 8 * topk_count


def dense_message_bytes(layout: RowLayout) -> int:
    """Upload size the same layout would cost with no dropout (p = 0)."""
    return message_bytes(RowLayout(layout.layers, 0.0))


@dataclass
class CommLedger:
    """Per-round and cumulative byte accounting.

    ``per_round_up`` records the largest single-client upload of each round
    (the transfer that gates round time); the totals accumulate over every
    client and round.
    """

    per_round_up: list[int] = field(default_factory=list)
    per_round_down: list[int] = field(default_factory=list)
    total_up: int = 0
    total_down: int = 0

    def add_round(self, up_per_client: list[int], down_per_client: int) -> None:
        if not up_per_client:
            raise ValueError("a round must involve at least one client")
        self.per_round_up.append(max(up_per_client))
        self.per_round_down.append(down_per_client)
        self.total_up += sum(up_per_client)
        self.total_down += down_per_client * len(up_per_client)
