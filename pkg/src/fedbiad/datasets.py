"""Dataset ingestion, synthetic generators, and client partitioners.

Three dataset kinds flow through the trainer:

* ``image_class``      -- flat float vectors in [0, 1] with class labels;
* ``seq_next_token``   -- integer token sequences labeled with the next
                          token (one-hot encoded on the way into a model);
* ``teacher_regression`` -- real vectors labeled by a known teacher net.

IDX files (the MNIST container format: big-endian dims, magic 0x803 for
images and 0x801 for labels) can be read and written, so image corpora are
interchangeable with the real thing.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import IdxFormatError
from .nn import ModelParams, ModelSpec, forward

IMAGE_CLASS = "image_class"
SEQ_NEXT_TOKEN = "seq_next_token"
TEACHER_REGRESSION = "teacher_regression"

_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    kind: str
    n_classes: int | None = None

    def __post_init__(self):
        if self.kind not in (IMAGE_CLASS, SEQ_NEXT_TOKEN, TEACHER_REGRESSION):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if len(self.inputs) != len(self.labels):
            raise ValueError("inputs and labels must have the same length")
        if self.kind != TEACHER_REGRESSION:
            if self.n_classes is None:
                raise ValueError("classification datasets need n_classes")
            if len(self.labels) and int(self.labels.max()) >= self.n_classes:
                raise ValueError("label index out of range")

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def task(self) -> str:
        return "regression" if self.kind == TEACHER_REGRESSION else "classification"

    def model_inputs(self, indices: np.ndarray | slice = slice(None)) -> np.ndarray:
        """Inputs in the form the model consumes (sequences get one-hot)."""
        x = self.inputs[indices]
        if self.kind != SEQ_NEXT_TOKEN:
            return x
        eye = np.eye(self.n_classes)
        return eye[x]


@dataclass
class Partition:
    """Disjoint per-client index lists into one dataset."""

    clients: list[np.ndarray]

    def __post_init__(self):
        self.clients = [np.asarray(c, dtype=np.int64) for c in self.clients]
        allidx = np.concatenate(self.clients) if self.clients else np.empty(0, np.int64)
        if allidx.size != np.unique(allidx).size:
            raise ValueError("client index lists overlap")

    def __len__(self) -> int:
        return len(self.clients)


def load_idx(images_path: str | Path, labels_path: str | Path) -> Dataset:
    """Read an IDX image/label file pair into flat [0, 1] vectors."""
    img = Path(images_path).read_bytes()
    if len(img) < 16:
        raise IdxFormatError(f"{images_path}: truncated header at offset {len(img)}")
    magic, n, rows, cols = struct.unpack_from(">IIII", img)
    if magic != _IDX_IMAGES_MAGIC:
        raise IdxFormatError(f"{images_path}: bad magic {magic:#010x} at offset 0")
    if len(img) != 16 + n * rows * cols:
        raise IdxFormatError(
            f"{images_path}: expected {16 + n * rows * cols} bytes, found {len(img)}"
        )
    lbl = Path(labels_path).read_bytes()
    if len(lbl) < 8:
        raise IdxFormatError(f"{labels_path}: truncated header at offset {len(lbl)}")
    lmagic, ln = struct.unpack_from(">II", lbl)
    if lmagic != _IDX_LABELS_MAGIC:
        raise IdxFormatError(f"{labels_path}: bad magic {lmagic:#010x} at offset 0")
    if ln != n:
        raise IdxFormatError(f"{labels_path}: {ln} labels for {n} images")
    if len(lbl) != 8 + ln:
        raise IdxFormatError(f"{labels_path}: expected {8 + ln} bytes, found {len(lbl)}")

    pixels = np.frombuffer(img, dtype=np.uint8, offset=16)
    inputs = (pixels.astype(np.float64) / 255.0).reshape(n, rows * cols)
    labels = np.frombuffer(lbl, dtype=np.uint8, offset=8).astype(np.int64)
    n_classes = int(labels.max()) + 1 if n else 10
    return Dataset(inputs, labels, IMAGE_CLASS, n_classes=max(n_classes, 10))


def save_idx(
    images: np.ndarray, labels: np.ndarray, images_path: str | Path, labels_path: str | Path
) -> None:
    """Write uint8 images of shape (n, rows, cols) and labels as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", _IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", _IDX_LABELS_MAGIC, n))
        fh.write(labels.tobytes())


def partition_iid(dataset: Dataset, n_clients: int, rng: np.random.Generator) -> Partition:
    """Random permutation split into near-equal disjoint shards."""
    if n_clients < 1 or n_clients > len(dataset):
        raise ValueError(f"cannot split {len(dataset)} items across {n_clients} clients")
    perm = rng.permutation(len(dataset))
    return Partition(list(np.array_split(perm, n_clients)))


def partition_noniid(
    dataset: Dataset,
    n_clients: int,
    classes_per_client: int,
    rng: np.random.Generator,
) -> Partition:
    """Label-shard split: each client draws from at most ``classes_per_client``
    distinct classes; shard sizes differ across clients."""
    if dataset.n_classes is None:
        raise ValueError("non-IID partitioning needs class labels")
    if classes_per_client < 1 or classes_per_client > dataset.n_classes:
        raise ValueError(f"classes_per_client must lie in [1, {dataset.n_classes}]")
    if n_clients * classes_per_client < dataset.n_classes:
        raise ValueError(
            f"{n_clients} clients x {classes_per_client} classes cannot cover "
            f"{dataset.n_classes} classes"
        )
    # Deal class slots to clients so every class has at least one owner.
    slots = []
    while len(slots) < n_clients * classes_per_client:
        slots.extend(rng.permutation(dataset.n_classes).tolist())
    slots = np.array(slots[: n_clients * classes_per_client]).reshape(
        n_clients, classes_per_client
    )
    owners: dict[int, list[int]] = {c: [] for c in range(dataset.n_classes)}
    for client, row in enumerate(slots):
        for cls in row:
            owners[int(cls)].append(client)

    shards: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
    for cls in range(dataset.n_classes):
        idx = np.flatnonzero(dataset.labels == cls)
        idx = idx[rng.permutation(idx.size)]
        for owner, chunk in zip(owners[cls], np.array_split(idx, len(owners[cls]))):
            shards[owner].append(chunk)
    clients = [
        np.sort(np.concatenate(parts)) if parts else np.empty(0, np.int64) for parts in shards
    ]
    if any(c.size == 0 for c in clients):
        raise ValueError("class budget infeasible: a client ended up with no data")
    return Partition(clients)


def synth_teacher(
    spec: ModelSpec, n_points: int, noise_sd: float, rng: np.random.Generator
) -> tuple[Dataset, ModelParams]:
    """Regression data from a randomly drawn teacher network.

    Teacher weight entries are uniform in [-2, 2] (the bound assumed of an
    optimal model); inputs are standard normal; targets are the teacher's
    outputs plus optional Gaussian noise.
    """
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    bound = 2.0
    mats = [rng.uniform(-bound, bound, size=shape) for shape in spec.matrix_shapes()]
    teacher = ModelParams(spec, mats)
    X = rng.standard_normal((n_points, spec.in_dim))
    y, _ = forward(teacher, X)
    if noise_sd > 0:
        y = y + noise_sd * rng.standard_normal(y.shape)
    return Dataset(X, y, TEACHER_REGRESSION), teacher


def markov_transitions(
    vocab_size: int, rng: np.random.Generator, concentration: float = 0.1
) -> np.ndarray:
    """Row-stochastic transition matrix with Dirichlet-concentrated rows."""
    if vocab_size < 2:
        raise ValueError("vocab_size must be >= 2")
    return rng.dirichlet(np.full(vocab_size, concentration), size=vocab_size)


def synth_sequences(
    vocab_size: int,
    seq_len: int,
    n: int,
    rng: np.random.Generator,
    transitions: np.ndarray | None = None,
    concentration: float = 0.1,
) -> Dataset:
    """Token sequences from a fixed first-order Markov chain; the label is
    the token that follows the sequence."""
    if vocab_size < 2 or seq_len < 2:
        raise ValueError("need vocab_size >= 2 and seq_len >= 2")
    if transitions is None:
        transitions = markov_transitions(vocab_size, rng, concentration)
    cdf = np.cumsum(transitions, axis=1)
    seqs = np.empty((n, seq_len + 1), dtype=np.int64)
    seqs[:, 0] = rng.integers(0, vocab_size, size=n)
    draws = rng.random((n, seq_len))
    for t in range(1, seq_len + 1):
        nxt = (draws[:, t - 1, np.newaxis] >= cdf[seqs[:, t - 1]]).sum(axis=1)
        # cdf rows end at 1 only up to rounding; clamp the endpoint draw
        seqs[:, t] = np.minimum(nxt, vocab_size - 1)
    return Dataset(seqs[:, :seq_len], seqs[:, seq_len], SEQ_NEXT_TOKEN, n_classes=vocab_size)


def synth_images(
    n: int,
    rng: np.random.Generator,
    n_classes: int = 10,
    side: int = 28,
    noise: float = 0.35,
) -> tuple[np.ndarray, np.ndarray]:
    """Procedural image-classification corpus in MNIST geometry.

    Each class is a smooth random template; samples add pixel noise.
    Returns uint8 images of shape (n, side, side) and integer labels,
    ready for `save_idx` / `load_idx`.
    """
    coarse = max(side // 4, 2)
    templates = []
    for _ in range(n_classes):
        grid = rng.random((coarse, coarse))
        up = np.kron(grid, np.ones((side // coarse + 1, side // coarse + 1)))[:side, :side]
        templates.append(up)
    labels = rng.integers(0, n_classes, size=n)
    images = np.stack([templates[c] for c in labels])
    images = images + noise * rng.standard_normal(images.shape)
    return (np.clip(images, 0.0, 1.0) * 255).astype(np.uint8), labels.astype(np.int64)
