"""Datasets, server/client splitting and client partitioners."""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, FormatError, PartitionError, StructuralError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class LabeledDataset:
    x: np.ndarray
    y: np.ndarray  # one-hot, (N, K)
    class_names: list[str] | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.x.ndim != 2 or self.y.ndim != 2 or len(self.x) != len(self.y):
            raise StructuralError("x must be (N, d) and y (N, K) with equal N")
        if len(self.x) < 1:
            raise StructuralError("dataset must not be empty")
        if np.isnan(self.x).any():
            raise StructuralError("features contain NaN")
        if not (np.isin(self.y, (0.0, 1.0)).all() and (self.y.sum(axis=1) == 1).all()):
            raise StructuralError("labels must be one-hot rows")

    def __len__(self) -> int:
        return len(self.x)

    @property
    def num_classes(self) -> int:
        return self.y.shape[1]

    @property
    def labels(self) -> np.ndarray:
        return self.y.argmax(axis=1)

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.x[idx], self.y[idx], self.class_names)


class ClientShard:
    """Unlabeled client data.

    Training code reads ``x_u`` only. The ground truth rides along for
    pseudo-label quality metrics and is reachable solely through
    :func:`pseudo_label_accuracy`.
    """

    __slots__ = ("client_id", "x_u", "__hidden_y")

    def __init__(self, client_id: int, x_u: np.ndarray, hidden_y: np.ndarray):
        self.client_id = int(client_id)
        self.x_u = np.asarray(x_u, dtype=np.float64)
        hidden_y = np.asarray(hidden_y, dtype=np.float64)
        if hidden_y.shape[0] != self.x_u.shape[0]:
            raise StructuralError("hidden labels do not match shard size")
        self.__hidden_y = hidden_y

    def __len__(self) -> int:
        return len(self.x_u)

    def __repr__(self) -> str:
        return f"ClientShard(client_id={self.client_id}, n={len(self)})"


def pseudo_label_accuracy(shard: ClientShard, indices: np.ndarray, labels: np.ndarray) -> tuple[int, int]:
    """(number correct, number evaluated) for pseudo-labels of ``shard`` rows."""
    truth = shard._ClientShard__hidden_y[np.asarray(indices, dtype=np.int64)].argmax(axis=1)
    return int((truth == np.asarray(labels)).sum()), len(truth)


def shard_label_counts(shard: ClientShard, num_classes: int) -> np.ndarray:
    """Per-class counts of a shard's hidden labels (diagnostics only)."""
    return np.bincount(shard._ClientShard__hidden_y.argmax(axis=1), minlength=num_classes)


def one_hot(labels: Sequence[int], num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise StructuralError("label out of range")
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


# -- ingestion -------------------------------------------------------------

def _read_idx(path: Path, magic: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise FormatError(f"{path}: header truncated", offset=len(raw))
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise FormatError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}", offset=0)
    ndim = got & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: dimension header truncated", offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) < header + size:
        raise FormatError(f"{path}: expected {size} data bytes", offset=len(raw))
    if len(raw) > header + size:
        raise FormatError(f"{path}: trailing bytes after data", offset=header + size)
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(images_path: str | Path, labels_path: str | Path, num_classes: int = 10) -> LabeledDataset:
    """Read an IDX image/label file pair (MNIST layout), scaling pixels to [0, 1]."""
    images = _read_idx(Path(images_path), IDX_IMAGES_MAGIC)
    labels = _read_idx(Path(labels_path), IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise FormatError(f"{images_path}: {len(images)} images but {len(labels)} labels")
    x = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return LabeledDataset(x, one_hot(labels, num_classes))


def write_idx(images_path: str | Path, labels_path: str | Path, ds: LabeledDataset,
              image_shape: tuple[int, int] | None = None) -> None:
    """Write ``ds`` as an IDX pair; features must lie in [0, 1] on a 1/255 grid to round-trip."""
    n, d = ds.x.shape
    h, w = image_shape if image_shape is not None else (d, 1)
    if h * w != d:
        raise StructuralError("image_shape does not match feature width")
    pix = np.clip(np.rint(ds.x * 255.0), 0, 255).astype(np.uint8)
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + pix.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, n)
                                  + ds.labels.astype(np.uint8).tobytes())


def load_csv(path: str | Path, label_column: str = "label", num_classes: int | None = None) -> LabeledDataset:
    """Tabular data with a header row; every non-label column is a feature."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        if label_column not in header:
            raise FormatError(f"{path}: no column named {label_column!r}")
        li = header.index(label_column)
        xs, ys = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise FormatError(f"{path}: line {lineno} has {len(row)} fields, expected {len(header)}")
            try:
                ys.append(int(row[li]))
                xs.append([float(v) for j, v in enumerate(row) if j != li])
            except ValueError as exc:
                raise FormatError(f"{path}: line {lineno}: {exc}") from None
    if not xs:
        raise FormatError(f"{path}: no data rows")
    k = num_classes if num_classes is not None else max(ys) + 1
    return LabeledDataset(np.array(xs), one_hot(ys, k))


def synth_blobs(n: int, d: int, num_classes: int, separation: float, seed: int,
                noise: float = 1.0) -> LabeledDataset:
    """Isotropic Gaussian classes whose means are ``separation`` apart.

    With ``d >= num_classes`` the means sit on a scaled simplex
    (``separation / sqrt(2) * e_k``) so every pair is exactly ``separation``
    apart; otherwise they lie on the first axis with that spacing. Means do
    not depend on ``seed``, so train/test sets drawn with different seeds
    share one task. Labels are assigned round-robin after a seeded shuffle.
    """
    if n < num_classes:
        raise ConfigError("synth_blobs needs n >= num_classes")
    rng = np.random.default_rng(seed)
    means = np.zeros((num_classes, d))
    if d >= num_classes:
        means[np.arange(num_classes), np.arange(num_classes)] = separation / np.sqrt(2.0)
    else:
        means[:, 0] = separation * np.arange(num_classes)
    labels = rng.permutation(np.arange(n) % num_classes)
    x = means[labels] + noise * rng.normal(size=(n, d))
    return LabeledDataset(x, one_hot(labels, num_classes))


# -- partitioning ------------------------------------------------------------

@dataclass(frozen=True)
class PartitionSpec:
    mode: str = "iid"  # iid | kclass | dirichlet
    num_clients: int = 100
    seed: int = 0
    k: int = 2
    alpha: float = 0.1

    def __post_init__(self):
        if self.mode not in ("iid", "kclass", "dirichlet"):
            raise ConfigError(f"unknown partition mode {self.mode!r}")
        if self.num_clients < 1:
            raise ConfigError("num_clients must be >= 1")
        if self.mode == "kclass" and self.k < 1:
            raise ConfigError("kclass partition needs k >= 1")
        if self.mode == "dirichlet" and not self.alpha > 0:
            raise ConfigError("dirichlet alpha must be > 0")


def _largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    raw = weights / weights.sum() * total
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def partition(indices: Sequence[int], labels: Sequence[int], spec: PartitionSpec,
              num_classes: int | None = None) -> list[np.ndarray]:
    """Split ``indices`` into ``spec.num_clients`` disjoint, exhaustive lists.

    ``labels[i]`` is the class of ``indices[i]``.
    """
    indices = np.asarray(indices, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if indices.shape != labels.shape:
        raise StructuralError("indices and labels differ in length")
    k_total = int(num_classes if num_classes is not None else (labels.max() + 1 if labels.size else 1))
    rng = np.random.default_rng(spec.seed)
    m = spec.num_clients

    if spec.mode == "iid":
        return [np.sort(part) for part in np.array_split(indices[rng.permutation(len(indices))], m)]

    pools = [indices[labels == c][rng.permutation(int((labels == c).sum()))] for c in range(k_total)]

    if spec.mode == "kclass":
        if spec.k > k_total:
            raise PartitionError(f"k={spec.k} exceeds the number of classes {k_total}")
        order = rng.permutation(k_total)
        assigned: list[list[int]] = [[] for _ in range(k_total)]
        for client in range(m):
            for j in range(spec.k):
                assigned[order[(client * spec.k + j) % k_total]].append(client)
        parts: list[list[np.ndarray]] = [[] for _ in range(m)]
        for c in range(k_total):
            holders = assigned[c]
            if not holders:
                if len(pools[c]):
                    raise PartitionError(f"class {c} is assigned to no client; raise num_clients * k")
                continue
            if len(pools[c]) < len(holders):
                raise PartitionError(
                    f"class {c} has {len(pools[c])} samples for {len(holders)} clients")
            for client, chunk in zip(holders, np.array_split(pools[c], len(holders))):
                parts[client].append(chunk)
        return [np.sort(np.concatenate(p)) if p else np.empty(0, np.int64) for p in parts]

    # dirichlet
    sizes = [len(p) for p in np.array_split(np.arange(len(indices)), m)]
    cursor = [0] * k_total
    remaining = np.array([len(p) for p in pools])
    out = []
    for client in range(m):
        props = rng.dirichlet(np.full(k_total, spec.alpha))
        want = _largest_remainder(props, sizes[client])
        take: list[np.ndarray] = []
        for c in np.argsort(-want, kind="stable"):
            need = int(want[c])
            while need > 0:
                src = c if remaining[c] > 0 else int(np.argmax(remaining))
                got = min(need, int(remaining[src]))
                take.append(pools[src][cursor[src]:cursor[src] + got])
                cursor[src] += got
                remaining[src] -= got
                need -= got
        out.append(np.sort(np.concatenate(take)) if take else np.empty(0, np.int64))
    return out


def split_server_clients(ds: LabeledDataset, n_server: int, spec: PartitionSpec,
                         seed: int) -> tuple[LabeledDataset, list[ClientShard], dict]:
    """Stratified labeled server split plus unlabeled client shards.

    Returns ``(server, shards, manifest)`` where the manifest records the
    dataset indices of the server split and of each client.
    """
    n, k = len(ds), ds.num_classes
    if not 0 < n_server < n:
        raise ConfigError(f"n_server must be in (0, {n}), got {n_server}")
    if n_server < k:
        raise ConfigError(f"n_server={n_server} is too small to hold one sample of each of {k} classes")
    rng = np.random.default_rng(seed)
    labels = ds.labels
    by_class = [np.flatnonzero(labels == c)[rng.permutation(int((labels == c).sum()))] for c in range(k)]
    quota = np.full(k, n_server // k)
    extra = rng.permutation(k)[: n_server - quota.sum()]
    quota[extra] += 1
    for c in range(k):
        if quota[c] > len(by_class[c]):
            raise ConfigError(f"class {c} has {len(by_class[c])} samples but the server needs {quota[c]}")
    server_idx = np.sort(np.concatenate([by_class[c][: quota[c]] for c in range(k)]))
    rest = np.setdiff1d(np.arange(n), server_idx)
    parts = partition(rest, labels[rest], spec, num_classes=k)
    shards = [ClientShard(i, ds.x[p], ds.y[p]) for i, p in enumerate(parts)]
    manifest = {"server": server_idx.tolist(), "clients": {str(i): p.tolist() for i, p in enumerate(parts)}}
    return ds.subset(server_idx), shards, manifest


def write_manifest(path: str | Path, manifest: dict) -> None:
    Path(path).write_text(json.dumps(manifest, indent=1))
