"""Synthetic class-imbalanced data and non-IID federated partitioning."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import PartitionError, SplitError

SPLITS = ("train", "test", "all")


def geometric_counts(n_classes: int, head: int = 1000, ratio: float = 0.4) -> tuple[int, ...]:
    return tuple(max(1, int(round(head * ratio**c))) for c in range(n_classes))


@dataclass(frozen=True)
class SyntheticDataConfig:
    n_classes: int = 5
    input_dim: int = 32
    samples_per_class: tuple[int, ...] | None = None
    class_mean_separation: float = 3.0
    noise_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.samples_per_class is None:
            object.__setattr__(self, "samples_per_class", geometric_counts(self.n_classes))
        else:
            object.__setattr__(self, "samples_per_class", tuple(int(v) for v in self.samples_per_class))
        if len(self.samples_per_class) != self.n_classes:
            raise ValueError("samples_per_class must have one entry per class")
        if any(v < 0 for v in self.samples_per_class):
            raise ValueError("samples_per_class entries must be >= 0")
        if self.input_dim < 2:
            raise ValueError("input_dim must be >= 2")


@dataclass(frozen=True)
class PartitionConfig:
    n_clients: int = 10
    dirichlet_alpha_per_class: tuple[float, ...] = (1.0,)
    missing_class_prob: float = 0.3
    seed: int = 0
    max_retries: int = 100

    def __post_init__(self):
        object.__setattr__(self, "dirichlet_alpha_per_class", tuple(float(a) for a in self.dirichlet_alpha_per_class))
        if self.n_clients < 1:
            raise ValueError("n_clients must be >= 1")
        if any(a <= 0 for a in self.dirichlet_alpha_per_class):
            raise ValueError("Dirichlet alphas must be > 0")
        if not 0 <= self.missing_class_prob < 1:
            raise ValueError("missing_class_prob must lie in [0, 1)")

    def alphas(self, n_classes: int) -> np.ndarray:
        a = self.dirichlet_alpha_per_class
        if len(a) == 1:
            return np.full(n_classes, a[0])
        if len(a) != n_classes:
            raise ValueError(f"{len(a)} Dirichlet alphas for {n_classes} classes")
        return np.asarray(a)


@dataclass
class LabeledDataset:
    X: np.ndarray
    y: np.ndarray
    n_classes: int
    means: np.ndarray | None = None

    def counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.n_classes)


@dataclass
class ClientDataset:
    client_id: int
    X: np.ndarray
    y: np.ndarray
    n_classes: int
    train_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    test_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self._indices(name)
        return self.X[idx], self.y[idx]

    def _indices(self, name: str) -> np.ndarray:
        if name == "train":
            return self.train_idx
        if name == "test":
            return self.test_idx
        if name == "all":
            return np.arange(len(self.y))
        raise ValueError(f"unknown split {name!r}; expected one of {SPLITS}")

    @property
    def n_train(self) -> int:
        return len(self.train_idx)


def generate_synthetic(config: SyntheticDataConfig) -> LabeledDataset:
    """Isotropic Gaussian blobs at random unit directions scaled by the separation."""
    rng = np.random.default_rng([config.seed, 11])
    dirs = rng.standard_normal((config.n_classes, config.input_dim))
    means = config.class_mean_separation * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    X, y = [], []
    for c, n in enumerate(config.samples_per_class):
        X.append(means[c] + config.noise_scale * rng.standard_normal((n, config.input_dim)))
        y.append(np.full(n, c, dtype=int))
    return LabeledDataset(np.concatenate(X), np.concatenate(y), config.n_classes, means)


def _draw_mask(rng, n_clients, n_classes, p):
    for _ in range(1000):
        keep = rng.random((n_clients, n_classes)) >= p
        if keep.any(axis=1).all() and keep.any(axis=0).all():
            return keep
    raise PartitionError("could not draw a class mask leaving every client and class represented")


def dirichlet_partition(dataset: LabeledDataset, config: PartitionConfig) -> list[ClientDataset]:
    """Per-class Dirichlet shares across clients, with random class removal.

    A removed class's share is redistributed over the clients that keep the
    class, in proportion to their own Dirichlet shares, so the global dataset
    is conserved. Train/test index sets are left empty (see ``stratified_split``).
    """
    if len(dataset.y) == 0:
        raise PartitionError("cannot partition an empty dataset")
    C, N = dataset.n_classes, config.n_clients
    alphas = config.alphas(C)
    rng = np.random.default_rng([config.seed, 23])
    class_idx = [np.flatnonzero(dataset.y == c) for c in range(C)]

    for _ in range(config.max_retries):
        shares = np.stack([rng.dirichlet(np.full(N, a)) for a in alphas], axis=1)  # (N, C)
        keep = _draw_mask(rng, N, C, config.missing_class_prob)
        masked = shares * keep
        col = masked.sum(axis=0)
        present = np.array([len(ix) > 0 for ix in class_idx])
        if np.any(col[present] <= 0):
            continue
        owners: list[list[np.ndarray]] = [[] for _ in range(N)]
        for c in range(C):
            idx = class_idx[c]
            if len(idx) == 0:
                continue
            p = masked[:, c] / col[c]
            assign = rng.choice(N, size=len(idx), p=p)
            for i in range(N):
                owners[i].append(idx[assign == i])
        sizes = [sum(len(a) for a in o) for o in owners]
        if min(sizes) == 0:
            continue
        clients = []
        for i in range(N):
            idx = np.sort(np.concatenate(owners[i]))
            clients.append(ClientDataset(i, dataset.X[idx], dataset.y[idx], C))
        return clients
    raise PartitionError(f"no valid partition after {config.max_retries} attempts")


def partition_by_counts(dataset: LabeledDataset, counts: np.ndarray, seed: int = 0) -> list[ClientDataset]:
    """Deal a fixed (clients x classes) count matrix out of ``dataset``."""
    counts = np.asarray(counts, dtype=int)
    C = dataset.n_classes
    if counts.shape[1] != C:
        raise PartitionError(f"count matrix has {counts.shape[1]} classes, dataset has {C}")
    rng = np.random.default_rng([seed, 29])
    pools = []
    for c in range(C):
        idx = rng.permutation(np.flatnonzero(dataset.y == c))
        if len(idx) < counts[:, c].sum():
            raise PartitionError(f"class {c}: {len(idx)} samples, {counts[:, c].sum()} requested")
        pools.append(idx)
    starts = np.zeros(C, dtype=int)
    clients = []
    for i, row in enumerate(counts):
        parts = []
        for c, k in enumerate(row):
            parts.append(pools[c][starts[c]:starts[c] + k])
            starts[c] += k
        idx = np.sort(np.concatenate(parts))
        if len(idx) == 0:
            raise PartitionError(f"client {i} would be empty")
        clients.append(ClientDataset(i, dataset.X[idx], dataset.y[idx], C))
    return clients


def stratified_split(client: ClientDataset, train_fraction: float = 0.8, seed: int = 0) -> ClientDataset:
    """Per-class train/test split keeping class ratios.

    ``floor(n_c * train_fraction)`` samples of each class go to train (at least
    one when n_c >= 2); singleton classes go to train only.
    """
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    if len(client.y) == 0:
        raise SplitError(f"client {client.client_id} has no samples")
    rng = np.random.default_rng([seed, 31, client.client_id])
    train, test = [], []
    for c in range(client.n_classes):
        idx = np.flatnonzero(client.y == c)
        n_c = len(idx)
        if n_c == 0:
            continue
        if n_c == 1:
            train.append(idx)
            continue
        n_train = max(1, int(np.floor(n_c * train_fraction)))
        idx = rng.permutation(idx)
        train.append(idx[:n_train])
        test.append(idx[n_train:])
    cat = lambda parts: np.sort(np.concatenate(parts)) if parts else np.zeros(0, dtype=int)
    return ClientDataset(client.client_id, client.X, client.y, client.n_classes, cat(train), cat(test))


def class_counts(client: ClientDataset, split: str = "train") -> np.ndarray:
    _, y = client.split(split)
    return np.bincount(y, minlength=client.n_classes)


HEADER_TAG = "FEDNPR-DATA-v1"


def export_clients(clients: list[ClientDataset], path) -> None:
    """Write clients as columnar text: a header line, then one row per sample.

    Header: ``FEDNPR-DATA-v1 dims=<d> classes=<C> clients=<N>``.
    Rows: ``client,split,label,x_0,...,x_{d-1}``; floats use shortest
    round-trip repr so import is exact.
    """
    path = Path(path)
    d = clients[0].X.shape[1]
    C = clients[0].n_classes
    with path.open("w", newline="") as fh:
        fh.write(f"{HEADER_TAG} dims={d} classes={C} clients={len(clients)}\n")
        w = csv.writer(fh, lineterminator="\n")
        for cl in clients:
            split_of = np.full(len(cl.y), "none", dtype=object)
            split_of[cl.train_idx] = "train"
            split_of[cl.test_idx] = "test"
            for j in range(len(cl.y)):
                w.writerow([cl.client_id, split_of[j], int(cl.y[j]), *(repr(float(v)) for v in cl.X[j])])


def import_clients(path) -> list[ClientDataset]:
    path = Path(path)
    with path.open() as fh:
        head = fh.readline().split()
        if not head or head[0] != HEADER_TAG:
            raise ValueError(f"{path}: missing {HEADER_TAG} header")
        meta = dict(tok.split("=") for tok in head[1:])
        d, C, N = int(meta["dims"]), int(meta["classes"]), int(meta["clients"])
        rows: dict[int, list] = {i: [] for i in range(N)}
        for rec in csv.reader(fh):
            if len(rec) != 3 + d:
                raise ValueError(f"{path}: row with {len(rec)} fields, expected {3 + d}")
            rows[int(rec[0])].append(rec)
    clients = []
    for i in range(N):
        recs = rows[i]
        X = np.array([[float(v) for v in r[3:]] for r in recs]).reshape(len(recs), d)
        y = np.array([int(r[2]) for r in recs], dtype=int)
        splits = np.array([r[1] for r in recs])
        clients.append(ClientDataset(i, X, y, C, np.flatnonzero(splits == "train"), np.flatnonzero(splits == "test")))
    return clients
