"""Synthetic image workloads, class-imbalance induction, Dirichlet client
partitioning and the balanced self-examination set.

Every randomized function is a pure function of its inputs and ``seed``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SAFEDS1"
PATCH = 6
NOISE_SIGMA = 0.3


@dataclass
class Dataset:
    images: np.ndarray  # N×C×H×W float64
    labels: np.ndarray  # N int64
    num_classes: int
    ids: np.ndarray | None = None  # stable sample identifiers, used for disjointness checks

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.ids is None:
            self.ids = np.arange(len(self.labels))
        if len(self.images) != len(self.labels) or len(self.ids) != len(self.labels):
            raise ValueError("images, labels and ids differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label outside [0, num_classes)")

    def __len__(self) -> int:
        return len(self.labels)

    def histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.ids[idx])


@dataclass
class Shard:
    client_id: int
    dataset: Dataset
    access_log: list = field(default_factory=list, repr=False)

    @property
    def dis(self) -> np.ndarray:
        return self.dataset.histogram()

    def read(self, reader) -> Dataset:
        """Return the samples, recording who asked."""
        self.access_log.append(reader)
        return self.dataset


@dataclass
class SesSet:
    images: np.ndarray
    labels: np.ndarray
    per_class: int
    ids: np.ndarray

    def histogram(self, num_classes: int) -> np.ndarray:
        return np.bincount(self.labels, minlength=num_classes)


@dataclass(frozen=True)
class DataConfig:
    num_classes: int = 8
    samples_per_class: int = 128
    imbalance_ratio: float = 10.0
    dirichlet_alpha: float = 0.5
    num_clients: int = 5
    ses_per_class: int = 8
    image_size: int = 16
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.imbalance_ratio < 1:
            raise ValueError("imbalance_ratio must be >= 1")
        if not self.dirichlet_alpha > 0:
            raise ValueError("dirichlet_alpha must be > 0")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")


# ---------------------------------------------------------------- templates

def _disc(r):
    yy, xx = np.mgrid[:PATCH, :PATCH] - (PATCH - 1) / 2
    return (yy ** 2 + xx ** 2 <= r ** 2).astype(float)


def _templates() -> list[np.ndarray]:
    z = lambda: np.zeros((PATCH, PATCH))  # noqa: E731
    t = []
    t.append(_disc(2.9))  # filled disc
    t.append(np.eye(PATCH))  # diagonal line
    a = z(); a[2:4, :] = 1; t.append(a)  # horizontal bar
    a = z(); a[:, 2:4] = 1; t.append(a)  # vertical bar
    t.append(np.fliplr(np.eye(PATCH)))  # anti-diagonal
    t.append(_disc(2.9) - _disc(1.6))  # ring
    a = z(); a[2:4, :] = 1; a[:, 2:4] = 1; t.append(a)  # plus
    a = z(); a[:, 0] = 1; a[-1, :] = 1; t.append(a)  # L corner
    t.append(np.clip(np.eye(PATCH) + np.fliplr(np.eye(PATCH)), 0, 1))  # X
    t.append((np.indices((PATCH, PATCH)).sum(axis=0) % 2).astype(float))  # checker
    a = np.ones((PATCH, PATCH)); a[1:-1, 1:-1] = 0; t.append(a)  # square outline
    a = z(); a[0, :] = 1; a[:, 2:4] = 1; t.append(a)  # T
    a = z(); a[1:4, 1:4] = 1; t.append(a)  # small square
    a = z(); a[0:2, 0:2] = 1; a[4:6, 4:6] = 1; t.append(a)  # two dots
    t.append(np.tril(np.ones((PATCH, PATCH))))  # triangle
    a = z(); a[:, 0] = 1; a[:, -1] = 1; a[-1, :] = 1; t.append(a)  # U
    a = z(); a[:, 0] = 1; a[:, -1] = 1; a[2:4, :] = 1; t.append(a)  # H
    a = z(); a[::2, :] = 1; t.append(a)  # stripes
    return t


TEMPLATES = _templates()


def generate_synthetic(cfg: DataConfig) -> Dataset:
    """``samples_per_class`` noisy images per class, each with one class template at a random spot."""
    j = cfg.num_classes
    if j > len(TEMPLATES):
        raise ValueError(f"{j} classes requested, only {len(TEMPLATES)} templates available")
    size = cfg.image_size
    if size < PATCH:
        raise ValueError(f"image_size must be >= {PATCH}")
    rng = np.random.default_rng([cfg.seed, 101])
    n = j * cfg.samples_per_class
    labels = np.repeat(np.arange(j), cfg.samples_per_class)
    images = rng.normal(0.0, NOISE_SIGMA, (n, 1, size, size))
    rows = rng.integers(0, size - PATCH + 1, n)
    cols = rng.integers(0, size - PATCH + 1, n)
    amp = rng.uniform(0.8, 1.2, n)
    for i in range(n):
        images[i, 0, rows[i]:rows[i] + PATCH, cols[i]:cols[i] + PATCH] += amp[i] * TEMPLATES[labels[i]]
    # float32-representable so the binary dump round-trips exactly
    images = images.astype(np.float32).astype(np.float64)
    return Dataset(images, labels, j)


def keep_counts(counts, ratio: float) -> np.ndarray:
    counts = np.asarray(counts)
    j = len(counts)
    n_max = counts.max()
    r = ratio ** (-np.arange(j) / max(j - 1, 1))
    # tolerance keeps exact products such as 100 * 0.1 from rounding up
    keep = np.ceil(n_max * r - 1e-9).astype(np.int64)
    return np.minimum(keep, counts)


def induce_imbalance(ds: Dataset, ratio: float, seed: int) -> Dataset:
    """Class j keeps ⌈n_max·ratio^(-j/(J-1))⌉ samples, chosen at random."""
    if ratio < 1:
        raise ValueError("ratio must be >= 1")
    keep = keep_counts(ds.histogram(), ratio)
    if np.any(keep < 1):
        raise ValueError(f"imbalance leaves an empty class: {keep.tolist()}")
    rng = np.random.default_rng([seed, 202])
    chosen = []
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        chosen.append(np.sort(rng.choice(idx, keep[c], replace=False)))
    return ds.subset(np.sort(np.concatenate(chosen)))


def _largest_remainder(props: np.ndarray, total: int) -> np.ndarray:
    raw = props * total
    base = np.floor(raw).astype(np.int64)
    short = total - base.sum()
    order = np.argsort(-(raw - base), kind="stable")
    base[order[:short]] += 1
    return base


def dirichlet_partition(ds: Dataset, num_clients: int, alpha: float, seed: int, min_size: int = 1,
                        max_retries: int = 10) -> list[Shard]:
    """Split every class across clients with Dirichlet(alpha) proportions."""
    if num_clients < 1:
        raise ValueError("num_clients must be >= 1")
    if not alpha > 0:
        raise ValueError("alpha must be > 0")
    for attempt in range(max_retries + 1):
        rng = np.random.default_rng([seed, 303, attempt])
        assign = [[] for _ in range(num_clients)]
        for c in range(ds.num_classes):
            idx = rng.permutation(np.flatnonzero(ds.labels == c))
            counts = _largest_remainder(rng.dirichlet(np.full(num_clients, alpha)), len(idx))
            start = 0
            for k, cnt in enumerate(counts):
                assign[k].extend(idx[start:start + cnt].tolist())
                start += cnt
        if min(len(a) for a in assign) >= min_size:
            return [Shard(k, ds.subset(np.sort(a))) for k, a in enumerate(assign)]
    raise RuntimeError(f"a client shard stayed below {min_size} samples after {max_retries} retries")


def reserve_ses(ds: Dataset, per_class: int, seed: int) -> tuple[SesSet, Dataset]:
    """Hold out ``per_class`` random samples of every class; return them and the remainder."""
    hist = ds.histogram()
    if np.any(hist <= per_class):
        raise ValueError(f"every class needs more than {per_class} samples, histogram {hist.tolist()}")
    rng = np.random.default_rng([seed, 404])
    picked = np.concatenate([np.sort(rng.choice(np.flatnonzero(ds.labels == c), per_class, replace=False))
                             for c in range(ds.num_classes)])
    rest = np.setdiff1d(np.arange(len(ds)), picked)
    return SesSet(ds.images[picked], ds.labels[picked], per_class, ds.ids[picked]), ds.subset(rest)


def train_test_split(ds: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    n = len(ds)
    n_test = 0 if n < 2 else max(1, int(round(test_fraction * n)))
    perm = np.random.default_rng(seed).permutation(n)
    return ds.subset(np.sort(perm[n_test:])), ds.subset(np.sort(perm[:n_test]))


@dataclass
class Workload:
    ses: SesSet
    shards: list[Shard]  # training portions, one per client
    tests: list[Dataset]  # held-out portions, one per client
    num_classes: int

    def train_counts(self) -> np.ndarray:
        return np.sum([s.dataset.histogram() for s in self.shards], axis=0)

    def cloud_test(self) -> Dataset:
        return Dataset(np.concatenate([t.images for t in self.tests]),
                       np.concatenate([t.labels for t in self.tests]), self.num_classes,
                       np.concatenate([t.ids for t in self.tests]))


def partition_pipeline(cfg: DataConfig) -> tuple[SesSet, Dataset, list[Shard]]:
    """generate → reserve SES → induce imbalance → Dirichlet partition."""
    full = generate_synthetic(cfg)
    ses, rest = reserve_ses(full, cfg.ses_per_class, cfg.seed)
    imbalanced = induce_imbalance(rest, cfg.imbalance_ratio, cfg.seed)
    # two samples per client guarantee a non-empty training and test portion
    parts = dirichlet_partition(imbalanced, cfg.num_clients, cfg.dirichlet_alpha, cfg.seed, min_size=2)
    return ses, imbalanced, parts


def build_workload(cfg: DataConfig) -> Workload:
    """The partition pipeline followed by a per-client train/test split."""
    ses, _, parts = partition_pipeline(cfg)
    shards, tests = [], []
    for part in parts:
        train, test = train_test_split(part.dataset, cfg.test_fraction, np.random.SeedSequence([cfg.seed, 505, part.client_id]))
        shards.append(Shard(part.client_id, train))
        tests.append(test)
    return Workload(ses, shards, tests, cfg.num_classes)


# ---------------------------------------------------------------- binary format

def dump_dataset(ds: Dataset, path) -> None:
    """Header (magic, J, N, C, H, W as int32 LE), int32 labels, float32 pixels."""
    n, c, h, w = ds.images.shape
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<5i", ds.num_classes, n, c, h, w))
        f.write(ds.labels.astype("<i4").tobytes())
        f.write(ds.images.astype("<f4").tobytes())


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a SAFEDS1 file")
    off = len(MAGIC)
    j, n, c, h, w = struct.unpack_from("<5i", raw, off)
    off += 20
    expected = off + 4 * n + 4 * n * c * h * w
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    labels = np.frombuffer(raw, "<i4", n, off).astype(np.int64)
    off += 4 * n
    images = np.frombuffer(raw, "<f4", n * c * h * w, off).astype(np.float64).reshape(n, c, h, w)
    return Dataset(images, labels, j)
