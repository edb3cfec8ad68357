"""Datasets and simulated user populations.

A *style* is the user-independent class of a sample (digit or voice). A user
of sub-population ``k`` labels samples of style ``k`` positive and every
other style negative, so the same image carries opposite labels for
different users.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigurationError, IngestionError
from .seeding import rng_for

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

MNIST_BALANCED = (0.1,) * 10
MNIST_IMBALANCED = (0.25, 0.15) + (0.10,) * 4 + (0.05,) * 4


@dataclass(frozen=True)
class StyledSample:
    input: np.ndarray
    style: int


@dataclass
class StyledDataset:
    """Images (N, H, W) in [0, 1] with their style indices (N,)."""

    images: np.ndarray
    styles: np.ndarray

    def __len__(self):
        return len(self.styles)

    def __getitem__(self, i):
        return StyledSample(self.images[i], int(self.styles[i]))

    @property
    def num_styles(self):
        return int(self.styles.max()) + 1 if len(self.styles) else 0


# ---------------------------------------------------------------------------
# IDX files


def _read_bytes(path):
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".gz":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path, expected_magic=None):
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise IngestionError(f"{path}: truncated header at byte offset {len(raw)}")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic >> 16 != 0 or (magic >> 8) & 0xFF != 0x08:
        raise IngestionError(f"{path}: bad magic 0x{magic:08x} at byte offset 0 (expected unsigned-byte IDX)")
    if expected_magic is not None and magic != expected_magic:
        raise IngestionError(f"{path}: magic 0x{magic:08x} at byte offset 0, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IngestionError(f"{path}: truncated dimension header at byte offset {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) < header + size:
        raise IngestionError(
            f"{path}: truncated payload at byte offset {len(raw)}, need {header + size} bytes"
        )
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def write_idx(path, array):
    array = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">I", 0x0800 | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    payload = header + array.tobytes()
    path = Path(path)
    path.write_bytes(gzip.compress(payload, mtime=0) if path.suffix == ".gz" else payload)


def load_mnist_idx(images_path, labels_path) -> StyledDataset:
    images = read_idx(images_path, IMAGES_MAGIC)
    labels = read_idx(labels_path, LABELS_MAGIC)
    if len(images) != len(labels):
        raise IngestionError(f"{len(images)} images but {len(labels)} labels")
    return StyledDataset(images.astype(np.float64) / 255.0, labels.astype(np.int64))


MNIST_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")


def find_mnist(directory):
    """Locate the training image/label files (optionally gzipped) in ``directory``."""
    directory = Path(directory)
    found = []
    for stem in MNIST_FILES:
        for cand in (directory / stem, directory / f"{stem}.gz"):
            if cand.exists():
                found.append(cand)
                break
        else:
            raise ConfigurationError(f"{stem}[.gz] not found in {directory}")
    return tuple(found)


# ---------------------------------------------------------------------------
# synthetic interpolated styles


def _base_images(n, side, rng, smooth=1.5):
    out = []
    for _ in range(n):
        img = gaussian_filter(rng.normal(size=(side, side)), smooth, mode="wrap")
        img = (img - img.min()) / (img.max() - img.min())
        out.append(img)
    return np.stack(out)


def interpolation_weights(n_base_styles, K):
    """(K, n_base) convex weights walking round the cycle of base styles.

    Style ``j`` sits at position ``j * n_base / K`` and mixes the two bases on
    either side, so neighbouring styles share a source.
    """
    w = np.zeros((K, n_base_styles))
    for j in range(K):
        t = j * n_base_styles / K
        a = int(np.floor(t)) % n_base_styles
        frac = t - np.floor(t)
        w[j, a] += 1.0 - frac
        w[j, (a + 1) % n_base_styles] += frac
    return w


def gen_interpolated_dataset(n_base_styles, K, samples_per_style, noise_scale, seed, side=28):
    if n_base_styles < 2 or K < n_base_styles:
        raise ConfigurationError("need K >= n_base_styles >= 2")
    if samples_per_style < 1 or noise_scale < 0:
        raise ConfigurationError("samples_per_style must be >= 1 and noise_scale >= 0")
    rng = rng_for(seed, "synthetic-data")
    bases = _base_images(n_base_styles, side, rng)
    protos = np.einsum("kb,bhw->khw", interpolation_weights(n_base_styles, K), bases)
    styles = np.repeat(np.arange(K), samples_per_style)
    images = protos[styles] + noise_scale * rng.normal(size=(len(styles), side, side))
    return StyledDataset(np.clip(images, 0.0, 1.0), styles)


# ---------------------------------------------------------------------------
# populations


@dataclass(frozen=True)
class PopulationSpec:
    K: int
    proportions: tuple
    total_users: int
    train_per_user: int = 20
    test_per_user: int = 10
    seed: int = 0


@dataclass
class UserDataset:
    """Indices into a :class:`StyledDataset` plus the user's preference labels."""

    train_idx: np.ndarray
    train_y: np.ndarray
    test_idx: np.ndarray
    test_y: np.ndarray


@dataclass
class UserRecord:
    user_id: int
    subpop: int
    data: UserDataset


def largest_remainder(proportions, total):
    p = np.asarray(proportions, dtype=np.float64)
    raw = p * total
    counts = np.floor(raw).astype(int)
    rest = total - counts.sum()
    order = sorted(range(len(p)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:rest]:
        counts[i] += 1
    return counts


def subpop_counts(spec: PopulationSpec):
    if len(spec.proportions) != spec.K:
        raise ConfigurationError(f"{len(spec.proportions)} proportions for K={spec.K}")
    if abs(sum(spec.proportions) - 1.0) > 1e-9:
        raise ConfigurationError(f"proportions sum to {sum(spec.proportions)}, not 1")
    counts = largest_remainder(spec.proportions, spec.total_users)
    if np.any(counts < 1):
        raise ConfigurationError(f"sub-population sizes {counts.tolist()} leave a group empty")
    return counts


def build_population(samples: StyledDataset, spec: PopulationSpec):
    """Simulated users with balanced positive/negative train and test splits.

    Users are numbered consecutively by sub-population. Samples are drawn
    without replacement inside a user and with replacement across users.
    """
    if spec.train_per_user % 2 or spec.test_per_user % 2:
        raise ConfigurationError("per-user split sizes must be even for a 50/50 label balance")
    counts = subpop_counts(spec)
    pools = [np.flatnonzero(samples.styles == k) for k in range(spec.K)]
    empty = [k for k, pool in enumerate(pools) if len(pool) == 0]
    if empty:
        raise ConfigurationError(f"styles {empty} have no samples")
    n_pos = (spec.train_per_user + spec.test_per_user) // 2
    users = []
    uid = 0
    for k, count in enumerate(counts):
        others = [j for j in range(spec.K) if j != k]
        for _ in range(count):
            rng = rng_for(spec.seed, "population", uid)
            pos = rng.choice(pools[k], size=n_pos, replace=len(pools[k]) < n_pos)
            neg_styles = rng.choice(others, size=n_pos)
            neg = np.empty(n_pos, dtype=np.int64)
            for s in np.unique(neg_styles):
                slots = np.flatnonzero(neg_styles == s)
                neg[slots] = rng.choice(pools[s], size=len(slots), replace=len(pools[s]) < len(slots))
            tr, te = spec.train_per_user // 2, spec.test_per_user // 2
            train_idx = np.concatenate([pos[:tr], neg[:tr]])
            test_idx = np.concatenate([pos[tr:], neg[tr:]])
            label = np.concatenate([np.ones(tr, np.int64), np.zeros(tr, np.int64)])
            test_label = np.concatenate([np.ones(te, np.int64), np.zeros(te, np.int64)])
            users.append(UserRecord(uid, k, UserDataset(train_idx, label, test_idx, test_label)))
            uid += 1
    return users


def holdout_eval_set(user: UserRecord, samples: StyledDataset):
    for i, y in zip(user.data.test_idx, user.data.test_y):
        yield samples.images[i], int(y)


def export_bundled_mnist(directory):
    """Write the 5,000-image MNIST subset shipped with ``mlxtend`` as IDX files.

    Returns the (images, labels) paths. Only needed when the full MNIST
    training files are not available locally.
    """
    from importlib.resources import files

    try:
        csv = files("mlxtend.data").joinpath("data/mnist_5k.csv.gz")
        raw = gzip.decompress(csv.read_bytes()).decode("ascii")
    except ModuleNotFoundError as exc:
        raise ConfigurationError("install mlxtend (pip install 'fedembed[mnist]') to export the bundled subset") from exc
    table = np.loadtxt(raw.splitlines(), delimiter=",", dtype=np.int64)
    images = table[:, :-1].reshape(-1, 28, 28)
    labels = table[:, -1]
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = tuple(directory / f"{stem}.gz" for stem in MNIST_FILES)
    write_idx(paths[0], images)
    write_idx(paths[1], labels)
    return paths
