"""Real and synthetic datasets, procedural generators, IDX ingestion and ZCA."""
from __future__ import annotations

import gzip
import hashlib
import struct
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import _binio
from .diffmodels import LabeledBatch
from .errors import ContractError, FormatError, NumericError
from .rng import generator

__all__ = [
    "RealDataset",
    "SyntheticDataset",
    "ZcaTransform",
    "make_gaussian_mixture",
    "load_idx",
    "read_idx",
    "write_idx",
    "fit_zca",
    "apply_zca",
    "unapply_zca",
    "save_real_dataset",
    "load_real_dataset",
    "save_synthetic",
    "load_synthetic",
]

REAL_MAGIC = b"SATMRD01"
SYNTH_MAGIC = b"SATMDS01"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class RealDataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    id: str = ""

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if X.ndim != 2 or y.shape != (X.shape[0],):
            raise ContractError(f"features {X.shape} and labels {y.shape} do not line up")
        if not np.all(np.isfinite(X)):
            raise NumericError("dataset features contain non-finite entries")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise ContractError(f"labels must lie in [0, {self.num_classes})")
        if self.split not in ("train", "test"):
            raise ContractError(f"split must be 'train' or 'test', got {self.split!r}")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def classes_present(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.labels))

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def as_batch(self) -> LabeledBatch:
        return LabeledBatch(self.features, self.labels)

    def restrict(self, classes, suffix=None) -> "RealDataset":
        """Keep only samples whose label is in ``classes`` (label ids unchanged)."""
        mask = np.isin(self.labels, list(classes))
        tag = suffix or "classes=" + ",".join(str(c) for c in sorted(classes))
        return RealDataset(self.features[mask], self.labels[mask], self.num_classes,
                           self.split, f"{self.id}|{tag}")

    def with_features(self, features, id_suffix: str) -> "RealDataset":
        return RealDataset(features, self.labels, self.num_classes, self.split, self.id + id_suffix)


@dataclass(frozen=True)
class SyntheticDataset:
    """Learnable images (class-major, ``ipc`` rows per class) plus inner step size."""

    images: np.ndarray
    classes: tuple
    ipc: int
    inner_lr: float
    provenance: str = ""
    label: str = ""

    def __post_init__(self):
        images = np.array(self.images, dtype=np.float64)
        classes = tuple(int(c) for c in self.classes)
        if images.ndim != 2 or images.shape[0] != len(classes) * self.ipc:
            raise ContractError(
                f"images of shape {images.shape} do not hold {self.ipc} rows for each of {len(classes)} classes"
            )
        if not self.inner_lr > 0:
            raise ContractError(f"inner_lr must be positive, got {self.inner_lr}")
        images.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "classes", classes)
        object.__setattr__(self, "inner_lr", float(self.inner_lr))

    @property
    def labels(self) -> np.ndarray:
        return np.repeat(np.asarray(self.classes, dtype=np.int64), self.ipc)

    @property
    def d(self) -> int:
        return self.images.shape[1]

    @property
    def size(self) -> int:
        return self.images.shape[0]

    def batch(self, indices=None, images=None) -> LabeledBatch:
        X = self.images if images is None else images
        if indices is None:
            return LabeledBatch(X, self.labels)
        return LabeledBatch(X[indices], self.labels[indices])

    def with_images(self, images) -> "SyntheticDataset":
        return replace(self, images=images)

    def with_lr(self, inner_lr) -> "SyntheticDataset":
        return replace(self, inner_lr=inner_lr)

    def digest(self) -> str:
        h = hashlib.sha256(self.images.tobytes())
        h.update(struct.pack("<d", self.inner_lr))
        h.update(repr(self.classes).encode())
        return h.hexdigest()


def _mixture_means(C, d, separation):
    if C <= d:
        means = np.eye(C, d)
    else:
        # Fixed directions independent of the sample seed so all splits agree.
        raw = generator(0, "mixture_means", C, d).normal(size=(C, d))
        means = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    return separation * means


def make_gaussian_mixture(C, d, mean_separation, n_per_class, seed, split="train") -> RealDataset:
    """Unit-covariance Gaussian classes.

    Class ``c`` is centred at ``mean_separation * e_c`` when ``C <= d``
    (a scaled simplex), otherwise on fixed random unit directions.
    Samples are emitted class-major; train and test draw from disjoint
    seed streams keyed by ``split``.
    """
    if C < 2 or d < 2:
        raise ContractError(f"need C >= 2 and d >= 2, got C={C}, d={d}")
    if n_per_class < 1:
        raise ContractError("n_per_class must be >= 1")
    means = _mixture_means(C, d, float(mean_separation))
    rng = generator(seed, "gaussian_mixture", split)
    X = np.concatenate([means[c] + rng.normal(size=(n_per_class, d)) for c in range(C)])
    y = np.repeat(np.arange(C), n_per_class)
    ident = f"gmm(C={C},d={d},sep={float(mean_separation)!r},n={n_per_class},seed={seed},split={split})"
    return RealDataset(X, y, C, split, ident)


# IDX ----------------------------------------------------------------------

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def _read_bytes(path) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def read_idx(path, expected_magic: int) -> np.ndarray:
    """Parse an unsigned-byte IDX file into an array shaped by its header."""
    data = _read_bytes(path)
    if len(data) < 4:
        raise FormatError(f"{path}: too short for an IDX header")
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    end = 4 + 4 * ndim
    if len(data) < end:
        raise FormatError(f"{path}: truncated IDX dimension block")
    dims = struct.unpack(f">{ndim}I", data[4:end])
    count = int(np.prod(dims))
    if len(data) != end + count:
        raise FormatError(f"{path}: expected {count} payload bytes, found {len(data) - end}")
    return np.frombuffer(data, dtype=np.uint8, offset=end).reshape(dims)


def write_idx(path, array) -> None:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    head = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(head + array.tobytes())


def _block_average(images, side):
    n, h, w = images.shape
    if h % side or w % side:
        raise ContractError(f"cannot block-average {h}x{w} images down to {side}x{side}")
    fh, fw = h // side, w // side
    return images.reshape(n, side, fh, side, fw).mean(axis=(2, 4))


def load_idx(path_images, path_labels, limit_per_class=None, downscale_to=None,
             split="train") -> RealDataset:
    images = read_idx(path_images, IDX_IMAGES_MAGIC)
    labels = read_idx(path_labels, IDX_LABELS_MAGIC).astype(np.int64)
    if images.ndim != 3 or labels.ndim != 1 or images.shape[0] != labels.shape[0]:
        raise FormatError(f"image block {images.shape} and label block {labels.shape} disagree")
    C = int(labels.max()) + 1 if labels.size else 0
    keep = np.arange(labels.size)
    if limit_per_class is not None:
        seen = np.zeros(C, dtype=np.int64)
        chosen = []
        for i, c in enumerate(labels):
            if seen[c] < limit_per_class:
                seen[c] += 1
                chosen.append(i)
        keep = np.asarray(chosen, dtype=np.int64)
    X = images[keep].astype(np.float64) / 255.0
    if downscale_to is not None:
        X = _block_average(X, int(downscale_to))
    X = X.reshape(X.shape[0], -1)
    ident = f"idx({Path(path_images).name},limit={limit_per_class},side={downscale_to})"
    return RealDataset(X, labels[keep], max(C, 2), split, ident)


# ZCA ----------------------------------------------------------------------

@dataclass(frozen=True)
class ZcaTransform:
    mean: np.ndarray
    whitening: np.ndarray
    eps: float
    eigenvalues: np.ndarray = field(repr=False)
    eigenvectors: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "whitening": self.whitening.tolist(),
            "eps": self.eps,
            "eigenvalues": self.eigenvalues.tolist(),
            "eigenvectors": self.eigenvectors.tolist(),
        }

    @classmethod
    def from_dict(cls, data) -> "ZcaTransform":
        return cls(np.asarray(data["mean"]), np.asarray(data["whitening"]), float(data["eps"]),
                   np.asarray(data["eigenvalues"]), np.asarray(data["eigenvectors"]))


def fit_zca(dataset, eps=1e-6) -> ZcaTransform:
    """Fit ``W = U (L + eps I)^(-1/2) U^T`` on the centred population covariance."""
    X = dataset.features if isinstance(dataset, RealDataset) else np.asarray(dataset, dtype=np.float64)
    if eps < 0:
        raise ContractError("eps must be >= 0")
    n, d = X.shape
    if n <= d:
        warnings.warn(f"fitting ZCA with n={n} <= d={d}; covariance is singular", stacklevel=2)
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / n
    lam, U = np.linalg.eigh(cov)
    if not np.all(np.isfinite(lam)):
        raise NumericError("covariance eigenvalues are not finite")
    lam = np.clip(lam, 0.0, None)
    if np.any(lam + eps <= 0):
        raise NumericError("covariance is singular and eps is 0")
    W = (U * (lam + eps) ** -0.5) @ U.T
    W = 0.5 * (W + W.T)
    return ZcaTransform(mean, W, float(eps), lam, U)


def apply_zca(transform: ZcaTransform, features) -> np.ndarray:
    return (np.asarray(features, dtype=np.float64) - transform.mean) @ transform.whitening


def unapply_zca(transform: ZcaTransform, features) -> np.ndarray:
    lam, U = transform.eigenvalues, transform.eigenvectors
    inverse = (U * (lam + transform.eps) ** 0.5) @ U.T
    return np.asarray(features, dtype=np.float64) @ inverse + transform.mean


# File formats ---------------------------------------------------------------

def save_real_dataset(dataset: RealDataset, path) -> None:
    header = {
        "format_version": FORMAT_VERSION,
        "id": dataset.id,
        "split": dataset.split,
        "num_classes": dataset.num_classes,
        "n": dataset.n,
        "d": dataset.d,
    }
    arrays = [dataset.features, dataset.labels.astype(np.float64)]
    Path(path).write_bytes(_binio.encode_file(REAL_MAGIC, header, arrays))


def load_real_dataset(path) -> RealDataset:
    what = str(path)
    reader = _binio.Reader(Path(path).read_bytes(), what)
    reader.magic(REAL_MAGIC)
    header = reader.header(FORMAT_VERSION)
    n = int(_binio.header_field(header, "n", what))
    d = int(_binio.header_field(header, "d", what))
    X = reader.array(n * d).reshape(n, d)
    y = reader.array(n).astype(np.int64)
    reader.finish()
    try:
        return RealDataset(X, y, int(header["num_classes"]), header.get("split", "train"), header.get("id", ""))
    except (ContractError, KeyError) as exc:
        raise FormatError(f"{what}: inconsistent contents ({exc})") from None


def save_synthetic(dataset: SyntheticDataset, path) -> None:
    header = {
        "format_version": FORMAT_VERSION,
        "ipc": dataset.ipc,
        "classes": list(dataset.classes),
        "d": dataset.d,
        "alpha": dataset.inner_lr,
        "provenance": dataset.provenance,
        "label": dataset.label,
    }
    blocks = [dataset.images[k * dataset.ipc:(k + 1) * dataset.ipc] for k in range(len(dataset.classes))]
    Path(path).write_bytes(_binio.encode_file(SYNTH_MAGIC, header, blocks))


def load_synthetic(path) -> SyntheticDataset:
    what = str(path)
    reader = _binio.Reader(Path(path).read_bytes(), what)
    reader.magic(SYNTH_MAGIC)
    header = reader.header(FORMAT_VERSION)
    ipc = int(_binio.header_field(header, "ipc", what))
    d = int(_binio.header_field(header, "d", what))
    classes = _binio.header_field(header, "classes", what)
    blocks = [reader.array(ipc * d).reshape(ipc, d) for _ in classes]
    reader.finish()
    try:
        return SyntheticDataset(np.concatenate(blocks) if blocks else np.zeros((0, d)),
                                tuple(classes), ipc, float(header["alpha"]),
                                header.get("provenance", ""), header.get("label", ""))
    except (ContractError, KeyError, TypeError) as exc:
        raise FormatError(f"{what}: inconsistent contents ({exc})") from None
