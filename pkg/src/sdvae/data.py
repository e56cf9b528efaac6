"""Datasets: IDX (MNIST) files, threshold binarization and the synthetic
template set used for desk-scale experiments."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import latent_means, reconstruct

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049

# IDX type codes (third header byte) we understand
_IDX_DTYPES = {
    0x08: np.dtype(np.uint8),
    0x09: np.dtype(np.int8),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {v: k for k, v in _IDX_DTYPES.items()}


class IDXError(ValueError):
    def __init__(self, path, offset: int, message: str):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{path}: byte {offset}: {message}")


@dataclass(frozen=True)
class Dataset:
    """Images in [0, 1] as an (n, dim_x) matrix, plus optional labels.

    ``labels`` is None for pools whose labels are hidden from training.
    """

    images: np.ndarray
    labels: np.ndarray | None
    k: int
    name: str = "dataset"
    image_shape: tuple[int, int] | None = None

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        if images.ndim != 2:
            raise ValueError(f"images must be (n, dim_x), got shape {images.shape}")
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        images.setflags(write=False)
        object.__setattr__(self, "images", images)
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64)
            if labels.shape != (images.shape[0],):
                raise ValueError(f"expected {images.shape[0]} labels, got shape {labels.shape}")
            if labels.size and (labels.min() < 0 or labels.max() >= self.k):
                raise ValueError(f"labels must lie in [0, {self.k})")
            labels.setflags(write=False)
            object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def dim_x(self) -> int:
        return self.images.shape[1]

    def subset(self, index, name: str | None = None, hide_labels: bool = False) -> "Dataset":
        index = np.asarray(index, dtype=np.intp)
        labels = None if hide_labels or self.labels is None else self.labels[index]
        return Dataset(self.images[index], labels, self.k, name or self.name, self.image_shape)

    def one_hot(self) -> np.ndarray:
        if self.labels is None:
            raise ValueError(f"{self.name} has no labels")
        return np.eye(self.k)[self.labels]


# ------------------------------------------------------------------- IDX I/O


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def parse_idx(buf: bytes, path="<bytes>", expect_magic: int | None = None) -> np.ndarray:
    if len(buf) < 4:
        raise IDXError(path, 0, f"truncated header: {len(buf)} bytes, need 4")
    zero, code, ndim = struct.unpack(">HBB", buf[:4])
    magic = struct.unpack(">i", buf[:4])[0]
    if zero != 0 or code not in _IDX_DTYPES or ndim == 0:
        raise IDXError(path, 0, f"bad magic number {magic:#010x}")
    if expect_magic is not None and magic != expect_magic:
        raise IDXError(path, 0, f"magic number {magic} where {expect_magic} was expected")
    header_end = 4 + 4 * ndim
    if len(buf) < header_end:
        raise IDXError(path, 4, f"truncated dimension table: need {4 * ndim} bytes")
    dims = struct.unpack(f">{ndim}I", buf[4:header_end])
    dtype = _IDX_DTYPES[code]
    need = int(np.prod(dims)) * dtype.itemsize
    have = len(buf) - header_end
    if have < need:
        raise IDXError(path, header_end + have, f"truncated data: {have} of {need} bytes present")
    if have > need:
        raise IDXError(path, header_end + need, f"{have - need} trailing bytes after data")
    return np.frombuffer(buf, dtype=dtype, offset=header_end).reshape(dims)


def read_idx(path, expect_magic: int | None = None) -> np.ndarray:
    return parse_idx(_read_bytes(path), path, expect_magic)


def serialize_idx(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    dtype = array.dtype.newbyteorder(">") if array.dtype.itemsize > 1 else array.dtype
    if dtype not in _IDX_CODES:
        raise ValueError(f"dtype {array.dtype} has no IDX type code")
    header = struct.pack(">HBB", 0, _IDX_CODES[dtype], array.ndim)
    header += struct.pack(f">{array.ndim}I", *array.shape)
    return header + np.ascontiguousarray(array, dtype=dtype).tobytes()


def write_idx(path, array: np.ndarray) -> None:
    Path(path).write_bytes(serialize_idx(array))


def load_idx(images_path, labels_path, name: str = "idx", k: int | None = None) -> Dataset:
    """Read an IDX image/label file pair; pixels are scaled from bytes to [0, 1].

    ``k`` defaults to one more than the largest label present.
    """
    raw = read_idx(images_path, IMAGE_MAGIC)
    labels = read_idx(labels_path, LABEL_MAGIC)
    if raw.dtype != np.uint8 or labels.dtype != np.uint8:
        raise IDXError(images_path, 2, "expected unsigned-byte IDX data")
    if raw.shape[0] != labels.shape[0]:
        raise IDXError(labels_path, 4, f"{labels.shape[0]} labels for {raw.shape[0]} images")
    n, rows, cols = raw.shape
    if k is None:
        k = int(labels.max()) + 1 if labels.size else 1
    return Dataset(raw.reshape(n, rows * cols) / 255.0, labels.astype(np.int64), k, name, (rows, cols))


def dataset_to_idx(d: Dataset) -> tuple[bytes, bytes]:
    """Inverse of :func:`load_idx` for byte-valued datasets."""
    if d.labels is None or d.image_shape is None:
        raise ValueError("need labels and image_shape to write IDX")
    raw = np.rint(d.images * 255.0).astype(np.uint8).reshape(len(d), *d.image_shape)
    return serialize_idx(raw), serialize_idx(d.labels.astype(np.uint8))


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def find_mnist(root=None) -> Path | None:
    """Directory holding the four MNIST files (optionally gzipped), or None.

    Looks at ``root``, then ``$SDVAE_MNIST_DIR``.
    """
    for cand in (root, os.environ.get("SDVAE_MNIST_DIR")):
        if not cand:
            continue
        cand = Path(cand)
        if all(_mnist_file(cand, f) is not None for pair in MNIST_FILES.values() for f in pair):
            return cand
    return None


def _mnist_file(root: Path, stem: str) -> Path | None:
    for name in (stem, stem + ".gz"):
        if (root / name).exists():
            return root / name
    return None


def load_mnist(root) -> tuple[Dataset, Dataset]:
    root = Path(root)
    out = []
    for split, (img, lab) in MNIST_FILES.items():
        ip, lp = _mnist_file(root, img), _mnist_file(root, lab)
        if ip is None or lp is None:
            raise FileNotFoundError(f"MNIST {split} files not found under {root}")
        out.append(load_idx(ip, lp, name=f"mnist-{split}", k=10))
    return out[0], out[1]


def binarize(d: Dataset, threshold: float = 0.5) -> Dataset:
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    return Dataset((d.images > threshold).astype(np.float64), d.labels, d.k, d.name, d.image_shape)


# ------------------------------------------------------------------ synthetic


@dataclass(frozen=True)
class SyntheticSpec:
    k: int = 4
    side: int = 8
    corruption: float = 0.1
    n_train: int = 2000
    n_test: int = 500
    seed: int = 0
    min_hamming: int = 8
    templates: np.ndarray | None = field(default=None, compare=False, repr=False)


def make_templates(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    dim = spec.side * spec.side
    if spec.templates is not None:
        templates = np.asarray(spec.templates, dtype=np.float64).reshape(spec.k, dim)
    else:
        templates = np.empty((0, dim))
        tries = 0
        while templates.shape[0] < spec.k:
            tries += 1
            if tries > 10000:
                raise RuntimeError("could not draw templates with the requested separation")
            cand = (rng.random(dim) < 0.5).astype(np.float64)
            if templates.shape[0] and np.abs(templates - cand).sum(axis=1).min() < spec.min_hamming:
                continue
            templates = np.vstack([templates, cand])
    dist = np.abs(templates[:, None, :] - templates[None, :, :]).sum(axis=2)
    off = dist[~np.eye(spec.k, dtype=bool)]
    if off.size and off.min() < spec.min_hamming:
        raise ValueError(f"templates closer than {spec.min_hamming} pixels")
    return templates


def make_synthetic(spec: SyntheticSpec = SyntheticSpec()) -> tuple[Dataset, Dataset]:
    """Class templates with every pixel flipped independently at ``corruption``."""
    rng = np.random.default_rng(spec.seed)
    templates = make_templates(spec, rng)

    def draw(n, name):
        labels = rng.permutation(np.arange(n) % spec.k)
        flips = rng.random((n, templates.shape[1])) < spec.corruption
        images = np.abs(templates[labels] - flips)
        return Dataset(images, labels, spec.k, name, (spec.side, spec.side))

    return draw(spec.n_train, "synthetic-train"), draw(spec.n_test, "synthetic-test")


def synthetic_templates(spec: SyntheticSpec) -> np.ndarray:
    return make_templates(spec, np.random.default_rng(spec.seed))


def nearest_template_predict(images: np.ndarray, templates: np.ndarray) -> np.ndarray:
    dist = np.abs(images[:, None, :] - templates[None, :, :]).sum(axis=2)
    return dist.argmin(axis=1)


# -------------------------------------------------------------------- export


def _fmt(values: np.ndarray) -> list[str]:
    return [repr(float(v)) for v in values]


def export_latents(params, dataset: Dataset, path) -> None:
    """One CSV row per example: label, the K entries of q(v|x), the mean of q(u|x).

    Unknown labels are written as -1.
    """
    probs, u_mean = latent_means(params, dataset.images)
    k, dim_u = probs.shape[1], u_mean.shape[1]
    labels = dataset.labels if dataset.labels is not None else np.full(len(dataset), -1)
    header = ["label"] + [f"v{i}" for i in range(k)] + [f"u{i}" for i in range(dim_u)]
    with open(path, "w") as f:
        f.write(",".join(header) + "\n")
        for lab, p, u in zip(labels, probs, u_mean):
            f.write(",".join([str(int(lab))] + _fmt(p) + _fmt(u)) + "\n")


def read_latents(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(labels, v columns, u columns) from an :func:`export_latents` file."""
    with open(path) as f:
        header = f.readline().strip().split(",")
    table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    v_cols = [i for i, h in enumerate(header) if h.startswith("v")]
    u_cols = [i for i, h in enumerate(header) if h.startswith("u")]
    return table[:, 0].astype(np.int64), table[:, v_cols], table[:, u_cols]


def export_reconstructions(params, dataset: Dataset, mask: str, path) -> float:
    """Write pixel means (one row per example) after zeroing u, v or neither.

    Per-example reconstruction log-likelihoods go to ``<path>.re.csv``.
    Returns their mean.
    """
    means, re = reconstruct(params, dataset.images, mask)
    header = ",".join(f"x{i}" for i in range(means.shape[1]))
    with open(path, "w") as f:
        f.write(header + "\n")
        for row in means:
            f.write(",".join(_fmt(row)) + "\n")
    with open(f"{path}.re.csv", "w") as f:
        f.write("index,re,mask\n")
        for i, r in enumerate(re):
            f.write(f"{i},{float(r)!r},{mask}\n")
    return float(re.mean())
