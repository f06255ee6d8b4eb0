"""Benchmark task families.

Synthetic tasks start from a Gaussian-blob classification problem and derive
each task by an isometric input transform (random orthogonal map or feature
permutation) or by slicing the label set.  IDX image files (MNIST layout) can
stand in for the blobs.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .detrng import RandStream, derive_stream
from .errors import BadMagicError, CountMismatchError, TruncatedError

FAMILIES = ("rot-blobs", "perm-blobs", "split-blobs", "rot-idx", "perm-idx", "split-idx")

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

BLOB_RADIUS = 3.0


@dataclass
class Dataset:
    x_train: np.ndarray  # (n, d) float32
    y_train: np.ndarray  # (n,) int64
    x_test: np.ndarray
    y_test: np.ndarray
    mask: tuple  # labels valid for this task
    num_labels: int  # width of the shared output head
    name: str = ""

    def __post_init__(self):
        self.x_train = np.ascontiguousarray(self.x_train, dtype=np.float32)
        self.x_test = np.ascontiguousarray(self.x_test, dtype=np.float32)
        self.y_train = np.asarray(self.y_train, dtype=np.int64)
        self.y_test = np.asarray(self.y_test, dtype=np.int64)
        self.mask = tuple(int(m) for m in self.mask)
        allowed = set(self.mask)
        for y in (self.y_train, self.y_test):
            if not set(np.unique(y).tolist()) <= allowed:
                raise ValueError("label outside task mask")

    @property
    def d_in(self) -> int:
        return self.x_train.shape[1]

    @property
    def labels(self) -> tuple:
        return self.mask

    def with_inputs(self, x_train, x_test, name: str = "") -> "Dataset":
        return replace(self, x_train=x_train, x_test=x_test, name=name or self.name)


def _balanced_labels(n: int, num_labels: int, what: str) -> np.ndarray:
    if n % num_labels:
        raise ValueError(f"{what}={n} not divisible by num_labels={num_labels}")
    return np.repeat(np.arange(num_labels), n // num_labels)


def gen_blob_base(num_labels: int, dim: int, n_train: int, n_test: int,
                  noise_sigma: float, stream: RandStream) -> Dataset:
    """Balanced Gaussian blobs with class means on a sphere of radius 3."""
    if num_labels < 2 or dim < 2:
        raise ValueError("need num_labels >= 2 and dim >= 2")
    y_train = _balanced_labels(n_train, num_labels, "n_train")
    y_test = _balanced_labels(n_test, num_labels, "n_test")
    means = stream.gaussians(num_labels * dim).reshape(num_labels, dim)
    means *= BLOB_RADIUS / np.linalg.norm(means, axis=1, keepdims=True)
    noise_train = stream.gaussians(n_train * dim).reshape(n_train, dim)
    noise_test = stream.gaussians(n_test * dim).reshape(n_test, dim)
    return Dataset(
        x_train=means[y_train] + noise_sigma * noise_train,
        y_train=y_train,
        x_test=means[y_test] + noise_sigma * noise_test,
        y_test=y_test,
        mask=tuple(range(num_labels)),
        num_labels=num_labels,
        name="blobs",
    )


def random_orthogonal(dim: int, stream: RandStream) -> np.ndarray:
    """Haar-distributed orthogonal matrix from QR of a Gaussian matrix."""
    g = stream.gaussians(dim * dim).reshape(dim, dim)
    q, r = np.linalg.qr(g)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


def apply_orthogonal(base: Dataset, q: np.ndarray, name: str = "") -> Dataset:
    q = np.asarray(q, dtype=np.float64)
    return base.with_inputs(base.x_train.astype(np.float64) @ q.T,
                            base.x_test.astype(np.float64) @ q.T, name)


def rotate_variant(base: Dataset, stream: RandStream) -> Dataset:
    return apply_orthogonal(base, random_orthogonal(base.d_in, stream), base.name + "+rot")


def apply_permutation(base: Dataset, perm: Sequence[int], name: str = "") -> Dataset:
    perm = np.asarray(perm, dtype=np.int64)
    if sorted(perm.tolist()) != list(range(base.d_in)):
        raise ValueError("not a permutation of the feature indices")
    return base.with_inputs(base.x_train[:, perm], base.x_test[:, perm], name)


def permute_variant(base: Dataset, stream: RandStream) -> Dataset:
    return apply_permutation(base, stream.shuffle(base.d_in), base.name + "+perm")


def rotate_images(base: Dataset, angle_deg: float, shape: tuple[int, int]) -> Dataset:
    """Planar rotation of flattened row-major images (IDX families)."""
    from scipy.ndimage import rotate

    def rot(x):
        imgs = x.reshape(-1, *shape)
        out = rotate(imgs, angle_deg, axes=(1, 2), reshape=False, order=1, mode="constant")
        return out.reshape(len(x), -1)

    return base.with_inputs(rot(base.x_train), rot(base.x_test), f"{base.name}+rot{angle_deg:.1f}")


def split_tasks(base: Dataset, labels_per_task: int) -> list[Dataset]:
    """Partition the label set into consecutive slices, one task per slice."""
    labels = list(base.mask)
    if labels_per_task < 1 or len(labels) % labels_per_task:
        raise ValueError(f"{len(labels)} labels cannot be split into groups of {labels_per_task}")
    tasks = []
    for k in range(len(labels) // labels_per_task):
        part = labels[k * labels_per_task:(k + 1) * labels_per_task]
        tr = np.isin(base.y_train, part)
        te = np.isin(base.y_test, part)
        tasks.append(Dataset(base.x_train[tr], base.y_train[tr], base.x_test[te], base.y_test[te],
                             mask=tuple(part), num_labels=base.num_labels,
                             name=f"{base.name}:split{k + 1}"))
    return tasks


# IDX ------------------------------------------------------------------------

def _read_idx(path: str, magic: int, ndim: int):
    with open(path, "rb") as fh:
        raw = fh.read()
    header = 4 + 4 * ndim
    if len(raw) < 4:
        raise TruncatedError(f"{path}: truncated header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise BadMagicError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    if len(raw) < header:
        raise TruncatedError(f"{path}: truncated header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    size = math.prod(dims)
    if len(raw) - header < size:
        raise TruncatedError(f"{path}: truncated payload ({len(raw) - header} < {size} bytes)")
    data = np.frombuffer(raw, dtype=np.uint8, count=size, offset=header)
    return dims, data


def load_idx(images_path: str, labels_path: str) -> tuple[np.ndarray, np.ndarray, tuple[int, int]]:
    """Read one IDX image/label pair; returns (x in [0,1] flattened, y, (rows, cols))."""
    (count, rows, cols), pix = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    (n_labels,), labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if count != n_labels:
        raise CountMismatchError(f"count mismatch: {count} images vs {n_labels} labels")
    x = pix.reshape(count, rows * cols).astype(np.float32) / 255.0
    return x, labels.astype(np.int64), (rows, cols)


def write_idx(images_path: str, labels_path: str, images: np.ndarray, labels: np.ndarray):
    """Write uint8 images (n, rows, cols) and labels in IDX layout."""
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        fh.write(np.asarray(labels, dtype=np.uint8).tobytes())


# benchmarks -----------------------------------------------------------------

@dataclass
class BenchmarkSpec:
    family: str = "perm-blobs"
    num_tasks: int = 5
    num_labels: int = 10
    dim: int = 32
    n_train: int = 1000
    n_test: int = 500
    noise_sigma: float = 0.6
    seed: int = 0
    labels_per_task: int = 2
    # IDX families only
    idx_train_images: Optional[str] = None
    idx_train_labels: Optional[str] = None
    idx_test_images: Optional[str] = None
    idx_test_labels: Optional[str] = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown benchmark family {self.family!r}; choose from {FAMILIES}")
        if self.num_tasks < 1:
            raise ValueError("num_tasks must be >= 1")
        if self.family.endswith("-idx"):
            paths = (self.idx_train_images, self.idx_train_labels,
                     self.idx_test_images, self.idx_test_labels)
            if any(p is None for p in paths):
                raise ValueError(f"{self.family} needs all four idx_* paths")

    def to_dict(self) -> dict:
        return asdict(self)


def _stream(spec: BenchmarkSpec, *labels) -> RandStream:
    return derive_stream(spec.seed, ["bench", spec.family, *labels])


def _idx_base(spec: BenchmarkSpec):
    x_tr, y_tr, shape = load_idx(spec.idx_train_images, spec.idx_train_labels)
    x_te, y_te, _ = load_idx(spec.idx_test_images, spec.idx_test_labels)
    num_labels = int(max(y_tr.max(), y_te.max())) + 1
    # subsample to the requested desk-scale sizes
    if spec.n_train < len(x_tr):
        keep = np.sort(_stream(spec, "subsample", "train").sample_k(len(x_tr), spec.n_train))
        x_tr, y_tr = x_tr[keep], y_tr[keep]
    if spec.n_test < len(x_te):
        keep = np.sort(_stream(spec, "subsample", "test").sample_k(len(x_te), spec.n_test))
        x_te, y_te = x_te[keep], y_te[keep]
    base = Dataset(x_tr, y_tr, x_te, y_te, tuple(range(num_labels)), num_labels, "idx")
    return base, shape


def build_benchmark(spec: BenchmarkSpec) -> dict[int, Dataset]:
    """Tasks keyed 1..K, regenerated identically from a BenchmarkSpec."""
    kind, source = spec.family.split("-")
    if source == "blobs":
        base = gen_blob_base(spec.num_labels, spec.dim, spec.n_train, spec.n_test,
                             spec.noise_sigma, _stream(spec, "base"))
        shape = None
    else:
        base, shape = _idx_base(spec)

    if kind == "split":
        tasks = split_tasks(base, spec.labels_per_task)
        if len(tasks) != spec.num_tasks:
            raise ValueError(f"split gives {len(tasks)} tasks but num_tasks={spec.num_tasks}")
        return {k + 1: t for k, t in enumerate(tasks)}

    out = {}
    for k in range(1, spec.num_tasks + 1):
        s = _stream(spec, kind, k)
        if kind == "perm":
            ds = permute_variant(base, s)
        elif shape is not None:
            ds = rotate_images(base, 180.0 * s.next_uniform(), shape)
        else:
            ds = rotate_variant(base, s)
        out[k] = replace(ds, name=f"{spec.family}:{k}")
    return out


def export_benchmark(tasks: dict[int, Dataset], directory: str, spec: Optional[BenchmarkSpec] = None):
    """Write flat little-endian arrays plus ``manifest.json``."""
    os.makedirs(directory, exist_ok=True)
    manifest = {"format": "clpu-benchmark", "version": 1, "tasks": {}}
    if spec is not None:
        manifest["spec"] = spec.to_dict()
    for k, ds in sorted(tasks.items()):
        entry = {"mask": list(ds.mask), "num_labels": ds.num_labels, "name": ds.name, "arrays": {}}
        for part in ("x_train", "y_train", "x_test", "y_test"):
            arr = getattr(ds, part)
            arr = arr.astype("<f4") if part.startswith("x") else arr.astype("<i4")
            fname = f"task{k}_{part}.bin"
            with open(os.path.join(directory, fname), "wb") as fh:
                fh.write(arr.tobytes())
            entry["arrays"][part] = {"file": fname, "dtype": arr.dtype.str, "shape": list(arr.shape)}
        manifest["tasks"][str(k)] = entry
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_exported(directory: str) -> dict[int, Dataset]:
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    tasks = {}
    for key, entry in manifest["tasks"].items():
        arrays = {}
        for part, meta in entry["arrays"].items():
            raw = np.fromfile(os.path.join(directory, meta["file"]), dtype=np.dtype(meta["dtype"]))
            arrays[part] = raw.reshape(meta["shape"])
        tasks[int(key)] = Dataset(**arrays, mask=tuple(entry["mask"]),
                                  num_labels=entry["num_labels"], name=entry["name"])
    return dict(sorted(tasks.items()))
