"""Dataset ingestion: IDX files, class subsetting, scaling, and the toy generator."""

from __future__ import annotations

import bz2
import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# IDX element type code -> big-endian numpy dtype
IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_TYPE_CODES = {np.dtype(v).newbyteorder("="): k for k, v in IDX_TYPES.items()}

IMAGE_FILES = {"train": "train-images-idx3-ubyte", "test": "t10k-images-idx3-ubyte"}
LABEL_FILES = {"train": "train-labels-idx1-ubyte", "test": "t10k-labels-idx1-ubyte"}


class IdxError(ValueError):
    pass


class DatasetError(ValueError):
    pass


def parse_idx(raw: bytes) -> tuple[np.ndarray, int]:
    """Decode an IDX buffer into a native-endian array and its element type code."""
    if len(raw) < 4:
        raise IdxError(f"offset 0: need a 4-byte magic number, buffer has {len(raw)} bytes")
    zero, type_code, ndim = raw[0:2], raw[2], raw[3]
    if zero != b"\x00\x00":
        raise IdxError(f"offset 0: bad magic {raw[:4].hex()}; first two bytes must be zero")
    if type_code not in IDX_TYPES:
        raise IdxError(f"offset 2: unsupported element type 0x{type_code:02x}")
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise IdxError(f"offset 4: header declares {ndim} dims but only {len(raw) - 4} bytes follow the magic")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    dtype = IDX_TYPES[type_code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    actual = len(raw) - header_end
    if actual < expected:
        raise IdxError(f"offset {header_end}: truncated payload, expected {expected} bytes, got {actual}")
    if actual > expected:
        raise IdxError(f"offset {header_end + expected}: {actual - expected} trailing bytes after payload")
    arr = np.frombuffer(raw, dtype=dtype, offset=header_end).reshape(dims)
    return arr.astype(dtype.newbyteorder("=")), type_code


def serialize_idx(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    native = arr.dtype.newbyteorder("=")
    if native not in _TYPE_CODES:
        raise IdxError(f"dtype {arr.dtype} has no IDX element type")
    code = _TYPE_CODES[native]
    header = bytes([0, 0, code, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return header + arr.astype(IDX_TYPES[code]).tobytes()


def _open_bytes(path: Path) -> bytes:
    if path.suffix == ".gz":
        return gzip.decompress(path.read_bytes())
    if path.suffix == ".bz2":
        return bz2.decompress(path.read_bytes())
    return path.read_bytes()


def read_idx(path) -> np.ndarray:
    path = Path(path)
    try:
        return parse_idx(_open_bytes(path))[0]
    except IdxError as e:
        raise IdxError(f"{path}: {e}") from None


def write_idx(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(serialize_idx(arr))


def _find(directory: Path, stem: str) -> Path:
    for candidate in (directory / stem, directory / (stem + ".gz")):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"no {stem}[.gz] under {directory}")


def load_idx_pair(root, dataset: str, split: str = "train") -> tuple[np.ndarray, np.ndarray]:
    """Raw images and labels from ``<root>/<dataset>/{train-images,train-labels}`` IDX files."""
    directory = Path(root) / dataset
    images = read_idx(_find(directory, IMAGE_FILES[split]))
    labels = read_idx(_find(directory, LABEL_FILES[split])).astype(np.int64)
    if len(images) != len(labels):
        raise DatasetError(f"{directory}: {len(images)} images but {len(labels)} labels")
    return images, labels


def normalize_images(raw: np.ndarray) -> np.ndarray:
    """Map [0, 255] pixel values to [-1, 1] to match the tanh decoder range."""
    return (np.asarray(raw, dtype=np.float32) / np.float32(127.5) - np.float32(1.0)).astype(np.float32)


@dataclass
class LabeledDataset:
    samples: np.ndarray
    labels: np.ndarray
    class_map: dict[int, int] = field(default_factory=dict)
    domain: str = "source"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.samples) == 0:
            raise DatasetError("dataset is empty")
        if len(self.samples) != len(self.labels):
            raise DatasetError(f"{len(self.samples)} samples but {len(self.labels)} labels")
        if not self.class_map:
            self.class_map = {int(c): int(c) for c in np.unique(self.labels)}
        k = self.num_classes
        if self.labels.min() < 0 or self.labels.max() >= k:
            raise DatasetError(f"labels must lie in [0, {k})")
        if np.abs(self.samples).max() > 1.0 + 1e-6:
            raise DatasetError("samples must be scaled to [-1, 1]")

    @property
    def num_classes(self) -> int:
        return len(self.class_map)

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return self.samples.shape[1:]

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> LabeledDataset:
        return LabeledDataset(self.samples[idx], self.labels[idx], dict(self.class_map), self.domain)


def _stratified_quota(counts: np.ndarray, n: int) -> np.ndarray:
    """Largest-remainder split of n draws proportional to counts."""
    exact = counts * (n / counts.sum())
    quota = np.floor(exact).astype(int)
    order = np.argsort(-(exact - quota), kind="stable")
    quota[order[: n - quota.sum()]] += 1
    return quota


def select_classes(samples: np.ndarray, labels: np.ndarray, classes, n_max: int | None,
                   seed: int, domain: str = "source") -> LabeledDataset:
    """Keep ``classes`` (relabelled 0..K-1 in the given order) and subsample to at most ``n_max``.

    Subsampling is without replacement and stratified by class, so class
    proportions are preserved to within one sample.
    """
    classes = [int(c) for c in classes]
    if not classes:
        raise DatasetError("at least one class is required")
    labels = np.asarray(labels)
    present = set(np.unique(labels).tolist())
    missing = [c for c in classes if c not in present]
    if missing:
        raise DatasetError(f"class(es) {missing} not present in the data")
    per_class = [np.flatnonzero(labels == c) for c in classes]
    counts = np.array([len(ix) for ix in per_class])
    total = int(counts.sum())
    rng = np.random.default_rng(seed)
    if n_max is not None and n_max < total:
        quota = _stratified_quota(counts, n_max)
        per_class = [np.sort(rng.choice(ix, size=q, replace=False)) for ix, q in zip(per_class, quota)]
    keep = np.sort(np.concatenate(per_class))
    remap = {c: i for i, c in enumerate(classes)}
    new_labels = np.array([remap[int(v)] for v in labels[keep]], dtype=np.int64)
    x = samples[keep]
    if x.dtype == np.uint8:
        x = normalize_images(x)
    return LabeledDataset(x.astype(np.float32), new_labels, remap, domain)


def load_domain(root, dataset: str, classes, n_max: int | None, seed: int, domain: str,
                split: str = "train") -> LabeledDataset:
    images, labels = load_idx_pair(root, dataset, split)
    if images.ndim == 3:
        images = images[:, None, :, :]
    return select_classes(images, labels, classes, n_max, seed, domain)


@dataclass(frozen=True)
class SynthSpec:
    n_per_class: int = 500
    source_means: tuple = ((-2.0, 0.0), (2.0, 0.0))
    target_means: tuple = ((2.0, 0.0, -2.0), (2.0, 0.0, 2.0))
    std: float = 0.5
    seed: int = 0
    scale: float = 4.0

    def __post_init__(self):
        if self.std <= 0:
            raise ValueError(f"std must be positive, got {self.std}")
        if self.n_per_class < 1:
            raise ValueError(f"n_per_class must be positive, got {self.n_per_class}")


def generate_direct_sum_toy(spec: SynthSpec = SynthSpec()) -> tuple[LabeledDataset, LabeledDataset]:
    """Two-class source in 2-D (split by the sign of x) and target in 3-D (split by the sign of z).

    Both target classes project onto source class 1 in the xy-plane, so the
    source decision rule carries no information about the target labels.
    Coordinates are divided by ``spec.scale`` and clipped to [-1, 1].
    """
    rng = np.random.default_rng(spec.seed)

    def draw(means):
        xs, ys = [], []
        for label, mean in enumerate(means):
            mean = np.asarray(mean, dtype=np.float64)
            xs.append(rng.normal(mean, spec.std, size=(spec.n_per_class, mean.size)))
            ys.append(np.full(spec.n_per_class, label))
        x = np.clip(np.concatenate(xs) / spec.scale, -1.0, 1.0).astype(np.float32)
        return x, np.concatenate(ys)

    xs, ys = draw(spec.source_means)
    xt, yt = draw(spec.target_means)
    cmap = {0: 0, 1: 1}
    return LabeledDataset(xs, ys, dict(cmap), "source"), LabeledDataset(xt, yt, dict(cmap), "target")


def upscale_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a (..., H, W) array using pixel-centre alignment."""
    h, w = img.shape[-2:]

    def axis(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, fr = axis(h, out_h)
    c0, c1, fc = axis(w, out_w)
    img = np.asarray(img, dtype=np.float64)
    top = img[..., r0, :] * (1 - fr)[:, None] + img[..., r1, :] * fr[:, None]
    return top[..., c0] * (1 - fc) + top[..., c1] * fc


def _read_usps_libsvm(path: Path) -> tuple[np.ndarray, np.ndarray]:
    """LIBSVM-format USPS: label in 1..10 then ``index:value`` pairs with values in [-1, 1]."""
    text = _open_bytes(path).decode()
    images, labels = [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        vec = np.full(256, -1.0)
        for tok in parts[1:]:
            i, v = tok.split(":")
            vec[int(i) - 1] = float(v)
        label = int(float(parts[0])) - 1
        if not 0 <= label <= 9:
            raise DatasetError(f"{path}:{lineno}: label {parts[0]} outside 1..10")
        images.append(vec.reshape(16, 16))
        labels.append(label)
    return (np.array(images) + 1.0) / 2.0, np.array(labels)


def _read_usps_h5(path: Path) -> tuple[np.ndarray, np.ndarray]:
    import h5py

    with h5py.File(path, "r") as fh:
        grp = fh["train"]
        return np.asarray(grp["data"]).reshape(-1, 16, 16), np.asarray(grp["target"])


def convert_usps(src, out_dir) -> int:
    """Convert 16x16 USPS digits to 28x28 uint8 IDX files in ``out_dir``; returns the image count."""
    src = Path(src)
    if src.suffix == ".h5":
        unit, labels = _read_usps_h5(src)
    else:
        unit, labels = _read_usps_libsvm(src)
    big = upscale_bilinear(unit, 28, 28)
    pixels = np.clip(np.rint(big * 255.0), 0, 255).astype(np.uint8)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / IMAGE_FILES["train"], pixels)
    write_idx(out / LABEL_FILES["train"], labels.astype(np.uint8))
    return len(labels)
