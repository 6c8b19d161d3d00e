"""Datasets on disk and in memory, fold splitting, synthetic data, weight files.

File formats
------------
Raster image (``.rst``), little-endian::

    4s   magic b"RSTR"
    u8   version (1)
    u8   payload type: 0 = uint8 (scaled by 1/255), 1 = float64 in [0, 1]
    u16  channels
    u32  height
    u32  width
    ...  payload, channel-major then row-major (C x H x W)

Dataset index (UTF-8 CSV)::

    # classes: normal,TB,cancer
    path,label
    images/0001.rst,normal
    ...

Paths are relative to the index file's directory.

Weights file (``.sqw``), little-endian::

    4s   magic b"SQTW"
    u8   format version (1)
    u32  length of config JSON, then the JSON bytes
    u32  number of groups
    per group:   u16 name length, name, u32 entry count
      per entry: u16 name length, name, u8 ndim, ndim x u32 dims,
                 prod(dims) x float64 payload
    u64  checksum: first 8 bytes of BLAKE2b over everything before it
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ChecksumError, ConfigurationError, ContractError, DataFormatError, ShapeMismatchError
from .model import DenseNetConfig, Network, build_densenet_lite

RASTER_MAGIC = b"RSTR"
RASTER_HEADER = struct.Struct("<4sBBHII")
WEIGHTS_MAGIC = b"SQTW"
WEIGHTS_VERSION = 1


@dataclass
class Dataset:
    images: np.ndarray  # N, C, H, W in [0, 1]
    labels: np.ndarray  # N ints
    ids: list[str]
    class_names: list[str]

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=int)
        if len(self.images) != len(self.labels) or len(self.ids) != len(self.labels):
            raise ContractError("images, labels and ids must have equal length")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=int)
        return Dataset(self.images[indices], self.labels[indices],
                       [self.ids[i] for i in indices], list(self.class_names))

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=len(self.class_names))

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])


# ------------------------------------------------------------------ resizing


def resize_bilinear(image, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a C x H x W image; corner pixels map onto corners."""
    if out_h < 1 or out_w < 1:
        raise ContractError(f"target size must be positive, got {out_h}x{out_w}")
    img = np.asarray(getattr(image, "data", image), dtype=np.float64)
    c, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()

    def coords(n_in, n_out):
        pos = np.linspace(0.0, n_in - 1, n_out) if n_out > 1 else np.zeros(1)
        lo = np.clip(np.floor(pos).astype(int), 0, n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = coords(h, out_h)
    x0, x1, fx = coords(w, out_w)
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bottom = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    out = top * (1 - fy)[:, None] + bottom * fy[:, None]
    # keep interpolation inside the input range despite rounding
    return np.clip(out, img.min(), img.max())


# -------------------------------------------------------------------- raster


def write_raster(path, image, as_uint8: bool = False) -> None:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    c, h, w = img.shape
    if as_uint8:
        payload = np.round(np.clip(img, 0, 1) * 255).astype("<u1").tobytes()
    else:
        payload = img.astype("<f8").tobytes()
    Path(path).write_bytes(RASTER_HEADER.pack(RASTER_MAGIC, 1, 0 if as_uint8 else 1, c, h, w) + payload)


def read_raster(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < RASTER_HEADER.size:
        raise DataFormatError(f"{path}: truncated raster header")
    magic, version, kind, c, h, w = RASTER_HEADER.unpack_from(raw)
    if magic != RASTER_MAGIC or version != 1 or kind not in (0, 1):
        raise DataFormatError(f"{path}: not a version-1 raster file")
    dtype, scale = ("<u1", 1 / 255.0) if kind == 0 else ("<f8", 1.0)
    expected = c * h * w * np.dtype(dtype).itemsize
    body = raw[RASTER_HEADER.size :]
    if len(body) != expected or min(c, h, w) < 1:
        raise DataFormatError(f"{path}: payload has {len(body)} bytes, expected {expected}")
    img = np.frombuffer(body, dtype=dtype).astype(np.float64).reshape(c, h, w) * scale
    if not np.all(np.isfinite(img)) or img.min() < 0 or img.max() > 1:
        raise DataFormatError(f"{path}: pixel values must be finite and within [0, 1]")
    return img


# --------------------------------------------------------------------- index


def load_dataset(index_path, image_size: tuple[int, int] | None = None) -> Dataset:
    index_path = Path(index_path)
    if not index_path.is_file():
        raise FileNotFoundError(f"dataset index not found: {index_path}")
    lines = index_path.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("#") or ":" not in lines[0]:
        raise DataFormatError(f"{index_path}: first line must be '# classes: name,name,...'")
    class_names = [c.strip() for c in lines[0].split(":", 1)[1].split(",") if c.strip()]
    if len(class_names) < 2 or len(set(class_names)) != len(class_names):
        raise DataFormatError(f"{index_path}: need at least two distinct class names, got {class_names}")
    reader = csv.reader(io.StringIO("\n".join(lines[1:])))
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != ["path", "label"]:
        raise DataFormatError(f"{index_path}: second line must be the header 'path,label'")
    images, labels, ids, seen = [], [], [], set()
    for row_no, row in enumerate(reader, start=3):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != 2:
            raise DataFormatError(f"{index_path}:{row_no}: expected 2 columns, got {len(row)}: {row!r}")
        rel, label = row[0].strip(), row[1].strip()
        if label not in class_names:
            raise DataFormatError(f"{index_path}:{row_no}: unknown class {label!r}")
        if rel in seen:
            raise DataFormatError(f"{index_path}:{row_no}: duplicate path {rel!r}")
        seen.add(rel)
        file = index_path.parent / rel
        if not file.is_file():
            raise FileNotFoundError(f"{index_path}:{row_no}: image not found: {file}")
        img = read_raster(file)
        if image_size is not None:
            img = resize_bilinear(img, *image_size)
        images.append(img)
        labels.append(class_names.index(label))
        ids.append(rel)
    if not images:
        raise DataFormatError(f"{index_path}: no samples listed")
    shapes = {im.shape for im in images}
    if len(shapes) > 1:
        raise DataFormatError(f"{index_path}: images differ in shape {sorted(shapes)}; pass image_size to resize")
    return Dataset(np.stack(images), np.array(labels), ids, class_names)


def write_dataset(dataset: Dataset, directory, as_uint8: bool = False) -> Path:
    """Write rasters plus ``index.csv`` under ``directory``; returns the index path."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for img, label, sample_id in zip(dataset.images, dataset.labels, dataset.ids):
        rel = f"images/{sample_id}.rst"
        write_raster(directory / rel, img, as_uint8=as_uint8)
        rows.append((rel, dataset.class_names[label]))
    index = directory / "index.csv"
    with index.open("w", encoding="utf-8", newline="") as fh:
        fh.write(f"# classes: {','.join(dataset.class_names)}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "label"])
        writer.writerows(rows)
    return index


# ------------------------------------------------------------------- weights


def _checksum(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def save_weights(network: Network, path) -> None:
    state = network.state_dict()
    buf = io.BytesIO()
    buf.write(WEIGHTS_MAGIC + struct.pack("<B", WEIGHTS_VERSION))
    config = json.dumps(network.config.to_dict(), sort_keys=True).encode()
    buf.write(struct.pack("<I", len(config)) + config)
    buf.write(struct.pack("<I", network.num_groups))
    for group in network.groups:
        names = group.parameter_names + group.buffers
        gname = group.name.encode()
        buf.write(struct.pack("<H", len(gname)) + gname + struct.pack("<I", len(names)))
        for name in names:
            arr = np.ascontiguousarray(state[name], dtype="<f8")
            encoded = name.encode()
            buf.write(struct.pack("<H", len(encoded)) + encoded)
            buf.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(arr.tobytes())
    body = buf.getvalue()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(body + _checksum(body))
    tmp.replace(path)


def read_weights(path) -> tuple[DenseNetConfig, dict[str, np.ndarray]]:
    """Parse and verify a weights file without building a network."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"weights file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < 13 or raw[:4] != WEIGHTS_MAGIC:
        raise DataFormatError(f"{path}: not a weights file")
    body, stored = raw[:-8], raw[-8:]
    if _checksum(body) != stored:
        raise ChecksumError(f"{path}: checksum mismatch, file is corrupted")
    if body[4] != WEIGHTS_VERSION:
        raise DataFormatError(f"{path}: unsupported format version {body[4]}")
    pos = 5

    def take(fmt):
        nonlocal pos
        values = struct.unpack_from(fmt, body, pos)
        pos += struct.calcsize(fmt)
        return values

    try:
        (n,) = take("<I")
        config = DenseNetConfig.from_dict(json.loads(body[pos : pos + n].decode()))
        pos += n
        state: dict[str, np.ndarray] = {}
        (n_groups,) = take("<I")
        for _ in range(n_groups):
            (n,) = take("<H")
            pos += n
            (entries,) = take("<I")
            for _ in range(entries):
                (n,) = take("<H")
                name = body[pos : pos + n].decode()
                pos += n
                (ndim,) = take("<B")
                dims = take(f"<{ndim}I")
                count = math.prod(dims)
                state[name] = np.frombuffer(body, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(dims)
                pos += 8 * count
    except (struct.error, ValueError, TypeError, UnicodeDecodeError) as exc:
        raise DataFormatError(f"{path}: malformed weights file ({exc})") from None
    if pos != len(body):
        raise DataFormatError(f"{path}: {len(body) - pos} trailing bytes")
    return config, state


def load_weights(path, config: DenseNetConfig | None = None) -> Network:
    stored_config, state = read_weights(path)
    network = build_densenet_lite(config or stored_config, seed=0)
    expected = network.state_dict()
    for name, arr in expected.items():
        if name not in state:
            raise ShapeMismatchError(f"{path}: missing entry {name!r} required by the configuration")
        if state[name].shape != arr.shape:
            raise ShapeMismatchError(f"{path}: {name} has shape {state[name].shape}, configuration expects {arr.shape}")
    extra = sorted(set(state) - set(expected))
    if extra:
        raise ShapeMismatchError(f"{path}: entries not present in the configuration: {extra}")
    network.load_state_dict(state)
    return network


# -------------------------------------------------------------------- splits


def _check_splittable(dataset: Dataset) -> None:
    if len(dataset) == 0:
        raise ConfigurationError("cannot split an empty dataset")
    counts = dataset.class_counts()
    for k, c in enumerate(counts):
        if 0 < c < 2:
            raise ConfigurationError(f"class {dataset.class_names[k]!r} has {c} sample; at least 2 needed to split")


def split_two_fold(dataset: Dataset, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified halves; an odd class's extra sample goes to the smaller half."""
    _check_splittable(dataset)
    rng = np.random.default_rng(seed)
    part_a, part_b = [], []
    for k in range(len(dataset.class_names)):
        idx = rng.permutation(np.flatnonzero(dataset.labels == k))
        half = len(idx) // 2
        if len(idx) % 2 and len(part_a) <= len(part_b):
            half += 1
        part_a.extend(idx[:half])
        part_b.extend(idx[half:])
    return dataset.subset(sorted(part_a)), dataset.subset(sorted(part_b))


def split_train_val(part: Dataset, fraction: float = 0.7, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Stratified split with ``round(fraction * N)`` training samples.

    Per-class training counts are apportioned by largest remainder so the total
    is exact while each class stays within one sample of its share.
    """
    if not 0 < fraction < 1:
        raise ConfigurationError(f"fraction must lie in (0, 1), got {fraction}")
    if len(part) == 0:
        raise ConfigurationError("cannot split an empty dataset")
    rng = np.random.default_rng(seed)
    counts = part.class_counts()
    target = int(math.floor(fraction * len(part) + 0.5))
    exact = fraction * counts
    n_train = np.floor(exact).astype(int)
    remainders = exact - n_train
    for k in sorted(range(len(counts)), key=lambda k: (-remainders[k], k))[: target - n_train.sum()]:
        n_train[k] += 1
    train, val = [], []
    for k in range(len(counts)):
        idx = rng.permutation(np.flatnonzero(part.labels == k))
        train.extend(idx[: n_train[k]])
        val.extend(idx[n_train[k] :])
    return part.subset(sorted(train)), part.subset(sorted(val))


# ----------------------------------------------------------------- synthetic


CLINICAL_COUNTS = (81, 76, 277)  # normal, TB, cancer


@dataclass(frozen=True)
class SyntheticSpec:
    """Oriented sinusoidal textures, one orientation/frequency per class.

    Pixel = 0.5 + contrast * sin(2 pi f (u cos a + v sin a) / size + phase)
    + noise * N(0, 1), clipped to [0, 1], with a random phase per image and the
    angle jittered by ``angle_jitter`` degrees (standard deviation).
    """

    counts: tuple[int, ...] = CLINICAL_COUNTS
    image_size: int = 16
    angles: tuple[float, ...] = (0.0, 60.0, 120.0)  # degrees
    frequencies: tuple[float, ...] = (3.0, 3.0, 3.0)  # cycles per image width
    contrast: float = 0.35
    noise: float = 0.05
    angle_jitter: float = 4.0
    class_names: tuple[str, ...] = ("normal", "TB", "cancer")
    seed: int = 0

    def __post_init__(self):
        for name in ("counts", "angles", "frequencies", "class_names"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        k = len(self.counts)
        if not (len(self.angles) == len(self.frequencies) == len(self.class_names) == k):
            raise ConfigurationError("counts, angles, frequencies and class_names must have equal length")
        if any(c < 2 for c in self.counts):
            raise ConfigurationError(f"every class needs at least 2 samples, got {self.counts}")
        if self.image_size < 1:
            raise ConfigurationError("image_size must be positive")

    def to_dict(self) -> dict:
        return {
            "counts": list(self.counts), "image_size": self.image_size, "angles": list(self.angles),
            "frequencies": list(self.frequencies), "contrast": self.contrast, "noise": self.noise,
            "angle_jitter": self.angle_jitter, "class_names": list(self.class_names), "seed": self.seed,
        }


SYNTHETIC_PRESETS = {
    "high": SyntheticSpec(),
    "low": SyntheticSpec(contrast=0.2, noise=0.3, angle_jitter=25.0),
}


def parse_synthetic_spec(text: str) -> SyntheticSpec:
    """Preset name (``high``/``low``), optionally followed by ``;key=value`` overrides.

    List values are colon-separated, e.g. ``high;counts=40:40:120;noise=0.1``.
    """
    parts = [p.strip() for p in text.split(";") if p.strip()]
    base = SYNTHETIC_PRESETS["high"]
    if parts and "=" not in parts[0]:
        name = parts.pop(0)
        if name not in SYNTHETIC_PRESETS:
            raise ConfigurationError(f"unknown synthetic preset {name!r}; choose from {sorted(SYNTHETIC_PRESETS)}")
        base = SYNTHETIC_PRESETS[name]
    overrides = {}
    for part in parts:
        key, _, value = part.partition("=")
        key = key.strip().replace("-", "_")
        if key in ("counts",):
            overrides[key] = tuple(int(v) for v in value.split(":"))
        elif key in ("angles", "frequencies"):
            overrides[key] = tuple(float(v) for v in value.split(":"))
        elif key == "class_names":
            overrides[key] = tuple(value.split(":"))
        elif key in ("image_size", "seed"):
            overrides[key] = int(value)
        elif key in ("contrast", "noise", "angle_jitter"):
            overrides[key] = float(value)
        else:
            raise ConfigurationError(f"unknown synthetic parameter {key!r}")
    return replace(base, **overrides)


def generate_synthetic_dataset(spec: SyntheticSpec) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    size = spec.image_size
    v, u = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    images, labels = [], []
    for k, count in enumerate(spec.counts):
        for _ in range(count):
            angle = np.deg2rad(spec.angles[k] + spec.angle_jitter * rng.standard_normal())
            phase = rng.uniform(0, 2 * np.pi)
            wave = np.sin(2 * np.pi * spec.frequencies[k] * (u * np.cos(angle) + v * np.sin(angle)) / size + phase)
            img = 0.5 + spec.contrast * wave + spec.noise * rng.standard_normal((size, size))
            images.append(np.clip(img, 0.0, 1.0)[None])
            labels.append(k)
    # interleave classes so that ids do not leak the label order
    order = rng.permutation(len(labels))
    images = np.stack(images)[order]
    labels = np.array(labels)[order]
    ids = [f"s{i:05d}" for i in range(len(labels))]
    return Dataset(images, labels, ids, list(spec.class_names))


def source_task_spec(spec: SyntheticSpec, num_classes: int = 6, per_class: int = 100) -> SyntheticSpec:
    """Related pretraining task: same texture family, shifted orientations.

    Orientations are spread evenly over 180 degrees and offset by half a step so
    none coincides with a target-class angle.
    """
    step = 180.0 / num_classes
    mean_freq = float(np.mean(spec.frequencies))
    return replace(
        spec,
        counts=(per_class,) * num_classes,
        angles=tuple(step / 2 + i * step for i in range(num_classes)),
        frequencies=tuple(mean_freq + (0.5 if i % 2 else -0.5) for i in range(num_classes)),
        class_names=tuple(f"source{i}" for i in range(num_classes)),
        seed=spec.seed + 7919,
    )
