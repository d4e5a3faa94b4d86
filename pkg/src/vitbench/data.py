"""Dataset manifests, image decoding, preprocessing, augmentation, the
train/val/test split, deterministic batching, and synthetic dataset
generation.

A manifest is a line-oriented UTF-8 text file: comment-style header lines
(``#classes: a,b,c`` is mandatory, ``#name:`` / ``#note:`` optional),
then one ``relative/path<TAB>label_id`` entry per line.  Entry paths are
resolved relative to the manifest's directory.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ConfigurationError,
    EmptyDatasetError,
    FormatError,
    RangeError,
    ValidationError,
)
from .tensor import tnsr_decode, tnsr_encode


@dataclass
class DatasetManifest:
    name: str
    class_names: list
    entries: list  # (relative path str, label id) pairs
    source_note: str = ""
    root: Path = field(default_factory=Path)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return len(self.entries)

    def resolve(self, rel_path: str) -> Path:
        return self.root / rel_path

    def labels(self) -> np.ndarray:
        return np.array([lab for _, lab in self.entries], dtype=np.int64)

    def validate(self, check_files: bool = True) -> None:
        if not self.class_names:
            raise ValidationError("manifest has no class names")
        if len(set(self.class_names)) != len(self.class_names):
            raise ValidationError("class names are not unique")
        c = self.num_classes
        for path, lab in self.entries:
            if not 0 <= lab < c:
                raise ValidationError(f"entry {path!r} has label {lab} outside [0, {c})")
        if check_files:
            missing = [p for p, _ in self.entries if not self.resolve(p).exists()]
            if missing:
                shown = ", ".join(missing[:10])
                raise ValidationError(
                    f"{len(missing)} entry files missing, e.g.: {shown}"
                )


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    class_names = None
    name = path.stem
    note = ""
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#classes:"):
            class_names = [c.strip() for c in line[len("#classes:"):].split(",")]
        elif line.startswith("#name:"):
            name = line[len("#name:"):].strip()
        elif line.startswith("#note:"):
            note = line[len("#note:"):].strip()
        elif line.startswith("#"):
            continue
        else:
            parts = line.split("\t")
            if len(parts) != 2:
                raise FormatError(f"{path}:{lineno}: expected 'path<TAB>label'")
            try:
                label = int(parts[1])
            except ValueError:
                raise FormatError(f"{path}:{lineno}: label {parts[1]!r} is not an integer")
            entries.append((parts[0], label))
    if class_names is None:
        raise FormatError(f"{path}: missing '#classes:' header")
    manifest = DatasetManifest(
        name=name, class_names=class_names, entries=entries,
        source_note=note, root=path.parent,
    )
    manifest.validate(check_files=check_files)
    return manifest


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    lines = [f"#classes: {','.join(manifest.class_names)}"]
    lines.append(f"#name: {manifest.name}")
    if manifest.source_note:
        lines.append(f"#note: {manifest.source_note}")
    for rel, lab in manifest.entries:
        lines.append(f"{rel}\t{lab}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


# ---------------------------------------------------------------------------
# image decode/encode


def _parse_pnm_header(data: bytes, magic: bytes):
    if data[:2] != magic:
        raise FormatError(f"bad magic {data[:2]!r}, expected {magic!r}")
    # header tokens may be separated by whitespace and '#' comments
    tokens = []
    i = 2
    while len(tokens) < 3:
        if i >= len(data):
            raise FormatError("truncated header")
        ch = data[i:i + 1]
        if ch == b"#":
            while i < len(data) and data[i:i + 1] != b"\n":
                i += 1
        elif ch.isspace():
            i += 1
        else:
            j = i
            while j < len(data) and not data[j:j + 1].isspace():
                j += 1
            tokens.append(int(data[i:j]))
            i = j
    i += 1  # single whitespace after maxval
    w, h, maxval = tokens
    if maxval != 255:
        raise FormatError(f"only maxval 255 supported, got {maxval}")
    return w, h, i


def decode_image(data: bytes, fmt: str) -> np.ndarray:
    """Decode bytes to a channels x H x W float image in [0, 1]."""
    if fmt == "ppm":
        w, h, off = _parse_pnm_header(data, b"P6")
        need = w * h * 3
        raw = data[off:off + need]
        if len(raw) < need:
            raise FormatError(f"truncated PPM payload: {len(raw)} of {need} bytes")
        arr = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
        return arr.transpose(2, 0, 1).astype(np.float64) / 255.0
    if fmt == "pgm":
        w, h, off = _parse_pnm_header(data, b"P5")
        need = w * h
        raw = data[off:off + need]
        if len(raw) < need:
            raise FormatError(f"truncated PGM payload: {len(raw)} of {need} bytes")
        arr = np.frombuffer(raw, dtype=np.uint8).reshape(1, h, w)
        return arr.astype(np.float64) / 255.0
    if fmt == "tnsr":
        arr = tnsr_decode(data)
        if arr.ndim != 3:
            raise FormatError(f"TNSR image must be rank 3, got rank {arr.ndim}")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise RangeError(
                f"TNSR image values outside [0,1]: min {arr.min()}, max {arr.max()}"
            )
        return arr.astype(np.float64)
    raise FormatError(f"unknown image format {fmt!r}")


def encode_ppm(img: np.ndarray) -> bytes:
    c, h, w = img.shape
    if c != 3:
        raise FormatError(f"PPM needs 3 channels, got {c}")
    raw = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return b"P6\n%d %d\n255\n" % (w, h) + raw.transpose(1, 2, 0).tobytes()


def encode_pgm(img: np.ndarray) -> bytes:
    c, h, w = img.shape
    if c != 1:
        raise FormatError(f"PGM needs 1 channel, got {c}")
    raw = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return b"P5\n%d %d\n255\n" % (w, h) + raw.tobytes()


_EXT_FORMATS = {".ppm": "ppm", ".pgm": "pgm", ".tnsr": "tnsr"}


def load_image(path) -> np.ndarray:
    path = Path(path)
    fmt = _EXT_FORMATS.get(path.suffix.lower())
    if fmt is None:
        raise FormatError(f"unsupported image extension {path.suffix!r}")
    return decode_image(path.read_bytes(), fmt)


# ---------------------------------------------------------------------------
# preprocessing


def bilinear_resize(img: np.ndarray, size: int) -> np.ndarray:
    """Corner-aligned bilinear resize to size x size; identity when matched."""
    c, h, w = img.shape
    if h == size and w == size:
        return img.copy()

    def coords(n_in, n_out):
        if n_out > 1:
            return np.arange(n_out) * (n_in - 1) / (n_out - 1)
        return np.array([(n_in - 1) / 2.0])

    ys = coords(h, size)
    xs = coords(w, size)
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    out = (
        img[:, y0][:, :, x0] * (1 - fy) * (1 - fx)
        + img[:, y0][:, :, x1] * (1 - fy) * fx
        + img[:, y1][:, :, x0] * fy * (1 - fx)
        + img[:, y1][:, :, x1] * fy * fx
    )
    return out


def preprocess(img: np.ndarray, target_size: int, mean, std) -> np.ndarray:
    """Resize then per-channel (x - mean) / std."""
    mean = np.asarray(mean, dtype=np.float64).reshape(-1, 1, 1)
    std = np.asarray(std, dtype=np.float64).reshape(-1, 1, 1)
    if np.any(std <= 0):
        raise ConfigurationError(f"std components must be positive, got {std.ravel()}")
    resized = bilinear_resize(img, target_size)
    return (resized - mean) / std


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentConfig:
    crop_pad: int = 0           # zero-pad then random-crop back to size
    flip_p: float = 0.0         # probability of horizontal flip
    rotate: bool = False        # random quarter-turn rotation

    def __post_init__(self):
        if self.crop_pad < 0:
            raise ConfigurationError("crop_pad must be >= 0")
        if not 0.0 <= self.flip_p <= 1.0:
            raise ConfigurationError("flip_p must be in [0, 1]")

    @property
    def enabled(self) -> bool:
        return self.crop_pad > 0 or self.flip_p > 0 or self.rotate


def horizontal_flip(img: np.ndarray) -> np.ndarray:
    return img[:, :, ::-1].copy()


def rotate_quarter(img: np.ndarray, turns: int) -> np.ndarray:
    return np.rot90(img, k=turns % 4, axes=(1, 2)).copy()


def random_crop(img: np.ndarray, pad: int, rng: np.random.Generator) -> np.ndarray:
    c, h, w = img.shape
    padded = np.pad(img, ((0, 0), (pad, pad), (pad, pad)))
    dy = int(rng.integers(0, 2 * pad + 1))
    dx = int(rng.integers(0, 2 * pad + 1))
    return padded[:, dy:dy + h, dx:dx + w].copy()


def augment(img: np.ndarray, ops: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Apply the enabled ops; shape-preserving and fully rng-determined."""
    out = img
    if ops.crop_pad > 0:
        out = random_crop(out, ops.crop_pad, rng)
    if ops.flip_p > 0 and rng.random() < ops.flip_p:
        out = horizontal_flip(out)
    if ops.rotate:
        out = rotate_quarter(out, int(rng.integers(0, 4)))
    return out


# ---------------------------------------------------------------------------
# splitting and batching


@dataclass
class SplitSpec:
    ratios: tuple = (0.8, 0.1, 0.1)
    seed: int = 0
    stratified: bool = True

    def __post_init__(self):
        if any(r < 0 for r in self.ratios) or abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ConfigurationError(
                f"split ratios {self.ratios} must be non-negative and sum to 1"
            )


def _allocate(indices, ratios):
    """Floor-allocate val and test; remainders go to train."""
    n = len(indices)
    n_val = math.floor(n * ratios[1])
    n_test = math.floor(n * ratios[2])
    n_train = n - n_val - n_test
    return (
        indices[:n_train],
        indices[n_train:n_train + n_val],
        indices[n_train + n_val:],
    )


def split_dataset(manifest: DatasetManifest, spec: SplitSpec):
    """Deterministic (optionally stratified) split into train/val/test manifests."""
    rng = np.random.default_rng(spec.seed)
    n = len(manifest.entries)
    train_idx, val_idx, test_idx = [], [], []
    if spec.stratified:
        labels = manifest.labels()
        for cls in range(manifest.num_classes):
            cls_idx = np.flatnonzero(labels == cls)
            rng.shuffle(cls_idx)
            if 0 < len(cls_idx) < 3:
                warnings.warn(
                    f"class {cls} has only {len(cls_idx)} entries; "
                    "all assigned to train"
                )
                train_idx.extend(cls_idx.tolist())
                continue
            tr, va, te = _allocate(cls_idx.tolist(), spec.ratios)
            train_idx.extend(tr)
            val_idx.extend(va)
            test_idx.extend(te)
    else:
        order = np.arange(n)
        rng.shuffle(order)
        train_idx, val_idx, test_idx = _allocate(order.tolist(), spec.ratios)

    def make(split_name, idxs):
        idxs = sorted(idxs)
        return DatasetManifest(
            name=f"{manifest.name}-{split_name}",
            class_names=list(manifest.class_names),
            entries=[manifest.entries[i] for i in idxs],
            source_note=manifest.source_note,
            root=manifest.root,
        )

    return make("train", train_idx), make("val", val_idx), make("test", test_idx)


@dataclass
class Batch:
    images: np.ndarray  # B x channels x H x W
    labels: np.ndarray  # B class ids


class ImageCache:
    """Caches decoded images by absolute path."""

    def __init__(self):
        self._cache: dict[Path, np.ndarray] = {}

    def get(self, path: Path) -> np.ndarray:
        path = Path(path)
        if path not in self._cache:
            self._cache[path] = load_image(path)
        return self._cache[path]


_SHARED_CACHE = ImageCache()


def make_batches(
    manifest: DatasetManifest,
    batch_size: int,
    seed: int = 0,
    shuffle: bool = True,
    epoch: int = 0,
    cache: ImageCache | None = None,
    augment_cfg: AugmentConfig | None = None,
) -> list[Batch]:
    """Deterministic batches; the final partial batch is kept."""
    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be >= 1, got {batch_size}")
    if not manifest.entries:
        raise EmptyDatasetError(f"manifest {manifest.name!r} has no entries")
    cache = cache or _SHARED_CACHE
    order = np.arange(len(manifest.entries))
    rng = np.random.default_rng([seed, epoch])
    if shuffle:
        rng.shuffle(order)
    batches = []
    for start in range(0, len(order), batch_size):
        idxs = order[start:start + batch_size]
        imgs = []
        labels = []
        for i in idxs:
            rel, lab = manifest.entries[i]
            img = cache.get(manifest.resolve(rel))
            if augment_cfg is not None and augment_cfg.enabled:
                img = augment(img, augment_cfg, rng)
            imgs.append(img)
            labels.append(lab)
        batches.append(Batch(np.stack(imgs), np.array(labels, dtype=np.int64)))
    return batches


# ---------------------------------------------------------------------------
# synthetic datasets


def _class_image(
    cls: int,
    num_classes: int,
    size: int,
    rng: np.random.Generator,
    angle_offset: float = 0.0,
    noise: float = 0.15,
) -> np.ndarray:
    """Oriented sinusoidal stripes with a class-dependent angle, frequency
    and color tint, plus per-image jitter and pixel noise."""
    angle = angle_offset + math.pi * cls / num_classes
    freq = 2.0 + 1.5 * (cls % 3)
    phase = rng.uniform(0.0, 2.0 * math.pi)
    yy, xx = np.mgrid[0:size, 0:size] / size
    wave = 0.5 + 0.5 * np.sin(
        2.0 * math.pi * freq * (xx * math.cos(angle) + yy * math.sin(angle)) + phase
    )
    tint_rng = np.random.default_rng(cls * 7919 + int(angle_offset * 1000))
    tint = 0.35 + 0.65 * tint_rng.random(3)
    img = wave[None, :, :] * tint[:, None, None]
    img = img + rng.normal(0.0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(
    out_dir,
    name: str,
    num_classes: int,
    per_class: int,
    image_size: int = 32,
    seed: int = 0,
    angle_offset: float = 0.0,
    noise: float = 0.15,
) -> Path:
    """Write a synthetic PPM dataset + manifest; byte-identical per seed.

    Returns the manifest path.  ``angle_offset`` shifts the whole class
    family so two generated datasets form disjoint tasks.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for cls in range(num_classes):
        for i in range(per_class):
            img = _class_image(cls, num_classes, image_size, rng,
                               angle_offset=angle_offset, noise=noise)
            rel = f"class{cls}_{i:04d}.ppm"
            (out_dir / rel).write_bytes(encode_ppm(img))
            entries.append((rel, cls))
    manifest = DatasetManifest(
        name=name,
        class_names=[f"class{c}" for c in range(num_classes)],
        entries=entries,
        source_note=f"synthetic stripes seed={seed} offset={angle_offset}",
        root=out_dir,
    )
    manifest_path = out_dir / f"{name}.manifest"
    save_manifest(manifest, manifest_path)
    return manifest_path
