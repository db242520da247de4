"""Dataset manifests, PPM/PGM I/O, resizing, augmentation and class-imbalance handling."""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

LABELS = ("neutral", "anger", "disgust", "fear", "happiness", "sadness", "surprise")
NUM_CLASSES = len(LABELS)
LUMA = np.array([0.299, 0.587, 0.114])


class ManifestError(ValueError):
    pass


class PnmError(ValueError):
    pass


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Record:
    path: str
    label: int


@dataclass
class DatasetManifest:
    records: list[Record]
    root: Path = Path(".")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    @property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=NUM_CLASSES)

    def resolve(self, record: Record) -> Path:
        return self.root / record.path

    def to_text(self) -> str:
        return "".join(f"{r.path},{r.label}\n" for r in self.records)


def parse_manifest(text: str, root: Path | str = ".", source: str = "<manifest>") -> DatasetManifest:
    records = []
    for lineno, raw in enumerate(text.split("\n"), start=1):
        line = raw.rstrip("\r")
        if not line.strip():
            continue
        path, sep, label_text = line.rpartition(",")
        if not sep or not path.strip():
            raise ManifestError(f"{source}:{lineno}: expected 'path,label', got {line!r}")
        label_text = label_text.strip()
        if not re.fullmatch(r"[+-]?\d+", label_text):
            kind = "header lines are not allowed" if not records else "label is not an integer"
            raise ManifestError(f"{source}:{lineno}: {kind}: {line!r}")
        label = int(label_text)
        if not 0 <= label < NUM_CLASSES:
            raise ManifestError(f"{source}:{lineno}: label {label} outside 0..{NUM_CLASSES - 1}: {line!r}")
        records.append(Record(path.strip(), label))
    return DatasetManifest(records, Path(root))


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    return parse_manifest(text, root=path.parent, source=str(path))


def save_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    Path(path).write_text(manifest.to_text(), encoding="utf-8", newline="\n")


# ---------------------------------------------------------------------------
# PPM / PGM
# ---------------------------------------------------------------------------


def _parse_pnm_header(data: bytes, magic: bytes) -> tuple[int, int, int, int]:
    if data[:2] != magic:
        raise PnmError(f"bad magic {data[:2]!r}, expected {magic!r}")
    fields: list[int] = []
    pos = 2
    n = len(data)
    while len(fields) < 3:
        if pos >= n:
            raise PnmError("truncated header")
        ch = data[pos:pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            end = data.find(b"\n", pos)
            if end < 0:
                raise PnmError("truncated header")
            pos = end + 1
        else:
            start = pos
            while pos < n and data[pos:pos + 1].isdigit():
                pos += 1
            if start == pos:
                raise PnmError(f"unexpected byte {ch!r} in header")
            fields.append(int(data[start:pos]))
    if pos >= n or not data[pos:pos + 1].isspace():
        raise PnmError("header must end with a single whitespace byte")
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise PnmError(f"invalid dimensions {width}x{height}")
    if maxval != 255:
        raise PnmError(f"only maxval 255 is supported, got {maxval}")
    return width, height, maxval, pos + 1


def _payload(data: bytes, offset: int, count: int) -> np.ndarray:
    if len(data) - offset < count:
        raise PnmError(f"truncated payload: need {count} bytes, have {len(data) - offset}")
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=offset)


def decode_ppm(data: bytes) -> np.ndarray:
    """Binary P6 -> ``3 x H x W`` float array in [0, 1]."""
    width, height, _, offset = _parse_pnm_header(data, b"P6")
    raw = _payload(data, offset, width * height * 3)
    return raw.reshape(height, width, 3).transpose(2, 0, 1) / 255.0


def decode_pgm(data: bytes) -> np.ndarray:
    """Binary P5 -> ``H x W`` float array in [0, 1]."""
    width, height, _, offset = _parse_pnm_header(data, b"P5")
    return _payload(data, offset, width * height).reshape(height, width) / 255.0


def quantize(values: np.ndarray) -> np.ndarray:
    return np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_ppm(pixels: np.ndarray) -> bytes:
    if pixels.ndim != 3 or pixels.shape[0] != 3:
        raise ValueError(f"expected 3 x H x W pixels, got {pixels.shape}")
    _, h, w = pixels.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + quantize(pixels).transpose(1, 2, 0).tobytes()


def encode_pgm(values: np.ndarray) -> bytes:
    if values.ndim != 2:
        raise ValueError(f"expected H x W values, got {values.shape}")
    h, w = values.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + quantize(values).tobytes()


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------


def _source_coords(out_size: int, in_size: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    scale = in_size / out_size
    src = (np.arange(out_size) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, in_size - 1)
    return lo, hi, src - lo


def resize_bilinear(img: np.ndarray, size: int | tuple[int, int]) -> np.ndarray:
    """Bilinear resampling of the two trailing axes with half-pixel centres."""
    out_h, out_w = (size, size) if isinstance(size, int) else size
    h, w = img.shape[-2], img.shape[-1]
    if (out_h, out_w) == (h, w):
        return img.astype(np.float64, copy=True)
    r0, r1, fy = _source_coords(out_h, h)
    c0, c1, fx = _source_coords(out_w, w)
    rows = img[..., r0, :] * (1.0 - fy)[:, None] + img[..., r1, :] * fy[:, None]
    return rows[..., c0] * (1.0 - fx) + rows[..., c1] * fx


def load_image(path: str | os.PathLike, size: int | None = None) -> np.ndarray:
    pixels = decode_ppm(Path(path).read_bytes())
    return resize_bilinear(pixels, size) if size is not None else pixels


def load_dataset(manifest: DatasetManifest, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Decode and resize every record; returns ``(N x 3 x S x S images, labels)``."""
    images = np.empty((len(manifest), 3, size, size))
    for i, record in enumerate(manifest.records):
        images[i] = load_image(manifest.resolve(record), size)
    return images, manifest.labels


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Sample:
    pixels: np.ndarray
    label: int


@dataclass(frozen=True)
class AugmentPolicy:
    flip_prob: float = 0.5
    brightness: float = 0.4
    contrast: float = 0.3
    saturation: float = 0.25
    hue: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip probability must lie in [0, 1]")
        for name in ("brightness", "contrast", "saturation"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} jitter must lie in [0, 1]")
        if not 0.0 <= self.hue <= 0.5:
            raise ValueError("hue jitter must lie in [0, 0.5]")

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0)


def _luma(pixels: np.ndarray) -> np.ndarray:
    return np.tensordot(LUMA, pixels, axes=([0], [0]))


def apply_jitter(pixels: np.ndarray, flip: bool = False, brightness: float = 1.0,
                 contrast: float = 1.0, saturation: float = 1.0, hue: float = 0.0) -> np.ndarray:
    """Deterministic flip + colour jitter in the fixed order brightness, contrast, saturation, hue."""
    out = pixels[..., ::-1] if flip else pixels
    out = np.clip(out * brightness, 0.0, 1.0)
    if contrast != 1.0:
        out = np.clip(contrast * out + (1.0 - contrast) * _luma(out).mean(), 0.0, 1.0)
    if saturation != 1.0:
        out = np.clip(saturation * out + (1.0 - saturation) * _luma(out)[None], 0.0, 1.0)
    if hue != 0.0:
        hsv = rgb_to_hsv(out.transpose(1, 2, 0))
        hsv[..., 0] = np.mod(hsv[..., 0] + hue, 1.0)
        out = np.clip(hsv_to_rgb(hsv).transpose(2, 0, 1), 0.0, 1.0)
    return np.ascontiguousarray(out)


def augment_pixels(pixels: np.ndarray, rng: np.random.Generator, policy: AugmentPolicy) -> np.ndarray:
    flip = rng.random() < policy.flip_prob
    b = rng.uniform(1.0 - policy.brightness, 1.0 + policy.brightness)
    c = rng.uniform(1.0 - policy.contrast, 1.0 + policy.contrast)
    s = rng.uniform(1.0 - policy.saturation, 1.0 + policy.saturation)
    h = rng.uniform(-policy.hue, policy.hue)
    return apply_jitter(pixels, flip, b, c, s, h)


def augment(sample: Sample, rng: np.random.Generator, policy: AugmentPolicy | None = None) -> Sample:
    """Random horizontal flip and colour jitter; the label is untouched."""
    return replace(sample, pixels=augment_pixels(sample.pixels, rng, policy or AugmentPolicy()))


def augment_batch(images: np.ndarray, rng: np.random.Generator, policy: AugmentPolicy) -> np.ndarray:
    return np.stack([augment_pixels(img, rng, policy) for img in images])


# ---------------------------------------------------------------------------
# sampling and rebalancing
# ---------------------------------------------------------------------------


class ImbalancedSampler:
    """I.i.d. draws with replacement, P(j) proportional to 1 / count(label_j)."""

    def __init__(self, labels, rng: np.random.Generator | int | None = None):
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size == 0:
            raise ValueError("sampler needs at least one sample")
        counts = np.bincount(labels)
        weights = 1.0 / counts[labels]
        self.weights = weights
        self.probabilities = weights / weights.sum()
        self.rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)

    def draw(self, n: int) -> np.ndarray:
        return self.rng.choice(len(self.weights), size=n, replace=True, p=self.probabilities)


class ShuffleSampler:
    """Each pass visits every index once in a fresh random order."""

    def __init__(self, size: int, rng: np.random.Generator | int | None = None):
        if size < 1:
            raise ValueError("sampler needs at least one sample")
        self.size = size
        self.rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)

    def draw(self, n: int) -> np.ndarray:
        reps = -(-n // self.size)
        return np.concatenate([self.rng.permutation(self.size) for _ in range(reps)])[:n]


def sampler_next(sampler, n: int) -> np.ndarray:
    return sampler.draw(n)


def rebalance(manifest: DatasetManifest, mode: str, cap: int | None = None, seed: int = 0) -> DatasetManifest:
    """Equalise per-class counts by cyclic duplication or seeded truncation.

    ``oversample`` lifts every class to the largest count (or ``cap``);
    ``undersample`` cuts every class to the smallest count (or ``cap``).
    Classes above the target are cut in both modes. Output is grouped by label.
    """
    if len(manifest) == 0:
        raise ValueError("cannot rebalance an empty manifest")
    if cap is not None and cap < 1:
        raise ValueError(f"cap must be >= 1, got {cap}")
    rng = np.random.default_rng(seed)
    by_class = {c: [r for r in manifest.records if r.label == c] for c in range(NUM_CLASSES)}
    present = [len(v) for v in by_class.values() if v]
    if mode == "oversample":
        target = cap if cap is not None else max(present)
    elif mode == "undersample":
        target = cap if cap is not None else min(present)
    else:
        raise ValueError(f"unknown rebalance mode {mode!r}")

    out: list[Record] = []
    for c in range(NUM_CLASSES):
        recs = by_class[c]
        if not recs:
            continue
        if len(recs) > target:
            keep = np.sort(rng.permutation(len(recs))[:target])
            out.extend(recs[i] for i in keep)
        elif mode == "oversample":
            out.extend(recs[i % len(recs)] for i in range(target))
        else:
            out.extend(recs)
    return DatasetManifest(out, manifest.root)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

_CLASS_HUES = np.arange(NUM_CLASSES) / NUM_CLASSES


def _pattern(label: int, size: int, rng: np.random.Generator) -> np.ndarray:
    v, u = np.meshgrid((np.arange(size) + 0.5) / size, (np.arange(size) + 0.5) / size, indexing="ij")
    phase = rng.uniform(0, 2 * np.pi)
    cx, cy = 0.5 + rng.uniform(-0.08, 0.08, size=2)
    r = np.hypot(u - cx, v - cy)
    if label == 0:
        p = np.sin(2 * np.pi * 4 * v + phase) > 0
    elif label == 1:
        p = np.sin(2 * np.pi * 4 * u + phase) > 0
    elif label == 2:
        p = np.sin(2 * np.pi * 3 * (u + v) + phase) > 0
    elif label == 3:
        p = (np.floor(u * 4 + cx) + np.floor(v * 4 + cy)) % 2 == 0
    elif label == 4:
        p = r < 0.3
    elif label == 5:
        p = np.abs(r - 0.3) < 0.08
    else:
        p = (np.abs(u - cx) < 0.1) | (np.abs(v - cy) < 0.1)
    return p.astype(np.float64)


def synth_image(label: int, size: int, rng: np.random.Generator, noise: float = 0.05) -> np.ndarray:
    color = hsv_to_rgb(np.array([_CLASS_HUES[label], 0.8, 0.9]))
    pattern = _pattern(label, size, rng)
    img = 0.1 + 0.8 * pattern[None] * color[:, None, None] + 0.1 * (1 - pattern[None]) * color[:, None, None]
    img = img + rng.normal(0.0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def synth_dataset(out_dir: str | os.PathLike, per_class: int, size: int = 40, seed: int = 0,
                  classes: int = NUM_CLASSES) -> DatasetManifest:
    """Write ``classes * per_class`` separable PPM images plus ``manifest.csv`` under ``out_dir``."""
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    if not 1 <= classes <= NUM_CLASSES:
        raise ValueError(f"classes must lie in 1..{NUM_CLASSES}")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for label in range(classes):
        for i in range(per_class):
            rel = f"images/c{label}_{i:04d}.ppm"
            (out / rel).write_bytes(encode_ppm(synth_image(label, size, rng)))
            records.append(Record(rel, label))
    manifest = DatasetManifest(records, out)
    save_manifest(manifest, out / "manifest.csv")
    return manifest
