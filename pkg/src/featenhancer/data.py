"""Synthetic low-light shape dataset, its binary archive, and PPM image I/O.

Archive layout (all integers little-endian)::

    b"FELD" | version u32 | sha256(spec json) 32B | spec-json length u32 | spec json
    | split u32 (0 train, 1 val) | count u32 | channels u32 | height u32 | width u32
    | count x [label u32 | gamma f64 | brightness f64 | noise_seed u64 | C*H*W f64]
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

CLASS_NAMES = ("circle", "square", "triangle", "cross")
MAGIC = b"FELD"
VERSION = 1
SPLITS = ("train", "val")
_SUPERSAMPLE = 4


class ArchiveError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int = 4
    image_size: int = 64
    train_count: int = 2000
    val_count: int = 500
    gamma_range: tuple[float, float] = (2.0, 5.0)
    brightness_range: tuple[float, float] = (0.05, 0.3)
    noise_sigma: float = 0.02
    seed: int = 7

    def __post_init__(self):
        object.__setattr__(self, "gamma_range", tuple(float(v) for v in self.gamma_range))
        object.__setattr__(self, "brightness_range", tuple(float(v) for v in self.brightness_range))
        if not 1 <= self.num_classes <= len(CLASS_NAMES):
            raise ValueError(f"num_classes must be in [1, {len(CLASS_NAMES)}]")
        if self.image_size < 8:
            raise ValueError("image_size must be at least 8")
        if self.train_count < 1 or self.val_count < 1:
            raise ValueError("train_count and val_count must be positive")
        for name in ("gamma_range", "brightness_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} needs 0 < low <= high, got {(lo, hi)}")
        if self.gamma_range[0] < 1:
            raise ValueError("gamma must be >= 1")
        if self.brightness_range[1] > 1:
            raise ValueError("brightness must be <= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must fit in 64 bits")

    def to_json(self) -> str:
        d = asdict(self)
        d["gamma_range"] = list(self.gamma_range)
        d["brightness_range"] = list(self.brightness_range)
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "DatasetSpec":
        d = json.loads(text)
        known = {f.name for f in fields(cls)}
        if set(d) - known:
            raise ArchiveError(f"unknown DatasetSpec keys {sorted(set(d) - known)}")
        return cls(**d)

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_json().encode()).digest()


@dataclass
class Sample:
    image: np.ndarray
    label: int
    gamma: float
    brightness: float
    noise_seed: int


@dataclass
class Dataset:
    """Images (N, 3, S, S) in [0, 1] with labels and the degradation record per sample."""

    images: np.ndarray
    labels: np.ndarray
    gammas: np.ndarray
    brightness: np.ndarray
    noise_seeds: np.ndarray
    spec: DatasetSpec = field(default_factory=DatasetSpec)
    split: str = "train"

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.images[i], int(self.labels[i]), float(self.gammas[i]),
                      float(self.brightness[i]), int(self.noise_seeds[i]))

    def equals(self, other: "Dataset") -> bool:
        return (self.spec == other.spec and self.split == other.split
                and all(np.array_equal(getattr(self, k), getattr(other, k))
                        for k in ("images", "labels", "gammas", "brightness", "noise_seeds")))


# --------------------------------------------------------------------------
# rendering and degradation
# --------------------------------------------------------------------------

def _inside(class_id: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Membership in the unit-radius shape, in shape-local coordinates."""
    if class_id == 0:
        return u * u + v * v <= 1.0
    if class_id == 1:
        return np.maximum(np.abs(u), np.abs(v)) <= 0.75
    if class_id == 2:
        # equilateral triangle inscribed in the unit circle, apex up
        s3 = np.sqrt(3.0)
        return (v <= 1.0) & (v >= -0.5) & (s3 * u - v >= -1.0) & (-s3 * u - v >= -1.0)
    if class_id == 3:
        return ((np.abs(u) <= 0.3) & (np.abs(v) <= 0.9)) | ((np.abs(v) <= 0.3) & (np.abs(u) <= 0.9))
    raise ValueError(f"unknown class id {class_id}")


def _colors(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    dark, bright = rng.uniform(0.3, 0.45), rng.uniform(0.7, 0.95)
    levels = (bright, dark) if rng.random() < 0.5 else (dark, bright)
    shape, bg = (np.clip(lv + rng.uniform(-0.05, 0.05, 3), 0.3, 1.0) for lv in levels)
    return shape, bg


def render_shape(class_id: int, size: int, rng: np.random.Generator,
                 num_classes: int = len(CLASS_NAMES)) -> np.ndarray:
    """Anti-aliased filled shape on a flat background, 3 x size x size in [0.3, 1]."""
    if not 0 <= class_id < num_classes:
        raise ValueError(f"class_id {class_id} out of range for {num_classes} classes")
    radius = rng.uniform(0.22, 0.34) * size
    margin = radius + 1.0
    cx, cy = rng.uniform(margin, size - margin, 2)
    theta = rng.uniform(0.0, 2 * np.pi)
    shape_color, bg_color = _colors(rng)

    # coverage from a regular supersampling grid
    offs = (np.arange(_SUPERSAMPLE) + 0.5) / _SUPERSAMPLE
    coords = (np.arange(size)[:, None] + offs[None, :]).ravel()
    ys, xs = np.meshgrid(coords, coords, indexing="ij")
    dx, dy = (xs - cx) / radius, (cy - ys) / radius
    c, s = np.cos(theta), np.sin(theta)
    u, v = c * dx + s * dy, -s * dx + c * dy
    inside = _inside(class_id, u, v).astype(float)
    cover = inside.reshape(size, _SUPERSAMPLE, size, _SUPERSAMPLE).mean(axis=(1, 3))
    return cover[None] * shape_color[:, None, None] + (1.0 - cover[None]) * bg_color[:, None, None]


def darken(image: np.ndarray, gamma: float, brightness: float, noise_sigma: float,
           rng: np.random.Generator | None = None) -> np.ndarray:
    """clamp(brightness * image**gamma + N(0, noise_sigma), 0, 1)."""
    if gamma < 1:
        raise ValueError(f"gamma must be >= 1, got {gamma}")
    if not 0 < brightness <= 1:
        raise ValueError(f"brightness must be in (0, 1], got {brightness}")
    out = brightness * np.power(image, gamma)
    if noise_sigma > 0:
        if rng is None:
            raise ValueError("a generator is required when noise_sigma > 0")
        out = out + rng.normal(0.0, noise_sigma, size=image.shape)
    return np.clip(out, 0.0, 1.0)


def _make_sample(spec: DatasetSpec, split: int, index: int) -> Sample:
    rng = np.random.default_rng([spec.seed, split, index])
    label = int(rng.integers(spec.num_classes))
    bright = render_shape(label, spec.image_size, rng, spec.num_classes)
    gamma = float(rng.uniform(*spec.gamma_range))
    brightness = float(rng.uniform(*spec.brightness_range))
    noise_seed = int(rng.integers(2 ** 63))
    dark = darken(bright, gamma, brightness, spec.noise_sigma, np.random.default_rng(noise_seed))
    return Sample(dark, label, gamma, brightness, noise_seed)


def generate_split(spec: DatasetSpec, split: str) -> Dataset:
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}")
    sid = SPLITS.index(split)
    count = spec.train_count if split == "train" else spec.val_count
    samples = [_make_sample(spec, sid, i) for i in range(count)]
    return Dataset(
        images=np.stack([s.image for s in samples]),
        labels=np.array([s.label for s in samples], dtype=np.int64),
        gammas=np.array([s.gamma for s in samples]),
        brightness=np.array([s.brightness for s in samples]),
        noise_seeds=np.array([s.noise_seed for s in samples], dtype=np.uint64),
        spec=spec, split=split)


def generate_dataset(spec: DatasetSpec, out_dir: str | Path | None = None) -> tuple[Dataset, Dataset]:
    """Train and val splits from independent per-sample streams; optionally persisted."""
    train, val = generate_split(spec, "train"), generate_split(spec, "val")
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_archive(train, out / "train.feld")
        write_archive(val, out / "val.feld")
    return train, val


# --------------------------------------------------------------------------
# archive
# --------------------------------------------------------------------------

def _record_dtype(c: int, h: int, w: int) -> np.dtype:
    return np.dtype([("label", "<u4"), ("gamma", "<f8"), ("brightness", "<f8"),
                     ("noise_seed", "<u8"), ("image", "<f8", (c, h, w))])


def archive_bytes(ds: Dataset) -> bytes:
    spec_json = ds.spec.to_json().encode()
    n, c, h, w = ds.images.shape
    header = (MAGIC + struct.pack("<I", VERSION) + ds.spec.digest()
              + struct.pack("<I", len(spec_json)) + spec_json
              + struct.pack("<5I", SPLITS.index(ds.split), n, c, h, w))
    rec = np.zeros(n, dtype=_record_dtype(c, h, w))
    rec["label"] = ds.labels
    rec["gamma"] = ds.gammas
    rec["brightness"] = ds.brightness
    rec["noise_seed"] = ds.noise_seeds
    rec["image"] = ds.images
    return header + rec.tobytes()


def write_archive(ds: Dataset, path: str | Path) -> None:
    path = Path(path)
    try:
        path.write_bytes(archive_bytes(ds))
    except OSError as exc:
        raise OSError(f"cannot write archive {path}: {exc}") from exc


def parse_archive(buf: bytes) -> Dataset:
    if len(buf) < 44 or buf[:4] != MAGIC:
        raise ArchiveError("not a FELD archive (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise ArchiveError(f"unsupported archive version {version}")
    digest = buf[8:40]
    (jlen,) = struct.unpack_from("<I", buf, 40)
    pos = 44 + jlen
    if len(buf) < pos + 20:
        raise ArchiveError("truncated archive header")
    spec_json = buf[44:pos]
    if hashlib.sha256(spec_json).digest() != digest:
        raise ArchiveError("spec digest mismatch")
    spec = DatasetSpec.from_json(spec_json.decode())
    split, n, c, h, w = struct.unpack_from("<5I", buf, pos)
    pos += 20
    if split >= len(SPLITS):
        raise ArchiveError(f"bad split id {split}")
    dtype = _record_dtype(c, h, w)
    if len(buf) - pos != n * dtype.itemsize:
        raise ArchiveError(f"payload has {len(buf) - pos} bytes, expected {n * dtype.itemsize}")
    rec = np.frombuffer(buf, dtype=dtype, count=n, offset=pos)
    return Dataset(
        images=rec["image"].astype(np.float64),
        labels=rec["label"].astype(np.int64),
        gammas=rec["gamma"].astype(np.float64),
        brightness=rec["brightness"].astype(np.float64),
        noise_seeds=rec["noise_seed"].astype(np.uint64),
        spec=spec, split=SPLITS[split])


def read_archive(path: str | Path) -> Dataset:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read archive {path}: {exc}") from exc
    try:
        return parse_archive(buf)
    except ArchiveError as exc:
        raise ArchiveError(f"{path}: {exc}") from exc


# --------------------------------------------------------------------------
# images
# --------------------------------------------------------------------------

def _minmax(x: np.ndarray) -> np.ndarray:
    lo, hi = x.min(), x.max()
    if hi - lo <= 0:
        return np.full_like(x, 0.5)
    return (x - lo) / (hi - lo)


def tensor_to_image(t) -> np.ndarray:
    """3 x H x W visualisation in [0, 1] of a C x H x W array.

    RGB inputs are min-max normalised per channel; anything else becomes the
    normalised channel-mean heat map repeated over three channels.  A
    zero-range channel maps to 0.5.
    """
    x = np.asarray(getattr(t, "data", t), dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"expected C x H x W, got shape {x.shape}")
    if x.shape[0] == 3:
        return np.stack([_minmax(ch) for ch in x])
    heat = _minmax(x.mean(axis=0))
    return np.repeat(heat[None], 3, axis=0)


def write_ppm(image, path: str | Path | None = None, normalize: bool = False) -> bytes:
    """Encode a 3 x H x W image as binary PPM (P6).

    Values in [0, 1] map to 0..255; ``normalize=True`` first stretches the
    global [min, max] to [0, 1].
    """
    x = np.asarray(getattr(image, "data", image), dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != 3:
        raise ValueError(f"write_ppm needs a 3 x H x W image, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("write_ppm: non-finite pixel values")
    if normalize:
        x = _minmax(x)
    pix = np.rint(np.clip(x, 0.0, 1.0) * 255).astype(np.uint8)
    _, h, w = x.shape
    data = f"P6\n{w} {h}\n255\n".encode() + pix.transpose(1, 2, 0).tobytes()
    if path is not None:
        Path(path).write_bytes(data)
    return data


def _ppm_tokens(buf: bytes, count: int) -> tuple[list[int], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ValueError("malformed PPM header")
        tokens.append(buf[start:pos])
    return tokens, pos


def read_ppm(data: bytes | str | Path) -> np.ndarray:
    """Decode a binary P6 PPM into a 3 x H x W float array in [0, 1]."""
    buf = data if isinstance(data, (bytes, bytearray)) else Path(data).read_bytes()
    tokens, pos = _ppm_tokens(bytes(buf), 4)
    if tokens[0] != b"P6":
        raise ValueError(f"malformed PPM header: magic {tokens[0]!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ValueError("malformed PPM header: non-integer field") from exc
    if w < 1 or h < 1 or not 0 < maxval < 256:
        raise ValueError(f"malformed PPM header: {w}x{h} maxval {maxval}")
    pos += 1  # single whitespace byte before the raster
    raster = buf[pos:pos + 3 * w * h]
    if len(raster) != 3 * w * h:
        raise ValueError("truncated PPM raster")
    pix = np.frombuffer(bytes(raster), dtype=np.uint8).reshape(h, w, 3)
    return pix.transpose(2, 0, 1).astype(np.float64) / maxval
