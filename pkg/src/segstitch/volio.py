"""Volume files, synthetic phantoms and crop/normalize preprocessing.

File layout: one JSON header line ``{"shape": [C, H, W, D], "spacing": [sx, sy,
sz], "classes": K, "dtype": "f32"}`` terminated by ``\\n``, then the image as raw
little-endian floats, then the labels as raw unsigned bytes (H*W*D of them).
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, CorruptFileError, DimensionError, FormatError, ValidationError

IMAGE_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


@dataclass
class VolumeSample:
    image: np.ndarray  # [C, H, W, D]
    label: np.ndarray  # [H, W, D] uint8
    spacing: tuple = (1.0, 1.0, 1.0)
    num_classes: int = 2

    def __post_init__(self):
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.image.ndim != 4:
            raise DimensionError(f"image must be [C, H, W, D], got {self.image.shape}")
        if self.label.shape != self.image.shape[1:]:
            raise DimensionError(f"label {self.label.shape} does not match image {self.image.shape}")
        if len(self.spacing) != 3:
            raise DimensionError("spacing needs three entries")
        if self.label.size and int(self.label.max()) >= self.num_classes:
            raise ValidationError(f"label value {int(self.label.max())} >= classes {self.num_classes}")

    @property
    def shape(self) -> tuple:
        return self.label.shape


def write_volume(sample: VolumeSample, path) -> None:
    name = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}.get(sample.image.dtype)
    if name is None:
        raise FormatError(f"unsupported image dtype {sample.image.dtype}")
    header = {"shape": list(sample.image.shape), "spacing": list(sample.spacing),
              "classes": int(sample.num_classes), "dtype": name}
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode() + b"\n")
        f.write(sample.image.astype(IMAGE_DTYPES[name], copy=False).tobytes())
        f.write(sample.label.astype(np.uint8, copy=False).tobytes())


def read_volume(path) -> VolumeSample:
    with open(path, "rb") as f:
        line = f.readline()
        payload = f.read()
    try:
        header = json.loads(line)
        shape = tuple(int(s) for s in header["shape"])
        spacing = tuple(header["spacing"])
        classes = int(header["classes"])
        name = header["dtype"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptFileError(f"{path}: unreadable header") from exc
    if name not in IMAGE_DTYPES:
        raise FormatError(f"{path}: unknown dtype {name!r}")
    if len(shape) != 4:
        raise CorruptFileError(f"{path}: shape {shape} is not [C, H, W, D]")
    dt = IMAGE_DTYPES[name]
    n_img = int(np.prod(shape)) * dt.itemsize
    n_lab = int(np.prod(shape[1:]))
    if len(payload) != n_img + n_lab:
        raise CorruptFileError(f"{path}: payload has {len(payload)} bytes, header implies {n_img + n_lab}")
    image = np.frombuffer(payload[:n_img], dtype=dt).astype(dt.newbyteorder("="), copy=True).reshape(shape)
    label = np.frombuffer(payload[n_img:], dtype=np.uint8).copy().reshape(shape[1:])
    if label.size and int(label.max()) >= classes:
        raise ValidationError(f"{path}: label value {int(label.max())} >= classes {classes}")
    return VolumeSample(image, label, spacing, classes)


# ---------------------------------------------------------------------------
# phantoms


@dataclass
class Primitive:
    kind: str  # "ellipsoid" | "tube" | "shell"
    center: tuple
    label: int
    radii: tuple = (1.0, 1.0, 1.0)
    # tube: half-length vector from center to each end
    axis: tuple = (0.0, 0.0, 0.0)
    radius: float = 1.0
    # shell: wall thickness measured inward from ``radii``
    thickness: float = 1.0

    @classmethod
    def from_dict(cls, d: dict) -> "Primitive":
        d = dict(d)
        for key in ("center", "radii", "axis"):
            if key in d:
                d[key] = tuple(float(v) for v in d[key])
        return cls(**d)

    def extent(self) -> tuple[np.ndarray, np.ndarray]:
        c = np.asarray(self.center, float)
        if self.kind in ("ellipsoid", "shell"):
            r = np.asarray(self.radii, float)
            return c - r, c + r
        if self.kind == "tube":
            a = np.abs(np.asarray(self.axis, float))
            return c - a - self.radius, c + a + self.radius
        raise ConfigurationError(f"unknown primitive kind {self.kind!r}")

    def mask(self, coords: tuple) -> np.ndarray:
        x, y, z = coords
        cx, cy, cz = self.center
        if self.kind in ("ellipsoid", "shell"):
            rx, ry, rz = self.radii
            q = ((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2 + ((z - cz) / rz) ** 2
            inside = q <= 1.0
            if self.kind == "ellipsoid":
                return inside
            t = self.thickness
            ix, iy, iz = (max(r - t, 1e-9) for r in self.radii)
            inner = ((x - cx) / ix) ** 2 + ((y - cy) / iy) ** 2 + ((z - cz) / iz) ** 2 <= 1.0
            return inside & ~inner
        if self.kind == "tube":
            a = np.asarray(self.axis, float)
            length2 = float(a @ a)
            px, py, pz = x - cx, y - cy, z - cz
            if length2 == 0:
                s = 0.0
            else:
                s = np.clip((px * a[0] + py * a[1] + pz * a[2]) / length2, -1.0, 1.0)
            dx, dy, dz = px - s * a[0], py - s * a[1], pz - s * a[2]
            return dx * dx + dy * dy + dz * dz <= self.radius ** 2
        raise ConfigurationError(f"unknown primitive kind {self.kind!r}")


@dataclass
class PhantomSpec:
    canvas: tuple
    primitives: list = field(default_factory=list)
    # index 0 is background
    intensities: tuple = (0.0, 1.0, 2.0)
    noise: float = 0.0
    seed: int = 0
    spacing: tuple = (1.0, 1.0, 1.0)
    num_classes: int | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        d["canvas"] = tuple(int(v) for v in d["canvas"])
        d["primitives"] = [p if isinstance(p, Primitive) else Primitive.from_dict(p) for p in d.get("primitives", [])]
        if "intensities" in d:
            d["intensities"] = tuple(float(v) for v in d["intensities"])
        return cls(**d)

    def to_dict(self) -> dict:
        import dataclasses

        return dataclasses.asdict(self)

    @property
    def classes(self) -> int:
        if self.num_classes is not None:
            return self.num_classes
        return len(self.intensities)


def generate_phantom(spec: PhantomSpec) -> VolumeSample:
    """Rasterize primitives in order (later ones overwrite), then add Gaussian noise to the image."""
    canvas = tuple(spec.canvas)
    if len(canvas) != 3 or min(canvas) < 1:
        raise ConfigurationError(f"canvas {canvas} must be three positive extents")
    k = spec.classes
    if len(spec.intensities) < k:
        raise ConfigurationError(f"{len(spec.intensities)} intensities for {k} classes")
    coords = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in canvas), indexing="ij")
    label = np.zeros(canvas, dtype=np.uint8)
    for i, prim in enumerate(spec.primitives):
        if not 0 <= prim.label < k:
            raise ConfigurationError(f"primitive {i} label {prim.label} outside [0, {k})")
        lo, hi = prim.extent()
        if np.any(lo < -0.5) or np.any(hi > np.asarray(canvas) - 0.5):
            raise ConfigurationError(f"primitive {i} ({prim.kind}) extends outside canvas {canvas}")
        label[prim.mask(coords)] = prim.label
    image = np.asarray(spec.intensities, dtype=np.float64)[label]
    if spec.noise > 0:
        image = image + spec.noise * np.random.default_rng(spec.seed).standard_normal(canvas)
    return VolumeSample(image[None].astype(np.float32), label, spec.spacing, k)


def benchmark_phantom_specs(n: int, seed: int = 0, canvas: tuple = (64, 64, 32), noise: float = 0.1) -> list:
    """Reference phantoms: a blob (class 1) crossed by a long thin tube (class 2).

    Positions, radii and the tube direction are jittered per volume.
    """
    rng = np.random.default_rng(seed)
    cx, cy, cz = (np.asarray(canvas, float) - 1) / 2
    sx, sy, sz = np.asarray(canvas, float) / np.array([64.0, 64.0, 32.0])
    specs = []
    for i in range(n):
        blob = Primitive("ellipsoid", (cx + rng.uniform(-6, 6) * sx, cy + rng.uniform(-6, 6) * sy,
                                       cz + rng.uniform(-2, 2) * sz), 1,
                         radii=(rng.uniform(9, 13) * sx, rng.uniform(9, 13) * sy, rng.uniform(5, 8) * sz))
        theta = rng.uniform(-0.5, 0.5)
        half = 24.0 * sx
        tube = Primitive("tube", (cx + rng.uniform(-3, 3) * sx, cy + rng.uniform(-8, 8) * sy,
                                  cz + rng.uniform(-2, 2) * sz), 2,
                         axis=(half * np.cos(theta), half * np.sin(theta), 0.0),
                         radius=float(rng.uniform(2.5, 3.5) * min(sx, sz)))
        specs.append(PhantomSpec(tuple(canvas), [blob, tube], (0.0, 1.0, 2.0), noise, seed * 1000 + i))
    return specs


# ---------------------------------------------------------------------------
# preprocessing


def crop_offsets(shape: tuple, crop: tuple, rng: np.random.Generator | None) -> tuple:
    if len(crop) != len(shape):
        raise ConfigurationError(f"crop {crop} and volume {shape} differ in rank")
    for axis, (n, c) in enumerate(zip(shape, crop)):
        if c > n or c < 1:
            raise ConfigurationError(f"crop {tuple(crop)} does not fit volume {tuple(shape)} on axis {axis}")
    if rng is None:
        return tuple((n - c) // 2 for n, c in zip(shape, crop))
    return tuple(int(rng.integers(0, n - c + 1)) for n, c in zip(shape, crop))


def normalize_foreground(image: np.ndarray, percentile: float = 5.0) -> np.ndarray:
    """Zero mean / unit variance per channel over voxels above the given intensity percentile."""
    out = np.empty(image.shape, dtype=np.float32)
    for c in range(image.shape[0]):
        ch = image[c].astype(np.float64)
        fg = ch[ch > np.percentile(ch, percentile)]
        if fg.size == 0:
            fg = ch.reshape(-1)
        mu = fg.mean()
        sd = fg.std()
        out[c] = (ch - mu) / (sd if sd > 0 else 1.0)
    return out


def preprocess(sample: VolumeSample, crop: tuple, seed: int | None = None, mode: str = "train") -> VolumeSample:
    """Random (train) or center (eval) crop, then foreground normalization; labels are only sliced."""
    if mode not in ("train", "eval"):
        raise ConfigurationError(f"mode must be 'train' or 'eval', got {mode!r}")
    crop = tuple(int(c) for c in crop)
    rng = np.random.default_rng(seed) if mode == "train" else None
    off = crop_offsets(sample.shape, crop, rng)
    sl = tuple(slice(o, o + c) for o, c in zip(off, crop))
    image = normalize_foreground(sample.image[(slice(None),) + sl])
    return VolumeSample(image, sample.label[sl].copy(), sample.spacing, sample.num_classes)


# ---------------------------------------------------------------------------
# manifests


def write_manifest(entries: list, path) -> None:
    with open(path, "w") as f:
        json.dump(entries, f, indent=1)


def read_manifest(path) -> list:
    """Entries ``{"path", "split"}`` with paths resolved against the manifest directory."""
    path = Path(path)
    with open(path) as f:
        entries = json.load(f)
    if not isinstance(entries, list) or not entries:
        raise ConfigurationError(f"{path}: manifest must be a non-empty JSON list")
    out = []
    for e in entries:
        if "path" not in e or "split" not in e:
            raise ConfigurationError(f"{path}: manifest entry {e!r} lacks path/split")
        p = Path(e["path"])
        out.append({**e, "path": str(p if p.is_absolute() else path.parent / p)})
    return out


def emit_dataset(specs: list, splits: list, out_dir) -> Path:
    """Write one volume per spec plus ``manifest.json``; returns the manifest path."""
    out_dir = Path(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i, (spec, split) in enumerate(zip(specs, splits)):
        name = f"phantom_{i:03d}.vol"
        write_volume(generate_phantom(spec), out_dir / name)
        entries.append({"path": name, "split": split, "seed": spec.seed})
    manifest = out_dir / "manifest.json"
    write_manifest(entries, manifest)
    return manifest
