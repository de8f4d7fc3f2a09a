"""Multi-modal volumes: synthetic phantoms, container I/O, cropping, augmentation, modality masks."""

from __future__ import annotations

import itertools
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, FormatError, ProtocolError, ShapeError

MODALITIES = ("FLAIR", "T1ce", "T1", "T2")

# label values
BACKGROUND, NCR_NET, EDEMA, ENHANCING = 0, 1, 2, 3
NUM_CLASSES = 4


@dataclass(frozen=True)
class MultiModalVolume:
    modalities: Dict[str, np.ndarray]
    label: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if tuple(self.modalities) != MODALITIES:
            raise ShapeError(f"modalities must be ordered {MODALITIES}, got {tuple(self.modalities)}")
        shape = self.label.shape
        if len(shape) != 3:
            raise ShapeError(f"label must be 3D, got shape {shape}")
        for name, arr in self.modalities.items():
            if arr.shape != shape:
                raise ShapeError(f"modality {name} has shape {arr.shape}, label has {shape}")
            if not np.all(np.isfinite(arr)):
                raise ShapeError(f"modality {name} contains non-finite values")
        if self.label.size and (self.label.min() < 0 or self.label.max() >= NUM_CLASSES):
            raise ShapeError("label values must lie in {0,1,2,3}")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.label.shape

    def stack(self) -> np.ndarray:
        """Modalities as one (4, D, H, W) float32 array in canonical order."""
        return np.stack([self.modalities[m] for m in MODALITIES]).astype(np.float32, copy=False)

    def replace(self, modalities=None, label=None) -> "MultiModalVolume":
        return MultiModalVolume(
            modalities=self.modalities if modalities is None else modalities,
            label=self.label if label is None else label,
            spacing=self.spacing,
        )


def from_arrays(stack: np.ndarray, label: np.ndarray, spacing=(1.0, 1.0, 1.0), normalize: bool = True) -> MultiModalVolume:
    """Build a volume from a (4, D, H, W) array, normalizing each modality unless told not to."""
    stack = np.asarray(stack, dtype=np.float32)
    if stack.ndim != 4 or stack.shape[0] != len(MODALITIES):
        raise ShapeError(f"expected (4, D, H, W) modality stack, got {stack.shape}")
    mods = {}
    for i, name in enumerate(MODALITIES):
        mods[name] = normalize_intensities(stack[i]) if normalize else stack[i].copy()
    return MultiModalVolume(mods, np.asarray(label, dtype=np.uint8), tuple(float(s) for s in spacing))


def normalize_intensities(arr: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Min-max scale voxels under ``mask`` (default: nonzero voxels) to [0, 1]; others become 0."""
    arr = np.asarray(arr, dtype=np.float64)
    if mask is None:
        mask = arr != 0
    out = np.zeros(arr.shape, dtype=np.float32)
    if not mask.any():
        return out
    vals = arr[mask]
    lo, hi = vals.min(), vals.max()
    if hi > lo:
        out[mask] = ((vals - lo) / (hi - lo)).astype(np.float32)
    else:
        out[mask] = 1.0
    return out


# --------------------------------------------------------------------------- masks


@dataclass(frozen=True)
class ModalityMask:
    available: Tuple[bool, bool, bool, bool]

    def __post_init__(self):
        if len(self.available) != len(MODALITIES):
            raise ProtocolError(f"modality mask needs {len(MODALITIES)} entries, got {len(self.available)}")
        object.__setattr__(self, "available", tuple(bool(a) for a in self.available))

    @classmethod
    def full(cls) -> "ModalityMask":
        return cls((True,) * 4)

    @classmethod
    def from_bits(cls, bits: str) -> "ModalityMask":
        """Parse ``"1010"`` (FLAIR, T1ce, T1, T2 order)."""
        if len(bits) != 4 or set(bits) - {"0", "1"}:
            raise ProtocolError(f"bad mask bit string {bits!r}")
        return cls(tuple(b == "1" for b in bits))

    @property
    def bits(self) -> str:
        return "".join("1" if a else "0" for a in self.available)

    @property
    def symbol(self) -> str:
        """Filled/empty circles per modality, FLAIR first."""
        return "".join("●" if a else "○" for a in self.available)

    @property
    def n_available(self) -> int:
        return sum(self.available)

    @property
    def names(self) -> List[str]:
        return [m for m, a in zip(MODALITIES, self.available) if a]

    def require_nonempty(self) -> None:
        if not any(self.available):
            raise ProtocolError("modality mask has no available modality")

    def __str__(self):
        return self.bits


def enumerate_masks() -> List[ModalityMask]:
    """The 15 non-empty modality subsets: singletons, pairs, triples, then the full set.

    Within each size the order is lexicographic over (FLAIR, T1ce, T1, T2), which is
    the column order of the standard BraTS missing-modality table.
    """
    masks = []
    for k in range(1, 5):
        for combo in itertools.combinations(range(4), k):
            masks.append(ModalityMask(tuple(i in combo for i in range(4))))
    return masks


def apply_modality_mask(v: MultiModalVolume, m: ModalityMask) -> MultiModalVolume:
    m.require_nonempty()
    mods = {
        name: arr if keep else np.zeros_like(arr)
        for (name, arr), keep in zip(v.modalities.items(), m.available)
    }
    return v.replace(modalities=mods)


# --------------------------------------------------------------------------- phantoms


@dataclass(frozen=True)
class IntensityProfile:
    """Monotone map of the shared anatomy field: ``bias + gain * t**gamma`` with ``t = a`` or ``1 - a``."""

    gain: float = 1.0
    bias: float = 0.0
    invert: bool = False
    gamma: float = 1.0
    noise_std: float = 0.01

    def __call__(self, anatomy: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        t = 1.0 - anatomy if self.invert else anatomy
        out = self.bias + self.gain * np.power(np.clip(t, 0.0, 1.0), self.gamma)
        if self.noise_std > 0:
            out = out + rng.normal(0.0, self.noise_std, size=anatomy.shape)
        return out


DEFAULT_PROFILES = {
    "FLAIR": IntensityProfile(gain=1.0, bias=0.0, gamma=1.0),
    "T1ce": IntensityProfile(gain=1.0, bias=0.05, invert=True, gamma=0.9),
    "T1": IntensityProfile(gain=0.8, bias=0.1, gamma=1.3),
    "T2": IntensityProfile(gain=1.1, bias=0.0, gamma=0.8),
}

# anatomy field levels per tissue; brain tissue additionally carries a smooth texture
TISSUE_LEVEL = {"brain": 0.35, EDEMA: 0.6, NCR_NET: 0.8, ENHANCING: 1.0}
BRAIN_TEXTURE = 0.1

# lesion shells as fractions of the outer (edema) radii
CORE_FRACTION = 0.65
ENHANCING_FRACTION = 0.35


@dataclass(frozen=True)
class PhantomSpec:
    size: int = 16
    num_lesions: int = 1
    seed: int = 0
    intensity_profiles: Dict[str, IntensityProfile] = field(default_factory=lambda: dict(DEFAULT_PROFILES))

    def validate(self) -> None:
        if int(self.size) != self.size or self.size < 8:
            raise ConfigError(f"phantom size must be an integer >= 8, got {self.size}")
        if int(self.num_lesions) != self.num_lesions or self.num_lesions < 0:
            raise ConfigError(f"num_lesions must be a non-negative integer, got {self.num_lesions}")
        if set(self.intensity_profiles) != set(MODALITIES):
            raise ConfigError(f"intensity_profiles must cover exactly {MODALITIES}")


@dataclass(frozen=True)
class Lesion:
    center: Tuple[int, int, int]
    radii: Tuple[float, float, float]


def lesion_geometry(spec: PhantomSpec) -> List[Lesion]:
    """Lesion centers and edema radii drawn for ``spec`` (the same draws ``generate_phantom`` uses)."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    lo, hi = int(round(0.3 * spec.size)), int(round(0.7 * spec.size))
    lesions = []
    for _ in range(spec.num_lesions):
        center = tuple(int(c) for c in rng.integers(lo, hi + 1, size=3))
        radii = tuple(float(r) for r in rng.uniform(0.14, 0.24, size=3) * spec.size)
        lesions.append(Lesion(center, radii))
    return lesions


def _ellipsoid(shape, center, radii) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, s) for s in shape)]
    dist = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
    return dist <= 1.0


def generate_phantom(spec: PhantomSpec) -> MultiModalVolume:
    """Render nested-ellipsoid lesions in an ellipsoidal head through four intensity profiles.

    Edema shells are painted first, then cores, then enhancing centers, so every
    enhancing voxel lies inside a core and every core voxel inside a lesion.
    """
    spec.validate()
    n = spec.size
    shape = (n, n, n)
    lesions = lesion_geometry(spec)
    # separate stream so lesion draws stay stable if the texture recipe changes
    rng = np.random.default_rng([spec.seed, 1])

    half = (n - 1) / 2.0
    head = _ellipsoid(shape, (half, half, half), (0.47 * n, 0.47 * n, 0.47 * n))

    label = np.zeros(shape, dtype=np.uint8)
    for value, frac in ((EDEMA, 1.0), (NCR_NET, CORE_FRACTION), (ENHANCING, ENHANCING_FRACTION)):
        for les in lesions:
            label[_ellipsoid(shape, les.center, tuple(r * frac for r in les.radii))] = value

    grids = np.meshgrid(*(np.arange(n) / n for _ in range(3)), indexing="ij")
    freqs = rng.uniform(1.0, 3.0, size=3)
    phases = rng.uniform(0.0, 2 * np.pi, size=3)
    texture = np.prod([np.cos(2 * np.pi * f * g + p) for f, g, p in zip(freqs, grids, phases)], axis=0)

    anatomy = np.where(head, TISSUE_LEVEL["brain"] + BRAIN_TEXTURE * texture, 0.0)
    for value in (EDEMA, NCR_NET, ENHANCING):
        anatomy[label == value] = TISSUE_LEVEL[value]
    inside = head | (label > 0)

    mods = {}
    for name in MODALITIES:
        raw = spec.intensity_profiles[name](anatomy, rng)
        mods[name] = normalize_intensities(np.where(inside, raw, 0.0), mask=inside)
    return MultiModalVolume(mods, label)


# --------------------------------------------------------------------------- crop / augment


def preprocess(v: MultiModalVolume, crop: int, rng: np.random.Generator) -> MultiModalVolume:
    """Random ``crop``-cube with one offset shared by all modalities and the label."""
    if crop < 1 or any(crop > s for s in v.shape):
        raise ShapeError(f"crop {crop} does not fit volume of shape {v.shape}")
    offsets = [int(rng.integers(0, s - crop + 1)) for s in v.shape]
    sl = tuple(slice(o, o + crop) for o in offsets)
    mods = {name: arr[sl].copy() for name, arr in v.modalities.items()}
    return v.replace(modalities=mods, label=v.label[sl].copy())


@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5
    rotate_prob: float = 0.5
    scale_jitter: float = 0.1
    shift_jitter: float = 0.05

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(0.0, 0.0, 0.0, 0.0)


def flip(v: MultiModalVolume, axis: int) -> MultiModalVolume:
    mods = {name: np.flip(arr, axis).copy() for name, arr in v.modalities.items()}
    return v.replace(modalities=mods, label=np.flip(v.label, axis).copy())


def rotate90(v: MultiModalVolume, k: int, axes: Tuple[int, int]) -> MultiModalVolume:
    if v.shape[axes[0]] != v.shape[axes[1]] and k % 2:
        raise ShapeError(f"odd quarter-turn in plane {axes} needs equal extents, shape is {v.shape}")
    mods = {name: np.rot90(arr, k, axes).copy() for name, arr in v.modalities.items()}
    return v.replace(modalities=mods, label=np.rot90(v.label, k, axes).copy())


def adjust_intensity(arr: np.ndarray, scale: float, shift: float) -> np.ndarray:
    return np.clip(arr * np.float32(scale) + np.float32(shift), 0.0, 1.0).astype(np.float32)


def augment(v: MultiModalVolume, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> MultiModalVolume:
    """Axis flips, quarter-turn rotations and per-modality intensity jitter.

    Geometry is applied identically to all modalities and the label. The draw
    sequence is fixed regardless of which transforms fire, so one rng state
    always consumes the same number of variates.
    """
    flips = rng.random(3) < cfg.flip_prob
    do_rot = rng.random() < cfg.rotate_prob
    plane = int(rng.integers(0, 3))
    k = int(rng.integers(1, 4))
    scales = rng.uniform(1 - cfg.scale_jitter, 1 + cfg.scale_jitter, size=4)
    shifts = rng.uniform(-cfg.shift_jitter, cfg.shift_jitter, size=4)

    for axis in np.flatnonzero(flips):
        v = flip(v, int(axis))
    if do_rot:
        axes = ((0, 1), (0, 2), (1, 2))[plane]
        if v.shape[axes[0]] == v.shape[axes[1]]:
            v = rotate90(v, k, axes)
    if cfg.scale_jitter or cfg.shift_jitter:
        mods = {
            name: adjust_intensity(arr, s, t)
            for (name, arr), s, t in zip(v.modalities.items(), scales, shifts)
        }
        v = v.replace(modalities=mods)
    return v


# --------------------------------------------------------------------------- container I/O

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


def save_volume(v: MultiModalVolume, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "dims": list(v.shape),
        "dtype": "f32",
        "modalities": list(MODALITIES),
        "label_dtype": "u8",
        "byte_order": "little",
        "spacing": list(v.spacing),
    }
    for name, arr in v.modalities.items():
        (path / f"{name}.bin").write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    (path / "label.bin").write_bytes(np.ascontiguousarray(v.label, dtype="u1").tobytes())
    # sidecar last: a directory without meta.json is an incomplete write
    tmp = path / "meta.json.tmp"
    tmp.write_text(json.dumps(meta, indent=2))
    os.replace(tmp, path / "meta.json")
    return path


def _read_payload(file: Path, dtype: np.dtype, dims, field_name: str) -> np.ndarray:
    if not file.is_file():
        raise FormatError(f"missing payload {file.name}", field=field_name, path=str(file))
    raw = file.read_bytes()
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(raw) != expected:
        raise FormatError(
            f"{file.name}: payload has {len(raw)} bytes, dims {dims} need {expected}",
            field=field_name, path=str(file),
        )
    return np.frombuffer(raw, dtype=dtype).reshape(dims).copy()


def load_volume(path) -> MultiModalVolume:
    path = Path(path)
    meta_file = path / "meta.json"
    if not meta_file.is_file():
        raise FormatError(f"no meta.json in {path}", field="meta.json", path=str(path))
    try:
        meta = json.loads(meta_file.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"meta.json is not valid JSON: {exc}", field="meta.json", path=str(meta_file)) from exc
    if not isinstance(meta, dict):
        raise FormatError("meta.json must hold an object", field="meta.json", path=str(meta_file))

    dims = meta.get("dims")
    if not (isinstance(dims, list) and len(dims) == 3 and all(isinstance(d, int) and d > 0 for d in dims)):
        raise FormatError(f"dims must be three positive integers, got {dims!r}", field="dims", path=str(meta_file))
    for key, allowed in (("dtype", "f32"), ("label_dtype", "u8"), ("byte_order", "little")):
        if meta.get(key) != allowed:
            raise FormatError(f"unsupported {key} {meta.get(key)!r} (expected {allowed!r})", field=key, path=str(meta_file))
    if meta.get("modalities") != list(MODALITIES):
        raise FormatError(f"modalities must be {list(MODALITIES)}, got {meta.get('modalities')!r}",
                          field="modalities", path=str(meta_file))
    spacing = meta.get("spacing", [1.0, 1.0, 1.0])
    if not (isinstance(spacing, list) and len(spacing) == 3):
        raise FormatError(f"spacing must have 3 entries, got {spacing!r}", field="spacing", path=str(meta_file))

    dims = tuple(dims)
    mods = {name: _read_payload(path / f"{name}.bin", _DTYPES["f32"], dims, name) for name in MODALITIES}
    label = _read_payload(path / "label.bin", _DTYPES["u8"], dims, "label")
    try:
        return MultiModalVolume(mods, label, tuple(float(s) for s in spacing))
    except ShapeError as exc:
        raise FormatError(str(exc), field="payload", path=str(path)) from exc


# --------------------------------------------------------------------------- datasets

INDEX_FILE = "index.json"


def save_dataset(volumes: Sequence[MultiModalVolume], out_dir, meta: Optional[dict] = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cases = []
    for i, v in enumerate(volumes):
        name = f"case_{i:04d}"
        save_volume(v, out_dir / name)
        cases.append(name)
    index = {"cases": cases}
    if meta:
        index["meta"] = meta
    (out_dir / INDEX_FILE).write_text(json.dumps(index, indent=2, sort_keys=True))
    return out_dir


def load_dataset(data_dir) -> List[MultiModalVolume]:
    data_dir = Path(data_dir)
    index_file = data_dir / INDEX_FILE
    if not index_file.is_file():
        raise FormatError(f"no {INDEX_FILE} in {data_dir}", field=INDEX_FILE, path=str(data_dir))
    try:
        cases = json.loads(index_file.read_text())["cases"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed {INDEX_FILE}: {exc}", field="cases", path=str(index_file)) from exc
    return [load_volume(data_dir / c) for c in cases]
