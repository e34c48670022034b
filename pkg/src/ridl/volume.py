"""CT volume data model, raw volume I/O, HU thresholding and synthetic phantoms.

Volumes are stored as a detached pair of files::

    <name>.vol      raw little-endian voxels, x fastest, then y, then z
    <name>.volhdr   TOML header: dims = [z, y, x], spacing_mm = [sz, sy, sx], dtype = "int16le"

Masks use the same layout with ``dtype = "uint8"``; stacked local feature maps
add a leading channel axis (``dims = [L, z, y, x]``, ``dtype = "float32le"``).
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import tomli
from scipy import ndimage

from .errors import ShapeMismatchError, VolumeFormatError

EAT_LOW_HU = -250.0
EAT_HIGH_HU = 0.0

_DTYPES = {
    "int16le": np.dtype("<i2"),
    "uint8": np.dtype("u1"),
    "float32le": np.dtype("<f4"),
}


@dataclass(frozen=True)
class CtVolume:
    """Dense (depth, height, width) grid of Hounsfield units with spacing in mm."""

    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        vox = np.asarray(self.voxels, dtype=np.float64)
        if vox.ndim != 3 or min(vox.shape) < 1:
            raise ShapeMismatchError(f"volume must be a non-empty 3D grid, got shape {vox.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(s > 0 and np.isfinite(s) for s in spacing):
            raise ValueError(f"spacing must be three positive reals, got {self.spacing}")
        if not np.all(np.isfinite(vox)):
            raise ValueError("volume contains non-finite values")
        object.__setattr__(self, "voxels", vox)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.voxels.shape)


@dataclass(frozen=True)
class RoiMask:
    voxels: np.ndarray

    def __post_init__(self):
        vox = np.asarray(self.voxels)
        if vox.ndim != 3:
            raise ShapeMismatchError(f"mask must be 3D, got shape {vox.shape}")
        if vox.dtype != np.uint8:
            if not np.all((vox == 0) | (vox == 1)):
                raise ValueError("mask values must be 0 or 1")
            vox = vox.astype(np.uint8)
        elif vox.max(initial=0) > 1:
            raise ValueError("mask values must be 0 or 1")
        object.__setattr__(self, "voxels", vox)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.voxels.shape)

    @property
    def count(self) -> int:
        return int(self.voxels.sum(dtype=np.int64))


@dataclass(frozen=True)
class Sample:
    id: str
    volume: CtVolume
    mask: RoiMask
    label: int

    def __post_init__(self):
        if self.volume.dims != self.mask.dims:
            raise ShapeMismatchError(
                f"sample {self.id!r}: volume dims {self.volume.dims} != mask dims {self.mask.dims}"
            )
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")


# --------------------------------------------------------------------------
# raw file I/O


def _stem(path) -> Path:
    path = Path(path)
    if path.suffix in (".vol", ".volhdr"):
        return path.with_suffix("")
    return path


def with_ext(stem, ext: str) -> Path:
    """``stem`` plus ``ext``; unlike ``with_suffix`` this keeps dots already in the name."""
    stem = Path(stem)
    return stem.with_name(stem.name + ext)


def _format_header(dims: Sequence[int], spacing: Sequence[float] | None, dtype: str) -> str:
    lines = [f"dims = [{', '.join(str(int(d)) for d in dims)}]"]
    if spacing is not None:
        lines.append(f"spacing_mm = [{', '.join(repr(float(s)) for s in spacing)}]")
    lines.append(f'dtype = "{dtype}"')
    return "\n".join(lines) + "\n"


def write_raw(path, array: np.ndarray, dtype: str, spacing: Sequence[float] | None = None) -> Path:
    """Write ``array`` as ``<stem>.vol`` + ``<stem>.volhdr``; returns the stem."""
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    np_dtype = _DTYPES[dtype]
    arr = np.asarray(array)
    if np_dtype.kind in "iu":
        info = np.iinfo(np_dtype)
        if np.any(arr != np.round(arr)) or arr.min(initial=0) < info.min or arr.max(initial=0) > info.max:
            raise VolumeFormatError(f"values not representable as {dtype}")
    payload = np.ascontiguousarray(arr.astype(np_dtype))
    with open(with_ext(stem, ".vol"), "wb") as fh:
        fh.write(payload.tobytes(order="C"))
    with_ext(stem, ".volhdr").write_text(_format_header(arr.shape, spacing, dtype))
    return stem


def read_header(path) -> dict:
    hdr_path = with_ext(_stem(path), ".volhdr")
    try:
        header = tomli.loads(hdr_path.read_text())
    except FileNotFoundError:
        raise VolumeFormatError(f"missing header {hdr_path}") from None
    except (tomli.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise VolumeFormatError(f"corrupt header {hdr_path}: {exc}") from None
    dims = header.get("dims")
    if (
        not isinstance(dims, list)
        or len(dims) not in (3, 4)
        or not all(isinstance(d, int) and not isinstance(d, bool) for d in dims)
    ):
        raise VolumeFormatError(f"{hdr_path}: 'dims' must be a list of 3 or 4 integers")
    if any(d <= 0 for d in dims):
        raise VolumeFormatError(f"{hdr_path}: non-positive dims {dims}")
    if header.get("dtype") not in _DTYPES:
        raise VolumeFormatError(f"{hdr_path}: unsupported dtype {header.get('dtype')!r}")
    spacing = header.get("spacing_mm")
    if spacing is not None:
        if not isinstance(spacing, list) or len(spacing) != 3:
            raise VolumeFormatError(f"{hdr_path}: 'spacing_mm' must list 3 reals")
        try:
            spacing = [float(s) for s in spacing]
        except (TypeError, ValueError):
            raise VolumeFormatError(f"{hdr_path}: 'spacing_mm' must list 3 reals") from None
        if any(not s > 0 for s in spacing):
            raise VolumeFormatError(f"{hdr_path}: non-positive spacing {spacing}")
        header["spacing_mm"] = spacing
    return header


def read_raw(path) -> tuple[dict, np.ndarray]:
    stem = _stem(path)
    header = read_header(stem)
    dims = header["dims"]
    np_dtype = _DTYPES[header["dtype"]]
    vol_path = with_ext(stem, ".vol")
    try:
        payload = vol_path.read_bytes()
    except FileNotFoundError:
        raise VolumeFormatError(f"missing payload {vol_path}") from None
    expected = int(np.prod(dims)) * np_dtype.itemsize
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{vol_path}: payload is {len(payload)} bytes, header dims {dims} need {expected}"
        )
    return header, np.frombuffer(payload, dtype=np_dtype).reshape(dims)


def load_volume(path) -> CtVolume:
    header, arr = read_raw(path)
    if len(header["dims"]) != 3:
        raise VolumeFormatError(f"volume header must have 3 dims, got {header['dims']}")
    if header["dtype"] != "int16le":
        raise VolumeFormatError(f"volume dtype must be int16le, got {header['dtype']!r}")
    spacing = header.get("spacing_mm")
    if spacing is None:
        raise VolumeFormatError("volume header is missing 'spacing_mm'")
    return CtVolume(arr.astype(np.float64), tuple(spacing))


def save_volume(path, volume: CtVolume) -> Path:
    return write_raw(path, volume.voxels, "int16le", volume.spacing)


def load_mask(path) -> RoiMask:
    header, arr = read_raw(path)
    if len(header["dims"]) != 3 or header["dtype"] != "uint8":
        raise VolumeFormatError("mask header must have 3 dims and dtype uint8")
    return RoiMask(arr.copy())


def save_mask(path, mask: RoiMask, spacing: Sequence[float] | None = None) -> Path:
    return write_raw(path, mask.voxels, "uint8", spacing)


# --------------------------------------------------------------------------
# manifest


def read_manifest(path) -> list[dict]:
    """Parse a JSON-lines manifest; relative paths resolve against its directory."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except FileNotFoundError:
        raise VolumeFormatError(f"missing manifest {path}") from None
    records = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise VolumeFormatError(f"{path}:{lineno}: {exc}") from None
        if not isinstance(rec, dict) or not {"id", "volume", "label"} <= rec.keys():
            raise VolumeFormatError(f"{path}:{lineno}: records need 'id', 'volume' and 'label'")
        if rec["label"] not in (0, 1):
            raise VolumeFormatError(f"{path}:{lineno}: label must be 0 or 1")
        rec = dict(rec)
        rec["id"] = str(rec["id"])
        rec["volume"] = str(path.parent / rec["volume"])
        if rec.get("mask"):
            rec["mask"] = str(path.parent / rec["mask"])
        records.append(rec)
    return records


def write_manifest(path, records: Iterable[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in records:
            out = {"id": rec["id"], "volume": os.path.relpath(rec["volume"], path.parent)}
            if rec.get("mask"):
                out["mask"] = os.path.relpath(rec["mask"], path.parent)
            out["label"] = int(rec["label"])
            fh.write(json.dumps(out) + "\n")
    return path


def load_sample(record: dict) -> Sample:
    volume = load_volume(record["volume"])
    mask = load_mask(record["mask"]) if record.get("mask") else threshold_roi(volume)
    return Sample(record["id"], volume, mask, int(record["label"]))


# --------------------------------------------------------------------------
# preprocessing


def threshold_roi(volume: CtVolume, low: float = EAT_LOW_HU, high: float = EAT_HIGH_HU) -> RoiMask:
    """Mark voxels with ``low <= HU <= high`` (both ends inclusive)."""
    if low > high:
        raise ValueError(f"threshold bounds reversed: low={low} > high={high}")
    vox = volume.voxels
    return RoiMask(((vox >= low) & (vox <= high)).astype(np.uint8))


def normalize_intensities(volume: CtVolume, lo: float = -1024.0, hi: float = 1024.0) -> CtVolume:
    """Affinely map [lo, hi] onto [-1, 1], clipping values outside the window."""
    if not lo < hi:
        raise ValueError(f"normalization window needs lo < hi, got [{lo}, {hi}]")
    scaled = (volume.voxels - lo) * (2.0 / (hi - lo)) - 1.0
    return CtVolume(np.clip(scaled, -1.0, 1.0), volume.spacing)


def pad_to_shape(sample: Sample, target: Sequence[int]) -> Sample:
    """Zero-pad volume and mask up to ``target`` dims, content anchored at index 0."""
    target = tuple(int(t) for t in target)
    dims = sample.volume.dims
    if len(target) != 3:
        raise ValueError(f"target dims must have 3 entries, got {target}")
    if any(d > t for d, t in zip(dims, target)):
        raise ShapeMismatchError(f"source dims {dims} exceed target {target}")
    if dims == target:
        return sample
    vox = np.zeros(target, dtype=np.float64)
    msk = np.zeros(target, dtype=np.uint8)
    region = tuple(slice(0, d) for d in dims)
    vox[region] = sample.volume.voxels
    msk[region] = sample.mask.voxels
    return Sample(sample.id, CtVolume(vox, sample.volume.spacing), RoiMask(msk), sample.label)


# --------------------------------------------------------------------------
# synthetic phantoms

MIN_PHANTOM_DIMS = (16, 16, 16)

# Class-conditional generator factors as (class-0 mean, class-1 mean, sd); each
# factor is drawn independently, so each one moves mainly one radiomic feature.
_AXIAL_SEMI = (0.19, 0.225, 0.012)  # in-plane atrium semi-axis / in-plane dim -> 2D diameter
_AXIAL_SEMI_Z = (0.27, 0.32, 0.012)  # through-plane semi-axis / depth -> 3D diameter
_FAT_MEAN_HU = (-128.0, -96.0, 10.0)  # -> first-order maximum
_TEXTURE_SIGMA = (0.8, 1.4, 0.2)  # correlation length of the fat texture -> GLCM Idn
_SHELL_THICKNESS = (2.5, 2.5, 0.15)
_FAT_STD_HU = 20.0


def _factor(rng, spec, label, lo=None):
    value = spec[label] + spec[2] * rng.standard_normal()
    return value if lo is None else max(value, lo)


def synth_phantom(label: int, seed: int, dims: Sequence[int] = (32, 32, 32),
                  spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> Sample:
    """Ellipsoidal blood pool wrapped in a fat shell, embedded in soft tissue.

    The two classes differ in the in-plane and through-plane atrium size, the
    mean fat HU and the correlation length of the fat texture; each of these
    is drawn with its own noise. Blood-pool and tissue HU levels vary per
    sample independently of the label. Fat voxels lie in [-245, -5] HU and
    every other voxel lies outside [-250, 0], so the threshold ROI is exactly
    the shell.
    """
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label!r}")
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or any(d < m for d, m in zip(dims, MIN_PHANTOM_DIMS)):
        raise ValueError(f"phantom dims must be at least {MIN_PHANTOM_DIMS}, got {dims}")
    rng = np.random.default_rng([int(seed), int(label), *dims])
    dims_arr = np.array(dims, dtype=np.float64)

    center = (dims_arr - 1) / 2 + rng.uniform(-1.0, 1.0, size=3)
    axial = _factor(rng, _AXIAL_SEMI, label, 0.1) * (dims[1] + dims[2]) / 2
    semi_axes = np.array([_factor(rng, _AXIAL_SEMI_Z, label, 0.15) * dims[0],
                          axial * rng.uniform(0.97, 1.03), axial * rng.uniform(0.97, 1.03)])
    thickness = _factor(rng, _SHELL_THICKNESS, label, 1.5)

    grid = np.indices(dims, dtype=np.float64)
    rho = np.sqrt(sum(((grid[a] - center[a]) / semi_axes[a]) ** 2 for a in range(3)))
    inside = rho <= 1.0
    # shell of roughly constant thickness: radial offset scaled by the local semi-axis
    shell = ~inside & (rho <= 1.0 + thickness / semi_axes.min())

    tissue_hu = rng.uniform(30.0, 70.0)
    blood_hu = rng.uniform(250.0, 400.0)
    vox = tissue_hu + 8.0 * rng.standard_normal(dims)
    vox = np.maximum(vox, 5.0)
    vox[inside] = np.maximum(blood_hu + 15.0 * rng.standard_normal(int(inside.sum())), 150.0)

    sigma = _factor(rng, _TEXTURE_SIGMA, label, 0.3)
    field = ndimage.gaussian_filter(rng.standard_normal(dims), sigma=sigma, mode="reflect")
    field = (field - field.mean()) / field.std()
    fat_mean = _factor(rng, _FAT_MEAN_HU, label)
    vox[shell] = np.clip(fat_mean + _FAT_STD_HU * field[shell], -245.0, -5.0)

    volume = CtVolume(np.round(vox), tuple(spacing))
    return Sample(f"phantom-{label}-{seed}", volume, threshold_roi(volume), label)


def synth_dataset(n_per_class: int, seed: int = 0, dims: Sequence[int] = (32, 32, 32)) -> list[Sample]:
    """Balanced phantom cohort; sample ``k`` of class ``c`` uses phantom seed ``seed * 100003 + k``."""
    return [
        synth_phantom(label, seed * 100003 + k, dims)
        for k in range(n_per_class)
        for label in (0, 1)
    ]


def write_dataset(samples: Iterable[Sample], out_dir) -> Path:
    """Write samples as volume/mask file pairs plus ``manifest.jsonl``; returns the manifest path."""
    out_dir = Path(out_dir)
    records = []
    for s in samples:
        vol_stem = save_volume(out_dir / "volumes" / s.id, s.volume)
        mask_stem = save_mask(out_dir / "masks" / s.id, s.mask, s.volume.spacing)
        records.append({
            "id": s.id,
            "volume": str(with_ext(vol_stem, ".vol")),
            "mask": str(with_ext(mask_stem, ".vol")),
            "label": s.label,
        })
    return write_manifest(out_dir / "manifest.jsonl", records)
