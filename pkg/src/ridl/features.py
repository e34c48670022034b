"""Global radiomic features: texture matrices, shape diameters, first-order maximum.

Feature keys follow PyRadiomics naming (``original_<family>_<Name>``); the
short form without the ``original_`` prefix is accepted everywhere.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from numba import njit
from scipy.spatial import ConvexHull, QhullError

from . import _texture
from .errors import EmptyMatrixError, EmptyRoiError, ShapeMismatchError
from .quantize import DEFAULT_BIN_WIDTH, QuantizedVolume, discretize
from .volume import CtVolume, RoiMask, Sample

MAX3D = "original_shape_Maximum3DDiameter"
MAX2D = "original_shape_Maximum2DDiameterSlice"
MAXIMUM = "original_firstorder_Maximum"
IDN = "original_glcm_Idn"
LRE = "original_glrlm_LongRunEmphasis"
DNUN = "original_gldm_DependenceNonUniformityNormalized"
LDE = "original_gldm_LargeDependenceEmphasis"

SELECTED_KEYS = (MAX3D, MAX2D, MAXIMUM, IDN)
TEXTURE_KEYS = (IDN, LRE, DNUN, LDE)
ALL_KEYS = (MAX3D, MAX2D, MAXIMUM, IDN, LRE, DNUN, LDE)

_FAMILY = {IDN: "glcm", LRE: "glrlm", DNUN: "gldm", LDE: "gldm"}


def canonical_key(key: str) -> str:
    full = key if key.startswith("original_") else "original_" + key
    for known in ALL_KEYS:
        if full.lower() == known.lower():
            return known
    raise KeyError(f"unknown feature key {key!r}")


# --------------------------------------------------------------------------
# texture matrices


@dataclass(frozen=True)
class Glcm:
    counts: np.ndarray
    num_levels: int

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def probabilities(self) -> np.ndarray:
        return self.counts / self.counts.sum()


@dataclass(frozen=True)
class Glrlm:
    counts: np.ndarray  # [level - 1, run length - 1]
    num_levels: int

    @property
    def num_runs(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class Gldm:
    counts: np.ndarray  # [level - 1, dependence - 1]
    num_levels: int
    alpha_dep: int

    @property
    def num_voxels(self) -> int:
        return int(self.counts.sum())


def _require_roi(q: QuantizedVolume):
    if not np.any(q.levels):
        raise EmptyRoiError("quantized volume has no ROI voxels")


def build_glcm(q: QuantizedVolume) -> Glcm:
    _require_roi(q)
    counts = _texture.glcm_counts(np.ascontiguousarray(q.levels, dtype=np.int32), q.num_levels)
    if not counts.any():
        raise EmptyMatrixError("no co-occurring ROI voxel pairs; GLCM is empty")
    return Glcm(counts, q.num_levels)


def build_glrlm(q: QuantizedVolume, directions=None) -> Glrlm:
    """Maximal same-level runs along all 13 directions, or only ``directions`` if given."""
    _require_roi(q)
    dirs = _texture.RUN_DIRS if directions is None else np.asarray(directions, dtype=np.int64).reshape(-1, 3)
    counts = _texture.glrlm_counts(np.ascontiguousarray(q.levels, dtype=np.int32), q.num_levels, dirs)
    return Glrlm(counts, q.num_levels)


def build_gldm(q: QuantizedVolume, alpha_dep: int = 0) -> Gldm:
    if alpha_dep < 0:
        raise ValueError(f"alpha_dep must be >= 0, got {alpha_dep}")
    _require_roi(q)
    counts = _texture.gldm_counts(np.ascontiguousarray(q.levels, dtype=np.int32), q.num_levels, int(alpha_dep))
    return Gldm(counts, q.num_levels, int(alpha_dep))


def texture_feature(matrix: Glcm | Glrlm | Gldm, key: str) -> float:
    key = canonical_key(key)
    family = _FAMILY.get(key)
    if family is None:
        raise KeyError(f"{key} is not a texture feature")
    expected = {"glcm": Glcm, "glrlm": Glrlm, "gldm": Gldm}[family]
    if not isinstance(matrix, expected):
        raise TypeError(f"{key} needs a {expected.__name__}, got {type(matrix).__name__}")
    if not matrix.counts.any():
        raise EmptyMatrixError(f"cannot evaluate {key} on an empty matrix")
    if key == IDN:
        diff = _texture.glcm_difference_histogram(matrix.counts)
        return float(_texture.idn_from_difference(diff, matrix.num_levels))
    if key == LRE:
        sumsq, nr = _texture.glrlm_sums(matrix.counts)
        return float(_texture.ratio(sumsq, nr))
    hist = _texture.gldm_dependence_histogram(matrix.counts)
    if key == DNUN:
        return float(_texture.dnun_from_histogram(hist))
    return float(_texture.lde_from_histogram(hist))


# --------------------------------------------------------------------------
# shape and first order


def _surface_voxels(roi: np.ndarray) -> np.ndarray:
    """Indices of ROI voxels with at least one 6-neighbour outside the ROI."""
    padded = np.pad(roi, 1, constant_values=False)
    interior = roi.copy()
    for axis in range(3):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    return np.argwhere(roi & ~interior)


@njit(cache=True)
def _max_sq_distance(points):
    best = 0.0
    n = points.shape[0]
    for i in range(n):
        for j in range(i + 1, n):
            d = 0.0
            for k in range(points.shape[1]):
                t = points[i, k] - points[j, k]
                d += t * t
            if d > best:
                best = d
    return best


def _max_distance(points: np.ndarray) -> float:
    if len(points) < 2:
        return 0.0
    if len(points) > 64:
        # the farthest pair lies on the convex hull; degenerate sets fall back to all points
        try:
            points = points[ConvexHull(points).vertices]
        except (QhullError, ValueError):
            pass
    return float(np.sqrt(_max_sq_distance(np.ascontiguousarray(points, dtype=np.float64))))


def shape_diameters(mask: RoiMask, spacing: Sequence[float]) -> tuple[float, float]:
    """(maximum 3D diameter, maximum axial-slice 2D diameter) in mm between surface voxel centres."""
    roi = mask.voxels.astype(bool)
    if not roi.any():
        raise EmptyRoiError("shape diameters need a nonempty mask")
    idx = _surface_voxels(roi)
    pts = idx * np.asarray(spacing, dtype=np.float64)
    max3d = _max_distance(pts)
    max2d = 0.0
    for z in np.unique(idx[:, 0]):
        sel = idx[:, 0] == z
        max2d = max(max2d, _max_distance(pts[sel][:, 1:]))
    return max3d, max2d


def firstorder_max(volume: CtVolume, mask: RoiMask) -> float:
    if volume.dims != mask.dims:
        raise ShapeMismatchError(f"volume dims {volume.dims} != mask dims {mask.dims}")
    roi = mask.voxels.astype(bool)
    if not roi.any():
        raise EmptyRoiError("first-order maximum needs a nonempty mask")
    return float(volume.voxels[roi].max())


# --------------------------------------------------------------------------
# extraction


class FeatureVector(dict):
    """Ordered mapping of canonical feature key -> value."""


def extract_global(sample: Sample, keys: Iterable[str] | None = None,
                   bin_width: float = DEFAULT_BIN_WIDTH, alpha_dep: int = 0) -> FeatureVector:
    keys = [canonical_key(k) for k in (SELECTED_KEYS if keys is None else keys)]
    if len(set(keys)) != len(keys):
        raise ValueError("duplicate feature keys")
    if sample.mask.count == 0:
        raise EmptyRoiError(f"sample {sample.id!r} has an empty ROI")

    q = None
    matrices = {}
    diameters = None
    out = FeatureVector()
    for key in keys:
        if key in (MAX3D, MAX2D):
            if diameters is None:
                diameters = shape_diameters(sample.mask, sample.volume.spacing)
            out[key] = diameters[0] if key == MAX3D else diameters[1]
        elif key == MAXIMUM:
            out[key] = firstorder_max(sample.volume, sample.mask)
        else:
            if q is None:
                q = discretize(sample.volume, sample.mask, bin_width)
            family = _FAMILY[key]
            if family not in matrices:
                builder = {"glcm": build_glcm, "glrlm": build_glrlm,
                           "gldm": lambda qq: build_gldm(qq, alpha_dep)}[family]
                matrices[family] = builder(q)
            out[key] = texture_feature(matrices[family], key)
    return out


@dataclass
class FeatureTable:
    """Per-sample feature values with binary labels; rows follow manifest order."""

    ids: list[str]
    keys: list[str]
    values: np.ndarray
    labels: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(len(self.ids), len(self.keys))
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) != len(self.ids):
            raise ShapeMismatchError("one label per sample id is required")
        if len(set(self.keys)) != len(self.keys):
            raise ValueError("duplicate feature keys")

    def __len__(self):
        return len(self.ids)

    @classmethod
    def from_vectors(cls, ids: Sequence[str], vectors: Sequence[Mapping[str, float]], labels) -> "FeatureTable":
        keys = list(vectors[0]) if vectors else []
        values = np.array([[v[k] for k in keys] for v in vectors], dtype=np.float64)
        return cls(list(ids), keys, values, np.asarray(labels))

    def column(self, key: str) -> np.ndarray:
        return self.values[:, self.keys.index(key)]

    def row(self, i: int) -> dict[str, float]:
        return dict(zip(self.keys, self.values[i].tolist()))

    def subset(self, rows) -> "FeatureTable":
        rows = np.asarray(rows, dtype=np.int64)
        return FeatureTable([self.ids[i] for i in rows], list(self.keys), self.values[rows], self.labels[rows])

    def select(self, keys: Sequence[str]) -> "FeatureTable":
        cols = [self.keys.index(k) for k in keys]
        return FeatureTable(list(self.ids), list(keys), self.values[:, cols], self.labels)

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", *self.keys, "label"])
            for sid, vals, lab in zip(self.ids, self.values, self.labels):
                w.writerow([sid, *(repr(float(v)) for v in vals), int(lab)])
        return path

    @classmethod
    def from_csv(cls, path) -> "FeatureTable":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0][0] != "id" or rows[0][-1] != "label":
            raise ValueError(f"{path}: expected header 'id,...,label'")
        keys = rows[0][1:-1]
        body = rows[1:]
        return cls(
            [r[0] for r in body],
            keys,
            np.array([[float(v) for v in r[1:-1]] for r in body], dtype=np.float64).reshape(len(body), len(keys)),
            np.array([int(r[-1]) for r in body], dtype=np.int64),
        )


def extract_table(samples: Sequence[Sample], keys: Iterable[str] | None = None,
                  bin_width: float = DEFAULT_BIN_WIDTH) -> FeatureTable:
    keys = list(SELECTED_KEYS if keys is None else keys)
    vectors = [extract_global(s, keys, bin_width) for s in samples]
    return FeatureTable.from_vectors([s.id for s in samples], vectors, [s.label for s in samples])
