"""Per-voxel texture maps over cubic patches and their multi-radius stacks.

For every voxel the patch is the cube of radius ``p`` around it, clamped to the
volume, intersected with the ROI, and quantized with the volume-global gray
levels. Voxels whose patch holds no ROI voxel get value 0 and validity 0. A
nonempty patch whose feature is undefined (an isolated voxel has no GLCM pairs)
keeps validity 1 with value 0.

Two implementations share one contract:

* :func:`naive_local_oracle` crops every patch and rebuilds the full texture
  matrix from scratch.
* :func:`local_feature_map` walks the volume row by row along x. For a fixed
  (z, y) centre the patch's z/y extent is fixed, so per-plane integer
  aggregates (pair-difference histograms, truncated run sums, dependence
  histograms) are computed once per x-plane and combined for every centre on
  the row with prefix sums. Per-voxel integer codes (pair differences, run
  positions, neighbour bitmasks) are precomputed once per volume so the row
  loops carry no bounds checks.

Both reduce integer aggregates with the same float routine, so they agree bit
for bit.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from numba import njit

from . import _texture
from ._texture import NEIGHBORS26, OFFSETS13, RUN_DIRS
from .errors import ShapeMismatchError, VolumeFormatError
from .features import DNUN, IDN, LDE, LRE, TEXTURE_KEYS, canonical_key
from .quantize import QuantizedVolume
from .volume import RoiMask, read_raw, with_ext, write_raw

_KEY_CODE = {IDN: 0, LRE: 1, DNUN: 2, LDE: 3}


@dataclass
class LocalFeatureMap:
    values: np.ndarray  # (L, depth, height, width)
    channel_spec: list[tuple[str, int]]
    validity: np.ndarray  # same shape, uint8

    def __post_init__(self):
        if self.values.ndim != 4 or self.values.shape != self.validity.shape:
            raise ShapeMismatchError("values and validity must share a (L, z, y, x) shape")
        if len(self.channel_spec) != self.values.shape[0]:
            raise ShapeMismatchError("one channel_spec entry per channel is required")

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return tuple(int(d) for d in self.values.shape)

    @property
    def spatial_dims(self) -> tuple[int, int, int]:
        return self.dims[1:]

    def save(self, path) -> Path:
        stem = write_raw(path, self.values.astype(np.float32), "float32le")
        write_raw(with_ext(stem, ".valid"), self.validity, "uint8")
        with_ext(stem, ".channels").write_text(
            "".join(f"{key} {radius}\n" for key, radius in self.channel_spec)
        )
        return stem

    @classmethod
    def load(cls, path) -> "LocalFeatureMap":
        header, values = read_raw(path)
        if len(header["dims"]) != 4 or header["dtype"] != "float32le":
            raise VolumeFormatError("local map header must have dims [L, z, y, x] and dtype float32le")
        stem = Path(path).with_suffix("") if Path(path).suffix in (".vol", ".volhdr") else Path(path)
        _, validity = read_raw(with_ext(stem, ".valid"))
        try:
            lines = with_ext(stem, ".channels").read_text().split("\n")
        except FileNotFoundError:
            raise VolumeFormatError(f"missing channel spec for {stem}") from None
        spec = []
        for line in filter(None, lines):
            key, radius = line.split()
            spec.append((key, int(radius)))
        return cls(values.astype(np.float64), spec, validity.copy())


def _effective_levels(q: QuantizedVolume, mask: RoiMask) -> np.ndarray:
    if q.dims != mask.dims:
        raise ShapeMismatchError(f"quantized dims {q.dims} != mask dims {mask.dims}")
    return np.ascontiguousarray(np.where(mask.voxels > 0, q.levels, 0), dtype=np.int32)


def _check_args(key: str, radius: int) -> str:
    key = canonical_key(key)
    if key not in TEXTURE_KEYS:
        raise ValueError(f"{key} is not a texture feature; only texture features have local maps")
    if int(radius) != radius or radius < 1:
        raise ValueError(f"patch radius must be a positive integer, got {radius}")
    return key


# --------------------------------------------------------------------------
# oracle: crop and rebuild per voxel


@njit(cache=True, nogil=True)
def _patch_value(sub, ng, code, alpha):
    if code == 0:
        diff = _texture.glcm_difference_histogram(_texture.glcm_counts(sub, ng))
        return _texture.idn_from_difference(diff, ng)
    if code == 1:
        sumsq, nr = _texture.glrlm_sums(_texture.glrlm_counts(sub, ng, RUN_DIRS))
        return _texture.ratio(sumsq, nr)
    hist = _texture.gldm_dependence_histogram(_texture.gldm_counts(sub, ng, alpha))
    if code == 2:
        return _texture.dnun_from_histogram(hist)
    return _texture.lde_from_histogram(hist)


@njit(cache=True, nogil=True)
def _oracle_kernel(levels, ng, p, code, alpha, out, valid):
    nz, ny, nx = levels.shape
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                sub = levels[max(z - p, 0):min(z + p, nz - 1) + 1,
                             max(y - p, 0):min(y + p, ny - 1) + 1,
                             max(x - p, 0):min(x + p, nx - 1) + 1].copy()
                if not np.any(sub):
                    continue
                valid[z, y, x] = 1
                v = _patch_value(sub, ng, code, alpha)
                out[z, y, x] = 0.0 if np.isnan(v) else v


def naive_local_oracle(q: QuantizedVolume, mask: RoiMask, key: str, radius: int,
                       alpha_dep: int = 0) -> LocalFeatureMap:
    """Reference implementation: independent patch extraction and full matrix rebuild per voxel."""
    key = _check_args(key, radius)
    levels = _effective_levels(q, mask)
    out = np.zeros(levels.shape, dtype=np.float64)
    valid = np.zeros(levels.shape, dtype=np.uint8)
    _oracle_kernel(levels, q.num_levels, int(radius), _KEY_CODE[key], int(alpha_dep), out, valid)
    return LocalFeatureMap(out[None], [(key, int(radius))], valid[None])


# --------------------------------------------------------------------------
# optimized row kernel


@njit(cache=True, nogil=True)
def pair_codes(levels):
    """1 + |level difference| of every (voxel, voxel + offset) ROI pair, 0 where no pair exists."""
    nz, ny, nx = levels.shape
    codes = np.zeros((13, nz, ny, nx), dtype=np.int16)
    for o in range(13):
        dz = OFFSETS13[o, 0]
        dy = OFFSETS13[o, 1]
        dx = OFFSETS13[o, 2]
        for z in range(nz):
            zz = z + dz
            if zz < 0 or zz >= nz:
                continue
            for y in range(ny):
                yy = y + dy
                if yy < 0 or yy >= ny:
                    continue
                for x in range(nx):
                    xx = x + dx
                    if xx < 0 or xx >= nx:
                        continue
                    a = levels[z, y, x]
                    b = levels[zz, yy, xx]
                    if a != 0 and b != 0:
                        codes[o, z, y, x] = abs(a - b) + 1
    return codes


@njit(cache=True, nogil=True)
def run_positions(levels):
    """1-based position of each ROI voxel inside its maximal run, per direction in RUN_DIRS."""
    nz, ny, nx = levels.shape
    tpos = np.zeros((13, nz, ny, nx), dtype=np.int16)
    for d in range(13):
        dz = RUN_DIRS[d, 0]
        dy = RUN_DIRS[d, 1]
        dx = RUN_DIRS[d, 2]
        for z in range(nz):
            for y in range(ny):
                for x in range(nx):
                    a = levels[z, y, x]
                    if a == 0:
                        continue
                    pz = z - dz
                    py = y - dy
                    px = x - dx
                    if 0 <= pz < nz and 0 <= py < ny and 0 <= px < nx and levels[pz, py, px] == a:
                        continue
                    t = 1
                    qz = z
                    qy = y
                    qx = x
                    while 0 <= qz < nz and 0 <= qy < ny and 0 <= qx < nx and levels[qz, qy, qx] == a:
                        tpos[d, qz, qy, qx] = t
                        t += 1
                        qz += dz
                        qy += dy
                        qx += dx
    return tpos


@njit(cache=True, nogil=True)
def dependence_masks(levels, alpha):
    """Per voxel and x-step (-1, 0, +1): 9-bit mask over (dz, dy) of qualifying neighbours.

    Bit (dz + 1) * 3 + (dy + 1) is set when that neighbour is inside the volume,
    in the ROI, and within ``alpha`` gray levels. Non-ROI voxels get no bits.
    """
    nz, ny, nx = levels.shape
    masks = np.zeros((3, nz, ny, nx), dtype=np.uint16)
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                a = levels[z, y, x]
                if a == 0:
                    continue
                for o in range(26):
                    dz = NEIGHBORS26[o, 0]
                    dy = NEIGHBORS26[o, 1]
                    dx = NEIGHBORS26[o, 2]
                    zz = z + dz
                    yy = y + dy
                    xx = x + dx
                    if zz < 0 or zz >= nz or yy < 0 or yy >= ny or xx < 0 or xx >= nx:
                        continue
                    b = levels[zz, yy, xx]
                    if b != 0 and abs(a - b) <= alpha:
                        masks[dx + 1, z, y, x] |= 1 << ((dz + 1) * 3 + (dy + 1))
    return masks


_POP9 = np.array([bin(i).count("1") for i in range(512)], dtype=np.int64)


@njit(cache=True, nogil=True)
def _allowed9(z, y, z0, z1, y0, y1):
    """Bits of the (dz, dy) neighbour positions that stay inside the patch's z/y extent."""
    allowed = 0
    for dz in range(-1, 2):
        if z + dz < z0 or z + dz > z1:
            continue
        for dy in range(-1, 2):
            if y + dy < y0 or y + dy > y1:
                continue
            allowed |= 1 << ((dz + 1) * 3 + (dy + 1))
    return allowed


@njit(cache=True, nogil=True)
def _row_roi(levels, lines, z0, z1, y0, y1):
    nx = levels.shape[2]
    roi = np.zeros(nx + 1, dtype=np.int64)
    per = np.zeros(nx, dtype=np.int64)
    for z in range(z0, z1 + 1):
        for y in range(y0, y1 + 1):
            if not lines[z, y]:
                continue
            for X in range(nx):
                if levels[z, y, X] != 0:
                    per[X] += 1
    for X in range(nx):
        roi[X + 1] = roi[X] + per[X]
    return roi


@njit(cache=True, nogil=True)
def _roi_span(roi):
    """First and one-past-last x-plane holding ROI voxels of the row's box."""
    nx = roi.shape[0] - 1
    lo = 0
    while lo < nx and roi[lo + 1] == roi[lo]:
        lo += 1
    hi = nx
    while hi > lo and roi[hi] == roi[hi - 1]:
        hi -= 1
    return lo, hi


@njit(cache=True, nogil=True)
def _row_glcm(codes, lines, ng, p, z0, z1, y0, y1, zc, yc, roi, out, valid):
    nx = codes.shape[3]
    xa, xb = _roi_span(roi)
    # cnt[t, X, k + 1]: pairs starting on plane X with x-step t - 1 and |level difference| k;
    # bin 0 collects the non-pairs so the inner loop has no branch
    cnt = np.zeros((3, nx + 1, ng + 1), dtype=np.int64)
    for o in range(13):
        dz = OFFSETS13[o, 0]
        dy = OFFSETS13[o, 1]
        t = OFFSETS13[o, 2] + 1
        # both pair ends inside the patch's z/y extent
        ylo = max(y0, y0 - dy)
        yhi = min(y1, y1 - dy)
        for z in range(z0, z1 - dz + 1):
            for y in range(ylo, yhi + 1):
                if not lines[z, y]:
                    continue
                for X in range(xa, xb):
                    cnt[t, X + 1, codes[o, z, y, X]] += 1
    for t in range(3):
        for X in range(nx):
            for k in range(1, ng + 1):
                cnt[t, X + 1, k] += cnt[t, X, k]
    diff = np.zeros(ng, dtype=np.int64)
    for xc in range(max(xa - p, 0), min(xb + p, nx)):
        x0 = max(xc - p, 0)
        x1 = min(xc + p, nx - 1)
        if roi[x1 + 1] - roi[x0] == 0:
            continue
        valid[zc, yc, xc] = 1
        for k in range(ng):
            # dx = -1 pairs start on x0+1..x1, dx = 0 on x0..x1, dx = +1 on x0..x1-1
            diff[k] = 2 * ((cnt[0, x1 + 1, k + 1] - cnt[0, x0 + 1, k + 1])
                           + (cnt[1, x1 + 1, k + 1] - cnt[1, x0, k + 1])
                           + (cnt[2, x1, k + 1] - cnt[2, x0, k + 1]))
        v = _texture.idn_from_difference(diff, ng)
        out[zc, yc, xc] = 0.0 if np.isnan(v) else v


@njit(cache=True, nogil=True)
def _row_glrlm(tpos, lines, p, z0, z1, y0, y1, zc, yc, roi, out, valid):
    nx = tpos.shape[3]
    xa, xb = _roi_span(roi)
    width = 2 * p + 1
    big = tpos.shape[1] + tpos.shape[2] + nx + 1
    sumsq = np.zeros(nx, dtype=np.int64)
    nruns = np.zeros(nx, dtype=np.int64)
    pre_s = np.zeros(nx + 1, dtype=np.int64)
    pre_n = np.zeros(nx + 1, dtype=np.int64)
    hist = np.zeros((nx, width + 1), dtype=np.int64)
    for d in range(13):
        dz = RUN_DIRS[d, 0]
        dy = RUN_DIRS[d, 1]
        dx = RUN_DIRS[d, 2]
        hist[:, :] = 0
        for z in range(z0, z1 + 1):
            # the backward walk leaves the patch's z/y extent after e steps
            ez = big
            if dz == 1:
                ez = z - z0 + 1
            elif dz == -1:
                ez = z1 - z + 1
            for y in range(y0, y1 + 1):
                if not lines[z, y]:
                    continue
                e = ez
                if dy == 1:
                    e = min(e, y - y0 + 1)
                elif dy == -1:
                    e = min(e, y1 - y + 1)
                e = min(e, width)
                for X in range(xa, xb):
                    t = tpos[d, z, y, X]
                    if t != 0:
                        hist[X, min(t, e)] += 1
        if dx == 0:
            for X in range(nx):
                s = 0
                for c in range(1, width + 1):
                    s += hist[X, c] * (2 * c - 1)
                pre_s[X + 1] = pre_s[X] + s
                pre_n[X + 1] = pre_n[X] + hist[X, 1]
            for xc in range(nx):
                x0 = max(xc - p, 0)
                x1 = min(xc + p, nx - 1)
                sumsq[xc] += pre_s[x1 + 1] - pre_s[x0]
                nruns[xc] += pre_n[x1 + 1] - pre_n[x0]
        else:
            # the walk also leaves through x = x0 after X - x0 + 1 steps:
            # a voxel at depth dd = X - x0 contributes min(m, dd + 1)
            for xc in range(nx):
                x0 = max(xc - p, 0)
                x1 = min(xc + p, nx - 1)
                s = 0
                n = 0
                for X in range(x0, x1 + 1):
                    cap = X - x0 + 1
                    if cap == 1:
                        for c in range(1, width + 1):
                            n += hist[X, c]
                            s += hist[X, c]
                    else:
                        n += hist[X, 1]
                        for c in range(1, width + 1):
                            s += hist[X, c] * (2 * min(c, cap) - 1)
                sumsq[xc] += s
                nruns[xc] += n
    for xc in range(nx):
        x0 = max(xc - p, 0)
        x1 = min(xc + p, nx - 1)
        if roi[x1 + 1] - roi[x0] == 0:
            continue
        valid[zc, yc, xc] = 1
        v = _texture.ratio(sumsq[xc], nruns[xc])
        out[zc, yc, xc] = 0.0 if np.isnan(v) else v


@njit(cache=True, nogil=True)
def _row_gldm(dmasks, lines, p, code, z0, z1, y0, y1, zc, yc, roi, out, valid):
    nx = dmasks.shape[3]
    xa, xb = _roi_span(roi)
    nd = _texture.MAX_DEPENDENCE
    # dependence histograms per plane: all x-neighbours, without x-1, without x+1, without both
    pre_full = np.zeros((nx + 1, nd), dtype=np.int64)
    no_left = np.zeros((nx, nd), dtype=np.int64)
    no_right = np.zeros((nx, nd), dtype=np.int64)
    no_both = np.zeros((nx, nd), dtype=np.int64)
    for z in range(z0, z1 + 1):
        for y in range(y0, y1 + 1):
            if not lines[z, y]:
                continue
            allowed = _allowed9(z, y, z0, z1, y0, y1)
            for X in range(xa, xb):
                ml = dmasks[0, z, y, X]
                mm = dmasks[1, z, y, X]
                mr = dmasks[2, z, y, X]
                if ml == 0 and mm == 0 and mr == 0:
                    # either outside the ROI or an ROI voxel without qualifying neighbours
                    continue
                nl = _POP9[ml & allowed]
                nm = _POP9[mm & allowed]
                nr = _POP9[mr & allowed]
                pre_full[X + 1, nl + nm + nr] += 1
                no_left[X, nm + nr] += 1
                no_right[X, nl + nm] += 1
                no_both[X, nm] += 1
    for X in range(nx):
        for j in range(nd):
            pre_full[X + 1, j] += pre_full[X, j]
    hist = np.zeros(nd, dtype=np.int64)
    for xc in range(nx):
        x0 = max(xc - p, 0)
        x1 = min(xc + p, nx - 1)
        nvox = roi[x1 + 1] - roi[x0]
        if nvox == 0:
            continue
        valid[zc, yc, xc] = 1
        if x1 > x0:
            for j in range(nd):
                hist[j] = pre_full[x1, j] - pre_full[x0 + 1, j] + no_left[x0, j] + no_right[x1, j]
        else:
            for j in range(nd):
                hist[j] = no_both[x0, j]
        # ROI voxels with no qualifying neighbour at all were skipped above: dependence 1
        counted = 0
        for j in range(nd):
            counted += hist[j]
        hist[0] += nvox - counted
        if code == 2:
            out[zc, yc, xc] = _texture.dnun_from_histogram(hist)
        else:
            out[zc, yc, xc] = _texture.lde_from_histogram(hist)


@njit(cache=True, nogil=True)
def _rows_kernel(levels, lines, ng, p, code, aux, r0, r1, out, valid):
    nz, ny, nx = levels.shape
    for r in range(r0, r1):
        zc = r // ny
        yc = r % ny
        z0 = max(zc - p, 0)
        z1 = min(zc + p, nz - 1)
        y0 = max(yc - p, 0)
        y1 = min(yc + p, ny - 1)
        roi = _row_roi(levels, lines, z0, z1, y0, y1)
        if roi[nx] == 0:
            continue
        if code == 0:
            _row_glcm(aux, lines, ng, p, z0, z1, y0, y1, zc, yc, roi, out, valid)
        elif code == 1:
            _row_glrlm(aux, lines, p, z0, z1, y0, y1, zc, yc, roi, out, valid)
        else:
            _row_gldm(aux, lines, p, code, z0, z1, y0, y1, zc, yc, roi, out, valid)


def local_feature_map(q: QuantizedVolume, mask: RoiMask, key: str, radius: int,
                      workers: int = 1, alpha_dep: int = 0) -> LocalFeatureMap:
    """Texture feature of the clamped cubic patch around every voxel.

    Rows of constant (z, y) are split into ``workers`` contiguous chunks that run
    on threads; every output voxel is written by exactly one chunk, so the
    result does not depend on the worker count.
    """
    key = _check_args(key, radius)
    if workers < 1:
        raise ValueError("workers must be >= 1")
    levels = _effective_levels(q, mask)
    code = _KEY_CODE[key]
    if code == 0:
        aux = pair_codes(levels)
    elif code == 1:
        aux = run_positions(levels)
    else:
        aux = dependence_masks(levels, int(alpha_dep))
    out = np.zeros(levels.shape, dtype=np.float64)
    valid = np.zeros(levels.shape, dtype=np.uint8)
    nrows = levels.shape[0] * levels.shape[1]
    bounds = np.linspace(0, nrows, min(workers, nrows) + 1).astype(int)
    lines = np.ascontiguousarray(levels.any(axis=2))
    args = (levels, lines, q.num_levels, int(radius), code, aux)
    if len(bounds) == 2:
        _rows_kernel(*args, 0, nrows, out, valid)
    else:
        with ThreadPoolExecutor(max_workers=len(bounds) - 1) as pool:
            jobs = [pool.submit(_rows_kernel, *args, int(a), int(b), out, valid)
                    for a, b in zip(bounds[:-1], bounds[1:])]
            for job in jobs:
                job.result()
    return LocalFeatureMap(out[None], [(key, int(radius))], valid[None])


def stack_local_maps(maps: Sequence[LocalFeatureMap]) -> LocalFeatureMap:
    if not maps:
        raise ValueError("nothing to stack")
    dims = maps[0].spatial_dims
    for m in maps[1:]:
        if m.spatial_dims != dims:
            raise ShapeMismatchError(f"cannot stack maps of spatial dims {dims} and {m.spatial_dims}")
    if len(maps) == 1:
        return maps[0]
    return LocalFeatureMap(
        np.concatenate([m.values for m in maps]),
        [spec for m in maps for spec in m.channel_spec],
        np.concatenate([m.validity for m in maps]),
    )


def local_stack(q: QuantizedVolume, mask: RoiMask, key: str = IDN, radii: Sequence[int] = (1, 2, 5, 10),
                workers: int = 1) -> LocalFeatureMap:
    """One channel per radius, in the given order."""
    return stack_local_maps([local_feature_map(q, mask, key, p, workers) for p in radii])
