"""Compiled texture-matrix builders and count-to-feature reductions.

Every texture feature is reduced from integer aggregates first (gray-level
difference histogram, run-length sums, dependence histogram) and only then
turned into a float, in one fixed order. Any two code paths that agree on the
integer aggregates therefore agree on the feature value bit for bit.
"""
import numpy as np
from numba import njit

# 13 unique 3D neighbour offsets (dz, dy, dx): 26-connectivity modulo sign
OFFSETS13 = np.array(
    [(dz, dy, dx)
     for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)
     if (dz, dy, dx) > (0, 0, 0)],
    dtype=np.int64,
)

# the same 13 directions, signed so that dx >= 0 (run statistics ignore sign)
RUN_DIRS = np.array(
    [(-dz, -dy, -dx) if dx < 0 else (dz, dy, dx) for dz, dy, dx in OFFSETS13],
    dtype=np.int64,
)

NEIGHBORS26 = np.array(
    [(dz, dy, dx)
     for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)
     if (dz, dy, dx) != (0, 0, 0)],
    dtype=np.int64,
)

MAX_DEPENDENCE = 27


@njit(cache=True, nogil=True)
def glcm_counts(levels, ng):
    """Symmetric co-occurrence counts accumulated over the 13 offsets."""
    nz, ny, nx = levels.shape
    counts = np.zeros((ng, ng), dtype=np.int64)
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                a = levels[z, y, x]
                if a == 0:
                    continue
                for o in range(13):
                    zz = z + OFFSETS13[o, 0]
                    yy = y + OFFSETS13[o, 1]
                    xx = x + OFFSETS13[o, 2]
                    if zz < 0 or zz >= nz or yy < 0 or yy >= ny or xx < 0 or xx >= nx:
                        continue
                    b = levels[zz, yy, xx]
                    if b == 0:
                        continue
                    counts[a - 1, b - 1] += 1
                    counts[b - 1, a - 1] += 1
    return counts


@njit(cache=True, nogil=True)
def glrlm_counts(levels, ng, dirs):
    """Run-length counts [level - 1, length - 1] accumulated over ``dirs``."""
    nz, ny, nx = levels.shape
    maxlen = max(nz, max(ny, nx))
    counts = np.zeros((ng, maxlen), dtype=np.int64)
    for d in range(dirs.shape[0]):
        dz = dirs[d, 0]
        dy = dirs[d, 1]
        dx = dirs[d, 2]
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
                        continue  # not a run start
                    length = 1
                    qz = z + dz
                    qy = y + dy
                    qx = x + dx
                    while 0 <= qz < nz and 0 <= qy < ny and 0 <= qx < nx and levels[qz, qy, qx] == a:
                        length += 1
                        qz += dz
                        qy += dy
                        qx += dx
                    counts[a - 1, length - 1] += 1
    return counts


@njit(cache=True, nogil=True)
def gldm_counts(levels, ng, alpha):
    """Dependence counts [level - 1, j - 1]; j includes the centre voxel."""
    nz, ny, nx = levels.shape
    counts = np.zeros((ng, MAX_DEPENDENCE), dtype=np.int64)
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                a = levels[z, y, x]
                if a == 0:
                    continue
                j = 1
                for o in range(26):
                    zz = z + NEIGHBORS26[o, 0]
                    yy = y + NEIGHBORS26[o, 1]
                    xx = x + NEIGHBORS26[o, 2]
                    if zz < 0 or zz >= nz or yy < 0 or yy >= ny or xx < 0 or xx >= nx:
                        continue
                    b = levels[zz, yy, xx]
                    if b != 0 and abs(a - b) <= alpha:
                        j += 1
                counts[a - 1, j - 1] += 1
    return counts


# --------------------------------------------------------------------------
# reductions


@njit(cache=True, nogil=True)
def glcm_difference_histogram(counts):
    ng = counts.shape[0]
    diff = np.zeros(ng, dtype=np.int64)
    for i in range(ng):
        for j in range(ng):
            diff[abs(i - j)] += counts[i, j]
    return diff


@njit(cache=True, nogil=True)
def idn_from_difference(diff, ng):
    """Inverse difference normalized from |i - j| pair counts; NaN when no pairs."""
    total = 0
    for k in range(diff.shape[0]):
        total += diff[k]
    if total == 0:
        return np.nan
    acc = 0.0
    for k in range(diff.shape[0]):
        acc += diff[k] / (1.0 + k / ng)
    return acc / total


@njit(cache=True, nogil=True)
def glrlm_sums(counts):
    """(sum of squared run lengths, number of runs)."""
    sumsq = 0
    nr = 0
    for i in range(counts.shape[0]):
        for j in range(counts.shape[1]):
            c = counts[i, j]
            sumsq += c * (j + 1) * (j + 1)
            nr += c
    return sumsq, nr


@njit(cache=True, nogil=True)
def gldm_dependence_histogram(counts):
    hist = np.zeros(counts.shape[1], dtype=np.int64)
    for i in range(counts.shape[0]):
        for j in range(counts.shape[1]):
            hist[j] += counts[i, j]
    return hist


@njit(cache=True, nogil=True)
def dnun_from_histogram(hist):
    nz = 0
    sq = 0
    for j in range(hist.shape[0]):
        nz += hist[j]
        sq += hist[j] * hist[j]
    if nz == 0:
        return np.nan
    return sq / (nz * nz)


@njit(cache=True, nogil=True)
def lde_from_histogram(hist):
    nz = 0
    acc = 0
    for j in range(hist.shape[0]):
        nz += hist[j]
        acc += hist[j] * (j + 1) * (j + 1)
    if nz == 0:
        return np.nan
    return acc / nz


@njit(cache=True, nogil=True)
def ratio(num, den):
    if den == 0:
        return np.nan
    return num / den
