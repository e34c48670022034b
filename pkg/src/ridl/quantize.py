"""Fixed-bin-width gray-level discretization of ROI intensities."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyRoiError, ShapeMismatchError
from .volume import CtVolume, RoiMask

DEFAULT_BIN_WIDTH = 25.0


@dataclass(frozen=True)
class QuantizedVolume:
    """Gray-level indices; 0 marks voxels outside the ROI, ROI voxels use 1..num_levels."""

    levels: np.ndarray
    num_levels: int
    bin_width: float
    origin: float

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.levels.shape)


def discretize(volume: CtVolume, mask: RoiMask, bin_width: float = DEFAULT_BIN_WIDTH) -> QuantizedVolume:
    """level = floor((HU - min_ROI_HU) / bin_width) + 1 inside the ROI, 0 elsewhere.

    The bin origin is the ROI minimum of this volume, so a constant HU offset
    leaves the levels unchanged.
    """
    if not bin_width > 0:
        raise ValueError(f"bin_width must be positive, got {bin_width}")
    if volume.dims != mask.dims:
        raise ShapeMismatchError(f"volume dims {volume.dims} != mask dims {mask.dims}")
    roi = mask.voxels.astype(bool)
    if not roi.any():
        raise EmptyRoiError("cannot discretize an empty ROI")
    hu = volume.voxels[roi]
    origin = float(hu.min())
    levels = np.zeros(volume.dims, dtype=np.int32)
    levels[roi] = np.floor((hu - origin) / bin_width).astype(np.int32) + 1
    return QuantizedVolume(levels, int(levels.max()), float(bin_width), origin)
