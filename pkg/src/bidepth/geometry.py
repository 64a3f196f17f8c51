import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from bidepth.imgio import GrayImage

logger = logging.getLogger("bidepth.geometry")


class ScheduleError(ValueError):
    pass


class WarpError(ValueError):
    pass


@dataclass(frozen=True)
class PlaneSchedule:
    """
    Ordered fronto-parallel planes, given by their disparities.

    Attributes:
        disparities (tuple[float, ...]): strictly increasing, finite, >= 0.
            Index 0 is the farthest plane, the last index the nearest.
    """

    disparities: tuple[float, ...]

    def __post_init__(self):
        values = tuple(float(d) for d in self.disparities)
        if not values:
            raise ScheduleError("A schedule needs at least one plane")
        if not all(math.isfinite(d) and d >= 0.0 for d in values):
            raise ScheduleError(f"Plane disparities must be finite and >= 0: {values}")
        if any(b <= a for a, b in zip(values, values[1:], strict=False)):
            raise ScheduleError(f"Plane disparities must increase strictly: {values}")
        object.__setattr__(self, "disparities", values)

    def __len__(self) -> int:
        return len(self.disparities)

    def __iter__(self):
        return iter(self.disparities)

    def __getitem__(self, index: int) -> float:
        return self.disparities[index]

    @property
    def farthest(self) -> float:
        return self.disparities[0]

    @property
    def nearest(self) -> float:
        return self.disparities[-1]

    def as_array(self) -> np.ndarray:
        return np.array(self.disparities)


def uniform_schedule(d_min: float, d_max: float, count: int) -> PlaneSchedule:
    """
    Equally spaced planes from d_min to d_max inclusive.

    Args:
        d_min (float): farthest plane disparity
        d_max (float): nearest plane disparity
        count (int): number of planes; with count = 1, d_min must equal d_max

    Returns:
        PlaneSchedule: the planes
    """
    if not (math.isfinite(d_min) and math.isfinite(d_max)):
        raise ScheduleError(f"Range bounds must be finite: [{d_min}, {d_max}]")
    if count < 1:
        raise ScheduleError(f"Plane count must be >= 1, got {count}")
    if count == 1:
        if d_min != d_max:
            raise ScheduleError(
                f"A single plane needs d_min == d_max, got [{d_min}, {d_max}]"
            )
        return PlaneSchedule((d_min,))
    if d_min >= d_max:
        raise ScheduleError(f"Inverted or empty range [{d_min}, {d_max}]")
    return PlaneSchedule(tuple(np.linspace(d_min, d_max, count).tolist()))


def level_schedule(levels: int, d_max: float) -> PlaneSchedule:
    """
    Planes for `levels` quantization levels: levels - 1 planes placed
    uniformly inside (0, d_max), at d_max * k / levels.
    """
    if levels < 2:
        raise ScheduleError(f"At least 2 levels are needed, got {levels}")
    if not math.isfinite(d_max) or d_max <= 0:
        raise ScheduleError(f"Maximum disparity must be positive, got {d_max}")
    return PlaneSchedule(tuple(d_max * k / levels for k in range(1, levels)))


@dataclass(frozen=True)
class WarpedImage:
    """
    Right image resampled onto one plane. Invalid pixels were sampled outside
    the source; they carry intensity 0 and must be ignored downstream.
    """

    image: GrayImage
    valid: np.ndarray

    def __post_init__(self):
        valid = np.array(self.valid, dtype=bool)
        if valid.shape != self.image.shape:
            raise ValueError("Validity mask does not match the warped image")
        valid.setflags(write=False)
        object.__setattr__(self, "valid", valid)

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape


def _shift_valid(valid: np.ndarray, d: float) -> np.ndarray:
    """Validity after moving content d pixels to the right."""
    width = valid.shape[1]
    whole = math.floor(d)
    out = np.zeros_like(valid)
    if whole == d:
        if whole < width:
            out[:, whole:] = valid[:, : width - whole]
    elif whole + 1 < width:
        # Linear interpolation reads columns x - whole and x - whole - 1
        right = valid[:, 1 : width - whole]
        out[:, whole + 1 :] = right & valid[:, : width - whole - 1]
    return out


def _shift(pixels: np.ndarray, valid: np.ndarray, d: float) -> WarpedImage:
    if not math.isfinite(d) or d < 0:
        raise WarpError(f"Shift must be finite and >= 0, got {d}")
    if d == 0:
        return WarpedImage(GrayImage(pixels), valid)

    shifted = ndimage.shift(
        pixels, (0.0, d), order=1, mode="constant", cval=0.0, prefilter=False
    )
    out_valid = _shift_valid(valid, d)
    shifted = np.where(out_valid, np.clip(shifted, 0.0, 1.0), 0.0)
    return WarpedImage(GrayImage(shifted), out_valid)


def warp_right(right: GrayImage, d: float) -> WarpedImage:
    """
    Warp the right image onto the fronto-parallel plane at disparity d.

    For rectified views the plane-induced homography is a horizontal shift:
    output(x, y) = right(x - d, y), linearly interpolated for fractional d.
    The leftmost ceil(d) columns have no source and are invalid. d = 0
    returns the input unchanged.

    Args:
        right (GrayImage): right view
        d (float): plane disparity in pixels, finite and >= 0

    Returns:
        WarpedImage: warped intensities and validity
    """
    return _shift(right.pixels, np.ones(right.shape, dtype=bool), d)


def shift_warped(warped: WarpedImage, b: float) -> WarpedImage:
    """Shift an already warped image a further b pixels to the right."""
    return _shift(warped.image.pixels, warped.valid, b)
