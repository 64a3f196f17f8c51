import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from enum import StrEnum
from functools import partial

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, ConfigDict, Field
from scipy import ndimage

from bidepth.geometry import warp_right
from bidepth.imgio import DisparityMap, Label, LabelMap, StereoPair

logger = logging.getLogger("bidepth.classifier")

# Patches whose n^2-scaled variance falls below this are treated as flat
NCC_MIN_VARIANCE = 1e-12


class ClassifierError(ValueError):
    pass


class CostKind(StrEnum):
    CENSUS = "census"
    NCC = "ncc"


DEFAULT_TEMPERATURE = {CostKind.CENSUS: 4.0, CostKind.NCC: 0.1}


class ClassifierConfig(BaseModel):
    cost: CostKind = Field(
        default=CostKind.CENSUS, description="Matching cost: census or ncc"
    )
    desc_radius: int = Field(
        default=3, ge=1, description="Half-width of the census / NCC window"
    )
    agg_radius: int = Field(
        default=2, ge=1, description="Half-width of the cost aggregation window"
    )
    search_extent: int = Field(
        default=8,
        ge=1,
        description="Residual offsets -K..K searched around each warped pixel",
    )
    temperature: float | None = Field(
        default=None,
        gt=0,
        description="Softmax temperature; 4 bits for census, 0.1 for ncc if unset",
    )
    smooth_radius: int = Field(
        default=0,
        ge=0,
        description="Box smoothing applied to every confidence slice (0 = off)",
    )
    model_config = ConfigDict(title="Plane classifier settings", frozen=True)

    @property
    def tau(self) -> float:
        return self.temperature or DEFAULT_TEMPERATURE[self.cost]

    @property
    def footprint(self) -> int:
        """Side of the full support window (descriptor plus aggregation)."""
        return 2 * (self.desc_radius + self.agg_radius) + 1

    def fitted_to(self, planes: Sequence[float], d_max: float) -> "ClassifierConfig":
        """
        Settings whose search reaches every disparity in [0, d_max] from every
        plane. An explicitly chosen search_extent is kept as is.
        """
        if "search_extent" in self.model_fields_set:
            return self
        extent = covering_extent(planes, d_max)
        logger.debug(f"Search extent {extent} covers [0, {d_max:g}]")
        return self.model_copy(update={"search_extent": extent})


def covering_extent(planes: Sequence[float], d_max: float) -> int:
    """Largest residual between any plane and any disparity in [0, d_max]."""
    planes = list(planes)
    reach = max(max(planes), d_max - min(planes))
    return max(1, math.ceil(reach))


@dataclass(frozen=True)
class ConfidenceMap:
    """
    Per-pixel confidence that the scene point lies in front of a plane.
    Values near 1 mean "in front", near 0 "behind". Invalid pixels hold 0.
    """

    confidences: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        valid = np.array(self.valid, dtype=bool)
        confidences = np.array(self.confidences, dtype=np.float64)
        if confidences.ndim != 2 or valid.shape != confidences.shape:
            raise ValueError("Confidence and validity must be matching 2-D arrays")
        confidences[~valid] = 0.0
        inside = confidences[valid]
        if np.any(~np.isfinite(inside)) or np.any((inside < 0.0) | (inside > 1.0)):
            raise ValueError("Valid confidences must lie within [0, 1]")
        confidences.setflags(write=False)
        valid.setflags(write=False)
        object.__setattr__(self, "confidences", confidences)
        object.__setattr__(self, "valid", valid)

    @property
    def shape(self) -> tuple[int, int]:
        return self.confidences.shape

    def log_odds(self, eps: float = 1e-12) -> np.ndarray:
        """log(C / (1 - C)) on valid pixels, NaN elsewhere."""
        c = np.clip(self.confidences, eps, 1.0 - eps)
        return np.where(self.valid, np.log(c / (1.0 - c)), np.nan)


PlaneClassifier = Callable[[float], ConfidenceMap]


def box_sum(values: np.ndarray, radius: int, outside: float = 0.0) -> np.ndarray:
    """
    Sum over the (2r+1)^2 window around each pixel. Samples beyond the border
    count as `outside`. Integer-valued inputs give exact integer sums.
    """
    kernel = np.ones(2 * radius + 1)
    values = np.asarray(values, dtype=np.float64)
    out = ndimage.correlate1d(values, kernel, axis=0, mode="constant", cval=outside)
    return ndimage.correlate1d(out, kernel, axis=1, mode="constant", cval=outside)


def window_valid(valid: np.ndarray, radius: int) -> np.ndarray:
    """True where the whole window is inside the image and valid."""
    return box_sum(~valid, radius, outside=1.0) == 0


def census_transform(
    pixels: np.ndarray, valid: np.ndarray, radius: int
) -> tuple[np.ndarray, np.ndarray]:
    """
    Census descriptors packed into bytes.

    Bit k is set when neighbour k of the window is darker than the centre.

    Returns:
        tuple[np.ndarray, np.ndarray]: (height, width, nbytes) uint8 codes and
            descriptor validity (window inside the image and fully valid)
    """
    height, width = pixels.shape
    size = 2 * radius + 1
    nbytes = (size * size - 1 + 7) // 8
    codes = np.zeros((height, width, nbytes), dtype=np.uint8)
    ok = np.zeros((height, width), dtype=bool)
    if height < size or width < size:
        return codes, ok

    inner = (slice(radius, height - radius), slice(radius, width - radius))
    windows = sliding_window_view(pixels, (size, size))
    bits = windows < pixels[inner][..., None, None]
    bits = bits.reshape(*bits.shape[:2], size * size)
    bits = np.delete(bits, size * size // 2, axis=-1)
    codes[inner] = np.packbits(bits, axis=-1)
    ok[inner] = sliding_window_view(valid, (size, size)).all(axis=(-2, -1))
    return codes, ok


def _columns(width: int, delta: int) -> tuple[slice, slice]:
    """Column slices pairing reference column x with other column x + delta."""
    if delta >= 0:
        return slice(0, max(width - delta, 0)), slice(delta, width)
    return slice(-delta, width), slice(0, max(width + delta, 0))


def _census_costs(
    reference: np.ndarray,
    reference_ok: np.ndarray,
    other: np.ndarray,
    other_ok: np.ndarray,
    offsets: list[int],
    cfg: ClassifierConfig,
) -> np.ndarray:
    ref_codes, ref_ok = census_transform(reference, reference_ok, cfg.desc_radius)
    oth_codes, oth_ok = census_transform(other, other_ok, cfg.desc_radius)
    height, width = reference.shape

    costs = np.full((len(offsets), height, width), np.inf)
    for index, delta in enumerate(offsets):
        ref_cols, oth_cols = _columns(width, delta)
        hamming = np.zeros((height, width))
        ok = np.zeros((height, width), dtype=bool)
        hamming[:, ref_cols] = np.bitwise_count(
            ref_codes[:, ref_cols] ^ oth_codes[:, oth_cols]
        ).sum(axis=-1)
        ok[:, ref_cols] = ref_ok[:, ref_cols] & oth_ok[:, oth_cols]
        hamming[~ok] = 0.0
        aggregated = box_sum(hamming, cfg.agg_radius)
        usable = window_valid(ok, cfg.agg_radius)
        costs[index][usable] = aggregated[usable]
    return costs


def _ncc_costs(
    reference: np.ndarray,
    reference_ok: np.ndarray,
    other: np.ndarray,
    other_ok: np.ndarray,
    offsets: list[int],
    cfg: ClassifierConfig,
) -> np.ndarray:
    height, width = reference.shape
    radius = cfg.desc_radius
    n = float((2 * radius + 1) ** 2)
    costs = np.full((len(offsets), height, width), np.inf)

    for index, delta in enumerate(offsets):
        ref_cols, oth_cols = _columns(width, delta)
        moved = np.zeros((height, width))
        moved_ok = np.zeros((height, width), dtype=bool)
        moved[:, ref_cols] = other[:, oth_cols]
        moved_ok[:, ref_cols] = other_ok[:, oth_cols]
        ok = reference_ok & moved_ok
        a = np.where(ok, reference, 0.0)
        b = np.where(ok, moved, 0.0)

        sum_a = box_sum(a, radius)
        sum_b = box_sum(b, radius)
        var_a = n * box_sum(a * a, radius) - sum_a * sum_a
        var_b = n * box_sum(b * b, radius) - sum_b * sum_b
        cross = n * box_sum(a * b, radius) - sum_a * sum_b

        # Flat patches have no defined correlation; that offset is excluded
        floor = NCC_MIN_VARIANCE * n * n
        textured = (var_a > floor) & (var_b > floor)
        ok = window_valid(ok, radius) & textured
        with np.errstate(divide="ignore", invalid="ignore"):
            ncc = cross / np.sqrt(var_a * var_b)
        per_pixel = np.where(ok, 1.0 - np.clip(ncc, -1.0, 1.0), 0.0)

        side = float((2 * cfg.agg_radius + 1) ** 2)
        aggregated = box_sum(per_pixel, cfg.agg_radius) / side
        usable = window_valid(ok, cfg.agg_radius)
        costs[index][usable] = aggregated[usable]
    return costs


def matching_costs(
    reference: np.ndarray,
    reference_ok: np.ndarray,
    other: np.ndarray,
    other_ok: np.ndarray,
    offsets: list[int],
    cfg: ClassifierConfig,
) -> np.ndarray:
    """
    Window-aggregated matching cost between the reference patch at (x, y) and
    the other image's patch at (x + delta, y), for every delta in `offsets`.

    Census: Hamming distances summed over the aggregation window.
    NCC: 1 - normalised cross-correlation, averaged over the aggregation window.

    Returns:
        np.ndarray: (len(offsets), height, width) costs, +inf where undefined
    """
    height, width = reference.shape
    if height < cfg.footprint or width < cfg.footprint:
        raise ClassifierError(
            f"Matching window {cfg.footprint}x{cfg.footprint} is larger than "
            + f"the {width}x{height} image"
        )
    if cfg.cost == CostKind.CENSUS:
        return _census_costs(reference, reference_ok, other, other_ok, offsets, cfg)
    return _ncc_costs(reference, reference_ok, other, other_ok, offsets, cfg)


def direction_vote(costs: np.ndarray, tau: float) -> ConfidenceMap:
    """
    Turn costs over offsets -K..K into a front/behind confidence.

    Weights are exp(-c / tau) normalised over the valid offsets; the
    confidence is the mass of negative offsets plus half the zero offset.
    Sums run in increasing |delta| for both sides so that mirror-symmetric
    costs give exactly 0.5.
    """
    extent = costs.shape[0] // 2
    finite = np.isfinite(costs)
    valid = finite.any(axis=0)
    lowest = np.where(valid, np.where(finite, costs, np.inf).min(axis=0), 0.0)
    with np.errstate(invalid="ignore", over="ignore"):
        weights = np.where(finite, np.exp(-(costs - lowest) / tau), 0.0)

    behind = np.zeros(valid.shape)
    front = np.zeros(valid.shape)
    for k in range(1, extent + 1):
        front += weights[extent - k]
        behind += weights[extent + k]
    centre = weights[extent]

    total = front + centre + behind
    with np.errstate(invalid="ignore", divide="ignore"):
        confidence = 0.5 + 0.5 * (front - behind) / total
    confidence = np.where(valid, np.clip(confidence, 0.0, 1.0), 0.0)
    return ConfidenceMap(confidence, valid)


def classify_plane(
    pair: StereoPair, d_i: float, cfg: ClassifierConfig | None = None
) -> ConfidenceMap:
    """
    Classify every pixel as in front of or behind the plane at disparity d_i.

    The right image is warped onto the plane; the leftover horizontal offset
    of the best match says which side of the plane the point is on
    (leftward residual = in front).

    Args:
        pair (StereoPair): rectified views
        d_i (float): plane disparity, >= 0
        cfg (ClassifierConfig | None): classifier settings (default: defaults)

    Returns:
        ConfidenceMap: per-pixel confidence of being in front of the plane
    """
    cfg = cfg or ClassifierConfig()
    warped = warp_right(pair.right, d_i)
    # Offsets beyond the image width never overlap it
    extent = min(cfg.search_extent, max(pair.shape[1] - 1, 1))
    offsets = list(range(-extent, extent + 1))
    costs = matching_costs(
        pair.left.pixels,
        np.ones(pair.shape, dtype=bool),
        warped.image.pixels,
        warped.valid,
        offsets,
        cfg,
    )
    confidence = direction_vote(costs, cfg.tau)
    logger.debug(f"Plane {d_i}: {int(confidence.valid.sum())} valid pixels")
    return confidence


def oracle_classify(gt: DisparityMap, d_i: float) -> ConfidenceMap:
    """
    Ideal classifier from ground truth: 1 where d_i < gt, 0 where d_i >= gt.
    Invalid ground truth gives invalid confidence.
    """
    valid = gt.valid
    confidence = np.where(valid, d_i < np.where(valid, gt.values, 0.0), False)
    return ConfidenceMap(confidence.astype(np.float64), valid)


def plane_classifier(
    pair: StereoPair, cfg: ClassifierConfig | None = None
) -> PlaneClassifier:
    """Bind a stereo pair and settings into a `d -> ConfidenceMap` callable."""
    return partial(classify_plane, pair, cfg=cfg or ClassifierConfig())


def oracle_classifier(gt: DisparityMap) -> PlaneClassifier:
    return partial(oracle_classify, gt)


def binarize(c: ConfidenceMap) -> LabelMap:
    """
    Threshold confidence at 0.5: FRONT above, BEHIND below, FRONT on a tie.
    Invalid pixels are labelled BEHIND and flagged invalid.
    """
    front = c.valid & (c.confidences >= 0.5)
    labels = np.where(front, Label.FRONT, Label.BEHIND)
    return LabelMap(labels, num_labels=2, valid=c.valid)


def smooth_confidence(c: ConfidenceMap, radius: int) -> ConfidenceMap:
    """
    Box-filter average over the valid neighbours of each pixel, windows
    truncated at the border. Invalid pixels stay invalid.
    """
    if radius < 0:
        raise ClassifierError(f"Smoothing radius must be >= 0, got {radius}")
    if radius == 0:
        return c
    weight = c.valid.astype(np.float64)
    total = box_sum(c.confidences * weight, radius)
    count = box_sum(weight, radius)
    smoothed = np.where(count > 0, total / np.maximum(count, 1.0), 0.0)
    return ConfidenceMap(np.clip(smoothed, 0.0, 1.0), c.valid)
