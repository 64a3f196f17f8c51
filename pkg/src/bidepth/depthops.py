import logging
import math
import threading
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import StrEnum

import numpy as np

from bidepth.classifier import (
    ClassifierConfig,
    ConfidenceMap,
    PlaneClassifier,
    oracle_classifier,
    plane_classifier,
    smooth_confidence,
)
from bidepth.geometry import PlaneSchedule, uniform_schedule
from bidepth.imgio import INVALID, DisparityMap, Label, LabelMap, StereoPair
from bidepth.utils import resolve_workers

logger = logging.getLogger("bidepth.depthops")

DEFAULT_MAX_DISPARITY = 192.0


class VolumeError(ValueError):
    pass


class IntegrationRule(StrEnum):
    TRAPEZOID = "trapezoid"
    LEFT = "left"
    RIGHT = "right"


@dataclass(frozen=True)
class ConfidenceVolume:
    """
    One confidence map per plane, in schedule order (ascending disparity).
    """

    schedule: PlaneSchedule
    slices: tuple[ConfidenceMap, ...]

    def __post_init__(self):
        slices = tuple(self.slices)
        if len(slices) != len(self.schedule):
            raise VolumeError(
                f"{len(slices)} slices for a schedule of {len(self.schedule)} planes"
            )
        if len({s.shape for s in slices}) != 1:
            raise VolumeError("All slices of a volume must share their dimensions")
        object.__setattr__(self, "slices", slices)

    @property
    def shape(self) -> tuple[int, int]:
        return self.slices[0].shape

    def stack(self) -> np.ndarray:
        """(planes, height, width) confidences."""
        return np.stack([s.confidences for s in self.slices])

    @property
    def valid(self) -> np.ndarray:
        """Pixels valid in every slice."""
        return np.logical_and.reduce([s.valid for s in self.slices])


@dataclass(frozen=True)
class QuantizedDepth:
    """
    Bin index k means a disparity in (edges[k], edges[k + 1]]. edges holds
    0, the plane disparities and +inf; the open last bin is closed at
    scene_max when its centre is computed.
    """

    bins: LabelMap
    centers: DisparityMap
    edges: tuple[float, ...]
    scene_max: float


@dataclass(frozen=True)
class SelectiveDepth:
    """
    Continuous disparity inside [d_lo, d_hi]; pixels outside the range are
    labelled FRONT or BEHIND and carry an invalid disparity.
    """

    disparity: DisparityMap
    labels: LabelMap
    d_lo: float
    d_hi: float


def assemble_volume(
    schedule: PlaneSchedule,
    classify: PlaneClassifier,
    smooth_radius: int = 0,
    workers: int | None = None,
) -> ConfidenceVolume:
    """
    Classify every plane of a schedule and stack the results.

    Planes are classified in parallel; slices are collected in schedule
    order so the result does not depend on scheduling.

    Args:
        schedule (PlaneSchedule): planes to classify
        classify (PlaneClassifier): `d -> ConfidenceMap`
        smooth_radius (int): box smoothing per slice (default: 0, off)
        workers (int | None): pool size; None reads BI3D_THREADS

    Returns:
        ConfidenceVolume: the confidence volume
    """
    workers = min(resolve_workers(workers), len(schedule))

    def classify_one(d: float) -> ConfidenceMap:
        confidence = classify(d)
        if smooth_radius:
            confidence = smooth_confidence(confidence, smooth_radius)
        return confidence

    if workers == 1:
        slices = [classify_one(d) for d in schedule]
    else:
        logger.debug(f"Classifying {len(schedule)} planes with {workers} workers")

        def classify_named(idx: int, d: float) -> ConfidenceMap:
            threading.current_thread().name = f"plane-{idx}"
            return classify_one(d)

        with ThreadPoolExecutor(max_workers=workers) as executor:
            slices = list(executor.map(classify_named, range(len(schedule)), schedule))
    return ConfidenceVolume(schedule, tuple(slices))


def build_volume(
    pair: StereoPair,
    schedule: PlaneSchedule,
    cfg: ClassifierConfig | None = None,
    workers: int | None = None,
) -> ConfidenceVolume:
    """Confidence volume of a stereo pair under the classical classifier."""
    cfg = cfg or ClassifierConfig()
    return assemble_volume(
        schedule, plane_classifier(pair, cfg), cfg.smooth_radius, workers
    )


def build_oracle_volume(
    gt: DisparityMap, schedule: PlaneSchedule, workers: int | None = None
) -> ConfidenceVolume:
    """Confidence volume of the ground-truth classifier."""
    return assemble_volume(schedule, oracle_classifier(gt), 0, workers)


def auc_disparity(
    vol: ConfidenceVolume, rule: IntegrationRule = IntegrationRule.TRAPEZOID
) -> DisparityMap:
    """
    Disparity as the area under each pixel's confidence curve.

    d = d_0 + sum_i area_i, with area_i the trapezoid (or left / right
    rectangle) over [d_{i-1}, d_i]. Accumulation runs in ascending
    disparity. Pixels with an invalid slice are invalid.

    Args:
        vol (ConfidenceVolume): at least two planes
        rule (IntegrationRule): quadrature rule (default: trapezoid)

    Returns:
        DisparityMap: continuous disparity within [d_0, d_N]
    """
    if len(vol.schedule) < 2:
        raise VolumeError("Disparity regression needs at least two planes")

    stack = vol.stack()
    planes = vol.schedule.as_array()
    disparity = np.full(vol.shape, planes[0])
    for i in range(1, len(planes)):
        if rule == IntegrationRule.TRAPEZOID:
            height = 0.5 * (stack[i - 1] + stack[i])
        elif rule == IntegrationRule.LEFT:
            height = stack[i - 1]
        else:
            height = stack[i]
        disparity = disparity + height * (planes[i] - planes[i - 1])

    disparity = np.clip(disparity, planes[0], planes[-1])
    return DisparityMap(np.where(vol.valid, disparity, INVALID))


def bin_probabilities(vol: ConfidenceVolume, isotonic: bool = False) -> np.ndarray:
    """
    Mass of every quantization bin before clamping.

    The confidences are extended with 1 at disparity 0 and 0 at infinity, so
    bin k gets C(edge_k) - C(edge_k+1) and the masses telescope to 1.

    Args:
        vol (ConfidenceVolume): confidence volume
        isotonic (bool): enforce non-increasing confidence with a running
            minimum along ascending disparity (default: False)

    Returns:
        np.ndarray: (planes + 1, height, width) bin masses
    """
    stack = vol.stack()
    if isotonic:
        stack = np.minimum.accumulate(stack, axis=0)
    ones = np.ones((1, *vol.shape))
    extended = np.concatenate([ones, stack, np.zeros_like(ones)])
    return extended[:-1] - extended[1:]


def _bin_centers(planes: np.ndarray, scene_max: float) -> np.ndarray:
    closed = np.concatenate([[0.0], planes, [scene_max]])
    return 0.5 * (closed[:-1] + closed[1:])


def quantized_disparity(
    vol: ConfidenceVolume, scene_max: float, isotonic: bool = False
) -> QuantizedDepth:
    """
    Quantized depth: N planes give N + 1 bins; each pixel takes the bin with
    the highest (clamped) probability, the farther bin on ties.

    Args:
        vol (ConfidenceVolume): confidence volume
        scene_max (float): disparity closing the open nearest bin, > d_N
        isotonic (bool): see `bin_probabilities` (default: False)

    Returns:
        QuantizedDepth: bin indices and bin-centre disparities
    """
    planes = vol.schedule.as_array()
    if not math.isfinite(scene_max) or scene_max <= planes[-1]:
        raise VolumeError(
            f"Scene maximum {scene_max} must be finite and beyond the nearest "
            + f"plane {planes[-1]}"
        )

    probabilities = np.clip(bin_probabilities(vol, isotonic), 0.0, None)
    index = np.argmax(probabilities, axis=0)
    valid = vol.valid
    centers = _bin_centers(planes, scene_max)[index]

    return QuantizedDepth(
        bins=LabelMap(np.where(valid, index, 0), len(planes) + 1, valid),
        centers=DisparityMap(np.where(valid, centers, INVALID)),
        edges=(0.0, *planes.tolist(), math.inf),
        scene_max=float(scene_max),
    )


def expected_disparity(
    vol: ConfidenceVolume, scene_max: float, isotonic: bool = False
) -> DisparityMap:
    """
    Soft-segmentation estimate: bin centres weighted by the clamped,
    renormalised bin probabilities.
    """
    planes = vol.schedule.as_array()
    if not math.isfinite(scene_max) or scene_max <= planes[-1]:
        raise VolumeError(f"Scene maximum {scene_max} must lie beyond {planes[-1]}")
    probabilities = np.clip(bin_probabilities(vol, isotonic), 0.0, None)
    centers = _bin_centers(planes, scene_max)
    mean = np.tensordot(centers, probabilities, axes=1) / probabilities.sum(axis=0)
    return DisparityMap(np.where(vol.valid, mean, INVALID))


def crossing_disparity(vol: ConfidenceVolume) -> DisparityMap:
    """
    First place, in ascending disparity, where the confidence drops below
    0.5, linearly interpolated between the two planes around it. Pixels whose
    curve never crosses are invalid.
    """
    if len(vol.schedule) < 2:
        raise VolumeError("A crossing needs at least two planes")
    stack = vol.stack()
    planes = vol.schedule.as_array()

    below = stack < 0.5
    crosses = below[1:] & ~below[:-1]
    found = crosses.any(axis=0) & vol.valid
    upper = np.argmax(crosses, axis=0) + 1

    c_hi = np.take_along_axis(stack, (upper - 1)[None], axis=0)[0]
    c_lo = np.take_along_axis(stack, upper[None], axis=0)[0]
    d_hi = planes[upper - 1]
    d_lo = planes[upper]
    with np.errstate(invalid="ignore", divide="ignore"):
        crossing = d_hi + (c_hi - 0.5) / (c_hi - c_lo) * (d_lo - d_hi)
    return DisparityMap(np.where(found, crossing, INVALID))


def selective_disparity(
    vol: ConfidenceVolume, rule: IntegrationRule = IntegrationRule.TRAPEZOID
) -> SelectiveDepth:
    """
    Continuous depth restricted to the schedule's range.

    FRONT when the nearest plane's confidence is above 0.5, otherwise BEHIND
    when the farthest plane's confidence is below 0.5, otherwise IN_RANGE
    with the AUC disparity.

    Args:
        vol (ConfidenceVolume): at least two planes
        rule (IntegrationRule): quadrature rule for in-range pixels

    Returns:
        SelectiveDepth: disparity valid on IN_RANGE pixels plus labels
    """
    auc = auc_disparity(vol, rule)
    stack = vol.stack()
    valid = vol.valid

    front = stack[-1] > 0.5
    behind = ~front & (stack[0] < 0.5)
    labels = np.where(behind, Label.BEHIND, Label.IN_RANGE)
    labels = np.where(front, Label.FRONT, labels)
    labels = np.where(valid, labels, Label.BEHIND)
    in_range = valid & (labels == Label.IN_RANGE)

    logger.debug(
        f"Selective [{vol.schedule.farthest}, {vol.schedule.nearest}]: "
        + f"{int((valid & front).sum())} front, {int((valid & behind).sum())} "
        + f"behind, {int(in_range.sum())} in range"
    )
    return SelectiveDepth(
        disparity=DisparityMap(np.where(in_range, auc.values, INVALID)),
        labels=LabelMap(labels, num_labels=3, valid=valid),
        d_lo=vol.schedule.farthest,
        d_hi=vol.schedule.nearest,
    )


def full_disparity(
    pair: StereoPair,
    cfg: ClassifierConfig | None = None,
    d_max: float = DEFAULT_MAX_DISPARITY,
    count: int | None = None,
    workers: int | None = None,
    rule: IntegrationRule = IntegrationRule.TRAPEZOID,
) -> DisparityMap:
    """
    Full continuous disparity over [0, d_max] with `count` planes (default:
    unit spacing, never fewer than two planes). Unless set explicitly, the
    search extent is widened to cover the whole range.
    """
    if not math.isfinite(d_max) or d_max <= 0:
        raise VolumeError(f"Maximum disparity must be positive, got {d_max}")
    count = count or unit_count(d_max)
    schedule = uniform_schedule(0.0, d_max, count)
    cfg = (cfg or ClassifierConfig()).fitted_to(schedule, d_max)
    return auc_disparity(build_volume(pair, schedule, cfg, workers), rule)


def unit_count(span: float) -> int:
    """Planes needed for unit spacing over a span, at least two."""
    return max(int(math.floor(span)) + 1, 2)


def bin_disparity(gt: DisparityMap, planes: Sequence[float]) -> LabelMap:
    """
    Bin disparities directly with the quantization edges: the index is the
    number of planes strictly below the disparity.
    """
    planes = np.asarray(list(planes), dtype=np.float64)
    valid = gt.valid
    index = np.searchsorted(planes, np.where(valid, gt.values, 0.0), side="left")
    return LabelMap(np.where(valid, index, 0), len(planes) + 1, valid)


def range_labels(gt: DisparityMap, d_lo: float, d_hi: float) -> LabelMap:
    """
    Reference range labelling: FRONT beyond d_hi, BEHIND at or below d_lo,
    IN_RANGE otherwise.
    """
    valid = gt.valid
    values = np.where(valid, gt.values, 0.0)
    labels = np.where(
        values > d_hi,
        Label.FRONT,
        np.where(values <= d_lo, Label.BEHIND, Label.IN_RANGE),
    )
    return LabelMap(np.where(valid, labels, Label.BEHIND), 3, valid)
