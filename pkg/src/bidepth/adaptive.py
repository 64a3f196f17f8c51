import logging
import math
from collections.abc import Iterable, Iterator
from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from bidepth.classifier import (
    ClassifierConfig,
    ConfidenceMap,
    binarize,
    oracle_classifier,
    plane_classifier,
)
from bidepth.depthops import SelectiveDepth, assemble_volume, selective_disparity
from bidepth.geometry import PlaneSchedule, uniform_schedule
from bidepth.imgio import DisparityMap, Label, LabelMap, StereoPair

logger = logging.getLogger("bidepth.adaptive")


class AdaptiveConfig(BaseModel):
    range_lo: float = Field(
        ge=0, description="Far edge d_a of the base selective range (pixels)"
    )
    range_hi: float = Field(description="Near edge d_b of the base selective range")
    fence: float = Field(
        ge=0, description="Geo-fence disparity d_f, farther than the range"
    )
    trigger: float = Field(
        default=0.02,
        gt=0,
        lt=1,
        description="Fence fraction that extends the range",
    )
    release: float = Field(
        default=0.005,
        ge=0,
        lt=1,
        description="Fence fraction below which a frame counts as quiet",
    )
    release_frames: int = Field(
        default=5,
        ge=1,
        description="Consecutive quiet frames needed to return to the base range",
    )
    planes_per_range: int = Field(
        default=8, ge=2, description="Planes used to sample the base range"
    )
    roi: tuple[int, int, int, int] | None = Field(
        default=None,
        description="Region (x0, y0, x1, y1), end-exclusive, the fence watches",
    )
    fence_band: bool = Field(
        default=False,
        description="Count only pixels between the fence and the range",
    )
    model_config = ConfigDict(title="Adaptive selective depth", frozen=True)

    @model_validator(mode="after")
    def _check_ordering(self) -> "AdaptiveConfig":
        if self.range_lo >= self.range_hi:
            raise ValueError(
                f"Base range [{self.range_lo}, {self.range_hi}] is empty or inverted"
            )
        if self.fence >= self.range_lo:
            raise ValueError(
                f"Fence {self.fence} must be farther (smaller) than {self.range_lo}"
            )
        if self.release >= self.trigger:
            raise ValueError("Release fraction must be below the trigger fraction")
        if self.roi is not None:
            x0, y0, x1, y1 = self.roi
            if x0 < 0 or y0 < 0 or x1 <= x0 or y1 <= y0:
                raise ValueError(f"Empty or negative region of interest {self.roi}")
        return self

    def base_schedule(self) -> PlaneSchedule:
        return uniform_schedule(self.range_lo, self.range_hi, self.planes_per_range)

    def extended_schedule(self) -> PlaneSchedule:
        """
        Base planes preceded by planes over [fence, range_lo) at the base
        spacing, so the fence itself is the farthest plane.
        """
        base = self.base_schedule()
        spacing = (self.range_hi - self.range_lo) / (self.planes_per_range - 1)
        count = max(1, math.ceil((self.range_lo - self.fence) / spacing))
        segment = np.linspace(self.fence, self.range_lo, count, endpoint=False)
        return PlaneSchedule((*segment.tolist(), *base.disparities))


@dataclass(frozen=True)
class AdaptiveState:
    extended: bool = False
    quiet_frames: int = 0


@dataclass(frozen=True)
class AdaptiveFrame:
    """Outcome of one frame: selective depth on the active range and the fence."""

    selective: SelectiveDepth
    fence: LabelMap
    state: AdaptiveState
    fence_fraction: float

    @property
    def active_range(self) -> tuple[float, float]:
        return self.selective.d_lo, self.selective.d_hi


def _region(shape: tuple[int, int], roi: tuple[int, int, int, int] | None):
    mask = np.zeros(shape, dtype=bool)
    if roi is None:
        mask[:] = True
    else:
        x0, y0, x1, y1 = roi
        mask[y0:y1, x0:x1] = True
    return mask


def fence_fraction(
    fence: ConfidenceMap,
    roi: tuple[int, int, int, int] | None = None,
    far: ConfidenceMap | None = None,
) -> float:
    """
    Share of the watched valid pixels labelled FRONT at the fence plane.

    Args:
        fence (ConfidenceMap): classification at the fence plane
        roi (tuple[int, int, int, int] | None): watched region (default: all)
        far (ConfidenceMap | None): classification at the range's far plane;
            when given, pixels already FRONT there are not counted, leaving
            only those between the fence and the range

    Returns:
        float: fraction in [0, 1]; 0 when no watched pixel is valid
    """
    at_fence = binarize(fence)
    watched = _region(fence.shape, roi) & at_fence.valid
    crossing = at_fence.select(Label.FRONT)
    if far is not None:
        at_far = binarize(far)
        watched &= at_far.valid
        crossing &= at_far.select(Label.BEHIND)
    total = int(watched.sum())
    if total == 0:
        return 0.0
    return int((crossing & watched).sum()) / total


def next_state(
    state: AdaptiveState, fraction: float, cfg: AdaptiveConfig
) -> AdaptiveState:
    """
    Hysteresis: extend as soon as the fraction reaches the trigger; once
    extended, return to the base range on the release_frames-th consecutive
    frame below the release fraction.
    """
    if not state.extended:
        if fraction >= cfg.trigger:
            return AdaptiveState(extended=True, quiet_frames=0)
        return state
    if fraction >= cfg.release:
        return AdaptiveState(extended=True, quiet_frames=0)
    quiet = state.quiet_frames + 1
    if quiet >= cfg.release_frames:
        return AdaptiveState(extended=False, quiet_frames=0)
    return AdaptiveState(extended=True, quiet_frames=quiet)


def adaptive_step(
    state: AdaptiveState,
    pair: StereoPair,
    cfg_a: AdaptiveConfig,
    cfg_c: ClassifierConfig | None = None,
    gt: DisparityMap | None = None,
    workers: int | None = None,
) -> AdaptiveFrame:
    """
    Process one frame of the adaptive strategy.

    The fence plane and the far plane of the base range are classified
    first. The fence labels decide the next state, which takes effect in
    this same frame; both slices are then reused in the selective volume.

    Args:
        state (AdaptiveState): state after the previous frame
        pair (StereoPair): current frame
        cfg_a (AdaptiveConfig): ranges and thresholds
        cfg_c (ClassifierConfig | None): classifier settings
        gt (DisparityMap | None): when given, the ground-truth classifier is
            used instead of the matching classifier
        workers (int | None): plane pool size

    Returns:
        AdaptiveFrame: selective depth, fence mask, next state and statistic
    """
    cfg_c = cfg_c or ClassifierConfig()
    if gt is not None:
        classify = oracle_classifier(gt)
    else:
        classify = plane_classifier(pair, cfg_c)

    fence, far = cfg_a.fence, cfg_a.range_lo
    cached = {fence: classify(fence), far: classify(far)}
    fraction = fence_fraction(
        cached[fence], cfg_a.roi, cached[far] if cfg_a.fence_band else None
    )
    state_after = next_state(state, fraction, cfg_a)
    if state_after.extended != state.extended:
        change = "extending to the fence" if state_after.extended else "back to base"
        logger.info(f"Fence fraction {fraction:.4f}: {change}")

    if state_after.extended:
        schedule = cfg_a.extended_schedule()
    else:
        schedule = cfg_a.base_schedule()
    volume = assemble_volume(
        schedule,
        lambda d: cached[d] if d in cached else classify(d),
        0 if gt is not None else cfg_c.smooth_radius,
        workers,
    )
    return AdaptiveFrame(
        selective=selective_disparity(volume),
        fence=binarize(cached[fence]),
        state=state_after,
        fence_fraction=fraction,
    )


def run_sequence(
    frames: Iterable[tuple[StereoPair, DisparityMap | None]],
    cfg_a: AdaptiveConfig,
    cfg_c: ClassifierConfig | None = None,
    state: AdaptiveState | None = None,
    workers: int | None = None,
) -> Iterator[AdaptiveFrame]:
    """Drive `adaptive_step` over an ordered sequence of (pair, gt) frames."""
    state = state or AdaptiveState()
    for index, (pair, gt) in enumerate(frames):
        frame = adaptive_step(state, pair, cfg_a, cfg_c, gt, workers)
        logger.debug(
            f"Frame {index}: fence fraction {frame.fence_fraction:.4f}, "
            + f"range {frame.active_range}"
        )
        state = frame.state
        yield frame
