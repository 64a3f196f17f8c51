import logging
from collections.abc import Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from bidepth.depthops import bin_disparity
from bidepth.imgio import DisparityMap, LabelMap

logger = logging.getLogger("bidepth.metrics")

DEFAULT_BAD_THRESHOLD = 3.0


class MetricError(ValueError):
    pass


def _selection(
    pred: DisparityMap, gt: DisparityMap, mask: np.ndarray | None
) -> np.ndarray:
    if pred.shape != gt.shape:
        raise MetricError(f"Prediction is {pred.shape} but ground truth is {gt.shape}")
    selected = pred.valid & gt.valid
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != gt.shape:
            raise MetricError("Mask does not match the ground truth")
        selected &= mask
    if not selected.any():
        raise MetricError("No pixel is valid in both maps and selected by the mask")
    return selected


def epe(pred: DisparityMap, gt: DisparityMap, mask: np.ndarray | None = None) -> float:
    """
    End-point error: mean absolute disparity error.

    Args:
        pred (DisparityMap): estimate
        gt (DisparityMap): reference
        mask (np.ndarray | None): boolean selection, e.g. non-occluded pixels

    Returns:
        float: mean |pred - gt| over pixels valid in both and selected

    Throws:
        MetricError when nothing is left to evaluate.
    """
    selected = _selection(pred, gt, mask)
    return float(np.abs(pred.values[selected] - gt.values[selected]).mean())


def bad_pixel_rate(
    pred: DisparityMap,
    gt: DisparityMap,
    mask: np.ndarray | None = None,
    threshold: float = DEFAULT_BAD_THRESHOLD,
    relative: float | None = None,
) -> float:
    """
    Fraction of selected pixels whose error exceeds `threshold` pixels.

    With `relative` set (0.05 gives the KITTI D1 outlier rule) a pixel must
    also be off by more than that fraction of its true disparity.
    """
    if threshold <= 0:
        raise MetricError(f"Threshold must be positive, got {threshold}")
    selected = _selection(pred, gt, mask)
    error = np.abs(pred.values[selected] - gt.values[selected])
    bad = error > threshold
    if relative is not None:
        bad &= error > relative * np.abs(gt.values[selected])
    return float(bad.mean())


def class_counts(
    pred: LabelMap, gt: LabelMap, classes: int, mask: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Per-class intersection and union pixel counts."""
    if pred.shape != gt.shape:
        raise MetricError(f"Prediction is {pred.shape} but ground truth is {gt.shape}")
    if max(pred.num_labels, gt.num_labels) > classes:
        raise MetricError(f"Label maps use more than {classes} classes")
    selected = pred.valid & gt.valid
    if mask is not None:
        selected &= np.asarray(mask, dtype=bool)
    p = pred.labels[selected]
    g = gt.labels[selected]
    intersections = np.bincount(p[p == g], minlength=classes)
    unions = (
        np.bincount(p, minlength=classes)
        + np.bincount(g, minlength=classes)
        - intersections
    )
    return intersections, unions


def iou_from_counts(
    intersections: Sequence[int], unions: Sequence[int]
) -> tuple[float, list[float | None]]:
    per_class = [
        (int(i) / int(u)) if u else None
        for i, u in zip(intersections, unions, strict=True)
    ]
    present = [v for v in per_class if v is not None]
    if not present:
        raise MetricError("No class is present in either label map")
    return sum(present) / len(present), per_class


def miou(
    pred: LabelMap, gt: LabelMap, classes: int, mask: np.ndarray | None = None
) -> tuple[float, list[float | None]]:
    """
    Mean intersection over union across classes.

    Classes absent from both maps are left out of the mean and reported as
    None in the per-class list.

    Args:
        pred (LabelMap): predicted labels
        gt (LabelMap): reference labels
        classes (int): size of the label set
        mask (np.ndarray | None): boolean selection

    Returns:
        tuple[float, list[float | None]]: mIOU and per-class IOU
    """
    return iou_from_counts(*class_counts(pred, gt, classes, mask))


class MetricReport(BaseModel):
    name: str = Field(default="", description="Image or scene identifier")
    valid_pixels: int = Field(ge=0, description="Pixels evaluated")
    epe: float = Field(ge=0, description="End-point error in pixels")
    bad_pixel_rate: float = Field(
        ge=0, le=1, description="Share of pixels off by more than threshold"
    )
    threshold: float = Field(
        default=DEFAULT_BAD_THRESHOLD, gt=0, description="Bad-pixel threshold"
    )
    miou: float | None = Field(
        default=None, ge=0, le=1, description="Mean IOU of the quantized labels"
    )
    class_iou: list[float | None] = Field(
        default_factory=list, description="IOU per class, None when absent"
    )
    intersections: list[int] = Field(default_factory=list)
    unions: list[int] = Field(default_factory=list)
    model_config = ConfigDict(title="Evaluation of one disparity map")

    @staticmethod
    def csv_header() -> list[str]:
        return ["name", "valid_pixels", "epe", "bad_pixel_rate", "threshold", "miou"]

    def to_csv_row(self) -> list[str]:
        return [
            self.name,
            str(self.valid_pixels),
            f"{self.epe:.6f}",
            f"{self.bad_pixel_rate:.6f}",
            f"{self.threshold:g}",
            "" if self.miou is None else f"{self.miou:.6f}",
        ]

    def to_text(self) -> str:
        lines = [
            f"image:          {self.name or '-'}",
            f"valid pixels:   {self.valid_pixels}",
            f"EPE:            {self.epe:.4f} px",
            f"bad > {self.threshold:g} px:   {100 * self.bad_pixel_rate:.2f}%",
        ]
        if self.miou is not None:
            lines.append(f"mIOU:           {self.miou:.4f}")
            lines += [
                f"  class {k}: {'absent' if v is None else f'{v:.4f}'}"
                for k, v in enumerate(self.class_iou)
            ]
        return "\n".join(lines)


def evaluate(
    pred: DisparityMap,
    gt: DisparityMap,
    mask: np.ndarray | None = None,
    threshold: float = DEFAULT_BAD_THRESHOLD,
    planes: Sequence[float] | None = None,
    name: str = "",
) -> MetricReport:
    """
    Score a disparity map against ground truth. With `planes`, both maps are
    also binned by those quantization edges and compared by mIOU.
    """
    selected = _selection(pred, gt, mask)
    report = {
        "name": name,
        "valid_pixels": int(selected.sum()),
        "epe": epe(pred, gt, selected),
        "bad_pixel_rate": bad_pixel_rate(pred, gt, selected, threshold),
        "threshold": threshold,
    }
    if planes is not None:
        classes = len(planes) + 1
        intersections, unions = class_counts(
            bin_disparity(pred, planes), bin_disparity(gt, planes), classes, selected
        )
        report["miou"], report["class_iou"] = iou_from_counts(intersections, unions)
        report["intersections"] = intersections.tolist()
        report["unions"] = unions.tolist()
    logger.debug(f"Evaluated {name or 'map'}: EPE {report['epe']:.4f}")
    return MetricReport(**report)


class SuiteSummary(BaseModel):
    images: int = Field(ge=1)
    mean_epe: float = Field(ge=0)
    mean_bad_pixel_rate: float = Field(ge=0, le=1)
    mean_miou: float | None = Field(
        default=None, description="Per-image mIOU averaged over images"
    )
    pooled_miou: float | None = Field(
        default=None, description="mIOU of the class counts pooled over images"
    )
    model_config = ConfigDict(title="Evaluation of an image suite")


def summarize(reports: Sequence[MetricReport]) -> SuiteSummary:
    """
    Aggregate per-image reports. Both mIOU protocols are kept: the mean of
    per-image values and the value of the pooled counts.
    """
    if not reports:
        raise MetricError("Nothing to summarize")
    summary = {
        "images": len(reports),
        "mean_epe": float(np.mean([r.epe for r in reports])),
        "mean_bad_pixel_rate": float(np.mean([r.bad_pixel_rate for r in reports])),
    }
    scored = [r for r in reports if r.miou is not None]
    if scored:
        summary["mean_miou"] = float(np.mean([r.miou for r in scored]))
        summary["pooled_miou"], _ = iou_from_counts(
            np.sum([r.intersections for r in scored], axis=0),
            np.sum([r.unions for r in scored], axis=0),
        )
    return SuiteSummary(**summary)
