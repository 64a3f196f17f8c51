import csv
import logging
import statistics
import time
from collections.abc import Sequence
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from bidepth.classifier import ClassifierConfig
from bidepth.depthops import build_volume
from bidepth.geometry import uniform_schedule
from bidepth.imgio import StereoPair

logger = logging.getLogger("bidepth.bench")

DEFAULT_COUNTS = (2, 4, 8, 16, 32)


class BenchResult(BaseModel):
    count: int = Field(ge=1, description="Planes in the volume")
    mean_ms: float = Field(ge=0, description="Mean wall time in milliseconds")
    std_ms: float = Field(ge=0, description="Sample standard deviation")
    model_config = ConfigDict(title="Volume build timing", frozen=True)


def time_build_volume(
    pair: StereoPair,
    counts: Sequence[int] = DEFAULT_COUNTS,
    cfg: ClassifierConfig | None = None,
    repeats: int = 3,
    d_max: float = 64.0,
) -> list[BenchResult]:
    """
    Time `build_volume` for each plane count on a fixed pair.

    Planes are spread uniformly over [0, d_max] and classified one after the
    other (a single worker), so wall time tracks the number of planes.

    Args:
        pair (StereoPair): input frame
        counts (Sequence[int]): plane counts to time
        cfg (ClassifierConfig | None): classifier settings
        repeats (int): timed runs per count, after one warm-up run

    Returns:
        list[BenchResult]: one row per count
    """
    if repeats < 1:
        raise ValueError(f"Need at least one repeat, got {repeats}")
    cfg = cfg or ClassifierConfig()
    results = []
    for count in counts:
        schedule = (
            uniform_schedule(0.0, d_max, count)
            if count > 1
            else uniform_schedule(d_max, d_max, 1)
        )
        build_volume(pair, schedule, cfg, workers=1)
        samples = []
        for _ in range(repeats):
            start = time.perf_counter()
            build_volume(pair, schedule, cfg, workers=1)
            samples.append((time.perf_counter() - start) * 1000.0)
        result = BenchResult(
            count=count,
            mean_ms=statistics.mean(samples),
            std_ms=statistics.stdev(samples) if repeats > 1 else 0.0,
        )
        logger.info(f"{count} planes: {result.mean_ms:.2f} ms +/- {result.std_ms:.2f}")
        results.append(result)
    return results


def linear_fit(rows: Sequence[BenchResult]) -> tuple[float, float, float]:
    """
    Least-squares line through (count, mean_ms).

    Returns:
        tuple[float, float, float]: slope (ms per plane), intercept and R^2
    """
    if len({r.count for r in rows}) < 2:
        raise ValueError("A linear fit needs at least two distinct plane counts")
    x = np.array([r.count for r in rows], dtype=np.float64)
    y = np.array([r.mean_ms for r in rows])
    slope, intercept = np.polyfit(x, y, 1)
    residual = y - (slope * x + intercept)
    total = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((residual**2).sum()) / total if total > 0 else 1.0
    return float(slope), float(intercept), r2


def write_bench_csv(rows: Sequence[BenchResult], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["count", "mean_ms", "std_ms"])
        for row in rows:
            writer.writerow([row.count, f"{row.mean_ms:.4f}", f"{row.std_ms:.4f}"])
