import csv
import logging
import sys
import time
import traceback
from datetime import timedelta
from enum import StrEnum
from pathlib import Path

import click
import numpy as np
from humanize.number import intcomma
from humanize.time import precisedelta
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from bidepth.adaptive import AdaptiveConfig, run_sequence
from bidepth.bench import DEFAULT_COUNTS, linear_fit, time_build_volume, write_bench_csv
from bidepth.classifier import ClassifierConfig, CostKind, binarize
from bidepth.depthops import (
    DEFAULT_MAX_DISPARITY,
    ConfidenceVolume,
    IntegrationRule,
    auc_disparity,
    build_oracle_volume,
    build_volume,
    quantized_disparity,
    selective_disparity,
    unit_count,
)
from bidepth.geometry import PlaneSchedule, level_schedule, uniform_schedule
from bidepth.imgio import (
    BINARY_PALETTE,
    SELECTIVE_PALETTE,
    ImageFormatError,
    ImageWriteError,
    Label,
    colorize,
    read_pair,
    read_pfm,
    read_pgm,
    render_labels,
    write_pfm,
    write_pgm,
)
from bidepth.metrics import evaluate
from bidepth.synth import SceneError, dump_scene, load_scene, random_scene, render_pair
from bidepth.utils import read_key_values

logger = logging.getLogger("bidepth.cli")

# Failures caused by inputs rather than by bugs: reported in one line
USER_ERRORS = (ImageFormatError, ImageWriteError, SceneError, OSError, ValueError)


class Command(StrEnum):
    BINARY = "binary"
    QUANTIZED = "quantized"
    SELECTIVE = "selective"
    FULL = "full"
    ADAPTIVE = "adaptive"
    SYNTH = "synth"
    BENCH = "bench"
    EVAL = "eval"


class RunConfig(BaseModel):
    command: Command
    left: Path | None = Field(default=None, description="Left view (PGM)")
    right: Path | None = Field(default=None, description="Right view (PGM)")
    gt: Path | None = Field(default=None, description="Ground-truth disparity (PFM)")
    oracle: bool = Field(
        default=False, description="Classify planes from the ground truth"
    )
    out: Path = Field(default=Path("."), description="Output directory")
    plane: float | None = Field(default=None, ge=0, description="Binary plane")
    range: tuple[float, float] | None = Field(
        default=None, description="Selective or adaptive range (d_lo, d_hi)"
    )
    count: int | None = Field(default=None, ge=1, description="Number of planes")
    levels: int | None = Field(default=None, ge=2, description="Quantization levels")
    fence: float | None = Field(default=None, ge=0, description="Fence disparity")
    max_disparity: float = Field(
        default=DEFAULT_MAX_DISPARITY, gt=0, description="Largest scene disparity"
    )
    isotonic: bool = Field(default=False, description="Monotone confidence pass")
    auc_rule: IntegrationRule = Field(
        default=IntegrationRule.TRAPEZOID, description="Quadrature of the AUC"
    )
    classifier: ClassifierConfig = Field(default_factory=ClassifierConfig)
    scene: Path | None = Field(default=None, description="Scene file for synth")
    seed: int | None = Field(default=None, ge=0, description="Random scene seed")
    frames: Path | None = Field(default=None, description="Adaptive frame list")
    trigger: float = Field(default=0.02, gt=0, lt=1)
    release: float = Field(default=0.005, ge=0, lt=1)
    release_frames: int = Field(default=5, ge=1)
    fence_band: bool = Field(
        default=False, description="Count only pixels between fence and range"
    )
    counts: tuple[int, ...] = Field(default=DEFAULT_COUNTS)
    repeats: int = Field(default=3, ge=1)
    pred: Path | None = Field(default=None, description="Disparity to evaluate")
    occlusion: Path | None = Field(
        default=None, description="Occlusion mask (PGM, white = excluded)"
    )
    threshold: float = Field(default=3.0, gt=0, description="Bad-pixel threshold")
    model_config = ConfigDict(title="One bidepth invocation")

    @model_validator(mode="after")
    def _check_command(self) -> "RunConfig":
        needs_frame = {
            Command.BINARY,
            Command.QUANTIZED,
            Command.SELECTIVE,
            Command.FULL,
        }
        if self.command in needs_frame:
            if self.oracle and self.gt is None:
                raise ValueError("--oracle needs --gt")
            if not self.oracle and (self.left is None or self.right is None):
                raise ValueError(f"{self.command} needs --left and --right")
        if self.command == Command.BINARY and self.plane is None:
            raise ValueError("binary needs --plane")
        if self.command == Command.QUANTIZED and not (self.levels or self.count):
            raise ValueError("quantized needs --levels or --count")
        if self.command in (Command.SELECTIVE, Command.ADAPTIVE):
            if self.range is None:
                raise ValueError(f"{self.command} needs --range")
            if self.range[0] >= self.range[1]:
                raise ValueError(f"Empty or inverted range {self.range}")
        if self.command == Command.ADAPTIVE and (
            self.frames is None or self.fence is None
        ):
            raise ValueError("adaptive needs --frames and --fence")
        if self.command == Command.SYNTH and self.scene is None and self.seed is None:
            raise ValueError("synth needs --scene or --seed")
        if self.command == Command.EVAL and (self.pred is None or self.gt is None):
            raise ValueError("eval needs --pred and --gt")
        return self


def setup_logging(verbose=False, debug=False):
    formatter = logging.Formatter(
        "%(asctime)s [%(levelname)s] %(name)s [%(threadName)s] "
        + "%(filename)s:%(lineno)d:%(funcName)s(): %(message)s",
        datefmt="%H:%M:%S",
    )

    handler = logging.StreamHandler(sys.stdout)
    handler.setFormatter(formatter)

    root_logger = logging.getLogger()
    root_logger.handlers.clear()
    root_logger.addHandler(handler)

    if debug:
        # Debug flag: enable DEBUG for everything (root level)
        root_logger.setLevel(logging.DEBUG)
    elif verbose:
        # Verbose flag: enable DEBUG only for bidepth loggers
        root_logger.setLevel(logging.ERROR)
        logging.getLogger("bidepth").setLevel(logging.DEBUG)
    else:
        root_logger.setLevel(logging.ERROR)


def load_classifier_config(
    path: Path | None, cost: CostKind | None = None
) -> ClassifierConfig:
    """
    Built-in defaults, overridden by the `key = value` file, overridden by
    the --cost flag.
    """
    values: dict[str, str] = {}
    if path is not None:
        for key, value in read_key_values(path):
            if key not in ClassifierConfig.model_fields:
                raise click.BadParameter(
                    f"unknown classifier setting {key!r} in {path}",
                    param_hint="'--config'",
                )
            values[key] = value
    if cost is not None:
        values["cost"] = cost
    try:
        return ClassifierConfig(**values)
    except ValidationError as e:
        raise click.BadParameter(str(e), param_hint="'--config'") from e


def read_frame_list(path: Path) -> list[tuple[Path, Path, Path | None]]:
    """One `left right [gt]` entry per line, relative to the list's folder."""
    frames = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = [path.parent / p for p in line.split()]
        if len(parts) not in (2, 3):
            raise ValueError(f"{path}:{lineno}: expected 'left right [gt]'")
        frames.append((parts[0], parts[1], parts[2] if len(parts) == 3 else None))
    return frames


def _classifier(config: RunConfig, planes: PlaneSchedule) -> ClassifierConfig:
    return config.classifier.fitted_to(planes, config.max_disparity)


def _volume(config: RunConfig, schedule: PlaneSchedule) -> ConfidenceVolume:
    if config.oracle:
        return build_oracle_volume(read_pfm(config.gt), schedule)
    pair = read_pair(config.left, config.right)
    return build_volume(pair, schedule, _classifier(config, schedule))


def _run_binary(config: RunConfig) -> None:
    volume = _volume(config, PlaneSchedule((config.plane,)))
    labels = binarize(volume.slices[0])
    write_pgm(render_labels(labels, BINARY_PALETTE), config.out / "binary.pgm")
    front = int(labels.select(Label.FRONT).sum())
    click.echo(f"{intcomma(front)} pixels in front of plane {config.plane:g}")


def _run_quantized(config: RunConfig) -> None:
    levels = config.levels or config.count + 1
    schedule = level_schedule(levels, config.max_disparity)
    volume = _volume(config, schedule)
    depth = quantized_disparity(volume, config.max_disparity, config.isotonic)
    write_pgm(render_labels(depth.bins), config.out / "bins.pgm")
    write_pfm(depth.centers, config.out / "centers.pfm")
    colorize(depth.centers, 0.0, config.max_disparity, config.out / "centers.ppm")
    click.echo(f"{levels} levels from {len(schedule)} planes")


def _run_selective(config: RunConfig) -> None:
    d_lo, d_hi = config.range
    count = config.count or unit_count(d_hi - d_lo)
    volume = _volume(config, uniform_schedule(d_lo, d_hi, count))
    depth = selective_disparity(volume, config.auc_rule)
    write_pfm(depth.disparity, config.out / "selective.pfm")
    colorize(depth.disparity, d_lo, d_hi, config.out / "selective.ppm", depth.labels)
    write_pgm(
        render_labels(depth.labels, SELECTIVE_PALETTE), config.out / "labels.pgm"
    )
    in_range = int(np.isfinite(depth.disparity.values).sum())
    click.echo(f"{intcomma(in_range)} pixels within [{d_lo:g}, {d_hi:g}]")


def _run_full(config: RunConfig) -> None:
    d_max = config.max_disparity
    count = config.count or unit_count(d_max)
    volume = _volume(config, uniform_schedule(0.0, d_max, count))
    disparity = auc_disparity(volume, config.auc_rule)
    write_pfm(disparity, config.out / "disparity.pfm")
    colorize(disparity, 0.0, d_max, config.out / "disparity.ppm")
    click.echo(f"Full disparity over [0, {d_max:g}] with {count} planes")


def _run_adaptive(config: RunConfig) -> None:
    d_lo, d_hi = config.range
    cfg_a = AdaptiveConfig(
        range_lo=d_lo,
        range_hi=d_hi,
        fence=config.fence,
        trigger=config.trigger,
        release=config.release,
        release_frames=config.release_frames,
        planes_per_range=max(config.count or 8, 2),
        fence_band=config.fence_band,
    )
    classifier = _classifier(config, cfg_a.extended_schedule())
    entries = read_frame_list(config.frames)
    if config.oracle and any(gt is None for _, _, gt in entries):
        raise ValueError("--oracle needs a ground-truth column for every frame")

    frames = (
        (read_pair(left, right), read_pfm(gt) if config.oracle else None)
        for left, right, gt in entries
    )
    with open(config.out / "adaptive.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["frame", "fence_fraction", "extended", "d_lo", "d_hi"])
        for index, frame in enumerate(
            run_sequence(frames, cfg_a, classifier)
        ):
            prefix = config.out / f"frame_{index:04d}"
            write_pfm(frame.selective.disparity, f"{prefix}_selective.pfm")
            write_pgm(
                render_labels(frame.selective.labels, SELECTIVE_PALETTE),
                f"{prefix}_labels.pgm",
            )
            write_pgm(render_labels(frame.fence, BINARY_PALETTE), f"{prefix}_fence.pgm")
            lo, hi = frame.active_range
            writer.writerow(
                [
                    index,
                    f"{frame.fence_fraction:.6f}",
                    int(frame.state.extended),
                    f"{lo:g}",
                    f"{hi:g}",
                ]
            )
    click.echo(f"Processed {len(entries)} frames")


def _run_synth(config: RunConfig) -> None:
    if config.scene is not None:
        spec = load_scene(config.scene)
    else:
        spec = random_scene(config.seed)
    pair, gt, occlusion = render_pair(spec)
    write_pgm(pair.left, config.out / "left.pgm")
    write_pgm(pair.right, config.out / "right.pgm")
    write_pfm(gt, config.out / "gt.pfm")
    write_pgm(render_labels(occlusion), config.out / "occlusion.pgm")
    dump_scene(spec, config.out / "scene.txt")
    click.echo(
        f"Rendered {spec.width}x{spec.height} scene with {len(spec.layers)} layers"
    )


def _run_bench(config: RunConfig) -> None:
    if config.left is not None and config.right is not None:
        pair = read_pair(config.left, config.right)
    else:
        pair, _, _ = render_pair(random_scene(config.seed or 0, 256, 128, 32, 3))
    rows = time_build_volume(pair, config.counts, config.classifier, config.repeats)
    write_bench_csv(rows, config.out / "bench.csv")
    for row in rows:
        click.echo(f"{row.count:>4} planes: {row.mean_ms:9.2f} ms +/- {row.std_ms:.2f}")
    if len({r.count for r in rows}) > 1:
        slope, intercept, r2 = linear_fit(rows)
        click.echo(
            f"Fit: {slope:.3f} ms/plane + {intercept:.3f} ms (R^2 = {r2:.4f})"
        )


def _run_eval(config: RunConfig) -> None:
    pred = read_pfm(config.pred)
    gt = read_pfm(config.gt)
    mask = None
    if config.occlusion is not None:
        mask = read_pgm(config.occlusion).pixels < 0.5
    planes = (
        level_schedule(config.levels, config.max_disparity).disparities
        if config.levels
        else None
    )
    report = evaluate(pred, gt, mask, config.threshold, planes, config.pred.stem)
    with open(config.out / "report.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(report.csv_header())
        writer.writerow(report.to_csv_row())
    (config.out / "report.txt").write_text(report.to_text() + "\n")
    click.echo(report.to_text())


_COMMANDS = {
    Command.BINARY: _run_binary,
    Command.QUANTIZED: _run_quantized,
    Command.SELECTIVE: _run_selective,
    Command.FULL: _run_full,
    Command.ADAPTIVE: _run_adaptive,
    Command.SYNTH: _run_synth,
    Command.BENCH: _run_bench,
    Command.EVAL: _run_eval,
}


def run(config: RunConfig) -> int:
    """
    Execute one command.

    Args:
        config (RunConfig): validated invocation

    Returns:
        int: exit status, 0 on success and 1 on any failure
    """
    start = time.time()
    try:
        config.out.mkdir(parents=True, exist_ok=True)
        _COMMANDS[config.command](config)
    except USER_ERRORS as e:
        click.echo(f"Error: {e}", err=True)
        return 1
    except Exception as e:
        click.echo(f"Internal error: {e!r}", err=True)
        click.echo(traceback.format_exc())
        return 1

    duration = timedelta(seconds=round(time.time() - start, 2))
    click.echo(f"Processing time: {precisedelta(duration)}")
    return 0


def _parse_range(ctx, param, value):
    if value is None:
        return None
    try:
        lo, hi = (float(v) for v in value.split(":"))
    except ValueError as e:
        raise click.BadParameter(f"expected a:b, got {value!r}") from e
    if not (np.isfinite(lo) and np.isfinite(hi)) or lo < 0 or lo >= hi:
        raise click.BadParameter(f"expected 0 <= a < b, got {value!r}")
    return lo, hi


def _parse_counts(ctx, param, value):
    if value is None:
        return DEFAULT_COUNTS
    try:
        counts = tuple(int(v) for v in value.split(","))
    except ValueError as e:
        raise click.BadParameter(f"expected comma separated integers: {value!r}") from e
    if not counts or min(counts) < 1:
        raise click.BadParameter(f"plane counts must be >= 1: {value!r}")
    return counts


def _execute(command: Command, config_file: Path | None, cost: str | None, **kwargs):
    classifier = load_classifier_config(config_file, CostKind(cost) if cost else None)
    fields = {k: v for k, v in kwargs.items() if v is not None}
    try:
        config = RunConfig(command=command, classifier=classifier, **fields)
    except ValidationError as e:
        raise click.UsageError(
            "; ".join(err["msg"].removeprefix("Value error, ") for err in e.errors())
        ) from e
    status = run(config)
    if status:
        sys.exit(status)


_existing = click.Path(exists=True, dir_okay=False, readable=True, path_type=Path)


def _frame_options(func):
    options = [
        click.option("--left", type=_existing, help="Left view (PGM)"),
        click.option("--right", type=_existing, help="Right view (PGM)"),
        click.option("--gt", type=_existing, help="Ground-truth disparity (PFM)"),
        click.option(
            "--oracle",
            is_flag=True,
            default=None,
            help="Classify planes from --gt instead of the images",
        ),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def _common_options(func):
    options = [
        click.option(
            "--cost",
            type=click.Choice([c.value for c in CostKind]),
            help="Matching cost [default: census]",
        ),
        click.option(
            "--config",
            "config_file",
            type=_existing,
            help="Classifier settings file (key = value)",
        ),
        click.option(
            "--out",
            type=click.Path(file_okay=False, path_type=Path),
            default=Path("."),
            show_default=True,
            help="Output directory",
        ),
    ]
    for option in reversed(options):
        func = option(func)
    return func


@click.group()
@click.option(
    "-v",
    "--verbose",
    is_flag=True,
    default=False,
    help="Enable debug logging for bidepth modules",
    show_default=True,
)
@click.option(
    "-d",
    "--debug",
    is_flag=True,
    default=False,
    help="Enable debug logging for all modules",
    show_default=True,
)
def main(verbose: bool, debug: bool) -> None:
    """Binary, quantized, selective and full depth from stereo pairs"""
    setup_logging(debug=debug, verbose=verbose)


@main.command()
@_frame_options
@_common_options
@click.option("--plane", type=click.FLOAT, required=True, help="Plane disparity")
@click.option(
    "--max-disparity",
    type=click.FloatRange(min=0, min_open=True),
    help=f"Largest scene disparity [default: {DEFAULT_MAX_DISPARITY:g}]",
)
def binary(**kwargs):
    """Front/behind mask for a single plane"""
    _execute(Command.BINARY, **kwargs)


@main.command()
@_frame_options
@_common_options
@click.option("--levels", type=click.IntRange(min=2), help="Quantization levels")
@click.option("--count", type=click.IntRange(min=1), help="Planes (levels - 1)")
@click.option(
    "--max-disparity",
    type=click.FloatRange(min=0, min_open=True),
    help=f"Largest scene disparity [default: {DEFAULT_MAX_DISPARITY:g}]",
)
@click.option("--isotonic", is_flag=True, default=None, help="Monotone pass first")
def quantized(**kwargs):
    """Depth quantized into N + 1 bins by N planes"""
    _execute(Command.QUANTIZED, **kwargs)


@main.command()
@_frame_options
@_common_options
@click.option(
    "--range", "range", callback=_parse_range, required=True, help="Range a:b"
)
@click.option("--count", type=click.IntRange(min=2), help="Planes over the range")
@click.option(
    "--max-disparity",
    type=click.FloatRange(min=0, min_open=True),
    help=f"Largest scene disparity [default: {DEFAULT_MAX_DISPARITY:g}]",
)
@click.option(
    "--auc-rule",
    type=click.Choice([r.value for r in IntegrationRule]),
    help="Quadrature of the confidence curve [default: trapezoid]",
)
def selective(**kwargs):
    """Continuous depth inside a range, front/behind labels outside it"""
    _execute(Command.SELECTIVE, **kwargs)


@main.command()
@_frame_options
@_common_options
@click.option(
    "--max-disparity",
    type=click.FloatRange(min=0, min_open=True),
    help=f"Largest disparity [default: {DEFAULT_MAX_DISPARITY:g}]",
)
@click.option("--count", type=click.IntRange(min=2), help="Planes over [0, max]")
@click.option(
    "--auc-rule",
    type=click.Choice([r.value for r in IntegrationRule]),
    help="Quadrature of the confidence curve [default: trapezoid]",
)
def full(**kwargs):
    """Full continuous disparity map"""
    _execute(Command.FULL, **kwargs)


@main.command()
@_common_options
@click.option(
    "--frames",
    type=_existing,
    required=True,
    help="Frame list, one 'left right [gt]' per line",
)
@click.option(
    "--range", "range", callback=_parse_range, required=True, help="Base range a:b"
)
@click.option("--fence", type=click.FLOAT, required=True, help="Fence disparity")
@click.option("--count", type=click.IntRange(min=2), help="Planes per base range")
@click.option("--oracle", is_flag=True, default=None, help="Use the gt column")
@click.option("--trigger", type=click.FLOAT, help="Fraction that extends the range")
@click.option("--release", type=click.FLOAT, help="Fraction that counts as quiet")
@click.option(
    "--release-frames", type=click.IntRange(min=1), help="Quiet frames to revert"
)
@click.option(
    "--fence-band",
    is_flag=True,
    default=None,
    help="Count only pixels between the fence and the range",
)
@click.option(
    "--max-disparity",
    type=click.FloatRange(min=0, min_open=True),
    help=f"Largest scene disparity [default: {DEFAULT_MAX_DISPARITY:g}]",
)
def adaptive(**kwargs):
    """Selective depth with a geo-fence that extends the range"""
    _execute(Command.ADAPTIVE, **kwargs)


@main.command()
@click.option(
    "--out",
    type=click.Path(file_okay=False, path_type=Path),
    default=Path("."),
    show_default=True,
    help="Output directory",
)
@click.option("--scene", type=_existing, help="Scene file")
@click.option("--seed", type=click.IntRange(min=0), help="Random scene seed")
def synth(**kwargs):
    """Render a synthetic stereo pair with ground truth"""
    _execute(Command.SYNTH, None, None, **kwargs)


@main.command()
@_common_options
@click.option("--left", type=_existing, help="Left view (PGM)")
@click.option("--right", type=_existing, help="Right view (PGM)")
@click.option("--seed", type=click.IntRange(min=0), help="Random scene seed")
@click.option(
    "--counts",
    callback=_parse_counts,
    help="Comma separated plane counts [default: 2,4,8,16,32]",
)
@click.option("--repeats", type=click.IntRange(min=1), help="Runs per count")
def bench(**kwargs):
    """Time volume construction against the number of planes"""
    _execute(Command.BENCH, **kwargs)


@main.command(name="eval")
@click.option(
    "--out",
    type=click.Path(file_okay=False, path_type=Path),
    default=Path("."),
    show_default=True,
    help="Output directory",
)
@click.option("--pred", type=_existing, required=True, help="Disparity (PFM)")
@click.option("--gt", type=_existing, required=True, help="Ground truth (PFM)")
@click.option("--occlusion", type=_existing, help="Occlusion mask (PGM)")
@click.option("--threshold", type=click.FLOAT, help="Bad-pixel threshold")
@click.option("--levels", type=click.IntRange(min=2), help="Levels for mIOU")
@click.option(
    "--max-disparity",
    type=click.FloatRange(min=0, min_open=True),
    help="Largest disparity for the mIOU bins",
)
def evaluate_command(**kwargs):
    """Compare a disparity map with ground truth"""
    _execute(Command.EVAL, None, None, **kwargs)
