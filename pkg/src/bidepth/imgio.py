import logging
import re
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np
from matplotlib import colormaps

logger = logging.getLogger("bidepth.imgio")

INVALID = np.nan
RAMP = "viridis"

_WHITESPACE = b" \t\r\n\v\f"
_PFM_DIMS = re.compile(rb"^(\d+)\s+(\d+)$")
_TOKEN = re.compile(rb"\S+")


class Label(IntEnum):
    """Per-pixel labels shared by binary and selective depth."""

    BEHIND = 0
    FRONT = 1
    IN_RANGE = 2


# Grey levels used when label maps are written as PGM.
BINARY_PALETTE = {Label.BEHIND: 0.0, Label.FRONT: 1.0}
SELECTIVE_PALETTE = {Label.BEHIND: 0.0, Label.FRONT: 1.0, Label.IN_RANGE: 0.5}


class ImageFormatError(Exception):
    """Raised when an image file cannot be parsed. Carries the byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class MalformedHeaderError(ImageFormatError):
    pass


class TruncatedPayloadError(ImageFormatError):
    pass


class UnsupportedFormatError(ImageFormatError):
    pass


class UnsupportedChannelError(ImageFormatError):
    pass


class InvalidPayloadError(ImageFormatError):
    pass


class ImageWriteError(Exception):
    def __init__(self, path: str | Path, reason: object):
        super().__init__(f"Cannot write {path}: {reason}")
        self.path = Path(path)


class ColorizeError(ValueError):
    pass


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class GrayImage:
    """
    Grayscale image with intensities normalised to [0, 1].

    Attributes:
        pixels (np.ndarray): row-major (height, width) float64 intensities
    """

    pixels: np.ndarray

    def __post_init__(self):
        pixels = np.array(self.pixels, dtype=np.float64)
        if pixels.ndim != 2:
            raise ValueError(f"Expected a 2-D image, got shape {pixels.shape}")
        if not np.all(np.isfinite(pixels)):
            raise ValueError("Image intensities must be finite")
        if pixels.size and (pixels.min() < 0.0 or pixels.max() > 1.0):
            raise ValueError("Image intensities must lie within [0, 1]")
        object.__setattr__(self, "pixels", _frozen(pixels))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


@dataclass(frozen=True)
class DisparityMap:
    """
    Per-pixel disparity in pixels. Invalid pixels hold NaN.

    Any non-finite input value is normalised to the NaN sentinel.

    Attributes:
        values (np.ndarray): row-major (height, width) float64 disparities
    """

    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError(f"Expected a 2-D map, got shape {values.shape}")
        values[~np.isfinite(values)] = INVALID
        if np.any(values[np.isfinite(values)] < 0.0):
            raise ValueError("Valid disparities must be >= 0")
        object.__setattr__(self, "values", _frozen(values))

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.values)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class LabelMap:
    """
    Per-pixel discrete labels.

    Attributes:
        labels (np.ndarray): row-major (height, width) integer labels
        num_labels (int): size of the label set; labels lie in [0, num_labels)
        valid (np.ndarray | None): per-pixel validity (default: all valid)
    """

    labels: np.ndarray
    num_labels: int
    valid: np.ndarray | None = None

    def __post_init__(self):
        labels = np.array(self.labels, dtype=np.int64)
        if labels.ndim != 2:
            raise ValueError(f"Expected a 2-D label map, got shape {labels.shape}")
        if self.num_labels < 1:
            raise ValueError("A label map needs at least one label")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_labels):
            raise ValueError(f"Labels must lie within [0, {self.num_labels})")
        if self.valid is None:
            valid = np.ones(labels.shape, dtype=bool)
        else:
            valid = np.array(self.valid, dtype=bool)
            if valid.shape != labels.shape:
                raise ValueError("Validity mask does not match the label map")
        object.__setattr__(self, "labels", _frozen(labels))
        object.__setattr__(self, "valid", _frozen(valid))

    def select(self, label: int) -> np.ndarray:
        """Boolean mask of valid pixels carrying `label`."""
        return (self.labels == label) & self.valid

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape


@dataclass(frozen=True)
class StereoPair:
    """Rectified left/right grayscale views of the same size."""

    left: GrayImage
    right: GrayImage

    def __post_init__(self):
        if self.left.shape != self.right.shape:
            raise ValueError(
                f"Left image is {self.left.shape} but right image is "
                + f"{self.right.shape}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.left.shape


def _skip_space(data: bytes, pos: int) -> int:
    while pos < len(data):
        char = data[pos : pos + 1]
        if char in _WHITESPACE:
            pos += 1
        elif char == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
        else:
            break
    return pos


def _header_ints(data: bytes, pos: int, names: list[str]) -> tuple[list[int], int]:
    """Read whitespace/comment separated integer header fields."""
    values = []
    for name in names:
        pos = _skip_space(data, pos)
        if pos >= len(data):
            raise MalformedHeaderError(f"Header ends before {name}", pos)
        start = pos
        while (
            pos < len(data)
            and data[pos : pos + 1] not in _WHITESPACE
            and data[pos : pos + 1] != b"#"
        ):
            pos += 1
        token = data[start:pos]
        if not token.isdigit():
            raise MalformedHeaderError(f"Invalid {name} {token!r}", start)
        values.append(int(token))
    return values, pos


def read_pgm(path: str | Path) -> GrayImage:
    """
    Read a binary (P5) or ASCII (P2) PGM file.

    Intensities are divided by the header max value. 16-bit P5 payloads are
    big-endian as the format requires.

    Args:
        path (str | Path): PGM file

    Returns:
        GrayImage: image scaled to [0, 1]

    Throws:
        UnsupportedFormatError, MalformedHeaderError, TruncatedPayloadError or
        InvalidPayloadError, each naming the byte offset of the problem.
    """
    data = Path(path).read_bytes()
    magic = data[:2]
    if magic not in (b"P5", b"P2"):
        raise UnsupportedFormatError(f"{path}: unsupported magic {magic!r}", 0)

    (width, height, maxval), pos = _header_ints(
        data, 2, ["width", "height", "maxval"]
    )
    if width < 1 or height < 1:
        raise MalformedHeaderError(f"{path}: empty image {width}x{height}", pos)
    if not 1 <= maxval <= 65535:
        raise MalformedHeaderError(f"{path}: max value {maxval} out of range", pos)

    count = width * height
    if magic == b"P5":
        # Exactly one whitespace byte separates the header from the raster
        if pos >= len(data) or data[pos : pos + 1] not in _WHITESPACE:
            raise TruncatedPayloadError(f"{path}: missing raster", pos)
        start = pos + 1
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        needed = count * dtype.itemsize
        if len(data) - start < needed:
            raise TruncatedPayloadError(
                f"{path}: expected {needed} payload bytes, found {len(data) - start}",
                len(data),
            )
        samples = np.frombuffer(data, dtype=dtype, count=count, offset=start)
        samples = samples.astype(np.int64)
        offsets = start + np.arange(count) * dtype.itemsize
    else:
        matches = list(_TOKEN.finditer(data, pos))[:count]
        if len(matches) < count:
            raise TruncatedPayloadError(
                f"{path}: expected {count} samples, found {len(matches)}", len(data)
            )
        for match in matches:
            if not match.group().isdigit():
                raise InvalidPayloadError(
                    f"{path}: invalid sample {match.group()!r}", match.start()
                )
        samples = np.array([int(m.group()) for m in matches], dtype=np.int64)
        offsets = np.array([m.start() for m in matches])

    too_big = np.flatnonzero(samples > maxval)
    if too_big.size:
        raise InvalidPayloadError(
            f"{path}: sample exceeds max value {maxval}", int(offsets[too_big[0]])
        )

    logger.debug(f"Read {width}x{height} {magic.decode()} image from {path}")
    return GrayImage(samples.reshape(height, width) / maxval)


def _write_bytes(path: str | Path, header: bytes, payload: bytes) -> None:
    try:
        with open(path, "wb") as f:
            f.write(header)
            f.write(payload)
    except OSError as e:
        raise ImageWriteError(path, e) from e


def to_bytes(pixels: np.ndarray) -> np.ndarray:
    """Quantise [0, 1] values to 8 bits with round-half-up."""
    return np.floor(np.asarray(pixels) * 255.0 + 0.5).astype(np.uint8)


def write_pgm(img: GrayImage, path: str | Path) -> None:
    """
    Write an image as 8-bit binary PGM (P5, maxval 255).

    Args:
        img (GrayImage): image to store; intensity i is stored as round(i * 255)
        path (str | Path): destination
    """
    header = f"P5\n{img.width} {img.height}\n255\n".encode()
    _write_bytes(path, header, to_bytes(img.pixels).tobytes())
    logger.debug(f"Wrote {img.width}x{img.height} PGM to {path}")


def render_labels(
    labels: LabelMap, palette: dict[int, float] | None = None
) -> GrayImage:
    """
    Turn a label map into a grey image. Without a palette label k becomes
    k / (num_labels - 1). Invalid pixels are black.
    """
    if palette is None:
        scale = max(labels.num_labels - 1, 1)
        pixels = labels.labels / scale
    else:
        pixels = np.zeros(labels.shape)
        for label, grey in palette.items():
            pixels[labels.labels == label] = grey
    return GrayImage(np.where(labels.valid, pixels, 0.0))


def _read_line(data: bytes, pos: int) -> tuple[bytes, int]:
    end = data.find(b"\n", pos)
    if end < 0:
        raise MalformedHeaderError("Unterminated header line", pos)
    return data[pos:end].strip(), end + 1


def read_pfm(path: str | Path) -> DisparityMap:
    """
    Read a single-channel PFM disparity map.

    A negative scale means a little-endian payload, a positive one big-endian.
    Rows are stored bottom-to-top and are flipped so that row 0 is the top
    of the image. Non-finite samples become the invalid marker.

    Args:
        path (str | Path): PFM file

    Returns:
        DisparityMap: disparities in pixels
    """
    data = Path(path).read_bytes()
    magic, pos = _read_line(data, 0)
    if magic == b"PF":
        raise UnsupportedChannelError(
            f"{path}: color PFM is not supported, convert to single channel", 0
        )
    if magic != b"Pf":
        raise UnsupportedFormatError(f"{path}: unsupported magic {magic!r}", 0)

    dims_at = pos
    dims, pos = _read_line(data, pos)
    match = _PFM_DIMS.match(dims)
    if not match:
        raise MalformedHeaderError(f"{path}: bad dimensions {dims!r}", dims_at)
    width, height = map(int, match.groups())
    if width < 1 or height < 1:
        raise MalformedHeaderError(f"{path}: empty map {width}x{height}", dims_at)

    scale_at = pos
    scale_line, pos = _read_line(data, pos)
    try:
        scale = float(scale_line)
    except ValueError as e:
        raise MalformedHeaderError(
            f"{path}: bad scale {scale_line!r}", scale_at
        ) from e
    if scale == 0.0 or not np.isfinite(scale):
        raise MalformedHeaderError(f"{path}: bad scale {scale_line!r}", scale_at)

    endian = "<" if scale < 0 else ">"
    count = width * height
    if len(data) - pos < 4 * count:
        raise TruncatedPayloadError(
            f"{path}: expected {4 * count} payload bytes, found {len(data) - pos}",
            len(data),
        )
    samples = np.frombuffer(data, dtype=f"{endian}f4", count=count, offset=pos)
    values = np.flipud(samples.reshape(height, width)).astype(np.float64)
    logger.debug(f"Read {width}x{height} PFM ({endian}) from {path}")
    return DisparityMap(values)


def write_pfm(disparity: DisparityMap, path: str | Path) -> None:
    """
    Write a disparity map as little-endian single-channel PFM (scale -1.0).
    Invalid pixels are stored as a quiet NaN.
    """
    if disparity.values.size == 0:
        raise ImageWriteError(path, "refusing to write an empty disparity map")
    header = f"Pf\n{disparity.width} {disparity.height}\n-1.0\n".encode()
    payload = np.flipud(disparity.values).astype("<f4").tobytes()
    _write_bytes(path, header, payload)
    logger.debug(f"Wrote {disparity.width}x{disparity.height} PFM to {path}")


def ramp_color(t: float | np.ndarray) -> np.ndarray:
    """Sample the colour ramp at t in [0, 1] and return 8-bit RGB."""
    rgba = colormaps[RAMP](np.clip(t, 0.0, 1.0))
    return to_bytes(np.asarray(rgba)[..., :3])


def write_ppm(rgb: np.ndarray, path: str | Path) -> None:
    height, width, _ = rgb.shape
    header = f"P6\n{width} {height}\n255\n".encode()
    _write_bytes(path, header, np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def colorize(
    disparity: DisparityMap,
    d_lo: float,
    d_hi: float,
    path: str | Path,
    overlay: LabelMap | None = None,
) -> None:
    """
    Render a disparity map as a binary PPM (P6).

    Valid disparities are mapped affinely from [d_lo, d_hi] onto the colour
    ramp (clamped). Invalid pixels are black. With an overlay, FRONT pixels
    are drawn white and BEHIND pixels black on top of the ramp.

    Args:
        disparity (DisparityMap): map to render
        d_lo (float): disparity mapped to the ramp start
        d_hi (float): disparity mapped to the ramp end
        path (str | Path): destination PPM
        overlay (LabelMap | None): optional FRONT/BEHIND/IN_RANGE labels

    Throws:
        ColorizeError for a degenerate range or a mismatched overlay.
    """
    if not (np.isfinite(d_lo) and np.isfinite(d_hi)) or d_lo >= d_hi:
        raise ColorizeError(f"Degenerate colour range [{d_lo}, {d_hi}]")

    valid = disparity.valid
    t = np.where(valid, (disparity.values - d_lo) / (d_hi - d_lo), 0.0)
    rgb = ramp_color(t)
    rgb[~valid] = 0

    if overlay is not None:
        if overlay.shape != disparity.shape:
            raise ColorizeError("Overlay does not match the disparity map")
        rgb[overlay.select(Label.FRONT)] = 255
        rgb[overlay.select(Label.BEHIND)] = 0

    write_ppm(rgb, path)
    logger.debug(f"Colorized {disparity.width}x{disparity.height} map to {path}")


def read_pair(left: str | Path, right: str | Path) -> StereoPair:
    return StereoPair(read_pgm(left), read_pgm(right))
