import logging
from enum import IntEnum
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from bidepth.classifier import ClassifierConfig, matching_costs
from bidepth.geometry import warp_right
from bidepth.imgio import INVALID, DisparityMap, GrayImage, LabelMap, StereoPair
from bidepth.utils import read_key_values

logger = logging.getLogger("bidepth.synth")

# Grey used where the texture density leaves a pixel untextured (exact in 8 bits)
FLAT = 128 / 255


class SceneError(Exception):
    pass


class Visibility(IntEnum):
    VISIBLE = 0
    OCCLUDED = 1


class SceneLayer(BaseModel):
    x: int = Field(ge=0, description="Left edge of the rectangle in the left view")
    y: int = Field(ge=0, description="Top edge of the rectangle")
    width: int = Field(ge=1, description="Rectangle width in pixels")
    height: int = Field(ge=1, description="Rectangle height in pixels")
    disparity: int = Field(ge=0, description="Layer disparity in pixels")
    seed: int = Field(ge=0, description="Texture seed")
    model_config = ConfigDict(title="Fronto-parallel textured rectangle", frozen=True)


class SceneSpec(BaseModel):
    width: int = Field(ge=1, description="Image width in pixels")
    height: int = Field(ge=1, description="Image height in pixels")
    layers: list[SceneLayer] = Field(
        default_factory=list, description="Layers listed back to front"
    )
    background_disparity: int = Field(
        default=0, ge=0, description="Disparity of the full-frame background"
    )
    texture_density: float = Field(
        default=1.0,
        gt=0,
        le=1,
        description="Probability that a texture pixel is random rather than flat",
    )
    noise_sigma: float = Field(
        default=0.0, ge=0, description="Gaussian noise added to both views"
    )
    seed: int = Field(default=0, ge=0, description="Background and noise seed")
    model_config = ConfigDict(title="Synthetic stereo scene", frozen=True)

    @model_validator(mode="after")
    def _check_layers(self) -> "SceneSpec":
        previous = self.background_disparity
        for index, layer in enumerate(self.layers):
            right, bottom = layer.x + layer.width, layer.y + layer.height
            if right > self.width or bottom > self.height:
                raise ValueError(
                    f"Layer {index} ({layer.x}, {layer.y}, {layer.width}x"
                    + f"{layer.height}) leaves the {self.width}x{self.height} frame"
                )
            if layer.disparity < previous:
                raise ValueError(
                    f"Layer {index} at disparity {layer.disparity} is behind the "
                    + f"layer before it ({previous}); list layers back to front"
                )
            previous = layer.disparity
        return self

    @property
    def max_disparity(self) -> int:
        return max([self.background_disparity, *(la.disparity for la in self.layers)])


def _texture(rng: np.random.Generator, shape: tuple[int, int], density: float):
    values = rng.integers(0, 256, size=shape) / 255.0
    textured = rng.random(shape) < density
    return np.where(textured, values, FLAT)


def render_pair(spec: SceneSpec) -> tuple[StereoPair, DisparityMap, LabelMap]:
    """
    Render a layered scene into a rectified stereo pair with exact ground truth.

    Every layer owns a texture indexed by left-view column. The left view
    paints layers back to front. A right-view pixel x' shows the front-most
    layer whose rectangle, shifted left by its disparity, covers it, sampled
    at column x' + d, so that R(x - d, y) = L(x, y) wherever the
    correspondence is visible.

    Args:
        spec (SceneSpec): scene description

    Returns:
        tuple[StereoPair, DisparityMap, LabelMap]: the pair, the left-view
            disparity and the left-view occlusion map (Visibility labels)
    """
    height, width = spec.height, spec.width
    span = (height, width + spec.max_disparity)
    textures = [
        _texture(np.random.default_rng([spec.seed, 0]), span, spec.texture_density)
    ]
    textures += [
        _texture(np.random.default_rng([la.seed, 2]), span, spec.texture_density)
        for la in spec.layers
    ]
    disparities = [spec.background_disparity, *(la.disparity for la in spec.layers)]

    rows = np.arange(height)[:, None]
    cols = np.arange(width)[None, :]

    left_owner = np.zeros((height, width), dtype=np.int64)
    right_owner = np.zeros((height, width), dtype=np.int64)
    for index, layer in enumerate(spec.layers, start=1):
        inside_rows = (rows >= layer.y) & (rows < layer.y + layer.height)
        left_cols = (cols >= layer.x) & (cols < layer.x + layer.width)
        right_cols = (cols + layer.disparity >= layer.x) & (
            cols + layer.disparity < layer.x + layer.width
        )
        left_owner[inside_rows & left_cols] = index
        right_owner[inside_rows & right_cols] = index

    left = np.zeros((height, width))
    right = np.zeros((height, width))
    gt = np.zeros((height, width))
    grid_rows = np.broadcast_to(rows, (height, width))
    grid_cols = np.broadcast_to(cols, (height, width))
    for index, (texture, d) in enumerate(zip(textures, disparities, strict=True)):
        owned = left_owner == index
        left[owned] = texture[grid_rows[owned], grid_cols[owned]]
        gt[owned] = d
        seen = right_owner == index
        right[seen] = texture[grid_rows[seen], grid_cols[seen] + d]

    source = grid_cols - gt.astype(np.int64)
    out_of_frame = source < 0
    owner_there = right_owner[grid_rows, np.clip(source, 0, width - 1)]
    occluded = out_of_frame | (owner_there != left_owner)

    if spec.noise_sigma > 0:
        noise = np.random.default_rng([spec.seed, 1]).normal(
            0.0, spec.noise_sigma, size=(2, height, width)
        )
        left = np.clip(left + noise[0], 0.0, 1.0)
        right = np.clip(right + noise[1], 0.0, 1.0)

    logger.debug(
        f"Rendered {width}x{height} scene with {len(spec.layers)} layers, "
        + f"{int(occluded.sum())} occluded pixels"
    )
    occlusion = np.where(occluded, Visibility.OCCLUDED, Visibility.VISIBLE)
    return (
        StereoPair(GrayImage(left), GrayImage(right)),
        DisparityMap(gt),
        LabelMap(occlusion, num_labels=len(Visibility)),
    )


def random_scene(
    seed: int,
    width: int = 512,
    height: int = 256,
    max_disparity: int = 60,
    layers: int = 4,
    noise_sigma: float = 0.0,
) -> SceneSpec:
    """
    Seeded random scene: a background and `layers` rectangles with
    disparities in [0, max_disparity], ordered back to front.
    """
    rng = np.random.default_rng(seed)
    background = int(rng.integers(0, max_disparity // 4 + 1))
    disparities = np.sort(rng.integers(background, max_disparity + 1, size=layers))

    placed = []
    for d in disparities:
        w = int(rng.integers(max(width // 8, 1), max(width // 3, 2)))
        h = int(rng.integers(max(height // 8, 1), max(height // 2, 2)))
        placed.append(
            SceneLayer(
                x=int(rng.integers(0, width - w + 1)),
                y=int(rng.integers(0, height - h + 1)),
                width=w,
                height=h,
                disparity=int(d),
                seed=int(rng.integers(0, 2**31)),
            )
        )
    return SceneSpec(
        width=width,
        height=height,
        layers=placed,
        background_disparity=background,
        noise_sigma=noise_sigma,
        seed=seed,
    )


_SCALARS = {
    "width",
    "height",
    "background_disparity",
    "texture_density",
    "noise_sigma",
    "seed",
}
_LAYER_FIELDS = ("x", "y", "width", "height", "disparity", "seed")


def load_scene(path: str | Path) -> SceneSpec:
    """
    Read a scene file: `key = value` lines for the scalar settings and one
    `layer = x y width height disparity seed` line per layer, back to front.

    Throws:
        SceneError for unknown keys, malformed layers or invalid scenes.
    """
    try:
        pairs = read_key_values(path)
    except (OSError, ValueError) as e:
        raise SceneError(f"Cannot read scene {path}: {e}") from e

    fields: dict[str, object] = {}
    layers = []
    for key, value in pairs:
        if key == "layer":
            parts = value.split()
            if len(parts) != len(_LAYER_FIELDS):
                raise SceneError(
                    f"{path}: layer needs {len(_LAYER_FIELDS)} integers, got {value!r}"
                )
            try:
                layers.append(dict(zip(_LAYER_FIELDS, map(int, parts), strict=True)))
            except ValueError as e:
                raise SceneError(f"{path}: bad layer {value!r}") from e
        elif key in _SCALARS:
            fields[key] = value
        else:
            raise SceneError(f"{path}: unknown scene key {key!r}")

    try:
        return SceneSpec(**fields, layers=layers)
    except ValidationError as e:
        raise SceneError(f"{path}: invalid scene: {e}") from e


def dump_scene(spec: SceneSpec, path: str | Path) -> None:
    lines = [f"{key} = {getattr(spec, key)}" for key in sorted(_SCALARS)]
    for layer in spec.layers:
        numbers = " ".join(str(getattr(layer, name)) for name in _LAYER_FIELDS)
        lines.append(f"layer = {numbers}")
    Path(path).write_text("\n".join(lines) + "\n")


def brute_force_match(
    pair: StereoPair, d_lo: int, d_hi: int, cfg: ClassifierConfig | None = None
) -> DisparityMap:
    """
    Exhaustive winner-takes-all matching over the integer disparities
    d_lo..d_hi.

    Each candidate warps the right view by d and scores it with the same
    window cost the plane classifier uses; the lowest cost wins and ties go
    to the smallest d. Every valid output lies inside [d_lo, d_hi], even for
    content whose true disparity is outside it.

    Args:
        pair (StereoPair): rectified views
        d_lo (int): smallest candidate disparity
        d_hi (int): largest candidate disparity
        cfg (ClassifierConfig | None): cost settings

    Returns:
        DisparityMap: disparities, invalid where no candidate has a full window
    """
    if int(d_lo) != d_lo or int(d_hi) != d_hi or d_lo < 0 or d_lo > d_hi:
        raise SceneError(f"Search range [{d_lo}, {d_hi}] must be integers, lo <= hi")
    cfg = cfg or ClassifierConfig()
    candidates = np.arange(int(d_lo), int(d_hi) + 1)
    reference_ok = np.ones(pair.shape, dtype=bool)

    costs = np.empty((len(candidates), *pair.shape))
    for index, d in enumerate(candidates):
        warped = warp_right(pair.right, float(d))
        costs[index] = matching_costs(
            pair.left.pixels,
            reference_ok,
            warped.image.pixels,
            warped.valid,
            [0],
            cfg,
        )[0]

    defined = np.isfinite(costs).any(axis=0)
    best = candidates[np.argmin(costs, axis=0)].astype(np.float64)
    return DisparityMap(np.where(defined, best, INVALID))
