"""RGBA layer model and alpha-over compositing.

Colors live in [-1, 1] and alpha in [0, 1]. Scenes store layers back-to-front
(index 0 is the backmost, painter's order); the accumulation below walks the
stack front-to-back, so callers reverse the list before compositing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError, LayerIndexError

MID_GRAY = 0.0


@dataclass(frozen=True, eq=False)
class RgbaLayer:
    color: np.ndarray  # (H, W, 3) in [-1, 1]
    alpha: np.ndarray  # (H, W) in [0, 1]
    name: str = ""

    def __post_init__(self):
        color = np.asarray(self.color, dtype=np.float64)
        alpha = np.asarray(self.alpha, dtype=np.float64)
        if color.ndim != 3 or color.shape[2] != 3:
            raise DimensionMismatchError(f"color must be HxWx3, got {color.shape}")
        if alpha.shape != color.shape[:2]:
            raise DimensionMismatchError(
                f"alpha shape {alpha.shape} does not match color {color.shape[:2]}",
                expected=color.shape[:2],
                got=alpha.shape,
            )
        if not (np.all(color >= -1.0) and np.all(color <= 1.0)):
            raise ValueError(f"layer {self.name!r}: color outside [-1, 1]")
        if not (np.all(alpha >= 0.0) and np.all(alpha <= 1.0)):
            raise ValueError(f"layer {self.name!r}: alpha outside [0, 1]")
        object.__setattr__(self, "color", color)
        object.__setattr__(self, "alpha", alpha)

    @property
    def shape(self):
        return self.alpha.shape

    @classmethod
    def uniform(cls, height, width, color, alpha, name=""):
        c = np.broadcast_to(np.asarray(color, dtype=np.float64), (height, width, 3))
        a = np.full((height, width), float(alpha))
        return cls(c.copy(), a, name)

    def rgba(self):
        """Stack into a (4, H, W) array with alpha remapped to [-1, 1]."""
        return np.concatenate(
            [np.moveaxis(self.color, 2, 0), (2.0 * self.alpha - 1.0)[None]], axis=0
        )

    def equals(self, other: "RgbaLayer") -> bool:
        """Bitwise equality of pixel data (names ignored)."""
        return np.array_equal(self.color, other.color) and np.array_equal(
            self.alpha, other.alpha
        )


@dataclass(frozen=True, eq=False)
class OpaqueImage:
    color: np.ndarray  # (H, W, 3) in [-1, 1]

    def __post_init__(self):
        object.__setattr__(self, "color", np.asarray(self.color, dtype=np.float64))

    @property
    def alpha(self):
        return np.ones(self.color.shape[:2])

    @property
    def shape(self):
        return self.color.shape[:2]

    def as_layer(self, name="context") -> RgbaLayer:
        return RgbaLayer(np.clip(self.color, -1.0, 1.0), self.alpha, name)


@dataclass(frozen=True, eq=False)
class LayeredScene:
    layers: tuple
    width: int
    height: int
    prompts: tuple = ()
    scene_id: str = ""

    def __post_init__(self):
        layers = tuple(self.layers)
        for k, layer in enumerate(layers):
            if layer.shape != (self.height, self.width):
                raise DimensionMismatchError(
                    f"layer {k} ({layer.name!r}) is {layer.shape}, "
                    f"scene is {(self.height, self.width)}",
                    index=k,
                    expected=(self.height, self.width),
                    got=layer.shape,
                )
        prompts = tuple(tuple(p) for p in self.prompts)
        if prompts and len(prompts) != len(layers):
            raise ValueError(
                f"{len(prompts)} prompt pairs for {len(layers)} layers"
            )
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "prompts", prompts)

    @classmethod
    def from_layers(cls, layers, prompts=(), scene_id=""):
        layers = list(layers)
        if not layers:
            raise ValueError("a scene needs at least one layer")
        h, w = layers[0].shape
        return cls(tuple(layers), w, h, prompts, scene_id)

    def __len__(self):
        return len(self.layers)

    def prompt_pair(self, index):
        if not self.prompts:
            return ("", "")
        return self.prompts[index]

    def check_index(self, index):
        if not 0 <= index < len(self.layers):
            raise LayerIndexError(
                f"layer index {index} out of range for {len(self.layers)} layers"
            )


def composite_over(front_to_back):
    """Accumulate a front-to-back layer list with the alpha-over recurrence.

    Returns the premultiplied accumulated color (H, W, 3) and the coverage
    (H, W). Regions with coverage < 1 still need a background.
    """
    front_to_back = list(front_to_back)
    if not front_to_back:
        raise ValueError("composite_over needs at least one layer")
    shape = front_to_back[0].shape
    acc_color = np.zeros(shape + (3,))
    coverage = np.zeros(shape)
    for k, layer in enumerate(front_to_back):
        if layer.shape != shape:
            raise DimensionMismatchError(
                f"layer {k} ({layer.name!r}) is {layer.shape}, expected {shape}",
                index=k,
                expected=shape,
                got=layer.shape,
            )
        weight = layer.alpha * (1.0 - coverage)
        acc_color = acc_color + layer.color * weight[..., None]
        coverage = coverage + weight
    return acc_color, coverage


def _fill(acc_color, coverage, plate):
    return acc_color + np.asarray(plate, dtype=np.float64) * (1.0 - coverage)[..., None]


def opaque_context(scene: LayeredScene, target_index: int) -> OpaqueImage:
    """Composite every layer except ``target_index`` into an opaque image.

    Holes are filled with the backmost layer's RGB flattened onto mid-gray;
    when the backmost layer is itself the target the plate is plain mid-gray.
    """
    scene.check_index(target_index)
    shape = (scene.height, scene.width)
    rest = [layer for k, layer in enumerate(scene.layers) if k != target_index]
    if not rest:
        return OpaqueImage(np.full(shape + (3,), MID_GRAY))
    acc, cov = composite_over(reversed(rest))
    if target_index == 0:
        plate = MID_GRAY
    else:
        back = scene.layers[0]
        plate = back.color * back.alpha[..., None] + MID_GRAY * (1.0 - back.alpha[..., None])
    return OpaqueImage(_fill(acc, cov, plate))


def composite_scene(scene: LayeredScene, background=MID_GRAY) -> OpaqueImage:
    """Full front-to-back composite over a flat (or per-pixel) background."""
    acc, cov = composite_over(reversed(scene.layers))
    return OpaqueImage(_fill(acc, cov, background))


def replace_layer(scene: LayeredScene, index: int, new_layer: RgbaLayer) -> LayeredScene:
    scene.check_index(index)
    if new_layer.shape != (scene.height, scene.width):
        raise DimensionMismatchError(
            f"replacement is {new_layer.shape}, scene is {(scene.height, scene.width)}",
            index=index,
            expected=(scene.height, scene.width),
            got=new_layer.shape,
        )
    layers = list(scene.layers)
    layers[index] = new_layer
    return LayeredScene(tuple(layers), scene.width, scene.height, scene.prompts, scene.scene_id)
