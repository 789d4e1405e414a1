"""Random layered scenes for tests and benchmark smoke runs."""

from __future__ import annotations

import numpy as np

from .layers import LayeredScene, RgbaLayer

_OBJECTS = ("cat", "dog", "lamp", "vase", "boat", "tree", "chair", "kite")
_STYLES = ("red", "blue", "golden", "glass", "wooden", "neon", "paper", "stone")
_BACKDROPS = ("meadow", "beach", "street", "forest", "studio", "desert")


def _soft_blob(rng, h, w):
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = rng.uniform(0.2, 0.8) * h, rng.uniform(0.2, 0.8) * w
    ry, rx = rng.uniform(0.15, 0.4) * h, rng.uniform(0.15, 0.4) * w
    d = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
    return np.clip(1.5 - d, 0.0, 1.0)


def make_scene(rng, size=16, n_layers=3, scene_id="", identity_prompts=False):
    """Opaque gradient background plus soft-edged foreground objects."""
    h = w = size
    yy, xx = np.mgrid[0:h, 0:w] / max(size - 1, 1)
    c0, c1 = rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 3)
    t = (0.5 * (yy + xx))[..., None]
    bg_color = np.clip((1 - t) * c0 + t * c1, -1, 1)
    layers = [RgbaLayer(bg_color, np.ones((h, w)), "background")]
    backdrop = _BACKDROPS[rng.integers(len(_BACKDROPS))]
    prompts = [(f"a {backdrop}", f"a {backdrop} at night")]
    for k in range(1, n_layers):
        base = rng.uniform(-1, 1, 3)
        color = np.clip(base + 0.2 * rng.standard_normal((h, w, 3)), -1, 1)
        obj = _OBJECTS[rng.integers(len(_OBJECTS))]
        style = _STYLES[rng.integers(len(_STYLES))]
        layers.append(RgbaLayer(color, _soft_blob(rng, h, w), obj))
        prompts.append((f"a {obj}", f"a {style} {obj}"))
    if identity_prompts:
        prompts = [(src, src) for src, _ in prompts]
    return LayeredScene(tuple(layers), w, h, tuple(prompts), scene_id)


def make_scenes(count, seed=0, size=16, n_layers=3, identity_prompts=False):
    rng = np.random.default_rng(seed)
    return [
        make_scene(rng, size, n_layers, f"synth{i:04d}", identity_prompts) for i in range(count)
    ]


def random_layer(rng, h, w, name=""):
    """Unstructured layer with uniform color and alpha, for property tests."""
    return RgbaLayer(rng.uniform(-1, 1, (h, w, 3)), rng.uniform(0, 1, (h, w)), name)
