"""Scene manifests and 8-bit straight-alpha RGBA rasters.

Manifest layout (JSON)::

    {
      "scene_id": "teaser",
      "width": 64, "height": 64,
      "layers": [                      # back-to-front, index 0 is backmost
        {"file": "bg.png", "name": "background",
         "prompt_src": "a meadow", "prompt_tgt": "a snowy meadow"},
        ...
      ]
    }
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ManifestDimensionError, ManifestParseError, MissingLayerFileError
from .layers import LayeredScene, RgbaLayer

MANIFEST_NAME = "manifest.json"


def bytes_to_layer(rgba: np.ndarray, name="") -> RgbaLayer:
    rgba = np.asarray(rgba)
    color = rgba[..., :3].astype(np.float64) / 127.5 - 1.0
    alpha = rgba[..., 3].astype(np.float64) / 255.0
    return RgbaLayer(np.clip(color, -1.0, 1.0), alpha, name)


def _round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def layer_to_bytes(layer: RgbaLayer) -> np.ndarray:
    rgb = _round_half_away((layer.color + 1.0) * 127.5)
    a = _round_half_away(layer.alpha * 255.0)
    out = np.concatenate([rgb, a[..., None]], axis=2)
    return np.clip(out, 0, 255).astype(np.uint8)


def image_to_bytes(color) -> np.ndarray:
    """Opaque RGB in [-1, 1] to 8-bit RGB."""
    return np.clip(_round_half_away((np.asarray(color) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def save_layer(layer: RgbaLayer, path):
    Image.fromarray(layer_to_bytes(layer), mode="RGBA").save(path)


def load_layer(path, name="") -> RgbaLayer:
    path = Path(path)
    if not path.is_file():
        raise MissingLayerFileError(f"layer file not found: {path}")
    with Image.open(path) as im:
        rgba = np.asarray(im.convert("RGBA"))
    return bytes_to_layer(rgba, name)


def _field(obj, key, where, kind=None):
    if key not in obj:
        raise ManifestParseError(f"missing required field in {where}", field=key)
    value = obj[key]
    if kind is not None and not isinstance(value, kind):
        raise ManifestParseError(f"wrong type in {where}: expected {kind}", field=key)
    return value


def read_manifest(path):
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        text = path.read_text()
    except FileNotFoundError as exc:
        raise MissingLayerFileError(f"manifest not found: {path}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestParseError(f"invalid JSON in {path}: {exc.msg}", line=exc.lineno) from exc
    if not isinstance(data, dict):
        raise ManifestParseError(f"{path}: top level must be an object")
    return path, data


def load_scene(manifest_path) -> LayeredScene:
    path, data = read_manifest(manifest_path)
    width = _field(data, "width", "manifest", int)
    height = _field(data, "height", "manifest", int)
    entries = _field(data, "layers", "manifest", list)
    if not entries:
        raise ManifestParseError("manifest lists no layers", field="layers")
    scene_id = str(data.get("scene_id", path.parent.name))
    layers, prompts = [], []
    for k, entry in enumerate(entries):
        where = f"layers[{k}]"
        if not isinstance(entry, dict):
            raise ManifestParseError(f"{where} must be an object", field=where)
        file = _field(entry, "file", where, str)
        name = str(entry.get("name", f"layer{k}"))
        layer = load_layer(path.parent / file, name)
        if layer.shape != (height, width):
            raise ManifestDimensionError(
                f"{where} ({file}) is {layer.shape[1]}x{layer.shape[0]}, "
                f"manifest declares {width}x{height}"
            )
        layers.append(layer)
        prompts.append((str(entry.get("prompt_src", "")), str(entry.get("prompt_tgt", ""))))
    return LayeredScene(tuple(layers), width, height, tuple(prompts), scene_id)


def save_scene(scene: LayeredScene, directory) -> Path:
    """Write every layer as ``layer_<k>.png`` plus a manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, layer in enumerate(scene.layers):
        file = f"layer_{k}.png"
        save_layer(layer, directory / file)
        src, tgt = scene.prompt_pair(k)
        entries.append({"file": file, "name": layer.name or f"layer{k}", "prompt_src": src, "prompt_tgt": tgt})
    manifest = {
        "scene_id": scene.scene_id,
        "width": scene.width,
        "height": scene.height,
        "layers": entries,
    }
    out = directory / MANIFEST_NAME
    out.write_text(json.dumps(manifest, indent=2) + "\n")
    return out
