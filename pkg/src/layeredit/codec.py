"""Lossless toy latent codec and token packing.

The codec does a space-to-depth rearrangement of the 4-channel image into
s x s patches and applies a fixed orthonormal matrix to every patch vector.
Because the map is orthonormal the round trip is exact up to float rounding,
and the latent has the same L2 norm as the image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CodecShapeError, TokenShapeError
from .layers import OpaqueImage, RgbaLayer

TARGET = "target"
CONTEXT = "context"


@dataclass(frozen=True, eq=False)
class LatentGrid:
    data: np.ndarray  # (C, h, w)
    downsample: int
    origin_dims: tuple  # (H, W)

    @property
    def channels(self):
        return self.data.shape[0]

    @property
    def grid_dims(self):
        return self.data.shape[1:]


@dataclass(frozen=True, eq=False)
class TokenStream:
    tokens: np.ndarray  # (N, d), row-major over (h, w)
    stream_id: str
    grid_dims: tuple
    downsample: int = 1
    origin_dims: tuple = ()

    @property
    def n_tokens(self):
        return self.tokens.shape[0]


def orthonormal_matrix(size, seed):
    """Seeded orthonormal matrix from the QR factorisation of a Gaussian matrix."""
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((size, size)))
    # sign fix makes the factorisation unique for a given seed
    return q * np.sign(np.diag(r))


class ToyCodec:
    """Space-to-depth plus orthonormal patch map.

    Parameters
    ----------
    downsample : int
        Patch side s; the latent has C = 4 s^2 channels on an (H/s, W/s) grid.
    seed : int or None
        Seed for the patch matrix. ``None`` uses the identity.
    """

    def __init__(self, downsample=8, seed=0):
        if downsample < 1:
            raise ValueError("downsample must be >= 1")
        self.downsample = int(downsample)
        self.seed = seed
        size = self.channels
        if seed is None:
            self.matrix = np.eye(size)
        else:
            self.matrix = orthonormal_matrix(size, seed)
        err = np.abs(self.matrix.T @ self.matrix - np.eye(size)).max()
        if err > 1e-12:
            raise RuntimeError(f"patch map is not orthonormal (max err {err:.3g})")
        self.matrix.setflags(write=False)

    @property
    def channels(self):
        return 4 * self.downsample**2

    def _check_dims(self, height, width):
        s = self.downsample
        pad_h = (-height) % s
        pad_w = (-width) % s
        if pad_h or pad_w:
            raise CodecShapeError(
                f"image {height}x{width} is not divisible by patch size {s}; "
                f"pad by ({pad_h}, {pad_w})",
                pad_h=pad_h,
                pad_w=pad_w,
            )

    def encode(self, image: RgbaLayer | OpaqueImage) -> LatentGrid:
        if isinstance(image, OpaqueImage):
            image = image.as_layer()
        rgba = image.rgba()  # (4, H, W)
        _, height, width = rgba.shape
        self._check_dims(height, width)
        s = self.downsample
        h, w = height // s, width // s
        # (4, h, s, w, s) -> (4, s, s, h, w) -> (C, h, w)
        patches = rgba.reshape(4, h, s, w, s).transpose(0, 2, 4, 1, 3).reshape(-1, h, w)
        data = np.einsum("ij,jhw->ihw", self.matrix, patches)
        return LatentGrid(data, s, (height, width))

    def decode(self, latent: LatentGrid) -> RgbaLayer:
        data = np.asarray(latent.data, dtype=np.float64)
        s = self.downsample
        if data.ndim != 3 or data.shape[0] != self.channels:
            raise CodecShapeError(
                f"latent shape {data.shape} inconsistent with {self.channels} channels"
            )
        if latent.downsample != s:
            raise CodecShapeError(
                f"latent downsample {latent.downsample} != codec downsample {s}"
            )
        _, h, w = data.shape
        if tuple(latent.origin_dims) != (h * s, w * s):
            raise CodecShapeError(
                f"grid {h}x{w} does not match origin dims {latent.origin_dims}"
            )
        patches = np.einsum("ji,jhw->ihw", self.matrix, data)
        rgba = patches.reshape(4, s, s, h, w).transpose(0, 3, 1, 4, 2).reshape(4, h * s, w * s)
        color = np.clip(np.moveaxis(rgba[:3], 0, 2), -1.0, 1.0)
        alpha = np.clip((rgba[3] + 1.0) / 2.0, 0.0, 1.0)
        return RgbaLayer(color, alpha)


def pack(latent: LatentGrid, stream_id=TARGET) -> TokenStream:
    c, h, w = latent.data.shape
    tokens = latent.data.reshape(c, h * w).T.copy()
    return TokenStream(tokens, stream_id, (h, w), latent.downsample, tuple(latent.origin_dims))


def unpack(stream: TokenStream) -> LatentGrid:
    h, w = stream.grid_dims
    n, d = stream.tokens.shape
    if n != h * w:
        raise TokenShapeError(f"{n} tokens cannot fill a {h}x{w} grid")
    data = stream.tokens.T.reshape(d, h, w).copy()
    origin = stream.origin_dims or (h * stream.downsample, w * stream.downsample)
    return LatentGrid(data, stream.downsample, tuple(origin))
