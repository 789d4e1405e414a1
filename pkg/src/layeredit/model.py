"""Velocity models.

Two implementations share one call surface (``forward(request)``):

* ``ToyTransformer`` - a small bi-stream, MMDiT-style transformer in numpy.
  Image tokens of the target stream and (optionally) the context stream are
  concatenated with prompt tokens and run through joint self-attention.
  Every non-attention op is token-wise, so the only way context can reach the
  target rows is through the target->context attention block.
* ``AnalyticModel`` - ``v = z A^T + b`` on target rows, with (A, b) derived
  from the prompt. Used as a closed-form oracle for the integrator.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

import numpy as np

from .errors import VelocityRequestError

BI_STREAM = "bi_stream"
TARGET_ONLY = "target_only"

_UNCOND_KEY = b"\x00<unconditional>"


@dataclass(frozen=True, eq=False)
class PromptEmbedding:
    tokens: np.ndarray  # (M, width), unit-norm rows
    source_text: str

    @property
    def is_unconditional(self):
        return self.source_text == ""


def _digest_seed(*parts) -> int:
    h = hashlib.sha256()
    for part in parts:
        if isinstance(part, str):
            part = part.encode("utf-8")
        h.update(len(part).to_bytes(8, "little"))
        h.update(part)
    return int.from_bytes(h.digest()[:8], "little")


def embed_prompt(text, seed=0, width=16, n_tokens=8) -> PromptEmbedding:
    """Hash-seeded stand-in for a text encoder. Empty text is the unconditional prompt."""
    text = "" if text is None else str(text)
    key = _UNCOND_KEY if text == "" else text.encode("utf-8")
    rng = np.random.default_rng(_digest_seed(str(int(seed)), key, str(width), str(n_tokens)))
    tokens = rng.standard_normal((n_tokens, width))
    tokens /= np.linalg.norm(tokens, axis=1, keepdims=True)
    return PromptEmbedding(tokens, text)


@dataclass(frozen=True, eq=False)
class VelocityRequest:
    target_tokens: np.ndarray
    prompt: PromptEmbedding
    tau: float
    context_tokens: np.ndarray | None = None
    mode: str = TARGET_ONLY
    grid_dims: tuple | None = None

    def __post_init__(self):
        if self.mode == BI_STREAM:
            if self.context_tokens is None:
                raise VelocityRequestError("bi_stream mode requires context tokens")
            if self.context_tokens.shape != self.target_tokens.shape:
                raise VelocityRequestError(
                    f"context {self.context_tokens.shape} != target {self.target_tokens.shape}"
                )
        elif self.mode == TARGET_ONLY:
            if self.context_tokens is not None:
                raise VelocityRequestError("target_only mode forbids context tokens")
        else:
            raise VelocityRequestError(f"unknown mode {self.mode!r}")
        if not 0.0 <= float(self.tau) <= 1.0:
            raise VelocityRequestError(f"tau={self.tau} outside [0, 1]")

    @property
    def n_target(self):
        return self.target_tokens.shape[0]


@dataclass(frozen=True, eq=False)
class AttentionBlocks:
    """Attention weights of one head in one block, split by stream.

    ``weights`` is the full (L, L) row-stochastic matrix over
    [target; context; prompt] tokens.
    """

    weights: np.ndarray
    n_target: int
    n_context: int
    block: int
    head: int

    def _sl(self, which):
        t, c = self.n_target, self.n_context
        return {"t": slice(0, t), "c": slice(t, t + c)}[which]

    @property
    def A_tt(self):
        return self.weights[self._sl("t"), self._sl("t")]

    @property
    def A_tc(self):
        return self.weights[self._sl("t"), self._sl("c")]

    @property
    def A_ct(self):
        return self.weights[self._sl("c"), self._sl("t")]

    @property
    def A_cc(self):
        return self.weights[self._sl("c"), self._sl("c")]


class VelocityModel:
    """Common surface: ``forward``, ``embed`` and ``unconditional``."""

    width: int
    prompt_seed: int
    n_prompt_tokens: int = 8

    def forward(self, req: VelocityRequest) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, req):
        return self.forward(req)

    def embed(self, text) -> PromptEmbedding:
        return embed_prompt(text, self.prompt_seed, self.width, self.n_prompt_tokens)

    def unconditional(self) -> PromptEmbedding:
        return self.embed("")


def cfg_velocity(model: VelocityModel, req: VelocityRequest, scale: float) -> np.ndarray:
    """Two-pass classifier-free guidance: v_u + scale * (v_c - v_u)."""
    if scale < 0:
        raise ValueError(f"guidance scale must be >= 0, got {scale}")
    if scale == 1.0:
        return model.forward(req)
    v_uncond = model.forward(replace(req, prompt=model.unconditional()))
    if scale == 0.0:
        return v_uncond
    v_cond = model.forward(req)
    return v_uncond + scale * (v_cond - v_uncond)


# -- toy transformer ---------------------------------------------------------


def _layer_norm(x, eps=1e-6):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(0.7978845608028654 * (x + 0.044715 * x * x * x)))


def _sinusoid(values, dim, max_period=10000.0):
    values = np.asarray(values, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = values[..., None] * freqs
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1)


def positional_embedding_2d(h, w, dim):
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    half = dim // 2
    return np.concatenate(
        [_sinusoid(rows.ravel(), half), _sinusoid(cols.ravel(), dim - half)], axis=-1
    )


class ToyTransformer(VelocityModel):
    """Bi-stream joint-attention transformer with timestep modulation.

    Parameters
    ----------
    in_dim : int
        Token width d of the packed latent (C of the codec).
    width : int
        Internal model width; prompt embeddings use the same width.
    """

    def __init__(
        self,
        in_dim,
        width=16,
        heads=4,
        blocks=4,
        n_prompt_tokens=8,
        seed=0,
        prompt_seed=0,
        time_dim=16,
    ):
        if width % heads:
            raise ValueError("width must be divisible by heads")
        self.in_dim = in_dim
        self.width = width
        self.heads = heads
        self.n_blocks = blocks
        self.n_prompt_tokens = n_prompt_tokens
        self.seed = seed
        self.prompt_seed = prompt_seed
        self.time_dim = time_dim
        self.params = self._init_params(np.random.default_rng(seed))

    def _init_params(self, rng):
        D, C = self.width, self.in_dim

        def lin(fan_in, fan_out, gain=1.0):
            return rng.standard_normal((fan_in, fan_out)) * gain / np.sqrt(fan_in)

        p = {
            "w_in": lin(C, D),
            "b_in": np.zeros(D),
            "stream_emb": rng.standard_normal((2, D)) * 0.5,
            "w_txt": lin(D, D),
            "w_t1": lin(self.time_dim, D),
            "b_t1": np.zeros(D),
            "w_t2": lin(D, D),
            "b_t2": np.zeros(D),
            "w_fmod": lin(D, 2 * D, 0.2),
            "b_fmod": np.zeros(2 * D),
            "w_out": lin(D, C),
            "b_out": np.zeros(C),
        }
        for i in range(self.n_blocks):
            p[f"{i}.w_mod"] = lin(D, 6 * D, 0.2)
            # gates start near one so every block contributes
            p[f"{i}.b_mod"] = np.concatenate([np.zeros(2 * D), np.ones(D), np.zeros(2 * D), np.ones(D)])
            for name in ("wq", "wk", "wv", "wo"):
                p[f"{i}.{name}"] = lin(D, D)
            p[f"{i}.w_mlp1"] = lin(D, 4 * D)
            p[f"{i}.b_mlp1"] = np.zeros(4 * D)
            p[f"{i}.w_mlp2"] = lin(4 * D, D)
            p[f"{i}.b_mlp2"] = np.zeros(D)
        return p

    def zero_weights(self, out_bias=None):
        """Zero every parameter, optionally keeping a constant output bias."""
        for k in self.params:
            self.params[k] = np.zeros_like(self.params[k])
        if out_bias is not None:
            self.params["b_out"] = np.broadcast_to(
                np.asarray(out_bias, dtype=np.float64), (self.in_dim,)
            ).copy()
        return self

    def _time_embedding(self, tau):
        p = self.params
        t = _sinusoid(np.array([tau * 1000.0]), self.time_dim)[0]
        hidden = np.tanh(t @ p["w_t1"] + p["b_t1"])
        return hidden @ p["w_t2"] + p["b_t2"]

    def _attention(self, x, i, allowed, capture, n_t, n_c, out):
        p = self.params
        L, D = x.shape
        H = self.heads
        dh = D // H
        q = (x @ p[f"{i}.wq"]).reshape(L, H, dh).transpose(1, 0, 2)
        k = (x @ p[f"{i}.wk"]).reshape(L, H, dh).transpose(1, 0, 2)
        v = (x @ p[f"{i}.wv"]).reshape(L, H, dh).transpose(1, 0, 2)
        weights = q @ k.transpose(0, 2, 1)
        weights *= 1.0 / np.sqrt(dh)
        if allowed is not None:
            weights[:, ~allowed] = -np.inf
        weights -= weights.max(axis=-1, keepdims=True)
        np.exp(weights, out=weights)
        weights /= weights.sum(axis=-1, keepdims=True)
        if capture:
            for h in range(H):
                out.append(AttentionBlocks(weights[h].copy(), n_t, n_c, i, h))
        mixed = (weights @ v).transpose(1, 0, 2).reshape(L, D)
        return mixed @ p[f"{i}.wo"]

    def forward(self, req: VelocityRequest, *, mask_context=False, capture=False):
        """Velocities for every image token (target rows first).

        ``mask_context`` forbids all attention edges into context tokens.
        With ``capture`` the per-head attention weights are returned too.
        """
        p = self.params
        tgt = np.asarray(req.target_tokens, dtype=np.float64)
        n_t, d = tgt.shape
        if d != self.in_dim:
            raise VelocityRequestError(f"token width {d} != model in_dim {self.in_dim}")
        grid = req.grid_dims or (1, n_t)
        if grid[0] * grid[1] != n_t:
            raise VelocityRequestError(f"grid {grid} does not hold {n_t} tokens")
        pos = positional_embedding_2d(grid[0], grid[1], self.width)

        streams = [tgt @ p["w_in"] + p["b_in"] + pos + p["stream_emb"][0]]
        n_c = 0
        if req.mode == BI_STREAM:
            ctx = np.asarray(req.context_tokens, dtype=np.float64)
            n_c = ctx.shape[0]
            streams.append(ctx @ p["w_in"] + p["b_in"] + pos + p["stream_emb"][1])
        txt = req.prompt.tokens
        if txt.shape[1] != self.width:
            raise VelocityRequestError(f"prompt width {txt.shape[1]} != model width {self.width}")
        streams.append(txt @ p["w_txt"])
        x = np.concatenate(streams, axis=0)
        n_img = n_t + n_c

        allowed = None
        if mask_context and n_c:
            allowed = np.ones((x.shape[0], x.shape[0]), dtype=bool)
            allowed[:, n_t:n_img] = False

        temb = self._time_embedding(float(req.tau))
        silu = temb / (1.0 + np.exp(-temb))
        captured = []
        for i in range(self.n_blocks):
            mod = silu @ p[f"{i}.w_mod"] + p[f"{i}.b_mod"]
            sh1, sc1, g1, sh2, sc2, g2 = np.split(mod, 6)
            h = _layer_norm(x) * (1.0 + sc1) + sh1
            x = x + g1 * self._attention(h, i, allowed, capture, n_t, n_c, captured)
            h = _layer_norm(x) * (1.0 + sc2) + sh2
            h = _gelu(h @ p[f"{i}.w_mlp1"] + p[f"{i}.b_mlp1"]) @ p[f"{i}.w_mlp2"] + p[f"{i}.b_mlp2"]
            x = x + g2 * h

        fmod = silu @ p["w_fmod"] + p["b_fmod"]
        shift, scale = np.split(fmod, 2)
        out = (_layer_norm(x[:n_img]) * (1.0 + scale) + shift) @ p["w_out"] + p["b_out"]
        if capture:
            return out, captured
        return out


# -- analytic oracle ---------------------------------------------------------


class AnalyticModel(VelocityModel):
    """Row-wise affine velocity ``v = z A^T + b`` on target tokens.

    (A, b) come from a hash of the prompt embedding, or from ``overrides``
    keyed by prompt text. Context tokens are ignored.
    """

    def __init__(self, dim, width=16, seed=0, prompt_seed=0, a_scale=0.5, overrides=None):
        self.dim = dim
        self.width = width
        self.seed = seed
        self.prompt_seed = prompt_seed
        self.a_scale = a_scale
        self.overrides = dict(overrides or {})

    def coefficients(self, prompt: PromptEmbedding):
        if prompt.source_text in self.overrides:
            A, b = self.overrides[prompt.source_text]
            A = np.broadcast_to(np.asarray(A, dtype=np.float64), (self.dim, self.dim))
            b = np.broadcast_to(np.asarray(b, dtype=np.float64), (self.dim,))
            return A, b
        rng = np.random.default_rng(
            _digest_seed(str(self.seed), np.ascontiguousarray(prompt.tokens).tobytes())
        )
        A = rng.standard_normal((self.dim, self.dim)) * self.a_scale / np.sqrt(self.dim)
        b = rng.standard_normal(self.dim) * 0.5
        return A, b

    def forward(self, req: VelocityRequest):
        A, b = self.coefficients(req.prompt)
        return np.asarray(req.target_tokens, dtype=np.float64) @ A.T + b
