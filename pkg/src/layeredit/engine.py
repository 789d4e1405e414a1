"""Delta-velocity editing trajectory.

One edit encodes the target layer and an opaque context image, then integrates
``z_e <- z_e + (tau_{i+1} - tau_i) * (v_tgt - v_src)`` over a decreasing
schedule. The first ``floor(rho * T)`` steps evaluate both velocities with the
context stream attached; the remaining steps see the target stream only.
Context tokens are read, never written, integrated or decoded.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .codec import CONTEXT, TARGET, ToyCodec, pack, unpack
from .errors import ConfigError, EditStepError
from .layers import LayeredScene, RgbaLayer, opaque_context, replace_layer
from .model import (
    BI_STREAM,
    TARGET_ONLY,
    AnalyticModel,
    PromptEmbedding,
    ToyTransformer,
    VelocityRequest,
    cfg_velocity,
)

log = logging.getLogger(__name__)

MODELS = ("toy", "analytic")


@dataclass(frozen=True)
class EditConfig:
    steps: int = 28
    rho: float = 0.5
    cfg_src: float = 1.5
    cfg_tgt: float = 5.5
    seed: int = 0
    schedule: str = "linear"
    model: str = "toy"
    patch_size: int = 8
    codec_seed: int = 0
    weights_seed: int = 0
    fresh_context_noise: bool = True

    def __post_init__(self):
        if int(self.steps) != self.steps or self.steps < 1:
            raise ConfigError(f"steps must be a positive integer, got {self.steps}")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError(f"rho must lie in [0, 1], got {self.rho}")
        if self.cfg_src < 0 or self.cfg_tgt < 0:
            raise ConfigError("guidance scales must be >= 0")
        if self.schedule != "linear":
            raise ConfigError(f"unsupported schedule {self.schedule!r}")
        if self.model not in MODELS:
            raise ConfigError(f"model must be one of {MODELS}, got {self.model!r}")

    @property
    def switch_step(self):
        return switch_step(self.steps, self.rho)

    def to_dict(self):
        d = asdict(self)
        d["switch_step"] = self.switch_step
        return d


def switch_step(steps, rho):
    # exact for the dyadic rho values used in practice; guards 0.29*100 style drift
    return int(math.floor(rho * steps + 1e-9))


def make_schedule(steps, kind="linear"):
    """Noise levels tau_0 = 1 > ... > tau_T = 0."""
    if int(steps) != steps or steps < 1:
        raise ConfigError(f"schedule needs T >= 1, got {steps}")
    if kind != "linear":
        raise ConfigError(f"unsupported schedule {kind!r}")
    return 1.0 - np.arange(steps + 1) / steps


def noise(z, tau, eps):
    """Linear forward noising (1 - tau) z + tau eps."""
    z = np.asarray(z, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z.shape != eps.shape:
        raise ValueError(f"shape mismatch {z.shape} vs {eps.shape}")
    if tau == 0.0:
        return z.copy()
    if tau == 1.0:
        return eps.copy()
    return (1.0 - tau) * z + tau * eps


def build_model(config: EditConfig, token_dim: int):
    if config.model == "toy":
        return ToyTransformer(token_dim, seed=config.weights_seed, prompt_seed=config.seed)
    return AnalyticModel(token_dim, seed=config.weights_seed, prompt_seed=config.seed)


def instance_rng(seed, instance_id=0):
    """Independent stream per (run seed, instance), stable across processes."""
    if isinstance(instance_id, str):
        instance_id = int.from_bytes(hashlib.sha256(instance_id.encode()).digest()[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(instance_id)]))


@dataclass
class StepCounter:
    bi_stream: int = 0
    target_only: int = 0
    modes: list = field(default_factory=list)

    def record(self, mode):
        self.modes.append(mode)
        if mode == BI_STREAM:
            self.bi_stream += 1
        else:
            self.target_only += 1


@dataclass
class EditState:
    z_src: np.ndarray
    z_ctx: np.ndarray | None
    z_e: np.ndarray
    schedule: np.ndarray
    grid_dims: tuple
    step: int = 0
    eps_ctx: np.ndarray | None = None

    @classmethod
    def start(cls, z_src, z_ctx, schedule, grid_dims):
        z_src = np.array(z_src, dtype=np.float64)
        z_src.setflags(write=False)
        if z_ctx is not None:
            z_ctx = np.array(z_ctx, dtype=np.float64)
            z_ctx.setflags(write=False)
        return cls(z_src, z_ctx, z_src.copy(), np.asarray(schedule), tuple(grid_dims))

    @property
    def done(self):
        return self.step >= len(self.schedule) - 1


def edit_step(
    state: EditState,
    config: EditConfig,
    model,
    p_src: PromptEmbedding,
    p_tgt: PromptEmbedding,
    rng: np.random.Generator,
    counter: StepCounter | None = None,
) -> EditState:
    """Advance the editable state by one Euler step of the delta velocity."""
    i = state.step
    if state.done:
        raise ValueError(f"trajectory already finished at step {i}")
    tau, tau_next = float(state.schedule[i]), float(state.schedule[i + 1])

    eps_tgt = rng.standard_normal(state.z_src.shape)
    if config.fresh_context_noise or state.eps_ctx is None:
        eps_ctx = rng.standard_normal(state.z_src.shape)
    else:
        eps_ctx = state.eps_ctx

    zs_tgt = noise(state.z_src, tau, eps_tgt)
    zt_tgt = zs_tgt + (state.z_e - state.z_src)

    mode = BI_STREAM if (i < config.switch_step and state.z_ctx is not None) else TARGET_ONLY
    ctx = noise(state.z_ctx, tau, eps_ctx) if mode == BI_STREAM else None
    n = state.z_src.shape[0]
    try:
        v_src = cfg_velocity(
            model,
            VelocityRequest(zs_tgt, p_src, tau, ctx, mode, state.grid_dims),
            config.cfg_src,
        )[:n]
        v_tgt = cfg_velocity(
            model,
            VelocityRequest(zt_tgt, p_tgt, tau, ctx, mode, state.grid_dims),
            config.cfg_tgt,
        )[:n]
    except Exception as exc:
        raise EditStepError(i, exc) from exc
    if counter is not None:
        counter.record(mode)

    z_e = state.z_e + (tau_next - tau) * (v_tgt - v_src)
    return replace(state, z_e=z_e, step=i + 1, eps_ctx=eps_ctx)


def run_trajectory(z_src, z_ctx, grid_dims, p_src, p_tgt, config, model, rng, counter=None):
    """Integrate all T steps and return the final editable tokens."""
    state = EditState.start(z_src, z_ctx, make_schedule(config.steps, config.schedule), grid_dims)
    while not state.done:
        state = edit_step(state, config, model, p_src, p_tgt, rng, counter)
    return state.z_e


class Editor:
    """Bundles codec and velocity model for a config; reusable across edits."""

    def __init__(self, config: EditConfig, model=None, codec=None):
        self.config = config
        self.codec = codec or ToyCodec(config.patch_size, config.codec_seed)
        self.model = model or build_model(config, self.codec.channels)

    def edit_layer(
        self,
        scene: LayeredScene,
        target_index: int,
        p_src: str,
        p_tgt: str,
        *,
        instance_id=0,
        rng=None,
        counter=None,
    ) -> RgbaLayer:
        if p_src is None or p_tgt is None:
            raise ValueError("prompts must not be None")
        scene.check_index(target_index)
        context = opaque_context(scene, target_index)
        target = scene.layers[target_index]
        z_tgt = pack(self.codec.encode(target), TARGET)
        z_ctx = pack(self.codec.encode(context), CONTEXT)
        if rng is None:
            rng = instance_rng(self.config.seed, instance_id)
        z_e = run_trajectory(
            z_tgt.tokens,
            z_ctx.tokens,
            z_tgt.grid_dims,
            self.model.embed(p_src),
            self.model.embed(p_tgt),
            self.config,
            self.model,
            rng,
            counter,
        )
        edited = self.codec.decode(unpack(replace(z_tgt, tokens=z_e)))
        return RgbaLayer(edited.color, edited.alpha, target.name)

    def edit_multi(self, scene, targets, prompt_pairs=None, *, instance_id=0, counter=None):
        """Edit several layers back-to-front; returns the updated scene.

        ``prompt_pairs`` maps layer index to (src, tgt); defaults to the scene's
        own prompts.
        """
        targets = sorted(set(int(t) for t in targets))
        for t in targets:
            scene.check_index(t)
        if prompt_pairs is None:
            prompt_pairs = {t: scene.prompt_pair(t) for t in targets}
        elif not isinstance(prompt_pairs, dict):
            raise TypeError("prompt_pairs must map layer index -> (src, tgt)")
        missing = [t for t in targets if t not in prompt_pairs]
        if missing:
            raise ValueError(f"no prompt pair for layers {missing}")
        log.info("editing layers in back-to-front order %s", targets)
        rng = instance_rng(self.config.seed, instance_id)
        current = scene
        for t in targets:
            src, tgt = prompt_pairs[t]
            edited = self.edit_layer(current, t, src, tgt, rng=rng, counter=counter)
            current = replace_layer(current, t, edited)
        return current


def edit_layer(scene, target_index, p_src, p_tgt, config=EditConfig(), **kwargs):
    return Editor(config).edit_layer(scene, target_index, p_src, p_tgt, **kwargs)


def edit_multi(scene, targets, prompt_pairs=None, config=EditConfig(), **kwargs):
    return Editor(config).edit_multi(scene, targets, prompt_pairs, **kwargs)
