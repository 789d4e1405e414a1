"""Benchmark protocol, region masks, metrics and a parallel runner."""

from __future__ import annotations

import itertools
import json
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .engine import EditConfig, Editor
from .errors import EmptyRegionError, FeatureSetTooSmallError
from .layers import MID_GRAY, LayeredScene, OpaqueImage, RgbaLayer, composite_over, composite_scene

BINARIZE_THRESHOLD = 0.5
COV_REGULARIZER = 1e-6
FEATURE_DIM = 8
# learned metrics we do not compute; kept as null columns for external merging
RESERVED_METRICS = ("hpsv2", "aesthetic", "clip", "image_reward", "lpips")


class EmptyMaskWarning(UserWarning):
    pass


@dataclass(frozen=True)
class EditInstance:
    instance_id: str
    scene_id: str
    mode: str
    targets: tuple
    prompts: tuple

    def __post_init__(self):
        if self.mode == "single" and len(self.targets) != 1:
            raise ValueError("single-mode instances edit exactly one layer")
        if self.mode == "multi" and len(self.targets) < 2:
            raise ValueError("multi-mode instances edit at least two layers")
        if self.mode not in ("single", "multi"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if len(self.prompts) != len(self.targets):
            raise ValueError("one prompt pair per target required")

    def to_dict(self):
        return {
            "instance_id": self.instance_id,
            "scene_id": self.scene_id,
            "mode": self.mode,
            "targets": list(self.targets),
            "prompts": [list(p) for p in self.prompts],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            d["instance_id"],
            d["scene_id"],
            d["mode"],
            tuple(int(t) for t in d["targets"]),
            tuple(tuple(p) for p in d["prompts"]),
        )


def generate_protocol(scenes, mode):
    """Enumerate edit instances.

    ``scenes`` holds LayeredScene objects or ``(scene_id, n_layers, prompts)``
    tuples. Single mode yields one instance per layer; multi mode yields every
    subset of size 2..K, ordered back-to-front.
    """
    scenes = list(scenes)
    if not scenes:
        raise ValueError("no scenes given")
    if mode not in ("single", "multi"):
        raise ValueError(f"mode must be 'single' or 'multi', got {mode!r}")
    out = []
    for n, scene in enumerate(scenes):
        if isinstance(scene, LayeredScene):
            sid = scene.scene_id or f"scene{n:05d}"
            k = len(scene)
            prompts = [scene.prompt_pair(i) for i in range(k)]
        else:
            sid, k = scene[0], int(scene[1])
            prompts = list(scene[2]) if len(scene) > 2 else [("", "")] * k
        sizes = [1] if mode == "single" else range(2, k + 1)
        for size in sizes:
            for subset in itertools.combinations(range(k), size):
                tag = "-".join(str(i) for i in subset)
                out.append(
                    EditInstance(
                        f"{sid}/{mode}/{tag}",
                        sid,
                        mode,
                        subset,
                        tuple(tuple(prompts[i]) for i in subset),
                    )
                )
    return out


def binarize(alpha, threshold=BINARIZE_THRESHOLD):
    return np.asarray(alpha) > threshold


def region_masks(scene: LayeredScene, edited):
    """Visible region of the edited layers and its complement.

    A layer's visible region is its binarized matte minus the binarized
    mattes of every layer in front of it.
    """
    edited = set(edited)
    for k in edited:
        scene.check_index(k)
    shape = (scene.height, scene.width)
    covered = np.zeros(shape, dtype=bool)
    edited_mask = np.zeros(shape, dtype=bool)
    for k in range(len(scene) - 1, -1, -1):
        matte = binarize(scene.layers[k].alpha)
        if k in edited:
            edited_mask |= matte & ~covered
        covered |= matte
    return edited_mask, ~edited_mask


def _to_unit(x, value_range):
    lo, hi = value_range
    return (np.asarray(x, dtype=np.float64) - lo) / (hi - lo)


def _masked_sq_err(a, b, mask, value_range):
    if isinstance(a, (OpaqueImage, RgbaLayer)):
        a = a.color
    if isinstance(b, (OpaqueImage, RgbaLayer)):
        b = b.color
    a = _to_unit(a, value_range)
    b = _to_unit(b, value_range)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    sq = (a - b) ** 2
    if mask is None:
        return sq.ravel()
    mask = np.asarray(mask, dtype=bool)
    if sq.ndim == mask.ndim + 1:
        mask = np.broadcast_to(mask[..., None], sq.shape)
    return sq[mask]


def mse(a, b, mask=None, value_range=(-1.0, 1.0)):
    """Mean squared error over masked pixels after mapping to [0, 1].

    An empty mask returns 0.0 and emits ``EmptyMaskWarning``.
    """
    sq = _masked_sq_err(a, b, mask, value_range)
    if sq.size == 0:
        warnings.warn("MSE over an empty mask", EmptyMaskWarning, stacklevel=2)
        return 0.0
    return float(sq.mean())


def psnr(a, b, mask=None, value_range=(-1.0, 1.0)):
    """PSNR in dB with peak 1; identical inputs give ``math.inf``."""
    sq = _masked_sq_err(a, b, mask, value_range)
    if sq.size == 0:
        raise EmptyRegionError("PSNR is undefined over an empty mask")
    err = float(sq.mean())
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / err)


def composite_on_gray(item) -> OpaqueImage:
    """Alpha-over onto a constant mid-gray plate (0 in [-1, 1])."""
    if isinstance(item, LayeredScene):
        return composite_scene(item, MID_GRAY)
    acc, cov = composite_over([item])
    return OpaqueImage(acc + MID_GRAY * (1.0 - cov)[..., None])


def alpha_features(mask):
    """8-dim descriptor of a soft alpha mask.

    mean, variance, binarized coverage, mean gradient magnitude, then the
    binarized coverage of the four quadrants (TL, TR, BL, BR).
    """
    m = np.asarray(mask, dtype=np.float64)
    h, w = m.shape
    b = binarize(m).astype(np.float64)
    if h > 1 and w > 1:
        gy, gx = np.gradient(m)
        grad = float(np.hypot(gx, gy).mean())
    else:
        grad = 0.0
    hh, hw = max(h // 2, 1), max(w // 2, 1)
    quads = [b[:hh, :hw], b[:hh, hw:], b[hh:, :hw], b[hh:, hw:]]
    quad_cov = [float(q.mean()) if q.size else 0.0 for q in quads]
    return np.array([m.mean(), m.var(), b.mean(), grad, *quad_cov])


def gaussian_stats(features, regularizer=COV_REGULARIZER):
    f = np.asarray(features, dtype=np.float64)
    if f.ndim == 1:
        f = f[:, None]
    n, d = f.shape
    if n < d + 1:
        raise FeatureSetTooSmallError(f"need at least {d + 1} samples for {d}-dim features, got {n}")
    mu = f.mean(axis=0)
    sigma = np.atleast_2d(np.cov(f, rowvar=False)) + regularizer * np.eye(d)
    return mu, sigma


def _psd_sqrt(m):
    vals, vecs = np.linalg.eigh((m + m.T) / 2.0)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(mu1, sigma1, mu2, sigma2):
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)), clamped at 0.

    The cross term is evaluated as the sum of square roots of the eigenvalues
    of S1^(1/2) S2 S1^(1/2), which is symmetric PSD.
    """
    mu1, mu2 = np.atleast_1d(mu1), np.atleast_1d(mu2)
    sigma1, sigma2 = np.atleast_2d(sigma1), np.atleast_2d(sigma2)
    root1 = _psd_sqrt(sigma1)
    inner = root1 @ sigma2 @ root1
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    cross = np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = mu1 - mu2
    d = float(diff @ diff + np.trace(sigma1) + np.trace(sigma2) - 2.0 * cross)
    return max(d, 0.0)


def frechet_from_features(feats_a, feats_b, regularizer=COV_REGULARIZER):
    mu1, s1 = gaussian_stats(feats_a, regularizer)
    mu2, s2 = gaussian_stats(feats_b, regularizer)
    return frechet_distance(mu1, s1, mu2, s2)


def alpha_frechet(masks_a, masks_b, regularizer=COV_REGULARIZER):
    """Frechet distance between hand-crafted feature distributions of two mask sets."""
    fa = np.stack([alpha_features(m) for m in masks_a]) if len(masks_a) else np.zeros((0, FEATURE_DIM))
    fb = np.stack([alpha_features(m) for m in masks_b]) if len(masks_b) else np.zeros((0, FEATURE_DIM))
    return frechet_from_features(fa, fb, regularizer)


# -- runner ------------------------------------------------------------------


def _non_target_scene(scene, targets):
    keep = [layer for k, layer in enumerate(scene.layers) if k not in targets]
    if not keep:
        return None
    return LayeredScene.from_layers(keep)


def _evaluate(original: LayeredScene, edited: LayeredScene, targets):
    edited_mask, preserved_mask = region_masks(original, targets)
    rest_before = _non_target_scene(original, targets)
    rest_after = _non_target_scene(edited, targets)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyMaskWarning)
        if rest_before is None:
            mse_pres = 0.0
        else:
            mse_pres = mse(composite_on_gray(rest_before), composite_on_gray(rest_after), preserved_mask)
        mse_edit = mse(composite_on_gray(original), composite_on_gray(edited), edited_mask)
    if rest_before is None or not preserved_mask.any():
        psnr_pres = None
    else:
        psnr_pres = psnr(composite_on_gray(rest_before), composite_on_gray(rest_after), preserved_mask)
    # non-target layers must come back bit-identical
    untouched = all(
        original.layers[k].equals(edited.layers[k]) for k in range(len(original)) if k not in targets
    )
    return {
        "mse_preserved": mse_pres,
        "psnr_preserved": psnr_pres,
        "mse_edited": mse_edit,
        "non_target_identical": untouched,
    }


def _run_one(args):
    scene, instance, config_dict = args
    config = EditConfig(**config_dict)
    started = time.perf_counter()
    row = {
        "instance_id": instance.instance_id,
        "scene_id": instance.scene_id,
        "mode": instance.mode,
        "targets": list(instance.targets),
    }
    masks_in, masks_out = [], []
    try:
        editor = Editor(config)
        prompts = dict(zip(instance.targets, instance.prompts))
        edited = editor.edit_multi(scene, instance.targets, prompts, instance_id=instance.instance_id)
        row.update(_evaluate(scene, edited, instance.targets))
        for t in instance.targets:
            masks_in.append(scene.layers[t].alpha)
            masks_out.append(edited.layers[t].alpha)
        row["status"] = "ok"
    except Exception as exc:  # recorded per instance; the run continues
        row.update(
            {
                "mse_preserved": None,
                "psnr_preserved": None,
                "mse_edited": None,
                "non_target_identical": None,
                "status": f"error: {type(exc).__name__}: {exc}",
            }
        )
    row["alpha_frechet"] = None
    row.update({name: None for name in RESERVED_METRICS})
    row["wall_ms"] = round((time.perf_counter() - started) * 1000.0, 3)
    return row, masks_in, masks_out


def run_benchmark(scenes, instances, config: EditConfig, jobs=1, timing=True):
    """Run every instance and return report records (header, rows, summary).

    ``scenes`` maps scene_id to LayeredScene. Rows are sorted by instance id,
    so the output does not depend on ``jobs``. With ``timing=False`` wall-clock
    fields are written as null and the report is fully reproducible.
    """
    instances = sorted(instances, key=lambda inst: inst.instance_id)
    cfg = config.to_dict()
    cfg.pop("switch_step")
    tasks = []
    rows = []
    for inst in instances:
        if inst.scene_id not in scenes:
            rows.append(
                (
                    {
                        "instance_id": inst.instance_id,
                        "scene_id": inst.scene_id,
                        "mode": inst.mode,
                        "targets": list(inst.targets),
                        "mse_preserved": None,
                        "psnr_preserved": None,
                        "mse_edited": None,
                        "non_target_identical": None,
                        "status": "error: unknown scene",
                        "alpha_frechet": None,
                        **{name: None for name in RESERVED_METRICS},
                        "wall_ms": None,
                    },
                    [],
                    [],
                )
            )
            continue
        tasks.append((scenes[inst.scene_id], inst, cfg))

    started = time.perf_counter()
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows.extend(pool.map(_run_one, tasks, chunksize=1))
    else:
        rows.extend(map(_run_one, tasks))
    rows.sort(key=lambda r: r[0]["instance_id"])

    masks_in = [m for _, mi, _ in rows for m in mi]
    masks_out = [m for _, _, mo in rows for m in mo]
    try:
        frechet = alpha_frechet(masks_out, masks_in)
        frechet_note = None
    except FeatureSetTooSmallError as exc:
        frechet, frechet_note = None, str(exc)

    records = [
        {
            "record": "header",
            "config": config.to_dict(),
            "seeds": {"run": config.seed, "weights": config.weights_seed, "codec": config.codec_seed},
            "metric_params": {
                "binarize_threshold": BINARIZE_THRESHOLD,
                "cov_regularizer": COV_REGULARIZER,
                "alpha_feature_dim": FEATURE_DIM,
                "alpha_metric": "alpha-frechet",
                "psnr_peak": 1.0,
                "value_range": [0.0, 1.0],
            },
            "reserved_metrics": list(RESERVED_METRICS),
            "n_instances": len(instances),
        }
    ]
    for row, _, _ in rows:
        if not timing:
            row["wall_ms"] = None
        records.append({"record": "instance", **row})
    summary = {
        "record": "summary",
        "alpha_frechet": frechet,
        "n_ok": sum(1 for r, _, _ in rows if r["status"] == "ok"),
        "n_failed": sum(1 for r, _, _ in rows if r["status"] != "ok"),
        "wall_ms": round((time.perf_counter() - started) * 1000.0, 3) if timing else None,
    }
    if frechet_note:
        summary["alpha_frechet_note"] = frechet_note
    records.append(summary)
    return records


def _jsonable(value):
    if isinstance(value, float) and math.isinf(value):
        return "inf"
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


def dump_report(records, fh):
    for rec in records:
        fh.write(json.dumps(_jsonable(rec), sort_keys=True) + "\n")


VOLATILE_KEYS = ("wall_ms",)


def report_payload(text):
    """Report lines with wall-clock fields removed, for reproducibility checks."""
    out = []
    for line in text.splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        for key in VOLATILE_KEYS:
            rec.pop(key, None)
        out.append(json.dumps(rec, sort_keys=True))
    return "\n".join(out)
