"""Command-line entry point: ``layeredit <command> ...``.

Layer indices always refer to manifest order, which is back-to-front
(0 = backmost).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import bench
from .engine import EditConfig, Editor, StepCounter
from .errors import (
    ConfigError,
    LayerEditError,
    LayerIndexError,
    ManifestDimensionError,
    ManifestParseError,
    MissingLayerFileError,
)
from .files import MANIFEST_NAME, image_to_bytes, load_scene, save_layer, save_scene
from .layers import composite_over, composite_scene
from .synth import make_scenes

log = logging.getLogger("layeredit")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_CONFIG = 4
EXIT_RUNTIME = 5

SEED_ENV = "LIMECROSS_SEED"


def _seed(args):
    if args.seed is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV}={env!r} is not an integer")
    return 0


def _config(args) -> EditConfig:
    return EditConfig(
        steps=args.steps,
        rho=args.rho,
        cfg_src=args.cfg_src,
        cfg_tgt=args.cfg_tgt,
        seed=_seed(args),
        model=args.model,
        patch_size=args.patch_size,
        codec_seed=args.codec_seed,
        weights_seed=args.weights_seed,
        fresh_context_noise=not args.fixed_context_noise,
    )


def _add_edit_flags(p):
    p.add_argument("--scene", required=True, help="scene manifest (file or directory)")
    p.add_argument("--rho", type=float, default=0.5, help="switching ratio in [0, 1]")
    p.add_argument("--steps", type=int, default=28)
    p.add_argument("--cfg-src", type=float, default=1.5)
    p.add_argument("--cfg-tgt", type=float, default=5.5)
    p.add_argument("--seed", type=int, default=None, help=f"run seed (fallback: ${SEED_ENV}, then 0)")
    p.add_argument("--model", choices=("toy", "analytic"), default="toy")
    p.add_argument("--patch-size", type=int, default=8)
    p.add_argument("--codec-seed", type=int, default=0)
    p.add_argument("--weights-seed", type=int, default=0)
    p.add_argument("--fixed-context-noise", action="store_true", help="reuse one context noise draw for all steps")
    p.add_argument("--out", required=True, help="output directory")


def _write_run(out, config, scene, edited_layers, counter):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for k, layer in edited_layers.items():
        save_layer(layer, out / f"edited_layer_{k}.png")
    save_scene(scene, out / "scene")
    run = {
        "config": config.to_dict(),
        "edited_layers": sorted(edited_layers),
        "steps_bi_stream": counter.bi_stream,
        "steps_target_only": counter.target_only,
    }
    (out / "config.json").write_text(json.dumps(run, indent=2, sort_keys=True) + "\n")


def cmd_edit(args):
    config = _config(args)
    scene = load_scene(args.scene)
    scene.check_index(args.layer)
    src, tgt = scene.prompt_pair(args.layer)
    src = args.prompt_src if args.prompt_src is not None else src
    tgt = args.prompt_tgt if args.prompt_tgt is not None else tgt
    log.info(
        "editing layer %d: %d steps, bi-stream for the first %d, target-only after",
        args.layer, config.steps, config.switch_step,
    )
    counter = StepCounter()
    editor = Editor(config)
    edited = editor.edit_multi(scene, [args.layer], {args.layer: (src, tgt)}, counter=counter)
    _write_run(args.out, config, edited, {args.layer: edited.layers[args.layer]}, counter)
    print(
        f"edited layer {args.layer}: {counter.bi_stream} bi-stream + "
        f"{counter.target_only} target-only steps (switch after step {config.switch_step}) -> {args.out}"
    )
    return EXIT_OK


def _parse_layers(text):
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"--layers expects comma-separated integers, got {text!r}")


def cmd_edit_multi(args):
    config = _config(args)
    scene = load_scene(args.scene)
    requested = _parse_layers(args.layers)
    if not requested:
        raise ConfigError("--layers is empty")
    if len(set(requested)) != len(requested):
        raise ConfigError(f"--layers repeats an index: {args.layers}")
    for k in requested:
        scene.check_index(k)
    order = sorted(requested)
    log.info("back-to-front edit order: %s", order)
    print(f"edit order (back-to-front): {','.join(str(k) for k in order)}")
    counter = StepCounter()
    edited = Editor(config).edit_multi(scene, order, counter=counter)
    _write_run(args.out, config, edited, {k: edited.layers[k] for k in order}, counter)
    return EXIT_OK


def cmd_compose(args):
    scene = load_scene(args.scene)
    if args.background == "gray":
        image = composite_scene(scene, 0.0)
    else:
        image = composite_scene(scene, scene.layers[0].color)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image_to_bytes(image.color), mode="RGB").save(out)
    print(f"composite -> {out}")
    return EXIT_OK


def cmd_inspect(args):
    scene = load_scene(args.scene)
    print(f"scene {scene.scene_id!r}: {scene.width}x{scene.height}, {len(scene)} layers (back-to-front)")
    for k, layer in enumerate(scene.layers):
        src, tgt = scene.prompt_pair(k)
        a = layer.alpha
        print(
            f"  [{k}] {layer.name:<16} alpha mean={a.mean():.3f} "
            f"opaque={np.mean(a >= 1.0):.3f} visible(>0.5)={np.mean(a > 0.5):.3f} "
            f"prompts: {src!r} -> {tgt!r}"
        )
    _, cov = composite_over(reversed(scene.layers))
    print(f"  total coverage: mean={cov.mean():.3f} min={cov.min():.3f}")
    return EXIT_OK


def _find_manifests(directory):
    directory = Path(directory)
    if not directory.is_dir():
        raise MissingLayerFileError(f"scene directory not found: {directory}")
    found = sorted(directory.glob(f"*/{MANIFEST_NAME}"))
    found += sorted(p for p in directory.glob("*.json"))
    return found


def cmd_bench_gen(args):
    manifests = _find_manifests(args.scenes)
    if not manifests:
        raise MissingLayerFileError(f"no scene manifests under {args.scenes}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    scenes, paths = [], {}
    for m in manifests:
        scene = load_scene(m)
        scenes.append(scene)
        paths[scene.scene_id] = os.path.relpath(m.resolve(), out.parent.resolve())
    instances = bench.generate_protocol(scenes, args.mode)
    with out.open("w") as fh:
        for inst in instances:
            rec = inst.to_dict()
            rec["scene_manifest"] = paths[inst.scene_id]
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    print(f"{len(instances)} {args.mode} instances from {len(scenes)} scenes -> {out}")
    return EXIT_OK


def cmd_bench_run(args):
    config = _config(args)
    path = Path(args.instances)
    if not path.is_file():
        raise MissingLayerFileError(f"instance file not found: {path}")
    instances, scenes = [], {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            inst = bench.EditInstance.from_dict(rec)
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise ManifestParseError(f"bad instance record in {path}: {exc}", line=lineno)
        if inst.scene_id not in scenes and "scene_manifest" in rec:
            scenes[inst.scene_id] = load_scene(path.parent / rec["scene_manifest"])
        instances.append(inst)
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    records = bench.run_benchmark(scenes, instances, config, jobs=args.jobs, timing=not args.no_timing)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w") as fh:
        bench.dump_report(records, fh)
    summary = records[-1]
    print(f"{summary['n_ok']} ok, {summary['n_failed']} failed; alpha-frechet={summary['alpha_frechet']} -> {out}")
    return EXIT_OK


def cmd_bench_synth(args):
    out = Path(args.out)
    for scene in make_scenes(args.count, args.seed, args.size, args.layers, args.identity_prompts):
        save_scene(scene, out / scene.scene_id)
    print(f"{args.count} synthetic scenes -> {out}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="layeredit", description="Context-conditioned layered RGBA editing.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("edit", help="edit one layer")
    _add_edit_flags(p)
    p.add_argument("--layer", type=int, required=True, help="layer index, 0 = backmost")
    p.add_argument("--prompt-src", default=None, help="override the manifest source prompt")
    p.add_argument("--prompt-tgt", default=None, help="override the manifest target prompt")
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("edit-multi", help="edit several layers back-to-front")
    _add_edit_flags(p)
    p.add_argument("--layers", required=True, help="comma-separated layer indices")
    p.set_defaults(func=cmd_edit_multi)

    p = sub.add_parser("compose", help="flatten a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--background", choices=("gray", "backmost"), default="gray")
    p.add_argument("--out", required=True, help="output PNG")
    p.set_defaults(func=cmd_compose)

    p = sub.add_parser("inspect", help="print stacking order, coverage and prompts")
    p.add_argument("--scene", required=True)
    p.set_defaults(func=cmd_inspect)

    pb = sub.add_parser("bench", help="benchmark protocol tools")
    bsub = pb.add_subparsers(dest="bench_command", required=True)

    p = bsub.add_parser("gen", help="enumerate edit instances")
    p.add_argument("--scenes", required=True, help="directory of scene manifests")
    p.add_argument("--mode", choices=("single", "multi"), required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench_gen)

    p = bsub.add_parser("run", help="run instances and write a JSONL report")
    p.add_argument("--instances", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--no-timing", action="store_true", help="write wall-clock fields as null")
    p.add_argument("--rho", type=float, default=0.5)
    p.add_argument("--steps", type=int, default=28)
    p.add_argument("--cfg-src", type=float, default=1.5)
    p.add_argument("--cfg-tgt", type=float, default=5.5)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--model", choices=("toy", "analytic"), default="toy")
    p.add_argument("--patch-size", type=int, default=8)
    p.add_argument("--codec-seed", type=int, default=0)
    p.add_argument("--weights-seed", type=int, default=0)
    p.add_argument("--fixed-context-noise", action="store_true")
    p.set_defaults(func=cmd_bench_run)

    p = bsub.add_parser("synth", help="write random layered scenes")
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--layers", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--identity-prompts", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench_synth)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigError, LayerIndexError) as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ManifestParseError, MissingLayerFileError, ManifestDimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (LayerEditError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
