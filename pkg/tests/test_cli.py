import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from layeredit import cli
from layeredit.errors import ManifestDimensionError, ManifestParseError, MissingLayerFileError
from layeredit.files import bytes_to_layer, layer_to_bytes, load_layer, load_scene, save_layer, save_scene
from layeredit.layers import LayeredScene, RgbaLayer, composite_scene
from layeredit.synth import make_scenes

from conftest import random_layer


def write_scene(tmp_path, rng, n=3, size=16, name="scene"):
    d = tmp_path / name
    d.mkdir()
    entries = []
    for k in range(n):
        arr = rng.integers(0, 256, (size, size, 4), dtype=np.uint8)
        if k == 0:
            arr[..., 3] = 255
        Image.fromarray(arr, "RGBA").save(d / f"l{k}.png")
        entries.append({"file": f"l{k}.png", "name": f"layer{k}", "prompt_src": f"src{k}", "prompt_tgt": f"tgt{k}"})
    (d / "manifest.json").write_text(json.dumps({"scene_id": name, "width": size, "height": size, "layers": entries}))
    return d / "manifest.json"


def snapshot(directory):
    return {p.name: p.read_bytes() for p in directory.rglob("*") if p.is_file()}


class TestPixelMapping:
    def test_load_endpoints(self):
        layer = bytes_to_layer(np.array([[[255, 0, 128, 128]]], dtype=np.uint8))
        assert layer.color[0, 0, 0] == 1.0 and layer.color[0, 0, 1] == -1.0
        assert layer.alpha[0, 0] == 128 / 255

    def test_save_endpoints_and_rounding(self):
        layer = RgbaLayer(np.array([[[1.0, -1.0, 0.0]]]), np.array([[0.5]]))
        assert list(layer_to_bytes(layer)[0, 0]) == [255, 0, 128, 128]

    def test_quantization_bound(self, rng, tmp_path):
        layer = random_layer(rng, 16, 16)
        save_layer(layer, tmp_path / "x.png")
        back = load_layer(tmp_path / "x.png")
        # one 8-bit step is 2/255 in [-1, 1] color; half a step after rounding
        assert np.abs(back.color - layer.color).max() * 127.5 <= 0.5 + 1e-9
        assert np.abs(back.alpha - layer.alpha).max() <= 1 / 255

    def test_byte_round_trip(self, rng, tmp_path):
        manifest = write_scene(tmp_path, rng)
        scene = load_scene(manifest)
        out = save_scene(scene, tmp_path / "copy")
        again = load_scene(out)
        for k in range(3):
            a = np.asarray(Image.open(manifest.parent / f"l{k}.png"))
            b = np.asarray(Image.open(out.parent / f"layer_{k}.png"))
            assert np.array_equal(a, b)
            assert again.layers[k].equals(scene.layers[k])
        assert again.prompts == scene.prompts


class TestManifest:
    def test_order_and_prompts(self, rng, tmp_path):
        scene = load_scene(write_scene(tmp_path, rng))
        assert [l.name for l in scene.layers] == ["layer0", "layer1", "layer2"]
        assert scene.prompts[1] == ("src1", "tgt1")
        assert scene.scene_id == "scene"

    def test_directory_path(self, rng, tmp_path):
        assert len(load_scene(write_scene(tmp_path, rng).parent)) == 3

    def test_parse_error_has_line(self, tmp_path):
        p = tmp_path / "m.json"
        p.write_text('{\n  "width": 4,\n  "height": 4\n  "layers": []\n}')
        with pytest.raises(ManifestParseError) as info:
            load_scene(p)
        assert info.value.line == 4

    def test_missing_field(self, tmp_path):
        p = tmp_path / "m.json"
        p.write_text('{"width": 4, "layers": [{"file": "a.png"}]}')
        with pytest.raises(ManifestParseError) as info:
            load_scene(p)
        assert info.value.field == "height"

    def test_missing_file(self, rng, tmp_path):
        manifest = write_scene(tmp_path, rng)
        (manifest.parent / "l1.png").unlink()
        with pytest.raises(MissingLayerFileError):
            load_scene(manifest)

    def test_dimension_mismatch(self, rng, tmp_path):
        manifest = write_scene(tmp_path, rng)
        data = json.loads(manifest.read_text())
        data["width"] = 8
        manifest.write_text(json.dumps(data))
        with pytest.raises(ManifestDimensionError):
            load_scene(manifest)


class TestCommands:
    def test_edit_defaults(self, rng, tmp_path, capsys):
        manifest = write_scene(tmp_path, rng)
        before = snapshot(manifest.parent)
        code = cli.main(["edit", "--scene", str(manifest), "--layer", "1", "--out", str(tmp_path / "out")])
        assert code == 0
        run = json.loads((tmp_path / "out" / "config.json").read_text())
        assert run["steps_bi_stream"] == 14 and run["steps_target_only"] == 14
        assert run["config"]["steps"] == 28 and run["config"]["switch_step"] == 14
        assert run["config"]["cfg_src"] == 1.5 and run["config"]["cfg_tgt"] == 5.5
        assert "switch after step 14" in capsys.readouterr().out
        edited = load_scene(tmp_path / "out" / "scene")
        original = load_scene(manifest)
        assert edited.layers[0].equals(original.layers[0])
        assert edited.layers[2].equals(original.layers[2])
        assert snapshot(manifest.parent) == before

    def test_edit_is_reproducible(self, rng, tmp_path):
        manifest = write_scene(tmp_path, rng)
        for name in ("a", "b"):
            cli.main(["edit", "--scene", str(manifest), "--layer", "2", "--steps", "4", "--out", str(tmp_path / name)])
        assert snapshot(tmp_path / "a") == snapshot(tmp_path / "b")

    def test_seed_env_fallback(self, rng, tmp_path, monkeypatch):
        manifest = write_scene(tmp_path, rng)
        monkeypatch.setenv("LIMECROSS_SEED", "42")
        cli.main(["edit", "--scene", str(manifest), "--layer", "0", "--steps", "2", "--out", str(tmp_path / "o")])
        assert json.loads((tmp_path / "o" / "config.json").read_text())["config"]["seed"] == 42

    def test_edit_multi_reorders(self, rng, tmp_path, capsys):
        manifest = write_scene(tmp_path, rng)
        code = cli.main(
            ["edit-multi", "--scene", str(manifest), "--layers", "2,0", "--steps", "2", "--out", str(tmp_path / "o")]
        )
        assert code == 0
        assert "edit order (back-to-front): 0,2" in capsys.readouterr().out
        assert (tmp_path / "o" / "edited_layer_0.png").exists()
        assert (tmp_path / "o" / "edited_layer_2.png").exists()
        edited = load_scene(tmp_path / "o" / "scene")
        assert edited.layers[1].equals(load_scene(manifest).layers[1])

    def test_compose_matches_library(self, rng, tmp_path):
        manifest = write_scene(tmp_path, rng)
        out = tmp_path / "flat.png"
        assert cli.main(["compose", "--scene", str(manifest), "--out", str(out)]) == 0
        expected = composite_scene(load_scene(manifest), 0.0).color
        expected = np.floor((expected + 1.0) * 127.5 + 0.5).clip(0, 255).astype(np.uint8)
        assert np.array_equal(np.asarray(Image.open(out)), expected)

    def test_compose_backmost(self, rng, tmp_path):
        manifest = write_scene(tmp_path, rng)
        out = tmp_path / "flat.png"
        assert cli.main(["compose", "--scene", str(manifest), "--background", "backmost", "--out", str(out)]) == 0
        assert np.asarray(Image.open(out)).shape == (16, 16, 3)

    def test_inspect(self, rng, tmp_path, capsys):
        manifest = write_scene(tmp_path, rng)
        assert cli.main(["inspect", "--scene", str(manifest)]) == 0
        text = capsys.readouterr().out
        assert "[0] layer0" in text and "'src2' -> 'tgt2'" in text

    def test_bench_pipeline(self, tmp_path):
        scenes = tmp_path / "scenes"
        assert cli.main(["bench", "synth", "--count", "2", "--size", "8", "--out", str(scenes)]) == 0
        inst = tmp_path / "inst.jsonl"
        assert cli.main(["bench", "gen", "--scenes", str(scenes), "--mode", "multi", "--out", str(inst)]) == 0
        assert len(inst.read_text().splitlines()) == 8
        report = tmp_path / "report.jsonl"
        code = cli.main(
            ["bench", "run", "--instances", str(inst), "--out", str(report), "--steps", "2", "--patch-size", "2"]
        )
        assert code == 0
        lines = [json.loads(l) for l in report.read_text().splitlines()]
        assert lines[0]["record"] == "header" and lines[-1]["record"] == "summary"
        assert all(r["status"] == "ok" for r in lines[1:-1])

    @pytest.mark.parametrize(
        "argv,code",
        [
            (["edit", "--layer", "0", "--rho", "1.5"], cli.EXIT_CONFIG),
            (["edit", "--layer", "7"], cli.EXIT_CONFIG),
            (["edit-multi", "--layers", "1,x"], cli.EXIT_CONFIG),
            (["edit-multi", "--layers", "1,1"], cli.EXIT_CONFIG),
        ],
    )
    def test_invalid_ranges(self, rng, tmp_path, capsys, argv, code):
        manifest = write_scene(tmp_path, rng)
        assert cli.main(argv + ["--scene", str(manifest), "--out", str(tmp_path / "o")]) == code
        assert "usage:" in capsys.readouterr().err

    def test_missing_manifest(self, tmp_path):
        code = cli.main(["inspect", "--scene", str(tmp_path / "nope.json")])
        assert code == cli.EXIT_INPUT

    def test_unknown_flag(self):
        with pytest.raises(SystemExit) as info:
            cli.main(["compose", "--bogus"])
        assert info.value.code == cli.EXIT_USAGE

    def test_module_entry_point(self, rng, tmp_path):
        manifest = write_scene(tmp_path, rng)
        proc = subprocess.run(
            [sys.executable, "-m", "layeredit", "inspect", "--scene", str(manifest)],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 0
        assert "3 layers" in proc.stdout
