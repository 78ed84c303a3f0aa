import json
import math
import os
import subprocess
import sys
import threading
import time

import numpy as np
import pytest

from texbake import imageio, shapes
from texbake.cli import run
from texbake.geometry import generate_fallback_atlas, load_mesh, save_mesh


@pytest.fixture(scope="module")
def assets(tmp_path_factory):
    d = tmp_path_factory.mktemp("assets")
    gt = generate_fallback_atlas(shapes.icosphere(2), 128)
    save_mesh(gt, str(d / "gt.obj"))
    imageio.write_rgb(str(d / "gt.png"), shapes.bake_field_texture(gt, 128))
    save_mesh(shapes.icosphere(2), str(d / "plain.obj"))
    return d


def bake_args(d, out="T.png", report="rep.json", extra=()):
    return [
        "bake", "--mesh", str(d / "gt.obj"), "--out", str(d / out), "--report", str(d / report),
        "--source", f"oracle:{d / 'gt.obj'}:{d / 'gt.png'}", "--size", "48", "--hi", "128", "--steps", "10", *extra,
    ]


def test_help_and_unknown_flag(capsys):
    assert run(["--help"]) == 0
    assert run(["bake", "--bogus"]) == 2
    assert run([]) == 2


def test_decimate(assets, capsys):
    out = assets / "dec.obj"
    assert run(["decimate", "--in", str(assets / "plain.obj"), "--out", str(out), "--faces", "100", "--reatlas", "256"]) == 0
    m = load_mesh(str(out))
    assert m.n_faces <= 100 and m.bake_ready
    assert run(["decimate", "--in", str(assets / "missing.obj"), "--out", str(out), "--faces", "100"]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert err[-1].startswith("ERROR:") and "missing.obj" in err[-1]


def test_bake_eval_gapscan_render(assets, capsys):
    targets = assets / "targets"
    assert run(bake_args(assets, extra=["--targets-out", str(targets)])) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0].split("\t")[0] == "view"
    report = json.loads((assets / "rep.json").read_text())
    assert len(report["views"]) == 10 and report["n_gbuffers"] == 10
    assert report["config"]["keep_update_threshold"] == math.pi / 5
    assert report["cli"]["steps"] == 10
    for key in ("texture", "lo_texture", "update_magnitude", "mesh", "loss_figure"):
        assert os.path.exists(report["paths"][key])
    assert len(os.listdir(targets)) == 10

    assert run(["eval", "--report", str(assets / "rep.json"), "--against", str(targets)]) == 0
    rows = capsys.readouterr().out.strip().splitlines()
    assert rows[0].split("\t") == ["view", "descriptor", "psnr_update_db", "psnr_covered_db"]
    assert len(rows) == 11
    assert os.path.exists(assets / "rep_psnr.png")
    assert run(["eval", "--report", str(assets / "rep.json"), "--against", str(targets), "--threshold-db", "99"]) == 4

    assert run(["gapscan", "--report", str(assets / "rep.json"), "--out", str(assets / "gaps.png")]) == 0
    line = capsys.readouterr().out.strip().splitlines()[-1].split("\t")
    assert int(line[0]) == report["gaps"]["count"]
    assert imageio.read_mask(str(assets / "gaps.png")).sum() == report["gaps"]["count"]

    img = assets / "front.png"
    assert run(["render", "--mesh", report["paths"]["mesh"], "--texture", report["paths"]["texture"],
                "--view", "front", "--out", str(img), "--size", "48"]) == 0
    assert imageio.read_rgb(str(img)).shape == (48, 48, 3)
    assert run(["render", "--mesh", report["paths"]["mesh"], "--texture", report["paths"]["texture"],
                "--view", "sideways", "--out", str(img)]) == 1


def test_config_file_and_override(assets):
    cfg = assets / "bake.cfg"
    cfg.write_text(
        f"# test config\nmesh = {assets / 'gt.obj'}\nout = {assets / 'C.png'}\nreport = {assets / 'C.json'}\n"
        f"source = oracle:{assets / 'gt.obj'}:{assets / 'gt.png'}\nsize = 32\nhi = 128\nsteps = 7\n"
        "views = 2\nliteral-angle = true\nlambda_uv = 0.5\n"
    )
    assert run(["bake", "--config", str(cfg), "--steps", "3"]) == 0
    report = json.loads((assets / "C.json").read_text())
    assert report["config"]["steps_per_view"] == 3
    assert report["config"]["literal_angle"] is True
    assert report["config"]["uv_loss_weight"] == 0.5
    assert len(report["views"]) == 2
    bad = assets / "bad.cfg"
    bad.write_text("colour = red\n")
    assert run(["bake", "--config", str(bad)]) == 1


def test_bake_errors(assets, capsys):
    assert run(bake_args(assets, extra=["--lo", "100"])) == 1
    assert "does not divide" in capsys.readouterr().err
    args = bake_args(assets)
    args[args.index("--source") + 1] = "carrier-pigeon:x"
    assert run(args) == 1
    args[args.index("--source") + 1] = "remote:http://127.0.0.1:9"
    assert run(args + ["--timeout", "5"]) == 3
    assert "image source failed" in capsys.readouterr().err
    partial = json.loads((assets / "rep.json").read_text())
    assert partial["views"] == [] and "aborted" in partial


def test_bake_reatlases_plain_mesh(assets, capsys):
    args = bake_args(assets, out="P.png", report="P.json")
    args[args.index("--mesh") + 1] = str(assets / "plain.obj")
    args += ["--views", "1"]
    assert run(args) == 0
    assert "fallback atlas" in capsys.readouterr().err
    assert json.loads((assets / "P.json").read_text())["reatlased"] is True


def test_serve_mock_subprocess_bake(assets):
    port = 18000 + os.getpid() % 1000
    proc = subprocess.Popen(
        [sys.executable, "-m", "texbake", "serve-mock", "--mesh", str(assets / "gt.obj"),
         "--texture", str(assets / "gt.png"), "--port", str(port)],
        stdout=subprocess.PIPE, text=True,
    )
    try:
        assert proc.stdout.readline().startswith("serving")
        args = bake_args(assets, out="R.png", report="R.json")
        args[args.index("--source") + 1] = f"remote:http://127.0.0.1:{port}"
        assert run(args) == 0
    finally:
        proc.terminate()
        proc.wait(10)
    assert run(bake_args(assets, out="O.png", report="O.json")) == 0
    a = imageio.read_rgb(str(assets / "R.png"))
    b = imageio.read_rgb(str(assets / "O.png"))
    assert np.abs(a - b).max() <= 1 / 255
