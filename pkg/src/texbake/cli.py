"""Command-line front door: decimate, bake, render, eval, gapscan, serve-mock.

Every subcommand accepts ``--config FILE`` with ``key = value`` lines whose
keys are the long flag names (dashes or underscores); flags given on the
command line override the file.
"""

import argparse
import datetime
import json
import math
import os
import sys

import numpy as np

from texbake import __version__, imageio, plots
from texbake.decimation import decimate
from texbake.diagnostics import error, warn
from texbake.geometry import (
    MeshError,
    apply_transform,
    generate_fallback_atlas,
    load_mesh,
    normalization_transform,
    save_mesh,
)
from texbake.imagesource import (
    FileSource,
    ImageSourceError,
    OracleSource,
    RemoteSource,
    make_mock_server,
    view_filename,
)
from texbake.metrics import psnr
from texbake.raster import Camera, classify_keep_update, make_view_plan, rasterize, rasterize_uv_coverage
from texbake.texopt import BakeAborted, BakeConfig, Texture, atlas_for_bake, bake, render_view, scan_point_gaps


class CliError(Exception):
    """Failure reported as one line on stderr with a nonzero exit code."""

    def __init__(self, message, code=1):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------- config files


def read_config_file(path):
    values = {}
    try:
        with open(path, "r") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc.strerror}")
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.lstrip("-").replace("-", "_")] = value
    return values


def _parse_bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _apply_config(parser, values, path):
    """Turn config-file values into parser defaults, so flags still win."""
    actions = {}
    for a in parser._actions:
        for opt in a.option_strings:
            actions[opt.lstrip("-").replace("-", "_")] = a
    defaults = {}
    for name, raw in values.items():
        action = actions.get(name)
        if action is None or name in ("help", "config"):
            raise CliError(f"{path}: unknown key '{name}'")
        key = action.dest
        # a key supplied by the file no longer has to be given as a flag
        action.required = False
        try:
            if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
                defaults[key] = _parse_bool(raw)
            elif action.type is not None:
                defaults[key] = action.type(raw)
            else:
                defaults[key] = raw
        except ValueError as exc:
            raise CliError(f"{path}: bad value for '{key}': {exc}")
        if action.choices is not None and defaults[key] not in action.choices:
            raise CliError(f"{path}: '{key}' must be one of {sorted(action.choices)}")
    parser.set_defaults(**defaults)


# ------------------------------------------------------------------- helpers


def _load(path, what="mesh"):
    try:
        return load_mesh(path)
    except OSError as exc:
        raise CliError(f"cannot read {what} {path}: {exc.strerror}")
    except (MeshError, ValueError) as exc:
        raise CliError(f"invalid {what} {path}: {exc}")


def _read_png(path, what="image"):
    try:
        return imageio.read_rgb(path)
    except OSError as exc:
        raise CliError(f"cannot read {what} {path}: {exc}")


def _frame_transform(mesh, frame_path):
    """Normalization of ``mesh`` into the unit box of the frame mesh (itself by default)."""
    ref = _load(frame_path, "frame mesh") if frame_path else mesh
    try:
        center, scale = normalization_transform(ref)
    except MeshError as exc:
        raise CliError(str(exc))
    return center, scale


def _stem(path):
    return os.path.splitext(path)[0]


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True, allow_nan=True)
        fh.write("\n")


def _read_report(path):
    try:
        with open(path, "r") as fh:
            return json.load(fh)
    except OSError as exc:
        raise CliError(f"cannot read report {path}: {exc.strerror}")
    except ValueError as exc:
        raise CliError(f"report {path} is not valid JSON: {exc}")


def _report_path(report_path, rel):
    return rel if os.path.isabs(rel) else os.path.join(os.path.dirname(os.path.abspath(report_path)), rel)


def _make_source(spec, frame_center, frame_scale, timeout):
    kind, _, rest = spec.partition(":")
    if kind == "oracle":
        parts = rest.split(":")
        if len(parts) != 2 or not all(parts):
            raise CliError("--source oracle needs oracle:GT.obj:GT.png")
        gt = _load(parts[0], "ground-truth mesh")
        if not gt.bake_ready:
            raise CliError(f"ground-truth mesh {parts[0]} has no usable UVs")
        gt = apply_transform(gt, frame_center, frame_scale)
        return OracleSource(gt, Texture(_read_png(parts[1], "ground-truth texture")))
    if kind == "files" and rest:
        if not os.path.isdir(rest):
            raise CliError(f"target directory {rest} does not exist")
        return FileSource(rest)
    if kind == "remote" and rest:
        return RemoteSource(rest, timeout=timeout)
    raise CliError(f"unknown image source '{spec}'; use oracle:GT.obj:GT.png, files:DIR or remote:URL")


class _RecordingSource:
    """Wraps a source and writes every target image it returns to a directory."""

    def __init__(self, inner, directory):
        self.inner = inner
        self.directory = directory

    def generate(self, requests, params=None):
        images = self.inner.generate(requests, params)
        for r, img in zip(requests, images):
            imageio.write_rgb(os.path.join(self.directory, view_filename(r.descriptor, r.index)), img)
        return images


# --------------------------------------------------------------- subcommands


def cmd_decimate(args):
    mesh = _load(args.input)
    if args.faces < 4:
        raise CliError("--faces must be at least 4")
    out = decimate(mesh, args.faces, preserve_uv_seams=args.preserve_seams)
    if args.reatlas:
        try:
            out = generate_fallback_atlas(out, args.reatlas)
        except (MeshError, ValueError) as exc:
            raise CliError(str(exc))
    save_mesh(out, args.out)
    print(f"faces\t{mesh.n_faces}\t{out.n_faces}")
    return 0


def _bake_config(args):
    if args.lo is not None and args.hi % args.lo:
        raise CliError(f"inconsistent resolutions: --lo {args.lo} does not divide --hi {args.hi}")
    try:
        return BakeConfig(
            hi_resolution=args.hi,
            lo_resolution=args.lo,
            steps_per_view=args.steps,
            learning_rate=args.lr,
            uv_loss_weight=args.lambda_uv,
            keep_update_threshold=math.radians(args.threshold_deg),
            literal_angle=args.literal_angle,
            optimizer=args.optimizer,
            checkerboard_keep_blend=args.checkerboard,
            init_texture=args.init or "white",
            seed=args.seed,
            prompt=args.prompt,
            negative_prompt=args.negative_prompt,
            denoise_steps=args.denoise_steps,
            noise_strength=args.noise_strength,
        )
    except ValueError as exc:
        raise CliError(str(exc))


def cmd_bake(args):
    if not args.source:
        raise CliError("no image source; pass --source oracle:GT.obj:GT.png, files:DIR or remote:URL")
    if not 1 <= args.views <= 10:
        raise CliError("--views must lie in 1..10")
    config = _bake_config(args)
    if args.init and not os.path.isfile(args.init):
        raise CliError(f"cannot read init texture {args.init}")

    raw = _load(args.mesh)
    center, scale = _frame_transform(raw, args.frame)
    mesh = apply_transform(raw, center, scale)
    reatlased = args.reatlas or not mesh.bake_ready
    if reatlased:
        if not args.reatlas:
            warn(f"{args.mesh} has no usable UVs; generating a fallback atlas")
        try:
            mesh = atlas_for_bake(mesh, config)
        except MeshError as exc:
            raise CliError(str(exc))

    source = _make_source(args.source, center, scale, args.timeout)
    if args.targets_out:
        os.makedirs(args.targets_out, exist_ok=True)
        source = _RecordingSource(source, args.targets_out)
    plan = make_view_plan(args.size).subset(args.views)

    stem = _stem(args.out)
    paths = {
        "texture": os.path.abspath(args.out),
        "lo_texture": os.path.abspath(stem + "_lo.png"),
        "update_magnitude": os.path.abspath(stem + "_update.npy"),
        "mesh": os.path.abspath(stem + "_mesh.obj"),
        "loss_figure": os.path.abspath(_stem(args.report) + "_losses.png"),
    }
    try:
        T, report, t = bake(mesh, plan, source, config)
    except BakeAborted as exc:
        exc.report["cli"] = _effective(args)
        _write_json(args.report, exc.report)
        raise CliError(f"image source failed: {exc}", code=3)
    except ValueError as exc:
        raise CliError(str(exc))

    imageio.write_rgb(paths["texture"], T.data)
    imageio.write_rgb(paths["lo_texture"], t.data)
    np.save(paths["update_magnitude"], T.update_magnitude)
    # the used mesh goes back to input coordinates so --frame reproduces the bake pose
    save_mesh(apply_transform(mesh, -center * scale, 1.0 / scale), paths["mesh"])
    plots.loss_curves(report, paths["loss_figure"])

    report["cli"] = _effective(args)
    report["frame"] = {"mesh": args.frame or args.mesh, "center": list(map(float, center)), "scale": float(scale)}
    report["reatlased"] = bool(reatlased)
    report["paths"] = paths
    report["created"] = datetime.datetime.now(datetime.timezone.utc).isoformat()
    _write_json(args.report, report)
    print("view\tdescriptor\tupdate_px\tloss_hi\tloss_lo\tloss_uv")
    for v in report["views"]:
        print(f"{v['index']}\t{v['descriptor']}\t{v['n_update']}\t{v['loss_hi'][-1]:.6g}\t"
              f"{v['loss_lo'][-1]:.6g}\t{v['loss_uv'][-1]:.6g}")
    g = report["gaps"]
    print(f"gaps\t{g['count']}\t{g['coverage_texels']}\t{g['fraction']:.6f}")
    return 0


def _effective(args):
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config")}


def _baked_mesh(report, report_path):
    paths = report.get("paths") or {}
    if "mesh" not in paths:
        raise CliError("report lists no baked mesh")
    raw = _load(_report_path(report_path, paths["mesh"]))
    frame = report["frame"]
    return apply_transform(raw, np.array(frame["center"]), frame["scale"])


def cmd_render(args):
    raw = _load(args.mesh)
    if not raw.bake_ready:
        raise CliError(f"{args.mesh} has no usable UVs")
    center, scale = _frame_transform(raw, args.frame)
    mesh = apply_transform(raw, center, scale)
    texture = Texture(_read_png(args.texture, "texture"))
    plan = make_view_plan(args.size)
    names = [c.descriptor for c in plan.cameras]
    key = args.view.replace("_", " ")
    if key not in names:
        raise CliError(f"unknown view '{args.view}'; choose from {', '.join(n.replace(' ', '_') for n in names)}")
    gb = rasterize(mesh, plan.cameras[names.index(key)], texture)
    imageio.write_rgb(args.out, gb.color)
    return 0


def cmd_eval(args):
    report = _read_report(args.report)
    mesh = _baked_mesh(report, args.report)
    texture = Texture(_read_png(_report_path(args.report, report["paths"]["texture"]), "texture"))
    threshold = report["config"]["keep_update_threshold"]
    literal = report["config"]["literal_angle"]
    labels, values = [], []
    print("view\tdescriptor\tpsnr_update_db\tpsnr_covered_db")
    for v in report["views"]:
        cam = Camera.from_dict(v["camera"], v["descriptor"])
        path = os.path.join(args.against, view_filename(cam.descriptor, v["index"]))
        target = _read_png(path, "target")
        if target.shape[:2] != (cam.height, cam.width):
            raise CliError(f"{path} is {target.shape[1]}x{target.shape[0]}, expected {cam.width}x{cam.height}")
        gb = rasterize(mesh, cam)
        update = classify_keep_update(gb, threshold, literal)
        image = render_view(texture, gb)
        p_upd = psnr(image, target, update) if update.any() else float("nan")
        p_cov = psnr(image, target, gb.coverage) if gb.coverage.any() else float("nan")
        print(f"{v['index']}\t{cam.descriptor}\t{p_upd:.3f}\t{p_cov:.3f}")
        labels.append(cam.descriptor)
        values.append(p_upd)
    figure = args.figure or _stem(args.report) + "_psnr.png"
    plots.psnr_bars(labels, values, figure, threshold=args.threshold_db)
    if args.threshold_db is not None:
        worst = min(values) if values else float("nan")
        if not worst >= args.threshold_db:
            raise CliError(f"worst update-region PSNR {worst:.2f} dB is below {args.threshold_db} dB", code=4)
    return 0


def cmd_gapscan(args):
    report = _read_report(args.report)
    mesh = _baked_mesh(report, args.report)
    path = _report_path(args.report, report["paths"]["update_magnitude"])
    try:
        magnitude = np.load(path)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read {path}: {exc}")
    epsilon = args.epsilon if args.epsilon is not None else report["config"]["gap_epsilon"]
    coverage = rasterize_uv_coverage(mesh, magnitude.shape[0])
    count, gaps = scan_point_gaps(Texture(np.zeros(magnitude.shape + (3,)), magnitude), coverage, epsilon)
    imageio.write_mask(args.out, gaps)
    plots.gap_histogram(magnitude, coverage, _stem(args.out) + "_hist.png", epsilon)
    n = int(coverage.sum())
    print("gap_count\tcoverage_texels\tgap_fraction\tepsilon")
    print(f"{count}\t{n}\t{count / n if n else 0.0:.6f}\t{epsilon:g}")
    return 0


def cmd_serve_mock(args):
    raw = _load(args.mesh)
    if not raw.bake_ready:
        raise CliError(f"{args.mesh} has no usable UVs")
    center, scale = _frame_transform(raw, args.frame)
    gt = apply_transform(raw, center, scale)
    texture = Texture(_read_png(args.texture, "texture"))
    try:
        server = make_mock_server(gt, texture, args.port, args.host, spliced=args.spliced)
    except OSError as exc:
        raise CliError(f"cannot listen on {args.host}:{args.port}: {exc.strerror}")
    host, port = server.server_address[:2]
    print(f"serving http://{host}:{port}/v1/generate", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


# -------------------------------------------------------------------- parser


def build_parser():
    parser = argparse.ArgumentParser(prog="texbake", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"texbake {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key = value file; flags override it")
        p.set_defaults(func=func)
        return p

    p = add("decimate", cmd_decimate, "QEM edge-collapse simplification")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--faces", type=int, required=True)
    p.add_argument("--preserve-seams", action="store_true")
    p.add_argument("--reatlas", type=int, metavar="RES", help="assign a fallback atlas for this resolution")

    p = add("bake", cmd_bake, "bake a texture from multi-view targets")
    p.add_argument("--mesh", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--source", help="oracle:GT.obj:GT.png | files:DIR | remote:URL")
    p.add_argument("--init", help="rough initial texture PNG")
    p.add_argument("--views", type=int, default=10)
    p.add_argument("--size", type=int, default=1024, help="render width and height")
    p.add_argument("--hi", type=int, default=1024)
    p.add_argument("--lo", type=int, default=None, help="defaults to hi / 4")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--lambda-uv", type=float, default=1.0)
    p.add_argument("--threshold-deg", type=float, default=36.0)
    p.add_argument("--literal-angle", action="store_true")
    p.add_argument("--checkerboard", action="store_true")
    p.add_argument("--prompt", default="")
    p.add_argument("--negative-prompt", default="")
    p.add_argument("--denoise-steps", type=int, default=100)
    p.add_argument("--noise-strength", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frame", help="mesh whose unit-box normalization is applied (default: --mesh)")
    p.add_argument("--reatlas", action="store_true", help="replace the mesh UVs with a fallback atlas")
    p.add_argument("--targets-out", help="directory receiving every target image")
    p.add_argument("--timeout", type=float, default=600.0)

    p = add("render", cmd_render, "render one view of a textured mesh")
    p.add_argument("--mesh", required=True)
    p.add_argument("--texture", required=True)
    p.add_argument("--view", default="front")
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=1024)
    p.add_argument("--frame")

    p = add("eval", cmd_eval, "PSNR of a baked texture against target images")
    p.add_argument("--report", required=True)
    p.add_argument("--against", required=True, help="directory of target PNGs named after the views")
    p.add_argument("--figure", help="bar chart path (default: next to the report)")
    p.add_argument("--threshold-db", type=float, default=None, help="fail when any view falls below")

    p = add("gapscan", cmd_gapscan, "point-gap mask of a baked texture")
    p.add_argument("--report", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epsilon", type=float, default=None)

    p = add("serve-mock", cmd_serve_mock, "serve oracle renders over the generation protocol")
    p.add_argument("--mesh", required=True)
    p.add_argument("--texture", required=True)
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--frame")
    p.add_argument("--spliced", action="store_true", help="answer pairs with one side-by-side image")
    return parser


def run(argv=None):
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    try:
        if known.config:
            subparsers = parser._subparsers._group_actions[0].choices
            if known.command in subparsers:
                _apply_config(subparsers[known.command], read_config_file(known.config), known.config)
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:
            return int(exc.code or 0)
        return args.func(args)
    except CliError as exc:
        error(str(exc))
        return exc.code
    except ImageSourceError as exc:
        error(f"image source failed: {exc}")
        return 3


def main():
    sys.exit(run())
