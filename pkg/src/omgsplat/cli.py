"""``omg`` command line: generate, render, fit, gradcheck, compare.

Exit codes: 0 success, 1 failure (failed check, I/O or numeric error),
2 usage error. Every command starts its standard output with a versioned
header line and follows it with ``key: value`` summary lines.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import __version__
from .compositing import OpacityMode
from .errors import DivergenceError, InvalidInputError, OmgError
from .grad import TERMS, attribute_failure, finite_difference_check, summarize, test_hooks_enabled
from .images import write_image
from .metrics import albedo_mse, psnr, ssim
from .optim import FitConfig, fit
from .render import OUTPUT_KINDS, RenderRequest, render
from .scene import SceneSpec, default_camera, generate_synthetic_scene, load_scene, save_scene
from .views import View, load_views, save_views

HEADER = f"omgsplat-cli {__version__}"


class UsageError(Exception):
    """Bad flag values; maps to exit code 2."""


def _emit(command: str, summary: dict) -> None:
    print(f"{HEADER} {command}")
    for key, value in summary.items():
        print(f"{key}: {value}")


def _out_file(path: str) -> str:
    """Create the parent directory of an output file."""
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    return path


def _mode(text: str) -> OpacityMode:
    try:
        return OpacityMode(text)
    except ValueError:
        raise UsageError(f"unknown mode {text!r} (choose baseline or omg)") from None


# ---------------------------------------------------------------------------
# generate

_SPEC_FLAGS = {"count": "count", "seed": "seed", "width": "width", "height": "height",
               "n_views": "n_views", "extent": "extent", "lights": "n_lights", "fov": "fov_deg",
               "ring_radius": "ring_radius"}


def _load_spec(args) -> SceneSpec:
    values = {}
    if args.spec:
        try:
            with open(args.spec) as f:
                values = json.load(f)
        except json.JSONDecodeError as exc:
            raise UsageError(f"bad spec file {args.spec}: {exc}") from None
        known = {f.name for f in dataclasses.fields(SceneSpec)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise UsageError(f"unknown spec field {unknown[0]!r}")
    for flag, name in _SPEC_FLAGS.items():
        value = getattr(args, flag)
        if value is not None:
            values[name] = value
    for key in ("albedo_range", "roughness_range", "metallic_range"):
        if key in values:
            values[key] = tuple(values[key])
    spec = SceneSpec(**values)
    try:
        spec.validate()
    except InvalidInputError as exc:
        raise UsageError(f"bad spec: {exc}") from None
    return spec


def cmd_generate(args) -> int:
    spec = _load_spec(args)
    mode = _mode(args.mode)
    scene, cameras = generate_synthetic_scene(spec)
    views = []
    for cam in cameras:
        out = render(RenderRequest(scene, cam, mode, outputs=("color", "albedo_map")))
        views.append(View(cam, out["color"], out["albedo_map"]))
    save_scene(_out_file(args.out_scene), scene)
    written = [args.out_scene] + save_views(args.out_views, views, mode.value)
    _emit("generate", {"gaussians": spec.count, "views": len(views), "mode": mode.value,
                       "seed": spec.seed, "artifacts": len(written)})
    return 0


# ---------------------------------------------------------------------------
# render


def _camera(args, scene):
    if args.views:
        views = load_views(args.views, images=False)
        if not 0 <= args.camera_index < len(views):
            raise UsageError(f"camera index {args.camera_index} out of range (0..{len(views) - 1})")
        return views[args.camera_index].camera
    return default_camera(scene, args.width, args.height)


def cmd_render(args) -> int:
    outputs = tuple(k.strip() for k in args.outputs.split(",") if k.strip())
    unknown = [k for k in outputs if k not in OUTPUT_KINDS]
    if unknown or not outputs:
        raise UsageError(f"unknown output kind {unknown[0]!r}" if unknown else "no outputs requested")
    mode = _mode(args.mode)
    scene = load_scene(args.scene)
    cam = _camera(args, scene)
    result = render(RenderRequest(scene, cam, mode, outputs=outputs, tile_size=args.tile_size))
    os.makedirs(args.out, exist_ok=True)
    summary = {"mode": mode.value, "width": cam.width, "height": cam.height}
    for kind in outputs:
        for ext in ("pfm", "png"):
            write_image(os.path.join(args.out, f"{kind}.{ext}"), result[kind])
        data = result[kind].data
        summary[kind] = f"min={float(data.min())!r} max={float(data.max())!r} mean={float(data.mean())!r}"
    _emit("render", summary)
    return 0


# ---------------------------------------------------------------------------
# fit


def cmd_fit(args) -> int:
    mode = _mode(args.mode)
    if args.iters < 0:
        raise UsageError("--iters must be >= 0")
    scene = load_scene(args.scene_init)
    views = load_views(args.views)
    missing = [k for k, v in enumerate(views) if v.image is None]
    if missing:
        raise InvalidInputError(f"view {missing[0]} has no image")
    if args.reset_materials is not None:
        scene.albedo[:] = args.reset_materials
        scene.roughness[:] = args.reset_materials
        scene.metallic[:] = args.reset_materials
    if args.opacity_noise:
        scene.raw_opacity += np.random.default_rng(args.seed).normal(0.0, args.opacity_noise, len(scene))
    held_idx = set(range(0, len(views), args.holdout_every)) if args.holdout_every else set()
    train = [(v.camera, v.image) for k, v in enumerate(views) if k not in held_idx]
    held = [(v.camera, v.image) for k, v in enumerate(views) if k in held_idx]
    try:
        config = FitConfig(args.iters, mode, args.lr_opacity, args.lr_material, args.lr_network,
                           args.seed, args.views_per_step, args.log_interval)
    except InvalidInputError as exc:
        raise UsageError(str(exc)) from None
    fitted, _, history = fit(scene, train, config, held or None)
    save_scene(_out_file(args.out_scene), fitted)
    if args.out_history:
        with open(_out_file(args.out_history), "w") as f:
            f.write(history.to_text())
    last = history[-1]
    summary = {"mode": mode.value, "iterations": args.iters, "train_views": len(train),
               "initial_train_psnr": f"{history[0].psnr:.4f}", "final_train_loss": repr(last.loss),
               "final_train_psnr": f"{last.psnr:.4f}"}
    if last.heldout_psnr is not None:
        summary["final_heldout_psnr"] = f"{last.heldout_psnr:.4f}"
    _emit("fit", summary)
    return 0


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args) -> int:
    mode = _mode(args.mode)
    if args.corrupt_term is not None and not test_hooks_enabled():
        raise UsageError("--corrupt-term is a test hook; set OMG_TEST_HOOKS=1 to use it")
    if not 1e-7 <= args.eps <= 1e-3:
        raise UsageError("--eps must lie in [1e-7, 1e-3]")
    scene = load_scene(args.scene)
    cam = _camera(args, scene)
    target = np.random.default_rng(args.seed).uniform(0.0, 1.0, (cam.height, cam.width, 3))
    reports = finite_difference_check(scene, cam, mode, None, target, eps=args.eps, tol=args.tol,
                                      seed=args.seed, network_samples=args.network_samples,
                                      geometry=args.geometry, corrupt=args.corrupt_term,
                                      with_terms=args.corrupt_term is not None)
    stats = summarize(reports)
    isolated = attribute_failure(reports) if args.corrupt_term is not None else None
    if args.report:
        with open(_out_file(args.report), "w") as f:
            f.write(f"# {HEADER} gradcheck mode={mode.value} eps={args.eps!r} tol={args.tol!r} seed={args.seed}\n")
            for r in reports:
                f.write(r.to_line() + "\n")
            f.write(" ".join(f"{k}={v!r}" for k, v in stats.items()) + "\n")
            if isolated is not None:
                f.write(f"isolated_term={isolated}\n")
    summary = {"mode": mode.value, **stats, "pass_rate": f"{1.0 - stats['failed'] / max(stats['parameters'], 1):.4f}"}
    if args.corrupt_term is not None:
        summary["isolated_term"] = isolated
    _emit("gradcheck", summary)
    return 0 if stats["failed"] == 0 else 1


# ---------------------------------------------------------------------------
# compare


def cmd_compare(args) -> int:
    modes = (_mode(args.mode_a), _mode(args.mode_b))
    scenes = (load_scene(args.scene_a), load_scene(args.scene_b))
    views = load_views(args.views)
    rows = ["view\tscene\tpsnr\tssim\talbedo_mse"]
    means = {}
    for label, scene, mode in zip(("a", "b"), scenes, modes):
        ps, ss, am = [], [], []
        for k, view in enumerate(views):
            if view.image is None:
                raise InvalidInputError(f"view {k} has no image")
            out = render(RenderRequest(scene, view.camera, mode, outputs=("color", "albedo_map")))
            if out["color"].data.shape != view.image.data.shape:
                raise InvalidInputError(f"view {k}: camera does not match its image")
            p, s = psnr(out["color"], view.image), ssim(out["color"], view.image)
            a = albedo_mse(out["albedo_map"], view.albedo) if view.albedo is not None else float("nan")
            ps.append(p), ss.append(s), am.append(a)
            rows.append(f"{k}\t{label}\t{p!r}\t{s!r}\t{a!r}")
        means[label] = (float(np.mean(ps)), float(np.mean(ss)), float(np.mean(am)))
        rows.append(f"mean\t{label}\t{means[label][0]!r}\t{means[label][1]!r}\t{means[label][2]!r}")
    with open(_out_file(args.out), "w") as f:
        f.write(f"# {HEADER} compare a={args.scene_a} ({modes[0].value}) b={args.scene_b} ({modes[1].value})\n")
        f.write("\n".join(rows) + "\n")
    summary = {"views": len(views)}
    for label in ("a", "b"):
        p, s, a = means[label]
        summary[f"mean_psnr_{label}"] = f"{p:.4f}"
        summary[f"mean_ssim_{label}"] = f"{s:.6f}"
        summary[f"mean_albedo_mse_{label}"] = repr(a)
    _emit("compare", summary)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="omg", description="Beer-Lambert Gaussian splatting toolkit")
    p.add_argument("--version", action="version", version=HEADER)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="synthesize a scene and its ground-truth views")
    g.add_argument("--spec", help="JSON file with scene spec fields; flags override it")
    g.add_argument("--count", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--width", type=int)
    g.add_argument("--height", type=int)
    g.add_argument("--n-views", dest="n_views", type=int)
    g.add_argument("--extent", type=float)
    g.add_argument("--lights", type=int)
    g.add_argument("--fov", type=float)
    g.add_argument("--ring-radius", dest="ring_radius", type=float)
    g.add_argument("--mode", default="omg")
    g.add_argument("--out-scene", required=True)
    g.add_argument("--out-views", required=True)
    g.set_defaults(func=cmd_generate)

    def camera_flags(q):
        q.add_argument("--views", help="views directory whose cameras to use")
        q.add_argument("--camera-index", type=int, default=0)
        q.add_argument("--width", type=int, default=32, help="image width when --views is not given")
        q.add_argument("--height", type=int, default=32, help="image height when --views is not given")

    r = sub.add_parser("render", help="render color and auxiliary maps")
    r.add_argument("--scene", required=True)
    camera_flags(r)
    r.add_argument("--mode", default="omg")
    r.add_argument("--outputs", default="color", help=f"comma list of {', '.join(OUTPUT_KINDS)}")
    r.add_argument("--tile-size", type=int, default=16)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    f = sub.add_parser("fit", help="fit opacity, materials and the network to a views directory")
    f.add_argument("--scene-init", required=True)
    f.add_argument("--views", required=True)
    f.add_argument("--mode", default="omg")
    f.add_argument("--iters", type=int, default=2000)
    f.add_argument("--lr-opacity", type=float, default=0.05)
    f.add_argument("--lr-material", type=float, default=0.01)
    f.add_argument("--lr-network", type=float, default=1e-3)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--views-per-step", type=int, default=1)
    f.add_argument("--log-interval", type=int, default=100)
    f.add_argument("--holdout-every", type=int, default=0, help="hold out every k-th view (0: none)")
    f.add_argument("--reset-materials", type=float, help="set every material channel to this value first")
    f.add_argument("--opacity-noise", type=float, default=0.0, help="std of seeded noise added to raw opacity")
    f.add_argument("--out-scene", required=True)
    f.add_argument("--out-history")
    f.set_defaults(func=cmd_fit)

    c = sub.add_parser("gradcheck", help="compare analytic gradients with central differences")
    c.add_argument("--scene", required=True)
    camera_flags(c)
    c.add_argument("--mode", default="omg")
    c.add_argument("--eps", type=float, default=1e-5)
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--network-samples", type=int, default=32)
    c.add_argument("--geometry", action="store_true", help="also check means, scales, rotations, normals")
    c.add_argument("--report")
    c.add_argument("--corrupt-term", choices=TERMS, help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_gradcheck)

    m = sub.add_parser("compare", help="PSNR / SSIM / albedo error of two scenes against a views directory")
    m.add_argument("--scene-a", required=True)
    m.add_argument("--scene-b", required=True)
    m.add_argument("--mode-a", default="omg")
    m.add_argument("--mode-b", default="omg")
    m.add_argument("--views", required=True)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"omg {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OmgError, OSError, ValueError, DivergenceError) as exc:
        print(f"omg {args.command}: error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())
