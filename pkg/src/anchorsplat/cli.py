"""Command-line entry point.

Settings resolve in this order, later winning: built-in default, ``--config`` file
(flat ``key = value`` lines, ``#`` comments), environment variable
``ANCHORSPLAT_<KEY>`` (upper case, dashes as underscores), command-line flag.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import difflib
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from .dropout import DEFAULT_MILESTONES, DropoutConfig, format_milestones, parse_milestones
from .errors import InvalidParameterError
from .gscore import MAX_SH_DEGREE
from .metrics import PSNR_SENTINEL, image_metrics

ENV_PREFIX = "ANCHORSPLAT_"
EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

_D = DropoutConfig()

# per-subcommand defaults; argparse itself defaults every option to None so that
# file/env/flag layering can tell "not given" apart from "given the default"
DEFAULTS = {
    "global": {"seed": 0, "threads": None, "log_level": "warning"},
    "train": {
        "data": None,
        "out": None,
        "iters": 10000,
        "views": None,
        "pa_max": _D.pa_max,
        "knn_k": _D.k,
        "psh": _D.p_sh,
        "lmax_schedule": format_milestones(DEFAULT_MILESTONES[1:]),
        "lambda_ssim": 0.2,
        "loss_form": "additive",
        "no_anchor_dropout": False,
        "no_sh_dropout": False,
        "sh_random_baseline": False,
        "n_init": 20000,
        "init_jitter": 0.01,
        "eval_every": 1000,
        "prune_interval": 500,
        "prune_threshold": 0.005,
        "knn_rebuild_every": 1,
        "background": "0,0,0",
    },
    "render": {
        "model": None,
        "data": None,
        "camera_index": None,
        "pose": None,
        "out": None,
        "sh_degree": None,
        "background": "0,0,0",
    },
    "eval": {
        "model": None,
        "data": None,
        "split": "test",
        "views": None,
        "sh_degree": None,
        "out": None,
        "background": "0,0,0",
    },
    "truncate-sh": {"model": None, "degree": 0, "out": None},
    "analyze": {
        "model": None,
        "mode": None,
        "data": None,
        "out": None,
        "n_bins": 8,
        "bin_min": 1e-3,
        "bins": None,
        "camera_index": 0,
        "drop_count": None,
        "knn_k": _D.k,
        "seeds": 10,
        "background": "0,0,0",
    },
    "synth": {
        "scene": "checker-room",
        "views_train": 3,
        "views_test": 8,
        "res": 64,
        "out": None,
        "n_points": 50000,
    },
}
REQUIRED = {
    "train": ("data", "out"),
    "render": ("model", "out"),
    "eval": ("model", "data"),
    "truncate-sh": ("model", "out"),
    "analyze": ("model", "mode", "out"),
    "synth": ("out",),
}


class UsageError(Exception):
    pass


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _rgb(text) -> tuple[float, float, float]:
    parts = [float(x) for x in str(text).split(",")]
    if len(parts) != 3:
        raise ValueError(f"expected r,g,b, got {text!r}")
    return tuple(parts)


def _flag(p, name, type_, help_, default_key=None, sub=None, **kw):
    key = default_key or name.lstrip("-").replace("-", "_")
    default = DEFAULTS[sub][key] if sub else None
    suffix = f" (default: {default})" if default is not None else ""
    p.add_argument(name, type=type_, default=None, help=help_ + suffix, **kw)


def _switch(p, name, help_):
    p.add_argument(name, action="store_const", const=True, default=None, help=help_)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="anchorsplat",
        description="Sparse-view Gaussian splatting with structured dropout.",
        epilog=f"Settings precedence: defaults < --config file < {ENV_PREFIX}* env vars < flags.",
    )
    parser.add_argument("--seed", type=int, default=None, help="RNG seed (default: 0)")
    parser.add_argument(
        "--threads", type=int, default=None,
        help="numba worker threads (default: available parallelism; 1 gives serial reductions)",
    )
    parser.add_argument("--config", type=Path, default=None, help="flat key = value settings file")
    parser.add_argument(
        "--log-level", default=None, choices=["debug", "info", "warning", "error"],
        help="logging verbosity (default: warning)",
    )
    subs = parser.add_subparsers(dest="command", metavar="COMMAND")

    t = subs.add_parser("train", help="train a model on a dataset directory")
    f = lambda *a, **k: _flag(t, *a, sub="train", **k)  # noqa: E731
    f("--data", Path, "dataset directory with transforms_train.json")
    f("--out", Path, "output directory")
    f("--iters", int, "training iterations")
    f("--views", int, "number of evenly spaced training views (default: all)")
    f("--pa-max", float, "final anchor sampling probability")
    f("--knn-k", int, "neighbours dropped with each anchor")
    f("--psh", float, "fraction of Gaussians whose SH is truncated per iteration")
    f("--lmax-schedule", str, "SH truncation milestones 'iter:lmax,...'")
    f("--lambda-ssim", float, "weight of the (1 - SSIM) term")
    f("--loss-form", str, "'additive' L1 + l(1-SSIM) or 'convex' (1-l)L1 + l(1-SSIM)",
      choices=["additive", "convex"])
    _switch(t, "--no-anchor-dropout", "disable anchor-based dropout")
    _switch(t, "--no-sh-dropout", "disable SH degree dropout")
    _switch(t, "--sh-random-baseline", "drop individual SH coefficients at a matched rate instead")
    f("--n-init", int, "initial number of Gaussians")
    f("--init-jitter", float, "init position jitter, fraction of scene extent")
    f("--eval-every", int, "iterations between held-out evaluations")
    f("--prune-interval", int, "iterations between opacity pruning passes")
    f("--prune-threshold", float, "opacity below which Gaussians are pruned")
    f("--knn-rebuild-every", int, "iterations between kNN index rebuilds")
    f("--background", str, "background colour r,g,b")

    r = subs.add_parser("render", help="render a model to PNG")
    f = lambda *a, **k: _flag(r, *a, sub="render", **k)  # noqa: E731
    f("--model", Path, "model PLY")
    f("--data", Path, "dataset directory supplying cameras")
    f("--camera-index", int, "frame index (training file frames first, then test frames)")
    f("--pose", Path, "JSON frame record with transform_matrix, w, h and fl_x or camera_angle_x")
    f("--out", Path, "output PNG")
    f("--sh-degree", int, "inference-time SH truncation degree (default: model degree)")
    f("--background", str, "background colour r,g,b")

    e = subs.add_parser("eval", help="PSNR/SSIM/MAE of a model over a dataset split")
    f = lambda *a, **k: _flag(e, *a, sub="eval", **k)  # noqa: E731
    f("--model", Path, "model PLY")
    f("--data", Path, "dataset directory")
    f("--split", str, "which frames to evaluate", choices=["train", "test"])
    f("--views", int, "number of training views selected (for --split train)")
    f("--sh-degree", int, "inference-time SH truncation degree (default: model degree)")
    f("--out", Path, "also write the metrics JSON here")
    f("--background", str, "background colour r,g,b")

    c = subs.add_parser("truncate-sh", help="drop SH coefficients above a degree from a PLY")
    f = lambda *a, **k: _flag(c, *a, sub="truncate-sh", **k)  # noqa: E731
    f("--model", Path, "input PLY")
    f("--degree", int, "highest SH degree kept")
    f("--out", Path, "output PLY")

    a = subs.add_parser("analyze", help="spatial statistics of a trained model")
    f = lambda *a_, **k: _flag(a, *a_, sub="analyze", **k)  # noqa: E731
    f("--model", Path, "model PLY")
    f("--mode", str, "analysis to run", choices=["morans", "compensation"])
    f("--data", Path, "dataset directory (scene extent for bins; camera for compensation)")
    f("--out", Path, "output CSV")
    f("--n-bins", int, "number of log-spaced distance bins")
    f("--bin-min", float, "inner edge of the first distance bin")
    f("--bins", str, "explicit comma-separated bin edges (overrides --n-bins/--bin-min)")
    f("--camera-index", int, "frame used by the compensation study")
    f("--drop-count", int, "Gaussians dropped per strategy (default: N/20)")
    f("--knn-k", int, "neighbours per anchor in the clustered strategy")
    f("--seeds", int, "number of seeds in the compensation study")
    f("--background", str, "background colour r,g,b")

    s = subs.add_parser("synth", help="generate a synthetic NeRF-style dataset")
    f = lambda *a, **k: _flag(s, *a, sub="synth", **k)  # noqa: E731
    f("--scene", str, "scene name")
    f("--views-train", int, "training views on the camera arc")
    f("--views-test", int, "test views interleaved on the arc")
    f("--res", int, "image width and height in pixels")
    f("--out", Path, "output directory")
    f("--n-points", int, "surface samples written to points3d.ply")
    return parser


def _converters(parser: argparse.ArgumentParser, command: str) -> dict:
    """Map of setting name -> string converter for the global options and ``command``."""
    out = {}

    def collect(p):
        for action in p._actions:
            if not action.option_strings or action.dest in ("help", "config"):
                continue
            if isinstance(action, argparse._StoreConstAction):
                out[action.dest] = _bool
            else:
                conv = action.type or str
                if action.choices:
                    choices = action.choices

                    def conv(text, _c=conv, _choices=choices):
                        value = _c(text)
                        if value not in _choices:
                            raise ValueError(f"{value!r} not in {sorted(_choices)}")
                        return value

                out[action.dest] = conv

    collect(parser)
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            collect(action.choices[command])
    return out


def read_config_file(path: Path, converters: dict) -> dict:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from None
    values = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (x.strip() for x in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in converters:
            close = difflib.get_close_matches(key, list(converters), n=1)
            hint = f"; did you mean '{close[0]}'?" if close else ""
            raise UsageError(f"{path}:{lineno}: unknown key '{key}'{hint}")
        try:
            values[key] = converters[key](value)
        except ValueError as exc:
            raise UsageError(f"{path}:{lineno}: bad value for '{key}': {exc}") from None
    return values


def resolve_settings(ns: argparse.Namespace, parser, environ=None) -> dict:
    """Layer defaults, config file, environment and flags into one settings dict."""
    environ = os.environ if environ is None else environ
    converters = _converters(parser, ns.command)
    settings = {**DEFAULTS["global"], **DEFAULTS[ns.command]}
    if ns.config is not None:
        settings.update(read_config_file(ns.config, converters))
    for key, conv in converters.items():
        env_key = ENV_PREFIX + key.upper()
        if env_key in environ:
            try:
                settings[key] = conv(environ[env_key])
            except ValueError as exc:
                raise UsageError(f"bad value in {env_key}: {exc}") from None
    for key in converters:
        value = getattr(ns, key, None)
        if value is not None:
            settings[key] = value
    missing = [k for k in REQUIRED[ns.command] if settings.get(k) is None]
    if missing:
        raise UsageError("missing required setting(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))
    return settings


def _background(settings) -> tuple[float, float, float]:
    try:
        return _rgb(settings["background"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _json_safe(metrics: dict) -> dict:
    return {k: (PSNR_SENTINEL if isinstance(v, float) and math.isinf(v) else v) for k, v in metrics.items()}


def train_config_from_settings(settings: dict):
    from .train import TrainConfig

    try:
        dropout = DropoutConfig(
            pa_max=settings["pa_max"],
            k=settings["knn_k"],
            p_sh=settings["psh"],
            lmax_milestones=parse_milestones(settings["lmax_schedule"]),
            total_iters=settings["iters"],
            rng_seed=settings["seed"],
            anchor_dropout_on=not settings["no_anchor_dropout"],
            sh_dropout_on=not settings["no_sh_dropout"],
            sh_random_baseline=settings["sh_random_baseline"],
            knn_rebuild_every=settings["knn_rebuild_every"],
        )
        return TrainConfig(
            dropout=dropout,
            iterations=settings["iters"],
            lambda_ssim=settings["lambda_ssim"],
            loss_form=settings["loss_form"],
            prune_interval=settings["prune_interval"],
            prune_opacity_threshold=settings["prune_threshold"],
            background=_background(settings),
            eval_every=settings["eval_every"],
            n_init=settings["n_init"],
            init_jitter=settings["init_jitter"],
            seed=settings["seed"],
        )
    except InvalidParameterError as exc:
        raise UsageError(str(exc)) from None


def cmd_train(settings: dict) -> int:
    from .io import load_dataset
    from .train import train

    config = train_config_from_settings(settings)
    dataset = load_dataset(settings["data"], settings["views"])
    result = train(dataset, config, out_dir=settings["out"])
    print(json.dumps(_json_safe(result.summary["final"]), sort_keys=True))
    return EXIT_OK


def _check_degree(settings, cloud):
    d = settings.get("sh_degree")
    if d is not None and not 0 <= d <= cloud.max_degree:
        raise UsageError(f"--sh-degree must lie in [0, {cloud.max_degree}]")
    return d


def cmd_render(settings: dict) -> int:
    from .io import camera_from_pose, load_dataset, load_ply, save_png
    from .render import render_forward

    if (settings["camera_index"] is None) == (settings["pose"] is None):
        raise UsageError("give exactly one of --camera-index or --pose")
    cloud = load_ply(settings["model"])
    degree = _check_degree(settings, cloud)
    if settings["pose"] is not None:
        camera = camera_from_pose(json.loads(Path(settings["pose"]).read_text()))
    else:
        if settings["data"] is None:
            raise UsageError("--camera-index needs --data")
        dataset = load_dataset(settings["data"])
        i = settings["camera_index"]
        if not 0 <= i < len(dataset.frames):
            raise UsageError(f"--camera-index must lie in [0, {len(dataset.frames)})")
        camera = dataset.frames[i].camera
    if degree is not None:
        cloud = cloud.truncated(degree)
    image = render_forward(cloud, camera, background=_background(settings)).image
    save_png(settings["out"], image)
    return EXIT_OK


def cmd_eval(settings: dict) -> int:
    from .io import load_dataset, load_ply
    from .render import render_forward

    cloud = load_ply(settings["model"])
    degree = _check_degree(settings, cloud)
    if degree is not None:
        cloud = cloud.truncated(degree)
    dataset = load_dataset(settings["data"], settings["views"])
    ids = dataset.test_ids if settings["split"] == "test" else dataset.train_ids
    if not ids:
        raise InvalidParameterError(f"split '{settings['split']}' is empty")
    bg = _background(settings)
    scores = [
        image_metrics(render_forward(cloud, dataset.frames[i].camera, background=bg).image, dataset.image(i, bg))
        for i in ids
    ]
    metrics = {
        "split": settings["split"],
        "n_views": len(ids),
        "sh_degree": cloud.max_degree,
        "psnr": float(np.mean([s.psnr for s in scores])),
        "ssim": float(np.mean([s.ssim for s in scores])),
        "mae": float(np.mean([s.mae for s in scores])),
    }
    text = json.dumps(_json_safe(metrics), indent=2, sort_keys=True)
    print(text)
    if settings["out"] is not None:
        Path(settings["out"]).write_text(text + "\n")
    return EXIT_OK


def cmd_truncate(settings: dict) -> int:
    from .io import truncate_sh_file

    if not 0 <= settings["degree"] <= MAX_SH_DEGREE:
        raise UsageError(f"--degree must lie in [0, {MAX_SH_DEGREE}]")
    stats = truncate_sh_file(settings["model"], settings["degree"], settings["out"])
    stats["param_ratio"] = stats["params_out"] / stats["params_in"]
    stats["byte_ratio"] = stats["bytes_out"] / stats["bytes_in"]
    print(json.dumps(stats, indent=2, sort_keys=True))
    return EXIT_OK


def _scene_extent(settings, cloud) -> float:
    if settings["data"] is not None:
        from .io import load_dataset

        return load_dataset(settings["data"]).scene_extent
    lo, hi = cloud.positions.min(0), cloud.positions.max(0)
    return float(np.linalg.norm(hi - lo) / 2) or 1.0


def cmd_analyze(settings: dict) -> int:
    from .io import load_dataset, load_ply
    from .spatial import color_scalar, compensation_study, default_bins, moran_profile

    cloud = load_ply(settings["model"])
    out = Path(settings["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    if settings["mode"] == "morans":
        if settings["bins"]:
            try:
                edges = sorted(float(x) for x in settings["bins"].split(","))
            except ValueError as exc:
                raise UsageError(f"bad --bins: {exc}") from None
            if len(edges) < 2:
                raise UsageError("--bins needs at least two edges")
            bins = list(zip(edges[:-1], edges[1:]))
        else:
            bins = default_bins(_scene_extent(settings, cloud), settings["n_bins"], settings["bin_min"])
        attrs = {"opacity": cloud.opacities, "color": color_scalar(cloud.sh)}
        result = moran_profile(cloud.positions, attrs, bins, seed=settings["seed"])
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["attribute", "bin_lo", "bin_hi", "moran_i", "pairs"])
            for attr, lo, hi, value, count in result.rows():
                w.writerow([attr, repr(lo), repr(hi), repr(value), count])
        return EXIT_OK
    if settings["data"] is None:
        raise UsageError("compensation mode needs --data for the camera")
    dataset = load_dataset(settings["data"])
    i = settings["camera_index"]
    if not 0 <= i < len(dataset.frames):
        raise UsageError(f"--camera-index must lie in [0, {len(dataset.frames)})")
    drop = settings["drop_count"] if settings["drop_count"] is not None else cloud.n // 20
    seeds = range(settings["seed"], settings["seed"] + settings["seeds"])
    report = compensation_study(
        cloud, dataset.frames[i].camera, drop, k=settings["knn_k"], seeds=seeds,
        background=_background(settings),
    )
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "strategy", "mae", "local_grad_mass", "n_dropped"])
        for row in report.rows:
            w.writerow([row.seed, row.strategy, repr(row.mae), repr(row.local_grad_mass), row.n_dropped])
    return EXIT_OK


def cmd_synth(settings: dict) -> int:
    from .synthetic import generate_synthetic

    path = generate_synthetic(
        settings["scene"], settings["views_train"], settings["views_test"], settings["res"],
        settings["seed"], settings["out"], n_points=settings["n_points"],
    )
    print(path)
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "render": cmd_render,
    "eval": cmd_eval,
    "truncate-sh": cmd_truncate,
    "analyze": cmd_analyze,
    "synth": cmd_synth,
}


def main(argv=None, environ=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if ns.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        settings = resolve_settings(ns, parser, environ)
        logging.basicConfig(level=settings["log_level"].upper(), format="%(levelname)s %(name)s: %(message)s")
        if settings["threads"] is not None:
            import numba

            if not 1 <= settings["threads"] <= numba.config.NUMBA_NUM_THREADS:
                raise UsageError(f"--threads must lie in [1, {numba.config.NUMBA_NUM_THREADS}]")
            numba.set_num_threads(settings["threads"])
        return COMMANDS[ns.command](settings)
    except UsageError as exc:
        print(f"anchorsplat {ns.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failures map to exit 1 with a one-line message
        print(f"anchorsplat {ns.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
