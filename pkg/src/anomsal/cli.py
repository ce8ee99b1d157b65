"""Command-line entry point: ``anomsal <command> [options]``.

Every command accepts ``--config FILE`` with flat ``key = value`` lines
(``#`` comments allowed). Keys use the long option names with underscores,
e.g. ``max_iters = 2000``; explicit flags override the file. Outputs go
under ``--out`` and are written atomically. Exit codes: 0 success,
1 runtime failure, 2 invalid configuration, 3 violated expectations.
"""

from __future__ import annotations

import argparse
import datetime
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_EXPECT = 0, 1, 2, 3


class ConfigError(Exception):
    """Invalid or missing configuration; reported with exit code 2."""


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"config line {lineno}: empty key")
        out[key.replace("-", "_")] = value
    return out


def _option_types(parser: argparse.ArgumentParser) -> dict[str, argparse.Action]:
    return {a.dest: a for a in parser._actions if a.dest not in ("help", "config")}


def resolve(parser: argparse.ArgumentParser, args: argparse.Namespace) -> argparse.Namespace:
    """Fill options not given on the command line from ``--config``, then defaults."""
    actions = _option_types(parser)
    file_values = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config: file not found: {path}")
        file_values = parse_config_text(path.read_text())
    for key, raw in file_values.items():
        if key not in actions or key == "command":
            raise ConfigError(f"{key}: unknown configuration field")
        if getattr(args, key, None) is not None:
            continue
        act = actions[key]
        try:
            if isinstance(act, argparse._StoreTrueAction):
                value = raw.lower() in ("1", "true", "yes", "on")
            elif isinstance(act, argparse._AppendAction):
                value = [v.strip() for v in raw.split(",") if v.strip()]
            else:
                value = act.type(raw) if act.type else raw
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key}: invalid value {raw!r} ({exc})") from None
        if act.choices is not None and value not in act.choices:
            raise ConfigError(f"{key}: must be one of {sorted(act.choices)}")
        setattr(args, key, value)
    for key, default in getattr(args, "_defaults", {}).items():
        if getattr(args, key, None) is None:
            setattr(args, key, default)
    return args


def _threads(args) -> int:
    t = args.threads
    if t is None:
        env = os.environ.get("ANOMSAL_THREADS")
        if env:
            try:
                t = int(env)
            except ValueError:
                raise ConfigError(f"threads: ANOMSAL_THREADS must be an integer, got {env!r}") from None
    t = 1 if t is None else t
    if t < 1:
        raise ConfigError("threads: must be >= 1")
    return t


def _need(args, *names):
    for name in names:
        if getattr(args, name, None) in (None, ""):
            raise ConfigError(f"{name}: required")


def _existing(args, *names):
    _need(args, *names)
    for name in names:
        if not Path(getattr(args, name)).exists():
            raise ConfigError(f"{name}: file not found: {getattr(args, name)}")


def _out_dir(args) -> Path:
    _need(args, "out")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _sidecar(out: Path, command: str, args) -> None:
    """Run metadata (the only place timestamps appear)."""
    from .pointcloud import atomic_write

    stamp = datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")
    keys = sorted(k for k in vars(args) if not k.startswith("_") and k != "func")
    body = [f"command = {command}", f"finished = {stamp}"] + [f"{k} = {getattr(args, k)}" for k in keys]
    atomic_write(out / f"{command}.meta.txt", "\n".join(body) + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _load_inputs(args, regions_required=True):
    from .pointcloud import load_cloud, load_regions

    _existing(args, "cloud")
    if regions_required:
        _existing(args, "regions")
    cloud = load_cloud(args.cloud)
    regions = load_regions(args.regions) if getattr(args, "regions", None) else None
    return cloud, regions


def _train_config(args):
    from .training import TrainConfig

    kw = {k: getattr(args, k) for k in TrainConfig.field_names()
          if k not in ("workers",) and getattr(args, k, None) is not None}
    try:
        return TrainConfig(workers=_threads(args), **kw)
    except ValueError as exc:
        raise ConfigError(f"training configuration: {exc}") from None


def cmd_generate(args) -> int:
    from . import scenes
    from .pointcloud import write_cloud, write_regions

    spec = scenes.CANNED[args.scene](seed=args.seed)
    out = _out_dir(args)
    cloud, regions = scenes.generate(spec)
    ext = "ply" if args.format == "ply" else "xyz"
    write_cloud(out / f"cloud.{ext}", cloud, format=args.format)
    write_regions(out / "regions.txt", regions)
    _sidecar(out, "generate", args)
    print(f"wrote {cloud.n} points and {len(regions)} regions to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .pointcloud import atomic_write
    from .training import train

    cloud, regions = _load_inputs(args)
    cfg = _train_config(args)
    out = _out_dir(args)

    def progress(it, loss, ratio):
        if ratio is not None or (args.verbose and it % 50 == 0):
            extra = "" if ratio is None else f" r_D {ratio:.4f}"
            print(f"iter {it} loss {loss:.5f}{extra}", flush=True)

    _, log = train(cloud, regions, cfg, out_dir=out, progress=progress)
    best = out / f"{log.checkpoint_id}.bin"
    atomic_write(out / "best.bin", best.read_bytes())
    _sidecar(out, "train", args)
    print(f"best r_D {log.best_ratio:.4f} at iteration {log.best_iter}; checkpoint {best.name}")
    return EXIT_OK


def _subset(args, cloud, regions):
    if regions is None or args.role == "all":
        return None
    from .evaluation import region_members

    h, l_ = region_members(cloud, regions, args.role)
    parts = list(h.values()) + list(l_.values())
    return np.unique(np.concatenate(parts)) if parts else np.zeros(0, dtype=np.int64)


def _map_path(out: Path, fmt: str, stem: str) -> Path:
    return out / f"{stem}.{ {'ply': 'ply', 'csv': 'csv', 'xyz-ascii': 'xyz'}[fmt] }"


def cmd_infer(args) -> int:
    from .inference import saliency_map, write_saliency
    from .training import load_checkpoint

    _existing(args, "checkpoint")
    cloud, regions = _load_inputs(args, regions_required=args.role != "all")
    try:
        params, grid = load_checkpoint(args.checkpoint)
    except ValueError as exc:
        raise ConfigError(f"checkpoint: {exc}") from None
    if args.stride < 1:
        raise ConfigError("stride: must be >= 1")
    out = _out_dir(args)
    smap = saliency_map(params, cloud, grid, subset=_subset(args, cloud, regions), workers=_threads(args),
                        stride=args.stride)
    path = _map_path(out, args.format, "saliency")
    write_saliency(path, cloud, smap, format=args.format)
    _sidecar(out, "infer", args)
    print(f"scored {len(smap)} points ({int(smap.degenerate.sum())} degenerate) -> {path}")
    return EXIT_OK


def cmd_baseline(args) -> int:
    from .baselines import handcrafted_map, plane_saliency_map
    from .inference import GridConfig, write_saliency

    cloud, regions = _load_inputs(args, regions_required=args.role != "all")
    if args.w <= 0 or args.n < 4 or args.n % 2:
        raise ConfigError("n/w: need even n >= 4 and w > 0")
    out = _out_dir(args)
    subset = _subset(args, cloud, regions)
    if args.method == "plane":
        smap = plane_saliency_map(cloud, GridConfig(args.n, args.w, args.m, args.t_b), subset=subset)
    else:
        rho_max = args.rho_max if args.rho_max is not None else 0.5 * args.n * args.w
        rho_min = args.rho_min if args.rho_min is not None else 0.25 * rho_max
        radius = args.radius if args.radius is not None else args.w
        if not 0 < rho_min < rho_max or radius <= 0:
            raise ConfigError("rho_min/rho_max/radius: need 0 < rho_min < rho_max and radius > 0")
        smap = handcrafted_map(cloud, radius, rho_min, rho_max, subset=subset, normalize=not args.no_normalize)
    path = _map_path(out, args.format, f"saliency_{args.method}")
    write_saliency(path, cloud, smap, format=args.format)
    _sidecar(out, "baseline", args)
    print(f"{args.method}: scored {len(smap)} points -> {path}")
    return EXIT_OK


def _expect(args, values: dict[str, float]) -> int:
    if not args.expect:
        return EXIT_OK
    from .evaluation import check_expectations, parse_expectations

    try:
        exp = parse_expectations(Path(args.expect).read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"expect: {exc}") from None
    failures = check_expectations(values, exp)
    for f in failures:
        print(f"EXPECTATION FAILED: {f}", file=sys.stderr)
    return EXIT_EXPECT if failures else EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import saliency_ratio, write_report
    from .inference import read_saliency

    _existing(args, "saliency")
    cloud, regions = _load_inputs(args)
    out = _out_dir(args)
    smap = read_saliency(args.saliency)
    report = saliency_ratio(smap, cloud, regions, args.role)
    write_report(out / f"report_{args.role}.txt", report.to_text())
    _sidecar(out, "eval", args)
    print(report.to_text(), end="")
    return _expect(args, {"ratio": report.ratio, "t": report.t_stat, "p": report.p_value})


def _int_list(values, name):
    try:
        items = [int(v) for chunk in values for v in str(chunk).split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{name}: expected integers") from None
    if not items:
        raise ConfigError(f"{name}: must not be empty")
    return items


def cmd_sweep(args) -> int:
    from .evaluation import sweep, write_report

    cloud, regions = _load_inputs(args)
    cfg = _train_config(args)
    f_list = _int_list(args.f_list or [cfg.f], "f_list")
    n_list = _int_list(args.n_list or [cfg.n], "n_list")
    if args.runs < 1:
        raise ConfigError("runs: must be >= 1")
    for f in f_list:
        for n in n_list:
            try:
                replace(cfg, f=f, n=n)
            except ValueError as exc:
                raise ConfigError(f"f_list/n_list: {exc}") from None
    out = _out_dir(args)
    result = sweep(cloud, regions, f_list, n_list, args.runs, replace(cfg, workers=1), workers=_threads(args))
    write_report(out / "sweep.csv", result.to_csv())
    write_report(out / "sweep.txt", result.to_text())
    _sidecar(out, "sweep", args)
    print(result.to_text(), end="")
    return EXIT_OK


def cmd_compare(args) -> int:
    from .evaluation import compare_methods, write_report
    from .inference import read_saliency

    cloud, regions = _load_inputs(args)
    if not args.map:
        raise ConfigError("map: give at least one NAME=PATH")
    maps = {}
    for item in args.map:
        if "=" not in item:
            raise ConfigError(f"map: expected NAME=PATH, got {item!r}")
        name, path = item.split("=", 1)
        if not Path(path).exists():
            raise ConfigError(f"map: file not found: {path}")
        maps[name] = read_saliency(path)
    out = _out_dir(args)
    table = compare_methods(maps, cloud, regions, args.role)
    write_report(out / "compare.csv", table.to_csv())
    write_report(out / "compare.txt", table.to_text())
    _sidecar(out, "compare", args)
    print(table.to_text(), end="")
    return _expect(args, table.ratios())


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, defaults: dict):
    p.add_argument("--config", help="flat key = value file; flags override it")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="random seed (default 0)")
    p.add_argument("--threads", type=int, help="worker threads (default: $ANOMSAL_THREADS or 1)")
    defaults.setdefault("seed", 0)


def _inputs(p, regions=True):
    p.add_argument("--cloud", help="point cloud (.ply or xyz text)")
    if regions:
        p.add_argument("--regions", help="region file")


def _grid_opts(p, defaults):
    p.add_argument("--n", type=int, help="grid side in voxels (default 16)")
    p.add_argument("--w", type=float, help="voxel size in metres (default 1.0)")
    p.add_argument("--m", type=int, help="shell thickness parameter (default 3)")
    p.add_argument("--t-b", dest="t_b", type=int, help="occupancy threshold (default 2)")
    defaults.update(n=16, w=1.0, m=3, t_b=2)


def _train_opts(p, defaults):
    _grid_opts(p, defaults)
    p.add_argument("--f", type=int, help="base feature maps (default 8)")
    p.add_argument("--B", type=int, help="batch size (default 16)")
    p.add_argument("--lr", type=float, help="ADAM step size (default 1e-4)")
    p.add_argument("--beta1", type=float)
    p.add_argument("--beta2", type=float)
    p.add_argument("--validation-every", dest="validation_every", type=int, help="default 1000")
    p.add_argument("--n-st", dest="n_ST", type=int, help="early-stop patience in iterations (default 10000)")
    p.add_argument("--max-iters", dest="max_iters", type=int, help="iteration cap (default 20000)")
    p.add_argument("--val-points", dest="val_points", type=int, help="validation points per region (default 5000)")


def _format_opt(p, defaults):
    p.add_argument("--format", choices=["ply", "xyz-ascii", "csv"], help="saliency output format (default ply)")
    defaults["format"] = "ply"


def _role_opt(p, defaults, allow_all=False):
    choices = ["D", "T", "all"] if allow_all else ["D", "T"]
    p.add_argument("--role", choices=choices, help="region role to use (default T)")
    defaults["role"] = "T"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="anomsal", description="Point-cloud saliency from reconstruction error.")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        defaults = {}
        _common(p, defaults)
        p.set_defaults(func=func, _defaults=defaults)
        return p, defaults

    p, d = command("generate", cmd_generate, "write a canned synthetic scene and its regions")
    p.add_argument("--scene", choices=["smooth", "rough", "curved"], help="scene name (default smooth)")
    p.add_argument("--format", choices=["ply", "xyz-ascii"], help="cloud format (default ply)")
    d.update(scene="smooth", format="ply")

    p, d = command("train", cmd_train, "train a reconstruction network")
    _inputs(p)
    _train_opts(p, d)
    p.add_argument("--verbose", action="store_true", default=None, help="print the loss every 50 iterations")
    d["verbose"] = False

    p, d = command("infer", cmd_infer, "score points with a trained checkpoint")
    _inputs(p)
    p.add_argument("--checkpoint", help="checkpoint file (.bin)")
    p.add_argument("--stride", type=int, help="score every k-th point, copy the rest (default 1)")
    _role_opt(p, d, allow_all=True)
    _format_opt(p, d)
    d.update(stride=1, role="all")

    p, d = command("baseline", cmd_baseline, "score points with a reference method")
    _inputs(p)
    p.add_argument("--method", choices=["plane", "handcrafted"], help="default plane")
    _grid_opts(p, d)
    p.add_argument("--radius", type=float, help="normal estimation radius (default w)")
    p.add_argument("--rho-min", dest="rho_min", type=float, help="inner annulus radius (default rho_max / 4)")
    p.add_argument("--rho-max", dest="rho_max", type=float, help="outer annulus radius (default n*w/2)")
    p.add_argument("--no-normalize", dest="no_normalize", action="store_true", default=None,
                   help="do not rescale annulus weights to sum to one")
    _role_opt(p, d, allow_all=True)
    _format_opt(p, d)
    d.update(method="plane", role="all", no_normalize=False)

    p, d = command("eval", cmd_eval, "saliency ratio and t-test for a saliency map")
    _inputs(p)
    p.add_argument("--saliency", help="saliency map written by infer or baseline")
    p.add_argument("--expect", help="expectation file; violations exit with code 3")
    _role_opt(p, d)

    p, d = command("sweep", cmd_sweep, "train over a grid of (f, n) and tabulate validation ratios")
    _inputs(p)
    _train_opts(p, d)
    p.add_argument("--f-list", dest="f_list", action="append", help="comma-separated f values")
    p.add_argument("--n-list", dest="n_list", action="append", help="comma-separated n values")
    p.add_argument("--runs", type=int, help="runs per cell (default 5)")
    d["runs"] = 5

    p, d = command("compare", cmd_compare, "tabulate saliency ratios of several maps")
    _inputs(p)
    p.add_argument("--map", action="append", help="NAME=PATH, repeatable")
    p.add_argument("--expect", help="expectation file over method names; violations exit with code 3")
    _role_opt(p, d)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    try:
        resolve(sub, args)
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - top-level reporting
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
