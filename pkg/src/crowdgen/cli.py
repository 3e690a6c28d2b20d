"""``crowdgen`` command line: prepare, train, generate, evaluate, render.

Exit codes: 0 success, 1 oracle mismatch, 2 bad input, 3 missing artifact.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .layout import SEG_INDEX, SceneConfig, build_layout, load_layout, save_layout
from .metrics import evaluate
from .navmesh import NavGraph
from .oracles import cross_check
from .pipeline import MissingArtifactError, RunConfig, TrainedModels, generate, render, repetition_config, train
from .raster import GridRaster, GridSpec, read_pgm
from .trajectory import TrajectoryFormatError, parse_trajectory_file, resample_fps, write_trajectory_file

log = logging.getLogger("crowdgen")

EXIT_OK, EXIT_MISMATCH, EXIT_BAD_INPUT, EXIT_MISSING = 0, 1, 2, 3
TRAJ_DIR = "trajectories"
TRAJ_SUFFIX = ".traj"


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_BAD_INPUT):
        super().__init__(message)
        self.code = code


# --- config ---------------------------------------------------------------------

# flag dest -> RunConfig key; every flag can also be set in the config file
FLAG_KEYS = {
    "engine": "engine", "duration_frames": "duration_frames", "seed": "seed", "ablate": "ablate",
    "fps": "fps", "checkpoints": "checkpoints", "layout": "layout", "data": "data", "output": "output",
    "scene": "scene",
}


def run_config(args) -> RunConfig:
    pairs = {}
    for item in args.set or ():
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v.strip()
    for dest, key in FLAG_KEYS.items():
        v = getattr(args, dest, None)
        if v is not None:
            pairs[key] = str(v)
    try:
        if args.config:
            return RunConfig.load(args.config, pairs)
        return RunConfig.from_pairs(pairs)
    except FileNotFoundError as e:
        raise CliError(f"config file not found: {e.filename}", EXIT_MISSING) from None


def _layout_path(config: RunConfig) -> Path:
    if config.layout:
        return Path(config.layout)
    if config.data:
        return Path(config.data) / "scene.cfg"
    raise CliError("no scene layout given (set layout=... or data=...)")


def _load_layout(config: RunConfig):
    path = _layout_path(config)
    if not path.is_file():
        raise CliError(f"missing scene layout {path}", EXIT_MISSING)
    return load_layout(path)


def _scene_from_layout(config: RunConfig, scene_cfg: SceneConfig) -> RunConfig:
    """Label output with the layout's scene id unless the run names one."""
    if config.scene == RunConfig.scene:
        return dataclasses.replace(config, scene=scene_cfg.scene)
    return config


def _load_models(config: RunConfig) -> TrainedModels | None:
    if config.engine == "se-orca" and not config.checkpoints:
        return None
    if not config.checkpoints:
        raise CliError("the crowdes engine needs checkpoints=<dir>", EXIT_MISSING)
    return TrainedModels.load(config.checkpoints)


# --- subcommands ------------------------------------------------------------------

def cmd_prepare(args) -> int:
    """Parse raw tracks, resample them, derive the layout channels and write a dataset directory."""
    out = Path(args.out)
    homography = None
    if args.homography:
        homography = np.array([float(v) for v in args.homography.replace(",", " ").split()]).reshape(3, 3)
    scenarios = []
    for path in args.inputs:
        if not Path(path).is_file():
            raise CliError(f"missing trajectory file {path}", EXIT_MISSING)
        sc = parse_trajectory_file(path, args.format, fps=args.source_fps, scene_id=args.scene,
                                   scale=args.scale, homography=homography)
        if args.fps is not None and sc.fps != args.fps:
            sc = resample_fps(sc, args.fps)
        scenarios.append(sc)
    if not any(len(s) for s in scenarios):
        raise CliError("input files hold no agents")
    if args.segmentation:
        seg = read_pgm(args.segmentation, args.cell_size, tuple(args.origin) if args.origin else None)
    else:
        lo = np.min([s.bounds()[0] for s in scenarios if len(s)], axis=0) - args.margin
        hi = np.max([s.bounds()[1] for s in scenarios if len(s)], axis=0) + args.margin
        spec = GridSpec.covering(lo, hi, args.cell_size or 0.5)
        seg = GridRaster(spec, np.full(spec.shape, SEG_INDEX["sidewalk"], dtype=np.int64))
    layout = build_layout(scenarios, seg)
    scene = args.scene or scenarios[0].scene_id
    cfg_path = save_layout(layout, out, SceneConfig(scene=scene, fps=scenarios[0].fps, scale=args.scale))
    (out / TRAJ_DIR).mkdir(exist_ok=True)
    for i, (path, sc) in enumerate(zip(args.inputs, scenarios)):
        write_trajectory_file(sc, out / TRAJ_DIR / f"{i:03d}_{Path(path).stem}{TRAJ_SUFFIX}")
    print(cfg_path)
    return EXIT_OK


def load_dataset(data_dir) -> list:
    d = Path(data_dir) / TRAJ_DIR
    if not d.is_dir():
        raise CliError(f"missing prepared trajectories in {d}", EXIT_MISSING)
    return [parse_trajectory_file(p, "generic") for p in sorted(d.glob(f"*{TRAJ_SUFFIX}"))]


def cmd_train(args) -> int:
    config = run_config(args)
    if not config.data:
        raise CliError("train needs data=<prepared dataset dir>")
    if not config.checkpoints:
        raise CliError("train needs checkpoints=<output dir>")
    layout, _ = _load_layout(config)
    scenarios = load_dataset(config.data)
    if not any(len(s) for s in scenarios):
        raise CliError(f"dataset {config.data} is empty")
    train(config, scenarios, layout, out_dir=config.checkpoints)
    print(config.checkpoints)
    return EXIT_OK


def cmd_generate(args) -> int:
    config = run_config(args)
    if not config.output:
        raise CliError("generate needs output=<file>")
    layout, scene_cfg = _load_layout(config)
    config = _scene_from_layout(config, scene_cfg)
    models = _load_models(config)
    departures = {}
    scenario = generate(config, layout, models, departures=departures)
    write_trajectory_file(scenario, config.output)
    log.info("wrote %d agents over %d frames to %s (%s)", len(scenario), scenario.total_frames, config.output,
             ", ".join(f"{k}={v}" for k, v in sorted(departures.items())))
    print(config.output)
    return EXIT_OK


def _generate_rep(config: RunConfig, rep: int, layout_path: str):
    layout, scene_cfg = load_layout(layout_path)
    config = _scene_from_layout(config, scene_cfg)
    models = _load_models(config)
    return generate(repetition_config(config, rep), layout, models, NavGraph(layout.traversable))


def cmd_evaluate(args) -> int:
    if not Path(args.gt).is_file():
        raise CliError(f"missing ground-truth file {args.gt}", EXIT_MISSING)
    gt = parse_trajectory_file(args.gt, "generic")
    if args.gen:
        for p in args.gen:
            if not Path(p).is_file():
                raise CliError(f"missing generated file {p}", EXIT_MISSING)
        gens = [parse_trajectory_file(p, "generic") for p in args.gen]
        meta = {"source": "files"}
    else:
        config = run_config(args)
        if args.duration_frames is None:
            config = RunConfig.from_pairs({"duration_frames": str(gt.total_frames)}, config)
        layout_path = str(_layout_path(config))
        _load_models(config)  # fail fast on missing checkpoints
        if args.jobs > 1:
            with ProcessPoolExecutor(args.jobs) as pool:
                gens = list(pool.map(_generate_rep, [config] * args.reps, range(args.reps), [layout_path] * args.reps))
        else:
            gens = [_generate_rep(config, r, layout_path) for r in range(args.reps)]
        meta = {"engine": config.engine, "seed": config.seed, "ablate": ",".join(config.ablate)}
    report = evaluate(gens, gt, Q=args.quadrats, metadata=meta)
    print(report.csv_header())
    print(report.csv_row())
    print()
    print(report.table())
    if args.oracle:
        results = {}
        for g in gens:
            for name, ok in cross_check(g.truncated(gt.total_frames), gt, args.quadrats).items():
                results[name] = results.get(name, True) and ok
        print()
        for name, ok in results.items():
            print(f"oracle {name}: {'ok' if ok else 'MISMATCH'}")
        if not all(results.values()):
            return EXIT_MISMATCH
    return EXIT_OK


def cmd_render(args) -> int:
    if not Path(args.scenario).is_file():
        raise CliError(f"missing scenario file {args.scenario}", EXIT_MISSING)
    scenario = parse_trajectory_file(args.scenario, "generic")
    layout = None
    if args.layout:
        if not Path(args.layout).is_file():
            raise CliError(f"missing scene layout {args.layout}", EXIT_MISSING)
        layout, _ = load_layout(args.layout)
    svg = render(scenario, layout)
    if args.out:
        Path(args.out).write_text(svg)
    else:
        sys.stdout.write(svg)
    return EXIT_OK


# --- parser -----------------------------------------------------------------------

def _run_flags(p: argparse.ArgumentParser, *, output: bool = True) -> None:
    p.add_argument("--config", help="key=value run configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key (repeatable)")
    p.add_argument("--engine", choices=("crowdes", "se-orca"))
    p.add_argument("--duration-frames", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--ablate", help="comma-separated: no-layout, no-navmesh, no-social, no-switching")
    p.add_argument("--fps", type=float)
    p.add_argument("--scene")
    p.add_argument("--checkpoints", help="checkpoint directory")
    p.add_argument("--layout", help="scene.cfg of the target scene")
    p.add_argument("--data", help="prepared dataset directory")
    if output:
        p.add_argument("--output", help="output file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crowdgen", description="Crowd behavior generation and evaluation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", parents=[common], help="ingest trajectories and derive a scene layout")
    p.add_argument("inputs", nargs="+", help="trajectory files of one scene")
    p.add_argument("--out", required=True, help="dataset directory to create")
    p.add_argument("--format", default="generic", choices=("generic", "ethucy", "sdd"))
    p.add_argument("--source-fps", type=float, help="frame rate of the input files when not in their header")
    p.add_argument("--fps", type=float, default=5.0, help="resample to this frame rate")
    p.add_argument("--scene")
    p.add_argument("--scale", type=float, default=1.0, help="meters per input unit")
    p.add_argument("--homography", help="nine comma-separated numbers mapping pixels to meters")
    p.add_argument("--segmentation", help="PGM segmentation raster (class index per pixel)")
    p.add_argument("--cell-size", type=float, help="meters per raster cell")
    p.add_argument("--origin", type=float, nargs=2, metavar=("X", "Y"))
    p.add_argument("--margin", type=float, default=1.0, help="padding around the data when no segmentation is given")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", parents=[common], help="fit vocabulary, simulator and emitter")
    _run_flags(p, output=False)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", parents=[common], help="generate one scenario")
    _run_flags(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", parents=[common], help="score generated scenarios against ground truth")
    _run_flags(p, output=False)
    p.add_argument("--gt", required=True, help="ground-truth trajectory file")
    p.add_argument("--gen", nargs="+", help="generated files; omit to generate --reps runs")
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--jobs", type=int, default=1, help="parallel generation processes")
    p.add_argument("--quadrats", type=int, default=10)
    p.add_argument("--oracle", action="store_true", help="cross-check metrics against brute-force references")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("render", parents=[common], help="draw a scenario as SVG")
    p.add_argument("scenario")
    p.add_argument("--layout", help="scene.cfg underlay")
    p.add_argument("--out", help="SVG path (default: stdout)")
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as e:
        print(f"crowdgen: {e}", file=sys.stderr)
        return e.code
    except MissingArtifactError as e:
        print(f"crowdgen: {e}", file=sys.stderr)
        return EXIT_MISSING
    except FileNotFoundError as e:
        print(f"crowdgen: missing file {e.filename or e}", file=sys.stderr)
        return EXIT_MISSING
    except TrajectoryFormatError as e:
        print(f"crowdgen: {e}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except ValueError as e:
        print(f"crowdgen: {e}", file=sys.stderr)
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
