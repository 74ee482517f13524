"""Command line entry point: ``pgnd {gen,train,eval,plan,skin,plot}``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .core import FormatError, ParameterError, RunConfig, ValidationError, load_dataset, load_trajectory

log = logging.getLogger("pgnd")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _trajectories(path):
    p = Path(path)
    if p.is_dir():
        return load_dataset(p)
    if p.is_file():
        return [load_trajectory(p)]
    raise ValidationError(f"{path}: no such file or directory")


# ---------------------------------------------------------------- subcommands


def cmd_gen(args) -> None:
    from .synth import CameraSpec, choose_cameras, default_cameras, generate, observe_tracks
    from .core import save_trajectory

    traj = generate(args.kind, args.seed, duration=args.duration, dt=args.dt)
    if args.cameras or args.views:
        if args.cameras:
            cams = [CameraSpec.from_dict(d) for d in json.loads(Path(args.cameras).read_text())]
        else:
            center = traj.frames[0].mean(axis=0)
            center[2] = 0.0
            cams = default_cameras(center)
        if args.views:
            cams = choose_cameras(args.views, np.random.default_rng(args.seed), cams)
        traj = observe_tracks(traj, cams)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_trajectory(traj, args.out)


def cmd_train(args) -> None:
    from .train import save_model, train

    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {"seed": args.seed, "train_steps": args.steps, "lr": args.lr,
                 "batch_size": args.batch_size}
    cfg = cfg.replace(**{k: v for k, v in overrides.items() if v is not None})
    data = _trajectories(args.data)
    model, state = train(data, cfg, view_protocol=args.views, mode=args.mode)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_model(model, args.out)
    log.info("trained %d steps, best validation MDE %.4f", state.step, state.best_val_mde)


def cmd_eval(args) -> None:
    from .plotting import parse_report, report_csv
    from .dynamics import DynamicsModel
    from .train import evaluate, load_model

    model = load_model(args.model)
    if args.mode and args.mode != model.mode:
        swapped = DynamicsModel(model.config, mode=args.mode)
        swapped.params.load_arrays(model.params.named_arrays())
        model = swapped
    clips = _trajectories(args.data)
    summary = evaluate(model, clips, views=args.views, seed=args.seed)
    _write_json(args.report, summary)
    Path(args.report).with_suffix(".csv").write_text(report_csv(parse_report({"method": model.mode, "metrics": summary})), encoding="utf-8")


def cmd_plan(args) -> None:
    from .metrics import chamfer
    from .planner import MppiConfig, model_predictor, mpc_loop, make_task
    from .train import load_model

    model = load_model(args.model)
    env, target = make_task(args.task, args.seed, dt=model.config.dt)
    cfg = MppiConfig(samples=args.samples, iterations=args.iterations, seed=args.seed)
    initial = chamfer(env.positions, target)
    result = mpc_loop(env, target, cfg, model_predictor(model), steps=args.steps,
                      horizon=model.config.horizon_K, h=model.config.history_h)
    _write_json(args.out, {
        "task": args.task, "seed": args.seed, "initial_chamfer": initial,
        "final_chamfer": result.error_curve[-1], "error_curve": result.error_curve,
        "waypoints": [w.tolist() for w in result.executed],
        "cost_traces": result.cost_traces,
    })


def cmd_skin(args) -> None:
    from .skinning import KernelSet, skin_sequence

    kernels = KernelSet.load(args.kernels)
    traj = load_trajectory(args.tracks)
    if not traj.is_tracked:
        raise ValidationError(f"{args.tracks}: frames do not share a particle count")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, ks in enumerate(skin_sequence(kernels, list(traj.tracks()), args.k_lbs, args.k_rot)):
        (out / f"kernels_{i:04d}.json").write_text(json.dumps(ks.to_dict(), sort_keys=True) + "\n",
                                                    encoding="utf-8")


def cmd_plot(args) -> None:
    from .plotting import plot_report

    plot_report(args.report, args.out)


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pgnd", description="Particle-grid neural dynamics toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="simulate a synthetic trajectory")
    g.add_argument("--kind", choices=("rope", "cloth"), required=True)
    g.add_argument("--duration", type=float, default=3.0, help="seconds")
    g.add_argument("--dt", type=float, default=0.1, help="frame interval in seconds")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--cameras", help="JSON list of camera specs")
    g.add_argument("--views", type=int, help="observe through this many random cameras")
    g.add_argument("--out", required=True, help="output .jsonl")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="fit a dynamics model")
    t.add_argument("--data", required=True, help="directory of .jsonl trajectories")
    t.add_argument("--config", help="JSON run config; flags override it")
    t.add_argument("--views", choices=("full", "random"), default="full")
    t.add_argument("--steps", type=int)
    t.add_argument("--mode", choices=("grid", "particle"), default="grid")
    t.add_argument("--seed", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="roll out test clips and report errors")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--mode", choices=("grid", "particle"))
    e.add_argument("--views", type=int, help="restrict to particles seen by n random cameras")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--report", required=True)
    e.set_defaults(func=cmd_eval)

    pl = sub.add_parser("plan", help="closed-loop MPPI on an oracle task")
    pl.add_argument("--model", required=True)
    pl.add_argument("--task", choices=("lift", "straighten", "relocate"), required=True)
    pl.add_argument("--seed", type=int, default=0)
    pl.add_argument("--steps", type=int, default=15)
    pl.add_argument("--samples", type=int, default=64)
    pl.add_argument("--iterations", type=int, default=10)
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plan)

    s = sub.add_parser("skin", help="carry kernels along particle tracks")
    s.add_argument("--kernels", required=True, help="JSON kernel set")
    s.add_argument("--tracks", required=True, help="tracked .jsonl trajectory")
    s.add_argument("--k-lbs", type=int, default=8)
    s.add_argument("--k-rot", type=int, default=8)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_skin)

    pt = sub.add_parser("plot", help="SVG bar chart plus CSV of a report")
    pt.add_argument("--report", required=True)
    pt.add_argument("--out", required=True, help="output .svg; the .csv lands beside it")
    pt.set_defaults(func=cmd_plot)
    return p


def _thread_limit():
    value = os.environ.get("PGND_THREADS")
    if not value:
        return None
    n = int(value)
    if n < 1:
        raise ValidationError("PGND_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        limiter = _thread_limit()
        try:
            args.func(args)
        finally:
            if limiter is not None:
                limiter.unregister()
    except (ValidationError, FormatError, ParameterError, ValueError, FileNotFoundError) as exc:
        print(f"pgnd {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # runtime failure of the underlying pipeline
        print(f"pgnd {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
