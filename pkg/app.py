import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from config import RunConfig, settings
from dataio import load_config, load_dataset, parabola_mean, save_config, synth
from errors import AcceptanceError, UsageError, WLFError
from gradcheck import DEFAULT_COORDS, run_suites
from pathmodel import InterpolantSampler, sample_at_time, zero_path_params
from plotting import plot_history, plot_marginals, plot_trajectories
from storage import load_checkpoint, read_bundle, read_history, run_storage
from trainer import estimate_dual, fit_action, train
from transport_eval import (
    SIMULATION_MODES,
    gaussian_w2,
    leave_one_out,
    sample_grid_density,
    sb_grid_oracle,
    simulate,
    sinkhorn,
    straightness,
)
from utils import derive_seed, make_rng

# Configure logging
logging.basicConfig(
    level=getattr(logging, settings.log_level.upper(), logging.INFO),
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
)
logger = logging.getLogger(__name__)


def _floats(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise UsageError(f"Expected comma-separated numbers, got '{text}'") from e


def _run_config(args) -> RunConfig:
    if not args.config:
        raise UsageError(f"'{args.command}' needs --config")
    config = load_config(args.config)
    if args.seed is not None:
        config = config.model_copy(update={"train": config.train.model_copy(update={"seed": args.seed})})
    if args.out:
        config = config.model_copy(update={"run_dir": args.out})
    return config


def _dataset(args, config: RunConfig):
    return load_dataset(config.dataset, base_dir=Path(args.config).parent)


def _start_run(args, config: RunConfig):
    _record_command(args, config.run_dir, config)
    save_config(config, run_storage.path("config.json"))


def _command_dir(args) -> Path:
    return Path(args.out) if args.out else Path(settings.output_dir) / args.command


def _record_command(args, directory, config: Optional[RunConfig] = None, extra: Optional[dict] = None) -> None:
    """Manifest for a command; without a run config the parsed arguments are hashed instead."""
    run_storage.initialize(directory)
    if config is not None:
        run_storage.write_manifest(args.command, config.model_dump_json(), config.train.seed, extra)
        return
    arguments = {k: v for k, v in sorted(vars(args).items()) if k != "command"}
    run_storage.write_manifest(
        args.command, json.dumps(arguments), args.seed or 0, dict(extra or {}, arguments=arguments)
    )


def _checkpoint(args):
    path = args.checkpoint or run_storage.latest_checkpoint()
    if path is None:
        raise UsageError("No checkpoint given and none found in the run directory")
    return load_checkpoint(path)


def cmd_train(args) -> int:
    config = _run_config(args)
    dataset = _dataset(args, config)
    _start_run(args, config)
    result = train(config.problem, dataset, config.field, config.path, config.train, storage=run_storage)
    run_storage.write_history(result.history)
    run_storage.save_checkpoint(config.train.iterations, result.field_params, result.path_params)
    report = estimate_dual(config.problem, result.field_params, result.path_params, dataset,
                           config.train.eval_batch_size, derive_seed(config.train.seed, 2))
    run_storage.write_json("dual_report.json", report)
    print(f"dual estimate: {report.dual_estimate:.6f}")
    return 0


def cmd_eval_loo(args) -> int:
    config = _run_config(args)
    dataset = _dataset(args, config)
    _start_run(args, config)
    table = leave_one_out(
        dataset, config.problem, config.field, config.path, config.train, config.evaluation,
        workers=args.workers or settings.workers, label=dataset.name,
    )
    run_storage.write_eval_table(table)
    print(f"W1 averaged over left-out marginals: {table.mean:.4f} +/- {table.std:.4f}")
    print(f"  simulated dynamics: {table.mean_simulated:.4f}   independent-coupling baseline: {table.mean_baseline:.4f}")
    return 0


def cmd_simulate(args) -> int:
    config = _run_config(args)
    dataset = _dataset(args, config)
    run_storage.initialize(config.run_dir)
    field_params, _, _ = _checkpoint(args)
    rng = make_rng(config.train.seed, 6)
    source = dataset.snapshots[0]
    x0 = source[rng.choice(source.shape[0], size=args.n, replace=source.shape[0] < args.n)]
    bundle = simulate(config.problem, field_params, x0, steps=args.steps, mode=args.mode,
                      seed=derive_seed(config.train.seed, 7))
    run_storage.write_bundle(bundle)
    if args.binary:
        run_storage.write_bundle_binary(bundle)
    run_storage.write_manifest(args.command, config.model_dump_json(), config.train.seed,
                               extra={"mode": args.mode, "steps": args.steps, "n": args.n})
    print(f"status: {bundle.status}  straightness (per unit path length): {straightness(bundle):.6f}")
    return 0


def cmd_action(args) -> int:
    config = _run_config(args)
    dataset = _dataset(args, config)
    _start_run(args, config)
    path_params = zero_path_params(config.path)
    if args.checkpoint:
        _, loaded, _ = load_checkpoint(args.checkpoint)
        path_params = loaded or path_params
    report, result = fit_action(config.problem, InterpolantSampler(dataset, path_params), config.field, config.train)
    run_storage.write_history(result.history)
    run_storage.write_json("action.json", report)
    print(f"action: {report.dual_estimate:.6f}")
    return 0


def cmd_oracle(args) -> int:
    config = None
    if args.which == "bures":
        m0, m1 = np.array(_floats(args.m0)), np.array(_floats(args.m1))
        d = m0.shape[0]
        value = gaussian_w2(m0, args.var0 * np.eye(d), m1, args.var1 * np.eye(d))
        print(f"{value}")
        extra = {"value": value}
        logger.info(f"Bures W2^2 = {value}; the trained OT dual targets {0.5 * value}")
    elif args.which == "sinkhorn":
        if args.config:
            config = _run_config(args)
            dataset = _dataset(args, config)
        else:
            dataset = synth("gaussian_shift", args.seed or 0, args.n, 2)
        rng = make_rng(args.seed or 0, 8)
        a = dataset.snapshots[0][rng.choice(dataset.snapshots[0].shape[0], size=args.n)]
        b = dataset.snapshots[-1][rng.choice(dataset.snapshots[-1].shape[0], size=args.n)]
        result = sinkhorn(np.ones(args.n), a, np.ones(args.n), b, eps=args.eps, iters=args.iters)
        print(f"{result.cost}")
        extra = {"value": result.cost, "converged": result.converged, "iterations": result.iterations}
        logger.info(f"Sinkhorn converged={result.converged} after {result.iterations} iterations")
    elif args.which == "sb-grid":
        m0, m1 = _floats(args.m0)[0], _floats(args.m1)[0]
        grid = np.linspace(min(m0, m1) - 6.0, max(m0, m1) + 6.0, args.grid)
        mu0 = np.exp(-0.5 * (grid - m0) ** 2 / args.var0)
        mu1 = np.exp(-0.5 * (grid - m1) ** 2 / args.var1)
        density = sb_grid_oracle(grid, mu0, mu1, args.sigma, args.t)
        dx = grid[1] - grid[0]
        mean = float(np.sum(grid * density) * dx)
        std = float(np.sqrt(np.sum((grid - mean) ** 2 * density) * dx))
        print(f"mean {mean:.6f} std {std:.6f}")
        extra = {"mean": mean, "std": std}
        if args.out:
            run_storage.initialize(args.out)
            samples = sample_grid_density(grid, density, args.n, args.seed or 0)
            np.savetxt(run_storage.path(f"sb_oracle_t{args.t}.csv"), samples, delimiter=",")
    else:
        value = parabola_mean(args.t, np.array(_floats(args.m0)), np.array(_floats(args.m1)),
                              np.array(_floats(args.a)))
        print(",".join(f"{v:.6f}" for v in value))
        extra = {"value": value.tolist()}
    _record_command(args, config.run_dir if config else _command_dir(args), config, extra)
    return 0


def cmd_check_grads(args) -> int:
    results = run_suites(trials=args.trials, seed=args.seed or 0, coords=args.coords or None)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<45} max rel err {r.max_rel_error:.2e}")
    failed = [r.name for r in results if not r.passed]
    _record_command(args, _command_dir(args), extra={
        "checks": {r.name: r.max_rel_error for r in results}, "failed": failed,
    })
    if failed:
        raise AcceptanceError("Derivative checks failed", details=", ".join(failed))
    return 0


def cmd_plot(args) -> int:
    out = Path(args.out or settings.output_dir)
    config = None
    run_storage.initialize(out)
    if args.kind == "history":
        plot_history(read_history(run_storage.path("history.csv")), run_storage.path("dual.svg"), args.target)
    elif args.kind == "trajectories":
        plot_trajectories(read_bundle(run_storage.path("trajectories.wlfb")), run_storage.path("trajectories.svg"))
    else:
        config = _run_config(args)
        dataset = _dataset(args, config)
        _, path_params, _ = _checkpoint(args)
        if path_params is None:
            raise UsageError("The checkpoint has no path parameters")
        times = _floats(args.times)
        samples = [sample_at_time(path_params, dataset, t, args.n, derive_seed(config.train.seed, 9, i)).numpy()
                   for i, t in enumerate(times)]
        plot_marginals(samples, times, run_storage.path("marginals.svg"), reference=dataset)
    _record_command(args, out, config, extra={"kind": args.kind})
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval-loo": cmd_eval_loo,
    "simulate": cmd_simulate,
    "action": cmd_action,
    "oracle": cmd_oracle,
    "check-grads": cmd_check_grads,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration (JSON)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", help="run directory (overrides the config)")
    common.add_argument("--workers", type=int, default=None)
    common.add_argument("--log-level", default=None, choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = argparse.ArgumentParser(prog="wlf", description="Wasserstein Lagrangian flow solver")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("train", parents=[common], help="train field and path sampler")
    sub.add_parser("eval-loo", parents=[common], help="leave-one-timepoint-out W1 table")

    p = sub.add_parser("simulate", parents=[common], help="push the first marginal through the dynamics")
    p.add_argument("--checkpoint")
    p.add_argument("--mode", choices=SIMULATION_MODES, default="ode")
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--binary", action="store_true", help="also write trajectories.wlfb")

    p = sub.add_parser("action", parents=[common], help="action of a fixed path (field only)")
    p.add_argument("--checkpoint", help="take the path sampler from a checkpoint instead of straight interpolation")

    p = sub.add_parser("oracle", parents=[common], help="closed-form and grid oracles")
    p.add_argument("--which", choices=["bures", "sinkhorn", "sb-grid", "parabola"], required=True)
    p.add_argument("--m0", default="0,0")
    p.add_argument("--m1", default="3,0")
    p.add_argument("--var0", type=float, default=1.0)
    p.add_argument("--var1", type=float, default=1.0)
    p.add_argument("--a", default="0,4")
    p.add_argument("--t", type=float, default=0.5)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--eps", type=float, default=0.1)
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--grid", type=int, default=401)
    p.add_argument("--n", type=int, default=256)

    p = sub.add_parser("check-grads", parents=[common], help="finite-difference derivative audit")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--coords", type=int, default=DEFAULT_COORDS,
                   help="parameter coordinates per trial, 0 for all")

    p = sub.add_parser("plot", parents=[common], help="SVG figures from a run directory")
    p.add_argument("--kind", choices=["history", "trajectories", "marginals"], default="history")
    p.add_argument("--checkpoint")
    p.add_argument("--times", default="0,0.25,0.5,0.75,1")
    p.add_argument("--n", type=int, default=512)
    p.add_argument("--target", type=float, default=None)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.log_level:
        logging.getLogger().setLevel(args.log_level)
    try:
        return COMMANDS[args.command](args)
    except WLFError as e:
        logger.error(f"{args.command} failed: {json.dumps(e.to_detail().model_dump())}")
        return e.exit_code
    except Exception as e:
        logger.error(f"Unhandled exception: {e}", exc_info=True)
        return 3


if __name__ == "__main__":
    sys.exit(main())
