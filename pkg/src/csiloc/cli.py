"""Command-line driver.

Every command reads an INI config (``--config``), writes into ``--out`` and
stores the canonical config plus its hash next to the results.  Exit codes:

    0 success          2 usage error          3 bad config
    4 missing input    5 unreadable file      6 training diverged
    7 invalid input    1 anything else
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import formats, harness
from .channel_sim import CsiDataset
from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .formats import atomic_write
from .positioning import network_cost, start_training, train_position_net
from .tracking import final_step_mse, pnp_track_batch, refine_trajectory

log = logging.getLogger("csiloc")

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_CONFIG = 0, 1, 2, 3
EXIT_MISSING, EXIT_FORMAT, EXIT_DIVERGED, EXIT_INVALID = 4, 5, 6, 7


class MissingArtifact(FileNotFoundError):
    pass


class Run:
    def __init__(self, cfg: ExperimentConfig, out: Path):
        self.cfg = cfg
        self.out = out

    def path(self, name: str) -> Path:
        return self.out / name

    def need(self, *names: str) -> list[Path]:
        """Check every input exists before doing any work."""
        paths = [self.path(n) for n in names]
        missing = [str(p) for p in paths if not p.exists()]
        if missing:
            raise MissingArtifact("missing input artifact(s): " + ", ".join(missing)
                                  + " (run the producing command first)")
        return paths

    def write_config(self) -> None:
        atomic_write(self.path("config.ini"), dump_config(self.cfg).encode())
        atomic_write(self.path("config.hash"), (self.cfg.hash() + "\n").encode())

    def metrics(self, name: str, records) -> None:
        harness.write_metrics(self.path(name), records)
        log.info("wrote %s", self.path(name))


def _model_inputs(run: Run, args):
    if not getattr(args, "model", None):
        return None, None
    path = Path(args.model)
    if not path.exists():
        raise MissingArtifact(f"missing position model {path}")
    return formats.load_model(path), harness.make_environment(run.cfg)


def _trajectory_sets(run: Run) -> harness.TrajectorySets:
    tr, va, te = run.need("traj_train.trj", "traj_val.trj", "traj_test.trj")
    return harness.TrajectorySets(formats.load_trajectories(tr), formats.load_trajectories(va),
                                  formats.load_trajectories(te))


# ---------------------------------------------------------------------------
# commands


def cmd_synth_env(run: Run, args) -> None:
    env = harness.make_environment(run.cfg)
    desc = {"bs_position": [float(v) for v in env.bs_position],
            "scatterers": np.asarray(env.scatterers).tolist(),
            "bounds": list(env.bounds), "seed": env.seed,
            "config_hash": run.cfg.hash()}
    atomic_write(run.path("environment.json"),
                 (json.dumps(desc, sort_keys=True, indent=1) + "\n").encode())


def cmd_gen_data(run: Run, args) -> None:
    env = harness.make_environment(run.cfg)
    for name, ds in zip(("train", "val", "test"), harness.make_datasets(run.cfg, env)):
        formats.save_csi_dataset(run.path(f"{name}.csi"), ds)


def _load_csi(path) -> CsiDataset:
    return formats.load_csi_dataset(path)


def cmd_train_position(run: Run, args) -> None:
    tr, va = run.need("train.csi", "val.csi")
    train, val = _load_csi(tr), _load_csi(va)
    ckpt = run.path(f"checkpoint_{args.variant}.pnm")
    state = None
    if args.resume:
        if not ckpt.exists():
            raise MissingArtifact(f"no checkpoint to resume from at {ckpt}")
        state = formats.load_checkpoint(ckpt)

    def save_every(st):
        if args.checkpoint_every and st.next_epoch % args.checkpoint_every == 0:
            formats.save_checkpoint(ckpt, st)

    cfg = run.cfg
    config = cfg.network.variant(args.variant)
    hyper = cfg.train.hyper(cfg.seeds.train)
    if state is None:
        state = start_training(config, hyper)
    model = train_position_net(config, train, val, hyper, state=state,
                               stop_at=args.stop_at, on_epoch=save_every)
    model.meta.update(variant=args.variant, config_hash=cfg.hash())
    if state.next_epoch < hyper.epochs:
        formats.save_checkpoint(ckpt, state)
        log.info("stopped at epoch %d; resume with --resume", state.next_epoch)
    formats.save_model(run.path(f"model_{args.variant}.pnm"), model)
    harness.write_csv(run.path(f"train_history_{args.variant}.csv"),
                      ("epoch", "train_loss", "val_mse_m2", "val_mse_mm2"),
                      ((e, t, v, v * 1e6) for e, t, v in state.history))


def cmd_eval_position(run: Run, args) -> None:
    mp, tp = run.need(f"model_{args.variant}.pnm", "test.csi")
    model, test = formats.load_model(mp), _load_csi(tp)
    records, err = harness.evaluate_position(run.cfg, model, test,
                                             label=f"{run.cfg.label}:{args.variant}")
    run.metrics(f"position_metrics_{args.variant}.csv", records)
    harness.emit_cdf(err, run.path(f"position_cdf_{args.variant}.csv"))


def cmd_gen_traj(run: Run, args) -> None:
    sets = harness.make_trajectories(run.cfg)
    for name in ("train", "val", "test"):
        formats.save_trajectories(run.path(f"traj_{name}.trj"), getattr(sets, name))


def cmd_train_denoisers(run: Run, args) -> None:
    (tp,) = run.need("traj_train.trj")
    bank = harness.train_denoisers(run.cfg, formats.load_trajectories(tp))
    formats.save_bank(run.path("bank.dnb"), bank)
    h = run.cfg.hash()
    records = [harness.MetricsRecord(f"{run.cfg.label}:denoiser@{m.level * 1e3:g}mm",
                                     "best_val_mse", m.meta["best_val_mse"], "m2",
                                     run.cfg.seeds.base, h) for m in bank]
    run.metrics("denoiser_metrics.csv", records)


def cmd_track(run: Run, args) -> None:
    (bp,) = run.need("bank.dnb")
    sets = _trajectory_sets(run)
    bank = formats.load_bank(bp)
    model, env = _model_inputs(run, args)
    run.metrics("tracking_metrics.csv", harness.run_tracking(run.cfg, bank, sets, model, env))
    level = harness.matched_level(run.cfg, sets, model, env)
    est = harness.position_estimates(run.cfg, sets.test, 2, model, env)
    formats.save_trajectories(run.path("tracked.trj"), refine_trajectory(bank, est, level))


def cmd_pnp_track(run: Run, args) -> None:
    (bp,) = run.need("bank.dnb")
    sets = _trajectory_sets(run)
    bank = formats.load_bank(bp)
    model, env = _model_inputs(run, args)
    cfg = run.cfg
    snr = args.snr
    est = harness.position_estimates(cfg, sets.test, 2, model, env)
    steps = harness.imu_steps(cfg, sets.test, snr, 2)
    res = pnp_track_batch(bank, est, steps, harness.pnp_config(cfg))
    h, s = cfg.hash(), cfg.seeds.base
    label = f"{cfg.label}@{snr:g}dB"
    records = [
        harness.MetricsRecord(label, "positioning_final_mse", final_step_mse(est, sets.test), "m2", s, h),
        harness.MetricsRecord(label, "pnp_final_mse", final_step_mse(res.L, sets.test), "m2", s, h),
        harness.MetricsRecord(label, "mean_iterations", float(np.mean(res.iterations)), "count", s, h),
        harness.MetricsRecord(label, "converged_fraction", float(np.mean(res.converged)), "1", s, h),
    ]
    run.metrics(f"pnp_metrics_{snr:g}dB.csv", records)
    formats.save_trajectories(run.path(f"pnp_tracked_{snr:g}dB.trj"), res.L)


def cmd_sweep_snr(run: Run, args) -> None:
    (bp,) = run.need("bank.dnb")
    sets = _trajectory_sets(run)
    bank = formats.load_bank(bp)
    model, env = _model_inputs(run, args)
    snrs = args.snr if args.snr else None
    points, records = harness.run_snr_sweep(run.cfg, bank, sets, snrs, model, env)
    harness.write_csv(run.path("snr_sweep.csv"), harness.SWEEP_COLUMNS,
                      harness.sweep_rows(points, run.cfg.hash()))
    run.metrics("snr_sweep_metrics.csv", records)


def cmd_ablation(run: Run, args) -> None:
    seeds = args.seeds if args.seeds else [run.cfg.seeds.base]
    results = []
    for s in seeds:
        cfg = run.cfg if s == run.cfg.seeds.base else run.cfg.with_seed(s)
        results.append(harness.run_ablation(cfg))
    harness.write_csv(run.path("ablation.csv"), harness.ABLATION_COLUMNS,
                      harness.ablation_rows(results))
    held = sum(r.ordered for r in results)
    log.info("ordering full <= aarb0 <= pb0_aarb0 held for %d of %d seeds", held, len(results))


def cmd_flops(run: Run, args) -> None:
    rows = network_cost(run.cfg.network.variant(args.variant))
    total_p = sum(r[2] for r in rows)
    total_f = sum(r[3] for r in rows)
    harness.write_csv(run.path(f"flops_{args.variant}.csv"), ("layer", "kind", "params", "flops"),
                      rows + [("total", "", total_p, total_f)])
    if not args.quiet:
        print(f"{args.variant}: {total_p} parameters, {total_f} FLOPs")


COMMANDS = {
    "synth-env": (cmd_synth_env, "build the synthetic environment and describe it as JSON"),
    "gen-data": (cmd_gen_data, "sample train/val/test CSI datasets"),
    "train-position": (cmd_train_position, "train the positioning network"),
    "eval-position": (cmd_eval_position, "test-set MSE and error CDF of a trained model"),
    "gen-traj": (cmd_gen_traj, "sample train/val/test trajectory sets"),
    "train-denoisers": (cmd_train_denoisers, "train the denoiser bank on the noise grid"),
    "track": (cmd_track, "refine positioning trajectories with the denoiser prior"),
    "pnp-track": (cmd_pnp_track, "fuse positioning and IMU steps with PnP-ADMM"),
    "sweep-snr": (cmd_sweep_snr, "final-step MSE vs IMU SNR for all tracking methods"),
    "ablation": (cmd_ablation, "train and compare the three network variants"),
    "flops": (cmd_flops, "per-layer parameter and FLOP counts"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="override the base seed")
    common.add_argument("--out", help="output directory (overrides [run] out)")
    common.add_argument("--quiet", action="store_true", help="only log warnings and errors")

    parser = argparse.ArgumentParser(prog="csiloc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        if name in ("train-position", "eval-position", "flops"):
            p.add_argument("--variant", default="full", choices=harness.VARIANTS)
        if name == "train-position":
            p.add_argument("--resume", action="store_true", help="continue from the saved checkpoint")
            p.add_argument("--stop-at", type=int, help="stop before this epoch and save a checkpoint")
            p.add_argument("--checkpoint-every", type=int, default=0, metavar="N",
                           help="save a resumable checkpoint every N epochs")
        if name in ("track", "pnp-track", "sweep-snr"):
            p.add_argument("--model", help="position model file; default injects Gaussian noise")
        if name == "pnp-track":
            p.add_argument("--snr", type=float, default=20.0, help="IMU SNR in dB")
        if name == "sweep-snr":
            p.add_argument("--snr", type=float, nargs="+", help="SNR grid in dB (default from config)")
        if name == "ablation":
            p.add_argument("--seeds", type=int, nargs="+", help="base seeds to repeat over")
    return parser


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, FileNotFoundError):
        return EXIT_MISSING
    if isinstance(exc, formats.FormatError):
        return EXIT_FORMAT
    if isinstance(exc, FloatingPointError):
        return EXIT_DIVERGED
    if isinstance(exc, ValueError):
        return EXIT_INVALID
    return EXIT_ERROR


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr,
                        force=True)
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        out = Path(args.out or cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        run = Run(cfg, out)
        COMMANDS[args.command][0](run, args)
        run.write_config()
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes
        code = _exit_code(exc)
        log.error("%s: %s", type(exc).__name__, exc)
        if code == EXIT_ERROR:
            log.debug("traceback", exc_info=True)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
