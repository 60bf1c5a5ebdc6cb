"""Command-line entry point: ``mflow {train,hier-train,sample,eval,reconstruct}``.

Exit codes: 0 success, 1 configuration/input error, 2 numerical divergence.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import metrics
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .data import CSVError, Dataset, atomic_write, format_float, parse_data_spec, train_heldout_split, write_csv
from .objective import Model, sample
from .rng import SplitMix64
from .training import DivergenceError, TrainReport, build_model, lift_through_stages, train_hierarchical, train_single_step

log = logging.getLogger("mflow")

LOG_HEADER = ("epoch", "loss", "nll", "bpd", "recon_mse", "wall_time")
SAMPLE_SEED_FOR_EVAL = 0
EVAL_SAMPLES = 1000


class UsageError(Exception):
    pass


def format_log(report: TrainReport, wall_time: bool) -> str:
    """Per-epoch CSV.  ``wall_time`` is left empty unless requested, keeping reruns byte-identical."""
    lines = [",".join(LOG_HEADER)]
    for r in report.records:
        cells = [str(r.epoch)] + [format_float(v) for v in (r.loss, r.nll, r.bpd, r.recon_mse)]
        cells.append(format_float(r.wall_time) if wall_time else "")
        lines.append(",".join(cells))
    return "".join(line + "\n" for line in lines)


def _load_data(spec: str) -> Dataset:
    try:
        return parse_data_spec(spec)
    except (OSError, CSVError, ValueError) as exc:
        raise UsageError(f"cannot load data {spec!r}: {exc}") from None


def _training_data(cfg: RunConfig) -> Dataset:
    data = _load_data(cfg.data)
    if cfg.D is not None and data.dim != cfg.D:
        raise ConfigError(f"key 'D' is {cfg.D} but data has dimension {data.dim}")
    train, _ = train_heldout_split(data, cfg.seed)
    return train


def cmd_train(config_path: str, out: str | None = None) -> int:
    cfg = load_config(config_path)
    out = out or cfg.out
    data = _training_data(cfg)
    if not 1 <= cfg.d < data.dim:
        raise ConfigError(f"key 'd' must satisfy 1 <= d < D={data.dim}")
    os.makedirs(out, exist_ok=True)
    model = build_model(cfg.flow, data.dim, cfg.d, cfg.seed, cfg.loss.variant)
    report = train_single_step(model, data, cfg.loss, cfg.epochs, min(cfg.batch, data.n), cfg.seed, cfg.optim)
    save_checkpoint(os.path.join(out, "model.ckpt"), model, cfg.echo_lines())
    atomic_write(os.path.join(out, "train_log.csv"), format_log(report, cfg.log_wall_time))
    return 0


def cmd_hier_train(config_path: str, out: str | None = None) -> int:
    cfg = load_config(config_path, require_plan=True)
    out = out or cfg.out
    data = _training_data(cfg)
    if cfg.D is None:
        first = cfg.plan.stages[0]
        if first.input_dim is not None and first.input_dim != data.dim:
            raise ConfigError(f"stage 1: input dim D={first.input_dim} does not match data dimension {data.dim}")
        first.input_dim = data.dim
    try:
        cfg.plan.validate(data.dim)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    os.makedirs(out, exist_ok=True)

    def on_stage_done(k, model, report):
        save_checkpoint(os.path.join(out, f"stage{k}.ckpt"), model, cfg.echo_lines())
        atomic_write(os.path.join(out, f"stage{k}_log.csv"), format_log(report, cfg.log_wall_time))

    train_hierarchical(cfg.plan, data, cfg.seed, cfg.batch, cfg.optim, on_stage_done)
    return 0


def _load_models(paths: list[str]) -> list[Model]:
    return [load_checkpoint(p)[0] for p in paths]


def draw_samples(models: list[Model], n: int, seed: int) -> np.ndarray:
    """Sample from one model, or from a chain of hierarchical stages (first stage first)."""
    if len(models) == 1:
        m = models[0]
        return sample(m.flow, m.split, n, seed, m.prior_flow)
    for k in range(1, len(models)):
        if models[k].split.D != models[k - 1].split.d:
            raise UsageError(f"stage {k + 1} input dim {models[k].split.D} != stage {k} manifold dim {models[k - 1].split.d}")
    last = models[-1]
    u = sample(last.flow, last.split, n, seed, last.prior_flow)
    return lift_through_stages(models[:-1], u) if n else np.zeros((0, models[0].split.D))


def cmd_sample(ckpt_paths: list[str], n: int, seed: int, out_csv: str) -> int:
    models = _load_models(ckpt_paths)
    x = draw_samples(models, n, seed)
    D = models[0].split.D
    write_csv(out_csv, x, header=[f"x{i + 1}" for i in range(D)])
    return 0


def _check_dims(model: Model, data: Dataset) -> None:
    if data.dim != model.split.D:
        raise UsageError(f"data dimension {data.dim} does not match model dimension {model.split.D}")


def evaluate_checkpoint(model: Model, data: Dataset, seed: int = SAMPLE_SEED_FOR_EVAL) -> metrics.EvalSummary:
    samples = None
    if data.descriptor is not None:
        samples = sample(model.flow, model.split, EVAL_SAMPLES, seed, model.prior_flow)
    return metrics.evaluate(model, data, samples, data.descriptor)


def cmd_eval(ckpt_path: str, dataset_spec: str, seed: int = SAMPLE_SEED_FOR_EVAL) -> int:
    model, _ = load_checkpoint(ckpt_path)
    data = _load_data(dataset_spec)
    _check_dims(model, data)
    print(evaluate_checkpoint(model, data, seed).csv_row())
    return 0


def cmd_reconstruct(ckpt_path: str, dataset_spec: str, out_csv: str) -> int:
    from .objective import reconstruct

    model, _ = load_checkpoint(ckpt_path)
    data = _load_data(dataset_spec)
    _check_dims(model, data)
    x_rec = reconstruct(model.flow, data.points, model.split)
    D = data.dim
    header = [f"x{i + 1}" for i in range(D)] + [f"xrec{i + 1}" for i in range(D)]
    write_csv(out_csv, np.hstack([data.points, x_rec]), header=header)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mflow", description="Manifold learning with pixel-rejection normalizing flows.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="single-step pixel-rejection training")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help="output directory (overrides the config's 'out')")

    h = sub.add_parser("hier-train", help="hierarchical stage-wise training")
    h.add_argument("--config", required=True)
    h.add_argument("--out")

    s = sub.add_parser("sample", help="generate samples from a checkpoint")
    s.add_argument("--ckpt", required=True, action="append",
                   help="checkpoint; repeat in stage order to sample through a hierarchy")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output CSV path")

    e = sub.add_parser("eval", help="print nll,bpd,recon_mse,manifold_dist as one CSV row")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True, help="CSV path or generator spec, e.g. circle:n=1000,sigma=0.01,seed=1")
    e.add_argument("--seed", type=int, default=SAMPLE_SEED_FOR_EVAL, help="seed for the manifold-distance samples")

    r = sub.add_parser("reconstruct", help="write x and its reconstruction side by side")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--out", required=True)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "train":
            return cmd_train(args.config, args.out)
        if args.command == "hier-train":
            return cmd_hier_train(args.config, args.out)
        if args.command == "sample":
            if args.n < 0:
                raise UsageError("--n must be >= 0")
            return cmd_sample(args.ckpt, args.n, args.seed, args.out)
        if args.command == "eval":
            return cmd_eval(args.ckpt, args.data, args.seed)
        if args.command == "reconstruct":
            return cmd_reconstruct(args.ckpt, args.data, args.out)
    except DivergenceError as exc:
        print(f"mflow: diverged: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, CheckpointError, UsageError) as exc:
        print(f"mflow: error: {exc}", file=sys.stderr)
        return 1
    return 1


if __name__ == "__main__":
    sys.exit(main())
