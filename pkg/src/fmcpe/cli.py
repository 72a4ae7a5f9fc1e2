"""Command line entry point: ``fmcpe {generate,train-baseline,run,metrics,dump-samples}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .baseline import train_npe
from .core_math import RandomSource
from .harness import (
    ExperimentConfig,
    apply_overrides,
    dump_posterior_samples,
    load_config,
    load_model,
    metrics_from_dump,
    prepare_experiment,
    read_metrics_csv,
    run_experiment,
    write_metrics_csv,
)
from .flow_matching import FmcpeModel, sample_posterior_model
from .metrics import MetricReport
from .nn import write_json
from .tasks import export_csv, ingest_csv


# flag name -> config key
_FLAG_KEYS = {
    "task": "task",
    "n_sim": "n_sim",
    "n_cal": "n_cal",
    "seeds": "seeds",
    "n_test": "n_test",
    "methods": "methods",
    "out": "out",
    "sigma": "sigma",
    "ode_steps": "ode_steps",
}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat 'key = value' config file")
    p.add_argument("--task", help="gaussian | pendulum | csv:<dir with sim.csv and real.csv>")
    p.add_argument("--n-sim", dest="n_sim")
    p.add_argument("--n-cal", dest="n_cal", help="comma separated, e.g. 10,50,200,1000")
    p.add_argument("--seeds", help="comma separated seeds")
    p.add_argument("--n-test", dest="n_test")
    p.add_argument("--methods", help="comma separated subset of npe,mfnpe,fmcpe")
    p.add_argument("--out")
    p.add_argument("--sigma")
    p.add_argument("--ode-steps", dest="ode_steps")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    p.add_argument("-v", "--verbose", action="store_true")


def config_from_args(args) -> ExperimentConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise SystemExit(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k] = v
    for flag, key in _FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = str(value)
    if args.config:
        return load_config(args.config, overrides)
    return apply_overrides(ExperimentConfig(), overrides)


def cmd_generate(cfg: ExperimentConfig, args) -> int:
    ctx = prepare_experiment(cfg)
    out = Path(cfg.out)
    for name, ds in (("sim", ctx.sim), ("cal_pool", ctx.pool), ("test", ctx.test)):
        export_csv(ds, out / f"{name}.csv")
    print(f"wrote sim/cal_pool/test CSVs to {out}")
    return 0


def cmd_train_baseline(cfg: ExperimentConfig, args) -> int:
    ctx = prepare_experiment(cfg)
    out = Path(cfg.out) / "checkpoints"
    for seed in cfg.seeds:
        model, report = train_npe(ctx.sim, cfg.npe_config(), ctx.seed_rng(seed).split("baseline"), transforms=ctx.transforms)
        path = write_json(out / f"baseline_seed{seed}.json", model.to_dict())
        print(f"seed {seed}: {report.epochs_run} epochs, val nll {report.best_val_nll:.4f} -> {path}")
    return 0


def cmd_run(cfg: ExperimentConfig, args) -> int:
    arts = run_experiment(cfg)
    for r in arts.reports:
        print(",".join(r.csv_row()))
    for f in arts.failures:
        print(f"FAILED: {f}", file=sys.stderr)
    return 0 if arts.ok else 1


def cmd_metrics(cfg: ExperimentConfig, args) -> int:
    """Recompute metric rows from the ``samples/eval_*.csv`` dumps of a finished run."""
    out = Path(cfg.out)
    test = ingest_csv(out / "test.csv", provenance="test")
    old = {(r.method, r.n_cal, r.seed): r for r in read_metrics_csv(out / "metrics.csv")} if (out / "metrics.csv").exists() else {}
    reports = []
    for dump in sorted((out / "samples").glob("eval_*.csv")):
        method, ncal, seed = dump.stem[len("eval_"):].split("_")
        n_cal, seed = int(ncal[len("ncal"):]), int(seed[len("seed"):])
        rng = RandomSource(cfg.data_seed).split(f"seed{seed}").split(f"ncal{n_cal}").split(method).split("eval").split("jc2st")
        values = metrics_from_dump(test, dump, rng, cfg.metrics, cfg.w2_standardize, cfg.jc2st_folds)
        prev = old.get((method, n_cal, seed))
        reports.append(MetricReport(method, cfg.task_label, n_cal, seed, seconds=prev.seconds if prev else None, **values))
    path = write_metrics_csv(reports, Path(args.metrics_out) if args.metrics_out else out / "metrics_recomputed.csv")
    print(f"wrote {len(reports)} rows to {path}")
    return 0


def cmd_dump_samples(cfg: ExperimentConfig, args) -> int:
    model = load_model(args.checkpoint)
    if args.observations:
        obs = ingest_csv(args.observations).obs
    else:
        obs = ingest_csv(Path(cfg.out) / "test.csv").obs
    ids = [int(s) for s in args.points.split(",")] if args.points else list(range(obs.shape[0]))
    baseline = model.baseline if isinstance(model, FmcpeModel) else model
    tf = baseline.transforms
    if isinstance(model, FmcpeModel):
        def draw(y_m, rng):
            return sample_posterior_model(model, y_m, rng)
    else:
        draw = model.sample_model
    path = dump_posterior_samples(
        lambda y, r: tf.theta_from_model(draw(tf.obs_to_model(y), r)),
        obs[ids], ids, args.n, RandomSource(args.seed).split("dump"), args.path, args.method, baseline.p,
    )
    print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fmcpe", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, help_ in (
        ("generate", cmd_generate, "simulate datasets and write them as CSV"),
        ("train-baseline", cmd_train_baseline, "pretrain the simulation posterior for each seed"),
        ("run", cmd_run, "full experiment grid"),
        ("metrics", cmd_metrics, "recompute metrics from evaluation dumps"),
        ("dump-samples", cmd_dump_samples, "posterior draws from a checkpoint"),
    ):
        p = sub.add_parser(name, help=help_)
        _add_common(p)
        p.set_defaults(func=fn)
        if name == "metrics":
            p.add_argument("--metrics-out")
        if name == "dump-samples":
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--observations", help="CSV with obs columns; default <out>/test.csv")
            p.add_argument("--points", help="comma separated row ids; default all")
            p.add_argument("--n", type=int, default=2000)
            p.add_argument("--seed", type=int, default=0)
            p.add_argument("--method", default="fmcpe")
            p.add_argument("--path", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
    except (KeyError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return args.func(cfg, args)


if __name__ == "__main__":
    sys.exit(main())
