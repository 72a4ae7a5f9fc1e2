"""Experiment orchestration: nested calibration sets, method cells, metric tables, dumps."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy

from . import __version__
from .baseline import ConditionalDensityModel, NpeConfig, finetune, train_npe, train_npe_calibration_only
from .core_math import PairTransforms, RandomSource, standardize_fit
from .flow_matching import (
    FieldConfig,
    FmcpeConfig,
    FmcpeModel,
    OdeConfig,
    sample_posterior_model,
    train_fmcpe,
)
from .metrics import METRIC_COLUMNS, JointSampleSet, MetricReport, jc2st, mse, w2_joint
from .nn import read_json, write_json
from .tasks import PairDataset, Task, build_datasets, export_csv, make_task

logger = logging.getLogger(__name__)

METHODS = ("npe", "mfnpe", "fmcpe")
METRICS = ("w2", "jc2st", "mse")


@dataclass
class ExperimentConfig:
    task: str = "gaussian"
    n_sim: int = 50_000
    n_cal: tuple[int, ...] = (10, 50, 200, 1000)
    n_cal_pool: int = 0  # 0: largest calibration size
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    data_seed: int = 0
    n_test: int = 2000
    methods: tuple[str, ...] = METHODS
    metrics: tuple[str, ...] = METRICS
    mse_samples: int = 64
    out: str = "runs/experiment"
    noise_std: float = 0.1
    well_specified: bool = False
    # baseline density model
    head: str = "gaussian"
    npe_hidden: tuple[int, ...] = (128, 128)
    npe_lr: float = 1e-3
    npe_batch_size: int = 64
    npe_max_epochs: int = 200
    npe_patience: int = 20
    # flow matching
    sigma: float = 0.1
    ode_steps: int = 64
    ode_method: str = "rk4"
    train_ode_steps: int = 64
    fm_hidden: tuple[int, ...] = (128, 128, 128)
    fm_lr: float = 3e-4
    fm_batch_size: int = 32
    fm_max_steps: int = 20_000
    fm_min_steps: int = 0
    fm_eval_every: int = 50
    fm_patience: int = 1000
    clip: float = 1.0
    # evaluation and outputs
    w2_standardize: bool = True
    jc2st_folds: int = 3
    dump_points: tuple[int, ...] = (0,)
    dump_samples: int = 2000
    dump_eval_draws: str = "single"  # single | all | none
    save_checkpoints: bool = True
    record_seconds: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        sizes = list(self.n_cal)
        if not sizes or any(b <= a for a, b in zip(sizes, sizes[1:])):
            raise ValueError("calibration sizes must be strictly increasing")
        if self.n_cal_pool and max(sizes) > self.n_cal_pool:
            raise ValueError("calibration sizes exceed the calibration pool")
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise ValueError(f"unknown methods {sorted(bad)}")
        bad = set(self.metrics) - set(METRICS)
        if bad:
            raise ValueError(f"unknown metrics {sorted(bad)}")
        if self.dump_eval_draws not in ("single", "all", "none"):
            raise ValueError("dump_eval_draws must be single, all or none")

    @property
    def pool_size(self) -> int:
        return self.n_cal_pool or max(self.n_cal)

    @property
    def task_label(self) -> str:
        return "csv" if self.task.startswith("csv:") else self.task

    def npe_config(self) -> NpeConfig:
        return NpeConfig(
            head=self.head, hidden=tuple(self.npe_hidden), lr=self.npe_lr, batch_size=self.npe_batch_size,
            max_epochs=self.npe_max_epochs, patience=self.npe_patience, clip=self.clip,
        )

    def fmcpe_config(self) -> FmcpeConfig:
        return FmcpeConfig(
            sigma=self.sigma, batch_size=self.fm_batch_size, lr=self.fm_lr, clip=self.clip,
            max_steps=self.fm_max_steps, min_steps=self.fm_min_steps, eval_every=self.fm_eval_every,
            patience=self.fm_patience, field_cfg=FieldConfig(hidden=tuple(self.fm_hidden)),
            train_ode=OdeConfig("euler", self.train_ode_steps), sample_ode=OdeConfig(self.ode_method, self.ode_steps),
        )

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


# -- config files ------------------------------------------------------------

def _coerce(name: str, raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("true", "yes", "1"):
            return True
        if raw.lower() in ("false", "no", "0"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if isinstance(default, tuple):
        items = [s.strip() for s in raw.split(",") if s.strip()]
        if default and isinstance(default[0], int):
            return tuple(int(s) for s in items)
        if name in ("n_cal", "seeds", "dump_points", "npe_hidden", "fm_hidden"):
            return tuple(int(s) for s in items)
        return tuple(items)
    if isinstance(default, int):
        return int(float(raw)) if "e" in raw.lower() else int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def apply_overrides(cfg: ExperimentConfig, values: dict[str, str]) -> ExperimentConfig:
    """Return a copy of ``cfg`` with string-valued overrides parsed by field type."""
    defaults = {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg)}
    parsed = {}
    for key, raw in values.items():
        key = key.strip().replace("-", "_")
        if key not in defaults:
            raise KeyError(f"unknown config key {key!r}")
        parsed[key] = _coerce(key, raw, defaults[key])
    return dataclasses.replace(cfg, **parsed)


def parse_config_text(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment; lists are comma separated."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in values:
            raise ValueError(f"config line {lineno}: duplicate key {key!r}")
        values[key] = value.strip()
    return values


def load_config(path: str | Path, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    values = parse_config_text(Path(path).read_text(encoding="utf-8"))
    values.update(overrides or {})
    return apply_overrides(ExperimentConfig(), values)


# -- nested calibration sets --------------------------------------------------

@dataclass
class NestedCalibrationFamily:
    """Per seed, a map from calibration size to pool indices; smaller sets are prefixes of larger ones."""

    indices: dict[int, dict[int, np.ndarray]]

    def subset(self, pool: PairDataset, seed: int, size: int) -> PairDataset:
        sub = pool.subset(self.indices[seed][size])
        return PairDataset(sub.theta, sub.obs, "calibration")


def build_nested_calibration(pool: PairDataset, sizes, seeds, rng: RandomSource) -> NestedCalibrationFamily:
    sizes = sorted(int(s) for s in sizes)
    if sizes and sizes[-1] > len(pool):
        raise ValueError(f"calibration size {sizes[-1]} exceeds pool of {len(pool)}")
    out = {}
    for seed in seeds:
        perm = rng.split(f"seed{seed}").permutation(len(pool))
        out[int(seed)] = {s: perm[:s].copy() for s in sizes}
    return NestedCalibrationFamily(out)


# -- sample dumps -------------------------------------------------------------

def dump_posterior_samples(
    sampler: Callable[[np.ndarray, RandomSource], np.ndarray],
    test_points: np.ndarray,
    point_ids,
    n_per_point: int,
    rng: RandomSource,
    path: str | Path,
    method: str,
    p: int,
) -> Path:
    """Write ``n_per_point`` draws for each observation row as ``method,point_id,theta_*`` rows.

    ``sampler`` maps a batch of observations (original coordinates, one row per
    requested draw) to one parameter draw per row.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "point_id"] + [f"theta_{i}" for i in range(p)])
        for pid, y in zip(point_ids, np.atleast_2d(test_points)):
            if n_per_point == 0:
                continue
            draws = sampler(np.repeat(y[None, :], n_per_point, axis=0), rng)
            for row in draws:
                w.writerow([method, int(pid)] + [format(v, ".17g") for v in row])
    return path


def read_sample_dump(path: str | Path) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Return (methods, point_ids, theta rows) of a dump written by :func:`dump_posterior_samples`."""
    methods, ids, rows = [], [], []
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        p = len(header) - 2
        for lineno, row in enumerate(reader, start=2):
            if len(row) != p + 2:
                raise ValueError(f"{path}:{lineno}: expected {p + 2} fields")
            methods.append(row[0])
            ids.append(int(row[1]))
            rows.append([float(v) for v in row[2:]])
    return methods, np.asarray(ids, dtype=np.int64), np.asarray(rows, dtype=np.float64).reshape(-1, p)


# -- experiment ---------------------------------------------------------------

@dataclass
class ExperimentContext:
    cfg: ExperimentConfig
    task: Task
    sim: PairDataset
    pool: PairDataset
    test: PairDataset
    transforms: PairTransforms
    family: NestedCalibrationFamily
    root: RandomSource
    baselines: dict[int, ConditionalDensityModel] = field(default_factory=dict)

    def seed_rng(self, seed: int) -> RandomSource:
        return self.root.split(f"seed{seed}")

    def baseline(self, seed: int) -> ConditionalDensityModel:
        if seed not in self.baselines:
            if len(self.sim) == 0:
                raise ValueError("no simulations: cannot pretrain the simulation posterior")
            model, report = train_npe(self.sim, self.cfg.npe_config(), self.seed_rng(seed).split("baseline"), transforms=self.transforms)
            logger.info("seed %d: baseline trained (%d epochs, val nll %.4f)", seed, report.epochs_run, report.best_val_nll)
            self.baselines[seed] = model
        return self.baselines[seed]


def prepare_experiment(cfg: ExperimentConfig) -> ExperimentContext:
    root = RandomSource(cfg.data_seed)
    task = make_task(cfg.task, root.split("task"), noise_std=cfg.noise_std, well_specified=cfg.well_specified)
    sim, pool, test = build_datasets(task, root.split("datasets"), cfg.n_sim, cfg.pool_size, cfg.n_test)
    if len(sim) >= 2:
        transforms = PairTransforms.fit(sim.theta, sim.obs, task.bounds)
    else:
        transforms = PairTransforms.fit(pool.theta, pool.obs, task.bounds)
    family = build_nested_calibration(pool, cfg.n_cal, cfg.seeds, root.split("nested"))
    return ExperimentContext(cfg, task, sim, pool, test, transforms, family, root)


@dataclass
class CellResult:
    report: MetricReport
    model: object
    draws: np.ndarray  # (n_test, M, p), original coordinates


def _sampler_for(method: str, model) -> Callable[[np.ndarray, RandomSource], np.ndarray]:
    """Observation rows (model space) -> one model-space draw per row."""
    if method == "fmcpe":
        return lambda y_m, rng: sample_posterior_model(model, y_m, rng)
    return lambda y_m, rng: model.sample_model(y_m, rng)


def _transforms_for(method: str, model) -> PairTransforms:
    # calibration-only models carry their own standardization
    return model.baseline.transforms if method == "fmcpe" else model.transforms


def train_method(ctx: ExperimentContext, seed: int, n_cal: int, method: str, rng: RandomSource):
    cfg = ctx.cfg
    cal = ctx.family.subset(ctx.pool, seed, n_cal)
    if method == "npe":
        # never sees a simulation, so its standardization comes from its own pairs
        return train_npe_calibration_only(cal, cfg.npe_config(), rng, bounds=ctx.task.bounds)
    if method == "mfnpe":
        return finetune(ctx.baseline(seed), cal, cfg.npe_config(), rng)
    if method == "fmcpe":
        model, _ = train_fmcpe(cal, ctx.task, ctx.baseline(seed), cfg.fmcpe_config(), rng)
        return model
    raise ValueError(f"unknown method {method!r}")


def evaluate_method(ctx: ExperimentContext, method: str, model, rng: RandomSource) -> tuple[dict[str, float], np.ndarray]:
    cfg, tf, test = ctx.cfg, _transforms_for(method, model), ctx.test
    m = cfg.mse_samples if "mse" in cfg.metrics else 1
    sampler = _sampler_for(method, model)
    y_m = tf.obs_to_model(test.obs)
    draws_m = sampler(np.repeat(y_m, m, axis=0), rng.split("draws"))
    draws = tf.theta_from_model(draws_m).reshape(len(test), m, -1)
    single = draws[:, 0, :]
    real = JointSampleSet.from_pairs(test.theta, test.obs, "real")
    gen = JointSampleSet.from_pairs(single, test.obs, "generated")
    out = {}
    if "w2" in cfg.metrics:
        if cfg.w2_standardize:
            st = standardize_fit(real.vectors)
            out["w2"] = w2_joint(real.standardize(st), gen.standardize(st), subsample=True)
        else:
            out["w2"] = w2_joint(real, gen, subsample=True)
    if "jc2st" in cfg.metrics:
        out["jc2st"] = jc2st(real, gen, rng.split("jc2st"), folds=cfg.jc2st_folds)
    if "mse" in cfg.metrics:
        out["mse"] = mse(draws, test.theta)
    return out, draws


def run_cell(ctx: ExperimentContext, seed: int, n_cal: int, method: str) -> CellResult:
    """Train and evaluate one (method, N_cal, seed) cell from its own named streams."""
    cell_rng = ctx.seed_rng(seed).split(f"ncal{n_cal}").split(method)
    if method in ("mfnpe", "fmcpe"):
        ctx.baseline(seed)  # pretraining is shared across sizes, keep it out of the cell timing
    start = time.perf_counter()
    model = train_method(ctx, seed, n_cal, method, cell_rng.split("train"))
    values, draws = evaluate_method(ctx, method, model, cell_rng.split("eval"))
    seconds = time.perf_counter() - start if ctx.cfg.record_seconds else None
    report = MetricReport(method, ctx.cfg.task_label, n_cal, seed, seconds=seconds, **values)
    return CellResult(report, model, draws)


@dataclass
class RunArtifacts:
    out: Path
    reports: list[MetricReport]
    failures: list[dict]
    files: dict[str, str]

    @property
    def ok(self) -> bool:
        return not self.failures


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_metrics_csv(reports: list[MetricReport], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in reports:
            w.writerow(r.csv_row())
    return path


def read_metrics_csv(path: str | Path) -> list[MetricReport]:
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        return [MetricReport.from_row(row) for row in csv.DictReader(fh)]


def _save_model(method: str, model, path: Path, baseline_ref: str | None) -> None:
    if isinstance(model, FmcpeModel):
        payload = model.to_dict()
        if baseline_ref is not None:
            payload["baseline"] = {"ref": baseline_ref}
        write_json(path, payload)
    else:
        write_json(path, model.to_dict())


def load_model(path: str | Path):
    """Load a baseline or FMCPE checkpoint, resolving a by-reference baseline."""
    path = Path(path)
    d = read_json(path)
    if d.get("format") == "fmcpe-model":
        if "ref" in d["baseline"]:
            d["baseline"] = read_json(path.parent / d["baseline"]["ref"])
        return FmcpeModel.from_dict(d)
    return ConditionalDensityModel.from_dict(d)


def run_experiment(cfg: ExperimentConfig) -> RunArtifacts:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    ctx = prepare_experiment(cfg)
    export_csv(ctx.test, out / "test.csv")
    reports, failures = [], []
    for seed in cfg.seeds:
        if cfg.save_checkpoints and {"mfnpe", "fmcpe"} & set(cfg.methods):
            try:
                write_json(out / "checkpoints" / f"baseline_seed{seed}.json", ctx.baseline(seed).to_dict())
            except Exception as exc:  # recorded, remaining seeds still run
                logger.exception("baseline for seed %d failed", seed)
                failures.append({"seed": seed, "method": "baseline", "error": repr(exc)})
        for n_cal in cfg.n_cal:
            for method in cfg.methods:
                tag = f"{method}_ncal{n_cal}_seed{seed}"
                try:
                    cell = run_cell(ctx, seed, n_cal, method)
                except Exception as exc:
                    logger.exception("cell %s failed", tag)
                    failures.append({"seed": seed, "n_cal": n_cal, "method": method, "error": repr(exc)})
                    continue
                reports.append(cell.report)
                logger.info("%s: %s", tag, cell.report)
                _write_cell_outputs(ctx, cell, method, n_cal, seed, out, tag)
    write_metrics_csv(reports, out / "metrics.csv")
    files = {str(f.relative_to(out)): _sha256(f) for f in sorted(out.rglob("*")) if f.is_file() and f.name != "manifest.json"}
    manifest = {
        "config": cfg.to_dict(),
        "config_hash": cfg.digest(),
        "seeds": list(cfg.seeds),
        "versions": {"fmcpe": __version__, "python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__},
        "files": files,
        "failures": failures,
    }
    write_json(out / "manifest.json", manifest)
    return RunArtifacts(out, reports, failures, files)


def _write_cell_outputs(ctx, cell: CellResult, method, n_cal, seed, out: Path, tag: str):
    cfg, tf = ctx.cfg, _transforms_for(method, cell.model)
    if cfg.save_checkpoints:
        ref = f"baseline_seed{seed}.json" if method == "fmcpe" else None
        _save_model(method, cell.model, out / "checkpoints" / f"{tag}.json", ref)
    if cfg.dump_eval_draws != "none":
        draws = cell.draws if cfg.dump_eval_draws == "all" else cell.draws[:, :1, :]
        _write_draws(out / "samples" / f"eval_{tag}.csv", method, draws)
    if cfg.dump_points and cfg.dump_samples > 0:
        sampler = _sampler_for(method, cell.model)
        pts = [i for i in cfg.dump_points if i < len(ctx.test)]
        rng = ctx.seed_rng(seed).split(f"ncal{n_cal}").split(method).split("dump")
        dump_posterior_samples(
            lambda y, r: tf.theta_from_model(sampler(tf.obs_to_model(y), r)),
            ctx.test.obs[pts], pts, cfg.dump_samples, rng, out / "samples" / f"kde_{tag}.csv", method, ctx.task.p,
        )


def _write_draws(path: Path, method: str, draws: np.ndarray):
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "point_id"] + [f"theta_{i}" for i in range(draws.shape[2])])
        for pid in range(draws.shape[0]):
            for row in draws[pid]:
                w.writerow([method, pid] + [format(v, ".17g") for v in row])


def metrics_from_dump(test: PairDataset, dump_path, rng: RandomSource, metrics=METRICS, w2_standardize=True, folds=3) -> dict[str, float]:
    """Recompute metrics from an evaluation dump; the first draw per point is the joint-sample draw."""
    _, ids, rows = read_sample_dump(dump_path)
    order = np.argsort(ids, kind="stable")
    ids, rows = ids[order], rows[order]
    counts = np.bincount(ids, minlength=len(test))
    if counts.shape[0] != len(test) or np.any(counts != counts[0]) or counts[0] == 0:
        raise ValueError("dump must hold the same number of draws for every test point")
    draws = rows.reshape(len(test), counts[0], -1)
    real = JointSampleSet.from_pairs(test.theta, test.obs, "real")
    gen = JointSampleSet.from_pairs(draws[:, 0], test.obs, "generated")
    out = {}
    if "w2" in metrics:
        if w2_standardize:
            st = standardize_fit(real.vectors)
            out["w2"] = w2_joint(real.standardize(st), gen.standardize(st), subsample=True)
        else:
            out["w2"] = w2_joint(real, gen, subsample=True)
    if "jc2st" in metrics:
        out["jc2st"] = jc2st(real, gen, rng, folds=folds)
    if "mse" in metrics:
        out["mse"] = mse(draws, test.theta)
    return out


def median_by(reports: list[MetricReport], metric: str) -> dict[tuple[str, int], float]:
    groups: dict[tuple[str, int], list[float]] = {}
    for r in reports:
        groups.setdefault((r.method, r.n_cal), []).append(getattr(r, metric))
    return {k: float(np.median(v)) for k, v in groups.items() if not all(math.isnan(x) for x in v)}
