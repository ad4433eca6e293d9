"""
Experiment protocols behind the ``sgad`` CLI.

Every command takes an :class:`ExperimentConfig`, runs ``n_runs`` seeded
repetitions (run ``i`` uses seed ``base_seed + i``) and writes a
self-describing directory: the resolved config, per-run reports/traces/scores,
aggregate mean and std, CSV tables and matplotlib figures.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import data as D
from . import metrics
from .errors import RejectedInputError
from .model import (
    SCORER_SIMULATION,
    SCORER_TABULAR,
    Schedule,
    SgLossConfig,
    TraceTarget,
    atomic_write_text,
    build_model,
    encoder_preset,
    predict_scores,
    save_checkpoint,
    train,
)

logger = logging.getLogger(__name__)

METRIC_KEYS = ("auc_roc", "auc_pr", "ks")
SWEEP_GROUPS = ({"eps_p", "a"}, {"lambda_se", "lambda_a"})


# --------------------------------------------------------------------------
# configuration


def _from_dict(cls, doc, section):
    doc = dict(doc or {})
    names = {f.name for f in fields(cls)}
    unknown = set(doc) - names
    if unknown:
        raise RejectedInputError(f"[{section}] unknown key(s): {sorted(unknown)}")
    return cls(**doc)


@dataclass
class ModelSection:
    variant: str = "original"
    lambda_se: float = 0.01
    lambda_a: float = 18.0
    a: float = 6.0
    mu0: float = 0.01
    eps_p: float = 0.8
    encoder: object = "auto"  # "auto" or list of widths, last = latent size
    scorer: object = "auto"  # "auto" or hidden widths; a scalar head is appended

    def loss_config(self):
        return SgLossConfig(self.lambda_se, self.lambda_a, self.a, self.mu0, self.eps_p, self.variant)


@dataclass
class DataSection:
    synthetic: Optional[dict] = None
    manifest: Optional[str] = None
    val_samples: int = 2000
    standardize: bool = True
    noise_sample_rate: float = 0.01
    noise_feature_rate: float = 0.05
    split: tuple = (0.6, 0.2, 0.2)


@dataclass
class ScheduleSection:
    epochs: int = 100
    batch_size: int = 1024
    learning_rate: float = 1e-4
    seed: int = 0
    n_runs: int = 10
    eps_scope: str = "batch"


@dataclass
class OutputSection:
    dir: str = "runs"
    plots: bool = True
    n_bins: int = 20
    checkpoints: bool = True


@dataclass
class ExperimentConfig:
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    output: OutputSection = field(default_factory=OutputSection)
    sweep: dict = field(default_factory=dict)
    rate: dict = field(default_factory=dict)
    base_dir: str = field(default=".", repr=False, compare=False)

    @classmethod
    def from_dict(cls, doc, base_dir="."):
        doc = dict(doc or {})
        allowed = {"model", "data", "schedule", "output", "sweep", "rate"}
        unknown = set(doc) - allowed
        if unknown:
            raise RejectedInputError(f"unknown config section(s): {sorted(unknown)}")
        return cls(
            model=_from_dict(ModelSection, doc.get("model"), "model"),
            data=_from_dict(DataSection, doc.get("data"), "data"),
            schedule=_from_dict(ScheduleSection, doc.get("schedule"), "schedule"),
            output=_from_dict(OutputSection, doc.get("output"), "output"),
            sweep=dict(doc.get("sweep") or {}),
            rate=dict(doc.get("rate") or {}),
            base_dir=str(base_dir),
        )

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.is_file():
            raise RejectedInputError(f"config file not found: {path}")
        with open(path, encoding="utf-8") as fh:
            try:
                doc = yaml.safe_load(fh)
            except yaml.YAMLError as exc:
                raise RejectedInputError(f"cannot parse {path}: {exc}") from None
        return cls.from_dict(doc, base_dir=path.parent)

    def to_dict(self):
        doc = asdict(self)
        doc.pop("base_dir")
        doc["data"]["split"] = list(self.data.split)
        return doc

    def with_overrides(self, out=None, seed=None, runs=None):
        cfg = copy.deepcopy(self)
        if out is not None:
            cfg.output.dir = str(out)
        if seed is not None:
            cfg.schedule.seed = int(seed)
        if runs is not None:
            cfg.schedule.n_runs = int(runs)
        return cfg

    def resolve(self, path):
        path = Path(path)
        return path if path.is_absolute() else Path(self.base_dir) / path

    # -- derived objects --------------------------------------------------

    def synthetic_spec(self, **overrides):
        doc = dict(self.data.synthetic or {})
        doc.update(overrides)
        return D.SyntheticSpec(**doc)

    def preprocess_spec(self):
        if self.data.manifest:
            spec = D.PreprocessSpec.from_manifest(self.resolve(self.data.manifest))
        else:
            spec = D.PreprocessSpec(
                noise_sample_rate=self.data.noise_sample_rate,
                noise_feature_rate=self.data.noise_feature_rate,
                split=tuple(self.data.split),
            )
        return spec

    def csv_path(self):
        manifest = self.resolve(self.data.manifest)
        with open(manifest, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh) or {}
        if "csv" not in doc:
            raise RejectedInputError(f"manifest {manifest} does not name a csv file")
        csv_file = Path(doc["csv"])
        return csv_file if csv_file.is_absolute() else manifest.parent / csv_file

    def architecture(self, input_dim):
        synthetic = self.data.synthetic is not None
        if self.model.encoder == "auto":
            if synthetic:
                enc = (20,) if input_dim == 1 else (64, 20)
            else:
                enc = encoder_preset(input_dim)
        else:
            enc = tuple(int(w) for w in self.model.encoder)
        if self.model.scorer == "auto":
            scorer = SCORER_SIMULATION if synthetic else SCORER_TABULAR
        else:
            scorer = tuple(int(w) for w in self.model.scorer)
        return enc, scorer

    def schedule_for(self, seed):
        s = self.schedule
        return Schedule(s.epochs, s.batch_size, seed, s.learning_rate, s.eps_scope)

    def validate(self, command):
        """Fail fast, before any compute."""
        if self.schedule.n_runs < 1:
            raise RejectedInputError("n_runs must be >= 1")
        self.model.loss_config()
        self.schedule_for(0)
        if self.output.n_bins < 1:
            raise RejectedInputError("n_bins must be >= 1")
        has_syn = self.data.synthetic is not None
        has_csv = bool(self.data.manifest)
        if has_syn == has_csv:
            raise RejectedInputError("data needs exactly one of 'synthetic' or 'manifest'")
        if command == "simulate" and not has_syn:
            raise RejectedInputError("simulate needs a synthetic data block")
        if has_syn:
            self.synthetic_spec()
        else:
            manifest = self.resolve(self.data.manifest)
            if not manifest.is_file():
                raise RejectedInputError(f"manifest not found: {manifest}")
            self.preprocess_spec()
            if not self.csv_path().is_file():
                raise RejectedInputError(f"csv file not found: {self.csv_path()}")
        D.check_split(tuple(self.data.split))
        if command == "sweep":
            grid = self.sweep.get("grid") or {}
            if set(grid) not in SWEEP_GROUPS:
                raise RejectedInputError(
                    f"sweep grid must cover exactly {{eps_p, a}} or {{lambda_se, lambda_a}}, got {sorted(grid)}"
                )
            if any(not list(v) for v in grid.values()):
                raise RejectedInputError("sweep grid has an empty axis")
            for pa in grid[sorted(grid)[0]]:
                for pb in grid[sorted(grid)[1]]:
                    replace(self.model, **{sorted(grid)[0]: pa, sorted(grid)[1]: pb}).loss_config()
        if command == "rate":
            rates = self.rate.get("rates")
            if not rates:
                raise RejectedInputError("rate command needs a non-empty rate.rates list")
            for v in self.rate.get("variants", ["original", "plain_ae"]):
                replace(self.model, variant=v).loss_config()


def derive_seeds(run_seed):
    """Independent integer seeds for the pieces of one run."""
    state = np.random.SeedSequence(int(run_seed)).generate_state(6)
    keys = ("data", "val", "test", "init", "shuffle", "noise")
    return dict(zip(keys, (int(s) for s in state)))


# --------------------------------------------------------------------------
# artifacts


@dataclass
class RunArtifact:
    command: str
    config: dict
    reports: list
    traces: list
    aggregate: dict
    out_dir: Optional[str] = None
    checkpoints: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)


def aggregate_reports(reports):
    out = {}
    for key in METRIC_KEYS:
        values = np.array([getattr(r, key) for r in reports], dtype=np.float64)
        out[key] = {"mean": float(values.mean()), "std": float(values.std())}
    return out


def _csv_text(header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in row])
    return buf.getvalue()


def write_csv(path, header, rows):
    atomic_write_text(path, _csv_text(header, rows))


def write_json(path, doc):
    atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def trace_rows(trace):
    for k in range(trace.epochs):
        diffs = trace.score_diffs[k] if trace.score_diffs else (None,) * metrics.N_FIELDS
        yield (k + 1, trace.train_loss[k], trace.train_recon[k], trace.val_loss[k], *diffs)


TRACE_HEADER = ["epoch", "train_loss", "train_recon", "val_loss", "S0", "S1", "S2", "S3"]


def _write_run(run_dir, cfg, report, trace, scores, labels, field_id, model):
    run_dir.mkdir(parents=True, exist_ok=True)
    write_csv(run_dir / "trace.csv", TRACE_HEADER, trace_rows(trace))
    fid = field_id if field_id is not None else [None] * len(scores)
    write_csv(
        run_dir / "scores.csv",
        ["sample_id", "score", "label", "field"],
        ((i, float(s), int(y), None if f is None else int(f)) for i, (s, y, f) in enumerate(zip(scores, labels, fid))),
    )
    write_csv(run_dir / "histogram.csv", ["bin_lo", "bin_hi", "normal", "abnormal"], report.histogram.rows())
    doc = report.to_dict()
    doc["best_epoch"] = trace.best_epoch
    write_json(run_dir / "report.txt", doc)
    ckpt = None
    if cfg.output.checkpoints:
        ckpt = run_dir / "model.json"
        save_checkpoint(model, ckpt)
    return ckpt


def _finish(artifact, cfg, out_dir, plots=()):
    write_json(
        out_dir / "report.txt",
        {
            "command": artifact.command,
            "config": artifact.config,
            "runs": [r.to_dict() for r in artifact.reports],
            "aggregate": artifact.aggregate,
            **artifact.extra,
        },
    )
    if artifact.traces:
        rows = []
        for run, trace in enumerate(artifact.traces):
            rows.extend((run, *row) for row in trace_rows(trace))
        write_csv(out_dir / "trace.csv", ["run", *TRACE_HEADER], rows)
    if cfg.output.plots:
        from . import plotting

        for fn in plots:
            fn(plotting)
    return artifact


def _prepare_out(cfg):
    out_dir = Path(cfg.output.dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out_dir / "config.yaml", yaml.safe_dump(cfg.to_dict(), sort_keys=True))
    return out_dir


# --------------------------------------------------------------------------
# one training run


def _standardize(train_x, *others):
    scaler = D.Standardizer.fit(train_x, range(train_x.shape[1]))
    return (scaler.transform(train_x), *(scaler.transform(x) for x in others))


def _train_and_score(cfg, seeds, train_x, val_x, test, variant=None):
    model_cfg = cfg.model if variant is None else replace(cfg.model, variant=variant)
    enc, scorer = cfg.architecture(train_x.shape[1])
    model = build_model(train_x.shape[1], model_cfg.loss_config(), enc, scorer, seed=seeds["init"])
    target = None
    if test.field_id is not None:
        target = TraceTarget(test.features, test.labels, test.field_id)
    best, trace = train(model, train_x, val_x, cfg.schedule_for(seeds["shuffle"]), target)
    scores = predict_scores(best, test.features)
    report = metrics.evaluate_scores(scores, test.labels, test.field_id, cfg.output.n_bins)
    return best, trace, scores, report


def _simulation_splits(cfg, seeds):
    spec = cfg.synthetic_spec()
    train_set = D.generate_synthetic(replace(spec, seed=seeds["data"]))
    val_set = D.generate_synthetic(replace(spec, seed=seeds["val"], n_samples=cfg.data.val_samples))
    test_set = D.generate_synthetic(replace(spec, seed=seeds["test"]))
    test_set = D.partition_fields(test_set, spec.mu_normal, spec.sigma)
    return D.SplitData(train_set, val_set, test_set)


def _pipeline_splits(cfg, seeds, table=None):
    """load -> preprocess -> split -> standardise (train stats) -> swap noise."""
    spec = cfg.preprocess_spec()
    if table is None:
        syn = cfg.synthetic_spec()
        dataset = D.generate_synthetic(replace(syn, seed=seeds["data"]))
        dataset = D.partition_fields(dataset, syn.mu_normal, syn.sigma)
        numeric = range(dataset.features.shape[1]) if cfg.data.standardize else []
        split = D.preprocess(dataset, spec, seed=seeds["test"], numeric_columns=numeric)
    else:
        split = D.preprocess(table, spec, seed=seeds["test"])
    train_set = D.inject_noise(split.train, spec, seed=seeds["noise"])
    return D.SplitData(train_set, split.val, split.test)


def _load_table(cfg):
    if cfg.data.manifest:
        return D.load_csv(cfg.csv_path(), cfg.preprocess_spec())
    return None


# --------------------------------------------------------------------------
# commands


def cmd_simulate(cfg):
    """Synthetic training with per-epoch score differences in R0..R3."""
    cfg.validate("simulate")
    out_dir = _prepare_out(cfg)
    reports, traces, ckpts = [], [], []
    for run in range(cfg.schedule.n_runs):
        seeds = derive_seeds(cfg.schedule.seed + run)
        split = _simulation_splits(cfg, seeds)
        train_x, val_x, test_x = split.train.features, split.val.features, split.test.features
        if cfg.data.standardize:
            train_x, val_x, test_x = _standardize(train_x, val_x, test_x)
        test = replace(split.test, features=test_x)
        best, trace, scores, report = _train_and_score(cfg, seeds, train_x, val_x, test)
        logger.info("simulate run %d: auc_roc=%.4f ks=%.4f", run, report.auc_roc, report.ks)
        ckpts.append(_write_run(out_dir / f"run_{run:03d}", cfg, report, trace, scores, test.labels, test.field_id, best))
        reports.append(report)
        traces.append(trace)
    artifact = RunArtifact("simulate", cfg.to_dict(), reports, traces, aggregate_reports(reports), str(out_dir), ckpts)
    return _finish(
        artifact,
        cfg,
        out_dir,
        plots=[
            lambda p: p.plot_score_differences(traces, out_dir / "score_differences.png"),
            lambda p: p.plot_histogram(reports[0].histogram, out_dir / "histogram.png"),
        ],
    )


def _evaluate_runs(cfg, table, variant=None, rate=None, write_dir=None):
    reports, traces, ckpts = [], [], []
    for run in range(cfg.schedule.n_runs):
        seeds = derive_seeds(cfg.schedule.seed + run)
        split = _pipeline_splits(cfg, seeds, table)
        train_set = split.train
        if rate is not None:
            target = min(rate, train_set.anomaly_rate)
            train_set = D.subsample_anomaly_rate(train_set, target, seed=seeds["noise"])
        best, trace, scores, report = _train_and_score(
            cfg, seeds, train_set.features, split.val.features, split.test, variant
        )
        if write_dir is not None:
            ckpts.append(
                _write_run(write_dir / f"run_{run:03d}", cfg, report, trace, scores, split.test.labels, split.test.field_id, best)
            )
        reports.append(report)
        traces.append(trace)
    return reports, traces, ckpts


def cmd_evaluate(cfg):
    """Full pipeline with test-split metrics, repeated over reshuffled splits."""
    cfg.validate("evaluate")
    out_dir = _prepare_out(cfg)
    table = _load_table(cfg)
    reports, traces, ckpts = _evaluate_runs(cfg, table, write_dir=out_dir)
    for run, report in enumerate(reports):
        logger.info("evaluate run %d: auc_roc=%.4f auc_pr=%.4f ks=%.4f", run, report.auc_roc, report.auc_pr, report.ks)
    artifact = RunArtifact("evaluate", cfg.to_dict(), reports, traces, aggregate_reports(reports), str(out_dir), ckpts)
    # pooled histogram of the first run sits at the top level for convenience
    write_csv(out_dir / "histogram.csv", ["bin_lo", "bin_hi", "normal", "abnormal"], reports[0].histogram.rows())
    plots = [lambda p: p.plot_histogram(reports[0].histogram, out_dir / "histogram.png")]
    if any(t.score_diffs for t in traces):
        plots.append(lambda p: p.plot_score_differences(traces, out_dir / "score_differences.png"))
    return _finish(artifact, cfg, out_dir, plots)


def sweep_cells(grid):
    """All (name_a, value_a, name_b, value_b) cells of a two-parameter grid, row-major."""
    name_a, name_b = sorted(grid)
    return [(name_a, va, name_b, vb) for va in grid[name_a] for vb in grid[name_b]]


def cmd_sweep(cfg, order=None):
    """Two-parameter grid of evaluate runs; ``order`` permutes execution only."""
    cfg.validate("sweep")
    out_dir = _prepare_out(cfg)
    grid = {k: list(v) for k, v in cfg.sweep["grid"].items()}
    cells = sweep_cells(grid)
    order = list(range(len(cells))) if order is None else list(order)
    table = _load_table(cfg)
    results = {}
    for idx in order:
        name_a, va, name_b, vb = cells[idx]
        cell_cfg = copy.deepcopy(cfg)
        cell_cfg.model = replace(cfg.model, **{name_a: va, name_b: vb})
        reports, _, _ = _evaluate_runs(cell_cfg, table)
        results[idx] = aggregate_reports(reports)
        logger.info("sweep %s=%s %s=%s: auc_roc=%.4f", name_a, va, name_b, vb, results[idx]["auc_roc"]["mean"])
    name_a, name_b = sorted(grid)
    matrix = np.array([[results[i * len(grid[name_b]) + j]["auc_roc"]["mean"] for j in range(len(grid[name_b]))] for i in range(len(grid[name_a]))])
    write_csv(
        out_dir / "heatmap.csv",
        [f"{name_a}\\{name_b}", *grid[name_b]],
        ([va, *map(float, row)] for va, row in zip(grid[name_a], matrix)),
    )
    cell_rows = [
        (name_a, va, name_b, vb, results[i]["auc_roc"]["mean"], results[i]["auc_roc"]["std"])
        for i, (_, va, _, vb) in enumerate(cells)
    ]
    artifact = RunArtifact(
        "sweep",
        cfg.to_dict(),
        [],
        [],
        {},
        str(out_dir),
        extra={"cells": [dict(zip(("param_a", "value_a", "param_b", "value_b", "auc_roc_mean", "auc_roc_std"), r)) for r in cell_rows]},
    )
    artifact.extra["matrix"] = matrix.tolist()
    return _finish(
        artifact,
        cfg,
        out_dir,
        plots=[lambda p: p.plot_heatmap(matrix, grid[name_a], grid[name_b], name_a, name_b, out_dir / "heatmap.png")],
    )


def cmd_rate(cfg):
    """AUC-ROC versus training anomaly rate, per variant."""
    cfg.validate("rate")
    out_dir = _prepare_out(cfg)
    rates = [float(r) for r in cfg.rate["rates"]]
    variants = list(cfg.rate.get("variants", ["original", "plain_ae"]))
    table = _load_table(cfg)
    if table is None:
        native = round(cfg.synthetic_spec().anomaly_ratio * cfg.synthetic_spec().n_samples) / cfg.synthetic_spec().n_samples
    else:
        native = D.encode_table(table, cfg.preprocess_spec()).anomaly_rate
    rows = []
    for variant in variants:
        for rate in rates:
            if rate > native + 1e-12:
                rows.append((rate, variant, None, None, None, None, 0, f"rate exceeds native rate {native:.6f}"))
                logger.error("rate %.4f above native %.4f; skipped", rate, native)
                continue
            reports, _, _ = _evaluate_runs(cfg, table, variant=variant, rate=rate)
            agg = aggregate_reports(reports)
            rows.append(
                (rate, variant, agg["auc_roc"]["mean"], agg["auc_roc"]["std"], agg["auc_pr"]["mean"], agg["ks"]["mean"], len(reports), None)
            )
            logger.info("rate %.3f %s: auc_roc=%.4f", rate, variant, agg["auc_roc"]["mean"])
    header = ["rate", "variant", "auc_roc_mean", "auc_roc_std", "auc_pr_mean", "ks_mean", "n_runs", "error"]
    write_csv(out_dir / "rates.csv", header, rows)
    artifact = RunArtifact(
        "rate", cfg.to_dict(), [], [], {}, str(out_dir), extra={"native_rate": native, "rows": [dict(zip(header, r)) for r in rows]}
    )
    return _finish(artifact, cfg, out_dir, plots=[lambda p: p.plot_rates(rows, out_dir / "rates.png")])


COMMANDS = {
    "simulate": cmd_simulate,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "rate": cmd_rate,
}
