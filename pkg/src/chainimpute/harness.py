"""Cross-validation, random hyperparameter search and the benchmark grid."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import metrics
from .corruption import RemovalMode, RemovalSpec, corrupt
from .data import (Recording, apply_norm, as_rng, compute_correlation_matrix,
                   compute_distance_matrix, fit_norm_stats)
from .errors import TrainingError, ValidationError
from .pipeline import MODELS, FitContext, HyperParams, fit_models

log = logging.getLogger(__name__)

RATES = (0.10, 0.25, 0.50, 0.75, 0.90)
MODE_NAMES = {"value": RemovalMode.RANDOM_VALUE, "region": RemovalMode.RANDOM_REGION}


@dataclass(frozen=True)
class ExperimentPlan:
    missing_rates: tuple = (0.10, 0.25)
    modes: tuple = ("region",)
    models: tuple = ("mean", "phi", "phi+d")
    folds: int = 6
    seeds: tuple = (0,)
    metric_mode: str = metrics.PER_ELEMENT
    n_train_subjects: int = 12
    max_region_size: int | None = None
    d_batch_size: int = 4
    dba_iters: int = 10

    def __post_init__(self):
        for name in ("missing_rates", "modes", "models", "seeds"):
            val = tuple(getattr(self, name))
            if not val:
                raise ValidationError(f"{name} must be nonempty")
            object.__setattr__(self, name, val)
        if self.folds < 2:
            raise ValidationError("folds must be >= 2")
        for m in self.modes:
            if m not in MODE_NAMES:
                raise ValidationError(f"unknown removal mode {m!r}")
        for m in self.models:
            if m not in MODELS:
                raise ValidationError(f"unknown model {m!r}")
        for r in self.missing_rates:
            if not 0 < r < 1:
                raise ValidationError(f"missing rate {r} outside (0, 1)")
        if self.metric_mode not in metrics.MODES:
            raise ValidationError(f"unknown metric mode {self.metric_mode!r}")

    def spec(self, mode: str, rate: float, seed: int = 0) -> RemovalSpec:
        return RemovalSpec(MODE_NAMES[mode], rate, self.max_region_size, seed)


def cell_seed(seed: int, mode: str, rate: float, salt: int = 0) -> np.random.SeedSequence:
    """Job-local seed keyed on the cell itself, so adding cells never shifts others."""
    return np.random.SeedSequence([int(seed), list(MODE_NAMES).index(mode),
                                   int(round(rate * 1000)), salt])


# ------------------------------------------------------------
# Folds
# ------------------------------------------------------------

def make_folds(subjects: Sequence[str], k: int = 6, seed=0) -> list[tuple[list, list]]:
    """Subject-level k-fold split: every subject validates in exactly one fold."""
    subjects = sorted(set(subjects))
    if k > len(subjects):
        raise ValidationError(f"cannot make {k} folds from {len(subjects)} subjects")
    if k < 2:
        raise ValidationError("need at least two folds")
    perm = as_rng(seed).permutation(len(subjects))
    groups = np.array_split(perm, k)
    folds = []
    for g in groups:
        val = sorted(subjects[i] for i in g)
        train = [s for s in subjects if s not in val]
        folds.append((train, val))
    return folds


def split_subjects(recs: Sequence[Recording], n_train: int) -> tuple[list, list]:
    subjects = sorted({r.subject_id for r in recs})
    if not 0 < n_train < len(subjects):
        raise ValidationError(f"cannot take {n_train} training subjects out of {len(subjects)}")
    train_s = set(subjects[:n_train])
    return ([r for r in recs if r.subject_id in train_s],
            [r for r in recs if r.subject_id not in train_s])


# ------------------------------------------------------------
# Shared fit/evaluate step
# ------------------------------------------------------------

def prepare(train: Sequence[Recording], spec: RemovalSpec, params: HyperParams,
            plan: ExperimentPlan) -> FitContext:
    """Normalize and fit C on training recordings only."""
    stats = fit_norm_stats(train)
    ntrain = [apply_norm(r, stats) for r in train]
    C = compute_correlation_matrix(ntrain)
    d = compute_distance_matrix(train[0].coords)
    return FitContext(ntrain, stats, C, d, spec, params, plan.d_batch_size, plan.dba_iters)


def corrupt_set(recs: Sequence[Recording], spec: RemovalSpec, d, rng) -> list:
    rng = as_rng(rng)
    return [corrupt(r, spec, d, rng) for r in recs]


def mask_digest(masked: Sequence) -> str:
    h = hashlib.sha256()
    for m in masked:
        h.update(np.packbits(m.missing_voxels).tobytes())
    return h.hexdigest()[:16]


def evaluate_models(imputers: dict, masked: Sequence, metric_mode: str) -> dict[str, list]:
    out = {}
    for name, imp in imputers.items():
        rows = []
        for m in masked:
            est = imp.impute(m)
            rows.append(metrics.score(m.truth, est, m.mask, metric_mode))
        out[name] = rows
    return out


# ------------------------------------------------------------
# Random search
# ------------------------------------------------------------

def cv_evaluator(recs: Sequence[Recording], plan: ExperimentPlan, model: str = "phi+d",
                 mode: str | None = None, rate: float | None = None):
    """Build ``evaluator(params, seed) -> (score, info)``: mean validation MAE over folds."""
    mode = mode or plan.modes[0]
    rate = plan.missing_rates[0] if rate is None else rate
    subjects = sorted({r.subject_id for r in recs})

    def evaluate(params: HyperParams, seed) -> tuple[float, dict]:
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        fold_seed, *job_seeds = ss.spawn(plan.folds + 1)
        scores, digests = [], []
        for (tr_s, va_s), js in zip(make_folds(subjects, plan.folds, fold_seed), job_seeds):
            train = [r for r in recs if r.subject_id in tr_s]
            val = [r for r in recs if r.subject_id in va_s]
            fit_seed, mask_seed = js.spawn(2)
            spec = plan.spec(mode, rate, int(mask_seed.generate_state(1)[0]))
            ctx = prepare(train, spec, params, plan)
            imputers = fit_models([model], ctx, fit_seed)
            masked = corrupt_set([apply_norm(r, ctx.stats) for r in val], spec, ctx.d,
                                 np.random.default_rng(mask_seed))
            digests.append(mask_digest(masked))
            rows = evaluate_models(imputers, masked, metrics.PER_ELEMENT)[model]
            scores.append(float(np.mean([r[0] for r in rows])))
        return float(np.mean(scores)), {"mask_digest": hashlib.sha256(
            "".join(digests).encode()).hexdigest()[:16]}

    return evaluate


def random_search(n_iters: int, plan: ExperimentPlan, train: Sequence[Recording], seed=0,
                  evaluator: Callable | None = None, model: str = "phi+d",
                  log_path=None) -> tuple[HyperParams, list[dict]]:
    """Uniform/log-uniform sampling over the hyperparameter ranges, scored by k-fold CV.

    Each iteration draws its own mask seed, so missing data is regenerated per trial.
    Trials that raise TrainingError are logged as failed and excluded from the argmin.
    """
    if not train:
        raise ValidationError("random search needs training recordings")
    if n_iters < 1:
        raise ValidationError("n_iters must be >= 1")
    evaluator = evaluator or cv_evaluator(train, plan, model)
    root = np.random.SeedSequence(seed)
    trials, best, best_score = [], None, np.inf
    for i, ss in enumerate(root.spawn(n_iters)):
        sample_ss, eval_ss = ss.spawn(2)
        params = HyperParams.sample(np.random.default_rng(sample_ss))
        row = {"iteration": i, **asdict(params)}
        try:
            score, info = evaluator(params, eval_ss)
            if not np.isfinite(score):
                raise TrainingError(f"non-finite score {score}")
            row.update(status="ok", score=score, **(info or {}))
            if score < best_score:
                best, best_score = params, score
        except TrainingError as exc:
            log.warning("trial %d failed: %s", i, exc)
            row.update(status="failed", score=float("nan"), error=str(exc))
        trials.append(row)
    if best is None:
        raise TrainingError("every trial failed")
    if log_path is not None:
        write_trial_log(trials, log_path)
    return best, trials


def write_trial_log(trials: list[dict], path) -> None:
    keys = []
    for t in trials:
        keys += [k for k in t if k not in keys]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for t in trials:
            w.writerow(t)


# ------------------------------------------------------------
# Benchmark
# ------------------------------------------------------------

@dataclass
class BenchmarkResult:
    reports: list
    train_subjects: frozenset
    test_subjects: frozenset
    fitted_subjects: list = field(default_factory=list)  # provenance of every fitted artifact
    files: list = field(default_factory=list)


def _run_cell(args):
    plan, params, train, test, mode, rate, seed = args
    cell = cell_seed(seed, mode, rate)
    fit_seed, mask_seed = cell.spawn(2)
    spec = plan.spec(mode, rate, int(mask_seed.generate_state(1)[0]))
    ctx = prepare(train, spec, params, plan)
    masked = corrupt_set([apply_norm(r, ctx.stats) for r in test], spec, ctx.d,
                         np.random.default_rng(mask_seed))
    try:
        imputers = fit_models(plan.models, ctx, fit_seed)
        rows = evaluate_models(imputers, masked, plan.metric_mode)
    except Exception as exc:
        raise type(exc)(f"benchmark cell mode={mode} rate={rate} seed={seed}: {exc}") from exc
    reports = [metrics.MetricsReport(rows[m], m, mode, rate, plan.metric_mode, seed)
               for m in plan.models]
    provenance = [ctx.stats.subjects, ctx.C.subjects]
    missing_counts = sorted({int(m.missing_voxels.sum()) for m in masked})
    return reports, provenance, missing_counts


def run_benchmark(plan: ExperimentPlan, dataset: Sequence[Recording],
                  params: HyperParams | None = None, out_dir=None,
                  workers: int = 1) -> BenchmarkResult:
    """Score every (model, mode, rate, seed) on held-out subjects and write the reports."""
    params = params or HyperParams()
    train, test = split_subjects(dataset, plan.n_train_subjects)
    jobs = [(plan, params, train, test, mode, rate, seed)
            for mode in plan.modes for rate in plan.missing_rates for seed in plan.seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_run_cell, jobs))
    else:
        results = [_run_cell(j) for j in jobs]
    reports, provenance = [], []
    for reps, prov, _ in results:
        reports += reps
        provenance += prov
    result = BenchmarkResult(reports, frozenset(r.subject_id for r in train),
                             frozenset(r.subject_id for r in test), provenance)
    if out_dir is not None:
        result.files = write_reports(reports, plan, out_dir)
    return result


# ------------------------------------------------------------
# Report files
# ------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def pooled(reports, model, mode, rate) -> metrics.MetricsReport:
    sel = [r for r in reports
           if r.model_name == model and r.removal_mode == mode and r.missing_rate == rate]
    return metrics.aggregate(sel)


def summary_csv(reports, plan: ExperimentPlan) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "mode", "rate", "metric", "mean", "std", "n"])
    for model in plan.models:
        for mode in plan.modes:
            for rate in plan.missing_rates:
                agg = pooled(reports, model, mode, rate)
                for m in metrics.METRICS:
                    w.writerow([model, mode, rate, m,
                                _fmt(agg.mean[m]), _fmt(agg.std[m]), agg.n_recordings])
    return buf.getvalue()


def per_recording_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "mode", "rate", "seed", "recording", *metrics.METRICS])
    for rep in reports:
        for i, row in enumerate(rep.per_recording):
            w.writerow([rep.model_name, rep.removal_mode, rep.missing_rate, rep.seed, i,
                        *(_fmt(x) for x in row)])
    return buf.getvalue()


def markdown_table(reports, plan: ExperimentPlan, mode: str, metric: str) -> str:
    """Rows are models, columns missing rates; the best mean in each column is bold."""
    cells = {(mo, r): pooled(reports, mo, mode, r) for mo in plan.models for r in plan.missing_rates}
    header = "| Missing | " + " | ".join(f"{round(r * 100)}%" for r in plan.missing_rates) + " |"
    lines = [f"{metric} ({mode} removal, {plan.metric_mode})", "", header,
             "|" + "---|" * (len(plan.missing_rates) + 1)]
    best = {r: min(cells[(mo, r)].mean[metric] for mo in plan.models) for r in plan.missing_rates}
    for mo in plan.models:
        parts = []
        for r in plan.missing_rates:
            agg = cells[(mo, r)]
            mean_s = f"{agg.mean[metric]:.2f}"
            if f"{best[r]:.2f}" == mean_s:
                mean_s = f"**{mean_s}**"
            parts.append(f"{mean_s}±{agg.std[metric]:.2f}")
        lines.append(f"| {mo} | " + " | ".join(parts) + " |")
    return "\n".join(lines) + "\n"


def write_reports(reports, plan: ExperimentPlan, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []

    def put(name, text):
        p = out / name
        p.write_text(text, encoding="utf-8")
        files.append(p)

    put("report.csv", summary_csv(reports, plan))
    put("report_meta.json", json.dumps({"metric_mode": plan.metric_mode,
                                        "seeds": list(plan.seeds)}, sort_keys=True) + "\n")
    put("per_recording.csv", per_recording_csv(reports))
    tables = []
    for mode in plan.modes:
        for metric in metrics.METRICS:
            tables.append(markdown_table(reports, plan, mode, metric))
    put("tables.md", "\n".join(tables))
    for model in plan.models:
        for mode in plan.modes:
            for metric in metrics.METRICS:
                lines = [f"# rate mean_{metric}"]
                for rate in plan.missing_rates:
                    lines.append(f"{rate} {_fmt(pooled(reports, model, mode, rate).mean[metric])}")
                put(f"plot_{model.replace('+', '_plus_')}_{mode}_{metric}.dat", "\n".join(lines) + "\n")
    return files
