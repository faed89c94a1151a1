"""Command line entry point: synth, corrupt, train, impute, evaluate, search, bench."""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import metrics
from .corruption import RemovalSpec, corrupt
from .data import (MaskedRecording, Recording, SynthConfig, apply_norm, compute_distance_matrix,
                   invert_norm, synth_dataset)
from .fileio import (read_csv_recording, read_dataset, read_recording, recording_filename,
                     write_dataset, write_recording)
from .harness import (MODE_NAMES, ExperimentPlan, prepare, random_search, run_benchmark,
                      write_trial_log)
from .pipeline import (MODELS, BarycenterImputer, HyperParams, KnnImputer, fit_models, load_fitted,
                       save_fitted)

log = logging.getLogger("chainimpute")

PLAN_LISTS = {"missing_rates": float, "modes": str, "models": str, "seeds": int}


def read_config(path) -> dict[str, str]:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    parser.optionxform = str
    text = Path(path).read_text(encoding="utf-8")
    parser.read_string("[config]\n" + text)
    return dict(parser["config"])


def _split(v: str, cast):
    return tuple(cast(x.strip()) for x in str(v).split(",") if x.strip())


def build_params(cfg: dict, args) -> HyperParams:
    values = {k: v for k, v in cfg.items() if k in {f.name for f in fields(HyperParams)}}
    for f in fields(HyperParams):
        cli = getattr(args, f.name, None)
        if cli is not None:
            values[f.name] = cli
    return HyperParams.from_dict(values)


def build_plan(cfg: dict, args) -> ExperimentPlan:
    kw = {}
    for f in fields(ExperimentPlan):
        raw = cfg.get(f.name)
        cli = getattr(args, f.name, None)
        if cli is not None:
            raw = cli
        if raw is None:
            continue
        if f.name in PLAN_LISTS:
            kw[f.name] = raw if isinstance(raw, (list, tuple)) else _split(raw, PLAN_LISTS[f.name])
        elif f.name == "max_region_size":
            kw[f.name] = None if str(raw).lower() in ("", "none") else int(raw)
        elif f.name == "metric_mode":
            kw[f.name] = str(raw)
        else:
            kw[f.name] = int(raw)
    if args.metric_mode is not None:
        kw["metric_mode"] = args.metric_mode
    if args.seed is not None and "seeds" not in kw:
        kw["seeds"] = (args.seed,)
    return ExperimentPlan(**kw)


def _load_any(path: Path) -> MaskedRecording:
    if path.suffix.lower() == ".csv":
        return read_csv_recording(path)
    return read_recording(path)


def _inputs(path) -> list[Path]:
    path = Path(path)
    if path.is_dir():
        files = sorted(list(path.glob("*.mtsr")) + list(path.glob("*.csv")))
        if not files:
            raise SystemExit(f"no recordings in {path}")
        return files
    return [path]


def _as_complete(rec: MaskedRecording) -> Recording:
    if rec.truth is not None:
        return rec.complete()
    if rec.mask.any():
        raise SystemExit(f"{rec.subject_id}: recording has missing voxels and no ground truth")
    return Recording(rec.values, rec.coords, rec.subject_id, rec.window_id)


# ------------------------------------------------------------
# Subcommands
# ------------------------------------------------------------

def cmd_synth(args, cfg):
    sc = SynthConfig()
    over = {k: type(getattr(sc, k))(v) for k, v in cfg.items()
            if k in {f.name for f in fields(SynthConfig)} and getattr(sc, k) is not None}
    for name in ("n", "V", "T", "K", "noise_std", "n_subjects", "windows_per_subject"):
        v = getattr(args, name, None)
        if v is not None:
            over[name] = v
    sc = replace(sc, **over)
    recs = synth_dataset(sc, args.seed or 0)
    out = Path(args.out_dir)
    write_dataset(recs, out)
    (out / "synth.json").write_text(json.dumps(asdict(sc), indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(recs)} recordings (V={sc.V}, T={sc.T}) to {out}")


def _spec_from_args(args, cfg) -> RemovalSpec:
    mode = args.mode or cfg.get("mode", "region")
    rate = args.rate if args.rate is not None else float(cfg.get("rate", 0.1))
    max_region = args.max_region if args.max_region is not None else (
        int(cfg["max_region_size"]) if cfg.get("max_region_size", "none").lower() != "none" else None)
    return RemovalSpec(MODE_NAMES[mode], rate, max_region, args.seed or 0)


def cmd_corrupt(args, cfg):
    spec = _spec_from_args(args, cfg)
    rng = np.random.default_rng(spec.seed)
    files = _inputs(args.inp)
    out = Path(args.out)
    many = len(files) > 1 or Path(args.inp).is_dir()
    if many:
        out.mkdir(parents=True, exist_ok=True)
    for f in files:
        rec = _as_complete(_load_any(f))
        d = compute_distance_matrix(rec.coords)
        masked = corrupt(rec, spec, d, rng)
        write_recording(masked, out / recording_filename(masked) if many else out)
    print(f"corrupted {len(files)} recording(s) with {spec.mode.value} removal at rate {spec.rate}")


def cmd_train(args, cfg):
    params = build_params(cfg, args)
    spec = _spec_from_args(args, cfg)
    recs = [_as_complete(r) for r in read_dataset(args.data)]
    plan = ExperimentPlan(models=(args.model,), modes=(spec.mode.value,), missing_rates=(spec.rate or 0.1,),
                          max_region_size=spec.max_region_size)
    ctx = prepare(recs, spec, params, plan)
    imputer = fit_models([args.model], ctx, np.random.SeedSequence(args.seed or 0))[args.model]
    out = Path(args.out_dir)
    save_fitted(imputer, ctx.stats, ctx.C, recs[0].coords, out, params)
    print(f"trained {args.model} on {len(recs)} recordings; artifacts in {out}")


def _impute_one(imputer, stats, rec: MaskedRecording) -> np.ndarray:
    if stats is None:
        return imputer.impute(rec)
    norm = apply_norm(rec, stats)
    est = imputer.impute(norm)
    return invert_norm(Recording(est, rec.coords), stats).values


def cmd_impute(args, cfg):
    if args.model_dir:
        imputer, stats, _ = load_fitted(args.model_dir)
        if args.model and args.model != imputer.name:
            raise SystemExit(f"--model {args.model} does not match fitted model {imputer.name}")
    elif args.model in ("knn", "barycenter"):
        imputer, stats = None, None
    else:
        raise SystemExit(f"model {args.model!r} needs --model-dir from `train`")
    files = _inputs(args.inp)
    out = Path(args.out)
    many = len(files) > 1 or Path(args.inp).is_dir()
    if many:
        out.mkdir(parents=True, exist_ok=True)
    for f in files:
        rec = _load_any(f)
        imp = imputer
        if imp is None:
            d = compute_distance_matrix(rec.coords)
            imp = KnnImputer(d) if args.model == "knn" else BarycenterImputer()
        est = np.array(_impute_one(imp, stats, rec))
        est[~rec.missing_voxels] = rec.values[~rec.missing_voxels]
        result = Recording(est, rec.coords, rec.subject_id, rec.window_id)
        write_recording(result, out / recording_filename(result) if many else out)
    print(f"imputed {len(files)} recording(s) with {imputer.name if imputer else args.model}")


def cmd_evaluate(args, cfg):
    refs = _inputs(args.reference)
    ests = _inputs(args.imputed)
    if len(refs) != len(ests):
        raise SystemExit(f"{len(refs)} reference files but {len(ests)} imputed files")
    stats = load_fitted(args.model_dir)[1] if args.model_dir else None
    rows = []
    for rf, ef in zip(refs, ests):
        ref = _load_any(rf)
        if ref.truth is None:
            raise SystemExit(f"{rf} carries no ground truth")
        est = _load_any(ef).values
        truth = ref.truth
        if stats is not None:
            truth = (truth - stats.mean[:, None]) / stats.std[:, None]
            est = (est - stats.mean[:, None]) / stats.std[:, None]
        rows.append(metrics.score(truth, est, ref.mask, args.metric_mode or metrics.PER_ELEMENT))
    rate = float(np.mean([_load_any(r).missing_voxels.mean() for r in refs]))
    rep = metrics.MetricsReport(rows, args.model or "imputed", args.mode or "", round(rate, 4),
                                args.metric_mode or metrics.PER_ELEMENT)
    out = Path(args.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    lines = ["model,mode,rate,metric,mean,std,n"]
    for m in metrics.METRICS:
        lines.append(f"{rep.model_name},{rep.removal_mode},{rep.missing_rate},{m},"
                     f"{rep.mean[m]!r},{rep.std[m]!r},{rep.n_recordings}")
    (out / "evaluation.csv").write_text("\n".join(lines) + "\n")
    table = ["| model | " + " | ".join(metrics.METRICS) + " |", "|---" * 5 + "|",
             f"| {rep.model_name} | " + " | ".join(rep.summary(m) for m in metrics.METRICS) + " |"]
    (out / "evaluation.md").write_text(f"metric mode: {rep.metric_mode}\n\n" + "\n".join(table) + "\n")
    for m in metrics.METRICS:
        print(f"{m}: {rep.summary(m, 4)}")


def cmd_search(args, cfg):
    plan = build_plan(cfg, args)
    recs = [_as_complete(r) for r in read_dataset(args.data)]
    out = Path(args.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    best, trials = random_search(args.n_iters, plan, recs, args.seed or 0, model=args.search_model)
    write_trial_log(trials, out / "trials.csv")
    (out / "best.cfg").write_text("".join(f"{k} = {v}\n" for k, v in asdict(best).items()))
    print(f"best of {len(trials)} trials: {asdict(best)}")


def cmd_bench(args, cfg):
    plan = build_plan(cfg, args)
    params = build_params(cfg, args)
    if args.data:
        recs = [_as_complete(r) for r in read_dataset(args.data)]
    else:
        recs = synth_dataset(SynthConfig(), args.data_seed)
    out = Path(args.out_dir or "bench_out")
    res = run_benchmark(plan, recs, params, out, workers=args.workers)
    print((out / "tables.md").read_text())
    print(f"{len(res.reports)} reports written to {out}")


# ------------------------------------------------------------

def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--config", type=Path, default=None, help="flat key = value file")
    common.add_argument("--metric-mode", choices=metrics.MODES, default=None)
    common.add_argument("--out-dir", default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="chainimpute", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    for name, typ in (("n", int), ("V", int), ("T", int), ("K", int), ("noise_std", float),
                      ("n_subjects", int), ("windows_per_subject", int)):
        s.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)
    s.set_defaults(func=cmd_synth)

    def removal_flags(q):
        q.add_argument("--mode", choices=list(MODE_NAMES), default=None)
        q.add_argument("--rate", type=float, default=None)
        q.add_argument("--max-region", type=int, default=None)

    s = sub.add_parser("corrupt", parents=[common], help="remove voxels from recordings")
    removal_flags(s)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_corrupt)

    def hp_flags(q):
        for f in fields(HyperParams):
            default = getattr(HyperParams, f.name)
            typ = (lambda v: v.lower() in ("1", "true", "yes")) if isinstance(default, bool) else type(default)
            q.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=typ, default=None)

    s = sub.add_parser("train", parents=[common], help="fit a model on complete recordings")
    s.add_argument("--model", choices=MODELS, required=True)
    s.add_argument("--data", required=True)
    removal_flags(s)
    hp_flags(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("impute", parents=[common], help="fill missing voxels")
    s.add_argument("--model", choices=MODELS, default=None)
    s.add_argument("--model-dir", default=None)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_impute)

    s = sub.add_parser("evaluate", parents=[common], help="score imputed recordings")
    s.add_argument("--reference", required=True, help="corrupted recordings carrying ground truth")
    s.add_argument("--imputed", required=True)
    s.add_argument("--model-dir", default=None, help="score in this model's normalized space")
    s.add_argument("--model", default=None)
    s.add_argument("--mode", default=None)
    s.set_defaults(func=cmd_evaluate)

    def plan_flags(q):
        q.add_argument("--models", dest="models", type=lambda v: _split(v, str), default=None)
        q.add_argument("--rates", dest="missing_rates", type=lambda v: _split(v, float), default=None)
        q.add_argument("--modes", dest="modes", type=lambda v: _split(v, str), default=None)
        q.add_argument("--seeds", dest="seeds", type=lambda v: _split(v, int), default=None)
        q.add_argument("--folds", type=int, default=None)
        q.add_argument("--n-train-subjects", dest="n_train_subjects", type=int, default=None)

    s = sub.add_parser("search", parents=[common], help="random hyperparameter search with k-fold CV")
    s.add_argument("--data", required=True)
    s.add_argument("--n-iters", type=int, default=50)
    s.add_argument("--search-model", choices=("phi", "phi+d", "dropout", "dropout+d"), default="phi+d")
    plan_flags(s)
    s.set_defaults(func=cmd_search)

    s = sub.add_parser("bench", parents=[common], help="benchmark grid over models, modes and rates")
    s.add_argument("--data", default=None, help="dataset directory (default: synthetic)")
    s.add_argument("--data-seed", type=int, default=0)
    s.add_argument("--workers", type=int, default=1)
    plan_flags(s)
    hp_flags(s)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = read_config(args.config) if args.config else {}
    if args.seed is None and "seed" in cfg:
        args.seed = int(cfg["seed"])
    if args.metric_mode is None and "metric_mode" in cfg:
        args.metric_mode = cfg["metric_mode"]
    if args.out_dir is None and "out_dir" in cfg:
        args.out_dir = cfg["out_dir"]
    if getattr(args, "out_dir", None) is None and args.command in ("synth", "train"):
        raise SystemExit(f"{args.command} needs --out-dir")
    args.func(args, cfg)
    return 0


if __name__ == "__main__":
    sys.exit(main())
