"""Command-line entry point: ingest, train, predict, evaluate, experiments.

Exit codes: 0 success, 2 input/config error, 3 data-insufficiency error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import boosting, cohort as ch, eval as ev, predictor
from .boosting import HyperParams
from .seeding import subseed, substream
from .strata import DEFAULT_CUT_POINTS, StrataDefinition, StrataError

logger = logging.getLogger("stratrisk")

EXIT_INPUT = 2
EXIT_DATA = 3


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    dataset: dict
    seed: int
    strata: list[int] = field(default_factory=lambda: list(DEFAULT_CUT_POINTS))
    strict_truncation: bool = True
    history_features: dict | None = None
    strata_params: HyperParams = boosting.STRATA_CLASSIFIER_PARAMS
    stratum_params: HyperParams = boosting.STRATUM_PARAMS
    k: int = 5
    repeats: int = 100
    split: tuple = (0.6, 0.2, 0.2)
    mode: str = "stratified"
    experiments: dict = field(default_factory=dict)
    out: str = "out"
    base_dir: Path = Path(".")

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "RunConfig":
        try:
            dataset = d["dataset"]
            cv = d.get("cv", {})
            seed = cv["seed"] if "seed" in cv else d["seed"]
        except KeyError as exc:
            raise ConfigError(f"missing config key {exc.args[0]!r}") from None
        if "path" not in dataset and "cohort" not in dataset:
            raise ConfigError("dataset needs 'path' (CSV) or 'cohort' (JSON dump)")
        models = d.get("models", {})
        try:
            sp = replace(boosting.STRATA_CLASSIFIER_PARAMS, **models.get("strata_classifier", {}))
            mp = replace(boosting.STRATUM_PARAMS, **models.get("stratum", {}))
        except TypeError as exc:
            raise ConfigError(f"bad model parameters: {exc}") from None
        split = tuple(cv.get("split", (0.6, 0.2, 0.2)))
        if len(split) != 3 or abs(sum(split) - 1) > 1e-9:
            raise ConfigError(f"cv.split must be three fractions summing to 1, got {list(split)}")
        return cls(
            dataset=dataset,
            seed=int(seed),
            strata=list(d.get("strata", DEFAULT_CUT_POINTS)),
            strict_truncation=bool(d.get("strict_truncation", True)),
            history_features=d.get("history_features"),
            strata_params=sp,
            stratum_params=mp,
            k=int(cv.get("k", 5)),
            repeats=int(cv.get("repeats", 100)),
            split=split,
            mode=cv.get("mode", "stratified"),
            experiments=d.get("experiments", {}),
            out=d.get("out", "out"),
            base_dir=Path(base_dir),
        )

    def path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def definition(self) -> StrataDefinition:
        return StrataDefinition(self.strata)


def load_config(args) -> RunConfig:
    if not args.config:
        raise ConfigError("--config is required")
    path = Path(args.config)
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    cfg = RunConfig.from_dict(raw, base_dir=path.parent)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.strata:
        cfg.strata = StrataDefinition.parse(args.strata).to_list()
    if args.out:
        cfg.out = str(Path(args.out).resolve())
    if getattr(args, "repeats", None):
        cfg.repeats = args.repeats
    cfg.definition  # validate early
    return cfg


def _schema(cfg: RunConfig, key: str = "schema") -> ch.SchemaConfig:
    ds = cfg.dataset
    if f"{key}_path" in ds:
        return ch.SchemaConfig.from_json(cfg.path(ds[f"{key}_path"]))
    if key in ds:
        return ch.SchemaConfig.from_dict(ds[key])
    if ds.get("format") == "wuhan":
        return ch.SchemaConfig.from_dict(ch.WUHAN_SCHEMA)
    raise ConfigError(f"dataset needs '{key}', '{key}_path' or format 'wuhan'")


def load_dataset(cfg: RunConfig, which: str = "path") -> ch.AlignedCohort:
    ds = cfg.dataset
    if which == "path" and "cohort" in ds:
        cohort = ch.load_cohort(cfg.path(ds["cohort"]))
    else:
        schema = _schema(cfg, "schema" if which == "path" else "test_schema")
        cohort = ch.impute_locf(ch.align_and_aggregate(ch.ingest_csv(cfg.path(ds[which]), schema),
                                                       late_records=schema.late_records))
    if cfg.history_features:
        hf = cfg.history_features
        cohort = ch.derive_history_features(cohort, hf["variables"], int(hf.get("window", 7)))
    return cohort


def _out_dir(cfg: RunConfig) -> Path:
    out = cfg.path(cfg.out) if not Path(cfg.out).is_absolute() else Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_ingest(args) -> int:
    cfg = load_config(args)
    cohort = load_dataset(cfg)
    out = _out_dir(cfg)
    ch.dump_cohort(cohort, out / "cohort.json")
    summary = ch.summarize(cohort)
    _write_json(out / "summary.json", summary)
    print(f"{summary['patients']} patients, {summary['deaths']} deaths, {summary['variables']} variables")
    return 0


def _train_validation_split(cohort: ch.AlignedCohort, cfg: RunConfig):
    frac = cfg.split[1] / (cfg.split[0] + cfg.split[1])
    ids = np.array(cohort.patient_ids, dtype=object)
    y = cohort.outcomes
    rng = substream(cfg.seed, "train-validation")
    val = []
    for cls in (0, 1):
        members = ids[y == cls]
        val.extend(rng.permutation(members)[: int(round(frac * members.size))].tolist())
    val = set(val)
    return cohort.subset(set(ids) - val), cohort.subset(val)


def cmd_train(args) -> int:
    cfg = load_config(args)
    cohort = load_dataset(cfg)
    train_c, val_c = _train_validation_split(cohort, cfg)
    pred = predictor.fit(
        train_c, cfg.definition,
        boosting.with_seed(cfg.strata_params, subseed(cfg.seed, "subsample-strata")),
        boosting.with_seed(cfg.stratum_params, subseed(cfg.seed, "subsample-stratum")),
        validation=val_c if len(val_c) else None, strict=cfg.strict_truncation,
    )
    out = _out_dir(cfg)
    pred.save(out / "model.json")
    log = {
        "train_patients": len(train_c),
        "validation_patients": len(val_c),
        "flags": {str(k): v for k, v in pred.flags.items()},
        "strata_classifier": {"best_round": pred.strata_clf.best_round, "history": pred.strata_clf.history},
        "stratum_models": [{"window": w.label(), "best_round": m.best_round, "history": m.history}
                           for w, m in zip(cfg.definition.windows(), pred.stratum_models)],
    }
    _write_json(out / "training_log.json", log)
    print(f"model written to {out / 'model.json'}")
    return 0


def _read_day_csv(path, schema: tuple[str, ...]):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        missing = [c for c in schema if c not in cols]
        if missing:
            raise ch.SchemaError(f"{path}: missing feature columns {missing[:5]}")
        ids, rows = [], []
        for r in reader:
            ids.append(r.get("patient_id"))
            rows.append([np.nan if r[c].strip() in ("", "NA") else float(r[c]) for c in schema])
    return ids, np.array(rows, dtype=float).reshape(-1, len(schema))


def cmd_predict(args) -> int:
    if not args.model:
        raise ConfigError("--model is required")
    pred = predictor.StratifiedPredictor.load(args.model)
    n_s = pred.n_strata
    cols = (["patient_id", "day_offset"] + [f"p_stratum_{k}" for k in range(n_s)]
            + [f"score_stratum_{k}" for k in range(n_s)] + ["risk"])
    if args.input and str(args.input).endswith(".csv"):
        ids, X = _read_day_csv(args.input, pred.feature_schema)
        probs, scores = pred.components(X)
        risk = predictor.combine(probs, scores)
        rows = [predictor.DailyPrediction(ids[i], None, probs[i], scores[i], float(risk[i])).as_row()
                for i in range(len(ids))]
    else:
        if args.input:
            cohort = ch.load_cohort(args.input)
        else:
            cohort = load_dataset(load_config(args))
        if cohort.variable_names != pred.feature_schema:
            raise ch.SchemaError("cohort variables do not match the model's feature schema")
        rows = [d.as_row() for d in predictor.predict_cohort(pred, cohort)]
    if any(not 0 <= r["risk"] <= 1 for r in rows):
        raise RuntimeError("risk outside [0, 1]")
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    ev.write_csv(out / "predictions.csv", cols, rows)
    print(f"{len(rows)} predictions written to {out / 'predictions.csv'}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = load_config(args)
    cohort = load_dataset(cfg)
    report = ev.run_cv(cohort, cfg.definition, cfg.strata_params, cfg.stratum_params, k=cfg.k,
                       repeats=cfg.repeats, split=cfg.split, seed=cfg.seed, strict=cfg.strict_truncation,
                       mode=cfg.mode, jobs=args.jobs)
    out = _out_dir(cfg)
    (out / "cv_report.json").write_text(report.to_json(), encoding="utf-8")
    ev.write_table5(report, out / "table5.csv")
    print(" ".join(f"{k}={v:.4f}" for k, v in report.mean.items()))
    for flag in report.flags:
        print(f"note: {flag}")
    return 0


def cmd_experiments(args) -> int:
    cfg = load_config(args)
    cohort = load_dataset(cfg)
    ex = cfg.experiments
    out = _out_dir(cfg)
    results = ev.per_stratum_eval(cohort, cfg.definition, cfg.stratum_params, k=cfg.k,
                                  repeats=int(ex.get("stratum_repeats", 1)), split=cfg.split, seed=cfg.seed,
                                  strict=cfg.strict_truncation)
    ev.write_table4(results, out / "table4.csv")

    test_c = load_dataset(cfg, "test_path") if "test_path" in cfg.dataset else None
    features = ex.get("baseline_features", list(ch.KEY_LABS_WUHAN))
    daily = ev.daily_baseline_experiment(cohort, test_c, features, day_mode=ex.get("day_mode", "offset"),
                                         params=cfg.stratum_params, min_patients=int(ex.get("min_patients", 5)),
                                         seed=cfg.seed)
    rows = [dict(r, feature="", importance=None) for r in daily.metrics]
    rows += [{"day": r["day"], "metric": "importance", "value": None, "feature": r["feature"],
              "importance": r["importance"]} for r in daily.importances]
    ev.write_csv(out / "daily_baseline.csv", ("day", "metric", "value", "feature", "importance"), rows)

    imp_rows = []
    for r in results:
        for f, (share, count) in sorted(r.importance.items()):
            imp_rows.append({"model": "stratum", "key": r.window, "feature": f, "gain_share": share,
                             "splits": count})
    for r in daily.importances:
        imp_rows.append({"model": "daily", "key": r["day"], "feature": r["feature"],
                         "gain_share": r["importance"], "splits": None})
    ev.write_csv(out / "importances.csv", ("model", "key", "feature", "gain_share", "splits"), imp_rows)
    drift = {
        "stratum": ev.importance_drift({r.window: {f: s for f, (s, _) in r.importance.items()} for r in results}),
        "daily": ev.importance_drift(daily.importance_by_day()),
    }
    _write_json(out / "importance_drift.json", drift)
    for r in results:
        print(f"{r.window:>12}  patients={r.patients:<4} deaths={r.deaths:<4} "
              f"sensitivity={r.died.recall:.3f}  {'; '.join(r.flags)}")
    return 0


COMMANDS = {
    "ingest": cmd_ingest,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "experiments": cmd_experiments,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stratrisk", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="run configuration (JSON)")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--jobs", type=int, default=1, help="parallel CV repetitions")
        p.add_argument("--out", help="output directory")
        p.add_argument("--strata", help='cut points, e.g. "-1,-2,-4,-7,-13"')
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "evaluate":
            p.add_argument("--repeats", type=int, help="CV repetitions (overrides the config)")
        if name == "predict":
            p.add_argument("--model", help="model bundle written by 'train'")
            p.add_argument("--input", help="cohort JSON dump or single-day feature CSV")
    return parser


def _glue_strata(argv: list[str]) -> list[str]:
    # "--strata -1,-2" would read the cut points as an option flag
    out = []
    it = iter(argv)
    for a in it:
        if a == "--strata":
            out.append(f"--strata={next(it, '')}")
        else:
            out.append(a)
    return out


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(_glue_strata(list(sys.argv[1:] if argv is None else argv)))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except predictor.InsufficientDataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ch.CohortError, StrataError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
