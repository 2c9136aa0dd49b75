"""Command-line entry point: simulate, fit, predict, baseline, report."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import datagen
from .io import (
    DatasetSchema,
    config_from_mapping,
    format_report,
    load_config,
    load_dataset,
    load_results,
    results_schema,
    write_dataset,
    write_leaf_plots,
    write_results,
)
from .pipeline import NoFittedModelError, PipelineConfig, population_baseline, predict_new_patient, run_two_step


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _schema(path):
    return DatasetSchema.from_file(path) if path else DatasetSchema()


def cmd_simulate(args) -> int:
    if Path(args.scenario).suffix == ".json":
        spec = datagen.load_scenario(args.scenario)
    else:
        spec = datagen.get_scenario(args.scenario)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.n is not None:
        changes["n"] = args.n
    if changes:
        spec = spec.replace(**changes)
    cohort = datagen.generate(spec)
    out = Path(args.out)
    write_dataset(cohort.records, cohort.feature_names, out)
    truth_path = out.with_suffix(".truth.json")
    truth = cohort.truth.to_dict()
    truth["scenario"] = spec.to_dict()
    truth["feature_names"] = cohort.feature_names
    truth_path.write_text(json.dumps(truth, indent=1, sort_keys=True) + "\n")
    print(f"wrote {len(cohort.records)} records to {out} and ground truth to {truth_path}")
    return 0


def _fit_config(args) -> PipelineConfig:
    config = load_config(args.config) if args.config else PipelineConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.threshold is not None:
        changes["ate_threshold"] = args.threshold
    return replace(config, **changes) if changes else config


def cmd_fit(args) -> int:
    schema = _schema(args.schema)
    data = load_dataset(args.data, schema)
    config = _fit_config(args)
    result = run_two_step(data.records, config, data.feature_names, n_jobs=args.threads)
    write_results(result, args.out, schema)
    r = data.report
    print(f"loaded {r.rows} records ({r.events} events; arm 0: {r.arm0}, arm 1: {r.arm1})")
    print(f"fitted {len(result.leaf_results)} of {len(result.selected)} selected leaves; results in {args.out}")
    return 0


def cmd_predict(args) -> int:
    result = load_results(args.results)
    schema = results_schema(args.results)
    schema = replace(schema, covariate_columns=schema.covariate_columns or _covariate_columns(result, schema))
    data = load_dataset(args.patients, schema, require_outcome=False)
    out = Path(args.out) if args.out else None
    rows = []
    for rec in data.records:
        try:
            pred = predict_new_patient(result, rec.covariates)
        except NoFittedModelError as exc:
            print(f"patient {rec.id}: {exc}", file=sys.stderr)
            continue
        for t, d in zip(pred.diff.times, pred.diff.deltas):
            rows.append([pred.leaf_id, rec.id, repr(float(t)), repr(float(pred.curve_t0(t))),
                         repr(float(pred.curve_t1(t))), repr(float(d))])
        print(f"patient {rec.id}: leaf {pred.leaf_id}, RMST difference {pred.rmst_diff:.3f} days")
    if out:
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["leaf_id", "patient_id", "time", "survival_t0", "survival_t1", "delta"])
            w.writerows(rows)
    return 0


def _covariate_columns(result, schema: DatasetSchema):
    # default schema: feature names are the covariate columns
    if schema.one_hot:
        raise CliError("results were fitted with one-hot columns; the schema must list covariate_columns")
    return list(result.feature_names)


def cmd_baseline(args) -> int:
    data = load_dataset(args.data, _schema(args.schema))
    b = population_baseline(data.records)
    fmt = lambda v: "undefined" if v is None else f"{v:.2f}"  # noqa: E731
    print(f"median arm 0: {fmt(b['median_t0'])}")
    print(f"median arm 1: {fmt(b['median_t1'])}")
    print(f"median difference (arm 1 - arm 0): {fmt(b['median_diff'])}")
    if args.json:
        print(json.dumps(b, sort_keys=True))
    return 0


def cmd_report(args) -> int:
    print(format_report(args.results))
    if args.plots:
        for path in write_leaf_plots(args.results):
            print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="causal-survival", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="draw a synthetic cohort")
    p.add_argument("--scenario", default="paper_shape",
                   help=f"bundled name ({', '.join(sorted(datagen.SCENARIOS))}) or a JSON spec file")
    p.add_argument("--seed", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="run the two-step pipeline")
    p.add_argument("data")
    p.add_argument("--schema")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--threshold", type=float, help="ATE difference for leaf selection")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="differential curves for new patients")
    p.add_argument("--results", required=True)
    p.add_argument("patients")
    p.add_argument("--out")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("baseline", help="arm-wise KM medians")
    p.add_argument("data")
    p.add_argument("--schema")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("report", help="summarise a results directory")
    p.add_argument("--results", required=True)
    p.add_argument("--plots", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (CliError, ValueError, KeyError, OSError, LookupError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 2 if isinstance(exc, CliError) else 1


if __name__ == "__main__":
    sys.exit(main())
