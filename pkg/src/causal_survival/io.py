"""Dataset ingestion, config files, result directories and SVG plots."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .causal_tree import CausalTree, CausalTreeConfig, LeafReport
from .pipeline import LeafResult, PipelineConfig, PipelineResult, SkippedLeaf
from .survival_core import SurvivalCurve, SurvivalRecord
from .survival_forest import ForestConfig, SurvivalForest


class DataError(ValueError):
    """Malformed input data; the message names the offending row and column."""


@dataclass
class DatasetSchema:
    id_column: str = "id"
    time_column: str = "time"
    event_column: str = "event"
    treatment_column: str = "treatment"
    covariate_columns: Optional[List[str]] = None  # None -> every other column, header order
    categorical: Dict[str, Dict[str, float]] = field(default_factory=dict)
    one_hot: Dict[str, List[str]] = field(default_factory=dict)

    def __post_init__(self):
        core = [self.id_column, self.time_column, self.event_column, self.treatment_column]
        if len(set(core)) != 4:
            raise ValueError("schema column names must be distinct")
        if self.covariate_columns is not None:
            if len(set(self.covariate_columns)) != len(self.covariate_columns):
                raise ValueError("covariate columns must be distinct")
            if set(self.covariate_columns) & set(core):
                raise ValueError("covariate columns overlap the id/time/event/treatment columns")
        both = set(self.categorical) & set(self.one_hot)
        if both:
            raise ValueError(f"columns both ordinal and one-hot encoded: {sorted(both)}")

    def resolve_covariates(self, header: Sequence[str]) -> List[str]:
        if self.covariate_columns is not None:
            return list(self.covariate_columns)
        core = {self.id_column, self.time_column, self.event_column, self.treatment_column}
        return [h for h in header if h not in core]

    def feature_names(self, covariates: Sequence[str]) -> List[str]:
        names = []
        for col in covariates:
            if col in self.one_hot:
                names.extend(f"{col}={label}" for label in self.one_hot[col])
            else:
                names.append(col)
        return names

    @classmethod
    def from_file(cls, path) -> "DatasetSchema":
        return cls(**json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LoadReport:
    rows: int
    events: int
    arm0: int
    arm1: int


@dataclass
class Dataset:
    records: List[SurvivalRecord]
    feature_names: List[str]
    report: LoadReport


def _parse_float(value: str, row: int, col: str) -> float:
    try:
        out = float(value)
    except ValueError:
        raise DataError(f"row {row}, column {col!r}: expected a number, got {value!r}") from None
    if not math.isfinite(out):
        raise DataError(f"row {row}, column {col!r}: expected a finite number, got {value!r}")
    return out


def _parse_flag(value: str, row: int, col: str) -> int:
    v = value.strip()
    if v in ("0", "1", "0.0", "1.0"):
        return int(float(v))
    raise DataError(f"row {row}, column {col!r}: expected 0 or 1, got {value!r}")


def _encode(schema: DatasetSchema, col: str, value: str, row: int) -> List[float]:
    if col in schema.categorical:
        table = schema.categorical[col]
        if value not in table:
            raise DataError(f"row {row}, column {col!r}: unknown category {value!r}")
        return [float(table[value])]
    if col in schema.one_hot:
        labels = schema.one_hot[col]
        if value not in labels:
            raise DataError(f"row {row}, column {col!r}: unknown category {value!r}")
        return [1.0 if value == label else 0.0 for label in labels]
    return [_parse_float(value, row, col)]


def _maybe_int_ids(ids: List[str]) -> list:
    try:
        as_int = [int(i) for i in ids]
    except ValueError:
        return ids
    if all(str(v) == s for v, s in zip(as_int, ids)):
        return as_int
    return ids


def read_rows(path) -> tuple:
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None:
                raise DataError(f"{path}: empty file, expected a header row")
            return list(reader.fieldnames), list(reader)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None


def load_dataset(path, schema: Optional[DatasetSchema] = None, require_outcome: bool = True) -> Dataset:
    """Parse a CSV into records; columns are matched by header name.

    Rows are numbered from 1 (the first data row) in error messages.  With
    ``require_outcome=False`` missing time/event/treatment columns default to
    zero, for patient files passed to ``predict``.
    """
    schema = schema or DatasetSchema()
    header, rows = read_rows(path)
    covariates = schema.resolve_covariates(header)
    needed = [schema.id_column] + covariates
    if require_outcome:
        needed += [schema.time_column, schema.event_column, schema.treatment_column]
    for col in needed:
        if col not in header:
            raise DataError(f"{path}: missing column {col!r}")

    parsed = []
    for k, row in enumerate(rows, start=1):
        if None in row or any(v is None for v in row.values()):
            raise DataError(f"row {k}: wrong number of fields")
        if require_outcome or schema.time_column in row:
            time = _parse_float(row[schema.time_column], k, schema.time_column)
            if time < 0:
                raise DataError(f"row {k}, column {schema.time_column!r}: negative time {time!r}")
        else:
            time = 0.0
        event = _parse_flag(row[schema.event_column], k, schema.event_column) if (
            require_outcome or schema.event_column in row) else 0
        treatment = _parse_flag(row[schema.treatment_column], k, schema.treatment_column) if (
            require_outcome or schema.treatment_column in row) else 0
        x = []
        for col in covariates:
            x.extend(_encode(schema, col, row[col], k))
        parsed.append((row[schema.id_column], time, event, treatment, tuple(x)))

    ids = _maybe_int_ids([p[0] for p in parsed])
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate ids in column {schema.id_column!r}")
    records = [SurvivalRecord(i, t, e, a, x) for i, (_, t, e, a, x) in zip(ids, parsed)]
    report = LoadReport(
        rows=len(records),
        events=sum(r.event for r in records),
        arm0=sum(r.treatment == 0 for r in records),
        arm1=sum(r.treatment == 1 for r in records),
    )
    return Dataset(records, schema.feature_names(covariates), report)


def write_dataset(records: Sequence[SurvivalRecord], feature_names: Sequence[str], path) -> None:
    """Write records in the default schema (``id,time,event,treatment,<features>``)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "time", "event", "treatment", *feature_names])
        for r in records:
            w.writerow([r.id, repr(r.time), r.event, r.treatment, *(repr(x) for x in r.covariates)])


# -- config files ---------------------------------------------------------

def config_from_mapping(data: dict) -> PipelineConfig:
    """Build a config from flat dotted keys (``"forest.n_trees": 100``) or nested sections."""
    sections = {"causal": {}, "forest": {}}
    top = {}
    known = {
        "causal": {f.name for f in fields(CausalTreeConfig)},
        "forest": {f.name for f in fields(ForestConfig)},
        "": {f.name for f in fields(PipelineConfig)} - {"causal", "forest"},
    }
    for key, value in data.items():
        if key in sections and isinstance(value, dict):
            for sub, v in value.items():
                if sub not in known[key]:
                    raise ValueError(f"unknown config key {key}.{sub}")
                sections[key][sub] = v
            continue
        prefix, _, name = key.rpartition(".")
        if prefix not in known or name not in known[prefix]:
            raise ValueError(f"unknown config key {key}")
        if prefix:
            sections[prefix][name] = value
        else:
            top[name] = value
    return PipelineConfig(
        causal=CausalTreeConfig(**sections["causal"]),
        forest=ForestConfig(**sections["forest"]),
        **top,
    )


def load_config(path) -> PipelineConfig:
    return config_from_mapping(json.loads(Path(path).read_text()))


def config_to_flat(config: PipelineConfig) -> dict:
    out = {}
    for key, value in config.to_dict().items():
        if isinstance(value, dict):
            for sub, v in value.items():
                out[f"{key}.{sub}"] = v
        else:
            out[key] = value
    return out


# -- results directory -----------------------------------------------------

def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def write_results(result: PipelineResult, out_dir, schema: Optional[DatasetSchema] = None) -> Path:
    """Lay out ``tree.dot``, ``tree.json``, ``summary.json`` and ``leaves/<id>/``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "tree.dot").write_text(result.tree.to_dot(result.feature_names))
    _dump_json(result.tree.to_dict(), out / "tree.json")
    _dump_json(result.summary(), out / "summary.json")
    _dump_json(
        {
            "feature_names": result.feature_names,
            "horizon": result.horizon,
            "selected": result.selected,
            "reports": [r.to_dict() for r in result.reports],
            "skipped": [{"leaf_id": s.report.leaf_id, "reason": s.reason} for s in result.skipped],
            "schema": (schema or DatasetSchema()).to_dict(),
        },
        out / "manifest.json",
    )
    for lr in result.leaf_results:
        leaf_dir = out / "leaves" / str(lr.report.leaf_id)
        leaf_dir.mkdir(parents=True, exist_ok=True)
        _write_leaf(lr, leaf_dir)
    return out


def _write_leaf(lr: LeafResult, leaf_dir: Path) -> None:
    leaf_id = lr.report.leaf_id
    for arm, attr in ((0, "curve_t0"), (1, "curve_t1")):
        with open(leaf_dir / f"curves_t{arm}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["leaf_id", "patient_id", "arm", "time", "survival"])
            for p in lr.patient_results:
                curve = getattr(p, attr)
                for t, s in zip(curve.times, curve.probs):
                    w.writerow([leaf_id, p.patient_id, arm, repr(float(t)), repr(float(s))])
    with open(leaf_dir / "diff.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        # arm is the patient's observed arm; survival is the prediction under it
        w.writerow(["leaf_id", "patient_id", "arm", "time", "survival", "delta"])
        for p in lr.patient_results:
            observed = p.curve_t1 if p.arm == 1 else p.curve_t0
            for t, d in zip(p.diff.times, p.diff.deltas):
                w.writerow([leaf_id, p.patient_id, p.arm, repr(float(t)), repr(float(observed(t))), repr(float(d))])
    with open(leaf_dir / "leaf_km.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["leaf_id", "arm", "time", "survival"])
        for arm, curve in ((0, lr.leaf_km_t0), (1, lr.leaf_km_t1)):
            for t, s in zip(curve.times, curve.probs):
                w.writerow([leaf_id, arm, repr(float(t)), repr(float(s))])
    with open(leaf_dir / "patients.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["leaf_id", "patient_id", "arm", "rmst_diff"])
        for p in lr.patient_results:
            w.writerow([leaf_id, p.patient_id, p.arm, repr(p.rmst_diff)])
    _dump_json(
        {
            "report": lr.report.to_dict(),
            "feature_indices": lr.feature_indices,
            "leaf_km_t0": lr.leaf_km_t0.to_dict(),
            "leaf_km_t1": lr.leaf_km_t1.to_dict(),
            "train_ids": {str(a): ids for a, ids in lr.train_ids.items()},
        },
        leaf_dir / "leaf.json",
    )
    _dump_json(lr.forest_t0.to_dict(), leaf_dir / "forest_t0.json")
    _dump_json(lr.forest_t1.to_dict(), leaf_dir / "forest_t1.json")


def read_curve_csv(path) -> Dict[tuple, SurvivalCurve]:
    """Group a curve CSV into ``{(patient_id, arm): SurvivalCurve}``; validates each curve."""
    groups: Dict[tuple, list] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row.get("patient_id", ""), int(row["arm"]))
            groups.setdefault(key, []).append((float(row["time"]), float(row["survival"])))
    return {
        key: SurvivalCurve(np.array([t for t, _ in pts]), np.array([s for _, s in pts]))
        for key, pts in groups.items()
    }


def load_results(results_dir) -> PipelineResult:
    """Reload a results directory for prediction and reporting.

    Per-patient curves stay on disk; ``leaf_results[*].patient_results`` is empty.
    """
    root = Path(results_dir)
    if not (root / "manifest.json").is_file():
        raise FileNotFoundError(f"{root} is not a results directory (no manifest.json)")
    manifest = json.loads((root / "manifest.json").read_text())
    summary = json.loads((root / "summary.json").read_text())
    tree = CausalTree.from_dict(json.loads((root / "tree.json").read_text()))
    reports = [LeafReport.from_dict(r) for r in manifest["reports"]]
    by_id = {r.leaf_id: r for r in reports}
    leaf_results = []
    for leaf in summary["leaves"]:
        leaf_dir = root / "leaves" / str(leaf["leaf_id"])
        meta = json.loads((leaf_dir / "leaf.json").read_text())
        leaf_results.append(
            LeafResult(
                report=by_id[leaf["leaf_id"]],
                forest_t0=SurvivalForest.from_dict(json.loads((leaf_dir / "forest_t0.json").read_text())),
                forest_t1=SurvivalForest.from_dict(json.loads((leaf_dir / "forest_t1.json").read_text())),
                feature_indices=meta["feature_indices"],
                patient_results=[],
                leaf_km_t0=SurvivalCurve.from_dict(meta["leaf_km_t0"]),
                leaf_km_t1=SurvivalCurve.from_dict(meta["leaf_km_t1"]),
                train_ids={int(a): ids for a, ids in meta["train_ids"].items()},
            )
        )
    baseline = summary["baseline"]
    return PipelineResult(
        tree=tree,
        root_ate=summary["root_ate"],
        median_t0=baseline["median_t0"],
        median_t1=baseline["median_t1"],
        leaf_results=leaf_results,
        skipped=[SkippedLeaf(by_id[s["leaf_id"]], s["reason"]) for s in manifest["skipped"]],
        reports=reports,
        selected=manifest["selected"],
        horizon=manifest["horizon"],
        feature_names=manifest["feature_names"],
        provenance=summary["provenance"],
    )


def results_schema(results_dir) -> DatasetSchema:
    manifest = json.loads((Path(results_dir) / "manifest.json").read_text())
    return DatasetSchema(**manifest["schema"])


# -- SVG --------------------------------------------------------------------

def svg_step_plot(series, horizon: float, title: str = "", width: int = 640, height: int = 400,
                  ymin: float = 0.0, ymax: float = 1.0) -> str:
    """Render step functions as SVG polylines.

    ``series`` is a list of dicts with ``times``, ``values`` and optional
    ``color``, ``width``, ``dash``, ``opacity``, ``label`` and ``start``
    (value before the first time, default 1.0).
    """
    ml, mr, mt, mb = 50, 20, 30, 40
    pw, ph = width - ml - mr, height - mt - mb

    def sx(t):
        return ml + pw * min(max(t, 0.0), horizon) / horizon

    def sy(v):
        return mt + ph * (ymax - v) / (ymax - ymin)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-family="sans-serif" '
        f'font-size="14">{_esc(title)}</text>',
        f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" stroke="black"/>',
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" stroke="black"/>',
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        v = ymin + frac * (ymax - ymin)
        parts.append(f'<text x="{ml - 6}" y="{sy(v) + 4:.1f}" text-anchor="end" font-family="sans-serif" '
                     f'font-size="10">{v:g}</text>')
        t = frac * horizon
        parts.append(f'<text x="{sx(t):.1f}" y="{mt + ph + 14}" text-anchor="middle" '
                     f'font-family="sans-serif" font-size="10">{t:.0f}</text>')
    if ymin < 0 < ymax:
        parts.append(f'<line x1="{ml}" y1="{sy(0):.1f}" x2="{ml + pw}" y2="{sy(0):.1f}" stroke="#999" '
                     f'stroke-dasharray="2,2"/>')
    legend_y = mt + 12
    for s in series:
        level = s.get("start", 1.0)
        pts = [(sx(0.0), sy(level))]
        for t, v in zip(s["times"], s["values"]):
            if t > horizon:
                break
            pts.append((sx(t), sy(level)))
            level = v
            pts.append((sx(t), sy(level)))
        pts.append((sx(horizon), sy(level)))
        dash = f' stroke-dasharray="{s["dash"]}"' if s.get("dash") else ""
        parts.append(
            f'<polyline fill="none" stroke="{s.get("color", "black")}" stroke-width="{s.get("width", 1.5)}" '
            f'stroke-opacity="{s.get("opacity", 1.0)}"{dash} points="'
            + " ".join(f"{x:.2f},{y:.2f}" for x, y in pts) + '"/>'
        )
        if s.get("label"):
            parts.append(f'<text x="{ml + pw - 4}" y="{legend_y}" text-anchor="end" font-family="sans-serif" '
                         f'font-size="11" fill="{s.get("color", "black")}">{_esc(s["label"])}</text>')
            legend_y += 14
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _esc(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def write_leaf_plots(results_dir, max_patients: int = 50) -> List[Path]:
    """Overlay and difference plots per fitted leaf, from the curve CSVs."""
    root = Path(results_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    horizon = float(manifest["horizon"])
    plots = root / "plots"
    plots.mkdir(exist_ok=True)
    written = []
    for leaf_dir in sorted((root / "leaves").glob("*"), key=lambda p: int(p.name)):
        leaf_id = leaf_dir.name
        meta = json.loads((leaf_dir / "leaf.json").read_text())
        series = []
        for arm, color in ((0, "red"), (1, "blue")):
            curves = read_curve_csv(leaf_dir / f"curves_t{arm}.csv")
            for (_, _), c in list(curves.items())[:max_patients]:
                series.append({"times": c.times, "values": c.probs, "color": color, "width": 0.6, "opacity": 0.35})
            km = SurvivalCurve.from_dict(meta[f"leaf_km_t{arm}"])
            series.append({"times": km.times, "values": km.probs, "color": color, "width": 2.5,
                           "dash": "6,3", "label": f"leaf KM, arm {arm}"})
        path = plots / f"leaf_{leaf_id}_overlay.svg"
        path.write_text(svg_step_plot(series, horizon, f"Leaf {leaf_id}: {meta['report']['path_string']}"))
        written.append(path)

        with open(leaf_dir / "diff.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        if rows:
            first = rows[0]["patient_id"]
            pts = [(float(r["time"]), float(r["delta"])) for r in rows if r["patient_id"] == first]
            diff_series = [{"times": [t for t, _ in pts], "values": [d for _, d in pts], "start": 0.0,
                            "color": "purple", "label": f"S1 - S0, patient {first}"}]
            path = plots / f"leaf_{leaf_id}_diff.svg"
            path.write_text(svg_step_plot(diff_series, horizon, f"Leaf {leaf_id}: differential survival",
                                          ymin=-1.0, ymax=1.0))
            written.append(path)
    return written


def format_report(results_dir) -> str:
    summary = json.loads((Path(results_dir) / "summary.json").read_text())
    b = summary["baseline"]

    def fmt(v):
        return "undefined" if v is None else f"{v:.2f}"

    lines = [
        f"root ATE (observed days, arm 1 - arm 0): {summary['root_ate']:.2f}",
        f"baseline KM medians: arm 0 {fmt(b['median_t0'])}, arm 1 {fmt(b['median_t1'])}, "
        f"difference {fmt(b['median_diff'])}",
        f"RMST horizon: {summary['horizon']:.2f} days",
        f"selected leaves: {summary['selected_leaves']}",
    ]
    for leaf in summary["leaves"]:
        lines.append(
            f"leaf {leaf['leaf_id']}: {leaf['path_string']} | tau_hat {leaf['tau_hat']:.2f} "
            f"(treated {leaf['n_treated']}, control {leaf['n_control']}) | mean RMST diff "
            f"{leaf['mean_rmst_diff']:.2f} over {leaf['n_patients_predicted']} held-out patients"
        )
    for s in summary["skipped"]:
        lines.append(f"leaf {s['leaf_id']} skipped: {s['path_string']} ({s['reason']})")
    prov = summary["provenance"]
    lines.append(f"seed {prov['seed']}, config {prov['config_hash'][:12]}, data {prov['dataset_fingerprint'][:12]}")
    return "\n".join(lines)
