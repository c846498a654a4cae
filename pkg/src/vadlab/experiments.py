"""Experiment plans: expansion into run configs, sweeps and result reports."""

from __future__ import annotations

import copy
import csv
import io
import itertools
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from . import trainer as tr
from .errors import ConfigError

SWEEP_CSV = "sweep.csv"
FINAL_CSV = "final.csv"
REPORT_CSV = "report.csv"


def set_dotted(target: dict, key: str, value: Any) -> None:
    """``set_dotted(d, "arch.shared_blocks", 2)`` creates intermediate objects as needed."""
    parts = key.split(".")
    node = target
    for p in parts[:-1]:
        child = node.get(p)
        if child is None:
            child = node[p] = {}
        elif not isinstance(child, dict):
            raise ConfigError(f"cannot set {key!r}: {p!r} is not an object")
        node = child
    node[parts[-1]] = copy.deepcopy(value)


def coordinate_label(value: Any) -> str:
    if isinstance(value, Mapping) and "name" in value:
        return str(value["name"])
    if isinstance(value, (dict, list)):
        return json.dumps(value, sort_keys=True, separators=(",", ":"))
    return "" if value is None else str(value)


@dataclass
class PlannedRun:
    run_id: str
    coords: dict[str, Any]
    config: tr.RunConfig


@dataclass
class ExperimentPlan:
    """``base`` config, optional explicit ``runs`` overrides and Cartesian ``axes``.

    Keys in ``runs`` and ``axes`` may be dotted paths into the config
    (``"arch.shared_blocks"``, ``"dataset.train_per_class"``).
    """

    name: str = "plan"
    output_dir: str = "runs"
    base: dict[str, Any] = field(default_factory=dict)
    runs: list[dict[str, Any]] | None = None
    axes: dict[str, list[Any]] = field(default_factory=dict)

    def __post_init__(self):
        if not isinstance(self.base, Mapping) or not isinstance(self.axes, Mapping):
            raise ConfigError("plan base and axes must be objects")
        for k, v in self.axes.items():
            if not isinstance(v, list):
                raise ConfigError(f"axis {k!r} must be a list")
        if self.runs is not None and not all(isinstance(r, Mapping) for r in self.runs):
            raise ConfigError("plan runs must be a list of objects")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ExperimentPlan":
        return tr.config_from_mapping(cls, d, "plan")

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "output_dir": self.output_dir, "base": self.base, "runs": self.runs,
                "axes": self.axes}

    def coordinate_keys(self) -> list[str]:
        keys: list[str] = []
        for r in self.runs or []:
            keys += [k for k in r if k not in keys]
        keys += [k for k in self.axes if k not in keys]
        return keys

    def expand(self, output_dir: str | os.PathLike | None = None) -> list[PlannedRun]:
        root = Path(output_dir if output_dir is not None else self.output_dir)
        overrides = self.runs if self.runs is not None else [{}]
        axis_keys = list(self.axes)
        planned: list[PlannedRun] = []
        for override in overrides:
            for combo in itertools.product(*(self.axes[k] for k in axis_keys)):
                coords = {**override, **dict(zip(axis_keys, combo))}
                raw = copy.deepcopy(dict(self.base))
                for k, v in coords.items():
                    set_dotted(raw, k, v)
                run_id = raw.get("run_id") or f"{self.name}-{len(planned):03d}"
                raw["run_id"] = run_id
                raw["output_dir"] = str(root / "runs" / run_id)
                planned.append(PlannedRun(run_id, coords, tr.RunConfig.from_dict(raw)))
        ids = [p.run_id for p in planned]
        if len(set(ids)) != len(ids):
            raise ConfigError("plan expands to duplicate run_ids")
        return planned


def load_plan(path: str | os.PathLike) -> ExperimentPlan:
    """Read a plan file; a bare name refers to a plan shipped with the package."""
    p = Path(path)
    if not p.exists() and p.suffix in ("", ".json") and len(p.parts) == 1:
        bundled = resources.files("vadlab") / "plans" / (p.stem + ".json")
        if bundled.is_file():
            return ExperimentPlan.from_dict(json.loads(bundled.read_text()))
    try:
        return ExperimentPlan.from_dict(json.loads(p.read_text()))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read plan {path}: {exc}") from None


# ---------------------------------------------------------------- sweeps

def _execute(config: tr.RunConfig) -> list[tr.MetricsRow]:
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    return tr.train(config)[1]


def _sweep_header(coord_keys: Sequence[str]) -> list[str]:
    return ["run_id", *coord_keys, "num_views", *tr.METRICS_HEADER[1:]]


def _sweep_rows(run: PlannedRun, rows: Sequence[tr.MetricsRow], coord_keys: Sequence[str]) -> list[list[str]]:
    coords = [coordinate_label(run.coords.get(k)) for k in coord_keys]
    nviews = str(len(run.config.view_set())) if run.config.pipeline != "supervised" else "1"
    return [[run.run_id, *coords, nviews, *r.as_csv()[1:]] for r in rows]


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[str]]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def run_sweep(plan: ExperimentPlan, output_dir: str | os.PathLike | None = None, jobs: int = 1,
              data_dir: str | None = None, log=None) -> Path:
    """Run every expanded config and write the combined and final-epoch CSVs.

    With ``jobs > 1`` independent runs execute in worker processes; rows are
    still written in plan order.
    """
    planned = plan.expand(output_dir)
    if data_dir is not None:
        for p in planned:
            if p.config.dataset.data_dir is None:
                p.config.dataset.data_dir = data_dir
    root = Path(output_dir if output_dir is not None else plan.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    (root / "plan.json").write_text(json.dumps(plan.to_dict(), indent=2, sort_keys=True) + "\n")
    keys = plan.coordinate_keys()

    if jobs > 1 and len(planned) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_execute, [p.config for p in planned]))
    else:
        results = []
        for i, p in enumerate(planned):
            if log:
                log(f"[{i + 1}/{len(planned)}] {p.run_id} {json.dumps(p.coords, sort_keys=True)}")
            results.append(_execute(p.config))

    sweep_rows, final_rows = [], []
    for p, rows in zip(planned, results):
        sweep_rows += _sweep_rows(p, rows, keys)
        finals = [r for r in rows if r.split == "test"] or [r for r in rows if r.split == "train"]
        if finals:
            final_rows += _sweep_rows(p, [finals[-1]], keys)
    _write_csv(root / SWEEP_CSV, _sweep_header(keys), sweep_rows)
    _write_csv(root / FINAL_CSV, _sweep_header(keys), final_rows)
    return root


# ---------------------------------------------------------------- reports

def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("mean_std of no values")
    return float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1 else 0.0


@dataclass
class ReportRow:
    run: str
    dataset: str
    pipeline: str
    num_views: int | None
    shared_blocks: int | None
    seed: int | None
    epoch: int | None
    acc_single: float | None
    acc_agg: float | None
    status: str


def _run_dirs(root: Path) -> list[Path]:
    markers = ("config.json", "run.json", "metrics.csv")
    found = {p.parent for m in markers for p in root.rglob(m)}
    return sorted(found)


def _read_config(d: Path) -> dict[str, Any]:
    for name in ("run.json", "config.json"):
        f = d / name
        if f.is_file():
            try:
                raw = json.loads(f.read_text())
            except json.JSONDecodeError:
                continue
            return raw.get("config", raw)
    return {}


def collect_runs(runs_dir: str | os.PathLike) -> list[ReportRow]:
    root = Path(runs_dir)
    if not root.is_dir():
        raise ConfigError(f"runs directory {root} does not exist")
    out = []
    for d in _run_dirs(root):
        cfg = _read_config(d)
        ds = cfg.get("dataset", {}) or {}
        pipeline = cfg.get("pipeline", "?")
        nviews = None
        if cfg:
            try:
                nviews = 1 if pipeline == "supervised" else len(tr.resolve_view_set(cfg.get("views")))
            except ValueError:
                pass
        arch = cfg.get("arch", {}) or {}
        row = ReportRow(str(d.relative_to(root)) if d != root else d.name, ds.get("name", "?"), pipeline,
                        nviews, arch.get("shared_blocks"), cfg.get("seed"), None, None, None, "absent")
        metrics = d / "metrics.csv"
        if metrics.is_file():
            tests = [r for r in tr.read_metrics(metrics) if r.get("split") == "test"]
            if tests:
                last = tests[-1]
                row.epoch = int(last["epoch"])
                row.acc_single = float(last["acc_single"])
                row.acc_agg = float(last["acc_agg"]) if last.get("acc_agg") else None
                row.pipeline = last.get("pipeline", row.pipeline)
                row.status = "ok"
        out.append(row)
    return out


def _fmt(v: float | None) -> str:
    return "-" if v is None else f"{100 * v:.2f}"


def summarize(rows: Sequence[ReportRow]) -> list[dict[str, Any]]:
    """Group finished runs by (dataset, pipeline, views, k); mean and std over seeds."""
    groups: dict[tuple, list[ReportRow]] = {}
    for r in rows:
        if r.status == "ok":
            groups.setdefault((r.dataset, r.pipeline, r.num_views, r.shared_blocks), []).append(r)
    out = []
    for (dataset, pipeline, nviews, k), members in sorted(groups.items(), key=lambda kv: str(kv[0])):
        single = mean_std([m.acc_single for m in members])
        aggs = [m.acc_agg for m in members if m.acc_agg is not None]
        out.append({"dataset": dataset, "pipeline": pipeline, "num_views": nviews, "shared_blocks": k,
                    "n": len(members), "single_mean": single[0], "single_std": single[1],
                    "agg_mean": mean_std(aggs)[0] if aggs else None,
                    "agg_std": mean_std(aggs)[1] if aggs else None})
    return out


def render_report(rows: Sequence[ReportRow]) -> str:
    lines = [f"{'run':<32} {'dataset':<10} {'pipeline':<11} {'views':>5} {'k':>2} {'seed':>5} "
             f"{'single%':>8} {'agg%':>8}  status"]
    for r in rows:
        lines.append(f"{r.run:<32} {r.dataset:<10} {r.pipeline:<11} {r.num_views if r.num_views else '-':>5} "
                     f"{r.shared_blocks if r.shared_blocks else '-':>2} "
                     f"{'-' if r.seed is None else r.seed:>5} {_fmt(r.acc_single):>8} {_fmt(r.acc_agg):>8}  "
                     f"{r.status}")
    summary = summarize(rows)
    if summary:
        lines += ["", f"{'dataset':<10} {'pipeline':<11} {'views':>5} {'k':>2} {'n':>3} "
                      f"{'single% (mean±std)':>20} {'agg% (mean±std)':>20}"]
        for s in summary:
            single = f"{100 * s['single_mean']:.2f}±{100 * s['single_std']:.2f}"
            agg = "-" if s["agg_mean"] is None else f"{100 * s['agg_mean']:.2f}±{100 * s['agg_std']:.2f}"
            lines.append(f"{s['dataset']:<10} {s['pipeline']:<11} {s['num_views'] or '-':>5} "
                         f"{s['shared_blocks'] or '-':>2} {s['n']:>3} {single:>20} {agg:>20}")
    return "\n".join(lines) + "\n"


def write_report(runs_dir: str | os.PathLike) -> tuple[str, list[ReportRow]]:
    rows = collect_runs(runs_dir)
    header = ["run", "dataset", "pipeline", "num_views", "shared_blocks", "seed", "epoch", "acc_single",
              "acc_agg", "status"]
    body = [[coordinate_label(getattr(r, h)) for h in header] for r in rows]
    _write_csv(Path(runs_dir) / REPORT_CSV, header, body)
    return render_report(rows), rows
