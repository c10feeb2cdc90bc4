"""Metric suite, PSD charts and parameter sweeps."""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .isotonic import project_psd
from .psd import DEFAULT_LADDER, PsdError, SieveLadder, d50

SWEEP_AXES = ("filters", "kernel", "epochs", "height", "mode", "view")
METRIC_COLUMNS = ("rmse_all", "rmse_finest", "rmse_coarsest", "r_squared", "mean_d50_percent_error")


class EvalError(ValueError):
    pass


@dataclass
class MetricReport:
    rmse_per_sieve: list
    rmse_all: float
    rmse_finest: float
    rmse_coarsest: float
    r_squared: float
    n_samples: int
    mean_d50_percent_error: float | None = None
    d50_excluded: int = 0
    model: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def _pair(pred, truth):
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.ndim == 1:
        pred = pred[None]
    if truth.ndim == 1:
        truth = truth[None]
    if pred.shape != truth.shape:
        raise EvalError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    if pred.shape[0] == 0:
        raise EvalError("no samples")
    return pred, truth


def r_squared(pred, truth) -> float:
    """1 - SS_res / SS_tot pooled over all entries, about the pooled truth mean."""
    pred, truth = _pair(pred, truth)
    ss_res = float(np.sum((pred - truth) ** 2))
    ss_tot = float(np.sum((truth - truth.mean()) ** 2))
    if ss_tot == 0.0:
        return 1.0 if ss_res == 0.0 else -math.inf
    return 1.0 - ss_res / ss_tot


def rmse_metrics(pred, truth, model: str = "") -> MetricReport:
    pred, truth = _pair(pred, truth)
    sq = (pred - truth) ** 2
    per_sieve = np.sqrt(sq.mean(axis=0))
    return MetricReport(
        rmse_per_sieve=[float(v) for v in per_sieve],
        rmse_all=float(np.sqrt(sq.mean())),
        rmse_finest=float(per_sieve[0]),
        rmse_coarsest=float(per_sieve[-1]),
        r_squared=r_squared(pred, truth),
        n_samples=int(pred.shape[0]),
        model=model,
    )


def d50_error(pred, truth, ladder: SieveLadder = DEFAULT_LADDER, project: bool = True):
    """(mean of 100 |d50(pred) - d50(truth)| / d50(truth), rows excluded).

    Predictions are projected onto monotone curves in [0, 100] first; truth
    rows whose D50 cannot be computed are excluded and counted.
    """
    pred, truth = _pair(pred, truth)
    if project:
        pred = project_psd(pred)
    errors, excluded = [], 0
    for p, t in zip(pred, truth):
        try:
            ref = d50(t, ladder)
        except PsdError:
            excluded += 1
            continue
        if ref <= 0:
            excluded += 1
            continue
        errors.append(100.0 * abs(d50(p, ladder) - ref) / ref)
    mean = float(np.mean(errors)) if errors else math.nan
    return mean, excluded


def evaluate(pred, truth, ladder: SieveLadder = DEFAULT_LADDER, model: str = "") -> MetricReport:
    report = rmse_metrics(pred, truth, model)
    report.mean_d50_percent_error, report.d50_excluded = d50_error(pred, truth, ladder)
    return report


def baseline_rmse(train_truth, test_truth) -> float:
    """RMSE (all sieves) of always predicting the training-set mean label."""
    mean = np.asarray(train_truth, dtype=float).mean(axis=0)
    test = np.asarray(test_truth, dtype=float)
    return rmse_metrics(np.broadcast_to(mean, test.shape), test).rmse_all


# ---------------------------------------------------------------------------
# charts

def chart_grid(n: int) -> tuple[int, int]:
    """Panel rows and columns: up to three panels per row."""
    if not 1 <= n <= 12:
        raise EvalError(f"a PSD chart holds 1 to 12 pairs, got {n}")
    cols = min(n, 3)
    return -(-n // cols), cols


def psd_chart_rows(pairs, ladder: SieveLadder = DEFAULT_LADDER, labels=None) -> list[list]:
    rows = []
    for i, (truth, pred) in enumerate(pairs):
        name = labels[i] if labels else str(i)
        for series, values in (("truth", truth), ("pred", pred)):
            for size, v in zip(ladder.openings, values):
                rows.append([name, series, f"{size:g}", repr(float(v))])
    return rows


def psd_chart(pairs, out_svg, ladder: SieveLadder = DEFAULT_LADDER, labels=None, out_csv=None) -> Path:
    """Semi-log panel grid of truth vs prediction; writes an SVG and a CSV twin."""
    from .plots import draw_psd_panels

    pairs = [(np.asarray(t, dtype=float), np.asarray(p, dtype=float)) for t, p in pairs]
    rows, cols = chart_grid(len(pairs))
    out_svg = Path(out_svg)
    out_csv = Path(out_csv) if out_csv is not None else out_svg.with_suffix(".csv")
    draw_psd_panels(pairs, ladder, rows, cols, out_svg, labels)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["sample", "series", "sieve_um", "passing"])
    writer.writerows(psd_chart_rows(pairs, ladder, labels))
    out_csv.write_text(buf.getvalue())
    return out_svg


# ---------------------------------------------------------------------------
# sweeps

@dataclass
class SweepGrid:
    axes: dict                         # axis name -> list of values, swept as a product
    base: object                       # PsdNetConfig
    results: list = field(default_factory=list)

    def __post_init__(self):
        for name, values in self.axes.items():
            if name not in SWEEP_AXES:
                raise EvalError(f"unknown sweep axis {name!r}; choose from {SWEEP_AXES}")
            if not values:
                raise EvalError(f"axis {name!r} has no values")

    def cells(self) -> list[dict]:
        names = list(self.axes)
        return [dict(zip(names, combo)) for combo in itertools.product(*(self.axes[n] for n in names))]


def cell_config(base, cell: dict):
    changes = {}
    for name, value in cell.items():
        if name == "filters":
            f = int(value)
            changes["filters"] = (f, 2 * f, 4 * f, 4 * f)
        elif name in ("kernel", "epochs", "height"):
            changes[name] = int(value)
        else:
            changes[name] = str(value)
    return replace(base, **changes)


def _run_cell(args):
    from .dataset import read_manifest
    from .psdnet import build, predict_manifest, train

    root, base, cell = args
    try:
        config = cell_config(base, cell)
        manifest = read_manifest(root)
        network, history = train(build(config), manifest, config)
        pred, truth, _ = predict_manifest(network, manifest, config, "test")
        report = evaluate(pred, truth, manifest.ladder, config.name)
        return {"cell": cell, "status": "ok", "report": asdict(report), "seed": config.seed,
                "best_epoch": history.best_epoch}
    except Exception as exc:  # recorded per cell; the sweep carries on
        return {"cell": cell, "status": f"failed: {type(exc).__name__}: {exc}", "report": None,
                "seed": base.seed, "best_epoch": None}


def run_sweep(grid: SweepGrid, dataset_root, out_dir, workers: int = 1) -> SweepGrid:
    """Train and evaluate one model per cell; writes sweep.csv and one SVG per axis."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(str(dataset_root), grid.base, cell) for cell in grid.cells()]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell, jobs))
    else:
        results = [_run_cell(job) for job in jobs]
    grid.results = results
    (out_dir / "sweep.csv").write_text(sweep_csv(grid))
    from .plots import draw_sweep_lines

    for axis in grid.axes:
        draw_sweep_lines(grid, axis, out_dir / f"sweep_{axis}.svg")
    return grid


def sweep_csv(grid: SweepGrid) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    axes = list(grid.axes)
    writer.writerow(axes + ["model"] + list(METRIC_COLUMNS)
                    + [f"rmse_p{s:g}" for s in DEFAULT_LADDER.openings] + ["n_samples", "best_epoch", "seed", "status"])
    for res in grid.results:
        rep = res["report"]
        cell = [res["cell"][a] for a in axes]
        if rep is None:
            writer.writerow(cell + [""] * (1 + len(METRIC_COLUMNS) + 5 + 2) + [res["seed"], res["status"]])
            continue
        metrics = ["" if rep[m] is None else repr(float(rep[m])) for m in METRIC_COLUMNS]
        writer.writerow(cell + [rep["model"]] + metrics + [repr(float(v)) for v in rep["rmse_per_sieve"]]
                        + [rep["n_samples"], res["best_epoch"], res["seed"], res["status"]])
    return buf.getvalue()


def read_sweep_csv(text: str) -> list[dict]:
    return list(csv.DictReader(io.StringIO(text)))


def predictions_csv(ids, pred, truth=None, ladder: SieveLadder = DEFAULT_LADDER) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    cols = ladder.columns
    header = ["id"] + [f"pred_{c}" for c in cols]
    if truth is not None:
        header += [f"true_{c}" for c in cols]
    writer.writerow(header)
    for i, sid in enumerate(ids):
        row = [sid] + [repr(float(v)) for v in pred[i]]
        if truth is not None:
            row += [repr(float(v)) for v in truth[i]]
        writer.writerow(row)
    return buf.getvalue()
