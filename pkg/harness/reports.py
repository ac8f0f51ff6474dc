"""
CSV/JSON artefacts of a run and the matplotlib script that plots them.

Floats are written with repr() so a written file reads back bit-for-bit,
and nothing time-dependent goes into any file: equal seeds give equal bytes.
"""
import csv
import json
import logging
import re
from pathlib import Path

import numpy as np

from harness.logic import TrialRecord

logger = logging.getLogger(__name__)

STATE_COLUMNS = ("x", "y", "vx", "vy")
CDF_POINTS = 201

PLOT_SCRIPT = '''"""Plots metrics.csv and cdf_distance.csv from this directory. Requires matplotlib."""
import csv
from pathlib import Path

import matplotlib.pyplot as plt

HERE = Path(__file__).resolve().parent


def read_columns(name):
    with open(HERE / name, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {key: [float(row[key]) for row in rows] for key in rows[0]}


def main():
    metrics = read_columns("metrics.csv")
    cdf = read_columns("cdf_distance.csv")
    fig, (ax_rmse, ax_cdf) = plt.subplots(1, 2, figsize=(11, 4))
    time = metrics.pop("time_s")
    metrics.pop("epoch")
    for name, values in metrics.items():
        ax_rmse.plot(time, values, label=name)
    ax_rmse.set_xlabel("time (s)")
    ax_rmse.set_ylabel("position RMSE (m)")
    ax_rmse.set_yscale("log")
    ax_rmse.legend()

    threshold = cdf.pop("threshold_m")
    for name, values in cdf.items():
        ax_cdf.plot(threshold, values, label=name)
    ax_cdf.set_xlabel("position error (m)")
    ax_cdf.set_ylabel("CDF")
    ax_cdf.legend()
    fig.tight_layout()
    fig.savefig(HERE / "metrics.png", dpi=150)


if __name__ == "__main__":
    main()
'''


def _fmt(value):
    return repr(float(value))


def write_trial_csv(path, record):
    """One row per epoch: truth, then per filter the estimate, diverged flag, projected points and skips."""
    path = Path(path)
    header = ["trial", "epoch"] + [f"truth_{c}" for c in STATE_COLUMNS]
    for name in record.filters:
        header += [f"{name}_{c}" for c in STATE_COLUMNS]
        header += [f"{name}_diverged", f"{name}_projected", f"{name}_skipped"]

    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for k in range(record.epochs):
            row = [record.trial, k + 1] + [_fmt(v) for v in record.truth[k]]
            for name in record.filters:
                row += [_fmt(v) for v in record.estimates[name][k]]
                row += [int(record.diverged[name]), int(record.projected[name][k]), int(record.skipped[name][k])]
            writer.writerow(row)
    return path


def read_trial_csv(path) -> TrialRecord:
    """Inverse of write_trial_csv. Diagnostics totals and timings are not stored per trial."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"trial file {path} has no rows")
    names = [m.group(1) for m in (re.fullmatch(r"(.+)_diverged", key) for key in rows[0]) if m]

    record = TrialRecord(
        trial=int(rows[0]["trial"]),
        truth=np.array([[float(row[f"truth_{c}"]) for c in STATE_COLUMNS] for row in rows]),
    )
    for name in names:
        record.estimates[name] = np.array([[float(row[f"{name}_{c}"]) for c in STATE_COLUMNS] for row in rows])
        record.diverged[name] = bool(int(rows[0][f"{name}_diverged"]))
        record.projected[name] = np.array([int(row[f"{name}_projected"]) for row in rows])
        record.skipped[name] = np.array([int(row[f"{name}_skipped"]) for row in rows])
    return record


def write_metrics_csv(path, metrics, dt):
    path = Path(path)
    names = list(metrics)
    epochs = len(next(iter(metrics.values())).rmse_by_epoch)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "time_s"] + names)
        for k in range(epochs):
            writer.writerow([k + 1, _fmt((k + 1) * dt)] + [_fmt(metrics[n].rmse_by_epoch[k]) for n in names])
    return path


def cdf_thresholds(metrics, domain):
    """A shared grid from 0 to the largest pooled error of any filter."""
    attr = "cdf" if domain == "squared" else "distance_cdf"
    tops = [getattr(m, attr).samples[-1] for m in metrics.values() if len(getattr(m, attr).samples)]
    top = max(tops) if tops else 1.0
    return np.linspace(0.0, top, CDF_POINTS)


def write_cdf_csv(path, metrics, domain="squared"):
    path = Path(path)
    attr = "cdf" if domain == "squared" else "distance_cdf"
    label = "threshold_m2" if domain == "squared" else "threshold_m"
    names = list(metrics)
    grid = cdf_thresholds(metrics, domain)
    columns = [getattr(metrics[n], attr)(grid) for n in names]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([label] + names)
        for i, x in enumerate(grid):
            writer.writerow([_fmt(x)] + [_fmt(col[i]) for col in columns])
    return path


def write_manifest(path, config_echo, filters, seed, code_version, metrics):
    path = Path(path)
    manifest = {
        "scenario": config_echo,
        "filters": list(filters),
        "seed": seed,
        "code_version": code_version,
        "summary": {
            name: {
                "steady_state_rmse": None if np.isnan(m.steady_state_rmse) else m.steady_state_rmse,
                "diverged": m.diverged,
                "trials": m.trials,
                "diagnostics": m.diagnostics,
            }
            for name, m in metrics.items()
        },
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def write_plot_script(path):
    path = Path(path)
    path.write_text(PLOT_SCRIPT, encoding="utf-8")
    return path


def write_outputs(out_dir, config, config_echo, records, metrics, code_version) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trial_dir = out / "trials"
    trial_dir.mkdir(exist_ok=True)
    paths = {"trials": [write_trial_csv(trial_dir / f"trial_{r.trial}.csv", r) for r in records]}
    paths["metrics"] = write_metrics_csv(out / "metrics.csv", metrics, config.dt)
    paths["cdf"] = write_cdf_csv(out / "cdf.csv", metrics, "squared")
    paths["cdf_distance"] = write_cdf_csv(out / "cdf_distance.csv", metrics, "distance")
    paths["manifest"] = write_manifest(
        out / "manifest.json", config_echo, list(metrics), config.seed, code_version, metrics
    )
    paths["plot"] = write_plot_script(out / "plot_metrics.py")
    logger.info(f"Wrote {len(records)} trial files and metrics to {out}")
    return paths
