"""Sample-efficiency summaries over finished runs.

Reads the per-epoch metrics of one or more run directories and emits a CSV
with, per run: environment steps needed to first reach each return
threshold while the episode cost estimate satisfies the limit, the final
return, and total cumulative cost.  When exactly one cmbpo and one cpo run
are present, a steps-ratio column compares them per threshold.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

NOT_REACHED = "not_reached"
SMOOTH_WINDOW = 5


def load_run(run_dir: str | Path) -> dict:
    path = Path(run_dir) / "metrics.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"no metrics in {run_dir}")
    header = {}
    epochs = []
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            if rec.get("type") == "header":
                header = rec
            elif rec.get("type") == "epoch":
                epochs.append(rec)
    return {"dir": str(run_dir), "header": header, "epochs": epochs}


def _smoothed(values: list[float], window: int = SMOOTH_WINDOW) -> np.ndarray:
    if not values:
        return np.array([])
    arr = np.asarray(values, dtype=np.float64)
    out = np.empty_like(arr)
    for i in range(len(arr)):
        out[i] = arr[max(0, i - window + 1): i + 1].mean()
    return out


def steps_to_threshold(run: dict, threshold: float) -> int | str:
    """First cumulative env-step count with smoothed return >= threshold and
    the smoothed episode cost within the limit."""
    epochs = run["epochs"]
    if not epochs:
        return NOT_REACHED
    limit = run["header"].get("cost_limit", np.inf)
    returns = _smoothed([e["mean_return"] for e in epochs])
    costs = _smoothed([e["mean_episode_cost"] for e in epochs])
    for e, ret, cost in zip(epochs, returns, costs):
        if ret >= threshold and cost <= limit:
            return int(e["env_steps"])
    return NOT_REACHED


def summarize_runs(run_dirs: list[str | Path],
                   thresholds: list[float] | None = None) -> str:
    """Render the comparison CSV; thresholds default to fractions of the
    best run's asymptotic (last-10-epoch mean) return."""
    runs = [load_run(d) for d in run_dirs]
    finals = []
    for run in runs:
        rets = [e["mean_return"] for e in run["epochs"]]
        finals.append(float(np.mean(rets[-10:])) if rets else float("-inf"))
    if thresholds is None:
        best = max(finals) if finals else 0.0
        thresholds = [round(best * frac, 6) for frac in (0.5, 0.75, 0.9)]

    columns = ["run", "algo", "env", "seed", "epochs", "env_steps",
               "final_return", "final_episode_cost", "cumulative_cost"]
    columns += [f"steps_to_{t}" for t in thresholds]

    rows = []
    for run, final in zip(runs, finals):
        epochs = run["epochs"]
        head = run["header"]
        last = epochs[-1] if epochs else {}
        row = {
            "run": run["dir"],
            "algo": head.get("algo", ""),
            "env": head.get("env", ""),
            "seed": head.get("seed", ""),
            "epochs": len(epochs),
            "env_steps": last.get("env_steps", 0),
            "final_return": final if epochs else "",
            "final_episode_cost": float(np.mean(
                [e["mean_episode_cost"] for e in epochs[-10:]])) if epochs else "",
            "cumulative_cost": last.get("cumulative_cost", ""),
        }
        for t in thresholds:
            row[f"steps_to_{t}"] = steps_to_threshold(run, t)
        rows.append(row)

    by_algo: dict[str, list[dict]] = {}
    for row in rows:
        by_algo.setdefault(row["algo"], []).append(row)
    ratio_rows = []
    if len(by_algo.get("cmbpo", [])) == 1 and len(by_algo.get("cpo", [])) == 1:
        a, b = by_algo["cmbpo"][0], by_algo["cpo"][0]
        ratio = {c: "" for c in columns}
        ratio["run"] = "ratio cmbpo/cpo"
        for t in thresholds:
            key = f"steps_to_{t}"
            if isinstance(a[key], int) and isinstance(b[key], int) and b[key] > 0:
                ratio[key] = round(a[key] / b[key], 4)
            else:
                ratio[key] = NOT_REACHED
        ratio_rows.append(ratio)

    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns)
    writer.writeheader()
    for row in rows + ratio_rows:
        writer.writerow(row)
    return buf.getvalue()
