"""Security metrics recomputed from episode replay logs, plus learning curves."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np


class LogError(ValueError):
    """Replay log is truncated or malformed."""


@dataclass
class EpisodeMetrics:
    reward: float
    clean_host_ratio: float
    non_escalated_ratio: float
    impact_count: int
    recovery_error_pct: float
    recovery_precision: float | None = None  # None when no Restore was issued
    mean_ttr: float | None = None  # None when nothing was recovered

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


METRIC_FIELDS = [f.name for f in fields(EpisodeMetrics)]


def read_replay(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def compute_metrics(records: list[dict]) -> EpisodeMetrics:
    """Host-step ratios, restore precision, time to recovery and impacts."""
    if not records:
        raise LogError("empty replay log")
    for i, rec in enumerate(records):
        if rec.get("step") != i:
            raise LogError(f"replay log record {i} has step {rec.get('step')}")
    if not records[-1].get("done"):
        raise LogError("replay log ends before the episode is done")

    host_steps = sum(r["n_hosts"] for r in records)
    clean = sum(r["clean"] for r in records)
    root = sum(r["root"] for r in records)
    open_since: dict[int, int] = {}
    ttrs: list[int] = []
    tp = fp = incidents = 0
    for r in records:
        # restores are applied before the red move of the same step
        for host, was_compromised in r["restores"]:
            if was_compromised:
                tp += 1
                start = open_since.pop(host, None)
                if start is not None:
                    ttrs.append(r["step"] - start)
            else:
                fp += 1
        for host in r["compromised"]:
            incidents += 1
            open_since[host] = r["step"]
    denom = incidents + fp
    return EpisodeMetrics(
        reward=float(sum(r["reward"] for r in records)),
        clean_host_ratio=clean / host_steps,
        non_escalated_ratio=(host_steps - root) / host_steps,
        impact_count=int(sum(r["impacts"] for r in records)),
        recovery_error_pct=100.0 * (fp + len(open_since)) / denom if denom else 0.0,
        recovery_precision=tp / (tp + fp) if tp + fp else None,
        mean_ttr=float(np.mean(ttrs)) if ttrs else None,
    )


def aggregate(metrics: list[EpisodeMetrics]) -> dict:
    """Mean and population std per field over the episodes that define it."""
    out = {}
    for name in METRIC_FIELDS:
        vals = [getattr(m, name) for m in metrics if getattr(m, name) is not None]
        if vals:
            out[name] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "n": len(vals)}
    return out


EPISODE_CSV_HEADER = ["episode", "seed"] + METRIC_FIELDS


def episode_csv_rows(metrics: list[EpisodeMetrics], seeds: list[int]) -> list[list]:
    rows = []
    for i, (m, s) in enumerate(zip(metrics, seeds)):
        d = asdict(m)
        rows.append([i, s] + ["" if d[k] is None else _num(d[k]) for k in METRIC_FIELDS])
    return rows


def _num(x) -> str:
    return str(x) if isinstance(x, int) else f"{float(x):.10g}"


CURVE_HEADER = ["bucket", "episodes", "mean_reward", "std_reward", "runs"]


def read_metrics_csv(path) -> list[tuple[int, float]]:
    with open(path, encoding="utf-8", newline="") as fh:
        return [(int(r["episodes"]), float(r["mean_reward"])) for r in csv.DictReader(fh)]


def learning_curve(runs: list[list[tuple[int, float]]], window: int) -> list[dict]:
    """Mean reward per bucket of ``window`` rounds, then mean and std across runs."""
    if not runs or not any(runs):
        raise ValueError("learning curve needs at least one nonempty run")
    if window < 1:
        raise ValueError("window must be positive")
    n_buckets = max(math.ceil(len(r) / window) for r in runs)
    out = []
    for b in range(n_buckets):
        means, last = [], 0
        for r in runs:
            chunk = r[b * window:(b + 1) * window]
            if chunk:
                means.append(float(np.mean([v for _, v in chunk])))
                last = max(last, chunk[-1][0])
        out.append({"bucket": b, "episodes": last, "mean_reward": float(np.mean(means)),
                    "std_reward": float(np.std(means)), "runs": len(means)})
    return out


def emit_learning_curve(paths, window: int, out_path) -> list[dict]:
    """Read training metrics CSVs and write the bucketed curve as CSV."""
    paths = [Path(p) for p in paths]
    if not paths:
        raise ValueError("no metrics CSVs given")
    rows = learning_curve([read_metrics_csv(p) for p in paths], window)
    with open(out_path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_HEADER)
        for r in rows:
            w.writerow([r["bucket"], r["episodes"], _num(r["mean_reward"]), _num(r["std_reward"]),
                        r["runs"]])
    return rows
