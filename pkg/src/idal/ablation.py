"""Loss-combination ladder runs over several seeds."""

from __future__ import annotations

import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

from .data import Dataset
from .trainer import TrainConfig, Trainer, with_weights

LADDER = (
    ("clc+dis", dict(gamma=0.0, delta=0.0, eta=0.0)),
    ("+MMD", dict(gamma=0.0, eta=0.0)),
    ("+MCC", dict(eta=0.0)),
    ("+PLMMD", dict()),
)


def ladder_configs(base: TrainConfig):
    return [(name, with_weights(base, **zeroed)) for name, zeroed in LADDER]


def source_only(base: TrainConfig) -> TrainConfig:
    return with_weights(base, lambda_adv=0.0, beta=0.0, gamma=0.0, delta=0.0, eta=0.0)


def _run_one(job):
    row, seed, config, source, target = job
    rec = Trainer(replace(config, seed=seed), source, target).fit()
    acc = rec[-1].target_accuracy if rec else None
    return row, seed, acc


def default_workers() -> int:
    env = os.environ.get("IDAL_NUM_THREADS")
    if env:
        return max(1, int(env))
    return max(1, min(4, os.cpu_count() or 1))


def run_rows(rows, source: Dataset, target: Dataset, seeds, workers: int | None = None):
    """Train every ``(row name, config)`` for every seed.

    Returns ``{row: {seed: final target accuracy}}`` with deterministic
    ordering regardless of how many workers ran the jobs.
    """
    jobs = [(name, seed, cfg, source, target) for name, cfg in rows for seed in seeds]
    workers = workers or default_workers()
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    out = {name: {} for name, _ in rows}
    for row, seed, acc in sorted(results, key=lambda r: ([n for n, _ in rows].index(r[0]), r[1])):
        out[row][seed] = acc
    return out


def summarize(results: dict) -> list[dict]:
    table = []
    for row, by_seed in results.items():
        accs = [by_seed[s] for s in sorted(by_seed)]
        table.append({
            "row": row,
            "seeds": sorted(by_seed),
            "target_accuracy": accs,
            "mean": statistics.fmean(accs),
            "sd": statistics.stdev(accs) if len(accs) > 1 else 0.0,
        })
    return table


def format_table(table: list[dict]) -> str:
    width = max(len(r["row"]) for r in table)
    lines = [f"{'row'.ljust(width)}  target acc (%)"]
    for r in table:
        lines.append(f"{r['row'].ljust(width)}  {100 * r['mean']:6.2f} ± {100 * r['sd']:5.2f}")
    return "\n".join(lines)
