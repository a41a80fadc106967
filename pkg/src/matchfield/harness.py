"""Comparison metrics, experiment orchestration and record export."""

from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .agentsim import STAGES, SimulationResult, run_simulation
from .markov import evolve, trajectory_matrices
from .meanfield import MeanfieldTrajectory, iterate_meanfield
from .scenario import ScenarioConfig
from .types import J, ExtendedTypeDistribution, InvalidInputs

THREADS_ENV = "MATCHFIELD_THREADS"

TRAJECTORY_COLUMNS = ["period", "env_state", "stage", "k", "l", "mass"]
SNAPSHOT_COLUMNS = ["replication", *TRAJECTORY_COLUMNS]
MATRIX_COLUMNS = ["period", "src_k", "src_l", "dst_k", "dst_l", "probability"]
RESIDUAL_COLUMNS = ["period", "env_state", "residual"]
COMPARISON_COLUMNS = ["replication", "period", "env_state", "stage", "tv_distance", "linf_distance", "gz_residual"]
SUMMARY_COLUMNS = ["period", "stage", "tv_min", "tv_median", "tv_q90", "tv_max", "linf_max"]


def _check_pair(p: ExtendedTypeDistribution, q: ExtendedTypeDistribution, tol: float) -> None:
    if p.K != q.K:
        raise InvalidInputs(f"distributions have different type counts ({p.K} vs {q.K})")
    p.validate(tol).raise_if_invalid("first distribution")
    q.validate(tol).raise_if_invalid("second distribution")


def total_variation(p: ExtendedTypeDistribution, q: ExtendedTypeDistribution, tol: float = 1e-9) -> float:
    _check_pair(p, q, tol)
    return 0.5 * float(np.abs(p.mass - q.mass).sum())


def linf_distance(p: ExtendedTypeDistribution, q: ExtendedTypeDistribution) -> float:
    if p.K != q.K:
        raise InvalidInputs("distributions have different type counts")
    return float(np.max(np.abs(p.mass - q.mass)))


def _label(x) -> str | int:
    return J if x == J else int(x) + 1


def distribution_rows(p: ExtendedTypeDistribution) -> Iterable[tuple]:
    for idx, mass in enumerate(p.mass):
        k, l = p.space.label(idx)
        yield _label(k), _label(l), float(mass)


def _state_label(scenario: ScenarioConfig, state: int | None) -> str:
    return "" if state is None else scenario.environment.states[state]


def trajectory_records(scenario: ScenarioConfig, traj: MeanfieldTrajectory) -> list[dict]:
    rows = []
    for k, l, mass in distribution_rows(traj.p_hat[0]):
        rows.append(dict(period=0, env_state="", stage="hat", k=k, l=l, mass=mass))
    for n in range(1, traj.horizon + 1):
        state = _state_label(scenario, traj.env_state(n))
        for stage in STAGES:
            for k, l, mass in distribution_rows(traj.stage(stage, n)):
                rows.append(dict(period=n, env_state=state, stage=stage, k=k, l=l, mass=mass))
    return rows


def snapshot_records(scenario: ScenarioConfig, sim: SimulationResult) -> list[dict]:
    rows = []
    for n, snaps in enumerate(sim.snapshots):
        state = "" if n == 0 else _state_label(scenario, sim.env_path[n - 1])
        for stage in STAGES:
            if stage not in snaps:
                continue
            for k, l, mass in distribution_rows(snaps[stage].distribution):
                rows.append(
                    dict(replication=sim.replication, period=n, env_state=state, stage=stage, k=k, l=l, mass=mass)
                )
    return rows


def matrix_records(matrices: Sequence) -> list[dict]:
    rows = []
    for tm in matrices:
        if tm is None:
            continue
        size = tm.z.shape[0]
        K = int(round((np.sqrt(1 + 4 * size) - 1) / 2))
        space_labels = [divmod(i, K) if i < K * K else (i - K * K, J) for i in range(size)]
        for src, (sk, sl) in enumerate(space_labels):
            for dst, (dk, dl) in enumerate(space_labels):
                rows.append(
                    dict(
                        period=tm.period,
                        src_k=_label(sk),
                        src_l=_label(sl),
                        dst_k=_label(dk),
                        dst_l=_label(dl),
                        probability=float(tm.z[src, dst]),
                    )
                )
    return rows


def gz_residuals(traj: MeanfieldTrajectory, matrices: Sequence) -> list[float]:
    """Sup-norm gap between p_hat[n-1] @ z^n and p_hat[n], per period (index 0 unused)."""
    out = [0.0]
    for n in range(1, traj.horizon + 1):
        evolved = evolve(traj.p_hat[n - 1], matrices[n])
        out.append(float(np.max(np.abs(evolved.mass - traj.p_hat[n].mass))))
    return out


@dataclass
class ComparisonReport:
    rows: list[dict] = field(default_factory=list)
    summary: list[dict] = field(default_factory=list)

    def max_tv(self) -> float:
        return max((r["tv_distance"] for r in self.rows), default=0.0)

    def max_residual(self) -> float:
        return max((r["gz_residual"] for r in self.rows), default=0.0)


def _compare_replication(scenario: ScenarioConfig, replication: int) -> list[dict]:
    env_path = scenario.env_path(replication)
    traj = iterate_meanfield(scenario, env_path)
    matrices = trajectory_matrices(scenario, traj)
    residuals = gz_residuals(traj, matrices)
    sim = run_simulation(scenario, env_path, replication)
    rows = []
    for n in range(0, scenario.horizon + 1):
        state = "" if n == 0 else _state_label(scenario, env_path[n - 1])
        stages = ("hat",) if n == 0 else STAGES
        for stage in stages:
            emp, mf = sim.stage(stage, n), traj.stage(stage, n)
            rows.append(
                dict(
                    replication=replication,
                    period=n,
                    env_state=state,
                    stage=stage,
                    tv_distance=total_variation(emp, mf),
                    linf_distance=linf_distance(emp, mf),
                    gz_residual=residuals[n],
                )
            )
    return rows


def worker_count(replications: int) -> int:
    try:
        cap = int(os.environ.get(THREADS_ENV, "1"))
    except ValueError:
        cap = 1
    return max(1, min(cap, replications))


def map_replications(fn: Callable, scenario: ScenarioConfig, replications: int) -> list:
    """Run ``fn(scenario, r)`` for every replication, results in replication order."""
    workers = worker_count(replications)
    if workers == 1:
        return [fn(scenario, r) for r in range(replications)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, [scenario] * replications, range(replications)))


def compare(scenario: ScenarioConfig) -> ComparisonReport:
    per_rep = map_replications(_compare_replication, scenario, scenario.replications)
    rows = [row for rep in per_rep for row in rep]
    return ComparisonReport(rows, summarize(rows))


def summarize(rows: list[dict]) -> list[dict]:
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["period"], r["stage"]), []).append(r)
    out = []
    for (period, stage), grp in sorted(groups.items(), key=lambda kv: (kv[0][0], STAGES.index(kv[0][1]))):
        tv = np.array([r["tv_distance"] for r in grp])
        out.append(
            dict(
                period=period,
                stage=stage,
                tv_min=float(tv.min()),
                tv_median=float(np.median(tv)),
                tv_q90=float(np.quantile(tv, 0.9)),
                tv_max=float(tv.max()),
                linf_max=float(max(r["linf_distance"] for r in grp)),
            )
        )
    return out


# -- record I/O ----------------------------------------------------------------

def _cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def records_to_csv(records: list[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for r in records:
        writer.writerow([_cell(r[c]) for c in columns])
    return buf.getvalue()


def write_records(path, records: list[dict], columns: Sequence[str], fmt: str = "csv") -> Path:
    path = Path(path)
    if fmt == "json":
        path = path.with_suffix(".json")
        text = json.dumps([{c: r[c] for c in columns} for r in records], indent=1) + "\n"
    elif fmt == "csv":
        path = path.with_suffix(".csv")
        text = records_to_csv(records, columns)
    else:
        raise ValueError(f"unknown format {fmt!r}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    return path


def _parse_cell(v: str):
    if v == "" or v == J:
        return v
    try:
        return int(v)
    except ValueError:
        pass
    try:
        return float(v)
    except ValueError:
        return v


def read_records(path) -> list[dict]:
    path = Path(path)
    if path.suffix == ".json":
        return json.loads(path.read_text(encoding="utf-8"))
    with open(path, encoding="utf-8", newline="") as fh:
        return [{k: _parse_cell(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def distribution_from_records(records: Iterable[dict], K: int) -> ExtendedTypeDistribution:
    entries = {}
    for r in records:
        l = r["l"] if r["l"] == J else int(r["l"]) - 1
        entries[int(r["k"]) - 1, l] = float(r["mass"])
    return ExtendedTypeDistribution.from_entries(K, entries)
