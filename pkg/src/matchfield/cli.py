"""Command-line front end.

Exit codes: 0 success, 2 parse/validation failure, 3 runtime infeasibility.
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
import tempfile
from contextlib import contextmanager
from pathlib import Path

from . import harness
from .agentsim import dump_population, run_simulation
from .markov import trajectory_matrices
from .meanfield import iterate_meanfield
from .scenario import ScenarioConfig, load_scenario
from .types import InfeasibleRounding, InvalidInputs, MatchingInfeasible, ParseError

log = logging.getLogger("matchfield")

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_INFEASIBLE = 3


class ValidationFailed(Exception):
    def __init__(self, violations):
        super().__init__(f"{len(violations)} violation(s)")
        self.violations = violations


def _load(args) -> ScenarioConfig:
    sc = load_scenario(args.scenario)
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["master_seed"] = args.seed
    if getattr(args, "replications", None) is not None:
        changes["replications"] = args.replications
    if getattr(args, "periods", None) is not None:
        changes["horizon"] = args.periods
    if changes:
        sc = sc.replace(**changes)
    report = sc.validate()
    if not report.ok:
        raise ValidationFailed(report.violations)
    return sc


@contextmanager
def _staging(out: Path):
    """Write into a scratch directory; move files into ``out`` only on success."""
    out.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".partial-", dir=out))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    for f in sorted(tmp.iterdir()):
        f.replace(out / f.name)
    tmp.rmdir()


def cmd_validate(args) -> int:
    _load(args)
    print(f"{args.scenario}: ok")
    return EXIT_OK


def cmd_meanfield(args) -> int:
    sc = _load(args)
    traj = iterate_meanfield(sc, sc.env_path(0))
    with _staging(Path(args.out)) as tmp:
        harness.write_records(tmp / "trajectory", harness.trajectory_records(sc, traj), harness.TRAJECTORY_COLUMNS, args.format)
    return EXIT_OK


def cmd_transition(args) -> int:
    sc = _load(args)
    env_path = sc.env_path(0)
    traj = iterate_meanfield(sc, env_path)
    matrices = trajectory_matrices(sc, traj)
    residuals = harness.gz_residuals(traj, matrices)
    res_rows = [
        dict(period=n, env_state=sc.environment.states[env_path[n - 1]], residual=residuals[n])
        for n in range(1, sc.horizon + 1)
    ]
    with _staging(Path(args.out)) as tmp:
        harness.write_records(tmp / "transitions", harness.matrix_records(matrices), harness.MATRIX_COLUMNS, args.format)
        harness.write_records(tmp / "residuals", res_rows, harness.RESIDUAL_COLUMNS, args.format)
    worst = max(residuals)
    print(f"max gamma/z residual: {worst:.3e}")
    return EXIT_OK


def _simulate_one(sc: ScenarioConfig, replication: int):
    return run_simulation(sc, sc.env_path(replication), replication)


def cmd_simulate(args) -> int:
    sc = _load(args)
    sims = harness.map_replications(_simulate_one, sc, sc.replications)
    rows = [row for sim in sims for row in harness.snapshot_records(sc, sim)]
    with _staging(Path(args.out)) as tmp:
        harness.write_records(tmp / "snapshots", rows, harness.SNAPSHOT_COLUMNS, args.format)
        if args.dump_population:
            for sim in sims:
                dump_population(sim.population, tmp / f"population_rep{sim.replication}.bin")
    return EXIT_OK


def cmd_compare(args) -> int:
    sc = _load(args)
    report = harness.compare(sc)
    with _staging(Path(args.out)) as tmp:
        harness.write_records(tmp / "comparison", report.rows, harness.COMPARISON_COLUMNS, args.format)
        harness.write_records(tmp / "summary", report.summary, harness.SUMMARY_COLUMNS, args.format)
    print(f"max TV distance: {report.max_tv():.6f}; max gamma/z residual: {report.max_residual():.3e}")
    return EXIT_OK


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="matchfield", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help, outputs=True):
        p = sub.add_parser(name, help=help)
        p.add_argument("--scenario", required=True, type=Path)
        p.add_argument("--seed", type=_u64, help="override master_seed")
        p.add_argument("--replications", type=_positive)
        p.add_argument("--periods", type=_positive, help="override horizon")
        if outputs:
            p.add_argument("--out", required=True, type=Path)
            p.add_argument("--format", choices=("csv", "json"), default="csv")
        p.set_defaults(func=fn)
        return p

    add("validate", cmd_validate, "parse and validate a scenario", outputs=False)
    add("meanfield", cmd_meanfield, "iterate the mean-field map")
    add("transition", cmd_transition, "per-period transition matrices and gamma/z residuals")
    sim = add("simulate", cmd_simulate, "run the agent-based simulation")
    sim.add_argument("--dump-population", action="store_true", help="write final populations as binary dumps")
    add("compare", cmd_compare, "compare simulation against the mean-field trajectory")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ValidationFailed as exc:
        for v in exc.violations:
            print(f"violation: {v}", file=sys.stderr)
        return EXIT_INVALID
    except (ParseError, InvalidInputs) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (MatchingInfeasible, InfeasibleRounding) as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
