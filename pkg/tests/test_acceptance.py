"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line."""

import time

import numpy as np
import pytest

from matchfield import (
    InputMatrices,
    gamma,
    gamma_closed_form,
    iterate_meanfield,
    load_scenario,
    run_simulation,
    save_scenario,
    simulate_agent_path,
    total_variation,
    validate_distribution,
)
from matchfield.cli import main
from matchfield.generators import random_distribution, random_scenario
from matchfield.harness import read_records
from matchfield.markov import evolve, trajectory_matrices, transition_from_inputs, transition_counts
from matchfield.scenario import period_intensities

N_RANDOM = 1000


@pytest.fixture(scope="module")
def random_cases():
    """(p, intensities) for 1000 random valid scenarios with K cycling through 1..5."""
    rng = np.random.default_rng(7_000_001)
    cases = []
    for i in range(N_RANDOM):
        K = 1 + i % 5
        sc = random_scenario(rng, K, horizon=1, n_states=int(rng.integers(1, 4)))
        state = int(rng.integers(len(sc.environment.states)))
        cases.append((sc.p0, period_intensities(sc.intensities, state, 1)))
    return cases


def test_c01_gamma_preserves_distributions(random_cases, report_criterion):
    t0 = time.perf_counter()
    failures = sum(not validate_distribution(gamma(p, fn).p_hat, tol=1e-10).ok for p, fn in random_cases)
    elapsed = time.perf_counter() - t0
    ok = failures == 0 and elapsed < 10
    report_criterion(1, "gamma output is a valid distribution", ok, f"{failures} invalid of {N_RANDOM}, {elapsed:.2f} s")
    assert ok


def test_c02_row_stochastic(random_cases, report_criterion):
    t0 = time.perf_counter()
    worst = 0.0
    for p, fn in random_cases:
        z = transition_from_inputs(gamma(p, fn).inputs)
        assert np.all(z >= 0)
        worst = max(worst, float(np.max(np.abs(z.sum(axis=1) - 1.0))))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and elapsed < 10
    report_criterion(2, "transition rows sum to one", ok, f"max error {worst:.2e}, {elapsed:.2f} s")
    assert ok


def test_c03_gamma_equals_z(random_cases, generic_scenario, tmp_path, report_criterion):
    worst = 0.0
    for p, fn in random_cases:
        res = gamma(p, fn)
        z = transition_from_inputs(res.inputs)
        worst = max(worst, float(np.max(np.abs(evolve(p, z).mass - res.p_hat.mass))))
    # every period of a compare run, read back from its output file
    sc = generic_scenario.replace(population=10_000)
    path = tmp_path / "sc.toml"
    save_scenario(sc, path)
    assert main(["compare", "--scenario", str(path), "--out", str(tmp_path / "out")]) == 0
    rows = read_records(tmp_path / "out" / "comparison.csv")
    periods = {(r["replication"], r["period"]) for r in rows}
    assert len(periods) == sc.replications * (sc.horizon + 1)
    worst_run = max(r["gz_residual"] for r in rows)
    ok = worst <= 1e-10 and worst_run <= 1e-10
    report_criterion(3, "gamma/z equivalence", ok, f"random max {worst:.2e}, compare max {worst_run:.2e}")
    assert ok


def test_c04_staged_equals_closed_form(random_cases, report_criterion):
    worst = 0.0
    for p, fn in random_cases:
        staged = gamma(p, fn).p_hat
        worst = max(worst, float(np.max(np.abs(staged.mass - gamma_closed_form(p, fn).mass))))
    ok = worst <= 1e-12
    report_criterion(4, "staged map equals closed form", ok, f"max gap {worst:.2e}")
    assert ok


def _max_tv(sc, replication=0):
    env = sc.env_path(replication)
    traj = iterate_meanfield(sc, env)
    sim = run_simulation(sc, env, replication)
    worst = 0.0
    for n in range(1, sc.horizon + 1):
        for stage in ("check", "ccheck", "hat"):
            worst = max(worst, total_variation(sim.stage(stage, n), traj.stage(stage, n)))
    return worst, total_variation(sim.stage("hat", sc.horizon), traj.stage("hat", sc.horizon))


def test_c05_lln_at_finite_n(generic_scenario, report_criterion):
    sc = generic_scenario.replace(population=100_000, horizon=20)
    assert sc.K == 3
    tvs, times = [], []
    for seed in range(5):
        t0 = time.perf_counter()
        tvs.append(_max_tv(sc.replace(master_seed=1000 + seed))[0])
        times.append(time.perf_counter() - t0)
    ok = max(tvs) <= 0.02 and max(times) < 60
    report_criterion(
        5, "finite-N law of large numbers", ok, f"max TV {max(tvs):.4f} over 5 seeds, slowest seed {max(times):.2f} s"
    )
    assert ok


def test_c06_lln_rate(generic_scenario, report_criterion):
    sizes = np.array([1_000, 10_000, 100_000])
    medians = []
    for N in sizes:
        sc = generic_scenario.replace(population=int(N), horizon=20)
        finals = [_max_tv(sc.replace(master_seed=500 + s))[1] for s in range(20)]
        medians.append(float(np.median(finals)))
    slope = float(np.polyfit(np.log(sizes), np.log(medians), 1)[0])
    ok = -0.6 <= slope <= -0.4
    detail = "medians " + ", ".join(f"{m:.2e}" for m in medians) + f"; slope {slope:.3f}"
    report_criterion(6, "convergence rate", ok, detail)
    assert ok


def test_c07_agent_chain_law(generic_scenario, report_criterion):
    sc = generic_scenario
    traj = iterate_meanfield(sc, sc.env_path(0))
    mats = trajectory_matrices(sc, traj)
    size = sc.type_space.size
    rng = np.random.default_rng(31)
    agents = 6_000
    starts = rng.choice(size, size=agents, p=sc.p0.mass)
    paths = np.array(
        [[sc.type_space.index(*b) for b in simulate_agent_path(int(s), traj, sc, seed=a, matrices=mats)]
         for a, s in enumerate(starts)]
    )
    counts = transition_counts(paths, size)
    agent_periods = int(counts[1:].sum())
    # pooled over periods: visits at n-1 times z^n gives the expected count per cell
    observed = counts[1:].sum(axis=0)
    expected = np.zeros((size, size))
    var = np.zeros((size, size))
    for n in range(1, sc.horizon + 1):
        visits = counts[n].sum(axis=1)[:, None]
        z = mats[n].z
        expected += visits * z
        var += visits * z * (1 - z)
    zscore = np.abs(observed - expected) / np.sqrt(np.where(var > 0, var, 1.0))
    exact_where_degenerate = np.all(np.abs(observed - expected)[var == 0] < 1e-9)
    worst = float(zscore[var > 0].max())
    ok = agent_periods >= 100_000 and worst <= 4.0 and exact_where_degenerate
    report_criterion(7, "agent chain follows z", ok, f"{agent_periods} agent-periods, max |z-score| {worst:.2f}")
    assert ok


def test_c08_identity_fixed_point(scenarios_dir, report_criterion):
    rng = np.random.default_rng(8)
    exact = True
    for i in range(200):
        K = 1 + i % 5
        p = random_distribution(rng, K)
        exact &= np.array_equal(gamma(p, InputMatrices.identity(K)).p_hat.mass, p.mass)
    sc = load_scenario(scenarios_dir / "identity_k2.toml")
    constant = True
    for r in range(sc.replications):
        sim = run_simulation(sc, sc.env_path(r), r, check_invariants=True)
        start = sim.stage("hat", 0)
        for n in range(1, sc.horizon + 1):
            for stage in ("check", "ccheck", "hat"):
                constant &= sim.stage(stage, n) == start
        constant &= all(
            np.array_equal(d.mass, sc.p0.mass) for d in iterate_meanfield(sc, sc.env_path(r)).p_hat
        )
    ok = bool(exact and constant)
    report_criterion(8, "identity inputs are a fixed point", ok, f"gamma exact: {exact}, simulation constant: {constant}")
    assert ok


def test_c09_compare_deterministic(scenarios_dir, tmp_path, monkeypatch, report_criterion):
    outputs = []
    for i, threads in enumerate(("1", "1", "3")):
        monkeypatch.setenv("MATCHFIELD_THREADS", threads)
        out = tmp_path / f"run{i}"
        args = ["compare", "--scenario", str(scenarios_dir / "generic_k3.toml"), "--out", str(out),
                "--seed", "424242", "--replications", "3", "--periods", "10"]
        assert main(args) == 0
        outputs.append(tuple((out / f).read_bytes() for f in ("comparison.csv", "summary.csv")))
        rows = read_records(out / "comparison.csv")
        assert max(r["gz_residual"] for r in rows) <= 1e-10
    ok = outputs[0] == outputs[1] == outputs[2]
    report_criterion(9, "compare is deterministic", ok, "3 runs (1, 1 and 3 workers) byte-identical" if ok else "outputs differ")
    assert ok


def test_c10_k1_hand_values(k1_scenario, report_criterion):
    traj = iterate_meanfield(k1_scenario, k1_scenario.env_path())
    got = [tuple(p.mass.tolist()) for p in traj.p_hat]
    want = [(0.4, 0.6), (0.7, 0.3), (0.85, 0.15)]
    ok = got == want
    report_criterion(10, "K=1 worked example", ok, " -> ".join(f"({a}, {b})" for a, b in got))
    assert ok
