import itertools

import numpy as np
import pytest

from matchfield import (
    J,
    ExtendedTypeDistribution,
    InfeasibleRounding,
    InputMatrices,
    IntensitySpec,
    MatchingInfeasible,
    Population,
    breakup_step,
    empirical_distribution,
    init_population,
    iterate_meanfield,
    matching_step,
    mutation_step,
    run_simulation,
    step_breakup,
    step_matching,
    step_mutation,
    total_variation,
)
from matchfield.agentsim import (
    clamp_pair_counts,
    dump_population,
    load_population,
    pair_demand,
    pair_targets,
    round_initial_counts,
)
from matchfield.generators import random_distribution, random_inputs, random_search_rates


def dist(K, entries):
    return ExtendedTypeDistribution.from_entries(K, entries)


def unmatched_population(types):
    types = np.asarray(types)
    K = int(types.max()) + 1
    return Population(K, types.copy(), np.arange(types.size))


class TestInitPopulation:
    def test_k1_parity(self):
        pop = init_population(dist(1, {(0, 0): 0.4, (0, J): 0.6}), 10, 0)
        assert pop.is_matched().sum() == 4
        assert len(pop.pair_set()) == 2
        pop.check()

    def test_all_unmatched(self):
        pop = init_population(dist(2, {(0, J): 1.0}), 7, 1)
        assert np.all(pop.partner == np.arange(7))
        assert np.all(pop.alpha == 0)

    def test_cross_pairs(self):
        pop = init_population(dist(2, {(0, 1): 0.5, (1, 0): 0.5}), 4, 2)
        i, j = pop.pairs()
        assert len(i) == 2
        assert sorted(zip(pop.alpha[i].tolist(), pop.alpha[j].tolist())) in ([(0, 1), (0, 1)], [(0, 1), (1, 0)], [(1, 0), (1, 0)])
        assert set(pop.alpha[i] + pop.alpha[j]) == {1}

    def test_odd_population_all_matched(self):
        counts = round_initial_counts(dist(1, {(0, 0): 1.0}), 3)
        assert counts.tolist() == [2, 1]

    def test_infeasible_rounding(self):
        # mass 0.5 leaves far more agents than one extra unit per cell can absorb
        p = ExtendedTypeDistribution(2, [0.1, 0.05, 0.05, 0.1, 0.1, 0.1])
        with pytest.raises(InfeasibleRounding):
            round_initial_counts(p, 100)

    @pytest.mark.parametrize("K", [1, 2, 3, 4])
    @pytest.mark.parametrize("N", [2, 3, 17, 100, 1001])
    def test_rounding_bound(self, K, N):
        rng = np.random.default_rng(K * 1000 + N)
        for _ in range(10):
            p0 = random_distribution(rng, K)
            counts = round_initial_counts(p0, N)
            assert counts.sum() == N
            M = counts[: K * K].reshape(K, K)
            assert np.array_equal(M, M.T)
            assert np.all(np.diag(M) % 2 == 0)
            pop = init_population(p0, N, rng)
            pop.check()
            emp = empirical_distribution(pop)
            np.testing.assert_array_equal(emp.mass, counts / N)
            assert total_variation(emp, p0) <= K * (K + 1) / N


class TestEmpirical:
    def test_all_unmatched(self):
        assert empirical_distribution(unmatched_population([0, 0, 0])) == dist(1, {(0, J): 1.0})

    def test_single_pair(self):
        pop = Population(2, np.array([0, 1]), np.array([1, 0]))
        emp = empirical_distribution(pop)
        assert emp[0, 1] == 0.5 and emp[1, 0] == 0.5


class TestMutation:
    def test_identity(self, rng):
        pop = init_population(random_distribution(rng, 3), 500, rng)
        before = empirical_distribution(pop)
        assert step_mutation(pop, np.eye(3), rng).distribution == before

    def test_swap(self, rng):
        p0 = random_distribution(rng, 2)
        pop = init_population(p0, 1000, rng)
        before = empirical_distribution(pop)
        pairs = pop.pair_set()
        after = step_mutation(pop, [[0, 1], [1, 0]], rng).distribution
        swap = [1, 0]
        for k in range(2):
            assert after[k, J] == before[swap[k], J]
            for l in range(2):
                assert after[k, l] == before[swap[k], swap[l]]
        assert pop.pair_set() == pairs

    def test_lln(self):
        eta = np.array([[0.7, 0.3], [0.25, 0.75]])
        p0 = dist(2, {(0, 0): 0.2, (0, 1): 0.1, (1, 0): 0.1, (1, 1): 0.1, (0, J): 0.3, (1, J): 0.2})
        expect = mutation_step(p0, eta)
        for seed in range(20):
            rng = np.random.default_rng(seed)
            pop = init_population(p0, 100_000, rng)
            assert total_variation(step_mutation(pop, eta, rng).distribution, expect) <= 0.01


def enumerate_rounding(targets, U):
    """Exact law of pair counts: every Bernoulli outcome with its probability."""
    K = targets.shape[0]
    floors = np.floor(targets + 1e-12).astype(np.int64)
    frac = targets - floors
    cells = [(k, l) for k in range(K) for l in range(k, K)]
    law = []
    for outcome in itertools.product([0, 1], repeat=len(cells)):
        prob = 1.0
        up = np.zeros((K, K), dtype=bool)
        for (k, l), o in zip(cells, outcome):
            prob *= frac[k, l] if o else 1 - frac[k, l]
            up[k, l] = up[l, k] = bool(o)
        if prob > 0:
            law.append((prob, clamp_pair_counts(floors + up, up, U)))
    return law


class TestMatching:
    def test_no_matching(self, rng):
        pop = init_population(random_distribution(rng, 3), 300, rng)
        before = empirical_distribution(pop)
        assert step_matching(pop, np.zeros((3, 3)), rng).distribution == before

    def test_k1_rounding_law(self):
        U = np.array([6])
        targets = pair_targets([[0.5]], U)
        assert targets[0, 0] == 1.5
        law = enumerate_rounding(targets, U)
        outcomes = {int(c[0, 0]): p for p, c in law}
        assert outcomes == {1: 0.5, 2: 0.5}
        assert sum(p * pair_demand(c)[0] for p, c in law) == 3.0

    def test_k1_sampled_matches_law(self):
        pairs = []
        for seed in range(2000):
            pop = unmatched_population([0] * 6)
            step_matching(pop, [[0.5]], np.random.default_rng(seed))
            pairs.append(len(pop.pair_set()))
        assert set(pairs) == {1, 2}
        assert np.mean(pairs) == pytest.approx(1.5, abs=4 * 0.5 / np.sqrt(2000))

    def test_rounding_law_preserves_expectation(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            K = 3
            U = rng.integers(5, 40, size=K)
            c = random_search_rates(rng, K) / K
            theta = c * (U / U.sum())[None, :]
            targets = pair_targets(theta, U)
            law = enumerate_rounding(targets, U)
            assert sum(p for p, _ in law) == pytest.approx(1.0)
            mean_demand = sum(p * pair_demand(c) for p, c in law)
            np.testing.assert_allclose(mean_demand, pair_demand(targets), atol=1e-9)
            for _, counts in law:
                assert np.all(pair_demand(counts) <= U)

    def test_existing_pairs_kept(self, rng):
        p0 = random_distribution(rng, 3)
        pop = init_population(p0, 2000, rng)
        before = pop.pair_set()
        theta = random_search_rates(rng, 3) * empirical_distribution(pop).unmatched[None, :]
        step_matching(pop, theta, rng)
        pop.check()
        assert before <= pop.pair_set()

    def test_infeasible(self):
        pop = unmatched_population([0] * 10 + [1] * 2)
        with pytest.raises(MatchingInfeasible):
            step_matching(pop, [[0.0, 0.9], [0.0, 0.0]], np.random.default_rng(0))

    def test_lln(self):
        p0 = dist(2, {(0, 0): 0.1, (0, 1): 0.1, (1, 0): 0.1, (0, J): 0.4, (1, J): 0.3})
        c = np.array([[0.5, 0.8], [0.8, 0.3]])
        theta = c * p0.unmatched[None, :]
        expect = matching_step(p0, theta)
        for seed in range(20):
            rng = np.random.default_rng(seed)
            pop = init_population(p0, 100_000, rng)
            theta_emp = c * empirical_distribution(pop).unmatched[None, :]
            assert total_variation(step_matching(pop, theta_emp, rng).distribution, expect) <= 0.01


class TestBreakup:
    def test_nothing_changes(self, rng):
        pop = init_population(random_distribution(rng, 3), 500, rng)
        before = pop.copy()
        m = InputMatrices.identity(3)
        step_breakup(pop, m.xi, m.sigma, m.varsigma, rng)
        assert np.array_equal(pop.alpha, before.alpha)
        assert np.array_equal(pop.partner, before.partner)

    def test_total_dissolution(self, rng):
        pop = init_population(random_distribution(rng, 3), 500, rng)
        before = empirical_distribution(pop)
        m = InputMatrices.identity(3)
        after = step_breakup(pop, np.ones((3, 3)), m.sigma, m.varsigma, rng).distribution
        assert not pop.is_matched().any()
        np.testing.assert_allclose(after.unmatched, before.unmatched + before.matched.sum(axis=1), atol=1e-15)

    def test_sides_use_own_varsigma(self):
        K = 2
        varsigma = np.zeros((K, K, K))
        varsigma[0, 1] = [0.0, 1.0]  # type-1 side of a (1,2) pair becomes 2
        varsigma[1, 0] = [1.0, 0.0]  # type-2 side becomes 1
        varsigma[0, 0] = varsigma[1, 1] = [1.0, 0.0]
        pop = Population(K, np.array([0, 1]), np.array([1, 0]))
        m = InputMatrices.identity(K)
        step_breakup(pop, np.ones((K, K)), m.sigma, varsigma, np.random.default_rng(0))
        assert pop.alpha.tolist() == [1, 0]
        assert pop.partner.tolist() == [0, 1]

    def test_lln(self):
        rng0 = np.random.default_rng(77)
        m = random_inputs(rng0, 2)
        p0 = dist(2, {(0, 0): 0.2, (0, 1): 0.15, (1, 0): 0.15, (1, 1): 0.2, (0, J): 0.2, (1, J): 0.1})
        expect = breakup_step(p0, m.xi, m.sigma, m.varsigma)
        for seed in range(20):
            rng = np.random.default_rng(seed)
            pop = init_population(p0, 100_000, rng)
            got = step_breakup(pop, m.xi, m.sigma, m.varsigma, rng).distribution
            assert total_variation(got, expect) <= 0.01


class TestRunSimulation:
    def test_identity(self, generic_scenario):
        sc = generic_scenario.replace(
            intensities=IntensitySpec.constant(InputMatrices.identity(3), 2), population=999, horizon=5
        )
        sim = run_simulation(sc, sc.env_path(), check_invariants=True)
        first = sim.stage("hat", 0)
        for n in range(1, 6):
            for stage in ("check", "ccheck", "hat"):
                assert sim.stage(stage, n) == first

    def test_deterministic(self, generic_scenario):
        sc = generic_scenario.replace(population=5000, horizon=6)
        a = run_simulation(sc, sc.env_path(1), replication=1)
        b = run_simulation(sc, sc.env_path(1), replication=1)
        for n in range(7):
            for stage in a.snapshots[n]:
                assert a.stage(stage, n) == b.stage(stage, n)
        assert np.array_equal(a.population.partner, b.population.partner)
        c = run_simulation(sc, sc.env_path(1), replication=2)
        assert any(a.stage("hat", n) != c.stage("hat", n) for n in range(1, 7))

    def test_invariants_every_step(self, generic_scenario):
        sc = generic_scenario.replace(population=3001, horizon=10)
        sim = run_simulation(sc, sc.env_path(), check_invariants=True)
        for snaps in sim.snapshots:
            for s in snaps.values():
                M = s.counts[:9].reshape(3, 3)
                assert np.array_equal(M, M.T)
                assert s.counts.sum() == 3001
                assert s.distribution.validate(1e-12).ok

    def test_lln_vs_meanfield(self, generic_scenario):
        sc = generic_scenario
        path = sc.env_path()
        traj = iterate_meanfield(sc, path)
        sim = run_simulation(sc, path)
        worst = max(
            total_variation(sim.stage(s, n), traj.stage(s, n))
            for n in range(1, sc.horizon + 1)
            for s in ("check", "ccheck", "hat")
        )
        assert worst <= 0.02


def test_population_dump_round_trip(tmp_path, rng):
    pop = init_population(random_distribution(rng, 3), 1234, rng)
    dump_population(pop, tmp_path / "pop.bin")
    data = (tmp_path / "pop.bin").read_bytes()
    assert data[0] == 1
    assert len(data) == 1 + 8 + 2 * 8 * 1234
    back = load_population(tmp_path / "pop.bin", 3)
    assert np.array_equal(back.alpha, pop.alpha)
    assert np.array_equal(back.partner, pop.partner)
