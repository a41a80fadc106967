"""Finite-population realization of the matching dynamics.

A population holds each agent's type and a partner array; ``partner[i] == i``
marks an unmatched agent, so the partner array is always an involution.
Each period runs three sub-steps (mutation, matching, break-up) with
intensities evaluated at the live empirical distributions.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .scenario import (
    BREAKUP_STREAM,
    INIT_STREAM,
    MATCHING_STREAM,
    MUTATION_STREAM,
    ScenarioConfig,
    evaluate_intensities,
    substream,
)
from .types import (
    ExtendedTypeDistribution,
    InfeasibleRounding,
    InvalidInputs,
    MatchingInfeasible,
)

logger = logging.getLogger(__name__)

STAGES = ("check", "ccheck", "hat")
DUMP_VERSION = 1


@dataclass
class Population:
    K: int
    alpha: np.ndarray
    partner: np.ndarray
    period: int = 0

    @property
    def N(self) -> int:
        return self.alpha.shape[0]

    def is_matched(self) -> np.ndarray:
        return self.partner != np.arange(self.N)

    def pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """Matched pairs as index arrays ``(i, j)`` with ``i < j``, in index order."""
        i = np.flatnonzero(self.partner > np.arange(self.N))
        return i, self.partner[i]

    def pair_set(self) -> set[tuple[int, int]]:
        i, j = self.pairs()
        return set(zip(i.tolist(), j.tolist()))

    def check(self) -> None:
        if self.partner.shape != self.alpha.shape:
            raise AssertionError("alpha and partner lengths differ")
        if np.any(self.partner < 0) or np.any(self.partner >= self.N):
            raise AssertionError("partner index out of range")
        if not np.array_equal(self.partner[self.partner], np.arange(self.N)):
            raise AssertionError("partner array is not an involution")
        if np.any(self.alpha < 0) or np.any(self.alpha >= self.K):
            raise AssertionError("agent type out of range")

    def copy(self) -> Population:
        return Population(self.K, self.alpha.copy(), self.partner.copy(), self.period)


@dataclass(frozen=True)
class EmpiricalSnapshot:
    stage: str
    distribution: ExtendedTypeDistribution
    counts: np.ndarray = field(repr=False)


def empirical_counts(pop: Population) -> np.ndarray:
    K = pop.K
    matched = pop.is_matched()
    cell = np.where(matched, pop.alpha * K + pop.alpha[pop.partner], K * K + pop.alpha)
    return np.bincount(cell, minlength=K * (K + 1))


def empirical_distribution(pop: Population) -> ExtendedTypeDistribution:
    return ExtendedTypeDistribution(pop.K, empirical_counts(pop) / pop.N)


def _snapshot(pop: Population, stage: str) -> EmpiricalSnapshot:
    counts = empirical_counts(pop)
    return EmpiricalSnapshot(stage, ExtendedTypeDistribution(pop.K, counts / pop.N), counts)


# -- initialization ------------------------------------------------------------

def round_initial_counts(p0: ExtendedTypeDistribution, N: int) -> np.ndarray:
    """Agent counts per extended type summing to N, with even diagonal cells
    and symmetric off-diagonal cells.

    Unmatched cells are rounded in agents, matched cells in pairs; leftover
    agents go to the units with the largest remainders.
    """
    K = p0.K
    space = p0.space
    units = []  # (cells, cost, target)
    for k in range(K):
        units.append(((space.index(k, "J"),), 1, N * p0[k, "J"]))
    for k in range(K):
        units.append(((space.index(k, k),), 2, N * p0[k, k] / 2))
        for l in range(k + 1, K):
            target = N * (p0[k, l] + p0[l, k]) / 2
            units.append(((space.index(k, l), space.index(l, k)), 2, target))

    floors = [int(np.floor(t + 1e-9)) for _, _, t in units]
    remaining = N - sum(cost * f for (_, cost, _), f in zip(units, floors))
    if remaining < 0:
        raise InfeasibleRounding(f"p0 does not sum to 1 at N={N}")
    order = sorted(range(len(units)), key=lambda u: (-(units[u][2] - floors[u]), u))
    bumped = set()
    for u in order:
        cost = units[u][1]
        if remaining >= cost and units[u][2] - floors[u] > 1e-9:
            floors[u] += 1
            bumped.add(u)
            remaining -= cost
    while remaining > 0:
        free = [u for u in order if u not in bumped and units[u][1] <= remaining]
        if free:
            u = free[0]
            floors[u] += 1
            bumped.add(u)
            remaining -= units[u][1]
            continue
        # one agent left over: trade a bumped unmatched unit for an unbumped pair unit
        singles = [u for u in reversed(order) if u in bumped and units[u][1] == 1]
        has_pair = any(u not in bumped and units[u][1] == 2 for u in order)
        if remaining != 1 or not singles or not has_pair:
            break
        floors[singles[0]] -= 1
        bumped.discard(singles[0])
        remaining += 1
        # the freed unmatched unit must not be chosen again
        bumped.add(singles[0])
    if remaining != 0:
        raise InfeasibleRounding(f"cannot place {remaining} agent(s) of N={N} within one unit per cell")

    counts = np.zeros(space.size, dtype=np.int64)
    for (cells, cost, _), f in zip(units, floors):
        if len(cells) == 1 and cost == 2:
            counts[cells[0]] += 2 * f
        else:
            for c in cells:
                counts[c] += f
    return counts


def init_population(p0: ExtendedTypeDistribution, N: int, rng: np.random.Generator | int | None = None) -> Population:
    if N < 2:
        raise InvalidInputs("population needs at least 2 agents")
    p0.validate().raise_if_invalid("p0")
    rng = np.random.default_rng(rng)
    K = p0.K
    counts = round_initial_counts(p0, N)
    space = p0.space
    alpha = np.empty(N, dtype=np.int64)
    partner = np.empty(N, dtype=np.int64)
    pos = 0

    def take(n):
        nonlocal pos
        idx = np.arange(pos, pos + n)
        pos += n
        return idx

    for k in range(K):
        idx = take(counts[space.index(k, "J")])
        alpha[idx] = k
        partner[idx] = idx
        q = counts[space.index(k, k)] // 2
        a, b = take(q), take(q)
        alpha[a] = alpha[b] = k
        partner[a], partner[b] = b, a
        for l in range(k + 1, K):
            q = counts[space.index(k, l)]
            a, b = take(q), take(q)
            alpha[a], alpha[b] = k, l
            partner[a], partner[b] = b, a

    # relabel agents randomly so index order carries no type information
    perm = rng.permutation(N)
    new_alpha = np.empty_like(alpha)
    new_partner = np.empty_like(partner)
    new_alpha[perm] = alpha
    new_partner[perm] = perm[partner]
    return Population(K, new_alpha, new_partner, 0)


# -- sub-steps -------------------------------------------------------------------

def _draw(cdf_rows: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(cdf_rows.shape[0])
    out = (cdf_rows <= u[:, None]).sum(axis=1)
    return np.minimum(out, cdf_rows.shape[1] - 1)


def step_mutation(pop: Population, eta, rng: np.random.Generator) -> EmpiricalSnapshot:
    """Redraw every agent's type from its eta row; matches are untouched."""
    cdf = np.cumsum(np.asarray(eta, dtype=float), axis=1)
    pop.alpha = _draw(cdf[pop.alpha], rng)
    return _snapshot(pop, "check")


def pair_targets(theta, U: np.ndarray) -> np.ndarray:
    """Expected new pairs between unmatched pools, symmetrized.

    ``targets[k, l]`` (k != l) counts (k, l) pairs; ``targets[k, k]`` counts
    same-type pairs, each consuming two type-k agents.
    """
    theta = np.asarray(theta, dtype=float)
    flow = theta * U[:, None]
    targets = (flow + flow.T) / 2
    np.fill_diagonal(targets, np.diag(flow) / 2)
    return targets


def pair_demand(pairs: np.ndarray) -> np.ndarray:
    """Agents of each type consumed by a pair-count matrix."""
    return pairs.sum(axis=1) + np.diag(pairs)


def clamp_pair_counts(counts: np.ndarray, rounded_up: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Undo round-ups, in index order, until every pool can supply its pairs."""
    counts = counts.copy()
    up = rounded_up.copy()
    K = counts.shape[0]
    for k in range(K):
        while pair_demand(counts)[k] > U[k]:
            cand = [l for l in range(K) if up[k, l] and counts[k, l] > 0]
            if not cand:
                cand = [l for l in range(K) if counts[k, l] > 0]
            l = cand[0]
            counts[k, l] -= 1
            if l != k:
                counts[l, k] -= 1
            up[k, l] = up[l, k] = False
    return counts


def round_pair_targets(targets: np.ndarray, U: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Stochastic rounding: floor plus a Bernoulli draw on the fractional part."""
    K = targets.shape[0]
    floors = np.floor(targets + 1e-12)
    frac = np.clip(targets - floors, 0.0, 1.0)
    iu = np.triu_indices(K)
    draws = rng.random(iu[0].shape[0]) < frac[iu]
    up = np.zeros((K, K), dtype=bool)
    up[iu] = draws
    up = up | up.T
    counts = floors.astype(np.int64) + up
    return clamp_pair_counts(counts, up, U)


def step_matching(pop: Population, theta, rng: np.random.Generator) -> EmpiricalSnapshot:
    """Form new pairs among unmatched agents; existing pairs are kept."""
    K = pop.K
    unmatched = np.flatnonzero(~pop.is_matched())
    types = pop.alpha[unmatched]
    U = np.bincount(types, minlength=K)
    targets = pair_targets(theta, U)
    demand = pair_demand(targets)
    if np.any(demand > U + 1e-9):
        k = int(np.argmax(demand - U))
        raise MatchingInfeasible(
            f"type {k + 1}: {demand[k]:.6g} agents requested for matching, only {U[k]} unmatched"
        )
    pairs = round_pair_targets(targets, U, rng)

    chunks: dict[tuple[int, int], np.ndarray] = {}
    for k in range(K):
        pool = rng.permutation(unmatched[types == k])
        pos = 0
        for l in range(K):
            n = int(pairs[k, l]) * (2 if l == k else 1)
            chunks[k, l] = pool[pos : pos + n]
            pos += n
    for k in range(K):
        c = chunks[k, k]
        q = c.shape[0] // 2
        a, b = c[:q], c[q:]
        pop.partner[a], pop.partner[b] = b, a
        for l in range(k + 1, K):
            a, b = chunks[k, l], chunks[l, k]
            pop.partner[a], pop.partner[b] = b, a
    return _snapshot(pop, "ccheck")


def step_breakup(pop: Population, xi, sigma, varsigma, rng: np.random.Generator) -> EmpiricalSnapshot:
    """Each pair draws once: dissolve (types from varsigma per side) or persist
    (joint types from sigma).  Unmatched agents are untouched."""
    K = pop.K
    xi = np.asarray(xi, dtype=float)
    i, j = pop.pairs()
    k, l = pop.alpha[i], pop.alpha[j]
    brk = rng.random(i.shape[0]) < xi[k, l]

    keep = ~brk
    joint_cdf = np.cumsum(np.asarray(sigma, dtype=float).reshape(K, K, K * K), axis=2)
    drawn = _draw(joint_cdf[k[keep], l[keep]], rng)
    pop.alpha[i[keep]] = drawn // K
    pop.alpha[j[keep]] = drawn % K

    vs_cdf = np.cumsum(np.asarray(varsigma, dtype=float), axis=2)
    di, dj = i[brk], j[brk]
    dk, dl = k[brk], l[brk]
    pop.alpha[di] = _draw(vs_cdf[dk, dl], rng)
    pop.alpha[dj] = _draw(vs_cdf[dl, dk], rng)
    pop.partner[di] = di
    pop.partner[dj] = dj
    return _snapshot(pop, "hat")


# -- full runs -------------------------------------------------------------------

@dataclass(frozen=True)
class SimulationResult:
    """Empirical distributions per period; ``snapshots[0]`` holds only ``hat``."""

    env_path: tuple[int, ...]
    replication: int
    snapshots: tuple[dict, ...]
    population: Population = field(repr=False)

    def stage(self, name: str, n: int) -> ExtendedTypeDistribution:
        return self.snapshots[n][name].distribution


def run_simulation(
    scenario: ScenarioConfig,
    env_path: Sequence[int],
    replication: int = 0,
    check_invariants: bool = False,
) -> SimulationResult:
    """Simulate one replication along a given environment path.

    Deterministic in ``(scenario.master_seed, replication, env_path)``.
    """
    if len(env_path) != scenario.horizon:
        raise InvalidInputs(f"environment path has {len(env_path)} periods, horizon is {scenario.horizon}")
    seed = scenario.master_seed
    spec = scenario.intensities
    pop = init_population(scenario.p0, scenario.population, substream(seed, replication, INIT_STREAM))
    snaps: list[dict] = [{"hat": _snapshot(pop, "hat")}]
    for n, state in enumerate(env_path, start=1):
        pop.period = n
        prev = snaps[-1]["hat"].distribution

        m = evaluate_intensities(spec, state, n, prev)
        before = pop.pair_set() if check_invariants else None
        check = step_mutation(pop, m.eta, substream(seed, replication, n, MUTATION_STREAM))
        if check_invariants:
            pop.check()
            assert pop.pair_set() == before

        m = evaluate_intensities(spec, state, n, check.distribution)
        ccheck = step_matching(pop, m.theta, substream(seed, replication, n, MATCHING_STREAM))
        if check_invariants:
            pop.check()
            assert before <= pop.pair_set()

        m = evaluate_intensities(spec, state, n, ccheck.distribution)
        hat = step_breakup(pop, m.xi, m.sigma, m.varsigma, substream(seed, replication, n, BREAKUP_STREAM))
        if check_invariants:
            pop.check()
        snaps.append({"check": check, "ccheck": ccheck, "hat": hat})
        logger.debug("replication %d period %d done", replication, n)
    return SimulationResult(tuple(env_path), replication, tuple(snaps), pop)


# -- binary dump -------------------------------------------------------------------

_HEADER = struct.Struct("<BQ")


def dump_population(pop: Population, path) -> None:
    """Write version byte, N, then alpha and partner as little-endian int64."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DUMP_VERSION, pop.N))
        fh.write(pop.alpha.astype("<i8").tobytes())
        fh.write(pop.partner.astype("<i8").tobytes())


def load_population(path, K: int) -> Population:
    data = Path(path).read_bytes()
    version, N = _HEADER.unpack_from(data)
    if version != DUMP_VERSION:
        raise InvalidInputs(f"unsupported population dump version {version}")
    body = np.frombuffer(data, dtype="<i8", offset=_HEADER.size)
    if body.shape[0] != 2 * N:
        raise InvalidInputs("truncated population dump")
    pop = Population(K, body[:N].astype(np.int64), body[N:].astype(np.int64))
    pop.check()
    return pop
