"""Random valid distributions, intensities and scenarios for property checks."""

from __future__ import annotations

import numpy as np

from .scenario import EnvironmentProcess, IntensitySpec, ScenarioConfig
from .types import ExtendedTypeDistribution, InputMatrices, TypeSpace


def random_distribution(rng: np.random.Generator, K: int, concentration: float = 0.7) -> ExtendedTypeDistribution:
    """Symmetric extended-type distribution with Dirichlet weights."""
    n_pairs = K * (K + 1) // 2
    w = rng.dirichlet(np.full(n_pairs + K, concentration))
    matched = np.zeros((K, K))
    iu = np.triu_indices(K)
    matched[iu] = w[:n_pairs]
    # off-diagonal pair mass is split evenly between (k, l) and (l, k)
    off = np.triu(matched, 1) / 2
    matched = off + off.T + np.diag(np.diag(matched))
    return ExtendedTypeDistribution.from_parts(matched, w[n_pairs:])


def random_inputs(rng: np.random.Generator, K: int, concentration: float = 0.8) -> InputMatrices:
    """Valid intensities with ``theta`` = 0 (set it through a feedback rule)."""
    eta = rng.dirichlet(np.full(K, concentration), size=K)
    xi = rng.random((K, K))
    xi = np.triu(xi) + np.triu(xi, 1).T
    sigma = np.zeros((K, K, K, K))
    for k in range(K):
        for l in range(k, K):
            joint = rng.dirichlet(np.full(K * K, concentration)).reshape(K, K)
            if k == l:
                joint = (joint + joint.T) / 2
                sigma[k, k] = joint
            else:
                sigma[k, l] = joint
                sigma[l, k] = joint.T
    varsigma = rng.dirichlet(np.full(K, concentration), size=(K, K))
    return InputMatrices(eta, np.zeros((K, K)), xi, sigma, varsigma)


def random_search_rates(rng: np.random.Generator, K: int) -> np.ndarray:
    """Symmetric c in [0, 1]; with cap = 1 the feedback rule is always feasible."""
    c = rng.random((K, K))
    return np.triu(c) + np.triu(c, 1).T


def random_intensity_spec(rng: np.random.Generator, K: int, n_states: int = 1) -> IntensitySpec:
    tables, cs, caps = {}, {}, {}
    for s in range(n_states):
        tables[s] = random_inputs(rng, K)
        cs[s] = random_search_rates(rng, K)
        caps[s] = np.ones((K, K))
    return IntensitySpec("feedback", tables, cs, caps)


def random_scenario(
    rng: np.random.Generator,
    K: int,
    horizon: int = 5,
    population: int = 1000,
    n_states: int = 2,
    master_seed: int = 0,
) -> ScenarioConfig:
    T = rng.dirichlet(np.ones(n_states), size=n_states)
    env = EnvironmentProcess(tuple(f"s{i}" for i in range(n_states)), T, 0, "sampled")
    return ScenarioConfig(
        type_space=TypeSpace(K),
        horizon=horizon,
        population=population,
        master_seed=master_seed,
        p0=random_distribution(rng, K),
        environment=env,
        intensities=random_intensity_spec(rng, K, n_states),
    )
