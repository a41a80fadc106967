"""Single-agent extended-type Markov chain.

The transition matrix for period ``n`` maps the extended type an agent
holds at the end of period ``n - 1`` to the one it holds at the end of
period ``n``.  Rows and columns follow the canonical extended-type order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .meanfield import Intensities, MeanfieldTrajectory, gamma
from .scenario import AGENT_PATH_STREAM, ScenarioConfig, period_intensities, substream
from .types import DEFAULT_TOL, ExtendedTypeDistribution, InputMatrices, InvalidInputs, TypeSpace


@dataclass(frozen=True)
class TransitionMatrix:
    z: np.ndarray
    period: int | None = None
    env_state: int | None = None

    def __post_init__(self):
        z = np.array(self.z, dtype=float)
        z.setflags(write=False)
        object.__setattr__(self, "z", z)

    @property
    def K(self) -> int:
        return int(round((np.sqrt(1 + 4 * self.z.shape[0]) - 1) / 2))

    def row_sum_error(self) -> float:
        return float(np.max(np.abs(self.z.sum(axis=1) - 1.0)))


def transition_from_inputs(m: InputMatrices) -> np.ndarray:
    """Assemble z from staged intensities (eta, theta, xi, sigma, varsigma)."""
    K = m.K
    eta, theta, xi = m.eta, m.theta, m.xi
    persist = (1.0 - xi)[:, :, None, None] * m.sigma
    dissolve = xi[:, :, None] * m.varsigma

    # source matched (k', l'): both partners mutate, then the pair persists or dissolves
    mm = np.einsum("ai,bj,ijkl->abkl", eta, eta, persist)
    mu = np.einsum("ai,bj,ijk->abk", eta, eta, dissolve)
    # source unmatched (k', J): mutate to k1, match with l1 or stay unmatched
    um = np.einsum("ai,ij,ijkl->akl", eta, theta, persist)
    uu = eta * m.b[None, :] + np.einsum("ai,ij,ijk->ak", eta, theta, dissolve)

    KK = K * K
    z = np.empty((KK + K, KK + K))
    z[:KK, :KK] = mm.reshape(KK, KK)
    z[:KK, KK:] = mu.reshape(KK, K)
    z[KK:, :KK] = um.reshape(K, KK)
    z[KK:, KK:] = uu
    return z


def build_transition_matrix(
    p_prev: ExtendedTypeDistribution,
    intensities: Intensities,
    period: int | None = None,
    env_state: int | None = None,
    tol: float = DEFAULT_TOL,
) -> TransitionMatrix:
    """Transition matrix for the period that starts from ``p_prev``.

    Intensities are evaluated with the same staging as the mean-field map.
    """
    staged = gamma(p_prev, intensities, tol).inputs
    return TransitionMatrix(transition_from_inputs(staged), period, env_state)


def evolve(p: ExtendedTypeDistribution, z: TransitionMatrix | np.ndarray, tol: float = 1e-10) -> ExtendedTypeDistribution:
    zz = z.z if isinstance(z, TransitionMatrix) else np.asarray(z, dtype=float)
    if zz.shape != (p.space.size, p.space.size):
        raise InvalidInputs(f"transition matrix has shape {zz.shape}, expected size {p.space.size}")
    if np.any(zz < -tol) or np.max(np.abs(zz.sum(axis=1) - 1.0)) > tol:
        raise InvalidInputs("transition matrix is not row-stochastic")
    return ExtendedTypeDistribution(p.K, p.mass @ zz)


def trajectory_matrices(scenario: ScenarioConfig, traj: MeanfieldTrajectory) -> list[TransitionMatrix]:
    """z^n for n = 1..horizon along a mean-field trajectory (index 0 is None)."""
    out: list = [None]
    for n in range(1, traj.horizon + 1):
        state = traj.env_state(n)
        fn = period_intensities(scenario.intensities, state, n)
        out.append(build_transition_matrix(traj.p_hat[n - 1], fn, n, state))
    return out


def gamma_z_residual(p: ExtendedTypeDistribution, intensities: Intensities) -> float:
    """Sup-norm gap between evolving p by z and applying the mean-field map."""
    res = gamma(p, intensities)
    z = transition_from_inputs(res.inputs)
    return float(np.max(np.abs(p.mass @ z - res.p_hat.mass)))


def _sample_rows(z: np.ndarray, states: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(z, axis=1)
    u = rng.random(states.shape[0])
    nxt = (cdf[states] <= u[:, None]).sum(axis=1)
    return np.minimum(nxt, z.shape[1] - 1)


def simulate_agent_paths(
    beta0,
    matrices: list[TransitionMatrix],
    rng: np.random.Generator,
) -> np.ndarray:
    """Sample independent chains; returns an array of shape (agents, periods + 1).

    ``beta0`` holds canonical extended-type indices, one per agent.
    ``matrices[n]`` drives the step from period ``n - 1`` to ``n``.
    """
    states = np.atleast_1d(np.asarray(beta0, dtype=np.int64))
    horizon = len(matrices) - 1
    paths = np.empty((states.shape[0], horizon + 1), dtype=np.int64)
    paths[:, 0] = states
    for n in range(1, horizon + 1):
        states = _sample_rows(matrices[n].z, states, rng)
        paths[:, n] = states
    return paths


def simulate_agent_path(
    beta0,
    meanfield: MeanfieldTrajectory,
    scenario: ScenarioConfig,
    seed: int,
    matrices: list[TransitionMatrix] | None = None,
) -> list[tuple]:
    """One agent's extended-type path, as ``(k, l)`` labels (``l`` may be ``J``).

    ``beta0`` is a ``(k, l)`` label or a canonical index.  Pass ``matrices``
    from :func:`trajectory_matrices` to avoid rebuilding them per agent.
    """
    space = TypeSpace(scenario.K)
    start = space.index(*beta0) if isinstance(beta0, tuple) else int(beta0)
    if matrices is None:
        matrices = trajectory_matrices(scenario, meanfield)
    rng = substream(scenario.master_seed, seed, AGENT_PATH_STREAM)
    path = simulate_agent_paths([start], matrices, rng)[0]
    return [space.label(int(i)) for i in path]


def transition_counts(paths: np.ndarray, size: int) -> np.ndarray:
    """counts[n, i, j] = number of agents going from i at n - 1 to j at n (n >= 1)."""
    horizon = paths.shape[1] - 1
    counts = np.zeros((horizon + 1, size, size), dtype=np.int64)
    for n in range(1, horizon + 1):
        np.add.at(counts[n], (paths[:, n - 1], paths[:, n]), 1)
    return counts
