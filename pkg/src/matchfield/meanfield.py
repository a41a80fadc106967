"""Deterministic evolution of the expected extended-type distribution.

One period is the composition mutation -> matching -> break-up.  Intensities
are evaluated in stages: mutation at the previous end-of-period
distribution, matching at the post-mutation distribution, break-up at the
post-matching distribution.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

from .scenario import ScenarioConfig, period_intensities
from .types import (
    DEFAULT_TOL,
    ExtendedTypeDistribution,
    InputMatrices,
    InvalidInputs,
    J,
    MatchingInfeasible,
)

Intensities = Union[InputMatrices, Callable[[ExtendedTypeDistribution], InputMatrices]]


def _resolve(intensities: Intensities, p: ExtendedTypeDistribution) -> InputMatrices:
    if isinstance(intensities, InputMatrices):
        return intensities
    return intensities(p)


def _check_eta(eta: np.ndarray, K: int, tol: float) -> None:
    if eta.shape != (K, K):
        raise InvalidInputs(f"eta has shape {eta.shape}, expected {(K, K)}")
    if np.any(eta < -tol) or np.max(np.abs(eta.sum(axis=1) - 1.0)) > tol:
        raise InvalidInputs("eta rows must be probability vectors")


def mutation_step(p: ExtendedTypeDistribution, eta, tol: float = DEFAULT_TOL) -> ExtendedTypeDistribution:
    """Expected post-mutation distribution.

    Both partners of a matched pair mutate independently; unmatched agents
    stay unmatched.
    """
    eta = np.asarray(eta, dtype=float)
    _check_eta(eta, p.K, tol)
    matched = eta.T @ p.matched @ eta
    unmatched = eta.T @ p.unmatched
    return ExtendedTypeDistribution.from_parts(matched, unmatched)


def matching_step(
    p_check: ExtendedTypeDistribution,
    theta,
    b=None,
    tol: float = DEFAULT_TOL,
) -> ExtendedTypeDistribution:
    """Expected post-matching distribution.

    Raises MatchingInfeasible when ``theta[k, l] * p(k, J)`` and
    ``theta[l, k] * p(l, J)`` disagree: that would create matched mass that
    is not pair-symmetric.
    """
    K = p_check.K
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (K, K) or np.any(theta < -tol):
        raise InvalidInputs("theta must be a nonnegative K x K matrix")
    b_derived = 1.0 - theta.sum(axis=1)
    if b is None:
        b = b_derived
    else:
        b = np.asarray(b, dtype=float)
        if b.shape != (K,) or np.max(np.abs(b - b_derived)) > tol:
            raise InvalidInputs("b must equal 1 - row sums of theta")
    if np.any(b < -tol):
        raise InvalidInputs("theta rows sum above 1")

    u = p_check.unmatched
    flow = theta * u[:, None]
    gap = np.abs(flow - flow.T)
    if gap.max(initial=0.0) > tol:
        k, l = np.unravel_index(int(np.argmax(gap)), gap.shape)
        raise MatchingInfeasible(
            f"matched mass created for ({k + 1},{l + 1}) is {flow[k, l]!r} "
            f"but {flow[l, k]!r} for ({l + 1},{k + 1})"
        )
    return ExtendedTypeDistribution.from_parts(p_check.matched + flow, b * u)


def breakup_step(
    p_ccheck: ExtendedTypeDistribution,
    xi,
    sigma,
    varsigma,
    tol: float = DEFAULT_TOL,
) -> ExtendedTypeDistribution:
    """Expected end-of-period distribution after break-ups and pair type changes."""
    K = p_ccheck.K
    xi = np.asarray(xi, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    varsigma = np.asarray(varsigma, dtype=float)
    if xi.shape != (K, K) or sigma.shape != (K,) * 4 or varsigma.shape != (K,) * 3:
        raise InvalidInputs("xi, sigma, varsigma have wrong shapes")
    if np.max(np.abs(sigma.sum(axis=(2, 3)) - 1.0)) > tol:
        raise InvalidInputs("sigma[k][l] must sum to 1")
    if np.max(np.abs(varsigma.sum(axis=2) - 1.0)) > tol:
        raise InvalidInputs("varsigma[k][l] must sum to 1")
    M = p_ccheck.matched
    matched = np.einsum("ij,ijkl->kl", (1.0 - xi) * M, sigma)
    unmatched = p_ccheck.unmatched + np.einsum("ij,ijk->k", xi * M, varsigma)
    return ExtendedTypeDistribution.from_parts(matched, unmatched)


@dataclass(frozen=True)
class GammaResult:
    p_check: ExtendedTypeDistribution
    p_ccheck: ExtendedTypeDistribution
    p_hat: ExtendedTypeDistribution
    inputs: InputMatrices
    """eta as evaluated at p, theta at p_check, xi/sigma/varsigma at p_ccheck."""


def gamma(p: ExtendedTypeDistribution, intensities: Intensities, tol: float = DEFAULT_TOL) -> GammaResult:
    """One period of the mean-field map, returning all three stages.

    ``intensities`` is either a fixed InputMatrices or a function of the
    distribution; in the latter case it is evaluated once per stage.
    """
    m_mut = _resolve(intensities, p)
    p_check = mutation_step(p, m_mut.eta, tol)
    m_match = _resolve(intensities, p_check)
    p_ccheck = matching_step(p_check, m_match.theta, m_match.b, tol)
    m_brk = _resolve(intensities, p_ccheck)
    p_hat = breakup_step(p_ccheck, m_brk.xi, m_brk.sigma, m_brk.varsigma, tol)
    staged = InputMatrices(m_mut.eta, m_match.theta, m_brk.xi, m_brk.sigma, m_brk.varsigma)
    return GammaResult(p_check, p_ccheck, p_hat, staged)


def gamma_closed_form(p: ExtendedTypeDistribution, intensities: Intensities) -> ExtendedTypeDistribution:
    """Direct scalar evaluation of the one-period map.

    Written as explicit sums so it shares no arithmetic with :func:`gamma`;
    it still evaluates the intensities at the same staged arguments.
    """
    K = p.K
    m_mut = _resolve(intensities, p)
    eta = m_mut.eta
    pt = {}
    for k in range(K):
        for l in range(K):
            pt[k, l] = sum(
                eta[k1, k] * eta[l1, l] * p[k1, l1] for k1 in range(K) for l1 in range(K)
            )
        pt[k, J] = sum(p[l, J] * eta[l, k] for l in range(K))
    p_tilde = ExtendedTypeDistribution.from_entries(K, pt)

    m_match = _resolve(intensities, p_tilde)
    theta = m_match.theta
    b = [1.0 - sum(theta[k, l] for l in range(K)) for k in range(K)]
    ptt = {}
    for k in range(K):
        for l in range(K):
            ptt[k, l] = pt[k, l] + theta[k, l] * pt[k, J]
        ptt[k, J] = b[k] * pt[k, J]
    p_ttilde = ExtendedTypeDistribution.from_entries(K, ptt)

    m_brk = _resolve(intensities, p_ttilde)
    xi, sigma, vs = m_brk.xi, m_brk.sigma, m_brk.varsigma
    out = {}
    pairs = [(k1, l1) for k1 in range(K) for l1 in range(K)]
    for k in range(K):
        for l in range(K):
            out[k, l] = sum(
                (1 - xi[k1, l1]) * sigma[k1, l1, k, l] * pt[k1, l1] for k1, l1 in pairs
            ) + sum(
                (1 - xi[k1, l1]) * sigma[k1, l1, k, l] * theta[k1, l1] * pt[k1, J]
                for k1, l1 in pairs
            )
        out[k, J] = (
            b[k] * pt[k, J]
            + sum(xi[k1, l1] * vs[k1, l1, k] * pt[k1, l1] for k1, l1 in pairs)
            + sum(xi[k1, l1] * vs[k1, l1, k] * theta[k1, l1] * pt[k1, J] for k1, l1 in pairs)
        )
    return ExtendedTypeDistribution.from_entries(K, out)


@dataclass(frozen=True)
class MeanfieldTrajectory:
    """Expected distributions per period.

    ``p_hat[0]`` is the initial condition; ``p_check[n]``, ``p_ccheck[n]``,
    ``p_hat[n]`` and ``inputs[n]`` refer to period ``n`` (index 0 of the
    first three lists is None so periods index directly).
    """

    env_path: tuple[int, ...]
    p_check: tuple
    p_ccheck: tuple
    p_hat: tuple
    inputs: tuple

    @property
    def horizon(self) -> int:
        return len(self.env_path)

    def stage(self, name: str, n: int) -> ExtendedTypeDistribution:
        return {"check": self.p_check, "ccheck": self.p_ccheck, "hat": self.p_hat}[name][n]

    def env_state(self, n: int) -> int:
        return self.env_path[n - 1]


def iterate_meanfield(
    scenario: ScenarioConfig,
    env_path: Sequence[int],
    tol: float = DEFAULT_TOL,
) -> MeanfieldTrajectory:
    if len(env_path) != scenario.horizon:
        raise InvalidInputs(f"environment path has {len(env_path)} periods, horizon is {scenario.horizon}")
    p_check: list = [None]
    p_ccheck: list = [None]
    p_hat: list = [scenario.p0]
    inputs: list = [None]
    for n, state in enumerate(env_path, start=1):
        res = gamma(p_hat[-1], period_intensities(scenario.intensities, state, n, tol), tol)
        p_check.append(res.p_check)
        p_ccheck.append(res.p_ccheck)
        p_hat.append(res.p_hat)
        inputs.append(res.inputs)
    return MeanfieldTrajectory(tuple(env_path), tuple(p_check), tuple(p_ccheck), tuple(p_hat), tuple(inputs))
