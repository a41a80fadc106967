"""Domain types shared by the mean-field, Markov and agent-based modules.

Extended types are pairs ``(k, l)`` where ``k`` is an agent's own type and
``l`` is either its partner's type or ``J`` (unmatched).  Every vector or
matrix indexed by extended types uses one canonical ordering: all matched
cells ``(k, l)`` in row-major order, followed by the unmatched cells
``(k, J)`` for ``k = 0..K-1``.  Types are 0-based in code and 1-based in
files.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence, Union

import numpy as np

J = "J"

DEFAULT_TOL = 1e-12
DRIFT_TOL = 1e-9


class MatchfieldError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputs(MatchfieldError, ValueError):
    """Raised when a distribution or an intensity table violates its invariants."""

    def __init__(self, message: str, violations: Sequence[str] = ()):
        super().__init__(message)
        self.violations = list(violations)


class MatchingInfeasible(MatchfieldError):
    """Raised when matching intensities would create asymmetric matched mass."""


class InfeasibleRounding(MatchfieldError):
    """Raised when a distribution cannot be rounded to a finite population."""


class ParseError(MatchfieldError, ValueError):
    """Raised for malformed scenario files."""


Label = Union[int, str]


@dataclass(frozen=True)
class TypeSpace:
    K: int

    def __post_init__(self):
        if int(self.K) != self.K or self.K < 1:
            raise InvalidInputs(f"type count must be a positive integer, got {self.K!r}")

    @property
    def size(self) -> int:
        return self.K * (self.K + 1)

    def index(self, k: int, l: Label) -> int:
        if l == J:
            return self.K * self.K + k
        return k * self.K + int(l)

    def label(self, idx: int) -> tuple[int, Label]:
        KK = self.K * self.K
        if idx >= KK:
            return idx - KK, J
        return divmod(idx, self.K)

    def labels(self) -> list[tuple[int, Label]]:
        return [self.label(i) for i in range(self.size)]


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok

    def __iter__(self) -> Iterator[str]:
        return iter(self.violations)

    def raise_if_invalid(self, what: str) -> None:
        if self.violations:
            raise InvalidInputs(f"invalid {what}: " + "; ".join(self.violations), self.violations)


class ExtendedTypeDistribution:
    """Probability mass over extended types, stored in canonical order.

    The object is immutable: the backing array is flagged read-only.
    """

    __slots__ = ("space", "_mass")

    def __init__(self, K: int, mass):
        self.space = TypeSpace(K)
        arr = np.array(mass, dtype=float).reshape(-1)
        if arr.size != self.space.size:
            raise InvalidInputs(f"expected {self.space.size} entries for K={K}, got {arr.size}")
        arr.setflags(write=False)
        self._mass = arr

    @classmethod
    def from_parts(cls, matched, unmatched) -> ExtendedTypeDistribution:
        matched = np.asarray(matched, dtype=float)
        unmatched = np.asarray(unmatched, dtype=float)
        return cls(unmatched.size, np.concatenate([matched.reshape(-1), unmatched]))

    @classmethod
    def from_entries(cls, K: int, entries) -> ExtendedTypeDistribution:
        """Build from ``{(k, l): mass}`` or ``[(k, l, mass), ...]``, 0-based types."""
        space = TypeSpace(K)
        arr = np.zeros(space.size)
        items = entries.items() if isinstance(entries, dict) else ((e[:2], e[2]) for e in entries)
        for (k, l), mass in items:
            arr[space.index(k, l)] += mass
        return cls(K, arr)

    @classmethod
    def point_mass(cls, K: int, k: int, l: Label) -> ExtendedTypeDistribution:
        return cls.from_entries(K, {(k, l): 1.0})

    @property
    def K(self) -> int:
        return self.space.K

    @property
    def mass(self) -> np.ndarray:
        return self._mass

    @property
    def matched(self) -> np.ndarray:
        """K x K view of the matched block, ``matched[k, l] = p(k, l)``."""
        K = self.K
        return self._mass[: K * K].reshape(K, K)

    @property
    def unmatched(self) -> np.ndarray:
        return self._mass[self.K * self.K :]

    def __getitem__(self, key: tuple[int, Label]) -> float:
        k, l = key
        return float(self._mass[self.space.index(k, l)])

    def __eq__(self, other) -> bool:
        if not isinstance(other, ExtendedTypeDistribution):
            return NotImplemented
        return self.K == other.K and np.array_equal(self._mass, other._mass)

    def __hash__(self):
        return hash((self.K, self._mass.tobytes()))

    def __repr__(self) -> str:
        return f"ExtendedTypeDistribution(K={self.K}, mass={self._mass.tolist()})"

    def validate(self, tol: float = DEFAULT_TOL) -> ValidationReport:
        return validate_distribution(self, tol)

    def normalized(self) -> ExtendedTypeDistribution:
        return ExtendedTypeDistribution(self.K, self._mass / self._mass.sum())


def validate_distribution(p, tol: float = DEFAULT_TOL, K: int | None = None) -> ValidationReport:
    """List every violated invariant of an extended-type distribution.

    ``p`` may be an :class:`ExtendedTypeDistribution` or a raw entry table
    (``{(k, l): mass}`` with 0-based types) together with ``K``.
    """
    if not isinstance(p, ExtendedTypeDistribution):
        if K is None:
            raise TypeError("K is required for raw entry tables")
        p = ExtendedTypeDistribution.from_entries(K, p)
    report = ValidationReport()
    mass = p.mass
    if not np.all(np.isfinite(mass)):
        report.violations.append("non-finite entries")
        return report
    space = p.space
    for i in np.flatnonzero(mass < 0):
        k, l = space.label(int(i))
        report.violations.append(f"negative mass {mass[i]:.3g} at ({_fmt(k)},{_fmt(l)})")
    total = mass.sum()
    if abs(total - 1.0) > tol:
        report.violations.append(f"total mass {total!r} differs from 1 by more than {tol:g}")
    M = p.matched
    K = p.K
    for k in range(K):
        for l in range(k + 1, K):
            if abs(M[k, l] - M[l, k]) > tol:
                report.violations.append(
                    f"asymmetry at ({k + 1},{l + 1}): {M[k, l]!r} vs {M[l, k]!r}"
                )
    return report


def _fmt(x: Label) -> str:
    return J if x == J else str(int(x) + 1)


@dataclass(frozen=True)
class InputMatrices:
    """One period's realized intensities.

    Shapes: ``eta`` (K, K), ``theta`` (K, K), ``xi`` (K, K),
    ``sigma`` (K, K, K, K), ``varsigma`` (K, K, K).
    """

    eta: np.ndarray
    theta: np.ndarray
    xi: np.ndarray
    sigma: np.ndarray
    varsigma: np.ndarray

    def __post_init__(self):
        for name in ("eta", "theta", "xi", "sigma", "varsigma"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def K(self) -> int:
        return self.eta.shape[0]

    @property
    def b(self) -> np.ndarray:
        return 1.0 - self.theta.sum(axis=1)

    @classmethod
    def identity(cls, K: int) -> InputMatrices:
        """Inputs under which nothing moves: no mutation, matching or break-up."""
        eye = np.eye(K)
        sigma = np.zeros((K, K, K, K))
        varsigma = np.zeros((K, K, K))
        for k in range(K):
            for l in range(K):
                sigma[k, l, k, l] = 1.0
                varsigma[k, l, k] = 1.0
        return cls(eye, np.zeros((K, K)), np.zeros((K, K)), sigma, varsigma)

    def replace(self, **changes) -> InputMatrices:
        fields = dict(eta=self.eta, theta=self.theta, xi=self.xi, sigma=self.sigma, varsigma=self.varsigma)
        fields.update(changes)
        return InputMatrices(**fields)

    def validate(self, tol: float = DEFAULT_TOL) -> ValidationReport:
        return validate_inputs(self, tol)


def validate_inputs(m: InputMatrices, tol: float = DEFAULT_TOL) -> ValidationReport:
    report = ValidationReport()
    v = report.violations
    K = m.eta.shape[0] if m.eta.ndim == 2 else 0
    shapes = {
        "eta": (K, K),
        "theta": (K, K),
        "xi": (K, K),
        "sigma": (K, K, K, K),
        "varsigma": (K, K, K),
    }
    for name, shape in shapes.items():
        arr = getattr(m, name)
        if arr.shape != shape:
            v.append(f"{name} has shape {arr.shape}, expected {shape}")
    if v:
        return report
    for name in shapes:
        if not np.all(np.isfinite(getattr(m, name))):
            v.append(f"{name} has non-finite entries")
    if v:
        return report

    for name in ("eta", "theta", "xi", "sigma", "varsigma"):
        arr = getattr(m, name)
        if np.any(arr < -tol) or np.any(arr > 1 + tol):
            v.append(f"{name} has entries outside [0, 1]")

    for k, s in enumerate(m.eta.sum(axis=1)):
        if abs(s - 1.0) > tol:
            v.append(f"eta row {k + 1} sums to {s!r}")
    for k, bk in enumerate(m.b):
        if bk < -tol:
            v.append(f"theta row {k + 1} sums above 1 (b[{k + 1}] = {bk!r})")
    if np.max(np.abs(m.xi - m.xi.T), initial=0.0) > tol:
        v.append("xi is not symmetric")
    sig_sums = m.sigma.sum(axis=(2, 3))
    for k, l in zip(*np.nonzero(np.abs(sig_sums - 1.0) > tol)):
        v.append(f"sigma[{k + 1}][{l + 1}] sums to {sig_sums[k, l]!r}")
    if np.max(np.abs(m.sigma - m.sigma.transpose(1, 0, 3, 2)), initial=0.0) > tol:
        v.append("sigma is not pair-symmetric (sigma[k][l][k'][l'] != sigma[l][k][l'][k'])")
    vs_sums = m.varsigma.sum(axis=2)
    for k, l in zip(*np.nonzero(np.abs(vs_sums - 1.0) > tol)):
        v.append(f"varsigma[{k + 1}][{l + 1}] sums to {vs_sums[k, l]!r}")
    return report
