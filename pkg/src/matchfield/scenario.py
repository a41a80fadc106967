"""Scenario configuration, environment paths and intensity evaluation.

Scenario files are TOML.  Types are 1-based in files; environment states
are referred to by label.  See ``README.md`` for the full schema.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np
import tomli
import tomli_w

from .types import (
    DEFAULT_TOL,
    J,
    ExtendedTypeDistribution,
    InputMatrices,
    InvalidInputs,
    ParseError,
    TypeSpace,
    ValidationReport,
    validate_distribution,
    validate_inputs,
)

PATH_MODES = ("fixed", "sampled")
INTENSITY_MODES = ("constant", "schedule", "feedback")

# stage tags used to derive independent RNG substreams
ENV_STREAM = 0
INIT_STREAM = 1
MUTATION_STREAM = 2
MATCHING_STREAM = 3
BREAKUP_STREAM = 4
AGENT_PATH_STREAM = 5


def substream(master_seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for a (master seed, key...) combination."""
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), *map(int, keys)]))


@dataclass(frozen=True, eq=False)
class EnvironmentProcess:
    states: tuple[str, ...]
    transition: np.ndarray
    initial: int = 0
    path_mode: str = "sampled"
    path: tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(self.states))
        T = np.array(self.transition, dtype=float)
        T.setflags(write=False)
        object.__setattr__(self, "transition", T)
        if self.path is not None:
            object.__setattr__(self, "path", tuple(int(s) for s in self.path))

    @classmethod
    def single(cls, label: str = "base") -> EnvironmentProcess:
        return cls((label,), np.ones((1, 1)))

    def validate(self, horizon: int | None = None, tol: float = DEFAULT_TOL) -> ValidationReport:
        report = ValidationReport()
        v = report.violations
        S = len(self.states)
        if S == 0:
            v.append("environment has no states")
            return report
        if len(set(self.states)) != S:
            v.append("environment state labels are not unique")
        if self.transition.shape != (S, S):
            v.append(f"environment transition has shape {self.transition.shape}, expected {(S, S)}")
        else:
            if np.any(self.transition < 0):
                v.append("environment transition has negative entries")
            for i, s in enumerate(self.transition.sum(axis=1)):
                if abs(s - 1.0) > tol:
                    v.append(f"environment transition row {self.states[i]!r} sums to {s!r}")
        if not 0 <= self.initial < S:
            v.append(f"initial environment state {self.initial} out of range")
        if self.path_mode not in PATH_MODES:
            v.append(f"path_mode must be one of {PATH_MODES}, got {self.path_mode!r}")
        if self.path_mode == "fixed":
            if self.path is None:
                v.append("path_mode 'fixed' requires a path")
            else:
                if any(not 0 <= s < S for s in self.path):
                    v.append("fixed path refers to unknown states")
                if horizon is not None and len(self.path) < horizon:
                    v.append(f"fixed path has {len(self.path)} states, horizon is {horizon}")
        return report

    def realize(self, horizon: int, rng: np.random.Generator | None = None) -> list[int]:
        """State index for periods 1..horizon. Period 1 is in the initial state."""
        if self.path_mode == "fixed":
            if self.path is None or len(self.path) < horizon:
                raise InvalidInputs("fixed environment path shorter than horizon")
            return list(self.path[:horizon])
        if rng is None:
            raise ValueError("sampled environment paths need a generator")
        path = [self.initial]
        cdf = np.cumsum(self.transition, axis=1)
        for _ in range(horizon - 1):
            u = rng.random()
            nxt = int(np.searchsorted(cdf[path[-1]], u, side="right"))
            path.append(min(nxt, len(self.states) - 1))
        return path


@dataclass(frozen=True, eq=False)
class IntensitySpec:
    """How per-period :class:`InputMatrices` are produced.

    ``tables`` maps an environment-state index (constant and feedback modes)
    or a ``(state, period)`` pair (schedule mode) to an InputMatrices.  In
    feedback mode the tables' ``theta`` is ignored and replaced by
    ``min(c[k, l] * p(l, J), cap[k, l])`` with per-state ``c`` and ``cap``.
    """

    mode: str
    tables: Mapping[Any, InputMatrices]
    c: Mapping[int, np.ndarray] = field(default_factory=dict)
    cap: Mapping[int, np.ndarray] = field(default_factory=dict)

    @classmethod
    def constant(cls, m: InputMatrices, n_states: int = 1) -> IntensitySpec:
        return cls("constant", {s: m for s in range(n_states)})

    @classmethod
    def feedback(cls, base: InputMatrices, c, cap=None) -> IntensitySpec:
        c = np.asarray(c, dtype=float)
        cap = np.ones_like(c) if cap is None else np.asarray(cap, dtype=float)
        return cls("feedback", {0: base}, {0: c}, {0: cap})

    def table(self, env_state: int, n: int) -> InputMatrices:
        key = (env_state, n) if self.mode == "schedule" else env_state
        try:
            return self.tables[key]
        except KeyError:
            raise InvalidInputs(f"no intensity table for {key!r}") from None


def evaluate_intensities(
    spec: IntensitySpec,
    env_state: int,
    n: int,
    p: ExtendedTypeDistribution,
    tol: float = DEFAULT_TOL,
) -> InputMatrices:
    """Realized intensities for period ``n`` in ``env_state`` at distribution ``p``."""
    m = spec.table(env_state, n)
    if spec.mode == "feedback":
        c = spec.c[env_state]
        cap = spec.cap[env_state]
        theta = np.minimum(c * p.unmatched[None, :], cap)
        m = m.replace(theta=theta)
    report = validate_inputs(m, tol)
    report.raise_if_invalid(f"intensities (state {env_state}, period {n})")
    return m


IntensityFn = Callable[[ExtendedTypeDistribution], InputMatrices]


def period_intensities(spec: IntensitySpec, env_state: int, n: int, tol: float = DEFAULT_TOL) -> IntensityFn:
    """Bind environment state and period, leaving the distribution argument free."""

    def at(p: ExtendedTypeDistribution) -> InputMatrices:
        return evaluate_intensities(spec, env_state, n, p, tol)

    return at


@dataclass(frozen=True, eq=False)
class ScenarioConfig:
    type_space: TypeSpace
    horizon: int
    population: int
    master_seed: int
    p0: ExtendedTypeDistribution
    environment: EnvironmentProcess
    intensities: IntensitySpec
    replications: int = 1

    @property
    def K(self) -> int:
        return self.type_space.K

    def validate(self, tol: float = DEFAULT_TOL) -> ValidationReport:
        report = ValidationReport()
        v = report.violations
        if self.horizon < 1:
            v.append("horizon must be >= 1")
        if self.population < 2:
            v.append("population must be >= 2")
        if self.replications < 1:
            v.append("replications must be >= 1")
        if not 0 <= self.master_seed < 2**64:
            v.append("master_seed must be an unsigned 64-bit integer")
        if self.p0.K != self.K:
            v.append(f"p0 has K={self.p0.K}, scenario has K={self.K}")
        v.extend(f"p0: {x}" for x in validate_distribution(self.p0, tol))
        v.extend(self.environment.validate(self.horizon, tol))
        v.extend(_validate_intensity_spec(self, tol))
        return report

    def replace(self, **changes) -> ScenarioConfig:
        fields = {name: getattr(self, name) for name in self.__dataclass_fields__}
        fields.update(changes)
        return ScenarioConfig(**fields)

    def env_path(self, replication: int = 0) -> list[int]:
        rng = substream(self.master_seed, replication, ENV_STREAM)
        return self.environment.realize(self.horizon, rng)

    def to_dict(self) -> dict:
        return scenario_to_dict(self)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ScenarioConfig):
            return NotImplemented
        return self.to_dict() == other.to_dict()


def _validate_intensity_spec(sc: ScenarioConfig, tol: float) -> list[str]:
    spec = sc.intensities
    K = sc.K
    out: list[str] = []
    if spec.mode not in INTENSITY_MODES:
        return [f"intensity mode must be one of {INTENSITY_MODES}, got {spec.mode!r}"]
    S = len(sc.environment.states)
    if spec.mode == "schedule":
        keys = [(s, n) for s in range(S) for n in range(1, sc.horizon + 1)]
    else:
        keys = list(range(S))
    for key in keys:
        if key not in spec.tables:
            out.append(f"missing intensity table for {_key_name(sc, key)}")
            continue
        m = spec.tables[key]
        if spec.mode == "feedback":
            state = key
            c = spec.c.get(state)
            cap = spec.cap.get(state)
            if c is None or cap is None:
                out.append(f"feedback mode needs c and cap for {_key_name(sc, key)}")
                continue
            if c.shape != (K, K) or cap.shape != (K, K):
                out.append(f"c/cap for {_key_name(sc, key)} must be {K}x{K}")
                continue
            if np.any(c < 0) or np.any(cap < 0) or np.any(cap > 1):
                out.append(f"c must be >= 0 and cap in [0, 1] for {_key_name(sc, key)}")
            # any distribution has sum_l p(l, J) <= 1, so this bounds every row of theta
            worst = np.minimum(c.max(axis=1, initial=0.0), cap.sum(axis=1))
            for k in np.flatnonzero(worst > 1 + tol):
                out.append(
                    f"feedback theta row {k + 1} can exceed 1 for {_key_name(sc, key)}"
                )
            m = m.replace(theta=np.zeros((K, K)))
        if m.K != K:
            out.append(f"intensity table for {_key_name(sc, key)} has K={m.K}")
            continue
        out.extend(f"{_key_name(sc, key)}: {x}" for x in validate_inputs(m, tol))
    return out


def _key_name(sc: ScenarioConfig, key) -> str:
    states = sc.environment.states
    if isinstance(key, tuple):
        return f"state {states[key[0]]!r} period {key[1]}"
    return f"state {states[key]!r}"


# -- file format -------------------------------------------------------------

_TOP_KEYS = {"types", "horizon", "population", "master_seed", "replications", "p0", "environment", "intensities"}
_REQUIRED_TOP = {"types", "horizon", "population", "master_seed", "p0", "environment", "intensities"}
_ENV_KEYS = {"states", "transition", "initial", "path_mode", "path"}
_INTENSITY_KEYS = {"mode", "tables"}
_TABLE_KEYS = {"state", "period", "eta", "theta", "xi", "sigma", "varsigma", "c", "cap"}


def _reject_unknown(section: str, data: Mapping, allowed: set) -> None:
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ParseError(f"unknown key(s) in {section}: {', '.join(unknown)}")


def _require(section: str, data: Mapping, keys) -> None:
    missing = sorted(set(keys) - set(data))
    if missing:
        raise ParseError(f"missing key(s) in {section}: {', '.join(missing)}")


def _array(section: str, value, ndim: int) -> np.ndarray:
    try:
        arr = np.array(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"{section}: not a numeric array ({exc})") from None
    if arr.ndim != ndim:
        raise ParseError(f"{section}: expected a {ndim}-dimensional array, got {arr.ndim}")
    return arr


def _int(section: str, value) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ParseError(f"{section} must be an integer, got {value!r}")
    return value


def scenario_from_dict(data: Mapping) -> ScenarioConfig:
    _reject_unknown("top level", data, _TOP_KEYS)
    _require("top level", data, _REQUIRED_TOP)
    K = _int("types", data["types"])
    if K < 1:
        raise ParseError("types must be >= 1")

    env = data["environment"]
    if not isinstance(env, Mapping):
        raise ParseError("environment must be a table")
    _reject_unknown("environment", env, _ENV_KEYS)
    _require("environment", env, {"states", "transition", "initial", "path_mode"})
    states = [str(s) for s in env["states"]]
    index = {s: i for i, s in enumerate(states)}

    def state_index(section, label):
        if label not in index:
            raise ParseError(f"{section}: unknown environment state {label!r}")
        return index[label]

    path = None
    if "path" in env:
        path = [state_index("environment.path", s) for s in env["path"]]
    environment = EnvironmentProcess(
        states=tuple(states),
        transition=_array("environment.transition", env["transition"], 2),
        initial=state_index("environment.initial", env["initial"]),
        path_mode=str(env["path_mode"]),
        path=path,
    )

    p0 = np.zeros(K * (K + 1))
    space = TypeSpace(K)
    for entry in data["p0"]:
        if not isinstance(entry, list) or len(entry) != 3:
            raise ParseError(f"p0 entries must be [k, l, mass] triples, got {entry!r}")
        k, l, mass = entry
        k = _int("p0 type", k)
        if not 1 <= k <= K:
            raise ParseError(f"p0 type {k} out of range 1..{K}")
        if l != J:
            l = _int("p0 partner type", l)
            if not 1 <= l <= K:
                raise ParseError(f"p0 partner type {l} out of range 1..{K}")
            l -= 1
        p0[space.index(k - 1, l)] += float(mass)

    ints = data["intensities"]
    if not isinstance(ints, Mapping):
        raise ParseError("intensities must be a table")
    _reject_unknown("intensities", ints, _INTENSITY_KEYS)
    _require("intensities", ints, _INTENSITY_KEYS)
    mode = str(ints["mode"])
    if mode not in INTENSITY_MODES:
        raise ParseError(f"intensities.mode must be one of {INTENSITY_MODES}, got {mode!r}")
    tables: dict = {}
    cs: dict = {}
    caps: dict = {}
    for i, t in enumerate(ints["tables"]):
        section = f"intensities.tables[{i}]"
        _reject_unknown(section, t, _TABLE_KEYS)
        required = {"state", "eta", "xi", "sigma", "varsigma"}
        required |= {"c", "cap"} if mode == "feedback" else {"theta"}
        if mode == "schedule":
            required.add("period")
        _require(section, t, required)
        if mode != "schedule" and "period" in t:
            raise ParseError(f"{section}: 'period' is only allowed in schedule mode")
        if mode == "feedback" and "theta" in t:
            raise ParseError(f"{section}: feedback mode derives theta from c and cap")
        if mode != "feedback" and ("c" in t or "cap" in t):
            raise ParseError(f"{section}: c and cap are only allowed in feedback mode")
        s = state_index(section, t["state"])
        key = (s, _int(f"{section}.period", t["period"])) if mode == "schedule" else s
        if key in tables:
            raise ParseError(f"{section}: duplicate table for {key!r}")
        theta = _array(f"{section}.theta", t["theta"], 2) if "theta" in t else np.zeros((K, K))
        tables[key] = InputMatrices(
            eta=_array(f"{section}.eta", t["eta"], 2),
            theta=theta,
            xi=_array(f"{section}.xi", t["xi"], 2),
            sigma=_array(f"{section}.sigma", t["sigma"], 4),
            varsigma=_array(f"{section}.varsigma", t["varsigma"], 3),
        )
        if mode == "feedback":
            cs[s] = _array(f"{section}.c", t["c"], 2)
            caps[s] = _array(f"{section}.cap", t["cap"], 2)

    return ScenarioConfig(
        type_space=space,
        horizon=_int("horizon", data["horizon"]),
        population=_int("population", data["population"]),
        master_seed=_int("master_seed", data["master_seed"]),
        p0=ExtendedTypeDistribution(K, p0),
        environment=environment,
        intensities=IntensitySpec(mode, tables, cs, caps),
        replications=_int("replications", data.get("replications", 1)),
    )


def scenario_to_dict(sc: ScenarioConfig) -> dict:
    K = sc.K
    states = list(sc.environment.states)
    p0 = []
    for idx, mass in enumerate(sc.p0.mass):
        if mass != 0.0:
            k, l = sc.type_space.label(idx)
            p0.append([k + 1, J if l == J else l + 1, float(mass)])
    env: dict = {
        "states": states,
        "transition": sc.environment.transition.tolist(),
        "initial": states[sc.environment.initial],
        "path_mode": sc.environment.path_mode,
    }
    if sc.environment.path is not None:
        env["path"] = [states[s] for s in sc.environment.path]
    spec = sc.intensities
    tables = []
    for key in sorted(spec.tables, key=lambda x: x if isinstance(x, tuple) else (x,)):
        m = spec.tables[key]
        state = key[0] if isinstance(key, tuple) else key
        t: dict = {"state": states[state]}
        if isinstance(key, tuple):
            t["period"] = key[1]
        t["eta"] = m.eta.tolist()
        if spec.mode != "feedback":
            t["theta"] = m.theta.tolist()
        t["xi"] = m.xi.tolist()
        t["sigma"] = m.sigma.tolist()
        t["varsigma"] = m.varsigma.tolist()
        if spec.mode == "feedback":
            t["c"] = np.asarray(spec.c[state]).tolist()
            t["cap"] = np.asarray(spec.cap[state]).tolist()
        tables.append(t)
    return {
        "types": K,
        "horizon": sc.horizon,
        "population": sc.population,
        "master_seed": sc.master_seed,
        "replications": sc.replications,
        "p0": p0,
        "environment": env,
        "intensities": {"mode": spec.mode, "tables": tables},
    }


def parse_scenario(text: str) -> ScenarioConfig:
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ParseError(f"malformed scenario file: {exc}") from None
    return scenario_from_dict(data)


def serialize_scenario(sc: ScenarioConfig) -> str:
    return tomli_w.dumps(scenario_to_dict(sc))


def load_scenario(path) -> ScenarioConfig:
    return parse_scenario(Path(path).read_text(encoding="utf-8"))


def save_scenario(sc: ScenarioConfig, path) -> None:
    Path(path).write_text(serialize_scenario(sc), encoding="utf-8", newline="\n")
