"""Scenario model: plant parameters, waypoint path, obstacle map, and the
knobs that drive strategy synthesis.  Scenarios are plain JSON files so they
can be authored by hand and diffed.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from typing import NamedTuple

import numpy as np

from .errors import FileFormatError, ScenarioError
from .et_filter import FilterParams
from .numerics import GaussianBelief, sym_eigen

__all__ = [
    "ControlSettings",
    "HyperRect",
    "ModeSwitchSettings",
    "PointClass",
    "Scenario",
    "TerminationParams",
    "builtin_scenario_names",
    "classify_point",
    "load_builtin_scenario",
    "load_scenario",
    "save_scenario",
    "scenario_to_dict",
    "serialize_scenario",
]


@dataclass
class HyperRect:
    """Axis-aligned box [lo, hi] (closed on both sides)."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        if self.lo.ndim != 1 or self.lo.shape != self.hi.shape:
            raise ScenarioError(
                f"box bounds must be equal-length vectors, got {self.lo.shape} and {self.hi.shape}"
            )
        if not (np.isfinite(self.lo).all() and np.isfinite(self.hi).all()):
            raise ScenarioError("box bounds contain non-finite entries")
        if not (self.lo < self.hi).all():
            raise ScenarioError(
                f"box lower bound must be strictly below the upper bound "
                f"(lo={self.lo.tolist()}, hi={self.hi.tolist()})"
            )

    @property
    def dim(self) -> int:
        return self.lo.shape[0]

    def contains(self, x: np.ndarray) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(((x >= self.lo) & (x <= self.hi)).all())

    def contains_batch(self, xs: np.ndarray) -> np.ndarray:
        """Membership test for an (B, n) array of points."""
        return ((xs >= self.lo) & (xs <= self.hi)).all(axis=1)

    def disjoint_from(self, other: "HyperRect") -> bool:
        """True when the closed boxes share no point."""
        return bool(((self.hi < other.lo) | (other.hi < self.lo)).any())


@dataclass
class TerminationParams:
    """Per-segment stop rule: close enough to the waypoint, or out of steps."""

    eps_x: float
    k_max: int

    def __post_init__(self):
        if not (np.isfinite(self.eps_x) and self.eps_x > 0.0):
            raise ScenarioError(f"termination eps_x must be positive, got {self.eps_x!r}")
        if not isinstance(self.k_max, (int, np.integer)) or self.k_max < 1:
            raise ScenarioError(f"termination k_max must be a positive integer, got {self.k_max!r}")
        self.k_max = int(self.k_max)


@dataclass
class ModeSwitchSettings:
    """Estimate-convergence mode: switch to full-rate filtering once the mean
    is within ``eps_kf`` of the next waypoint, and call the covariance settled
    when every entry is within ``eps_p`` of the full-rate fixed point."""

    eps_kf: float
    eps_p: float

    def __post_init__(self):
        for name, v in (("eps_kf", self.eps_kf), ("eps_p", self.eps_p)):
            if not (np.isfinite(v) and v > 0.0):
                raise ScenarioError(f"mode_switch {name} must be positive, got {v!r}")


@dataclass
class ControlSettings:
    """Waypoint-tracking control: saturation bound, optional explicit gain.

    When ``gain`` is None the stationary LQR gain with identity weights is
    used (computed in the plant module).
    """

    u_max: float
    gain: np.ndarray | None = None

    def __post_init__(self):
        if not (np.isfinite(self.u_max) and self.u_max > 0.0):
            raise ScenarioError(f"control u_max must be positive, got {self.u_max!r}")
        if self.gain is not None:
            self.gain = np.asarray(self.gain, dtype=float)
            if self.gain.ndim != 2 or not np.isfinite(self.gain).all():
                raise ScenarioError("control gain must be a finite matrix")


@dataclass
class Scenario:
    """A complete synthesis problem instance."""

    name: str
    params: FilterParams
    x0: GaussianBelief
    waypoints: np.ndarray  # (N + 1, n)
    obstacles: list[HyperRect]
    target: HyperRect
    deltas: list[float]
    comm_cost: float
    term: TerminationParams
    mode_switch: ModeSwitchSettings
    control: ControlSettings = field(default_factory=lambda: ControlSettings(u_max=0.5))

    def __post_init__(self):
        self.waypoints = np.asarray(self.waypoints, dtype=float)
        self.deltas = [float(d) for d in self.deltas]
        self.comm_cost = float(self.comm_cost)
        self.validate()

    @property
    def dim(self) -> int:
        return self.params.n

    @property
    def n_segments(self) -> int:
        """Number of waypoint-to-waypoint legs."""
        return self.waypoints.shape[0] - 1

    def validate(self) -> None:
        """Check internal consistency; raises ScenarioError naming the field."""
        n = self.params.n
        if self.waypoints.ndim != 2 or self.waypoints.shape[1] != n:
            raise ScenarioError(
                f"waypoints must be (k, {n}), got shape {self.waypoints.shape}"
            )
        if self.waypoints.shape[0] < 2:
            raise ScenarioError("waypoints must contain at least a start and a goal")
        if not np.isfinite(self.waypoints).all():
            raise ScenarioError("waypoints contain non-finite entries")
        if self.x0.dim != n:
            raise ScenarioError(f"initial belief dimension {self.x0.dim} != plant dimension {n}")
        for name, mat in (("Q", self.params.Q), ("R", self.params.R)):
            w = sym_eigen(mat).eigenvalues
            if w[-1] < -1e-12:
                raise ScenarioError(
                    f"{name} must be positive semidefinite in a scenario "
                    f"(min eigenvalue {w[-1]:.3e})"
                )
        w0 = sym_eigen(self.x0.cov).eigenvalues
        if w0[-1] < -1e-12:
            raise ScenarioError(
                f"initial covariance must be positive semidefinite (min eigenvalue {w0[-1]:.3e})"
            )
        if self.target.dim != n:
            raise ScenarioError(f"target box dimension {self.target.dim} != plant dimension {n}")
        for i, ob in enumerate(self.obstacles):
            if ob.dim != n:
                raise ScenarioError(f"obstacle {i} dimension {ob.dim} != plant dimension {n}")
            if not self.target.disjoint_from(ob):
                raise ScenarioError(f"target box overlaps obstacle {i}")
        for j, wp in enumerate(self.waypoints):
            for i, ob in enumerate(self.obstacles):
                if ob.contains(wp):
                    raise ScenarioError(f"waypoint {j} lies inside obstacle {i}")
        if not self.target.contains(self.waypoints[-1]):
            raise ScenarioError("final waypoint must lie inside the target box")
        if not self.deltas:
            raise ScenarioError("deltas must be a non-empty list")
        if any(not (np.isfinite(d) and d > 0.0) for d in self.deltas):
            raise ScenarioError(f"deltas must all be positive and finite, got {self.deltas}")
        if any(b <= a for a, b in zip(self.deltas, self.deltas[1:])):
            raise ScenarioError(f"deltas must be strictly increasing, got {self.deltas}")
        if not (np.isfinite(self.comm_cost) and self.comm_cost > 0.0):
            raise ScenarioError(f"comm_cost must be positive, got {self.comm_cost!r}")
        if self.control.gain is not None and self.control.gain.shape != (self.params.p, n):
            raise ScenarioError(
                f"control gain must be ({self.params.p}, {n}), got {self.control.gain.shape}"
            )


class PointClass(NamedTuple):
    """Where a state lives: 'collision' (with the obstacle index),
    'target', or 'free'.  Obstacles win over the target; among overlapping
    obstacles the lowest index wins."""

    kind: str
    obstacle: int | None


def classify_point(scenario: Scenario, x: np.ndarray) -> PointClass:
    for i, ob in enumerate(scenario.obstacles):
        if ob.contains(x):
            return PointClass("collision", i)
    if scenario.target.contains(x):
        return PointClass("target", None)
    return PointClass("free", None)


# ---------------------------------------------------------------------------
# JSON serialization


def _box_to_json(box: HyperRect) -> dict:
    return {"lo": box.lo.tolist(), "hi": box.hi.tolist()}


def scenario_to_dict(scenario: Scenario) -> dict:
    """Plain-JSON-types view of a scenario (also used for config hashing)."""
    return {
        "name": scenario.name,
        "dynamics": {
            "F": scenario.params.F.tolist(),
            "G": scenario.params.G.tolist(),
            "H": scenario.params.H.tolist(),
            "Q": scenario.params.Q.tolist(),
            "R": scenario.params.R.tolist(),
        },
        "initial": {
            "mean": scenario.x0.mean.tolist(),
            "cov": scenario.x0.cov.tolist(),
        },
        "waypoints": scenario.waypoints.tolist(),
        "obstacles": [_box_to_json(ob) for ob in scenario.obstacles],
        "target": _box_to_json(scenario.target),
        "deltas": scenario.deltas,
        "comm_cost": scenario.comm_cost,
        "termination": {"eps_x": scenario.term.eps_x, "k_max": scenario.term.k_max},
        "mode_switch": {
            "eps_kf": scenario.mode_switch.eps_kf,
            "eps_p": scenario.mode_switch.eps_p,
        },
        "control": {
            "u_max": scenario.control.u_max,
            "gain": None if scenario.control.gain is None else scenario.control.gain.tolist(),
        },
    }


def serialize_scenario(scenario: Scenario) -> str:
    """Canonical JSON text for a scenario (stable key order, exact floats)."""
    return json.dumps(scenario_to_dict(scenario), indent=2, sort_keys=True) + "\n"


def save_scenario(scenario: Scenario, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_scenario(scenario))


def _require(doc: dict, key: str, where: str):
    if key not in doc:
        raise ScenarioError(f"scenario {where} is missing required key {key!r}")
    return doc[key]


def scenario_from_dict(doc: dict, where: str = "document") -> Scenario:
    dyn = _require(doc, "dynamics", where)
    for key in ("F", "G", "H", "Q", "R"):
        _require(dyn, key, f"{where}.dynamics")
    try:
        params = FilterParams(F=dyn["F"], G=dyn["G"], H=dyn["H"], Q=dyn["Q"], R=dyn["R"])
    except Exception as exc:
        raise ScenarioError(f"scenario {where}.dynamics is invalid: {exc}") from exc
    init = _require(doc, "initial", where)
    x0 = GaussianBelief(_require(init, "mean", f"{where}.initial"), _require(init, "cov", f"{where}.initial"))
    term_doc = _require(doc, "termination", where)
    mode_doc = _require(doc, "mode_switch", where)
    ctrl_doc = doc.get("control", {"u_max": 0.5, "gain": None})
    return Scenario(
        name=str(_require(doc, "name", where)),
        params=params,
        x0=x0,
        waypoints=_require(doc, "waypoints", where),
        obstacles=[
            HyperRect(_require(ob, "lo", f"{where}.obstacles[{i}]"), _require(ob, "hi", f"{where}.obstacles[{i}]"))
            for i, ob in enumerate(doc.get("obstacles", []))
        ],
        target=HyperRect(
            _require(_require(doc, "target", where), "lo", f"{where}.target"),
            _require(doc["target"], "hi", f"{where}.target"),
        ),
        deltas=_require(doc, "deltas", where),
        comm_cost=_require(doc, "comm_cost", where),
        term=TerminationParams(
            eps_x=_require(term_doc, "eps_x", f"{where}.termination"),
            k_max=_require(term_doc, "k_max", f"{where}.termination"),
        ),
        mode_switch=ModeSwitchSettings(
            eps_kf=_require(mode_doc, "eps_kf", f"{where}.mode_switch"),
            eps_p=_require(mode_doc, "eps_p", f"{where}.mode_switch"),
        ),
        control=ControlSettings(
            u_max=ctrl_doc.get("u_max", 0.5), gain=ctrl_doc.get("gain")
        ),
    )


def load_scenario(path) -> Scenario:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise FileFormatError(f"cannot read scenario file {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"scenario file {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise FileFormatError(f"scenario file {path} must hold a JSON object")
    return scenario_from_dict(doc, where=str(path))


def builtin_scenario_names() -> list[str]:
    """Names of the scenario files bundled with the package."""
    pkg = resources.files("etplan.data")
    return sorted(p.name[: -len(".json")] for p in pkg.iterdir() if p.name.endswith(".json"))


def load_builtin_scenario(name: str) -> Scenario:
    pkg = resources.files("etplan.data")
    candidate = pkg / f"{name}.json"
    if not candidate.is_file():
        raise ScenarioError(
            f"unknown built-in scenario {name!r}; available: {builtin_scenario_names()}"
        )
    doc = json.loads(candidate.read_text(encoding="utf-8"))
    return scenario_from_dict(doc, where=f"builtin:{name}")
