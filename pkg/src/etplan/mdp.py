"""Finite multi-objective MDP produced by belief-space abstraction.

States are either belief states tagged with a waypoint index (plus, for the
covariance-discretized method, per-axis region indices) or one of three
absorbing terminals: collision, target, free (finished outside the target).
Actions are the trigger thresholds.  Each (state, action) pair carries a
transition distribution and a mean communication cost.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import FileFormatError, InputError, InternalError

__all__ = [
    "KIND_BELIEF",
    "KIND_COLL",
    "KIND_FREE",
    "KIND_TAR",
    "AbstractState",
    "MOMDP",
    "mdp_from_dict",
    "mdp_to_dict",
    "read_mdp",
    "write_mdp",
]

KIND_BELIEF = "belief"
KIND_COLL = "coll"
KIND_TAR = "tar"
KIND_FREE = "free"
_TERMINAL_KINDS = (KIND_COLL, KIND_TAR, KIND_FREE)


@dataclass(frozen=True)
class AbstractState:
    """One MDP state.

    ``waypoint`` is the decision waypoint for belief states (-1 for
    terminals); ``regions`` holds one (theta_bin, lambda_bin) pair per state
    axis for the covariance-discretized method and is empty for the
    estimate-convergence method and for terminals.
    """

    kind: str
    waypoint: int = -1
    regions: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        if self.kind not in (KIND_BELIEF,) + _TERMINAL_KINDS:
            raise InputError(f"unknown state kind {self.kind!r}")
        if self.kind == KIND_BELIEF and self.waypoint < 0:
            raise InputError("belief states need a waypoint index >= 0")

    @property
    def terminal(self) -> bool:
        return self.kind != KIND_BELIEF

    def label(self) -> str:
        if self.terminal:
            return self.kind
        if not self.regions:
            return f"wp{self.waypoint}"
        reg = ",".join(f"{t}.{l}" for t, l in self.regions)
        return f"wp{self.waypoint}[{reg}]"


COLL_STATE = AbstractState(KIND_COLL)
TAR_STATE = AbstractState(KIND_TAR)
FREE_STATE = AbstractState(KIND_FREE)


@dataclass
class MOMDP:
    """Finite MDP with reach/collision terminals and communication costs.

    ``transitions[s][a]`` maps destination state id -> probability for
    non-terminal ``s`` (rows are None for terminals).  ``costs`` is the mean
    per-segment communication cost; ``costs_product`` is the factored
    diagnostic (mean steps x expected trigger rate x unit cost);
    ``mean_steps`` is the mean segment length.
    """

    states: list[AbstractState]
    actions: list[float]
    initial: int
    transitions: list[list[dict[int, float] | None]]
    costs: list[list[float]]
    costs_product: list[list[float]]
    mean_steps: list[list[float]]
    method: int
    meta: dict = field(default_factory=dict)

    @property
    def n_states(self) -> int:
        return len(self.states)

    @property
    def n_actions(self) -> int:
        return len(self.actions)

    def state_id(self, state: AbstractState) -> int:
        try:
            return self._index[state]
        except AttributeError:
            object.__setattr__(self, "_index", {s: i for i, s in enumerate(self.states)})
            return self._index[state]

    @property
    def coll_id(self) -> int:
        return self.state_id(COLL_STATE)

    @property
    def tar_id(self) -> int:
        return self.state_id(TAR_STATE)

    @property
    def free_id(self) -> int:
        return self.state_id(FREE_STATE)

    def terminal_mask(self) -> np.ndarray:
        return np.array([s.terminal for s in self.states], dtype=bool)

    def validate(self) -> None:
        """Internal consistency: rows sum to one, ids in range, costs finite."""
        if not 0 <= self.initial < self.n_states:
            raise InternalError(f"initial state id {self.initial} out of range")
        if self.states[self.initial].terminal:
            raise InternalError("initial state must not be terminal")
        seen = set(self.states)
        if len(seen) != self.n_states:
            raise InternalError("duplicate states in the MDP")
        for tname in _TERMINAL_KINDS:
            if AbstractState(tname) not in seen:
                raise InternalError(f"missing terminal state {tname!r}")
        for sid, state in enumerate(self.states):
            rows = self.transitions[sid]
            if state.terminal:
                if any(r is not None for r in rows):
                    raise InternalError(f"terminal state {sid} must not have transitions")
                continue
            if len(rows) != self.n_actions:
                raise InternalError(f"state {sid} has {len(rows)} action rows")
            for ai, row in enumerate(rows):
                if row is None:
                    raise InternalError(f"missing transition row for state {sid} action {ai}")
                total = sum(row.values())
                if abs(total - 1.0) > 1e-9:
                    raise InternalError(
                        f"transition row ({sid}, {ai}) sums to {total}, expected 1"
                    )
                for dest, prob in row.items():
                    if not 0 <= dest < self.n_states:
                        raise InternalError(f"destination id {dest} out of range")
                    if not (0.0 <= prob <= 1.0 + 1e-12):
                        raise InternalError(f"probability {prob} out of [0, 1]")
                cost = self.costs[sid][ai]
                if not (np.isfinite(cost) and cost >= 0.0):
                    raise InternalError(f"cost ({sid}, {ai}) = {cost} is invalid")


# ---------------------------------------------------------------------------
# serialization


def _state_to_json(state: AbstractState) -> dict:
    return {
        "kind": state.kind,
        "waypoint": state.waypoint,
        "regions": [list(r) for r in state.regions],
    }


def _state_from_json(doc: dict) -> AbstractState:
    return AbstractState(
        kind=doc["kind"],
        waypoint=int(doc["waypoint"]),
        regions=tuple((int(t), int(l)) for t, l in doc.get("regions", [])),
    )


def mdp_to_dict(mdp: MOMDP) -> dict:
    return {
        "states": [_state_to_json(s) for s in mdp.states],
        "actions": mdp.actions,
        "initial": mdp.initial,
        "transitions": [
            None if rows is None or all(r is None for r in rows)
            else [{str(d): p for d, p in sorted(row.items())} for row in rows]
            for rows in mdp.transitions
        ],
        "costs": mdp.costs,
        "costs_product": mdp.costs_product,
        "mean_steps": mdp.mean_steps,
        "method": mdp.method,
        "meta": mdp.meta,
    }


def mdp_from_dict(doc: dict) -> MOMDP:
    try:
        states = [_state_from_json(s) for s in doc["states"]]
        transitions = []
        for rows in doc["transitions"]:
            if rows is None:
                transitions.append([None] * len(doc["actions"]))
            else:
                transitions.append([{int(d): float(p) for d, p in row.items()} for row in rows])
        return MOMDP(
            states=states,
            actions=[float(a) for a in doc["actions"]],
            initial=int(doc["initial"]),
            transitions=transitions,
            costs=[[float(c) for c in row] for row in doc["costs"]],
            costs_product=[[float(c) for c in row] for row in doc["costs_product"]],
            mean_steps=[[float(c) for c in row] for row in doc["mean_steps"]],
            method=int(doc["method"]),
            meta=doc.get("meta", {}),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FileFormatError(f"malformed MDP document: {exc}") from exc


def write_mdp(mdp: MOMDP, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(mdp_to_dict(mdp), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_mdp(path) -> MOMDP:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise FileFormatError(f"cannot read MDP file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"MDP file {path} is not valid JSON: {exc}") from exc
    return mdp_from_dict(doc)
