"""Multi-objective strategy synthesis on the abstract MDP.

The objectives are reach-the-target probability (maximize), collision
probability (minimize), and expected communication cost (minimize).  The
Pareto front is traced by sweeping a barycentric grid of scalarization
weights; each weight vector yields a memoryless deterministic strategy via
value iteration, and the surviving nondominated value vectors form the
front's vertices.  Queries between vertices are answered with initial-state
mixtures of two vertex strategies, which is sound because all three
objectives are linear in the strategy mixture.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, FileFormatError, InfeasibleQueryError, InputError
from .mdp import MOMDP

__all__ = [
    "FrontVertex",
    "MaxPtar",
    "MinCollGivenEnergy",
    "MinEnergyGivenPtar",
    "ObjectivePoint",
    "ParetoFront",
    "Strategy",
    "evaluate_strategy",
    "front_from_json",
    "front_to_csv",
    "front_to_json",
    "pareto_front",
    "scalarized_value_iteration",
    "select_point",
    "uniform_strategy",
]

_SWEEP_TOL = 1e-14


@dataclass(frozen=True)
class ObjectivePoint:
    """Value vector of a strategy from the initial state."""

    p_tar: float
    p_coll: float
    e_c: float

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.p_tar, self.p_coll, self.e_c)

    def dominates(self, other: "ObjectivePoint", tol: float = 0.0) -> bool:
        """Weakly better on every objective and strictly better on one."""
        ge = (
            self.p_tar >= other.p_tar - tol
            and self.p_coll <= other.p_coll + tol
            and self.e_c <= other.e_c + tol
        )
        gt = (
            self.p_tar > other.p_tar + tol
            or self.p_coll < other.p_coll - tol
            or self.e_c < other.e_c - tol
        )
        return ge and gt


@dataclass
class Strategy:
    """Memoryless strategy: per-state action distribution, or an
    initial-state mixture of two strategies (pick a with probability
    ``weight`` once, at the start, then follow it forever)."""

    choices: dict[int, dict[int, float]] | None = None
    mixture: tuple["Strategy", "Strategy", float] | None = None

    def __post_init__(self):
        if (self.choices is None) == (self.mixture is None):
            raise InputError("strategy needs exactly one of choices or mixture")
        if self.mixture is not None:
            _, _, w = self.mixture
            if not 0.0 <= w <= 1.0:
                raise InputError(f"mixture weight must lie in [0, 1], got {w}")

    def action_distribution(self, sid: int) -> dict[int, float]:
        if self.choices is None:
            raise InputError("mixture strategies have no single action distribution")
        if sid not in self.choices:
            raise InputError(f"strategy has no choice for state {sid}")
        return self.choices[sid]


def uniform_strategy(mdp: MOMDP, action_index: int) -> Strategy:
    """The strategy that plays one fixed threshold everywhere."""
    if not 0 <= action_index < mdp.n_actions:
        raise InputError(f"action index {action_index} out of range")
    return Strategy(
        choices={
            sid: {action_index: 1.0}
            for sid, s in enumerate(mdp.states)
            if not s.terminal
        }
    )


# ---------------------------------------------------------------------------
# dense representation


@dataclass
class _Dense:
    t: np.ndarray  # (S, A, S) transition probabilities, zero rows for terminals
    c: np.ndarray  # (S, A) communication costs
    nonterminal: np.ndarray
    tar: int
    coll: int
    sweeps: int  # safe sweep budget


def _densify(mdp: MOMDP) -> _Dense:
    s_n, a_n = mdp.n_states, mdp.n_actions
    t = np.zeros((s_n, a_n, s_n))
    c = np.zeros((s_n, a_n))
    for sid, state in enumerate(mdp.states):
        if state.terminal:
            continue
        for ai in range(a_n):
            for dest, prob in mdp.transitions[sid][ai].items():
                t[sid, ai, dest] = prob
            c[sid, ai] = mdp.costs[sid][ai]
    return _Dense(
        t=t,
        c=c,
        nonterminal=~mdp.terminal_mask(),
        tar=mdp.tar_id,
        coll=mdp.coll_id,
        sweeps=60 * s_n + 60,
    )


def _reachable(mdp: MOMDP, strategy: Strategy) -> np.ndarray:
    """States reachable from the initial state under the strategy support."""
    seen = np.zeros(mdp.n_states, dtype=bool)
    stack = [mdp.initial]
    seen[mdp.initial] = True
    while stack:
        sid = stack.pop()
        if mdp.states[sid].terminal:
            continue
        dist = strategy.action_distribution(sid)
        for ai, prob in dist.items():
            if prob <= 0.0:
                continue
            if not 0 <= ai < mdp.n_actions:
                raise InputError(f"strategy uses unknown action index {ai}")
            for dest, p in mdp.transitions[sid][ai].items():
                if p > 0.0 and not seen[dest]:
                    seen[dest] = True
                    stack.append(dest)
    return seen


# ---------------------------------------------------------------------------
# evaluation


def evaluate_strategy(mdp: MOMDP, strategy: Strategy) -> ObjectivePoint:
    """Exact objective vector of a strategy from the initial state.

    Mixtures evaluate each component and combine linearly.  Raises
    :class:`InputError` if the strategy leaves a reachable state undefined.
    """
    if strategy.mixture is not None:
        a, b, w = strategy.mixture
        pa = evaluate_strategy(mdp, a)
        pb = evaluate_strategy(mdp, b)
        return ObjectivePoint(
            p_tar=w * pa.p_tar + (1.0 - w) * pb.p_tar,
            p_coll=w * pa.p_coll + (1.0 - w) * pb.p_coll,
            e_c=w * pa.e_c + (1.0 - w) * pb.e_c,
        )

    reach = _reachable(mdp, strategy)  # also validates coverage
    dense = _densify(mdp)
    s_n = mdp.n_states
    # strategy-induced transition matrix and cost vector
    p_pi = np.zeros((s_n, s_n))
    c_pi = np.zeros(s_n)
    for sid in np.flatnonzero(reach & dense.nonterminal):
        for ai, prob in strategy.action_distribution(int(sid)).items():
            if prob <= 0.0:
                continue
            p_pi[sid] += prob * dense.t[sid, ai]
            c_pi[sid] += prob * dense.c[sid, ai]

    def solve(terminal_value: np.ndarray, cost: np.ndarray) -> float:
        v = terminal_value.copy()
        for _ in range(dense.sweeps):
            nv = cost + p_pi @ v
            nv[~dense.nonterminal] = terminal_value[~dense.nonterminal]
            if np.abs(nv - v).max() <= _SWEEP_TOL:
                return float(nv[mdp.initial])
            v = nv
        raise ConvergenceError("strategy evaluation did not converge (cycle?)")

    tar_ind = np.zeros(s_n)
    tar_ind[dense.tar] = 1.0
    coll_ind = np.zeros(s_n)
    coll_ind[dense.coll] = 1.0
    zero = np.zeros(s_n)
    # sweeps over row-stochastic matrices can drift a hair outside [0, 1]
    return ObjectivePoint(
        p_tar=min(1.0, max(0.0, solve(tar_ind, zero))),
        p_coll=min(1.0, max(0.0, solve(coll_ind, zero))),
        e_c=solve(zero, c_pi),
    )


# ---------------------------------------------------------------------------
# scalarized value iteration


def _weights_ok(weights) -> tuple[float, float, float]:
    w = tuple(float(x) for x in weights)
    if len(w) != 3:
        raise InputError(f"need exactly three weights, got {len(w)}")
    if any(not np.isfinite(x) or x < 0.0 for x in w):
        raise InputError(f"weights must be finite and nonnegative, got {w}")
    if sum(w) <= 0.0:
        raise InputError("at least one weight must be positive")
    return w


def scalarized_value_iteration(
    mdp: MOMDP, weights, dense: _Dense | None = None
) -> tuple[Strategy, ObjectivePoint]:
    """Best deterministic strategy for w1*p_tar - w2*p_coll - w3*e_c.

    Ties between actions break toward the smallest action index (the most
    communicative threshold), which keeps the output deterministic.
    """
    w1, w2, w3 = _weights_ok(weights)
    if dense is None:
        dense = _densify(mdp)
    s_n = mdp.n_states

    term_value = np.zeros(s_n)
    term_value[dense.tar] = w1
    term_value[dense.coll] = -w2

    t_flat = dense.t.reshape(-1, s_n)
    v = term_value.copy()
    best = np.zeros(s_n, dtype=np.int64)
    for _ in range(dense.sweeps):
        q = -w3 * dense.c + (t_flat @ v).reshape(s_n, -1)
        best = np.argmax(q, axis=1)  # first maximizer wins ties
        nv = np.where(dense.nonterminal, np.take_along_axis(q, best[:, None], axis=1)[:, 0], term_value)
        if np.abs(nv - v).max() <= _SWEEP_TOL:
            v = nv
            break
        v = nv
    else:
        raise ConvergenceError("scalarized value iteration did not converge")

    strategy = Strategy(
        choices={
            int(sid): {int(best[sid]): 1.0}
            for sid in np.flatnonzero(dense.nonterminal)
        }
    )
    return strategy, evaluate_strategy(mdp, strategy)


# ---------------------------------------------------------------------------
# front construction


@dataclass
class FrontVertex:
    """One nondominated strategy with the weight vector that found it."""

    point: ObjectivePoint
    strategy: Strategy
    weights: tuple[float, float, float]


@dataclass
class ParetoFront:
    vertices: list[FrontVertex]
    grid_resolution: int
    meta: dict = field(default_factory=dict)

    @property
    def points(self) -> list[ObjectivePoint]:
        return [v.point for v in self.vertices]


def pareto_front(mdp: MOMDP, grid_resolution: int = 40) -> ParetoFront:
    """Sweep a barycentric weight grid and keep the nondominated outcomes.

    grid_resolution g yields (g+1)(g+2)/2 weight vectors (i, j, g-i-j)/g.
    Strategies that repeat across weights are evaluated once; exact
    duplicate objective points are merged; dominated points are dropped.
    The vertices come back sorted by decreasing p_tar (then increasing e_c).
    """
    if grid_resolution < 1:
        raise InputError(f"grid_resolution must be >= 1, got {grid_resolution}")
    dense = _densify(mdp)
    g = grid_resolution

    candidates: list[FrontVertex] = []
    seen_signatures: dict[tuple, int] = {}
    for i in range(g, -1, -1):
        for j in range(g - i, -1, -1):
            w = (i / g, j / g, (g - i - j) / g)
            strategy, point = scalarized_value_iteration(mdp, w, dense=dense)
            sig = tuple(sorted((s, max(d, key=d.get)) for s, d in strategy.choices.items()))
            if sig in seen_signatures:
                continue
            seen_signatures[sig] = len(candidates)
            candidates.append(FrontVertex(point=point, strategy=strategy, weights=w))

    # drop exact duplicate points, then dominated ones
    unique: dict[tuple, FrontVertex] = {}
    for cand in candidates:
        unique.setdefault(cand.point.as_tuple(), cand)
    kept = [
        v
        for v in unique.values()
        if not any(
            o.point.dominates(v.point) for o in unique.values() if o is not v
        )
    ]
    kept.sort(key=lambda v: (-v.point.p_tar, v.point.e_c, v.point.p_coll))
    return ParetoFront(
        vertices=kept,
        grid_resolution=g,
        meta={"weight_vectors": (g + 1) * (g + 2) // 2, "unique_strategies": len(candidates)},
    )


# ---------------------------------------------------------------------------
# front queries


@dataclass(frozen=True)
class MaxPtar:
    """Highest reach probability, energy and collisions be damned."""


@dataclass(frozen=True)
class MinEnergyGivenPtar:
    """Cheapest communication subject to p_tar >= min_p_tar."""

    min_p_tar: float


@dataclass(frozen=True)
class MinCollGivenEnergy:
    """Safest strategy subject to e_c <= max_e_c."""

    max_e_c: float


def _mix(a: FrontVertex, b: FrontVertex, alpha: float) -> tuple[Strategy, ObjectivePoint]:
    """Initial-state mixture: play a's strategy with probability alpha."""
    if alpha >= 1.0:
        return a.strategy, a.point
    if alpha <= 0.0:
        return b.strategy, b.point
    point = ObjectivePoint(
        p_tar=alpha * a.point.p_tar + (1 - alpha) * b.point.p_tar,
        p_coll=alpha * a.point.p_coll + (1 - alpha) * b.point.p_coll,
        e_c=alpha * a.point.e_c + (1 - alpha) * b.point.e_c,
    )
    return Strategy(mixture=(a.strategy, b.strategy, alpha)), point


def select_point(front: ParetoFront, query) -> tuple[Strategy, ObjectivePoint]:
    """Answer a front query with a vertex strategy or a two-vertex mixture."""
    if not front.vertices:
        raise InfeasibleQueryError("the Pareto front is empty")
    verts = front.vertices

    if isinstance(query, MaxPtar):
        best = min(verts, key=lambda v: (-v.point.p_tar, v.point.e_c, v.point.p_coll))
        return best.strategy, best.point

    if isinstance(query, MinEnergyGivenPtar):
        need = float(query.min_p_tar)
        best: tuple[float, float] | None = None
        best_out: tuple[Strategy, ObjectivePoint] | None = None
        for v in verts:
            if v.point.p_tar >= need - 1e-12:
                key = (v.point.e_c, v.point.p_coll)
                if best is None or key < best:
                    best, best_out = key, (v.strategy, v.point)
        for i, lo in enumerate(verts):
            for hi in verts[i + 1 :]:
                a, b = (lo, hi) if lo.point.p_tar >= hi.point.p_tar else (hi, lo)
                if not (b.point.p_tar < need <= a.point.p_tar):
                    continue
                alpha = (need - b.point.p_tar) / (a.point.p_tar - b.point.p_tar)
                strategy, point = _mix(a, b, alpha)
                key = (point.e_c, point.p_coll)
                if best is None or key < best:
                    best, best_out = key, (strategy, point)
        if best_out is None:
            achievable = max(v.point.p_tar for v in verts)
            raise InfeasibleQueryError(
                f"no strategy reaches p_tar >= {need:.6f}; best achievable is {achievable:.6f}",
                achievable=achievable,
            )
        return best_out

    if isinstance(query, MinCollGivenEnergy):
        budget = float(query.max_e_c)
        best = None
        best_out = None
        for v in verts:
            if v.point.e_c <= budget + 1e-12:
                key = (v.point.p_coll, -v.point.p_tar)
                if best is None or key < best:
                    best, best_out = key, (v.strategy, v.point)
        for i, lo in enumerate(verts):
            for hi in verts[i + 1 :]:
                a, b = (lo, hi) if lo.point.e_c <= hi.point.e_c else (hi, lo)
                if not (a.point.e_c <= budget < b.point.e_c):
                    continue
                alpha = (b.point.e_c - budget) / (b.point.e_c - a.point.e_c)
                strategy, point = _mix(a, b, alpha)
                key = (point.p_coll, -point.p_tar)
                if best is None or key < best:
                    best, best_out = key, (strategy, point)
        if best_out is None:
            achievable = min(v.point.e_c for v in verts)
            raise InfeasibleQueryError(
                f"no strategy stays within e_c <= {budget:.6f}; cheapest is {achievable:.6f}",
                achievable=achievable,
            )
        return best_out

    raise InputError(f"unknown query type {type(query).__name__}")


# ---------------------------------------------------------------------------
# serialization


def strategy_to_dict(strategy: Strategy) -> dict:
    if strategy.mixture is not None:
        a, b, w = strategy.mixture
        return {
            "mixture": {
                "first": strategy_to_dict(a),
                "second": strategy_to_dict(b),
                "weight": w,
            }
        }
    return {
        "choices": {
            str(sid): {str(ai): p for ai, p in sorted(dist.items())}
            for sid, dist in sorted(strategy.choices.items())
        }
    }


def strategy_from_dict(doc: dict) -> Strategy:
    try:
        if "mixture" in doc:
            m = doc["mixture"]
            return Strategy(
                mixture=(
                    strategy_from_dict(m["first"]),
                    strategy_from_dict(m["second"]),
                    float(m["weight"]),
                )
            )
        return Strategy(
            choices={
                int(sid): {int(ai): float(p) for ai, p in dist.items()}
                for sid, dist in doc["choices"].items()
            }
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FileFormatError(f"malformed strategy document: {exc}") from exc


def front_to_json(front: ParetoFront) -> dict:
    return {
        "grid_resolution": front.grid_resolution,
        "meta": front.meta,
        "vertices": [
            {
                "p_tar": v.point.p_tar,
                "p_coll": v.point.p_coll,
                "e_c": v.point.e_c,
                "weights": list(v.weights),
                "strategy": strategy_to_dict(v.strategy),
            }
            for v in front.vertices
        ],
    }


def front_from_json(doc: dict) -> ParetoFront:
    try:
        return ParetoFront(
            vertices=[
                FrontVertex(
                    point=ObjectivePoint(
                        p_tar=float(v["p_tar"]),
                        p_coll=float(v["p_coll"]),
                        e_c=float(v["e_c"]),
                    ),
                    strategy=strategy_from_dict(v["strategy"]),
                    weights=tuple(v["weights"]),
                )
                for v in doc["vertices"]
            ],
            grid_resolution=int(doc["grid_resolution"]),
            meta=doc.get("meta", {}),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FileFormatError(f"malformed front document: {exc}") from exc


def front_to_csv(front: ParetoFront, path) -> None:
    """Plot-ready table: one nondominated vertex per row."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "p_tar", "p_coll", "e_c", "w1", "w2", "w3"])
        for i, v in enumerate(front.vertices):
            writer.writerow(
                [i, repr(v.point.p_tar), repr(v.point.p_coll), repr(v.point.e_c)]
                + [repr(w) for w in v.weights]
            )
