"""Closed-loop Monte-Carlo validation of synthesized strategies.

Each run draws its own initial true state, classifies the filter covariance
at every waypoint, picks a trigger threshold from the strategy, and rolls
the continuous system through the segment.  Empirical outcome frequencies
and communication energy are then compared against the MDP's predictions.

Every run owns an RNG substream keyed by its index and consumes fixed-size
noise blocks per segment, so a run's trajectory is identical no matter how
runs are grouped into batches.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .abstraction import AxisRegionTable, classify_covariance_batch
from .errors import InputError
from .mdp import KIND_BELIEF, MOMDP, AbstractState
from .mo_solver import ObjectivePoint, Strategy
from .numerics import RngStream, covariance_sqrt
from .plant import OUTCOME_COLLISION, run_segment_batch, steady_state_kf_covariance
from .scenario import Scenario, classify_point

__all__ = [
    "ComparisonReport",
    "EmpiricalObjectives",
    "OUTCOME_NAMES",
    "SimulationResult",
    "TraceRow",
    "compare_theory_empirical",
    "full_kf_baseline",
    "simulate_strategy",
    "trace_to_csv",
]

RUN_TAR, RUN_COLL, RUN_FREE = 1, 2, 3
OUTCOME_NAMES = {RUN_TAR: "tar", RUN_COLL: "coll", RUN_FREE: "free"}

_MAX_MIXTURE_DEPTH = 8


@dataclass(frozen=True)
class EmpiricalObjectives:
    """Outcome frequencies and mean communication energy over a batch."""

    p_tar: float
    p_coll: float
    p_free: float
    e_c_mean: float
    e_c_stderr: float
    runs: int

    def __post_init__(self):
        if self.runs < 1:
            raise InputError(f"need at least one run, got {self.runs}")
        total = self.p_tar + self.p_coll + self.p_free
        if abs(total - 1.0) > 1e-12:
            raise InputError(f"outcome frequencies sum to {total!r}, not 1")


@dataclass
class TraceRow:
    """One simulated step of one retained run."""

    run: int
    segment: int
    step: int  # global time index across segments
    delta: float
    triggered: bool
    kf_mode: bool
    x_true: np.ndarray
    x_hat: np.ndarray
    outcome: str  # terminal outcome of the whole run


@dataclass
class SimulationResult:
    objectives: EmpiricalObjectives
    outcomes: np.ndarray  # (runs,) RUN_* codes
    energies: np.ndarray  # (runs,) triggers * comm_cost
    steps: np.ndarray  # (runs,) total steps
    traces: list[TraceRow]
    diag: dict = field(default_factory=dict)


def _objectives(outcomes: np.ndarray, energies: np.ndarray) -> EmpiricalObjectives:
    runs = len(outcomes)
    stderr = float(energies.std(ddof=1) / math.sqrt(runs)) if runs > 1 else 0.0
    return EmpiricalObjectives(
        p_tar=float((outcomes == RUN_TAR).mean()),
        p_coll=float((outcomes == RUN_COLL).mean()),
        p_free=float((outcomes == RUN_FREE).mean()),
        e_c_mean=float(energies.mean()),
        e_c_stderr=stderr,
        runs=runs,
    )


def _resolve_mixture(strategy: Strategy, uniforms: np.ndarray) -> Strategy:
    """Collapse a mixture tree to a pure strategy with one draw per level."""
    node, depth = strategy, 0
    while node.mixture is not None:
        if depth >= _MAX_MIXTURE_DEPTH:
            raise InputError("mixture strategies nested deeper than 8 levels")
        first, second, weight = node.mixture
        node = first if uniforms[depth] < weight else second
        depth += 1
    return node


class _StrategyPolicy:
    """Maps (segment, live covariances) to per-run trigger thresholds."""

    def __init__(
        self,
        scenario: Scenario,
        mdp: MOMDP,
        strategy: Strategy,
        tables: list[list[AxisRegionTable]] | None,
        runs: int,
        rng: RngStream,
        diag: dict,
    ):
        if mdp.method == 2 and tables is None:
            raise InputError("a region-based abstraction needs its axis tables")
        self.scenario = scenario
        self.mdp = mdp
        self.tables = tables
        self.diag = diag
        mix_u = rng.substream("mix").uniform((runs, _MAX_MIXTURE_DEPTH))
        self.resolved = [_resolve_mixture(strategy, mix_u[r]) for r in range(runs)]
        self.act_u = rng.substream("act").uniform((runs, scenario.n_segments))

    def __call__(self, segment: int, live: np.ndarray, covs: np.ndarray) -> np.ndarray:
        if self.mdp.method == 2:
            regions = classify_covariance_batch(
                covs, self.tables[segment], self.diag["clamps"]
            )
            states = [AbstractState(KIND_BELIEF, segment, reg) for reg in regions]
        else:
            states = [AbstractState(KIND_BELIEF, segment)] * len(live)

        deltas = np.empty(len(live))
        for i, (run, state) in enumerate(zip(live, states)):
            try:
                sid = self.mdp.state_id(state)
                dist = self.resolved[run].choices[sid]
            except KeyError:
                self.diag["fallbacks"] += 1
                deltas[i] = self.mdp.actions[0]
                continue
            if len(dist) == 1:
                ai = next(iter(dist))
            else:  # randomized choice: invert the cdf with this run's draw
                u = self.act_u[run, segment]
                acc, ai = 0.0, max(dist)
                for cand, p in sorted(dist.items()):
                    acc += p
                    if u < acc:
                        ai = cand
                        break
            deltas[i] = self.mdp.actions[ai]
        return deltas


def _closed_loop(
    scenario: Scenario,
    runs: int,
    rng: RngStream,
    delta_of,
    mode_switch: bool,
    force_trigger: bool,
    trace_cap: int,
    diag: dict,
) -> SimulationResult:
    if runs < 1:
        raise InputError(f"need at least one run, got {runs}")
    params = scenario.params
    n, m = params.n, params.m
    n_seg = scenario.n_segments
    k_max = scenario.term.k_max
    p_kf = steady_state_kf_covariance(params) if mode_switch else None

    streams = [rng.substream(f"run/{r}") for r in range(runs)]
    root_p0 = covariance_sqrt(scenario.x0.cov)
    means = np.tile(scenario.x0.mean, (runs, 1))
    covs = np.tile(scenario.x0.cov, (runs, 1, 1))
    true_states = np.empty((runs, n))
    for r in range(runs):
        true_states[r] = scenario.x0.mean + root_p0 @ streams[r].standard_normal(n)

    alive = np.ones(runs, dtype=bool)
    outcomes = np.zeros(runs, dtype=np.int8)
    triggers = np.zeros(runs, dtype=np.int64)
    steps = np.zeros(runs, dtype=np.int64)
    deltas_used = np.zeros(runs)
    raw_trace: list[tuple] = []  # (run, segment, global_step, delta, gamma, kf, xt, xh)
    want_trace = np.arange(runs) < trace_cap

    for seg in range(n_seg):
        live = np.flatnonzero(alive)
        if live.size == 0:
            break
        dvals = np.asarray(delta_of(seg, live, covs[live]), dtype=float)
        deltas_used[live] = dvals

        # fixed-size per-run noise blocks, consumed in run order
        w_std = np.empty((live.size, k_max, n))
        v_std = np.empty((live.size, k_max, m))
        for i, r in enumerate(live):
            w_std[i] = streams[r].standard_normal((k_max, n))
            v_std[i] = streams[r].standard_normal((k_max, m))

        for dv in np.unique(dvals):
            sel = np.flatnonzero(dvals == dv)
            ids = live[sel]
            base_steps = steps[ids].copy()
            res = run_segment_batch(
                means[ids],
                covs[ids],
                true_states[ids],
                seg + 1,
                float(dv),
                scenario,
                None,
                mode_switch=mode_switch,
                p_kf=p_kf,
                force_trigger=force_trigger,
                trace_mask=want_trace[ids],
                w_std=w_std[sel],
                v_std=v_std[sel],
            )
            means[ids] = res.means
            covs[ids] = res.covs
            true_states[ids] = res.true_states
            steps[ids] += res.steps
            triggers[ids] += res.triggers
            diag["timeouts"] += int(res.timed_out.sum())
            collided = res.outcome == OUTCOME_COLLISION
            outcomes[ids[collided]] = RUN_COLL
            alive[ids[collided]] = False
            if res.trace:
                for rec in res.trace:
                    for j, lane in enumerate(rec.lanes):
                        run = int(ids[lane])
                        raw_trace.append(
                            (
                                run,
                                seg,
                                int(base_steps[lane]) + rec.step,
                                float(dv),
                                bool(rec.gamma[j]),
                                bool(rec.kf_mode[j]),
                                rec.x_true[j],
                                rec.x_hat[j],
                            )
                        )

    for r in np.flatnonzero(alive):
        kind = classify_point(scenario, true_states[r]).kind
        outcomes[r] = {"target": RUN_TAR, "collision": RUN_COLL}.get(kind, RUN_FREE)

    energies = triggers.astype(float) * scenario.comm_cost
    names = {r: OUTCOME_NAMES[int(outcomes[r])] for r in range(min(runs, trace_cap))}
    raw_trace.sort(key=lambda t: (t[0], t[2]))
    traces = [
        TraceRow(
            run=t[0],
            segment=t[1],
            step=t[2],
            delta=t[3],
            triggered=t[4],
            kf_mode=t[5],
            x_true=t[6],
            x_hat=t[7],
            outcome=names[t[0]],
        )
        for t in raw_trace
    ]
    return SimulationResult(
        objectives=_objectives(outcomes, energies),
        outcomes=outcomes,
        energies=energies,
        steps=steps,
        traces=traces,
        diag=diag,
    )


def simulate_strategy(
    scenario: Scenario,
    mdp: MOMDP,
    strategy: Strategy,
    tables: list[list[AxisRegionTable]] | None = None,
    runs: int = 3000,
    rng: RngStream | None = None,
    trace_cap: int = 300,
) -> SimulationResult:
    """Validate a strategy by closed-loop simulation.

    Mixture strategies are resolved once per run at the start.  Runtime
    beliefs that fall outside every abstract state the strategy covers fall
    back to the smallest threshold and are counted in ``diag['fallbacks']``.
    """
    if rng is None:
        rng = RngStream(0, "simulate")
    diag = {"fallbacks": 0, "timeouts": 0, "clamps": {}}
    policy = _StrategyPolicy(scenario, mdp, strategy, tables, runs, rng, diag)
    return _closed_loop(
        scenario,
        runs,
        rng,
        policy,
        mode_switch=(mdp.method == 1),
        force_trigger=False,
        trace_cap=trace_cap,
        diag=diag,
    )


def full_kf_baseline(
    scenario: Scenario,
    runs: int = 3000,
    rng: RngStream | None = None,
    trace_cap: int = 0,
) -> SimulationResult:
    """Reference run with a measurement transmitted at every step."""
    if rng is None:
        rng = RngStream(0, "simulate")
    diag = {"fallbacks": 0, "timeouts": 0, "clamps": {}}
    return _closed_loop(
        scenario,
        runs,
        rng,
        lambda seg, live, covs: np.zeros(live.size),
        mode_switch=False,
        force_trigger=True,
        trace_cap=trace_cap,
        diag=diag,
    )


@dataclass(frozen=True)
class ComparisonReport:
    """Theory-vs-simulation gaps, probability gaps in percentage points."""

    dp_tar_pp: float
    dp_coll_pp: float
    de_c_rel: float
    tol_pp: float
    tol_e_rel: float

    @property
    def passed(self) -> bool:
        return (
            self.dp_tar_pp <= self.tol_pp
            and self.dp_coll_pp <= self.tol_pp
            and self.de_c_rel <= self.tol_e_rel
        )

    def summary(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return (
            f"{flag}: |dp_tar|={self.dp_tar_pp:.3f}pp |dp_coll|={self.dp_coll_pp:.3f}pp "
            f"|de_c|={100 * self.de_c_rel:.2f}% "
            f"(tol {self.tol_pp}pp / {100 * self.tol_e_rel:.0f}%)"
        )


def compare_theory_empirical(
    predicted: ObjectivePoint,
    empirical: EmpiricalObjectives,
    tol_pp: float = 2.0,
    tol_e_rel: float = 0.05,
) -> ComparisonReport:
    if empirical.runs < 100:
        raise InputError(f"need at least 100 runs for a meaningful comparison, got {empirical.runs}")
    if predicted.e_c == 0.0:
        de_rel = 0.0 if empirical.e_c_mean == 0.0 else math.inf
    else:
        de_rel = abs(predicted.e_c - empirical.e_c_mean) / abs(predicted.e_c)
    return ComparisonReport(
        dp_tar_pp=100.0 * abs(predicted.p_tar - empirical.p_tar),
        dp_coll_pp=100.0 * abs(predicted.p_coll - empirical.p_coll),
        de_c_rel=de_rel,
        tol_pp=tol_pp,
        tol_e_rel=tol_e_rel,
    )


def trace_to_csv(traces: list[TraceRow], path, dim: int | None = None) -> None:
    """One row per retained step; coordinates expanded per dimension."""
    if dim is None:
        dim = len(traces[0].x_true) if traces else 2
    header = (
        ["run", "segment", "step", "delta", "trigger", "kf_mode", "outcome"]
        + [f"x_true_{i}" for i in range(dim)]
        + [f"x_hat_{i}" for i in range(dim)]
    )
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for t in traces:
            writer.writerow(
                [t.run, t.segment, t.step, repr(t.delta), int(t.triggered), int(t.kf_mode), t.outcome]
                + [repr(float(x)) for x in t.x_true]
                + [repr(float(x)) for x in t.x_hat]
            )
