"""Closed-loop plant simulation: saturated waypoint-tracking control, noisy
dynamics, and the segment rollout that drives everything downstream.

A "segment" is one waypoint-to-waypoint leg: the agent steers toward the
waypoint under a fixed trigger threshold until the estimate settles there (or
it runs out of steps, or the true state hits an obstacle).  The rollout is
batched over B independent runs; draws happen once per step for the whole
batch, so a batch of one and a batch of a thousand see the same per-lane
randomness structure.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, InputError
from .et_filter import (
    MODE_ET,
    MODE_KF,
    FilterParams,
    FilterState,
    _batch_pinv_psd,
    batch_filter_step,
    batch_predict,
    steady_state_kf_covariance,
)
from .numerics import GaussianBelief, RngStream, covariance_sqrt
from .scenario import Scenario

__all__ = [
    "OUTCOME_COLLISION",
    "OUTCOME_DONE",
    "BatchSegmentResult",
    "ControlLaw",
    "SegmentOutcome",
    "control",
    "lqr_gain",
    "measure",
    "plant_step",
    "run_segment_batch",
    "segment_rollout",
    "terminated",
]

OUTCOME_DONE = 1
OUTCOME_COLLISION = 2


@dataclass
class ControlLaw:
    """Saturated linear tracking law u = clip(K (target - x_hat), +-u_max)."""

    gain: np.ndarray
    u_max: float
    target: np.ndarray

    def __post_init__(self):
        self.gain = np.asarray(self.gain, dtype=float)
        self.target = np.asarray(self.target, dtype=float)
        if self.gain.ndim != 2:
            raise InputError(f"control gain must be a matrix, got shape {self.gain.shape}")
        if self.target.shape != (self.gain.shape[1],):
            raise InputError(
                f"target dimension {self.target.shape} does not match gain {self.gain.shape}"
            )
        if not (np.isfinite(self.u_max) and self.u_max > 0.0):
            raise InputError(f"u_max must be positive, got {self.u_max!r}")


def control(x_hat: np.ndarray, law: ControlLaw) -> np.ndarray:
    """Control input for the current estimate (saturated per component)."""
    u = law.gain @ (law.target - np.asarray(x_hat, dtype=float))
    return np.clip(u, -law.u_max, law.u_max)


def plant_step(
    x: np.ndarray, u: np.ndarray, params: FilterParams, rng: RngStream
) -> np.ndarray:
    """One true-state transition x' = F x + G u + w, w ~ N(0, Q)."""
    w = covariance_sqrt(params.Q) @ rng.standard_normal(params.n)
    return params.F @ np.asarray(x, float) + params.G @ np.asarray(u, float) + w


def measure(x: np.ndarray, params: FilterParams, rng: RngStream) -> np.ndarray:
    """One measurement y = H x + v, v ~ N(0, R)."""
    v = covariance_sqrt(params.R) @ rng.standard_normal(params.m)
    return params.H @ np.asarray(x, float) + v


def terminated(x_hat: np.ndarray, waypoint: np.ndarray, k: int, eps_x: float, k_max: int) -> bool:
    """Segment stop rule: estimate within eps_x of the waypoint, or k >= k_max."""
    return bool(np.linalg.norm(np.asarray(x_hat) - np.asarray(waypoint)) <= eps_x) or k >= k_max


# ---------------------------------------------------------------------------
# stationary LQR gain

_GAIN_CACHE: dict[bytes, np.ndarray] = {}


def lqr_gain(
    params: FilterParams,
    state_weight: np.ndarray | None = None,
    input_weight: np.ndarray | None = None,
    tol: float = 1e-12,
    max_iter: int = 100_000,
) -> np.ndarray:
    """Stationary discrete-time LQR gain (identity weights by default).

    Iterates the Riccati recursion to its fixed point S and returns
    K = (R_w + G^T S G)^{-1} G^T S F, so that u = K (target - x_hat) drives
    the tracking error down.
    """
    qw = np.eye(params.n) if state_weight is None else np.asarray(state_weight, float)
    rw = np.eye(params.p) if input_weight is None else np.asarray(input_weight, float)
    key = params.F.tobytes() + params.G.tobytes() + qw.tobytes() + rw.tobytes()
    cached = _GAIN_CACHE.get(key)
    if cached is not None:
        return cached

    f, g = params.F, params.G
    s = qw.copy()
    for _ in range(max_iter):
        inner = _batch_pinv_psd((rw + g.T @ s @ g)[None])[0]
        s_new = qw + f.T @ (s - s @ g @ inner @ g.T @ s) @ f
        if np.abs(s_new - s).max() < tol:
            s = s_new
            break
        s = s_new
    else:
        raise ConvergenceError(f"LQR Riccati iteration did not settle in {max_iter} steps")
    k = _batch_pinv_psd((rw + g.T @ s @ g)[None])[0] @ g.T @ s @ f
    _GAIN_CACHE[key] = k
    return k


def control_law_for(scenario: Scenario, waypoint_index: int) -> ControlLaw:
    """Tracking law aimed at the given waypoint, using the scenario's gain
    settings (explicit gain if present, else stationary LQR)."""
    if not 0 <= waypoint_index < scenario.waypoints.shape[0]:
        raise InputError(
            f"waypoint index {waypoint_index} out of range "
            f"[0, {scenario.waypoints.shape[0] - 1}]"
        )
    gain = scenario.control.gain
    if gain is None:
        gain = lqr_gain(scenario.params)
    return ControlLaw(gain=gain, u_max=scenario.control.u_max, target=scenario.waypoints[waypoint_index])


# ---------------------------------------------------------------------------
# batched segment rollout


@dataclass
class StepRecord:
    """Snapshot of the traced lanes after one rollout step."""

    step: int
    lanes: np.ndarray
    x_true: np.ndarray
    x_hat: np.ndarray
    gamma: np.ndarray
    kf_mode: np.ndarray


@dataclass
class BatchSegmentResult:
    """Final per-lane state after a batched segment rollout."""

    means: np.ndarray
    covs: np.ndarray
    true_states: np.ndarray
    steps: np.ndarray
    triggers: np.ndarray
    outcome: np.ndarray  # OUTCOME_DONE or OUTCOME_COLLISION
    obstacle: np.ndarray  # index of the obstacle hit, -1 otherwise
    timed_out: np.ndarray
    trace: list[StepRecord] | None = None


@dataclass
class SegmentOutcome:
    """Result of a single-run segment rollout."""

    filter_state: FilterState
    true_state: np.ndarray
    steps: int
    triggers: int
    collided: bool
    obstacle: int | None
    timed_out: bool


def _first_obstacle(xs: np.ndarray, obstacles) -> np.ndarray:
    """Lowest-index obstacle containing each point, -1 when outside all."""
    hit = np.full(xs.shape[0], -1, dtype=np.int64)
    for i, ob in enumerate(obstacles):
        inside = ob.contains_batch(xs)
        hit = np.where((hit < 0) & inside, i, hit)
    return hit


def run_segment_batch(
    means: np.ndarray,
    covs: np.ndarray,
    true_states: np.ndarray,
    waypoint_index: int,
    delta: float,
    scenario: Scenario,
    rng: RngStream | None,
    mode_switch: bool = False,
    p_kf: np.ndarray | None = None,
    force_trigger: bool = False,
    trace_mask: np.ndarray | None = None,
    w_std: np.ndarray | None = None,
    v_std: np.ndarray | None = None,
) -> BatchSegmentResult:
    """Roll B runs through one waypoint leg under a fixed threshold.

    Per step and per lane: mode check, control, plant transition, collision
    test on the true state, measurement, predict, trigger decision, update,
    termination test.  Lanes freeze once they collide or finish; random draws
    are always made for the full batch so lane i's noise never depends on how
    many other lanes are still running.

    ``w_std`` (B, k_max, n) and ``v_std`` (B, k_max, m) optionally supply the
    standard-normal draws up front (step k consumes slice k-1), letting the
    caller keep per-lane noise independent of how lanes are batched; with
    them in place ``rng`` may be None.
    """
    params = scenario.params
    if not np.isfinite(delta) or delta < 0.0:
        raise InputError(f"trigger threshold must be finite and >= 0, got {delta!r}")
    means = np.array(means, dtype=float)
    covs = np.array(covs, dtype=float)
    true_states = np.array(true_states, dtype=float)
    b = means.shape[0]
    if covs.shape != (b, params.n, params.n) or true_states.shape != (b, params.n):
        raise InputError("batch arrays have inconsistent shapes")
    if mode_switch and p_kf is None:
        p_kf = steady_state_kf_covariance(params)

    law = control_law_for(scenario, waypoint_index)
    wp = law.target
    root_q = covariance_sqrt(params.Q)
    root_r = covariance_sqrt(params.R)
    eps_x, k_max = scenario.term.eps_x, scenario.term.k_max
    if w_std is not None and w_std.shape != (b, k_max, params.n):
        raise InputError(f"w_std must have shape {(b, k_max, params.n)}")
    if v_std is not None and v_std.shape != (b, k_max, params.m):
        raise InputError(f"v_std must have shape {(b, k_max, params.m)}")
    if rng is None and (w_std is None or v_std is None):
        raise InputError("need an rng unless both noise blocks are pre-drawn")

    active = np.ones(b, dtype=bool)
    steps = np.zeros(b, dtype=np.int64)
    triggers = np.zeros(b, dtype=np.int64)
    outcome = np.zeros(b, dtype=np.int8)
    obstacle = np.full(b, -1, dtype=np.int64)
    timed_out = np.zeros(b, dtype=bool)
    kf_mode = np.zeros(b, dtype=bool)

    tracing = trace_mask is not None and bool(np.asarray(trace_mask).any())
    trace: list[StepRecord] | None = [] if tracing else None

    def freeze_collisions() -> None:
        nonlocal active
        hit = _first_obstacle(true_states, scenario.obstacles)
        newly = active & (hit >= 0)
        outcome[newly] = OUTCOME_COLLISION
        obstacle[newly] = hit[newly]
        active = active & ~newly

    def freeze_done() -> None:
        nonlocal active
        dist = np.linalg.norm(means - wp, axis=1)
        done = active & (dist <= eps_x)
        if mode_switch:
            settled = np.abs(covs - p_kf).max(axis=(1, 2)) <= scenario.mode_switch.eps_p
            done = done & settled
        outcome[done] = OUTCOME_DONE
        active = active & ~done

    freeze_collisions()
    freeze_done()

    k = 0
    while active.any() and k < k_max:
        k += 1
        stepping = active.copy()
        if mode_switch:
            near = np.linalg.norm(means - wp, axis=1) <= scenario.mode_switch.eps_kf
            kf_mode = kf_mode | (stepping & near)

        u = np.clip((wp - means) @ law.gain.T, -law.u_max, law.u_max)

        w_raw = w_std[:, k - 1] if w_std is not None else rng.standard_normal((b, params.n))
        new_true = true_states @ params.F.T + u @ params.G.T + w_raw @ root_q.T
        true_states = np.where(stepping[:, None], new_true, true_states)
        steps[stepping] += 1

        freeze_collisions()
        live = active  # lanes that still get a measurement this step

        v_raw = v_std[:, k - 1] if v_std is not None else rng.standard_normal((b, params.m))
        ys = true_states @ params.H.T + v_raw @ root_r.T

        means_p, covs_p = batch_predict(means, covs, u, params)
        zs = ys - means_p @ params.H.T
        force = None
        if force_trigger:
            force = np.ones(b, dtype=bool)
        elif mode_switch:
            force = kf_mode
        means_u, covs_u, gamma, _ = batch_filter_step(
            means_p, covs_p, zs, delta, params, force_mask=force
        )
        means = np.where(live[:, None], means_u, means)
        covs = np.where(live[:, None, None], covs_u, covs)
        triggers[live & gamma] += 1

        freeze_done()

        if tracing:
            lanes = np.flatnonzero(trace_mask & stepping)
            if lanes.size:
                trace.append(
                    StepRecord(
                        step=k,
                        lanes=lanes,
                        x_true=true_states[lanes].copy(),
                        x_hat=means[lanes].copy(),
                        gamma=(gamma & live)[lanes].copy(),
                        kf_mode=kf_mode[lanes].copy(),
                    )
                )

    timed_out[active] = True
    outcome[active] = OUTCOME_DONE
    return BatchSegmentResult(
        means=means,
        covs=covs,
        true_states=true_states,
        steps=steps,
        triggers=triggers,
        outcome=outcome,
        obstacle=obstacle,
        timed_out=timed_out,
        trace=trace,
    )


def segment_rollout(
    filter_state: FilterState,
    true_state: np.ndarray,
    waypoint_index: int,
    delta: float,
    scenario: Scenario,
    rng: RngStream,
    mode_switch: bool = False,
    p_kf: np.ndarray | None = None,
    force_trigger: bool = False,
) -> SegmentOutcome:
    """Single-run segment rollout (a batch of one)."""
    res = run_segment_batch(
        filter_state.belief.mean[None],
        filter_state.belief.cov[None],
        np.asarray(true_state, float)[None],
        waypoint_index,
        delta,
        scenario,
        rng,
        mode_switch=mode_switch,
        p_kf=p_kf,
        force_trigger=force_trigger,
    )
    collided = res.outcome[0] == OUTCOME_COLLISION
    return SegmentOutcome(
        filter_state=FilterState(
            belief=GaussianBelief(res.means[0], res.covs[0]),
            step_in_segment=int(res.steps[0]),
            triggers_in_segment=int(res.triggers[0]),
            mode=MODE_KF if force_trigger else MODE_ET,
        ),
        true_state=res.true_states[0],
        steps=int(res.steps[0]),
        triggers=int(res.triggers[0]),
        collided=bool(collided),
        obstacle=int(res.obstacle[0]) if collided else None,
        timed_out=bool(res.timed_out[0]),
    )
