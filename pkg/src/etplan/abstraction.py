"""Belief-space abstraction: collapse the continuous (estimate, covariance)
dynamics into a finite MDP whose transitions are estimated by Monte-Carlo
segment rollouts.

Two abstractions are supported.  Method 1 tracks nothing about the
covariance: each waypoint is one state, and every segment ends by switching
to full-rate filtering until the covariance reaches its fixed point, so the
belief at a waypoint is always the same.  Method 2 keeps event-triggered
filtering throughout and distinguishes covariances by spectral shape: per
state axis, the eigenvalue and the angle between the eigenvector and its
nominal direction are binned into calibrated regions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import CalibrationError, InputError, InternalError
from .et_filter import batch_g_lambda, steady_state_kf_covariance
from .mdp import (
    COLL_STATE,
    FREE_STATE,
    KIND_BELIEF,
    TAR_STATE,
    AbstractState,
    MOMDP,
)
from .numerics import RngStream, beta_coefficient, expected_trigger_rate, sym_eigen_batch
from .plant import OUTCOME_COLLISION, run_segment_batch
from .scenario import Scenario, classify_point

__all__ = [
    "AbstractionConfig",
    "AxisRegionTable",
    "BeliefPool",
    "BuildResult",
    "CovRegion",
    "ProbeReport",
    "RegionCounts",
    "build_mdp",
    "calibrate_regions",
    "classify_covariance",
    "classify_covariance_batch",
    "empirical_cov_upper_bound",
    "refinement_probe",
    "region_count_formulas",
]

# Eigenvalues closer than this (relative to the largest) count as repeated;
# the later axes of a repeated group get theta = 0 because their eigenvector
# direction is arbitrary.
_DEGENERATE_REL = 1e-9


@dataclass
class AbstractionConfig:
    """Knobs for abstraction building."""

    method: int = 2
    bins_theta: int = 3
    bins_lambda: int = 3
    samples_per_action: int = 500
    pool_cap: int = 2000
    calibration_runs: int = 64

    def __post_init__(self):
        if self.method not in (1, 2):
            raise InputError(f"method must be 1 or 2, got {self.method!r}")
        for name in ("bins_theta", "bins_lambda", "samples_per_action", "pool_cap"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise InputError(f"{name} must be a positive integer, got {v!r}")
        if self.calibration_runs < 4:
            raise InputError(
                f"calibration_runs must be at least 4, got {self.calibration_runs!r}"
            )


@dataclass
class CovRegion:
    """One spectral region: eigenvalue band and angle band around a nominal
    eigenvector direction."""

    v_nom: np.ndarray
    theta_lo: float
    theta_hi: float
    lam_lo: float
    lam_hi: float


@dataclass
class AxisRegionTable:
    """Region edges for one state axis at one waypoint."""

    v_nom: np.ndarray
    theta_edges: np.ndarray
    lambda_edges: np.ndarray

    @property
    def n_theta(self) -> int:
        return len(self.theta_edges) - 1

    @property
    def n_lambda(self) -> int:
        return len(self.lambda_edges) - 1

    def region(self, theta_bin: int, lambda_bin: int) -> CovRegion:
        return CovRegion(
            v_nom=self.v_nom,
            theta_lo=float(self.theta_edges[theta_bin]),
            theta_hi=float(self.theta_edges[theta_bin + 1]),
            lam_lo=float(self.lambda_edges[lambda_bin]),
            lam_hi=float(self.lambda_edges[lambda_bin + 1]),
        )

    def to_json(self) -> dict:
        return {
            "v_nom": self.v_nom.tolist(),
            "theta_edges": self.theta_edges.tolist(),
            "lambda_edges": self.lambda_edges.tolist(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "AxisRegionTable":
        return cls(
            v_nom=np.asarray(doc["v_nom"], float),
            theta_edges=np.asarray(doc["theta_edges"], float),
            lambda_edges=np.asarray(doc["lambda_edges"], float),
        )


def tables_to_json(tables: list[list[AxisRegionTable]]) -> list:
    return [[axis.to_json() for axis in per_wp] for per_wp in tables]


def tables_from_json(doc: list) -> list[list[AxisRegionTable]]:
    return [[AxisRegionTable.from_json(axis) for axis in per_wp] for per_wp in doc]


def _bin_of(edges: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Half-open bin index: edges[i] <= v < edges[i+1]; unclamped (may be -1
    below the floor or n_bins at/above the cap)."""
    return np.searchsorted(edges, values, side="right") - 1


def classify_covariance_batch(
    covs: np.ndarray,
    axis_tables: list[AxisRegionTable],
    diag: dict | None = None,
) -> list[tuple[tuple[int, int], ...]]:
    """Map covariances to per-axis (theta_bin, lambda_bin) region tuples.

    Out-of-range values are clamped into the nearest bin; when ``diag`` is
    given, clamp counts are accumulated under 'lambda_low', 'lambda_high'
    and 'theta_high'.
    """
    covs = np.asarray(covs, dtype=float)
    if covs.ndim != 3:
        raise InputError(f"expected a (B, n, n) batch, got shape {covs.shape}")
    b, n, _ = covs.shape
    if len(axis_tables) != n:
        raise InputError(f"need {n} axis tables, got {len(axis_tables)}")
    w, v = sym_eigen_batch(covs)
    w = np.maximum(w, 0.0)

    # repeated-eigenvalue rule: later members of a near-equal group get theta 0
    scale = np.maximum(w[:, 0], np.finfo(float).tiny)
    repeated = np.zeros((b, n), dtype=bool)
    for i in range(1, n):
        close = np.abs(w[:, i][:, None] - w[:, :i]) <= _DEGENERATE_REL * scale[:, None]
        repeated[:, i] = close.any(axis=1)

    out = np.empty((b, n, 2), dtype=np.int64)
    for i, table in enumerate(axis_tables):
        dot = np.abs(v[:, :, i] @ table.v_nom)
        theta = np.arccos(np.clip(dot, 0.0, 1.0))
        theta = np.where(repeated[:, i], 0.0, theta)
        ti = _bin_of(table.theta_edges, theta)
        li = _bin_of(table.lambda_edges, w[:, i])
        if diag is not None:
            diag["theta_high"] = diag.get("theta_high", 0) + int((ti > table.n_theta - 1).sum())
            diag["lambda_low"] = diag.get("lambda_low", 0) + int((li < 0).sum())
            diag["lambda_high"] = diag.get("lambda_high", 0) + int((li > table.n_lambda - 1).sum())
        out[:, i, 0] = np.clip(ti, 0, table.n_theta - 1)
        out[:, i, 1] = np.clip(li, 0, table.n_lambda - 1)
    return [tuple((int(t), int(l)) for t, l in sample) for sample in out]


def classify_covariance(
    cov: np.ndarray, axis_tables: list[AxisRegionTable], diag: dict | None = None
) -> tuple[tuple[int, int], ...]:
    """Region tuple for a single covariance (see the batch version)."""
    return classify_covariance_batch(np.asarray(cov, float)[None], axis_tables, diag)[0]


# ---------------------------------------------------------------------------
# calibration


def empirical_cov_upper_bound(scenario: Scenario, delta: float | None = None) -> float:
    """Upper bound on eigenvalues the filter covariance can reach.

    Runs the never-trigger recursion P -> g_beta(F P F^T + Q) from the
    full-rate fixed point for k_max steps at the largest threshold; the
    returned bound is 1.1x the largest eigenvalue seen.
    """
    if delta is None:
        delta = max(scenario.deltas)
    params = scenario.params
    lam = beta_coefficient(delta)
    p = steady_state_kf_covariance(params)
    worst = float(sym_eigen_batch(p[None])[0].max())
    for _ in range(scenario.term.k_max):
        prior = params.F @ p @ params.F.T + params.Q
        p = batch_g_lambda(prior[None], np.array([lam]), params)[0]
        worst = max(worst, float(sym_eigen_batch(p[None])[0].max()))
    return 1.1 * worst


def _nominal_direction(vecs: np.ndarray) -> np.ndarray:
    """Mean direction of unit vectors, treating v and -v as the same ray."""
    ref = vecs[0]
    signs = np.where(vecs @ ref >= 0.0, 1.0, -1.0)
    mean = (vecs * signs[:, None]).mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm < 1e-12:
        mean, norm = ref, 1.0
    return mean / norm


def _axis_table(
    lams: np.ndarray, vecs: np.ndarray, bins_theta: int, bins_lambda: int, cap: float
) -> AxisRegionTable:
    v_nom = _nominal_direction(vecs)
    theta = np.arccos(np.clip(np.abs(vecs @ v_nom), 0.0, 1.0))
    theta_cap = min(1.1 * float(theta.max()), math.pi / 2.0)
    if theta_cap < 1e-9:
        theta_edges = np.array([0.0, math.pi / 2.0])
    else:
        theta_edges = np.linspace(0.0, theta_cap, bins_theta + 1)
        theta_edges[-1] = math.pi / 2.0
        theta_edges = np.unique(theta_edges)

    lo = 0.5 * float(lams.min())
    hi = max(cap, 1.05 * float(lams.max()))
    if hi <= lo + np.finfo(float).tiny:  # flat spectrum, e.g. a noise-free plant
        hi = lo + 1.0
    interior = np.quantile(lams, [j / bins_lambda for j in range(1, bins_lambda)])
    edges = np.concatenate([[lo], interior, [hi]])
    keep = [edges[0]]
    span = max(hi - lo, np.finfo(float).tiny)
    for e in edges[1:]:
        if e - keep[-1] > 1e-12 * span:
            keep.append(e)
    keep[-1] = hi
    lambda_edges = np.asarray(keep)
    if len(lambda_edges) < 2:  # pragma: no cover - hi > lo by construction
        raise InternalError("lambda edges collapsed")
    return AxisRegionTable(v_nom=v_nom, theta_edges=theta_edges, lambda_edges=lambda_edges)


def calibrate_regions(
    scenario: Scenario, config: AbstractionConfig, rng: RngStream
) -> list[list[AxisRegionTable]]:
    """Region tables per waypoint and axis, from exploratory rollouts.

    Calibration runs the whole waypoint path once per run, cycling through
    the threshold menu across runs, and records the spectral decomposition
    of the filter covariance at every waypoint arrival.  Quantile-based
    eigenvalue edges and uniform angle edges are fitted per (waypoint, axis).
    The same rollout data yields nested edges when the bin counts double.
    """
    n = scenario.dim
    n_way = scenario.waypoints.shape[0]
    runs = config.calibration_runs
    cap = empirical_cov_upper_bound(scenario)

    deltas = np.array([scenario.deltas[i % len(scenario.deltas)] for i in range(runs)])
    means = np.tile(scenario.x0.mean, (runs, 1))
    covs = np.tile(scenario.x0.cov, (runs, 1, 1))
    trues = scenario.x0.mean + rng.substream("calib-init").standard_normal(
        (runs, n)
    ) @ _psd_sqrt(scenario.x0.cov).T

    # observations[w] collects (eigenvalues, eigenvectors) of arrivals at w
    obs_lams: list[list[np.ndarray]] = [[] for _ in range(n_way)]
    obs_vecs: list[list[np.ndarray]] = [[] for _ in range(n_way)]
    w0, v0 = sym_eigen_batch(covs[:1])
    obs_lams[0].append(np.tile(w0, (runs, 1)))
    obs_vecs[0].append(np.tile(v0, (runs, 1, 1)))

    alive = np.ones(runs, dtype=bool)
    for seg in range(scenario.n_segments):
        for di, delta in enumerate(sorted(set(deltas))):
            group = alive & (deltas == delta)
            if not group.any():
                continue
            idx = np.flatnonzero(group)
            res = run_segment_batch(
                means[idx],
                covs[idx],
                trues[idx],
                seg + 1,
                float(delta),
                scenario,
                rng.substream(f"calib/{seg}/{di}"),
            )
            means[idx], covs[idx], trues[idx] = res.means, res.covs, res.true_states
            collided = res.outcome == OUTCOME_COLLISION
            alive[idx[collided]] = False
            arrived = idx[~collided]
            if arrived.size and seg + 1 < n_way - 1:
                w, v = sym_eigen_batch(covs[arrived])
                obs_lams[seg + 1].append(w)
                obs_vecs[seg + 1].append(v)

    tables: list[list[AxisRegionTable]] = []
    for wpt in range(n_way - 1):
        if not obs_lams[wpt]:
            raise CalibrationError(
                f"no calibration run arrived at waypoint {wpt}; "
                f"increase calibration_runs or rethink the path"
            )
        lams = np.concatenate(obs_lams[wpt], axis=0)
        vecs = np.concatenate(obs_vecs[wpt], axis=0)
        if lams.shape[0] < 2:
            raise CalibrationError(
                f"only {lams.shape[0]} calibration arrival(s) at waypoint {wpt}; need at least 2"
            )
        tables.append(
            [
                _axis_table(lams[:, i], vecs[:, :, i], config.bins_theta, config.bins_lambda, cap)
                for i in range(n)
            ]
        )
    return tables


# ---------------------------------------------------------------------------
# belief pools


class BeliefPool:
    """Bounded reservoir of (mean, cov, true state) samples for one state.

    Once full, each further item replaces a random slot with probability
    cap / items_seen, which keeps the pool a uniform sample of everything
    offered to it.
    """

    def __init__(self, cap: int, dim: int, rng: RngStream):
        self.cap = int(cap)
        self.seen = 0
        self.size = 0
        self._rng = rng
        self._means = np.empty((self.cap, dim))
        self._covs = np.empty((self.cap, dim, dim))
        self._trues = np.empty((self.cap, dim))

    def add_batch(self, means: np.ndarray, covs: np.ndarray, trues: np.ndarray) -> None:
        count = means.shape[0]
        take = min(count, self.cap - self.size)
        if take > 0:
            sl = slice(self.size, self.size + take)
            self._means[sl] = means[:take]
            self._covs[sl] = covs[:take]
            self._trues[sl] = trues[:take]
            self.size += take
            self.seen += take
        rest = count - take
        if rest > 0:
            highs = self.seen + 1 + np.arange(rest)
            slots = np.floor(self._rng.uniform(rest) * highs).astype(np.int64)
            for offset, slot in enumerate(slots):
                if slot < self.cap:
                    i = take + offset
                    self._means[slot] = means[i]
                    self._covs[slot] = covs[i]
                    self._trues[slot] = trues[i]
            self.seen += rest

    def sample(self, m: int, rng: RngStream) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Draw m triples with replacement."""
        if self.size == 0:
            raise InternalError("sampling from an empty belief pool")
        idx = rng.integers(0, self.size, shape=m)
        return self._means[idx].copy(), self._covs[idx].copy(), self._trues[idx].copy()


# ---------------------------------------------------------------------------
# MDP construction


@dataclass
class BuildResult:
    """Abstraction output: the MDP plus everything needed to replay it."""

    mdp: MOMDP
    pools: dict[AbstractState, BeliefPool]
    tables: list[list[AxisRegionTable]] | None
    p_kf: np.ndarray
    diag: dict = field(default_factory=dict)


def build_mdp(
    scenario: Scenario,
    config: AbstractionConfig,
    rng: RngStream,
    tables: list[list[AxisRegionTable]] | None = None,
) -> BuildResult:
    """Explore the abstraction layer by layer and estimate the MDP.

    Starting from the initial belief state, every (state, threshold) pair is
    rolled out ``samples_per_action`` times from the state's belief pool;
    arrival beliefs are classified (by region for method 2, by waypoint for
    method 1) and pooled for the next layer.  Pools merge only between
    layers, so transition estimates never depend on intra-layer ordering.
    """
    n = scenario.dim
    n_seg = scenario.n_segments
    m_samples = config.samples_per_action
    method = config.method
    p_kf = steady_state_kf_covariance(scenario.params)
    diag: dict = {"clamps": {}, "timeouts": 0}

    if method == 2 and tables is None:
        tables = calibrate_regions(scenario, config, rng.substream("calibrate"))
    if method == 1:
        tables = None

    def classify_batch(covs: np.ndarray, waypoint: int) -> list[AbstractState]:
        if method == 1:
            return [AbstractState(KIND_BELIEF, waypoint)] * covs.shape[0]
        regions = classify_covariance_batch(covs, tables[waypoint], diag["clamps"])
        return [AbstractState(KIND_BELIEF, waypoint, reg) for reg in regions]

    master = rng.substream("build")
    order: list[AbstractState] = []  # discovery order of belief states
    pools: dict[AbstractState, BeliefPool] = {}

    def ensure_state(state: AbstractState) -> None:
        if state not in pools:
            order.append(state)
            pools[state] = BeliefPool(
                config.pool_cap, n, master.substream(f"pool/{state.label()}")
            )

    init_mean = np.tile(scenario.x0.mean, (config.pool_cap, 1))
    init_cov = np.tile(scenario.x0.cov, (config.pool_cap, 1, 1))
    init_true = init_mean + master.substream("init").standard_normal(
        (config.pool_cap, n)
    ) @ _psd_sqrt(scenario.x0.cov).T
    initial_state = classify_batch(init_cov[:1], 0)[0]
    ensure_state(initial_state)
    pools[initial_state].add_batch(init_mean, init_cov, init_true)

    trans: dict[AbstractState, list[dict[AbstractState, float]]] = {}
    costs: dict[AbstractState, list[float]] = {}
    costs_prod: dict[AbstractState, list[float]] = {}
    steps_avg: dict[AbstractState, list[float]] = {}

    for wpt in range(n_seg):
        layer = [s for s in order if s.waypoint == wpt]
        buffers: list[tuple[AbstractState, np.ndarray, np.ndarray, np.ndarray]] = []
        for state in layer:
            pool = pools[state]
            trans[state] = []
            costs[state] = []
            costs_prod[state] = []
            steps_avg[state] = []
            for ai, delta in enumerate(scenario.deltas):
                sub = master.substream(f"est/{state.label()}/{ai}")
                means, covs, trues = pool.sample(m_samples, sub.substream("draw"))
                res = run_segment_batch(
                    means,
                    covs,
                    trues,
                    wpt + 1,
                    delta,
                    scenario,
                    sub.substream("roll"),
                    mode_switch=(method == 1),
                    p_kf=p_kf,
                )
                diag["timeouts"] += int(res.timed_out.sum())
                collided = res.outcome == OUTCOME_COLLISION
                dests: list[AbstractState] = [COLL_STATE] * m_samples
                live = np.flatnonzero(~collided)
                if live.size:
                    if wpt + 1 == n_seg:
                        for i in live:
                            cls = classify_point(scenario, res.true_states[i])
                            dests[i] = TAR_STATE if cls.kind == "target" else (
                                COLL_STATE if cls.kind == "collision" else FREE_STATE
                            )
                    else:
                        arrivals = classify_batch(res.covs[live], wpt + 1)
                        for j, i in enumerate(live):
                            dests[i] = arrivals[j]
                counts: dict[AbstractState, int] = {}
                for d in dests:
                    counts[d] = counts.get(d, 0) + 1
                trans[state].append({d: k / m_samples for d, k in counts.items()})
                costs[state].append(scenario.comm_cost * float(res.triggers.mean()))
                steps_avg[state].append(float(res.steps.mean()))
                costs_prod[state].append(
                    scenario.comm_cost
                    * float(res.steps.mean())
                    * expected_trigger_rate(delta, scenario.params.m)
                )
                if wpt + 1 < n_seg and live.size:
                    arrival_states = (
                        [dests[i] for i in live]
                    )
                    # group consecutive arrivals per destination for pooling
                    by_dest: dict[AbstractState, list[int]] = {}
                    for j, i in enumerate(live):
                        by_dest.setdefault(arrival_states[j], []).append(i)
                    for dest in sorted(by_dest, key=lambda s: (s.waypoint, s.regions)):
                        lanes = np.array(by_dest[dest])
                        buffers.append(
                            (dest, res.means[lanes], res.covs[lanes], res.true_states[lanes])
                        )
        # layer barrier: discover destinations and merge pools in batch order
        for dest, bm, bc, bt in buffers:
            ensure_state(dest)
            pools[dest].add_batch(bm, bc, bt)

    states = list(order) + [COLL_STATE, TAR_STATE, FREE_STATE]
    sid = {s: i for i, s in enumerate(states)}
    n_actions = len(scenario.deltas)
    transitions: list[list[dict[int, float] | None]] = []
    cost_rows: list[list[float]] = []
    cost_prod_rows: list[list[float]] = []
    step_rows: list[list[float]] = []
    for s in states:
        if s.terminal:
            transitions.append([None] * n_actions)
            cost_rows.append([0.0] * n_actions)
            cost_prod_rows.append([0.0] * n_actions)
            step_rows.append([0.0] * n_actions)
        else:
            transitions.append(
                [{sid[d]: p for d, p in sorted(row.items(), key=lambda kv: sid[kv[0]])} for row in trans[s]]
            )
            cost_rows.append(costs[s])
            cost_prod_rows.append(costs_prod[s])
            step_rows.append(steps_avg[s])

    mdp = MOMDP(
        states=states,
        actions=list(scenario.deltas),
        initial=sid[initial_state],
        transitions=transitions,
        costs=cost_rows,
        costs_product=cost_prod_rows,
        mean_steps=step_rows,
        method=method,
        meta={
            "scenario": scenario.name,
            "bins_theta": config.bins_theta if method == 2 else None,
            "bins_lambda": config.bins_lambda if method == 2 else None,
            "samples_per_action": m_samples,
            "pool_cap": config.pool_cap,
            "diag": _jsonable(diag),
        },
    )
    mdp.validate()
    return BuildResult(mdp=mdp, pools=pools, tables=tables, p_kf=p_kf, diag=diag)


def _psd_sqrt(cov: np.ndarray) -> np.ndarray:
    w, v = sym_eigen_batch(np.asarray(cov, float)[None])
    return v[0] * np.sqrt(np.maximum(w[0], 0.0))


def _jsonable(d):
    if isinstance(d, dict):
        return {k: _jsonable(v) for k, v in d.items()}
    if isinstance(d, (np.integer,)):
        return int(d)
    if isinstance(d, (np.floating,)):
        return float(d)
    return d


# ---------------------------------------------------------------------------
# refinement probe


@dataclass
class ProbeReport:
    """How much the transition probabilities spread when each coarse region
    is split into finer subregions (smaller = the abstraction is settling)."""

    coarse_bins: tuple[int, int]
    fine_bins: tuple[int, int]
    per_state: dict[int, float]
    median: float
    mean: float
    max: float
    unmatched_fine_states: int


def _map_fine_to_coarse(
    fine_tables: list[list[AxisRegionTable]],
    coarse_tables: list[list[AxisRegionTable]],
    state: AbstractState,
) -> AbstractState:
    """Locate a fine belief state's region midpoints in the coarse tables."""
    regions = []
    for axis, (ti, li) in enumerate(state.regions):
        fine = fine_tables[state.waypoint][axis]
        coarse = coarse_tables[state.waypoint][axis]
        theta_mid = 0.5 * (fine.theta_edges[ti] + fine.theta_edges[ti + 1])
        lam_mid = 0.5 * (fine.lambda_edges[li] + fine.lambda_edges[li + 1])
        ct = int(np.clip(_bin_of(coarse.theta_edges, theta_mid), 0, coarse.n_theta - 1))
        cl = int(np.clip(_bin_of(coarse.lambda_edges, lam_mid), 0, coarse.n_lambda - 1))
        regions.append((ct, cl))
    return AbstractState(KIND_BELIEF, state.waypoint, tuple(regions))


def refinement_probe(
    scenario: Scenario, config: AbstractionConfig, rng: RngStream
) -> ProbeReport:
    """Compare the abstraction at the configured resolution against one with
    doubled bin counts built from the same calibration data.

    For every coarse state, each fine state inside it induces transition
    rows that, mapped back to coarse destinations, should agree with the
    coarse row; the report carries the worst per-state disagreement.
    """
    if config.method != 2:
        raise InputError("the refinement probe applies to the region-based method only")
    fine_config = replace(
        config, bins_theta=2 * config.bins_theta, bins_lambda=2 * config.bins_lambda
    )
    coarse_tables = calibrate_regions(scenario, config, rng.substream("calibrate"))
    fine_tables = calibrate_regions(scenario, fine_config, rng.substream("calibrate"))

    coarse = build_mdp(scenario, config, rng.substream("coarse"), tables=coarse_tables)
    fine = build_mdp(scenario, fine_config, rng.substream("fine"), tables=fine_tables)

    cm, fm = coarse.mdp, fine.mdp
    # map every fine state id to its coarse image id (-1 when the image was
    # never discovered by the coarse build)
    image_of = np.empty(fm.n_states, dtype=np.int64)
    unmatched = 0
    for fid, fstate in enumerate(fm.states):
        if fstate.terminal:
            image_of[fid] = cm.state_id(fstate)
            continue
        image = _map_fine_to_coarse(fine_tables, coarse_tables, fstate)
        try:
            image_of[fid] = cm.state_id(image)
        except KeyError:
            image_of[fid] = -1
            unmatched += 1

    groups: dict[int, list[int]] = {}
    for fid, fstate in enumerate(fm.states):
        if not fstate.terminal and image_of[fid] >= 0:
            groups.setdefault(int(image_of[fid]), []).append(fid)

    per_state: dict[int, float] = {}
    for cid, fids in groups.items():
        worst = 0.0
        for ai in range(cm.n_actions):
            coarse_row = cm.transitions[cid][ai]
            for fid in fids:
                mapped: dict[int, float] = {}
                for dest, prob in fm.transitions[fid][ai].items():
                    mapped_dest = int(image_of[dest])
                    mapped[mapped_dest] = mapped.get(mapped_dest, 0.0) + prob
                for key in set(mapped) | set(coarse_row):
                    spread = abs(mapped.get(key, 0.0) - coarse_row.get(key, 0.0))
                    worst = max(worst, spread)
        per_state[cid] = worst

    values = np.array(sorted(per_state.values())) if per_state else np.array([0.0])
    return ProbeReport(
        coarse_bins=(config.bins_theta, config.bins_lambda),
        fine_bins=(fine_config.bins_theta, fine_config.bins_lambda),
        per_state=per_state,
        median=float(np.median(values)),
        mean=float(values.mean()),
        max=float(values.max()),
        unmatched_fine_states=unmatched,
    )


# ---------------------------------------------------------------------------
# bookkeeping formulas


@dataclass
class RegionCounts:
    """How many scalars each covariance representation discretizes, and the
    resulting worst-case state counts."""

    element_scalars: int
    spectral_scalars: int
    element_state_bound: int | None
    spectral_state_bound: int | None


def region_count_formulas(n: int, d: int, waypoints: int | None = None) -> RegionCounts:
    """Discretization bookkeeping for dimension ``n`` with ``d`` bins per
    scalar: element-wise binning touches n(n+1)/2 covariance entries while
    the spectral route bins one region index per axis.  With a waypoint
    count, also bound the state space as waypoints * d^scalars + 3."""
    if n < 1 or d < 1:
        raise InputError(f"need n >= 1 and d >= 1, got n={n}, d={d}")
    element = n * (n + 1) // 2
    spectral = n
    eb = sb = None
    if waypoints is not None:
        if waypoints < 1:
            raise InputError(f"waypoints must be positive, got {waypoints}")
        eb = waypoints * d**element + 3
        sb = waypoints * d**spectral + 3
    return RegionCounts(
        element_scalars=element,
        spectral_scalars=spectral,
        element_state_bound=eb,
        spectral_state_bound=sb,
    )
