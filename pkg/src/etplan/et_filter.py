"""Event-triggered Kalman filtering for a linear-Gaussian plant.

The sensor runs a full Kalman filter and transmits the measurement only when
the whitened innovation leaves the band [-delta, delta] in any component
(gamma = 1).  When nothing is transmitted (gamma = 0) the estimator still
learns something -- the innovation was small -- and folds that in through an
attenuated covariance update with coefficient beta(delta).

Everything here is written batch-first: the public single-step operations
wrap kernels that process B filter instances at once, so the Monte-Carlo
rollout engine and the step-by-step API cannot drift apart.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConvergenceError, InputError, NumericalError
from .numerics import GaussianBelief, beta_coefficient, sym_eigen_batch

__all__ = [
    "MODE_ET",
    "MODE_KF",
    "FilterParams",
    "FilterState",
    "TriggerDecision",
    "decide_trigger",
    "g_lambda",
    "kalman_gain",
    "predict",
    "steady_state_kf_covariance",
    "update",
]

MODE_ET = "et"
MODE_KF = "kf"

# Eigenvalues of the innovation covariance at or below this are treated as
# exact linear constraints (the zero-noise degenerate case) rather than
# invertible directions.
_SINGULAR_EIG = 1e-12
_EXACT_TOL = 1e-9


def _check_sym_psd(name: str, mat: np.ndarray) -> np.ndarray:
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise InputError(f"{name} must be square, got shape {mat.shape}")
    if not np.isfinite(mat).all():
        raise InputError(f"{name} contains non-finite entries")
    if np.abs(mat - mat.T).max() > 1e-9 * max(1.0, np.abs(mat).max()):
        raise InputError(f"{name} is not symmetric")
    mat = 0.5 * (mat + mat.T)
    w, _ = sym_eigen_batch(mat[None])
    if w[0, -1] < -1e-9:
        raise InputError(
            f"{name} is not positive semidefinite (min eigenvalue {w[0, -1]:.3e})"
        )
    return mat


@dataclass
class FilterParams:
    """Plant and noise model: x' = F x + G u + w,  y = H x + v.

    w ~ N(0, Q) and v ~ N(0, R); Q and R must be symmetric positive
    semidefinite (the zero matrices are allowed for deterministic test
    plants).
    """

    F: np.ndarray
    G: np.ndarray
    H: np.ndarray
    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        self.F = np.asarray(self.F, dtype=float)
        self.G = np.asarray(self.G, dtype=float)
        self.H = np.asarray(self.H, dtype=float)
        if self.F.ndim != 2 or self.F.shape[0] != self.F.shape[1]:
            raise InputError(f"F must be square, got shape {self.F.shape}")
        n = self.F.shape[0]
        if self.G.ndim != 2 or self.G.shape[0] != n:
            raise InputError(f"G must have {n} rows, got shape {self.G.shape}")
        if self.H.ndim != 2 or self.H.shape[1] != n:
            raise InputError(f"H must have {n} columns, got shape {self.H.shape}")
        for name, mat in (("F", self.F), ("G", self.G), ("H", self.H)):
            if not np.isfinite(mat).all():
                raise InputError(f"{name} contains non-finite entries")
        self.Q = _check_sym_psd("Q", self.Q)
        self.R = _check_sym_psd("R", self.R)
        if self.Q.shape != (n, n):
            raise InputError(f"Q must be {n}x{n}, got shape {self.Q.shape}")
        if self.R.shape[0] != self.H.shape[0]:
            raise InputError(
                f"R must be {self.H.shape[0]}x{self.H.shape[0]}, got {self.R.shape}"
            )

    @property
    def n(self) -> int:
        return self.F.shape[0]

    @property
    def p(self) -> int:
        return self.G.shape[1]

    @property
    def m(self) -> int:
        return self.H.shape[0]


@dataclass
class FilterState:
    """Estimator state plus per-segment bookkeeping."""

    belief: GaussianBelief
    step_in_segment: int = 0
    triggers_in_segment: int = 0
    mode: str = MODE_ET

    def __post_init__(self):
        if self.mode not in (MODE_ET, MODE_KF):
            raise InputError(f"unknown filter mode {self.mode!r}")


@dataclass
class TriggerDecision:
    """Outcome of one trigger test."""

    gamma: int
    epsilon: np.ndarray
    innovation: np.ndarray
    innovation_cov: np.ndarray


# ---------------------------------------------------------------------------
# batched kernels


def batch_predict(
    means: np.ndarray, covs: np.ndarray, us: np.ndarray, params: FilterParams
) -> tuple[np.ndarray, np.ndarray]:
    """Time update for B filters: x' = F x + G u, P' = F P F^T + Q."""
    means = means @ params.F.T + us @ params.G.T
    covs = params.F @ covs @ params.F.T + params.Q
    return means, 0.5 * (covs + covs.transpose(0, 2, 1))


def batch_innovation_cov(covs: np.ndarray, params: FilterParams) -> np.ndarray:
    """Z = R + H P H^T for a batch of prior covariances."""
    z = params.H @ covs @ params.H.T + params.R
    return 0.5 * (z + z.transpose(0, 2, 1))


def batch_whiten(zs: np.ndarray, z_covs: np.ndarray) -> np.ndarray:
    """Whiten innovations, tolerating exactly-degenerate directions.

    Directions with eigenvalue <= 1e-12 carry no noise: the whitened
    component is 0 when the projection is (numerically) zero and +inf when a
    deterministic constraint is violated, so a sup-norm test still behaves.
    """
    w, v = sym_eigen_batch(z_covs)
    proj = np.einsum("bij,bi->bj", v, zs)
    with np.errstate(divide="ignore", invalid="ignore"):
        eps = proj / np.sqrt(np.maximum(w, _SINGULAR_EIG))
    degenerate = w <= _SINGULAR_EIG
    eps = np.where(
        degenerate, np.where(np.abs(proj) <= _EXACT_TOL, 0.0, np.inf), eps
    )
    return eps


def _batch_pinv_psd(z_covs: np.ndarray) -> np.ndarray:
    """Spectral pseudo-inverse of a batch of PSD matrices."""
    w, v = sym_eigen_batch(z_covs)
    winv = np.where(w > _SINGULAR_EIG, 1.0 / np.maximum(w, _SINGULAR_EIG), 0.0)
    return np.einsum("bik,bk,bjk->bij", v, winv, v)


def batch_filter_step(
    means: np.ndarray,
    covs: np.ndarray,
    zs: np.ndarray,
    delta: float,
    params: FilterParams,
    gamma_override: np.ndarray | None = None,
    force_mask: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray | None]:
    """Fused trigger decision and measurement update for B filters.

    One spectral factorization of the innovation covariance serves both the
    whitening test and the gain.  Lanes with gamma = 1 apply the Kalman
    update in Joseph form; lanes with gamma = 0 keep the predicted mean and
    attenuate the covariance with beta(delta).  delta = 0 degenerates to
    the explicit update (beta -> 1).

    ``gamma_override`` skips the trigger test and applies the given
    decisions; ``force_mask`` marks lanes that transmit unconditionally.
    Returns (means, covs, gamma, eps) where eps is None under an override.
    """
    z_covs = batch_innovation_cov(covs, params)
    w, v = sym_eigen_batch(z_covs)

    eps = None
    if gamma_override is None:
        proj = np.einsum("bij,bi->bj", v, zs)
        with np.errstate(divide="ignore", invalid="ignore"):
            eps = proj / np.sqrt(np.maximum(w, _SINGULAR_EIG))
        degenerate = w <= _SINGULAR_EIG
        eps = np.where(
            degenerate, np.where(np.abs(proj) <= _EXACT_TOL, 0.0, np.inf), eps
        )
        with np.errstate(invalid="ignore"):
            gamma = np.abs(eps).max(axis=1) > delta
        if force_mask is not None:
            gamma = gamma | force_mask
    else:
        gamma = np.asarray(gamma_override).astype(bool)

    winv = np.where(w > _SINGULAR_EIG, 1.0 / np.maximum(w, _SINGULAR_EIG), 0.0)
    pinv = np.einsum("bik,bk,bjk->bij", v, winv, v)
    k = covs @ params.H.T @ pinv
    wcorr = k @ params.H @ covs
    wcorr = 0.5 * (wcorr + wcorr.transpose(0, 2, 1))

    lam = 1.0 if delta == 0.0 else beta_coefficient(delta)
    g = gamma.astype(float)
    means_out = means + g[:, None] * np.einsum("bij,bj->bi", k, zs)
    ikh = np.eye(params.n) - k @ params.H
    explicit = ikh @ covs @ ikh.transpose(0, 2, 1) + k @ params.R @ k.transpose(0, 2, 1)
    implicit = covs - lam * wcorr
    covs_out = np.where(gamma[:, None, None], explicit, implicit)
    return means_out, 0.5 * (covs_out + covs_out.transpose(0, 2, 1)), gamma, eps


def batch_gain(covs: np.ndarray, z_covs: np.ndarray, params: FilterParams) -> np.ndarray:
    """K = P H^T Z^+ for a batch of prior covariances."""
    return covs @ params.H.T @ _batch_pinv_psd(z_covs).transpose(0, 2, 1)


def batch_g_lambda(
    covs: np.ndarray, lams: np.ndarray, params: FilterParams
) -> np.ndarray:
    """Attenuated measurement update g_lam(P) = P - lam P H^T Z^+ H P."""
    z_covs = batch_innovation_cov(covs, params)
    k = covs @ params.H.T @ _batch_pinv_psd(z_covs)
    w = k @ params.H @ covs
    w = 0.5 * (w + w.transpose(0, 2, 1))
    out = covs - np.asarray(lams).reshape(-1, 1, 1) * w
    return 0.5 * (out + out.transpose(0, 2, 1))


def batch_update(
    means: np.ndarray,
    covs: np.ndarray,
    zs: np.ndarray,
    gammas: np.ndarray,
    delta: float,
    params: FilterParams,
) -> tuple[np.ndarray, np.ndarray]:
    """Measurement update for B filters with the trigger decisions given."""
    means_out, covs_out, _, _ = batch_filter_step(
        means, covs, zs, delta, params, gamma_override=gammas
    )
    return means_out, covs_out


# ---------------------------------------------------------------------------
# single-filter operations


def predict(state: FilterState, u: np.ndarray, params: FilterParams) -> FilterState:
    """Propagate the belief one step under control ``u``."""
    u = np.asarray(u, dtype=float)
    if u.shape != (params.p,):
        raise InputError(f"control must have shape ({params.p},), got {u.shape}")
    means, covs = batch_predict(
        state.belief.mean[None], state.belief.cov[None], u[None], params
    )
    return replace(state, belief=GaussianBelief(means[0], covs[0]))


def decide_trigger(
    state: FilterState, y: np.ndarray, delta: float, params: FilterParams
) -> TriggerDecision:
    """Test whether the measurement ``y`` must be transmitted.

    gamma = 1 iff the sup norm of the whitened innovation exceeds ``delta``;
    ties (exactly on the boundary) do not transmit.
    """
    if not np.isfinite(delta) or delta < 0.0:
        raise InputError(f"trigger threshold must be finite and >= 0, got {delta!r}")
    y = np.asarray(y, dtype=float)
    if y.shape != (params.m,):
        raise InputError(f"measurement must have shape ({params.m},), got {y.shape}")
    z = y - params.H @ state.belief.mean
    z_cov = batch_innovation_cov(state.belief.cov[None], params)[0]
    eps = batch_whiten(z[None], z_cov[None])[0]
    gamma = int(np.abs(eps).max() > delta)
    return TriggerDecision(gamma=gamma, epsilon=eps, innovation=z, innovation_cov=z_cov)


def kalman_gain(p_minus: np.ndarray, params: FilterParams) -> np.ndarray:
    """K = P H^T (R + H P H^T)^{-1}; raises on a singular innovation covariance."""
    p_minus = np.asarray(p_minus, dtype=float)
    z_cov = batch_innovation_cov(p_minus[None], params)
    w, _ = sym_eigen_batch(z_cov)
    if w[0, -1] <= _SINGULAR_EIG:
        raise NumericalError(
            f"innovation covariance is singular (min eigenvalue {w[0, -1]:.3e})"
        )
    return batch_gain(p_minus[None], z_cov, params)[0]


def g_lambda(p_minus: np.ndarray, lam: float, params: FilterParams) -> np.ndarray:
    """Covariance after a measurement update of strength ``lam`` in [0, 1]."""
    if not np.isfinite(lam) or not 0.0 <= lam <= 1.0:
        raise InputError(f"update strength must lie in [0, 1], got {lam!r}")
    p_minus = np.asarray(p_minus, dtype=float)
    return batch_g_lambda(p_minus[None], np.array([lam]), params)[0]


def update(
    state: FilterState,
    decision: TriggerDecision,
    delta: float,
    params: FilterParams,
) -> FilterState:
    """Apply the explicit (gamma = 1) or implicit (gamma = 0) update."""
    means, covs = batch_update(
        state.belief.mean[None],
        state.belief.cov[None],
        decision.innovation[None],
        np.array([decision.gamma]),
        delta,
        params,
    )
    return FilterState(
        belief=GaussianBelief(means[0], covs[0]),
        step_in_segment=state.step_in_segment,
        triggers_in_segment=state.triggers_in_segment + int(decision.gamma),
        mode=state.mode,
    )


def steady_state_kf_covariance(
    params: FilterParams, tol: float = 1e-12, max_iter: int = 100_000
) -> np.ndarray:
    """Fixed point of the full-rate Riccati recursion (posterior covariance).

    Iterates P -> g_1(F P F^T + Q) from P = Q until the max-abs change drops
    below ``tol``.
    """
    p = params.Q.copy()
    for _ in range(max_iter):
        prior = params.F @ p @ params.F.T + params.Q
        post = batch_g_lambda(prior[None], np.array([1.0]), params)[0]
        if np.abs(post - p).max() < tol:
            return post
        p = post
    raise ConvergenceError(
        f"steady-state covariance did not converge within {max_iter} iterations"
    )
