"""Numerical primitives: symmetric eigendecompositions, Gaussian tail
quantities, the measurement-attenuation coefficient, and seeded sampling.

The eigensolver is a self-contained cyclic Jacobi iteration rather than a
LAPACK call.  The matrices here are tiny (state dimension 2 or 3) and appear
inside hot Monte-Carlo loops, so the solver is written to accept a whole
batch of matrices at once; a single matrix is just a batch of one.  Jacobi
also gives us bitwise-reproducible output for a fixed sweep order, which the
reproducibility guarantees elsewhere lean on.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, InputError, NumericalError

__all__ = [
    "EigenDecomposition",
    "GaussianBelief",
    "RngStream",
    "beta_coefficient",
    "expected_trigger_rate",
    "gaussian_tail_q",
    "sample_gaussian",
    "sym_eigen",
    "sym_eigen_batch",
    "whiten_innovation",
]

_JACOBI_REL_TOL = 1e-12
_JACOBI_MAX_SWEEPS = 100

# ---------------------------------------------------------------------------
# eigendecomposition


@dataclass
class EigenDecomposition:
    """Spectral factorization S = V diag(w) V^T.

    ``eigenvalues`` is sorted in descending order and ``eigenvectors`` holds
    the matching orthonormal eigenvectors as columns.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def _off_diagonal_norm(a: np.ndarray) -> np.ndarray:
    """Frobenius norm of the strictly off-diagonal part, per batch entry."""
    off = a.copy()
    n = a.shape[-1]
    off[:, np.arange(n), np.arange(n)] = 0.0
    return np.sqrt((off * off).sum(axis=(1, 2)))


def _jacobi_rotate(a: np.ndarray, v: np.ndarray, p: int, q: int) -> None:
    """Apply one cyclic-Jacobi rotation in the (p, q) plane to every batch
    entry of ``a`` in place, accumulating the rotations into ``v``."""
    apq = a[:, p, q]
    rotate = apq != 0.0
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        tau = (a[:, q, q] - a[:, p, p]) / (2.0 * apq)
        sign = np.where(tau >= 0.0, 1.0, -1.0)
        t = sign / (np.abs(tau) + np.sqrt(1.0 + tau * tau))
        t = np.where(np.isfinite(t), t, 0.0)
    t = np.where(rotate, t, 0.0)
    c = 1.0 / np.sqrt(1.0 + t * t)
    s = t * c

    cc = c[:, None]
    ss = s[:, None]
    rp = a[:, p, :].copy()
    rq = a[:, q, :].copy()
    a[:, p, :] = cc * rp - ss * rq
    a[:, q, :] = ss * rp + cc * rq
    cp = a[:, :, p].copy()
    cq = a[:, :, q].copy()
    a[:, :, p] = cc * cp - ss * cq
    a[:, :, q] = ss * cp + cc * cq
    # The rotation zeroes (p, q) analytically; enforce it to stop roundoff
    # from re-seeding the entry we just eliminated.
    a[:, p, q] = np.where(rotate, 0.0, a[:, p, q])
    a[:, q, p] = a[:, p, q]

    vp = v[:, :, p].copy()
    vq = v[:, :, q].copy()
    v[:, :, p] = cc * vp - ss * vq
    v[:, :, q] = ss * vp + cc * vq


def sym_eigen_batch(mats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecompose a batch of small symmetric matrices.

    Parameters
    ----------
    mats : (B, n, n) array
        Symmetric matrices.  Mild asymmetry is removed by averaging with the
        transpose before iterating.

    Returns
    -------
    (eigenvalues, eigenvectors)
        ``eigenvalues`` has shape (B, n), sorted descending per entry;
        ``eigenvectors`` has shape (B, n, n) with columns matching the order.
        Each eigenvector's sign is fixed so its largest-magnitude component
        is positive, which makes the output deterministic.
    """
    a = np.asarray(mats, dtype=float)
    if a.ndim != 3 or a.shape[1] != a.shape[2]:
        raise InputError(f"expected a (B, n, n) batch, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise InputError("matrix batch contains non-finite entries")
    a = 0.5 * (a + a.transpose(0, 2, 1))
    b, n, _ = a.shape

    v = np.broadcast_to(np.eye(n), (b, n, n)).copy()
    if n == 1:
        return a[:, :, 0].copy(), v

    norm = np.sqrt((a * a).sum(axis=(1, 2)))
    tol = _JACOBI_REL_TOL * np.maximum(norm, np.finfo(float).tiny)
    for _ in range(_JACOBI_MAX_SWEEPS):
        if (_off_diagonal_norm(a) <= tol).all():
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                _jacobi_rotate(a, v, p, q)
    else:
        worst = float((_off_diagonal_norm(a) / np.maximum(norm, 1e-300)).max())
        if worst > 1e-6:
            raise ConvergenceError(
                f"Jacobi sweep budget exhausted (relative off-diagonal {worst:.3e})"
            )

    w = a[:, np.arange(n), np.arange(n)].copy()
    order = np.argsort(-w, axis=1, kind="stable")
    w = np.take_along_axis(w, order, axis=1)
    v = np.take_along_axis(v, order[:, None, :], axis=2)

    # sign convention: largest-|entry| component of each column positive
    peak = np.argmax(np.abs(v), axis=1)
    peak_vals = np.take_along_axis(v, peak[:, None, :], axis=1)[:, 0, :]
    v *= np.where(peak_vals < 0.0, -1.0, 1.0)[:, None, :]
    return w, v


def sym_eigen(mat: np.ndarray) -> EigenDecomposition:
    """Eigendecompose one small symmetric matrix (see ``sym_eigen_batch``)."""
    m = np.asarray(mat, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise InputError(f"expected a square matrix, got shape {m.shape}")
    w, v = sym_eigen_batch(m[None])
    return EigenDecomposition(eigenvalues=w[0], eigenvectors=v[0])


# ---------------------------------------------------------------------------
# Gaussian tail quantities


def gaussian_tail_q(delta: float) -> float:
    """Upper-tail probability Q(delta) = P[X > delta] for X ~ N(0, 1)."""
    d = float(delta)
    if not math.isfinite(d) or d < 0.0:
        raise InputError(f"tail threshold must be finite and >= 0, got {delta!r}")
    return 0.5 * math.erfc(d / math.sqrt(2.0))


def expected_trigger_rate(delta: float, m: int) -> float:
    """Probability that at least one of ``m`` independent standard-normal
    innovation components exceeds ``delta`` in magnitude.

    Each component stays inside [-delta, delta] with probability
    1 - 2 Q(delta) = erf(delta / sqrt(2)), so the trigger rate is
    1 - erf(delta / sqrt(2))**m.
    """
    d = float(delta)
    if not math.isfinite(d) or d < 0.0:
        raise InputError(f"threshold must be finite and >= 0, got {delta!r}")
    if not isinstance(m, (int, np.integer)) or m < 1:
        raise InputError(f"component count must be a positive integer, got {m!r}")
    return 1.0 - math.erf(d / math.sqrt(2.0)) ** m


def beta_coefficient(delta: float) -> float:
    """Variance-attenuation coefficient of a censored standard normal.

    For X ~ N(0, 1), beta(delta) = E[X^2 | |X| <= delta]; equivalently
    sqrt(2/pi) * delta * exp(-delta^2 / 2) / erf(delta / sqrt(2)).  Written
    with erf rather than 1 - 2 Q(delta) so small thresholds do not lose
    precision to cancellation.  beta decreases from 1 (delta -> 0) toward 0.
    """
    d = float(delta)
    if not math.isfinite(d) or d <= 0.0:
        raise InputError(f"threshold must be finite and > 0, got {delta!r}")
    num = math.sqrt(2.0 / math.pi) * d * math.exp(-0.5 * d * d)
    den = math.erf(d / math.sqrt(2.0))
    if den == 0.0:  # pragma: no cover - requires denormal delta
        return 1.0
    return num / den


# ---------------------------------------------------------------------------
# innovation whitening


def whiten_innovation(z: np.ndarray, innovation_cov: np.ndarray) -> np.ndarray:
    """Map an innovation to unit covariance: eps = diag(w)^(-1/2) V^T z.

    ``innovation_cov`` must be symmetric positive definite; a minimum
    eigenvalue at or below 1e-12 raises :class:`NumericalError`.
    """
    z = np.asarray(z, dtype=float)
    eig = sym_eigen(innovation_cov)
    wmin = float(eig.eigenvalues[-1])
    if wmin <= 1e-12:
        raise NumericalError(
            f"innovation covariance is singular (min eigenvalue {wmin:.3e})"
        )
    return (eig.eigenvectors.T @ z) / np.sqrt(eig.eigenvalues)


# ---------------------------------------------------------------------------
# beliefs and sampling


@dataclass
class GaussianBelief:
    """Gaussian state estimate with mean vector and covariance matrix."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.cov = np.asarray(self.cov, dtype=float)
        if self.mean.ndim != 1:
            raise InputError(f"belief mean must be a vector, got shape {self.mean.shape}")
        n = self.mean.shape[0]
        if self.cov.shape != (n, n):
            raise InputError(
                f"belief covariance shape {self.cov.shape} does not match mean dimension {n}"
            )
        if not (np.isfinite(self.mean).all() and np.isfinite(self.cov).all()):
            raise InputError("belief contains non-finite entries")
        self.cov = 0.5 * (self.cov + self.cov.T)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


class RngStream:
    """Counter-based random stream with named, hash-derived substreams.

    The generator key is a BLAKE2b digest of ``(seed, label)``, so any
    (seed, label) pair maps to the same stream on every platform and the
    stream for one label never depends on how many draws another label made.
    """

    def __init__(self, seed: int, label: str = "root"):
        if not isinstance(seed, (int, np.integer)):
            raise InputError(f"seed must be an integer, got {seed!r}")
        self.seed = int(seed)
        self.label = label
        digest = hashlib.blake2b(
            f"{self.seed}\x1f{label}".encode(), digest_size=16
        ).digest()
        self._gen = np.random.Generator(
            np.random.Philox(key=int.from_bytes(digest, "little"))
        )

    def substream(self, label: str) -> RngStream:
        """Derive an independent stream for ``label`` under the same seed."""
        return RngStream(self.seed, f"{self.label}/{label}")

    def standard_normal(self, shape=None) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, shape=None) -> np.ndarray:
        return self._gen.random(shape)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def __repr__(self):  # pragma: no cover - debugging aid
        return f"RngStream(seed={self.seed}, label={self.label!r})"


def covariance_sqrt(cov: np.ndarray, floor: float = 0.0) -> np.ndarray:
    """Spectral square root V diag(sqrt(max(w, floor))) of a PSD matrix.

    Eigenvalues in [-1e-9, 0) are treated as roundoff and clipped to zero;
    anything below -1e-9 raises :class:`InputError`.
    """
    eig = sym_eigen(cov)
    wmin = float(eig.eigenvalues[-1])
    if wmin < -1e-9:
        raise InputError(
            f"covariance is not positive semidefinite (min eigenvalue {wmin:.3e})"
        )
    w = np.maximum(eig.eigenvalues, floor)
    return eig.eigenvectors * np.sqrt(np.maximum(w, 0.0))


def sample_gaussian(
    mean: np.ndarray, cov: np.ndarray, rng: RngStream, size: int | None = None
) -> np.ndarray:
    """Draw from N(mean, cov) through the spectral square root.

    Returns shape (n,) when ``size`` is None, else (size, n).  Semidefinite
    covariances are fine: a zero eigenvalue simply contributes no spread.
    """
    mean = np.asarray(mean, dtype=float)
    root = covariance_sqrt(cov)
    n = mean.shape[0]
    if size is None:
        return mean + root @ rng.standard_normal(n)
    return mean + rng.standard_normal((size, n)) @ root.T
