"""Exact Gaussian-mixture ground truth for linear-process flows.

When both endpoint distributions are Gaussian mixtures and the coupling is
independent, everything downstream has a closed form: the marginal of
x_t = a*x0 + sigma*x1 is again a mixture (one component per pair), and the
conditional expectations E[x0 | x_t], E[x1 | x_t] follow from Gaussian
conditioning pair by pair.  These exact quantities are the oracle that the
frame transformations, solvers, and trained networks are tested against.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.special import logsumexp

from vfm.schedules import ScheduleValues

_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class GaussianMixture:
    """Mixture weights, means (k, d), and full covariances (k, d, d)."""

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        m = np.asarray(self.means, dtype=float)
        c = np.asarray(self.covs, dtype=float)
        if w.ndim != 1 or m.ndim != 2 or c.ndim != 3:
            raise ValueError("expected weights (k,), means (k,d), covs (k,d,d)")
        k, d = m.shape
        if w.shape != (k,) or c.shape != (k, d, d):
            raise ValueError("inconsistent mixture shapes")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to 1")
        if not np.allclose(c, np.swapaxes(c, 1, 2), atol=1e-12):
            raise ValueError("covariances must be symmetric")
        np.linalg.cholesky(c)  # raises LinAlgError unless positive definite
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "covs", c)

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @cached_property
    def _chols(self) -> np.ndarray:
        return np.linalg.cholesky(self.covs)

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covs": self.covs.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GaussianMixture":
        return cls(
            np.asarray(data["weights"], dtype=float),
            np.asarray(data["means"], dtype=float),
            np.asarray(data["covs"], dtype=float),
        )


@dataclass(frozen=True)
class PosteriorMoments:
    """Conditional means of the endpoints given x_t, plus pair responsibilities."""

    x0_given_t: np.ndarray
    x1_given_t: np.ndarray
    responsibilities: np.ndarray


def isotropic_gaussian(mean, var: float = 1.0) -> GaussianMixture:
    """Single-component helper: N(mean, var*I)."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    d = mean.shape[0]
    return GaussianMixture(
        np.array([1.0]), mean[None, :], (var * np.eye(d))[None, :, :]
    )


def marginal_mixture(
    p0: GaussianMixture, p1: GaussianMixture, sv: ScheduleValues
) -> GaussianMixture:
    """Mixture of a*X0 + sigma*X1 under independent coupling.

    One component per endpoint-component pair (i, j): weight w0_i*w1_j,
    mean a*mu0_i + sigma*mu1_j, covariance a^2*S0_i + sigma^2*S1_j.
    """
    if p0.dim != p1.dim:
        raise ValueError("p0 and p1 must have the same dimension")
    a, s = float(sv.a), float(sv.sigma)
    w = (p0.weights[:, None] * p1.weights[None, :]).reshape(-1)
    m = (a * p0.means[:, None, :] + s * p1.means[None, :, :]).reshape(-1, p0.dim)
    c = (
        a * a * p0.covs[:, None, :, :] + s * s * p1.covs[None, :, :, :]
    ).reshape(-1, p0.dim, p0.dim)
    return GaussianMixture(w, m, c)


def _as_batch(x: np.ndarray, dim: int):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        if x.shape[0] != dim:
            raise ValueError("x has wrong dimension")
        return x[None, :], True
    if x.ndim != 2 or x.shape[1] != dim:
        raise ValueError("x must be (d,) or (n, d)")
    return x, False


def _pair_stats(p0, p1, sv, x):
    """Per-pair log responsibilities, conditional means, and score pieces.

    Returns (log_resp (n,K), e0 (K,n,d), e1 (K,n,d), neg_grad (K,n,d)) where
    neg_grad_k = C_k^-1 (x - m_k).
    """
    if p0.dim != p1.dim:
        raise ValueError("p0 and p1 must have the same dimension")
    a, s = float(sv.a), float(sv.sigma)
    d = p0.dim
    k0, k1 = p0.n_components, p1.n_components
    logw = (
        np.log(p0.weights)[:, None] + np.log(p1.weights)[None, :]
    ).reshape(-1)

    n = x.shape[0]
    big_k = k0 * k1
    log_pdf = np.empty((n, big_k))
    e0 = np.empty((big_k, n, d))
    e1 = np.empty((big_k, n, d))
    whitened = np.empty((big_k, n, d))
    for i in range(k0):
        for j in range(k1):
            k = i * k1 + j
            mean = a * p0.means[i] + s * p1.means[j]
            cov = a * a * p0.covs[i] + s * s * p1.covs[j]
            chol = np.linalg.cholesky(cov)
            diff = x - mean
            # solve C z = diff via the Cholesky factor
            y = np.linalg.solve(chol, diff.T)
            z = np.linalg.solve(chol.T, y).T
            logdet = 2.0 * np.sum(np.log(np.diag(chol)))
            log_pdf[:, k] = -0.5 * np.einsum("nd,nd->n", diff, z) - 0.5 * (
                logdet + d * _LOG_2PI
            )
            whitened[k] = z
            e0[k] = p0.means[i] + a * z @ p0.covs[i]
            e1[k] = p1.means[j] + s * z @ p1.covs[j]
    log_resp = logw[None, :] + log_pdf
    log_resp = log_resp - logsumexp(log_resp, axis=1, keepdims=True)
    return log_resp, e0, e1, whitened


def posterior_moments(
    p0: GaussianMixture, p1: GaussianMixture, sv: ScheduleValues, x
) -> PosteriorMoments:
    """E[X0 | x_t] and E[X1 | x_t] by exact Gaussian conditioning per pair."""
    xb, single = _as_batch(x, p0.dim)
    log_resp, e0, e1, _ = _pair_stats(p0, p1, sv, xb)
    resp = np.exp(log_resp)
    x0 = np.einsum("nk,knd->nd", resp, e0)
    x1 = np.einsum("nk,knd->nd", resp, e1)
    if single:
        return PosteriorMoments(x0[0], x1[0], resp[0])
    return PosteriorMoments(x0, x1, resp)


def posterior_velocity(
    p0: GaussianMixture, p1: GaussianMixture, sv: ScheduleValues, x
) -> np.ndarray:
    """Exact flow velocity a_dot*E[X0|x_t] + sigma_dot*E[X1|x_t]."""
    mom = posterior_moments(p0, p1, sv, x)
    return sv.a_dot * mom.x0_given_t + sv.sigma_dot * mom.x1_given_t


def score(
    p0: GaussianMixture, p1: GaussianMixture, sv: ScheduleValues, x
) -> np.ndarray:
    """Gradient of the log marginal density of x_t."""
    xb, single = _as_batch(x, p0.dim)
    log_resp, _, _, whitened = _pair_stats(p0, p1, sv, xb)
    resp = np.exp(log_resp)
    grad = -np.einsum("nk,knd->nd", resp, whitened)
    return grad[0] if single else grad


def log_density(g: GaussianMixture, x) -> np.ndarray:
    """Log density of a mixture at x ((d,) or (n, d))."""
    xb, single = _as_batch(x, g.dim)
    n = xb.shape[0]
    parts = np.empty((n, g.n_components))
    for k in range(g.n_components):
        chol = g._chols[k]
        diff = xb - g.means[k]
        y = np.linalg.solve(chol, diff.T).T
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        parts[:, k] = (
            np.log(g.weights[k])
            - 0.5 * np.einsum("nd,nd->n", y, y)
            - 0.5 * (logdet + g.dim * _LOG_2PI)
        )
    out = logsumexp(parts, axis=1)
    return float(out[0]) if single else out


def sample_mixture(g: GaussianMixture, n: int, seed: int) -> np.ndarray:
    """n i.i.d. draws; component choice then a Cholesky transform of normals.

    Deterministic for a given seed: the component indices and the standard
    normal block are drawn in a fixed order.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    comps = rng.choice(g.n_components, size=n, p=g.weights)
    z = rng.standard_normal((n, g.dim))
    chols = g._chols
    return g.means[comps] + np.einsum("nij,nj->ni", chols[comps], z)
