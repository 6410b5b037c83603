"""Noise geometry, diffusion schedule and denoisers in the whitened latent space.

Latents and coordinates are ``(n_atoms, 3)`` arrays; the covariance factor acts
along the atom axis, identically for each Cartesian axis.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np
from scipy.special import logsumexp
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .geometry import Backbone


class DivergenceError(FloatingPointError):
    """Non-finite state encountered inside an iterative sampler."""

    def __init__(self, message: str, step: int, last_finite=None):
        super().__init__(f"step {step}: {message}")
        self.step = step
        self.last_finite = last_finite


@dataclass(frozen=True)
class CovarianceFactor:
    """The matrix R shaping the diffusion noise, ``x = R z``.

    ``identity``: R = scale * I.
    ``chain``: R = scale * L with L the lower-triangular matrix of ones, so
    white latent noise becomes a random walk along the chain of atoms.
    """

    kind: str = "identity"
    n_atoms: int = 1
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("identity", "chain"):
            raise ValueError(f"unknown covariance kind {self.kind!r}")
        if self.n_atoms < 1 or not self.scale > 0:
            raise ValueError("n_atoms must be positive and scale > 0")

    def _check(self, a) -> np.ndarray:
        a = np.asarray(a, dtype=float)
        if a.ndim == 1:
            a = a.reshape(-1, 3)
        if a.shape[0] != self.n_atoms:
            raise ValueError(f"expected {self.n_atoms} atoms, got {a.shape[0]}")
        return a

    def apply(self, z) -> np.ndarray:
        """R z."""
        z = self._check(z)
        if self.kind == "identity":
            return self.scale * z
        return self.scale * np.cumsum(z, axis=0)

    def solve(self, x) -> np.ndarray:
        """R^-1 x."""
        x = self._check(x)
        if self.kind == "identity":
            return x / self.scale
        return np.diff(x, axis=0, prepend=0.0) / self.scale

    def apply_transpose(self, u) -> np.ndarray:
        """R^T u."""
        u = self._check(u)
        if self.kind == "identity":
            return self.scale * u
        return self.scale * np.cumsum(u[::-1], axis=0)[::-1]

    def matrix(self) -> np.ndarray:
        if self.kind == "identity":
            return self.scale * np.eye(self.n_atoms)
        return self.scale * np.tril(np.ones((self.n_atoms, self.n_atoms)))

    def norm(self) -> float:
        """Spectral norm of R."""
        if self.kind == "identity":
            return self.scale
        # L^T L has a closed-form spectrum: 1 / (4 sin^2((2k-1) pi / (4n + 2)))
        n = self.n_atoms
        return self.scale / (2.0 * np.sin(np.pi / (4 * n + 2)))


def whiten(x, cov: CovarianceFactor) -> np.ndarray:
    if isinstance(x, Backbone):
        x = x.coords
    return cov.solve(x)


def unwhiten(z, cov: CovarianceFactor) -> np.ndarray:
    return cov.apply(z)


class NoiseSchedule:
    """Discrete variance-preserving schedule with linear beta.

    Index ``t`` runs over ``0..n_steps``; ``alpha_bar[0] = 1``. The corruption
    at step t is ``z_t = sqrt(alpha_bar[t]) z_0 + tau[t] eps``.
    """

    def __init__(self, n_steps: int = 200, beta_min: float = 1e-4, beta_max: float = 0.05):
        if n_steps < 1:
            raise ValueError("n_steps must be positive")
        if not 0 < beta_min <= beta_max:
            raise ValueError("need 0 < beta_min <= beta_max")
        self.n_steps = n_steps
        self.beta_min = beta_min
        self.beta_max = beta_max
        beta = np.zeros(n_steps + 1)
        beta[1:] = np.linspace(beta_min, beta_max, n_steps)
        self.beta = beta
        self.alpha_bar = np.exp(-np.cumsum(beta))
        self.tau = np.sqrt(-np.expm1(-np.cumsum(beta)))

    def __repr__(self):
        return f"NoiseSchedule(n_steps={self.n_steps}, beta_min={self.beta_min}, beta_max={self.beta_max})"

    def t_norm(self, t: int) -> float:
        return t / self.n_steps

    def retention(self, t: int) -> float:
        """One forward step t-1 -> t: signal factor sqrt(alpha_bar[t] / alpha_bar[t-1])."""
        return float(np.exp(-0.5 * self.beta[t]))

    def increment_std(self, t: int) -> float:
        """One forward step t-1 -> t: std of the fresh noise."""
        return float(np.sqrt(-np.expm1(-self.beta[t])))

    def alpha_step(self, t: int) -> float:
        """Mean factor of the ancestral draw ``z_{t-1} ~ N(alpha z0_hat, tau^2 I)``."""
        return float(np.sqrt(self.alpha_bar[t - 1]))

    def tau_step(self, t: int) -> float:
        """Std of the ancestral draw; zero at t = 1."""
        return float(self.tau[t - 1])


class Denoiser(Protocol):
    """Maps a whitened latent ``z_t`` at step ``t`` to an estimate of ``z_0``."""

    def __call__(self, z_t: np.ndarray, t: int) -> np.ndarray: ...


class CoordinateDenoiser:
    """Adapts a coordinate-space denoiser ``D(x_t, t)`` to whitened latents."""

    def __init__(self, fn: Callable[[np.ndarray, int], np.ndarray], cov: CovarianceFactor):
        self.fn = fn
        self.cov = cov

    def __call__(self, z_t, t):
        return self.cov.solve(self.fn(self.cov.apply(z_t), t))


class GaussianMixturePrior(BaseEstimator):
    """Isotropic Gaussian mixture over whitened backbones.

    Fitting on a library of reference backbones places one component at the
    whitened version of each. The exact posterior mean under the schedule's
    Gaussian corruption serves as the denoiser.

    Parameters
    ----------
    component_std : float
        Per-coordinate std of each component in whitened units.
    covariance : CovarianceFactor, optional
        Defaults to the identity on the fitted atom count.
    schedule : NoiseSchedule, optional
    weights : array-like, optional
        Component weights; uniform when omitted.
    """

    def __init__(self, component_std=0.5, covariance=None, schedule=None, weights=None):
        self.component_std = component_std
        self.covariance = covariance
        self.schedule = schedule
        self.weights = weights

    def fit(self, X, y=None):
        refs = [b.coords if isinstance(b, Backbone) else np.asarray(b, dtype=float).reshape(-1, 3) for b in X]
        if not refs:
            raise ValueError("prior library is empty")
        n_atoms = refs[0].shape[0]
        if any(r.shape[0] != n_atoms for r in refs):
            raise ValueError("library backbones differ in length")
        if not self.component_std > 0:
            raise ValueError("component_std must be positive")
        self.covariance_ = self.covariance or CovarianceFactor("identity", n_atoms)
        self.schedule_ = self.schedule or NoiseSchedule()
        self.means_ = np.stack([self.covariance_.solve(r) for r in refs])
        w = np.ones(len(refs)) if self.weights is None else np.asarray(self.weights, dtype=float)
        if w.shape != (len(refs),) or np.any(w <= 0):
            raise ValueError("weights must be positive, one per component")
        self.weights_ = w / w.sum()
        return self

    @classmethod
    def from_means(cls, means, component_std, schedule=None, weights=None, covariance=None):
        """Build directly from whitened component means."""
        means = np.asarray(means, dtype=float)
        prior = cls(component_std, covariance=covariance, schedule=schedule, weights=weights)
        cov = covariance or CovarianceFactor("identity", means.shape[1])
        return prior.fit([cov.apply(m) for m in means])

    def log_responsibilities(self, z_t, t) -> np.ndarray:
        check_is_fitted(self)
        ab = self.schedule_.alpha_bar[t]
        var = ab * self.component_std**2 + self.schedule_.tau[t] ** 2
        d2 = np.sum((z_t[None] - np.sqrt(ab) * self.means_) ** 2, axis=(1, 2))
        logits = np.log(self.weights_) - 0.5 * d2 / var
        return logits - logsumexp(logits)

    def __call__(self, z_t, t):
        return mixture_denoise(z_t, t, self)

    def posterior_std(self, t) -> float:
        """Per-coordinate std of ``z_0`` given ``z_t`` within one component.

        Approaches ``tau_t`` as ``t -> 0`` and ``component_std`` for large t.
        """
        check_is_fitted(self)
        ab = self.schedule_.alpha_bar[t]
        s2 = self.component_std**2
        tau2 = self.schedule_.tau[t] ** 2
        var = ab * s2 + tau2
        return float(np.sqrt(s2 * tau2 / var)) if var > 0 else 0.0

    def sample(self, rng) -> np.ndarray:
        check_is_fitted(self)
        k = rng.choice(len(self.weights_), p=self.weights_)
        return self.means_[k] + self.component_std * rng.standard_normal(self.means_[k].shape)


def mixture_denoise(z_t, t, prior: GaussianMixturePrior, sched: NoiseSchedule | None = None) -> np.ndarray:
    """Posterior mean E[z_0 | z_t] under a Gaussian mixture prior."""
    check_is_fitted(prior)
    sched = sched or prior.schedule_
    z_t = np.asarray(z_t, dtype=float)
    ab = sched.alpha_bar[t]
    s2 = prior.component_std**2
    var = ab * s2 + sched.tau[t] ** 2
    if var == 0.0:
        return z_t.copy()
    sa = np.sqrt(ab)
    d = z_t[None] - sa * prior.means_
    logits = np.log(prior.weights_) - 0.5 * np.sum(d * d, axis=(1, 2)) / var
    resp = np.exp(logits - logsumexp(logits))
    # per-component posterior mean: m_k + sqrt(ab) s^2 / var * (z_t - sqrt(ab) m_k)
    mean_part = np.tensordot(resp, prior.means_, axes=1)
    return mean_part + (sa * s2 / var) * (z_t - sa * mean_part)


def unconditional_sample(
    denoiser,
    sched: NoiseSchedule,
    shape,
    lambda0: float = 1.0,
    psi: float = 0.0,
    lambda_t=None,
    seed=None,
    noise_scale: float = 1.0,
    cov: CovarianceFactor | None = None,
):
    """Euler-Maruyama integration of the hybrid Langevin reverse SDE.

    Runs in whitened coordinates, where R R^T acting on the coordinate score
    becomes the identity on the latent score. ``lambda_t`` is a per-step table
    indexed ``1..T`` (or a scalar); default constant 1. Returns the final latent,
    or coordinates when ``cov`` is given.
    """
    rng = np.random.default_rng(seed)
    T = sched.n_steps
    lam = np.ones(T + 1)
    if lambda_t is not None:
        lt = np.asarray(lambda_t, dtype=float)
        lam[1:] = lt if lt.ndim == 0 else lt[-T:]
    z = rng.standard_normal(shape)
    for t in range(T, 0, -1):
        beta = sched.beta[t]
        z0 = denoiser(z, t)
        score = (np.sqrt(sched.alpha_bar[t]) * z0 - z) / sched.tau[t] ** 2
        drift = -0.5 * z - (lam[t] + 0.5 * lambda0 * psi) * score
        z = z - beta * drift + noise_scale * np.sqrt(beta * (1.0 + psi)) * rng.standard_normal(shape)
        if not np.all(np.isfinite(z)):
            raise DivergenceError("non-finite latent in unconditional sampler", t)
    return cov.apply(z) if cov is not None else z
