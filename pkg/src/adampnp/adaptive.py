"""Online per-modality noise estimation and precision weighting."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# median of the chi-square distribution with one degree of freedom
CHI2_1_MEDIAN = 0.454936423119572
DEFAULT_KAPPA = 1.0 / CHI2_1_MEDIAN
DEFAULT_GAMMA = 1.25


def median_residual_variance(y, f_of_z0, kappa: float = DEFAULT_KAPPA) -> float:
    """``kappa * median((y - f)^2)``; ``kappa = 1`` gives the raw median."""
    r = np.asarray(y, dtype=float).ravel() - np.asarray(f_of_z0, dtype=float).ravel()
    if r.size == 0:
        raise ValueError("empty residual")
    return float(kappa * np.median(r * r))


@dataclass
class AdaptiveState:
    """Running noise estimates and weights for ``M`` modalities.

    ``lipschitz`` holds one constant per modality for the bias correction.
    ``sigma_hat_sq`` entries are ``nan`` until the first update.
    """

    lipschitz: np.ndarray
    gamma: float = DEFAULT_GAMMA
    epsilon: float = 1e-6
    ema_decay: float = 0.9
    kappa: float = DEFAULT_KAPPA
    sigma_hat_sq: np.ndarray = field(default=None)
    raw: np.ndarray = field(default=None)
    weights: np.ndarray = field(default=None)

    def __post_init__(self):
        self.lipschitz = np.asarray(self.lipschitz, dtype=float).ravel()
        if self.gamma < 0 or self.epsilon <= 0:
            raise ValueError("need gamma >= 0 and epsilon > 0")
        if not 0 <= self.ema_decay < 1:
            raise ValueError("ema_decay must lie in [0, 1)")
        m = self.n_modalities
        if self.sigma_hat_sq is None:
            self.sigma_hat_sq = np.full(m, np.nan)
        if self.raw is None:
            self.raw = np.full(m, np.nan)
        if self.weights is None:
            self.weights = np.ones(m)

    @property
    def n_modalities(self) -> int:
        return len(self.lipschitz)

    @property
    def sigma_hat(self) -> np.ndarray:
        return np.sqrt(self.sigma_hat_sq)


def bias_corrected_update(state: AdaptiveState, i: int, sigma_tilde_sq: float, t: float, tau_t: float) -> AdaptiveState:
    """Subtract the annealed denoiser-error bias, floor at epsilon, then EMA.

    ``t`` is normalized diffusion time in [0, 1]. The first call for a
    modality initializes its EMA to the floored value. Updates in place and
    returns the state.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must be normalized to [0, 1]")
    if tau_t < 0:
        raise ValueError("tau_t must be nonnegative")
    bias = state.gamma * (1.0 - t) * (state.lipschitz[i] * tau_t) ** 2
    raw = max(state.epsilon, sigma_tilde_sq - bias)
    state.raw[i] = raw
    prev = state.sigma_hat_sq[i]
    if np.isnan(prev):
        state.sigma_hat_sq[i] = raw
    else:
        state.sigma_hat_sq[i] = state.ema_decay * prev + (1.0 - state.ema_decay) * raw
    return state


def dynamic_weights(sigma_hat_sq, epsilon: float = 1e-6, n_modalities: int | None = None) -> np.ndarray:
    """Precision weights ``1 / (sigma^2 + eps)`` rescaled to sum to ``M``.

    Infinite variances receive zero weight.
    """
    s = np.asarray(sigma_hat_sq, dtype=float).ravel()
    if np.any(np.isnan(s)):
        raise ValueError("noise estimates not initialized")
    m = len(s) if n_modalities is None else n_modalities
    prec = 1.0 / (s + epsilon)
    total = prec.sum()
    if not total > 0:
        raise ValueError("all modalities have infinite variance")
    w = prec * (m / total)
    # renormalize once more so the sum is M to the last ulp or two
    return w * (m / w.sum())


def update_weights(state: AdaptiveState) -> np.ndarray:
    state.weights = dynamic_weights(state.sigma_hat_sq, state.epsilon)
    return state.weights
