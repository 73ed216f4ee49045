"""Exponential-family distributions with canonical links.

Supported: gaussian/identity, binomial/logit (response is the success
fraction with denominator given by the prior weight), poisson/log.  The
binomial inverse link saturates at [1e-12, 1-1e-12] so the variance
function never returns an exact zero for downstream divisions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .exceptions import DegreesOfFreedomError, DomainError, SupportError

_MU_EPS = 1e-12


@dataclass(frozen=True)
class Family:
    kind: str                       # gaussian | binomial | poisson
    dispersion_mode: str = "auto"   # fixed | estimate | auto

    def __post_init__(self):
        if self.kind not in ("gaussian", "binomial", "poisson"):
            raise DomainError(f"unknown family {self.kind!r}")
        mode = self.dispersion_mode
        if mode == "auto":
            mode = "estimate" if self.kind == "gaussian" else "fixed"
        if mode not in ("fixed", "estimate"):
            raise DomainError(f"unknown dispersion mode {self.dispersion_mode!r}")
        if self.kind in ("binomial", "poisson") and mode == "estimate":
            raise DomainError(f"{self.kind} forces a fixed dispersion of 1")
        object.__setattr__(self, "dispersion_mode", mode)

    @property
    def link(self) -> str:
        return {"gaussian": "identity", "binomial": "logit", "poisson": "log"}[self.kind]

    @property
    def estimates_dispersion(self) -> bool:
        return self.dispersion_mode == "estimate"

    # -- link machinery ------------------------------------------------

    def mean(self, eta: np.ndarray) -> np.ndarray:
        """Inverse link mu = g^{-1}(eta), overflow-safe."""
        eta = np.asarray(eta, dtype=float)
        if self.kind == "gaussian":
            return eta.copy()
        if self.kind == "binomial":
            # expit with saturation guard
            mu = np.empty_like(eta)
            pos = eta >= 0
            mu[pos] = 1.0 / (1.0 + np.exp(-eta[pos]))
            ex = np.exp(eta[~pos])
            mu[~pos] = ex / (1.0 + ex)
            return np.clip(mu, _MU_EPS, 1.0 - _MU_EPS)
        return np.exp(np.clip(eta, -700.0, 700.0))

    def linkfun(self, mu: np.ndarray) -> np.ndarray:
        mu = np.asarray(mu, dtype=float)
        if self.kind == "gaussian":
            return mu.copy()
        if self.kind == "binomial":
            m = np.clip(mu, _MU_EPS, 1.0 - _MU_EPS)
            return np.log(m) - np.log1p(-m)
        return np.log(np.clip(mu, _MU_EPS, None))

    def mean_deriv(self, eta: np.ndarray) -> np.ndarray:
        """d mu / d eta; equals the variance function under a canonical link."""
        return self.unit_variance(self.mean(eta))

    # -- variance ------------------------------------------------------

    def unit_variance(self, mu: np.ndarray) -> np.ndarray:
        """nu(mu) without dispersion or weights."""
        mu = np.asarray(mu, dtype=float)
        self._check_mu(mu)
        if self.kind == "gaussian":
            return np.ones_like(mu)
        if self.kind == "binomial":
            return mu * (1.0 - mu)
        return mu

    def variance(self, mu: np.ndarray, phi: float = 1.0,
                 weights: np.ndarray | float = 1.0) -> np.ndarray:
        """Conditional variance phi * nu(mu) / omega."""
        return phi * self.unit_variance(mu) / np.asarray(weights, dtype=float)

    def _check_mu(self, mu: np.ndarray) -> None:
        if self.kind == "binomial":
            if np.any(mu < 0.0) or np.any(mu > 1.0):
                raise DomainError("binomial mean must lie in [0,1]")
        elif self.kind == "poisson":
            if np.any(mu < 0.0):
                raise DomainError("poisson mean must be nonnegative")

    # -- log density ---------------------------------------------------

    def check_support(self, y: np.ndarray, weights: np.ndarray | float = 1.0) -> None:
        y = np.asarray(y, dtype=float)
        if self.kind == "binomial":
            w = np.broadcast_to(np.asarray(weights, dtype=float), y.shape)
            counts = y * w
            if np.any(y < 0.0) or np.any(y > 1.0) or \
                    np.any(np.abs(counts - np.round(counts)) > 1e-8):
                raise SupportError(
                    "binomial response must be a fraction in [0,1] with "
                    "integral successes given the denominator weight")
        elif self.kind == "poisson":
            if np.any(y < 0.0) or np.any(np.abs(y - np.round(y)) > 1e-8):
                raise SupportError("poisson response must be a nonnegative integer")

    def loglik_obs(self, y: np.ndarray, mu: np.ndarray, phi: float = 1.0,
                   weights: np.ndarray | float = 1.0) -> np.ndarray:
        """Exact per-observation log density (constants included)."""
        y = np.asarray(y, dtype=float)
        mu = np.asarray(mu, dtype=float)
        w = np.broadcast_to(np.asarray(weights, dtype=float), y.shape)
        if self.kind == "gaussian":
            v = phi / w
            return -0.5 * ((y - mu) ** 2 / v + np.log(2.0 * np.pi * v))
        if self.kind == "binomial":
            m = np.clip(mu, _MU_EPS, 1.0 - _MU_EPS)
            c = np.round(y * w)
            return (gammaln(w + 1.0) - gammaln(c + 1.0) - gammaln(w - c + 1.0)
                    + c * np.log(m) + (w - c) * np.log1p(-m))
        # poisson: y is a rate with exposure w, count = w*y
        c = np.round(y * w)
        m = np.clip(mu, _MU_EPS, None)
        return c * np.log(w * m) - w * m - gammaln(c + 1.0)

    def conditional_loglik(self, y, mu, phi: float = 1.0, weights=1.0) -> float:
        """Summed exact log density; raises SupportError off-support."""
        self.check_support(y, weights)
        self._check_mu(np.asarray(mu, dtype=float))
        return float(np.sum(self.loglik_obs(y, mu, phi, weights)))


def estimate_dispersion(pearson_residuals: np.ndarray, dof: int) -> float:
    """phi-hat = sum of squared Pearson residuals over residual dof."""
    if dof <= 0:
        raise DegreesOfFreedomError(f"need positive dof, got {dof}")
    r = np.asarray(pearson_residuals, dtype=float)
    return float(np.sum(r * r) / dof)
