"""Working correlation structures and residual-moment estimation of rho.

Structures: independent, exchangeable, AR-1.  Matrices are built per
subject (block size m may vary), with analytic inverses so GEE weighting
never factorizes an m x m matrix numerically.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .exceptions import EstimationError, ParameterError

STRUCTURES = ("independent", "exchangeable", "ar1")
_MARGIN = 1e-6


@dataclass(frozen=True)
class CorrelationSpec:
    structure: str = "independent"
    rho: float = 0.0

    def __post_init__(self):
        if self.structure not in STRUCTURES:
            raise ParameterError(f"unknown correlation structure {self.structure!r}")
        if self.structure == "independent" and self.rho != 0.0:
            raise ParameterError("independent structure requires rho = 0")

    def with_rho(self, rho: float) -> "CorrelationSpec":
        return replace(self, rho=float(rho))

    def rho_bounds(self, m_max: int) -> tuple[float, float]:
        """Open interval of valid rho for block sizes up to m_max."""
        if self.structure == "ar1":
            return -1.0, 1.0
        if self.structure == "exchangeable":
            lo = -1.0 / (m_max - 1) if m_max > 1 else -1.0
            return lo, 1.0
        return 0.0, 0.0

    def validate_rho(self, m: int) -> None:
        if self.structure == "independent":
            return
        lo, hi = self.rho_bounds(m)
        if not (lo < self.rho < hi):
            raise ParameterError(
                f"rho={self.rho} outside valid range ({lo}, {hi}) for "
                f"{self.structure} with block size {m}")


def correlation_matrix(spec: CorrelationSpec, m: int) -> np.ndarray:
    """R(rho) of size m x m: identity, equicorrelated, or rho^|j-j'|."""
    if m < 1:
        raise ParameterError(f"block size must be >= 1, got {m}")
    spec.validate_rho(m)
    if spec.structure == "independent" or m == 1:
        return np.eye(m)
    if spec.structure == "exchangeable":
        R = np.full((m, m), spec.rho)
        np.fill_diagonal(R, 1.0)
        return R
    idx = np.arange(m)
    return spec.rho ** np.abs(idx[:, None] - idx[None, :])


def correlation_inverse(spec: CorrelationSpec, m: int) -> np.ndarray:
    """Closed-form R(rho)^{-1}; tridiagonal for AR-1."""
    if m < 1:
        raise ParameterError(f"block size must be >= 1, got {m}")
    spec.validate_rho(m)
    rho = spec.rho
    if spec.structure == "independent" or m == 1 or rho == 0.0:
        return np.eye(m)
    if spec.structure == "exchangeable":
        # (a I + b J)^{-1} with a = 1-rho, b = rho
        a = 1.0 - rho
        denom = a * (1.0 + (m - 1) * rho)
        return np.eye(m) / a - (rho / denom) * np.ones((m, m))
    inv = np.zeros((m, m))
    c = 1.0 / (1.0 - rho * rho)
    diag = np.full(m, (1.0 + rho * rho) * c)
    diag[0] = diag[-1] = c
    np.fill_diagonal(inv, diag)
    off = -rho * c
    idx = np.arange(m - 1)
    inv[idx, idx + 1] = off
    inv[idx + 1, idx] = off
    return inv


def clamp_rho(rho: float, structure: str, m_max: int) -> float:
    """Clamp a moment estimate into the structure's valid open range."""
    if structure == "exchangeable":
        lo = -1.0 / (m_max - 1) if m_max > 1 else -1.0
        return float(np.clip(rho, lo + _MARGIN, 1.0 - _MARGIN))
    return float(np.clip(rho, -1.0 + _MARGIN, 1.0 - _MARGIN))


def estimate_rho(residual_blocks: list[np.ndarray], structure: str,
                 phi: float | None = None) -> float:
    """Method-of-moments rho from per-subject Pearson residual vectors.

    exchangeable:  sum over within-subject pairs r_j r_j' divided by
                   phi * sum_i n_i(n_i-1)/2
    ar1:           sum over adjacent products r_j r_{j+1} divided by
                   phi * sum_i (n_i - 1)

    phi defaults to the mean squared residual, which makes the estimate
    invariant to rescaling all residuals.  The result is clamped into the
    structure's valid open range with a 1e-6 margin.
    """
    if structure == "independent":
        return 0.0
    if structure not in STRUCTURES:
        raise ParameterError(f"unknown correlation structure {structure!r}")
    blocks = [np.asarray(b, dtype=float).ravel() for b in residual_blocks]
    sizes = np.array([len(b) for b in blocks])
    if not np.any(sizes >= 2):
        raise EstimationError("rho estimation needs a subject with >= 2 observations")
    if phi is None:
        allr = np.concatenate(blocks)
        phi = float(np.mean(allr * allr))
    if phi <= 0.0:
        return 0.0

    if structure == "exchangeable":
        num = 0.0
        pairs = 0.0
        for b in blocks:
            s = b.sum()
            num += 0.5 * (s * s - (b * b).sum())
            pairs += 0.5 * len(b) * (len(b) - 1)
        return clamp_rho(num / (phi * pairs), structure, int(sizes.max()))

    num = sum(float(b[:-1] @ b[1:]) for b in blocks)
    count = float((sizes - 1).clip(min=0).sum())
    return clamp_rho(num / (phi * count), structure, int(sizes.max()))
