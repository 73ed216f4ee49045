"""Centered truncated-power spline bases and group norm matrices.

For a component with degree d and interior knots k_1 < ... < k_L in (0,1),
the uncentered basis at x in [0,1] is

    b(x) = (x, x^2, ..., x^d, (x-k_1)_+^d, ..., (x-k_L)_+^d),

h = L + d columns.  Design blocks are centered column-wise by the empirical
means of the training sample, which enforces the zero-mean identifiability
constraint on each fitted component.  The group norm matrix

    W = (1/n) sum_i (1/n_i) sum_j B(x_ij) B(x_ij)^T

weights subjects equally regardless of cluster size and defines the
weighted Euclidean norm ||a||_W = sqrt(a^T W a) used by the group penalty.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import LongitudinalDataset
from .exceptions import ContractError, DomainError


def default_knot_count(n: int, r_smooth: int = 2) -> int:
    """Interior-knot count rule round(n^(1/(2r+1))), at least 1.

    r_smooth is the assumed smoothness order of the component functions;
    the default 2 gives the familiar n^(1/5) rate.
    """
    if n < 2:
        raise ContractError(f"need n >= 2, got {n}")
    if r_smooth < 1:
        raise ContractError(f"need r_smooth >= 1, got {r_smooth}")
    return max(1, int(round(n ** (1.0 / (2 * r_smooth + 1)))))


@dataclass(frozen=True)
class SplineBasisSpec:
    """Degree, interior-knot count, and knot positions for one component.

    knot_positions=None places knots equally spaced at j/(L+1); the
    "quantile" rule instead uses empirical quantiles of the component's
    observed values.
    """

    degree: int = 3
    interior_knots: int = 1
    knot_positions: tuple[float, ...] | None = None
    knot_rule: str = "uniform"

    def __post_init__(self):
        if self.degree not in (1, 2, 3):
            raise ContractError(f"degree must be 1, 2, or 3, got {self.degree}")
        if self.interior_knots < 0:
            raise ContractError("interior_knots must be >= 0")
        if self.knot_rule not in ("uniform", "quantile"):
            raise ContractError(f"unknown knot rule {self.knot_rule!r}")
        if self.knot_positions is not None:
            ks = np.asarray(self.knot_positions, dtype=float)
            if len(ks) != self.interior_knots:
                raise ContractError("knot_positions length must equal interior_knots")
            if np.any(ks <= 0.0) or np.any(ks >= 1.0):
                raise ContractError("knots must lie strictly inside (0,1)")
            if np.any(np.diff(ks) <= 0.0):
                raise ContractError("knots must be strictly increasing")

    @property
    def dim(self) -> int:
        """Basis dimension h = L + d."""
        return self.interior_knots + self.degree

    def knots(self, x: np.ndarray | None = None) -> np.ndarray:
        if self.knot_positions is not None:
            return np.asarray(self.knot_positions, dtype=float)
        L = self.interior_knots
        if L == 0:
            return np.empty(0)
        if self.knot_rule == "quantile":
            if x is None:
                raise ContractError("quantile knot rule needs sample values")
            qs = np.quantile(np.asarray(x, dtype=float),
                             np.arange(1, L + 1) / (L + 1))
            # degenerate quantiles collapse to the uniform grid
            if np.any(np.diff(qs) <= 0) or qs[0] <= 0 or qs[-1] >= 1:
                return np.arange(1, L + 1) / (L + 1)
            return qs
        return np.arange(1, L + 1) / (L + 1)


def _raw_basis(x: np.ndarray, degree: int, knots: np.ndarray) -> np.ndarray:
    cols = [x ** j for j in range(1, degree + 1)]
    for k in knots:
        cols.append(np.clip(x - k, 0.0, None) ** degree)
    return np.column_stack(cols)


def build_basis(x: np.ndarray, spec: SplineBasisSpec,
                knots: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Centered design block for one component over the training values x.

    Returns (B, means): B[i, j] = b_j(x_i) - mean_i b_j(x_i).  The means are
    frozen training-sample constants; prediction reuses them via
    :func:`evaluate_g_hat`.
    """
    x = np.asarray(x, dtype=float)
    if np.any(x < 0.0) or np.any(x > 1.0):
        raise DomainError("basis arguments must lie in [0,1]")
    if knots is None:
        knots = spec.knots(x)
    raw = _raw_basis(x, spec.degree, knots)
    means = raw.mean(axis=0)
    return raw - means, means


@dataclass(frozen=True)
class BasisSet:
    """Design blocks, centering means, knots, and norm matrices, one per
    smooth component, all tied to one training sample."""

    specs: tuple[SplineBasisSpec, ...]
    blocks: tuple[np.ndarray, ...]            # each (N, h_k), centered
    centering_means: tuple[np.ndarray, ...]   # each (h_k,)
    knots: tuple[np.ndarray, ...]             # each (L_k,)
    norm_matrices: tuple[np.ndarray, ...]     # each (h_k, h_k), PSD

    @property
    def n_components(self) -> int:
        return len(self.blocks)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(b.shape[1] for b in self.blocks)

    @property
    def total_dim(self) -> int:
        return int(sum(self.dims))


def build_basis_set(ds: LongitudinalDataset,
                    spec: SplineBasisSpec | list[SplineBasisSpec]) -> BasisSet:
    """Build one centered block and norm matrix per smooth component.

    Expects a standardized dataset (smooth columns in [0,1]).  `spec` may be
    shared or given per component.
    """
    r = len(ds.smooth_names)
    specs = list(spec) if isinstance(spec, (list, tuple)) else [spec] * r
    if len(specs) != r:
        raise ContractError(f"expected {r} specs, got {len(specs)}")
    if r == 0:
        return BasisSet((), (), (), (), ())

    Xs = ds.stack_smooth()
    sizes = ds.block_sizes
    n = ds.n_subjects
    # each row j of subject i carries weight 1/(n * n_i) in W
    row_w = np.repeat(1.0 / (n * sizes), sizes)

    blocks, means_list, knots_list, norms = [], [], [], []
    for k in range(r):
        sp = specs[k]
        kn = sp.knots(Xs[:, k])
        B, means = build_basis(Xs[:, k], sp, knots=kn)
        W = (B * row_w[:, None]).T @ B
        W = 0.5 * (W + W.T)
        blocks.append(B)
        means_list.append(means)
        knots_list.append(kn)
        norms.append(W)
    return BasisSet(tuple(specs), tuple(blocks), tuple(means_list),
                    tuple(knots_list), tuple(norms))


def subset_basis(basis: BasisSet, keep) -> BasisSet:
    """BasisSet restricted to the given component indices (blocks, means,
    knots, and norm matrices are shared, not recomputed)."""
    keep = list(np.asarray(keep, dtype=int))
    return BasisSet(
        specs=tuple(basis.specs[k] for k in keep),
        blocks=tuple(basis.blocks[k] for k in keep),
        centering_means=tuple(basis.centering_means[k] for k in keep),
        knots=tuple(basis.knots[k] for k in keep),
        norm_matrices=tuple(basis.norm_matrices[k] for k in keep),
    )


def evaluate_g_hat(alpha_k: np.ndarray, spec: SplineBasisSpec,
                   means: np.ndarray, x_grid: np.ndarray,
                   knots: np.ndarray | None = None) -> np.ndarray:
    """Evaluate a fitted component sum_l alpha_l B_l(x) on a grid in [0,1],
    using the frozen training centering means."""
    x_grid = np.asarray(x_grid, dtype=float)
    if np.any(x_grid < 0.0) or np.any(x_grid > 1.0):
        raise DomainError("evaluation grid must lie in [0,1]")
    if knots is None:
        knots = spec.knots()
    raw = _raw_basis(x_grid, spec.degree, np.asarray(knots, dtype=float))
    return (raw - means) @ np.asarray(alpha_k, dtype=float)
