"""Generalized cross validation over the penalty parameter.

GCV(lam) = (RSS(lam)/n) / (1 - d(lam)/n)^2 with n the number of subjects,

    RSS  = (1/K) sum_k sum_i (y_i - mu_i^k)' W_i^{-1} (y_i - mu_i^k),
    d    = tr[ (Hbar + n E)^{-1} Hbar ],

where W_i is the draw-estimated marginal covariance of y_i (conditional
variance averaged over draws plus the draw variance of the conditional
mean) and Hbar is the Monte Carlo curvature at the converged fit.  The
draw average in RSS collapses exactly to the posterior-mean residual plus
a trace correction for the draw variance of mu.

Comparing fits across a grid only works when the same W_i score every
fit: a fit's own variance and correlation estimates absorb its own lack
of fit, which both flattens the criterion and makes RSS non-monotone in
the support.  select_lambda therefore freezes the W_i of the densest
support's refit and scores every grid point with them.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .basis import BasisSet, subset_basis
from .correlation import correlation_matrix
from .data import LongitudinalDataset, subset_columns
from .exceptions import ContractError, TuningError
from .families import Family
from .penalty import lqa_weight_matrix
from .sampling import ChainDraws
from .solver import (
    Design,
    FitState,
    ModelSpec,
    SolverConfig,
    _eta_draws,
    _posterior_mean_mu,
    assemble_S_H,
    fit,
)

_DOF_GUARD = 0.99


def marginal_covariance(state: FitState, ds: LongitudinalDataset,
                        basis: BasisSet, family: Family,
                        draws: ChainDraws | None = None,
                        design: Design | None = None,
                        phi: float | None = None) -> list[np.ndarray]:
    """Per-subject W_i = E_draws[var(y_i|u)] + var_draws[E(y_i|u)],
    symmetrized and eigenvalue-clipped at 1e-10.

    phi defaults to the fit's estimate; the GCV path overrides it with the
    theory value 1 so weighted residuals stay comparable across fits (a
    fit's own inflated dispersion must not re-standardize its residuals).
    """
    if design is None:
        design = Design(ds, basis)
    if draws is None:
        draws = state.draws
    if draws is None:
        raise ContractError("marginal covariance needs chain draws")
    corr = state.correlation
    eta_fixed = design.eta_fixed(state.theta)
    if phi is None:
        phi = state.phi

    out = []
    if family.kind == "gaussian":
        ucov = draws.u_cov()
        for i in range(design.n):
            sl = design.subject_slice(i)
            m = design.sizes[i]
            R = correlation_matrix(corr, m)
            av = 1.0 / np.sqrt(design.w[sl])        # sqrt(nu/omega), nu = 1
            Zi = design.Z[sl]
            W = phi * np.outer(av, av) * R + Zi @ ucov[i] @ Zi.T
            out.append(_psd_repair(W))
        return out

    eta_k = _eta_draws(design, eta_fixed, draws)
    mu_k = family.mean(eta_k)
    nu_k = family.unit_variance(mu_k)
    av_k = np.sqrt(nu_k / design.w)
    K = mu_k.shape[0]
    for i in range(design.n):
        sl = design.subject_slice(i)
        m = design.sizes[i]
        R = correlation_matrix(corr, m)
        ai = av_k[:, sl]
        mi = mu_k[:, sl]
        mbar = mi.mean(axis=0)
        W = phi * (ai.T @ ai / K) * R + (mi.T @ mi / K - np.outer(mbar, mbar))
        out.append(_psd_repair(W))
    return out


def _psd_repair(W: np.ndarray, floor: float = 1e-10) -> np.ndarray:
    W = 0.5 * (W + W.T)
    evals, evecs = np.linalg.eigh(W)
    if evals.min() < floor:
        W = (evecs * np.clip(evals, floor, None)) @ evecs.T
        W = 0.5 * (W + W.T)
    return W


def residual_moments(state: FitState, ds: LongitudinalDataset,
                     basis: BasisSet, family: Family,
                     draws: ChainDraws | None = None,
                     design: Design | None = None):
    """Per-subject (posterior-mean residual, draw covariance of mu)."""
    if design is None:
        design = Design(ds, basis)
    if draws is None:
        draws = state.draws
    eta_fixed = design.eta_fixed(state.theta)
    resid, vmu = [], []
    if family.kind == "gaussian":
        mu_bar = _posterior_mean_mu(design, family, eta_fixed, draws)
        ucov = draws.u_cov()
        for i in range(design.n):
            sl = design.subject_slice(i)
            Zi = design.Z[sl]
            resid.append(design.y[sl] - mu_bar[sl])
            vmu.append(Zi @ ucov[i] @ Zi.T)
        return resid, vmu
    mu_k = family.mean(_eta_draws(design, eta_fixed, draws))
    K = mu_k.shape[0]
    for i in range(design.n):
        sl = design.subject_slice(i)
        mi = mu_k[:, sl]
        mbar = mi.mean(axis=0)
        resid.append(design.y[sl] - mbar)
        vmu.append(mi.T @ mi / K - np.outer(mbar, mbar))
    return resid, vmu


def rss_from_moments(resid: list[np.ndarray], vmu: list[np.ndarray],
                     W_list: list[np.ndarray]) -> float:
    """Exact draw-averaged weighted RSS from per-subject moments."""
    total = 0.0
    for r, V, W in zip(resid, vmu, W_list):
        Winv_r = np.linalg.solve(W, r)
        total += float(r @ Winv_r) + float(np.trace(np.linalg.solve(W, V)))
    return total


def gcv(state: FitState, ds: LongitudinalDataset, basis: BasisSet,
        spec: ModelSpec, lam: float | None = None,
        draws: ChainDraws | None = None,
        phi: float | None = None,
        W_list: list[np.ndarray] | None = None) -> tuple[float, float, float]:
    """(GCV, RSS, effective dof) at a converged fit, reusing its final
    chain so repeated evaluations are bit-identical.

    W_list overrides the weighting covariances; when ranking fits across a
    lambda grid the same W_i must score every fit (each fit's own
    variance/correlation estimates absorb its own lack of fit and flatten
    the comparison), so select_lambda passes the densest support's W_i to
    all grid points, Mallows-Cp style.
    """
    if lam is None:
        lam = state.lam
    if draws is None:
        draws = state.draws
    design = Design(ds, basis)
    family = spec.family
    n = design.n
    n_obs = len(design.y)

    if W_list is None:
        W_list = marginal_covariance(state, ds, basis, family, draws, design,
                                     phi=phi)
    resid, vmu = residual_moments(state, ds, basis, family, draws, design)
    rss = rss_from_moments(resid, vmu, W_list)

    act = design.active_columns(state.active_beta, state.active_groups)
    if len(act):
        _, H = assemble_S_H(state, ds, design, basis, state.correlation,
                            family, draws)
        E = lqa_weight_matrix(state.beta, state.alphas, basis,
                              spec.penalty.with_lambda(lam),
                              state.active_beta, state.active_groups)
        E_act = E[np.ix_(act, act)]
        dof = float(np.trace(np.linalg.solve(H + n * E_act, H)))
    else:
        dof = 0.0
    if dof / n >= _DOF_GUARD:
        raise TuningError(
            f"effective dof {dof:.2f} too close to the subject count {n}")
    g = (rss / n) / (1.0 - dof / n) ** 2
    return float(g), float(rss), float(dof)


@dataclass
class GcvReport:
    lambda_grid: np.ndarray
    gcv_values: np.ndarray
    rss_values: np.ndarray
    dof_values: np.ndarray
    lambda_opt: float
    converged: np.ndarray       # per grid point
    skipped: list               # (lambda, reason) pairs
    best_refit: FitState | None = None   # unpenalized refit of the chosen support
    selected_beta: np.ndarray | None = None    # final support, full layout
    selected_groups: np.ndarray | None = None
    pruned_beta: list = field(default_factory=list)  # dropped in the backward pass
    gcv_opt: float = float("nan")

    def to_dict(self) -> dict:
        return {
            "lambda_grid": self.lambda_grid.tolist(),
            "gcv": self.gcv_values.tolist(),
            "rss": self.rss_values.tolist(),
            "dof": self.dof_values.tolist(),
            "lambda_opt": self.lambda_opt,
            "gcv_opt": self.gcv_opt,
            "converged": [bool(c) for c in self.converged],
            "skipped": [[float(l), str(r)] for l, r in self.skipped],
            "selected_beta": None if self.selected_beta is None else
            [bool(b) for b in self.selected_beta],
            "selected_groups": None if self.selected_groups is None else
            [bool(b) for b in self.selected_groups],
            "pruned_beta": [int(j) for j in self.pruned_beta],
        }


def _all_zero(state: FitState) -> bool:
    return not (state.active_beta.any() or state.active_groups.any())


def _lambda_start(ds: LongitudinalDataset, basis: BasisSet,
                  spec: ModelSpec) -> float:
    """Score-based guess near the all-zero boundary: at theta = 0 a
    coordinate stays dead once n*q_lam exceeds its score, so the largest
    |score|/n is the right order of magnitude.  The doubling/halving
    search corrects it either way."""
    design = Design(ds, basis)
    if design.full.shape[1] == 0:
        return 0.01
    mu0 = spec.family.mean(np.zeros(1))[0]
    s0 = design.full.T @ (design.w * (design.y - mu0))
    guess = float(np.max(np.abs(s0))) / design.n
    return max(guess, 0.01)


def find_lambda_max(ds: LongitudinalDataset, basis: BasisSet, spec: ModelSpec,
                    cfg: SolverConfig, start: float | None = None,
                    max_steps: int = 16) -> float:
    """Smallest lambda (at doubling/halving resolution) whose fit zeroes
    every penalized coordinate."""
    lam = _lambda_start(ds, basis, spec) if start is None else start
    st = fit(ds, basis, spec, cfg, lam)
    if _all_zero(st):
        # walk down to the boundary
        last_zero = lam
        for _ in range(max_steps):
            lam /= 2.0
            st = fit(ds, basis, spec, cfg, lam, warm_start=None)
            if _all_zero(st):
                last_zero = lam
            else:
                break
        return last_zero
    warm = st
    for _ in range(max_steps):
        lam *= 2.0
        st = fit(ds, basis, spec, cfg, lam, warm_start=warm)
        warm = st
        if _all_zero(st):
            return lam
    return lam


def _restrict_state(state: FitState, sel_b, sel_g) -> FitState:
    """Warm-start seed for a support-restricted refit: coefficients cut to
    the kept columns, variance components and chain state carried over."""
    from dataclasses import replace as _replace
    beta = state.beta[sel_b].copy()
    alphas = [state.alphas[k].copy() for k in sel_g]
    return _replace(
        state, beta=beta, alphas=alphas,
        active_beta=np.ones(len(sel_b), dtype=bool),
        active_groups=np.ones(len(sel_g), dtype=bool),
        trace=[], lam=0.0)


def _refit_support(ds, basis, spec, cfg, state: FitState,
                   warm_from: FitState | None = None):
    """Unpenalized refit restricted to a penalized fit's selected support.

    Returns (refit, ds_refit, basis_refit).  The penalized estimate
    carries the LQA shrinkage bias on the survivors (the SCAD flat region
    is out of reach unless signals exceed a*lambda), so the criterion must
    score the support by its debiased refit or it systematically
    under-selects.  An empty support scores the penalized (all-zero) fit
    itself.  The refit warm-starts from the penalized state (variance
    components such as Sigma converge slowly for binary data; restarting
    them cold would dominate the tuning cost).
    """
    sel_b = np.flatnonzero(state.active_beta & (state.beta != 0.0))
    sel_g = np.flatnonzero(state.active_groups)
    if sel_b.size == 0 and sel_g.size == 0:
        return state, ds, basis
    ds_sel = subset_columns(ds, sel_b, sel_g)
    basis_sel = subset_basis(basis, sel_g)
    warm = _restrict_state(state, sel_b, sel_g) if warm_from is None \
        else warm_from
    # the refit starts at the penalized solution, so one chain there is a
    # valid sample for the whole debiasing step: freeze it and let the
    # Newton iterations run deterministically on it
    cfg_refit = replace(cfg, chain_freeze_factor=np.inf)
    refit = fit(ds_sel, basis_sel, spec, cfg_refit, lam=0.0, warm_start=warm)
    return refit, ds_sel, basis_sel


def select_lambda(ds: LongitudinalDataset, basis: BasisSet, spec: ModelSpec,
                  cfg: SolverConfig, grid=None,
                  n_grid: int = 20) -> tuple[GcvReport, FitState]:
    """Fit every grid point (ascending, warm-started), score each selected
    support by the GCV of its unpenalized refit, and return the argmin;
    ties break to the smallest lambda.  Grid points sharing a support
    share a score (the refit is cached).  Points whose fit or GCV
    evaluation fails are skipped with a reason; all failing is an error."""
    if grid is None:
        lam_max = find_lambda_max(ds, basis, spec, cfg)
        grid = np.geomspace(1e-3 * lam_max, lam_max, n_grid)
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise TuningError("empty lambda grid")
    if np.any(np.diff(grid) < 0):
        raise ContractError("lambda grid must be sorted ascending")

    rows = []
    fits = []
    refits = []
    skipped = []
    cache: dict = {}
    warm = None
    W_shared = None   # densest support's weights score every grid point
    for lam in grid:
        try:
            st = fit(ds, basis, spec, cfg, float(lam), warm_start=warm)
            warm = st
        except Exception as exc:   # noqa: BLE001 - recorded, never silent
            skipped.append((float(lam), f"fit failed: {exc}"))
            continue
        key = (tuple((st.active_beta & (st.beta != 0.0)).tolist()),
               tuple(st.active_groups.tolist()))
        try:
            if key in cache:
                refit, g, rss, dof = cache[key]
            else:
                refit, ds_r, basis_r = _refit_support(ds, basis, spec, cfg, st)
                if W_shared is None:
                    W_shared = marginal_covariance(refit, ds_r, basis_r,
                                                   spec.family)
                g, rss, dof = gcv(refit, ds_r, basis_r, spec,
                                  lam=refit.lam, W_list=W_shared)
                cache[key] = (refit, g, rss, dof)
        except TuningError as exc:
            skipped.append((float(lam), str(exc)))
            continue
        except Exception as exc:   # noqa: BLE001
            skipped.append((float(lam), f"refit failed: {exc}"))
            continue
        rows.append((float(lam), g, rss, dof, st.converged))
        fits.append(st)
        refits.append(refit)

    if not rows:
        raise TuningError("no lambda grid point produced a usable fit")
    arr = np.array([r[:4] for r in rows])
    best = int(np.argmin(arr[:, 1]))
    best_state = fits[best]
    sel_b = best_state.active_beta & (best_state.beta != 0.0)
    sel_g = best_state.active_groups.copy()
    best_gcv = float(arr[best, 1])
    best_refit = refits[best]

    # backward pass over scalar coefficients: the penalized path keeps a
    # marginal scalar alive past its own kill point when the shrinkage bias
    # of the survivors leaks into its score, and the grid can skip the
    # window separating it from the weakest group; offering single-scalar
    # drops to the same criterion removes both artifacts
    pruned = []
    improved = True
    cfg_prune = replace(cfg, chain_freeze_factor=np.inf)
    while improved and sel_b.any():
        improved = False
        best_drop = None
        keep_idx = np.flatnonzero(sel_b)
        for pos, j in enumerate(keep_idx):
            cand_b = sel_b.copy()
            cand_b[j] = False
            key = (tuple(cand_b.tolist()), tuple(sel_g.tolist()))
            try:
                if key in cache:
                    refit_c, g_c, rss_c, dof_c = cache[key]
                else:
                    ds_c = subset_columns(ds, np.flatnonzero(cand_b),
                                          np.flatnonzero(sel_g))
                    basis_c = subset_basis(basis, np.flatnonzero(sel_g))
                    warm_c = _restrict_state(
                        best_refit,
                        np.delete(np.arange(len(best_refit.beta)), pos),
                        np.arange(len(best_refit.alphas)))
                    refit_c = fit(ds_c, basis_c, spec, cfg_prune, lam=0.0,
                                  warm_start=warm_c)
                    g_c, rss_c, dof_c = gcv(refit_c, ds_c, basis_c, spec,
                                            lam=0.0, W_list=W_shared)
                    cache[key] = (refit_c, g_c, rss_c, dof_c)
            except Exception:   # noqa: BLE001 - candidate just not offered
                continue
            if g_c < best_gcv and (best_drop is None or g_c < best_drop[1]):
                best_drop = (j, g_c, refit_c)
        if best_drop is not None:
            j, best_gcv, best_refit = best_drop
            sel_b[j] = False
            pruned.append(int(j))
            improved = True

    report = GcvReport(
        lambda_grid=arr[:, 0], gcv_values=arr[:, 1], rss_values=arr[:, 2],
        dof_values=arr[:, 3], lambda_opt=float(arr[best, 0]),
        converged=np.array([r[4] for r in rows], dtype=bool),
        skipped=skipped, best_refit=best_refit,
        selected_beta=sel_b, selected_groups=sel_g, pruned_beta=pruned,
        gcv_opt=best_gcv)
    return report, best_state
