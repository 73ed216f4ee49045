"""Penalized GEE solver: Monte Carlo Newton-Raphson with double SCAD.

Each outer iteration: (1) refresh the Metropolis chain of random effects at
the current parameters, (2) form the Monte Carlo means of the estimating
function S and curvature H, (3) take a penalized Newton step

    theta' = theta + (H + n E)^{-1} (S - n E theta)

with E the local-quadratic-approximation ridge of the SCAD penalty, (4)
hard-threshold small coefficients / component groups and freeze them, (5)
update the random-effects covariance by its closed-form ML step, and (6)
re-estimate the working correlation parameter and dispersion from
posterior-mean residuals.  Convergence requires max|dtheta| < tol on
`consecutive_hits` consecutive iterations (Monte Carlo noise makes a
single hit unreliable); the chain is re-seeded identically each iteration
(common random numbers) so the outer map is deterministic.

Per-subject blocks: with a_H = sqrt(nu(mu) * omega) and standardized
residual r* = (y - mu) * sqrt(omega / nu(mu)),

    H_i = D_i' (a_H a_H' . Rinv) D_i,      S_i = D_i' (a_H . (Rinv r*)),

averaged over retained draws ("." elementwise).  For the gaussian family
a_H is draw-free and mu is linear in u, so the draw average collapses
exactly to the posterior mean of u; this is an algebraic identity, not an
approximation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from .basis import BasisSet
from .correlation import CorrelationSpec, clamp_rho, correlation_inverse, estimate_rho
from .data import LongitudinalDataset
from .exceptions import ContractError, NumericalError, SolverError
from .families import Family
from .penalty import PenaltyConfig, group_norm, lqa_weight_matrix, threshold_groups
from .sampling import ChainDraws, McConfig, RandomEffectsModel, run_chain, update_sigma

_RIDGE_LADDER = (1e-8, 1e-6, 1e-4)


@dataclass(frozen=True)
class ModelSpec:
    """Family, working correlation, penalty, and Monte Carlo configuration.

    rho_residuals chooses the residuals feeding the working-correlation
    moment estimator: "marginal" (u = 0, standard GEE moments on total
    residuals) or "conditional" (draws-averaged conditional moments).  The
    marginal choice keeps the fitted rho near the total within-subject
    correlation; the conditional one lets the random intercept absorb most
    of it first.
    """

    family: Family
    correlation: CorrelationSpec = CorrelationSpec()
    penalty: PenaltyConfig = PenaltyConfig()
    mc: McConfig = McConfig()
    random_effects: bool = True
    # "auto": 0.5*I for gaussian, a residual-moment estimate on the latent
    # scale otherwise (binary data can demand a large intercept variance
    # and the ML update migrates slowly, so a cold 0.5 start wastes most
    # of the iteration budget); a scalar or matrix pins it explicitly
    sigma0: object = "auto"
    freeze_rho: bool = False
    rho_residuals: str = "marginal"


@dataclass(frozen=True)
class SolverConfig:
    max_outer_iter: int = 100
    tol: float = 1e-3
    consecutive_hits: int = 2
    refresh_rho: bool = True
    # once max|dtheta| < chain_freeze_factor * tol, later iterations reuse
    # the previous chain (the iterate has stopped moving at the Monte Carlo
    # scale, so regeneration would only inject acceptance-flip jitter and
    # keep the Newton map from settling); 0 disables the freeze.
    chain_freeze_factor: float = 10.0
    # raw Newton steps on a nonlinear-link surface can overshoot the region
    # where the quadratic model is valid (the truncated power basis is
    # nearly collinear, so huge coefficient moves can be legitimate while
    # huge linear-predictor moves are not); steps are rescaled so
    # max|D @ step| stays under this cap.  Identity-link Newton is exact
    # and is never capped.
    eta_step_cap: float = 4.0

    def __post_init__(self):
        if self.tol <= 0:
            raise ContractError("tol must be positive")
        if self.max_outer_iter < 0:
            raise ContractError("max_outer_iter must be >= 0")
        if self.consecutive_hits < 1:
            raise ContractError("consecutive_hits must be >= 1")
        if self.chain_freeze_factor < 0:
            raise ContractError("chain_freeze_factor must be >= 0")


@dataclass
class FitState:
    """Stacked coefficients, variance components, masks, and iteration log."""

    beta: np.ndarray                 # (p,), zeros at inactive positions
    alphas: list                     # r arrays (h_k,), zero blocks when inactive
    Sigma: np.ndarray                # (q, q)
    rho: float
    phi: float
    active_beta: np.ndarray          # (p,) bool
    active_groups: np.ndarray        # (r,) bool
    lam: float
    converged: bool
    n_iter: int
    trace: list = field(default_factory=list)
    draws: ChainDraws | None = None  # final chain, reused by GCV / sandwich
    correlation: CorrelationSpec | None = None

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([self.beta, *self.alphas]) if self.alphas \
            else self.beta.copy()

    def copy_shallow(self) -> "FitState":
        return replace(self, beta=self.beta.copy(),
                       alphas=[a.copy() for a in self.alphas],
                       trace=list(self.trace))


class Design:
    """Stacked design matrices and subject bookkeeping for one dataset."""

    def __init__(self, ds: LongitudinalDataset, basis: BasisSet):
        self.ds = ds
        self.X = ds.stack_linear()
        self.blocks = basis.blocks
        self.Z = ds.stack_Z()
        self.y = ds.stack_y()
        self.w = ds.stack_weights()
        self.sizes = ds.block_sizes
        self.offsets = ds.row_offsets
        self.n = ds.n_subjects
        self.q = ds.random_effect_dim
        self.p = self.X.shape[1]
        self.dims = tuple(b.shape[1] for b in self.blocks)
        mats = [self.X, *self.blocks] if self.blocks else [self.X]
        self.full = np.concatenate(mats, axis=1) if self.p + sum(self.dims) else \
            np.empty((len(self.y), 0))
        self.balanced = bool(self.sizes.min() == self.sizes.max())
        self.m = int(self.sizes[0]) if self.balanced else 0
        # column offsets of each group block in the full layout
        offs = [self.p]
        for h in self.dims[:-1]:
            offs.append(offs[-1] + h)
        self.group_offsets = tuple(offs) if self.dims else ()

    def active_columns(self, active_beta, active_groups) -> np.ndarray:
        idx = list(np.flatnonzero(active_beta))
        for k, h in enumerate(self.dims):
            if active_groups[k]:
                idx.extend(range(self.group_offsets[k], self.group_offsets[k] + h))
        return np.array(idx, dtype=int)

    def eta_fixed(self, theta_full: np.ndarray) -> np.ndarray:
        return self.full @ theta_full

    def subject_slice(self, i: int) -> slice:
        return slice(self.offsets[i], self.offsets[i] + self.sizes[i])


def _rinv_cache(corr: CorrelationSpec, sizes: np.ndarray) -> dict[int, np.ndarray]:
    return {int(m): correlation_inverse(corr, int(m)) for m in np.unique(sizes)}


def _eta_draws(design: Design, eta_fixed: np.ndarray, draws: ChainDraws) -> np.ndarray:
    """(K, N_obs) linear predictor per retained draw."""
    U_rows = np.repeat(draws.draws, design.sizes, axis=1)       # (K, N, q)
    return eta_fixed[None, :] + np.einsum("kNq,Nq->kN", U_rows, design.Z)


def _draw_kernels(design: Design, family: Family, eta_fixed: np.ndarray,
                  draws: ChainDraws):
    """Per-draw (K, N_obs) arrays feeding S/H assembly: the conditional
    mean, the kernel scale a = sqrt(nu * omega), and the standardized
    residual (y - mu) * sqrt(omega / nu)."""
    eta_k = _eta_draws(design, eta_fixed, draws)
    mu_k = family.mean(eta_k)
    nu_k = family.unit_variance(mu_k)
    a_k = np.sqrt(nu_k * design.w)                 # (K, N) score kernel scale
    rs_k = (design.y - mu_k) * np.sqrt(design.w / nu_k)
    if not np.all(np.isfinite(rs_k)):
        bad = np.argwhere(~np.isfinite(rs_k))[0]
        raise NumericalError(
            f"non-finite standardized residual at draw {bad[0]}, row {bad[1]}")
    return mu_k, a_k, rs_k


def assemble_S_H(state: FitState, ds: LongitudinalDataset, design: Design,
                 basis: BasisSet, corr: CorrelationSpec, family: Family,
                 draws: ChainDraws) -> tuple[np.ndarray, np.ndarray]:
    """Monte Carlo means of the estimating function and curvature matrix,
    restricted to the active columns."""
    act = design.active_columns(state.active_beta, state.active_groups)
    D = design.full[:, act]
    eta_fixed = design.eta_fixed(state.theta)
    rinv = _rinv_cache(corr, design.sizes)

    if family.kind == "gaussian":
        # draw average collapses to the posterior mean of u
        mu_bar = eta_fixed + np.einsum(
            "Nq,Nq->N", np.repeat(draws.u_mean(), design.sizes, axis=0), design.Z)
        a = np.sqrt(design.w)                       # nu = 1
        rs = (design.y - mu_bar) * np.sqrt(design.w)
        Da = D * a[:, None]
        if design.balanced:
            m = design.m
            R = rinv[m]
            G = Da.reshape(design.n, m, -1)
            RG = np.einsum("mM,iMp->imp", R, G).reshape(design.n * m, -1)
            H = Da.T @ RG
            Rrs = (R @ rs.reshape(design.n, m).T).T.ravel()
            S = Da.T @ Rrs
            return S, 0.5 * (H + H.T)
        H = np.zeros((len(act), len(act)))
        S = np.zeros(len(act))
        for i in range(design.n):
            sl = design.subject_slice(i)
            R = rinv[design.sizes[i]]
            Gi = Da[sl]
            H += Gi.T @ R @ Gi
            S += Gi.T @ (R @ rs[sl])
        return S, 0.5 * (H + H.T)

    mu_k, a_k, rs_k = _draw_kernels(design, family, eta_fixed, draws)
    K = mu_k.shape[0]
    if design.balanced:
        m = design.m
        R = rinv[m]
        a3 = a_k.reshape(K, design.n, m)
        rs3 = rs_k.reshape(K, design.n, m)
        C = np.einsum("kim,kiM->imM", a3, a3) / K
        t = (a3 * np.einsum("mM,kiM->kim", R, rs3)).mean(axis=0)   # (n, m)
        D3 = D.reshape(design.n, m, -1)
        H = np.einsum("imp,imM,iMq->pq", D3, C * R[None, :, :], D3,
                      optimize=True)
        S = np.einsum("imp,im->p", D3, t)
        return S, 0.5 * (H + H.T)

    H = np.zeros((len(act), len(act)))
    S = np.zeros(len(act))
    for i in range(design.n):
        sl = design.subject_slice(i)
        R = rinv[design.sizes[i]]
        ai = a_k[:, sl]                              # (K, m_i)
        rsi = rs_k[:, sl]
        Ci = ai.T @ ai / K
        ti = (ai * (rsi @ R)).mean(axis=0)
        Di = D[sl]
        H += Di.T @ (Ci * R) @ Di
        S += Di.T @ ti
    return S, 0.5 * (H + H.T)


def _solve_sym(M: np.ndarray, rhs: np.ndarray, trace_row: dict | None = None):
    """Symmetric solve with an escalating ridge fallback (each logged)."""
    for k, ridge in enumerate((0.0,) + _RIDGE_LADDER):
        try:
            Mk = M if ridge == 0.0 else M + ridge * np.eye(M.shape[0])
            c, low = scipy.linalg.cho_factor(Mk, check_finite=False)
            out = scipy.linalg.cho_solve((c, low), rhs, check_finite=False)
            if not np.all(np.isfinite(out)):
                raise np.linalg.LinAlgError("non-finite solution")
            if ridge and trace_row is not None:
                trace_row["ridge"] = ridge
            return out
        except (np.linalg.LinAlgError, ValueError):
            continue
    raise SolverError("Newton system singular even after ridge repair")


def newton_step(theta_act: np.ndarray, S: np.ndarray, H: np.ndarray,
                E_act: np.ndarray, n: int,
                trace_row: dict | None = None,
                eta_cap: float = 0.0,
                D_act: np.ndarray | None = None) -> np.ndarray:
    """theta + (H + n E)^{-1} (S - n E theta) on the active coordinates.

    With eta_cap > 0 and the active design supplied, the step is rescaled
    so the linear predictor moves at most eta_cap anywhere.
    """
    M = H + n * E_act
    rhs = S - n * (E_act @ theta_act)
    step = _solve_sym(M, rhs, trace_row)
    if eta_cap > 0.0 and step.size and D_act is not None:
        move = float(np.max(np.abs(D_act @ step)))
        if move > eta_cap:
            step = step * (eta_cap / move)
            if trace_row is not None:
                trace_row["eta_capped"] = move
    return theta_act + step


def _unpack(theta_act, act, p, dims, group_offsets):
    """Scatter an active-coordinate vector back to (beta, alphas)."""
    P = p + sum(dims)
    full = np.zeros(P)
    full[act] = theta_act
    beta = full[:p]
    alphas = [full[group_offsets[k]:group_offsets[k] + dims[k]]
              for k in range(len(dims))]
    return beta, alphas


def init_theta(design: Design, family: Family, ridge: float = 1e-4,
               max_iter: int = 25, tol: float = 1e-6,
               eta_cap: float = 4.0):
    """Unpenalized ridge-stabilized GLM fit (independence, u = 0)."""
    D = design.full
    P = D.shape[1]
    theta = np.zeros(P)
    if P == 0:
        return np.zeros(design.p), []
    eye = ridge * np.eye(P)
    capped = eta_cap if family.kind != "gaussian" else 0.0
    for _ in range(max_iter):
        eta = D @ theta
        mu = family.mean(eta)
        nu = family.unit_variance(mu)
        Wd = nu * design.w
        H = (D * Wd[:, None]).T @ D + eye
        S = D.T @ (design.w * (design.y - mu))
        step = np.linalg.solve(H, S)
        if capped > 0.0 and step.size:
            move = float(np.max(np.abs(D @ step)))
            if move > capped:
                step = step * (capped / move)
        theta = theta + step
        if np.max(np.abs(step)) < tol:
            break
    beta = theta[:design.p]
    alphas = [theta[design.group_offsets[k]:design.group_offsets[k] + design.dims[k]]
              for k in range(len(design.dims))]
    return beta, alphas


def _posterior_mean_mu(design: Design, family: Family, eta_fixed: np.ndarray,
                       draws: ChainDraws) -> np.ndarray:
    if family.kind == "gaussian":
        return eta_fixed + np.einsum(
            "Nq,Nq->N", np.repeat(draws.u_mean(), design.sizes, axis=0), design.Z)
    return family.mean(_eta_draws(design, eta_fixed, draws)).mean(axis=0)


def _pearson_blocks(design: Design, family: Family, mu_bar: np.ndarray):
    nu = family.unit_variance(np.clip(mu_bar, 1e-12, None)
                              if family.kind == "poisson" else mu_bar)
    r = (design.y - mu_bar) * np.sqrt(design.w / np.clip(nu, 1e-12, None))
    blocks = [r[design.subject_slice(i)] for i in range(design.n)]
    return r, blocks


def _residual_moment_summary(design: Design, family: Family,
                             eta_fixed: np.ndarray, draws: ChainDraws):
    """Draws-averaged Pearson residual moments: the exact Monte Carlo
    expectations feeding the rho / phi refresh.

    Returns (sq_sum, lag1_sum, pair_sum, n_obs, lag1_count, pair_count).
    Posterior-mean residuals alone would understate the conditional
    variance (the draw variance of mu is part of it), deflating phi and
    draining the estimated working correlation; averaging the residual
    products over draws is the unbiased plug-in.
    """
    sq = lag1 = pairs = 0.0
    n_lag = n_pair = 0
    if family.kind == "gaussian":
        mu_bar = _posterior_mean_mu(design, family, eta_fixed, draws)
        r_bar = (design.y - mu_bar) * np.sqrt(design.w)
        ucov = draws.u_cov()
        for i in range(design.n):
            sl = design.subject_slice(i)
            ri = r_bar[sl]
            Zi = design.Z[sl] * np.sqrt(design.w[sl])[:, None]
            Ci = Zi @ ucov[i] @ Zi.T
            m = len(ri)
            sq += float(ri @ ri) + float(np.trace(Ci))
            if m > 1:
                lag1 += float(ri[:-1] @ ri[1:]) + float(np.trace(Ci, offset=1))
                s = ri.sum()
                pairs += 0.5 * (s * s - ri @ ri) + \
                    0.5 * (Ci.sum() - np.trace(Ci))
                n_lag += m - 1
                n_pair += m * (m - 1) // 2
    else:
        eta_k = _eta_draws(design, eta_fixed, draws)
        mu_k = family.mean(eta_k)
        nu_k = family.unit_variance(mu_k)
        r_k = (design.y - mu_k) * np.sqrt(design.w / np.clip(nu_k, 1e-12, None))
        K = r_k.shape[0]
        for i in range(design.n):
            sl = design.subject_slice(i)
            ri = r_k[:, sl]
            m = ri.shape[1]
            sq += float(np.sum(ri * ri)) / K
            if m > 1:
                lag1 += float(np.sum(ri[:, :-1] * ri[:, 1:])) / K
                s = ri.sum(axis=1)
                pairs += float(np.sum(0.5 * (s * s - np.sum(ri * ri, axis=1)))) / K
                n_lag += m - 1
                n_pair += m * (m - 1) // 2
    return sq, lag1, pairs, len(design.y), n_lag, n_pair


def _initial_sigma(spec: ModelSpec, design: Design, family: Family,
                   beta, alphas, q: int) -> np.ndarray:
    """Starting random-effects covariance.

    "auto": gaussian keeps the 0.5*I desk default; other families map the
    exchangeable Pearson-residual correlation of the initializer onto the
    latent scale (logistic variance pi^2/3 for logit, 1 for log), clamped
    to [0.1, 4].  This only shortens the ML migration; the update's fixed
    point is unchanged.
    """
    s0 = spec.sigma0
    if not (isinstance(s0, str) and s0 == "auto"):
        return (float(s0) * np.eye(q) if np.isscalar(s0)
                else np.asarray(s0, dtype=float).copy())
    if family.kind == "gaussian":
        return 0.5 * np.eye(q)
    theta = np.concatenate([beta, *alphas]) if alphas else np.asarray(beta)
    mu = family.mean(design.full @ theta)
    nu = family.unit_variance(mu)
    r = (design.y - mu) * np.sqrt(design.w / np.clip(nu, 1e-12, None))
    blocks = [r[design.subject_slice(i)] for i in range(design.n)]
    try:
        rho_ex = estimate_rho(blocks, "exchangeable")
    except Exception:   # noqa: BLE001 - singleton subjects etc.
        rho_ex = 0.0
    latent = (np.pi ** 2) / 3.0 if family.kind == "binomial" else 1.0
    var = float(np.clip(rho_ex / max(1.0 - rho_ex, 1e-6), 0.0, None)) * latent
    return float(np.clip(var, 0.1, 4.0)) * np.eye(q)


def _collapsing(state: FitState, basis: BasisSet, tol: float) -> bool:
    b = np.abs(state.beta[state.active_beta])
    if np.any((b > 0.0) & (b <= tol)):
        return True
    for k in np.flatnonzero(state.active_groups):
        nrm = group_norm(state.alphas[k], basis.norm_matrices[k])
        if 0.0 < nrm <= tol:
            return True
    return False


def fit(ds: LongitudinalDataset, basis: BasisSet, spec: ModelSpec,
        cfg: SolverConfig, lam: float,
        warm_start: FitState | None = None) -> FitState:
    """Run the Monte Carlo Newton-Raphson loop at a fixed lambda.

    Non-convergence within max_outer_iter returns the capped state with
    converged=False rather than raising.  Identical seeds and
    configuration produce bit-identical results.
    """
    design = Design(ds, basis)
    family = spec.family
    family.check_support(design.y, design.w)
    pen = spec.penalty.with_lambda(lam)
    n, q, p = design.n, design.q, design.p
    r = len(design.dims)

    n_draws_start = None
    if warm_start is not None:
        beta = warm_start.beta.copy()
        alphas = [a.copy() for a in warm_start.alphas]
        Sigma = warm_start.Sigma.copy()
        corr = spec.correlation.with_rho(warm_start.rho) \
            if spec.correlation.structure != "independent" else spec.correlation
        phi = warm_start.phi
        if warm_start.draws is not None:
            U = warm_start.draws.last_state.copy()
            # resume the draw-count schedule where the previous fit left it
            n_draws_start = max(spec.mc.n_draws, warm_start.draws.n_draws)
        else:
            U = np.zeros((n, q))
    else:
        beta, alphas = init_theta(design, family)
        Sigma = _initial_sigma(spec, design, family, beta, alphas, q)
        corr = spec.correlation
        phi = 1.0
        U = np.zeros((n, q))
    if not spec.random_effects:
        Sigma = np.zeros((q, q))

    active_beta = np.ones(p, dtype=bool)
    active_groups = np.ones(r, dtype=bool)
    # re-threshold a sparse warm start so masks and values agree
    if warm_start is not None:
        beta, alphas, active_beta, active_groups, _ = threshold_groups(
            beta, alphas, basis, pen, active_beta, active_groups)

    state = FitState(beta=beta, alphas=alphas, Sigma=Sigma,
                     rho=corr.rho, phi=phi, active_beta=active_beta,
                     active_groups=active_groups, lam=lam, converged=False,
                     n_iter=0, trace=[], draws=None, correlation=corr)

    zero_draws = ChainDraws(draws=np.zeros((1, n, q)), acceptance_rate=1.0,
                            burn_in=0, thinning=1, seed=spec.mc.seed,
                            last_state=np.zeros((n, q)))
    hits = 0
    collapse_wait = 0
    last_delta = np.inf
    freeze_at = cfg.chain_freeze_factor * cfg.tol
    draws = None
    for t in range(cfg.max_outer_iter):
        theta_prev = state.theta
        eta_fixed = design.eta_fixed(theta_prev)
        trace_row = {"iter": t, "n_draws": 0, "ridge": 0.0}

        if spec.random_effects:
            refresh = (draws is None or cfg.chain_freeze_factor == 0.0
                       or last_delta >= freeze_at)
            if refresh:
                model = RandomEffectsModel(Sigma)
                N_t = spec.mc.draws_at(t) if n_draws_start is None else \
                    min(spec.mc.cap,
                        int(round(n_draws_start * spec.mc.growth ** t)))
                burn = (spec.mc.burn_in if warm_start is None else
                        spec.mc.reburn_in) if t == 0 else spec.mc.reburn_in
                draws = run_chain(ds, eta_fixed, family, phi, model, spec.mc,
                                  n_draws=N_t, burn_in=burn, initial=U,
                                  warn_acceptance=False)
                U = draws.last_state
                trace_row["acceptance"] = draws.acceptance_rate
            trace_row["n_draws"] = draws.n_draws
            trace_row["chain_refreshed"] = refresh
        else:
            draws = zero_draws

        S, H = assemble_S_H(state, ds, design, basis, corr, family, draws)
        act = design.active_columns(state.active_beta, state.active_groups)
        E_full = lqa_weight_matrix(state.beta, state.alphas, basis, pen,
                                   state.active_beta, state.active_groups)
        E_act = E_full[np.ix_(act, act)]
        theta_act = state.theta[act]
        eta_cap = 0.0 if family.kind == "gaussian" else cfg.eta_step_cap
        theta_act = newton_step(theta_act, S, H, E_act, n, trace_row,
                                eta_cap=eta_cap,
                                D_act=design.full[:, act] if eta_cap else None)

        beta, alphas = _unpack(theta_act, act, p, design.dims,
                               design.group_offsets)
        beta, alphas, ab, ag, _ = threshold_groups(
            beta, alphas, basis, pen, state.active_beta, state.active_groups)
        state.beta, state.alphas = beta, alphas
        state.active_beta, state.active_groups = ab, ag

        if spec.random_effects:
            Sigma = update_sigma(draws)
        state.Sigma = Sigma

        # rho / phi refresh at the new theta with the current draws
        needs_moments = (
            (corr.structure != "independent" and cfg.refresh_rho
             and not spec.freeze_rho)
            or family.estimates_dispersion)
        if needs_moments:
            eta_new = design.eta_fixed(state.theta)
            refresh_corr = (corr.structure != "independent"
                            and cfg.refresh_rho and not spec.freeze_rho)
            summary = None
            if family.estimates_dispersion or \
                    (refresh_corr and spec.rho_residuals != "marginal"):
                summary = _residual_moment_summary(design, family, eta_new,
                                                   draws)
            if refresh_corr:
                if spec.rho_residuals == "marginal":
                    mu0 = family.mean(eta_new)
                    nu0 = family.unit_variance(mu0)
                    r0 = (design.y - mu0) * np.sqrt(
                        design.w / np.clip(nu0, 1e-12, None))
                    blocks = [r0[design.subject_slice(i)]
                              for i in range(design.n)]
                    corr = corr.with_rho(estimate_rho(blocks, corr.structure))
                else:
                    sq_c, lag1, pairs, n_obs, n_lag, n_pair = summary
                    phi_ms = sq_c / n_obs
                    m_max = int(design.sizes.max())
                    if phi_ms > 0 and corr.structure == "ar1" and n_lag:
                        corr = corr.with_rho(clamp_rho(
                            lag1 / (phi_ms * n_lag), "ar1", m_max))
                    elif phi_ms > 0 and corr.structure == "exchangeable" \
                            and n_pair:
                        corr = corr.with_rho(clamp_rho(
                            pairs / (phi_ms * n_pair), "exchangeable", m_max))
            if family.estimates_dispersion:
                sq = summary[0]
                dof = summary[3] - len(act)
                if dof > 0:
                    phi = sq / dof
        state.rho, state.phi = corr.rho, phi
        state.correlation = corr
        state.draws = draws

        delta = float(np.max(np.abs(state.theta - theta_prev))) \
            if len(theta_prev) else 0.0
        last_delta = delta
        trace_row.update(delta=delta, active_p=int(ab.sum()),
                         active_groups=int(ag.sum()), rho=corr.rho, phi=phi,
                         sigma_tr=float(np.trace(Sigma)))
        state.trace.append(trace_row)
        state.n_iter = t + 1

        hits = hits + 1 if delta < cfg.tol else 0
        if hits >= cfg.consecutive_hits:
            # a penalized coefficient below tol is usually mid-collapse (the
            # LQA shrinkage is super-geometric near zero, so the last moves
            # are below tol while the value is still above the hard
            # threshold); allow a few extra iterations for it to die, but
            # not forever - it may sit at a genuine tiny fixed point
            if lam > 0.0 and collapse_wait < 8 and \
                    _collapsing(state, basis, cfg.tol):
                collapse_wait += 1
                continue
            state.converged = True
            break

    return state


def sandwich_covariance(state: FitState, ds: LongitudinalDataset,
                        design: Design | None, basis: BasisSet,
                        corr: CorrelationSpec, family: Family,
                        draws: ChainDraws | None = None) -> np.ndarray:
    """Robust covariance of the selected linear coefficients.

    Projects the active linear design off the active spline space with the
    Omega-weighted projection, then returns Hstar^{-1} Mstar Hstar^{-1}
    where Mstar plugs per-draw standardized residual outer products in for
    the unknown true correlation.
    """
    if design is None:
        design = Design(ds, basis)
    if draws is None:
        draws = state.draws
    if draws is None:
        raise ContractError("sandwich needs chain draws; fit first")
    act_b = np.flatnonzero(state.active_beta)
    if act_b.size == 0:
        raise ContractError("no active linear coefficients")

    X = design.X[:, act_b]
    bcols = []
    for k in range(len(design.dims)):
        if state.active_groups[k]:
            off = design.group_offsets[k]
            bcols.extend(range(off, off + design.dims[k]))
    B = design.full[:, bcols] if bcols else np.empty((len(design.y), 0))

    eta_fixed = design.eta_fixed(state.theta)
    rinv = _rinv_cache(corr, design.sizes)

    if family.kind == "gaussian":
        a = np.sqrt(design.w)
        mu_bar = _posterior_mean_mu(design, family, eta_fixed, draws)
        ucov = draws.u_cov()
        C_list, ccT_list = [], []
        for i in range(design.n):
            sl = design.subject_slice(i)
            R = rinv[design.sizes[i]]
            ai = a[sl]
            Omega_i = np.outer(ai, ai) * R
            ri = (design.y[sl] - mu_bar[sl]) * np.sqrt(design.w[sl])
            Zi = design.Z[sl]
            resid_outer = np.outer(ri, ri) + \
                (np.sqrt(design.w[sl])[:, None] * Zi) @ ucov[i] @ \
                (np.sqrt(design.w[sl])[:, None] * Zi).T
            G = (ai[:, None] * R)
            ccT_list.append(G @ resid_outer @ G.T)
            C_list.append(Omega_i)
    else:
        mu_k, a_k, rs_k = _draw_kernels(design, family, eta_fixed, draws)
        K = mu_k.shape[0]
        C_list, ccT_list = [], []
        for i in range(design.n):
            sl = design.subject_slice(i)
            R = rinv[design.sizes[i]]
            ai = a_k[:, sl]
            C_list.append((ai.T @ ai / K) * R)
            c_k = ai * (rs_k[:, sl] @ R)            # (K, m_i)
            ccT_list.append(c_k.T @ c_k / K)

    # projection P = B (B' Omega B)^{-1} B' Omega applied to X
    if B.shape[1]:
        BtOB = np.zeros((B.shape[1], B.shape[1]))
        BtOX = np.zeros((B.shape[1], X.shape[1]))
        for i in range(design.n):
            sl = design.subject_slice(i)
            OB = C_list[i] @ B[sl]
            BtOB += B[sl].T @ OB
            BtOX += OB.T @ X[sl]
        T = _solve_sym(0.5 * (BtOB + BtOB.T), BtOX)
        Xstar = X - B @ T
    else:
        Xstar = X

    Hstar = np.zeros((X.shape[1], X.shape[1]))
    Mstar = np.zeros_like(Hstar)
    for i in range(design.n):
        sl = design.subject_slice(i)
        Xi = Xstar[sl]
        Hstar += Xi.T @ C_list[i] @ Xi
        Mstar += Xi.T @ ccT_list[i] @ Xi
    Hinv = np.linalg.inv(0.5 * (Hstar + Hstar.T))
    cov = Hinv @ Mstar @ Hinv
    return 0.5 * (cov + cov.T)
