"""Simulation designs, replication driver, and selection/estimation metrics.

Three generators:

* ex1_gaussian_moderate - 10 linear + 10 smooth covariates, all Uniform(0,1)
  (two independent blocks), beta0 = (-1,-1,2,0,...,0), three nonzero
  component functions, AR-1(0.7) gaussian errors, random intercept
  N(0, 0.5), m = 5 observations per subject.
* ex2_gaussian_highdim - same shapes with 100 linear + 100 smooth.
* ex3_binary - logit mean with four nonzero centered component functions,
  random intercept, correlated Bernoulli responses via a gaussian copula
  with latent AR-1(0.5), m = 4.

Replication metrics: MSE = ||betahat - beta0||^2 on the original covariate
scale, AISE of each component on a fixed grid against the grid-centered
truth (fitted components are identifiable only up to constants), TAISE =
sum of AISEs, false zero/nonzero counts per part, and the
underfit/correct/overfit trichotomy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit, ndtr

from .basis import (
    BasisSet,
    SplineBasisSpec,
    build_basis_set,
    default_knot_count,
    evaluate_g_hat,
    subset_basis,
)
from .correlation import CorrelationSpec, correlation_matrix
from .data import (
    LongitudinalDataset,
    StandardizationRecord,
    from_arrays,
    standardize,
    subset_columns,
)
from .exceptions import ContractError
from .families import Family
from .gcv import select_lambda
from .penalty import PenaltyConfig
from .sampling import McConfig
from .solver import FitState, ModelSpec, SolverConfig, fit

EXAMPLES = ("ex1_gaussian_moderate", "ex2_gaussian_highdim", "ex3_binary")

_E2ME = math.exp(2.0) - math.exp(1.0)


def _g1_ex1(x):
    return (2.0 * x - 1.0) ** 2


def _g2_ex1(x):
    return 8.0 * (x - 0.5) ** 3


def _g3_ex1(x):
    return np.sin(2.0 * np.pi * x)


def _g1_ex3(x):
    return np.exp(x + 1.0) - _E2ME


def _g2_ex3(x):
    return np.cos(2.0 * np.pi * x) / 4.0


def _g3_ex3(x):
    return x * (1.0 - x) - 1.0 / 6.0


def _g4_ex3(x):
    return 2.0 * (x - 0.5) ** 3


def _zero(x):
    return np.zeros_like(np.asarray(x, dtype=float))


@dataclass(frozen=True)
class SimDesign:
    example: str = "ex1_gaussian_moderate"
    n: int = 100
    m: int = 5
    p_linear: int = 10
    p_smooth: int = 10
    error_rho: float = 0.7
    sigma: float = 1.0          # marginal error sd (gaussian examples)
    sigma_u: float = 0.5        # random-intercept variance
    copula_rho: float = 0.5     # latent AR-1 correlation (binary example)
    seed: int = 0

    def __post_init__(self):
        if self.example not in EXAMPLES:
            raise ContractError(f"unknown example {self.example!r}")
        if self.n < 2 or self.m < 1:
            raise ContractError("need n >= 2 subjects and m >= 1 observations")

    @property
    def family(self) -> Family:
        return Family("binomial") if self.example == "ex3_binary" \
            else Family("gaussian")

    @property
    def true_beta(self) -> np.ndarray:
        beta = np.zeros(self.p_linear)
        beta[:3] = (-1.0, -1.0, 2.0)
        return beta

    @property
    def true_g(self) -> list:
        if self.example == "ex3_binary":
            sig = [_g1_ex3, _g2_ex3, _g3_ex3, _g4_ex3]
        else:
            sig = [_g1_ex1, _g2_ex1, _g3_ex1]
        out = sig[:self.p_smooth]
        out += [_zero] * (self.p_smooth - len(out))
        return out

    @property
    def beta_support(self) -> np.ndarray:
        return self.true_beta != 0.0

    @property
    def g_support(self) -> np.ndarray:
        n_sig = 4 if self.example == "ex3_binary" else 3
        sup = np.zeros(self.p_smooth, dtype=bool)
        sup[:min(n_sig, self.p_smooth)] = True
        return sup


def example1_design(n: int = 100, seed: int = 0, **kw) -> SimDesign:
    return SimDesign(example="ex1_gaussian_moderate", n=n, m=5, seed=seed, **kw)


def example2_design(n: int = 200, seed: int = 0, **kw) -> SimDesign:
    return SimDesign(example="ex2_gaussian_highdim", n=n, m=5,
                     p_linear=100, p_smooth=100, seed=seed, **kw)


def example3_design(n: int = 200, m: int = 4, seed: int = 0, **kw) -> SimDesign:
    return SimDesign(example="ex3_binary", n=n, m=m, seed=seed, **kw)


def generate(design: SimDesign, seed=None):
    """Draw one dataset; deterministic in the seed.  Returns the dataset
    (original covariate scale) and a ground-truth dict."""
    rng = np.random.default_rng(design.seed if seed is None else seed)
    n, m = design.n, design.m
    N = n * m
    X_lin = rng.uniform(size=(N, design.p_linear))
    X_smo = rng.uniform(size=(N, design.p_smooth))
    u = rng.normal(scale=math.sqrt(design.sigma_u), size=n)

    beta = design.true_beta
    gs = design.true_g
    eta = X_lin @ beta
    for k, g in enumerate(gs):
        eta = eta + g(X_smo[:, k])
    eta = eta + np.repeat(u, m)

    if design.example == "ex3_binary":
        L = np.linalg.cholesky(correlation_matrix(
            CorrelationSpec("ar1", design.copula_rho), m))
        z = rng.standard_normal(size=(n, m))
        latent = z @ L.T
        y = (ndtr(latent.ravel()) <= expit(eta)).astype(float)
    else:
        L = np.linalg.cholesky(correlation_matrix(
            CorrelationSpec("ar1", design.error_rho), m))
        z = rng.standard_normal(size=(n, m))
        eps = design.sigma * (z @ L.T).ravel()
        y = eta + eps

    labels = np.repeat([f"s{i:05d}" for i in range(n)], m)
    ds = from_arrays(y, X_lin, X_smo, labels)
    truth = {
        "beta": beta,
        "beta_support": design.beta_support,
        "g_support": design.g_support,
        "g_functions": gs,
        "u": u,
        "design": design,
    }
    return ds, truth


def aise_grid(n_points: int = 200, lo: float = 0.025, hi: float = 0.975) -> np.ndarray:
    return np.linspace(lo, hi, n_points)


@dataclass
class SimFitResult:
    """What the scorer needs from one fitted replication."""

    beta_original: np.ndarray       # (p,)
    active_beta: np.ndarray         # (p,) bool
    active_groups: np.ndarray       # (r,) bool
    g_values: np.ndarray            # (r, n_grid) fitted components on the grid
    lam: float = 0.0
    converged: bool = True


def evaluate_components(state: FitState, basis: BasisSet,
                        record: StandardizationRecord,
                        x_grid: np.ndarray) -> np.ndarray:
    """Fitted ghat_k on an original-scale grid, mapped through the stored
    range normalization (clipped to the observed range)."""
    r = basis.n_components
    out = np.zeros((r, len(x_grid)))
    for k in range(r):
        xs = (x_grid - record.smooth_mins[k]) / record.smooth_ranges[k]
        xs = np.clip(xs, 0.0, 1.0)
        out[k] = evaluate_g_hat(state.alphas[k], basis.specs[k],
                                basis.centering_means[k], xs,
                                knots=basis.knots[k])
    return out


def centered_true_components(design: SimDesign, x_grid: np.ndarray) -> np.ndarray:
    """True g_k on the grid, centered to grid mean zero (the estimable
    part of each component)."""
    out = np.zeros((design.p_smooth, len(x_grid)))
    for k, g in enumerate(design.true_g):
        vals = g(x_grid)
        if design.g_support[k]:
            vals = vals - vals.mean()
        out[k] = vals
    return out


def score_replication(result: SimFitResult, design: SimDesign,
                      x_grid: np.ndarray) -> dict:
    beta0 = design.true_beta
    sel_beta = result.active_beta & (result.beta_original != 0.0)
    sel_g = result.active_groups.astype(bool)
    bsup, gsup = design.beta_support, design.g_support

    fzs = int(np.sum(bsup & ~sel_beta))
    fns = int(np.sum(~bsup & sel_beta))
    fzf = int(np.sum(gsup & ~sel_g))
    fnf = int(np.sum(~gsup & sel_g))

    mse = float(np.sum((result.beta_original - beta0) ** 2))
    gtrue = centered_true_components(design, x_grid)
    aise = np.mean((result.g_values - gtrue) ** 2, axis=1)
    taise = float(np.sum(aise))

    underfit = (fzs + fzf) > 0
    correct = (fzs + fns + fzf + fnf) == 0
    overfit = (not underfit) and ((fns + fnf) > 0)
    return {
        "mse": mse, "taise": taise, "aise": aise.tolist(),
        "fzs": fzs, "fns": fns, "fzf": fzf, "fnf": fnf,
        "underfit": underfit, "correct": correct, "overfit": overfit,
        "lambda": result.lam, "converged": bool(result.converged),
    }


@dataclass
class MetricsReport:
    mse: float
    taise: float
    fzs: float
    fns: float
    fzf: float
    fnf: float
    u_fit: float
    c_fit: float
    o_fit: float
    n_reps: int
    n_failed: int
    records: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("mse", "taise", "fzs", "fns", "fzf", "fnf",
                 "u_fit", "c_fit", "o_fit", "n_reps", "n_failed")}


def aggregate(records: list[dict], n_failed: int = 0) -> MetricsReport:
    ok = [r for r in records if "error" not in r]
    if not ok:
        raise ContractError("no successful replications to aggregate")
    mean = lambda key: float(np.mean([r[key] for r in ok]))  # noqa: E731
    return MetricsReport(
        mse=mean("mse"), taise=mean("taise"), fzs=mean("fzs"),
        fns=mean("fns"), fzf=mean("fzf"), fnf=mean("fnf"),
        u_fit=mean("underfit"), c_fit=mean("correct"), o_fit=mean("overfit"),
        n_reps=len(ok), n_failed=n_failed, records=records)


def model_spec_for(design: SimDesign, structure: str = "ar1",
                   mc: McConfig | None = None,
                   penalty: PenaltyConfig | None = None) -> ModelSpec:
    return ModelSpec(
        family=design.family,
        correlation=CorrelationSpec(structure, 0.0),
        penalty=penalty if penalty is not None else PenaltyConfig(),
        mc=mc if mc is not None else McConfig(),
        random_effects=True,
        sigma0=0.5,
    )


def _basis_for(ds_std: LongitudinalDataset, design: SimDesign,
               degree: int) -> BasisSet:
    L = default_knot_count(design.n)
    return build_basis_set(ds_std, SplineBasisSpec(degree=degree,
                                                   interior_knots=L))


def _rep_seed(base: int, rep: int) -> list[int]:
    return [int(base) & 0xFFFFFFFFFFFFFFFF, int(rep)]


def fit_replication(design: SimDesign, rep: int, spec: ModelSpec,
                    cfg: SolverConfig, degree: int = 3,
                    method: str = "scad", lambda_mode: str = "auto",
                    lam: float = 0.0, grid=None, n_grid: int = 20,
                    x_grid: np.ndarray | None = None) -> dict:
    """Generate -> standardize -> fit/tune -> score one replication."""
    if x_grid is None:
        x_grid = aise_grid()
    data_seed = _rep_seed(design.seed, rep)
    ds_raw, truth = generate(design, seed=data_seed)
    mc_seed = int(np.random.SeedSequence(data_seed + [7]).generate_state(1)[0])
    spec = replace(spec, mc=replace(spec.mc, seed=mc_seed))

    if method == "oracle":
        keep_b = np.flatnonzero(design.beta_support)
        keep_g = np.flatnonzero(design.g_support)
        ds_raw = subset_columns(ds_raw, keep_b, keep_g)
    else:
        keep_b = np.arange(design.p_linear)
        keep_g = np.arange(design.p_smooth)

    ds_std, record = standardize(ds_raw)
    basis = _basis_for(ds_std, design, degree)

    refit = None
    sel_override = None
    if method in ("full", "oracle"):
        state = fit(ds_std, basis, spec, cfg, lam=0.0)
        lam_used = 0.0
    elif lambda_mode == "fixed":
        state = fit(ds_std, basis, spec, cfg, lam=lam)
        lam_used = lam
    else:
        report, state = select_lambda(ds_std, basis, spec, cfg, grid=grid,
                                      n_grid=n_grid)
        refit = report.best_refit
        sel_override = (report.selected_beta, report.selected_groups)
        lam_used = state.lam

    if sel_override is not None:
        sel_b_local, sel_g_local = (sel_override[0].copy(),
                                    sel_override[1].copy())
    else:
        sel_b_local = state.active_beta & (state.beta != 0.0)
        sel_g_local = state.active_groups.copy()
    if method == "scad" and (sel_b_local.any() or sel_g_local.any()):
        # the SCAD fit does the selection; shrinkage bias on the survivors
        # is removed by the unpenalized refit on the selected support
        if refit is None:
            ds_sel = subset_columns(ds_std, np.flatnonzero(sel_b_local),
                                    np.flatnonzero(sel_g_local))
            basis_sel = subset_basis(basis, np.flatnonzero(sel_g_local))
            refit = fit(ds_sel, basis_sel, spec, cfg, lam=0.0)
        basis_sel = subset_basis(basis, np.flatnonzero(sel_g_local))
        beta_sel = np.zeros(len(keep_b))
        beta_sel[np.flatnonzero(sel_b_local)] = refit.beta
        gval_sel = np.zeros((len(keep_g), len(x_grid)))
        if basis_sel.n_components:
            rec_sel = StandardizationRecord(
                record.linear_means[sel_b_local],
                record.linear_scales[sel_b_local],
                record.smooth_mins[sel_g_local],
                record.smooth_ranges[sel_g_local])
            gval_sel[np.flatnonzero(sel_g_local)] = evaluate_components(
                refit, basis_sel, rec_sel, x_grid)
        beta_std_full = beta_sel
        g_local = gval_sel
    else:
        beta_std_full = state.beta
        g_local = evaluate_components(state, basis, record, x_grid)

    beta_full = np.zeros(design.p_linear)
    active_b = np.zeros(design.p_linear, dtype=bool)
    beta_full[keep_b] = beta_std_full / record.linear_scales
    active_b[keep_b] = sel_b_local
    active_g = np.zeros(design.p_smooth, dtype=bool)
    active_g[keep_g] = sel_g_local
    gvals = np.zeros((design.p_smooth, len(x_grid)))
    gvals[keep_g] = g_local

    result = SimFitResult(beta_original=beta_full, active_beta=active_b,
                          active_groups=active_g, g_values=gvals,
                          lam=lam_used, converged=state.converged)
    rec = score_replication(result, design, x_grid)
    rec["rep"] = rep
    rec["beta_original"] = beta_full.tolist()
    return rec


def _cheat_result(design: SimDesign, mode: str, x_grid: np.ndarray) -> SimFitResult:
    if mode == "cheat_truth":
        return SimFitResult(
            beta_original=design.true_beta.copy(),
            active_beta=design.beta_support.copy(),
            active_groups=design.g_support.copy(),
            g_values=centered_true_components(design, x_grid))
    if mode == "cheat_zero":
        return SimFitResult(
            beta_original=np.zeros(design.p_linear),
            active_beta=np.zeros(design.p_linear, dtype=bool),
            active_groups=np.zeros(design.p_smooth, dtype=bool),
            g_values=np.zeros((design.p_smooth, len(x_grid))))
    raise ContractError(f"unknown estimator mode {mode!r}")


def run_replications(design: SimDesign, spec: ModelSpec, cfg: SolverConfig,
                     reps: int, degree: int = 3, method: str = "scad",
                     lambda_mode: str = "auto", lam: float = 0.0,
                     grid=None, n_grid: int = 20,
                     x_grid: np.ndarray | None = None) -> MetricsReport:
    """Replicate generate/fit/score; failures are recorded and excluded
    from the aggregate with a count, never silently dropped."""
    if reps < 1:
        raise ContractError("reps must be >= 1")
    if x_grid is None:
        x_grid = aise_grid()
    records = []
    n_failed = 0
    for rep in range(reps):
        if method in ("cheat_truth", "cheat_zero"):
            rec = score_replication(_cheat_result(design, method, x_grid),
                                    design, x_grid)
            rec["rep"] = rep
            records.append(rec)
            continue
        try:
            records.append(fit_replication(
                design, rep, spec, cfg, degree=degree, method=method,
                lambda_mode=lambda_mode, lam=lam, grid=grid, n_grid=n_grid,
                x_grid=x_grid))
        except Exception as exc:   # noqa: BLE001 - recorded, counted
            records.append({"rep": rep, "error": f"{type(exc).__name__}: {exc}"})
            n_failed += 1
    return aggregate(records, n_failed)


def compare_models(design: SimDesign, cfg: SolverConfig, reps: int,
                   methods=("scad", "oracle", "full"),
                   structures=("ar1", "exchangeable", "independent"),
                   degrees=(3,), mc: McConfig | None = None,
                   lambda_mode: str = "auto", lam: float = 0.0,
                   n_grid: int = 20) -> list[dict]:
    """Emit one row per (method, structure, degree) with shared data
    seeds, so comparisons across cells are paired."""
    rows = []
    for degree in degrees:
        for structure in structures:
            spec = model_spec_for(design, structure, mc=mc)
            for method in methods:
                rep_mode = lambda_mode if method == "scad" else "fixed"
                report = run_replications(
                    design, spec, cfg, reps, degree=degree, method=method,
                    lambda_mode=rep_mode, lam=lam, n_grid=n_grid)
                row = {"method": method, "structure": structure,
                       "degree": degree}
                row.update(report.to_dict())
                rows.append(row)
    return rows
