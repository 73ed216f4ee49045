"""Metropolis sampling of random effects and Monte Carlo expectations.

The posterior p(u | y, theta, Sigma) is sampled coordinate-wise: the
proposal for coordinate c of subject i is the *prior* conditional
N(m_c(u_i,-c), v_c) given the other coordinates under the current Sigma,
so the acceptance ratio reduces exactly to the conditional likelihood
ratio of subject i's responses (the prior and proposal densities cancel).
Rejected proposals keep the old value.

Subjects are conditionally independent, so one sweep updates a coordinate
of every subject simultaneously; each subject draws from its own RNG
substream (keyed by a stable hash of the subject id), which makes the
per-subject accept/reject path invariant to subject ordering and lets the
whole sweep run as vectorized numpy.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass

import numpy as np

from .data import LongitudinalDataset
from .exceptions import ChainWarning, ContractError, NumericalError
from .families import Family

_CHUNK = 512  # sweeps of pre-generated randoms per block; fixed for stream stability
_ACC_BAND = (0.05, 0.95)


@dataclass(frozen=True)
class RandomEffectsModel:
    """Mean-zero multivariate normal random effects with covariance Sigma."""

    Sigma: np.ndarray

    def __post_init__(self):
        S = np.asarray(self.Sigma, dtype=float)
        if S.ndim != 2 or S.shape[0] != S.shape[1]:
            raise ContractError("Sigma must be square")
        if not np.allclose(S, S.T, atol=1e-10):
            raise ContractError("Sigma must be symmetric")
        object.__setattr__(self, "Sigma", 0.5 * (S + S.T))

    @property
    def q(self) -> int:
        return self.Sigma.shape[0]


@dataclass(frozen=True)
class McConfig:
    """Chain schedule: draws retained, burn-in, thinning, seed, and the
    growth of the draw count across outer Newton iterations."""

    n_draws: int = 100
    burn_in: int = 200
    reburn_in: int = 50
    thinning: int = 5
    seed: int = 0
    growth: float = 1.3
    cap: int = 2000

    def __post_init__(self):
        if self.n_draws < 1:
            raise ContractError("n_draws must be >= 1")
        if self.burn_in < 0 or self.reburn_in < 0:
            raise ContractError("burn-in must be >= 0")
        if self.thinning < 1:
            raise ContractError("thinning must be >= 1")

    def draws_at(self, outer_iter: int) -> int:
        """Retained draws for a given outer iteration (0-based)."""
        return min(self.cap, int(round(self.n_draws * self.growth ** outer_iter)))


@dataclass
class ChainDraws:
    """Retained samples of all random effects plus chain metadata."""

    draws: np.ndarray          # (N, n, q)
    acceptance_rate: float
    burn_in: int
    thinning: int
    seed: int
    last_state: np.ndarray     # (n, q)

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0]

    def u_mean(self) -> np.ndarray:
        """(n, q) posterior mean of each subject's random effects."""
        return self.draws.mean(axis=0)

    def u_second_moment(self) -> np.ndarray:
        """(n, q, q) per-subject E[u u'] over draws."""
        return np.einsum("kiq,kiQ->iqQ", self.draws, self.draws) / self.n_draws

    def u_cov(self) -> np.ndarray:
        """(n, q, q) per-subject draw covariance."""
        m = self.u_mean()
        return self.u_second_moment() - np.einsum("iq,iQ->iqQ", m, m)


def subject_stream_key(subject_id: str) -> int:
    """Stable 64-bit key for a subject's RNG substream."""
    return int.from_bytes(
        hashlib.blake2b(subject_id.encode("utf-8"), digest_size=8).digest(), "big")


def subject_rngs(ds: LongitudinalDataset, seed: int) -> list[np.random.Generator]:
    return [
        np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF,
                                    subject_stream_key(s.id)])))
        for s in ds.subjects
    ]


class _ChainContext:
    """Precomputed per-dataset quantities for fast sweeps.

    Holds the mu-dependent part of the conditional log likelihood in
    canonical form so a sweep costs a handful of vector ops; additive
    constants cancel in the Metropolis ratio.
    """

    def __init__(self, ds: LongitudinalDataset, eta_fixed: np.ndarray,
                 family: Family, phi: float):
        self.ds = ds
        self.family = family
        self.phi = float(phi)
        self.y = ds.stack_y()
        self.w = ds.stack_weights()
        self.Z = ds.stack_Z()
        self.sizes = ds.block_sizes
        self.offsets = ds.row_offsets
        self.eta_fixed = np.asarray(eta_fixed, dtype=float)
        if self.eta_fixed.shape != self.y.shape:
            raise ContractError("eta_fixed must have one entry per observation")
        self.n = ds.n_subjects
        self.q = ds.random_effect_dim
        self.kind = family.kind
        if self.kind == "binomial":
            self._claims = self.w * self.y     # successes
        elif self.kind == "poisson":
            self._claims = self.w * self.y     # counts

    def partial_loglik(self, eta: np.ndarray) -> np.ndarray:
        """Per-observation log density up to eta-free constants."""
        if self.kind == "gaussian":
            r = self.y - eta
            return (-0.5 / self.phi) * self.w * r * r
        if self.kind == "binomial":
            return self._claims * eta - self.w * np.logaddexp(0.0, eta)
        return self._claims * eta - self.w * np.exp(np.clip(eta, None, 700.0))

    def subject_loglik(self, eta: np.ndarray) -> np.ndarray:
        return np.add.reduceat(self.partial_loglik(eta), self.offsets)

    def eta_of(self, U: np.ndarray) -> np.ndarray:
        contrib = np.einsum("nj,nj->n", self.Z,
                            np.repeat(U, self.sizes, axis=0))
        return self.eta_fixed + contrib


def _conditional_proposal_params(Sigma: np.ndarray):
    """Per-coordinate (other-index, regression vector, conditional sd)."""
    q = Sigma.shape[0]
    params = []
    for c in range(q):
        others = [j for j in range(q) if j != c]
        if not others:
            params.append((np.empty(0, dtype=int), np.empty(0),
                           float(np.sqrt(max(Sigma[c, c], 0.0)))))
            continue
        Soo = Sigma[np.ix_(others, others)]
        sco = Sigma[c, others]
        coef = np.linalg.solve(Soo, sco)
        v = Sigma[c, c] - sco @ coef
        params.append((np.array(others, dtype=int), coef,
                       float(np.sqrt(max(v, 0.0)))))
    return params


def _sweep_inplace(ctx: _ChainContext, U, eta, ll_cur, prop_params,
                   z_sweep, unif_sweep) -> int:
    """One full sweep over coordinates, vectorized across subjects.

    Mutates U (n,q), eta (N_obs,), ll_cur (n,); returns accept count.
    """
    accepted = 0
    log_unif = np.log(unif_sweep)
    for c in range(ctx.q):
        others, coef, sd = prop_params[c]
        m = U[:, others] @ coef if others.size else 0.0
        u_star = m + sd * z_sweep[:, c]
        delta = u_star - U[:, c]
        eta_star = eta + ctx.Z[:, c] * np.repeat(delta, ctx.sizes)
        ll_star = np.add.reduceat(ctx.partial_loglik(eta_star), ctx.offsets)
        if np.isnan(ll_star).any():
            i = int(np.flatnonzero(np.isnan(ll_star))[0])
            raise NumericalError(
                f"non-finite log likelihood for subject index {i}, coordinate {c}")
        accept = log_unif[:, c] < (ll_star - ll_cur)
        if np.any(accept):
            U[accept, c] = u_star[accept]
            rows = np.repeat(accept, ctx.sizes)
            eta[rows] = eta_star[rows]
            ll_cur[accept] = ll_star[accept]
            accepted += int(accept.sum())
    return accepted


def metropolis_sweep(U: np.ndarray, ds: LongitudinalDataset,
                     eta_fixed: np.ndarray, family: Family, phi: float,
                     model: RandomEffectsModel,
                     rngs: list[np.random.Generator]) -> tuple[np.ndarray, float]:
    """One Metropolis sweep from explicit per-subject generators.

    Returns the updated stacked state and the sweep acceptance rate.
    """
    ctx = _ChainContext(ds, eta_fixed, family, phi)
    U = np.array(U, dtype=float).reshape(ctx.n, ctx.q)
    prop = _conditional_proposal_params(model.Sigma)
    z = np.stack([r.standard_normal(ctx.q) for r in rngs])
    un = np.stack([r.random(ctx.q) for r in rngs])
    eta = ctx.eta_of(U)
    ll = ctx.subject_loglik(eta)
    acc = _sweep_inplace(ctx, U, eta, ll, prop, z, un)
    return U, acc / (ctx.n * ctx.q)


def _run_sweeps_general(ctx: _ChainContext, U, prop, rngs, burn, N, thinning,
                        draws):
    eta = ctx.eta_of(U)
    ll = ctx.subject_loglik(eta)
    total_sweeps = burn + N * thinning
    accepted = 0
    kept = 0
    done = 0
    while done < total_sweeps:
        block = min(_CHUNK, total_sweeps - done)
        # fixed generation order per subject: normals then uniforms
        z_block = np.stack([r.standard_normal((_CHUNK, ctx.q)) for r in rngs],
                           axis=1)
        u_block = np.stack([r.random((_CHUNK, ctx.q)) for r in rngs], axis=1)
        for s in range(block):
            accepted += _sweep_inplace(ctx, U, eta, ll, prop,
                                       z_block[s], u_block[s])
            done += 1
            if done > burn and (done - burn) % thinning == 0 and kept < N:
                draws[kept] = U
                kept += 1
    return accepted, total_sweeps


def _run_sweeps_gaussian_q1(ctx: _ChainContext, U, sd, rngs, burn, N,
                            thinning, draws):
    """Exact fast path: the per-subject log likelihood is quadratic in the
    scalar random effect, so a sweep needs only length-n vector work.

    Same substreams and generation order as the general path, so the seed
    contract is unchanged.
    """
    z_col = ctx.Z[:, 0]
    r_fix = ctx.y - ctx.eta_fixed
    wz = ctx.w * z_col
    Szz = np.add.reduceat(wz * z_col, ctx.offsets) / ctx.phi
    Srz = np.add.reduceat(wz * r_fix, ctx.offsets) / ctx.phi
    u = U[:, 0].copy()
    total_sweeps = burn + N * thinning
    accepted = 0
    kept = 0
    done = 0
    while done < total_sweeps:
        block = min(_CHUNK, total_sweeps - done)
        z_block = np.stack([r.standard_normal((_CHUNK, 1)) for r in rngs],
                           axis=1)[:, :, 0]
        u_block = np.stack([r.random((_CHUNK, 1)) for r in rngs],
                           axis=1)[:, :, 0]
        lu_block = np.log(u_block)
        for s in range(block):
            u_star = sd * z_block[s]
            # Delta loglik = -0.5 Szz (u*^2 - u^2) + Srz (u* - u)
            dl = (u_star - u) * (Srz - 0.5 * Szz * (u_star + u))
            acc = lu_block[s] < dl
            accepted += int(acc.sum())
            u = np.where(acc, u_star, u)
            done += 1
            if done > burn and (done - burn) % thinning == 0 and kept < N:
                draws[kept, :, 0] = u
                kept += 1
    U[:, 0] = u
    return accepted, total_sweeps


def run_chain(ds: LongitudinalDataset, eta_fixed: np.ndarray, family: Family,
              phi: float, model: RandomEffectsModel, cfg: McConfig,
              n_draws: int | None = None, burn_in: int | None = None,
              initial: np.ndarray | None = None,
              warn_acceptance: bool = True) -> ChainDraws:
    """Run burn-in then retain every `thinning`-th sweep until n_draws.

    Deterministic given cfg.seed: every subject's randoms come from its own
    seeded substream, pre-generated in fixed-size blocks.  The gaussian
    identity family with q=1 takes an algebraically identical fast path.
    """
    N = cfg.n_draws if n_draws is None else int(n_draws)
    burn = cfg.burn_in if burn_in is None else int(burn_in)
    if N < 1:
        raise ContractError("need at least one retained draw")

    ctx = _ChainContext(ds, eta_fixed, family, phi)
    n, q = ctx.n, ctx.q
    if model.q != q:
        raise ContractError(f"Sigma is {model.q}x{model.q} but dataset has q={q}")
    U = np.zeros((n, q)) if initial is None else \
        np.array(initial, dtype=float).reshape(n, q)

    rngs = subject_rngs(ds, cfg.seed)
    draws = np.empty((N, n, q))
    if family.kind == "gaussian" and q == 1:
        sd = float(np.sqrt(max(model.Sigma[0, 0], 0.0)))
        accepted, total_sweeps = _run_sweeps_gaussian_q1(
            ctx, U, sd, rngs, burn, N, cfg.thinning, draws)
    else:
        prop = _conditional_proposal_params(model.Sigma)
        accepted, total_sweeps = _run_sweeps_general(
            ctx, U, prop, rngs, burn, N, cfg.thinning, draws)
    rate = accepted / (total_sweeps * n * q) if total_sweeps else 1.0
    if warn_acceptance and not (_ACC_BAND[0] < rate < _ACC_BAND[1]):
        warnings.warn(
            f"Metropolis acceptance rate {rate:.3f} outside {_ACC_BAND}",
            ChainWarning, stacklevel=2)
    return ChainDraws(draws=draws, acceptance_rate=rate, burn_in=burn,
                      thinning=cfg.thinning, seed=cfg.seed, last_state=U.copy())


def update_sigma(draws: ChainDraws, floor: float = 1e-10) -> np.ndarray:
    """ML update of Sigma for mean-zero normal effects: the average outer
    product over all subjects and draws, eigenvalue-floored to stay PD."""
    d = draws.draws
    N, n, q = d.shape
    S = np.einsum("kiq,kiQ->qQ", d, d) / (n * N)
    S = 0.5 * (S + S.T)
    evals, evecs = np.linalg.eigh(S)
    if evals.min() < floor:
        evals = np.clip(evals, floor, None)
        S = (evecs * evals) @ evecs.T
        S = 0.5 * (S + S.T)
    return S


def mc_expectation(f, draws: ChainDraws):
    """Arithmetic mean of f(U) over retained draws; f maps (n,q) -> array."""
    vals = None
    for k in range(draws.n_draws):
        v = np.asarray(f(draws.draws[k]), dtype=float)
        if not np.all(np.isfinite(v)):
            raise NumericalError(f"non-finite functional value at draw {k}")
        vals = v if vals is None else vals + v
    return vals / draws.n_draws
