"""Command-line interface: fit, tune, simulate, evaluate.

Flags override a JSON config file, which overrides defaults; the effective
configuration, seed, and package version are echoed into every output
document so a run can be reproduced byte-for-byte.  Exit codes: 0 success,
1 hard error (single-line diagnostic on stderr), 2 statistical
non-convergence (the capped state is still written).
"""

from __future__ import annotations

import argparse
import csv as _csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .basis import SplineBasisSpec, build_basis_set, default_knot_count, evaluate_g_hat
from .correlation import CorrelationSpec
from .data import ColumnRoleConfig, load_csv, standardize
from .exceptions import PgammError
from .families import Family
from .gcv import gcv as gcv_eval
from .gcv import select_lambda
from .penalty import PenaltyConfig
from .sampling import McConfig
from .simulate import (
    SimDesign,
    aise_grid,
    centered_true_components,
    model_spec_for,
    run_replications,
)
from .solver import ModelSpec, SolverConfig, fit, sandwich_covariance

G_GRID_POINTS = 201


def _json_dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n",
                    encoding="utf-8")


def _split_cols(value) -> tuple[str, ...]:
    if value is None:
        return ()
    if isinstance(value, (list, tuple)):
        return tuple(value)
    return tuple(s for s in str(value).split(",") if s)


def _merge_config(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults < config file < explicit flags."""
    eff = dict(defaults)
    cfg_path = getattr(args, "config", None)
    if cfg_path:
        with open(cfg_path, encoding="utf-8") as fh:
            file_cfg = json.load(fh)
        for k, v in file_cfg.items():
            key = k.replace("-", "_")
            if key in eff:
                eff[key] = v
    for key in eff:
        val = getattr(args, key, None)
        if val is not None:
            eff[key] = val
    return eff


def _shared_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="input CSV path")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--family", choices=["gaussian", "binomial", "poisson"])
    p.add_argument("--corr", choices=["ind", "ex", "ar1"])
    p.add_argument("--degree", type=int, choices=[1, 2, 3])
    p.add_argument("--knots", help="'auto' or an interior-knot count")
    p.add_argument("--lambda", dest="lam", help="'auto' or a float")
    p.add_argument("--mc-draws", dest="mc_draws", type=int)
    p.add_argument("--burnin", type=int)
    p.add_argument("--thin", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--id-col", dest="id_col")
    p.add_argument("--response-col", dest="response_col")
    p.add_argument("--linear-cols", dest="linear_cols")
    p.add_argument("--smooth-cols", dest="smooth_cols")
    p.add_argument("--re-cols", dest="re_cols")
    p.add_argument("--weight-col", dest="weight_col")
    p.add_argument("--scad-a", dest="scad_a", type=float)
    p.add_argument("--threshold", type=float)
    p.add_argument("--max-iter", dest="max_iter", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--no-random-effects", dest="no_random_effects",
                   action="store_const", const=True)
    p.add_argument("--freeze-rho", dest="freeze_rho",
                   action="store_const", const=True)


_FIT_DEFAULTS = {
    "data": None, "family": "gaussian", "corr": "ind", "degree": 3,
    "knots": "auto", "lam": "0.0", "mc_draws": 100, "burnin": 200,
    "thin": 5, "seed": 0, "jobs": 1, "out": ".",
    "id_col": "id", "response_col": "y", "linear_cols": "",
    "smooth_cols": "", "re_cols": "", "weight_col": None,
    "scad_a": 3.7, "threshold": 1e-6, "max_iter": 100, "tol": 1e-3,
    "no_random_effects": False, "freeze_rho": False, "n_grid": 20,
}

_CORR_NAMES = {"ind": "independent", "ex": "exchangeable", "ar1": "ar1"}


def _build_problem(eff: dict):
    if not eff.get("data"):
        raise PgammError("missing --data: an input CSV is required")
    roles = ColumnRoleConfig(
        subject_id=eff["id_col"], response=eff["response_col"],
        linear=_split_cols(eff["linear_cols"]),
        smooth=_split_cols(eff["smooth_cols"]),
        random_effect=_split_cols(eff["re_cols"]),
        weight=eff["weight_col"] or None)
    ds_raw = load_csv(eff["data"], roles)
    ds, record = standardize(ds_raw)
    knots = eff["knots"]
    L = default_knot_count(ds.n_subjects) if str(knots) == "auto" else int(knots)
    basis = build_basis_set(ds, SplineBasisSpec(degree=int(eff["degree"]),
                                                interior_knots=L))
    spec = ModelSpec(
        family=Family(eff["family"]),
        correlation=CorrelationSpec(_CORR_NAMES[eff["corr"]], 0.0),
        penalty=PenaltyConfig(a=float(eff["scad_a"]),
                              epsilon=float(eff["threshold"])),
        mc=McConfig(n_draws=int(eff["mc_draws"]), burn_in=int(eff["burnin"]),
                    thinning=int(eff["thin"]), seed=int(eff["seed"])),
        random_effects=not eff["no_random_effects"],
        freeze_rho=bool(eff["freeze_rho"]),
    )
    cfg = SolverConfig(max_outer_iter=int(eff["max_iter"]),
                       tol=float(eff["tol"]))
    return ds, record, basis, spec, cfg


def _fit_document(state, ds, record, basis, spec, eff: dict) -> dict:
    grid = np.linspace(0.0, 1.0, G_GRID_POINTS)
    smooth = []
    for k, name in enumerate(ds.smooth_names):
        vals = evaluate_g_hat(state.alphas[k], basis.specs[k],
                              basis.centering_means[k], grid,
                              knots=basis.knots[k])
        smooth.append({
            "name": name,
            "active": bool(state.active_groups[k]),
            "alpha": state.alphas[k].tolist(),
            "degree": basis.specs[k].degree,
            "knots": basis.knots[k].tolist(),
            "centering_means": basis.centering_means[k].tolist(),
            "g_grid": vals.tolist(),
        })
    se = None
    if state.converged and state.active_beta.any() and state.draws is not None:
        try:
            cov = sandwich_covariance(state, ds, None, basis,
                                      state.correlation, spec.family)
            se_std = np.sqrt(np.clip(np.diag(cov), 0.0, None))
            se_full = np.zeros(len(state.beta))
            se_full[np.flatnonzero(state.active_beta)] = se_std
            se = (se_full / record.linear_scales).tolist() \
                if len(record.linear_scales) else se_full.tolist()
        except PgammError:
            se = None
    return {
        "version": f"pgamm {__version__}",
        "config": {k: eff[k] for k in sorted(eff)},
        "seed": int(eff["seed"]),
        "converged": bool(state.converged),
        "n_iter": int(state.n_iter),
        "lambda": float(state.lam),
        "phi": float(state.phi),
        "rho": float(state.rho),
        "sigma": state.Sigma.tolist(),
        "linear": {
            "names": list(ds.linear_names),
            "estimate_original": record.beta_to_original(state.beta).tolist()
            if len(state.beta) else [],
            "estimate_standardized": state.beta.tolist(),
            "active": [bool(b) for b in state.active_beta],
            "se_sandwich_original": se,
        },
        "smooth": smooth,
        "g_grid_x": grid.tolist(),
        "standardization": record.to_dict(),
        "trace": [{k: (float(v) if isinstance(v, (int, float, np.floating))
                       else v) for k, v in row.items()} for row in state.trace],
    }


def _summary_text(doc: dict) -> str:
    lines = [f"pgamm fit ({doc['version']})",
             f"converged: {doc['converged']} after {doc['n_iter']} iterations",
             f"lambda: {doc['lambda']:.6g}  rho: {doc['rho']:.4f}  "
             f"phi: {doc['phi']:.4f}",
             "linear coefficients (original scale):"]
    for name, est, act in zip(doc["linear"]["names"],
                              doc["linear"]["estimate_original"],
                              doc["linear"]["active"]):
        mark = "" if act else "  [zeroed]"
        lines.append(f"  {name:>12s}  {est:+.6f}{mark}")
    lines.append("smooth components:")
    for s in doc["smooth"]:
        status = "active" if s["active"] else "zeroed"
        lines.append(f"  {s['name']:>12s}  [{status}]")
    return "\n".join(lines) + "\n"


def cmd_fit(args) -> int:
    eff = _merge_config(args, _FIT_DEFAULTS)
    ds, record, basis, spec, cfg = _build_problem(eff)
    out = Path(eff["out"])
    out.mkdir(parents=True, exist_ok=True)
    lam_raw = str(eff["lam"])
    if lam_raw == "auto":
        _, state = select_lambda(ds, basis, spec, cfg,
                                 n_grid=int(eff["n_grid"]))
    else:
        state = fit(ds, basis, spec, cfg, lam=float(lam_raw))
    doc = _fit_document(state, ds, record, basis, spec, eff)
    _json_dump(doc, out / "fit.json")
    (out / "summary.txt").write_text(_summary_text(doc), encoding="utf-8")
    return 0 if state.converged else 2


def cmd_tune(args) -> int:
    eff = _merge_config(args, _FIT_DEFAULTS)
    ds, record, basis, spec, cfg = _build_problem(eff)
    out = Path(eff["out"])
    out.mkdir(parents=True, exist_ok=True)
    lam_raw = str(eff["lam"])
    grid = None
    if lam_raw not in ("auto", ""):
        grid = [float(x) for x in lam_raw.split(",") if x]
        if not grid:
            raise PgammError("empty lambda grid")
    report, state = select_lambda(ds, basis, spec, cfg, grid=grid,
                                  n_grid=int(eff["n_grid"]))
    doc = _fit_document(state, ds, record, basis, spec, eff)
    gdoc = report.to_dict()
    gdoc["version"] = f"pgamm {__version__}"
    gdoc["seed"] = int(eff["seed"])
    gdoc["config"] = {k: eff[k] for k in sorted(eff)}
    _json_dump(doc, out / "fit.json")
    _json_dump(gdoc, out / "gcv.json")
    with open(out / "gcv.csv", "w", newline="", encoding="utf-8") as fh:
        wr = _csv.writer(fh)
        wr.writerow(["lambda", "gcv", "rss", "dof"])
        for row in zip(gdoc["lambda_grid"], gdoc["gcv"], gdoc["rss"],
                       gdoc["dof"]):
            wr.writerow([repr(v) for v in row])
    (out / "summary.txt").write_text(_summary_text(doc), encoding="utf-8")
    return 0 if state.converged else 2


_SIM_DEFAULTS = {
    "example": 1, "n": None, "m": None, "reps": 20, "corr": "ar1",
    "degree": 3, "lam": "auto", "seed": 0, "jobs": 1, "out": ".",
    "mc_draws": 100, "burnin": 200, "thin": 5, "method": "scad",
    "max_iter": 100, "tol": 1e-3, "n_grid": 20, "config": None,
}


def cmd_simulate(args) -> int:
    eff = _merge_config(args, _SIM_DEFAULTS)
    ex = int(eff["example"])
    if ex not in (1, 2, 3):
        raise PgammError(f"--example must be 1, 2, or 3, got {ex}")
    name = {1: "ex1_gaussian_moderate", 2: "ex2_gaussian_highdim",
            3: "ex3_binary"}[ex]
    base = {1: {"n": 100, "m": 5},
            2: {"n": 200, "m": 5, "p_linear": 100, "p_smooth": 100},
            3: {"n": 200, "m": 4}}[ex]
    if eff["n"] is not None:
        base["n"] = int(eff["n"])
    if eff["m"] is not None:
        base["m"] = int(eff["m"])
    design = SimDesign(example=name, seed=int(eff["seed"]), **base)
    spec = model_spec_for(design, _CORR_NAMES[eff["corr"]],
                          mc=McConfig(n_draws=int(eff["mc_draws"]),
                                      burn_in=int(eff["burnin"]),
                                      thinning=int(eff["thin"]),
                                      seed=int(eff["seed"])))
    cfg = SolverConfig(max_outer_iter=int(eff["max_iter"]),
                       tol=float(eff["tol"]))
    lam_raw = str(eff["lam"])
    lambda_mode = "auto" if lam_raw == "auto" else "fixed"
    lam = 0.0 if lam_raw == "auto" else float(lam_raw)
    report = run_replications(
        design, spec, cfg, int(eff["reps"]), degree=int(eff["degree"]),
        method=str(eff["method"]), lambda_mode=lambda_mode, lam=lam,
        n_grid=int(eff["n_grid"]))

    out = Path(eff["out"])
    out.mkdir(parents=True, exist_ok=True)
    doc = {"version": f"pgamm {__version__}", "seed": int(eff["seed"]),
           "config": {k: eff[k] for k in sorted(eff)},
           "design": {"example": design.example, "n": design.n,
                      "m": design.m, "p_linear": design.p_linear,
                      "p_smooth": design.p_smooth},
           "aggregate": report.to_dict(),
           "records": report.records}
    _json_dump(doc, out / "records.json")

    grid = aise_grid()
    truth = {"version": f"pgamm {__version__}",
             "beta": design.true_beta.tolist(),
             "beta_support": [bool(b) for b in design.beta_support],
             "g_support": [bool(b) for b in design.g_support],
             "x_grid": grid.tolist(),
             "g_centered": centered_true_components(design, grid).tolist()}
    _json_dump(truth, out / "truth.json")

    with open(out / "aggregate.csv", "w", newline="", encoding="utf-8") as fh:
        wr = _csv.writer(fh)
        cols = ["method", "structure", "degree", "mse", "taise", "fzs",
                "fns", "fzf", "fnf", "u_fit", "c_fit", "o_fit", "n_reps",
                "n_failed"]
        wr.writerow(cols)
        agg = report.to_dict()
        wr.writerow([eff["method"], _CORR_NAMES[eff["corr"]], eff["degree"]]
                    + [repr(agg[c]) for c in cols[3:]])
    return 0


def cmd_evaluate(args) -> int:
    eff = _merge_config(args, {"fit": None, "truth": None, "out": ".",
                               "config": None})
    if not eff["fit"] or not eff["truth"]:
        raise PgammError("evaluate needs --fit and --truth")
    with open(eff["fit"], encoding="utf-8") as fh:
        fdoc = json.load(fh)
    with open(eff["truth"], encoding="utf-8") as fh:
        tdoc = json.load(fh)
    beta_hat = np.asarray(fdoc["linear"]["estimate_original"], dtype=float)
    beta_true = np.asarray(tdoc["beta"], dtype=float)
    if beta_hat.shape != beta_true.shape:
        raise PgammError(
            f"dimension mismatch: fit has {beta_hat.shape[0]} linear "
            f"coefficients, truth has {beta_true.shape[0]}")
    active = np.asarray(fdoc["linear"]["active"], dtype=bool)
    bsup = np.asarray(tdoc["beta_support"], dtype=bool)
    sel = active & (beta_hat != 0.0)
    out_doc = {
        "version": f"pgamm {__version__}",
        "mse": float(np.sum((beta_hat - beta_true) ** 2)),
        "fzs": int(np.sum(bsup & ~sel)),
        "fns": int(np.sum(~bsup & sel)),
    }
    g_active = np.asarray([s["active"] for s in fdoc["smooth"]], dtype=bool)
    gsup = np.asarray(tdoc.get("g_support", []), dtype=bool)
    if gsup.size:
        if gsup.size != g_active.size:
            raise PgammError(
                f"dimension mismatch: fit has {g_active.size} smooth "
                f"components, truth has {gsup.size}")
        out_doc["fzf"] = int(np.sum(gsup & ~g_active))
        out_doc["fnf"] = int(np.sum(~gsup & g_active))
    if "x_grid" in tdoc and "g_centered" in tdoc and fdoc["smooth"]:
        xg = np.asarray(tdoc["x_grid"], dtype=float)
        rec = fdoc["standardization"]
        mins = np.asarray(rec["smooth_mins"], dtype=float)
        ranges = np.asarray(rec["smooth_ranges"], dtype=float)
        taise = 0.0
        for k, sm in enumerate(fdoc["smooth"]):
            xs = np.clip((xg - mins[k]) / ranges[k], 0.0, 1.0)
            spec_k = SplineBasisSpec(degree=int(sm["degree"]),
                                     interior_knots=len(sm["knots"]),
                                     knot_positions=tuple(sm["knots"]) or None)
            vals = evaluate_g_hat(np.asarray(sm["alpha"], dtype=float), spec_k,
                                  np.asarray(sm["centering_means"], dtype=float),
                                  xs, knots=np.asarray(sm["knots"], dtype=float))
            gt = np.asarray(tdoc["g_centered"][k], dtype=float)
            taise += float(np.mean((vals - gt) ** 2))
        out_doc["taise"] = taise
    out = Path(eff["out"])
    out.mkdir(parents=True, exist_ok=True)
    _json_dump(out_doc, out / "eval.json")
    return 0


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pgamm", description=__doc__)
    ap.add_argument("--version", action="version",
                    version=f"pgamm {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit at a fixed (or tuned) lambda")
    _shared_flags(p_fit)
    p_fit.add_argument("--n-grid", dest="n_grid", type=int)
    p_fit.set_defaults(func=cmd_fit)

    p_tune = sub.add_parser("tune", help="GCV selection over a lambda grid")
    _shared_flags(p_tune)
    p_tune.add_argument("--n-grid", dest="n_grid", type=int)
    p_tune.set_defaults(func=cmd_tune)

    p_sim = sub.add_parser("simulate", help="replicated simulation study")
    p_sim.add_argument("--example", type=int, choices=[1, 2, 3])
    p_sim.add_argument("--n", type=int)
    p_sim.add_argument("--m", type=int)
    p_sim.add_argument("--reps", type=int)
    p_sim.add_argument("--corr", choices=["ind", "ex", "ar1"])
    p_sim.add_argument("--degree", type=int, choices=[1, 2, 3])
    p_sim.add_argument("--lambda", dest="lam")
    p_sim.add_argument("--method", choices=["scad", "full", "oracle",
                                            "cheat_truth", "cheat_zero"])
    p_sim.add_argument("--seed", type=int)
    p_sim.add_argument("--jobs", type=int)
    p_sim.add_argument("--out")
    p_sim.add_argument("--config")
    p_sim.add_argument("--mc-draws", dest="mc_draws", type=int)
    p_sim.add_argument("--burnin", type=int)
    p_sim.add_argument("--thin", type=int)
    p_sim.add_argument("--max-iter", dest="max_iter", type=int)
    p_sim.add_argument("--tol", type=float)
    p_sim.add_argument("--n-grid", dest="n_grid", type=int)
    p_sim.set_defaults(func=cmd_simulate)

    p_eval = sub.add_parser("evaluate", help="score a fit against a truth file")
    p_eval.add_argument("--fit")
    p_eval.add_argument("--truth")
    p_eval.add_argument("--out")
    p_eval.add_argument("--config")
    p_eval.set_defaults(func=cmd_evaluate)
    return ap


def main(argv=None) -> int:
    ap = make_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except (PgammError, OSError, ValueError, KeyError) as exc:
        print(f"pgamm: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
