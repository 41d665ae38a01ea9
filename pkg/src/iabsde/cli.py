"""Command line: ``iabsde [--seed N] run CONFIG`` and ``iabsde list-instances``.

Exit codes: 0 when the experiment's checks pass, 2 when a check fails, 1 on
any error (bad config, contract violation, numerical failure).
"""
from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from .analysis import apriori_diagnostic, check_comparison, convergence_report
from .config import ExperimentConfig, load_config
from .control import (
    ControlPaths,
    consistency_budget,
    extract_control,
    forward_cost,
    random_adapted_control,
    solve_fixed_control,
    solve_value_function,
)
from .core import make_grid
from .duality import LinearInstance, duality_gap, refinement_budget
from .errors import BundleMismatch, IABSDEError, MaxIterExceeded, ValidationError
from .generators import LinearModel, named_kernel
from .instances import REGISTRY, list_instances
from .reports import versions, write_csv, write_manifest
from .solver import CondExpConfig, PicardConfig, picard_solve
from .stochastic import BrownianBundle, eval_kernel


def _picard(cfg: ExperimentConfig) -> PicardConfig:
    s = cfg.section("solver")
    return PicardConfig(float(s["tol_y"]), float(s["tol_z"]), int(s["max_iter"]), s["freeze_mode"], float(s["beta"]))


def _condexp(cfg: ExperimentConfig, stochastic: bool) -> CondExpConfig:
    r = cfg.section("regression")
    mode = r["mode"] or ("polynomial_regression" if stochastic else "deterministic_passthrough")
    return CondExpConfig(mode, int(r["basis_degree"]))


def _const(c):
    return lambda t: np.full(np.shape(t), float(c))


def _linear(cfg: ExperimentConfig) -> LinearInstance:
    if cfg.instance == "inline":
        s = cfg.section("inline")

        def kern(spec):
            params = {k: v for k, v in spec.items() if k != "kind"}
            return named_kernel(spec["kind"], **params)

        model = LinearModel(kern(s["mu"]), kern(s["nu"]), s["C_mu"], s["C_nu"])
        return LinearInstance(model, _const(s["Q"]), _const(s["P"]), _const(s["l"]) if s["l"] else None,
                              name="inline")
    info = REGISTRY[cfg.instance]
    if info.kind != "linear":
        raise ValidationError(f"experiment '{cfg.experiment}' needs a linear instance, got {cfg.instance} ({info.kind})")
    return info.build()


def _is_stochastic(inst: LinearInstance, grid) -> bool:
    nu = eval_kernel(inst.model.nu_kernel, grid.interior_times, (inst.m,))
    return bool(np.any(nu[:-1] != 0))


def _history_rows(sol):
    return [(it, y, z) for it, y, z in sol.residual_history]


def _solution_rows(sol):
    t = sol.grid.times
    Y = sol.Y.values.mean(axis=0)
    Z = sol.Z.values.mean(axis=0)
    return [(t[k], *Y[k], *Z[k]) for k in range(len(t))]


def _solution_header(sol):
    d, dz = sol.y.dim, sol.z.dim
    return ["time"] + [f"Y_mean_{i}" for i in range(d)] + [f"Z_mean_{i}" for i in range(dz)]


def exp_solve(cfg, grid, out):
    ce_sto = False
    if cfg.instance != "inline" and REGISTRY[cfg.instance].kind == "control":
        problem = REGISTRY[cfg.instance].build()
        bundle = None
        try:
            sol = solve_value_function(problem, grid, bundle, _picard(cfg), _condexp(cfg, False))
        except MaxIterExceeded as exc:
            sol = exc.solution
    else:
        inst = _linear(cfg)
        ce_sto = _is_stochastic(inst, grid)
        bundle = BrownianBundle(grid, cfg.n_paths, inst.m, cfg.seed) if ce_sto else None
        n_paths = cfg.n_paths if ce_sto else 1
        try:
            sol = picard_solve(inst.generator(grid), inst.terminal(grid, n_paths), grid, bundle,
                               _picard(cfg), _condexp(cfg, ce_sto))
        except MaxIterExceeded as exc:
            sol = exc.solution
    files = [write_csv(out / "iterations.csv", ("iteration", "y_residual", "z_residual"), _history_rows(sol)),
             write_csv(out / "solution.csv", _solution_header(sol), _solution_rows(sol))]
    extra = {"y0": sol.y0, "y0_stderr": sol.y0_stderr, "iterations": sol.iterations,
             "iteration_wall_time_ms": sol.timings_ms, "notes": sol.notes}
    return sol.converged, files, extra


def exp_duality(cfg, grid, out):
    inst = _linear(cfg)
    sto = _is_stochastic(inst, grid)
    bundle = BrownianBundle(grid, cfg.n_paths, inst.m, cfg.seed) if sto else None
    d = cfg.section("duality")
    budget = d["budget"]
    refine = d["refine"] if d["refine"] is not None else sto
    if budget is None and refine:
        budget = refinement_budget(inst, grid, _picard(cfg))
    rep = duality_gap(inst, grid, bundle, _condexp(cfg, sto), _picard(cfg), budget=budget, rel_tol=d["rel_tol"])
    files = [write_csv(out / "gap.csv", rep.CSV_COLUMNS, [rep.row()])]
    extra = {"picard_stderr": rep.picard_stderr, "closed_stderr": rep.closed_stderr,
             "threshold": rep.threshold, "tail_mass": rep.tail_mass}
    return rep.verdict == "pass", files, extra


def exp_compare(cfg, grid, out):
    pair = cfg.section("pair")
    s1, s2 = int(pair.get("seed_1", cfg.seed)), int(pair.get("seed_2", cfg.seed))
    if s1 != s2:
        raise BundleMismatch(f"compare needs common random numbers; pair seeds differ ({s1} != {s2})")
    if cfg.instance != "D2":
        raise ValidationError(f"compare runs on the ordered pair D2, got {cfg.instance}")
    a, b = REGISTRY["D2"].build()
    sols = [picard_solve(i.generator(grid), i.terminal(grid), grid, None, _picard(cfg)) for i in (a, b)]
    tol = cfg.section("compare")["tol"] or 0.0
    rep = check_comparison(sols[0], sols[1], tol)
    files = [write_csv(out / "comparison.csv", rep.CSV_COLUMNS, [rep.row()])]
    return rep.verdict == "pass", files, {"y0": [s.y0 for s in sols]}


def exp_control(cfg, grid, out):
    info = REGISTRY.get(cfg.instance)
    if info is None or info.kind != "control":
        raise ValidationError(f"control experiment needs a control instance, got {cfg.instance}")
    problem = info.build()
    c = cfg.section("control")
    pc = _picard(cfg)
    value = solve_value_function(problem, grid, None, pc)
    bundle = BrownianBundle(grid, cfg.n_paths, problem.m, cfg.seed)
    rows, all_ok = [], True
    budgets = []
    tol_solver = float(np.sqrt(pc.tol_y))

    def judge(desc, y0u, se_b, u, budget):
        nonlocal all_ok
        J, se_f = forward_cost(problem, u, grid, bundle)
        gap = y0u - J
        limit = 3.0 * float(np.hypot(se_b, se_f)) + budget
        ok = abs(gap) <= limit and y0u <= value.y0 + 3.0 * se_b + budget + tol_solver
        all_ok &= ok
        rows.append((problem.name, desc, y0u, J, gap, "pass" if ok else "fail"))

    for u in problem.U_grid:
        b = consistency_budget(problem, u, grid, pc)
        budgets.append(b)
        judge(f"constant u={u:g}", solve_fixed_control(problem, u, grid, None, pc).y0, 0.0, u, b)
    ex = extract_control(problem, value, float(c["epsilon"]))
    b_star = consistency_budget(problem, ex.u, grid, pc)
    star = solve_fixed_control(problem, ex.u, grid, None, pc)
    judge("extracted u*", star.y0, 0.0, ex.u, b_star)
    n_rand = int(c["n_random"])
    if n_rand:
        rp = int(c["random_paths"] or min(cfg.n_paths, 20000))
        rb = BrownianBundle(grid, rp, problem.m, cfg.seed + 1)
        ce = CondExpConfig("polynomial_regression", int(cfg.section("regression")["basis_degree"]))
        for i in range(n_rand):
            u = random_adapted_control(problem, grid, rb, cfg.seed + 100 + i)
            sol = solve_fixed_control(problem, u, grid, rb, pc, ce)
            J, se_f = forward_cost(problem, u, grid, rb)
            limit = 3.0 * float(np.hypot(sol.y0_stderr, se_f)) + max(budgets)
            ok = abs(sol.y0 - J) <= limit and sol.y0 <= value.y0 + 3 * sol.y0_stderr + max(budgets) + tol_solver
            all_ok &= ok
            rows.append((problem.name, f"random adapted #{i}", sol.y0, J, sol.y0 - J, "pass" if ok else "fail"))
    files = [write_csv(out / "control.csv",
                       ("instance_id", "u_description", "Y0_backward", "J_forward", "gap", "verdict"), rows)]
    if c["export_paths"]:
        vals = ex.u.values
        header = ["time"] + [f"u_{p}" for p in range(vals.shape[0])]
        files.append(write_csv(out / "control_paths.csv", header,
                               [(grid.times[k], *vals[:, k]) for k in range(grid.n_nodes)]))
    extra = {"value_y0": value.y0, "rho": ex.rho, "eps_grid": ex.eps_grid, "epsilon": ex.epsilon,
             "selection_bound": ex.bound, "value_minus_extracted": value.y0 - star.y0, "notes": value.notes}
    return all_ok, files, extra


def exp_convergence(cfg, grid, out):
    inst = _linear(cfg)
    sto = _is_stochastic(inst, grid)
    bundle = BrownianBundle(grid, cfg.n_paths, inst.m, cfg.seed) if sto else None
    spec = inst.generator(grid)
    sol = picard_solve(spec, inst.terminal(grid, cfg.n_paths if sto else 1), grid, bundle,
                       _picard(cfg), _condexp(cfg, sto))
    rep = convergence_report(sol.residual_history, grid, spec.L,
                             int(cfg.section("convergence")["from_iteration"]))
    files = [write_csv(out / "convergence.csv", rep.CSV_COLUMNS, rep.rows())]
    extra = {"label": rep.label, "fitted_K": rep.fitted_K, "bound_K": rep.bound_K,
             "eventually_decreasing": rep.eventually_decreasing}
    return rep.eventually_decreasing and rep.factorial, files, extra


def exp_apriori(cfg, grid, out):
    inst = _linear(cfg)
    if _is_stochastic(inst, grid):
        raise ValidationError("apriori experiment runs on deterministic linear instances")
    lam = float(cfg.section("apriori")["scale"])
    rows, reps = [], {}
    for label, g, i in (("base", grid, inst), ("refined", grid.refined(2), inst), ("scaled", grid, inst.scaled(lam))):
        spec = i.generator(g)
        term = i.terminal(g)
        sol = picard_solve(spec, term, g, None, _picard(cfg))
        rep = apriori_diagnostic(sol, term, spec, g)
        reps[label] = rep
        rows.append((label, *rep.row()))
    homog = abs(reps["scaled"].lhs / reps["base"].lhs - lam * lam) <= 1e-9 * lam * lam
    stable = abs(reps["refined"].ratio / reps["base"].ratio - 1.0) <= 0.1
    files = [write_csv(out / "apriori.csv", ("label", "lhs", "rhs_xi", "rhs_eta", "rhs_driver", "ratio"), rows)]
    return homog and stable, files, {"homogeneous": homog, "stable": stable}


EXPERIMENTS = {"solve": exp_solve, "duality": exp_duality, "compare": exp_compare, "control": exp_control,
               "convergence": exp_convergence, "apriori": exp_apriori}


def run(config_path, seed_override=None) -> int:
    t0 = time.perf_counter()
    cfg = load_config(config_path, seed_override)
    g = cfg.grid
    grid = make_grid(g["T"], g["T_tail"], g["n_steps"], g["n_tail_steps"])
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    ok, files, extra = EXPERIMENTS[cfg.experiment](cfg, grid, out)
    verdict = "pass" if ok else "fail"
    write_manifest(out / "manifest.json", {
        "config": cfg.resolved(), "config_path": cfg.source, "seed": cfg.seed, "versions": versions(),
        "wall_time_s": time.perf_counter() - t0, "verdict": verdict,
        "outputs": sorted(p.name for p in files), "details": extra})
    print(f"{cfg.experiment} on {cfg.instance}: {verdict} ({', '.join(p.name for p in files)})")
    return 0 if ok else 2


def _limit_threads():
    n = os.environ.get("IABSDE_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(n))


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="iabsde", description="Anticipated BSDE experiments")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run the experiment described by a config file")
    p_run.add_argument("config")
    sub.add_parser("list-instances", help="list built-in instances")
    args = parser.parse_args(argv)
    if args.command == "list-instances":
        sys.stdout.write(list_instances())
        return 0
    try:
        _limit_threads()
        return run(args.config, args.seed)
    except IABSDEError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - the CLI must map every failure to exit 1
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
