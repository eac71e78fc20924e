"""Machine-readable invariant suite used by the validate subcommand."""

from __future__ import annotations

import numpy as np

from .grid_ops import adjoint, apply, grid_inner, resolvent, star_product, symmetrized_form
from .nplayer import GameSpec, build_operators, foc_residual, solve_nash
from .signals import compile_signal, draw_noise


def _check(name, value, tolerance, larger_ok=False):
    passed = value >= -tolerance if larger_ok else value <= tolerance
    return {"name": name, "value": float(value), "tolerance": float(tolerance),
            "passed": bool(passed)}


def validation_report(spec: GameSpec, paths: int = 8, seed: int = 0,
                      tolerances: dict | None = None) -> dict:
    tol = {"fredholm_residual": 1e-9, "mean_consistency": 1e-6,
           "foc_residual": 1e-8, "admissibility": 1e-8}
    tol.update(tolerances or {})
    grid = spec.grid
    checks = []

    checks.append(_check("grid_weight_consistency",
                         abs(grid.dt * grid.n - grid.horizon), 1e-12))

    for name, K in (("a1", spec.a1), ("a2hat", spec.a2hat), ("a3", spec.a3)):
        low = float(np.linalg.eigvalsh(symmetrized_form(K))[0])
        if spec.kernel_check == "strict":
            checks.append(_check(f"nonneg_definite_{name}", low,
                                 tol["admissibility"], larger_ok=True))
        else:
            checks.append({"name": f"min_eig_{name}", "value": low,
                           "tolerance": float("nan"), "passed": True})
    if spec.kernel_check == "concave":
        ops = build_operators(spec)
        low = float(np.linalg.eigvalsh(symmetrized_form(ops.G))[0])
        checks.append(_check("player_concavity_form", low,
                             spec.lam + tol["admissibility"], larger_ok=True))

    rng = np.random.default_rng(seed)
    pair_gap = 0.0
    for K in (spec.a1, spec.a2hat, spec.a3):
        for _ in range(25):
            f = rng.standard_normal(grid.n)
            g = rng.standard_normal(grid.n)
            lhs = grid_inner(grid, f, apply(K, g))
            rhs = grid_inner(grid, apply(adjoint(K), f), g)
            scale = max(1.0, float(np.linalg.norm(f) * np.linalg.norm(g)))
            pair_gap = max(pair_gap, abs(lhs - rhs) / scale)
    checks.append(_check("adjoint_pairing", pair_gap, 1e-12))

    R = resolvent(spec.a2hat)
    res_identity = float(np.max(np.abs(
        R.values - spec.a2hat.values - star_product(spec.a2hat, R).values)))
    checks.append(_check("resolvent_identity", res_identity, 1e-10))
    commute = float(np.max(np.abs(star_product(spec.a2hat, R).values
                                  - star_product(R, spec.a2hat).values)))
    checks.append(_check("resolvent_commutes", commute, 1e-10))

    closure = star_product(spec.a3, spec.a2hat)
    checks.append(_check("volterra_closure",
                         float(np.max(np.abs(np.triu(closure.values)))), 0.0))

    tags = set()
    for fam in list(spec.b_signals) + [spec.b0_signal]:
        tags |= compile_signal(fam, grid).noise_tags()
    bundle = draw_noise(grid, tags or {"common"}, paths, seed)

    adapt = 0.0
    for fam in list(spec.b_signals) + [spec.b0_signal]:
        cs = compile_signal(fam, grid)
        for p in range(min(paths, 4)):
            vals, surf = cs.values_and_surface(bundle.path(p))
            ii, jj = np.tril_indices(grid.n)
            adapt = max(adapt, float(np.max(np.abs(surf[ii, jj] - vals[jj]))))
    checks.append(_check("signal_adaptedness", adapt, 1e-12))

    sol = solve_nash(spec, bundle, mean_gap_tol=np.inf)
    checks.append(_check("fredholm_residual",
                         sol.diagnostics["fredholm_residual_max"], tol["fredholm_residual"]))
    checks.append(_check("mean_consistency",
                         sol.diagnostics["mean_gap"], tol["mean_consistency"]))
    checks.append(_check("foc_residual",
                         sol.diagnostics["foc_residual_max"], tol["foc_residual"]))
    return {"checks": checks,
            "passed": all(c["passed"] for c in checks),
            "paths": paths, "seed": seed}
