"""Config-driven command line: solve / converge / eps-nash / validate / oracle-check.

Exit codes: 0 success, 1 invariant or oracle-tolerance failure, 2 config
error, 3 numerical error.  Every run writes a manifest with the config echo,
package version, seed, and the tolerance table actually used.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, VolterraGamesError
from .grid_ops import (
    ConstantLower,
    DelayIndicator,
    ExponentialDecay,
    PowerLaw,
    Tabulated,
    TimeGrid,
    ZeroK,
    build_grid,
    discretize_kernel,
)
from .meanfield import (
    BalancedDeterministicFamily,
    IIDBrownianFamily,
    MFGSpec,
    best_response_gap,
    convergence_study,
    draw_crossed_noise,
    fit_loglog_slope,
)
from .model_builders import (
    DelayMeasure,
    build_advertising_game,
    build_liquidation_game,
    build_systemic_game,
)
from .nplayer import GameSpec, solve_nash
from .signals import (
    GENERATOR_NAME,
    Deterministic,
    LinearCombination,
    Martingale,
    OU,
    compile_signal,
    draw_noise,
)

DEFAULT_TOLERANCES = {
    "fredholm_residual": 1e-9,
    "mean_consistency": 1e-6,
    "foc_residual": 1e-8,
    "admissibility": 1e-8,
    "oracle": 1e-8,
}


def _require_keys(obj: dict, allowed: set, context: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)} in {context}")


def parse_kernel(obj, grid: TimeGrid, context: str = "kernel"):
    if not isinstance(obj, dict) or "family" not in obj:
        raise ConfigError(f"{context} must be an object with a 'family' key")
    fam = obj["family"]
    scale = float(obj.get("scale", 1.0))
    common = {"family", "scale"}
    if fam in ("zero",):
        _require_keys(obj, common, context)
        return ZeroK(scale=scale)
    if fam in ("constant", "constant_lower"):
        _require_keys(obj, common | {"c"}, context)
        return ConstantLower(scale=scale, c=float(obj.get("c", 1.0)))
    if fam in ("exp", "exponential", "exponential_decay"):
        _require_keys(obj, common | {"c", "rho"}, context)
        return ExponentialDecay(scale=scale, c=float(obj.get("c", 1.0)),
                                rho=float(obj.get("rho", 1.0)))
    if fam == "power_law":
        _require_keys(obj, common | {"c", "alpha"}, context)
        return PowerLaw(scale=scale, c=float(obj.get("c", 1.0)),
                        alpha=float(obj.get("alpha", 0.3)))
    if fam == "delay_indicator":
        _require_keys(obj, common | {"tau"}, context)
        return DelayIndicator(scale=scale, tau=float(obj.get("tau", 0.5)))
    if fam == "tabulated":
        _require_keys(obj, common | {"path"}, context)
        rows = []
        with open(obj["path"]) as fh:
            for line in fh:
                if line.strip():
                    rows.append([float(x) for x in line.replace(",", " ").split()])
        return Tabulated(scale=scale, table=tuple(map(tuple, rows)))
    raise ConfigError(f"unknown kernel family {fam!r} in {context}")


def parse_signal(obj, grid: TimeGrid, idio_tag: str, context: str = "signal"):
    if not isinstance(obj, dict) or "family" not in obj:
        raise ConfigError(f"{context} must be an object with a 'family' key")
    fam = obj["family"]
    if fam == "deterministic":
        _require_keys(obj, {"family", "values", "kind", "a", "b", "terminal"}, context)
        if obj.get("kind") == "affine":
            a, b = float(obj.get("a", 0.0)), float(obj.get("b", 0.0))
            vals = a + b * grid.times
            term = a + b * grid.horizon
            return Deterministic(values=tuple(vals), terminal=term)
        vals = obj.get("values")
        if vals is None:
            raise ConfigError(f"{context}: deterministic signal needs 'values' or affine kind")
        term = obj.get("terminal")
        return Deterministic(values=tuple(float(v) for v in np.atleast_1d(vals)),
                             terminal=None if term is None else float(term))
    noise = obj.get("noise", "idiosyncratic")
    tag = "common" if noise == "common" else idio_tag
    if fam == "martingale":
        _require_keys(obj, {"family", "sigma", "noise"}, context)
        return Martingale(sigma=float(obj.get("sigma", 1.0)), noise=tag)
    if fam == "ou":
        _require_keys(obj, {"family", "kappa", "sigma", "x0", "noise"}, context)
        return OU(kappa=float(obj.get("kappa", 1.0)), sigma=float(obj.get("sigma", 1.0)),
                  x0=float(obj.get("x0", 0.0)), noise=tag)
    if fam == "combination":
        _require_keys(obj, {"family", "terms"}, context)
        terms = tuple((float(c), parse_signal(s, grid, idio_tag, context))
                      for c, s in obj["terms"])
        return LinearCombination(terms=terms)
    raise ConfigError(f"unknown signal family {fam!r} in {context}")


def parse_measure(obj, context: str = "measure") -> DelayMeasure:
    if not isinstance(obj, dict):
        raise ConfigError(f"{context} must be an object")
    _require_keys(obj, {"atoms", "density"}, context)
    atoms = tuple((float(t), float(m)) for t, m in obj.get("atoms", ()))
    dens = obj.get("density")
    return DelayMeasure(atoms=atoms, density=None if dens is None else tuple(map(float, dens)))


def build_game_from_config(cfg: dict, grid: TimeGrid):
    # model-parameter violations (inadmissible kernels, convexity, shapes)
    # are configuration errors, not numerical failures
    try:
        return _build_game(cfg, grid)
    except ConfigError:
        raise
    except VolterraGamesError as exc:
        raise ConfigError(f"invalid model: {type(exc).__name__}: {exc}")


def _build_game(cfg: dict, grid: TimeGrid):
    model = cfg["model"]
    kind = model.get("kind")
    if kind == "raw":
        _require_keys(model, {"kind", "N", "lam", "a1", "a2hat", "a3", "b", "b0"}, "model")
        N = int(model["N"])
        b_list = model["b"]
        if len(b_list) != N:
            raise ConfigError("model.b must list one signal per player")
        return GameSpec(
            n_players=N,
            lam=float(model["lam"]),
            a1=discretize_kernel(parse_kernel(model["a1"], grid, "a1"), grid),
            a2hat=discretize_kernel(parse_kernel(model["a2hat"], grid, "a2hat"), grid),
            a3=discretize_kernel(parse_kernel(model["a3"], grid, "a3"), grid),
            b_signals=tuple(parse_signal(s, grid, f"idio{i}", f"b[{i}]")
                            for i, s in enumerate(b_list)),
            b0_signal=parse_signal(model["b0"], grid, "common", "b0"),
            grid=grid,
        )
    if kind == "liquidation":
        _require_keys(model, {"kind", "N", "lam", "phi", "rho_term", "propagator",
                              "x0", "signal_sigma", "common_signal_sigma"}, "model")
        params = dict(model)
        params.pop("kind")
        params["propagator"] = parse_kernel(model["propagator"], grid, "propagator")
        return build_liquidation_game(params, grid)[0]
    if kind == "systemic":
        _require_keys(model, {"kind", "N", "beta", "eps", "cost_c", "sigma",
                              "x0", "delay", "h"}, "model")
        params = dict(model)
        params.pop("kind")
        params["delay"] = parse_measure(model["delay"], "delay")
        return build_systemic_game(params, grid)[0]
    if kind == "advertising":
        _require_keys(model, {"kind", "N", "lam", "beta", "forgetting",
                              "competition", "sigma"}, "model")
        params = dict(model)
        params.pop("kind")
        params["forgetting"] = parse_measure(model.get("forgetting", {}), "forgetting")
        params["competition"] = parse_measure(model.get("competition", {}), "competition")
        return build_advertising_game(params, grid)[0]
    raise ConfigError(f"unknown model kind {kind!r}")


def build_mfg_from_config(cfg: dict, grid: TimeGrid) -> MFGSpec:
    model = cfg["model"]
    _require_keys(model, {"kind", "lam", "a1", "a2hat", "a3", "b0", "player_base",
                          "player_kind", "amplitude", "shape", "sigma"}, "model")
    base = parse_signal(model["player_base"], grid, "idio_base", "player_base")
    pk = model.get("player_kind", "balanced")
    if pk == "balanced":
        shape = model.get("shape")
        shape = tuple(np.sin(np.pi * grid.times / grid.horizon)) if shape is None \
            else tuple(map(float, shape))
        family = BalancedDeterministicFamily(base=base,
                                             amplitude=float(model.get("amplitude", 0.5)),
                                             shape=shape)
        beta = base
        h_model = "zero"
    elif pk == "iid":
        sig = float(model.get("sigma", 0.5))
        family = IIDBrownianFamily(base=base, sigma=sig)
        beta = LinearCombination(terms=((1.0, base), (1.0, Martingale(sigma=sig, noise="idio0"))))
        h_model = "iid"
    else:
        raise ConfigError(f"unknown player_kind {pk!r}")
    return MFGSpec(
        lam=float(model["lam"]),
        a1=discretize_kernel(parse_kernel(model["a1"], grid, "a1"), grid),
        a2hat=discretize_kernel(parse_kernel(model["a2hat"], grid, "a2hat"), grid),
        a3=discretize_kernel(parse_kernel(model["a3"], grid, "a3"), grid),
        beta=beta,
        beta0=Deterministic(values=(0.0,)),
        b0_signal=parse_signal(model["b0"], grid, "common", "b0"),
        grid=grid,
        b_infty=base,
        player_family=family,
        h_model=h_model,
    )


def load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}")
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be an object")
    _require_keys(cfg, {"grid", "noise", "model", "run"}, "config")
    for key in ("grid", "model"):
        if key not in cfg:
            raise ConfigError(f"config needs a '{key}' block")
    _require_keys(cfg["grid"], {"T", "n"}, "grid")
    _require_keys(cfg.get("noise", {}), {"paths", "seed", "common_paths"}, "noise")
    _require_keys(cfg.get("run", {}), {"out", "Ns", "tolerances", "deviation_scale"}, "run")
    return cfg


def _grid_from(cfg: dict, override_n=None) -> TimeGrid:
    g = cfg["grid"]
    n = int(override_n) if override_n else int(g["n"])
    return build_grid(float(g["T"]), n)


def _tolerances(cfg: dict) -> dict:
    tol = dict(DEFAULT_TOLERANCES)
    tol.update(cfg.get("run", {}).get("tolerances", {}))
    return tol


def write_manifest(out: Path, cfg: dict, seed: int, tolerances: dict, extra=None) -> None:
    manifest = {
        "tool": "volterra-games",
        "version": __version__,
        "generator": GENERATOR_NAME,
        "seed": seed,
        "tolerances": tolerances,
        "config": cfg,
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def run_solve(cfg: dict, out: Path, paths: int, seed: int, grid_n=None) -> int:
    grid = _grid_from(cfg, grid_n)
    tol = _tolerances(cfg)
    spec = build_game_from_config(cfg, grid)
    tags = set()
    for fam in list(spec.b_signals) + [spec.b0_signal]:
        tags |= compile_signal(fam, grid).noise_tags()
    bundle = draw_noise(grid, tags or {"common"}, paths, seed)
    sol = solve_nash(spec, bundle, mean_gap_tol=tol["mean_consistency"])

    out.mkdir(parents=True, exist_ok=True)
    with open(out / "strategies.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "player", "mean", "std"])
        for k, t in enumerate(grid.times):
            w.writerow([f"{t:.12g}", "mean", f"{sol.ubar[:, k].mean():.12g}",
                        f"{sol.ubar[:, k].std():.12g}"])
            for i in range(spec.n_players):
                w.writerow([f"{t:.12g}", i + 1, f"{sol.u[i, :, k].mean():.12g}",
                            f"{sol.u[i, :, k].std():.12g}"])
    diagnostics = dict(sol.diagnostics)
    diagnostics.update({"paths": paths, "seed": seed, "players": spec.n_players})
    (out / "diagnostics.json").write_text(json.dumps(diagnostics, indent=2, sort_keys=True))
    write_manifest(out, cfg, seed, tol)
    if diagnostics["fredholm_residual_max"] > tol["fredholm_residual"]:
        return 3
    return 0


def run_converge(cfg: dict, out: Path, paths: int, seed: int, grid_n=None) -> int:
    grid = _grid_from(cfg, grid_n)
    tol = _tolerances(cfg)
    spec = build_mfg_from_config(cfg, grid)
    ns = cfg.get("run", {}).get("Ns", [4, 8, 16, 32, 64])
    idio = set()
    if isinstance(spec.player_family, IIDBrownianFamily):
        idio = spec.player_family.idio_tags(max(ns))
    if not idio and not spec.common_tags():
        paths = 1          # fully deterministic limit: one path is exact
    noise = draw_crossed_noise(grid, spec.common_tags(), idio, 1, paths, seed)
    study = convergence_study(spec, ns, noise, player_paths=min(paths, 200))

    out.mkdir(parents=True, exist_ok=True)
    rows = study["rows"]
    with open(out / "convergence.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["N", "mse_mean", "mse_player", "slope_running"])
        for j, r in enumerate(rows):
            slope = ""
            if j >= 1:
                slope = f"{fit_loglog_slope([x['N'] for x in rows[:j + 1]], [x['mse_mean'] for x in rows[:j + 1]]):.6g}"
            w.writerow([r["N"], f"{r['mse_mean']:.12g}", f"{r['mse_player']:.12g}", slope])
    bracket = (-2.5, -1.5) if spec.h_model == "zero" else (-1.4, -0.6)
    slope = study.get("slope_mean", float("nan"))
    ok = bracket[0] <= slope <= bracket[1]
    write_manifest(out, cfg, seed, tol,
                   extra={"slope_mean": slope, "bracket": bracket, "slope_ok": ok})
    return 0 if ok else 1


def run_eps_nash(cfg: dict, out: Path, paths: int, seed: int, grid_n=None) -> int:
    grid = _grid_from(cfg, grid_n)
    tol = _tolerances(cfg)
    spec = build_mfg_from_config(cfg, grid)
    ns = cfg.get("run", {}).get("Ns", [4, 8, 16, 32, 64])
    rows = []
    for N in ns:
        idio = set()
        if isinstance(spec.player_family, IIDBrownianFamily):
            idio = spec.player_family.idio_tags(N)
        noise = draw_crossed_noise(grid, spec.common_tags(), idio, 1, paths, seed)
        res = best_response_gap(spec, N, noise)
        rows.append({"N": N, "gap": res["gap"], "mc_stderr": res["stderr"]})
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "epsnash.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["N", "gap", "mc_stderr"])
        for r in rows:
            w.writerow([r["N"], f"{r['gap']:.12g}", f"{r['mc_stderr']:.12g}"])
    gaps = [max(r["gap"], 0.0) for r in rows]
    slope = fit_loglog_slope([r["N"] for r in rows], np.maximum(gaps, 1e-300)) \
        if len(rows) > 1 else float("nan")
    ok = (not np.isfinite(slope)) or slope <= -0.4
    write_manifest(out, cfg, seed, tol, extra={"gap_slope": slope, "slope_ok": bool(ok)})
    return 0 if ok else 1


def run_validate(cfg: dict, out: Path, paths: int, seed: int, grid_n=None) -> int:
    from .validation import validation_report

    grid = _grid_from(cfg, grid_n)
    tol = _tolerances(cfg)
    spec = build_game_from_config(cfg, grid)
    report = validation_report(spec, paths=max(4, min(paths, 16)), seed=seed, tolerances=tol)
    out.mkdir(parents=True, exist_ok=True)
    (out / "validate.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    write_manifest(out, cfg, seed, tol)
    return 0 if all(item["passed"] for item in report["checks"]) else 1


def run_oracle_check(cfg: dict, out: Path, paths: int, seed: int, grid_n=None) -> int:
    from .oracle import build_tree, compare, discrete_nash_kkt, solve_game_on_tree

    grid = _grid_from(cfg, grid_n)
    if grid.n > 8:
        grid = build_grid(grid.horizon, 8)
    tol = _tolerances(cfg)
    spec = build_game_from_config(cfg, grid)
    tree = build_tree(spec, branching=2, depth=min(5, grid.n - 1))
    diff = compare(discrete_nash_kkt(spec, tree), solve_game_on_tree(spec, tree), tree)
    out.mkdir(parents=True, exist_ok=True)
    (out / "oracle.json").write_text(json.dumps(
        {"max_abs_diff": diff, "tolerance": tol["oracle"],
         "leaves": tree.n_leaves, "nodes": tree.total_nodes}, indent=2))
    write_manifest(out, cfg, seed, tol, extra={"oracle_diff": diff})
    return 0 if diff <= tol["oracle"] else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="volgames",
        description="Nash equilibria of LQ stochastic games with Volterra-operator costs")
    parser.add_argument("command",
                        choices=["solve", "converge", "eps-nash", "validate", "oracle-check"])
    parser.add_argument("--config", required=True, help="path to the JSON run configuration")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--paths", type=int, default=None, help="Monte Carlo paths")
    parser.add_argument("--seed", type=int, default=None, help="noise seed")
    parser.add_argument("--grid-n", type=int, default=None, help="override grid point count")
    parser.add_argument("--oracle", action="store_true",
                        help="also run the oracle comparison after the command")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config)
        noise_cfg = cfg.get("noise", {})
        paths = args.paths if args.paths is not None else int(noise_cfg.get("paths", 64))
        seed = args.seed if args.seed is not None else int(noise_cfg.get("seed", 0))
        out = Path(cfg.get("run", {}).get("out", args.out)) if args.out == "out" \
            else Path(args.out)
        runner = {
            "solve": run_solve,
            "converge": run_converge,
            "eps-nash": run_eps_nash,
            "validate": run_validate,
            "oracle-check": run_oracle_check,
        }[args.command]
        code = runner(cfg, out, paths, seed, args.grid_n)
        if code == 0 and args.oracle and args.command != "oracle-check":
            code = run_oracle_check(cfg, out, paths, seed, args.grid_n)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except VolterraGamesError as exc:
        print(f"numerical error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    return code


if __name__ == "__main__":
    sys.exit(main())
