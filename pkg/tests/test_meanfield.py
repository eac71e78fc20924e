import numpy as np
import pytest

from volterra_games.errors import ShapeError
from volterra_games.grid_ops import (
    ConstantLower,
    ExponentialDecay,
    build_grid,
    discretize_kernel,
    zero_kernel,
)
from volterra_games.meanfield import (
    BalancedDeterministicFamily,
    IIDBrownianFamily,
    MFGSpec,
    best_response_gap,
    build_mfg_operators,
    convergence_study,
    draw_crossed_noise,
    eps_nash_gap,
    fit_loglog_slope,
    induced_game,
    mfg_foc_residual,
    solve_generic,
    solve_infinite,
    solve_map_F,
    solve_map_G,
)
from volterra_games.nplayer import shifted_drive, solve_nash
from volterra_games.signals import (
    Deterministic,
    LinearCombination,
    Martingale,
    SignalPath,
    compile_signal,
    draw_noise,
    simulate,
)


def make_mfg(grid, zero=False, a3_zero=False, beta_sigma=0.8, common_sigma=0.4):
    Z = zero_kernel(grid)
    a1 = Z if zero else discretize_kernel(ConstantLower(c=0.2), grid)
    a2 = Z if zero else discretize_kernel(ExponentialDecay(c=0.6, rho=1.5), grid)
    a3 = Z if (zero or a3_zero) else discretize_kernel(ExponentialDecay(c=0.4, rho=1.0), grid)
    beta = Martingale(sigma=beta_sigma, noise="idio") if beta_sigma else \
        Deterministic(values=(0.0,))
    beta0_terms = [(1.0, Deterministic(values=(1.0,)))]
    if common_sigma:
        beta0_terms.append((1.0, Martingale(sigma=common_sigma, noise="common")))
    return MFGSpec(lam=1.0, a1=a1, a2hat=a2, a3=a3, beta=beta,
                   beta0=LinearCombination(terms=tuple(beta0_terms)),
                   b0_signal=Deterministic(values=(0.3,)), grid=grid)


class TestMaps:
    def test_zero_kernel_maps_divide(self, grid16):
        spec = make_mfg(grid16, zero=True)
        bundle = draw_noise(grid16, {"common"}, 1, 0)
        x = simulate(Martingale(sigma=1.0, noise="common"), grid16, bundle, 0)
        assert np.max(np.abs(solve_map_F(spec, x) - x.values / 2.0)) < 1e-14
        assert np.max(np.abs(solve_map_G(spec, x) - x.values / 2.0)) < 1e-14

    def test_a3_zero_collapses_G_to_F(self, grid16):
        spec = make_mfg(grid16, a3_zero=True)
        ops = build_mfg_operators(spec)
        bundle = draw_noise(grid16, {"common"}, 2, 1)
        for p in range(2):
            x = simulate(Martingale(sigma=1.0, noise="common"), grid16, bundle, p)
            assert np.max(np.abs(solve_map_F(spec, x, ops)
                                 - solve_map_G(spec, x, ops))) <= 1e-12

    def test_linearity(self, grid16):
        spec = make_mfg(grid16)
        ops = build_mfg_operators(spec)
        bundle = draw_noise(grid16, {"common"}, 1, 2)
        x = simulate(Martingale(sigma=1.0, noise="common"), grid16, bundle, 0)
        x2 = SignalPath(grid16, 3.0 * x.values, 3.0 * x.surface, x.noise_tags)
        assert np.max(np.abs(solve_map_F(spec, x2, ops)
                             - 3.0 * solve_map_F(spec, x, ops))) <= 1e-10

    def test_deterministic_matches_fredholm_constant_case(self):
        # A2hat = ConstantLower(c), x = 1: F solves the constant-kernel problem
        g = build_grid(1.0, 256)
        Z = zero_kernel(g)
        spec = MFGSpec(lam=0.5, a1=Z, a2hat=discretize_kernel(ConstantLower(c=1.0), g),
                       a3=Z, beta=Deterministic(values=(0.0,)),
                       beta0=Deterministic(values=(1.0,)),
                       b0_signal=Deterministic(values=(0.0,)), grid=g)
        x = SignalPath(g, np.ones(256), np.ones((256, 256)))
        v = solve_map_F(spec, x)
        assert np.max(np.abs(v - 1.0 / (1.0 + 1.0))) <= 5e-2


class TestGenericPlayer:
    def test_zero_kernels_closed_form(self, grid16):
        spec = MFGSpec(lam=1.0, a1=zero_kernel(grid16), a2hat=zero_kernel(grid16),
                       a3=zero_kernel(grid16),
                       beta=Martingale(sigma=0.8, noise="idio"),
                       beta0=Deterministic(values=(2.0,)),
                       b0_signal=Deterministic(values=(0.0,)), grid=grid16)
        noise = draw_crossed_noise(grid16, set(), {"idio"}, 1, 32, seed=2)
        sol = solve_generic(spec, noise)
        assert np.max(np.abs(sol.mu - 1.0)) < 1e-14      # (E beta + beta0)/(2 lam)
        cb = compile_signal(spec.b_family(), grid16)
        for e in range(4):
            vals, _ = cb.values_and_surface(noise.bundle.path(e))
            assert np.max(np.abs(sol.v[0, e] - vals / 2.0)) < 1e-14

    def test_consistency_condition_within_mc_error(self, grid16):
        spec = make_mfg(grid16)
        noise = draw_crossed_noise(grid16, {"common"}, {"idio"}, 3, 500, seed=11)
        sol = solve_generic(spec, noise)
        assert sol.diagnostics["gap_over_stderr_max"] <= 3.0

    def test_mu_is_common_measurable(self, grid16):
        spec = make_mfg(grid16)
        n1 = draw_crossed_noise(grid16, {"common"}, {"idio"}, 2, 3, seed=5)
        n2 = draw_crossed_noise(grid16, {"common"}, {"idio"}, 2, 7, seed=5)
        # same seed => same common draws even though idio counts differ
        assert np.array_equal(n1.bundle.increments["common"][0],
                              n2.bundle.increments["common"][0])
        s1, s2 = solve_generic(spec, n1), solve_generic(spec, n2)
        assert np.array_equal(s1.mu, s2.mu)

    def test_foc_residual_of_generic_solution(self, grid16):
        spec = make_mfg(grid16)
        noise = draw_crossed_noise(grid16, {"common"}, {"idio"}, 2, 4, seed=3)
        sol = solve_generic(spec, noise)
        ops = build_mfg_operators(spec)
        cb = compile_signal(spec.b_family(), grid16)
        for c in range(2):
            for e in range(2):
                p = c * 4 + e
                bv, bs = cb.values_and_surface(noise.bundle.path(p))
                bpath = SignalPath(grid16, bv, bs)
                drive = shifted_drive(bpath, spec.a3, sol.mu[c], sol.mu_surface[c])
                fs = ops.solver_F.solve_path(drive)
                assert np.max(np.abs(fs.v - sol.v[c, e])) <= 1e-12
                res = mfg_foc_residual(spec, bpath, fs.v, fs.surface,
                                       sol.mu[c], sol.mu_surface[c])
                assert res <= 1e-8

    def test_disjoint_noise_required(self, grid16):
        with pytest.raises(ShapeError):
            MFGSpec(lam=1.0, a1=zero_kernel(grid16), a2hat=zero_kernel(grid16),
                    a3=zero_kernel(grid16),
                    beta=Martingale(sigma=1.0, noise="common"),
                    beta0=Martingale(sigma=1.0, noise="common"),
                    b0_signal=Deterministic(values=(0.0,)), grid=grid16)


class TestInfinitePlayers:
    def make_spec(self, grid, sigma=0.5):
        base = Deterministic(values=(1.0,))
        fam = IIDBrownianFamily(base=base, sigma=sigma)
        return MFGSpec(lam=1.0, a1=discretize_kernel(ConstantLower(c=0.2), grid),
                       a2hat=discretize_kernel(ExponentialDecay(c=0.6, rho=1.5), grid),
                       a3=discretize_kernel(ExponentialDecay(c=0.4, rho=1.0), grid),
                       beta=Martingale(sigma=sigma, noise="idio0"),
                       beta0=Deterministic(values=(0.0,)),
                       b0_signal=Deterministic(values=(0.4,)), grid=grid,
                       b_infty=base, player_family=fam, h_model="iid")

    def test_zero_kernel_identities(self, grid16):
        base = Deterministic(values=(2.0,))
        Z = zero_kernel(grid16)
        spec = MFGSpec(lam=1.0, a1=Z, a2hat=Z, a3=Z, beta=base,
                       beta0=Deterministic(values=(0.0,)),
                       b0_signal=Deterministic(values=(0.0,)), grid=grid16,
                       b_infty=base,
                       player_family=BalancedDeterministicFamily(
                           base=base, amplitude=0.0, shape=(0.0,) * 16))
        noise = draw_crossed_noise(grid16, set(), set(), 1, 1, seed=0)
        sol = solve_infinite(spec, 4, noise)
        assert np.max(np.abs(sol.mu - 1.0)) < 1e-14
        assert np.max(np.abs(sol.v - 1.0)) < 1e-14

    def test_empirical_consistency_rate(self, grid16):
        # sup_t E[((1/N) sum v^i - nu)^2] decays like h(N) = sigma^2/N
        spec = self.make_spec(grid16, sigma=0.6)
        mses = []
        ns = [8, 16, 32, 64]
        for N in ns:
            fam = spec.player_family
            noise = draw_crossed_noise(grid16, set(), fam.idio_tags(N), 1, 300, seed=7)
            sol = solve_infinite(spec, N, noise)
            avg = sol.v.mean(axis=0)
            nu_full = np.repeat(sol.mu, noise.n_idio, axis=0)
            mses.append(float(np.max(np.mean((avg - nu_full) ** 2, axis=0))))
        slope = fit_loglog_slope(ns, mses)
        assert -1.4 <= slope <= -0.6


class TestConvergence:
    def base_spec(self, grid, kind):
        base = Deterministic(values=(1.0,))
        a1 = discretize_kernel(ConstantLower(c=0.2), grid)
        a2 = discretize_kernel(ExponentialDecay(c=0.6, rho=1.5), grid)
        a3 = discretize_kernel(ExponentialDecay(c=0.4, rho=1.0), grid)
        if kind == "balanced":
            fam = BalancedDeterministicFamily(
                base=base, amplitude=0.5, shape=tuple(np.sin(np.pi * grid.times)))
            beta, h_model = base, "zero"
        else:
            fam = IIDBrownianFamily(base=base, sigma=0.6)
            beta, h_model = Martingale(sigma=0.6, noise="idio0"), "iid"
        return MFGSpec(lam=1.0, a1=a1, a2hat=a2, a3=a3, beta=beta,
                       beta0=Deterministic(values=(0.0,)),
                       b0_signal=Deterministic(values=(0.4,)), grid=grid,
                       b_infty=base, player_family=fam, h_model=h_model)

    def test_deterministic_balanced_rate_and_monotonicity(self, grid16):
        spec = self.base_spec(grid16, "balanced")
        noise = draw_crossed_noise(grid16, set(), set(), 1, 1, seed=0)
        out = convergence_study(spec, [4, 8, 16, 32, 64], noise)
        mses = [r["mse_mean"] for r in out["rows"]]
        assert -2.5 <= out["slope_mean"] <= -1.5
        assert all(a > b for a, b in zip(mses, mses[1:]))

    def test_identical_players_zero_kernels_exact(self, grid16):
        base = Deterministic(values=(1.0,))
        Z = zero_kernel(grid16)
        fam = BalancedDeterministicFamily(base=base, amplitude=0.0, shape=(0.0,) * 16)
        spec = MFGSpec(lam=1.0, a1=Z, a2hat=Z, a3=Z, beta=base,
                       beta0=Deterministic(values=(0.0,)),
                       b0_signal=Deterministic(values=(0.0,)), grid=grid16,
                       b_infty=base, player_family=fam)
        noise = draw_crossed_noise(grid16, set(), set(), 1, 1, seed=0)
        out = convergence_study(spec, [2, 4], noise)
        assert all(r["mse_mean"] <= 1e-28 for r in out["rows"])

    def test_iid_rate(self, grid16):
        spec = self.base_spec(grid16, "iid")
        fam = spec.player_family
        noise = draw_crossed_noise(grid16, set(), fam.idio_tags(64), 1, 1000, seed=1)
        out = convergence_study(spec, [4, 8, 16, 32, 64], noise, player_paths=100)
        assert -1.4 <= out["slope_mean"] <= -0.6


class TestEpsNash:
    def spec(self, grid):
        base = Deterministic(values=(1.0,))
        fam = IIDBrownianFamily(base=base, sigma=0.5)
        return MFGSpec(lam=1.0, a1=discretize_kernel(ConstantLower(c=0.2), grid),
                       a2hat=discretize_kernel(ExponentialDecay(c=0.6, rho=1.5), grid),
                       a3=discretize_kernel(ExponentialDecay(c=0.4, rho=1.0), grid),
                       beta=Martingale(sigma=0.5, noise="idio0"),
                       beta0=Deterministic(values=(0.0,)),
                       b0_signal=Deterministic(values=(0.4,)), grid=grid,
                       b_infty=base, player_family=fam, h_model="iid")

    def test_equilibrium_deviation_is_zero(self, grid16):
        # deterministic game: v^i is flat across paths, so u = v^0 is admissible
        base = Deterministic(values=(1.0,))
        Z = zero_kernel(grid16)
        fam = BalancedDeterministicFamily(base=base, amplitude=0.0, shape=(0.0,) * 16)
        spec = MFGSpec(lam=1.0, a1=Z, a2hat=Z, a3=Z, beta=base,
                       beta0=Deterministic(values=(0.0,)),
                       b0_signal=Deterministic(values=(0.0,)), grid=grid16,
                       b_infty=base, player_family=fam)
        noise = draw_crossed_noise(grid16, set(), set(), 1, 1, seed=0)
        sol = solve_infinite(spec, 4, noise)
        out = eps_nash_gap(spec, 4, sol.v[0, 0], noise)
        assert out["gap"] == 0.0

    def test_zero_kernels_no_gain(self, grid16):
        # decoupled game: the mean-field strategy is exactly optimal at any N
        base = Deterministic(values=(1.0,))
        Z = zero_kernel(grid16)
        fam = IIDBrownianFamily(base=base, sigma=0.5)
        spec = MFGSpec(lam=1.0, a1=Z, a2hat=Z, a3=Z,
                       beta=Martingale(sigma=0.5, noise="idio0"),
                       beta0=Deterministic(values=(0.0,)),
                       b0_signal=Deterministic(values=(0.0,)), grid=grid16,
                       b_infty=base, player_family=fam, h_model="iid")
        noise = draw_crossed_noise(grid16, set(), fam.idio_tags(4), 1, 40, seed=3)
        dev = 0.3 + 0.1 * grid16.times
        out = eps_nash_gap(spec, 4, dev, noise)
        assert out["gap"] <= 3.0 * out["stderr"] + 1e-12

    def test_best_response_gap_positive_and_decaying(self, grid16):
        spec = self.spec(grid16)
        gaps = []
        for N in (4, 16, 64):
            fam = spec.player_family
            noise = draw_crossed_noise(grid16, set(), fam.idio_tags(N), 1, 40, seed=9)
            out = best_response_gap(spec, N, noise)
            assert out["gap"] >= -1e-12
            gaps.append(out["gap"])
        assert gaps[0] > gaps[1] > gaps[2]

    def test_induced_game_shape(self, grid16):
        spec = self.spec(grid16)
        game = induced_game(spec, 5)
        assert game.n_players == 5
        assert len(game.b_signals) == 5


class TestBatchedPipelineCrossValidation:
    def test_batched_driver_matches_per_path_assembly(self, grid16):
        from volterra_games.meanfield import BatchedDriver, _shift_terms
        from volterra_games.fredholm import FredholmProblem, FredholmSolver
        from volterra_games.grid_ops import ExponentialDecay, discretize_kernel

        K = discretize_kernel(ExponentialDecay(c=0.6, rho=1.5), grid16)
        solver = FredholmSolver(FredholmProblem(K=K, L=K, lam_eff=2.0))
        fam = LinearCombination(terms=(
            (1.0, Deterministic(values=tuple(1.0 + grid16.times))),
            (1.0, Martingale(sigma=0.5, noise="a")),
            (0.7, Martingale(sigma=0.8, noise="b"))))
        cs = compile_signal(fam, grid16)
        bundle = draw_noise(grid16, {"a", "b"}, 6, seed=31)
        driver = BatchedDriver(solver, cs)
        vals_b, a_b = driver.assemble(bundle.increments)
        for p in range(6):
            path = simulate(fam, grid16, bundle, p)
            assert np.max(np.abs(vals_b[p] - path.values)) <= 1e-13
            assert np.max(np.abs(a_b[p] - solver.assemble_a(path))) <= 1e-13

    def test_convergence_study_player_route_matches_solve_nash(self, grid16):
        # the vectorized finite-game player solve inside convergence_study must
        # reproduce the reference per-path pipeline
        from volterra_games.nplayer import solve_nash as reference_solve
        from volterra_games.meanfield import induced_game

        spec = TestConvergence().base_spec(grid16, "iid")
        fam = spec.player_family
        N = 4
        noise = draw_crossed_noise(grid16, set(), fam.idio_tags(N), 1, 5, seed=21)
        game = induced_game(spec, N)
        ref = reference_solve(game, noise.bundle)

        from volterra_games.meanfield import BatchedDriver, _surfaces_for, _values_for
        from volterra_games.nplayer import build_operators, shifted_drive_batch
        gops = build_operators(game)
        mean_family = LinearCombination(terms=tuple(
            [(1.0 / N, s) for s in game.b_signals] + [(1.0 / N, game.b0_signal)]))
        c_mean = compile_signal(mean_family, grid16)
        driver = BatchedDriver(gops.mean_solver, c_mean)
        _, a = driver.assemble(noise.bundle.increments)
        ubar = gops.mean_solver.solve_v(a.T).T
        assert np.max(np.abs(ubar - ref.ubar)) <= 1e-11

        sel = list(range(5))
        surf_mean = _surfaces_for(c_mean, noise, sel)
        ub_surf = gops.mean_solver.conditional_surfaces_batch(ubar[sel], surf_mean)
        cb1 = compile_signal(LinearCombination(terms=(
            (1.0, game.b_signals[0]), (1.0 / N, game.b0_signal))), grid16)
        d_vals, d_surfs = shifted_drive_batch(_values_for(cb1, noise, sel),
                                              _surfaces_for(cb1, noise, sel),
                                              gops.H, ubar[sel], ub_surf)
        a1 = gops.player_solver.assemble_a_batch(d_vals, d_surfs)
        u1 = gops.player_solver.solve_v(a1.T).T
        assert np.max(np.abs(u1 - ref.u[0])) <= 1e-11
