import math
from dataclasses import replace

import numpy as np
import pytest

from gspde import (
    ContractError,
    DomainError,
    InnerSolveError,
    NoiseSpec,
    OperatorValuedIntegrand,
    SolverConfig,
    TimeGrid,
    build_grid,
    constant_diffusion,
    convergence_study,
    estimate_moments,
    increment_covariance,
    linear_diffusion,
    make_fbm_kernel,
    make_linear_heat,
    make_p_laplace,
    make_porous_medium,
    h_minus_one_space,
    shift_operators,
    solution_to_csv,
    solve_many,
    solve_spde,
    solve_transformed,
    w1p_space,
    wiener_increments,
    zero_diffusion,
    zero_drift,
)
from gspde.solver import check_contract

K75 = make_fbm_kernel(0.75)


def heat_problem(n=16, nu=1.0):
    sp = w1p_space(n, 2.0)
    return sp, make_linear_heat(sp, nu=nu), zero_diffusion(sp, 1)


class TestSolverConfig:
    def test_validation(self):
        with pytest.raises(DomainError):
            SolverConfig(dt=0.0)
        with pytest.raises(DomainError):
            SolverConfig(dt=0.1, inner_tol=0.0)
        with pytest.raises(DomainError):
            SolverConfig(dt=0.1, inner_method="secant")
        with pytest.raises(DomainError):
            SolverConfig(dt=0.1, inner_init="random")

    def test_contract_check(self):
        sp, heat, _ = heat_problem(4)
        bad = replace(heat, constants=replace(heat.constants, c=4.0))
        with pytest.raises(ContractError):
            check_contract(bad, SolverConfig(dt=0.5))
        check_contract(bad, SolverConfig(dt=0.2))  # 0.8 < 1 passes

    def test_contract_surfaces_before_compute(self):
        sp, heat, B = heat_problem(4)
        bad = replace(heat, constants=replace(heat.constants, c=8.0))
        cfg = SolverConfig(dt=0.25, seed_W=1, seed_G=1)
        with pytest.raises(ContractError):
            solve_spde(bad, B, None, np.zeros(4), K75, None, cfg)


class TestGridBuilder:
    def test_divides_horizon(self):
        g = build_grid(1.0, 0.125)
        assert g.m == 9
        with pytest.raises(DomainError):
            build_grid(1.0, 0.3)


class TestDeterministicOracles:
    @pytest.mark.parametrize("dt", [2**-4, 2**-6, 2**-9])
    def test_heat_matches_per_mode_recursion(self, dt):
        # backward Euler on a diagonal mode: Y_{k+1} = Y_k / (1 + dt lambda)
        sp, heat, B = heat_problem(16)
        X0 = np.zeros(16)
        X0[0] = 1.0
        cfg = SolverConfig(dt=dt, seed_W=1, seed_G=2)
        sol = solve_spde(heat, B, None, X0, K75, None, cfg)
        lam = -heat.eval(0.0, X0)[0]
        K = sol.grid.m - 1
        oracle = (1.0 + dt * lam) ** (-K)
        assert sol.X[-1, 0] == pytest.approx(oracle, rel=1e-12)
        assert np.abs(sol.X[-1, 1:]).max() < 1e-14

    def test_heat_all_modes_decay(self):
        sp, heat, B = heat_problem(8)
        X0 = np.ones(8)
        cfg = SolverConfig(dt=2**-6, seed_W=1, seed_G=2)
        sol = solve_spde(heat, B, None, X0, K75, None, cfg)
        lams = np.array([-heat.eval(0.0, np.eye(8)[k])[k] for k in range(8)])
        K = sol.grid.m - 1
        oracle = (1.0 + cfg.dt * lams) ** (-K)
        assert np.allclose(sol.X[-1], oracle, rtol=1e-12)

    def test_zero_operators_keep_state_constant(self):
        sp = w1p_space(6, 2.0)
        X0 = np.arange(1.0, 7.0)
        cfg = SolverConfig(dt=2**-4, seed_W=3, seed_G=4)
        sol = solve_spde(zero_drift(sp), zero_diffusion(sp, 1), None, X0, K75, None, cfg)
        assert np.all(sol.X == X0)

    def test_porous_medium_linear_case(self):
        # m = 1 gives the spectral heat flow in the H^{-1} pivot
        sp = h_minus_one_space(8, 1.0)
        pm = make_porous_medium(sp, 1.0)
        B = zero_diffusion(sp, 1)
        X0 = np.zeros(8)
        X0[2] = 1.0
        cfg = SolverConfig(dt=2**-5, seed_W=1, seed_G=1)
        sol = solve_spde(pm, B, None, X0, K75, None, cfg)
        lam = (3 * math.pi) ** 2
        oracle = (1.0 + cfg.dt * lam) ** (-(sol.grid.m - 1))
        assert sol.X[-1, 2] == pytest.approx(oracle, rel=1e-11)


class TestUniquenessAndStability:
    def test_inner_initialisation_agreement(self):
        # both initialisations land on the unique monotone root
        sp = w1p_space(8, 4.0)
        plap = make_p_laplace(sp, 4.0)
        B = zero_diffusion(sp, 1)
        X0 = np.zeros(8)
        X0[0] = 1.0
        X0[2] = 0.4
        warm = SolverConfig(dt=2**-5, seed_W=9, seed_G=9, inner_init="warm")
        zero = SolverConfig(dt=2**-5, seed_W=9, seed_G=9, inner_init="zero")
        s1 = solve_spde(plap, B, None, X0, K75, None, warm)
        s2 = solve_spde(plap, B, None, X0, K75, None, zero)
        sup = max(sp.h_norm(a - b) for a, b in zip(s1.X, s2.X))
        assert sup <= 10 * warm.inner_tol

    def test_scalar_root_against_bisection_oracle(self):
        # n = 1: the implicit step solves v - dt A(v) = b; bisection gives the
        # same root of the monotone scalar map
        sp = w1p_space(1, 4.0)
        plap = make_p_laplace(sp, 4.0)
        dt, b = 2**-4, 0.8
        phi = lambda v: v - dt * plap.eval(0.0, np.array([v]))[0] - b
        lo, hi = 0.0, b
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if phi(mid) > 0:
                hi = mid
            else:
                lo = mid
        cfg = SolverConfig(dt=dt, seed_W=0, seed_G=0)
        grid = TimeGrid.uniform(dt, 2)
        Y, _ = solve_transformed(plap, zero_diffusion(sp, 1), np.array([b]), cfg, grid,
                                 np.zeros((1, 1)))
        assert Y[-1, 0] == pytest.approx(0.5 * (lo + hi), abs=1e-12)

    def test_monotone_contraction_of_two_states(self):
        # c = 0 drift, identical noise: the H-distance of two solutions is
        # non-increasing at every step
        sp = w1p_space(8, 4.0)
        plap = make_p_laplace(sp, 4.0)
        B = zero_diffusion(sp, 1)
        spec = NoiseSpec.explicit([0.5])
        mode = np.zeros(8)
        mode[0] = 1.0
        h = OperatorValuedIntegrand.rank_one(mode, 0, 1)
        cfg = SolverConfig(dt=2**-5, seed_W=21, seed_G=22)
        X0a = np.zeros(8)
        X0a[0] = 1.0
        X0b = -X0a
        sa = solve_spde(plap, B, h, X0a, K75, spec, cfg)
        sb = solve_spde(plap, B, h, X0b, K75, spec, cfg)
        d = np.array([sp.h_norm(a - b) for a, b in zip(sa.X, sb.X)])
        assert np.all(np.diff(d) <= 1e-8 * d[0])


class TestPipeline:
    def test_zero_forcing_matches_direct_transform_bitwise(self):
        sp, heat, B = heat_problem(8)
        X0 = np.linspace(0.2, 0.9, 8)
        cfg = SolverConfig(dt=2**-5, seed_W=31, seed_G=32)
        sol = solve_spde(heat, B, None, X0, K75, None, cfg)
        grid = build_grid(K75.T, cfg.dt)
        W = wiener_increments(cfg.seed_W, 0, grid.m, cfg.dt, B.dim_U)
        Ab, Bb = shift_operators(heat, B, np.zeros((grid.m, 8)), grid)
        Y, _ = solve_transformed(Ab, Bb, X0, cfg, grid, W)
        assert np.array_equal(sol.X, Y)
        assert np.all(sol.w == 0.0)

    def test_decomposition_identity(self):
        sp, heat, B = heat_problem(8)
        spec = NoiseSpec.power_law(1.0, 3.0, 4)
        h = OperatorValuedIntegrand.constant(np.eye(8)[:, :4])
        cfg = SolverConfig(dt=2**-5, seed_W=41, seed_G=42)
        sol = solve_spde(heat, B, h, np.zeros(8), K75, spec, cfg)
        assert np.array_equal(sol.X, sol.Y + sol.w)
        assert np.all(sol.X[0] == 0.0)

    def test_seed_determinism_bitwise(self):
        sp, heat, _ = heat_problem(6)
        B = linear_diffusion(sp, 2, 0.4)
        spec = NoiseSpec.power_law(1.0, 3.0, 2)
        h = OperatorValuedIntegrand.constant(np.eye(6)[:, :2])
        cfg = SolverConfig(dt=2**-4, seed_W=5, seed_G=6)
        s1 = solve_spde(heat, B, h, np.zeros(6), K75, spec, cfg)
        s2 = solve_spde(heat, B, h, np.zeros(6), K75, spec, cfg)
        assert np.array_equal(s1.X, s2.X)
        s3 = solve_spde(heat, B, h, np.zeros(6), K75, spec, cfg, run=1)
        assert not np.array_equal(s1.X, s3.X)

    def test_runs_have_disjoint_noise(self):
        sp, heat, B = heat_problem(4)
        cfg = SolverConfig(dt=2**-4, seed_W=5, seed_G=6)
        W0 = wiener_increments(5, 0, 17, cfg.dt, 1)
        W1 = wiener_increments(5, 1, 17, cfg.dt, 1)
        assert not np.allclose(W0, W1)

    def test_inner_solve_error_reports_step(self):
        sp = w1p_space(8, 4.0)
        plap = make_p_laplace(sp, 4.0)
        X0 = np.zeros(8)
        X0[0] = 2.0
        cfg = SolverConfig(dt=2**-4, seed_W=1, seed_G=1, inner_max_iter=1,
                           inner_method="fixed_point", inner_init="zero")
        with pytest.raises(InnerSolveError) as exc:
            solve_spde(plap, zero_diffusion(sp, 1), None, X0, K75, None, cfg)
        assert exc.value.step == 0
        assert exc.value.residual > 0

    def test_fixed_point_matches_newton(self):
        sp, heat, B = heat_problem(4)
        X0 = np.zeros(4)
        X0[0] = 1.0
        newton = SolverConfig(dt=2**-4, seed_W=7, seed_G=7, inner_method="newton")
        fixed = SolverConfig(dt=2**-4, seed_W=7, seed_G=7, inner_method="fixed_point",
                             inner_max_iter=5000)
        s1 = solve_spde(heat, B, None, X0, K75, None, newton)
        s2 = solve_spde(heat, B, None, X0, K75, None, fixed)
        assert np.allclose(s1.X, s2.X, atol=1e-8)
        assert s2.diagnostics["max_inner_residual"] <= fixed.inner_tol

    def test_residuals_below_tolerance(self):
        sp = w1p_space(8, 4.0)
        plap = make_p_laplace(sp, 4.0)
        X0 = np.full(8, 0.3)
        cfg = SolverConfig(dt=2**-5, seed_W=2, seed_G=2)
        sol = solve_spde(plap, zero_diffusion(sp, 1), None, X0, K75, None, cfg)
        assert sol.diagnostics["max_inner_residual"] <= cfg.inner_tol


class TestMoments:
    def test_constant_path_functionals(self):
        sp = w1p_space(6, 2.0)
        X0 = np.zeros(6)
        X0[1] = 1.0
        cfg = SolverConfig(dt=2**-4, seed_W=3, seed_G=3)
        sol = solve_spde(zero_drift(sp), zero_diffusion(sp, 1), None, X0, K75, None, cfg)
        m = estimate_moments([sol], sp)
        assert m["sup_t_mean_H2"] == pytest.approx(1.0, rel=1e-12)
        assert m["mean_V_alpha"] == pytest.approx(1.0 * sp.v_norm(X0) ** sp.alpha, rel=1e-12)

    def test_heat_sup_attained_at_start(self):
        sp, heat, B = heat_problem(8)
        X0 = np.ones(8) * 0.5
        cfg = SolverConfig(dt=2**-5, seed_W=3, seed_G=3)
        sol = solve_spde(heat, B, None, X0, K75, None, cfg)
        m = estimate_moments([sol], sp)
        assert m["sup_t_mean_H2"] == pytest.approx(sp.h_norm(X0) ** 2, rel=1e-12)

    def test_mc_self_consistency_under_doubling(self):
        sp, heat, _ = heat_problem(4)
        B = linear_diffusion(sp, 1, 0.5)
        cfg = SolverConfig(dt=2**-4, seed_W=13, seed_G=13)
        X0 = np.full(4, 0.5)
        runs = solve_many(heat, B, None, X0, K75, None, cfg, 64)
        m1 = estimate_moments(runs[:32], sp)
        m2 = estimate_moments(runs, sp)
        sup_vals = [max(sp.h_norm(x) ** 2 for x in r.X) for r in runs]
        se = np.std(sup_vals, ddof=1) / math.sqrt(len(runs))
        assert abs(m1["sup_t_mean_H2"] - m2["sup_t_mean_H2"]) <= 3 * se

    def test_requires_common_grid(self):
        sp, heat, B = heat_problem(4)
        a = solve_spde(heat, B, None, np.zeros(4), K75, None, SolverConfig(dt=2**-4, seed_W=1, seed_G=1))
        b = solve_spde(heat, B, None, np.zeros(4), K75, None, SolverConfig(dt=2**-5, seed_W=1, seed_G=1))
        with pytest.raises(DomainError):
            estimate_moments([a, b], sp)


class TestConvergence:
    def test_heat_first_order(self):
        sp, heat, B = heat_problem(8, nu=0.1)
        X0 = np.zeros(8)
        X0[0] = 1.0
        cfg = SolverConfig(dt=2**-4, seed_W=1, seed_G=1)
        table = convergence_study(heat, B, None, X0, K75, None, cfg,
                                  dt_list=[2**-4, 2**-5, 2**-6, 2**-7], n_runs=1)
        assert table.slope == pytest.approx(1.0, abs=0.15)
        assert table.errors[0] < table.errors[-1]

    def test_additive_constant_diffusion_is_exact(self):
        sp = w1p_space(6, 2.0)
        Bc = constant_diffusion(sp, 0.4 * np.eye(6)[:, :2])
        cfg = SolverConfig(dt=2**-3, seed_W=17, seed_G=17)
        X0 = np.zeros(6)
        table = convergence_study(zero_drift(sp), Bc, None, X0, K75, None, cfg,
                                  dt_list=[2**-3, 2**-4], n_runs=3)
        assert max(table.errors) < 1e-12

    def test_p_laplace_positive_rate(self):
        sp = w1p_space(8, 4.0)
        plap = make_p_laplace(sp, 4.0)
        B = zero_diffusion(sp, 1)
        X0 = np.zeros(8)
        X0[0] = 1.0
        cfg = SolverConfig(dt=2**-4, seed_W=1, seed_G=1)
        table = convergence_study(plap, B, None, X0, K75, None, cfg,
                                  dt_list=[2**-4, 2**-5, 2**-6], n_runs=1)
        assert table.slope >= 0.5

    def test_noise_aggregation_consistency(self):
        # Wiener sums over coarse cells equal the fine increments aggregated
        W = wiener_increments(3, 0, 17, 1 / 16, 2)
        coarse = W.reshape(8, 2, 2).sum(axis=1)
        assert np.allclose(coarse.sum(axis=0), W.sum(axis=0))

    def test_rejects_non_nested_steps(self):
        sp, heat, B = heat_problem(4)
        cfg = SolverConfig(dt=2**-4, seed_W=1, seed_G=1)
        with pytest.raises(DomainError):
            convergence_study(heat, B, None, np.zeros(4), K75, None, cfg,
                              dt_list=[0.3, 0.1], n_runs=1)


class TestVarianceDecomposition:
    def test_wiener_plus_forcing_parts(self):
        # A = heat, B = constant rank-one, h = rank-one; with independent
        # streams the terminal variance of the forced mode splits into the
        # discrete Wiener and driver parts, both computable in closed form
        n, m_nodes, n_runs, b = 4, 65, 300, 0.5
        sp = w1p_space(n, 2.0)
        heat = make_linear_heat(sp)
        Bmat = np.zeros((n, 1))
        Bmat[0, 0] = b
        B = constant_diffusion(sp, Bmat)
        spec = NoiseSpec.explicit([1.0])
        mode = np.zeros(n)
        mode[0] = 1.0
        h = OperatorValuedIntegrand.rank_one(mode, 0, 1)
        dt = 1.0 / (m_nodes - 1)
        cfg = SolverConfig(dt=dt, seed_W=301, seed_G=302)
        runs = solve_many(heat, B, h, np.zeros(n), K75, spec, cfg, n_runs)
        xT = np.array([r.X[-1, 0] for r in runs])

        lam = -heat.eval(0.0, mode)[0]
        rho = 1.0 / (1.0 + dt * lam)
        K = m_nodes - 1
        weights = rho ** np.arange(K, 0, -1)
        var_wiener = float(np.sum(weights**2) * dt * b**2)
        nodes = np.linspace(0.0, 1.0, m_nodes)
        C = increment_covariance(K75, nodes)
        var_forcing = float(weights @ C @ weights)
        oracle = var_wiener + var_forcing

        sample_var = xT.var(ddof=1)
        se = sample_var * math.sqrt(2.0 / (n_runs - 1))
        assert abs(sample_var - oracle) <= 3 * se
        # both parts contribute materially, so the split is actually tested
        assert min(var_wiener, var_forcing) > 0.1 * oracle


class TestSolutionCsv:
    def test_format_and_roundtrip(self, tmp_path):
        sp, heat, B = heat_problem(4)
        cfg = SolverConfig(dt=2**-3, seed_W=1, seed_G=1)
        X0 = np.array([1.0, 0.5, 0.0, -0.25])
        sol = solve_spde(heat, B, None, X0, K75, None, cfg)
        out = tmp_path / "sol.csv"
        solution_to_csv(sol, out, header_lines=["cfg: test"])
        lines = out.read_text().splitlines()
        assert lines[0] == "# cfg: test"
        assert lines[1] == "t,coefficient,X,Y,w"
        assert len(lines) == 2 + sol.grid.m * 4
        t, idx, x, y, w = lines[2].split(",")
        assert float(x) == sol.X[0, 0]
