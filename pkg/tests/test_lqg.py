import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmsmfg.core import TimeGrid
from mmsmfg.errors import InvalidArgument
from mmsmfg.lqg import (
    LqgParams,
    bsde_residual,
    lqg_equilibrium,
    mc_bsde_oracle,
    oracle_relative_error,
    reduce_bsde_to_ode,
    solve_lqg_odes,
    solve_riccati,
    solve_riccati_pair,
)


class TestRiccati:
    def test_zero_forcing(self):
        Pi = solve_riccati(0.3, 1.0, 0.0, 1.0, TimeGrid(1.0, 50))
        assert np.all(Pi == 0.0)

    def test_tanh(self):
        g = TimeGrid(1.0, 1000)
        Pi = solve_riccati(0.0, 1.0, 1.0, 1.0, g)
        assert Pi[0, 0, 0] == pytest.approx(np.tanh(1.0), abs=1e-6)
        assert np.max(np.abs(Pi[:, 0, 0] - np.tanh(1.0 - g.nodes))) < 1e-6

    def test_fourth_order(self):
        args = (0.7, 1.3, 2.0, 0.5)
        ref = solve_riccati(*args, TimeGrid(2.0, 16 * 10))[0]
        e1 = abs(solve_riccati(*args, TimeGrid(2.0, 10))[0] - ref).item()
        e2 = abs(solve_riccati(*args, TimeGrid(2.0, 20))[0] - ref).item()
        assert 8 < e1 / e2 < 32

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10**6))
    def test_symmetric_psd(self, seed):
        rng = np.random.default_rng(seed)
        A = rng.normal(size=(2, 2))
        B = rng.normal(size=(2, 1))
        L = rng.normal(size=(2, 2))
        Pi = solve_riccati(A, B, L @ L.T, [[0.5 + rng.random()]], TimeGrid(1.0, 100))
        assert np.max(np.abs(Pi - np.swapaxes(Pi, 1, 2))) == 0.0
        assert np.min(np.linalg.eigvalsh(Pi)) > -1e-10

    def test_singular_R(self):
        with pytest.raises(InvalidArgument):
            solve_riccati(np.eye(2), np.eye(2), np.eye(2), np.diag([1.0, 0.0]), TimeGrid(1.0, 4))


def two_dim():
    base = LqgParams.default_scalar()
    return {k: np.asarray(getattr(base, k)).item() * (np.eye(2) if getattr(base, k).ndim == 2 else np.ones(2))
            for k in base.__dataclass_fields__ if k not in ("T", "major_init", "minor_init")}


class TestParams:
    def test_two_dim_valid(self):
        par = LqgParams(**two_dim())
        assert par.n == 2 and par.m == 2
    def test_asymmetric_Q(self):
        with pytest.raises(InvalidArgument, match="symmetric"):
            LqgParams(**{**two_dim(), "Q": [[1, 1e-3], [0, 1]]})

    def test_shape_named(self):
        with pytest.raises(InvalidArgument, match="B0"):
            LqgParams.default_scalar(A0=np.zeros((2, 2)))

    def test_R_definite(self):
        with pytest.raises(InvalidArgument, match="positive definite"):
            LqgParams.default_scalar(R=0.0)


class TestReduction:
    G = TimeGrid(1.0, 200)

    def test_zero_major_forcing(self):
        par = LqgParams.default_scalar(F0=0.0, H0=0.0, eta0=0.0)
        _, co = solve_lqg_odes(par, self.G)
        assert np.max(np.abs(co.P00)) == 0 and np.max(np.abs(co.P01)) == 0
        assert np.max(np.abs(co.p0)) == 0 and np.max(np.abs(co.q0)) == 0

    def test_minor_decoupled_from_major(self):
        par = LqgParams.default_scalar(G=0.0, H=0.0)
        _, co = solve_lqg_odes(par, self.G)
        assert np.max(np.abs(co.P10)) == 0

    def test_residual_machine_level(self):
        _, co = solve_lqg_odes(LqgParams.default_scalar(), self.G)
        assert co.residual < 1e-12

    def test_reduce_matches_joint(self):
        par = LqgParams.default_scalar()
        ric, co = solve_lqg_odes(par, self.G)
        co2 = reduce_bsde_to_ode(par, solve_riccati_pair(par, self.G), self.G)
        assert np.allclose(co.P, co2.P, atol=1e-10) and np.allclose(co.p, co2.p, atol=1e-10)

    def test_no_cost_no_control(self):
        par = LqgParams.default_scalar(Q0=0.0, Q=0.0)
        eq = lqg_equilibrium(par, TimeGrid(1.0, 50), 4, 0)
        z = np.linspace(-2, 2, 7)[:, None]
        for k in (0, 25, 49):
            assert np.all(eq.u0(k, z, 1) == 0) and np.all(eq.u(k, z, 2) == 0)

    def test_u0_formula(self):
        par = LqgParams.default_scalar()
        eq = lqg_equilibrium(par, TimeGrid(1.0, 50), 3, 1)
        rng = np.random.default_rng(0)
        for k in (0, 17, 49):
            z0 = rng.normal(size=(5, 1))
            s0 = eq.adjoint(k, 2)[0]
            expected = -(1.0 / par.R0[0, 0]) * par.B0[0, 0] * (eq.riccati.Pi0[k, 0, 0] * z0 + s0)
            assert np.allclose(eq.u0(k, z0, 2), expected, atol=1e-14)


class TestOracle:
    def test_matches_reduction(self):
        par = LqgParams.default_scalar()
        g = TimeGrid(1.0, 100)
        ric, co = solve_lqg_odes(par, g)
        orc = mc_bsde_oracle(par, ric, 10_000, g, seed=3)
        rel = oracle_relative_error(orc, co)
        assert rel["s0"] < 0.05 and rel["s"] < 0.05
        assert not orc.rank_deficient

    def test_zero_forcing(self):
        par = LqgParams.default_scalar(F0=0.0, H0=0.0, eta0=0.0)
        g = TimeGrid(1.0, 50)
        ric, _ = solve_lqg_odes(par, g)
        orc = mc_bsde_oracle(par, ric, 2000, g, seed=1)
        se = orc.s0.std(axis=1) / np.sqrt(2000) + 1e-15
        assert np.all(np.abs(orc.s0.mean(axis=1)) <= 3 * se[..., None].max() + 1e-12)

    def test_constant_driver(self):
        par = LqgParams.default_scalar(A0=0.0)
        g = TimeGrid(1.0, 50)
        ric, _ = solve_lqg_odes(par, g)
        c = 0.7
        orc = mc_bsde_oracle(par, ric, 1000, g, seed=2, driver=lambda k, X, s: np.full_like(s, c))
        assert np.allclose(orc.s0[..., 0].mean(axis=1), c * (1.0 - g.nodes), atol=1e-10)

    def test_loading_matches(self):
        par = LqgParams.default_scalar()
        g = TimeGrid(1.0, 100)
        ric, co = solve_lqg_odes(par, g)
        orc = mc_bsde_oracle(par, ric, 10_000, g, seed=4)
        got = orc.q.mean(axis=0)[:, 0]
        want = co.q[:-1].mean(axis=0)[:, 0]
        assert np.allclose(got, want, rtol=0.1)
        # major loading is the major sensitivity times the major diffusion
        assert np.allclose(co.q0[:, 0, 0], co.P00[:, 0, 0] * par.S0[0, 0])

    def test_needs_paths(self):
        par = LqgParams.default_scalar()
        g = TimeGrid(1.0, 10)
        ric, _ = solve_lqg_odes(par, g)
        with pytest.raises(InvalidArgument):
            mc_bsde_oracle(par, ric, 10, g, seed=0)


class TestResidual:
    def test_zero_forcing(self):
        par = LqgParams.default_scalar(Q0=0.0, Q=0.0)
        g = TimeGrid(1.0, 100)
        res = bsde_residual(lqg_equilibrium(par, g, 50, 0))
        assert res["s0"] <= 1e-14 * np.sqrt(g.dt) and res["s"] <= 1e-14 * np.sqrt(g.dt)

    def test_halving(self):
        par = LqgParams.default_scalar()
        r1 = bsde_residual(lqg_equilibrium(par, TimeGrid(1.0, 100), 500, 0))
        r2 = bsde_residual(lqg_equilibrium(par, TimeGrid(1.0, 200), 500, 0))
        for key in ("s0", "s"):
            assert 1.6 <= r1[key] / r2[key] <= 2.4

    @pytest.mark.slow
    def test_perturbation_detected(self):
        eq = lqg_equilibrium(LqgParams.default_scalar(), TimeGrid(1.0, 2000), 2000, 0)
        base = bsde_residual(eq)
        assert bsde_residual(eq, perturb_s0=1.01)["s0"] >= 5 * base["s0"]
        assert bsde_residual(eq, perturb_s=1.01)["s"] >= 5 * base["s"]


def test_gains_csv(tmp_path):
    eq = lqg_equilibrium(LqgParams.default_scalar(), TimeGrid(1.0, 10), 2, 0)
    eq.write_gains(tmp_path / "g.csv")
    lines = (tmp_path / "g.csv").read_text().splitlines()
    assert lines[0].split(",")[:3] == ["t", "Pi0_0", "Pi_0"]
    assert len(lines) == 12
