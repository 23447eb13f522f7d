import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmsmfg.core import InitialLaw, TimeGrid
from mmsmfg.errors import InvalidArgument, StepSizeError
from mmsmfg.hjbfpk import (
    OscillatorParams,
    PeriodicGrid,
    W0Lattice,
    circular_w1,
    circular_w1_density,
    coupling_major,
    coupling_minor,
    coupling_minor_point,
    martingale_residual,
    mfg_fixed_point,
    solve_fpk_forward,
    solve_hjb_backward,
    solve_hjb_backward_on_lattice,
    splat,
    write_field_csv,
    write_trace_json,
)

GRID = PeriodicGrid(64)
UNIFORM = np.full(64, 1 / (2 * np.pi))


def dirac(i, grid=GRID):
    p = np.zeros(grid.cells)
    p[i] = 1.0 / grid.h
    return p


class TestCouplings:
    def test_uniform_major(self):
        assert np.allclose(coupling_major(UNIFORM, GRID), 0.5, atol=1e-14)

    def test_dirac_major(self):
        th = GRID.x[9]
        assert np.allclose(coupling_major(dirac(9), GRID), np.sin(GRID.x - th) ** 2, atol=1e-12)

    @settings(max_examples=40)
    @given(st.lists(st.floats(0, 10), min_size=64, max_size=64).filter(lambda v: sum(v) > 0.1))
    def test_major_range(self, w):
        p = np.array(w) / (np.sum(w) * GRID.h)
        m0 = coupling_major(p, GRID)
        assert m0.min() >= -1e-12 and m0.max() <= 1 + 1e-12

    def test_minor_uniform(self):
        assert np.allclose(coupling_minor(UNIFORM, UNIFORM, 0.4, GRID), 0.5, atol=1e-13)

    def test_minor_small_lambda(self):
        p = GRID.density(InitialLaw.vonmises(1.0, 2.0))
        p0 = GRID.density(InitialLaw.vonmises(4.0, 1.0))
        assert np.allclose(coupling_minor(p0, p, 1e-9, GRID), coupling_major(p, GRID), atol=1e-8)

    @pytest.mark.parametrize("i0,i,lam", [(5, 12, 0.3), (40, 30, 0.7), (2, 20, 0.5)])
    def test_minor_diracs(self, i0, i, lam):
        th0, th = GRID.x[i0], GRID.x[i]
        want = np.sin(GRID.x - (lam * th0 + (1 - lam) * th)) ** 2
        assert np.allclose(coupling_minor(dirac(i0), dirac(i), lam, GRID), want, atol=1e-12)

    def test_point_matches_density(self):
        p = GRID.density(InitialLaw.vonmises(2.0, 1.5))
        a = coupling_minor_point(GRID.x[17], p, 0.6, GRID)
        b = coupling_minor(dirac(17), p, 0.6, GRID)
        assert np.allclose(a, b, atol=1e-12)


class TestHJB:
    P = OscillatorParams(sigma0=0.0)
    TG = TimeGrid(0.5, 64)

    def test_constant_coupling(self):
        m = np.full((65, 64), 0.3)
        vf = solve_hjb_backward(m, self.P, GRID, self.TG)
        want = 0.3 * (0.5 - self.TG.nodes)
        assert np.allclose(vf.phi[:, 0], want[:, None], atol=1e-14)
        assert np.max(np.abs(vf.u)) < 1e-13

    def test_terminal_zero(self):
        m = np.tile(np.sin(GRID.x) ** 2, (65, 1))
        vf = solve_hjb_backward(m, self.P, GRID, self.TG)
        assert np.all(vf.phi[-1] == 0.0)

    def test_expensive_control(self):
        p = GRID.density(InitialLaw.vonmises(np.pi, 1.0))
        m = np.tile(coupling_major(p, GRID), (65, 1))
        vf = solve_hjb_backward(m, OscillatorParams(r=1e6), GRID, self.TG)
        assert np.max(np.abs(vf.u)) < 1e-4

    def test_step_size(self):
        m = np.tile(200 * np.sin(3 * GRID.x), (3, 1))
        with pytest.raises(StepSizeError, match="time steps"):
            solve_hjb_backward(m, self.P, GRID, TimeGrid(0.5, 2))

    def test_shape_check(self):
        with pytest.raises(InvalidArgument):
            solve_hjb_backward(np.zeros((10, 64)), self.P, GRID, self.TG)


class TestLattice:
    TG = TimeGrid(0.5, 64)

    def test_sigma0_zero_collapses(self):
        par = OscillatorParams(sigma0=0.0)
        m = np.tile(np.sin(GRID.x) ** 2, (65, 1))
        det = solve_hjb_backward(m, par, GRID, self.TG, role="major")
        lat = solve_hjb_backward_on_lattice(m, par, GRID, self.TG, W0Lattice(64, 8, 0.0, self.TG.dt), "major")
        assert np.max(np.abs(lat.phi - det.phi)) <= 1e-12
        assert np.max(np.abs(lat.u - det.u)) <= 1e-12

    def test_node_independent_psi_zero(self):
        par = OscillatorParams()
        lat = W0Lattice.build(self.TG, 8, par.sigma0)
        m = np.tile(np.cos(GRID.x) ** 2, (65, lat.max_nodes, 1))
        vf = solve_hjb_backward_on_lattice(m, par, GRID, self.TG, lat, "minor")
        assert np.all(vf.psi == 0.0)

    def test_martingale_identity(self):
        par = OscillatorParams()
        lat = W0Lattice.build(self.TG, 8, par.sigma0)
        rng = np.random.default_rng(0)
        m = 0.5 + 0.2 * rng.random((65, lat.max_nodes, 1)) * np.sin(GRID.x)
        for role in ("major", "minor"):
            vf = solve_hjb_backward_on_lattice(m, par, GRID, self.TG, lat, role)
            assert martingale_residual(vf, m, par) < 1e-10
            assert np.max(np.abs(vf.psi)) > 0

    def test_levels_divide_steps(self):
        with pytest.raises(InvalidArgument):
            W0Lattice(10, 3, 0.3, 0.1)

    def test_probabilities(self):
        lat = W0Lattice.build(self.TG, 8, 0.3)
        for k in range(65):
            assert lat.probabilities(k).sum() == pytest.approx(1.0)
        assert lat.nodes(64) == 9


class TestFPK:
    P = OscillatorParams(sigma0=0.0)
    TG = TimeGrid(0.5, 64)

    def test_uniform_stays(self):
        d = solve_fpk_forward(np.zeros((64, 64)), self.P, UNIFORM, GRID, self.TG)
        assert np.max(np.abs(d.p[:, 0] - UNIFORM)) < 1e-12

    def test_heat_variance(self):
        g = PeriodicGrid(256)
        tg = TimeGrid(0.1, 200)
        par = OscillatorParams(sigma=0.5, sigma0=0.0, T=0.1)
        i = 128
        d = solve_fpk_forward(np.zeros((200, 256)), par, dirac(i, g), g, tg)
        dx = g.x - g.x[i]
        var = np.sum(d.p[-1, 0] * dx**2) * g.h - np.sum(dirac(i, g) * dx**2) * g.h
        assert var == pytest.approx(0.25 * 0.1, rel=0.05)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10**6))
    def test_mass_and_positivity(self, seed):
        rng = np.random.default_rng(seed)
        u = rng.uniform(-2, 2, (64, 64))
        p0 = GRID.density(InitialLaw.vonmises(rng.uniform(0, 6), rng.uniform(0.1, 5)))
        d = solve_fpk_forward(u, self.P, p0, GRID, self.TG)
        assert np.max(np.abs(d.masses() - 1)) < 1e-10
        assert d.p.min() >= -1e-12

    def test_lattice_major_mass(self):
        par = OscillatorParams()
        lat = W0Lattice.build(self.TG, 8, par.sigma0)
        p0 = GRID.density(InitialLaw.vonmises(1.0, 1.0))
        d = solve_fpk_forward(np.zeros((64, lat.max_nodes, 64)), par, p0, GRID, self.TG, lat, "major")
        d.check()
        assert np.allclose(d.expected().sum(axis=-1) * GRID.h, 1.0, atol=1e-12)

    def test_unnormalized(self):
        with pytest.raises(InvalidArgument):
            solve_fpk_forward(np.zeros((64, 64)), self.P, 2 * UNIFORM, GRID, self.TG)


class TestW1:
    def test_atoms_across_zero(self):
        assert circular_w1([0.1], [1.0], [2 * np.pi - 0.1], [1.0]) == pytest.approx(0.2)

    def test_density_matches_atoms(self):
        a, b = dirac(3), dirac(60)
        d = circular_w1_density(a, b, GRID)
        assert d == pytest.approx(circular_w1([GRID.x[3]], [1.0], [GRID.x[60]], [1.0]))

    @given(st.floats(0, 6.28), st.floats(0, 6.28))
    def test_bounded_by_half_circle(self, x, y):
        assert circular_w1([x], [1.0], [y], [1.0]) <= np.pi + 1e-12


class TestFixedPoint:
    TG = TimeGrid(0.5, 64)

    @pytest.mark.parametrize("lam", [0.1, 0.5, 0.9])
    def test_uniform_fixed_point(self, lam):
        par = OscillatorParams(lam=lam)
        res = mfg_fixed_point(
            par, GRID, self.TG, max_iter=1, minor_init=InitialLaw.uniform(), major_init=InitialLaw.uniform()
        )
        assert np.max(np.abs(res.minor_density.p[:, 0] - UNIFORM)) < 1e-8
        assert np.max(np.abs(res.minor_value.u)) < 1e-10
        assert np.max(np.abs(res.major_value.u)) < 1e-10

    def test_contraction(self):
        res = mfg_fixed_point(OscillatorParams(), GRID, self.TG, damping=0.5, tol=1e-6, max_iter=50)
        assert res.converged
        assert all(r < 1 for r in res.ratios)

    def test_damping_same_limit(self):
        par = OscillatorParams()
        a = mfg_fixed_point(par, GRID, self.TG, damping=1.0, tol=1e-7, max_iter=100)
        b = mfg_fixed_point(par, GRID, self.TG, damping=0.5, tol=1e-7, max_iter=100)
        assert a.converged and b.converged
        d = np.max(circular_w1_density(a.minor_density.p[:, 0], b.minor_density.p[:, 0], GRID))
        assert d < 2 * 1e-6

    def test_iteration_cap_flagged(self):
        res = mfg_fixed_point(OscillatorParams(), GRID, self.TG, max_iter=1)
        assert not res.converged and res.iterations == 1

    def test_lattice_sigma0_limit(self):
        base = mfg_fixed_point(OscillatorParams(sigma0=0.0), GRID, self.TG, tol=1e-9, max_iter=200)
        gaps = []
        for s0 in (0.2, 0.1, 0.05):
            lat = W0Lattice.build(self.TG, 8, s0)
            r = mfg_fixed_point(OscillatorParams(sigma0=s0), GRID, self.TG, tol=1e-9, max_iter=200, lattice=lat)
            assert r.converged
            gaps.append(np.max(np.abs(r.minor_density.expected() - base.minor_density.p[:, 0])))
        assert gaps[0] > gaps[1] > gaps[2]
        assert gaps[2] < 1e-4

    def test_point_major_needs_no_noise(self):
        with pytest.raises(InvalidArgument):
            mfg_fixed_point(OscillatorParams(sigma0=0.3), GRID, self.TG, major_point=1.0)

    def test_exports(self, tmp_path):
        res = mfg_fixed_point(OscillatorParams(sigma0=0.0), GRID, TimeGrid(0.5, 16), max_iter=3)
        write_field_csv(tmp_path / "p.csv", res.minor_density.p, TimeGrid(0.5, 16), GRID, res.minor_density.lattice)
        write_trace_json(tmp_path / "t.json", res)
        assert (tmp_path / "p.csv").read_text().startswith("t,node,x,value")
        assert '"iterations": 3' in (tmp_path / "t.json").read_text()


def test_splat_mass():
    p = splat(GRID, np.array([0.37, 5.9]), np.array([0.25, 0.75]))
    assert p.sum() * GRID.h == pytest.approx(1.0)
