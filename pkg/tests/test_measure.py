import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmsmfg.core import TimeGrid
from mmsmfg.errors import InvalidArgument, ResourceLimit, UnsupportedDimension
from mmsmfg.measure import (
    ConditionalMeasureProcess,
    EmpiricalMeasure,
    PathMeasure,
    holder_estimate,
    rho_T,
    wasserstein_marginal,
    wasserstein_path,
    write_measure_csv,
)

G = TimeGrid(1.0, 10)


def brute_force(a, b):
    n = len(a)
    best = np.inf
    for perm in itertools.permutations(range(n)):
        c = np.mean([min(np.max(np.sum((a[i] - b[j]) ** 2, axis=-1)), 1.0) for i, j in enumerate(perm)])
        best = min(best, c)
    return np.sqrt(best)


class TestRho:
    def test_identity(self):
        x = np.sin(G.nodes)
        assert rho_T(x, x) == 0.0

    def test_offset(self):
        x = np.sin(G.nodes)
        assert rho_T(x, x + 0.3) == pytest.approx(0.09)

    def test_truncated(self):
        x = np.zeros(G.steps + 1)
        assert rho_T(x, x + 2.0) == 1.0

    def test_grid_mismatch(self):
        with pytest.raises(InvalidArgument):
            rho_T(np.zeros(5), np.zeros(6))


class TestWassersteinPath:
    def test_same_measure(self):
        rng = np.random.default_rng(0)
        pm = PathMeasure(rng.normal(size=(5, G.steps + 1)), G)
        assert wasserstein_path(pm, pm) == 0.0

    def test_diracs(self):
        a = PathMeasure.dirac(np.zeros(G.steps + 1), G)
        b = PathMeasure.dirac(np.full(G.steps + 1, 0.5), G)
        assert wasserstein_path(a, b) == pytest.approx(0.5)

    def test_two_atoms_brute_force(self):
        rng = np.random.default_rng(3)
        pa, pb = rng.normal(0, 0.3, (2, G.steps + 1, 1)), rng.normal(0, 0.3, (2, G.steps + 1, 1))
        assert wasserstein_path(PathMeasure(pa, G), PathMeasure(pb, G)) == pytest.approx(brute_force(pa, pb), abs=1e-15)

    def test_unequal_weights_split(self):
        a = PathMeasure(np.array([np.zeros(11), np.ones(11) * 0.2]), G, weights=[0.25, 0.75])
        b = PathMeasure.dirac(np.zeros(11), G)
        assert wasserstein_path(a, b) == pytest.approx(np.sqrt(0.75 * 0.04))

    def test_cap(self):
        pm = PathMeasure(np.zeros((20, G.steps + 1)), G)
        with pytest.raises(ResourceLimit, match="subsample"):
            wasserstein_path(pm, pm, cap=10)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 4), st.integers(0, 10**6))
    def test_symmetric_and_bounded(self, n, seed):
        rng = np.random.default_rng(seed)
        a = PathMeasure(rng.normal(0, 1, (n, G.steps + 1)), G)
        b = PathMeasure(rng.normal(0, 1, (n, G.steps + 1)), G)
        d = wasserstein_path(a, b)
        assert d == pytest.approx(wasserstein_path(b, a), abs=1e-15)
        assert 0.0 <= d <= 1.0


class TestMarginal:
    def test_identical(self):
        m = EmpiricalMeasure(np.array([0.1, 0.7]))
        assert wasserstein_marginal(m, m) == 0.0

    def test_sorted_pairing(self):
        assert wasserstein_marginal(EmpiricalMeasure([0.0, 1.0]), EmpiricalMeasure([0.5, 1.5])) == pytest.approx(0.5)

    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=20), st.floats(-5, 5))
    def test_shift(self, xs, c):
        xs = np.array(xs)
        d = wasserstein_marginal(EmpiricalMeasure(xs), EmpiricalMeasure(xs + c))
        assert d == pytest.approx(abs(c), abs=1e-9)

    def test_dimension(self):
        with pytest.raises(UnsupportedDimension):
            wasserstein_marginal(EmpiricalMeasure(np.zeros((3, 2))), EmpiricalMeasure(np.zeros((3, 2))))


class TestHolder:
    def test_constant_process(self):
        g = TimeGrid(1.0, 64)
        pm = PathMeasure(np.ones((3, 65)), g)
        est = holder_estimate(ConditionalMeasureProcess([pm]))
        assert est.degenerate and est.exponent == 1.0

    def test_straight_line(self):
        g = TimeGrid(1.0, 256)
        pm = PathMeasure.dirac(0.5 * g.nodes, g)
        est = holder_estimate(ConditionalMeasureProcess([pm]))
        assert abs(est.exponent - 1.0) < 0.1

    def test_brownian_dirac(self):
        g = TimeGrid(1.0, 1024)
        rng = np.random.default_rng(1)
        paths = [np.concatenate([[0], np.cumsum(rng.normal(0, np.sqrt(g.dt), g.steps))]) for _ in range(5)]
        est = holder_estimate(ConditionalMeasureProcess([PathMeasure.dirac(p, g) for p in paths]))
        assert est.exponent < 0.55

    def test_too_few_lags(self):
        g = TimeGrid(1.0, 8)
        with pytest.raises(InvalidArgument):
            holder_estimate(ConditionalMeasureProcess([PathMeasure.dirac(g.nodes, g)]))


def test_measure_csv(tmp_path):
    g = TimeGrid(1.0, 2)
    proc = ConditionalMeasureProcess([PathMeasure(np.zeros((2, 3)), g)])
    write_measure_csv(tmp_path / "m.csv", proc)
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0].startswith("t,scenario,particle")
    assert len(lines) == 1 + 3 * 2
