import numpy as np
import pytest

from mmsmfg.core import InitialLaw, TimeGrid
from mmsmfg.errors import InvalidArgument, StructuralError
from mmsmfg.hjbfpk import OscillatorParams, PeriodicGrid, mfg_fixed_point
from mmsmfg.lqg import LqgParams
from mmsmfg.mvlimit import kuramoto_test_model, sine_feedback
from mmsmfg.nash import (
    DeviationFamily,
    epsilon_n,
    epsilon_nash_experiment,
    estimate_gain_constants,
    frozen_field_responder,
    oscillator_equilibrium,
    oscillator_model,
    satisfies_a13,
)


class TestEpsilonN:
    def test_at_reference(self):
        assert epsilon_n(np.full(7, 1.3), 1.3) == pytest.approx(0.0, abs=1e-7)

    def test_hand_value(self):
        assert epsilon_n([0.0, 2.0], 1.0) == pytest.approx(1.0)

    @pytest.mark.xfail(strict=True, reason="the literal formula tends to the law's variance, not to zero")
    def test_decreasing_to_zero(self):
        rng = np.random.default_rng(0)
        vals = [epsilon_n(rng.normal(1.0, 1.0, n), 1.0) for n in (10, 100, 1000, 10_000)]
        assert all(b < a for a, b in zip(vals, vals[1:]))

    def test_tends_to_spread(self):
        rng = np.random.default_rng(0)
        assert epsilon_n(rng.normal(1.0, 0.5, 100_000), 1.0) == pytest.approx(0.5, rel=0.01)


class TestScope:
    def test_oscillator_in_scope(self):
        assert satisfies_a13(oscillator_model(OscillatorParams()))

    def test_kuramoto_out_of_scope(self):
        assert not satisfies_a13(kuramoto_test_model(kappa=0.5))

    def test_major_deviation_refused(self):
        u = sine_feedback()
        fam = DeviationFamily("offset", [0.1], target="major")
        with pytest.raises(StructuralError):
            epsilon_nash_experiment(kuramoto_test_model(), u, u, fam, [2, 4], 2, 0, TimeGrid(1.0, 10))

    def test_unknown_kind(self):
        with pytest.raises(InvalidArgument):
            DeviationFamily("teleport")


class TestExperiment:
    def test_identity_only_zero(self):
        u = sine_feedback()
        rep = epsilon_nash_experiment(
            oscillator_model(OscillatorParams(sigma0=0.0)), u, u, DeviationFamily("identity"), [3, 6, 9], 4, 1,
            TimeGrid(0.5, 20),
        )
        assert rep.benefits == [0.0, 0.0, 0.0]
        assert rep.fit is None

    def test_offset_family_nonnegative(self):
        u = sine_feedback()
        fam = DeviationFamily("offset", [-0.2, 0.2])
        rep = epsilon_nash_experiment(
            oscillator_model(OscillatorParams(sigma0=0.0)), u, u, fam, [3, 6], 5, 2, TimeGrid(0.5, 20),
            InitialLaw.point(1.0), InitialLaw.vonmises(np.pi, 1.0),
        )
        assert all(b >= 0 for b in rep.benefits)
        assert set(rep.member_means) == {"identity", "offset-0.2", "offset+0.2"}

    def test_best_response_small(self, tmp_path):
        par = OscillatorParams(sigma0=0.0)
        grid, tg = PeriodicGrid(32), TimeGrid(0.5, 32)
        eq = oscillator_equilibrium(par, grid, tg)
        fam = DeviationFamily("best_response", responder=frozen_field_responder(par, grid, tg))
        rep = epsilon_nash_experiment(oscillator_model(par), eq.u0, eq.u, fam, [4, 8, 16, 32], 6, 3, tg,
                                      eq.major_law, eq.minor_law)
        assert rep.member_means["identity"] == [0.0] * 4
        assert rep.benefits[0] > 0
        rep.write(tmp_path / "n.csv", tmp_path / "n.json")
        assert (tmp_path / "n.csv").read_text().startswith("N,benefit,stderr")


class TestGains:
    def test_zero_perturbation(self):
        est = estimate_gain_constants("lqg", [0.0], params=LqgParams.default_scalar(), tgrid=TimeGrid(1.0, 100))
        assert all(v == [0.0] for v in est.distances.values())

    def test_oscillator_zero_perturbation(self):
        est = estimate_gain_constants(
            "oscillator", [0.0], params=OscillatorParams(), grid=PeriodicGrid(32), tgrid=TimeGrid(0.5, 32)
        )
        assert all(v == [0.0] for v in est.distances.values())

    def test_lqg_ratios_stable(self):
        est = estimate_gain_constants("lqg", [1e-3, 1e-2], params=LqgParams.default_scalar(), tgrid=TimeGrid(1.0, 200))
        for name, (a, b) in est.ratios.items():
            if a > 0:
                assert b / a == pytest.approx(1.0, abs=0.2), name

    def test_oscillator_product_below_one(self):
        par = OscillatorParams()
        grid, tg = PeriodicGrid(64), TimeGrid(0.5, 64)
        base = mfg_fixed_point(par, grid, tg, tol=1e-9, max_iter=200)
        est = estimate_gain_constants("oscillator", [1e-3, 1e-2], params=par, grid=grid, tgrid=tg, base=base)
        assert est.product < 1
        assert all(r < 1 for r in base.ratios)

    def test_unknown_model(self):
        with pytest.raises(InvalidArgument):
            estimate_gain_constants("heat", [1e-3])
