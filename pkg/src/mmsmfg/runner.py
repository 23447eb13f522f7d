"""Experiment orchestration: dispatch a validated config, write artifacts, digest them."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .errors import InvalidArgument

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_CHECK_FAILED, EXIT_ERROR = 0, 1, 2


@dataclass
class Check:
    name: str
    passed: Optional[bool]  # None: not applicable to this configuration
    value: object = None
    threshold: object = None
    note: str = ""

    def to_dict(self):
        return {"name": self.name, "passed": self.passed, "value": self.value, "threshold": self.threshold, "note": self.note}


@dataclass
class ExperimentReport:
    experiment: str
    config: dict
    results: dict
    checks: list
    version: str = __version__
    status: str = "ok"
    error: Optional[str] = None
    files: list = field(default_factory=list)
    wall_clock: float = 0.0

    @property
    def passed(self) -> bool:
        return self.status == "ok" and all(c.passed is not False for c in self.checks)

    @property
    def exit_code(self) -> int:
        if self.status != "ok":
            return EXIT_ERROR
        return EXIT_OK if self.passed else EXIT_CHECK_FAILED

    def to_dict(self):
        # wall-clock lives in the manifest so that this file is reproducible
        return {
            "experiment": self.experiment,
            "version": self.version,
            "status": self.status,
            "error": self.error,
            "passed": self.passed,
            "checks": [c.to_dict() for c in self.checks],
            "config": self.config,
            "results": self.results,
        }


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not serializable: {type(obj).__name__}")


def _dump(path: Path, data):
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _write_rows(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([f"{v:.12g}" if isinstance(v, (float, np.floating)) else v for v in row])


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# per-experiment drivers: (cfg, out) -> (results, {check name: Check})
# ---------------------------------------------------------------------------


def riccati_closed_form(A, B, Q, R, tau):
    """Scalar solution of ``-P' = 2 A P - (B^2/R) P^2 + Q``, ``P(T) = 0``, at time-to-go ``tau``."""
    a = B * B / R
    d = np.sqrt(A * A + a * Q)
    if d == 0:
        return np.zeros_like(tau)
    sh, ch = np.sinh(d * tau), np.cosh(d * tau)
    return Q * sh / (d * ch - A * sh)


def _run_riccati(cfg: ExperimentConfig, out: Path):
    from .core import TimeGrid
    from .lqg import solve_riccati

    m = cfg.model
    grid = TimeGrid(m.T, cfg.numerics.steps)
    Pi = solve_riccati(m.A, m.B, m.Q, m.R, grid)
    n = Pi.shape[1]
    _write_rows(
        out / "riccati.csv",
        ["t"] + [f"Pi_{i}{j}" for i in range(n) for j in range(n)],
        ([t, *Pi[k].ravel()] for k, t in enumerate(grid.nodes)),
    )
    checks = {}
    asym = float(np.max(np.abs(Pi - np.swapaxes(Pi, 1, 2))))
    min_eig = float(np.min(np.linalg.eigvalsh(Pi)))
    checks["psd"] = Check("psd", asym <= 1e-12 and min_eig >= -1e-12, min_eig, -1e-12, f"asymmetry {asym:.3g}")
    results = {"steps": grid.steps, "n": n, "Pi_at_0": Pi[0].tolist(), "min_eigenvalue": min_eig}
    A, B, Q, R = (np.atleast_2d(np.asarray(v, dtype=float)) for v in (m.A, m.B, m.Q, m.R))
    closed = None
    if n == 1 and B.shape == (1, 1):
        closed = riccati_closed_form(A[0, 0], B[0, 0], Q[0, 0], R[0, 0], grid.T - grid.nodes)
    if closed is not None and np.all(np.isfinite(closed)):
        err = float(np.max(np.abs(Pi[:, 0, 0] - closed)))
        results["closed_form_error"] = err
        checks["closed_form"] = Check("closed_form", err < 1e-6, err, 1e-6)
    else:
        checks["closed_form"] = Check("closed_form", None, note="closed form only for scalar models")
    return results, checks


def _run_lqg(cfg: ExperimentConfig, out: Path):
    from .core import TimeGrid
    from .lqg import bsde_residual, lqg_equilibrium, mc_bsde_oracle, oracle_relative_error

    num = cfg.numerics
    params = cfg.model.build()
    grid = TimeGrid(params.T, num.steps)
    eq = lqg_equilibrium(params, grid, num.scenarios, cfg.seed)
    eq.write_gains(out / "gains.csv")
    n = params.n
    mean_flow = eq.flow.mean(axis=1)
    _write_rows(
        out / "flow_mean.csv",
        ["t"] + [f"z0_{i}" for i in range(n)] + [f"zbar_{i}" for i in range(n)],
        ([t, *mean_flow[k]] for k, t in enumerate(grid.nodes)),
    )
    res = bsde_residual(eq)
    results = {"coefficient_residual": eq.coeffs.residual, "bsde_rms_residual": res, "scenarios": num.scenarios}
    checks = {
        "consistency": Check("consistency", eq.coeffs.residual <= 1e-8, eq.coeffs.residual, 1e-8),
    }
    if num.oracle_paths >= 1000:
        oracle = mc_bsde_oracle(params, eq.riccati, num.oracle_paths, grid, cfg.seed)
        rel = oracle_relative_error(oracle, eq.coeffs)
        results["oracle"] = {
            "relative_error": rel,
            "iterations": oracle.iterations,
            "condition": oracle.condition,
            "rank_deficient": oracle.rank_deficient,
        }
        worst = max(rel.values())
        checks["oracle"] = Check("oracle", worst < 0.05, worst, 0.05)
    else:
        checks["oracle"] = Check("oracle", None, note="set numerics.oracle_paths >= 1000 to run the oracle")
    return results, checks


def _oscillator_setup(cfg: ExperimentConfig):
    from .core import TimeGrid
    from .hjbfpk import PeriodicGrid, W0Lattice

    m, num = cfg.model, cfg.numerics
    params = m.build()
    grid = PeriodicGrid(num.cells)
    tgrid = TimeGrid(params.T, num.steps)
    lattice = W0Lattice.build(tgrid, num.lattice_levels, params.sigma0) if num.lattice_levels else None
    return params, grid, tgrid, lattice


def _fixed_point(cfg: ExperimentConfig, out: Path):
    from .hjbfpk import mfg_fixed_point, write_field_csv, write_trace_json

    m, num = cfg.model, cfg.numerics
    params, grid, tgrid, lattice = _oscillator_setup(cfg)
    res = mfg_fixed_point(
        params,
        grid,
        tgrid,
        num.damping,
        num.tol,
        num.max_iter,
        lattice,
        minor_init=m.minor_init.build(),
        major_init=m.major_init.build(),
        major_point=m.major_point,
    )
    lat = res.minor_density.lattice
    write_trace_json(out / "trace.json", res)
    _write_rows(
        out / "trace.csv",
        ["iteration", "distance", "ratio"],
        ([i + 1, d, res.ratios[i - 1] if i else ""] for i, d in enumerate(res.trace)),
    )
    write_field_csv(out / "minor_density.csv", res.minor_density.p, tgrid, grid, lat)
    write_field_csv(out / "minor_value.csv", res.minor_value.phi, tgrid, grid, lat)
    write_field_csv(out / "minor_control.csv", res.minor_value.u, tgrid, grid, lat, faces=True)
    densities = [res.minor_density]
    if res.major_path is not None:
        _write_rows(out / "major_path.csv", ["t", "theta0"], zip(tgrid.nodes, res.major_path))
    else:
        write_field_csv(out / "major_density.csv", res.major_density.p, tgrid, grid, lat)
        densities.append(res.major_density)
    mass_err, min_p = 0.0, np.inf
    for dens in densities:
        for k in range(dens.p.shape[0]):
            nk = dens.lattice.nodes(k)
            mass_err = max(mass_err, float(np.max(np.abs(dens.p[k, :nk].sum(axis=-1) * grid.h - 1.0))))
            min_p = min(min_p, float(dens.p[k, :nk].min()))
    checks = {
        "converged": Check("converged", res.converged, res.iterations, num.max_iter, f"last distance {res.trace[-1]:.3g}"),
        "mass": Check("mass", mass_err <= 1e-10, mass_err, 1e-10),
        "positivity": Check("positivity", min_p >= -1e-12, min_p, -1e-12),
    }
    worst_ratio = max(res.ratios) if res.ratios else 0.0
    checks["contraction"] = Check("contraction", all(r < 1 for r in res.ratios), worst_ratio, 1.0)
    results = {**res.summary(), "lattice_levels": lat.levels, "max_mass_error": mass_err, "min_density": min_p}
    return results, checks


def _run_mv(cfg: ExperimentConfig, out: Path):
    from .core import TimeGrid
    from .mvlimit import convergence_experiment, kuramoto_test_model, sine_feedback

    m, num = cfg.model, cfg.numerics
    model = kuramoto_test_model(m.K, m.kappa, m.K0, m.sigma, m.sigma0)
    u = sine_feedback(m.gain)
    rep = convergence_experiment(
        model,
        u,
        u,
        num.N_list,
        num.reps,
        cfg.seed,
        TimeGrid(m.T, num.steps),
        m.major_init.build(),
        m.minor_init.build(),
        particles=num.particles,
        picard_tol=num.picard_tol,
        picard_max=num.picard_max,
    )
    rep.write(out / "convergence.csv", out / "convergence.json")
    slope = None if rep.fit is None else rep.fit.slope
    ok = slope is not None and -0.65 <= slope <= -0.35
    return rep.summary(), {"slope": Check("slope", ok, slope, [-0.65, -0.35])}


def _run_nash(cfg: ExperimentConfig, out: Path):
    from .nash import (
        DeviationFamily,
        epsilon_nash_experiment,
        frozen_field_responder,
        oscillator_equilibrium,
        oscillator_model,
    )

    m, num = cfg.model, cfg.numerics
    params, grid, tgrid, _ = _oscillator_setup(cfg)
    if params.sigma0 != 0:
        raise InvalidArgument("nash-check tabulates a point major agent and needs model.sigma0 = 0")
    theta0 = float(np.pi / 2) if m.major_point is None else m.major_point
    minor_law = m.minor_init.build()
    eq = oscillator_equilibrium(params, grid, tgrid, theta0, minor_law, num.damping, num.tol, num.max_iter)
    if num.deviation == "best_response":
        family = DeviationFamily("best_response", responder=frozen_field_responder(params, grid, tgrid))
    else:
        family = DeviationFamily(num.deviation, list(num.deviation_parameters))
    rep = epsilon_nash_experiment(
        oscillator_model(params), eq.u0, eq.u, family, num.N_list, num.reps, cfg.seed, tgrid, eq.major_law, minor_law
    )
    rep.write(out / "nash.csv", out / "nash.json")
    return nash_summary(rep, eq.result.converged)


def nash_summary(rep, equilibrium_converged=True):
    """Results and checks shared by the runner and the acceptance suite."""
    ident = rep.member_means.get("identity", [])
    b, se = rep.benefits, rep.stderrs
    gap = b[0] - b[-1]
    band = 2 * float(np.hypot(se[0], se[-1]))
    slope = None if rep.fit is None else rep.fit.slope
    checks = {
        "identity_zero": Check("identity_zero", all(v == 0.0 for v in ident), max(map(abs, ident), default=0.0), 0.0),
        "separation": Check("separation", b[-1] < b[0] and gap > band, gap, band, "b(first) - b(last) vs 2 combined stderr"),
        "exponent": Check("exponent", slope is not None and slope <= -0.3, slope, -0.3, f"fit points {rep.fit_points}"),
    }
    return {**rep.summary(), "equilibrium_converged": equilibrium_converged}, checks


def _run_gain(cfg: ExperimentConfig, out: Path):
    from .nash import estimate_gain_constants

    num = cfg.numerics
    if cfg.gain_model == "lqg":
        from .core import TimeGrid

        params = cfg.model.build()
        est = estimate_gain_constants("lqg", num.sizes, params=params, tgrid=TimeGrid(params.T, num.steps))
    else:
        params, grid, tgrid, _ = _oscillator_setup(cfg)
        est = estimate_gain_constants(
            "oscillator", num.sizes, params=params, grid=grid, tgrid=tgrid, theta0=cfg.model.major_point
        )
    names = sorted(est.ratios)
    _write_rows(
        out / "gain_ratios.csv",
        ["size"] + names,
        ([s] + [est.ratios[n][i] for n in names] for i, s in enumerate(est.sizes)),
    )
    return est.summary(), {"gain_product": Check("gain_product", est.product < 1, est.product, 1.0)}


DRIVERS = {
    "riccati": _run_riccati,
    "lqg-solve": _run_lqg,
    "oscillator": _fixed_point,
    "fixed-point": _fixed_point,
    "mv-convergence": _run_mv,
    "nash-check": _run_nash,
    "gain-estimate": _run_gain,
}


def write_manifest(out: Path, wall_clock: float):
    entries = []
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            rel = p.relative_to(out).as_posix()
            entries.append({"path": rel, "sha256": sha256(p), "bytes": p.stat().st_size})
    entries.append({"path": "manifest.json", "sha256": None, "bytes": None, "note": "this file"})
    _dump(out / "manifest.json", {"version": __version__, "wall_clock_seconds": wall_clock, "files": entries})
    return entries


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> ExperimentReport:
    """Run ``cfg`` into ``out_dir`` (default ``cfg.output``) and return the report.

    Module errors keep partial outputs, add a ``FAILED`` marker and set
    ``status = "failed"``; declared checks that do not pass leave
    ``status = "ok"`` with ``passed = False``.
    """
    out = Path(out_dir if out_dir is not None else cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    stale = out / "FAILED"
    if stale.exists():
        stale.unlink()
    start = time.perf_counter()
    report = ExperimentReport(cfg.experiment, cfg.echo(), {}, [])
    try:
        results, checks = DRIVERS[cfg.experiment](cfg, out)
        report.results = results
        report.checks = [checks[name] for name in cfg.declared_checks() if name in checks]
    except Exception as exc:  # noqa: BLE001 - surfaced through the report and marker
        report.status = "failed"
        report.error = f"{type(exc).__name__}: {exc}"
        logger.error("experiment %s failed: %s", cfg.experiment, report.error)
        (out / "FAILED").write_text(report.error + "\n\n" + traceback.format_exc())
    _dump(out / "report.json", report.to_dict())
    report.wall_clock = time.perf_counter() - start
    report.files = write_manifest(out, report.wall_clock)
    return report
