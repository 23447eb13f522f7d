"""Finite-population simulation and its McKean-Vlasov limit."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np
from scipy import stats

from .core import (
    ControlSet,
    FeedbackControl,
    InitialLaw,
    ModelSpec,
    NoiseBundle,
    TimeGrid,
    apply_diffusion,
    estimate_lipschitz,
    sample_cloud,
    sample_noise,
)
from .errors import InvalidArgument, IterationLimit, NumericalBlowup
from .measure import sup_marginal_w2

logger = logging.getLogger(__name__)


@dataclass
class PopulationRun:
    grid: TimeGrid
    major: np.ndarray  # (K+1, n)
    minors: np.ndarray  # (K+1, N, n)
    major_controls: np.ndarray  # (K, k)
    minor_controls: np.ndarray  # (K, N, k)
    major_cost: float
    minor_costs: np.ndarray  # (N,)
    seed: int
    scenario: int = 0

    @property
    def N(self) -> int:
        return self.minors.shape[1]


def _check_finite(t, x, *vals):
    for v in vals:
        if not np.all(np.isfinite(v)):
            raise NumericalBlowup(f"non-finite coefficient at t={t:g}", t=t, x=np.array(x))


def _controls_for(t, x, u: FeedbackControl, overrides: Optional[Dict[int, FeedbackControl]]):
    uu = np.asarray(u(t, x), dtype=float).reshape(x.shape[0], -1).copy()
    if overrides:
        for i, ctrl in overrides.items():
            uu[i] = np.asarray(ctrl(t, x[i : i + 1]), dtype=float).reshape(-1)
    return uu


def simulate_population(
    model: ModelSpec,
    u0: FeedbackControl,
    u: FeedbackControl,
    N: int,
    noise: NoiseBundle,
    scenario: int = 0,
    minor_overrides: Optional[Dict[int, FeedbackControl]] = None,
    check_lipschitz: bool = False,
    with_costs: bool = True,
) -> PopulationRun:
    """Closed-loop Euler-Maruyama advance of the major agent and ``N`` minors.

    Coupling terms see the current cloud of all ``N`` minor states.
    ``minor_overrides`` replaces the control law of selected minor agents
    (used by deviation experiments); noise is untouched, so arms share it.
    """
    if N < 1:
        raise InvalidArgument("population needs at least one minor agent")
    if N > noise.agents:
        raise InvalidArgument(f"noise bundle holds {noise.agents} agents, need {N}")
    grid = noise.grid
    if check_lipschitz:
        xs = np.linspace(-np.pi, np.pi, 65)
        for ctrl in (u0, u):
            if ctrl.lipschitz is not None and estimate_lipschitz(ctrl, grid, xs) > ctrl.lipschitz * (1 + 1e-9) + 1e-12:
                raise InvalidArgument(f"control {ctrl.name!r} violates its Lipschitz bound")
    K = grid.steps
    dt = grid.dt
    z0 = noise.initial_states[scenario, 0][None].astype(float)
    x = noise.initial_states[scenario, 1 : N + 1].astype(float)
    dw0 = noise.major_increments[scenario]
    dw = noise.minor_increments[scenario, :N]
    major = np.empty((K + 1,) + z0.shape[1:])
    minors = np.empty((K + 1,) + x.shape)
    major[0], minors[0] = z0[0], x
    u0_rec, u_rec = [], []
    c0 = 0.0
    c = np.zeros(N)
    for k in range(K):
        t = grid.nodes[k]
        a0 = np.asarray(u0(t, z0), dtype=float).reshape(1, -1)
        a = _controls_for(t, x, u, minor_overrides)
        f0 = model.drift_major(t, z0, a0, x)
        s0 = model.diffusion_major(t, z0, x)
        f = model.drift_minor(t, x, a, z0[0], x)
        s = model.diffusion_minor(t, x, z0[0], x)
        _check_finite(t, x, f0, s0, f, s)
        if with_costs:
            c0 += float(np.asarray(model.cost_major(t, z0, a0, x)).reshape(-1)[0]) * dt
            c = c + np.asarray(model.cost_minor(t, x, a, z0[0], x), dtype=float).reshape(N) * dt
        z0 = z0 + f0 * dt + apply_diffusion(s0, dw0[k][None])
        x = x + f * dt + apply_diffusion(s, dw[:, k])
        major[k + 1], minors[k + 1] = z0[0], x
        u0_rec.append(a0[0])
        u_rec.append(a)
    return PopulationRun(
        grid, major, minors, np.array(u0_rec), np.array(u_rec), c0, c, noise.seed, scenario
    )


# ---------------------------------------------------------------------------
# McKean-Vlasov limit
# ---------------------------------------------------------------------------


@dataclass
class LimitRun:
    grid: TimeGrid
    major: np.ndarray  # (K+1, n), limit major path for the scenario
    cloud: np.ndarray  # (K+1, M, n), particles representing mu_t(omega)
    tracked: Optional[np.ndarray]  # (K+1, N, n), limit copies sharing agent noise
    iterations: int
    trace: list
    residual: float
    scenario: int = 0


def _flow_distance(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape[-1] == 1:
        return sup_marginal_w2(a, b)
    # identity coupling bounds W2 from above
    return float(np.sqrt(np.max(np.mean(np.sum((a - b) ** 2, axis=-1), axis=1))))


def _advance_major(model, u0, grid, z0, dw0, cloud):
    K = grid.steps
    z = np.asarray(z0, dtype=float)[None]
    out = np.empty((K + 1, z.shape[1]))
    out[0] = z[0]
    for k in range(K):
        t = grid.nodes[k]
        a0 = np.asarray(u0(t, z), dtype=float).reshape(1, -1)
        f0 = model.drift_major(t, z, a0, cloud[k])
        s0 = model.diffusion_major(t, z, cloud[k])
        _check_finite(t, z, f0, s0)
        z = z + f0 * grid.dt + apply_diffusion(s0, dw0[k][None])
        out[k + 1] = z[0]
    return out


def _advance_minors(model, u, grid, x0, dw, major, cloud):
    K = grid.steps
    x = np.asarray(x0, dtype=float)
    out = np.empty((K + 1,) + x.shape)
    out[0] = x
    for k in range(K):
        t = grid.nodes[k]
        a = np.asarray(u(t, x), dtype=float).reshape(x.shape[0], -1)
        f = model.drift_minor(t, x, a, major[k], cloud[k])
        s = model.diffusion_minor(t, x, major[k], cloud[k])
        _check_finite(t, x, f, s)
        x = x + f * grid.dt + apply_diffusion(s, dw[:, k])
        out[k + 1] = x
    return out


def simulate_mv_limit(
    model: ModelSpec,
    u0: FeedbackControl,
    u: FeedbackControl,
    noise: NoiseBundle,
    particles: int = 256,
    picard_tol: float = 1e-8,
    picard_max: int = 50,
    scenario: int = 0,
    minor_law: InitialLaw = InitialLaw(),
    track: Optional[int] = None,
    damping: float = 1.0,
) -> LimitRun:
    """Picard iteration on a conditional particle cloud for one major-noise scenario.

    Iterate ``k`` freezes the flow ``mu^k``, integrates the limit major path
    and ``particles`` conditionally independent minors against it, and takes
    their empirical flow as ``mu^{k+1}`` (blended with ``mu^k`` when
    ``damping < 1``).  The reported iteration count is the first ``k`` with
    ``d(mu^{k+1}, mu^k) < picard_tol``.  ``track`` limit minors are then
    driven by the first ``track`` agent streams of ``noise`` so they can be
    compared pathwise with a population run.
    """
    if particles < 2:
        raise InvalidArgument("need at least two cloud particles")
    if not 0 < damping <= 1:
        raise InvalidArgument("damping must lie in (0, 1]")
    grid = noise.grid
    K = grid.steps
    x0, incr = sample_cloud(grid, particles, noise.seed, scenario, minor_law, model.n, model.m)
    z0 = noise.initial_states[scenario, 0]
    dw0 = noise.major_increments[scenario]
    cloud = np.repeat(x0[None], K + 1, axis=0)
    trace = []
    for it in range(1, picard_max + 1):
        major = _advance_major(model, u0, grid, z0, dw0, cloud)
        new = _advance_minors(model, u, grid, x0, incr, major, cloud)
        if damping < 1:
            new = damping * new + (1 - damping) * cloud
        dist = _flow_distance(new, cloud)
        trace.append(dist)
        cloud = new
        if it > 1 and dist < picard_tol:
            break
    else:
        raise IterationLimit(f"Picard iteration did not reach {picard_tol:g} in {picard_max} sweeps", trace)
    iterations = len(trace) - 1
    major = _advance_major(model, u0, grid, z0, dw0, cloud)
    residual = _flow_distance(_advance_minors(model, u, grid, x0, incr, major, cloud), cloud)
    if residual >= max(picard_tol, 1e-300) and damping == 1:
        logger.warning("self-consistency residual %.3g above tolerance", residual)
    tracked = None
    if track:
        tracked = _advance_minors(
            model,
            u,
            grid,
            noise.initial_states[scenario, 1 : track + 1],
            noise.minor_increments[scenario, :track],
            major,
            cloud,
        )
    return LimitRun(grid, major, cloud, tracked, iterations, trace, residual, scenario)


# ---------------------------------------------------------------------------
# convergence experiment
# ---------------------------------------------------------------------------


@dataclass
class SlopeFit:
    slope: float
    intercept: float
    ci_low: float
    ci_high: float
    r_squared: float

    def to_dict(self):
        return dict(self.__dict__)


def fit_loglog(xs, ys, confidence: float = 0.95) -> SlopeFit:
    x = np.log(np.asarray(xs, dtype=float))
    y = np.log(np.asarray(ys, dtype=float))
    if x.size < 3:
        raise InvalidArgument("need at least three points for a slope with a CI")
    res = stats.linregress(x, y)
    tcrit = stats.t.ppf(0.5 + confidence / 2, x.size - 2)
    half = tcrit * res.stderr
    return SlopeFit(
        float(res.slope),
        float(res.intercept),
        float(res.slope - half),
        float(res.slope + half),
        float(res.rvalue**2),
    )


@dataclass
class ConvergenceReport:
    N_values: list
    errors: list
    stderrs: list
    major_errors: list
    minor_errors: list
    fit: Optional[SlopeFit]
    reps: int
    particles: int
    runtime: float
    picard_iterations: list = field(default_factory=list)

    def rows(self):
        return [
            {"N": n, "error": e, "stderr": s, "major_error": a, "minor_error": b}
            for n, e, s, a, b in zip(self.N_values, self.errors, self.stderrs, self.major_errors, self.minor_errors)
        ]

    def summary(self):
        return {
            "N": list(self.N_values),
            "errors": list(self.errors),
            "slope": None if self.fit is None else self.fit.to_dict(),
            "reps": self.reps,
            "particles": self.particles,
            "picard_iterations": list(self.picard_iterations),
        }

    def write(self, csv_path, json_path):
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["N", "error", "stderr", "major_error", "minor_error"])
            w.writeheader()
            for row in self.rows():
                w.writerow({k: (f"{v:.12g}" if isinstance(v, float) else v) for k, v in row.items()})
        with open(json_path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)


def convergence_experiment(
    model: ModelSpec,
    u0: FeedbackControl,
    u: FeedbackControl,
    N_list: Sequence[int],
    reps: int,
    seed: int,
    grid: TimeGrid,
    major_law: InitialLaw = InitialLaw(),
    minor_law: InitialLaw = InitialLaw(),
    particles: Optional[int] = None,
    picard_tol: float = 1e-8,
    picard_max: int = 50,
) -> ConvergenceReport:
    """Pathwise distance between population and limit on shared noise.

    For each rep one limit run is computed and reused across all ``N``; the
    error for ``N`` is ``sup_t`` of the rep-averaged absolute deviation,
    taking the larger of the major deviation and the agent-averaged minor
    deviation.
    """
    N_list = [int(n) for n in N_list]
    if len(N_list) < 4 or any(b <= a for a, b in zip(N_list, N_list[1:])):
        raise InvalidArgument("N_list must be strictly increasing with at least 4 entries")
    if reps < 1:
        raise InvalidArgument("reps must be positive")
    start = time.perf_counter()
    n_max = N_list[-1]
    M = particles or max(256, 16 * n_max)
    noise = sample_noise(grid, n_max, reps, seed, major_law, minor_law, model.n, model.m)
    major_dev = np.zeros((len(N_list), reps, grid.steps + 1))
    minor_dev = np.zeros((len(N_list), reps, grid.steps + 1))
    iters = []
    for r in range(reps):
        lim = simulate_mv_limit(
            model, u0, u, noise, M, picard_tol, picard_max, scenario=r, minor_law=minor_law, track=n_max
        )
        iters.append(lim.iterations)
        for j, N in enumerate(N_list):
            pop = simulate_population(model, u0, u, N, noise, scenario=r, with_costs=False)
            major_dev[j, r] = np.linalg.norm(pop.major - lim.major, axis=-1)
            minor_dev[j, r] = np.mean(np.linalg.norm(pop.minors - lim.tracked[:, :N], axis=-1), axis=1)
    maj = major_dev.mean(axis=1)  # (J, K+1)
    mnr = minor_dev.mean(axis=1)
    errors, stderrs, maj_e, mnr_e = [], [], [], []
    for j in range(len(N_list)):
        kj = int(np.argmax(np.maximum(maj[j], mnr[j])))
        use_major = maj[j, kj] >= mnr[j, kj]
        samples = (major_dev if use_major else minor_dev)[j, :, kj]
        errors.append(float(max(maj[j, kj], mnr[j, kj])))
        stderrs.append(float(samples.std(ddof=1) / np.sqrt(reps)) if reps > 1 else 0.0)
        maj_e.append(float(maj[j].max()))
        mnr_e.append(float(mnr[j].max()))
    fit = None
    if all(e > 0 for e in errors):
        fit = fit_loglog(N_list, errors)
    return ConvergenceReport(
        N_list, errors, stderrs, maj_e, mnr_e, fit, reps, M, time.perf_counter() - start, iters
    )


# ---------------------------------------------------------------------------
# bounded test model
# ---------------------------------------------------------------------------


def kuramoto_test_model(
    K: float = 1.0,
    kappa: float = 0.5,
    K0: float = 0.5,
    sigma: float = 0.5,
    sigma0: float = 0.3,
) -> ModelSpec:
    """Bounded-coefficient phase model with mean sine coupling.

    Minor drift ``u + K mean_j sin(y_j - x) + kappa sin(z0 - x)``, major drift
    ``u0 + K0 mean_j sin(y_j - z0)``.  The pairwise average is evaluated through
    the cloud's mean sine and cosine, which is the same direct sum rearranged.
    """

    def feats(particles):
        p = np.asarray(particles)[..., 0]
        return np.mean(np.sin(p)), np.mean(np.cos(p))

    def f0(t, z, u, particles):
        s, c = feats(particles)
        return u + K0 * (s * np.cos(z) - c * np.sin(z))

    def f(t, x, u, z0, particles):
        s, c = feats(particles)
        return u + K * (s * np.cos(x) - c * np.sin(x)) + kappa * np.sin(z0 - x)

    def cost0(t, z, u, particles):
        p = np.asarray(particles)[None, :, 0]
        return np.mean(np.sin(z - p) ** 2, axis=1) + np.sum(u**2, axis=-1)

    def cost(t, x, u, z0, particles):
        p = np.asarray(particles)[None, :, 0]
        return np.mean(np.sin(x - p) ** 2, axis=1) + np.sum(u**2, axis=-1)

    return ModelSpec(
        drift_major=f0,
        diffusion_major=lambda t, x, p: np.full((1, 1, 1), sigma0),
        drift_minor=f,
        diffusion_minor=lambda t, x, z0, p: np.full((1, 1, 1), sigma),
        cost_major=cost0,
        cost_minor=cost,
        control_major=ControlSet(-1.0, 1.0),
        control_minor=ControlSet(-1.0, 1.0),
        name="kuramoto-test",
    )


def sine_feedback(gain: float = 0.5, phase: float = 0.0) -> FeedbackControl:
    """``u(t, x) = -gain sin(x - phase)`` clamped to [-1, 1]."""
    return FeedbackControl(
        lambda t, x: -gain * np.sin(np.asarray(x, dtype=float) - phase),
        ControlSet(-1.0, 1.0),
        lipschitz=abs(gain),
        name=f"sine({gain:g})",
    )
