"""Deviation experiments for the epsilon-Nash property and gain-constant estimates."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .core import ControlSet, FeedbackControl, InitialLaw, ModelSpec, TimeGrid, sample_noise
from .errors import InvalidArgument, StructuralError
from .hjbfpk import (
    OscillatorParams,
    PeriodicGrid,
    W0Lattice,
    _hjb,
    blend_phase,
    coupling_major,
    flow_distance,
    minor_coupling_flow,
    mfg_fixed_point,
    solve_fpk_forward,
)
from .mvlimit import PopulationRun, fit_loglog, simulate_population

logger = logging.getLogger(__name__)


def epsilon_n(samples, reference_mean) -> float:
    """``|mean x.x - 2 z.mean x + z.z|^{1/2}`` for initial samples ``x`` and reference ``z``.

    This is the root mean square distance of the samples from ``z``; for
    i.i.d. samples it settles at the law's spread around ``z`` rather than 0.
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 1:
        raise InvalidArgument("need at least one sample")
    z = np.asarray(reference_mean, dtype=float).reshape(-1)
    val = np.mean(np.sum(x * x, axis=1)) - 2 * z @ x.mean(axis=0) + z @ z
    return float(np.sqrt(abs(val)))


# ---------------------------------------------------------------------------
# oscillator population model
# ---------------------------------------------------------------------------


def oscillator_model(params: OscillatorParams) -> ModelSpec:
    """Finite-population oscillator game; pairwise costs summed via phase features."""
    lam, r = params.lam, params.r

    def major_cost(t, z, u, particles):
        y = np.asarray(particles)[:, 0]
        c = np.mean(np.exp(-2j * y))
        return 0.5 - 0.5 * np.real(np.exp(2j * z[:, 0]) * c) + r * np.sum(u**2, axis=-1)

    def minor_cost(t, x, u, z0, particles):
        y = np.asarray(particles)[:, 0]
        b = blend_phase(z0[0], y, lam)
        c = np.mean(np.exp(-2j * b))
        return 0.5 - 0.5 * np.real(np.exp(2j * x[:, 0]) * c) + r * np.sum(u**2, axis=-1)

    return ModelSpec(
        drift_major=lambda t, z, u, p: u,
        diffusion_major=lambda t, z, p: np.full((1, 1, 1), params.sigma0),
        drift_minor=lambda t, x, u, z0, p: u,
        diffusion_minor=lambda t, x, z0, p: np.full((1, 1, 1), params.sigma),
        cost_major=major_cost,
        cost_minor=minor_cost,
        name="oscillator",
    )


def satisfies_a13(model: ModelSpec, samples: int = 16, seed: int = 0) -> bool:
    """Minor drift and diffusion do not react to the major state (sampled check)."""
    rng = np.random.default_rng(seed)
    n = model.n
    for _ in range(samples):
        t = rng.uniform()
        x = rng.normal(size=(3, n))
        u = rng.normal(size=(3, n))
        cloud = rng.normal(size=(5, n))
        za, zb = rng.normal(size=n), rng.normal(size=n)
        if not np.allclose(model.drift_minor(t, x, u, za, cloud), model.drift_minor(t, x, u, zb, cloud), atol=1e-12):
            return False
        if not np.allclose(
            np.broadcast_to(model.diffusion_minor(t, x, za, cloud), (3, n, model.m)),
            np.broadcast_to(model.diffusion_minor(t, x, zb, cloud), (3, n, model.m)),
            atol=1e-12,
        ):
            return False
    return True


# ---------------------------------------------------------------------------
# deviations
# ---------------------------------------------------------------------------


@dataclass
class DeviationFamily:
    """Finite set of unilateral deviations of one agent.

    ``kind`` is ``offset`` (add a constant), ``gain`` (scale the law) or
    ``best_response`` (re-solve the agent's control problem against the
    realized empirical field of the equilibrium run; ``parameters`` are
    ignored and ``responder`` builds the law).  The identity member is
    always included.
    """

    kind: str
    parameters: list = field(default_factory=list)
    target: str = "minor"
    agent: int = 0
    responder: Optional[Callable] = None

    def __post_init__(self):
        if self.kind not in ("offset", "gain", "best_response", "identity"):
            raise InvalidArgument(f"unknown deviation kind {self.kind!r}")
        if self.target not in ("major", "minor"):
            raise InvalidArgument("target must be 'major' or 'minor'")
        if self.kind == "best_response" and self.responder is None:
            raise InvalidArgument("a best-response family needs a responder")

    def members(self):
        """(label, builder) pairs; builders map (base law, equilibrium run) to a law."""
        out = [("identity", lambda base, run: base)]
        if self.kind == "offset":
            out += [(f"offset{c:+g}", lambda base, run, c=c: base.shifted(c)) for c in self.parameters if c != 0]
        elif self.kind == "gain":
            out += [(f"gain{g:g}", lambda base, run, g=g: base.scaled(g)) for g in self.parameters if g != 1]
        elif self.kind == "best_response":
            out.append(("best_response", lambda base, run: self.responder(run, self.agent, self.target)))
        return out


@dataclass
class NashReport:
    N_values: list
    benefits: list
    stderrs: list
    best_member: list
    epsilon: list
    member_means: dict
    fit: Optional[object]
    fit_points: list
    reps: int
    in_scope: bool
    note: str = "benefits lower-bound the best unilateral improvement over the listed family"
    runtime: float = 0.0

    def rows(self):
        return [
            {"N": n, "benefit": b, "stderr": s, "epsilon_N": e, "member": m}
            for n, b, s, e, m in zip(self.N_values, self.benefits, self.stderrs, self.epsilon, self.best_member)
        ]

    def summary(self):
        return {
            "N": self.N_values,
            "benefit": self.benefits,
            "stderr": self.stderrs,
            "epsilon_N": self.epsilon,
            "best_member": self.best_member,
            "fit": None if self.fit is None else self.fit.to_dict(),
            "fit_points": self.fit_points,
            "reps": self.reps,
            "in_scope": self.in_scope,
            "note": self.note,
        }

    def write(self, csv_path, json_path):
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["N", "benefit", "stderr", "epsilon_N", "member"])
            w.writeheader()
            for row in self.rows():
                w.writerow({k: (f"{v:.12g}" if isinstance(v, float) else v) for k, v in row.items()})
        with open(json_path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)


def epsilon_nash_experiment(
    model: ModelSpec,
    u0: FeedbackControl,
    u: FeedbackControl,
    family: DeviationFamily,
    N_list: Sequence[int],
    reps: int,
    seed: int,
    grid: TimeGrid,
    major_law: InitialLaw = InitialLaw(),
    minor_law: InitialLaw = InitialLaw(),
) -> NashReport:
    """Paired-seed benefit of unilateral deviations as the population grows.

    For every ``N`` and rep the equilibrium run and each deviation run share
    one noise bundle; the benefit of a member is the deviating agent's cost
    reduction.  ``b(N)`` is the largest rep-averaged benefit over members, so
    it is never negative (the identity contributes exactly 0).
    """
    start = time.perf_counter()
    N_list = [int(n) for n in N_list]
    if any(n < 1 for n in N_list):
        raise InvalidArgument("population sizes must be positive")
    in_scope = satisfies_a13(model)
    if not in_scope:
        if family.target == "major":
            raise StructuralError("minor dynamics depend on the major state; major deviations are not covered")
        logger.warning("minor dynamics depend on the major state: the epsilon-Nash bound does not cover this case")
    members = family.members()
    n_max = max(N_list)
    noise = sample_noise(grid, n_max, reps, seed, major_law, minor_law, model.n, model.m)
    ref = np.full(model.n, minor_law.expectation())
    benefits, stderrs, best, eps = [], [], [], []
    member_means = {label: [] for label, _ in members}
    for N in N_list:
        gains = np.zeros((len(members), reps))
        eps_vals = []
        for r in range(reps):
            run = simulate_population(model, u0, u, N, noise, scenario=r)
            eps_vals.append(epsilon_n(noise.initial_states[r, 1 : N + 1], ref))
            for j, (label, build) in enumerate(members):
                if family.target == "minor":
                    dev = build(u, run)
                    alt = simulate_population(model, u0, u, N, noise, scenario=r, minor_overrides={family.agent: dev})
                    gains[j, r] = run.minor_costs[family.agent] - alt.minor_costs[family.agent]
                else:
                    dev = build(u0, run)
                    alt = simulate_population(model, dev, u, N, noise, scenario=r)
                    gains[j, r] = run.major_cost - alt.major_cost
        means = gains.mean(axis=1)
        j = int(np.argmax(means))
        for (label, _), mval in zip(members, means):
            member_means[label].append(float(mval))
        benefits.append(float(means[j]))
        stderrs.append(float(gains[j].std(ddof=1) / np.sqrt(reps)) if reps > 1 else 0.0)
        best.append(members[j][0])
        eps.append(float(np.mean(eps_vals)))
    pts = [i for i, (b, s) in enumerate(zip(benefits, stderrs)) if b > 2 * s and b > 0]
    # three noise-clearing sizes spanning a decade are enough for a slope with a CI
    spans = len(pts) >= 3 and N_list[pts[-1]] >= 10 * N_list[pts[0]]
    fit = fit_loglog([N_list[i] for i in pts], [benefits[i] for i in pts]) if spans else None
    return NashReport(
        N_list,
        benefits,
        stderrs,
        best,
        eps,
        member_means,
        fit,
        [N_list[i] for i in pts],
        reps,
        in_scope,
        runtime=time.perf_counter() - start,
    )


# ---------------------------------------------------------------------------
# oscillator equilibrium and frozen-field best response
# ---------------------------------------------------------------------------


@dataclass
class OscillatorEquilibrium:
    params: OscillatorParams
    grid: PeriodicGrid
    tgrid: TimeGrid
    u0: FeedbackControl
    u: FeedbackControl
    result: object
    major_law: InitialLaw
    minor_law: InitialLaw


def oscillator_equilibrium(
    params: OscillatorParams,
    grid: PeriodicGrid,
    tgrid: TimeGrid,
    theta0: float = np.pi / 2,
    minor_law: InitialLaw = InitialLaw.vonmises(np.pi, 1.0),
    damping: float = 0.5,
    tol: float = 1e-8,
    max_iter: int = 100,
) -> OscillatorEquilibrium:
    """Point-major equilibrium (requires ``sigma0 = 0``) with tabulated feedback laws."""
    res = mfg_fixed_point(
        params, grid, tgrid, damping, tol, max_iter, minor_init=minor_law, major_point=theta0
    )
    if not res.converged:
        logger.warning("oscillator equilibrium not converged; using the last iterate")
    u0 = FeedbackControl.from_table(tgrid, grid.faces, res.major_value.u[:, 0], name="u0-osc")
    u = FeedbackControl.from_table(tgrid, grid.faces, res.minor_value.u[:, 0], name="u-osc")
    return OscillatorEquilibrium(params, grid, tgrid, u0, u, res, InitialLaw.point(theta0), minor_law)


def frozen_field_responder(params: OscillatorParams, grid: PeriodicGrid, tgrid: TimeGrid):
    """Best response against the realized empirical coupling of an equilibrium run.

    The agent re-solves its HJB with the running cost evaluated from the
    realized population (self-term included) and the realized major path.
    Knowing that realization in advance is anticipative, so the resulting
    benefit can only overstate what a non-anticipative deviation achieves.
    """
    lattice = W0Lattice(tgrid.steps, 0, 0.0, tgrid.dt)
    x = grid.x

    def respond(run: PopulationRun, agent: int, target: str):
        K = tgrid.steps
        m = np.empty((K + 1, 1, grid.cells))
        for k in range(K + 1):
            y = run.minors[k, :, 0]
            if target == "minor":
                b = blend_phase(run.major[k, 0], y, params.lam)
            else:
                b = y
            c = np.mean(np.exp(-2j * b))
            m[k, 0] = 0.5 - 0.5 * np.real(np.exp(2j * x) * c)
        vf = _hjb(m, params, tgrid, grid, lattice, target)
        return FeedbackControl.from_table(tgrid, grid.faces, vf.u[:, 0], name="frozen-br")

    return respond


# ---------------------------------------------------------------------------
# gain constants
# ---------------------------------------------------------------------------

PRODUCTS = ("c2*c5", "c2*c6*c0", "c2*c6*c1", "c3*c1", "c3*c0*c4")


@dataclass
class GainEstimate:
    ratios: dict  # name -> list of ratios per perturbation size
    constants: dict  # name -> max ratio
    sizes: list
    products: dict
    product: float
    flagged: list = field(default_factory=list)
    model: str = ""
    mean_constants: dict = field(default_factory=dict)
    distances: dict = field(default_factory=dict)  # name -> output distance per size

    def summary(self):
        return {
            "model": self.model,
            "sizes": self.sizes,
            "ratios": self.ratios,
            "constants": self.constants,
            "mean_constants": self.mean_constants,
            "products": self.products,
            "product": self.product,
            "flagged": self.flagged,
            "distances": self.distances,
        }


class _Recorder:
    """Output distances for every size; ratios only where the input moved."""

    def __init__(self):
        self.ratios = {f"c{i}": [] for i in range(7)}
        self.distances = {f"c{i}": [] for i in range(7)}

    def __call__(self, name, out, inp):
        self.distances[name].append(float(out))
        if inp > 0:
            self.ratios[name].append(float(out) / inp)


def _finish(rec, sizes, model, flagged):
    ratios = rec.ratios
    const = {k: float(max(v)) if v else 0.0 for k, v in ratios.items()}
    mean = {k: float(np.mean(v)) if v else 0.0 for k, v in ratios.items()}
    prods = {}
    for expr in PRODUCTS:
        val = 1.0
        for name in expr.split("*"):
            val *= const[name]
        prods[expr] = val
    return GainEstimate(ratios, const, list(sizes), prods, max(prods.values()), flagged, model, mean, rec.distances)


def _oscillator_gains(params, grid, tgrid, sizes, base=None, theta0=None):
    """Finite-perturbation Lipschitz ratios of the oscillator solution maps.

    Control inputs are perturbed by ``eps cos(x)`` (sup distance ``eps``);
    measure flows by mixing with the uniform law (W1 distance measured).
    Output controls are compared in sup norm, output flows in sup-over-time
    circular W1.  A major point path is compared by its sup deviation.
    """
    lattice = W0Lattice(tgrid.steps, 0, 0.0, tgrid.dt)
    if base is None:
        base = mfg_fixed_point(params, grid, tgrid, tol=1e-9, max_iter=200, major_point=theta0)
    mu = base.minor_density.p
    p_minor = mu[0, 0]
    point = base.major_path is not None
    p_major = None if point else base.major_density.p[0, 0]
    uni = np.full_like(mu, 1.0 / (2 * np.pi))
    bump = np.cos(grid.faces)[None, None, :]

    def major_law(u0tab):
        if point:
            from .hjbfpk import integrate_point

            return integrate_point(u0tab, theta0, grid, tgrid)
        return solve_fpk_forward(u0tab, params, p_major, grid, tgrid, lattice, "major").p

    def law_distance(a, b):
        if point:
            return float(np.max(np.abs(a - b)))
        return flow_distance(a, b, grid, lattice)

    def u0_of(flow):
        return _hjb(coupling_major(flow, grid), params, tgrid, grid, lattice, "major").u

    def u_of(flow, mlaw):
        dens = None if point else type(base.minor_density)(mlaw, tgrid, grid, lattice)
        path = mlaw if point else None
        m = minor_coupling_flow(dens, path, flow, params, grid, lattice)
        return _hjb(m, params, tgrid, grid, lattice, "minor").u

    u0_base = u0_of(mu)
    mu0_base = major_law(u0_base)
    u_base = u_of(mu, mu0_base)
    # the fixed point is only tol-accurate, so outputs compare against the
    # unperturbed image rather than the stored flow
    p_base = solve_fpk_forward(u_base, params, p_minor, grid, tgrid, lattice, "minor").p
    rec = _Recorder()
    flagged = []
    for eps in sizes:
        mu_e = (1 - eps) * mu + eps * uni
        d_mu = flow_distance(mu_e, mu, grid, lattice)
        # c0: u0 -> mu0
        rec("c0", law_distance(major_law(u0_base + eps * bump), mu0_base), eps)
        # c1, c3: the phase dynamics are driven by the control alone, so the
        # state-law maps ignore the other population's law
        rec("c1", 0.0, d_mu)
        # c2: u -> mu
        p_new = solve_fpk_forward(u_base + eps * bump, params, p_minor, grid, tgrid, lattice, "minor").p
        rec("c2", flow_distance(p_new, p_base, grid, lattice), eps)
        rec("c3", 0.0, eps)
        # c4: mu -> u0
        rec("c4", np.max(np.abs(u0_of(mu_e) - u0_base)), d_mu)
        # c5: mu -> u
        rec("c5", np.max(np.abs(u_of(mu_e, mu0_base) - u_base)), d_mu)
        # c6: mu0 -> u
        if point:
            ref = mu0_base + eps
            d0 = eps
        else:
            ref = (1 - eps) * mu0_base + eps * uni
            d0 = flow_distance(ref, mu0_base, grid, lattice)
        rec("c6", np.max(np.abs(u_of(mu, ref) - u_base)), d0)
    return _finish(rec, sizes, "oscillator", flagged)


def _lqg_gains(params, tgrid, sizes):
    """Ratios of the linearized LQG maps along translation perturbations.

    A translation of a Dirac or of a whole cloud by ``delta(t)`` moves the
    path-space Wasserstein distance by ``min(sup|delta|, 1)``; control
    perturbations are measured in sup norm.  Each map is the deterministic
    linear ODE satisfied by the perturbation.
    """
    from .lqg import solve_lqg_odes, _solve

    ric, _ = solve_lqg_odes(params, tgrid)
    K, dt, n = tgrid.steps, tgrid.dt, params.n
    K0 = _solve(params.R0, params.B0.T)
    K1 = _solve(params.R, params.B.T)
    A0c, Ac = ric.closed0, ric.closed

    def backward(Acl, forcing):
        s = np.zeros((K + 1, n))
        for k in range(K - 1, -1, -1):
            s[k] = s[k + 1] + dt * (Acl[k + 1].T @ s[k + 1] + forcing[k + 1])
        return s

    def forward(Acl, forcing):
        z = np.zeros((K + 1, n))
        for k in range(K):
            z[k + 1] = z[k] + dt * (Acl[k] @ z[k] + forcing[k])
        return z

    def dist(path):
        return min(float(np.max(np.linalg.norm(path, axis=-1))), 1.0)

    def sup(path):
        return float(np.max(np.linalg.norm(path, axis=-1)))

    C0 = ric.Pi0 @ params.F0 - params.Q0 @ params.H0
    CF = ric.Pi @ params.F - params.Q @ params.Hhat
    CG = ric.Pi @ params.G - params.Q @ params.H
    ones = np.ones((K + 1, n))
    rec = _Recorder()
    for eps in sizes:
        d = eps * ones
        # c4: zbar -> u0 through s0
        ds0 = backward(A0c, np.einsum("kij,kj->ki", C0, d))
        rec("c4", sup(ds0 @ K0.T), dist(d))
        # c0: u0 offset -> z0
        du = np.full((K + 1, params.k), eps)
        rec("c0", dist(forward(A0c, du @ params.B0.T)), eps)
        # c1: zbar -> z0
        rec("c1", dist(forward(A0c, d @ params.F0.T)), dist(d))
        # c5, c6: zbar, z0 -> u through s
        ds = backward(Ac, np.einsum("kij,kj->ki", CF, d))
        rec("c5", sup(ds @ K1.T), dist(d))
        ds = backward(Ac, np.einsum("kij,kj->ki", CG, d))
        rec("c6", sup(ds @ K1.T), dist(d))
        # c2: u offset -> zbar ; c3: z0 -> zbar
        Acl = Ac + params.F[None]
        rec("c2", dist(forward(Acl, du @ params.B.T)), eps)
        rec("c3", dist(forward(Acl, d @ params.G.T)), dist(d))
    return _finish(rec, sizes, "lqg", [])


def estimate_gain_constants(model: str, sizes: Sequence[float], **kw) -> GainEstimate:
    """Lipschitz ratios ``c0..c6`` of the solution maps and the gain-condition products.

    ``model`` is ``"oscillator"`` (keywords ``params``, ``grid``, ``tgrid``,
    optional ``base`` fixed point and ``theta0`` for a point major) or
    ``"lqg"`` (keywords ``params``, ``tgrid``).
    """
    sizes = [float(s) for s in sizes]
    if model == "oscillator":
        return _oscillator_gains(kw["params"], kw["grid"], kw["tgrid"], sizes, kw.get("base"), kw.get("theta0"))
    if model == "lqg":
        return _lqg_gains(kw["params"], kw["tgrid"], sizes)
    raise InvalidArgument(f"unknown model {model!r}")
