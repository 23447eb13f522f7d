"""Time grids, seeded noise, model coefficients and Euler-Maruyama integration.

Array conventions used throughout the package:

* states carry a trailing state axis of length ``n``; a batch of agents is
  ``(B, n)`` and a path over the grid is ``(steps + 1, ..., n)``;
* Brownian increments carry a trailing noise axis of length ``m``;
* coupling inputs are particle clouds ``(M, n)`` per grid node, so the
  average-coupling terms of the population dynamics are plain sums over
  particles.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Optional

import numpy as np

from .errors import InvalidArgument, NumericalBlowup

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class TimeGrid:
    T: float
    steps: int

    def __post_init__(self):
        if not np.isfinite(self.T) or self.T <= 0:
            raise InvalidArgument(f"horizon T must be positive, got {self.T}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise InvalidArgument(f"steps must be a positive integer, got {self.steps}")
        object.__setattr__(self, "steps", int(self.steps))
        object.__setattr__(self, "T", float(self.T))

    @property
    def dt(self) -> float:
        return self.T / self.steps

    @cached_property
    def nodes(self) -> np.ndarray:
        nodes = np.arange(self.steps + 1) * self.dt
        nodes[-1] = self.T
        return nodes

    def index(self, t: float) -> int:
        """Grid index of the last node at or before ``t``."""
        k = int(np.floor(t / self.dt + 1e-9))
        return min(max(k, 0), self.steps)

    def refine(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.T, self.steps * factor)

    def same_as(self, other: "TimeGrid") -> bool:
        return self.steps == other.steps and np.isclose(self.T, other.T, rtol=0, atol=1e-14)


def make_time_grid(T: float, steps: int) -> TimeGrid:
    return TimeGrid(T, steps)


# ---------------------------------------------------------------------------
# initial laws and noise
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InitialLaw:
    """Distribution of an initial state, i.i.d. across coordinates."""

    kind: str = "gaussian"
    mean: float = 0.0
    variance: float = 1.0
    low: float = 0.0
    high: float = TWO_PI
    kappa: float = 1.0

    def __post_init__(self):
        if self.kind not in ("gaussian", "uniform", "point", "vonmises"):
            raise InvalidArgument(f"unknown initial law {self.kind!r}")
        if self.kind == "gaussian" and self.variance < 0:
            raise InvalidArgument("initial variance must be non-negative")
        if self.kind == "uniform" and not self.high > self.low:
            raise InvalidArgument("uniform law needs high > low")

    @classmethod
    def gaussian(cls, mean=0.0, variance=1.0):
        return cls("gaussian", mean=mean, variance=variance)

    @classmethod
    def uniform(cls, low=0.0, high=TWO_PI):
        return cls("uniform", low=low, high=high)

    @classmethod
    def point(cls, value=0.0):
        return cls("point", mean=value, variance=0.0)

    @classmethod
    def vonmises(cls, mean=np.pi, kappa=1.0):
        return cls("vonmises", mean=mean, kappa=kappa)

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        if self.kind == "gaussian":
            return self.mean + np.sqrt(self.variance) * rng.standard_normal(size)
        if self.kind == "uniform":
            return rng.uniform(self.low, self.high, size)
        if self.kind == "point":
            return np.full(size, float(self.mean))
        return np.mod(rng.vonmises(self.mean, self.kappa, size), TWO_PI)

    def expectation(self) -> float:
        if self.kind == "uniform":
            return 0.5 * (self.low + self.high)
        if self.kind == "vonmises":
            # circular mean; samples live in [0, 2pi)
            return float(np.mod(self.mean, TWO_PI))
        return float(self.mean)


def _stream(seed: int, scenario: int, kind: int, index: int) -> np.random.Generator:
    # one counter-keyed stream per (scenario, kind, index); independent of how
    # many other streams are requested, so parallel order never matters
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(scenario), int(kind), int(index)))
    return np.random.default_rng(ss)


@dataclass(frozen=True)
class NoiseBundle:
    grid: TimeGrid
    major_increments: np.ndarray  # (S, K, m)
    minor_increments: np.ndarray  # (S, N, K, m)
    initial_states: np.ndarray  # (S, N + 1, n); index 0 is the major agent
    seed: int

    @property
    def scenarios(self) -> int:
        return self.major_increments.shape[0]

    @property
    def agents(self) -> int:
        return self.minor_increments.shape[1]

    def subset(self, agents: int) -> "NoiseBundle":
        """The first ``agents`` minor streams (prefix-stable by construction)."""
        if agents > self.agents:
            raise InvalidArgument(f"bundle holds {self.agents} agents, asked for {agents}")
        return NoiseBundle(
            self.grid,
            self.major_increments,
            self.minor_increments[:, :agents],
            self.initial_states[:, : agents + 1],
            self.seed,
        )

    def permuted(self, perm) -> "NoiseBundle":
        perm = np.asarray(perm)
        init = self.initial_states.copy()
        init[:, 1:] = self.initial_states[:, 1:][:, perm]
        return NoiseBundle(
            self.grid, self.major_increments, self.minor_increments[:, perm], init, self.seed
        )


def sample_noise(
    grid: TimeGrid,
    agents: int,
    scenarios: int,
    seed: int,
    major_law: InitialLaw = InitialLaw(),
    minor_law: InitialLaw = InitialLaw(),
    n: int = 1,
    m: int = 1,
) -> NoiseBundle:
    if agents < 1 or scenarios < 1:
        raise InvalidArgument("agents and scenarios must be at least 1")
    K = grid.steps
    sq = np.sqrt(grid.dt)
    major = np.empty((scenarios, K, m))
    minor = np.empty((scenarios, agents, K, m))
    init = np.empty((scenarios, agents + 1, n))
    for s in range(scenarios):
        for a in range(agents + 1):
            rng = _stream(seed, s, 0, a)
            law = major_law if a == 0 else minor_law
            init[s, a] = law.sample(rng, n)
            incr = rng.standard_normal((K, m)) * sq
            if a == 0:
                major[s] = incr
            else:
                minor[s, a - 1] = incr
    return NoiseBundle(grid, major, minor, init, int(seed))


def sample_cloud(
    grid: TimeGrid, particles: int, seed: int, scenario: int, law: InitialLaw, n: int = 1, m: int = 1
):
    """Initial states and increments for an auxiliary particle cloud.

    Cloud particles are exchangeable, so a single stream per scenario is used;
    the stream key is disjoint from the agent streams of :func:`sample_noise`.
    """
    rng = _stream(seed, scenario, 1, 0)
    x0 = law.sample(rng, (particles, n))
    incr = rng.standard_normal((particles, grid.steps, m)) * np.sqrt(grid.dt)
    return x0, incr


# ---------------------------------------------------------------------------
# model specification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ControlSet:
    lower: float = -1e6
    upper: float = 1e6
    warn: bool = False

    def __post_init__(self):
        if not np.all(np.asarray(self.lower) <= np.asarray(self.upper)):
            raise InvalidArgument("control bounds must satisfy lower <= upper")

    def clamp(self, u):
        out = np.clip(u, self.lower, self.upper)
        if self.warn and np.any(out != u):
            logger.warning("control clamp active at bounds [%s, %s]", self.lower, self.upper)
        return out


def _zero_cost(*args):
    return np.zeros(np.shape(args[1])[:-1])


@dataclass(frozen=True)
class ModelSpec:
    """Coefficient functions of the major-minor game.

    Coupled coefficients receive the whole particle cloud and return the
    averaged value; :func:`pairwise_mean` turns a pairwise kernel into that
    form by direct summation.  Signatures (``x`` is ``(B, n)``)::

        drift_major(t, x, u, particles)           -> (B, n)
        diffusion_major(t, x, particles)          -> (B, n, m) or broadcastable
        drift_minor(t, x, u, z0, particles)       -> (B, n)
        diffusion_minor(t, x, z0, particles)      -> (B, n, m) or broadcastable
        cost_major(t, x, u, particles)            -> (B,)
        cost_minor(t, x, u, z0, particles)        -> (B,)
    """

    drift_major: Callable
    diffusion_major: Callable
    drift_minor: Callable
    diffusion_minor: Callable
    cost_major: Callable = _zero_cost
    cost_minor: Callable = _zero_cost
    control_major: ControlSet = ControlSet()
    control_minor: ControlSet = ControlSet()
    n: int = 1
    m: int = 1
    hamiltonian_minimizer_major: Optional[Callable] = None
    hamiltonian_minimizer_minor: Optional[Callable] = None
    name: str = "model"
    couples_to_measure: bool = True


def pairwise_mean(g: Callable) -> Callable:
    """Average a pairwise kernel ``g(..., y)`` over the particle cloud.

    Batched arguments (2-d arrays) get a particle axis inserted; the result is
    averaged over that axis.
    """

    def averaged(t, *args):
        *head, particles = args
        expanded = [a[:, None] if isinstance(a, np.ndarray) and a.ndim == 2 else a for a in head]
        vals = g(t, *expanded, np.asarray(particles)[None, :, :])
        return np.mean(vals, axis=1)

    return averaged


def constant_diffusion(scale: float, n: int = 1, m: int = 1) -> Callable:
    mat = np.eye(n, m) * scale

    def diffusion(t, x, *rest):
        return mat

    return diffusion


def apply_diffusion(sigma, dw: np.ndarray) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim == 0:
        return sigma * dw
    return np.einsum("...nm,...m->...n", sigma, dw)


# ---------------------------------------------------------------------------
# controls and trajectories
# ---------------------------------------------------------------------------


@dataclass
class Trajectory:
    grid: TimeGrid
    states: np.ndarray
    controls: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.states.shape[0] != self.grid.steps + 1:
            raise InvalidArgument("trajectory length does not match the grid")
        if self.controls is not None and self.controls.shape[0] != self.grid.steps:
            raise InvalidArgument("control record length does not match the grid")


class FeedbackControl:
    """Clamped feedback law ``u(t, x)``.

    Either wraps an arbitrary rule or interpolates a table given on a time x
    state grid (see :meth:`from_table`).
    """

    def __init__(self, rule: Callable, bounds: ControlSet = ControlSet(), lipschitz=None, name=""):
        self.rule = rule
        self.bounds = bounds
        self.lipschitz = lipschitz
        self.name = name

    def __call__(self, t, x):
        return self.bounds.clamp(self.rule(t, x))

    @classmethod
    def zero(cls, bounds: ControlSet = ControlSet()):
        return cls(lambda t, x: np.zeros_like(np.asarray(x, dtype=float)), bounds, 0.0, "zero")

    @classmethod
    def from_table(
        cls,
        grid: TimeGrid,
        xs: np.ndarray,
        values: np.ndarray,
        bounds: ControlSet = ControlSet(),
        period: Optional[float] = TWO_PI,
        name="table",
    ):
        """Piecewise-constant in time, piecewise-linear in a scalar state.

        ``values[k]`` applies on ``[t_k, t_{k+1})``; ``xs`` are the (uniform)
        abscissae, wrapped with ``period`` when given.
        """
        values = np.asarray(values, dtype=float)
        xs = np.asarray(xs, dtype=float)
        if values.shape[-1] != xs.size:
            raise InvalidArgument("table values and abscissae disagree")
        h = xs[1] - xs[0]
        x_first = xs[0]
        cells = xs.size
        lip = float(np.max(np.abs(np.diff(values, axis=-1)))) / h if cells > 1 else 0.0
        if period is not None:
            lip = max(lip, float(np.max(np.abs(values[..., 0] - values[..., -1]))) / h)
        nrows = values.shape[0]

        def rule(t, x):
            k = min(grid.index(t), nrows - 1)
            row = values[k]
            xv = np.asarray(x, dtype=float)
            s = (xv - x_first) / h
            if period is not None:
                s = np.mod(s, cells)
                i0 = np.floor(s).astype(int)
                w = s - i0
                i0 = np.mod(i0, cells)
                i1 = np.mod(i0 + 1, cells)
            else:
                s = np.clip(s, 0, cells - 1)
                i0 = np.minimum(np.floor(s).astype(int), cells - 2)
                w = s - i0
                i1 = i0 + 1
            return (1 - w) * row[i0] + w * row[i1]

        return cls(rule, bounds, lip, name)

    def shifted(self, offset: float, name=None):
        base = self
        return FeedbackControl(
            lambda t, x: base.rule(t, x) + offset, self.bounds, self.lipschitz, name or f"{self.name}+{offset:g}"
        )

    def scaled(self, factor: float, name=None):
        base = self
        lip = None if self.lipschitz is None else self.lipschitz * abs(factor)
        return FeedbackControl(
            lambda t, x: base.rule(t, x) * factor, self.bounds, lip, name or f"{self.name}*{factor:g}"
        )


def estimate_lipschitz(control: FeedbackControl, grid: TimeGrid, xs: np.ndarray) -> float:
    """Largest difference quotient in x of ``control`` over a sample grid."""
    xs = np.sort(np.asarray(xs, dtype=float))
    worst = 0.0
    for t in grid.nodes[:-1]:
        u = np.asarray(control(t, xs[:, None]), dtype=float).reshape(xs.size, -1)
        q = np.abs(np.diff(u, axis=0)) / np.diff(xs)[:, None]
        worst = max(worst, float(np.max(q)))
    return worst


# ---------------------------------------------------------------------------
# integration and costs
# ---------------------------------------------------------------------------


def _as_batch(x0, n):
    x = np.asarray(x0, dtype=float)
    single = x.ndim == 1
    x = x.reshape(-1, n)
    return x, single


def _node(inputs, k):
    if inputs is None:
        return None
    return inputs[k]


def integrate_sde(
    role: str,
    model: ModelSpec,
    control: FeedbackControl,
    x0,
    increments: np.ndarray,
    grid: TimeGrid,
    major_path: Optional[np.ndarray] = None,
    particles: Optional[np.ndarray] = None,
) -> Trajectory:
    """Euler-Maruyama path of one agent (or an independent batch).

    ``major_path`` is ``(K+1, n)`` and ``particles`` is ``(K+1, M, n)``; both
    are frozen coupling inputs evaluated at the left node of each step.
    """
    if role not in ("major", "minor"):
        raise InvalidArgument(f"role must be 'major' or 'minor', got {role!r}")
    K = grid.steps
    x, single = _as_batch(x0, model.n)
    dw = np.asarray(increments, dtype=float)
    if single:
        dw = dw[None]
    if dw.shape[-2] != K:
        raise InvalidArgument("increments do not match the grid")
    for name, arr in (("major_path", major_path), ("particles", particles)):
        if arr is not None and len(arr) != K + 1:
            raise InvalidArgument(f"{name} must be defined on every grid node")
    if role == "minor" and major_path is None:
        raise InvalidArgument("minor integration needs the major path")
    if particles is None:
        particles = np.zeros((K + 1, 1, model.n))
    states = np.empty((K + 1,) + x.shape)
    states[0] = x
    controls = []
    for k in range(K):
        t = grid.nodes[k]
        u = control(t, x)
        if role == "major":
            drift = model.drift_major(t, x, u, particles[k])
            diff = model.diffusion_major(t, x, particles[k])
        else:
            drift = model.drift_minor(t, x, u, major_path[k], particles[k])
            diff = model.diffusion_minor(t, x, major_path[k], particles[k])
        if not (np.all(np.isfinite(drift)) and np.all(np.isfinite(diff))):
            raise NumericalBlowup(f"non-finite coefficient at t={t:g}", t=t, x=x.copy())
        x = x + drift * grid.dt + apply_diffusion(diff, dw[:, k])
        states[k + 1] = x
        controls.append(np.asarray(u, dtype=float))
    controls = np.stack(controls)
    if single:
        states, controls = states[:, 0], controls[:, 0]
    return Trajectory(grid, states, controls)


def evaluate_cost(
    role: str,
    model: ModelSpec,
    trajectory: Trajectory,
    controls: np.ndarray,
    grid: TimeGrid,
    major_path: Optional[np.ndarray] = None,
    particles: Optional[np.ndarray] = None,
):
    """Left-endpoint Riemann sum of the running cost over ``[0, T]``."""
    if not trajectory.grid.same_as(grid):
        raise InvalidArgument("trajectory and cost grid differ")
    K = grid.steps
    controls = np.asarray(controls, dtype=float)
    if controls.shape[0] != K:
        raise InvalidArgument("control record does not match the grid")
    for name, arr in (("major_path", major_path), ("particles", particles)):
        if arr is not None and len(arr) != K + 1:
            raise InvalidArgument(f"{name} does not match the grid")
    states = trajectory.states
    single = states.ndim == 2
    total = 0.0
    for k in range(K):
        t = grid.nodes[k]
        x = states[k][None] if single else states[k]
        u = controls[k][None] if single else controls[k]
        P = None if particles is None else particles[k]
        if role == "major":
            c = model.cost_major(t, x, u, P)
        else:
            c = model.cost_minor(t, x, u, _node(major_path, k), P)
        total = total + np.asarray(c, dtype=float)
    total = total * grid.dt
    return float(total[0]) if single else total
