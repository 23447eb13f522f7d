"""Grid solver for the major-minor oscillator game.

State space is the circle ``[0, 2pi)`` with ``cells`` nodes ``x_j = j h``.
Densities are nodal values with ``sum_j p_j h = 1``.  Feedback controls live
on the faces ``x_{j+1/2}`` and are stored per time interval.

Major noise is represented in two ways.  In deterministic mode the major
density carries its own diffusion and every field has a single node.  In
lattice mode a recombining binomial tree of ``levels`` branch points carries
``sigma0 w0``; fields have one slice per tree node, the major state shifts by
``+-sigma0 sqrt(Delta)`` at each branch and the value function is averaged
over the two children.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import special, stats

from .core import TWO_PI, InitialLaw, TimeGrid
from .errors import InvalidArgument, SchemeError, StepSizeError

logger = logging.getLogger(__name__)

MASS_TOL = 1e-10
NEG_TOL = 1e-12


@dataclass(frozen=True)
class PeriodicGrid:
    cells: int = 128

    def __post_init__(self):
        if int(self.cells) != self.cells or self.cells < 16:
            raise InvalidArgument("a periodic grid needs at least 16 cells")

    @property
    def h(self) -> float:
        return TWO_PI / self.cells

    @property
    def x(self) -> np.ndarray:
        return np.arange(self.cells) * self.h

    @property
    def faces(self) -> np.ndarray:
        return (np.arange(self.cells) + 0.5) * self.h

    def wrap_index(self, i):
        return np.mod(i, self.cells)

    def laplacian_symbol(self) -> np.ndarray:
        k = np.arange(self.cells // 2 + 1)
        return (2.0 * np.cos(TWO_PI * k / self.cells) - 2.0) / self.h**2

    def density(self, law: InitialLaw) -> np.ndarray:
        """Nodal density of an initial law (point laws are split linearly)."""
        x = self.x
        if law.kind == "uniform" and np.isclose(law.high - law.low, TWO_PI):
            p = np.full(self.cells, 1.0 / TWO_PI)
        elif law.kind == "vonmises":
            p = stats.vonmises.pdf(x, law.kappa, loc=law.mean)
        elif law.kind == "point":
            p = splat(self, np.array([law.mean]), np.array([1.0]))
        elif law.kind == "gaussian":
            d = np.angle(np.exp(1j * (x - law.mean)))
            p = np.exp(-0.5 * d**2 / max(law.variance, 1e-300))
        else:
            p = ((x >= law.low) & (x < law.high)).astype(float)
        return p / (p.sum() * self.h)


def splat(grid: PeriodicGrid, positions, masses) -> np.ndarray:
    """Linear assignment of point masses to the two nearest nodes (as density)."""
    s = np.mod(np.asarray(positions, dtype=float), TWO_PI) / grid.h
    i0 = np.floor(s).astype(int)
    w = s - i0
    out = np.zeros(grid.cells)
    np.add.at(out, np.mod(i0, grid.cells), (1 - w) * masses)
    np.add.at(out, np.mod(i0 + 1, grid.cells), w * masses)
    return out / grid.h


def shift_density(grid: PeriodicGrid, p: np.ndarray, d: float) -> np.ndarray:
    """Translate nodal densities (last axis) by ``d``; mass-conserving and positive."""
    s = d / grid.h
    j = int(np.floor(s))
    w = s - j
    return (1 - w) * np.roll(p, j, axis=-1) + w * np.roll(p, j + 1, axis=-1)


def shift_values(grid: PeriodicGrid, v: np.ndarray, d: float) -> np.ndarray:
    """``v(x + d)`` by periodic linear interpolation along the last axis."""
    s = d / grid.h
    j = int(np.floor(s))
    w = s - j
    return (1 - w) * np.roll(v, -j, axis=-1) + w * np.roll(v, -(j + 1), axis=-1)


@dataclass(frozen=True)
class OscillatorParams:
    sigma: float = 0.5
    sigma0: float = 0.3
    r: float = 0.5
    lam: float = 0.5
    T: float = 0.5

    def __post_init__(self):
        if self.sigma < 0 or self.sigma0 < 0:
            raise InvalidArgument("diffusion scales must be non-negative")
        if not self.r > 0:
            raise InvalidArgument("control penalty r must be positive")
        if not 0 < self.lam < 1:
            raise InvalidArgument("blend lambda must lie in (0, 1)")
        if not self.T > 0:
            raise InvalidArgument("horizon T must be positive")


# ---------------------------------------------------------------------------
# w0 lattice
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class W0Lattice:
    """Recombining binomial tree over a time grid.

    ``levels`` branch points sit at the ends of equal blocks of ``stride``
    steps; the node count at step ``k`` is ``k // stride + 1``.  ``levels = 0``
    is the collapsed single-node lattice.
    """

    steps: int
    levels: int = 8
    sigma0: float = 0.0
    dt: float = 1.0

    def __post_init__(self):
        if self.levels < 0:
            raise InvalidArgument("lattice levels must be non-negative")
        if self.levels > 0 and self.steps % self.levels:
            raise InvalidArgument("time steps must be a multiple of the lattice levels")

    @classmethod
    def build(cls, grid: TimeGrid, levels: int, sigma0: float) -> "W0Lattice":
        if sigma0 == 0:
            levels = 0
        return cls(grid.steps, levels, float(sigma0), grid.dt)

    @property
    def stride(self) -> int:
        return self.steps // self.levels if self.levels else self.steps + 1

    @property
    def delta(self) -> float:
        """Time between branch points."""
        return self.stride * self.dt

    @property
    def max_nodes(self) -> int:
        return self.levels + 1

    def level(self, k: int) -> int:
        return min(k // self.stride, self.levels)

    def nodes(self, k: int) -> int:
        return self.level(k) + 1

    def branches_after(self, k: int) -> bool:
        """True when the step from ``k`` to ``k+1`` crosses a branch point."""
        return self.levels > 0 and (k + 1) % self.stride == 0

    def probabilities(self, k: int) -> np.ndarray:
        j = self.level(k)
        return special.comb(j, np.arange(j + 1)) / 2.0**j

    def value(self, k: int) -> np.ndarray:
        """Accumulated ``sigma0 w0`` at the nodes of step ``k``."""
        j = self.level(k)
        return self.sigma0 * (2 * np.arange(j + 1) - j) * np.sqrt(self.delta)

    @property
    def jump(self) -> float:
        return self.sigma0 * np.sqrt(self.delta) if self.levels else 0.0


# ---------------------------------------------------------------------------
# couplings
# ---------------------------------------------------------------------------


def _wrapped_offsets(grid: PeriodicGrid) -> np.ndarray:
    d = np.arange(grid.cells)
    d = np.where(d >= grid.cells // 2, d - grid.cells, d) if grid.cells % 2 == 0 else np.where(d > grid.cells // 2, d - grid.cells, d)
    # exact antipodes go to -pi for even grids
    return d * grid.h


def coupling_major(p: np.ndarray, grid: PeriodicGrid) -> np.ndarray:
    """``m0(x) = int sin^2(x - theta) p(theta) dtheta`` on the grid (last axis)."""
    x = grid.x
    z = (p * np.exp(-2j * x)).sum(axis=-1) * grid.h
    return 0.5 * np.sum(p, axis=-1, keepdims=True) * grid.h - 0.5 * np.real(np.exp(2j * x) * z[..., None])


def _blend_kernel(grid: PeriodicGrid, lam: float) -> np.ndarray:
    return np.exp(-2j * lam * _wrapped_offsets(grid))


def coupling_minor(p0: np.ndarray, p: np.ndarray, lam: float, grid: PeriodicGrid) -> np.ndarray:
    """Double-integral coupling against the shortest-arc blend of the two phases.

    The blended phase of ``(theta0, theta)`` is ``theta + lam * wrap(theta0 -
    theta)`` with ``wrap`` into ``[-pi, pi)``; it coincides with the linear
    blend whenever the phases are less than ``pi`` apart on the chart.
    """
    x = grid.x
    h = grid.h
    C = _blend_kernel(grid, lam)
    v = p * np.exp(-2j * x)
    # (C * v)[a] = sum_b C(a - b) v_b, circular convolution over the last axis
    conv = np.fft.ifft(np.fft.fft(C) * np.fft.fft(v, axis=-1), axis=-1)
    z = np.sum(p0 * conv, axis=-1) * h * h
    mass = np.sum(p0, axis=-1) * np.sum(p, axis=-1) * h * h
    return 0.5 * mass[..., None] - 0.5 * np.real(np.exp(2j * x) * z[..., None])


def coupling_minor_point(theta0: float, p: np.ndarray, lam: float, grid: PeriodicGrid) -> np.ndarray:
    """Minor coupling when the major state is a point ``theta0``."""
    x = grid.x
    w = np.angle(np.exp(1j * (theta0 - x)))  # wrap(theta0 - theta_b) in (-pi, pi]
    b = x + lam * w
    z = np.sum(p * np.exp(-2j * b), axis=-1) * grid.h
    return 0.5 * np.sum(p, axis=-1, keepdims=True) * grid.h - 0.5 * np.real(np.exp(2j * x) * z[..., None])


def blend_phase(theta0, theta, lam):
    """Shortest-arc blend ``theta + lam * wrap(theta0 - theta)``."""
    return theta + lam * np.angle(np.exp(1j * (np.asarray(theta0) - np.asarray(theta))))


# ---------------------------------------------------------------------------
# fields
# ---------------------------------------------------------------------------


@dataclass
class ValueField:
    phi: np.ndarray  # (K+1, nodes, cells)
    u: np.ndarray  # (K, nodes, cells) face controls
    psi: Optional[np.ndarray]  # (K, nodes, cells); integrand on the w0 branch ending step k
    tgrid: TimeGrid
    grid: PeriodicGrid
    lattice: W0Lattice
    role: str

    def control_table(self, node: int = 0) -> np.ndarray:
        return self.u[:, node, :]


@dataclass
class DensityField:
    p: np.ndarray  # (K+1, nodes, cells)
    tgrid: TimeGrid
    grid: PeriodicGrid
    lattice: W0Lattice

    def masses(self) -> np.ndarray:
        return self.p.sum(axis=-1) * self.grid.h

    def expected(self) -> np.ndarray:
        """Lattice-probability average, shape ``(K+1, cells)``."""
        out = np.empty((self.p.shape[0], self.p.shape[2]))
        for k in range(self.p.shape[0]):
            nk = self.lattice.nodes(k)
            out[k] = self.lattice.probabilities(k) @ self.p[k, :nk]
        return out

    def check(self):
        for k in range(self.p.shape[0]):
            nk = self.lattice.nodes(k)
            _check_density(self.p[k, :nk], self.grid, k)


def _check_density(p, grid, k):
    mass = p.sum(axis=-1) * grid.h
    if np.any(np.abs(mass - 1.0) > MASS_TOL):
        raise SchemeError(f"mass drift {np.max(np.abs(mass - 1)):.3g} at step {k}", cell=None)
    if np.any(p < -NEG_TOL):
        idx = np.unravel_index(np.argmin(p), p.shape)
        raise SchemeError(f"negative density {p[idx]:.3g} at step {k}", cell=int(idx[-1]))


def _implicit_diffusion(v, coef, grid: PeriodicGrid):
    """Solve ``(I - coef * Laplacian_h) y = v`` along the last axis."""
    if coef == 0:
        return v
    sym = 1.0 - coef * grid.laplacian_symbol()
    return np.fft.irfft(np.fft.rfft(v, axis=-1) / sym, n=grid.cells, axis=-1)


def _central(v, grid):
    return (np.roll(v, -1, axis=-1) - np.roll(v, 1, axis=-1)) / (2 * grid.h)


def _forward_face(v, grid):
    return (np.roll(v, -1, axis=-1) - v) / grid.h


def _expected_next(phi_next, lattice: W0Lattice, k: int, nk: int, shift: bool, grid):
    """Child average at step ``k`` (values of step ``k+1`` mapped to step ``k`` nodes)."""
    if not lattice.branches_after(k):
        return phi_next[:nk]
    up = phi_next[1 : nk + 1]
    down = phi_next[:nk]
    if shift:
        up = shift_values(grid, up, lattice.jump)
        down = shift_values(grid, down, -lattice.jump)
    return 0.5 * (up + down)


def _hjb(m, params, tgrid, grid, lattice, role):
    K = tgrid.steps
    dt = tgrid.dt
    r = params.r
    if role == "major":
        sig = 0.0 if lattice.levels else params.sigma0
        shift = lattice.levels > 0
    elif role == "minor":
        sig, shift = params.sigma, False
    else:
        raise InvalidArgument("role must be 'major' or 'minor'")
    m = np.asarray(m, dtype=float)
    if m.ndim == 2:
        m = m[:, None, :]
    if m.shape[0] != K + 1 or m.shape[2] != grid.cells or m.shape[1] < lattice.max_nodes:
        raise InvalidArgument(f"coupling shape {m.shape} does not match the grids")
    L = lattice.max_nodes
    phi = np.zeros((K + 1, L, grid.cells))
    u = np.zeros((K, L, grid.cells))
    psi = np.zeros((K, L, grid.cells)) if lattice.levels else None
    coef = 0.5 * sig * sig * dt
    for k in range(K - 1, -1, -1):
        nk = lattice.nodes(k)
        bar = _expected_next(phi[k + 1], lattice, k, nk, shift, grid)
        if psi is not None and lattice.branches_after(k):
            psi[k, :nk] = (phi[k + 1, 1 : nk + 1] - phi[k + 1, :nk]) / (2 * np.sqrt(lattice.delta))
        uk = -_forward_face(bar, grid) / (2 * r)
        cfl = np.max(np.abs(uk)) * dt / grid.h
        if cfl > 1.0:
            raise StepSizeError(f"explicit Hamiltonian step unstable (|u| dt/h = {cfl:.3g}); use more time steps")
        rhs = bar + dt * (m[k, :nk] - _central(bar, grid) ** 2 / (4 * r))
        phi[k, :nk] = _implicit_diffusion(rhs, coef, grid)
        u[k, :nk] = uk
    return ValueField(phi, u, psi, tgrid, grid, lattice, role)


def solve_hjb_backward(m, params: OscillatorParams, grid: PeriodicGrid, tgrid: TimeGrid, role="minor") -> ValueField:
    """Semi-implicit backward sweep on a single node (no lattice)."""
    _check_horizon(params, tgrid)
    return _hjb(m, params, tgrid, grid, W0Lattice(tgrid.steps, 0, 0.0, tgrid.dt), role)


def solve_hjb_backward_on_lattice(
    m, params: OscillatorParams, grid: PeriodicGrid, tgrid: TimeGrid, lattice: W0Lattice, role="minor"
) -> ValueField:
    """Tree dynamic programming; falls back to one node when ``sigma0 = 0``."""
    _check_horizon(params, tgrid)
    if lattice.steps != tgrid.steps:
        raise InvalidArgument("lattice and time grid disagree")
    if lattice.sigma0 == 0 and lattice.levels:
        lattice = W0Lattice(tgrid.steps, 0, 0.0, tgrid.dt)
    return _hjb(m, params, tgrid, grid, lattice, role)


def martingale_residual(vf: ValueField, m, params: OscillatorParams) -> float:
    """Largest one-step drift of ``phi + running cost`` along the optimal policy.

    Recomputes, from the stored ``phi`` alone, the conditional expectation of
    ``phi`` at the next step (tree average), the running cost ``m + r u^2``
    and transport term under ``u = -D phi / (2r)``, and compares with
    ``(I - a Laplacian) phi``.  Zero up to rounding for an exact tree DP.
    """
    grid, lat, tg = vf.grid, vf.lattice, vf.tgrid
    m = np.asarray(m, dtype=float)
    if m.ndim == 2:
        m = m[:, None, :]
    dt, r, h = tg.dt, params.r, grid.h
    if vf.role == "major":
        sig = 0.0 if lat.levels else params.sigma0
    else:
        sig = params.sigma
    worst = 0.0
    for k in range(tg.steps):
        nk = lat.nodes(k)
        nxt = vf.phi[k + 1]
        if lat.branches_after(k):
            up, down = nxt[1 : nk + 1], nxt[:nk]
            if vf.role == "major" and lat.levels:
                up = shift_values(grid, up, lat.jump)
                down = shift_values(grid, down, -lat.jump)
            cond = 0.5 * up + 0.5 * down
        else:
            cond = nxt[:nk]
        grad = (np.roll(cond, -1, axis=-1) - np.roll(cond, 1, axis=-1)) / (2 * h)
        uc = -grad / (2 * r)
        running = m[k, :nk] + r * uc**2 + uc * grad
        cur = vf.phi[k, :nk]
        lap = (np.roll(cur, -1, axis=-1) - 2 * cur + np.roll(cur, 1, axis=-1)) / h**2
        drift = cur - 0.5 * sig * sig * dt * lap - cond - dt * running
        scale = 1.0 + np.max(np.abs(cur))
        worst = max(worst, float(np.max(np.abs(drift)) / scale))
    return worst


# ---------------------------------------------------------------------------
# forward transport
# ---------------------------------------------------------------------------


def _fpk_step(p, u, dt, coef, grid):
    up = np.maximum(u, 0.0)
    dn = np.minimum(u, 0.0)
    out_rate = np.max(up + np.roll(-dn, 1, axis=-1)) * dt / grid.h
    if out_rate > 1.0:
        raise StepSizeError(f"upwind transport unstable (outflow fraction {out_rate:.3g}); use more time steps")
    flux = up * p + dn * np.roll(p, -1, axis=-1)  # through face j + 1/2
    q = p - dt / grid.h * (flux - np.roll(flux, 1, axis=-1))
    return _implicit_diffusion(q, coef, grid)


def _children_mix(p_parent, j):
    """Density at the ``j + 2`` children given the ``j + 1`` parents (up/down pushed)."""
    up, down = p_parent
    n_child = j + 2
    out = np.zeros((n_child,) + up.shape[1:])
    c = np.arange(n_child)[:, None]
    w_up = c / (j + 1.0)  # parent c - 1 moved up
    w_dn = (j + 1.0 - c) / (j + 1.0)  # parent c moved down
    out[1:] += w_up[1:] * up
    out[:-1] += w_dn[:-1] * down
    return out


def solve_fpk_forward(
    u: ValueField | np.ndarray,
    params: OscillatorParams,
    p0: np.ndarray,
    grid: PeriodicGrid,
    tgrid: TimeGrid,
    lattice: Optional[W0Lattice] = None,
    role: str = "minor",
    check: bool = True,
) -> DensityField:
    """Conservative upwind transport with implicit diffusion.

    In lattice mode each node is advanced with its own control; at a branch
    the child density is the mixture of the pushed parents, weighted by the
    conditional probability of each parent given the child.  Major densities
    are also translated by ``+-sigma0 sqrt(Delta)``.
    """
    _check_horizon(params, tgrid)
    if isinstance(u, ValueField):
        lattice = u.lattice if lattice is None else lattice
        u = u.u
    lattice = lattice or W0Lattice(tgrid.steps, 0, 0.0, tgrid.dt)
    u = np.asarray(u, dtype=float)
    if u.ndim == 2:
        u = u[:, None, :]
    K = tgrid.steps
    dt = tgrid.dt
    if role == "major":
        sig = 0.0 if lattice.levels else params.sigma0
    else:
        sig = params.sigma
    coef = 0.5 * sig * sig * dt
    p0 = np.asarray(p0, dtype=float)
    if abs(p0.sum() * grid.h - 1) > MASS_TOL:
        raise InvalidArgument("initial density is not normalized")
    P = np.zeros((K + 1, lattice.max_nodes, grid.cells))
    P[0, 0] = p0
    for k in range(K):
        nk = lattice.nodes(k)
        q = _fpk_step(P[k, :nk], u[k, :nk], dt, coef, grid)
        if lattice.branches_after(k):
            up, down = q, q
            if role == "major":
                up = shift_density(grid, q, lattice.jump)
                down = shift_density(grid, q, -lattice.jump)
            P[k + 1, : nk + 1] = _children_mix((up, down), nk - 1)
        else:
            P[k + 1, :nk] = q
        if check:
            _check_density(P[k + 1, : lattice.nodes(k + 1)], grid, k + 1)
    return DensityField(P, tgrid, grid, lattice)


def integrate_point(u_table: np.ndarray, theta0: float, grid: PeriodicGrid, tgrid: TimeGrid, node: int = 0):
    """Deterministic major phase under a face-control table (Euler, periodic interpolation)."""
    K = tgrid.steps
    out = np.empty(K + 1)
    th = float(theta0)
    out[0] = th
    f = grid.faces
    for k in range(K):
        row = u_table[k, node]
        s = np.mod(th - f[0], TWO_PI) / grid.h
        i0 = int(np.floor(s)) % grid.cells
        w = s - np.floor(s)
        th = th + tgrid.dt * ((1 - w) * row[i0] + w * row[(i0 + 1) % grid.cells])
        out[k + 1] = th
    return out


# ---------------------------------------------------------------------------
# circular Wasserstein
# ---------------------------------------------------------------------------


def circular_w1_density(p: np.ndarray, q: np.ndarray, grid: PeriodicGrid) -> np.ndarray:
    """W1 on the circle between nodal densities on the same grid (last axis)."""
    F = np.cumsum((p - q) * grid.h, axis=-1)
    med = np.median(F, axis=-1, keepdims=True)
    return np.sum(np.abs(F - med), axis=-1) * grid.h


def circular_w1(x1, w1, x2, w2) -> float:
    """W1 on the circle between two weighted atom sets (positions in radians)."""
    x = np.concatenate([np.mod(x1, TWO_PI), np.mod(x2, TWO_PI)])
    w = np.concatenate([np.asarray(w1, float), -np.asarray(w2, float)])
    order = np.argsort(x, kind="stable")
    x, w = x[order], w[order]
    F = np.cumsum(w)
    gaps = np.diff(np.concatenate([x, [x[0] + TWO_PI]]))
    # weighted median of F with interval lengths as weights
    o = np.argsort(F, kind="stable")
    cw = np.cumsum(gaps[o])
    c = F[o][np.searchsorted(cw, 0.5 * cw[-1])]
    return float(np.sum(gaps * np.abs(F - c)))


def flow_distance(P: np.ndarray, Q: np.ndarray, grid: PeriodicGrid, lattice: W0Lattice) -> float:
    """``sup`` over time and lattice nodes of the circular W1 distance."""
    worst = 0.0
    for k in range(P.shape[0]):
        nk = lattice.nodes(k)
        worst = max(worst, float(np.max(circular_w1_density(P[k, :nk], Q[k, :nk], grid))))
    return worst


# ---------------------------------------------------------------------------
# consistency loop
# ---------------------------------------------------------------------------


@dataclass
class FixedPointResult:
    major_value: ValueField
    minor_value: ValueField
    major_density: Optional[DensityField]
    minor_density: DensityField
    trace: list
    converged: bool
    iterations: int
    major_path: Optional[np.ndarray] = None
    ratios: list = field(default_factory=list)

    def summary(self):
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "trace": list(self.trace),
            "ratios": list(self.ratios),
        }


def _check_horizon(params, tgrid):
    if abs(params.T - tgrid.T) > 1e-12:
        raise InvalidArgument("time grid horizon differs from the model horizon")


def major_step(minor_flow, params, grid, tgrid, lattice, p0_major=None, theta0=None):
    """Map a minor density flow to the major value field and major state law."""
    m0 = coupling_major(minor_flow, grid)
    vf0 = _hjb(m0, params, tgrid, grid, lattice, "major")
    if theta0 is not None:
        path = integrate_point(vf0.u, theta0, grid, tgrid)
        return vf0, None, path
    return vf0, solve_fpk_forward(vf0, params, p0_major, grid, tgrid, lattice, "major"), None


def minor_coupling_flow(major_density, major_path, minor_flow, params, grid, lattice):
    K1 = minor_flow.shape[0]
    m = np.zeros_like(minor_flow)
    for k in range(K1):
        nk = lattice.nodes(k)
        if major_path is not None:
            m[k, :nk] = coupling_minor_point(major_path[k], minor_flow[k, :nk], params.lam, grid)
        else:
            m[k, :nk] = coupling_minor(major_density.p[k, :nk], minor_flow[k, :nk], params.lam, grid)
    return m


def mfg_fixed_point(
    params: OscillatorParams,
    grid: PeriodicGrid,
    tgrid: TimeGrid,
    damping: float = 0.5,
    tol: float = 1e-6,
    max_iter: int = 50,
    lattice: Optional[W0Lattice] = None,
    minor_init: InitialLaw = InitialLaw.vonmises(np.pi, 1.0),
    major_init: InitialLaw = InitialLaw.vonmises(np.pi / 2, 1.0),
    major_point: Optional[float] = None,
    initial_flow: Optional[np.ndarray] = None,
) -> FixedPointResult:
    """Damped iteration of the measure-control map.

    One iteration: minor flow -> major coupling -> major HJB -> major law ->
    minor coupling -> minor HJB -> minor FPK, then blend the new minor flow
    with the previous one by ``damping``.  Distances are sup-over-time (and
    node) circular W1 between successive blended flows.  Non-convergence
    returns the last iterate flagged.
    """
    if not 0 < damping <= 1:
        raise InvalidArgument("damping must lie in (0, 1]")
    _check_horizon(params, tgrid)
    lattice = lattice or W0Lattice(tgrid.steps, 0, 0.0, tgrid.dt)
    if major_point is not None and (lattice.levels or params.sigma0 > 0):
        raise InvalidArgument("a point major state needs sigma0 = 0")
    p_minor = grid.density(minor_init)
    p_major = grid.density(major_init)
    K = tgrid.steps
    if initial_flow is None:
        flow = np.zeros((K + 1, lattice.max_nodes, grid.cells))
        for k in range(K + 1):
            flow[k, : lattice.nodes(k)] = p_minor
    else:
        flow = np.array(initial_flow, dtype=float)
    trace, ratios = [], []
    converged = False
    for it in range(1, max_iter + 1):
        vf0, dens0, path = major_step(flow, params, grid, tgrid, lattice, p_major, major_point)
        m = minor_coupling_flow(dens0, path, flow, params, grid, lattice)
        vf = _hjb(m, params, tgrid, grid, lattice, "minor")
        dens = solve_fpk_forward(vf, params, p_minor, grid, tgrid, lattice, "minor")
        new = damping * dens.p + (1 - damping) * flow
        d = flow_distance(new, flow, grid, lattice)
        if trace:
            ratios.append(d / trace[-1] if trace[-1] > 0 else 0.0)
        trace.append(d)
        flow = new
        logger.debug("fixed point iteration %d: distance %.3e", it, d)
        if d < tol:
            converged = True
            break
    if not converged:
        logger.warning("fixed point not converged after %d iterations (last distance %.3g)", max_iter, trace[-1])
    blended = DensityField(flow, tgrid, grid, lattice)
    return FixedPointResult(vf0, vf, dens0, blended, trace, converged, len(trace), path, ratios)


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


def write_field_csv(path, values: np.ndarray, tgrid: TimeGrid, grid: PeriodicGrid, lattice: W0Lattice, faces=False):
    """Rows ``t, node, x, value`` for every active lattice node."""
    xs = grid.faces if faces else grid.x
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "node", "x", "value"])
        for k in range(values.shape[0]):
            for i in range(lattice.nodes(k)):
                for x, v in zip(xs, values[k, i]):
                    w.writerow([f"{tgrid.nodes[k]:.12g}", i, f"{x:.12g}", f"{v:.12g}"])


def write_trace_json(path, result: FixedPointResult):
    with open(path, "w") as fh:
        json.dump(result.summary(), fh, indent=2, sort_keys=True)
