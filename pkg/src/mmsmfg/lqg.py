"""Linear-quadratic-Gaussian major-minor game: Riccati, affine BSDE reduction, oracle."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg

from .core import ControlSet, FeedbackControl, InitialLaw, ModelSpec, TimeGrid, sample_noise
from .errors import InternalConsistencyError, InvalidArgument, NumericalBlowup

logger = logging.getLogger(__name__)

COND_WARN = 1e10


def _mat(v, rows=None, cols=None, name="matrix"):
    a = np.atleast_2d(np.asarray(v, dtype=float))
    if rows is not None and cols is not None and a.shape != (rows, cols):
        raise InvalidArgument(f"{name} expected shape {(rows, cols)}, got {a.shape}")
    return a


def _vec(v, n, name="vector"):
    a = np.asarray(v, dtype=float).reshape(-1)
    if a.size != n:
        raise InvalidArgument(f"{name} expected length {n}, got {a.size}")
    return a


def _solve(R, B_T):
    """``R^{-1} B^T`` through a Cholesky factorization with a conditioning guard."""
    c = np.linalg.cond(R)
    if c > COND_WARN:
        logger.warning("control weight is ill-conditioned (cond=%.3g)", c)
    return linalg.cho_solve(linalg.cho_factor(R), B_T)


@dataclass(frozen=True)
class LqgParams:
    A0: np.ndarray
    B0: np.ndarray
    F0: np.ndarray
    S0: np.ndarray
    Q0: np.ndarray
    R0: np.ndarray
    H0: np.ndarray
    eta0: np.ndarray
    A: np.ndarray
    B: np.ndarray
    F: np.ndarray
    G: np.ndarray
    S: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    H: np.ndarray
    Hhat: np.ndarray
    eta: np.ndarray
    T: float = 1.0
    major_init: InitialLaw = InitialLaw.gaussian(1.0, 0.1)
    minor_init: InitialLaw = InitialLaw.gaussian(0.5, 0.2)

    def __post_init__(self):
        A0 = _mat(self.A0)
        n = A0.shape[0]
        B0 = _mat(self.B0)
        k = B0.shape[1]
        S0 = _mat(self.S0)
        m = S0.shape[1]
        fix = {
            "A0": _mat(self.A0, n, n, name="A0"), "B0": _mat(self.B0, n, k, name="B0"), "F0": _mat(self.F0, n, n, name="F0"),
            "S0": _mat(self.S0, n, m, name="S0"), "Q0": _mat(self.Q0, n, n, name="Q0"), "R0": _mat(self.R0, k, k, name="R0"),
            "H0": _mat(self.H0, n, n, name="H0"), "eta0": _vec(self.eta0, n, name="eta0"),
            "A": _mat(self.A, n, n, name="A"), "B": _mat(self.B, n, k, name="B"), "F": _mat(self.F, n, n, name="F"),
            "G": _mat(self.G, n, n, name="G"), "S": _mat(self.S, n, m, name="S"), "Q": _mat(self.Q, n, n, name="Q"),
            "R": _mat(self.R, k, k, name="R"), "H": _mat(self.H, n, n, name="H"), "Hhat": _mat(self.Hhat, n, n, name="Hhat"),
            "eta": _vec(self.eta, n, name="eta"),
        }
        for name, val in fix.items():
            object.__setattr__(self, name, val)
        for name in ("Q0", "Q", "R0", "R"):
            M = fix[name]
            if not np.allclose(M, M.T, atol=1e-12, rtol=0):
                raise InvalidArgument(f"{name} must be symmetric (max asymmetry {np.max(np.abs(M - M.T)):.3g})")
            ev = np.linalg.eigvalsh(0.5 * (M + M.T))
            if name.startswith("Q") and ev.min() < -1e-12:
                raise InvalidArgument(f"{name} must be positive semidefinite")
            if name.startswith("R") and ev.min() <= 0:
                raise InvalidArgument(f"{name} must be positive definite")
        if not self.T > 0:
            raise InvalidArgument("horizon T must be positive")

    @property
    def n(self):
        return self.A0.shape[0]

    @property
    def k(self):
        return self.B0.shape[1]

    @property
    def m(self):
        return self.S0.shape[1]

    def replace(self, **kw) -> "LqgParams":
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d.update(kw)
        return LqgParams(**d)

    @classmethod
    def default_scalar(cls, **overrides) -> "LqgParams":
        base = dict(
            A0=0.1, B0=1.0, F0=0.3, S0=0.4, Q0=1.0, R0=1.0, H0=0.5, eta0=0.2,
            A=-0.2, B=1.0, F=0.2, G=0.3, S=0.5, Q=1.0, R=1.0, H=0.6, Hhat=0.3, eta=-0.1,
            T=1.0,
        )
        base.update(overrides)
        return cls(**base)


# ---------------------------------------------------------------------------
# Riccati
# ---------------------------------------------------------------------------


def _riccati_rhs(P, A, BRB, Q):
    # dP/dt
    return -(P @ A + A.T @ P - P @ BRB @ P + Q)


def _rk4_backward(y_T, rhs, grid: TimeGrid, sym=None):
    """Integrate ``dy/dt = rhs(t, y)`` from ``t = T`` back to 0 on the grid nodes."""
    K = grid.steps
    h = -grid.dt
    out = [None] * (K + 1)
    y = y_T
    out[K] = y
    for j in range(K, 0, -1):
        t = grid.nodes[j]
        k1 = rhs(t, y)
        k2 = rhs(t + h / 2, y + (h / 2) * k1)
        k3 = rhs(t + h / 2, y + (h / 2) * k2)
        k4 = rhs(t + h, y + h * k3)
        y = y + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
        if sym is not None:
            y = sym(y)
        if not np.all(np.isfinite(y)):
            raise NumericalBlowup(f"non-finite backward ODE state at t={grid.nodes[j - 1]:g}", t=grid.nodes[j - 1])
        out[j - 1] = y
    return np.array(out)


def _symmetrize(P):
    return 0.5 * (P + P.T)


def solve_riccati(A, B, Q, R, grid: TimeGrid) -> np.ndarray:
    """``Pi(t)`` on the grid nodes, shape ``(K+1, n, n)``, with ``Pi(T) = 0``."""
    A, B, Q, R = _mat(A), _mat(B), _mat(Q), _mat(R)
    if np.linalg.matrix_rank(R) < R.shape[0]:
        raise InvalidArgument("control weight R must be invertible")
    BRB = B @ _solve(R, B.T)
    return _rk4_backward(np.zeros_like(Q), lambda t, P: _riccati_rhs(P, A, BRB, Q), grid, _symmetrize)


@dataclass
class RiccatiSolution:
    grid: TimeGrid
    Pi0: np.ndarray  # (K+1, n, n)
    Pi: np.ndarray
    closed0: np.ndarray  # A0 - B0 R0^{-1} B0^T Pi0
    closed: np.ndarray  # A - B R^{-1} B^T Pi

    def check(self, tol: float = 1e-10):
        for name, P in (("Pi0", self.Pi0), ("Pi", self.Pi)):
            if np.max(np.abs(P - np.swapaxes(P, 1, 2))) > tol:
                raise InternalConsistencyError(f"{name} lost symmetry")
            if np.min(np.linalg.eigvalsh(P)) < -tol:
                raise InternalConsistencyError(f"{name} is not positive semidefinite")
            if np.max(np.abs(P[-1])) != 0.0:
                raise InternalConsistencyError(f"{name}(T) is not zero")


def _gains(params: LqgParams):
    N0 = params.B0 @ _solve(params.R0, params.B0.T)
    N1 = params.B @ _solve(params.R, params.B.T)
    return N0, N1


# ---------------------------------------------------------------------------
# affine reduction
#
# State of the limit flow X = (z0, zbar) in R^{2n}; s = (s0, s) = P X + p.
# ---------------------------------------------------------------------------


class _Blocks:
    """Time-dependent coefficient blocks of the flow and of the BSDE drivers."""

    def __init__(self, params: LqgParams):
        self.p = params
        self.n = params.n
        self.N0, self.N1 = _gains(params)
        n = self.n
        self.Nmat = np.zeros((2 * n, 2 * n))
        self.Nmat[:n, :n] = self.N0
        self.Nmat[n:, n:] = self.N1
        self.Sigma = np.vstack([params.S0, np.zeros((n, params.m))])
        self.e = np.concatenate([params.Q0 @ params.eta0, params.Q @ params.eta])

    def closed(self, Pi0, Pi):
        return self.p.A0 - self.N0 @ Pi0, self.p.A - self.N1 @ Pi

    def flow_matrix(self, Pi0, Pi):
        n, p = self.n, self.p
        c0, c1 = self.closed(Pi0, Pi)
        AX = np.zeros((2 * n, 2 * n))
        AX[:n, :n] = c0
        AX[:n, n:] = p.F0
        AX[n:, :n] = p.G
        AX[n:, n:] = c1 + p.F
        return AX

    def driver_matrices(self, Pi0, Pi):
        n, p = self.n, self.p
        c0, c1 = self.closed(Pi0, Pi)
        D = np.zeros((2 * n, 2 * n))
        D[:n, :n] = c0.T
        D[n:, n:] = c1.T
        C = np.zeros((2 * n, 2 * n))
        C[:n, n:] = Pi0 @ p.F0 - p.Q0 @ p.H0
        C[n:, :n] = Pi @ p.G - p.Q @ p.H
        C[n:, n:] = Pi @ p.F - p.Q @ p.Hhat
        return D, C


def flow_drift(params: LqgParams, Pi0, Pi, X, s):
    """Drift of the limit pair ``(z0, zbar)`` given the adjoint ``(s0, s)``.

    Written out term by term from the closed-loop dynamics so that it can be
    checked against the matrix form used by the reduction.
    """
    n = params.n
    z0, zb = X[..., :n], X[..., n:]
    s0, s1 = s[..., :n], s[..., n:]
    N0, N1 = _gains(params)
    A0c = params.A0 - N0 @ Pi0
    Ac = params.A - N1 @ Pi
    dz0 = z0 @ A0c.T - s0 @ N0.T + zb @ params.F0.T
    dzb = zb @ (Ac + params.F).T - s1 @ N1.T + z0 @ params.G.T
    return np.concatenate([dz0, dzb], axis=-1)


def bsde_driver(params: LqgParams, Pi0, Pi, X, s):
    """Drift ``g`` with ``ds = -g dt + q dw0`` for both adjoint equations."""
    n = params.n
    z0, zb = X[..., :n], X[..., n:]
    s0, s1 = s[..., :n], s[..., n:]
    N0, N1 = _gains(params)
    A0c = params.A0 - N0 @ Pi0
    Ac = params.A - N1 @ Pi
    g0 = s0 @ A0c + zb @ (Pi0 @ params.F0 - params.Q0 @ params.H0).T - params.Q0 @ params.eta0
    g1 = (
        s1 @ Ac
        + zb @ (Pi @ params.F - params.Q @ params.Hhat).T
        + z0 @ (Pi @ params.G - params.Q @ params.H).T
        - params.Q @ params.eta
    )
    return np.concatenate([g0, g1], axis=-1)


@dataclass
class AffineBsdeCoefficients:
    grid: TimeGrid
    P: np.ndarray  # (K+1, 2n, 2n)
    p: np.ndarray  # (K+1, 2n)
    q: np.ndarray  # (K+1, 2n, m); loadings of (s0, s) on dw0
    n: int
    residual: float = 0.0

    def _blk(self, i, j):
        n = self.n
        return self.P[:, i * n : (i + 1) * n, j * n : (j + 1) * n]

    @property
    def P00(self):
        return self._blk(0, 0)

    @property
    def P01(self):
        return self._blk(0, 1)

    @property
    def P10(self):
        return self._blk(1, 0)

    @property
    def P11(self):
        return self._blk(1, 1)

    @property
    def p0(self):
        return self.p[:, : self.n]

    @property
    def p1(self):
        return self.p[:, self.n :]

    @property
    def q0(self):
        return self.q[:, : self.n]

    @property
    def q1(self):
        return self.q[:, self.n :]

    def adjoint(self, k, X):
        """``(s0, s)`` at node ``k`` for flow states ``X`` of shape ``(..., 2n)``."""
        return X @ self.P[k].T + self.p[k]


def _pack(Pi0, Pi, P, p):
    return np.concatenate([Pi0.ravel(), Pi.ravel(), P.ravel(), p])


def _unpack(y, n):
    a = n * n
    b = 4 * n * n
    return (
        y[:a].reshape(n, n),
        y[a : 2 * a].reshape(n, n),
        y[2 * a : 2 * a + b].reshape(2 * n, 2 * n),
        y[2 * a + b :],
    )


def _joint_rhs(blocks: _Blocks):
    par = blocks.p
    n = blocks.n

    def rhs(t, y):
        Pi0, Pi, P, p = _unpack(y, n)
        dPi0 = _riccati_rhs(Pi0, par.A0, blocks.N0, par.Q0)
        dPi = _riccati_rhs(Pi, par.A, blocks.N1, par.Q)
        AX = blocks.flow_matrix(Pi0, Pi)
        D, C = blocks.driver_matrices(Pi0, Pi)
        dP = -(P @ AX - P @ blocks.Nmat @ P + D @ P + C)
        dp = P @ blocks.Nmat @ p - D @ p + blocks.e
        return _pack(dPi0, dPi, dP, dp)

    return rhs


def _sym_joint(n):
    def sym(y):
        Pi0, Pi, P, p = _unpack(y, n)
        return _pack(_symmetrize(Pi0), _symmetrize(Pi), P, p)

    return sym


def _coefficient_residual(params, blocks, ric, coeffs, rng, samples=8):
    """Compare the matrix ODE against the term-by-term flow and driver maps.

    For the ansatz ``s = P X + p`` Ito's formula gives the drift of ``s`` as
    ``P' X + p' + P * flow_drift``; the BSDE requires it to equal
    ``-bsde_driver``.  ``P'`` and ``p'`` are taken from the ODE right-hand side.
    """
    n = params.n
    rhs = _joint_rhs(blocks)
    worst = 0.0
    K = ric.grid.steps
    for k in rng.integers(0, K + 1, size=samples):
        Pi0, Pi = ric.Pi0[k], ric.Pi[k]
        P, p = coeffs.P[k], coeffs.p[k]
        _, _, dP, dp = _unpack(rhs(ric.grid.nodes[k], _pack(Pi0, Pi, P, p)), n)
        X = rng.standard_normal((4, 2 * n))
        s = X @ P.T + p
        lhs = X @ dP.T + dp + flow_drift(params, Pi0, Pi, X, s) @ P.T
        target = -bsde_driver(params, Pi0, Pi, X, s)
        scale = 1.0 + np.max(np.abs(target))
        worst = max(worst, float(np.max(np.abs(lhs - target)) / scale))
    return worst


def solve_lqg_odes(params: LqgParams, grid: TimeGrid, check_tol: float = 1e-8, seed: int = 0):
    """Riccati solutions and affine BSDE coefficients, integrated jointly by RK4."""
    if abs(grid.T - params.T) > 1e-12:
        raise InvalidArgument("grid horizon differs from the model horizon")
    n = params.n
    blocks = _Blocks(params)
    y_T = np.zeros(2 * n * n + 4 * n * n + 2 * n)
    ys = _rk4_backward(y_T, _joint_rhs(blocks), grid, _sym_joint(n))
    parts = [_unpack(y, n) for y in ys]
    Pi0 = np.array([q[0] for q in parts])
    Pi = np.array([q[1] for q in parts])
    P = np.array([q[2] for q in parts])
    p = np.array([q[3] for q in parts])
    c0 = params.A0[None] - blocks.N0[None] @ Pi0
    c1 = params.A[None] - blocks.N1[None] @ Pi
    ric = RiccatiSolution(grid, Pi0, Pi, c0, c1)
    q = P @ blocks.Sigma[None]
    coeffs = AffineBsdeCoefficients(grid, P, p, q, n)
    coeffs.residual = _coefficient_residual(params, blocks, ric, coeffs, np.random.default_rng(seed))
    if coeffs.residual > check_tol:
        raise InternalConsistencyError(f"coefficient-matching residual {coeffs.residual:.3g} exceeds {check_tol:g}")
    return ric, coeffs


def solve_riccati_pair(params: LqgParams, grid: TimeGrid) -> RiccatiSolution:
    Pi0 = solve_riccati(params.A0, params.B0, params.Q0, params.R0, grid)
    Pi = solve_riccati(params.A, params.B, params.Q, params.R, grid)
    N0, N1 = _gains(params)
    return RiccatiSolution(grid, Pi0, Pi, params.A0[None] - N0[None] @ Pi0, params.A[None] - N1[None] @ Pi)


def reduce_bsde_to_ode(params: LqgParams, ric: RiccatiSolution, grid: TimeGrid, check_tol: float = 1e-8):
    if not ric.grid.same_as(grid):
        raise InvalidArgument("Riccati solution lives on a different grid")
    ric2, coeffs = solve_lqg_odes(params, grid, check_tol)
    drift = max(np.max(np.abs(ric2.Pi0 - ric.Pi0)), np.max(np.abs(ric2.Pi - ric.Pi)))
    if drift > 1e-9:
        raise InternalConsistencyError(f"supplied Riccati solution differs from the joint solve by {drift:.3g}")
    return coeffs


# ---------------------------------------------------------------------------
# forward flow, equilibrium, residuals
# ---------------------------------------------------------------------------


def _initial_flow(params: LqgParams, noise, scenarios):
    n = params.n
    X0 = np.empty((scenarios, 2 * n))
    X0[:, :n] = noise.initial_states[:, 0]
    X0[:, n:] = params.minor_init.expectation()
    return X0


def simulate_flow(params, ric, coeffs, dw0, X0, adjoint=None):
    """Euler paths of ``(z0, zbar)`` along major increments ``dw0`` ``(S, K, m)``.

    ``adjoint(k, X)`` gives ``(s0, s)``; defaults to the affine reduction.
    """
    grid = ric.grid
    K = grid.steps
    adjoint = adjoint or coeffs.adjoint
    Sigma = np.vstack([params.S0, np.zeros((params.n, params.m))])
    X = np.array(X0, dtype=float)
    out = np.empty((K + 1,) + X.shape)
    out[0] = X
    for k in range(K):
        s = adjoint(k, X)
        X = X + flow_drift(params, ric.Pi0[k], ric.Pi[k], X, s) * grid.dt + dw0[:, k] @ Sigma.T
        out[k + 1] = X
    return out


@dataclass
class LqgEquilibrium:
    params: LqgParams
    grid: TimeGrid
    riccati: RiccatiSolution
    coeffs: AffineBsdeCoefficients
    flow: np.ndarray  # (K+1, S, 2n)
    major_increments: np.ndarray  # (S, K, m)
    seed: int
    consistency: dict = field(default_factory=dict)

    def adjoint(self, k, scenario):
        return self.coeffs.adjoint(k, self.flow[k, scenario])

    def u0(self, k, z0, scenario=0):
        """``-R0^{-1} B0^T (Pi0 z0 + s0)`` at node ``k``."""
        par = self.params
        s0 = self.adjoint(k, scenario)[: par.n]
        return -(np.atleast_2d(z0) @ self.riccati.Pi0[k].T + s0) @ _solve(par.R0, par.B0.T).T

    def u(self, k, x, scenario=0):
        par = self.params
        s1 = self.adjoint(k, scenario)[par.n :]
        return -(np.atleast_2d(x) @ self.riccati.Pi[k].T + s1) @ _solve(par.R, par.B.T).T

    def feedback(self, scenario=0, bounds: ControlSet = ControlSet(warn=True)):
        grid = self.grid
        Pi0n = float(np.max(np.linalg.norm(self.riccati.Pi0, ord=2, axis=(1, 2))))
        Pin = float(np.max(np.linalg.norm(self.riccati.Pi, ord=2, axis=(1, 2))))
        K0 = np.linalg.norm(_solve(self.params.R0, self.params.B0.T), 2)
        K1 = np.linalg.norm(_solve(self.params.R, self.params.B.T), 2)
        u0 = FeedbackControl(
            lambda t, x: self.u0(min(grid.index(t), grid.steps - 1), x, scenario), bounds, Pi0n * K0, "u0-lqg"
        )
        u = FeedbackControl(
            lambda t, x: self.u(min(grid.index(t), grid.steps - 1), x, scenario), bounds, Pin * K1, "u-lqg"
        )
        return u0, u

    def write_gains(self, path):
        n = self.params.n
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            head = ["t"]
            for name, size in (("Pi0", n * n), ("Pi", n * n), ("P", 4 * n * n), ("p", 2 * n)):
                head += [f"{name}_{i}" for i in range(size)]
            w.writerow(head)
            for k, t in enumerate(self.grid.nodes):
                row = np.concatenate(
                    [self.riccati.Pi0[k].ravel(), self.riccati.Pi[k].ravel(), self.coeffs.P[k].ravel(), self.coeffs.p[k]]
                )
                w.writerow([f"{t:.12g}"] + [f"{v:.12g}" for v in row])


def lqg_equilibrium(params: LqgParams, grid: TimeGrid, scenarios: int, seed: int) -> LqgEquilibrium:
    ric, coeffs = solve_lqg_odes(params, grid)
    noise = sample_noise(grid, 1, scenarios, seed, params.major_init, params.minor_init, params.n, params.m)
    X0 = _initial_flow(params, noise, scenarios)
    flow = simulate_flow(params, ric, coeffs, noise.major_increments, X0)
    return LqgEquilibrium(params, grid, ric, coeffs, flow, noise.major_increments, seed)


def lqg_model(params: LqgParams, bounds: ControlSet = ControlSet(warn=True)) -> ModelSpec:
    """Finite-population coefficients with mean couplings."""
    p = params

    def f0(t, z, u, particles):
        return z @ p.A0.T + u @ p.B0.T + np.mean(particles, axis=0) @ p.F0.T

    def f(t, x, u, z0, particles):
        return x @ p.A.T + u @ p.B.T + np.mean(particles, axis=0) @ p.F.T + np.asarray(z0) @ p.G.T

    def cost0(t, z, u, particles):
        d = z - (np.mean(particles, axis=0) @ p.H0.T + p.eta0)
        return np.einsum("bi,ij,bj->b", d, p.Q0, d) + np.einsum("bi,ij,bj->b", u, p.R0, u)

    def cost(t, x, u, z0, particles):
        d = x - (np.asarray(z0) @ p.H.T + np.mean(particles, axis=0) @ p.Hhat.T + p.eta)
        return np.einsum("bi,ij,bj->b", d, p.Q, d) + np.einsum("bi,ij,bj->b", u, p.R, u)

    return ModelSpec(
        drift_major=f0,
        diffusion_major=lambda t, x, y: p.S0,
        drift_minor=f,
        diffusion_minor=lambda t, x, z0, y: p.S,
        cost_major=cost0,
        cost_minor=cost,
        control_major=bounds,
        control_minor=bounds,
        n=p.n,
        m=p.m,
        name="lqg",
    )


def population_consistency(
    eq: LqgEquilibrium, N_list, reps: Optional[int] = None, seed: Optional[int] = None
):
    """``sup_t`` rep-mean of ``|zbar - (1/N) sum z_i|`` under the equilibrium controls.

    Each rep is one equilibrium scenario; the population major agent uses the
    same w0 increments and initial state as the limit flow.
    """
    from .mvlimit import fit_loglog, simulate_population

    par = eq.params
    S = eq.flow.shape[1]
    reps = S if reps is None else min(reps, S)
    seed = eq.seed if seed is None else seed
    n_max = max(N_list)
    noise = sample_noise(eq.grid, n_max, S, seed, par.major_init, par.minor_init, par.n, par.m)
    noise = type(noise)(
        noise.grid,
        eq.major_increments,
        noise.minor_increments,
        noise.initial_states.copy(),
        noise.seed,
    )
    noise.initial_states[:, 0] = eq.flow[0, :, : par.n]
    model = lqg_model(par)
    errs = []
    for N in N_list:
        dev = np.zeros((reps, eq.grid.steps + 1))
        for r in range(reps):
            u0, u = eq.feedback(r)
            run = simulate_population(model, u0, u, N, noise, scenario=r, with_costs=False)
            dev[r] = np.linalg.norm(eq.flow[:, r, par.n :] - run.minors.mean(axis=1), axis=-1)
        errs.append(float(dev.mean(axis=0).max()))
    fit = fit_loglog(N_list, errs)
    eq.consistency = {"N": list(N_list), "errors": errs, "slope": fit.slope}
    return errs, fit


def bsde_residual(eq: LqgEquilibrium, perturb_s0: float = 1.0, perturb_s: float = 1.0):
    """RMS of the discretized BSDE increments along the stored scenarios.

    Per step ``res = s_{k+1} - s_k + g_k dt - q_k dw0_k``; the reported norm is
    ``sqrt(mean_paths sum_k |res_k|^2)`` separately for ``s0`` and ``s``.
    Scaling factors perturb the adjoint values (not the loadings).
    """
    par = eq.params
    n = par.n
    grid = eq.grid
    K = grid.steps
    scale = np.concatenate([np.full(n, perturb_s0), np.full(n, perturb_s)])
    s = np.array([eq.coeffs.adjoint(k, eq.flow[k]) for k in range(K + 1)]) * scale
    acc = np.zeros((eq.flow.shape[1], 2 * n))
    for k in range(K):
        g = bsde_driver(par, eq.riccati.Pi0[k], eq.riccati.Pi[k], eq.flow[k], s[k])
        res = s[k + 1] - s[k] + g * grid.dt - eq.major_increments[:, k] @ eq.coeffs.q[k].T
        acc += res**2
    rms0 = float(np.sqrt(np.mean(np.sum(acc[:, :n], axis=1))))
    rms1 = float(np.sqrt(np.mean(np.sum(acc[:, n:], axis=1))))
    return {"s0": rms0, "s": rms1}


# ---------------------------------------------------------------------------
# Monte-Carlo oracle
# ---------------------------------------------------------------------------


@dataclass
class OracleResult:
    grid: TimeGrid
    X: np.ndarray  # (K+1, paths, 2n)
    s: np.ndarray  # (K+1, paths, 2n)
    q: np.ndarray  # (K, 2n, m) regression loadings
    beta: np.ndarray  # (K+1, 1+2n, 2n) affine regression coefficients
    iterations: int
    condition: float
    rank_deficient: bool

    @property
    def s0(self):
        n = self.X.shape[-1] // 2
        return self.s[..., :n]

    @property
    def s1(self):
        n = self.X.shape[-1] // 2
        return self.s[..., n:]


def mc_bsde_oracle(
    params: LqgParams,
    ric: RiccatiSolution,
    n_paths: int,
    grid: TimeGrid,
    seed: int,
    max_iter: int = 30,
    tol: float = 1e-7,
    driver=None,
) -> OracleResult:
    """Least-squares Monte-Carlo solution of the forward-backward system.

    Picard sweeps: simulate the flow with the current adjoint regression,
    then recurse backward ``s_k = E[s_{k+1} + g(X_k, s_{k+1}) dt | X_k]`` by
    regression on ``(1, X_k)``; the loading ``q_k`` comes from regressing
    ``(s_{k+1} - s_k) dw0_k / dt``.  Uses only :func:`flow_drift` and
    :func:`bsde_driver`, never the reduced matrix ODE.
    """
    if n_paths < 1000:
        raise InvalidArgument("the oracle needs at least 10^3 paths")
    if not ric.grid.same_as(grid):
        raise InvalidArgument("Riccati solution lives on a different grid")
    n = params.n
    K = grid.steps
    driver = driver or (lambda k, X, s: bsde_driver(params, ric.Pi0[k], ric.Pi[k], X, s))
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,)))
    dw0 = rng.standard_normal((n_paths, K, params.m)) * np.sqrt(grid.dt)
    X0 = np.empty((n_paths, 2 * n))
    X0[:, :n] = params.major_init.sample(rng, (n_paths, n))
    X0[:, n:] = params.minor_init.expectation()
    Sigma = np.vstack([params.S0, np.zeros((n, params.m))])
    beta = np.zeros((K + 1, 1 + 2 * n, 2 * n))
    worst_cond = 0.0
    deficient = False
    for it in range(1, max_iter + 1):
        X = np.empty((K + 1, n_paths, 2 * n))
        X[0] = X0
        for k in range(K):
            s_k = beta[k, 0] + X[k] @ beta[k, 1:]
            X[k + 1] = X[k] + flow_drift(params, ric.Pi0[k], ric.Pi[k], X[k], s_k) * grid.dt + dw0[:, k] @ Sigma.T
        new_beta = np.zeros_like(beta)
        s = np.zeros((K + 1, n_paths, 2 * n))
        q = np.zeros((K, 2 * n, params.m))
        for k in range(K - 1, -1, -1):
            # deterministic coordinates (e.g. the initial mean) carry no
            # information beyond the intercept
            live = np.concatenate([[True], np.std(X[k], axis=0) > 1e-12 * (1 + np.abs(X[k]).max())])
            design = np.hstack([np.ones((n_paths, 1)), X[k]])[:, live]
            target = s[k + 1] + driver(k, X[k], s[k + 1]) * grid.dt
            coef, _, rank, sv = np.linalg.lstsq(design, target, rcond=None)
            cond = float(sv[0] / sv[-1]) if sv[-1] > 0 else np.inf
            worst_cond = max(worst_cond, cond)
            if rank < design.shape[1]:
                deficient = True
            new_beta[k][live] = coef
            s[k] = design @ coef
            # centring on the fitted s_k leaves the mean unchanged and cuts variance
            innov = s[k + 1] - s[k]
            for j in range(params.m):
                qc, *_ = np.linalg.lstsq(design, innov * dw0[:, k, j : j + 1] / grid.dt, rcond=None)
                q[k, :, j] = np.mean(design @ qc, axis=0)
        change = float(np.max(np.abs(new_beta - beta)))
        beta = new_beta
        if change < tol:
            break
    if deficient:
        logger.warning("oracle regression rank deficient (condition %.3g)", worst_cond)
    return OracleResult(grid, X, s, q, beta, it, worst_cond, deficient)


def oracle_relative_error(oracle: OracleResult, coeffs: AffineBsdeCoefficients):
    """``sup_k`` RMS gap over ``sup_k`` RMS size, for ``s0`` and ``s`` separately."""
    n = coeffs.n
    K = oracle.grid.steps
    red = np.array([coeffs.adjoint(k, oracle.X[k]) for k in range(K + 1)])
    out = {}
    for name, sl in (("s0", slice(0, n)), ("s", slice(n, 2 * n))):
        gap = np.sqrt(np.mean(np.sum((oracle.s[..., sl] - red[..., sl]) ** 2, axis=-1), axis=1))
        size = np.sqrt(np.mean(np.sum(red[..., sl] ** 2, axis=-1), axis=1))
        out[name] = float(gap.max() / size.max()) if size.max() > 0 else float(gap.max())
    return out
