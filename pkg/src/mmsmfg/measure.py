"""Empirical measures, the truncated path metric and Wasserstein distances."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import TimeGrid
from .errors import InvalidArgument, ResourceLimit, UnsupportedDimension

ASSIGNMENT_CAP = 512
ATOM_CAP = 2048


def _normalized(weights, count):
    if weights is None:
        return np.full(count, 1.0 / count)
    w = np.asarray(weights, dtype=float)
    if w.shape != (count,) or np.any(w < 0):
        raise InvalidArgument("weights must be non-negative, one per particle")
    return w / w.sum()


@dataclass
class EmpiricalMeasure:
    particles: np.ndarray
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        p = np.asarray(self.particles, dtype=float)
        if p.ndim == 1:
            p = p[:, None]
        if p.shape[0] < 1:
            raise InvalidArgument("an empirical measure needs at least one particle")
        self.particles = p
        self.weights = _normalized(self.weights, p.shape[0])

    @property
    def dim(self):
        return self.particles.shape[1]

    def integrate(self, fn: Callable) -> float:
        return float(np.sum(self.weights * fn(self.particles)))


@dataclass
class PathMeasure:
    paths: np.ndarray  # (count, K + 1, n)
    grid: TimeGrid
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        p = np.asarray(self.paths, dtype=float)
        if p.ndim == 2:
            p = p[:, :, None]
        if p.shape[1] != self.grid.steps + 1:
            raise InvalidArgument("paths do not match the grid")
        self.paths = p
        self.weights = _normalized(self.weights, p.shape[0])

    @property
    def count(self):
        return self.paths.shape[0]

    def marginal(self, k: int) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.paths[:, k], self.weights)

    @classmethod
    def dirac(cls, path, grid):
        path = np.asarray(path, dtype=float)
        return cls(path[None], grid)


@dataclass
class ConditionalMeasureProcess:
    """One particle cloud per major-noise scenario."""

    scenarios: list
    scenario_weights: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.scenarios:
            raise InvalidArgument("need at least one scenario")
        grid = self.scenarios[0].grid
        if any(not s.grid.same_as(grid) for s in self.scenarios):
            raise InvalidArgument("all scenarios must share one grid")
        self.scenario_weights = _normalized(self.scenario_weights, len(self.scenarios))

    @property
    def grid(self) -> TimeGrid:
        return self.scenarios[0].grid


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def _check_paths(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if y.ndim == 1:
        y = y[:, None]
    if x.shape != y.shape:
        raise InvalidArgument(f"paths live on different grids: {x.shape} vs {y.shape}")
    return x, y


def rho_T(x, y, upto: Optional[int] = None) -> float:
    """``sup_t |x(t) - y(t)|^2`` truncated at 1, over nodes ``0..upto``."""
    x, y = _check_paths(x, y)
    if upto is not None:
        x, y = x[: upto + 1], y[: upto + 1]
    return float(min(np.max(np.sum((x - y) ** 2, axis=-1)), 1.0))


def rho_matrix(a: np.ndarray, b: np.ndarray, upto: Optional[int] = None) -> np.ndarray:
    """Pairwise ``rho_T`` between path sets ``(I, K+1, n)`` and ``(J, K+1, n)``."""
    if upto is not None:
        a, b = a[:, : upto + 1], b[:, : upto + 1]
    out = np.empty((a.shape[0], b.shape[0]))
    for i in range(a.shape[0]):
        d = np.sum((b - a[i][None]) ** 2, axis=-1)
        out[i] = np.max(d, axis=1)
    return np.minimum(out, 1.0)


def _atoms(weights: np.ndarray, denom: int) -> np.ndarray:
    counts = np.rint(weights * denom).astype(int)
    if counts.sum() != denom or not np.allclose(counts / denom, weights, atol=1e-12):
        raise ResourceLimit("weights cannot be split into equal atoms below the atom cap")
    return counts


def _common_denominator(*weight_sets) -> int:
    denom = 1
    for w in weight_sets:
        for wi in w:
            frac = Fraction(float(wi)).limit_denominator(ATOM_CAP)
            if abs(float(frac) - wi) > 1e-12:
                raise ResourceLimit("weights are not rational with denominator <= atom cap")
            denom = denom * frac.denominator // math.gcd(denom, frac.denominator)
            if denom > ATOM_CAP:
                raise ResourceLimit(
                    f"equal-mass splitting needs more than {ATOM_CAP} atoms; subsample the measures"
                )
    return denom


def wasserstein_path(
    mu: PathMeasure, nu: PathMeasure, cap: int = ASSIGNMENT_CAP, upto: Optional[int] = None
) -> float:
    """Order-2 Wasserstein distance under ``rho_T`` by exact assignment.

    Equal uniform weights are matched directly; other weights are split into a
    common grid of equal-mass atoms first.
    """
    if not mu.grid.same_as(nu.grid) or mu.paths.shape[1:] != nu.paths.shape[1:]:
        raise InvalidArgument("measures live on different grids")
    uniform = (
        mu.count == nu.count
        and np.allclose(mu.weights, 1.0 / mu.count, rtol=0, atol=1e-15)
        and np.allclose(nu.weights, 1.0 / nu.count, rtol=0, atol=1e-15)
    )
    if uniform:
        if mu.count > cap:
            raise ResourceLimit(f"{mu.count} particles exceed the assignment cap {cap}; subsample")
        a, b = mu.paths, nu.paths
    else:
        denom = _common_denominator(mu.weights, nu.weights)
        if denom > cap:
            raise ResourceLimit(f"{denom} atoms exceed the assignment cap {cap}; subsample")
        a = np.repeat(mu.paths, _atoms(mu.weights, denom), axis=0)
        b = np.repeat(nu.paths, _atoms(nu.weights, denom), axis=0)
    cost = rho_matrix(a, b, upto)
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(cost[rows, cols].mean()))


def wasserstein_marginal(mu_t: EmpiricalMeasure, nu_t: EmpiricalMeasure) -> float:
    """Order-2 Wasserstein distance between equal-size 1-d samples."""
    if mu_t.dim != 1 or nu_t.dim != 1:
        raise UnsupportedDimension("sorted-sample pairing needs scalar states")
    if mu_t.particles.shape != nu_t.particles.shape:
        raise InvalidArgument("sorted pairing needs equal particle counts")
    a = np.sort(mu_t.particles[:, 0])
    b = np.sort(nu_t.particles[:, 0])
    return float(np.sqrt(np.mean((a - b) ** 2)))


def sup_marginal_w2(a: np.ndarray, b: np.ndarray) -> float:
    """``max_t W2`` between two particle flows ``(K+1, M, 1)`` by sorted pairing."""
    a = np.sort(a[..., 0], axis=1)
    b = np.sort(b[..., 0], axis=1)
    return float(np.sqrt(np.max(np.mean((a - b) ** 2, axis=1))))


# ---------------------------------------------------------------------------
# Hoelder regularity of measure flows
# ---------------------------------------------------------------------------


def default_test_functions():
    fns = []
    for k in (1.0, 2.0, 4.0):
        fns.append(lambda x, k=k: np.sin(k * x) / k)
        fns.append(lambda x, k=k: np.cos(k * x) / k)
    for c in (-1.0, 0.0, 1.0):
        fns.append(lambda x, c=c: np.clip(x - c, -1.0, 1.0))
    return fns


@dataclass
class HolderEstimate:
    exponent: float
    constant: float
    r_squared: float
    family: str
    per_scenario: list = field(default_factory=list)
    degenerate: bool = False
    summary: str = "worst"


def _flow_integrals(pm: PathMeasure, fns) -> np.ndarray:
    # (F, K+1): integral of each test function against each time marginal;
    # coordinate-wise sum for vector states
    vals = []
    for f in fns:
        fx = np.sum(f(pm.paths), axis=-1)  # (count, K+1)
        vals.append(pm.weights @ fx)
    return np.array(vals)


def holder_estimate(
    process: ConditionalMeasureProcess,
    test_functions: Optional[Sequence[Callable]] = None,
    lags: Optional[Sequence[int]] = None,
    family: str = "trig-ramp",
    summary: str = "worst",
) -> HolderEstimate:
    """Log-log regression of the sup time-increment of test integrals on the lag.

    For every scenario the sup over start times and test functions of
    ``|<f, mu_{t+l}> - <f, mu_t>|`` is regressed against ``l`` in log scale;
    the slope is the exponent.  ``summary`` picks the reported value across
    scenarios: the smallest exponent (``"worst"``) or the mean.
    """
    fns = list(test_functions) if test_functions is not None else default_test_functions()
    grid = process.grid
    K = grid.steps
    if lags is None:
        lags = [2**i for i in range(int(np.log2(max(K // 4, 1))) + 1)]
    lags = sorted(set(int(l) for l in lags))
    if len(lags) < 4:
        raise InvalidArgument("need at least four distinct lags")
    if lags[-1] > K:
        raise InvalidArgument("lag exceeds the grid")
    results = []
    degenerate = False
    for pm in process.scenarios:
        I = _flow_integrals(pm, fns)
        sup_inc = np.array([np.max(np.abs(I[:, l:] - I[:, :-l])) for l in lags])
        if np.any(sup_inc <= 1e-14 * max(1.0, np.max(np.abs(I)))):
            degenerate = True
            results.append((1.0, 0.0, 1.0))
            continue
        x = np.log(np.array(lags) * grid.dt)
        y = np.log(sup_inc)
        slope, intercept = np.polyfit(x, y, 1)
        resid = y - (slope * x + intercept)
        ss = np.sum((y - y.mean()) ** 2)
        r2 = 1.0 - np.sum(resid**2) / ss if ss > 0 else 1.0
        results.append((float(slope), float(np.exp(intercept)), float(r2)))
    exps = np.array([r[0] for r in results])
    if summary == "worst":
        i = int(np.argmin(exps))
        exponent, const, r2 = results[i]
    elif summary == "mean":
        exponent = float(exps.mean())
        const = float(np.mean([r[1] for r in results]))
        r2 = float(np.mean([r[2] for r in results]))
    else:
        raise InvalidArgument("summary must be 'worst' or 'mean'")
    return HolderEstimate(
        exponent=min(exponent, 1.0) if degenerate and len(results) == 1 else exponent,
        constant=const,
        r_squared=r2,
        family=family,
        per_scenario=results,
        degenerate=degenerate,
        summary=summary,
    )


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


def write_measure_csv(path, process: ConditionalMeasureProcess):
    """Columnar export: t, scenario, particle, x0..x{n-1}, weight."""
    grid = process.grid
    n = process.scenarios[0].paths.shape[-1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "scenario", "particle"] + [f"x{i}" for i in range(n)] + ["weight"])
        for s, pm in enumerate(process.scenarios):
            wt = pm.weights * process.scenario_weights[s]
            for k, t in enumerate(grid.nodes):
                for j in range(pm.count):
                    w.writerow([f"{t:.12g}", s, j] + [f"{v:.12g}" for v in pm.paths[j, k]] + [f"{wt[j]:.12g}"])
