"""Minimum-action paths and the quasipotential.

The quasipotential between two points is the infimum of the path action
over all travel times T and all paths joining them.  At fixed T the
discrete action is minimized by a quasi-Newton method over the interior
nodes (endpoints are hard constraints); the travel time is then optimized
over a log-spaced ladder followed by a golden-section refinement.

When the drift has gradient structure (alpha b = -grad U, sigma sigma^T = I,
rotational part orthogonal to grad U), the quasipotential from the rest
point equals twice the potential drop; gradient_case_oracle exposes that
closed form for cross-checking the optimizer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import minimize

from .action import DiscretePath, segment_costs_grad
from .contour import arc_length_resample, contour_polylines, point_in_polygon
from .errors import ConfigError, NumericalError
from .fields import (ProblemDefinition, ProblemError, boundary_points_by_ray,
                     validate_hypotheses)

GRAD_TOL = 1e-6
ITER_CAP = 5000
H_MAX = 0.25          # segment step never coarser than this
DEFAULT_LADDER = (0.5, 64.0, 8)


@dataclass
class MinActionProblem:
    """Fixed-endpoint minimization request.

    init, when given, is an (M+1, d) array of node positions used as the
    starting path (resampled to the working resolution); otherwise a
    straight line with a small seeded perturbation is used.
    """

    q_start: np.ndarray
    q_end: np.ndarray
    N: int = 64
    mode: str = "standard"
    init: Optional[np.ndarray] = None
    seed: int = 0

    def __post_init__(self):
        self.q_start = np.asarray(self.q_start, dtype=float)
        self.q_end = np.asarray(self.q_end, dtype=float)
        if self.q_start.shape != self.q_end.shape or self.q_start.ndim != 1:
            raise ConfigError("endpoints must be equal-length vectors")
        if self.N < 16:
            raise ConfigError("need at least 16 path segments")
        if self.init is not None:
            self.init = np.asarray(self.init, dtype=float)
            if self.init.ndim != 2 or self.init.shape[1] != self.q_start.size:
                raise ConfigError("init path must have shape (M+1, d)")


@dataclass
class MinActionResult:
    value: float
    path: DiscretePath
    T_star: float
    iterations: int
    grad_norm: float
    converged: bool


def _resample_path(points: np.ndarray, m: int) -> np.ndarray:
    """Linear resampling of node positions onto m+1 uniform nodes."""
    n = points.shape[0] - 1
    if n == m:
        return points.copy()
    src = np.linspace(0.0, 1.0, n + 1)
    dst = np.linspace(0.0, 1.0, m + 1)
    out = np.empty((m + 1, points.shape[1]))
    for j in range(points.shape[1]):
        out[:, j] = np.interp(dst, src, points[:, j])
    return out


def _initial_points(mp: MinActionProblem, m: int) -> np.ndarray:
    if mp.init is not None:
        pts = _resample_path(mp.init, m)
        pts[0] = mp.q_start
        pts[-1] = mp.q_end
        return pts
    t = np.linspace(0.0, 1.0, m + 1)[:, None]
    pts = (1.0 - t) * mp.q_start + t * mp.q_end
    if np.any(mp.q_start != mp.q_end):
        rng = np.random.default_rng(mp.seed)
        pts[1:-1] += 1e-3 * rng.standard_normal(pts[1:-1].shape)
    return pts


def minimize_action_fixed_T(p: ProblemDefinition, mp: MinActionProblem,
                            T: float) -> MinActionResult:
    """Minimize the discrete action at fixed travel time T.

    Interior nodes are free; the segment count is raised if needed so the
    time step stays at or below H_MAX.  Success means the gradient
    sup-norm fell below GRAD_TOL * (1 + |value|); otherwise the best
    iterate is returned with converged=False.
    """
    for q in (mp.q_start, mp.q_end):
        if not p.in_box(q):
            raise ConfigError(
                f"endpoint {q} lies outside the validated box; the action "
                "there would rest on unchecked coefficients")
    if T <= 0:
        raise ConfigError("travel time must be positive")
    m = max(mp.N, int(math.ceil(T / H_MAX)))
    d = p.d
    pts0 = _initial_points(mp, m)
    shape = (m - 1, d)

    def objective(x):
        pts = np.empty((m + 1, d))
        pts[0] = mp.q_start
        pts[-1] = mp.q_end
        pts[1:-1] = x.reshape(shape)
        costs, g_left, g_right = segment_costs_grad(
            p, DiscretePath(T=T, points=pts), mp.mode)
        grad = g_right[:-1] + g_left[1:]
        return float(np.sum(costs)), grad.ravel()

    res = minimize(objective, pts0[1:-1].ravel(), jac=True,
                   method="L-BFGS-B",
                   options={"maxiter": ITER_CAP, "maxfun": 4 * ITER_CAP,
                            "ftol": 1e-14, "gtol": 1e-9})
    value, grad = objective(res.x)
    gnorm = float(np.max(np.abs(grad))) if grad.size else 0.0
    pts = np.empty((m + 1, d))
    pts[0] = mp.q_start
    pts[-1] = mp.q_end
    pts[1:-1] = res.x.reshape(shape)
    if not np.isfinite(value):
        raise NumericalError("action minimization diverged")
    return MinActionResult(
        value=value,
        path=DiscretePath(T=T, points=pts),
        T_star=T,
        iterations=int(res.nit),
        grad_norm=gnorm,
        converged=gnorm <= GRAD_TOL * (1.0 + abs(value)))


def _default_ladder() -> np.ndarray:
    lo, hi, n = DEFAULT_LADDER
    return np.geomspace(lo, hi, n)


def quasipotential(p: ProblemDefinition, q_end, q_start=None, *,
                   mode: str = "standard", N: int = 64,
                   T_ladder=None, refine: bool = True,
                   init: Optional[np.ndarray] = None,
                   seed: int = 0) -> MinActionResult:
    """Infimum of the action over paths q_start -> q_end and over T.

    Scans the T ladder, then golden-section refines log T around the best
    rung, warm-starting each refinement solve from the incumbent path.
    """
    if q_start is None:
        q_start = p.O
    ladder = (_default_ladder() if T_ladder is None
              else np.asarray(T_ladder, dtype=float))
    if ladder.ndim != 1 or ladder.size < 1 or np.any(ladder <= 0) \
            or np.any(np.diff(ladder) <= 0):
        raise ConfigError("T ladder must be positive and increasing")
    mp = MinActionProblem(q_start=q_start, q_end=q_end, N=N, mode=mode,
                          init=init, seed=seed)

    results = [minimize_action_fixed_T(p, mp, T) for T in ladder]
    values = [r.value for r in results]
    k = int(np.argmin(values))
    best = results[k]
    if ladder.size == 1 or not refine:
        return best

    lo = math.log(ladder[max(k - 1, 0)])
    hi = math.log(ladder[min(k + 1, ladder.size - 1)])
    if hi - lo < 1e-9:
        return best

    def solve(logT):
        warm = MinActionProblem(q_start=mp.q_start, q_end=mp.q_end, N=N,
                                mode=mode, init=best.path.points, seed=seed)
        return minimize_action_fixed_T(p, warm, math.exp(logT))

    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c1 = b - invphi * (b - a)
    c2 = a + invphi * (b - a)
    r1, r2 = solve(c1), solve(c2)
    for r in (r1, r2):
        if r.value < best.value:
            best = r
    while b - a > 0.02:
        if r1.value <= r2.value:
            b, c2, r2 = c2, c1, r1
            c1 = b - invphi * (b - a)
            r1 = solve(c1)
            if r1.value < best.value:
                best = r1
        else:
            a, c1, r1 = c1, c2, r2
            c2 = a + invphi * (b - a)
            r2 = solve(c2)
            if r2.value < best.value:
                best = r2
    return best


def check_action_equivalence(p: ProblemDefinition, q_end, **cfg):
    """Quasipotential under both quadratic forms and their relative gap.

    The two integrands weight the drift mismatch differently but minimize
    to the same value once T is free; the gap measures discretization and
    optimization error.
    """
    v1 = quasipotential(p, q_end, mode="standard", **cfg).value
    v2 = quasipotential(p, q_end, mode="alt", **cfg).value
    relgap = abs(v1 - v2) / max(abs(v1), abs(v2), 1e-30)
    return v1, v2, relgap


@dataclass
class BoundaryScan:
    V0: float
    q_star: np.ndarray
    index: int
    s: np.ndarray        # arc position of each boundary sample
    points: np.ndarray   # (n, d) boundary samples
    values: np.ndarray   # quasipotential at each sample


def _boundary_samples_2d(p: ProblemDefinition, n: int,
                         grid_n: int) -> np.ndarray:
    xs = np.linspace(p.box[0, 0], p.box[0, 1], grid_n)
    ys = np.linspace(p.box[1, 0], p.box[1, 1], grid_n)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel()], axis=1)
    vals = p.eval_phi(pts).reshape(grid_n, grid_n)
    polys = contour_polylines(vals, xs, ys, 0.0)
    if not polys:
        raise ProblemError("boundary of G not found inside the box")
    enclosing = [q for q in polys
                 if np.allclose(q[0], q[-1]) and point_in_polygon(p.O, q)]
    loop = (min(enclosing, key=lambda q: np.abs(q - p.O).max())
            if enclosing else max(polys, key=len))
    return arc_length_resample(loop, n)


def quasipotential_boundary(p: ProblemDefinition, boundary_samples: int = 32,
                            grid_n: int = 201, **cfg) -> BoundaryScan:
    """Scan the quasipotential over the boundary of G.

    Ties in the argmin are broken toward the smallest sample index.
    Consecutive samples warm-start each other, so the scan cost is close
    to one cold optimization plus cheap refinements.
    """
    if float(p.eval_phi(p.O[None, :])[0]) >= 0:
        raise ProblemError("rest point O must lie inside G (phi(O) < 0)")
    if p.d == 1:
        pts = boundary_points_by_ray(p, 2)
        pts = pts[np.argsort(pts[:, 0])]
    elif p.d == 2:
        pts = _boundary_samples_2d(p, boundary_samples, grid_n)
    else:
        pts = boundary_points_by_ray(p, boundary_samples)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])

    values = np.empty(len(pts))
    warm = None
    for i, q in enumerate(pts):
        r = quasipotential(p, q, init=warm, **cfg)
        values[i] = r.value
        warm = r.path.points
    k = int(np.argmin(values))
    return BoundaryScan(V0=float(values[k]), q_star=pts[k].copy(), index=k,
                        s=s, points=pts, values=values)


def gradient_case_oracle(p: ProblemDefinition, q) -> float:
    """Closed-form quasipotential 2*(U(q) - U(O)) for gradient problems.

    Valid only when the diffusion matrix is the identity and the drift
    decomposes as alpha b = -grad U + l with l orthogonal to grad U; these
    structural facts are re-checked on a sample before the value is
    returned.
    """
    if p.U is None:
        raise ProblemError("problem declares no potential U")
    report = validate_hypotheses(p, samples=512, seed=0)
    if not report.passed:
        raise ProblemError(
            "hypothesis check failed: " + "; ".join(report.failures))
    sv_lo = report.metrics["sigma_min_sv"]
    sv_hi = report.metrics["sigma_max_sv"]
    if abs(sv_lo - 1.0) > 1e-8 or abs(sv_hi - 1.0) > 1e-8:
        raise ProblemError("closed form needs sigma sigma^T = identity")
    q = np.asarray(q, dtype=float)
    return float(2.0 * (p.eval_U(q[None, :])[0] - p.eval_U(p.O[None, :])[0]))
