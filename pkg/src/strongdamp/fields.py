"""Problem definitions: coefficient fields, domains, and hypothesis checks.

A problem bundles the drift b, noise matrix sigma, friction alpha with its
declared lower bound alpha0, the optional potential U and rotational part l,
the optional reaction rate c(q, u), initial datum g, domain indicator G
(the open set {phi < 0}), the equilibrium O, the noise exponent beta and a
sampling box.  All coefficient fields are expression trees over q1..qd
(c may additionally reference u).

validate_hypotheses samples the box with a scrambled Sobol design and
checks the standing assumptions: friction bounded below by alpha0, sigma
invertible with bounded inverse, b Lipschitz on the box, and, when the
structure is declared, the gradient decomposition alpha*b = -grad U + l
with grad U orthogonal to l, plus inward-pointing drift on the boundary
of G.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from typing import Optional

import numpy as np
from scipy.stats import qmc

from .errors import ConfigError, NumericalError
from .expr import ScalarExpr, eval_field, grad_field, parse_expression

_ALLOWED_KEYS = {"d", "r", "b", "sigma", "alpha", "alpha0", "U", "l", "c",
                 "g", "G", "O", "beta", "box"}


class ProblemError(ConfigError):
    pass


def _eval_compiled(fn, Q, u=None):
    Q = np.asarray(Q, dtype=float)
    out = fn(Q, u)
    return np.broadcast_to(np.asarray(out, dtype=float), Q.shape[:-1])


@dataclass(frozen=True)
class ProblemDefinition:
    d: int
    r: int
    b: tuple
    sigma: tuple
    alpha: ScalarExpr
    alpha0: float
    O: np.ndarray
    box: np.ndarray
    beta: float = 0.0
    U: Optional[ScalarExpr] = None
    l: Optional[tuple] = None
    c: Optional[ScalarExpr] = None
    g: Optional[ScalarExpr] = None
    G: Optional[ScalarExpr] = None
    name: str = ""

    # -- compiled closures ---------------------------------------------------

    @cached_property
    def _b_fns(self):
        return [e.compile() for e in self.b]

    @cached_property
    def _sigma_fns(self):
        return [[e.compile() for e in row] for row in self.sigma]

    @cached_property
    def _alpha_fn(self):
        return self.alpha.compile()

    @cached_property
    def sigma_is_constant(self) -> bool:
        return all(not e.variables for row in self.sigma for e in row)

    @cached_property
    def alpha_is_constant(self) -> bool:
        return not self.alpha.variables

    # -- field evaluation ----------------------------------------------------

    def eval_alpha(self, Q) -> np.ndarray:
        return _eval_compiled(self._alpha_fn, Q)

    def eval_b(self, Q) -> np.ndarray:
        Q = np.asarray(Q, dtype=float)
        out = np.empty(Q.shape[:-1] + (self.d,))
        for i, fn in enumerate(self._b_fns):
            out[..., i] = _eval_compiled(fn, Q)
        return out

    def eval_sigma(self, Q) -> np.ndarray:
        Q = np.asarray(Q, dtype=float)
        out = np.empty(Q.shape[:-1] + (self.d, self.r))
        for i, row in enumerate(self._sigma_fns):
            for j, fn in enumerate(row):
                out[..., i, j] = _eval_compiled(fn, Q)
        return out

    def eval_a(self, Q) -> np.ndarray:
        """Diffusion matrix a = sigma sigma^T, shape (..., d, d)."""
        s = self.eval_sigma(Q)
        return s @ np.swapaxes(s, -1, -2)

    def eval_U(self, Q) -> np.ndarray:
        if self.U is None:
            raise ProblemError("problem declares no potential U")
        return eval_field(self.U, Q)

    def grad_U(self, Q) -> np.ndarray:
        if self.U is None:
            raise ProblemError("problem declares no potential U")
        return grad_field(self.U, Q, self.d)

    def eval_l(self, Q) -> np.ndarray:
        Q = np.asarray(Q, dtype=float)
        if self.l is None:
            return np.zeros(Q.shape[:-1] + (self.d,))
        out = np.empty(Q.shape[:-1] + (self.d,))
        for i, e in enumerate(self.l):
            out[..., i] = eval_field(e, Q)
        return out

    def eval_c(self, Q, u) -> np.ndarray:
        if self.c is None:
            raise ProblemError("problem declares no reaction rate c")
        return eval_field(self.c, Q, u=u)

    def eval_g(self, Q) -> np.ndarray:
        if self.g is None:
            raise ProblemError("problem declares no initial datum g")
        return eval_field(self.g, Q)

    def eval_phi(self, Q) -> np.ndarray:
        if self.G is None:
            raise ProblemError("problem declares no domain G")
        return eval_field(self.G, Q)

    def grad_phi(self, Q) -> np.ndarray:
        if self.G is None:
            raise ProblemError("problem declares no domain G")
        return grad_field(self.G, Q, self.d)

    # -- sampled coefficient ranges -------------------------------------------

    @cached_property
    def _alpha_range(self):
        pts = box_samples(self.box, 4096, seed=0)
        pts = np.vstack([pts, self.O[None, :]])
        a = self.eval_alpha(pts)
        return float(np.min(a)), float(np.max(a))

    @property
    def alpha_max(self) -> float:
        return self._alpha_range[1]

    @property
    def alpha_min_sampled(self) -> float:
        return self._alpha_range[0]

    def in_box(self, q) -> bool:
        q = np.asarray(q, dtype=float)
        return bool(np.all(q >= self.box[:, 0]) and np.all(q <= self.box[:, 1]))


def _parse_vector(raw, what, d) -> tuple:
    if not isinstance(raw, list) or len(raw) != d:
        raise ProblemError(f"{what} must be a list of {d} expression strings")
    return tuple(parse_expression(s) for s in raw)


def load_problem(spec) -> ProblemDefinition:
    """Build a ProblemDefinition from a dict or a JSON file path."""
    if isinstance(spec, (str,)):
        with open(spec, "r", encoding="utf-8") as fh:
            spec = json.load(fh)
    if not isinstance(spec, dict):
        raise ProblemError("problem definition must be a JSON object")
    unknown = set(spec) - _ALLOWED_KEYS - {"name"}
    if unknown:
        raise ProblemError(f"unknown problem keys: {sorted(unknown)}")
    missing = {"d", "b", "sigma", "alpha", "alpha0", "O", "box"} - set(spec)
    if missing:
        raise ProblemError(f"missing problem keys: {sorted(missing)}")

    d = spec["d"]
    if not isinstance(d, int) or d < 1:
        raise ProblemError("d must be a positive integer")

    sigma_raw = spec["sigma"]
    if (not isinstance(sigma_raw, list) or len(sigma_raw) != d
            or not all(isinstance(row, list) for row in sigma_raw)):
        raise ProblemError(f"sigma must be a {d}-row matrix of expressions")
    r = spec.get("r", len(sigma_raw[0]))
    if any(len(row) != r for row in sigma_raw):
        raise ProblemError("sigma rows must share a common length r")
    if r < d:
        raise ProblemError("sigma must have r >= d columns")

    alpha0 = float(spec["alpha0"])
    if not alpha0 > 0:
        raise ProblemError("alpha0 must be positive")
    beta = float(spec.get("beta", 0.0))
    if not (0.0 <= beta < 0.5):
        raise ProblemError("beta must lie in [0, 1/2)")

    box = np.asarray(spec["box"], dtype=float)
    if box.shape != (d, 2) or not np.all(box[:, 0] < box[:, 1]):
        raise ProblemError("box must be a (d, 2) array with lo < hi")
    O = np.asarray(spec["O"], dtype=float)
    if O.shape != (d,):
        raise ProblemError(f"O must have {d} coordinates")
    if not (np.all(O >= box[:, 0]) and np.all(O <= box[:, 1])):
        raise ProblemError("O must lie inside the box")

    def opt_expr(key, allow_u=False):
        raw = spec.get(key)
        if raw is None:
            return None
        e = parse_expression(raw)
        if e.uses_u and not allow_u:
            raise ProblemError(f"field {key!r} may not reference u")
        return e

    p = ProblemDefinition(
        d=d, r=r,
        b=_parse_vector(spec["b"], "b", d),
        sigma=tuple(tuple(parse_expression(s) for s in row)
                    for row in sigma_raw),
        alpha=parse_expression(spec["alpha"]),
        alpha0=alpha0,
        O=O, box=box, beta=beta,
        U=opt_expr("U"),
        l=_parse_vector(spec["l"], "l", d) if spec.get("l") is not None else None,
        c=opt_expr("c", allow_u=True),
        g=opt_expr("g"),
        G=opt_expr("G"),
        name=spec.get("name", ""),
    )

    # coordinate indices must stay within d
    named = [("alpha", p.alpha)] + [(f"b[{i}]", e) for i, e in enumerate(p.b)]
    named += [(f"sigma[{i}][{j}]", e) for i, row in enumerate(p.sigma)
              for j, e in enumerate(row)]
    for key in ("U", "c", "g", "G"):
        e = getattr(p, key)
        if e is not None:
            named.append((key, e))
    if p.l is not None:
        named += [(f"l[{i}]", e) for i, e in enumerate(p.l)]
    for what, e in named:
        if e.max_q_index > d:
            raise ProblemError(
                f"field {what} references q{e.max_q_index} but d = {d}")
    return p


def load_preset(name: str) -> ProblemDefinition:
    """Load one of the bundled problem presets by name (e.g. 'p1', 'p3')."""
    ref = resources.files("strongdamp").joinpath(f"presets/{name.lower()}.json")
    try:
        text = ref.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ProblemError(f"unknown preset {name!r}") from None
    spec = json.loads(text)
    spec.setdefault("name", name.lower())
    return load_problem(spec)


# ---------------------------------------------------------------------------
# sampling helpers

def box_samples(box: np.ndarray, n: int, seed: int) -> np.ndarray:
    """n Sobol-like stratified points in the box, deterministic in seed."""
    box = np.asarray(box, dtype=float)
    d = box.shape[0]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        eng = qmc.Sobol(d=d, scramble=True, seed=seed)
        unit = eng.random(n)
    return box[:, 0] + unit * (box[:, 1] - box[:, 0])


def boundary_points_by_ray(p: ProblemDefinition, n_rays: int,
                           seed: int = 0) -> np.ndarray:
    """Sample the zero level set of phi by bisecting along rays from O.

    Requires phi(O) < 0.  Rays that never leave G inside the box are
    dropped; raises when no boundary point is found.
    """
    phi_O = float(p.eval_phi(p.O[None, :])[0])
    if phi_O >= 0:
        raise ProblemError("O must lie inside G (phi(O) < 0)")
    d = p.d
    if d == 1:
        dirs = np.array([[1.0], [-1.0]])
    elif d == 2:
        th = np.linspace(0.0, 2.0 * np.pi, n_rays, endpoint=False)
        dirs = np.stack([np.cos(th), np.sin(th)], axis=1)
    else:
        rng = np.random.Generator(np.random.Philox(key=seed))
        dirs = rng.standard_normal((n_rays, d))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pts = []
    for u in dirs:
        # largest step to the box face along +u
        with np.errstate(divide="ignore"):
            t_hi = np.min(np.where(
                u > 0, (p.box[:, 1] - p.O) / np.where(u > 0, u, 1.0),
                np.where(u < 0, (p.box[:, 0] - p.O) / np.where(u < 0, u, 1.0),
                         np.inf)))
        if not np.isfinite(t_hi) or t_hi <= 0:
            continue
        f_hi = float(p.eval_phi((p.O + t_hi * u)[None, :])[0])
        if f_hi < 0:
            continue  # ray exits the box while still inside G
        lo, hi = 0.0, float(t_hi)
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if float(p.eval_phi((p.O + mid * u)[None, :])[0]) < 0:
                lo = mid
            else:
                hi = mid
        pts.append(p.O + hi * u)
    if not pts:
        raise ProblemError("no boundary point of G found inside the box")
    return np.asarray(pts)


def inward_normals(p: ProblemDefinition, pts: np.ndarray) -> np.ndarray:
    """Unit inward normals on the boundary, -grad phi / |grad phi|."""
    gp = p.grad_phi(pts)
    norms = np.linalg.norm(gp, axis=-1, keepdims=True)
    if np.any(norms < 1e-12):
        raise NumericalError("vanishing grad phi on the boundary")
    return -gp / norms


# ---------------------------------------------------------------------------
# hypothesis validation

@dataclass
class ValidationReport:
    passed: bool
    failures: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"passed": self.passed, "failures": list(self.failures),
                "metrics": dict(self.metrics)}


GRADIENT_STRUCTURE_TOL = 1e-8


def validate_hypotheses(p: ProblemDefinition, samples: int = 10_000,
                        seed: int = 0) -> ValidationReport:
    """Sample-based check of the standing assumptions on the box."""
    if samples < 100:
        raise ProblemError("validation needs at least 100 sample points")
    pts = box_samples(p.box, samples, seed=seed)
    pts = np.vstack([pts, p.O[None, :]])
    failures = []
    metrics = {}

    alpha = p.eval_alpha(pts)
    metrics["alpha_min"] = float(np.min(alpha))
    metrics["alpha_max"] = float(np.max(alpha))
    if metrics["alpha_min"] < p.alpha0 - 1e-12:
        failures.append(
            f"friction drops to {metrics['alpha_min']:.6g} below the declared "
            f"lower bound alpha0 = {p.alpha0:.6g}")

    sig = p.eval_sigma(pts)
    sv = np.linalg.svd(sig, compute_uv=False)
    metrics["sigma_min_sv"] = float(np.min(sv))
    metrics["sigma_max_sv"] = float(np.max(sv))
    if metrics["sigma_min_sv"] <= 1e-8:
        failures.append(
            f"sigma is numerically singular on the box "
            f"(min singular value {metrics['sigma_min_sv']:.3g})")

    # empirical Lipschitz constant of b over sample pairs
    bv = p.eval_b(pts)
    half = pts.shape[0] // 2
    dq = pts[:half] - pts[half:2 * half]
    db = bv[:half] - bv[half:2 * half]
    dist = np.linalg.norm(dq, axis=1)
    keep = dist > 1e-9
    metrics["b_lipschitz"] = float(
        np.max(np.linalg.norm(db[keep], axis=1) / dist[keep]))

    # bounded derivative of sigma (max column-wise finite difference slope)
    sig_slope = 0.0
    for i in range(p.d):
        step = 1e-5 * (1.0 + np.linalg.norm(pts, axis=1))
        hp, hm = pts.copy(), pts.copy()
        hp[:, i] += step
        hm[:, i] -= step
        dsig = (p.eval_sigma(hp) - p.eval_sigma(hm)) / (2 * step)[:, None, None]
        sig_slope = max(sig_slope, float(np.max(np.abs(dsig))))
    metrics["sigma_derivative_max"] = sig_slope

    if p.U is not None:
        gu = p.grad_U(pts)
        lv = p.eval_l(pts)
        residual = p.eval_alpha(pts)[:, None] * bv + gu - lv
        metrics["gradient_residual_max"] = float(
            np.max(np.linalg.norm(residual, axis=1)))
        metrics["orthogonality_max"] = float(
            np.max(np.abs(np.sum(gu * lv, axis=1))))
        tol = GRADIENT_STRUCTURE_TOL * (
            1.0 + float(np.max(np.linalg.norm(gu, axis=1))))
        if metrics["gradient_residual_max"] > tol:
            failures.append(
                "alpha*b + grad U - l does not vanish "
                f"(max residual {metrics['gradient_residual_max']:.3g})")
        if metrics["orthogonality_max"] > tol:
            failures.append(
                "grad U is not orthogonal to l "
                f"(max inner product {metrics['orthogonality_max']:.3g})")

    if p.G is not None:
        phi_O = float(p.eval_phi(p.O[None, :])[0])
        metrics["phi_at_O"] = phi_O
        if phi_O >= 0:
            failures.append("equilibrium O lies outside G")
        else:
            bpts = boundary_points_by_ray(p, n_rays=max(16, 8 * p.d),
                                          seed=seed)
            nu = inward_normals(p, bpts)
            inward_drift = np.sum(p.eval_b(bpts) * nu, axis=1)
            metrics["boundary_inward_drift_min"] = float(np.min(inward_drift))
            if metrics["boundary_inward_drift_min"] <= 0:
                failures.append(
                    "drift is not inward-pointing everywhere on the boundary "
                    f"(min <b, nu> = {metrics['boundary_inward_drift_min']:.3g})")

    return ValidationReport(passed=not failures, failures=failures,
                            metrics=metrics)
