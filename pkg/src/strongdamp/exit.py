"""Monte Carlo exit experiments for the damped second-order process.

Paths are integrated in a streaming kernel (nothing is stored but the
current state), exit is detected as the first sign change of the domain
function phi along a step, and the crossing time and point are placed by
linear interpolation inside that step.  Exit times live on the rescaled
clock; divide by eps for the original one.

The headline check: eps * log E[tau] approaches the boundary minimum of
the quasipotential as eps decreases.  Means use compensated summation and
rungs containing timeouts are flagged as lower bounds, never silently
averaged.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, NumericalError
from .fields import ProblemDefinition
from .sde import NoisePath, StabilityError, _apply_sigma, make_generator

DEFAULT_CHUNK = 4096


def default_step(p: ProblemDefinition, eps: float) -> float:
    """Step with a fixed relaxation resolution alpha*h/eps^2 = 0.2."""
    return 0.2 * eps**2 / p.alpha_max


def default_max_steps(eps: float) -> int:
    """Step cap covering an eps-independent horizon under default_step."""
    return int(math.ceil(1e8 / eps**2))


@dataclass
class ExitResult:
    tau: float                 # rescaled-clock exit time (nan on timeout)
    exit_point: np.ndarray     # (d,) crossing location (nan on timeout)
    timeout: bool


@dataclass
class ExitStats:
    eps: float
    n_samples: int
    mean_tau: float
    ci_halfwidth: float
    eps_log_mean: float
    exit_points: np.ndarray    # (n_exits, d)
    taus: np.ndarray           # (n_exits,) rescaled clock
    timeouts: int
    lower_bound: bool          # True when timeouts were dropped from the mean

    def taus_original(self) -> np.ndarray:
        """Per-sample exit times on the original (slow) clock."""
        return self.taus / self.eps


@dataclass
class ExitScaling:
    stats: list
    limit: float               # eps*log E[tau] extrapolated to eps = 0
    slope: float
    used_eps: np.ndarray       # rungs that entered the fit (timeout-free)


def _exit_kernel(p: ProblemDefinition, eps: float, h: float, scheme: str,
                 q0: np.ndarray, v0: np.ndarray, seed: int,
                 stream_ids: Sequence[int], max_steps: int,
                 chunk_steps: int = DEFAULT_CHUNK,
                 noise: Optional[NoisePath] = None):
    """Advance M paths until each exits G or hits the step cap.

    Returns (tau (M,), exit_points (M, d), timed_out (M,)).  Exited and
    capped rows are compressed out between chunks, so long-lived paths do
    not pay for finished ones.  When `noise` is given its increments are
    consumed instead of fresh draws (pilot refinement studies); running
    out of provided increments is an error, not a timeout.
    """
    M, d = q0.shape
    r = p.r
    tau = np.full(M, np.nan)
    exit_pts = np.full((M, d), np.nan)
    timed_out = np.zeros(M, dtype=bool)

    phi_init = p.eval_phi(q0)
    immediate = phi_init >= 0
    tau[immediate] = 0.0
    exit_pts[immediate] = q0[immediate]

    active = np.flatnonzero(~immediate)
    q = q0[active].copy()
    v = v0[active].copy()
    phi = phi_init[active].copy()

    inc_given = None
    gens = None
    if noise is not None:
        inc_given = noise.increments
        if inc_given.ndim == 2:
            inc_given = inc_given[None, :, :]
        if inc_given.shape[0] != M or inc_given.shape[2] != r:
            raise ConfigError("provided noise must have shape (M, steps, r)")
        if abs(noise.dt - h) > 1e-12 * max(1.0, h):
            raise ConfigError(
                f"provided noise has dt = {noise.dt}, kernel step is {h}")
    else:
        gens = {int(i): make_generator(seed, stream_ids[int(i)])
                for i in active}

    eps2 = eps * eps
    noise_pow = eps ** (0.5 - p.beta)
    sqrt_h = math.sqrt(h)
    const_alpha = p.alpha_is_constant
    const_sigma = p.sigma_is_constant
    sig_c = p.eval_sigma(p.O[None, :])[0] if const_sigma else None
    al_c = float(p.eval_alpha(p.O[None, :])[0]) if const_alpha else None
    if scheme == "euler":
        h_max = 0.2 * eps2 / p.alpha_max
        if h > h_max * (1 + 1e-9):
            raise StabilityError(
                f"euler scheme needs h <= 0.2*eps^2/alpha_max = {h_max:.3e}, "
                f"got h = {h:.3e}")
    elif scheme != "exponential":
        raise ConfigError(f"unknown scheme {scheme!r}")
    if const_alpha and scheme == "exponential":
        theta = al_c * h / eps2
        decay_c = math.exp(-theta)
        mu1_c = (eps2 / al_c) * (1.0 - decay_c)
        amp_c = noise_pow * math.sqrt((1.0 - decay_c**2) / (2.0 * al_c * eps2))

    step_count = 0
    while active.size and step_count < max_steps:
        n_chunk = min(chunk_steps, max_steps - step_count)
        if inc_given is not None:
            avail = inc_given.shape[1] - step_count
            if avail <= 0:
                raise ConfigError(
                    "provided noise ran out before exit or the step cap")
            n_chunk = min(n_chunk, avail)
            inc = inc_given[active, step_count:step_count + n_chunk, :]
        else:
            inc = np.empty((active.size, n_chunk, r))
            for row, i in enumerate(active):
                inc[row] = gens[int(i)].standard_normal((n_chunk, r)) * sqrt_h

        alive = np.ones(active.size, dtype=bool)
        for k in range(n_chunk):
            rows = np.flatnonzero(alive)
            if rows.size == 0:
                break
            qn = q[rows]
            vn = v[rows]
            dW = inc[rows, k, :]
            sig_n = sig_c if const_sigma else p.eval_sigma(qn)
            bn = p.eval_b(qn)
            if scheme == "exponential":
                if const_alpha:
                    al, decay, mu1, amp = al_c, decay_c, mu1_c, amp_c
                else:
                    al = p.eval_alpha(qn)[:, None]
                    decay = np.exp(-al * h / eps2)
                    mu1 = (eps2 / al) * (1.0 - decay)
                    amp = noise_pow * np.sqrt(
                        (1.0 - decay**2) / (2.0 * al * eps2))
                drift = bn / al
                xi = amp * _apply_sigma(sig_n, dW) / sqrt_h
                v1 = decay * vn + (1.0 - decay) * drift + xi
                q1 = qn + vn * mu1 + drift * (h - mu1) + (0.5 * h) * xi
            else:
                al = al_c if const_alpha else p.eval_alpha(qn)[:, None]
                v1 = (vn + (h / eps2) * (bn - al * vn)
                      + noise_pow * _apply_sigma(sig_n, dW) / eps2)
                q1 = qn + h * vn

            phi1 = p.eval_phi(q1)
            crossed = phi1 >= 0
            if np.any(crossed):
                cr = rows[crossed]
                ph0 = phi[cr]
                ph1 = phi1[crossed]
                frac = ph0 / (ph0 - ph1)
                ids = active[cr]
                tau[ids] = (step_count + k + frac) * h
                exit_pts[ids] = q[cr] + frac[:, None] * (q1[crossed] - q[cr])
                alive[cr] = False
            q[rows] = q1
            v[rows] = v1
            phi[rows] = phi1
            if not np.all(np.isfinite(phi[rows])):
                raise NumericalError("exit path diverged (non-finite state)")

        step_count += n_chunk
        if not np.all(alive):
            active = active[alive]
            q = q[alive]
            v = v[alive]
            phi = phi[alive]

    timed_out[active] = True
    return tau, exit_pts, timed_out


def sample_exit(p: ProblemDefinition, eps: float, q0=None, p0=None,
                stream_id: int = 0, seed: int = 0, *, h: float = None,
                scheme: str = "exponential", max_steps: int = None,
                noise: Optional[NoisePath] = None) -> ExitResult:
    """Exit time and location of one path started at q0 (default O).

    p0 is the original-scale momentum; the initial velocity is p0/eps.
    A start on or outside the boundary returns tau = 0 at q0.
    """
    if p.G is None:
        raise ConfigError("problem declares no exit domain G")
    if not (0 < eps <= 1):
        raise ConfigError("eps must lie in (0, 1]")
    q0 = p.O.copy() if q0 is None else np.asarray(q0, dtype=float)
    if q0.shape != (p.d,):
        raise ConfigError(f"q0 must have shape ({p.d},)")
    p0 = np.zeros(p.d) if p0 is None else np.asarray(p0, dtype=float)
    h = default_step(p, eps) if h is None else h
    max_steps = default_max_steps(eps) if max_steps is None else max_steps
    tau, pts, out = _exit_kernel(
        p, eps, h, scheme, q0[None, :], (p0 / eps)[None, :], seed,
        [stream_id], max_steps, noise=noise)
    return ExitResult(tau=float(tau[0]), exit_point=pts[0],
                      timeout=bool(out[0]))


def _rung_stats(eps: float, taus: np.ndarray, pts: np.ndarray,
                timed_out: np.ndarray) -> ExitStats:
    ok = ~timed_out
    t_ok = taus[ok]
    n = int(t_ok.size)
    timeouts = int(np.sum(timed_out))
    if n == 0:
        return ExitStats(eps=eps, n_samples=0, mean_tau=math.nan,
                         ci_halfwidth=math.nan, eps_log_mean=math.nan,
                         exit_points=pts[ok], taus=t_ok,
                         timeouts=timeouts, lower_bound=True)
    mean = math.fsum(t_ok) / n
    if n > 1:
        var = math.fsum((t - mean) ** 2 for t in t_ok) / (n - 1)
        ci = 1.96 * math.sqrt(var / n)
    else:
        ci = math.inf
    return ExitStats(eps=eps, n_samples=n, mean_tau=mean, ci_halfwidth=ci,
                     eps_log_mean=eps * math.log(mean),
                     exit_points=pts[ok], taus=t_ok, timeouts=timeouts,
                     lower_bound=timeouts > 0)


def exit_scaling(p: ProblemDefinition, eps_ladder, M: int, seed: int, *,
                 q0=None, p0=None, h: float = None,
                 scheme: str = "exponential", max_steps: int = None,
                 V0_hint: float = None,
                 chunk_steps: int = DEFAULT_CHUNK) -> ExitScaling:
    """eps*log E[tau] along a decreasing eps ladder plus its eps -> 0 limit.

    The limit is a linear-in-eps extrapolation through the timeout-free
    rungs.  V0_hint, when given, triggers an upfront warning for rungs
    whose predicted mean exit time e^{V0/eps} cannot fit under the step
    cap.  Stream ids are pre-assigned per (rung, path), so results do not
    depend on scheduling.
    """
    if p.G is None:
        raise ConfigError("problem declares no exit domain G")
    ladder = np.asarray(eps_ladder, dtype=float)
    if ladder.ndim != 1 or ladder.size < 1 or np.any(np.diff(ladder) >= 0):
        raise ConfigError("eps ladder must be strictly decreasing")
    if M < 1:
        raise ConfigError("need at least one sample per rung")
    q0 = p.O.copy() if q0 is None else np.asarray(q0, dtype=float)
    p0 = np.zeros(p.d) if p0 is None else np.asarray(p0, dtype=float)

    stats = []
    for j, eps in enumerate(ladder):
        h_eps = default_step(p, eps) if h is None else h
        cap = default_max_steps(eps) if max_steps is None else max_steps
        if V0_hint is not None:
            predicted = math.exp(V0_hint / eps)
            if predicted > 0.5 * cap * h_eps:
                warnings.warn(
                    f"rung eps={eps:g}: predicted mean exit time "
                    f"{predicted:.3g} approaches the step-cap horizon "
                    f"{cap * h_eps:.3g}; expect timeouts", stacklevel=2)
        q_init = np.broadcast_to(q0, (M, p.d)).copy()
        v_init = np.broadcast_to(p0 / eps, (M, p.d)).copy()
        stream_ids = [j * M + i for i in range(M)]
        taus, pts, out = _exit_kernel(
            p, eps, h_eps, scheme, q_init, v_init, seed, stream_ids, cap,
            chunk_steps=chunk_steps)
        stats.append(_rung_stats(eps, taus, pts, out))

    clean = [(s.eps, s.eps_log_mean) for s in stats
             if s.timeouts == 0 and s.n_samples > 0]
    if not clean:
        raise NumericalError(
            "every rung contained timeouts; no scaling fit possible")
    if len(clean) == 1:
        limit, slope = clean[0][1], math.nan
    else:
        xs = np.array([c[0] for c in clean])
        ys = np.array([c[1] for c in clean])
        slope, limit = (float(v) for v in np.polyfit(xs, ys, 1))
    return ExitScaling(stats=stats, limit=limit, slope=slope,
                       used_eps=np.array([c[0] for c in clean]))


@dataclass
class ExitHistogram:
    edges: np.ndarray
    counts: np.ndarray
    kind: str                  # "coordinate" (d=1) or "angle" (d=2)
    mode: float                # center of the most populated bin
    mode_point: np.ndarray     # mean exit point within that bin


def exit_location_histogram(stats: ExitStats, bins: int = 16,
                            center=None) -> ExitHistogram:
    """Histogram of exit locations over a boundary parameterization.

    d=1 bins the exit coordinate directly; d=2 bins the angle around
    `center` (default the sample mean is NOT used; pass the rest point O).
    Requires at least 50 exited samples.
    """
    pts = stats.exit_points
    if pts.shape[0] < 50:
        raise ConfigError(
            f"need at least 50 exit samples, got {pts.shape[0]}")
    d = pts.shape[1]
    if d == 1:
        values = pts[:, 0]
        counts, edges = np.histogram(values, bins=bins)
        kind = "coordinate"
    elif d == 2:
        c = np.zeros(2) if center is None else np.asarray(center, dtype=float)
        rel = pts - c
        values = np.arctan2(rel[:, 1], rel[:, 0])
        counts, edges = np.histogram(values, bins=bins,
                                     range=(-math.pi, math.pi))
        kind = "angle"
    else:
        raise ConfigError("histogram supports d = 1 or 2 only")
    k = int(np.argmax(counts))
    mode = 0.5 * (edges[k] + edges[k + 1])
    in_bin = (values >= edges[k]) & (values <= edges[k + 1])
    mode_point = pts[in_bin].mean(axis=0)
    return ExitHistogram(edges=edges, counts=counts, kind=kind,
                         mode=float(mode), mode_point=mode_point)
