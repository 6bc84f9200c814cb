"""Blahut-Arimoto distortion-rate computation on finite alphabets.

Rates are in nats.  A finite reproduction alphabet can only over-estimate
the distortion-rate function; every check here is phrased so that this
over-estimate cannot flip the asserted inequality.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .maps import eval_map
from .spaces import DataSpace, DiscreteMeasure, LatentSpace, ValidationError, eps_net, sqdist
from .transport import NumericalError

SLOPE_RANGE = (1e-6, 1e6)  # |s| bracket for rate targeting
IP_AFTER = 100  # plain updates before the interior-point warm start


@dataclass(frozen=True, eq=False)
class RDProblem:
    source: DiscreteMeasure
    reproduction: np.ndarray

    def __post_init__(self):
        rep = np.atleast_2d(np.asarray(self.reproduction, dtype=np.float64))
        if rep.shape[1] != self.source.dimension:
            raise ValidationError("reproduction alphabet dimension mismatch")
        if rep.shape[0] == 0:
            raise ValidationError("empty reproduction alphabet")
        object.__setattr__(self, "reproduction", rep)
        object.__setattr__(self, "cost", sqdist(self.source.atoms[:, None, :], rep[None, :, :]))

    def zero_rate_distortion(self) -> float:
        """min over constants of E||Z - zhat||^2."""
        return float(min(math.fsum(self.source.weights * col) for col in self.cost.T))

    def min_distortion(self) -> float:
        return math.fsum(self.source.weights * self.cost.min(axis=1))


@dataclass(frozen=True, eq=False)
class BlahutResult:
    rate: float
    distortion: float
    kernel: np.ndarray
    output: np.ndarray
    slope: float
    gap: float
    iterations: int
    objective_trace: tuple


def _ba_step(logq, logp, sc, p):
    """One Blahut-Arimoto update; returns (new logq, objective at logq, gap at logq)."""
    logZ = logsumexp(logq[None, :] + sc, axis=1)
    logc = logsumexp(logp[:, None] + sc - logZ[:, None], axis=0)
    gap = float(logc.max() - np.dot(np.exp(logq), logc))
    new = logq + logc
    return new - logsumexp(new), -math.fsum(p * logZ), gap


def _objective(logq, sc, p):
    return -math.fsum(p * logsumexp(logq[None, :] + sc, axis=1))


def _interior_point(sc, p, mu_final=1e-11):
    """Warm start for q from a log-barrier Newton solve of the dual problem.

    The update fixed point maximises sum_i p_i log (A q)_i over the simplex
    (A_ij = exp(s c_ij), rows rescaled).  Its dual, max sum_i p_i log nu_i
    subject to A^T nu <= 1, has one variable per source atom; the barrier
    multipliers mu / (1 - A^T nu)_j recover q.
    """
    A = np.exp(sc - sc.max(axis=1, keepdims=True))
    n, m = A.shape
    nu = np.full(n, 0.5 / A.sum(axis=0).max())
    mu = 0.1

    def phi(v, slack):
        return -np.dot(p, np.log(v)) - mu * np.sum(np.log(slack))

    while True:
        for _ in range(200):
            slack = 1.0 - A.T @ nu
            grad = -p / nu + mu * (A @ (1.0 / slack))
            H = np.diag(p / nu**2) + mu * (A * (1.0 / slack**2)) @ A.T
            try:
                step = -np.linalg.solve(H, grad)
            except np.linalg.LinAlgError:
                return None
            dec = -float(grad @ step)
            if dec < 1e-15:
                break
            t = 1.0
            base = phi(nu, slack)
            while t > 1e-20:
                trial = nu + t * step
                tslack = 1.0 - A.T @ trial
                if np.all(trial > 0) and np.all(tslack > 0) and phi(trial, tslack) <= base - 0.25 * t * dec:
                    break
                t *= 0.5
            else:
                break
            nu = trial
        if mu <= mu_final:
            break
        mu *= 0.1
    q = mu / (1.0 - A.T @ nu)
    if not np.all(np.isfinite(q)) or q.sum() <= 0:
        return None
    logq = np.log(np.maximum(q / q.sum(), 1e-300))
    # barrier multipliers are only accurate to ~mu; finish on the support
    for _ in range(8):
        polished = _newton_step(logq, sc, p, 1e-6)
        if polished is None:
            break
        logq = polished
    return np.exp(logq)


def _newton_step(logq, sc, p, thresh):
    """Newton step on {q_j > thresh * max q} with off-support mass fixed; None if no descent."""
    q = np.exp(logq)
    S = q > thresh * q.max()
    A = np.exp(sc - sc.max(axis=1, keepdims=True))
    z = A @ q
    AS = A[:, S]
    g = AS.T @ (p / z)
    Hm = (AS * (p / z**2)[:, None]).T @ AS
    k = int(S.sum())
    kkt = np.zeros((k + 1, k + 1))
    kkt[:k, :k] = Hm
    kkt[:k, k] = 1.0
    kkt[k, :k] = 1.0
    delta = np.linalg.lstsq(kkt, np.concatenate([g, [0.0]]), rcond=None)[0][:k]
    if not np.all(np.isfinite(delta)):
        return None
    qS = q[S]
    neg = delta < 0
    t = min(1.0, float(np.min(-qS[neg] / delta[neg]))) if np.any(neg) else 1.0
    base = _objective(logq, sc, p)
    for _ in range(30):
        new = q.copy()
        new[S] = np.maximum(qS + t * delta, 0.0)
        new /= new.sum()
        cand = np.log(np.maximum(new, 1e-300))
        if _objective(cand, sc, p) < base:
            return cand
        t *= 0.5
    return None


def blahut(problem: RDProblem, slope: float, tol: float = 1e-9, max_iter: int = 5000,
           init=None, accelerate: bool = True) -> BlahutResult:
    """Blahut-Arimoto at Lagrange slope ``slope`` < 0.

    Stops when max_j log c_j - sum_j q_j log c_j < tol, the usual bound on
    the distance of the Lagrangian from its optimum.  Works in the log
    domain so steep slopes do not underflow.  With ``accelerate`` the plain
    iteration is wrapped in SQUAREM extrapolation, and if it has not
    converged after ``IP_AFTER`` updates q is replaced once by an
    interior-point estimate.  Either move is kept only if it does not
    increase the objective, so the objective trace stays non-increasing.  ``iterations`` counts Blahut-Arimoto updates.
    """
    if not slope < 0:
        raise ValidationError("slope must be negative")
    if not tol > 0:
        raise ValidationError("tol must be positive")
    p = problem.source.weights
    logp = np.log(p)
    sc = slope * problem.cost
    m = sc.shape[1]
    if init is None:
        logq = np.full(m, -math.log(m))
    else:
        q0 = np.maximum(np.asarray(init, dtype=np.float64), 1e-300)
        logq = np.log(q0 / q0.sum())
    trace = []
    gap = math.inf
    it = 0
    warm = False
    while it < max_iter:
        q1, obj, gap = _ba_step(logq, logp, sc, p)
        it += 1
        trace.append(obj)
        if gap < tol:
            break
        if not accelerate or it + 2 > max_iter:
            logq = q1
            continue
        if it >= IP_AFTER and not warm:
            warm = True
            q_ip = _interior_point(sc, p)
            if q_ip is not None:
                cand = np.log(np.maximum(q_ip, 1e-300))
                if _objective(cand, sc, p) <= _objective(q1, sc, p):
                    logq = cand
                    continue
        q2, obj1, gap1 = _ba_step(q1, logp, sc, p)
        it += 1
        trace.append(obj1)
        if gap1 < tol:
            logq, gap = q1, gap1
            break
        x0, x1, x2 = np.exp(logq), np.exp(q1), np.exp(q2)
        r, v = x1 - x0, x2 - 2 * x1 + x0
        nv = np.linalg.norm(v)
        alpha = -np.linalg.norm(r) / nv if nv > 0 else -1.0
        alpha = min(alpha, -1.0)
        base_obj = _objective(q2, sc, p)
        while True:
            x = np.maximum(x0 - 2 * alpha * r + alpha * alpha * v, 0.0)
            if x.sum() > 0:
                cand = np.log(np.maximum(x / x.sum(), 1e-300))
                if _objective(cand, sc, p) <= base_obj:
                    logq = cand
                    break
            if alpha == -1.0:
                logq = q2
                break
            alpha = min(-1.0, (alpha - 1.0) / 2.0)
    else:
        raise NumericalError(f"Blahut-Arimoto did not converge in {max_iter} iterations (gap {gap:.3e})")
    if gap >= tol:
        raise NumericalError(f"Blahut-Arimoto did not converge in {max_iter} iterations (gap {gap:.3e})")
    logZ = logsumexp(logq[None, :] + sc, axis=1)
    K = np.exp(logq[None, :] + sc - logZ[:, None])
    K /= K.sum(axis=1, keepdims=True)
    out = p @ K
    distortion = math.fsum((p[:, None] * K * problem.cost).ravel())
    joint = p[:, None] * K
    live = joint > 0
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        terms = np.where(live, joint * (np.log(np.where(live, K, 1.0))
                                        - np.log(np.where(live, out[None, :], 1.0))), 0.0)
    rate = max(math.fsum(terms.ravel()), 0.0)
    if not (math.isfinite(rate) and math.isfinite(distortion)):
        raise NumericalError("non-finite rate or distortion")
    return BlahutResult(rate, distortion, K, out, slope, gap, it, tuple(trace))


@dataclass(frozen=True, eq=False)
class RDCurve:
    rates: np.ndarray
    distortions: np.ndarray
    slopes: np.ndarray

    def points(self):
        return list(zip(self.rates.tolist(), self.distortions.tolist()))


def rd_curve(problem: RDProblem, slopes, tol: float = 1e-9, max_iter: int = 5000) -> RDCurve:
    """Sweep :func:`blahut` over ``slopes``; points returned sorted by rate."""
    slopes = np.asarray(slopes, dtype=np.float64)
    if np.any(slopes >= 0):
        raise ValidationError("slopes must be negative")
    res = [blahut(problem, float(s), tol, max_iter) for s in slopes]
    R = np.array([r.rate for r in res])
    D = np.array([r.distortion for r in res])
    order = np.lexsort((-D, R))
    return RDCurve(R[order], D[order], slopes[order])


@dataclass(frozen=True, eq=False)
class RateTarget:
    """Distortion at a target rate bracketed by the convex curve.

    ``lower`` is the best supporting-line value max_i D_i + (R - R_i)/s_i
    (never above the curve); ``upper`` is the chord between the bracketing
    points (never below it).  ``points`` are the Blahut results used.
    """

    rate: float
    lower: float
    upper: float
    points: tuple

    @property
    def max_gap(self) -> float:
        return max((r.gap for r in self.points), default=0.0)


def distortion_at_rate(problem: RDProblem, rate: float, tol: float = 1e-9, max_iter: int = 5000,
                       iters: int = 80, width: float = 1e-10) -> RateTarget:
    """Distortion-rate value at ``rate`` by bisection on the slope.

    Rate 0 is answered exactly by the best constant.  Otherwise the slope is
    bisected (in log scale) until the tangent lower estimate and the chord
    upper estimate agree within ``width``; on a straight piece of the curve
    both converge to the same value.
    """
    if rate <= 0:
        d0 = problem.zero_rate_distortion()
        return RateTarget(rate, d0, d0, ())
    lo, hi = math.log(SLOPE_RANGE[0]), math.log(SLOPE_RANGE[1])
    steep = blahut(problem, -math.exp(hi), tol, max_iter)
    if steep.rate < rate:
        # target beyond the steepest point: D is flat at its minimum there
        return RateTarget(rate, problem.min_distortion(), steep.distortion, (steep,))
    above, below = steep, None
    used = [steep]
    lower = upper = steep.distortion
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        warm = (below if below is not None else above).output
        r = blahut(problem, -math.exp(mid), tol, max_iter, init=warm)
        used.append(r)
        if r.rate >= rate:
            hi, above = mid, r
        else:
            lo, below = mid, r
        lower = max(u.distortion + (rate - u.rate) / u.slope for u in (above, below) if u is not None)
        # chord to the nearest point below the target, or to (0, D(0))
        r0, d0 = (below.rate, below.distortion) if below is not None else (0.0, problem.zero_rate_distortion())
        span = above.rate - r0
        w = 1.0 if span <= 0 else (rate - r0) / span
        upper = d0 + w * (above.distortion - d0)
        if upper - lower < width:
            break
    return RateTarget(rate, min(lower, upper), upper, tuple(used))


def enrichment_grid(space: DataSpace, resolution: int) -> np.ndarray:
    """Uniform grid of ``resolution`` points per axis over Z's bounding box, kept inside Z."""
    if resolution <= 0:
        return np.zeros((0, space.dimension))
    lo, hi = space.bounding_box()
    axes = [np.linspace(a, b, resolution) for a, b in zip(lo, hi)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, space.dimension)
    return grid[space.contains(grid)]


@dataclass(frozen=True)
class RDLowerBoundReport:
    risk: float
    distortion: float
    distortion_upper: float
    rate_target: float
    max_gap: float
    alphabet_size: int
    holds: bool


def rd_lower_bound_check(P_hat: DiscreteMeasure, f, space: DataSpace, H: LatentSpace,
                         grid_resolution: int = 0, tol: float = 1e-8) -> RDLowerBoundReport:
    """Check risk(f, P_hat) >= D(log k) on the alphabet images(H) plus an optional grid.

    The nearest-image kernel has rate <= log k and lives in this alphabet, so
    the inequality holds for the finite-alphabet D as well.  ``distortion``
    is the supporting-line estimate of D(log k), which is never above it.
    """
    if H.kind != "finite":
        raise ValidationError("rd_lower_bound_check needs a finite latent space")
    images = eval_map(f, space, H.points)
    alphabet = np.vstack([images, enrichment_grid(space, grid_resolution)])
    problem = RDProblem(P_hat, alphabet)
    risk = math.fsum(P_hat.weights * problem.cost[:, : images.shape[0]].min(axis=1))
    target = distortion_at_rate(problem, math.log(H.points.shape[0]), tol=min(tol, 1e-8))
    holds = risk >= target.lower - tol
    if not holds:
        raise AssertionError(f"risk {risk} below distortion-rate value {target.lower}")
    return RDLowerBoundReport(
        risk, target.lower, target.upper, target.rate, target.max_gap, alphabet.shape[0], holds
    )


def cover_bound_value(distortion: float, lam: float, lipschitz: float, eps: float) -> float:
    """lam * D - lam / (1 - lam) * L^2 eps^2."""
    if not 0 < lam < 1:
        raise ValidationError("lambda must lie in (0, 1)")
    return lam * distortion - lam / (1.0 - lam) * lipschitz**2 * eps**2


def cover_lower_bound(P_hat: DiscreteMeasure, f, space: DataSpace, H: LatentSpace, eps: float, lam: float,
                      lipschitz: float | None = None, grid_resolution: int = 0, tol: float = 1e-9):
    """Lower bound from an eps-cover of H at rate log|C_eps|.

    The distortion is computed on the alphabet of cover images plus an
    optional grid; a finite alphabet over-estimates D, so this evaluates the
    formula rather than certifying it.  ``lipschitz`` defaults to the map's
    product bound.
    Returns ``(value, distortion, cover_size)``.
    """
    if not 0 < lam < 1:
        raise ValidationError("lambda must lie in (0, 1)")
    if not eps > 0:
        raise ValidationError("eps must be positive")
    L = f.lipschitz_bound() if lipschitz is None else float(lipschitz)
    net = eps_net(H, eps)
    alphabet = np.vstack([eval_map(f, space, net), enrichment_grid(space, grid_resolution)])
    D = distortion_at_rate(RDProblem(P_hat, alphabet), math.log(net.shape[0]), tol).lower
    return cover_bound_value(D, lam, L, eps), D, net.shape[0]


def cover_lower_bound_grid(P_hat, f, space, H, eps_grid, lam_grid, lipschitz=None, grid_resolution=0):
    """Maximum of :func:`cover_lower_bound` over a (lambda, eps) grid; returns (value, lam, eps)."""
    best = (-math.inf, None, None)
    for eps in eps_grid:
        _, D, _ = cover_lower_bound(P_hat, f, space, H, eps, 0.5, lipschitz, grid_resolution)
        L = f.lipschitz_bound() if lipschitz is None else float(lipschitz)
        for lam in lam_grid:
            v = cover_bound_value(D, lam, L, eps)
            if v > best[0]:
                best = (v, lam, eps)
    return best
