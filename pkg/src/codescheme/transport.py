"""Exact optimal transport between discrete measures and its coding identities."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog
from scipy.sparse import coo_matrix, vstack

from ._backend import kernels
from .maps import eval_map
from .spaces import DataSpace, DiscreteMeasure, ValidationError, sqdist

MARGINAL_TOL = 1e-10
POLLARD_MAX_ATOMS = 12
POLLARD_MAX_K = 4


class NumericalError(ArithmeticError):
    """A solver failed to reach the requested accuracy."""


@dataclass(frozen=True, eq=False)
class Coupling:
    """Transport plan; ``flow[i, j]`` is the mass moved from source i to target j."""

    flow: np.ndarray

    def marginal_residual(self, source_weights, target_weights) -> float:
        rows = np.abs(self.flow.sum(axis=1) - source_weights).max()
        cols = np.abs(self.flow.sum(axis=0) - target_weights).max()
        return float(max(rows, cols))

    @property
    def nnz(self) -> int:
        return int(np.count_nonzero(self.flow))


def cost_matrix(x, y, p: int) -> np.ndarray:
    d2 = sqdist(np.asarray(x)[:, None, :], np.asarray(y)[None, :, :])
    return d2 if p == 2 else np.sqrt(d2)


def _transport_lp(a, b, cost):
    n, m = cost.shape
    rows = np.repeat(np.arange(n), m)
    cols = np.arange(n * m)
    row_block = coo_matrix((np.ones(n * m), (rows, cols)), shape=(n, n * m))
    col_rows = np.tile(np.arange(m), n)
    col_block = coo_matrix((np.ones(n * m), (col_rows, cols)), shape=(m, n * m))
    A_eq = vstack([row_block, col_block]).tocsr()
    b_eq = np.concatenate([a, b])
    res = linprog(
        cost.ravel(),
        A_eq=A_eq,
        b_eq=b_eq,
        bounds=(0, None),
        method="highs-ds",
        options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10},
    )
    if res.status != 0:
        raise NumericalError(f"transport LP failed: {res.message}")
    flow = np.clip(res.x.reshape(n, m), 0.0, None)
    return flow


def wasserstein(P: DiscreteMeasure, Q: DiscreteMeasure, p: int = 2):
    """W_p between discrete measures by the exact transportation LP.

    Returns ``(distance, coupling)``; the optimal cost is ``distance ** p``.
    """
    if p not in (1, 2):
        raise ValidationError("p must be 1 or 2")
    if P.dimension != Q.dimension:
        raise ValidationError("measures live in different dimensions")
    cost = cost_matrix(P.atoms, Q.atoms, p)
    if P.size == 1 or Q.size == 1:
        flow = np.outer(P.weights, Q.weights)
    else:
        flow = _transport_lp(P.weights, Q.weights, cost)
    resid = Coupling(flow).marginal_residual(P.weights, Q.weights)
    if resid > MARGINAL_TOL:
        raise NumericalError(f"coupling marginal residual {resid:.3e} exceeds {MARGINAL_TOL}")
    total = math.fsum((flow * cost).ravel())
    return max(total, 0.0) ** (1.0 / p), Coupling(flow)


def wasserstein_1d(P: DiscreteMeasure, Q: DiscreteMeasure, p: int = 2) -> float:
    """Quantile coupling on the real line; independent of the LP."""
    if P.dimension != 1 or Q.dimension != 1:
        raise ValidationError("1-D measures required")
    xs, xw = P.atoms[:, 0], P.weights
    ys, yw = Q.atoms[:, 0], Q.weights
    ox, oy = np.argsort(xs, kind="stable"), np.argsort(ys, kind="stable")
    xs, xw, ys, yw = xs[ox], xw[ox], ys[oy], yw[oy]
    cx, cy = np.cumsum(xw), np.cumsum(yw)
    cuts = np.unique(np.concatenate([[0.0], cx, cy]))
    cuts = cuts[cuts <= 1.0]
    total = 0.0
    i = j = 0
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        mid = 0.5 * (lo + hi)
        while i < len(cx) - 1 and cx[i] < mid:
            i += 1
        while j < len(cy) - 1 and cy[j] < mid:
            j += 1
        total += (hi - lo) * abs(xs[i] - ys[j]) ** p
    return total ** (1.0 / p)


def pushforward(f, space: DataSpace, pi: DiscreteMeasure) -> DiscreteMeasure:
    """Image measure of ``pi`` under pi_Z o f; coincident images merged."""
    return DiscreteMeasure(eval_map(f, space, pi.atoms), pi.weights).merged()


def best_pushforward(P_hat: DiscreteMeasure, f, space: DataSpace, H_net):
    """Measure on the net minimising W2^2(P_hat, f#pi).

    With the second marginal free the LP separates: each atom goes wholly
    to its nearest image point.  Returns ``(pi_star, w2sq)``.
    """
    H_net = np.atleast_2d(np.asarray(H_net, dtype=np.float64))
    if H_net.shape[0] == 0:
        raise ValidationError("empty latent net")
    images = eval_map(f, space, H_net)
    idx, err = kernels.nearest(P_hat.atoms, images)
    mass = np.zeros(H_net.shape[0])
    np.add.at(mass, idx, P_hat.weights)
    keep = mass > 0
    pi = DiscreteMeasure.normalized(H_net[keep], mass[keep])
    return pi, math.fsum(P_hat.weights * err)


@dataclass(frozen=True, eq=False)
class PollardReport:
    e_k: float
    w2sq_min: float
    labels: np.ndarray
    centroids: np.ndarray
    masses: np.ndarray
    lp_w2sq: float

    @property
    def agrees(self) -> bool:
        return abs(self.e_k - self.w2sq_min) <= 1e-9


def pollard_check(P_hat: DiscreteMeasure, k: int, tol: float = 1e-9) -> PollardReport:
    """Exhaustive check that optimal k-point quantisation equals the best W2^2.

    e_k minimises sum_i w_i min_g ||x_i - c_g||^2 over all groupings (centroids
    as group barycentres); w2sq_min minimises the cost of the coupling that
    sends each group to its barycentre with weight equal to its mass.  The
    optimal k-point measure is re-solved by the exact LP as a certificate.
    """
    n = P_hat.size
    if n > POLLARD_MAX_ATOMS or k > POLLARD_MAX_K:
        raise ValidationError(
            f"pollard_check is exhaustive and capped at n <= {POLLARD_MAX_ATOMS}, k <= {POLLARD_MAX_K}; "
            "use fit_vq_lloyd for larger instances"
        )
    if k < 1:
        raise ValidationError("k must be at least 1")
    e_k, w2, labels = kernels.pollard(P_hat.atoms, P_hat.weights, k)
    used = np.unique(labels)
    masses = np.array([P_hat.weights[labels == g].sum() for g in used])
    centroids = np.array(
        [P_hat.weights[labels == g] @ P_hat.atoms[labels == g] / m for g, m in zip(used, masses)]
    )
    Q = DiscreteMeasure.normalized(centroids, masses)
    lp = wasserstein(P_hat, Q, 2)[0] ** 2
    if abs(e_k - w2) > tol or abs(lp - w2) > 1e-8 * max(1.0, w2):
        raise AssertionError(f"Pollard identity failed: e_k={e_k}, min W2^2={w2}, LP={lp}")
    return PollardReport(e_k, w2, labels, centroids, masses, lp)


def risk_shift_bound(f, space: DataSpace, H_net, P: DiscreteMeasure, Q: DiscreteMeasure):
    """(|R(P,f) - R(Q,f)|, 2 diam(Z) W1(P,Q)) at net level."""
    _, rp = best_pushforward(P, f, space, H_net)
    _, rq = best_pushforward(Q, f, space, H_net)
    w1 = wasserstein(P, Q, 1)[0]
    return abs(rp - rq), 2.0 * space.diameter() * w1
