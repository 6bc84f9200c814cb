"""Encoders, empirical risk and training of coding schemes.

A coding scheme is a latent set H plus a reconstruction map f; a point z is
encoded by the latent minimising ||z - pi_Z f(h)||^2.  Search is exhaustive
over a deterministic eps-net of H (exact when H is finite), optionally
refined by projected gradient descent from the best net points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._backend import kernels
from .maps import LinearMap, eval_map
from .spaces import Dataset, DataSpace, DiscreteMeasure, LatentSpace, ValidationError, eps_net, sqdist


class TrainingDivergence(ArithmeticError):
    """Parameters became non-finite during training."""

    def __init__(self, iteration: int, message: str = "non-finite parameters"):
        super().__init__(f"{message} at outer iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class EncodeStrategy:
    kind: str = "exhaustive"
    net_eps: float = 0.05
    gd_steps: int = 0
    step_size: float = 0.5
    restarts: int = 1

    def __post_init__(self):
        if self.kind not in ("exhaustive", "refined"):
            raise ValidationError(f"unknown encode strategy {self.kind!r}")
        if not self.net_eps > 0:
            raise ValidationError("net_eps must be positive")
        if self.gd_steps < 0 or self.restarts < 1 or not self.step_size > 0:
            raise ValidationError("need gd_steps >= 0, restarts >= 1, step_size > 0")

    @classmethod
    def exhaustive(cls, net_eps: float = 0.05) -> "EncodeStrategy":
        return cls("exhaustive", net_eps)

    @classmethod
    def refined(cls, net_eps=0.1, gd_steps=50, step_size=0.5, restarts=1) -> "EncodeStrategy":
        return cls("refined", net_eps, gd_steps, step_size, restarts)


@dataclass(frozen=True)
class TrainConfig:
    outer_iterations: int = 20
    latent_strategy: EncodeStrategy = field(default_factory=EncodeStrategy)
    param_step_size: float = 0.5
    param_steps_per_outer: int = 5
    seed: int = 0
    budget_enforcement: str = "rescale"

    def __post_init__(self):
        if self.outer_iterations < 1 or self.param_steps_per_outer < 0:
            raise ValidationError("outer_iterations >= 1 and param_steps_per_outer >= 0 required")
        if not self.param_step_size > 0:
            raise ValidationError("param_step_size must be positive")
        if self.budget_enforcement != "rescale":
            raise ValidationError("only 'rescale' budget enforcement is supported")


# --------------------------------------------------------------------------
# Encoding
# --------------------------------------------------------------------------


def _errors(f, space, Z, h):
    return sqdist(Z, eval_map(f, space, h))


def _latent_grad(f, space, Z, h):
    out, cache = f.forward_cached(h)
    proj = space.project(out)
    g_out = space.project_vjp(out, 2.0 * (proj - Z))
    _, g_h = f.backward(cache, g_out)
    return g_h


def _refine(f, space, H, Z, h, err, strategy):
    """Projected gradient descent on each latent; only improving steps are kept."""
    step = np.full(Z.shape[0], strategy.step_size)
    for _ in range(strategy.gd_steps):
        g = _latent_grad(f, space, Z, h)
        trial = H.project(h - step[:, None] * g)
        trial_err = _errors(f, space, Z, trial)
        better = trial_err < err
        h = np.where(better[:, None], trial, h)
        err = np.where(better, trial_err, err)
        step = np.where(better, step, step * 0.5)
    return h, err


def encode_batch(Z, f, space: DataSpace, H: LatentSpace, strategy: EncodeStrategy):
    """Encode every row of ``Z``; returns (latents, squared errors)."""
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    net = eps_net(H, strategy.net_eps)
    images = eval_map(f, space, net)
    idx, err = kernels.nearest(Z, images)
    h = net[idx]
    if strategy.kind != "refined" or strategy.gd_steps == 0 or H.kind == "finite":
        return h, err
    best_h, best_err = _refine(f, space, H, Z, h, err, strategy)
    if strategy.restarts > 1:
        # further starts from the next-best net points (stable order: lowest index first)
        order = np.argsort(sqdist(Z[:, None, :], images[None, :, :]), axis=1, kind="stable")
        for r in range(1, min(strategy.restarts, net.shape[0])):
            start = net[order[:, r]]
            h_r, err_r = _refine(f, space, H, Z, start, _errors(f, space, Z, start), strategy)
            better = err_r < best_err
            best_h = np.where(better[:, None], h_r, best_h)
            best_err = np.where(better, err_r, best_err)
    return best_h, best_err


def encode(z, f, space: DataSpace, H: LatentSpace, strategy: EncodeStrategy):
    """Best latent for one point and its squared reconstruction error."""
    h, err = encode_batch(np.asarray(z, dtype=np.float64)[None, :], f, space, H, strategy)
    return h[0], float(err[0])


def empirical_risk(f, data, H: LatentSpace, strategy: EncodeStrategy, space: DataSpace | None = None):
    """Mean minimal reconstruction error under the empirical measure.

    ``data`` is a :class:`Dataset` (uniform weights) or a
    :class:`DiscreteMeasure` (its weights; ``space`` then required).
    """
    if isinstance(data, Dataset):
        space = data.space if space is None else space
        _, err = encode_batch(data.samples, f, space, H, strategy)
        return math.fsum(err) / err.shape[0]
    if space is None:
        raise ValidationError("a data space is required for measure input")
    _, err = encode_batch(data.atoms, f, space, H, strategy)
    return math.fsum(data.weights * err)


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


def reconstruction_loss(f, space: DataSpace, Z, h):
    """Mean of ||Z_i - pi_Z f(h_i)||^2 with latents held fixed."""
    return math.fsum(_errors(f, space, Z, h)) / Z.shape[0]


def loss_and_grad(f, space: DataSpace, Z, h):
    """Fixed-latent loss and its gradient in every parameter array, by backprop."""
    Z = np.atleast_2d(Z)
    out, cache = f.forward_cached(h)
    proj = space.project(out)
    resid = proj - Z
    loss = math.fsum(sqdist(proj, Z)) / Z.shape[0]
    g_out = space.project_vjp(out, 2.0 * resid / Z.shape[0])
    grads, _ = f.backward(cache, g_out)
    return loss, grads


def _check_finite(params, iteration):
    for p in params:
        if not np.all(np.isfinite(p)):
            raise TrainingDivergence(iteration)


def erm_train(template, data: Dataset, H: LatentSpace, config: TrainConfig):
    """Alternating minimisation of the empirical risk starting from ``template``.

    Each outer iteration takes ``param_steps_per_outer`` gradient steps on
    the parameters with latents fixed (a step is halved until the loss does
    not increase; weights are rescaled onto their budgets inside the trial),
    then re-encodes every sample, keeping its previous latent when the new
    search is not strictly better.  Returns ``(map, risk_trace)`` where
    ``risk_trace[t]`` is the empirical risk after outer iteration t (entry 0
    is the initialisation).
    """
    space = data.space
    Z = data.samples
    f = template.rescaled()
    strategy = config.latent_strategy
    h, err = encode_batch(Z, f, space, H, strategy)
    trace = [math.fsum(err) / Z.shape[0]]
    for t in range(1, config.outer_iterations + 1):
        for _ in range(config.param_steps_per_outer):
            loss, grads = loss_and_grad(f, space, Z, h)
            _check_finite(grads, t)
            params = f.params()
            step = config.param_step_size
            for _halving in range(40):
                trial_params = [p - step * g for p, g in zip(params, grads)]
                _check_finite(trial_params, t)
                trial = f.with_params(trial_params, project=True)
                if reconstruction_loss(trial, space, Z, h) <= loss:
                    f = trial
                    break
                step *= 0.5
        carried = _errors(f, space, Z, h)
        h_new, err_new = encode_batch(Z, f, space, H, strategy)
        take = err_new < carried
        h = np.where(take[:, None], h_new, h)
        err = np.where(take, err_new, carried)
        trace.append(math.fsum(err) / Z.shape[0])
    return f, trace


# --------------------------------------------------------------------------
# Closed-form and classical fitters
# --------------------------------------------------------------------------


def fit_pca(data: Dataset, k: int):
    """Top-k eigenvectors of the uncentred second moment (1/n) sum Z_i Z_i^T.

    Returns ``(LinearMap isometry, risk)`` where risk is the sum of the d - k
    smallest eigenvalues.
    """
    Z = data.samples
    n, d = Z.shape
    if not 1 <= k <= d:
        raise ValidationError(f"need 1 <= k <= d = {d}, got k = {k}")
    second = Z.T @ Z / n
    vals, vecs = np.linalg.eigh(second)
    order = np.argsort(vals)[::-1]
    top = vecs[:, order[:k]]
    # sign convention: largest-magnitude entry of each column is positive
    signs = np.sign(top[np.argmax(np.abs(top), axis=0), np.arange(k)])
    top = top * np.where(signs == 0, 1.0, signs)
    residual = math.fsum(np.clip(vals[order[k:]], 0.0, None))
    return LinearMap(top), residual


def _kmeanspp(Z, k, rng):
    n = Z.shape[0]
    centers = [Z[int(rng.integers(n))]]
    d2 = sqdist(Z, centers[0])
    while len(centers) < k:
        total = d2.sum()
        if total <= 0:
            centers.append(centers[0])
            continue
        i = int(rng.choice(n, p=d2 / total))
        centers.append(Z[i])
        d2 = np.minimum(d2, sqdist(Z, Z[i]))
    return np.array(centers)


def fit_vq_lloyd(data: Dataset, k: int, seed: int = 0, init=None, max_iter: int = 1000):
    """Lloyd iterations from k-means++ seeding (or explicit ``init`` codewords).

    Ties in nearest-codeword assignment go to the lowest index.  Returns
    ``(LinearMap with columns = codewords, risk, risk_trace)``; the map is
    meant to be used with ``LatentSpace.codebook(k)``.
    """
    if k < 1:
        raise ValidationError("k must be at least 1")
    Z = data.samples
    if init is None:
        codewords = _kmeanspp(Z, k, np.random.default_rng(seed))
    else:
        codewords = np.array(init, dtype=np.float64).reshape(k, Z.shape[1])
    labels, err = kernels.nearest(Z, codewords)
    trace = [math.fsum(err) / Z.shape[0]]
    for _ in range(max_iter):
        for j in range(k):
            members = labels == j
            if np.any(members):
                codewords[j] = Z[members].mean(axis=0)
        new_labels, err = kernels.nearest(Z, codewords)
        trace.append(math.fsum(err) / Z.shape[0])
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return LinearMap.from_codewords(codewords), trace[-1], trace


@dataclass(frozen=True)
class ExcessRiskReport:
    excess: float
    bound: float
    train_risks: tuple
    test_risks: tuple
    f_hat_is_erm: bool
    holds: bool


def excess_risk_check(f_hat, candidates, train: Dataset, test: Dataset, H, strategy, tol=1e-9):
    """Compare R_test(f_hat) - min_f R_test(f) with 2 max_f |R_train(f) - R_test(f)|.

    The inequality is guaranteed only when f_hat minimises the training risk
    among the candidates; ``holds`` is reported either way.
    """
    maps = [f_hat] + list(candidates)
    train_r = [empirical_risk(f, train, H, strategy) for f in maps]
    test_r = [empirical_risk(f, test, H, strategy) for f in maps]
    excess = test_r[0] - min(test_r[1:]) if candidates else 0.0
    bound = 2.0 * max(abs(a - b) for a, b in zip(train_r, test_r))
    is_erm = train_r[0] <= min(train_r[1:], default=train_r[0])
    holds = excess <= bound + tol
    if is_erm and not holds:
        raise AssertionError(f"excess risk {excess} exceeds 2*sup gap {bound}")
    return ExcessRiskReport(excess, bound, tuple(train_r), tuple(test_r), is_erm, holds)
