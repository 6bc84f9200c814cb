"""Generalization bound calculators, covering numbers and the Maurey oracle.

All logarithms are natural.  Every calculator returns a :class:`BoundReport`
that echoes the constants it used and flags values above diam(Z)^2, which
are vacuous since the loss never exceeds diam(Z)^2.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, optimize, special

from .maps import ArchitectureSpec
from .spaces import ValidationError

MAUREY_EXACT_TERMS = 10**6  # pieces summed exactly before the tail estimate


@dataclass(frozen=True)
class BoundReport:
    name: str
    value: float
    delta: float | None
    n: int
    constants: dict = field(default_factory=dict)
    terms: tuple = ()
    vacuous: bool = False

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "value": self.value,
            "delta": self.delta,
            "n": self.n,
            "vacuous": self.vacuous,
            "terms": list(self.terms),
            "constants": self.constants,
        }


def _report(name, terms, delta, n, diam, **constants) -> BoundReport:
    value = math.fsum(terms)
    constants = {"diam": diam, **constants}
    return BoundReport(name, value, delta, int(n), constants, tuple(terms), value > diam**2)


def _check_common(n, delta, diam):
    if n < 1:
        raise ValidationError("n must be at least 1")
    if delta is not None and not 0 < delta < 1:
        raise ValidationError("delta must lie in (0, 1)")
    if diam < 0:
        raise ValidationError("diameter must be nonnegative")


def confidence_term(diam, n, delta, two_sided=True) -> float:
    """diam^2 sqrt(2 log(2/delta) / n), or log(1/delta) when one-sided."""
    return diam**2 * math.sqrt(2.0 * math.log((2.0 if two_sided else 1.0) / delta) / n)


# --------------------------------------------------------------------------
# Covering numbers
# --------------------------------------------------------------------------


def maurey_logcover(M: float, d_rows: int, k_cols: int, eps: float) -> float:
    """ceil(M^2/eps^2) log(1 + 2 d k eps^2 / M^2) for eps <= M, else 0."""
    if not eps > 0:
        raise ValidationError("eps must be positive")
    if M <= 0 or eps > M:
        return 0.0
    t = math.ceil(M * M / (eps * eps))
    return t * math.log1p(2.0 * d_rows * k_cols * eps * eps / (M * M))


def _maurey_envelope(t, a):
    # g(t) = t log(1 + a/t): the monotone envelope of the Maurey bound at ceil(M^2/eps^2) = t
    t = np.asarray(t, dtype=np.float64)
    return t * np.log1p(a / t)


@dataclass(frozen=True, eq=False)
class CoveringFunction:
    """eps -> log N(eps), non-increasing and nonnegative.

    * ``maurey(M, d, k)``: the Maurey bound made monotone.  Any cover at a
      finer scale is also a cover, so inf over eps' <= eps of the raw bound
      is valid; it equals g(ceil(M^2/eps^2)) with g(t) = t log(1 + 2dk/t).
    * ``volumetric(param_count, scale)``: P log(scale/eps) below ``scale``.
    * ``tabulated(pairs)``: step function; at eps it uses the entry with the
      largest tabulated radius <= eps (the smallest radius below that).
    """

    kind: str
    M: float = 0.0
    d: int = 0
    k: int = 0
    param_count: int = 0
    scale: float = 0.0
    table: tuple = ()

    @classmethod
    def maurey(cls, M, d, k):
        if M < 0 or d < 1 or k < 1:
            raise ValidationError("invalid Maurey parameters")
        return cls("maurey", M=float(M), d=int(d), k=int(k))

    @classmethod
    def volumetric(cls, param_count, scale):
        if param_count < 0 or scale < 0:
            raise ValidationError("invalid volumetric parameters")
        return cls("volumetric", param_count=int(param_count), scale=float(scale))

    @classmethod
    def tabulated(cls, pairs):
        pairs = sorted((float(e), float(v)) for e, v in pairs)
        if not pairs:
            raise ValidationError("empty covering table")
        if any(e <= 0 or v < 0 for e, v in pairs):
            raise ValidationError("table entries need eps > 0 and logN >= 0")
        if any(b[1] > a[1] for a, b in zip(pairs[:-1], pairs[1:])):
            raise ValidationError("tabulated logN must be non-increasing in eps")
        return cls("tabulated", table=tuple(pairs))

    @property
    def support(self) -> float:
        """Radius beyond which log N = 0 (inf if never)."""
        if self.kind == "maurey":
            return self.M
        if self.kind == "volumetric":
            return self.scale
        return self.table[-1][0] if self.table[-1][1] == 0 else math.inf

    def __call__(self, eps: float) -> float:
        if not eps > 0:
            raise ValidationError("eps must be positive")
        if self.kind == "maurey":
            if self.M <= 0 or eps > self.M:
                return 0.0
            return float(_maurey_envelope(math.ceil(self.M**2 / eps**2), 2.0 * self.d * self.k))
        if self.kind == "volumetric":
            if eps >= self.scale or self.param_count == 0:
                return 0.0
            return self.param_count * math.log(self.scale / eps)
        idx = np.searchsorted([e for e, _ in self.table], eps, side="right") - 1
        return self.table[max(int(idx), 0)][1]

    def breakpoints(self, lo: float, hi: float):
        """Discontinuities inside (lo, hi); used to guide quadrature."""
        if self.kind == "tabulated":
            return [e for e, _ in self.table if lo < e < hi]
        if self.kind == "maurey" and self.M > 0:
            t_lo = max(1, math.ceil(self.M**2 / hi**2))
            t_hi = math.floor(self.M**2 / lo**2) if lo > 0 else t_lo + 50
            ts = range(t_lo, min(t_hi, t_lo + 45) + 1)
            return [self.M / math.sqrt(t) for t in ts if lo < self.M / math.sqrt(t) < hi]
        return []

    def to_dict(self) -> dict:
        if self.kind == "maurey":
            return {"kind": "maurey", "M": self.M, "d": self.d, "k": self.k}
        if self.kind == "volumetric":
            return {"kind": "volumetric", "param_count": self.param_count, "scale": self.scale}
        return {"kind": "tabulated", "table": [list(p) for p in self.table]}


def _integral_maurey(cover: CoveringFunction, lo: float, hi: float) -> float:
    # the envelope is constant on each (M/sqrt(t), M/sqrt(t-1)]
    M, a = cover.M, 2.0 * cover.d * cover.k
    hi = min(hi, M)
    if M <= 0 or hi <= lo:
        return 0.0
    t_first = max(2, math.ceil(M * M / (hi * hi)))
    t_last = math.inf if lo <= 0 else math.ceil(M * M / (lo * lo) - 1e-12)
    total = 0.0
    # partial first piece (hi may sit inside a piece)
    t_end = int(min(t_last, t_first + MAUREY_EXACT_TERMS))
    ts = np.arange(t_first, t_end + 1, dtype=np.float64)
    upper = np.minimum(M / np.sqrt(ts - 1.0), hi)
    lower = np.maximum(M / np.sqrt(ts), lo)
    total = math.fsum(np.sqrt(_maurey_envelope(ts, a)) * np.clip(upper - lower, 0.0, None))
    if t_end < t_last:
        # remaining pieces lie in [lo, M/sqrt(t_end)], integrand between sqrt(g(t_end)) and sqrt(a)
        width = M / math.sqrt(t_end) - max(lo, 0.0)
        total += 0.5 * (math.sqrt(_maurey_envelope(t_end, a)) + math.sqrt(a)) * width
    return total


def _integral_volumetric(cover: CoveringFunction, lo: float, hi: float) -> float:
    S, P = cover.scale, cover.param_count
    hi = min(hi, S)
    if P == 0 or S <= 0 or hi <= lo:
        return 0.0
    # u = S e^{-y}: integral = S sqrt(P) * int y^{1/2} e^{-y} dy = S sqrt(P) Gamma(3/2) [Q(3/2, y1) - Q(3/2, y2)]
    y1 = math.log(S / hi)
    y2 = math.inf if lo <= 0 else math.log(S / lo)
    q2 = 0.0 if math.isinf(y2) else special.gammaincc(1.5, y2)
    return float(S * math.sqrt(P) * special.gamma(1.5) * (special.gammaincc(1.5, y1) - q2))


def _integral_tabulated(cover: CoveringFunction, lo: float, hi: float) -> float:
    if hi <= lo:
        return 0.0
    eps = [e for e, _ in cover.table]
    cuts = sorted({lo, hi, *[e for e in eps if lo < e < hi]})
    return math.fsum(math.sqrt(cover(0.5 * (a + b) if a > 0 else b)) * (b - a) for a, b in zip(cuts[:-1], cuts[1:]))


def sqrt_logcover_integral(cover: CoveringFunction, lo: float, hi: float, method: str = "exact") -> float:
    """int_lo^hi sqrt(log N(u)) du, exactly per kind or by adaptive quadrature."""
    if hi <= lo:
        return 0.0
    if method == "quad":
        f = lambda u: math.sqrt(cover(u)) if u > 0 else math.sqrt(cover(1e-300))
        pts = cover.breakpoints(lo, hi)
        with warnings.catch_warnings():
            # step integrands exhaust the subdivision limit without losing accuracy
            warnings.simplefilter("ignore", integrate.IntegrationWarning)
            val, _ = integrate.quad(f, lo, hi, points=pts or None, epsabs=1e-13, epsrel=1e-10, limit=500)
        return float(val)
    if cover.kind == "maurey":
        return _integral_maurey(cover, lo, hi)
    if cover.kind == "volumetric":
        return _integral_volumetric(cover, lo, hi)
    return _integral_tabulated(cover, lo, hi)


@dataclass(frozen=True)
class EntropyIntegral:
    value: float
    alpha: float


def entropy_integral(cover: CoveringFunction, diam_Z: float, n: int, alpha="inf", method="exact") -> EntropyIntegral:
    """inf over alpha of alpha sqrt(n)/6 + int_alpha^{diam/2} sqrt(log N(u)) du.

    ``alpha="inf"`` takes the numerical infimum: the objective is convex, its
    minimiser is where log N(alpha) crosses n/36, found by bisection on the
    monotone covering function and confirmed by a bounded scalar search.
    ``alpha="preset"`` uses diam/(2 sqrt(n)); a float fixes alpha.
    """
    if n < 1:
        raise ValidationError("n must be at least 1")
    top = diam_Z / 2.0
    rn = math.sqrt(n)

    def objective(a):
        return a * rn / 6.0 + sqrt_logcover_integral(cover, a, top, method)

    if alpha == "preset":
        a = diam_Z / (2.0 * rn)
        return EntropyIntegral(objective(a), a)
    if not isinstance(alpha, str):
        a = float(alpha)
        if a < 0:
            raise ValidationError("alpha must be nonnegative")
        return EntropyIntegral(objective(a), a)
    if alpha != "inf":
        raise ValidationError(f"unknown alpha rule {alpha!r}")
    if top <= 0:
        return EntropyIntegral(0.0, 0.0)
    level = n / 36.0
    lo, hi = 0.0, top
    if cover(top) > level:
        cand = [top]
    else:
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if mid <= 0 or cover(mid) > level:
                lo = mid
            else:
                hi = mid
        cand = [lo, hi]
    res = optimize.minimize_scalar(objective, bounds=(0.0, top), method="bounded", options={"xatol": 1e-12 * max(top, 1.0)})
    cand += [0.0, top, float(res.x)]
    best = min(cand, key=objective)
    return EntropyIntegral(objective(best), best)


# --------------------------------------------------------------------------
# Maurey sparsification
# --------------------------------------------------------------------------


def maurey_draws(v, M: float, k: int, rng) -> np.ndarray:
    """Average of k i.i.d. signed basis draws U with E U = v.

    U = M sign(v_i) e_i with probability |v_i| / M, else 0.
    """
    v = np.asarray(v, dtype=np.float64)
    if M <= 0:
        return np.zeros_like(v)
    probs = np.abs(v) / M
    rest = max(0.0, 1.0 - probs.sum())
    p = np.concatenate([probs, [rest]])
    p = p / p.sum()
    counts = rng.multinomial(k, p)[:-1]
    return M * np.sign(v) * counts / k


def maurey_sparsify(v, eps: float, seed: int = 0, M: float | None = None, max_tries: int = 1000):
    """k-sparse average of signed basis vectors within ``eps`` of ``v`` in l2.

    ``M`` defaults to ||v||_1 (or 1 for v = 0).  Returns ``(u_bar, k)``.
    """
    v = np.asarray(v, dtype=np.float64)
    l1 = float(np.abs(v).sum())
    M = (l1 if l1 > 0 else 1.0) if M is None else float(M)
    if l1 > M * (1 + 1e-12):
        raise ValidationError("v lies outside the l1 ball of radius M")
    if not eps > 0:
        raise ValidationError("eps must be positive")
    k = math.ceil(M * M / (eps * eps))
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        u = maurey_draws(v, M, k, rng)
        if np.linalg.norm(u - v) <= eps:
            return u, k
    raise ArithmeticError(f"no draw within eps after {max_tries} tries")


# --------------------------------------------------------------------------
# Bound calculators
# --------------------------------------------------------------------------


def wasserstein_constant(q: float, d: int) -> float:
    """C_{q,d} of the Wasserstein-rate bound."""
    if not q > 2 or d < 3:
        raise ValidationError("need q > 2 and d >= 3")
    e = (d - 1) / d * q
    first = 18 * d * 2**d * 2**e / (0.5 - 2 ** (-e))
    second = 6 * d * 2 ** (d / 2) * 2 ** (q / 2) / (1 - 2 ** ((2 - q) / 2))
    return first + second


def bound_thm_wasserstein(q, d, diam_Z, moment_q, n, delta) -> BoundReport:
    """C_{q,d} diam moment^{1/q} n^{-1/d} + diam^2 sqrt(2 log(1/delta)/n)."""
    _check_common(n, delta, diam_Z)
    if moment_q < 0:
        raise ValidationError("moment must be nonnegative")
    C = wasserstein_constant(q, d)
    terms = (
        C * diam_Z * moment_q ** (1.0 / q) * n ** (-1.0 / d),
        diam_Z**2 * math.sqrt(2.0 * math.log(1.0 / delta) / n),
    )
    return _report("wasserstein_rate", terms, delta, n, diam_Z, q=q, d=d, moment_q=moment_q, C_qd=C)


def bound_thm_complexity(entropy_int_value, diam_Z, n, delta, one_sided=False) -> BoundReport:
    """96 diam E / sqrt(n) + diam^2 sqrt(2 log(2/delta)/n).

    ``one_sided`` gives the single-direction form 48 diam E / sqrt(n) +
    diam^2 sqrt(2 log(1/delta)/n).
    """
    _check_common(n, delta, diam_Z)
    coef = 48.0 if one_sided else 96.0
    terms = (
        coef * diam_Z * entropy_int_value / math.sqrt(n),
        confidence_term(diam_Z, n, delta, two_sided=not one_sided),
    )
    name = "entropy_integral_one_sided" if one_sided else "entropy_integral"
    return _report(name, terms, delta, n, diam_Z, entropy_integral=entropy_int_value, coefficient=coef)


def _sum_log_widths(widths):
    return math.fsum(math.log(2 * a * b + 1) for a, b in zip(widths[:-1], widths[1:]))


def bound_dense_wide(spec: ArchitectureSpec, n, delta) -> BoundReport:
    if spec.kind != "dense":
        raise ValidationError("wide-net bound needs a dense architecture")
    if not all(spec.zizo):
        raise ValidationError("wide-net bound needs zero-in zero-out activations; use bound_sigmoid")
    diam = spec.data_diameter
    _check_common(n, delta, diam)
    ell, lm = spec.depth, spec.lm_product()
    first = (48 * math.sqrt(2) * ell * math.log(n) / math.sqrt(n)) * diam * spec.latent_max_norm * lm * math.sqrt(
        _sum_log_widths(spec.widths)
    )
    terms = (first, 8 * diam**2 / math.sqrt(n), confidence_term(diam, n, delta))
    return _report("dense_wide", terms, delta, n, diam, depth=ell, lm_product=lm,
                   latent_max_norm=spec.latent_max_norm, widths=list(spec.widths))


def _param_bound(name, diam, params, log_arg, n, delta, **constants):
    _check_common(n, delta, diam)
    if not log_arg > 1:
        raise ValidationError(f"log argument {log_arg} <= 1: degenerate scale")
    first = diam**2 * math.sqrt(2 * params) / math.sqrt(n) * math.sqrt(math.log(log_arg))
    terms = (first, confidence_term(diam, n, delta), 4 / math.sqrt(n))
    return _report(name, terms, delta, n, diam, param_count=params, log_argument=log_arg, **constants)


def bound_dense_deep(spec: ArchitectureSpec, n, delta) -> BoundReport:
    if spec.kind != "dense":
        raise ValidationError("deep-net bound needs a dense architecture")
    lm = spec.lm_product()
    arg = 3 * spec.depth * math.sqrt(n) * spec.latent_max_norm * lm
    return _param_bound("dense_deep", spec.data_diameter, spec.param_count(), arg, n, delta,
                        depth=spec.depth, lm_product=lm, latent_max_norm=spec.latent_max_norm,
                        widths=list(spec.widths))


def bound_cnn(spec: ArchitectureSpec, n, delta) -> BoundReport:
    if spec.kind != "conv":
        raise ValidationError("convolutional bound needs a conv architecture")
    m_prod = math.prod(spec.budgets)
    arg = 3 * spec.depth * math.sqrt(n) * spec.latent_max_norm * m_prod
    return _param_bound("cnn", spec.data_diameter, spec.param_count(), arg, n, delta,
                        depth=spec.depth, budget_product=m_prod, latent_max_norm=spec.latent_max_norm,
                        channels=list(spec.channels), filter_sizes=[list(u) for u in spec.filter_sizes])


def bound_sigmoid(spec: ArchitectureSpec, n, delta) -> BoundReport:
    """Bounded-output activations; B_0 = ||H||_inf, B_1.. from ``output_bounds``."""
    if spec.kind != "dense":
        raise ValidationError("bounded-output bound needs a dense architecture")
    ell = spec.depth
    if ell > 1 and (spec.output_bounds is None or len(spec.output_bounds) < ell - 1):
        raise ValidationError("output bounds B_1..B_{l-1} are required")
    diam = spec.data_diameter
    _check_common(n, delta, diam)
    B = [spec.latent_max_norm] + list(spec.output_bounds or ())
    LM = [l * m for l, m in zip(spec.lipschitz, spec.budgets)]
    weight = math.fsum(B[i] * math.prod(LM[i:]) for i in range(ell))
    first = (48 * math.sqrt(2) * math.log(n) / math.sqrt(n)) * weight * math.sqrt(_sum_log_widths(spec.widths))
    terms = (first, 8 * diam**2 / math.sqrt(n), confidence_term(diam, n, delta))
    return _report("dense_bounded_output", terms, delta, n, diam, depth=ell, output_bounds=B,
                   weighted_sum=weight, widths=list(spec.widths))


def bound_lemma21(B, d_cover, C, n, delta) -> BoundReport:
    """B (sqrt(d log(C sqrt n)/(2n)) + sqrt(log(1/delta)/(2n))) + 2/sqrt(n)."""
    if n < 1 or not 0 < delta < 1:
        raise ValidationError("need n >= 1 and delta in (0, 1)")
    if C * math.sqrt(n) < 1:
        raise ValidationError("C sqrt(n) must be at least 1")
    terms = (
        B * math.sqrt(d_cover * math.log(C * math.sqrt(n)) / (2 * n)),
        B * math.sqrt(math.log(1 / delta) / (2 * n)),
        2 / math.sqrt(n),
    )
    value = math.fsum(terms)
    return BoundReport("single_cover", value, delta, int(n),
                       {"B": B, "d_cover": d_cover, "C": C}, terms, value > B)


def applicable_bounds(spec: ArchitectureSpec, n, delta):
    """Every network bound whose hypotheses the architecture meets."""
    reports = []
    if spec.kind == "conv":
        candidates = [bound_cnn]
    elif all(spec.zizo):
        candidates = [bound_dense_deep]
        if spec.budget_norm == "entrywise_l1":
            candidates.insert(0, bound_dense_wide)
            candidates.append(bound_sigmoid)
    else:
        candidates = [bound_sigmoid] if spec.budget_norm == "entrywise_l1" else []
    for fn in candidates:
        try:
            reports.append(fn(spec, n, delta))
        except ValidationError:
            continue
    return reports
