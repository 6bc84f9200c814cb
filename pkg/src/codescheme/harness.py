"""Synthetic experiments: sampling, generalization-gap measurement and rate studies.

Every draw comes from a Philox stream keyed by ``(seed, replication,
purpose)``, so results do not depend on how replications are scheduled
across workers.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import bounds as _bounds
from .coding import EncodeStrategy, TrainConfig, TrainingDivergence, empirical_risk, erm_train, fit_pca, fit_vq_lloyd
from .maps import ArchitectureSpec, DenseNet, map_from_dict
from .spaces import Dataset, DataSpace, DiscreteMeasure, LatentSpace, ValidationError

PURPOSES = {"train": 0, "test": 1, "init": 2, "population": 3}
DISTRIBUTIONS = ("uniform-box", "clipped-gaussian-mixture", "embedded-manifold", "finite")
FAMILIES = ("fixed", "dense", "vq", "pca")
BOUND_NAMES = ("dense_deep", "dense_wide", "dense_bounded_output", "cnn", "hoeffding")


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    """Everything needed to reproduce a gap or rate experiment.

    ``distribution`` is a dict with ``kind`` in :data:`DISTRIBUTIONS`:

    * ``uniform-box``: uniform on ``lower``/``upper`` (default: Z's bounding box).
    * ``clipped-gaussian-mixture``: ``means``, ``covariances``, optional ``weights``.
    * ``embedded-manifold``: ``intrinsic_dim`` latent uniform on [-1, 1]^m,
      pushed through ``embedding`` (a map dict) plus Gaussian ``noise``.
    * ``finite``: ``atoms`` with optional ``weights``.

    Samples are always projected into ``space``.  ``family`` is a dict with
    ``kind`` in :data:`FAMILIES`: ``fixed`` (``map`` dict, no training),
    ``dense`` (``widths``, ``activation``, ``budgets``, ``norm_kind``),
    ``vq`` (``k``) or ``pca`` (``k``).
    """

    distribution: dict
    space: DataSpace
    latent: LatentSpace
    family: dict
    n_train: int = 100
    n_test: int = 10_000
    replications: int = 10
    seed: int = 0
    strategy: EncodeStrategy = field(default_factory=EncodeStrategy)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(outer_iterations=5))
    bounds: tuple = ()
    delta: float = 0.05
    exact_population: bool = False

    def __post_init__(self):
        if min(self.n_train, self.n_test, self.replications) < 1:
            raise ValidationError("n_train, n_test and replications must be at least 1")
        if self.seed < 0:
            raise ValidationError("seed must be nonnegative")
        if not 0 < self.delta < 1:
            raise ValidationError("delta must lie in (0, 1)")
        kind = self.distribution.get("kind")
        if kind not in DISTRIBUTIONS:
            raise ValidationError(f"unknown distribution kind {kind!r}")
        if self.family.get("kind") not in FAMILIES:
            raise ValidationError(f"unknown family kind {self.family.get('kind')!r}")
        unknown = set(self.bounds) - set(BOUND_NAMES)
        if unknown:
            raise ValidationError(f"unknown bounds {sorted(unknown)}")
        if self.exact_population and kind != "finite":
            raise ValidationError("exact_population needs a finite distribution")
        object.__setattr__(self, "bounds", tuple(self.bounds))

    def with_(self, **changes) -> "ExperimentConfig":
        fields = {k: getattr(self, k) for k in self.__dataclass_fields__}
        fields.update(changes)
        return ExperimentConfig(**fields)


def stream(config: ExperimentConfig, replication: int, purpose: str) -> np.random.Generator:
    """Counter-based generator for one (replication, purpose) pair."""
    seq = np.random.SeedSequence([config.seed, replication, PURPOSES[purpose]])
    return np.random.Generator(np.random.Philox(seq))


def _finite_measure(dist) -> DiscreteMeasure:
    atoms = np.atleast_2d(np.asarray(dist["atoms"], dtype=np.float64))
    weights = dist.get("weights")
    if weights is None:
        return DiscreteMeasure.uniform(atoms)
    return DiscreteMeasure.normalized(atoms, np.asarray(weights, dtype=np.float64))


def population_measure(config: ExperimentConfig) -> DiscreteMeasure:
    """The data law itself, for finite distributions (projected into Z)."""
    if config.distribution["kind"] != "finite":
        raise ValidationError("population measure only available for finite distributions")
    mu = _finite_measure(config.distribution)
    return DiscreteMeasure(config.space.project(mu.atoms), mu.weights)


def _draw(dist, space: DataSpace, count: int, rng) -> np.ndarray:
    kind = dist["kind"]
    d = space.dimension
    if kind == "uniform-box":
        lo, hi = space.bounding_box()
        lo = np.asarray(dist.get("lower", lo), dtype=np.float64)
        hi = np.asarray(dist.get("upper", hi), dtype=np.float64)
        return lo + (hi - lo) * rng.random((count, d))
    if kind == "clipped-gaussian-mixture":
        means = np.atleast_2d(np.asarray(dist["means"], dtype=np.float64))
        c = means.shape[0]
        covs = np.asarray(dist.get("covariances", [np.eye(d)] * c), dtype=np.float64).reshape(c, d, d)
        w = np.asarray(dist.get("weights", np.full(c, 1.0 / c)), dtype=np.float64)
        comp = rng.choice(c, size=count, p=w / w.sum())
        noise = rng.standard_normal((count, d))
        # symmetric square roots tolerate singular (even zero) covariances
        roots = []
        for cov in covs:
            vals, vecs = np.linalg.eigh(cov)
            roots.append(vecs * np.sqrt(np.clip(vals, 0.0, None)) @ vecs.T)
        roots = np.array(roots)
        return means[comp] + np.einsum("nij,nj->ni", roots[comp], noise)
    if kind == "embedded-manifold":
        m = int(dist["intrinsic_dim"])
        emb = map_from_dict(dist["embedding"])
        t = rng.uniform(-1.0, 1.0, size=(count, m))
        out = emb.forward(t)
        sigma = float(dist.get("noise", 0.0))
        return out + sigma * rng.standard_normal(out.shape)
    mu = _finite_measure(dist)
    idx = rng.choice(mu.size, size=count, p=mu.weights)
    return mu.atoms[idx]


def sample(config: ExperimentConfig, count: int, stream_id=(0, "train")) -> Dataset:
    """``count`` points for stream ``(replication, purpose)``; deterministic in (seed, stream_id)."""
    if count < 1:
        raise ValidationError("count must be at least 1")
    replication, purpose = (stream_id, "train") if isinstance(stream_id, int) else stream_id
    rng = stream(config, replication, purpose)
    pts = _draw(config.distribution, config.space, count, rng)
    if pts.shape[1] != config.space.dimension:
        raise ValidationError("distribution dimension does not match the data space")
    return Dataset(config.space.project(pts), config.space)


# --------------------------------------------------------------------------
# Gap measurement
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GapRecord:
    replication: int
    n_train: int
    n_test: int
    train_risk: float
    test_risk: float
    gap: float
    bounds: dict
    wall_time: float
    failed: bool = False
    message: str = ""

    def row(self, bound_names=(), timing=False) -> dict:
        out = {
            "replication": self.replication,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "train_risk": self.train_risk,
            "test_risk": self.test_risk,
            "gap": self.gap,
            "failed": int(self.failed),
        }
        for name in bound_names:
            out[f"bound_{name}"] = self.bounds.get(name, math.nan)
        if timing:
            out["wall_time"] = self.wall_time
        out["message"] = self.message
        return out


def hoeffding_deviation(diam, n, delta) -> float:
    """diam^2 sqrt(log(2/delta)/(2n)): two-sided deviation of a mean of [0, diam^2] losses."""
    return diam**2 * math.sqrt(math.log(2.0 / delta) / (2.0 * n))


def _initial_map(config: ExperimentConfig, rng):
    fam = config.family
    widths = list(fam["widths"])
    if widths[0] != config.latent.dimension or widths[-1] != config.space.dimension:
        raise ValidationError("family widths must run from the latent to the data dimension")
    return DenseNet.random(
        widths,
        fam.get("activation", "relu"),
        rng,
        budgets=fam.get("budgets"),
        norm_kind=fam.get("norm_kind", "spectral"),
        scale=float(fam.get("init_scale", 1.0)),
    )


def architecture(config: ExperimentConfig, fmap=None) -> ArchitectureSpec | None:
    """Bound constants for the family (budgets when set, else the map's own norms)."""
    fam = config.family
    if fam["kind"] == "dense":
        fmap = fmap if fmap is not None else _initial_map(config, stream(config, 0, "init"))
    elif fam["kind"] == "fixed":
        fmap = map_from_dict(fam["map"])
    if fmap is None:
        return None
    return ArchitectureSpec.from_map(fmap, config.latent, config.space)


_BOUND_FNS = {
    "dense_deep": _bounds.bound_dense_deep,
    "dense_wide": _bounds.bound_dense_wide,
    "dense_bounded_output": _bounds.bound_sigmoid,
    "cnn": _bounds.bound_cnn,
}


def evaluate_bounds(config: ExperimentConfig, n: int, spec: ArchitectureSpec | None) -> dict:
    out = {}
    for name in config.bounds:
        if name == "hoeffding":
            out[name] = hoeffding_deviation(config.space.diameter(), n, config.delta)
            continue
        if spec is None:
            raise ValidationError(f"bound {name!r} needs a network family")
        out[name] = _BOUND_FNS[name](spec, n, config.delta).value
    return out


def _fit(config: ExperimentConfig, train: Dataset, replication: int):
    """Trained map and the latent space it encodes with."""
    fam = config.family
    kind = fam["kind"]
    if kind == "fixed":
        return map_from_dict(fam["map"]), config.latent
    if kind == "vq":
        k = int(fam["k"])
        seed = int(stream(config, replication, "init").integers(2**63))
        fmap, _, _ = fit_vq_lloyd(train, k, seed=seed)
        return fmap, LatentSpace.codebook(k)
    if kind == "pca":
        fmap, _ = fit_pca(train, int(fam["k"]))
        return fmap, config.latent
    template = _initial_map(config, stream(config, replication, "init"))
    fmap, _ = erm_train(template, train, config.latent, config.train)
    return fmap, config.latent


def _test_risk(config, fmap, latent, replication):
    if config.exact_population:
        return empirical_risk(fmap, population_measure(config), latent, config.strategy, space=config.space)
    test = sample(config, config.n_test, (replication, "test"))
    return empirical_risk(fmap, test, latent, config.strategy)


def run_replication(config: ExperimentConfig, replication: int, bound_values: dict) -> GapRecord:
    start = time.perf_counter()
    n_test = 0 if config.exact_population else config.n_test
    try:
        train = sample(config, config.n_train, (replication, "train"))
        fmap, latent = _fit(config, train, replication)
        r_train = empirical_risk(fmap, train, latent, config.strategy)
        r_test = _test_risk(config, fmap, latent, replication)
    except (TrainingDivergence, FloatingPointError) as exc:
        return GapRecord(replication, config.n_train, n_test, math.nan, math.nan, math.nan,
                         dict(bound_values), time.perf_counter() - start, True, str(exc))
    return GapRecord(replication, config.n_train, n_test, r_train, r_test, abs(r_train - r_test),
                     dict(bound_values), time.perf_counter() - start)


def measure_gap(config: ExperimentConfig, threads: int = 1) -> list:
    """One :class:`GapRecord` per replication, in replication order.

    Failed replications (training divergence) are recorded with NaN risks
    and ``failed=True`` rather than dropped.
    """
    if threads < 1:
        raise ValidationError("threads must be at least 1")
    spec = architecture(config) if config.family["kind"] in ("dense", "fixed") else None
    bound_values = evaluate_bounds(config, config.n_train, spec)
    reps = range(config.replications)
    if threads == 1:
        return [run_replication(config, r, bound_values) for r in reps]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda r: run_replication(config, r, bound_values), reps))


@dataclass(frozen=True)
class RateStudy:
    n_grid: tuple
    median_gaps: tuple
    mean_gaps: tuple
    failures: tuple
    bounds: tuple  # one dict per n
    slope: float
    intercept: float
    slope_defined: bool

    def rows(self) -> list:
        out = []
        for n, med, mean, fails, b in zip(self.n_grid, self.median_gaps, self.mean_gaps, self.failures, self.bounds):
            row = {"n": n, "median_gap": med, "mean_gap": mean, "failed": fails}
            row.update({f"bound_{k}": v for k, v in b.items()})
            out.append(row)
        return out


def loglog_slope(ns, values):
    """Least-squares slope of log(values) on log(ns); NaN when any value is not positive."""
    ns = np.asarray(ns, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if len(ns) < 2 or not np.all(np.isfinite(values)) or np.any(values <= 0):
        return math.nan, math.nan, False
    slope, intercept = np.polyfit(np.log(ns), np.log(values), 1)
    return float(slope), float(intercept), True


def rate_study(config: ExperimentConfig, n_grid, threads: int = 1) -> RateStudy:
    """Median |gap| per training size and its log-log slope."""
    n_grid = tuple(int(n) for n in n_grid)
    if not n_grid or any(b <= a for a, b in zip(n_grid[:-1], n_grid[1:])):
        raise ValidationError("n_grid must be strictly increasing")
    medians, means, fails, bnds = [], [], [], []
    for n in n_grid:
        records = measure_gap(config.with_(n_train=n), threads)
        gaps = np.array([r.gap for r in records if not r.failed])
        medians.append(float(np.median(gaps)) if gaps.size else math.nan)
        means.append(float(np.mean(gaps)) if gaps.size else math.nan)
        fails.append(sum(r.failed for r in records))
        bnds.append(records[0].bounds)
    slope, intercept, ok = loglog_slope(n_grid, medians)
    return RateStudy(n_grid, tuple(medians), tuple(means), tuple(fails), tuple(bnds), slope, intercept, ok)
