"""Data spaces, latent spaces, samples and discrete measures.

Every value here is immutable after construction: arrays are copied and
marked read-only so they can be shared across workers.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

VJP_SLACK = 1e-12  # relative; boundary points take the interior derivative
MEMBERSHIP_TOL = 1e-9
WEIGHT_TOL = 1e-12


class ValidationError(ValueError):
    """Raised when an input violates a documented precondition."""


def _frozen(values, ndim=None) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ValidationError(f"expected a {ndim}-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("non-finite entries")
    arr.setflags(write=False)
    return arr


def sqdist(a, b) -> np.ndarray:
    """Squared Euclidean distance summed coordinate by coordinate.

    The summation order is fixed (index order) so every module that compares
    errors computes bit-identical values.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    diff = a - b
    acc = diff[..., 0] * diff[..., 0]
    for j in range(1, diff.shape[-1]):
        acc = acc + diff[..., j] * diff[..., j]
    return acc


# --------------------------------------------------------------------------
# Data space Z
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DataSpace:
    """A closed convex bounded subset of R^d: a Euclidean ball or a box."""

    kind: str
    center: np.ndarray | None = None
    radius: float | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    @classmethod
    def ball(cls, center, radius: float) -> "DataSpace":
        center = _frozen(center, ndim=1)
        if not radius >= 0:
            raise ValidationError("radius must be nonnegative")
        return cls("ball", center=center, radius=float(radius))

    @classmethod
    def box(cls, lower, upper) -> "DataSpace":
        lower = _frozen(lower, ndim=1)
        upper = _frozen(upper, ndim=1)
        if lower.shape != upper.shape:
            raise ValidationError("lower and upper have different dimensions")
        if np.any(lower > upper):
            raise ValidationError("box lower corner exceeds upper corner")
        return cls("box", lower=lower, upper=upper)

    @property
    def dimension(self) -> int:
        ref = self.center if self.kind == "ball" else self.lower
        return int(ref.shape[0])

    def diameter(self) -> float:
        if self.kind == "ball":
            return 2.0 * self.radius
        return float(np.linalg.norm(self.upper - self.lower))

    def contains_origin(self) -> bool:
        return bool(self.contains(np.zeros(self.dimension)))

    def contains(self, points, tol: float = MEMBERSHIP_TOL):
        points = np.asarray(points, dtype=np.float64)
        if self.kind == "ball":
            return np.linalg.norm(points - self.center, axis=-1) <= self.radius + tol
        return np.all((points >= self.lower - tol) & (points <= self.upper + tol), axis=-1)

    def project(self, points) -> np.ndarray:
        """Nearest point of the space; works on a single point or a batch."""
        points = np.asarray(points, dtype=np.float64)
        if points.shape[-1] != self.dimension:
            raise ValidationError(
                f"point dimension {points.shape[-1]} != space dimension {self.dimension}"
            )
        if self.kind == "box":
            return np.clip(points, self.lower, self.upper)
        offset = points - self.center
        norms = np.linalg.norm(offset, axis=-1, keepdims=True)
        outside = norms > self.radius
        scale = np.where(outside, self.radius / np.where(outside, norms, 1.0), 1.0)
        return np.where(outside, self.center + offset * scale, points)

    def project_vjp(self, points, upstream) -> np.ndarray:
        """Vector-Jacobian product of :meth:`project` at ``points``.

        Kinks (box faces, the ball sphere) use the one-sided interior
        derivative; points within rounding of the boundary count as on it.
        """
        points = np.asarray(points, dtype=np.float64)
        upstream = np.asarray(upstream, dtype=np.float64)
        if self.kind == "box":
            slack = VJP_SLACK * (1.0 + np.abs(points))
            inside = (points >= self.lower - slack) & (points <= self.upper + slack) & (self.upper > self.lower)
            return upstream * inside
        offset = points - self.center
        norms = np.linalg.norm(offset, axis=-1, keepdims=True)
        outside = norms > self.radius * (1.0 + VJP_SLACK) + VJP_SLACK
        safe = np.where(outside, norms, 1.0)
        unit = offset / safe
        radial = np.sum(unit * upstream, axis=-1, keepdims=True)
        scaled = (self.radius / safe) * (upstream - radial * unit)
        return np.where(outside, scaled, upstream)

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        if self.kind == "box":
            return self.lower, self.upper
        return self.center - self.radius, self.center + self.radius

    def to_dict(self) -> dict:
        if self.kind == "ball":
            return {"kind": "ball", "center": self.center.tolist(), "radius": self.radius}
        return {"kind": "box", "lower": self.lower.tolist(), "upper": self.upper.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "DataSpace":
        if data["kind"] == "ball":
            return cls.ball(data["center"], data["radius"])
        if data["kind"] == "box":
            return cls.box(data["lower"], data["upper"])
        raise ValidationError(f"unknown data space kind {data['kind']!r}")


def project(space: DataSpace, point) -> np.ndarray:
    return space.project(point)


def diameter(space: DataSpace) -> float:
    return space.diameter()


# --------------------------------------------------------------------------
# Latent space H
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LatentSpace:
    """Compact latent set: origin-centred ball, box, or finite point set."""

    kind: str
    dimension: int
    radius: float | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    points: np.ndarray | None = None

    @classmethod
    def ball(cls, dimension: int, radius: float = 1.0) -> "LatentSpace":
        if dimension < 1:
            raise ValidationError("latent dimension must be positive")
        if not radius >= 0:
            raise ValidationError("radius must be nonnegative")
        return cls("ball", int(dimension), radius=float(radius))

    @classmethod
    def box(cls, lower, upper) -> "LatentSpace":
        lower = _frozen(lower, ndim=1)
        upper = _frozen(upper, ndim=1)
        if lower.shape != upper.shape or np.any(lower > upper):
            raise ValidationError("invalid latent box")
        return cls("box", int(lower.shape[0]), lower=lower, upper=upper)

    @classmethod
    def finite(cls, points) -> "LatentSpace":
        points = _frozen(points, ndim=2)
        if points.shape[0] == 0:
            raise ValidationError("finite latent space needs at least one point")
        return cls("finite", int(points.shape[1]), points=points)

    @classmethod
    def codebook(cls, k: int) -> "LatentSpace":
        """The canonical basis {e_1, ..., e_k}: the vector-quantizer codebook."""
        return cls.finite(np.eye(k))

    def max_norm(self) -> float:
        if self.kind == "ball":
            return self.radius
        if self.kind == "box":
            return float(np.sqrt(np.sum(np.maximum(self.lower**2, self.upper**2))))
        return float(np.max(np.linalg.norm(self.points, axis=1)))

    def contains(self, h, tol: float = MEMBERSHIP_TOL):
        h = np.asarray(h, dtype=np.float64)
        if self.kind == "ball":
            return np.linalg.norm(h, axis=-1) <= self.radius + tol
        if self.kind == "box":
            return np.all((h >= self.lower - tol) & (h <= self.upper + tol), axis=-1)
        dist = np.min(np.linalg.norm(h[..., None, :] - self.points, axis=-1), axis=-1)
        return dist <= tol

    def project(self, h) -> np.ndarray:
        h = np.asarray(h, dtype=np.float64)
        if self.kind == "box":
            return np.clip(h, self.lower, self.upper)
        if self.kind == "ball":
            norms = np.linalg.norm(h, axis=-1, keepdims=True)
            outside = norms > self.radius
            return np.where(outside, h * (self.radius / np.where(outside, norms, 1.0)), h)
        idx = np.argmin(sqdist(h[..., None, :], self.points), axis=-1)
        return self.points[idx]

    def eps_net(self, eps: float) -> np.ndarray:
        return eps_net(self, eps)

    def to_dict(self) -> dict:
        if self.kind == "ball":
            return {"kind": "ball", "dimension": self.dimension, "radius": self.radius}
        if self.kind == "box":
            return {"kind": "box", "lower": self.lower.tolist(), "upper": self.upper.tolist()}
        return {"kind": "finite", "points": self.points.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "LatentSpace":
        kind = data["kind"]
        if kind == "ball":
            return cls.ball(data["dimension"], data.get("radius", 1.0))
        if kind == "box":
            return cls.box(data["lower"], data["upper"])
        if kind == "finite":
            return cls.finite(data["points"])
        if kind == "codebook":
            return cls.codebook(data["size"])
        raise ValidationError(f"unknown latent space kind {kind!r}")


def eps_net(space: LatentSpace, eps: float) -> np.ndarray:
    """Deterministic finite eps-cover of a latent space.

    Boxes get a cell-centred axis grid whose half cell diagonal is at most
    ``eps``.  Balls get the same grid centred at the origin, restricted to
    cells meeting the ball, with each grid point projected onto the ball;
    projection is nonexpansive so the covering radius is preserved.  Finite
    sets cover themselves.
    """
    if not eps > 0:
        raise ValidationError("eps must be positive")
    k = space.dimension
    if space.kind == "finite":
        return np.array(space.points)
    if space.kind == "box":
        widths = space.upper - space.lower
        counts = [max(1, math.ceil(w * math.sqrt(k) / (2.0 * eps))) for w in widths]
        axes = [
            space.lower[r] + (np.arange(counts[r]) + 0.5) * widths[r] / counts[r]
            for r in range(k)
        ]
        grid = np.array(list(itertools.product(*axes)), dtype=np.float64)
        return grid.reshape(-1, k)
    step = 2.0 * eps / math.sqrt(k)
    half = step / 2.0
    reach = math.floor(space.radius / step + 0.5)
    idx = np.arange(-reach, reach + 1, dtype=np.float64)
    grid = np.array(list(itertools.product(idx, repeat=k)), dtype=np.float64) * step
    # distance from the origin to each axis-aligned cell
    gap = np.maximum(np.abs(grid) - half, 0.0)
    meets = np.sqrt(np.sum(gap * gap, axis=1)) <= space.radius
    net = space.project(grid[meets])
    return np.unique(net, axis=0)


def covering_radius(net, probes) -> float:
    """Largest distance from any probe point to its nearest net point."""
    net = np.asarray(net, dtype=np.float64)
    probes = np.asarray(probes, dtype=np.float64)
    d2 = sqdist(probes[:, None, :], net[None, :, :])
    return float(np.sqrt(np.max(np.min(d2, axis=1))))


# --------------------------------------------------------------------------
# Measures and datasets
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Weighted atoms in R^m.  Zero-weight atoms are dropped on construction."""

    atoms: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        atoms = np.array(self.atoms, dtype=np.float64)
        weights = np.array(self.weights, dtype=np.float64).reshape(-1)
        if atoms.ndim == 1:
            atoms = atoms.reshape(-1, 1)
        if atoms.shape[0] != weights.shape[0]:
            raise ValidationError("atoms and weights differ in length")
        if np.any(weights < 0) or not np.all(np.isfinite(weights)):
            raise ValidationError("weights must be finite and nonnegative")
        if not np.all(np.isfinite(atoms)):
            raise ValidationError("non-finite atom")
        if abs(math.fsum(weights) - 1.0) > WEIGHT_TOL:
            raise ValidationError(f"weights sum to {math.fsum(weights)!r}, not 1")
        keep = weights > 0
        atoms, weights = atoms[keep], weights[keep]
        atoms.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def uniform(cls, points) -> "DiscreteMeasure":
        points = np.asarray(points, dtype=np.float64)
        if points.ndim == 1:
            points = points.reshape(-1, 1)
        n = points.shape[0]
        return cls(points, np.full(n, 1.0 / n))

    @classmethod
    def normalized(cls, atoms, masses) -> "DiscreteMeasure":
        masses = np.asarray(masses, dtype=np.float64)
        total = math.fsum(masses)
        if not total > 0:
            raise ValidationError("total mass must be positive")
        weights = masses / total
        # push the rounding residue onto the heaviest atom
        weights[np.argmax(weights)] += 1.0 - math.fsum(weights)
        return cls(atoms, weights)

    @property
    def size(self) -> int:
        return int(self.weights.shape[0])

    @property
    def dimension(self) -> int:
        return int(self.atoms.shape[1])

    def merged(self) -> "DiscreteMeasure":
        """Merge exactly coincident atoms, summing their weights."""
        uniq, inverse = np.unique(self.atoms, axis=0, return_inverse=True)
        if uniq.shape[0] == self.size:
            return self
        masses = np.zeros(uniq.shape[0])
        np.add.at(masses, inverse.reshape(-1), self.weights)
        return DiscreteMeasure.normalized(uniq, masses)

    def moment(self, q: float) -> float:
        """The q-th absolute moment of the norm, sum_i w_i ||x_i||^q."""
        return float(np.dot(self.weights, np.linalg.norm(self.atoms, axis=1) ** q))


@dataclass(frozen=True, eq=False)
class Dataset:
    """Samples Z_1..Z_n, each verified to lie in the declared data space."""

    samples: np.ndarray
    space: DataSpace = field(repr=False)

    def __post_init__(self):
        samples = np.array(self.samples, dtype=np.float64)
        if samples.ndim == 1:
            samples = samples.reshape(-1, 1)
        if samples.ndim != 2 or samples.shape[0] == 0:
            raise ValidationError("dataset must be a nonempty n x d array")
        if samples.shape[1] != self.space.dimension:
            raise ValidationError(
                f"sample dimension {samples.shape[1]} != space dimension {self.space.dimension}"
            )
        if not np.all(np.isfinite(samples)):
            raise ValidationError("non-finite sample")
        bad = np.flatnonzero(~self.space.contains(samples))
        if bad.size:
            raise ValidationError(f"sample {int(bad[0])} lies outside the data space")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return int(self.samples.shape[0])

    def empirical(self) -> DiscreteMeasure:
        return DiscreteMeasure.uniform(self.samples)
