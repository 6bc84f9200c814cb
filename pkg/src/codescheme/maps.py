"""Reconstruction maps H -> R^d with norm accounting.

Three families share one duck-typed interface (``forward``, ``backward``,
``params``/``with_params``, ``layer_norms``, ``to_dict``):

* :class:`LinearMap`  -- h -> A h (vector quantizers, PCA isometries),
* :class:`DenseNet`   -- bias-free fully connected nets sigma_j(A_j xi),
* :class:`ConvNet`    -- strided multi-channel convolutions in any spatial
  dimension, optionally followed by max pooling.

``eval_map`` composes a map with the projection onto the data space.
"""

from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from ._backend import kernels
from .spaces import DataSpace, LatentSpace, ValidationError, sqdist

NORM_TOL = 1e-9
POWER_ITER_RTOL = 1e-10


# --------------------------------------------------------------------------
# Activations
# --------------------------------------------------------------------------

_LIPSCHITZ = {"relu": 1.0, "tanh": 1.0, "sigmoid": 0.25, "identity": 1.0}


@dataclass(frozen=True)
class Activation:
    kind: str = "relu"
    slope: float = 0.01

    def __post_init__(self):
        if self.kind not in ("relu", "leaky_relu", "tanh", "sigmoid", "identity"):
            raise ValidationError(f"unknown activation {self.kind!r}")
        if self.kind == "leaky_relu" and not self.slope >= 0:
            raise ValidationError("leaky_relu slope must be nonnegative")

    @property
    def lipschitz(self) -> float:
        if self.kind == "leaky_relu":
            return max(1.0, self.slope)
        return _LIPSCHITZ[self.kind]

    @property
    def zizo(self) -> bool:
        return self.kind != "sigmoid"

    def output_bound(self, width: int) -> float | None:
        """Sup of ||sigma(x)|| over R^width, or None when unbounded."""
        if self.kind in ("sigmoid", "tanh"):
            return math.sqrt(width)
        return None

    def __call__(self, x):
        if self.kind == "relu":
            return np.maximum(x, 0.0)
        if self.kind == "leaky_relu":
            return np.where(x >= 0, x, self.slope * x)
        if self.kind == "tanh":
            return np.tanh(x)
        if self.kind == "sigmoid":
            return 0.5 * (1.0 + np.tanh(0.5 * x))
        return np.array(x, dtype=np.float64)

    def derivative(self, x):
        if self.kind == "relu":
            return (x > 0).astype(np.float64)
        if self.kind == "leaky_relu":
            return np.where(x >= 0, 1.0, self.slope)
        if self.kind == "tanh":
            return 1.0 - np.tanh(x) ** 2
        if self.kind == "sigmoid":
            s = self(x)
            return s * (1.0 - s)
        return np.ones_like(x)

    def to_dict(self) -> dict:
        if self.kind == "leaky_relu":
            return {"kind": self.kind, "slope": self.slope}
        return {"kind": self.kind}

    @classmethod
    def from_dict(cls, data) -> "Activation":
        if isinstance(data, str):
            return cls(data)
        return cls(data["kind"], data.get("slope", 0.01))


# --------------------------------------------------------------------------
# Matrix norms
# --------------------------------------------------------------------------


def entrywise_l1(a) -> float:
    return float(np.sum(np.abs(a)))


def frobenius(a) -> float:
    return float(np.sqrt(np.sum(np.square(a))))


def spectral_norm(a, rtol: float = POWER_ITER_RTOL, max_iter: int = 100_000) -> float:
    """Largest singular value by power iteration on A^T A.

    The estimate is checked against ||A||_2 <= ||A||_F <= ||A||_1.  If the
    iteration has not met ``rtol`` after ``max_iter`` steps (near-degenerate
    top singular values) the exact SVD value is returned instead.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    if not np.any(a):
        return 0.0
    gram = a.T @ a
    # deterministic start: the heaviest column direction plus a tie-breaker
    x = np.sum(np.abs(gram), axis=0) + np.linspace(1.0, 2.0, gram.shape[0])
    x /= np.linalg.norm(x)
    est = 0.0
    for _ in range(max_iter):
        y = gram @ x
        new = float(x @ y)  # Rayleigh quotient
        norm_y = float(np.linalg.norm(y))
        if norm_y == 0.0:
            break
        x = y / norm_y
        # the quotient converges at twice the rate of the iterate, so a small
        # step-to-step change leaves an error well below rtol
        if abs(new - est) <= 1e-3 * rtol * new:
            est = new
            break
        est = new
    else:
        est = float(np.linalg.norm(a, 2)) ** 2
    value = math.sqrt(est)
    assert value <= frobenius(a) * (1 + 1e-12) + 1e-300
    assert frobenius(a) <= entrywise_l1(a) * (1 + 1e-12) + 1e-300
    return value


def filter_norm_12(filters) -> float:
    """sqrt(sum_k ||A^(k)||_1^2) over output channels k (axis 0)."""
    filters = np.asarray(filters, dtype=np.float64)
    per_channel = np.sum(np.abs(filters.reshape(filters.shape[0], -1)), axis=1)
    return float(np.sqrt(np.sum(per_channel**2)))


_NORMS = {"entrywise_l1": entrywise_l1, "spectral": spectral_norm, "frobenius": frobenius}


def _onto_budget(a, budget, measure):
    norm = measure(a)
    return a * (budget / norm) * (1 - 1e-15) if norm > budget else a


def _matrix_report(a) -> dict:
    return {
        "entrywise_l1": entrywise_l1(a),
        "frobenius": frobenius(a),
        "spectral": spectral_norm(a),
    }


# --------------------------------------------------------------------------
# Linear maps
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LinearMap:
    """h -> A h for a d x k matrix A."""

    matrix: np.ndarray

    def __post_init__(self):
        a = np.array(self.matrix, dtype=np.float64)
        if a.ndim != 2:
            raise ValidationError("matrix must be 2-d")
        if not np.all(np.isfinite(a)):
            raise ValidationError("non-finite matrix entry")
        a.setflags(write=False)
        object.__setattr__(self, "matrix", a)

    kind = "linear"

    @classmethod
    def from_codewords(cls, codewords) -> "LinearMap":
        """Vector quantizer: column j is the codeword f(e_j)."""
        return cls(np.asarray(codewords, dtype=np.float64).T)

    @property
    def input_dim(self) -> int:
        return self.matrix.shape[1]

    @property
    def output_dim(self) -> int:
        return self.matrix.shape[0]

    def forward(self, h):
        h = np.asarray(h, dtype=np.float64)
        if h.shape[-1] != self.input_dim:
            raise ValidationError(f"latent dimension {h.shape[-1]} != {self.input_dim}")
        return h @ self.matrix.T

    def forward_cached(self, h):
        h = np.atleast_2d(np.asarray(h, dtype=np.float64))
        return self.forward(h), h

    def backward(self, cache, upstream):
        h = cache
        return [upstream.T @ h], upstream @ self.matrix

    def params(self):
        return [np.array(self.matrix)]

    def with_params(self, params, project=False):
        return LinearMap(params[0])

    def layer_norms(self):
        return [_matrix_report(self.matrix)]

    def lipschitz_bound(self, norm: str = "spectral") -> float:
        return _NORMS[norm](self.matrix)

    def rescaled(self):
        return self

    def to_dict(self) -> dict:
        d, k = self.matrix.shape
        return {"kind": "linear", "shape": [d, k], "weights": self.matrix.reshape(-1).tolist()}


# --------------------------------------------------------------------------
# Dense nets
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DenseNet:
    """xi -> sigma_l(A_l ... sigma_1(A_1 xi)), no biases.

    ``budgets`` holds M_j in the norm named by ``norm_kind``; every layer is
    checked against its budget at construction.
    """

    weights: tuple
    activations: tuple
    budgets: tuple | None = None
    norm_kind: str = "spectral"

    kind = "dense"

    def __post_init__(self):
        weights = []
        for a in self.weights:
            a = np.array(a, dtype=np.float64)
            if a.ndim != 2 or not np.all(np.isfinite(a)):
                raise ValidationError("each layer weight must be a finite 2-d matrix")
            a.setflags(write=False)
            weights.append(a)
        acts = tuple(
            a if isinstance(a, Activation) else Activation.from_dict(a) for a in self.activations
        )
        if len(acts) != len(weights) or not weights:
            raise ValidationError("need one activation per layer and at least one layer")
        for prev, nxt in zip(weights[:-1], weights[1:]):
            if nxt.shape[1] != prev.shape[0]:
                raise ValidationError("consecutive layer shapes do not chain")
        if self.norm_kind not in ("entrywise_l1", "spectral"):
            raise ValidationError("norm_kind must be entrywise_l1 or spectral")
        object.__setattr__(self, "weights", tuple(weights))
        object.__setattr__(self, "activations", acts)
        if self.budgets is not None:
            budgets = tuple(float(m) for m in self.budgets)
            if len(budgets) != len(weights):
                raise ValidationError("one budget per layer required")
            measure = _NORMS[self.norm_kind]
            for j, (a, m) in enumerate(zip(weights, budgets)):
                if measure(a) > m + NORM_TOL:
                    raise ValidationError(
                        f"layer {j}: {self.norm_kind} norm {measure(a)} exceeds budget {m}"
                    )
            object.__setattr__(self, "budgets", budgets)

    @classmethod
    def random(cls, widths, activations, rng, budgets=None, norm_kind="spectral", scale=1.0):
        """Gaussian init, rescaled into ``budgets`` when given."""
        if isinstance(activations, (str, Activation)):
            activations = [activations] * (len(widths) - 1)
        acts = [a if isinstance(a, Activation) else Activation(a) for a in activations]
        weights = [
            rng.normal(scale=scale / math.sqrt(w_in), size=(w_out, w_in))
            for w_in, w_out in zip(widths[:-1], widths[1:])
        ]
        if budgets is not None:
            measure = _NORMS[norm_kind]
            weights = [
                a * min(1.0, m / measure(a)) if measure(a) > 0 else a
                for a, m in zip(weights, budgets)
            ]
        return cls(tuple(weights), tuple(acts), budgets, norm_kind)

    @property
    def depth(self) -> int:
        return len(self.weights)

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[1]] + [a.shape[0] for a in self.weights]

    @property
    def input_dim(self) -> int:
        return self.widths[0]

    @property
    def output_dim(self) -> int:
        return self.widths[-1]

    def forward(self, h):
        x = np.asarray(h, dtype=np.float64)
        if x.shape[-1] != self.input_dim:
            raise ValidationError(f"latent dimension {x.shape[-1]} != {self.input_dim}")
        for a, act in zip(self.weights, self.activations):
            x = act(x @ a.T)
        return x

    def forward_cached(self, h):
        x = np.atleast_2d(np.asarray(h, dtype=np.float64))
        inputs, pre = [], []
        for a, act in zip(self.weights, self.activations):
            inputs.append(x)
            z = x @ a.T
            pre.append(z)
            x = act(z)
        return x, (inputs, pre)

    def backward(self, cache, upstream):
        inputs, pre = cache
        grads = [None] * self.depth
        g = upstream
        for j in range(self.depth - 1, -1, -1):
            gz = g * self.activations[j].derivative(pre[j])
            grads[j] = gz.T @ inputs[j]
            g = gz @ self.weights[j]
        return grads, g

    def params(self):
        return [np.array(a) for a in self.weights]

    def with_params(self, params, project=False):
        """Same architecture with new weights; ``project`` first scales each onto its budget."""
        if project and self.budgets is not None:
            measure = _NORMS[self.norm_kind]
            params = [_onto_budget(np.asarray(a, dtype=np.float64), m, measure) for a, m in zip(params, self.budgets)]
        return DenseNet(tuple(params), self.activations, self.budgets, self.norm_kind)

    def layer_norms(self):
        return [_matrix_report(a) for a in self.weights]

    def layer_constants(self, norm: str | None = None):
        """Per-layer (L_j, M_j) with M_j the budget, or the actual norm if unset."""
        norm = norm or self.norm_kind
        measure = _NORMS[norm]
        budgets = self.budgets if self.budgets is not None and norm == self.norm_kind else None
        out = []
        for j, (a, act) in enumerate(zip(self.weights, self.activations)):
            m = budgets[j] if budgets is not None else measure(a)
            out.append((act.lipschitz, m))
        return out

    def lipschitz_bound(self, norm: str | None = None) -> float:
        return math.prod(l * m for l, m in self.layer_constants(norm))

    def rescaled(self):
        """Scale each layer down onto its budget ball when it overshoots."""
        if self.budgets is None:
            return self
        return self.with_params(self.weights, project=True)

    def to_dict(self) -> dict:
        return {
            "kind": "dense",
            "norm_kind": self.norm_kind,
            "budgets": None if self.budgets is None else list(self.budgets),
            "layers": [
                {
                    "shape": list(a.shape),
                    "activation": act.to_dict(),
                    "weights": a.reshape(-1).tolist(),
                }
                for a, act in zip(self.weights, self.activations)
            ],
        }


# --------------------------------------------------------------------------
# Convolutions
# --------------------------------------------------------------------------


def _as_fraction(s) -> Fraction:
    frac = Fraction(s) if not isinstance(s, float) else Fraction(s).limit_denominator(10**6)
    if frac <= 0:
        raise ValidationError(f"stride must be positive, got {s!r}")
    return frac


def default_output_size(w_in: int, stride) -> int:
    """Number of output positions whose centre index s(i-1)+1 stays within the input."""
    s = _as_fraction(stride)
    return int(math.floor(Fraction(w_in - 1) / s)) + 1


@functools.lru_cache(maxsize=4096)
def _axis_table(w_in: int, u: int, stride: Fraction, w_out: int) -> np.ndarray:
    """0-based input index read by (output i, filter tap i'); -1 means zero."""
    table = np.full((w_out, u), -1, dtype=np.int64)
    offset = Fraction(1 - u, 2)
    for i in range(1, w_out + 1):
        for ip in range(1, u + 1):
            pos = ip + stride * (i - 1) + offset
            if pos.denominator == 1 and 1 <= pos <= w_in:
                table[i - 1, ip - 1] = int(pos) - 1
    table.setflags(write=False)
    return table


@functools.lru_cache(maxsize=1024)
def gather_table(in_shape: tuple, filter_shape: tuple, strides: tuple, out_shape: tuple):
    """Flat (output position, filter tap) -> flat input position table."""
    axes = [
        _axis_table(w, u, s, o) for w, u, s, o in zip(in_shape, filter_shape, strides, out_shape)
    ]
    m = len(axes)
    flat = np.zeros([1] * (2 * m), dtype=np.int64)
    valid = np.ones([1] * (2 * m), dtype=bool)
    stride_in = 1
    for r in range(m - 1, -1, -1):
        shape = [1] * (2 * m)
        shape[r] = out_shape[r]
        shape[m + r] = filter_shape[r]
        ax = axes[r].reshape(shape)
        flat = flat + np.where(ax >= 0, ax, 0) * stride_in
        valid = valid & (ax >= 0)
        stride_in *= in_shape[r]
    table = np.where(valid, flat, -1)
    table = np.broadcast_to(table, tuple(out_shape) + tuple(filter_shape))
    table = np.ascontiguousarray(table.reshape(math.prod(out_shape), math.prod(filter_shape)))
    table.setflags(write=False)
    return table


def conv_forward(xi, filters, strides, out_shape=None):
    """Strided multi-channel convolution with zero padding and centred taps.

    ``xi`` has shape (w_1, ..., w_m, v_in); ``filters`` has shape
    (v_out, u_1, ..., u_m, v_in) (or is a list of v_out tensors of shape
    (u_1, ..., u_m, v_in)).  Output entry (r_1..r_m, k) sums
    A^(k)[r'_1..r'_m, c] * xi[r'_1 + s_1 (r_1 - 1) + (1 - u_1)/2, ..., c]
    over taps and input channels, 1-based, reading zero outside the input
    and at non-integer positions (fractional strides).
    """
    xi = np.asarray(xi, dtype=np.float64)
    filters = np.asarray(filters, dtype=np.float64)
    m = xi.ndim - 1
    if filters.ndim != m + 2:
        raise ValidationError(f"filters must have {m + 2} axes for spatial dimension {m}")
    if filters.shape[-1] != xi.shape[-1]:
        raise ValidationError("filter input channels != input channels")
    if np.ndim(strides) == 0:
        strides = [strides] * m
    if len(strides) != m:
        raise ValidationError("one stride per spatial dimension required")
    strides = tuple(_as_fraction(s) for s in strides)
    in_shape = xi.shape[:m]
    filter_shape = filters.shape[1:-1]
    if out_shape is None:
        out_shape = tuple(default_output_size(w, s) for w, s in zip(in_shape, strides))
    out_shape = tuple(int(o) for o in out_shape)
    table = gather_table(tuple(in_shape), tuple(filter_shape), strides, out_shape)
    v_out, v_in = filters.shape[0], filters.shape[-1]
    out = kernels.conv_gather(
        xi.reshape(-1, v_in), filters.reshape(v_out, -1, v_in), table
    )
    return out.reshape(out_shape + (v_out,))


def _pool_forward(x, pool):
    """Non-overlapping max pooling over spatial axes; edge windows are truncated."""
    m = len(pool)
    spatial = x.shape[1 : 1 + m]
    out_shape = tuple(-(-w // p) for w, p in zip(spatial, pool))
    out = np.full((x.shape[0],) + out_shape + (x.shape[-1],), -np.inf)
    for offs in itertools.product(*[range(p) for p in pool]):
        sl = tuple(slice(o, None, p) for o, p in zip(offs, pool))
        part = x[(slice(None),) + sl]
        target = tuple(slice(0, s) for s in part.shape[1 : 1 + m])
        region = out[(slice(None),) + target]
        np.maximum(region, part, out=region)
    return out


def _pool_backward(x, pool, upstream):
    m = len(pool)
    out = _pool_forward(x, pool)
    grad = np.zeros_like(x)
    taken = np.zeros(out.shape, dtype=bool)
    for offs in itertools.product(*[range(p) for p in pool]):
        sl = tuple(slice(o, None, p) for o, p in zip(offs, pool))
        part = x[(slice(None),) + sl]
        target = tuple(slice(0, s) for s in part.shape[1 : 1 + m])
        hit = (part == out[(slice(None),) + target]) & ~taken[(slice(None),) + target]
        grad[(slice(None),) + sl] = np.where(hit, upstream[(slice(None),) + target], 0.0)
        taken[(slice(None),) + target] |= hit
    return grad


@dataclass(frozen=True, eq=False)
class ConvLayer:
    filters: np.ndarray  # (v_out, u_1..u_m, v_in)
    strides: tuple
    activation: Activation = field(default_factory=Activation)
    pool: tuple | None = None
    out_shape: tuple | None = None

    def __post_init__(self):
        f = np.array(self.filters, dtype=np.float64)
        if not np.all(np.isfinite(f)):
            raise ValidationError("non-finite filter entry")
        f.setflags(write=False)
        object.__setattr__(self, "filters", f)
        strides = self.strides
        if np.ndim(strides) == 0:
            strides = [strides] * (f.ndim - 2)
        object.__setattr__(self, "strides", tuple(_as_fraction(s) for s in strides))
        if not isinstance(self.activation, Activation):
            object.__setattr__(self, "activation", Activation.from_dict(self.activation))
        if self.pool is not None:
            object.__setattr__(self, "pool", tuple(int(p) for p in self.pool))

    @property
    def spatial_dim(self) -> int:
        return self.filters.ndim - 2

    def conv_shape(self, in_spatial):
        if self.out_shape is not None:
            return tuple(int(o) for o in self.out_shape)
        return tuple(default_output_size(w, s) for w, s in zip(in_spatial, self.strides))

    def output_spatial(self, in_spatial):
        conv = self.conv_shape(in_spatial)
        if self.pool is None:
            return conv
        return tuple(-(-w // p) for w, p in zip(conv, self.pool))


@dataclass(frozen=True, eq=False)
class ConvNet:
    """Stacked convolution layers on a latent reshaped to ``input_shape``.

    The latent h in R^k is reshaped row-major to (w_1, ..., w_m, v_0); the
    final tensor is flattened row-major (channel last) to R^d.
    """

    input_shape: tuple
    layers: tuple
    budgets: tuple | None = None

    kind = "conv"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        layers = tuple(
            layer if isinstance(layer, ConvLayer) else ConvLayer(**layer) for layer in self.layers
        )
        if not layers:
            raise ValidationError("ConvNet needs at least one layer")
        m = len(self.input_shape) - 1
        channels = self.input_shape[-1]
        spatial = self.input_shape[:-1]
        shapes = [self.input_shape]
        for j, layer in enumerate(layers):
            if layer.spatial_dim != m:
                raise ValidationError(f"layer {j} spatial dimension {layer.spatial_dim} != {m}")
            if layer.filters.shape[-1] != channels:
                raise ValidationError(f"layer {j} expects {layer.filters.shape[-1]} channels, got {channels}")
            if layer.pool is not None and len(layer.pool) != m:
                raise ValidationError(f"layer {j} pool window needs {m} entries")
            spatial = layer.output_spatial(spatial)
            channels = layer.filters.shape[0]
            shapes.append(tuple(spatial) + (channels,))
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "_shapes", tuple(shapes))
        if self.budgets is not None:
            budgets = tuple(float(b) for b in self.budgets)
            if len(budgets) != len(layers):
                raise ValidationError("one budget per layer required")
            for j, (layer, m_j) in enumerate(zip(layers, budgets)):
                if filter_norm_12(layer.filters) > m_j + NORM_TOL:
                    raise ValidationError(f"layer {j}: filter norm exceeds budget {m_j}")
            object.__setattr__(self, "budgets", budgets)

    @property
    def spatial_dim(self) -> int:
        return len(self.input_shape) - 1

    @property
    def shapes(self):
        return self._shapes

    @property
    def input_dim(self) -> int:
        return math.prod(self.input_shape)

    @property
    def output_dim(self) -> int:
        return math.prod(self._shapes[-1])

    @property
    def depth(self) -> int:
        return len(self.layers)

    def _conv_layer(self, j, x):
        layer = self.layers[j]
        in_shape = self._shapes[j]
        conv_shape = layer.conv_shape(in_shape[:-1])
        table = gather_table(in_shape[:-1], layer.filters.shape[1:-1], layer.strides, conv_shape)
        v_out, v_in = layer.filters.shape[0], layer.filters.shape[-1]
        flat_f = layer.filters.reshape(v_out, -1, v_in)
        outs = [kernels.conv_gather(sample.reshape(-1, v_in), flat_f, table) for sample in x]
        return np.stack(outs).reshape((x.shape[0],) + conv_shape + (v_out,)), table

    def forward_cached(self, h):
        h = np.atleast_2d(np.asarray(h, dtype=np.float64))
        if h.shape[-1] != self.input_dim:
            raise ValidationError(f"latent dimension {h.shape[-1]} != {self.input_dim}")
        x = h.reshape((h.shape[0],) + self.input_shape)
        cache = []
        for j, layer in enumerate(self.layers):
            z, table = self._conv_layer(j, x)
            a = layer.activation(z)
            out = _pool_forward(a, layer.pool) if layer.pool is not None else a
            cache.append((x, z, a, table))
            x = out
        return x.reshape(x.shape[0], -1), cache

    def forward(self, h):
        h = np.asarray(h, dtype=np.float64)
        out, _ = self.forward_cached(h)
        return out.reshape(h.shape[:-1] + (self.output_dim,))

    def backward(self, cache, upstream):
        grads = [None] * self.depth
        g = upstream.reshape((upstream.shape[0],) + self._shapes[-1])
        for j in range(self.depth - 1, -1, -1):
            layer = self.layers[j]
            x, z, a, table = cache[j]
            if layer.pool is not None:
                g = _pool_backward(a, layer.pool, g)
            gz = g * layer.activation.derivative(z)
            v_out, v_in = layer.filters.shape[0], layer.filters.shape[-1]
            flat_f = layer.filters.reshape(v_out, -1, v_in)
            n_in = math.prod(x.shape[1:-1])
            gf = np.zeros_like(flat_f)
            gx = np.empty((x.shape[0], n_in, v_in))
            for b in range(x.shape[0]):
                up = gz[b].reshape(-1, v_out)
                gf += kernels.conv_gather_filter_grad(up, x[b].reshape(-1, v_in), table)
                gx[b] = kernels.conv_gather_adjoint(up, flat_f, table, n_in)
            grads[j] = gf.reshape(layer.filters.shape)
            g = gx.reshape(x.shape)
        return grads, g.reshape(g.shape[0], -1)

    def params(self):
        return [np.array(layer.filters) for layer in self.layers]

    def with_params(self, params, project=False):
        if project and self.budgets is not None:
            params = [_onto_budget(np.asarray(p, dtype=np.float64), m, filter_norm_12) for p, m in zip(params, self.budgets)]
        layers = tuple(
            ConvLayer(p, layer.strides, layer.activation, layer.pool, layer.out_shape)
            for p, layer in zip(params, self.layers)
        )
        return ConvNet(self.input_shape, layers, self.budgets)

    def layer_norms(self):
        reports = []
        for layer in self.layers:
            flat = layer.filters.reshape(layer.filters.shape[0], -1)
            reports.append(
                {
                    "entrywise_l1": entrywise_l1(flat),
                    "frobenius": frobenius(flat),
                    "filter_12": filter_norm_12(layer.filters),
                }
            )
        return reports

    def layer_constants(self, norm=None):
        out = []
        for j, layer in enumerate(self.layers):
            m = self.budgets[j] if self.budgets is not None else filter_norm_12(layer.filters)
            out.append((layer.activation.lipschitz, m))
        return out

    def lipschitz_bound(self, norm=None) -> float:
        return math.prod(l * m for l, m in self.layer_constants())

    def rescaled(self):
        if self.budgets is None:
            return self
        return self.with_params([layer.filters for layer in self.layers], project=True)

    def to_dict(self) -> dict:
        return {
            "kind": "conv",
            "input_shape": list(self.input_shape),
            "budgets": None if self.budgets is None else list(self.budgets),
            "layers": [
                {
                    "shape": list(layer.filters.shape),
                    "strides": [str(s) for s in layer.strides],
                    "activation": layer.activation.to_dict(),
                    "pool": None if layer.pool is None else list(layer.pool),
                    "out_shape": None if layer.out_shape is None else list(layer.out_shape),
                    "weights": layer.filters.reshape(-1).tolist(),
                }
                for layer in self.layers
            ],
        }


# --------------------------------------------------------------------------
# Shared operations
# --------------------------------------------------------------------------


def eval_map(fmap, space: DataSpace, h):
    """pi_Z(f(h)) for one latent or a batch of latents."""
    out = fmap.forward(h)
    if out.shape[-1] != space.dimension:
        raise ValidationError(f"map output dimension {out.shape[-1]} != data dimension {space.dimension}")
    return space.project(out)


def layer_norms(fmap):
    return fmap.layer_norms()


def map_distance(f, g, space: DataSpace, net) -> float:
    """max over the net of ||pi_Z f(h) - pi_Z g(h)||: a lower bound on sup over H."""
    net = np.atleast_2d(np.asarray(net, dtype=np.float64))
    if net.shape[0] == 0:
        raise ValidationError("empty net")
    diff2 = sqdist(eval_map(f, space, net), eval_map(g, space, net))
    return float(np.sqrt(np.max(diff2)))


def perturbation_bound(f: DenseNet, g: DenseNet, latent_max_norm: float, norm: str = "spectral"):
    """D * sum_j ||A_j - B_j|| / M_j with D = ||H||_inf prod_j L_j M_j.

    Valid when both nets respect the per-layer budgets M_j in ``norm``
    (budgets taken from ``f``, or f's actual norms if it has none).
    """
    consts = f.layer_constants(norm)
    d_const = latent_max_norm * math.prod(l * m for l, m in consts)
    measure = _NORMS[norm]
    return d_const * sum(
        measure(a - b) / m for (a, b), (_, m) in zip(zip(f.weights, g.weights), consts)
    )


def map_from_dict(data: dict):
    kind = data["kind"]
    if kind == "linear":
        d, k = data["shape"]
        return LinearMap(np.array(data["weights"], dtype=np.float64).reshape(d, k))
    if kind == "dense":
        weights = [
            np.array(layer["weights"], dtype=np.float64).reshape(layer["shape"])
            for layer in data["layers"]
        ]
        acts = [Activation.from_dict(layer["activation"]) for layer in data["layers"]]
        return DenseNet(tuple(weights), tuple(acts), data.get("budgets"), data.get("norm_kind", "spectral"))
    if kind == "conv":
        layers = []
        for layer in data["layers"]:
            layers.append(
                ConvLayer(
                    np.array(layer["weights"], dtype=np.float64).reshape(layer["shape"]),
                    tuple(Fraction(s) for s in layer["strides"]),
                    Activation.from_dict(layer["activation"]),
                    None if layer.get("pool") is None else tuple(layer["pool"]),
                    None if layer.get("out_shape") is None else tuple(layer["out_shape"]),
                )
            )
        return ConvNet(tuple(data["input_shape"]), tuple(layers), data.get("budgets"))
    raise ValidationError(f"unknown map kind {kind!r}")


# --------------------------------------------------------------------------
# Architecture summaries
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ArchitectureSpec:
    """Constants consumed by the bound calculators.

    For dense nets ``widths`` is w_0..w_l; for conv nets ``channels`` is
    v_0..v_l and ``filter_sizes`` holds the per-layer spatial filter
    extents u_j.  ``output_bounds`` holds B_1..B_l (B_0 is the latent max
    norm).
    """

    kind: str
    lipschitz: tuple
    budgets: tuple
    latent_max_norm: float
    data_diameter: float
    widths: tuple = ()
    channels: tuple = ()
    filter_sizes: tuple = ()
    budget_norm: str = "spectral"
    zizo: tuple = ()
    output_bounds: tuple | None = None

    def __post_init__(self):
        if self.kind not in ("dense", "conv"):
            raise ValidationError("architecture kind must be dense or conv")
        depth = len(self.lipschitz)
        if depth == 0 or len(self.budgets) != depth:
            raise ValidationError("lipschitz and budgets must have one entry per layer")
        if self.kind == "dense" and len(self.widths) != depth + 1:
            raise ValidationError("dense architecture needs depth + 1 widths")
        if self.kind == "conv" and (
            len(self.channels) != depth + 1 or len(self.filter_sizes) != depth
        ):
            raise ValidationError("conv architecture needs depth + 1 channels and depth filter sizes")
        if min(self.lipschitz) < 0 or min(self.budgets) < 0:
            raise ValidationError("constants must be nonnegative")
        if self.latent_max_norm < 0 or self.data_diameter < 0:
            raise ValidationError("constants must be nonnegative")
        if not self.zizo:
            object.__setattr__(self, "zizo", (True,) * depth)
        object.__setattr__(self, "lipschitz", tuple(float(x) for x in self.lipschitz))
        object.__setattr__(self, "budgets", tuple(float(x) for x in self.budgets))
        object.__setattr__(self, "filter_sizes", tuple(tuple(u) if np.ndim(u) else (int(u),) for u in self.filter_sizes))

    @property
    def depth(self) -> int:
        return len(self.lipschitz)

    def lm_product(self) -> float:
        return math.prod(l * m for l, m in zip(self.lipschitz, self.budgets))

    def param_count(self) -> int:
        if self.kind == "dense":
            return sum(a * b for a, b in zip(self.widths[:-1], self.widths[1:]))
        return sum(
            self.channels[j] * self.channels[j + 1] * math.prod(self.filter_sizes[j])
            for j in range(self.depth)
        )

    @classmethod
    def from_map(cls, fmap, latent: LatentSpace, space: DataSpace) -> "ArchitectureSpec":
        if isinstance(fmap, LinearMap):
            fmap = DenseNet((fmap.matrix,), (Activation("identity"),))
        common = dict(latent_max_norm=latent.max_norm(), data_diameter=space.diameter())
        if isinstance(fmap, DenseNet):
            consts = fmap.layer_constants()
            bounds = [act.output_bound(w) for act, w in zip(fmap.activations, fmap.widths[1:])]
            return cls(
                "dense",
                tuple(l for l, _ in consts),
                tuple(m for _, m in consts),
                widths=tuple(fmap.widths),
                budget_norm=fmap.norm_kind if fmap.budgets is not None else "spectral",
                zizo=tuple(a.zizo for a in fmap.activations),
                output_bounds=None if any(b is None for b in bounds) else tuple(bounds),
                **common,
            )
        consts = fmap.layer_constants()
        return cls(
            "conv",
            tuple(l for l, _ in consts),
            tuple(m for _, m in consts),
            channels=(fmap.input_shape[-1],) + tuple(l.filters.shape[0] for l in fmap.layers),
            filter_sizes=tuple(tuple(l.filters.shape[1:-1]) for l in fmap.layers),
            budget_norm="filter_12",
            zizo=tuple(l.activation.zizo for l in fmap.layers),
            **common,
        )

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "lipschitz": list(self.lipschitz),
            "budgets": list(self.budgets),
            "latent_max_norm": self.latent_max_norm,
            "data_diameter": self.data_diameter,
            "widths": list(self.widths),
            "channels": list(self.channels),
            "filter_sizes": [list(u) for u in self.filter_sizes],
            "budget_norm": self.budget_norm,
            "zizo": list(self.zizo),
            "output_bounds": None if self.output_bounds is None else list(self.output_bounds),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ArchitectureSpec":
        return cls(
            data["kind"],
            tuple(data["lipschitz"]),
            tuple(data["budgets"]),
            float(data["latent_max_norm"]),
            float(data["data_diameter"]),
            widths=tuple(data.get("widths", ())),
            channels=tuple(data.get("channels", ())),
            filter_sizes=tuple(tuple(u) for u in data.get("filter_sizes", ())),
            budget_norm=data.get("budget_norm", "spectral"),
            zizo=tuple(data.get("zizo", ())),
            output_bounds=None if data.get("output_bounds") is None else tuple(data["output_bounds"]),
        )
