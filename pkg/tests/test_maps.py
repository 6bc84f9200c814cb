import json
import math

import numpy as np
import pytest

from codescheme.maps import (
    Activation,
    ArchitectureSpec,
    ConvLayer,
    ConvNet,
    DenseNet,
    LinearMap,
    conv_forward,
    entrywise_l1,
    eval_map,
    filter_norm_12,
    frobenius,
    layer_norms,
    map_distance,
    map_from_dict,
    perturbation_bound,
    spectral_norm,
)
from codescheme.spaces import DataSpace, LatentSpace, ValidationError, eps_net


def random_dense(rng, widths, act="relu", norm_kind="spectral"):
    budgets = rng.uniform(0.5, 2.0, size=len(widths) - 1)
    return DenseNet.random(widths, act, rng, budgets=budgets, norm_kind=norm_kind, scale=3.0)


def numeric_grad(fun, params, step=1e-5):
    out = []
    for j, p in enumerate(params):
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            hi = [q.copy() for q in params]
            lo = [q.copy() for q in params]
            hi[j][idx] += step
            lo[j][idx] -= step
            g[idx] = (fun(hi) - fun(lo)) / (2 * step)
        out.append(g)
    return out


class TestActivation:
    @pytest.mark.parametrize(
        "kind,lip,zizo", [("relu", 1, True), ("leaky_relu", 1, True), ("tanh", 1, True), ("sigmoid", 0.25, False),
                          ("identity", 1, True)]
    )
    def test_constants(self, kind, lip, zizo):
        a = Activation(kind)
        assert a.lipschitz == lip and a.zizo == zizo
        if zizo:
            assert a(np.zeros(3)).tolist() == [0, 0, 0]

    def test_sigmoid_bound(self):
        assert Activation("sigmoid").output_bound(9) == 3.0
        assert Activation("relu").output_bound(9) is None

    def test_unknown(self):
        with pytest.raises(ValidationError):
            Activation("swish")

    @pytest.mark.parametrize("kind", ["relu", "leaky_relu", "tanh", "sigmoid", "identity"])
    def test_lipschitz_holds(self, kind, rng):
        a = Activation(kind)
        x, y = rng.normal(scale=3, size=(2, 2000))
        assert np.all(np.abs(a(x) - a(y)) <= a.lipschitz * np.abs(x - y) + 1e-12)


class TestEval:
    def test_linear(self):
        f = LinearMap([[1, 0], [0, 2], [0, 0]])
        np.testing.assert_array_equal(eval_map(f, DataSpace.ball([0, 0, 0], 5), [1, 0]), [1, 0, 0])

    def test_dense_relu(self):
        f = DenseNet(([[1.0], [-1.0]],), (Activation("relu"),))
        box = DataSpace.box([-1, -1], [1, 1])
        np.testing.assert_array_equal(eval_map(f, box, [1.0]), [1, 0])
        np.testing.assert_array_equal(eval_map(f, box, [-1.0]), [0, 1])

    def test_dimension_mismatch(self):
        f = LinearMap(np.eye(2))
        with pytest.raises(ValidationError):
            eval_map(f, DataSpace.ball([0, 0, 0], 1), [1, 0])
        with pytest.raises(ValidationError):
            f.forward([1, 0, 0])

    def test_budget_checked(self):
        with pytest.raises(ValidationError):
            DenseNet((np.eye(2) * 2,), ("relu",), budgets=(1.0,))

    def test_zizo_maps_zero_to_zero(self, rng):
        f = random_dense(rng, [3, 5, 4, 2], "tanh")
        np.testing.assert_array_equal(f.forward(np.zeros(3)), np.zeros(2))


class TestConv:
    def test_scalar_filter(self):
        out = conv_forward(np.array([[1.0], [2.0], [3.0]]), np.array([[[2.0]]]), 1)
        np.testing.assert_array_equal(out[:, 0], [2, 4, 6])

    def test_zero_padding_centred(self):
        filt = np.array([1.0, 0.0, -1.0]).reshape(1, 3, 1)
        out = conv_forward(np.array([[1.0], [2.0], [3.0]]), filt, 1)
        np.testing.assert_array_equal(out[:, 0], [-2, -2, 2])

    def test_two_dimensional(self):
        out = conv_forward(np.ones((2, 2, 1)), np.full((1, 1, 1, 1), 2.0), (1, 1))
        np.testing.assert_array_equal(out, np.full((2, 2, 1), 2.0))

    def test_nonpositive_stride(self):
        with pytest.raises(ValidationError):
            conv_forward(np.ones((3, 1)), np.ones((1, 1, 1)), 0)

    def test_fractional_stride_reads_zero(self):
        # stride 1/2 doubles the output length; odd positions read non-integer indices
        out = conv_forward(np.array([[1.0], [2.0]]), np.ones((1, 1, 1)), 0.5)
        np.testing.assert_array_equal(out[:, 0], [1, 0, 2])

    def test_matches_direct_sum(self, rng):
        xi = rng.normal(size=(7, 2))
        filt = rng.normal(size=(3, 3, 2))
        out = conv_forward(xi, filt, 2)
        for i in range(out.shape[0]):
            for k in range(3):
                acc = 0.0
                for ip in range(3):
                    pos = ip + 1 + 2 * i + (1 - 3) // 2
                    if 1 <= pos <= 7:
                        acc += filt[k, ip] @ xi[pos - 1]
                assert math.isclose(out[i, k], acc, abs_tol=1e-12)

    def test_filter_norm(self):
        filt = np.zeros((2, 2, 1))
        filt[0] = [[1.0], [-2.0]]
        filt[1] = [[4.0], [0.0]]
        assert filter_norm_12(filt) == 5.0


class TestNorms:
    def test_values(self):
        assert math.isclose(spectral_norm(np.diag([3.0, 1.0])), 3.0, rel_tol=1e-10)
        assert entrywise_l1(np.array([[1, -2], [0, 3]])) == 6

    def test_ordering(self, rng):
        for _ in range(50):
            a = rng.normal(size=rng.integers(1, 6, size=2))
            s = spectral_norm(a)
            assert math.isclose(s, np.linalg.norm(a, 2), rel_tol=1e-9)
            assert s <= frobenius(a) * (1 + 1e-12) <= entrywise_l1(a) * (1 + 1e-12)

    def test_layer_norm_report(self, rng):
        rep = layer_norms(random_dense(rng, [2, 3, 2]))
        assert set(rep[0]) >= {"entrywise_l1", "frobenius", "spectral"}


class TestMapDistance:
    def test_scalar_example(self):
        d = map_distance(LinearMap([[2.0]]), LinearMap([[3.0]]), DataSpace.ball([0], 10), [[-1.0], [0.0], [1.0]])
        assert d == 1.0

    def test_pseudometric(self, rng):
        space = DataSpace.ball([0, 0], 2.0)
        net = eps_net(LatentSpace.ball(2), 0.2)
        f, g, h = (random_dense(rng, [2, 4, 2]) for _ in range(3))
        assert map_distance(f, f, space, net) == 0
        assert map_distance(f, g, space, net) == map_distance(g, f, space, net)
        assert map_distance(f, h, space, net) <= map_distance(f, g, space, net) + map_distance(g, h, space, net) + 1e-12

    def test_empty_net(self):
        with pytest.raises(ValidationError):
            map_distance(LinearMap([[1.0]]), LinearMap([[1.0]]), DataSpace.ball([0], 1), np.zeros((0, 1)))


class TestRecursions:
    def test_output_norm(self, rng):
        space = DataSpace.ball(np.zeros(3), 100.0)
        for _ in range(200):
            f = random_dense(rng, [2, 4, 3], rng.choice(["relu", "tanh", "leaky_relu"]))
            h = rng.normal(size=(5, 2))
            lhs = np.linalg.norm(eval_map(f, space, h), axis=1)
            assert np.all(lhs <= f.lipschitz_bound() * np.linalg.norm(h, axis=1) * (1 + 1e-12) + 1e-12)

    def test_perturbation(self, rng):
        space = DataSpace.ball(np.zeros(2), 100.0)
        for _ in range(200):
            f = random_dense(rng, [3, 4, 2], "tanh")
            g = f.with_params([a + rng.normal(scale=0.1, size=a.shape) for a in f.params()], project=True)
            h = LatentSpace.ball(3).project(rng.normal(size=(20, 3)))
            lhs = np.linalg.norm(eval_map(f, space, h) - eval_map(g, space, h), axis=1).max()
            assert lhs <= perturbation_bound(f, g, 1.0) + 1e-9

    def test_last_layer_only(self, rng):
        space = DataSpace.ball(np.zeros(2), 100.0)
        f = random_dense(rng, [2, 3, 2])
        a_last = f.params()[-1] + rng.normal(scale=0.05, size=(2, 3))
        g = f.with_params([f.params()[0], a_last], project=True)
        net = rng.normal(size=(100, 2))
        net /= np.maximum(1, np.linalg.norm(net, axis=1))[:, None]
        (l1, m1), (l2, _) = f.layer_constants()
        bound = l2 * spectral_norm(f.params()[1] - g.params()[1]) * l1 * m1 * 1.0
        assert map_distance(f, g, space, net) <= bound + 1e-12

    @pytest.mark.parametrize("m", [1, 2, 3])
    def test_young(self, m, rng):
        for _ in range(300):
            v_in, v_out = rng.integers(1, 3, size=2)
            spatial = tuple(rng.integers(1, 5, size=m))
            u = tuple(rng.integers(1, 4, size=m))
            xi = rng.normal(size=spatial + (v_in,))
            filt = rng.normal(size=(v_out,) + u + (v_in,))
            strides = tuple(rng.choice([1, 2], size=m))
            out = conv_forward(xi, filt, strides)
            assert np.linalg.norm(out) <= filter_norm_12(filt) * np.linalg.norm(xi) * (1 + 1e-12)


class TestGradients:
    def test_dense_backprop(self, rng):
        # unbudgeted: finite differences step off a budget boundary
        f = DenseNet.random([2, 3, 2], "tanh", rng)
        h = rng.normal(size=(4, 2))
        up = rng.normal(size=(4, 2))
        _, cache = f.forward_cached(h)
        grads, _ = f.backward(cache, up)
        fun = lambda ps: float(np.sum(f.with_params([p for p in ps]).forward(h) * up))
        for g, n in zip(grads, numeric_grad(fun, f.params())):
            np.testing.assert_allclose(g, n, rtol=1e-5, atol=1e-7)

    def test_conv_backprop(self, rng):
        layers = (ConvLayer(rng.normal(size=(2, 3, 1)), 1, Activation("tanh")),
                  ConvLayer(rng.normal(size=(1, 2, 2)), 2, Activation("identity")))
        f = ConvNet((5, 1), layers)
        h = rng.normal(size=(3, 5))
        up = rng.normal(size=(3, f.output_dim))
        _, cache = f.forward_cached(h)
        grads, gh = f.backward(cache, up)
        fun = lambda ps: float(np.sum(f.with_params(ps).forward(h) * up))
        for g, n in zip(grads, numeric_grad(fun, f.params())):
            np.testing.assert_allclose(g, n, rtol=1e-5, atol=1e-7)
        fun_h = lambda ps: float(np.sum(f.forward(ps[0]) * up))
        np.testing.assert_allclose(gh, numeric_grad(fun_h, [h])[0], rtol=1e-5, atol=1e-7)


class TestSerialization:
    def test_round_trip_bit_exact(self, rng):
        maps = [
            LinearMap(rng.normal(size=(3, 2))),
            random_dense(rng, [2, 3, 3], "leaky_relu", "entrywise_l1"),
            ConvNet((4, 1), (ConvLayer(rng.normal(size=(2, 3, 1)) * 0.1, 1, Activation("relu"), pool=(2,)),),
                    budgets=(5.0,)),
        ]
        for f in maps:
            g = map_from_dict(json.loads(json.dumps(f.to_dict())))
            for a, b in zip(f.params(), g.params()):
                assert np.array_equal(a, b)
            h = rng.normal(size=(3, f.input_dim))
            assert np.array_equal(f.forward(h), g.forward(h))


class TestArchitectureSpec:
    def test_from_dense(self, rng):
        f = DenseNet.random([2, 3, 4], "relu", rng, budgets=[1.0, 2.0])
        spec = ArchitectureSpec.from_map(f, LatentSpace.ball(2, 0.5), DataSpace.ball(np.zeros(4), 1.0))
        assert spec.depth == 2 and spec.lm_product() == 2.0 and spec.param_count() == 18
        assert spec.latent_max_norm == 0.5 and spec.data_diameter == 2.0
        assert ArchitectureSpec.from_dict(spec.to_dict()).to_dict() == spec.to_dict()

    def test_conv_param_count(self):
        spec = ArchitectureSpec("conv", (1,), (1,), 1.0, 2.0, channels=(1, 1), filter_sizes=((3, 3),))
        assert spec.param_count() == 9

    def test_conv_count_below_dense(self):
        # 1-D, input width 8, filter width 3 < 8
        conv = ArchitectureSpec("conv", (1,), (1,), 1.0, 2.0, channels=(2, 3), filter_sizes=(3,))
        assert conv.param_count() < 8 * 2 * 8 * 3

    def test_sigmoid_bounds(self, rng):
        f = DenseNet.random([2, 4, 3], "sigmoid", rng)
        spec = ArchitectureSpec.from_map(f, LatentSpace.ball(2), DataSpace.ball(np.zeros(3), 1.0))
        assert spec.output_bounds == (2.0, math.sqrt(3))
        assert spec.zizo == (False, False)
