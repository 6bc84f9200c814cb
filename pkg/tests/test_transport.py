import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from codescheme.coding import EncodeStrategy, empirical_risk
from codescheme.maps import DenseNet, LinearMap
from codescheme.spaces import DataSpace, DiscreteMeasure, LatentSpace, ValidationError
from codescheme.transport import (
    MARGINAL_TOL,
    best_pushforward,
    pollard_check,
    pushforward,
    risk_shift_bound,
    wasserstein,
    wasserstein_1d,
)


def rand_measure(rng, n, d=2):
    return DiscreteMeasure(rng.normal(size=(n, d)), rng.dirichlet(np.ones(n)))


class TestWasserstein:
    def test_single_atoms(self):
        dist, c = wasserstein(DiscreteMeasure.uniform([[0, 0]]), DiscreteMeasure.uniform([[3, 4]]), 2)
        assert dist == 5

    def test_two_point_w1(self):
        dist, _ = wasserstein(DiscreteMeasure.uniform([[0], [1]]), DiscreteMeasure.uniform([[0], [2]]), 1)
        assert abs(dist - 0.5) <= 1e-12

    def test_identical(self, rng):
        P = rand_measure(rng, 5)
        assert wasserstein(P, P, 2)[0] <= 1e-7

    def test_bad_inputs(self):
        P = DiscreteMeasure.uniform([[0.0]])
        with pytest.raises(ValidationError):
            wasserstein(P, DiscreteMeasure.uniform([[0.0, 1.0]]))
        with pytest.raises(ValidationError):
            wasserstein(P, P, 3)
        with pytest.raises(ValidationError):
            DiscreteMeasure([[0.0], [1.0]], [0.3, 0.3])

    def test_feasible_certificate(self, rng):
        for _ in range(20):
            P, Q = rand_measure(rng, int(rng.integers(2, 9))), rand_measure(rng, int(rng.integers(2, 9)))
            dist, c = wasserstein(P, Q, 2)
            assert c.marginal_residual(P.weights, Q.weights) <= MARGINAL_TOL
            assert np.all(c.flow >= 0)
            cost = ((P.atoms[:, None] - Q.atoms[None]) ** 2).sum(-1)
            assert math.isclose(math.fsum((c.flow * cost).ravel()), dist**2, rel_tol=1e-12, abs_tol=1e-15)

    @pytest.mark.parametrize("p", [1, 2])
    def test_quantile_oracle(self, p, rng):
        for _ in range(30):
            # rational weights expanded to uniform atoms on each side
            xs = rng.normal(size=int(rng.integers(1, 6)))
            ys = rng.normal(size=int(rng.integers(1, 6)))
            mx, my = rng.integers(1, 4, size=xs.size), rng.integers(1, 4, size=ys.size)
            P = DiscreteMeasure.uniform(np.repeat(xs, mx)[:, None])
            Q = DiscreteMeasure.uniform(np.repeat(ys, my)[:, None])
            assert abs(wasserstein(P, Q, p)[0] - wasserstein_1d(P, Q, p)) <= 1e-9

    def test_triangle(self, rng):
        for _ in range(30):
            P, Q, R = (rand_measure(rng, int(rng.integers(1, 6))) for _ in range(3))
            for p in (1, 2):
                assert wasserstein(P, R, p)[0] <= wasserstein(P, Q, p)[0] + wasserstein(Q, R, p)[0] + 1e-9

    @given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 10_000))
    def test_symmetry(self, n, m, seed):
        rng = np.random.default_rng(seed)
        P, Q = rand_measure(rng, n), rand_measure(rng, m)
        assert abs(wasserstein(P, Q, 2)[0] - wasserstein(Q, P, 2)[0]) <= 1e-9


class TestPushforward:
    def test_dirac(self):
        f = LinearMap.from_codewords([[1.0, 2.0], [3.0, 4.0]])
        mu = pushforward(f, DataSpace.ball([0, 0], 10), DiscreteMeasure.uniform([[1.0, 0.0]]))
        np.testing.assert_array_equal(mu.atoms, [[1, 2]])

    def test_merge(self):
        f = LinearMap.from_codewords([[1.0], [1.0]])
        mu = pushforward(f, DataSpace.ball([0], 10), DiscreteMeasure.uniform(np.eye(2)))
        assert mu.size == 1 and mu.weights[0] == 1

    def test_linear_keeps_weights(self, rng):
        H = LatentSpace.ball(2)
        net = H.eps_net(0.3)
        pi = DiscreteMeasure.uniform(net)
        mu = pushforward(LinearMap(rng.normal(size=(3, 2))), DataSpace.ball(np.zeros(3), 100), pi)
        assert mu.size == net.shape[0]
        np.testing.assert_allclose(mu.weights, pi.weights)


class TestBestPushforward:
    def test_in_image(self):
        f = LinearMap.from_codewords([[0.5], [4.0]])
        _, w = best_pushforward(DiscreteMeasure.uniform([[4.0]]), f, DataSpace.box([0], [4]), np.eye(2))
        assert w == 0

    def test_014(self):
        f = LinearMap.from_codewords([[0.5], [4.0]])
        pi, w = best_pushforward(DiscreteMeasure.uniform([[0.0], [1.0], [4.0]]), f, DataSpace.box([0], [4]), np.eye(2))
        assert abs(w - 1 / 6) <= 1e-15
        np.testing.assert_allclose(pi.weights, [2 / 3, 1 / 3])

    def test_single_point_net(self, rng):
        P = rand_measure(rng, 6)
        f = LinearMap(np.eye(2))
        _, w = best_pushforward(P, f, DataSpace.ball([0, 0], 100), [[0.3, -0.2]])
        assert math.isclose(w, P.weights @ ((P.atoms - [0.3, -0.2]) ** 2).sum(1), rel_tol=1e-13)

    def test_matches_lp_with_free_marginal(self, rng):
        space = DataSpace.ball([0, 0], 3)
        f = DenseNet.random([2, 3, 2], "tanh", rng, scale=2)
        net = LatentSpace.ball(2).eps_net(0.5)
        P = DiscreteMeasure(space.project(rng.normal(size=(6, 2))), rng.dirichlet(np.ones(6)))
        pi, w = best_pushforward(P, f, space, net)
        lp = wasserstein(P, pushforward(f, space, pi), 2)[0] ** 2
        assert abs(lp - w) <= 1e-9

    def test_equals_empirical_risk(self, rng):
        space = DataSpace.ball([0, 0, 0], 2)
        H = LatentSpace.ball(2)
        strat = EncodeStrategy.exhaustive(0.4)
        for _ in range(20):
            f = DenseNet.random([2, 4, 3], "relu", rng, scale=2)
            P = DiscreteMeasure(space.project(rng.normal(size=(10, 3))), rng.dirichlet(np.ones(10)))
            _, w = best_pushforward(P, f, space, H.eps_net(0.4))
            assert w == empirical_risk(f, P, H, strat, space=space)

    def test_empty_net(self):
        with pytest.raises(ValidationError):
            best_pushforward(DiscreteMeasure.uniform([[0.0]]), LinearMap([[1.0]]), DataSpace.ball([0], 1), np.zeros((0, 1)))


class TestPollard:
    def test_k_equals_n(self, rng):
        rep = pollard_check(DiscreteMeasure.uniform(rng.normal(size=(4, 2))), 4)
        assert rep.e_k <= 1e-15 and rep.w2sq_min <= 1e-15

    def test_014(self):
        rep = pollard_check(DiscreteMeasure.uniform([[0.0], [1.0], [4.0]]), 2)
        assert abs(rep.e_k - 1 / 6) <= 1e-15 and rep.agrees

    def test_k1_variance(self, rng):
        P = rand_measure(rng, 7)
        mean = P.weights @ P.atoms
        var = P.weights @ ((P.atoms - mean) ** 2).sum(1)
        assert abs(pollard_check(P, 1).e_k - var) <= 1e-12

    def test_cap(self, rng):
        with pytest.raises(ValidationError, match="fit_vq_lloyd"):
            pollard_check(rand_measure(rng, 13), 2)
        with pytest.raises(ValidationError):
            pollard_check(rand_measure(rng, 3), 5)


class TestRiskShift:
    def test_coupling_estimate(self, rng):
        space = DataSpace.ball([0, 0], 1)
        net = LatentSpace.ball(2).eps_net(0.3)
        for _ in range(30):
            f = DenseNet.random([2, 3, 2], "tanh", rng, scale=2)
            P = DiscreteMeasure.uniform(space.project(rng.normal(size=(int(rng.integers(1, 8)), 2))))
            Q = DiscreteMeasure.uniform(space.project(rng.normal(size=(int(rng.integers(1, 8)), 2))))
            lhs, rhs = risk_shift_bound(f, space, net, P, Q)
            assert lhs <= rhs + 1e-9
