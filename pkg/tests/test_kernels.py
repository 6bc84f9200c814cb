import itertools

import numpy as np
import pytest

from codescheme import BACKEND, available_backends
from codescheme.maps import gather_table

BACKENDS = available_backends()


def test_backend_selected():
    assert BACKEND in BACKENDS


def test_fallback_env(tmp_path):
    import subprocess
    import sys

    code = "import codescheme; print(codescheme.BACKEND)"
    out = subprocess.run([sys.executable, "-c", code], env={"CODESCHEME_BACKEND": "python", "PATH": ""},
                         capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


class TestNearest:
    def test_ties_lowest_index(self, kernel_module):
        idx, err = kernel_module.nearest(np.array([[0.5], [2.0]]), np.array([[0.0], [1.0], [1.0]]))
        assert idx.tolist() == [0, 1] and err.tolist() == [0.25, 1.0]

    def test_matches_brute_force(self, kernel_module, rng):
        pts = rng.normal(size=(200, 3))
        book = rng.normal(size=(17, 3))
        idx, err = kernel_module.nearest(pts, book)
        d2 = ((pts[:, None, :] - book[None]) ** 2).sum(-1)
        np.testing.assert_array_equal(idx, d2.argmin(1))
        np.testing.assert_allclose(err, d2.min(1), rtol=1e-14)


@pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled kernels not built")
class TestCrossBackend:
    def test_nearest_bitwise(self, rng):
        py, cy = BACKENDS["python"], BACKENDS["cython"]
        pts, book = rng.normal(size=(300, 4)), rng.normal(size=(40, 4))
        for a, b in zip(py.nearest(pts, book), cy.nearest(pts, book)):
            assert np.array_equal(a, b)

    def test_conv_kernels(self, rng):
        py, cy = BACKENDS["python"], BACKENDS["cython"]
        for in_shape, fshape, strides in [((6,), (3,), (1,)), ((5, 4), (3, 2), (2, 1)), ((3, 3, 2), (2, 2, 1), (1, 1, 1))]:
            from fractions import Fraction

            strides = tuple(Fraction(s) for s in strides)
            out_shape = tuple(-(-w // int(s)) for w, s in zip(in_shape, strides))
            table = gather_table(in_shape, fshape, strides, out_shape)
            n_in = int(np.prod(in_shape))
            xi = rng.normal(size=(n_in, 2))
            filt = rng.normal(size=(3, int(np.prod(fshape)), 2))
            up = rng.normal(size=(table.shape[0], 3))
            np.testing.assert_allclose(py.conv_gather(xi, filt, table), cy.conv_gather(xi, filt, table), rtol=1e-13)
            np.testing.assert_allclose(py.conv_gather_adjoint(up, filt, table, n_in),
                                       cy.conv_gather_adjoint(up, filt, table, n_in), rtol=1e-12, atol=1e-14)
            np.testing.assert_allclose(py.conv_gather_filter_grad(up, xi, table),
                                       cy.conv_gather_filter_grad(up, xi, table), rtol=1e-12, atol=1e-14)

    def test_pollard(self, rng):
        py, cy = BACKENDS["python"], BACKENDS["cython"]
        for _ in range(10):
            n = int(rng.integers(1, 8))
            atoms = rng.normal(size=(n, 2))
            w = rng.dirichlet(np.ones(n))
            k = int(rng.integers(1, 4))
            a, b = py.pollard(atoms, w, k), cy.pollard(atoms, w, k)
            assert abs(a[0] - b[0]) <= 1e-12 and abs(a[1] - b[1]) <= 1e-12


class TestPollardKernel:
    def test_brute_force(self, kernel_module, rng):
        for _ in range(10):
            n = int(rng.integers(1, 7))
            atoms = rng.normal(size=(n, 2))
            w = rng.dirichlet(np.ones(n))
            k = int(rng.integers(1, 4))
            best = np.inf
            for lab in itertools.product(range(k), repeat=n):
                lab = np.array(lab)
                cost = 0.0
                for g in set(lab.tolist()):
                    m = lab == g
                    c = w[m] @ atoms[m] / w[m].sum()
                    cost += w[m] @ ((atoms[m] - c) ** 2).sum(1)
                best = min(best, cost)
            e_k, w2, _ = kernel_module.pollard(atoms, w, k)
            assert abs(e_k - best) <= 1e-12 and abs(w2 - best) <= 1e-12
