import math

import numpy as np
import pytest

from framepol.linalg3 import SymEig3, cross, orthonormalize, random_rotation, sym_eig3


def _char_poly_roots_bisect(m):
    """Independent eigenvalue oracle: bisect the characteristic cubic.

    p(x) = det(xI - m) = x^3 - tr*x^2 + c1*x - det, brackets found by a sign
    scan over a grid that comfortably contains all eigenvalues.
    """
    tr = np.trace(m)
    c1 = (
        m[0, 0] * m[1, 1]
        - m[0, 1] * m[1, 0]
        + m[0, 0] * m[2, 2]
        - m[0, 2] * m[2, 0]
        + m[1, 1] * m[2, 2]
        - m[1, 2] * m[2, 1]
    )
    det = np.linalg.det(m)

    def p(x):
        return ((x - tr) * x + c1) * x - det

    bound = np.linalg.norm(m) + 1.0
    grid = np.linspace(-bound, bound, 20001)
    vals = p(grid)
    roots = []
    for lo, hi in zip(grid[:-1], grid[1:]):
        if p(lo) == 0.0:
            roots.append(lo)
            continue
        if p(lo) * p(hi) < 0:
            a, b = lo, hi
            for _ in range(200):
                mid = 0.5 * (a + b)
                if p(a) * p(mid) <= 0:
                    b = mid
                else:
                    a = mid
            roots.append(0.5 * (a + b))
    return sorted(roots)


class TestSymEig3:
    def test_identity(self):
        res = sym_eig3(np.eye(3))
        np.testing.assert_array_equal(res.eigenvalues, [1.0, 1.0, 1.0])
        np.testing.assert_array_equal(res.eigenvectors, np.eye(3))
        assert res.degenerate

    def test_diagonal_permutation(self):
        res = sym_eig3(np.diag([3.0, 1.0, 2.0]))
        np.testing.assert_array_equal(res.eigenvalues, [1.0, 2.0, 3.0])
        expected = np.zeros((3, 3))
        expected[1, 0] = expected[2, 1] = expected[0, 2] = 1.0
        np.testing.assert_array_equal(res.eigenvectors, expected)
        assert not res.degenerate

    def test_reconstruction_and_cubic_oracle(self):
        rng = np.random.default_rng(1234)
        for _ in range(100):
            a = rng.normal(size=(3, 3)) * rng.uniform(0.1, 10)
            m = 0.5 * (a + a.T)
            res = sym_eig3(m)
            rec = res.eigenvectors @ np.diag(res.eigenvalues) @ res.eigenvectors.T
            assert np.linalg.norm(rec - m) <= 1e-10 * (1.0 + np.linalg.norm(m))
            roots = _char_poly_roots_bisect(m)
            if len(roots) == 3:  # distinct-root case only; ties are below grid resolution
                np.testing.assert_allclose(res.eigenvalues, roots, atol=1e-6 * (1 + abs(roots[-1])))

    def test_eigen_equation(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            a = rng.normal(size=(3, 3))
            m = 0.5 * (a + a.T)
            res = sym_eig3(m)
            scale = np.linalg.norm(m)
            for k in range(3):
                v = res.eigenvectors[:, k]
                assert np.linalg.norm(m @ v - res.eigenvalues[k] * v) <= 1e-10 * max(1.0, scale)

    def test_column_orthonormality(self):
        rng = np.random.default_rng(99)
        for _ in range(50):
            a = rng.normal(size=(3, 3))
            res = sym_eig3(0.5 * (a + a.T))
            e = res.eigenvectors
            assert np.abs(e.T @ e - np.eye(3)).max() <= 1e-12

    def test_canonical_sign(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            a = rng.normal(size=(3, 3))
            res = sym_eig3(0.5 * (a + a.T))
            for k in range(3):
                col = res.eigenvectors[:, k]
                assert col[int(np.argmax(np.abs(col)))] >= 0

    def test_deterministic_bits(self):
        rng = np.random.default_rng(11)
        a = rng.normal(size=(3, 3))
        m = 0.5 * (a + a.T)
        r1 = sym_eig3(m)
        r2 = sym_eig3(m)
        assert (r1.eigenvalues == r2.eigenvalues).all()
        assert (r1.eigenvectors == r2.eigenvectors).all()

    def test_degenerate_flag_on_ties(self):
        assert sym_eig3(np.diag([2.0, 2.0, 5.0])).degenerate
        assert sym_eig3(np.zeros((3, 3))).degenerate
        assert not sym_eig3(np.diag([1.0, 2.0, 4.0])).degenerate

    def test_errors(self):
        with pytest.raises(ValueError, match="non-finite"):
            sym_eig3(np.full((3, 3), np.nan))
        with pytest.raises(ValueError, match="not symmetric"):
            sym_eig3(np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]))


class TestCross:
    def test_canonical_basis(self):
        np.testing.assert_array_equal(cross([1, 0, 0], [0, 1, 0]), [0.0, 0.0, 1.0])

    def test_self_cross_is_zero(self):
        v = np.array([0.3, -1.2, 2.0])
        np.testing.assert_array_equal(cross(v, v), np.zeros(3))

    def test_orthogonality_and_norm(self):
        rng = np.random.default_rng(21)
        for _ in range(50):
            a, b = rng.normal(size=3), rng.normal(size=3)
            c = cross(a, b)
            assert abs(a @ c) <= 1e-12 * np.linalg.norm(a) * np.linalg.norm(b)
            assert abs(b @ c) <= 1e-12 * np.linalg.norm(a) * np.linalg.norm(b)
            cos = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
            sin = math.sqrt(max(0.0, 1 - cos * cos))
            np.testing.assert_allclose(
                np.linalg.norm(c), np.linalg.norm(a) * np.linalg.norm(b) * sin, rtol=1e-10
            )


class TestOrthonormalize:
    def test_identity_fixed(self):
        np.testing.assert_array_equal(orthonormalize(np.eye(3)), np.eye(3))

    def test_axis_scaling_removed(self):
        np.testing.assert_allclose(orthonormalize(np.diag([2.0, 3.0, 4.0])), np.eye(3), atol=1e-15)

    def test_random_well_conditioned(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            m = rng.normal(size=(3, 3))
            if abs(np.linalg.det(m)) < 1e-3:
                continue
            f = orthonormalize(m)
            assert np.abs(f.T @ f - np.eye(3)).max() <= 1e-12
            assert abs(np.linalg.det(f) - 1.0) <= 1e-10

    def test_proper_rotation_even_for_left_handed_input(self):
        m = np.diag([1.0, 1.0, -1.0])
        f = orthonormalize(m)
        assert abs(np.linalg.det(f) - 1.0) <= 1e-10

    def test_rotation_equivariance(self):
        rng = np.random.default_rng(17)
        for _ in range(50):
            m = rng.normal(size=(3, 3))
            if abs(np.linalg.det(m)) < 1e-3:
                continue
            rot = random_rotation(rng)
            assert np.abs(orthonormalize(rot @ m) - rot @ orthonormalize(m)).max() <= 1e-10

    def test_degenerate_basis_raises(self):
        m = np.ones((3, 3))
        with pytest.raises(ValueError, match="degenerate basis"):
            orthonormalize(m)


class TestRandomRotation:
    def test_group_membership(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            r = random_rotation(rng)
            assert np.abs(r.T @ r - np.eye(3)).max() <= 1e-12
            assert abs(np.linalg.det(r) - 1.0) <= 1e-12

    def test_seeded_reproducibility(self):
        r1 = random_rotation(np.random.default_rng(123))
        r2 = random_rotation(np.random.default_rng(123))
        assert (r1 == r2).all()

    def test_haar_mean_entries(self):
        # Under Haar, each entry has mean 0 and variance 1/3.
        rng = np.random.default_rng(2024)
        n = 10_000
        acc = np.zeros((3, 3))
        for _ in range(n):
            acc += random_rotation(rng)
        mean = acc / n
        sigma = math.sqrt(1.0 / 3.0 / n)
        assert np.abs(mean).max() <= 3.5 * sigma
