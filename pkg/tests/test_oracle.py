import numpy as np
import pytest
import torch

from polymgnet.blocks import blocks_from_roots, make_shared_conv
from polymgnet.oracle import (
    MAX_UNKNOWNS,
    check_block_equivalence,
    dense_block_sequence,
    dense_spectrum,
    gradient_check,
    materialize_operator,
    multiset_distance,
    propagate_residual,
)
from polymgnet.spectral import RootKind, RootSet

RL, RS, CP = RootKind.REAL_LINEAR, RootKind.REAL_SQUARED, RootKind.CONJUGATE_PAIR


def delta(c, pos):
    k = np.zeros((c, c, 3, 3))
    for i in range(c):
        k[i, i][pos] = 1.0
    return k


class TestMaterialize:
    def test_identity(self):
        op = materialize_operator(delta(2, (1, 1)), 4)
        np.testing.assert_array_equal(op.matrix, np.eye(32))

    def test_shift_is_permutation(self):
        m = materialize_operator(delta(1, (0, 2)), 5).matrix
        np.testing.assert_array_equal(m.sum(0), 1)
        np.testing.assert_array_equal(m.sum(1), 1)
        assert set(np.unique(m)) == {0.0, 1.0}
        assert not np.array_equal(m, np.eye(25))

    def test_matches_torch_conv(self, rng):
        w = rng.standard_normal((3, 2, 3, 3))
        conv = make_shared_conv(3, 2, 3, weight=torch.as_tensor(w))
        x = rng.standard_normal((1, 2, 6, 6))
        with torch.no_grad():
            y = conv(torch.as_tensor(x)).numpy().ravel()
        op = materialize_operator(w, 6)
        assert op.matrix.shape == (108, 72)
        np.testing.assert_allclose(op @ x.ravel(), y, atol=1e-12)

    def test_size_guard(self):
        with pytest.raises(ValueError, match="unknowns"):
            materialize_operator(np.zeros((5, 5, 3, 3)), 29)
        assert 29 * 29 * 5 > MAX_UNKNOWNS


class TestDenseSpectrum:
    def test_identity(self):
        np.testing.assert_allclose(dense_spectrum(materialize_operator(delta(1, (1, 1)), 3)), np.ones(9))

    def test_rejects_rectangular(self):
        with pytest.raises(ValueError, match="non-square"):
            dense_spectrum(materialize_operator(np.zeros((2, 1, 3, 3)), 3))

    def test_multiset_distance(self):
        a = np.array([1 + 1j, 1 - 1j, 2])
        assert multiset_distance(a, a[::-1]) == 0
        assert multiset_distance(a, a[:2]) == np.inf
        assert multiset_distance(a, a + 0.1) == pytest.approx(0.1)


class TestPropagateResidual:
    @pytest.fixture
    def op(self, rng):
        return materialize_operator(rng.standard_normal((2, 2, 3, 3)) / 3, 4)

    def test_empty_roots_identity(self, op, rng):
        r0 = rng.standard_normal(32)
        np.testing.assert_array_equal(propagate_residual(op, RootSet(), r0), r0)

    def test_eigenvector_annihilated(self):
        # symmetric operator gives real eigenpairs
        k = np.zeros((1, 1, 3, 3))
        k[0, 0] = [[0, 1, 0], [1, 3, 1], [0, 1, 0]]
        op = materialize_operator(k, 4)
        lam, vec = np.linalg.eigh(op.matrix)
        n = int(np.argmax(np.abs(lam)))
        r = propagate_residual(op, RootSet(((RL, lam[n]),)), vec[:, n])
        assert np.max(np.abs(r)) < 1e-10

    def test_squared_factors_match_matrix_powers(self, op, rng):
        roots = RootSet(((RS, 1.7), (RS, 0.9)))
        r0 = rng.standard_normal(32)
        a2 = op.matrix @ op.matrix
        expected = (np.eye(32) - a2 / 0.9**2) @ (np.eye(32) - a2 / 1.7**2) @ r0
        np.testing.assert_allclose(propagate_residual(op, roots, r0), expected, atol=1e-10)

    def test_pair_is_real(self, op, rng):
        r = propagate_residual(op, RootSet(((CP, 0.4 + 1.1j),)), rng.standard_normal((32, 3)))
        assert r.shape == (32, 3) and r.dtype == np.float64

    def test_unknown_kind(self, op):
        with pytest.raises(ValueError, match="unknown root kind"):
            propagate_residual(op, [("cubic", 1.0)], np.zeros(32))

    def test_block_sequence_consistent_with_residual(self, op, rng):
        roots = RootSet(((RL, 2.0), (CP, 1 + 1j), (RS, 1.5)))
        u0, f = rng.standard_normal(32), rng.standard_normal(32)
        u = dense_block_sequence(op, roots, u0, f)
        np.testing.assert_allclose(f - op @ u, propagate_residual(op, roots, f - op @ u0), atol=1e-10)


class TestBlockEquivalence:
    @pytest.mark.parametrize("roots", [
        RootSet(((RL, 0.8), (RL, -1.9))),
        RootSet(((RL, 0.8), (RL, -1.9), (CP, 0.3 + 1.2j))),
        RootSet(((RS, 1.4), (RS, 1.4))),
        RootSet(((RS, 1.4), (RS, 1.4), (CP, 0.3 + 1.2j), (CP, -0.6 + 0.5j))),
    ])
    def test_pass(self, roots):
        rep = check_block_equivalence(roots, g=8, c=4, tol=1e-10)
        assert rep.passed, str(rep)
        assert rep.degree == roots.degree

    def test_perturbed_coefficient_fails(self, rng):
        roots = RootSet(((RL, 0.8), (RL, -1.9)))
        kernel = rng.standard_normal((4, 4, 3, 3)) / 3
        A = make_shared_conv(4, 4, 3, weight=torch.as_tensor(kernel))
        blocks = blocks_from_roots(roots, A, 4)
        with torch.no_grad():
            blocks[0].alpha += 1e-3
        rep = check_block_equivalence(roots, 8, 4, 1e-10, blocks=blocks, kernel=kernel)
        assert not rep.passed and "FAIL" in str(rep)

    def test_pair_equals_two_complex_linear_factors(self, rng):
        op = materialize_operator(rng.standard_normal((2, 2, 3, 3)) / 3, 4)
        z = 0.7 + 0.9j
        r0 = rng.standard_normal(32)
        eye = np.eye(32)
        two = (eye - op.matrix / np.conj(z)) @ (eye - op.matrix / z) @ r0
        np.testing.assert_allclose(propagate_residual(op, RootSet(((CP, z),)), r0), two.real, atol=1e-10)
        u = dense_block_sequence(op, RootSet(((CP, z),)), np.zeros(32), r0)
        np.testing.assert_allclose(r0 - op @ u, two.real, atol=1e-10)

    def test_explicit_blocks_need_kernel(self):
        with pytest.raises(ValueError, match="shared kernel"):
            check_block_equivalence(RootSet(((RL, 1.0),)), blocks=[object()])


class TestGradientCheck:
    def test_real_linear_linear_mode(self):
        assert gradient_check("real_linear", "linear") <= 1e-7

    def test_conjugate_pair_relu_at_residual(self):
        assert gradient_check("conjugate_pair", "R=relu") <= 1e-4

    def test_real_squared(self):
        assert gradient_check("real_squared", "linear") <= 1e-6

    def test_alpha_gradient_of_squared_block(self, rng):
        # d/d alpha of <w, u + alpha A(relu(r))> is <w, A(relu(r))>
        from polymgnet.blocks import SquaredRealBlock
        A = make_shared_conv(2, 2, 3, weight=torch.as_tensor(rng.standard_normal((2, 2, 3, 3))))
        block = SquaredRealBlock(A, 0.7, "R=relu", 2)
        u, f, w = (torch.as_tensor(rng.standard_normal((1, 2, 4, 4))) for _ in range(3))
        (block(u, f) * w).sum().backward()
        with torch.no_grad():
            expected = (A(torch.relu(f - A(u))) * w).sum()
        assert float(block.alpha.grad) == pytest.approx(float(expected), rel=1e-12)

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown block kind"):
            gradient_check("cubic")
