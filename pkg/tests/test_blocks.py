import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from polymgnet.blocks import (
    BLOCK_KINDS,
    PLACEMENTS,
    TABLE_I_PLACEMENTS,
    ConjugatePairBlock,
    MgNetBlock,
    NonFiniteError,
    PlacementSpec,
    RealLinearBlock,
    ResNetBlock,
    Site,
    SiteSpec,
    SquaredRealBlock,
    block_weight_count,
    blocks_from_roots,
    make_block_for_check,
    make_shared_conv,
    poly_level_weight_count,
    residual,
)
from polymgnet.oracle import materialize_operator, propagate_residual
from polymgnet.spectral import RootKind, RootSet

RL, RS, CP = RootKind.REAL_LINEAR, RootKind.REAL_SQUARED, RootKind.CONJUGATE_PAIR


def scalar_A(lam):
    """1-channel operator that multiplies every pixel by ``lam``."""
    w = torch.zeros(1, 1, 3, 3, dtype=torch.float64)
    w[0, 0, 1, 1] = lam
    return make_shared_conv(1, 1, 3, weight=w)


def random_A(rng, c=4):
    return make_shared_conv(c, c, 3, weight=torch.as_tensor(rng.standard_normal((c, c, 3, 3)) / 3))


def const(value, shape=(1, 1, 4, 4)):
    return torch.full(shape, float(value), dtype=torch.float64)


class TestPlacementSpec:
    def test_parse_orders(self):
        p = PlacementSpec.parse("U=bn,relu; R=relu,bn")
        assert p.U == SiteSpec(True, True, "bn_then_relu")
        assert p.R == SiteSpec(True, True, "relu_then_bn")
        assert not p.P.active

    def test_code_round_trip(self):
        for name, spec in PLACEMENTS.items():
            assert PlacementSpec.parse(spec.code()) == spec, name

    def test_dict_round_trip(self):
        spec = PLACEMENTS["reluU_bnP_bnR_reluR"]
        assert PlacementSpec.from_dict(spec.to_dict()) == spec

    @pytest.mark.parametrize("bad", ["X=relu", "U=relu,relu", "U=gelu", "U relu"])
    def test_parse_errors(self, bad):
        with pytest.raises(ValueError):
            PlacementSpec.parse(bad)

    def test_from_dict_rejects_unknown(self):
        with pytest.raises(KeyError, match="unknown placement site"):
            PlacementSpec.from_dict({"Q": {}})
        with pytest.raises(KeyError, match="placement.U"):
            PlacementSpec.from_dict({"U": {"dropout": True}})

    def test_coerce(self):
        assert PlacementSpec.coerce(None).linear
        assert PlacementSpec.coerce("relu_outside") == PlacementSpec.parse("U=relu")
        assert PlacementSpec.coerce({"R": {"relu": True}}) == PlacementSpec.parse("R=relu")
        with pytest.raises(TypeError):
            PlacementSpec.coerce(3)

    def test_site_spec_validation(self):
        with pytest.raises(ValueError, match="order"):
            SiteSpec(True, True, "sideways")
        with pytest.raises(TypeError):
            SiteSpec(bn=1)

    def test_mgnet_row_is_relu_then_bn(self):
        p = PLACEMENTS["mgnet"]
        assert p.P.order == p.R.order == "relu_then_bn"

    def test_table_rows(self):
        row = TABLE_I_PLACEMENTS["relu_outside_after_residual"]
        assert row.U.relu and row.R.relu and not row.P.active
        assert not any(s.bn for r in TABLE_I_PLACEMENTS.values() for s in (r.U, r.P, r.R))


class TestSite:
    def test_disabled_is_identity(self):
        x = torch.randn(2, 3, 4, 4)
        assert Site(SiteSpec(), 3)(x) is x

    def test_relu_clamps(self):
        x = torch.tensor([[[[-1.0, 2.0]]]])
        np.testing.assert_array_equal(Site(SiteSpec(relu=True), 1)(x).numpy(), [[[[0.0, 2.0]]]])

    def test_order(self):
        x = torch.randn(8, 2, 3, 3) - 1.0
        bn_relu = Site(SiteSpec(True, True, "bn_then_relu"), 2).train()(x)
        relu_bn = Site(SiteSpec(True, True, "relu_then_bn"), 2).train()(x)
        assert (bn_relu >= 0).all()
        assert (relu_bn < 0).any()

    def test_level_output_row(self):
        row = TABLE_I_PLACEMENTS["relu_outside_after_residual"]
        block = RealLinearBlock(scalar_A(1.0), 1.0, row, 1)
        x = torch.randn(1, 1, 4, 4, dtype=torch.float64)
        assert torch.equal(block.site_P(x), x)
        assert (Site(row.U, 1)(x) >= 0).all()


class TestResidual:
    def test_zero_features(self, rng):
        A = random_A(rng)
        f = torch.as_tensor(rng.standard_normal((1, 4, 8, 8)))
        assert torch.equal(residual(torch.zeros_like(f), f, A), f)

    def test_solved_system(self, rng):
        A = random_A(rng)
        u = torch.as_tensor(rng.standard_normal((1, 4, 8, 8)))
        with torch.no_grad():
            assert torch.count_nonzero(residual(u, A(u), A)) == 0

    def test_matches_dense(self, rng):
        w = rng.standard_normal((4, 4, 3, 3))
        A = make_shared_conv(4, 4, 3, weight=torch.as_tensor(w))
        u, f = rng.standard_normal((2, 1, 4, 8, 8))
        with torch.no_grad():
            r = residual(torch.as_tensor(u), torch.as_tensor(f), A).numpy().ravel()
        np.testing.assert_allclose(r, f.ravel() - materialize_operator(w, 8) @ u.ravel(), atol=1e-10)

    def test_shape_mismatch(self):
        A = make_shared_conv(2, 3)
        with pytest.raises(ValueError, match="shape"):
            residual(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 4), A)


class TestScalarBlocks:
    def test_linear_annihilates_at_root(self):
        A = scalar_A(2.0)
        block = RealLinearBlock(A, 0.5)
        u = block(const(0), const(1))
        np.testing.assert_allclose(u.detach().numpy(), 0.5)
        assert float(residual(u, const(1), A).detach().abs().max()) == 0

    def test_zero_residual_fixed_point(self, rng):
        A = random_A(rng)
        u = torch.as_tensor(rng.standard_normal((1, 4, 4, 4)))
        with torch.no_grad():
            f = A(u)
        for block in (RealLinearBlock(A, 0.3, "P=relu;R=relu"), SquaredRealBlock(A, 0.3, "U=bn,relu"),
                      ConjugatePairBlock(A, 1.0, 2.0, "R=relu"),
                      MgNetBlock(A, random_A(rng), "P=bn,relu")):
            block.eval()
            torch.testing.assert_close(block(u, f), u, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("lam,a,b", [(0.7, 1.0, 2.0), (-1.5, 0.3, 0.4), (2.0, -1.0, 0.5)])
    def test_pair_scalar_factor(self, lam, a, b):
        A = scalar_A(lam)
        block = ConjugatePairBlock(A, a, b)
        r1 = residual(block(const(0), const(1)), const(1), A)
        m2 = a * a + b * b
        np.testing.assert_allclose(r1.detach().numpy(), 1 - 2 * a * lam / m2 + lam**2 / m2, atol=1e-14)

    def test_pair_with_zero_imaginary_equals_two_linear(self, rng):
        A = random_A(rng)
        u, f = (torch.as_tensor(rng.standard_normal((1, 4, 6, 6))) for _ in range(2))
        pair = ConjugatePairBlock(A, 1.3, 0.0)
        lin = RealLinearBlock(A, 1 / 1.3)
        with torch.no_grad():
            torch.testing.assert_close(pair(u, f), lin(lin(u, f), f), rtol=0, atol=1e-12)

    def test_squared_scalar(self):
        A = scalar_A(1.5)
        u = SquaredRealBlock(A, 1 / 1.5**2)(const(0), const(1))
        assert float(residual(u, const(1), A).detach().abs().max()) < 1e-15
        u = SquaredRealBlock(A, 0.2)(const(0), const(1))
        np.testing.assert_allclose(residual(u, const(1), A).detach().numpy(), 1 - 0.2 * 1.5**2)

    def test_mgnet_zero_extractor(self, rng):
        A = random_A(rng)
        B = make_shared_conv(4, 4, 3, weight=torch.zeros(4, 4, 3, 3, dtype=torch.float64))
        u, f = (torch.as_tensor(rng.standard_normal((1, 4, 4, 4))) for _ in range(2))
        assert torch.equal(MgNetBlock(A, B, "R=relu,bn;P=relu")(u, f), u)

    def test_stationary_blocks_alias_B(self, rng):
        A, B = random_A(rng), random_A(rng)
        b1, b2 = MgNetBlock(A, B), MgNetBlock(A, B)
        u, f = (torch.as_tensor(rng.standard_normal((1, 4, 4, 4))) for _ in range(2))
        with torch.no_grad():
            before = b2(u, f)
            b1.B.weight.mul_(2)
            assert not torch.equal(b2(u, f), before)
        assert b1.B.weight is b2.B.weight

    def test_mgnet_with_polynomial_extractor(self, rng):
        # B = p(A) for one real root reproduces the linear block
        w = rng.standard_normal((4, 4, 3, 3)) / 3
        A = make_shared_conv(4, 4, 3, weight=torch.as_tensor(w))
        eye = np.zeros((4, 4, 3, 3))
        eye[range(4), range(4), 1, 1] = 0.4
        B = make_shared_conv(4, 4, 3, weight=torch.as_tensor(eye))
        u, f = (torch.as_tensor(rng.standard_normal((1, 4, 5, 5))) for _ in range(2))
        with torch.no_grad():
            torch.testing.assert_close(MgNetBlock(A, B)(u, f), RealLinearBlock(A, 0.4)(u, f))


class TestProperties:
    @given(st.permutations(range(4)), st.integers(0, 1000))
    def test_order_commutes_in_linear_mode(self, perm, seed):
        rng = np.random.default_rng(seed)
        A = random_A(rng)
        roots = RootSet(((RL, 1.2), (RS, 1.6), (CP, 0.2 + 1.1j), (RL, -0.9)))
        blocks = list(blocks_from_roots(roots, A, 4))
        u0, f = (torch.as_tensor(rng.standard_normal((1, 4, 6, 6))) for _ in range(2))
        with torch.no_grad():
            ua, ub = u0, u0
            for b in blocks:
                ua = b(ua, f)
            for k in perm:
                ub = blocks[k](ub, f)
            diff = (residual(ua, f, A) - residual(ub, f, A)).abs().max()
        assert float(diff) <= 5e-10

    def test_kernel_mode_preserved(self, rng):
        # a kernel whose symbol vanishes at theta = 0: constant images lie in the null space
        w = rng.standard_normal((2, 2, 3, 3))
        w -= w.sum(axis=(2, 3), keepdims=True) / 9
        A = make_shared_conv(2, 2, 3, weight=torch.as_tensor(w))
        roots = RootSet(((RL, 0.9), (RS, 1.3), (CP, 0.5 + 0.5j)))
        f = torch.as_tensor(rng.standard_normal((1, 2, 1, 1))).expand(1, 2, 8, 8).contiguous()
        u = torch.zeros_like(f)
        with torch.no_grad():
            for b in blocks_from_roots(roots, A, 2):
                u = b(u, f)
            r = residual(u, f, A)
        torch.testing.assert_close(r, f, rtol=0, atol=1e-10)

    @pytest.mark.parametrize("kind", BLOCK_KINDS)
    @pytest.mark.parametrize("placement", list(PLACEMENTS))
    def test_outputs_real_and_shaped(self, kind, placement):
        module = make_block_for_check(kind, placement, 3, torch.Generator().manual_seed(0))
        u, f = torch.randn(2, 3, 4, 4), torch.randn(2, 3, 4, 4)
        out = module(u, f)
        assert out.shape == u.shape and out.dtype == torch.float32 and torch.isfinite(out).all()

    def test_dense_propagation_matches_blocks(self, rng):
        w = rng.standard_normal((4, 4, 3, 3)) / 3
        A = make_shared_conv(4, 4, 3, weight=torch.as_tensor(w))
        roots = RootSet(((RL, 1.1), (RL, -0.8)))
        u0, f = rng.standard_normal((2, 1, 4, 8, 8))
        u = torch.as_tensor(u0)
        with torch.no_grad():
            for b in blocks_from_roots(roots, A, 4):
                u = b(u, torch.as_tensor(f))
            r = residual(u, torch.as_tensor(f), A).numpy().ravel()
        op = materialize_operator(w, 8)
        expected = propagate_residual(op, roots, f.ravel() - op @ u0.ravel())
        np.testing.assert_allclose(r, expected, atol=1e-10)


class TestErrors:
    def test_non_finite_names_block(self):
        block = RealLinearBlock(scalar_A(1.0), float("inf"), index=(2, 1))
        with pytest.raises(NonFiniteError, match="level 2 block 1"):
            block(const(0), const(1))

    def test_pair_underflow(self):
        block = ConjugatePairBlock(scalar_A(1.0), 0.0, 0.0)
        with pytest.raises(NonFiniteError, match="underflow"):
            block(const(0), const(1))

    def test_projection_restores_modulus(self):
        block = ConjugatePairBlock(scalar_A(1.0), 3e-8, 4e-8, min_modulus=1e-3)
        block.project_()
        assert float(torch.hypot(block.a, block.b).detach()) == pytest.approx(1e-3)
        assert float((block.b / block.a).detach()) == pytest.approx(4 / 3)
        zero = ConjugatePairBlock(scalar_A(1.0), 0.0, 0.0, min_modulus=1e-3)
        zero.project_()
        assert zero.a.item() == pytest.approx(1e-3)

    def test_rectangular_A_rejected(self):
        with pytest.raises(ValueError, match="square"):
            SquaredRealBlock(make_shared_conv(2, 3), 1.0)

    def test_mgnet_shape_check(self):
        with pytest.raises(ValueError, match="B must map"):
            MgNetBlock(make_shared_conv(2, 3), make_shared_conv(2, 3))

    def test_weight_shape_check(self):
        with pytest.raises(ValueError, match="weight shape"):
            make_shared_conv(2, 2, weight=torch.zeros(2, 2, 5, 5))


class TestWeightCounts:
    def test_formula_values(self):
        assert block_weight_count("resnet", 64, 64, 3, 2) == 147456
        assert block_weight_count("poly", 64, 64, 3, 2) == 36866
        assert block_weight_count("poly", 64, 64, 3, 0) == 36864
        assert block_weight_count("mgnet_AB", 64, 64, 3, 2) == 73728
        assert block_weight_count("mgnet_A", 64, 64, 3, 2) == 110592

    def test_mixed_level(self):
        assert poly_level_weight_count([RL, RL, CP], 64) == 36864 + 4
        assert poly_level_weight_count(["real_squared"] * 2, 8) == 578

    def test_constructed_blocks_match(self, rng):
        A = random_A(rng, 8)
        roots = RootSet(((RS, 1.0), (RS, 1.0), (CP, 1 + 1j)))
        blocks = blocks_from_roots(roots, A, 8)
        coeffs = sum(p.numel() for b in blocks for p in b.coefficient_parameters())
        assert A.weight.numel() + coeffs == poly_level_weight_count(roots.kinds, 8)

    def test_resnet_block_convs(self):
        convs = sum(m.weight.numel() for m in ResNetBlock(16, 16).modules() if isinstance(m, torch.nn.Conv2d))
        assert 2 * convs == block_weight_count("resnet", 16, 16, 3, 2)

    def test_errors(self):
        with pytest.raises(ValueError, match="unknown block kind"):
            block_weight_count("cubic", 1, 1, 3, 1)
        with pytest.raises(ValueError):
            block_weight_count("poly", 0, 1, 3, 1)
