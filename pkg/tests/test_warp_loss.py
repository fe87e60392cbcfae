"""Warping, field resampling, and the similarity + smoothness objective."""

import numpy as np
import pytest

from moco4d import autodiff as ad
from moco4d.errors import DimensionError
from moco4d.losses import LossConfig, local_ncc, local_ncc_map, loss_terms, smoothness, total_loss
from moco4d.warping import DisplacementField, resample_field, warp

from oracles import shift_volume, smoothness_naive

CFG3 = LossConfig(lam=1.0, ncc_window=3, ncc_epsilon=1e-5)


class TestWarp:
    def test_zero_field_identity_bit_exact(self):
        rng = np.random.default_rng(0)
        vol = rng.normal(size=(5, 6, 7)).astype(np.float32)
        out = warp(vol, np.zeros((3, 5, 6, 7), dtype=np.float32))
        assert np.array_equal(out, vol)

    @pytest.mark.parametrize("shift", [(1, 0, 0), (0, 1, 0), (0, 0, 1), (2, -1, 0)])
    def test_integer_shift_matches_index_oracle(self, shift):
        rng = np.random.default_rng(1)
        vol = rng.normal(size=(6, 6, 6))
        field = np.zeros((3, 6, 6, 6))
        for a in range(3):
            field[a] = shift[a]
        out = warp(vol, field)
        want = shift_volume(vol, *shift)
        assert np.array_equal(out, want)

    def test_half_step_on_linear_ramp(self):
        W = 8
        vol = np.broadcast_to(np.arange(W, dtype=np.float64), (4, 4, W)).copy()
        field = np.zeros((3, 4, 4, W))
        field[2] = 0.5
        out = warp(vol, field)
        np.testing.assert_allclose(out[:, :, :W - 1],
                                   vol[:, :, :W - 1] + 0.5, rtol=0, atol=1e-12)

    def test_linearity_in_volume(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(5, 5, 5))
        y = rng.normal(size=(5, 5, 5))
        field = rng.uniform(-1.5, 1.5, size=(3, 5, 5, 5))
        a, b = 2.5, -1.25
        lhs = warp(a * x + b * y, field)
        rhs = a * warp(x, field) + b * warp(y, field)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12)

    def test_grid_mismatch(self):
        with pytest.raises(DimensionError):
            warp(np.zeros((4, 4, 4)), np.zeros((3, 5, 4, 4)))

    def test_out_of_bounds_reads_zero(self):
        vol = np.ones((4, 4, 4))
        field = np.zeros((3, 4, 4, 4))
        field[0] = 10.0
        assert np.all(warp(vol, field) == 0.0)


class TestResampleField:
    def test_up_then_down_identity_on_constant(self):
        f = DisplacementField(np.full((3, 4, 4, 8), 0.75), (2.0, 2.0, 2.0))
        up = resample_field(f, 4, "up")
        down = resample_field(up, 4, "down")
        assert down.grid == f.grid
        np.testing.assert_allclose(down.data, f.data, rtol=1e-12)
        np.testing.assert_allclose(down.spacing_mm, f.spacing_mm)

    def test_unit_rescale_on_upsample(self):
        f = DisplacementField(np.ones((3, 2, 2, 2)), (4.0, 4.0, 4.0))
        up = resample_field(f, 4, "up")
        assert up.grid == (8, 8, 8)
        assert np.all(up.data == 4.0)
        np.testing.assert_allclose(up.spacing_mm, (1.0, 1.0, 1.0))

    def test_linear_field_matches_closed_form(self):
        n = 6
        f = np.zeros((3, n, n, n))
        f[1] = np.arange(n, dtype=np.float64)[None, :, None]
        up = resample_field(DisplacementField(f), 2, "up")
        # src coordinate of output center i is (i + .5)/2 - .5, clamped
        for i in range(2 * n):
            src = np.clip((i + 0.5) / 2.0 - 0.5, 0.0, n - 1.0)
            np.testing.assert_allclose(up.data[1, 0, i, 0], 2.0 * src, atol=1e-12)

    def test_down_requires_divisible_extents(self):
        f = DisplacementField(np.zeros((3, 5, 4, 4)))
        with pytest.raises(DimensionError):
            resample_field(f, 2, "down")

    def test_factor_below_two_rejected(self):
        with pytest.raises(DimensionError):
            resample_field(DisplacementField(np.zeros((3, 4, 4, 4))), 1, "up")


class TestLocalNcc:
    def test_self_similarity_near_one(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(8, 8, 8))
        v = float(local_ncc(x, x, CFG3).data)
        assert 1.0 - 1e-3 <= v <= 1.0

    def test_affine_invariance_per_window(self):
        # boundary windows include padded zeros, which an affine offset does
        # not transform, so the invariance is an interior-window property
        rng = np.random.default_rng(4)
        x = rng.normal(size=(8, 8, 8))
        m_self = local_ncc_map(x, x, CFG3).data
        m_aff = local_ncc_map(x, 2.0 * x + 3.0, CFG3).data
        np.testing.assert_allclose(m_aff[1:-1, 1:-1, 1:-1],
                                   m_self[1:-1, 1:-1, 1:-1], atol=1e-6)

    def test_hand_computed_window(self):
        # 3^3 volume, window 3: the center voxel covers the full volume
        rng = np.random.default_rng(5)
        a = rng.normal(size=(3, 3, 3))
        b = rng.normal(size=(3, 3, 3))
        cc = local_ncc_map(a, b, CFG3).data
        n = 27.0
        ua, ub = a.sum() / n, b.sum() / n
        cross = ((a - ua) * (b - ub)).sum()
        var_a = ((a - ua) ** 2).sum()
        var_b = ((b - ub) ** 2).sum()
        want = cross ** 2 / (var_a * var_b + 1e-5)
        np.testing.assert_allclose(cc[1, 1, 1], want, rtol=1e-10)

    def test_symmetry(self):
        rng = np.random.default_rng(6)
        a = rng.normal(size=(6, 6, 6))
        b = rng.normal(size=(6, 6, 6))
        cfg = LossConfig(ncc_window=5)
        assert abs(float(local_ncc(a, b, cfg).data)
                   - float(local_ncc(b, a, cfg).data)) <= 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            local_ncc(np.zeros((4, 4, 4)), np.zeros((5, 4, 4)), CFG3)

    def test_window_exceeding_extent(self):
        with pytest.raises(DimensionError):
            local_ncc(np.zeros((4, 4, 4)), np.zeros((4, 4, 4)), LossConfig(ncc_window=9))


class TestSmoothness:
    def test_constant_field_zero(self):
        assert float(smoothness(np.full((3, 4, 5, 6), 2.5)).data) == 0.0

    def test_unit_ramp_closed_form(self):
        D, H, W = 6, 5, 4
        f = np.zeros((3, D, H, W))
        f[0] = np.arange(D, dtype=np.float64)[:, None, None]
        got = float(smoothness(f).data)
        want = (D - 1) * H * W / (9.0 * D * H * W)
        np.testing.assert_allclose(got, want, rtol=1e-14)

    def test_matches_naive_triple_loop(self):
        rng = np.random.default_rng(7)
        f = rng.normal(size=(3, 4, 5, 3))
        got = float(smoothness(f).data)
        want = smoothness_naive(f)
        assert abs(got - want) / abs(want) <= 1e-12

    def test_zero_iff_constant(self):
        rng = np.random.default_rng(8)
        f = rng.normal(size=(3, 4, 4, 4))
        assert float(smoothness(f).data) > 1e-12


class TestTotalLoss:
    def test_identical_frames_zero_fields(self):
        rng = np.random.default_rng(9)
        ref = rng.normal(size=(8, 8, 8))
        m = 3
        fields = [np.zeros((3, 8, 8, 8)) for _ in range(m)]
        warped = [ref.copy() for _ in range(m)]
        loss = float(total_loss(ref, warped, fields, LossConfig(lam=1.0, ncc_window=3)).data)
        assert abs(loss - (-m)) <= m * 1e-3

    def test_lambda_zero_is_pure_similarity(self):
        rng = np.random.default_rng(10)
        ref = rng.normal(size=(6, 6, 6))
        mov = rng.normal(size=(6, 6, 6))
        f = rng.normal(size=(3, 6, 6, 6))
        cfg0 = LossConfig(lam=0.0, ncc_window=3)
        loss = float(total_loss(ref, [mov], [f], cfg0).data)
        sim = float(local_ncc(ref, mov, cfg0).data)
        np.testing.assert_allclose(loss, -sim, rtol=1e-12)

    def test_lambda_sweep_hook(self):
        rng = np.random.default_rng(11)
        ref = rng.normal(size=(6, 6, 6))
        mov = rng.normal(size=(6, 6, 6))
        f = rng.uniform(-1, 1, size=(3, 6, 6, 6))
        vals = []
        for lam in (0.1, 1.0, 10.0, 100.0):
            vals.append(float(total_loss(ref, [mov], [f],
                                         LossConfig(lam=lam, ncc_window=3)).data))
        pen = float(smoothness(f).data)
        sim = float(local_ncc(ref, mov, LossConfig(lam=1.0, ncc_window=3)).data)
        for lam, v in zip((0.1, 1.0, 10.0, 100.0), vals):
            np.testing.assert_allclose(v, -sim + lam * pen, rtol=1e-10)

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            total_loss(np.zeros((4, 4, 4)), [np.zeros((4, 4, 4))], [], CFG3)

    def test_loss_terms_consistent(self):
        rng = np.random.default_rng(12)
        ref = rng.normal(size=(6, 6, 6))
        movs = [rng.normal(size=(6, 6, 6)) for _ in range(2)]
        flds = [rng.normal(size=(3, 6, 6, 6)) for _ in range(2)]
        cfg = LossConfig(lam=2.0, ncc_window=3)
        loss, sim, smo = loss_terms(ref, movs, flds, cfg)
        np.testing.assert_allclose(float(loss.data), -sim + cfg.lam * smo, rtol=1e-10)
        ref_loss = total_loss(ref, movs, flds, cfg)
        np.testing.assert_allclose(float(loss.data), float(ref_loss.data), rtol=1e-12)


class TestGradients:
    def test_total_loss_grad_wrt_fields(self):
        rng = np.random.default_rng(13)
        ref = rng.normal(size=(6, 6, 6))
        mov = rng.normal(size=(6, 6, 6))
        # keep displacements fractional so finite differences stay off the
        # trilinear floor discontinuities
        f0 = rng.uniform(0.1, 0.4, size=(3, 6, 6, 6))
        params = {"field": ad.param("field", f0)}
        cfg = LossConfig(lam=1.0, ncc_window=3)

        def f(p):
            warped = warp(ad.constant(mov), p["field"])
            return total_loss(ad.constant(ref), [warped], [p["field"]], cfg)

        err = ad.grad_check(f, params, h=1e-4, samples=150, rng=rng)
        assert err <= 1e-4

    def test_warp_grad_wrt_volume(self):
        rng = np.random.default_rng(14)
        mov = rng.normal(size=(5, 5, 5))
        field = rng.uniform(0.1, 0.4, size=(3, 5, 5, 5))
        params = {"vol": ad.param("vol", mov)}

        def f(p):
            return ad.mean_all(ad.square(warp(p["vol"], ad.constant(field))))

        err = ad.grad_check(f, params, h=1e-4, samples=100, rng=rng)
        assert err <= 1e-4
