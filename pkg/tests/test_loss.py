import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clpose import (
    ContractError,
    LossConfig,
    RegionSource,
    TargetMaps,
    composite_loss,
    composite_loss_grad,
    derive_grid,
    encode,
    finite_diff_check,
    grmi_loss,
    mse_plane,
    peak_mse_loss,
    region_mask,
    smooth_l1,
    smooth_l1_grad,
)
from conftest import make_pose, random_pair


class TestMsePlane:
    def test_identical_planes(self):
        plane = np.arange(12.0).reshape(1, 3, 4)
        assert mse_plane(plane, plane) == 0.0

    def test_constant_offset(self):
        target = np.zeros((2, 4, 4))
        predicted = np.full((2, 4, 4), 0.5)
        assert mse_plane(target, predicted) == 0.25

    def test_two_cell_plane(self):
        assert mse_plane(np.array([[0.0], [1.0]]), np.array([[0.0], [0.0]])) == 0.5

    def test_validity_mask_excludes_planes(self):
        target = np.zeros((2, 2, 2))
        predicted = np.stack([np.ones((2, 2)), np.zeros((2, 2))])
        assert mse_plane(target, predicted, np.array([False, True])) == 0.0
        assert mse_plane(target, predicted, np.array([True, False])) == 1.0

    def test_dimension_mismatch(self):
        with pytest.raises(ContractError):
            mse_plane(np.zeros((1, 2, 2)), np.zeros((1, 2, 3)))


class TestSmoothL1:
    def test_zero(self):
        assert smooth_l1(0.0) == 0.0

    def test_quadratic_zone(self):
        assert smooth_l1(0.5, 1.0) == 0.125

    def test_linear_zone(self):
        assert smooth_l1(2.0, 1.0) == 1.5

    def test_continuous_at_transition(self):
        eps = 1e-9
        assert smooth_l1(1.0 - eps) == pytest.approx(smooth_l1(1.0 + eps), abs=1e-8)

    def test_grad_matches_branches(self):
        assert smooth_l1_grad(0.5, 1.0) == 0.5
        assert smooth_l1_grad(-2.0, 1.0) == -1.0

    @given(r=st.floats(-10, 10), beta=st.floats(0.1, 4.0))
    @settings(max_examples=100, deadline=None)
    def test_nonnegative_and_even(self, r, beta):
        assert smooth_l1(r, beta) >= 0.0
        assert smooth_l1(r, beta) == smooth_l1(-r, beta)


class TestRegionMask:
    def test_interior_patch_center_has_five_cells(self, grid16, default_config):
        maps = encode(make_pose((120.0, 120.0)), grid16, default_config)
        region = region_mask(maps, tau=0.6)
        # brute-force oracle: count cells with activation >= tau directly
        brute = 0
        for iy in range(16):
            for ix in range(16):
                cx, cy = (ix + 0.5) * 16, (iy + 0.5) * 16
                if math.exp(-((cx - 120) ** 2 + (cy - 120) ** 2) / 512.0) >= 0.6:
                    brute += 1
        assert brute == 5
        assert region.n_omega[0] == 5

    def test_strict_threshold_empties_region(self, grid16, default_config):
        maps = encode(make_pose((100.3, 77.7)), grid16, default_config)
        region = region_mask(maps, tau=1.0)
        assert region.n_omega[0] == 0

    def test_tiny_threshold_covers_grid(self, grid16, default_config):
        maps = encode(make_pose((100.3, 77.7)), grid16, default_config)
        region = region_mask(maps, tau=1e-300)
        assert region.n_omega[0] == grid16.cell_count

    def test_predicted_source_needs_predictions(self, grid16, default_config):
        maps = encode(make_pose((10.0, 10.0)), grid16, default_config)
        with pytest.raises(ContractError):
            region_mask(maps, tau=0.6, region_source=RegionSource.PREDICTED)

    def test_union_is_elementwise_max(self, grid16, default_config):
        target = encode(make_pose((40.0, 40.0)), grid16, default_config)
        predicted = encode(make_pose((200.0, 200.0)), grid16, default_config)
        union = region_mask(
            target, predicted, tau=0.6, region_source=RegionSource.UNION
        )
        gt_only = region_mask(target, tau=0.6)
        pred_only = region_mask(predicted, tau=0.6)
        np.testing.assert_array_equal(
            union.mask, gt_only.mask | pred_only.mask
        )


class TestCompositeLoss:
    def test_perfect_prediction_is_zero(self, grid16, default_config):
        maps = encode(make_pose((50.5, 60.5)), grid16, default_config)
        report = composite_loss(maps, maps)
        assert report.total == 0.0
        assert report.l_h == report.l_oy == report.l_ox == 0.0

    def test_half_offset_everywhere_in_region(self, grid16, default_config):
        target = encode(make_pose((120.0, 120.0)), grid16, default_config)
        predicted = target.replace_planes(
            y_offsets=target.y_offsets + 0.5, x_offsets=target.x_offsets + 0.5
        )
        report = composite_loss(target, predicted, LossConfig())
        assert report.l_h == 0.0
        assert report.l_oy == pytest.approx(0.125)
        assert report.l_ox == pytest.approx(0.125)
        assert report.total == pytest.approx(0.5)

    def test_total_is_weighted_sum(self, grid16):
        target, predicted = random_pair(grid16, 2, seed=3)
        report = composite_loss(target, predicted, LossConfig())
        assert report.total == pytest.approx(
            0.5 * report.l_h + 2.0 * (report.l_oy + report.l_ox), rel=1e-15
        )

    def test_linear_in_omega_h(self, grid16):
        target, predicted = random_pair(grid16, 2, seed=4)
        r1 = composite_loss(target, predicted, LossConfig(omega_h=1.0))
        r2 = composite_loss(target, predicted, LossConfig(omega_h=2.0))
        assert (r1.l_oy, r1.l_ox) == (r2.l_oy, r2.l_ox)
        assert r2.total - r2.l_oy * 2 - r2.l_ox * 2 == pytest.approx(
            2 * (r1.total - r1.l_oy * 2 - r1.l_ox * 2)
        )

    def test_k_mismatch_is_contract_error(self, grid16, default_config):
        a = encode(make_pose((10, 10)), grid16, default_config)
        b = encode(make_pose((10, 10), (20, 20)), grid16, default_config)
        with pytest.raises(ContractError):
            composite_loss(a, b)

    def test_omega_locality(self, grid16, default_config):
        # perturbing offsets outside the region changes nothing
        target = encode(make_pose((120.0, 120.0)), grid16, default_config)
        region = region_mask(target, tau=0.6)
        rng = np.random.default_rng(0)
        noise = rng.normal(0, 1.0, target.y_offsets.shape)
        noise[region.mask] = 0.0
        predicted = target.replace_planes(
            y_offsets=target.y_offsets + noise, x_offsets=target.x_offsets + noise
        )
        report = composite_loss(target, predicted)
        assert report.total == 0.0
        grads = composite_loss_grad(target, predicted)
        assert np.all(grads.d_y_offsets == 0.0)
        assert np.all(grads.d_x_offsets == 0.0)

    def test_empty_region_keypoints_are_excluded(self, default_config):
        # at stride 32 a keypoint near a cell corner activates no cell >= 0.6
        grid = derive_grid(256, 256, 32)
        far = make_pose((32.0, 32.0), (112.0, 112.0))
        target = encode(far, grid, default_config)
        region = region_mask(target, tau=0.6)
        assert region.n_omega[0] == 0 and region.n_omega[1] > 0
        predicted = target.replace_planes(
            y_offsets=target.y_offsets + 0.5, x_offsets=target.x_offsets + 0.5
        )
        report = composite_loss(target, predicted)
        # only the scored keypoint contributes, and the average is over it alone
        assert report.l_oy == pytest.approx(0.125)


class TestCompositeGrad:
    def test_zero_at_optimum(self, grid16, default_config):
        maps = encode(make_pose((50.5, 60.5)), grid16, default_config)
        grads = composite_loss_grad(maps, maps)
        assert np.all(grads.d_heatmaps == 0.0)
        assert np.all(grads.d_y_offsets == 0.0)
        assert np.all(grads.d_x_offsets == 0.0)

    def test_report_can_carry_gradients(self, grid16):
        target, predicted = random_pair(grid16, 1, seed=8)
        report = composite_loss(target, predicted, with_gradients=True)
        standalone = composite_loss_grad(target, predicted)
        np.testing.assert_array_equal(
            report.gradients.d_heatmaps, standalone.d_heatmaps
        )
        assert composite_loss(target, predicted).gradients is None

    def test_single_cell_heatmap_gradient(self):
        grid = derive_grid(16, 16, 16)
        h = np.array([[[0.9]]])
        maps = TargetMaps(
            grid=grid,
            heatmaps=h,
            y_offsets=np.zeros_like(h),
            x_offsets=np.zeros_like(h),
            valid=np.array([True]),
        )
        predicted = maps.replace_planes(heatmaps=h + 0.1)
        grads = composite_loss_grad(maps, predicted, LossConfig(omega_h=0.5))
        assert grads.d_heatmaps[0, 0, 0] == pytest.approx(0.5 * 2 * 0.1)

    def test_matches_independent_finite_differences(self):
        # independent oracle: central differences computed by this test, not
        # by the library's own checker
        grid = derive_grid(48, 48, 16)
        target, predicted = random_pair(grid, 2, seed=5)
        config = LossConfig()
        grads = composite_loss_grad(target, predicted, config)
        region = region_mask(target, tau=config.tau)
        step = 1e-6
        stacks = {
            "h": (predicted.heatmaps, grads.d_heatmaps),
            "y": (predicted.y_offsets, grads.d_y_offsets),
            "x": (predicted.x_offsets, grads.d_x_offsets),
        }
        for name, (plane_stack, analytic) in stacks.items():
            work = {
                "h": predicted.heatmaps.copy(),
                "y": predicted.y_offsets.copy(),
                "x": predicted.x_offsets.copy(),
            }
            for idx in np.ndindex(plane_stack.shape):
                original = work[name][idx]
                work[name][idx] = original + step

                def loss():
                    probe = predicted.replace_planes(
                        heatmaps=work["h"], y_offsets=work["y"], x_offsets=work["x"]
                    )
                    return composite_loss(target, probe, config, region=region).total

                hi = loss()
                work[name][idx] = original - step
                lo = loss()
                work[name][idx] = original
                fd = (hi - lo) / (2 * step)
                residual = (
                    abs(work[name][idx] - getattr(target, {"h": "heatmaps", "y": "y_offsets", "x": "x_offsets"}[name])[idx])
                    if name != "h"
                    else None
                )
                if name != "h" and abs(residual - config.beta) < 10 * step:
                    continue
                assert abs(analytic[idx] - fd) / max(1, abs(analytic[idx]), abs(fd)) < 1e-4

    def test_finite_diff_check_on_random_maps(self, grid16):
        target, predicted = random_pair(grid16, 3, seed=0)
        assert finite_diff_check(target, predicted, step=1e-5) < 1e-4

    def test_finite_diff_check_zero_residual(self, grid16, default_config):
        # both sides are zero up to rounding of the perturbed exponentials
        maps = encode(make_pose((77.0, 77.0)), grid16, default_config)
        assert finite_diff_check(maps, maps, step=1e-5) == pytest.approx(0.0, abs=1e-18)

    def test_finite_diff_check_predicted_region_source(self, grid16):
        target, predicted = random_pair(grid16, 2, seed=9)
        config = LossConfig(region_source=RegionSource.PREDICTED)
        assert finite_diff_check(target, predicted, config, step=1e-5) < 1e-4

    def test_gradient_descent_strictly_decreases(self, grid16, default_config):
        target = encode(make_pose((123.4, 87.2)), grid16, default_config)
        config = LossConfig()
        region = region_mask(target, tau=config.tau)
        h = np.zeros_like(target.heatmaps)
        y = np.zeros_like(target.y_offsets)
        x = np.zeros_like(target.x_offsets)
        prev = np.inf
        for _ in range(300):
            probe = target.replace_planes(heatmaps=h, y_offsets=y, x_offsets=x)
            total = composite_loss(target, probe, config, region=region).total
            if total < 1e-8:
                break
            assert total < prev
            prev = total
            grads = composite_loss_grad(target, probe, config, region=region)
            h = h - 0.1 * grads.d_heatmaps
            y = y - 0.1 * grads.d_y_offsets
            x = x - 0.1 * grads.d_x_offsets


class TestPeakMseLoss:
    def test_perfect_prediction(self, grid16, default_config):
        maps = encode(make_pose((30.0, 40.0)), grid16, default_config)
        assert peak_mse_loss(maps, maps).total == 0.0

    def test_ignores_non_peak_cells(self, grid16, default_config):
        target = encode(make_pose((40.0, 56.0)), grid16, default_config)
        y = target.y_offsets.copy()
        y[0, 0, 0] += 5.0  # not the peak cell
        report = peak_mse_loss(target, target.replace_planes(y_offsets=y))
        assert report.l_oy == 0.0 and report.l_ox == 0.0

    def test_squared_error_at_peak(self, grid16, default_config):
        target = encode(make_pose((40.0, 56.0)), grid16, default_config)
        y = target.y_offsets.copy()
        x = target.x_offsets.copy()
        y[0, 3, 2] += 0.5
        x[0, 3, 2] += 0.5
        report = peak_mse_loss(
            target, target.replace_planes(y_offsets=y, x_offsets=x)
        )
        assert report.l_oy == pytest.approx(0.25)
        assert report.l_ox == pytest.approx(0.25)
        assert report.n_omega == (1,)

    def test_heatmap_term_matches_composite(self, grid16):
        target, predicted = random_pair(grid16, 2, seed=6)
        assert peak_mse_loss(target, predicted).l_h == pytest.approx(
            composite_loss(target, predicted).l_h
        )


class TestGrmiLoss:
    def test_perfect_logits_give_zero(self, grid16, default_config):
        target = encode(make_pose((120.0, 120.0)), grid16, default_config)
        # classification-perfect prediction: hugely confident logits
        region = region_mask(target, tau=0.6)
        disk = np.zeros_like(target.heatmaps)
        cx, cy = grid16.cell_centers()
        disk[0] = ((cx - 120) ** 2 + (cy - 120) ** 2 <= 16.0**2) * 2000.0 - 1000.0
        predicted = target.replace_planes(heatmaps=disk)
        report = grmi_loss(target, predicted, disk_radius=16.0)
        assert report.l_h == 0.0
        assert report.total == 0.0

    def test_disk_radius_one_stride_gives_five_positives(self, grid16, default_config):
        # brute-force disk membership at an interior patch center
        target = encode(make_pose((120.0, 120.0)), grid16, default_config)
        report = grmi_loss(target, target, disk_radius=16.0)
        brute = sum(
            1
            for iy in range(16)
            for ix in range(16)
            if ((ix + 0.5) * 16 - 120) ** 2 + ((iy + 0.5) * 16 - 120) ** 2 <= 256.0
        )
        assert brute == 5
        assert report.n_omega == (5,)

    def test_offsets_scored_at_positives_only(self, grid16, default_config):
        target = encode(make_pose((120.0, 120.0)), grid16, default_config)
        y = target.y_offsets.copy()
        y[0, 0, 15] += 3.0  # far from the disk
        report = grmi_loss(target, target.replace_planes(y_offsets=y))
        assert report.l_oy == 0.0

    def test_wider_disk_responds_outside_composite_region(
        self, grid16, default_config
    ):
        target = encode(make_pose((120.0, 120.0)), grid16, default_config)
        region = region_mask(target, tau=0.6)
        y = target.y_offsets.copy()
        # diagonal neighbor: outside the tau region, inside a 2-stride disk
        assert not region.mask[0, 8, 8]
        y[0, 8, 8] += 1.0
        predicted = target.replace_planes(y_offsets=y)
        assert composite_loss(target, predicted).total == 0.0
        assert grmi_loss(target, predicted, disk_radius=32.0).l_oy > 0.0
