import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clpose import (
    ContractError,
    DataError,
    DecodedPose,
    Detection,
    Keypoint,
    NormMeta,
    NormalizerSpec,
    OksConstants,
    PoseInstance,
    oks,
    oks_ap,
    pck,
    resolve_normalizer,
)
from clpose.metrics import DEFAULT_OKS_THRESHOLDS
from conftest import make_pose
from oracles import oracle_ap


def as_pose(coords, score=1.0) -> Detection:
    coords = np.asarray(coords, dtype=float)
    k = coords.shape[0]
    decoded = DecodedPose(
        coords=coords,
        confidence=np.full(k, score),
        n_cells=np.ones(k, dtype=int),
        used_fallback=np.zeros(k, dtype=bool),
    )
    return Detection(pose=decoded, score=score)


def gt_at(coords, area=10000.0) -> PoseInstance:
    return PoseInstance(
        keypoints=tuple(Keypoint(float(x), float(y)) for x, y in coords),
        norm_meta=NormMeta(area=area),
    )


class TestResolveNormalizer:
    def test_torso_is_endpoint_distance(self):
        inst = PoseInstance(
            keypoints=(Keypoint(0, 0), Keypoint(30, 40)),
            norm_meta=NormMeta(torso_endpoints=(0, 1)),
        )
        assert resolve_normalizer(inst, NormalizerSpec(kind="torso")) == 50.0

    def test_head_is_fraction_of_diagonal(self):
        inst = PoseInstance(
            keypoints=(Keypoint(0, 0),), norm_meta=NormMeta(head_box=(0, 0, 60, 60))
        )
        value = resolve_normalizer(inst, NormalizerSpec(kind="head"))
        assert value == pytest.approx(0.6 * math.sqrt(7200))

    def test_explicit_passthrough(self):
        inst = make_pose((0, 0))
        assert resolve_normalizer(inst, NormalizerSpec(kind="explicit", value=100)) == 100.0

    def test_missing_metadata_is_data_error(self):
        inst = make_pose((0, 0))
        with pytest.raises(DataError):
            resolve_normalizer(inst, NormalizerSpec(kind="head"))
        with pytest.raises(DataError):
            resolve_normalizer(inst, NormalizerSpec(kind="torso"))

    def test_spec_endpoints_override_instance(self):
        inst = PoseInstance(
            keypoints=(Keypoint(0, 0), Keypoint(30, 40), Keypoint(0, 10)),
            norm_meta=NormMeta(torso_endpoints=(0, 1)),
        )
        spec = NormalizerSpec(kind="torso", torso_endpoints=(0, 2))
        assert resolve_normalizer(inst, spec) == 10.0


class TestPck:
    def test_perfect_predictions(self):
        gts = [make_pose((10, 10), (20, 20))]
        preds = [np.array([[10.0, 10.0], [20.0, 20.0]])]
        result = pck(preds, gts, [100.0], alpha=0.2)
        assert result.overall == 1.0
        assert result.per_keypoint == (1.0, 1.0)

    def test_half_correct(self):
        gts = [make_pose((100, 100), (100, 100))]
        preds = [np.array([[110.0, 100.0], [130.0, 100.0]])]
        result = pck(preds, gts, [100.0], alpha=0.2)
        assert result.overall == 0.5

    def test_boundary_is_inclusive(self):
        gts = [make_pose((0, 0))]
        preds = [np.array([[20.0, 0.0]])]
        assert pck(preds, gts, [100.0], alpha=0.2).overall == 1.0

    def test_unlabeled_keypoints_excluded(self):
        gt = PoseInstance(
            keypoints=(Keypoint(10, 10), Keypoint(0, 0, visibility=0))
        )
        preds = [np.array([[10.0, 10.0], [500.0, 500.0]])]
        result = pck(preds, [gt], [50.0], alpha=0.2)
        assert result.overall == 1.0
        assert result.labeled_per_keypoint == (1, 0)
        assert math.isnan(result.per_keypoint[1])

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            pck([np.zeros((1, 2))], [], [1.0], 0.2)

    def test_non_positive_normalizer_names_instance(self):
        gts = [make_pose((0, 0)), make_pose((0, 0))]
        preds = [np.zeros((1, 2)), np.zeros((1, 2))]
        with pytest.raises(DataError, match="instance 1"):
            pck(preds, gts, [10.0, 0.0], 0.2)

    def test_translation_invariance(self):
        rng = np.random.default_rng(0)
        coords = rng.uniform(0, 100, size=(4, 2))
        errs = rng.normal(0, 5, size=(4, 2))
        gts = [gt_at(coords)]
        shift = np.array([1234.5, -987.0])
        a = pck([coords + errs], gts, [40.0], 0.5)
        b = pck([coords + errs + shift], [gt_at(coords + shift)], [40.0], 0.5)
        assert a.overall == b.overall

    @given(alpha_lo=st.floats(0.05, 0.5), bump=st.floats(0.0, 0.5))
    @settings(max_examples=30, deadline=None)
    def test_monotone_in_alpha(self, alpha_lo, bump):
        rng = np.random.default_rng(3)
        coords = rng.uniform(0, 100, size=(5, 2))
        preds = [coords + rng.normal(0, 10, size=(5, 2))]
        gts = [gt_at(coords)]
        lo = pck(preds, gts, [50.0], alpha_lo).overall
        hi = pck(preds, gts, [50.0], alpha_lo + bump).overall
        assert hi >= lo


class TestOks:
    def test_zero_distance(self):
        gt = gt_at([(100, 100)])
        assert oks(np.array([[100.0, 100.0]]), gt, OksConstants((0.1,))) == 1.0

    def test_kernel_value(self):
        # d^2 = 2 s^2 kappa^2 -> exp(-1)
        gt = gt_at([(100, 100)], area=10000.0)
        d = math.sqrt(2 * 10000.0 * 0.01)
        val = oks(np.array([[100.0 + d, 100.0]]), gt, OksConstants((0.1,)))
        assert val == pytest.approx(math.exp(-1), abs=1e-12)

    def test_far_predictions_vanish(self):
        gt = gt_at([(0, 0)], area=100.0)
        assert oks(np.array([[1e9, 1e9]]), gt, OksConstants((0.1,))) == 0.0

    def test_zero_area_is_data_error(self):
        gt = gt_at([(0, 0)], area=0.0)
        with pytest.raises(DataError):
            oks(np.zeros((1, 2)), gt, OksConstants((0.1,)))

    def test_scale_invariance(self):
        rng = np.random.default_rng(1)
        coords = rng.uniform(0, 50, size=(3, 2))
        errs = rng.normal(0, 3, size=(3, 2))
        kappas = OksConstants((0.1, 0.2, 0.15))
        a = oks(coords + errs, gt_at(coords, area=2500.0), kappas)
        s = 3.0
        b = oks(
            (coords + errs) * s, gt_at(coords * s, area=2500.0 * s * s), kappas
        )
        assert a == pytest.approx(b, rel=1e-12)

    def test_unlabeled_keypoints_excluded(self):
        gt = PoseInstance(
            keypoints=(Keypoint(10, 10), Keypoint(0, 0, visibility=0)),
            norm_meta=NormMeta(area=100.0),
        )
        val = oks(np.array([[10.0, 10.0], [1e6, 1e6]]), gt, OksConstants((0.1, 0.1)))
        assert val == 1.0


class TestOksAp:
    def test_perfect_predictions(self):
        gts = [[gt_at([(50, 50), (80, 80)])], [gt_at([(10, 10), (20, 20)])]]
        dets = [
            [as_pose([(50, 50), (80, 80)], score=0.9)],
            [as_pose([(10, 10), (20, 20)], score=0.8)],
        ]
        result = oks_ap(dets, gts, OksConstants((0.1, 0.1)))
        assert result.ap == 1.0
        assert result.ar == 1.0
        assert result.ap50 == 1.0
        assert result.ap75 == 1.0

    def test_single_mid_oks_detection(self):
        # detection engineered to a similarity of ~0.62: a true positive at
        # thresholds 0.50/0.55/0.60 and a false positive at the other seven
        gt = gt_at([(100, 100)], area=10000.0)
        d2 = -math.log(0.62) * 2 * 10000.0 * 0.01
        det = as_pose([(100 + math.sqrt(d2), 100)], score=0.9)
        result = oks_ap([[det]], [[gt]], OksConstants((0.1,)))
        expected = oracle_ap([[det]], [[gt]], OksConstants((0.1,)), DEFAULT_OKS_THRESHOLDS)
        assert result.ap == pytest.approx(3 / 10, abs=1e-12)
        np.testing.assert_allclose(result.per_threshold_ap, expected, atol=1e-12)

    def test_threshold_boundary_is_inclusive(self):
        gt = gt_at([(100, 100)], area=10000.0)
        det = as_pose([(110.0, 100.0)], score=0.5)
        exact = oks(det.pose, gt, OksConstants((0.1,)))
        result = oks_ap([[det]], [[gt]], OksConstants((0.1,)), thresholds=(exact,))
        assert result.ap == 1.0

    def test_no_detections(self):
        gts = [[gt_at([(10, 10)])]]
        result = oks_ap([[]], gts, OksConstants((0.1,)))
        assert result.ap == 0.0
        assert result.ar == 0.0

    def test_empty_gt_with_detections_is_defined(self):
        result = oks_ap([[as_pose([(5, 5)], 0.9)]], [[]], OksConstants((0.1,)))
        assert result.ap == 0.0
        assert result.ar == 0.0

    def test_detection_order_invariance(self):
        rng = np.random.default_rng(5)
        gts = [[gt_at([(20, 20)]), gt_at([(80, 80)])]]
        dets = [
            as_pose([(21, 20)], score=0.7),
            as_pose([(79, 81)], score=0.7),  # tied scores
            as_pose([(50, 50)], score=0.4),
        ]
        base = oks_ap([dets], gts, OksConstants((0.1,)))
        for perm in itertools.permutations(dets):
            shuffled = oks_ap([list(perm)], gts, OksConstants((0.1,)))
            assert shuffled.ap == base.ap
            assert shuffled.ar == base.ar

    def test_matches_exhaustive_oracle_on_random_sets(self):
        # separated instances: each detection overlaps one gt at most
        rng = np.random.default_rng(12)
        kappas = OksConstants((0.1, 0.1))
        detections, gts = [], []
        for _ in range(3):
            img_dets, img_gts = [], []
            n_gt = rng.integers(0, 4)
            for g in range(n_gt):
                center = np.array([g * 500.0, 100.0])
                coords = center + rng.uniform(-5, 5, size=(2, 2))
                img_gts.append(gt_at(coords, area=2500.0))
                if rng.random() < 0.8:
                    noise = rng.normal(0, rng.uniform(1, 20), size=(2, 2))
                    img_dets.append(
                        as_pose(coords + noise, score=float(rng.uniform(0.1, 1.0)))
                    )
            if rng.random() < 0.5:
                img_dets.append(
                    as_pose(rng.uniform(2000, 3000, size=(2, 2)), score=0.3)
                )
            detections.append(img_dets)
            gts.append(img_gts)
        result = oks_ap(detections, gts, kappas)
        expected = oracle_ap(detections, gts, kappas, DEFAULT_OKS_THRESHOLDS)
        np.testing.assert_allclose(result.per_threshold_ap, expected, atol=1e-9)
