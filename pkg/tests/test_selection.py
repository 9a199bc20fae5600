import numpy as np
import pytest

from refpose.correlation import default_angles, rotate_image
from refpose.errors import ZeroVector
from refpose.geometry import RigidPose, axis_angle, rot_z
from refpose.selection import (
    ViewpointScores,
    gt_view_similarity,
    initial_rotation,
    score_views,
    scores_from_raw,
    select,
    viewpoint_angle,
)


@pytest.fixture(scope="module")
def sphere(tmp_path_factory):
    from conftest import make_sphere_db

    views, frame, field, db = make_sphere_db(seed=7, n_ref=16)
    return views, frame, field, db


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def angle_id(angles, value):
    return int(np.argmin(np.abs(np.asarray(angles) - value)))


class TestScoreViews:
    def test_self_match_every_subset_view(self, sphere):
        _, _, _, db = sphere
        id0 = angle_id(db.angles, 0.0)
        half_step = (db.angles[1] - db.angles[0]) / 2.0
        for p, idx in enumerate(db.selector_subset):
            v = db.views[idx]
            scores = score_views(v.image, db, query_mask=v.mask)
            assert (scores.best_ref, scores.best_angle) == (p, id0)
            i, alpha = select(scores)
            assert i == p
            assert abs(alpha) <= half_step + 1e-9

    def test_rotated_query_matches_bank_angle(self, sphere):
        _, _, _, db = sphere
        a45 = np.pi / 4.0
        for p in (0, 5):
            idx = db.selector_subset[p]
            v = db.views[idx]
            q, ok = rotate_image(v.image, a45)
            qm, _ = rotate_image(v.mask.astype(np.float64), a45, fill=0.0)
            scores = score_views(q, db, query_mask=ok & (qm > 0.5))
            assert scores.best_ref == p
            assert scores.best_angle == angle_id(db.angles, a45)

    def test_global_normalization_moments(self, sphere):
        _, _, _, db = sphere
        v = db.views[db.selector_subset[3]]
        scores = score_views(v.image, db, query_mask=v.mask)
        assert scores.raw.shape == (len(db.selector_subset), len(db.angles))
        assert abs(scores.normalized.mean()) < 1e-6
        assert abs(scores.normalized.std() - 1.0) < 1e-6
        assert not scores.degenerate

    def test_flat_query_is_degenerate(self, sphere):
        _, _, _, db = sphere
        scores = score_views(np.full((128, 128), 0.5), db)
        assert scores.degenerate
        assert np.all(scores.normalized == 0.0)
        assert select(scores) == (0, 0.0)


class TestSelect:
    def test_single_reference_single_angle(self, rng):
        img = rng.random((64, 64))
        banks = [[(img, np.ones(img.shape, dtype=bool))]]
        scores = score_views(img, banks, angles=[0.3])
        assert select(scores) == (0, pytest.approx(0.3))

    def test_all_equal_scores_tie_to_origin(self):
        scores = scores_from_raw(np.full((6, 5), 0.25), default_angles())
        assert scores.degenerate
        assert select(scores) == (0, 0.0)

    def test_tie_breaks_row_major(self):
        raw = np.zeros((4, 5))
        raw[1, 3] = raw[2, 1] = 0.7
        scores = scores_from_raw(raw, default_angles())
        assert (scores.best_ref, scores.best_angle) == (1, 3)

    def test_twenty_degree_rotation_recovered(self, sphere):
        _, _, _, db = sphere
        target = np.deg2rad(20.0)
        for p in (2, 7):
            idx = db.selector_subset[p]
            v = db.views[idx]
            q, ok = rotate_image(v.image, target)
            qm, _ = rotate_image(v.mask.astype(np.float64), target, fill=0.0)
            scores = score_views(q, db, query_mask=ok & (qm > 0.5))
            i, alpha = select(scores)
            assert i == p
            assert abs(alpha - target) < np.deg2rad(10.0)

    def test_argmax_invariant_to_positive_affine(self, rng):
        angles = default_angles()
        for _ in range(300):
            raw = rng.normal(size=(8, 5))
            gain = float(np.exp(rng.normal()))
            bias = float(rng.normal())
            assert select(scores_from_raw(raw, angles)) == pytest.approx(
                select(scores_from_raw(gain * raw + bias, angles))
            )

    def test_alpha_clamped_to_bank_range(self):
        # peak at the last angle: no interpolation past the bank edge
        raw = np.zeros((2, 5))
        raw[0, 4] = 1.0
        _, alpha = select(scores_from_raw(raw, default_angles()))
        assert alpha == pytest.approx(np.pi / 2.0)


class TestInitialRotation:
    def test_zero_alpha_is_reference_rotation(self, rng):
        R = axis_angle(rng.normal(size=3))
        pose = RigidPose(R, rng.normal(size=3))
        assert np.allclose(initial_rotation(pose, 0.0), R)

    def test_alpha_then_negative_alpha_round_trips(self, rng):
        for _ in range(50):
            R = axis_angle(rng.normal(size=3))
            pose = RigidPose(R, np.zeros(3))
            Ri = initial_rotation(pose, 0.7)
            back = initial_rotation(RigidPose(Ri, np.zeros(3)), -0.7)
            assert np.allclose(back, R, atol=1e-12)

    def test_camera_roll_matches_image_rotation(self, sphere):
        # rendering with rot_z(a) @ pose reproduces rotate_image(img, a)
        views, frame, field, _ = sphere
        from conftest import render_sphere_view

        v = views[0]
        a = 0.5
        rolled = RigidPose(rot_z(a) @ v.pose.R, rot_z(a) @ v.pose.t)
        rendered = render_sphere_view(
            field, frame.center, frame.diameter / 2.0, v.intrinsics, rolled,
            v.image.shape,
        )
        rotated, valid = rotate_image(v.image, a)
        mse = np.mean((rendered[valid] - rotated[valid]) ** 2)
        psnr = 10.0 * np.log10(1.0 / mse)
        assert psnr > 25.0


class TestViewpointScalars:
    def test_similarity_trivials(self):
        u = np.array([0.0, 0.0, 2.0])
        assert gt_view_similarity(u, u) == pytest.approx(1.0)
        assert gt_view_similarity(u, -u) == pytest.approx(0.0)
        assert gt_view_similarity(u, [3.0, 0.0, 0.0]) == pytest.approx(0.5)

    def test_angle_trivials(self):
        u = [1.0, 2.0, -1.0]
        assert viewpoint_angle(u, u) == pytest.approx(0.0, abs=1e-9)
        assert viewpoint_angle([1, 0, 0], [0, 0, 5]) == pytest.approx(np.pi / 2)
        assert viewpoint_angle(u, [-1.0, -2.0, 1.0]) == pytest.approx(np.pi)

    def test_similarity_symmetric_scale_invariant(self, rng):
        for _ in range(200):
            u = rng.normal(size=3)
            v = rng.normal(size=3)
            s = gt_view_similarity(u, v)
            assert 0.0 <= s <= 1.0
            assert s == pytest.approx(gt_view_similarity(v, u))
            assert s == pytest.approx(
                gt_view_similarity(u * float(rng.uniform(0.1, 10)), v)
            )

    def test_zero_vector_raises(self):
        with pytest.raises(ZeroVector):
            gt_view_similarity([0.0, 0.0, 0.0], [1.0, 0.0, 0.0])
        with pytest.raises(ZeroVector):
            viewpoint_angle([1.0, 0.0, 0.0], [0.0, 0.0, 0.0])
