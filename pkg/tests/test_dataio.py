import json

import numpy as np
import pytest

from conftest import random_intrinsics, random_pose, random_rotation
from refpose.config import PipelineConfig
from refpose.dataio import (
    align_sequences,
    build_database,
    fps_sample,
    load_query_set,
    load_reference_set,
    make_synth_scene,
    read_camera_json,
    read_image,
    render_plane_view,
    save_reference_set,
    triangulate,
    write_camera_json,
    write_image,
)
from refpose.errors import (
    Collinear,
    DegenerateRays,
    InconsistentIntrinsics,
    MissingPose,
    ParseError,
)
from refpose.geometry import Intrinsics, RigidPose, project, rotation_angle
from refpose.objectframe import RawView


def sphere_dirs(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


class TestFps:
    def test_collinear_arc(self):
        # viewpoints at 0/10/20/30 deg: k=2 picks the endpoints
        angles = np.deg2rad([0.0, 10.0, 20.0, 30.0])
        vps = np.stack([np.sin(angles), np.zeros(4), np.cos(angles)], axis=1)
        assert fps_sample(vps, 2) == [0, 3]

    def test_k_geq_n_returns_all(self, rng):
        vps = sphere_dirs(rng, 5)
        assert fps_sample(vps, 10) == [0, 1, 2, 3, 4]

    def test_deterministic(self, rng):
        vps = sphere_dirs(rng, 50)
        assert fps_sample(vps, 8) == fps_sample(vps, 8)

    def test_subset_and_seed(self, rng):
        vps = sphere_dirs(rng, 40)
        out = fps_sample(vps, 12)
        assert len(set(out)) == 12
        assert out[0] == 0

    def test_spread_beats_random_subsets(self, rng):
        # A7: min pairwise angle of FPS >= best of 1000 random subsets
        def min_pairwise(vps, idx):
            sub = vps[idx]
            g = np.clip(sub @ sub.T, -1, 1)
            ang = np.arccos(g)
            return ang[np.triu_indices(len(idx), k=1)].min()

        wins = 0
        trials = 100
        for t in range(trials):
            r = np.random.default_rng(1000 + t)
            vps = sphere_dirs(r, 200)
            fps_val = min_pairwise(vps, fps_sample(vps, 32))
            best_rand = max(
                min_pairwise(vps, r.choice(200, size=32, replace=False))
                for _ in range(1000)
            )
            if fps_val >= best_rand:
                wins += 1
        assert wins >= 95


class TestTriangulate:
    def test_noiseless_recovery(self, rng):
        for _ in range(100):
            x = rng.uniform(-1.0, 1.0, size=3)
            Ka, Kb = random_intrinsics(rng), random_intrinsics(rng)
            pa, pb = random_pose(rng), random_pose(rng)
            if np.linalg.norm(pa.center - pb.center) < 0.5:
                continue
            kp_a, kp_b = project(Ka, pa, x), project(Kb, pb, x)
            rec = triangulate(kp_a, pa, Ka, kp_b, pb, Kb)
            assert np.abs(rec - x).max() < 1e-6

    def test_symmetric_stereo_midplane(self):
        # two cameras at +-b on x, both seeing the principal point: point on x=0
        K = Intrinsics(500.0, 500.0, 320.0, 240.0)
        pa = RigidPose(np.eye(3), np.array([-1.0, 0.0, 0.0]))  # center at (+1,0,0)
        pb = RigidPose(np.eye(3), np.array([1.0, 0.0, 0.0]))
        x = np.array([0.0, 0.3, 5.0])
        rec = triangulate(project(K, pa, x), pa, K, project(K, pb, x), pb, K)
        assert abs(rec[0]) < 1e-9
        assert np.abs(rec - x).max() < 1e-9

    def test_identical_centers(self):
        K = Intrinsics(500.0, 500.0, 320.0, 240.0)
        p = RigidPose(np.eye(3), np.array([0.0, 0.0, 1.0]))
        with pytest.raises(DegenerateRays):
            triangulate([100.0, 100.0], p, K, [200.0, 200.0], p, K)

    def test_near_parallel_rays(self):
        K = Intrinsics(500.0, 500.0, 320.0, 240.0)
        pa = RigidPose(np.eye(3), np.zeros(3) + [0, 0, 1])
        pb = RigidPose(np.eye(3), np.array([1e-5, 0.0, 1.0]))
        with pytest.raises(DegenerateRays):
            triangulate([320.0, 240.0], pa, K, [320.0, 240.0], pb, K)


class TestAlign:
    def test_identity(self, rng):
        pts = rng.normal(size=(20, 3))
        al = align_sequences(pts, pts)
        assert al.s == pytest.approx(1.0)
        assert np.abs(al.R - np.eye(3)).max() < 1e-9
        assert np.abs(al.t).max() < 1e-9

    def test_recovers_synthesized_transform(self, rng):
        # A7 noiseless: 1e-9
        for _ in range(100):
            b = rng.normal(size=(30, 3))
            R = random_rotation(rng)
            s = float(np.exp(rng.uniform(-1.0, 1.0)))
            t = rng.normal(size=3) * 3.0
            a = s * b @ R.T + t
            al = align_sequences(a, b)
            assert abs(al.s - s) < 1e-9 * max(1.0, s)
            assert np.abs(al.R - R).max() < 1e-9
            assert np.abs(al.t - t).max() < 1e-9

    def test_noise_floor(self, rng):
        # A7: sigma = 1e-3 noise, parameters recovered within 3x sigma
        sigma = 1e-3
        for _ in range(20):
            b = rng.normal(size=(100, 3))
            R = random_rotation(rng)
            s = float(np.exp(rng.uniform(-0.5, 0.5)))
            t = rng.normal(size=3)
            a = s * b @ R.T + t + rng.normal(scale=sigma, size=(100, 3))
            al = align_sequences(a, b)
            assert abs(al.s - s) <= 3 * sigma
            assert np.linalg.norm(al.t - t) <= 3 * sigma * max(1.0, s)
            assert rotation_angle(al.R @ R.T) <= 3 * sigma

    def test_planar_cloud_proper_rotation(self, rng):
        b = rng.normal(size=(40, 3))
        b[:, 2] = 0.0  # planar
        R = random_rotation(rng)
        a = 1.3 * b @ R.T + np.array([0.1, 0.2, 0.3])
        al = align_sequences(a, b)
        assert np.linalg.det(al.R) == pytest.approx(1.0)
        assert np.abs(al.R - R).max() < 1e-9

    def test_collinear_rejected(self, rng):
        b = np.outer(np.linspace(0, 1, 10), np.array([1.0, 2.0, 3.0]))
        with pytest.raises(Collinear):
            align_sequences(b * 2.0 + 1.0, b)
        with pytest.raises(Collinear):
            align_sequences(b[:2], b[:2])


class TestImageJsonRoundTrip:
    def test_image_round_trip(self, tmp_path, rng):
        img = rng.random((33, 47))
        write_image(tmp_path / "x.png", img)
        back = read_image(tmp_path / "x.png")
        assert back.shape == (33, 47)
        assert np.abs(back - img).max() <= 0.5 / 255.0 + 1e-12

    def test_camera_round_trip(self, tmp_path, rng):
        K = random_intrinsics(rng)
        pose = random_pose(rng)
        write_camera_json(tmp_path / "c.json", K, pose)
        K2, pose2 = read_camera_json(tmp_path / "c.json")
        assert K2 == K
        assert np.abs(pose2.R - pose.R).max() < 1e-15
        assert np.abs(pose2.t - pose.t).max() < 1e-15

    def test_missing_intrinsics(self, tmp_path):
        (tmp_path / "c.json").write_text('{"fx": 100.0}')
        with pytest.raises(InconsistentIntrinsics):
            read_camera_json(tmp_path / "c.json")

    def test_negative_focal(self, tmp_path):
        (tmp_path / "c.json").write_text(
            '{"fx": -5.0, "fy": 100.0, "cx": 10.0, "cy": 10.0}'
        )
        with pytest.raises(InconsistentIntrinsics):
            read_camera_json(tmp_path / "c.json")


def _tiny_raw_views(rng, n=8, size=96):
    views = []
    for _ in range(n):
        views.append(
            RawView(
                image=rng.random((size, size)),
                intrinsics=Intrinsics(300.0, 300.0, size / 2, size / 2),
                pose=random_pose(rng, z_range=(8.0, 12.0)),
            )
        )
    return views


class TestReferenceSetIO:
    def test_meta_frame_used_exactly(self, tmp_path, rng):
        views = _tiny_raw_views(rng)
        meta = {"object": "demo", "center": [0.1, 0.2, 0.3], "diameter": 1.25}
        save_reference_set(views, tmp_path / "refs", meta=meta)
        db = load_reference_set(tmp_path / "refs")
        assert np.array_equal(db.frame.center, [0.1, 0.2, 0.3])
        assert db.frame.diameter == 1.25
        assert db.object_name == "demo"

    def test_poses_round_trip(self, tmp_path, rng):
        views = _tiny_raw_views(rng)
        meta = {"center": [0.0, 0.0, 0.0], "diameter": 1.0}
        save_reference_set(views, tmp_path / "refs", meta=meta)
        db = load_reference_set(tmp_path / "refs")
        save_reference_set(db.raw_views, tmp_path / "refs2", meta=meta)
        db2 = load_reference_set(tmp_path / "refs2")
        for a, b in zip(db.raw_views, db2.raw_views):
            assert np.abs(a.pose.R - b.pose.R).max() < 1e-9
            assert np.abs(a.pose.t - b.pose.t).max() < 1e-9

    def test_missing_pose_json(self, tmp_path, rng):
        views = _tiny_raw_views(rng)
        save_reference_set(
            views, tmp_path / "refs", meta={"center": [0, 0, 0], "diameter": 1.0}
        )
        (tmp_path / "refs" / "views" / "0003.json").unlink()
        with pytest.raises(MissingPose):
            load_reference_set(tmp_path / "refs")

    def test_malformed_json(self, tmp_path, rng):
        views = _tiny_raw_views(rng)
        save_reference_set(
            views, tmp_path / "refs", meta={"center": [0, 0, 0], "diameter": 1.0}
        )
        (tmp_path / "refs" / "views" / "0001.json").write_text("{not json")
        with pytest.raises(ParseError):
            load_reference_set(tmp_path / "refs")

    def test_invalid_rotation_rejected(self, tmp_path, rng):
        views = _tiny_raw_views(rng)
        save_reference_set(
            views, tmp_path / "refs", meta={"center": [0, 0, 0], "diameter": 1.0}
        )
        p = tmp_path / "refs" / "views" / "0002.json"
        d = json.loads(p.read_text())
        d["R"] = [2.0, 0, 0, 0, 1, 0, 0, 0, 1]
        p.write_text(json.dumps(d))
        with pytest.raises(ParseError):
            load_reference_set(tmp_path / "refs")

    def test_frame_estimated_from_points_with_margin(self, tmp_path, rng):
        views = _tiny_raw_views(rng)
        pts = rng.normal(size=(50, 3)) * 0.2
        save_reference_set(views, tmp_path / "refs", meta={"object": "est"}, points=pts)
        db = load_reference_set(tmp_path / "refs")
        d2 = np.sum((pts[:, None] - pts[None]) ** 2, axis=-1)
        expected = np.sqrt(d2.max()) * PipelineConfig().diameter_margin
        assert db.frame.diameter == pytest.approx(expected, rel=1e-6)

    def test_no_frame_source_raises(self, tmp_path, rng):
        views = _tiny_raw_views(rng)
        save_reference_set(views, tmp_path / "refs", meta={"object": "bare"})
        with pytest.raises(ParseError):
            load_reference_set(tmp_path / "refs")

    def test_subsets_are_fps(self, tmp_path, rng):
        views = _tiny_raw_views(rng, n=12)
        save_reference_set(
            views, tmp_path / "refs", meta={"center": [0, 0, 0], "diameter": 1.0}
        )
        cfg = PipelineConfig(n_detector_templates=4, n_selector_views=6)
        db = load_reference_set(tmp_path / "refs", cfg)
        assert db.detector_subset == fps_sample(db.viewpoints, 4)
        assert db.selector_subset == fps_sample(db.viewpoints, 6)
        assert len(db.selector_banks) == 6
        assert len(db.selector_banks[0]) == cfg.n_angles


class TestSynthScene:
    def test_reprojection_consistency(self, tmp_path):
        # GT poses must reproject the square's grid points onto the rendered
        # texture positions exactly (the renderer shares the same projection)
        scene = make_synth_scene(tmp_path / "s", texture_seed=3, n_ref=8, n_query=2)
        db = load_reference_set(scene.refs_dir)
        for raw in db.raw_views:
            px = project(raw.intrinsics, raw.pose, scene.points)
            h, w = raw.image.shape
            assert (px > 0).all() and (px[:, 0] < w).all() and (px[:, 1] < h).all()

    def test_blob_renders_at_projection(self, tmp_path):
        # Gaussian blob at known texture coords, fronto-parallel camera:
        # rendered centroid must land on the projected world point
        yy, xx = np.mgrid[0:256, 0:256] + 0.5
        texture = np.exp(-((xx - 64.5) ** 2 + (yy - 128.5) ** 2) / (2 * 4.0**2))
        half = 0.35
        center = np.array([0.25, -0.15, 0.8])
        u = 64.5 / 256 * 2 * half - half
        v = 128.5 / 256 * 2 * half - half
        world = center + np.array([u, v, 0.0])
        K = Intrinsics(600.0, 600.0, 200.0, 200.0)
        cam = center - np.array([0.0, 0.0, 5 * half])
        pose = RigidPose(np.eye(3), -cam)
        img = render_plane_view(texture, half, center, K, pose, (400, 400), 0.0)
        mass = img.sum()
        cy = float((img * (np.arange(400)[:, None] + 0.5)).sum() / mass)
        cx = float((img * (np.arange(400)[None, :] + 0.5)).sum() / mass)
        px = project(K, pose, world)
        assert np.hypot(cx - px[0], cy - px[1]) < 0.5

    def test_gt_pose_homography_consistency(self, tmp_path):
        # GT poses must describe the rendered images: the plane-induced
        # homography between two views re-warps one onto the other
        from refpose.correlation import warp_homography
        from refpose.geometry import Homography

        scene = make_synth_scene(tmp_path / "s", texture_seed=4, n_ref=10, n_query=1)
        db = load_reference_set(scene.refs_dir)

        def plane_h(view):
            R, t = view.pose.R, view.pose.t
            cols = np.column_stack([R[:, 0], R[:, 1], R @ scene.center + t])
            return view.intrinsics.K @ cols

        a, b = db.raw_views[0], db.raw_views[1]
        h_ab = plane_h(b) @ np.linalg.inv(plane_h(a))
        warped, valid = warp_homography(a.image, Homography(h_ab), b.image.shape)
        hgt, wd = b.image.shape
        grid = np.stack(
            [np.tile(np.arange(wd) + 0.5, hgt), np.repeat(np.arange(hgt) + 0.5, wd)],
            axis=1,
        )
        uv = Homography(plane_h(b)).inverse().apply(grid).reshape(hgt, wd, 2)
        on_plane = (np.abs(uv) < 0.9 * scene.half_side).all(axis=2)
        m = valid & on_plane
        assert m.sum() > 2000
        err = np.mean((warped[m] - b.image[m]) ** 2)
        psnr = 10 * np.log10(1.0 / err)
        assert psnr > 25.0

    def test_byte_identical_regeneration(self, tmp_path):
        s1 = make_synth_scene(tmp_path / "a", texture_seed=5, n_ref=8, n_query=3, noise=0.02)
        s2 = make_synth_scene(tmp_path / "b", texture_seed=5, n_ref=8, n_query=3, noise=0.02)
        for rel in ["refs/meta.json", "refs/views/0000.png", "queries/0002.png", "queries/0001.json"]:
            b1 = (s1.root / rel).read_bytes()
            b2 = (s2.root / rel).read_bytes()
            assert b1 == b2, rel

    def test_ref_pose_query_pixel_identical(self, tmp_path):
        scene = make_synth_scene(
            tmp_path / "s", texture_seed=2, n_ref=8, n_query=1, include_ref_pose_query=True
        )
        ref_img = read_image(scene.refs_dir / "views" / "0000.png")
        q_img = read_image(scene.queries_dir / "0000.png")
        assert np.array_equal(ref_img, q_img)

    def test_query_set_loads_with_gt(self, tmp_path):
        scene = make_synth_scene(tmp_path / "s", texture_seed=0, n_ref=8, n_query=3)
        queries = load_query_set(scene.queries_dir)
        assert [q[0] for q in queries] == ["0000", "0001", "0002"]
        for _, img, K, pose in queries:
            assert pose is not None
            assert img.shape == (416, 544)
