import numpy as np
import pytest

from refpose.geometry import Intrinsics, RigidPose, axis_angle


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    v = v / np.linalg.norm(v)
    return axis_angle(v * rng.uniform(0.0, np.pi))


def random_pose(rng: np.random.Generator, z_range=(2.0, 20.0)) -> RigidPose:
    """Pose with the object origin guaranteed in front of the camera."""
    R = random_rotation(rng)
    t = np.array(
        [rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(*z_range)]
    )
    return RigidPose(R, t)


def random_intrinsics(rng: np.random.Generator) -> Intrinsics:
    return Intrinsics(
        fx=rng.uniform(300.0, 1200.0),
        fy=rng.uniform(300.0, 1200.0),
        cx=rng.uniform(200.0, 400.0),
        cy=rng.uniform(150.0, 350.0),
    )


def smooth_texture(rng: np.random.Generator, size: int = 128) -> np.ndarray:
    """Band-limited random texture in [0, 1]; white noise defeats interpolation."""
    from refpose.correlation import resize

    img = np.zeros((size, size))
    for cells in (4, 8, 16, 32):
        img = img + resize(rng.random((cells, cells)), (size, size))
    lo, hi = img.min(), img.max()
    return (img - lo) / (hi - lo)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def sphere_field(rng: np.random.Generator, n_waves: int = 24):
    """Smooth seamless scalar field on R^3 for texturing a sphere surface."""
    freqs = np.repeat([5.0, 10.0, 20.0], n_waves // 3)
    k = rng.normal(size=(n_waves, 3))
    k = k / np.linalg.norm(k, axis=1, keepdims=True) * freqs[:, None]
    phases = rng.uniform(0.0, 2.0 * np.pi, n_waves)
    amps = np.repeat([0.5, 0.3, 0.2], n_waves // 3) / np.sqrt(n_waves / 3.0)

    def field(p):
        raw = np.cos(p @ k.T + phases) @ amps
        return 0.5 + 0.45 * np.tanh(1.5 * raw)

    return field


def render_sphere_view(field, center, radius, K, pose, shape, background=0.45):
    """Ray-trace a textured sphere; returns a float image in [0, 1]."""
    h, w = shape
    gy, gx = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    dirs = np.stack([(gx - K.cx) / K.fx, (gy - K.cy) / K.fy, np.ones((h, w))], axis=-1)
    p0 = pose.R @ np.asarray(center, dtype=np.float64) + pose.t
    a = np.einsum("ijk,ijk->ij", dirs, dirs)
    b = dirs @ p0
    disc = b**2 - a * (p0 @ p0 - radius**2)
    lam = (b - np.sqrt(np.maximum(disc, 0.0))) / a
    hit = (disc > 0.0) & (lam > 0.0)
    img = np.full((h, w), background)
    x_cam = lam[hit, None] * dirs[hit]
    x_local = (x_cam - pose.t) @ pose.R / radius  # rows: R^T (x - t), unit sphere
    img[hit] = field((x_local - 0.0))
    return img


def make_sphere_db(seed=7, n_ref=16, center=(0.2, -0.1, 0.6), radius=0.5,
                   ref_shape=(400, 400), focal=600.0):
    """Reference database of ray-traced sphere views with exact ground truth."""
    from refpose.dataio import build_database
    from refpose.geometry import look_rotation
    from refpose.objectframe import ObjectFrame, RawView

    rng = np.random.default_rng(seed)
    field = sphere_field(rng)
    center = np.asarray(center, dtype=np.float64)
    K = Intrinsics(focal, focal, ref_shape[1] / 2.0, ref_shape[0] / 2.0)
    golden = np.pi * (3.0 - np.sqrt(5.0))
    views = []
    for i in range(n_ref):
        z = 1.0 - 2.0 * (i + 0.5) / n_ref
        r = np.sqrt(max(1.0 - z * z, 0.0))
        d = np.array([r * np.cos(golden * i), r * np.sin(golden * i), z])
        cam = center + d * radius * rng.uniform(9.0, 13.0)
        R = look_rotation(center - cam)
        pose = RigidPose(R, -R @ cam)
        img = render_sphere_view(field, center, radius, K, pose, ref_shape)
        views.append(RawView(image=img, intrinsics=K, pose=pose))
    frame = ObjectFrame(center, 2.0 * radius)
    return views, frame, field, build_database(views, frame)


def render_sphere_query(field, center, radius, rng, ref_dir,
                        shape=(416, 544), focal=600.0):
    """A held-out sphere view a few degrees off a reference direction.

    No in-plane roll: the detector's template bank has no rotation
    tolerance by design (the viewpoint selector owns that axis). The
    look target is jittered off the sphere center so q leaves the
    principal point.
    """
    from refpose.geometry import look_rotation

    center = np.asarray(center, dtype=np.float64)
    K = Intrinsics(focal, focal, shape[1] / 2.0, shape[0] / 2.0)
    d = np.asarray(ref_dir, dtype=np.float64)
    d /= np.linalg.norm(d)
    tang = rng.normal(size=3)
    tang -= d * (tang @ d)
    tang /= np.linalg.norm(tang)
    ang = np.deg2rad(rng.uniform(2.0, 8.0))
    d = np.cos(ang) * d + np.sin(ang) * tang
    cam = center + d * radius * rng.uniform(9.0, 13.0)
    target = center + rng.uniform(-0.4, 0.4, 3) * radius
    R = look_rotation(target - cam)
    pose = RigidPose(R, -R @ cam)
    return render_sphere_view(field, center, radius, K, pose, shape), K, pose
