import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fusionpose import synth
from fusionpose.model import N_JOINTS, Camera, Keypoints2D, PointCloud, Pose3D, Sample

settings.register_profile("default", max_examples=100, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def pinhole(fx=1000.0, fy=1000.0, cx=960.0, cy=640.0, ext=None, width=1920, height=1280) -> Camera:
    """Camera whose frame coincides with the vehicle frame unless ``ext`` is given."""
    return Camera(fx, fy, cx, cy, np.eye(4) if ext is None else ext, width, height)


def front_points(n, rng, cam=None, depth=(8.0, 12.0)):
    """``n`` vehicle-frame points that project inside ``cam``'s image."""
    cam = cam or pinhole()
    u = rng.uniform(0, cam.width - 1, n)
    v = rng.uniform(0, cam.height - 1, n)
    z = rng.uniform(*depth, n)
    cam_pts = np.column_stack([(u - cam.cx) * z / cam.fx, (v - cam.cy) * z / cam.fy, z])
    R, t = cam.rotation, cam.translation
    return (cam_pts - t) @ R


def make_sample(points, kp=None, conf=None, cam=None, center=(0.0, 0.0, 10.0), gt=None, sid="s"):
    cam = cam or pinhole()
    kp = np.tile([960.0, 640.0], (N_JOINTS, 1)) + np.arange(N_JOINTS)[:, None] * 5.0 if kp is None else kp
    conf = np.ones(N_JOINTS) if conf is None else conf
    return Sample(sid, cam, np.asarray(center, float), PointCloud(points), Keypoints2D(kp, conf), gt3d=gt)


@pytest.fixture(scope="session")
def nominal_small():
    return synth.generate_dataset(synth.profile_config("nominal", n_samples=40, rng_seed=11))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def full_pose(joints):
    return Pose3D.full(np.asarray(joints, float))


# --- shared long experiments and the acceptance summary ------------------------------------

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(ok), detail)
    print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def table2():
    """Three variants trained 50 epochs on 2000 nominal samples, scored on 400; wall time attached."""
    import time
    from fusionpose import experiments
    t0 = time.perf_counter()
    res = experiments.run_branch_comparison(n_train=2000, n_test=400, epochs=50, seed=42, profile="nominal")
    res.total_seconds = time.perf_counter() - t0
    return res


@pytest.fixture(scope="session")
def table3():
    from fusionpose import experiments
    return experiments.run_pseudo_label_study(n_train=2000, n_test=400, epochs=25, seed=42,
                                              profile="outlier-heavy", threshold=0.8)
