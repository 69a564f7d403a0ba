import numpy as np
import pytest

from conceptsplat.camera import Camera, orbit_camera


def test_center_projects_to_principal_point():
    cam = orbit_camera(37.0, 12.0, 2.2, center=(0.5, 0.5, 0.5), resolution=(64, 48))
    uv, z = cam.project(np.array([0.5, 0.5, 0.5]))
    assert np.allclose(uv[0], [(48 - 1) / 2, (64 - 1) / 2])
    assert z[0] == pytest.approx(2.2)


def test_rotation_is_orthonormal_and_right_handed():
    cam = orbit_camera(-120.0, 40.0, 3.0)
    R = cam.rotation()
    assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0)


def test_image_axes_follow_world_up_and_right():
    # camera on +x looking at the origin: world +z is image up, world +y is image right
    cam = orbit_camera(0.0, 0.0, 2.0)
    uv, _ = cam.project(np.array([[0.0, 0.0, 0.1], [0.0, 0.1, 0.0]]))
    cx, cy = cam.principal_point
    assert uv[0, 1] < cy
    assert uv[1, 0] > cx


def test_focal_from_fov():
    cam = Camera([0, -2, 0], [0, 0, 0], fov_y=np.pi / 2, resolution=(32, 32))
    assert cam.focal == pytest.approx(16.0)


@pytest.mark.parametrize("kwargs", [
    dict(fov_y=0.0), dict(fov_y=np.pi), dict(resolution=(4, 64)), dict(near=1.0, far=0.5),
])
def test_invalid_cameras(kwargs):
    with pytest.raises(ValueError):
        Camera([0, -2, 0], [0, 0, 0], **kwargs)


def test_degenerate_look_at():
    with pytest.raises(ValueError):
        Camera([0, 0, 0], [0, 0, 0])
    with pytest.raises(ValueError):
        Camera([0, 0, 2], [0, 0, 0])  # looking straight down along up
