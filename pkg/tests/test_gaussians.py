import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from conceptsplat.gaussians import (SH_C0, Gaussian3D, GaussianCloud, covariance, export_ply,
                                    import_ply, init_from_pointclouds, logit, quat_to_rotmat,
                                    rgb_to_sh, sh_to_rgb)
from conceptsplat.ply import PlyError, read_ply, write_ply
from conceptsplat.pointcloud import PointCloud

from conftest import random_cloud


def _g(log_scale=(0, 0, 0), rotation=(1, 0, 0, 0)):
    return Gaussian3D(np.zeros(3), np.asarray(log_scale, float), np.asarray(rotation, float),
                      0.0, np.zeros(3), np.array([1.0]))


def test_covariance_identity():
    assert np.allclose(covariance(_g()), np.eye(3))


def test_covariance_rotated_diagonal():
    # std (2, 1, 1) turned 90 degrees about z
    q = [np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)]
    assert np.allclose(covariance(_g((np.log(2), 0, 0), q)), np.diag([1.0, 4.0, 1.0]), atol=1e-12)


def test_rotation_matches_scipy(rng):
    q = rng.normal(size=(20, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    ref = Rotation.from_quat(q[:, [1, 2, 3, 0]]).as_matrix()
    assert np.allclose(quat_to_rotmat(q), ref, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-6, 3), min_size=3, max_size=3),
       st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda v: np.linalg.norm(v) > 1e-3))
def test_covariance_is_spd(log_scale, q):
    S = covariance(_g(log_scale, q))
    assert np.allclose(S, S.T, rtol=0, atol=1e-12 * np.abs(S).max())
    assert np.all(np.linalg.eigvalsh(S) > 0)


def test_color_coefficients():
    rgb = np.array([[0.1, 0.5, 0.9]])
    assert np.allclose(sh_to_rgb(rgb_to_sh(rgb)), rgb)
    assert np.allclose(SH_C0 * rgb_to_sh(rgb) + 0.5, rgb)


def test_cloud_validation():
    with pytest.raises(ValueError):
        GaussianCloud(np.zeros((1, 3)), np.zeros((1, 3)), [[1, 0, 0, 0]], [0.0], np.zeros((1, 3)), [2], k=2)
    with pytest.raises(ValueError):
        GaussianCloud.empty(0)


def test_onehot_and_opacity(rng):
    c = random_cloud(rng, 10, k=3)
    oh = c.onehot
    assert oh.shape == (10, 3)
    assert np.all(oh.sum(axis=1) == 1) and np.all(oh[np.arange(10), c.labels] == 1)
    assert np.all((c.opacity > 0) & (c.opacity < 1))
    g = c[4]
    assert g.opacity == pytest.approx(c.opacity[4])


def _pcd(points, color=0.5):
    return PointCloud(points, np.full((len(points), 3), color))


def test_init_counts_labels(rng):
    a, b = _pcd(rng.normal(size=(100, 3))), _pcd(rng.normal(size=(100, 3)))
    c = init_from_pointclouds([(a, 0), (b, 1)], k=2)
    assert len(c) == 200
    assert tuple(c.onehot.sum(axis=0)) == (100, 100)
    assert np.allclose(c.opacity, 0.1)
    assert np.allclose(c.rotation, [1, 0, 0, 0])
    assert np.allclose(c.opacity_logit, logit(0.1))


def test_init_single_cloud_labels(rng):
    c = init_from_pointclouds([(_pcd(rng.normal(size=(64, 3))), 0)], k=3)
    assert np.all(c.onehot == [1, 0, 0])


def test_init_scale_on_grid():
    h = 0.05
    g = np.stack(np.meshgrid(*[np.arange(8) * h] * 3, indexing="ij"), -1).reshape(-1, 3)
    c = init_from_pointclouds([(_pcd(g), 0)], k=1)
    # brute-force mean distance to the 3 nearest neighbours
    d = np.linalg.norm(g[:, None] - g[None], axis=-1)
    np.fill_diagonal(d, np.inf)
    ref = np.sort(d, axis=1)[:, :3].mean(axis=1)
    std = np.exp(c.log_scale)
    assert np.allclose(std[:, 0], ref)
    assert np.all(np.abs(std - h) <= 0.2 * h)
    assert np.allclose(std, std[:, :1])  # isotropic


def test_init_errors(rng):
    with pytest.raises(ValueError):
        init_from_pointclouds([], k=1)
    with pytest.raises(ValueError):
        init_from_pointclouds([(_pcd(rng.normal(size=(64, 3))), 2)], k=2)


@pytest.mark.parametrize("binary", [True, False])
def test_ply_round_trip(binary, rng):
    c = random_cloud(rng, 30, k=3)
    back = import_ply(export_ply(c, binary=binary))
    assert back.k == 3
    assert back.equals(c)  # doubles, ascii written with repr


def test_ply_schema(rng):
    cols, comments = read_ply(export_ply(random_cloud(rng, 3)))
    assert list(cols) == ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity_logit",
                          "log_scale_0", "log_scale_1", "log_scale_2",
                          "rot_0", "rot_1", "rot_2", "rot_3", "concept_label"]
    assert cols["concept_label"].dtype == np.uint8
    assert "concept_k 2" in comments


def test_ply_missing_label_warns(rng, caplog):
    cols, _ = read_ply(export_ply(random_cloud(rng, 5)))
    del cols["concept_label"]
    with caplog.at_level(logging.WARNING):
        c = import_ply(write_ply(cols))
    assert np.all(c.labels == 0)
    assert "concept_label" in caplog.text


def test_ply_label_out_of_range(rng):
    cols, _ = read_ply(export_ply(random_cloud(rng, 5)))
    cols["concept_label"][0] = 5
    with pytest.raises(PlyError):
        import_ply(write_ply(cols, comments=["concept_k 2"]))
