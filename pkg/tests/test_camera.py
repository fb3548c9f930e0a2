"""Cameras: ray generation, look_at poses, projection round trips."""

import numpy as np
import pytest

from styletrf.camera import Camera, generate_rays, look_at, project
from styletrf.errors import ContractViolation

IDENTITY = np.hstack([np.eye(3), np.zeros((3, 1))])


def make_camera(width=3, height=3, focal=1.0, pose=IDENTITY):
    return Camera(width=width, height=height, focal=focal, camera_to_world=pose)


class TestGenerateRays:
    def test_central_ray_is_optical_axis(self):
        cam = make_camera(3, 3, focal=1.0)
        origins, dirs = generate_rays(cam, pixels=np.array([[1, 1]]))
        assert np.allclose(origins[0], 0.0)
        assert np.allclose(dirs[0], [0.0, 0.0, -1.0], atol=1e-12)

    def test_translation_moves_origins_only(self):
        cam = make_camera(4, 4, focal=2.0)
        t = np.array([1.0, -2.0, 3.0])
        shifted = cam.with_pose(np.hstack([np.eye(3), t[:, None]]))
        o0, d0 = generate_rays(cam)
        o1, d1 = generate_rays(shifted)
        assert np.allclose(o1, o0 + t, atol=1e-12)
        assert np.array_equal(d0, d1)

    def test_2x2_explicit_pinhole(self):
        cam = make_camera(2, 2, focal=1.0)
        _, dirs = generate_rays(cam)
        # direct pinhole model: x = (px + 0.5 - cx) / f, y flipped, z = -1
        expected = []
        for py in range(2):
            for px in range(2):
                d = np.array([(px + 0.5 - 1.0), -(py + 0.5 - 1.0), -1.0])
                expected.append(d / np.linalg.norm(d))
        assert np.allclose(dirs, expected, atol=1e-12)
        # symmetric about the optical axis
        assert np.allclose(dirs[:, :2].sum(axis=0), 0.0, atol=1e-12)

    def test_directions_unit_norm(self):
        pose = look_at(np.array([2.0, 1.0, 3.0]), np.zeros(3), np.array([0.0, 1.0, 0.0]))
        cam = Camera(width=7, height=5, focal=3.0, camera_to_world=pose)
        _, dirs = generate_rays(cam)
        assert np.max(np.abs(np.linalg.norm(dirs, axis=-1) - 1.0)) < 1e-6

    def test_full_image_row_major(self):
        cam = make_camera(3, 2, focal=1.0)
        origins, dirs = generate_rays(cam)
        assert origins.shape == (6, 3) and dirs.shape == (6, 3)
        pixels = np.array([[x, y] for y in range(2) for x in range(3)])
        _, by_pixel = generate_rays(cam, pixels=pixels)
        assert np.array_equal(dirs, by_pixel)


class TestLookAt:
    def test_axis_aligned(self):
        pose = look_at(np.array([0.0, 0.0, 4.0]), np.zeros(3), np.array([0.0, 1.0, 0.0]))
        cam = Camera(width=2, height=2, focal=1.0, camera_to_world=pose)
        assert np.allclose(cam.origin, [0.0, 0.0, 4.0])
        assert np.allclose(cam.forward, [0.0, 0.0, -1.0], atol=1e-12)
        assert np.allclose(pose[:, 1], [0.0, 1.0, 0.0], atol=1e-12)

    def test_forward_points_at_target(self):
        rng = np.random.default_rng(30)
        for _ in range(10):
            pos = rng.normal(size=3) * 3.0
            tgt = rng.normal(size=3)
            pose = look_at(pos, tgt, np.array([0.0, 1.0, 0.0]))
            want = (tgt - pos) / np.linalg.norm(tgt - pos)
            assert np.allclose(-pose[:, 2], want, atol=1e-12)
            R = pose[:, :3]
            assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
            # y axis keeps positive alignment with the hint
            assert pose[1, 1] > 0.0

    def test_degenerate_inputs(self):
        p = np.array([1.0, 2.0, 3.0])
        with pytest.raises(ContractViolation):
            look_at(p, p, np.array([0.0, 1.0, 0.0]))
        with pytest.raises(ContractViolation):
            look_at(np.zeros(3), np.array([0.0, 1.0, 0.0]), np.array([0.0, 1.0, 0.0]))


class TestProject:
    def test_round_trip_through_rays(self):
        pose = look_at(np.array([1.0, 2.0, 4.0]), np.zeros(3), np.array([0.0, 1.0, 0.0]))
        cam = Camera(width=9, height=7, focal=5.0, camera_to_world=pose)
        rng = np.random.default_rng(31)
        pixels = np.stack(
            [rng.integers(0, cam.width, 40), rng.integers(0, cam.height, 40)], axis=1
        )
        origins, dirs = generate_rays(cam, pixels=pixels)
        # points at arbitrary distances along each ray project back to center
        dist = rng.uniform(0.5, 6.0, size=40)
        pts = origins + dist[:, None] * dirs
        xy, depth = project(cam, pts)
        assert np.allclose(xy, pixels + 0.5, atol=1e-9)
        # depth is the -z component, dist the euclidean ray length
        assert np.all(depth <= dist + 1e-12)
        assert np.all(depth > 0.0)

    def test_center_point_depth(self):
        cam = make_camera(4, 4, focal=2.0)
        xy, depth = project(cam, np.array([0.0, 0.0, -3.0]))
        assert np.allclose(xy, [2.0, 2.0], atol=1e-12)
        assert depth == pytest.approx(3.0, abs=1e-12)

    def test_behind_camera_negative_depth(self):
        cam = make_camera(4, 4, focal=2.0)
        _, depth = project(cam, np.array([0.0, 0.0, 5.0]))
        assert depth < 0.0


class TestCameraType:
    def test_fov_focal_relation(self):
        cam = Camera.from_fov(100, 80, np.pi / 2.0, IDENTITY)
        assert cam.focal == pytest.approx(50.0, abs=1e-12)
        assert cam.camera_angle_x == pytest.approx(np.pi / 2.0, rel=1e-12)

    def test_accepts_homogeneous_pose(self):
        pose4 = np.eye(4)
        pose4[:3, 3] = [1.0, 2.0, 3.0]
        cam = Camera(width=2, height=2, focal=1.0, camera_to_world=pose4)
        assert cam.camera_to_world.shape == (3, 4)
        assert np.allclose(cam.origin, [1.0, 2.0, 3.0])

    def test_non_orthonormal_rotation_rejected(self):
        bad = IDENTITY.copy()
        bad[0, 0] = 1.1
        with pytest.raises(ContractViolation):
            Camera(width=2, height=2, focal=1.0, camera_to_world=bad)

    def test_principal_point_defaults_to_center(self):
        cam = make_camera(10, 6)
        assert cam.cx == 5.0 and cam.cy == 3.0
