import numpy as np
import pytest

from puppetry import raster
from puppetry.errors import FormatError, InvalidInputError


def straight_camera(res=32, f=None):
    f = f if f is not None else float(res)
    return raster.CameraPose(np.eye(3), np.zeros(3), fx=f, fy=f,
                             cx=res / 2.0, cy=res / 2.0)


def test_pose_validation():
    with pytest.raises(InvalidInputError):
        raster.CameraPose(np.ones((3, 3)), np.zeros(3), 1, 1, 0, 0)
    flip = np.diag([1.0, 1.0, -1.0])
    with pytest.raises(InvalidInputError):
        raster.CameraPose(flip, np.zeros(3), 1, 1, 0, 0)


def test_empty_mesh_all_uncovered():
    uvmap = raster.rasterize(np.zeros((0, 3)), np.zeros((0, 3), dtype=int),
                             np.zeros((0, 2)), straight_camera(), 16)
    assert not uvmap.coverage.any()
    assert uvmap.uv.shape == (16, 16, 2)


def brute_force_inside(p, a, b, c):
    """Point-in-triangle via three half-plane tests (independent oracle)."""
    def cross(o, u, v):
        return (u[0] - o[0]) * (v[1] - o[1]) - (v[0] - o[0]) * (u[1] - o[1])
    d1 = cross(a, b, p)
    d2 = cross(b, c, p)
    d3 = cross(c, a, p)
    has_neg = (d1 < 0) or (d2 < 0) or (d3 < 0)
    has_pos = (d1 > 0) or (d2 > 0) or (d3 > 0)
    return not (has_neg and has_pos)


def test_single_triangle_matches_brute_force_oracle():
    res = 24
    pose = straight_camera(res)
    z = 2.0
    # screen-space targets: an axis-aligned right triangle
    corners_px = np.array([[4.0, 4.0], [20.0, 4.0], [4.0, 20.0]])
    # invert the projection: x = (u - cx) * z / fx
    verts = np.stack([
        np.array([(u - pose.cx) * z / pose.fx, (v - pose.cy) * z / pose.fy, z])
        for u, v in corners_px
    ])
    uvs = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    uvmap = raster.rasterize(verts, [[0, 1, 2]], uvs, pose, res)

    expected = np.zeros((res, res), dtype=bool)
    for y in range(res):
        for x in range(res):
            expected[y, x] = brute_force_inside((x + 0.5, y + 0.5), *corners_px)
    assert np.array_equal(uvmap.coverage, expected)

    # uv at a covered pixel center equals barycentric interpolation (depth is
    # constant so perspective correction is the identity here)
    y, x = 10, 7
    assert uvmap.coverage[y, x]
    p = (x + 0.5, y + 0.5)
    area = 16.0 * 16.0 / 2.0
    l0 = ((corners_px[1][0] - p[0]) * (corners_px[2][1] - p[1])
          - (corners_px[2][0] - p[0]) * (corners_px[1][1] - p[1])) / (2 * area)
    l1 = ((corners_px[2][0] - p[0]) * (corners_px[0][1] - p[1])
          - (corners_px[0][0] - p[0]) * (corners_px[2][1] - p[1])) / (2 * area)
    l2 = 1 - l0 - l1
    expected_uv = l0 * uvs[0] + l1 * uvs[1] + l2 * uvs[2]
    assert np.allclose(uvmap.uv[y, x], expected_uv, atol=1e-6)


def test_perspective_correct_interpolation_midpoint():
    # an edge spanning two depths: uv at the screen midpoint must be weighted
    # toward the nearer vertex (1/z weighting), not the affine average
    res = 64
    pose = straight_camera(res, f=64.0)
    z0, z1 = 1.0, 3.0
    v0 = np.array([(8 - 32) * z0 / 64, (32 - 32) * z0 / 64, z0])
    v1 = np.array([(56 - 32) * z1 / 64, (32 - 32) * z1 / 64, z1])
    v2 = np.array([(8 - 32) * z0 / 64, (56 - 32) * z0 / 64, z0])
    uvs = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    uvmap = raster.rasterize(np.stack([v0, v1, v2]), [[0, 1, 2]], uvs, pose, res)
    x, y = 32, 32  # halfway along the top edge in screen space
    assert uvmap.coverage[y, x]
    lam = 0.5  # screen-space weight of v1 at the midpoint
    w0 = (1 - lam) / z0
    w1 = lam / z1
    expected_u = w1 / (w0 + w1)
    assert abs(uvmap.uv[y, x, 0] - expected_u) < 0.02
    assert uvmap.uv[y, x, 0] < 0.35  # clearly below the affine value 0.5


def test_depth_order_near_triangle_wins():
    res = 16
    pose = straight_camera(res)
    def quad(z, u):
        verts = np.array([
            [-1.0, -1.0, z], [1.0, -1.0, z], [-1.0, 1.0, z], [1.0, 1.0, z]
        ]) * 0.4
        verts[:, 2] = z
        uvs = np.full((4, 2), u)
        tris = np.array([[0, 1, 2], [2, 1, 3]])
        return verts, tris, uvs

    near_v, near_t, near_uv = quad(1.0, 0.25)
    far_v, far_t, far_uv = quad(2.0, 0.75)
    verts = np.concatenate([far_v, near_v])
    tris = np.concatenate([far_t, near_t + 4])
    uvs = np.concatenate([far_uv, near_uv])
    fwd = raster.rasterize(verts, tris, uvs, pose, res)
    # overlap region must carry the near triangle's uv regardless of order
    verts2 = np.concatenate([near_v, far_v])
    tris2 = np.concatenate([near_t, far_t + 4])
    uvs2 = np.concatenate([near_uv, far_uv])
    rev = raster.rasterize(verts2, tris2, uvs2, pose, res)

    both = fwd.coverage & rev.coverage
    assert both.any()
    assert np.allclose(fwd.uv[both], rev.uv[both], atol=1e-6)
    assert np.array_equal(fwd.coverage, rev.coverage)
    near_region = fwd.coverage  # near quad covers a superset here
    assert np.allclose(fwd.uv[near_region][:, 0], 0.25, atol=1e-6)


def test_degenerate_triangles_skipped():
    res = 8
    pose = straight_camera(res)
    verts = np.array([[0.0, 0.0, 1.0], [0.1, 0.0, 1.0], [0.2, 0.0, 1.0]])
    uvmap = raster.rasterize(verts, [[0, 1, 2]], np.zeros((3, 2)), pose, res)
    assert not uvmap.coverage.any()


def test_uvmap_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    uv = rng.random((12, 10, 2)).astype(np.float32)
    cov = rng.random((12, 10)) > 0.5
    uvmap = raster.UVMap(uv, cov)
    path = tmp_path / "m.uvm"
    raster.save_uvmap(path, uvmap)
    loaded = raster.load_uvmap(path)
    assert np.array_equal(loaded.uv, uv)
    assert np.array_equal(loaded.coverage, cov)
    with pytest.raises(FormatError):
        bad = tmp_path / "bad.uvm"
        bad.write_bytes(path.read_bytes()[:10])
        raster.load_uvmap(bad)
