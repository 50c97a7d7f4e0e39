"""Software rasterization of the posed face mesh into a screen-space UV map.

The camera is a pinhole looking down +z with x right and y down, so image row
indices grow with camera-space y. Rasterization is perspective-correct:
barycentric coordinates are computed in screen space and re-weighted by 1/z
before interpolating texture coordinates; a z-buffer keeps the nearest
front-facing triangle per pixel.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidInputError

_MAGIC = b"UVMP"
_VERSION = 1
_HEADER = struct.Struct("<4sIII")  # magic, version, H, W

_Z_NEAR = 1e-6


@dataclass
class CameraPose:
    """Rigid world-to-camera transform plus pinhole intrinsics (pixels)."""

    rotation: np.ndarray     # (3, 3), orthonormal, det +1
    translation: np.ndarray  # (3,)
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.rotation.shape != (3, 3):
            raise InvalidInputError(f"rotation must be (3, 3), got {self.rotation.shape}")
        if not np.allclose(self.rotation @ self.rotation.T, np.eye(3), atol=1e-5):
            raise InvalidInputError("rotation is not orthonormal")
        if np.linalg.det(self.rotation) < 0:
            raise InvalidInputError("rotation must have determinant +1")

    def to_array(self) -> np.ndarray:
        return np.concatenate([
            self.rotation.reshape(-1),
            self.translation,
            [self.fx, self.fy, self.cx, self.cy],
        ]).astype(np.float32)

    @classmethod
    def from_array(cls, arr) -> "CameraPose":
        arr = np.asarray(arr, dtype=np.float64).reshape(16)
        return cls(arr[:9].reshape(3, 3), arr[9:12], *arr[12:])


@dataclass
class UVMap:
    """Per-pixel texture coordinates with a coverage flag.

    Covered pixels carry (u, v) in [0, 1]^2; uncovered pixels are undefined and
    are treated as the zero feature downstream. `tri_index` (-1 where
    uncovered) is kept in memory for shading but is not persisted.
    """

    uv: np.ndarray        # (H, W, 2) float32
    coverage: np.ndarray  # (H, W) bool
    tri_index: np.ndarray | None = None

    def __post_init__(self):
        self.uv = np.asarray(self.uv, dtype=np.float32)
        self.coverage = np.asarray(self.coverage, dtype=bool)
        if self.uv.ndim != 3 or self.uv.shape[2] != 2:
            raise InvalidInputError(f"uv must be (H, W, 2), got {self.uv.shape}")
        if self.coverage.shape != self.uv.shape[:2]:
            raise InvalidInputError(
                f"coverage {self.coverage.shape} does not match uv {self.uv.shape[:2]}"
            )

    @property
    def resolution(self):
        return self.uv.shape[:2]


def project_vertices(vertices, pose: CameraPose):
    """World vertices -> (pixel xy, camera-space depth)."""
    v = np.asarray(vertices, dtype=np.float64)
    cam = v @ pose.rotation.T + pose.translation
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        x = pose.fx * cam[:, 0] / z + pose.cx
        y = pose.fy * cam[:, 1] / z + pose.cy
    return np.stack([x, y], axis=1), z


def rasterize(vertices, triangles, uv_coords, pose: CameraPose, resolution) -> UVMap:
    """Rasterize a triangle mesh to a UV map with depth testing.

    Front-facing triangles are those with positive signed area in screen space
    (counter-clockwise with y down); degenerate and back-facing triangles are
    skipped. An empty mesh yields an all-uncovered map.
    """
    if isinstance(resolution, int):
        h = w = resolution
    else:
        h, w = resolution
    vertices = np.asarray(vertices, dtype=np.float64)
    triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    uv_coords = np.asarray(uv_coords, dtype=np.float64)

    uv_img = np.zeros((h, w, 2), dtype=np.float32)
    coverage = np.zeros((h, w), dtype=bool)
    tri_index = np.full((h, w), -1, dtype=np.int32)
    if triangles.shape[0] == 0 or vertices.shape[0] == 0:
        return UVMap(uv_img, coverage, tri_index)
    if vertices.shape[0] != uv_coords.shape[0]:
        raise InvalidInputError(
            f"uv_coords ({uv_coords.shape[0]}) must match vertex count ({vertices.shape[0]})"
        )

    screen, depth = project_vertices(vertices, pose)
    zbuf = np.full((h, w), np.inf)

    for ti, tri in enumerate(triangles):
        z = depth[tri]
        if np.any(z <= _Z_NEAR):
            continue  # behind or on the camera plane
        p = screen[tri]
        area2 = (p[1, 0] - p[0, 0]) * (p[2, 1] - p[0, 1]) - (p[2, 0] - p[0, 0]) * (p[1, 1] - p[0, 1])
        if area2 <= 1e-12:
            continue  # degenerate or back-facing

        x0 = max(int(np.floor(p[:, 0].min() - 0.5)), 0)
        x1 = min(int(np.ceil(p[:, 0].max() - 0.5)) + 1, w)
        y0 = max(int(np.floor(p[:, 1].min() - 0.5)), 0)
        y1 = min(int(np.ceil(p[:, 1].max() - 0.5)) + 1, h)
        if x0 >= x1 or y0 >= y1:
            continue

        xs = np.arange(x0, x1) + 0.5
        ys = np.arange(y0, y1) + 0.5
        px, py = np.meshgrid(xs, ys)

        # screen-space barycentrics via edge functions
        l0 = ((p[1, 0] - px) * (p[2, 1] - py) - (p[2, 0] - px) * (p[1, 1] - py)) / area2
        l1 = ((p[2, 0] - px) * (p[0, 1] - py) - (p[0, 0] - px) * (p[2, 1] - py)) / area2
        l2 = 1.0 - l0 - l1
        inside = (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
        if not inside.any():
            continue

        # perspective correction: weights proportional to lambda_i / z_i
        w0, w1, w2 = l0 / z[0], l1 / z[1], l2 / z[2]
        inv_z = w0 + w1 + w2
        z_pix = 1.0 / inv_z
        win = zbuf[y0:y1, x0:x1]
        write = inside & (z_pix < win)
        if not write.any():
            continue

        uv_pix = (
            w0[..., None] * uv_coords[tri[0]]
            + w1[..., None] * uv_coords[tri[1]]
            + w2[..., None] * uv_coords[tri[2]]
        ) / inv_z[..., None]

        win[write] = z_pix[write]
        uv_img[y0:y1, x0:x1][write] = uv_pix[write].astype(np.float32)
        coverage[y0:y1, x0:x1] |= write
        tri_index[y0:y1, x0:x1][write] = ti

    return UVMap(uv_img, coverage, tri_index)


def save_uvmap(path, uvmap: UVMap) -> None:
    """Persist as float32 (H, W, 3): u, v, coverage in {0, 1}."""
    h, w = uvmap.resolution
    data = np.concatenate(
        [uvmap.uv, uvmap.coverage[..., None].astype(np.float32)], axis=2
    )
    with open(path, "wb") as f:
        f.write(_HEADER.pack(_MAGIC, _VERSION, h, w))
        f.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def load_uvmap(path) -> UVMap:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size or raw[:4] != _MAGIC:
        raise FormatError(f"{path}: not a uv-map container")
    _, version, h, w = _HEADER.unpack_from(raw)
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + 4 * h * w * 3
    if len(raw) != expected:
        raise FormatError(f"{path}: payload is {len(raw)} bytes, expected {expected}")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(h, w, 3)
    return UVMap(data[..., :2].copy(), data[..., 2] > 0.5)
