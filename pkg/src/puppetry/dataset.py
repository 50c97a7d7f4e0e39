"""On-disk dataset layout and in-memory sequence containers.

Each sequence lives in its own directory:

    <root>/<name>/
        manifest.json        frame count, fps, sha256 per file
        logits.lgt           50 Hz character-logit stream
        expressions.exp      per-frame tracked expression coefficients (F, 76)
        alpha.shp            per-sequence shape coefficients (S,)
        basis.fab            face basis (shared across a corpus)
        mesh.msh             triangle topology + per-vertex uv
        poses.pse            per-frame camera poses
        frames/%06d.png      reference RGB frames
        uvmaps/%06d.uvm      rasterized texture coordinates
        masks/%06d.png       face-interior masks

Binary containers follow the same magic+version pattern as the other formats.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import audio, face, raster
from .errors import FormatError, InvalidInputError

FPS = 25

LOGITS_FILE = "logits.lgt"
EXPRESSIONS_FILE = "expressions.exp"
ALPHA_FILE = "alpha.shp"
BASIS_FILE = "basis.fab"
MESH_FILE = "mesh.msh"
POSES_FILE = "poses.pse"
FRAMES_DIR = "frames"
UVMAPS_DIR = "uvmaps"
MASKS_DIR = "masks"
MANIFEST_FILE = "manifest.json"

_EXPR_HEADER = struct.Struct("<4sIII")   # EXPR, version, F, E
_ALPHA_HEADER = struct.Struct("<4sII")   # ALPH, version, S
_POSE_HEADER = struct.Struct("<4sII")    # POSE, version, F
_MESH_HEADER = struct.Struct("<4sIII")   # MESH, version, V, T


def save_expressions(path, deltas) -> None:
    deltas = np.ascontiguousarray(deltas, dtype="<f4")
    if deltas.ndim != 2:
        raise InvalidInputError(f"expressions must be (F, E), got {deltas.shape}")
    with open(path, "wb") as f:
        f.write(_EXPR_HEADER.pack(b"EXPR", 1, deltas.shape[0], deltas.shape[1]))
        f.write(deltas.tobytes())


def load_expressions(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _EXPR_HEADER.size or raw[:4] != b"EXPR":
        raise FormatError(f"{path}: not an expressions container")
    _, version, n, e = _EXPR_HEADER.unpack_from(raw)
    if version != 1 or len(raw) != _EXPR_HEADER.size + 4 * n * e:
        raise FormatError(f"{path}: corrupt expressions container")
    return np.frombuffer(raw, dtype="<f4", offset=_EXPR_HEADER.size).reshape(n, e).copy()


def save_alpha(path, alpha) -> None:
    alpha = np.ascontiguousarray(alpha, dtype="<f4").reshape(-1)
    with open(path, "wb") as f:
        f.write(_ALPHA_HEADER.pack(b"ALPH", 1, alpha.shape[0]))
        f.write(alpha.tobytes())


def load_alpha(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _ALPHA_HEADER.size or raw[:4] != b"ALPH":
        raise FormatError(f"{path}: not a shape-coefficients container")
    _, version, s = _ALPHA_HEADER.unpack_from(raw)
    if version != 1 or len(raw) != _ALPHA_HEADER.size + 4 * s:
        raise FormatError(f"{path}: corrupt shape-coefficients container")
    return np.frombuffer(raw, dtype="<f4", offset=_ALPHA_HEADER.size).copy()


def save_poses(path, poses) -> None:
    arr = np.stack([p.to_array() for p in poses]).astype("<f4")
    with open(path, "wb") as f:
        f.write(_POSE_HEADER.pack(b"POSE", 1, arr.shape[0]))
        f.write(np.ascontiguousarray(arr).tobytes())


def load_poses(path) -> list:
    raw = Path(path).read_bytes()
    if len(raw) < _POSE_HEADER.size or raw[:4] != b"POSE":
        raise FormatError(f"{path}: not a pose container")
    _, version, n = _POSE_HEADER.unpack_from(raw)
    if version != 1 or len(raw) != _POSE_HEADER.size + 4 * 16 * n:
        raise FormatError(f"{path}: corrupt pose container")
    arr = np.frombuffer(raw, dtype="<f4", offset=_POSE_HEADER.size).reshape(n, 16)
    return [raster.CameraPose.from_array(row) for row in arr]


def save_mesh(path, triangles, uv_coords) -> None:
    tris = np.ascontiguousarray(triangles, dtype="<u4").reshape(-1, 3)
    uv = np.ascontiguousarray(uv_coords, dtype="<f4").reshape(-1, 2)
    with open(path, "wb") as f:
        f.write(_MESH_HEADER.pack(b"MESH", 1, uv.shape[0], tris.shape[0]))
        f.write(uv.tobytes())
        f.write(tris.tobytes())


def load_mesh(path):
    raw = Path(path).read_bytes()
    if len(raw) < _MESH_HEADER.size or raw[:4] != b"MESH":
        raise FormatError(f"{path}: not a mesh container")
    _, version, v, t = _MESH_HEADER.unpack_from(raw)
    if version != 1 or len(raw) != _MESH_HEADER.size + 8 * v + 12 * t:
        raise FormatError(f"{path}: corrupt mesh container")
    uv = np.frombuffer(raw, dtype="<f4", count=2 * v, offset=_MESH_HEADER.size).reshape(v, 2)
    tris = np.frombuffer(raw, dtype="<u4", offset=_MESH_HEADER.size + 8 * v).reshape(t, 3)
    return tris.astype(np.int64), uv.copy()


def save_image(path, image) -> None:
    """(3, H, W) or (H, W) float image in [0, 1] -> 8-bit PNG."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3:
        arr = np.moveaxis(arr, 0, 2)
    data = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(path, format="PNG")


def load_image(path) -> np.ndarray:
    """8-bit PNG -> (3, H, W) float32 in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return np.moveaxis(arr, 2, 0)


def load_mask(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("L")) > 127


@dataclass
class SequenceData:
    """Stage-1 training view of one sequence."""

    person_id: str
    windows: np.ndarray        # (F, 16, 29)
    visual_deltas: np.ndarray  # (F, 76)
    basis: face.FaceBasis
    alpha: np.ndarray          # (S,)

    @property
    def frame_count(self):
        return self.windows.shape[0]


@dataclass
class TargetData:
    """Stage-2 / inference view of one target sequence."""

    name: str
    frames: np.ndarray   # (F, 3, H, W) float32
    uvmaps: list         # F UVMaps
    poses: list          # F CameraPoses
    masks: np.ndarray    # (F, H, W) bool
    basis: face.FaceBasis
    triangles: np.ndarray
    uv_coords: np.ndarray
    alpha: np.ndarray
    visual_deltas: np.ndarray
    logits: audio.LogitStream

    @property
    def frame_count(self):
        return self.frames.shape[0]

    @property
    def resolution(self):
        return self.frames.shape[2:]


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(seq_dir) -> None:
    seq_dir = Path(seq_dir)
    frame_count = len(sorted((seq_dir / FRAMES_DIR).glob("*.png")))
    files = {}
    for p in sorted(seq_dir.rglob("*")):
        if p.is_file() and p.name != MANIFEST_FILE:
            files[p.relative_to(seq_dir).as_posix()] = _sha256(p)
    manifest = {"frame_count": frame_count, "fps": FPS, "files": files}
    (seq_dir / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2, sort_keys=True))


def read_manifest(seq_dir) -> dict:
    path = Path(seq_dir) / MANIFEST_FILE
    if not path.exists():
        raise FormatError(f"{path}: missing manifest")
    return json.loads(path.read_text())


def verify_manifest(seq_dir) -> None:
    """Raise FormatError on the first checksum mismatch or missing file."""
    seq_dir = Path(seq_dir)
    manifest = read_manifest(seq_dir)
    for rel, digest in manifest["files"].items():
        p = seq_dir / rel
        if not p.exists():
            raise FormatError(f"{seq_dir}: manifest entry {rel} is missing on disk")
        if _sha256(p) != digest:
            raise FormatError(f"{seq_dir}: checksum mismatch for {rel}")


def load_sequence_data(seq_dir, fps=FPS) -> SequenceData:
    seq_dir = Path(seq_dir)
    if not seq_dir.is_dir():
        raise InvalidInputError(f"sequence directory does not exist: {seq_dir}")
    deltas = load_expressions(seq_dir / EXPRESSIONS_FILE)
    stream = audio.load_logit_stream(seq_dir / LOGITS_FILE)
    windows = audio.windows_for_all_frames(stream, fps, n_frames=deltas.shape[0])
    return SequenceData(
        person_id=seq_dir.name,
        windows=windows.astype(np.float32),
        visual_deltas=deltas,
        basis=face.load_face_basis(seq_dir / BASIS_FILE),
        alpha=load_alpha(seq_dir / ALPHA_FILE),
    )


def load_target_data(seq_dir, fps=FPS) -> TargetData:
    seq_dir = Path(seq_dir)
    if not seq_dir.is_dir():
        raise InvalidInputError(f"sequence directory does not exist: {seq_dir}")
    manifest = read_manifest(seq_dir)
    n = manifest["frame_count"]
    frames = np.stack([load_image(seq_dir / FRAMES_DIR / f"{i:06d}.png") for i in range(n)])
    uvmaps = [raster.load_uvmap(seq_dir / UVMAPS_DIR / f"{i:06d}.uvm") for i in range(n)]
    masks = np.stack([load_mask(seq_dir / MASKS_DIR / f"{i:06d}.png") for i in range(n)])
    poses = load_poses(seq_dir / POSES_FILE)
    if len(poses) != n:
        raise FormatError(f"{seq_dir}: {len(poses)} poses for {n} frames")
    triangles, uv_coords = load_mesh(seq_dir / MESH_FILE)
    return TargetData(
        name=seq_dir.name,
        frames=frames,
        uvmaps=uvmaps,
        poses=poses,
        masks=masks,
        basis=face.load_face_basis(seq_dir / BASIS_FILE),
        triangles=triangles,
        uv_coords=uv_coords,
        alpha=load_alpha(seq_dir / ALPHA_FILE),
        visual_deltas=load_expressions(seq_dir / EXPRESSIONS_FILE),
        logits=audio.load_logit_stream(seq_dir / LOGITS_FILE),
    )
