"""Blendshape face geometry and the person-specific audio-expression mapping.

The face model is a linear statistical model: vertices = mean + shape_basis @
alpha + expression_basis @ delta, in millimeters. Audio drives a shared 32-dim
code z in [-1, 1]; a person-specific 76x32 matrix maps z to that person's
expression coefficients delta.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidInputError

EXPRESSION_DIM = 76
CODE_DIM = 32

_MAGIC = b"FACE"
_VERSION = 1
_HEADER = struct.Struct("<4sIIII")  # magic, version, V, S, E


@dataclass
class FaceBasis:
    """Mean geometry plus shape and expression bases; mouth vertices flagged."""

    mean_vertices: np.ndarray     # (V, 3) mm
    shape_basis: np.ndarray       # (V, 3, S)
    expression_basis: np.ndarray  # (V, 3, E)
    mouth_mask: np.ndarray        # (V,) bool

    def __post_init__(self):
        self.mean_vertices = np.asarray(self.mean_vertices, dtype=np.float32)
        self.shape_basis = np.asarray(self.shape_basis, dtype=np.float32)
        self.expression_basis = np.asarray(self.expression_basis, dtype=np.float32)
        self.mouth_mask = np.asarray(self.mouth_mask, dtype=bool)
        v = self.mean_vertices.shape[0]
        if v < 1 or self.mean_vertices.shape != (v, 3):
            raise InvalidInputError(f"mean_vertices must be (V, 3), got {self.mean_vertices.shape}")
        if self.shape_basis.ndim != 3 or self.shape_basis.shape[:2] != (v, 3):
            raise InvalidInputError(
                f"shape_basis must be (V, 3, S) matching V={v}, got {self.shape_basis.shape}"
            )
        if self.expression_basis.ndim != 3 or self.expression_basis.shape[:2] != (v, 3):
            raise InvalidInputError(
                f"expression_basis must be (V, 3, E) matching V={v}, got {self.expression_basis.shape}"
            )
        if self.mouth_mask.shape != (v,):
            raise InvalidInputError(f"mouth_mask must be (V,), got {self.mouth_mask.shape}")
        for name, arr in (("mean_vertices", self.mean_vertices),
                          ("shape_basis", self.shape_basis),
                          ("expression_basis", self.expression_basis)):
            if not np.all(np.isfinite(arr)):
                raise InvalidInputError(f"{name} contains non-finite values")

    @property
    def vertex_count(self):
        return self.mean_vertices.shape[0]

    @property
    def shape_dim(self):
        return self.shape_basis.shape[2]

    @property
    def expression_dim(self):
        return self.expression_basis.shape[2]


@dataclass
class PersonMapping:
    """76x32 linear map from audio-expression codes to blendshape coefficients.

    `rank_deficient` is set by the fitting routine when the code matrix did not
    constrain all 32 columns (the returned matrix is then the minimum
    Frobenius-norm solution).
    """

    matrix: np.ndarray
    rank_deficient: bool = False

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.shape != (EXPRESSION_DIM, CODE_DIM):
            raise InvalidInputError(
                f"mapping must be ({EXPRESSION_DIM}, {CODE_DIM}), got {self.matrix.shape}"
            )
        if not np.all(np.isfinite(self.matrix)):
            raise InvalidInputError("mapping contains non-finite values")


def reconstruct_vertices(basis: FaceBasis, alpha, delta) -> np.ndarray:
    """vertices = mean + shape_basis @ alpha + expression_basis @ delta, in mm."""
    alpha = np.asarray(alpha, dtype=np.float64).reshape(-1)
    delta = np.asarray(delta, dtype=np.float64).reshape(-1)
    if alpha.shape[0] != basis.shape_dim:
        raise InvalidInputError(
            f"alpha has length {alpha.shape[0]}, basis expects {basis.shape_dim}"
        )
    if delta.shape[0] != basis.expression_dim:
        raise InvalidInputError(
            f"delta has length {delta.shape[0]}, basis expects {basis.expression_dim}"
        )
    out = basis.mean_vertices.astype(np.float64)
    out = out + np.tensordot(basis.shape_basis.astype(np.float64), alpha, axes=([2], [0]))
    out = out + np.tensordot(basis.expression_basis.astype(np.float64), delta, axes=([2], [0]))
    return out


def map_audio_expression(code, mapping) -> np.ndarray:
    """delta = matrix @ z."""
    matrix = mapping.matrix if isinstance(mapping, PersonMapping) else np.asarray(mapping)
    code = np.asarray(code, dtype=np.float64).reshape(-1)
    if matrix.ndim != 2 or matrix.shape[1] != code.shape[0]:
        raise InvalidInputError(
            f"mapping {matrix.shape} incompatible with code of length {code.shape[0]}"
        )
    if not np.all(np.isfinite(code)):
        raise InvalidInputError("code contains non-finite values")
    return matrix @ code


def fit_person_mapping(codes, visual_deltas, ridge: float = 0.0) -> PersonMapping:
    """Least-squares fit of the 76x32 mapping from (code, delta) pairs.

    Minimizes sum_i ||M z_i - d_i||^2 + ridge * ||M||_F^2. With ridge=0 this is
    ordinary least squares; a rank-deficient code matrix then yields the
    minimum-Frobenius-norm solution and sets `rank_deficient` on the result.
    """
    codes = np.asarray(codes, dtype=np.float64)
    deltas = np.asarray(visual_deltas, dtype=np.float64)
    if codes.ndim != 2 or codes.shape[1] != CODE_DIM:
        raise InvalidInputError(f"codes must be (N, {CODE_DIM}), got {codes.shape}")
    if deltas.ndim != 2 or deltas.shape[1] != EXPRESSION_DIM:
        raise InvalidInputError(f"deltas must be (N, {EXPRESSION_DIM}), got {deltas.shape}")
    if codes.shape[0] != deltas.shape[0] or codes.shape[0] < 1:
        raise InvalidInputError(
            f"need N >= 1 matching pairs, got {codes.shape[0]} codes / {deltas.shape[0]} deltas"
        )
    if ridge < 0:
        raise InvalidInputError(f"ridge must be non-negative, got {ridge}")

    if ridge > 0:
        gram = codes.T @ codes + ridge * np.eye(CODE_DIM)
        m_t = np.linalg.solve(gram, codes.T @ deltas)
        return PersonMapping(m_t.T, rank_deficient=False)

    m_t, _, rank, _ = np.linalg.lstsq(codes, deltas, rcond=None)
    return PersonMapping(m_t.T, rank_deficient=rank < CODE_DIM)


def save_face_basis(path, basis: FaceBasis) -> None:
    """Binary container: header {magic, version, V, S, E} + float32 arrays + uint8 mouth flags."""
    path = Path(path)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(_MAGIC, _VERSION, basis.vertex_count, basis.shape_dim,
                             basis.expression_dim))
        f.write(np.ascontiguousarray(basis.mean_vertices, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(basis.shape_basis, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(basis.expression_basis, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(basis.mouth_mask, dtype=np.uint8).tobytes())


def load_face_basis(path) -> FaceBasis:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size or raw[:4] != _MAGIC:
        raise FormatError(f"{path}: not a face-basis container")
    _, version, v, s, e = _HEADER.unpack_from(raw)
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    sizes = [v * 3, v * 3 * s, v * 3 * e]
    expected = _HEADER.size + 4 * sum(sizes) + v
    if len(raw) != expected:
        raise FormatError(f"{path}: payload is {len(raw)} bytes, expected {expected}")
    off = _HEADER.size
    mean = np.frombuffer(raw, dtype="<f4", count=sizes[0], offset=off).reshape(v, 3)
    off += 4 * sizes[0]
    shape = np.frombuffer(raw, dtype="<f4", count=sizes[1], offset=off).reshape(v, 3, s)
    off += 4 * sizes[1]
    expr = np.frombuffer(raw, dtype="<f4", count=sizes[2], offset=off).reshape(v, 3, e)
    off += 4 * sizes[2]
    mouth = np.frombuffer(raw, dtype=np.uint8, count=v, offset=off) > 0
    try:
        return FaceBasis(mean, shape, expr, mouth)
    except InvalidInputError as err:
        raise FormatError(f"{path}: {err}") from err
