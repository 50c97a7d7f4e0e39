"""Per-frame audio feature windows over a 50 Hz character-logit stream.

A speech recognizer (external to this package) emits one 29-dim logit vector
per 20 ms of audio. For every video frame we cut a 16x29 window out of that
stream, centered on the frame's timestamp. Streams are stored either in a
small binary container or as whitespace-separated text (fixtures).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidInputError

LOGIT_WIDTH = 29
WINDOW_LENGTH = 16
LOGIT_RATE_HZ = 50
HOP_MS = 20

_MAGIC = b"LGTS"
_VERSION = 1
_HEADER = struct.Struct("<4sIIII")  # magic, version, row_count, row_width, hop_ms


@dataclass
class LogitStream:
    """Ordered 50 Hz sequence of 29-dim logit rows, shape (n, 29)."""

    frames: np.ndarray
    sample_rate_hz: int = LOGIT_RATE_HZ

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[0] == 0:
            raise InvalidInputError(
                f"logit stream must be a non-empty (n, {LOGIT_WIDTH}) array, "
                f"got shape {self.frames.shape}"
            )
        if self.frames.shape[1] != LOGIT_WIDTH:
            raise InvalidInputError(
                f"logit rows must have width {LOGIT_WIDTH}, got {self.frames.shape[1]}"
            )
        if not np.all(np.isfinite(self.frames)):
            raise InvalidInputError("logit stream contains non-finite values")
        if self.sample_rate_hz != LOGIT_RATE_HZ:
            raise InvalidInputError(
                f"only {LOGIT_RATE_HZ} Hz streams are supported, got {self.sample_rate_hz}"
            )

    def __len__(self):
        return self.frames.shape[0]


def video_frame_count(stream: LogitStream, video_fps: float) -> int:
    """Number of video frames implied by the stream duration, at least 1."""
    if video_fps <= 0:
        raise InvalidInputError(f"video_fps must be positive, got {video_fps}")
    return max(1, math.floor(len(stream) * video_fps / stream.sample_rate_hz))


def center_logit_index(frame_index: int, video_fps: float) -> int:
    """Logit row aligned with a video frame's timestamp (round half up)."""
    return math.floor(frame_index * LOGIT_RATE_HZ / video_fps + 0.5)


def window_for_frame(stream: LogitStream, frame_index: int, video_fps: float) -> np.ndarray:
    """16x29 logit window for one video frame.

    Rows run oldest-first and cover logit indices center-8 .. center+7 where
    center = round(frame_index * 50 / fps). Indices outside the stream are
    filled by edge replication, so the shape is always (16, 29).
    """
    if frame_index < 0:
        raise InvalidInputError(f"frame_index must be non-negative, got {frame_index}")
    n_frames = video_frame_count(stream, video_fps)
    if frame_index >= n_frames:
        raise InvalidInputError(
            f"frame_index {frame_index} outside the {n_frames}-frame video implied "
            f"by a {len(stream)}-row stream at {video_fps} fps"
        )
    center = center_logit_index(frame_index, video_fps)
    idx = np.clip(np.arange(center - 8, center + 8), 0, len(stream) - 1)
    return stream.frames[idx].copy()


def windows_for_all_frames(stream: LogitStream, video_fps: float, n_frames: int | None = None) -> np.ndarray:
    """Stack of per-frame windows, shape (n_frames, 16, 29)."""
    if n_frames is None:
        n_frames = video_frame_count(stream, video_fps)
    return np.stack([window_for_frame(stream, t, video_fps) for t in range(n_frames)])


def save_logit_stream(path, stream: LogitStream) -> None:
    """Write the binary container: header + row-major little-endian float32."""
    path = Path(path)
    data = np.ascontiguousarray(stream.frames, dtype="<f4")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(_MAGIC, _VERSION, data.shape[0], data.shape[1], HOP_MS))
        f.write(data.tobytes())


def load_logit_stream(path) -> LogitStream:
    """Read a stream from the binary container or the plain-text fixture format."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] == _MAGIC:
        return _load_binary(path, raw)
    return _load_text(path)


def _load_binary(path, raw) -> LogitStream:
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, row_count, row_width, hop_ms = _HEADER.unpack_from(raw)
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if row_width != LOGIT_WIDTH:
        raise FormatError(f"{path}: row width {row_width}, expected {LOGIT_WIDTH}")
    if hop_ms != HOP_MS:
        raise FormatError(f"{path}: hop {hop_ms} ms, expected {HOP_MS} ms")
    expected = _HEADER.size + 4 * row_count * row_width
    if len(raw) != expected:
        raise FormatError(f"{path}: payload is {len(raw)} bytes, expected {expected}")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(row_count, row_width)
    try:
        return LogitStream(data)
    except InvalidInputError as e:
        raise FormatError(f"{path}: {e}") from e


def _load_text(path) -> LogitStream:
    rows = []
    with open(path, "r") as f:
        for lineno, line in enumerate(f):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                values = [float(tok) for tok in line.split()]
            except ValueError as e:
                raise FormatError(f"{path}: row {lineno} is not numeric: {e}") from e
            if len(values) != LOGIT_WIDTH:
                raise FormatError(
                    f"{path}: row {lineno} has {len(values)} values, expected {LOGIT_WIDTH}"
                )
            rows.append(values)
    if not rows:
        raise FormatError(f"{path}: no logit rows found")
    return LogitStream(np.asarray(rows, dtype=np.float32))
