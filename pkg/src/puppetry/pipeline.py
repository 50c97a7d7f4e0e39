"""End-to-end inference and evaluation on a trained target.

Inference walks audio -> filtered codes -> person-specific expression
coefficients -> posed vertices -> rasterized UV map -> deferred neural
rendering composited into the (eroded) target background. Poses and background
frames cycle through the target sequence when the driving audio outlasts it.
"""

from __future__ import annotations

import shutil
import subprocess
import time
from pathlib import Path

import numpy as np
import torch

from . import audio, face, raster
from .dataset import FPS, TargetData
from .errors import InvalidInputError
from .expression_net import AudioExpressionNet
from .renderer import TextureSampler, erode_background
from .training import RendererResult, predict_sequence_codes


def color_distance(image, reference) -> float:
    """Mean per-pixel RGB l2 distance, normalized by sqrt(3) to land in [0, 1]."""
    a = np.asarray(image, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if a.shape != b.shape or a.ndim < 3 or a.shape[-3] != 3:
        raise InvalidInputError(f"images must both be (..., 3, H, W), got {a.shape} vs {b.shape}")
    return float(np.sqrt(((a - b) ** 2).sum(axis=-3)).mean() / np.sqrt(3.0))


def _render_np(renderer: RendererResult, uvmap, background) -> np.ndarray:
    with torch.no_grad():
        feats = TextureSampler(uvmap)(renderer.texture.grid)
        inter = renderer.interior(feats.unsqueeze(0))[0]
        bg = erode_background(torch.as_tensor(background, dtype=torch.float32),
                              uvmap.coverage, renderer.erosion_radius)
        final = renderer.composite(torch.cat([inter, bg], dim=0).unsqueeze(0))[0]
    return np.clip(final.numpy(), 0.0, 1.0)


def render_deltas(renderer: RendererResult, target: TargetData, deltas,
                  frame_indices) -> np.ndarray:
    """Render given expression coefficients with the target's poses/backgrounds."""
    out = []
    alpha = target.alpha
    for delta, t in zip(deltas, frame_indices):
        tt = int(t) % target.frame_count
        vertices = face.reconstruct_vertices(target.basis, alpha, delta)
        uvmap = raster.rasterize(vertices, target.triangles, target.uv_coords,
                                 target.poses[tt], target.resolution)
        out.append(_render_np(renderer, uvmap, target.frames[tt]))
    return np.stack(out)


def infer(net: AudioExpressionNet, mapping: face.PersonMapping,
          renderer: RendererResult, target: TargetData, stream: audio.LogitStream,
          fps: float = FPS):
    """Synthesize one frame per video frame implied by the logit stream.

    Returns (frames (F, 3, H, W) float32, timing dict of per-stage mean
    milliseconds for the mapping, rasterization and rendering stages).
    """
    n = audio.video_frame_count(stream, fps)
    windows = audio.windows_for_all_frames(stream, fps, n_frames=n)

    t0 = time.perf_counter()
    codes = predict_sequence_codes(net, windows)
    deltas = codes @ mapping.matrix.T
    t_mapping = time.perf_counter() - t0

    frames = np.zeros((n, 3) + tuple(target.resolution), dtype=np.float32)
    t_raster = 0.0
    t_render = 0.0
    for t in range(n):
        tt = t % target.frame_count
        t1 = time.perf_counter()
        vertices = face.reconstruct_vertices(target.basis, target.alpha, deltas[t])
        uvmap = raster.rasterize(vertices, target.triangles, target.uv_coords,
                                 target.poses[tt], target.resolution)
        t2 = time.perf_counter()
        frames[t] = _render_np(renderer, uvmap, target.frames[tt])
        t3 = time.perf_counter()
        t_raster += t2 - t1
        t_render += t3 - t2

    timing = {
        "frames": n,
        "mapping_ms": 1e3 * t_mapping / n,
        "rasterization_ms": 1e3 * t_raster / n,
        "rendering_ms": 1e3 * t_render / n,
    }
    return frames, timing


def eval_self_reenactment(net: AudioExpressionNet, mapping: face.PersonMapping,
                          renderer: RendererResult, target: TargetData,
                          eval_frames) -> dict:
    """Mean color distance of re-rendered frames against the target's own frames.

    Reports the metric twice: driving the renderer with the visually tracked
    expressions (renderer quality alone) and with the audio-predicted
    expressions (whole pipeline).
    """
    eval_frames = [int(t) for t in eval_frames]
    if not eval_frames:
        raise InvalidInputError("no held-out frames to evaluate")
    refs = target.frames[eval_frames]

    visual = render_deltas(renderer, target, target.visual_deltas[eval_frames],
                           eval_frames)
    windows = audio.windows_for_all_frames(target.logits, FPS,
                                           n_frames=target.frame_count)
    codes = predict_sequence_codes(net, windows)
    audio_deltas = codes[eval_frames] @ mapping.matrix.T
    audio_imgs = render_deltas(renderer, target, audio_deltas, eval_frames)

    return {
        "frames": len(eval_frames),
        "visual": color_distance(visual, refs),
        "audio": color_distance(audio_imgs, refs),
    }


def assemble_video(frames_dir, out_path, fps: float = FPS) -> bool:
    """Encode frames/%06d.png into a video if an external encoder exists.

    Frame emission never depends on this; returns False when ffmpeg is absent
    or fails.
    """
    encoder = shutil.which("ffmpeg")
    if encoder is None:
        return False
    cmd = [encoder, "-y", "-loglevel", "error", "-framerate", str(fps),
           "-i", str(Path(frames_dir) / "%06d.png"),
           "-pix_fmt", "yuv420p", str(out_path)]
    try:
        return subprocess.run(cmd, check=False).returncode == 0
    except OSError:
        return False
