"""Synthetic ground-truth world for end-to-end verification.

Builds a toy face basis on a curved grid mesh, a known logits -> code -> delta
chain, and flat-shaded reference renders, so that every learnable stage of the
pipeline has a recoverable target:

* the code function is exactly affine + TanH on the emitted logit domain AND
  exactly representable by the per-frame network: it is obtained by composing
  the weights of a constructed "teacher" network whose pre-activations stay
  positive on that domain (leaky ReLU is the identity there);
* expression coefficients are M* @ code for a known per-person matrix M*;
* images are deterministic flat-shaded renders of the reconstructed mesh over
  a fixed background, with the rasterized UV maps and poses emitted alongside.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, gaussian_filter1d

from . import audio, dataset, face, raster
from .errors import InvalidInputError

_GRID_ROWS = 20
_GRID_COLS = 25


@dataclass
class OracleSpec:
    """Knobs of the generative world; everything downstream is seeded from here."""

    seed: int = 0
    grid_rows: int = _GRID_ROWS        # grid_rows * grid_cols vertices
    grid_cols: int = _GRID_COLS
    mouth_fraction: float = 0.12
    shape_dim: int = 10
    resolution: int = 64
    texture_pattern: int = 0           # 0 smooth bands, 1 checker
    camera_path: str = "static"        # or "sway"
    logit_smoothness: float = 48.0     # gaussian sigma over 20ms logit steps
    logit_period: int = 80             # >0: quasi-periodic speech with this many
                                       # logit steps per cycle (plus small drift)
    displacement_scale: float = 0.15   # mm of vertex RMS per unit expression coeff
    code_std: float = 0.35             # target std of emitted codes per dimension
    mapping_scale: float = 0.04        # std of M* entries; keeps the zero-init
                                       # mapping within Adam's reach at lr 1e-4
    delta_noise_std: float = 0.0       # robustness-test option, off by default

    def __post_init__(self):
        if self.camera_path not in ("static", "sway"):
            raise InvalidInputError(f"unknown camera path {self.camera_path!r}")
        if not (0 < self.mouth_fraction < 1):
            raise InvalidInputError("mouth_fraction must be in (0, 1)")


@dataclass
class DemoFace:
    basis: face.FaceBasis
    triangles: np.ndarray  # (T, 3)
    uv_coords: np.ndarray  # (V, 2)


@dataclass
class OracleSequence:
    """Everything generate_sequence knows about one synthetic person's take."""

    name: str
    stream: audio.LogitStream
    windows: np.ndarray          # (F, 16, 29) float32
    codes: np.ndarray            # (F, 32) float64, tanh(A @ window + b)
    deltas: np.ndarray           # (F, 76) float64, M* @ code (+ optional noise)
    alpha: np.ndarray            # (S,) float64
    vertices: np.ndarray         # (F, V, 3) float64 mm
    images: np.ndarray           # (F, 3, H, W) float32 in [0, 1]
    uvmaps: list
    poses: list
    masks: np.ndarray            # (F, H, W) bool
    demo_face: DemoFace
    mapping: face.PersonMapping  # the true M*
    code_affine: tuple           # (A (32, 464), b (32,)) float64

    @property
    def frame_count(self):
        return self.windows.shape[0]


def _rng(spec: OracleSpec, *tags) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([spec.seed, *tags]))


def _smooth_grid_field(rng, rows, cols, sigma=3.0):
    field = rng.standard_normal((rows, cols))
    field = gaussian_filter(field, sigma=sigma, mode="nearest")
    return field / (np.abs(field).max() + 1e-12)


def build_demo_face(spec: OracleSpec) -> DemoFace:
    """Curved grid "face" with smooth random shape/expression bases (mm units).

    Expression displacement fields are concentrated around the labeled mouth
    region so unit coefficients move the mouth visibly; each basis column is
    normalized to `displacement_scale` mm RMS.
    """
    rows, cols = spec.grid_rows, spec.grid_cols
    rng = _rng(spec, 0)
    s = np.linspace(0.0, 1.0, rows)[:, None].repeat(cols, axis=1)
    t = np.linspace(0.0, 1.0, cols)[None, :].repeat(rows, axis=0)

    # face-local frame: x right, y down, z away from camera; nose bulges toward it
    x = 140.0 * (t - 0.5)
    y = 180.0 * (s - 0.5)
    z = -40.0 * np.sin(np.pi * t) * np.sin(np.pi * s)
    mean = np.stack([x, y, z], axis=-1).reshape(-1, 3)

    half_s = np.sqrt(spec.mouth_fraction / 2.0) / 2.0
    half_t = np.sqrt(spec.mouth_fraction * 2.0) / 2.0
    mouth = ((np.abs(s - 0.72) <= half_s) & (np.abs(t - 0.5) <= half_t)).reshape(-1)

    envelope = 0.15 + 0.85 * np.exp(
        -((s - 0.72) ** 2 / (2 * 0.12 ** 2) + (t - 0.5) ** 2 / (2 * 0.20 ** 2))
    )

    def basis_block(n_columns, scale, env):
        cols_out = []
        for _ in range(n_columns):
            d = np.stack(
                [_smooth_grid_field(rng, rows, cols) * env for _ in range(3)], axis=-1
            ).reshape(-1, 3)
            rms = np.sqrt((d ** 2).sum(axis=1).mean())
            cols_out.append(d * (scale / (rms + 1e-12)))
        return np.stack(cols_out, axis=-1)  # (V, 3, n)

    shape_basis = basis_block(spec.shape_dim, 1.0, np.ones_like(envelope))
    expr_basis = basis_block(face.EXPRESSION_DIM, spec.displacement_scale, envelope)

    tris = []
    for i in range(rows - 1):
        for j in range(cols - 1):
            v00 = i * cols + j
            v01 = v00 + 1
            v10 = v00 + cols
            v11 = v10 + 1
            tris.append((v00, v01, v10))  # wound front-facing for the y-down camera
            tris.append((v10, v01, v11))
    triangles = np.asarray(tris, dtype=np.int64)
    uv_coords = np.stack([t.reshape(-1), s.reshape(-1)], axis=1)

    basis = face.FaceBasis(mean, shape_basis, expr_basis, mouth)
    return DemoFace(basis, triangles, uv_coords)


# --- teacher network -> exact affine code map ------------------------------

_CONV_PLAN = ((29, 32, 16), (32, 32, 8), (32, 64, 4), (64, 64, 2))  # in, out, in_length
_FC_PLAN = ((64, 128), (128, 64))


def _structured(rng, out_dim, in_dim, gain, noise):
    w = rng.uniform(-noise, noise, size=(out_dim, in_dim))
    w[np.arange(out_dim), np.arange(out_dim) % in_dim] += gain
    return w


def _conv_matrix(weights, in_len):
    """Kernel-3 stride-2 pad-1 conv as a dense matrix over (channel, time) layout."""
    out_c, in_c, _ = weights.shape
    out_len = in_len // 2
    m = np.zeros((out_c, out_len, in_c, in_len))
    for tp in range(out_len):
        for k in range(3):
            src = 2 * tp + k - 1
            if 0 <= src < in_len:
                m[:, tp, :, src] = weights[:, :, k]
    return m.reshape(out_c * out_len, in_c * in_len)


def build_code_function(spec: OracleSpec):
    """Affine code map z = tanh(A @ window.flatten() + b), representable exactly.

    A teacher per-frame net is constructed whose hidden weights are a damped
    channel-passthrough plus small noise and whose biases keep every hidden
    pre-activation strictly positive for |logits| <= 1, making the net affine
    on that domain. Its layers are composed into (A, b) in float64, with the
    final-layer rows rescaled so each code dimension has roughly `code_std`
    spread. Returns (A, b, teacher_arrays) where teacher_arrays holds the
    per-layer weights realizing the same function.
    """
    rng = _rng(spec, 1)
    teacher = {}
    affine_w = None  # running (out_dim, 464) matrix over (channel, time) layout
    affine_b = None

    for li, (in_c, out_c, in_len) in enumerate(_CONV_PLAN):
        kernel = rng.uniform(-0.002, 0.002, size=(out_c, in_c, 3))
        kernel[np.arange(out_c), np.arange(out_c) % in_c, 1] += 0.4
        bias = np.full(out_c, 1.0)
        teacher[f"conv{li}.weight"] = kernel
        teacher[f"conv{li}.bias"] = bias
        m = _conv_matrix(kernel, in_len)
        b = np.repeat(bias, in_len // 2)
        if affine_w is None:
            affine_w, affine_b = m, b
        else:
            affine_b = m @ affine_b + b
            affine_w = m @ affine_w

    for li, (in_d, out_d) in enumerate(_FC_PLAN):
        w = _structured(rng, out_d, in_d, 0.4, 0.01)
        b = np.full(out_d, 1.0)
        teacher[f"fc{li}.weight"] = w
        teacher[f"fc{li}.bias"] = b
        affine_b = w @ affine_b + b
        affine_w = w @ affine_w

    w3 = rng.standard_normal((face.CODE_DIM, 64))
    offset = rng.uniform(-0.15, 0.15, size=face.CODE_DIM)
    pre_a = w3 @ affine_w
    pre_b = w3 @ affine_b

    # normalize each code dimension's spread on a probe set of smooth windows
    probe = _smooth_logits(_rng(spec, 2), 600, spec.logit_smoothness)
    stream = audio.LogitStream(probe.astype(np.float32))
    probe_windows = audio.windows_for_all_frames(stream, dataset.FPS)
    vals = probe_windows.reshape(len(probe_windows), -1).astype(np.float64) @ pre_a.T
    scale = spec.code_std / (vals.std(axis=0) + 1e-9)
    a_mat = pre_a * scale[:, None]
    b_vec = offset
    # the teacher's last bias cancels its constant part, so the composed
    # affine map is exactly a_mat @ x + offset
    teacher["fc2.weight"] = w3 * scale[:, None]
    teacher["fc2.bias"] = offset - scale * pre_b

    # reorder columns from (channel, time) to the window's row-major (time, channel)
    perm = (np.arange(29)[None, :] * 16 + np.arange(16)[:, None]).reshape(-1)
    a_mat = a_mat[:, perm]
    return a_mat, b_vec, teacher


def _teacher_pre_activations(teacher, windows):
    """Forward the teacher in float64, returning hidden pre-activation minima."""
    x = windows.reshape(len(windows), 16, 29).transpose(0, 2, 1)  # (N, 29, 16)
    minima = []
    for li, (in_c, out_c, in_len) in enumerate(_CONV_PLAN):
        w = teacher[f"conv{li}.weight"]
        b = teacher[f"conv{li}.bias"]
        padded = np.pad(x, ((0, 0), (0, 0), (1, 1)))
        out = np.zeros((x.shape[0], out_c, in_len // 2))
        for tp in range(in_len // 2):
            window = padded[:, :, 2 * tp:2 * tp + 3]
            out[:, :, tp] = np.einsum("nck,ock->no", window, w) + b
        minima.append(out.min())
        x = out  # identity region of leaky ReLU
    h = x.reshape(len(windows), -1)
    for li, _ in enumerate(_FC_PLAN):
        h = h @ teacher[f"fc{li}.weight"].T + teacher[f"fc{li}.bias"]
        minima.append(h.min())
    return min(minima)


def _smooth_logits(rng, n_rows, sigma, period=0):
    if period > 0:
        cycle = gaussian_filter1d(rng.standard_normal((period, 29)), sigma=sigma,
                                  axis=0, mode="wrap")
        reps = int(np.ceil(n_rows / period))
        x = np.tile(cycle, (reps, 1))[:n_rows]
        drift = gaussian_filter1d(rng.standard_normal((n_rows, 29)), sigma=sigma,
                                  axis=0, mode="nearest")
        x = x / (x.std() + 1e-12) + 0.10 * drift / (drift.std() + 1e-12)
        x = x / (x.std() + 1e-12) * 0.8
    else:
        x = gaussian_filter1d(rng.standard_normal((n_rows, 29)), sigma=sigma, axis=0,
                              mode="nearest")
        x = x / (x.std() + 1e-12) * 0.8
    return np.tanh(x)


# --- rendering of reference frames -----------------------------------------

def texture_pattern(uv, pattern_id):
    """Albedo at (u, v); uv is (..., 2) in [0,1]^2, result (..., 3) in [0,1]."""
    u, v = uv[..., 0], uv[..., 1]
    if pattern_id == 0:
        r = 0.55 + 0.35 * np.sin(2 * np.pi * (2.0 * u + 0.30))
        g = 0.55 + 0.35 * np.sin(2 * np.pi * (2.0 * v + 0.60))
        b = 0.55 + 0.35 * np.sin(2 * np.pi * (1.5 * (u + v)))
    elif pattern_id == 1:
        checker = ((np.floor(u * 6) + np.floor(v * 6)) % 2)
        r = 0.25 + 0.5 * checker
        g = 0.65 - 0.4 * checker
        b = 0.45 + 0.3 * checker
    else:
        raise InvalidInputError(f"unknown texture pattern {pattern_id}")
    return np.clip(np.stack([r, g, b], axis=-1), 0.0, 1.0)


_LIGHT = np.array([0.3, -0.5, -0.81])
_LIGHT = _LIGHT / np.linalg.norm(_LIGHT)


def shade_frame(vertices, demo_face: DemoFace, uvmap: raster.UVMap, pose,
                background, pattern_id):
    """Flat-shaded render: albedo(u, v) * (ambient + diffuse * max(0, n.l))."""
    img = background.copy()
    cov = uvmap.coverage
    if not cov.any():
        return img
    cam = vertices @ pose.rotation.T + pose.translation
    tri = demo_face.triangles
    e1 = cam[tri[:, 1]] - cam[tri[:, 0]]
    e2 = cam[tri[:, 2]] - cam[tri[:, 0]]
    n = np.cross(e1, e2)
    n /= (np.linalg.norm(n, axis=1, keepdims=True) + 1e-12)
    n[n[:, 2] > 0] *= -1.0  # orient toward the camera
    shade = 0.45 + 0.55 * np.clip(n @ _LIGHT, 0.0, 1.0)

    albedo = texture_pattern(uvmap.uv[cov], pattern_id)
    intensity = shade[uvmap.tri_index[cov]]
    img[:, cov] = np.clip(albedo * intensity[:, None], 0.0, 1.0).T.astype(np.float32)
    return img


def _background(rng, resolution):
    top = rng.uniform(0.15, 0.45, size=3)
    bottom = rng.uniform(0.55, 0.85, size=3)
    ramp = np.linspace(0.0, 1.0, resolution)[None, :, None]
    img = top[:, None, None] * (1 - ramp) + bottom[:, None, None] * ramp
    wave = 0.03 * np.sin(np.linspace(0, 4 * np.pi, resolution))[None, None, :]
    return np.clip(img + wave, 0.0, 1.0).astype(np.float32)


def _pose_for_frame(spec, frame_index, resolution):
    f = 2.8 * resolution
    dx = 0.0
    if spec.camera_path == "sway":
        dx = 6.0 * np.sin(2 * np.pi * frame_index / 50.0)
    return raster.CameraPose(np.eye(3), np.array([dx, 0.0, 650.0]),
                             fx=f, fy=f, cx=resolution / 2.0, cy=resolution / 2.0)


def generate_sequence(spec: OracleSpec, frame_count: int, person_index: int = 0,
                      render: bool = True) -> OracleSequence:
    """Sample one person's fully consistent synthetic take.

    The world (face basis, code function) is shared across person indices of
    the same spec; the mapping M*, shape coefficients, logit stream, and
    background are person-specific. With render=False the image/uvmap/mask
    streams are left empty (stage-1 corpora don't need them).
    """
    if frame_count < 3:
        raise InvalidInputError(f"frame_count must be >= 3, got {frame_count}")
    demo = build_demo_face(spec)
    a_mat, b_vec, teacher = build_code_function(spec)

    rng = _rng(spec, 1000 + person_index)
    n_logits = 2 * frame_count + 8
    logits = _smooth_logits(rng, n_logits, spec.logit_smoothness, spec.logit_period)
    stream = audio.LogitStream(logits.astype(np.float32))
    windows = audio.windows_for_all_frames(stream, dataset.FPS, n_frames=frame_count)

    floor = _teacher_pre_activations(teacher, windows.astype(np.float64))
    if floor <= 0.05:
        raise AssertionError(
            f"teacher left its linear regime (min pre-activation {floor:.4f}); "
            "the affine code map would not be representable"
        )

    codes = np.tanh(windows.reshape(frame_count, -1).astype(np.float64) @ a_mat.T + b_vec)
    m_star = rng.standard_normal((face.EXPRESSION_DIM, face.CODE_DIM)) * spec.mapping_scale
    mapping = face.PersonMapping(m_star)
    deltas = codes @ m_star.T
    if spec.delta_noise_std > 0:
        deltas = deltas + rng.normal(0.0, spec.delta_noise_std, size=deltas.shape)

    alpha = rng.normal(0.0, 0.5, size=spec.shape_dim)
    vertices = np.stack([
        face.reconstruct_vertices(demo.basis, alpha, deltas[i])
        for i in range(frame_count)
    ])

    res = spec.resolution
    poses = [_pose_for_frame(spec, i, res) for i in range(frame_count)]
    if render:
        background = _background(rng, res)
        images = np.zeros((frame_count, 3, res, res), dtype=np.float32)
        uvmaps = []
        masks = np.zeros((frame_count, res, res), dtype=bool)
        for i in range(frame_count):
            uvmap = raster.rasterize(vertices[i], demo.triangles, demo.uv_coords,
                                     poses[i], res)
            uvmaps.append(uvmap)
            masks[i] = uvmap.coverage
            images[i] = shade_frame(vertices[i], demo, uvmap, poses[i], background,
                                    spec.texture_pattern)
    else:
        images = np.zeros((0, 3, res, res), dtype=np.float32)
        uvmaps = []
        masks = np.zeros((0, res, res), dtype=bool)

    return OracleSequence(
        name=f"person{person_index:02d}",
        stream=stream,
        windows=windows.astype(np.float32),
        codes=codes,
        deltas=deltas,
        alpha=alpha,
        vertices=vertices,
        images=images,
        uvmaps=uvmaps,
        poses=poses,
        masks=masks,
        demo_face=demo,
        mapping=mapping,
        code_affine=(a_mat, b_vec),
    )


def write_sequence(seq_dir, seq: OracleSequence) -> Path:
    """Persist one generated sequence in the standard dataset layout."""
    seq_dir = Path(seq_dir)
    (seq_dir / dataset.FRAMES_DIR).mkdir(parents=True, exist_ok=True)
    (seq_dir / dataset.UVMAPS_DIR).mkdir(exist_ok=True)
    (seq_dir / dataset.MASKS_DIR).mkdir(exist_ok=True)

    audio.save_logit_stream(seq_dir / dataset.LOGITS_FILE, seq.stream)
    dataset.save_expressions(seq_dir / dataset.EXPRESSIONS_FILE, seq.deltas)
    dataset.save_alpha(seq_dir / dataset.ALPHA_FILE, seq.alpha)
    face.save_face_basis(seq_dir / dataset.BASIS_FILE, seq.demo_face.basis)
    dataset.save_mesh(seq_dir / dataset.MESH_FILE, seq.demo_face.triangles,
                      seq.demo_face.uv_coords)
    dataset.save_poses(seq_dir / dataset.POSES_FILE, seq.poses)
    for i in range(len(seq.uvmaps)):
        dataset.save_image(seq_dir / dataset.FRAMES_DIR / f"{i:06d}.png", seq.images[i])
        raster.save_uvmap(seq_dir / dataset.UVMAPS_DIR / f"{i:06d}.uvm", seq.uvmaps[i])
        dataset.save_image(seq_dir / dataset.MASKS_DIR / f"{i:06d}.png",
                           seq.masks[i].astype(np.float64))
    dataset.write_manifest(seq_dir)
    return seq_dir


def write_corpus(root, spec: OracleSpec, persons: int, frames_per_person: int,
                 render: bool = True) -> list:
    """Generate and persist a corpus of person sequences; returns their dirs."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    dirs = []
    for p in range(persons):
        seq = generate_sequence(spec, frames_per_person, person_index=p, render=render)
        dirs.append(write_sequence(root / seq.name, seq))
    return dirs
