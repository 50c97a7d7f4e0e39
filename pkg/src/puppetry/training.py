"""Two-stage training.

Stage 1 learns the shared audio-to-expression networks jointly with one 76x32
mapping matrix per training sequence, under the mouth-weighted vertex loss
over frame triplets. Stage 2 overfits the neural texture and both rendering
nets to one target sequence under the compound rendering loss. Both stages use
Adam (0.9, 0.999, 1e-8) at lr 1e-4 with a linear decay over the final epochs,
fixed seeds, and checkpoints that capture optimizer and RNG state so training
can resume bit-exactly.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from . import losses
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .dataset import SequenceData, TargetData
from .errors import InvalidInputError, TrainingDiverged
from .expression_net import (FILTER_WINDOW, AudioExpressionNet,
                             filtered_sequence_codes)
from .face import CODE_DIM, EXPRESSION_DIM, PersonMapping, fit_person_mapping
from .renderer import DilatedUNet, NeuralTexture, TextureSampler, erode_background


@dataclass
class TrainingConfig:
    learning_rate: float = 1e-4
    epochs: int = 50
    decay_epochs: int = 30          # linear decay spans the final epochs
    batch_size: int = 16            # stage 1; stage 2 always steps per frame
    seed: int = 0
    temporal_weight: float = 20.0
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    validation_fraction: float = 0.1

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise InvalidInputError("learning_rate, batch_size and epochs must be positive")
        if self.decay_epochs > self.epochs:
            raise InvalidInputError(
                f"decay span {self.decay_epochs} exceeds epoch count {self.epochs}"
            )


def seed_everything(seed: int) -> np.random.Generator:
    """Fixed torch seed + deterministic kernels; returns the numpy sampler.

    Multi-threaded CPU reductions are run-to-run nondeterministic otherwise,
    which would break the bitwise reproducibility contract.
    """
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    return np.random.default_rng(seed)


def lr_for_epoch(cfg: TrainingConfig, epoch: int) -> float:
    """Learning rate for a 1-indexed epoch: flat, then linear toward zero.

    The rate holds at `learning_rate` through epoch (epochs - decay_epochs) and
    then falls linearly, reaching zero one epoch past the schedule's end so
    every epoch still trains.
    """
    hold = cfg.epochs - cfg.decay_epochs
    if epoch <= hold:
        return cfg.learning_rate
    return cfg.learning_rate * (cfg.epochs - epoch + 1) / (cfg.decay_epochs + 1)


class _Logger:
    """Append-only structured training log (one JSON record per line)."""

    def __init__(self, path):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, **record):
        if self.path:
            with open(self.path, "a") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")


def _named_params(named_modules):
    out = []
    for prefix, module in named_modules:
        if isinstance(module, torch.nn.Parameter):
            out.append((prefix, module))
        else:
            out.extend((f"{prefix}.{n}", p) for n, p in module.named_parameters())
    return out


def _capture_state(named, optimizer, np_rng):
    tensors = {}
    for name, p in named:
        tensors[name] = p.detach().cpu().numpy().copy()
        state = optimizer.state.get(p, {})
        for key in ("exp_avg", "exp_avg_sq"):
            if key in state:
                tensors[f"opt.{name}.{key}"] = state[key].detach().cpu().numpy().copy()
        if "step" in state:
            step = state["step"]
            step = step.item() if torch.is_tensor(step) else step
            tensors[f"opt.{name}.step"] = np.asarray([step], dtype=np.float32)
    tensors["rng.torch"] = torch.get_rng_state().numpy().copy()
    meta_rng = json.loads(json.dumps(np_rng.bit_generator.state))
    return tensors, meta_rng


def _restore_state(named, optimizer, ckpt: Checkpoint, np_rng):
    with torch.no_grad():
        for name, p in named:
            if name not in ckpt.tensors:
                raise InvalidInputError(f"checkpoint is missing tensor {name!r}")
            p.copy_(torch.from_numpy(ckpt.tensors[name].reshape(p.shape)))
            state = {}
            if f"opt.{name}.exp_avg" in ckpt.tensors:
                state["step"] = torch.tensor(float(ckpt.tensors[f"opt.{name}.step"][0]))
                state["exp_avg"] = torch.from_numpy(
                    ckpt.tensors[f"opt.{name}.exp_avg"].reshape(p.shape).copy())
                state["exp_avg_sq"] = torch.from_numpy(
                    ckpt.tensors[f"opt.{name}.exp_avg_sq"].reshape(p.shape).copy())
                optimizer.state[p] = state
    torch.set_rng_state(torch.from_numpy(ckpt.tensors["rng.torch"].copy()))
    if "np_rng" in ckpt.meta:
        np_rng.bit_generator.state = ckpt.meta["np_rng"]


# --------------------------------------------------------------------------
# stage 1: generalized audio-to-expression training
# --------------------------------------------------------------------------

@dataclass
class A2EResult:
    net: AudioExpressionNet
    mappings: dict                  # person id -> PersonMapping (trained)
    history: list                   # per-epoch {"epoch", "train_loss", "val_loss", "lr"}
    best_val: float
    best_tensors: dict              # parameter snapshot at the best validation epoch


def _check_shared_basis(sequences):
    ref = sequences[0].basis
    for seq in sequences[1:]:
        same = (
            np.array_equal(ref.mean_vertices, seq.basis.mean_vertices)
            and np.array_equal(ref.expression_basis, seq.basis.expression_basis)
            and np.array_equal(ref.mouth_mask, seq.basis.mouth_mask)
        )
        if not same:
            raise InvalidInputError(
                "stage-1 training expects all sequences to share one face basis"
            )
    return ref


def _sequence_tensors(sequences):
    """Precomputed per-sequence tensors for the stage-1 loss."""
    basis = _check_shared_basis(sequences)
    expr = torch.as_tensor(basis.expression_basis, dtype=torch.float32)
    weights = torch.as_tensor(losses.mouth_vertex_weights(basis.mouth_mask),
                              dtype=torch.float32)
    packs = []
    for seq in sequences:
        static = basis.mean_vertices.astype(np.float64) + np.tensordot(
            basis.shape_basis.astype(np.float64),
            np.asarray(seq.alpha, dtype=np.float64), axes=([2], [0]))
        packs.append({
            "windows": torch.as_tensor(seq.windows, dtype=torch.float32),
            "deltas": torch.as_tensor(seq.visual_deltas, dtype=torch.float32),
            "static": torch.as_tensor(static, dtype=torch.float32),
        })
    return expr, weights, packs


def _triplet_table(sequences, validation_fraction):
    """(train_triplets, val_triplets) as arrays of (sequence_idx, center_frame)."""
    train, val = [], []
    for si, seq in enumerate(sequences):
        f = seq.frame_count
        if f < 3:
            raise InvalidInputError(f"sequence {seq.person_id} has {f} < 3 frames")
        n_val = int(f * validation_fraction)
        split = f - n_val
        train.extend((si, t) for t in range(1, split - 1))
        val.extend((si, t) for t in range(split + 1, f - 1))
    return np.asarray(train, dtype=np.int64), np.asarray(val, dtype=np.int64)


def _a2e_batch_loss(net, bank, expr, weights, packs, batch, temporal_weight):
    """Expression loss over a batch of (sequence, center-frame) triplets.

    Each triplet needs filtered codes at t-1, t, t+1, which touch per-frame
    codes of frames t-5..t+4 (edge-replicated at sequence boundaries).
    """
    wins, drefs, statics, seq_idx = [], [], [], []
    for si, t in batch:
        pack = packs[si]
        f = pack["windows"].shape[0]
        idx = np.clip(np.arange(t - 5, t + 5), 0, f - 1)
        wins.append(pack["windows"][idx])
        drefs.append(pack["deltas"][t - 1:t + 2])
        statics.append(pack["static"])
        seq_idx.append(si)
    windows = torch.stack(wins)                                   # (B, 10, 16, 29)
    b = windows.shape[0]
    codes = net.per_frame(windows.reshape(b * 10, 16, 29)).reshape(b, 10, -1)
    stacked = torch.stack([codes[:, k:k + FILTER_WINDOW] for k in range(3)], dim=1)
    w = net.filter(stacked.reshape(b * 3, FILTER_WINDOW, -1)).reshape(b, 3, FILTER_WINDOW)
    filtered = (stacked * w.unsqueeze(-1)).sum(dim=2)             # (B, 3, 32)
    m = bank[torch.as_tensor(seq_idx, dtype=torch.long)]          # (B, 76, 32)
    delta_pred = torch.einsum("bkc,bec->bke", filtered, m)
    delta_ref = torch.stack(drefs)                                # (B, 3, 76)
    static = torch.stack(statics).unsqueeze(1)                    # (B, 1, V, 3)
    v_pred = static + torch.einsum("vxe,bke->bkvx", expr, delta_pred)
    v_ref = static + torch.einsum("vxe,bke->bkvx", expr, delta_ref)
    return losses.expression_loss(v_pred, v_ref, weights, temporal_weight)


def train_a2e(sequences, cfg: TrainingConfig, out_dir=None, resume_from=None) -> A2EResult:
    """Joint training of the audio-expression nets and per-sequence mappings.

    Returns the final parameters plus a snapshot of the best-validation epoch;
    writes `a2e_final.ckpt`, `a2e_best.ckpt` and `log.jsonl` when out_dir is
    given. `resume_from` continues bit-exactly from a saved final checkpoint.
    """
    if not sequences:
        raise InvalidInputError("training needs at least one sequence")
    ids = [s.person_id for s in sequences]
    if len(set(ids)) != len(ids):
        raise InvalidInputError(f"duplicate sequence ids: {ids}")

    np_rng = seed_everything(cfg.seed)
    net = AudioExpressionNet()
    bank = torch.nn.Parameter(torch.zeros(len(sequences), EXPRESSION_DIM, CODE_DIM))

    expr, weights, packs = _sequence_tensors(sequences)
    train_tab, val_tab = _triplet_table(sequences, cfg.validation_fraction)
    if len(train_tab) == 0:
        raise InvalidInputError("no complete frame triplets available for training")

    named = _named_params([("net", net), ("mappings", bank)])
    optimizer = torch.optim.Adam([p for _, p in named], lr=cfg.learning_rate,
                                 betas=cfg.adam_betas, eps=cfg.adam_eps)
    arch = {"type": "a2e", "sequences": ids,
            "vertex_count": int(expr.shape[0]), "expression_dim": EXPRESSION_DIM,
            "code_dim": CODE_DIM}

    start_epoch = 0
    history = []
    best_val = float("inf")
    best_tensors = {name: p.detach().numpy().copy() for name, p in named}
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        if ckpt.stage != "a2e" or ckpt.arch != arch:
            raise InvalidInputError(f"{resume_from}: incompatible a2e checkpoint")
        _restore_state(named, optimizer, ckpt, np_rng)
        start_epoch = ckpt.epoch
        history = ckpt.meta.get("history", [])
        best_val = ckpt.meta.get("best_val", float("inf"))

    out_dir = Path(out_dir) if out_dir else None
    log = _Logger(out_dir / "log.jsonl" if out_dir else None)

    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        lr = lr_for_epoch(cfg, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        order = np_rng.permutation(len(train_tab))
        epoch_loss = 0.0
        for bi, lo in enumerate(range(0, len(order), cfg.batch_size)):
            batch = train_tab[order[lo:lo + cfg.batch_size]]
            optimizer.zero_grad()
            loss = _a2e_batch_loss(net, bank, expr, weights, packs, batch,
                                   cfg.temporal_weight)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {bi}")
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach()) * len(batch)
            log.write(epoch=epoch, step=bi, loss=float(loss.detach()), lr=lr)
        train_loss = epoch_loss / len(train_tab)

        val_loss = None
        if len(val_tab):
            with torch.no_grad():
                val_loss = float(_a2e_batch_loss(net, bank, expr, weights, packs,
                                                 val_tab, cfg.temporal_weight))
            if val_loss < best_val:
                best_val = val_loss
                best_tensors = {name: p.detach().numpy().copy() for name, p in named}
        history.append({"epoch": epoch, "train_loss": train_loss,
                        "val_loss": val_loss, "lr": lr})
        log.write(epoch=epoch, train_loss=train_loss, val_loss=val_loss, lr=lr)

        if out_dir:
            tensors, np_state = _capture_state(named, optimizer, np_rng)
            meta = {"history": history, "best_val": best_val, "np_rng": np_state,
                    "config": _config_meta(cfg)}
            save_checkpoint(out_dir / "a2e_final.ckpt",
                            Checkpoint("a2e", arch, tensors, epoch, meta))
            save_checkpoint(out_dir / "a2e_best.ckpt",
                            Checkpoint("a2e", arch, best_tensors, epoch,
                                       {"best_val": best_val}))

    mappings = {
        ids[i]: PersonMapping(bank.detach().numpy()[i].astype(np.float64))
        for i in range(len(ids))
    }
    return A2EResult(net=net, mappings=mappings, history=history,
                     best_val=best_val, best_tensors=best_tensors)


def _config_meta(cfg):
    meta = asdict(cfg)
    meta["adam_betas"] = list(cfg.adam_betas)
    return meta


def evaluate_a2e(net, bank_or_mappings, sequences, cfg, subset="train"):
    """Mean expression loss over a triplet subset ("train", "val" or "all")."""
    expr, weights, packs = _sequence_tensors(sequences)
    train_tab, val_tab = _triplet_table(sequences, cfg.validation_fraction)
    table = {"train": train_tab, "val": val_tab}.get(subset)
    if table is None:
        table = np.concatenate([train_tab, val_tab])
    if isinstance(bank_or_mappings, dict):
        bank = torch.stack([
            torch.as_tensor(bank_or_mappings[s.person_id].matrix, dtype=torch.float32)
            for s in sequences
        ])
    else:
        bank = bank_or_mappings
    total = 0.0
    with torch.no_grad():
        for lo in range(0, len(table), 256):
            chunk = table[lo:lo + 256]
            loss = _a2e_batch_loss(net, bank, expr, weights, packs, chunk,
                                   cfg.temporal_weight)
            total += float(loss) * len(chunk)
    return total / len(table)


def predict_sequence_codes(net: AudioExpressionNet, windows) -> np.ndarray:
    """Filtered audio-expression codes for every frame of a sequence, (F, 32)."""
    with torch.no_grad():
        per_frame = net.per_frame(torch.as_tensor(np.asarray(windows),
                                                  dtype=torch.float32))
        return filtered_sequence_codes(net, per_frame).numpy()


def adapt_new_target(net: AudioExpressionNet, windows, visual_deltas,
                     ridge: float = 0.0) -> PersonMapping:
    """Person mapping for an unseen target: filtered codes -> least squares.

    Fewer than 32 frames cannot constrain all code directions; the fit then
    returns the minimum-norm solution with `rank_deficient` set (and a warning).
    """
    codes = predict_sequence_codes(net, windows)
    if codes.shape[0] < CODE_DIM and ridge == 0.0:
        warnings.warn(
            f"fitting a person mapping from only {codes.shape[0]} frames; "
            f"at least {CODE_DIM} are recommended"
        )
    mapping = fit_person_mapping(codes, visual_deltas, ridge=ridge)
    if mapping.rank_deficient:
        warnings.warn("person-mapping fit was rank deficient; minimum-norm solution returned")
    return mapping


# --------------------------------------------------------------------------
# stage 2: person-specific deferred neural renderer
# --------------------------------------------------------------------------

@dataclass
class RendererResult:
    texture: NeuralTexture
    interior: DilatedUNet
    composite: DilatedUNet
    history: list
    erosion_radius: int
    variant: str


def make_perceptual(name):
    if name in (None, "none"):
        return None
    if name == "gradient":
        return losses.GradientFeatures()
    if callable(name):
        return name
    raise InvalidInputError(f"unknown perceptual loss {name!r}")


def train_renderer(target: TargetData, cfg: TrainingConfig, variant="dilated",
                   erosion_radius=8, perceptual="gradient", train_frames=None,
                   out_dir=None, resume_from=None) -> RendererResult:
    """End-to-end training of neural texture + interior net + compositing net.

    Steps one frame at a time (batch size 1) over the first `train_frames`
    frames (default: all) in a seeded random order per epoch.
    """
    n = target.frame_count if train_frames is None else min(train_frames, target.frame_count)
    if n < 1:
        raise InvalidInputError("renderer training needs at least one frame")

    np_rng = seed_everything(cfg.seed)
    texture = NeuralTexture()
    interior = DilatedUNet(texture.channels, variant=variant)
    composite = DilatedUNet(6, variant=variant)
    perceptual_fn = make_perceptual(perceptual)

    refs = torch.as_tensor(target.frames[:n], dtype=torch.float32)
    samplers = [TextureSampler(target.uvmaps[i]) for i in range(n)]
    eroded = torch.stack([
        erode_background(refs[i], target.uvmaps[i].coverage, erosion_radius)
        for i in range(n)
    ])
    masks = [torch.as_tensor(target.masks[i]) for i in range(n)]

    named = _named_params([("texture", texture), ("interior", interior),
                           ("composite", composite)])
    optimizer = torch.optim.Adam([p for _, p in named], lr=cfg.learning_rate,
                                 betas=cfg.adam_betas, eps=cfg.adam_eps)
    h, w = target.resolution
    arch = {"type": "renderer", "variant": variant, "resolution": [int(h), int(w)],
            "texture": [texture.resolution, texture.resolution, texture.channels],
            "erosion_radius": int(erosion_radius)}

    start_epoch = 0
    history = []
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        if ckpt.stage != "renderer" or ckpt.arch != arch:
            raise InvalidInputError(f"{resume_from}: incompatible renderer checkpoint")
        _restore_state(named, optimizer, ckpt, np_rng)
        start_epoch = ckpt.epoch
        history = ckpt.meta.get("history", [])

    out_dir = Path(out_dir) if out_dir else None
    log = _Logger(out_dir / "log.jsonl" if out_dir else None)

    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        lr = lr_for_epoch(cfg, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        order = np_rng.permutation(n)
        epoch_loss = 0.0
        for bi, i in enumerate(order):
            optimizer.zero_grad()
            feats = samplers[i](texture.grid)
            inter = interior(feats.unsqueeze(0))[0]
            final = composite(torch.cat([inter, eroded[i]], dim=0).unsqueeze(0))[0]
            loss = losses.rendering_loss(final, inter, refs[i], masks[i], perceptual_fn)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, frame {int(i)}")
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach())
            log.write(epoch=epoch, step=bi, frame=int(i), loss=float(loss.detach()), lr=lr)
        history.append({"epoch": epoch, "train_loss": epoch_loss / n, "lr": lr})
        log.write(epoch=epoch, train_loss=epoch_loss / n, lr=lr)

        if out_dir:
            tensors, np_state = _capture_state(named, optimizer, np_rng)
            meta = {"history": history, "np_rng": np_state, "config": _config_meta(cfg)}
            save_checkpoint(out_dir / "renderer.ckpt",
                            Checkpoint("renderer", arch, tensors, epoch, meta))

    return RendererResult(texture=texture, interior=interior, composite=composite,
                          history=history, erosion_radius=erosion_radius,
                          variant=variant)


def renderer_l1(result: RendererResult, target: TargetData, frame_indices) -> float:
    """Mean per-pixel absolute error of the final composite on given frames."""
    total = 0.0
    with torch.no_grad():
        for i in frame_indices:
            sampler = TextureSampler(target.uvmaps[i])
            feats = sampler(result.texture.grid)
            inter = result.interior(feats.unsqueeze(0))[0]
            ref = torch.as_tensor(target.frames[i], dtype=torch.float32)
            bg = erode_background(ref, target.uvmaps[i].coverage, result.erosion_radius)
            final = result.composite(torch.cat([inter, bg], dim=0).unsqueeze(0))[0]
            total += float((final - ref).abs().mean())
    return total / len(list(frame_indices))


# --------------------------------------------------------------------------
# checkpoint bridging shared with the CLI
# --------------------------------------------------------------------------

def a2e_from_checkpoint(ckpt: Checkpoint) -> AudioExpressionNet:
    if ckpt.stage != "a2e":
        raise InvalidInputError(f"expected an a2e checkpoint, got stage {ckpt.stage!r}")
    net = AudioExpressionNet()
    with torch.no_grad():
        for name, p in net.named_parameters():
            key = f"net.{name}"
            if key not in ckpt.tensors:
                raise InvalidInputError(f"a2e checkpoint is missing tensor {key!r}")
            p.copy_(torch.from_numpy(ckpt.tensors[key].reshape(p.shape)))
    return net


def renderer_from_checkpoint(ckpt: Checkpoint) -> RendererResult:
    if ckpt.stage != "renderer":
        raise InvalidInputError(f"expected a renderer checkpoint, got stage {ckpt.stage!r}")
    variant = ckpt.arch["variant"]
    tex_res, _, tex_ch = ckpt.arch["texture"]
    texture = NeuralTexture(resolution=tex_res, channels=tex_ch)
    interior = DilatedUNet(tex_ch, variant=variant)
    composite = DilatedUNet(6, variant=variant)
    named = _named_params([("texture", texture), ("interior", interior),
                           ("composite", composite)])
    with torch.no_grad():
        for name, p in named:
            if name not in ckpt.tensors:
                raise InvalidInputError(f"renderer checkpoint is missing tensor {name!r}")
            p.copy_(torch.from_numpy(ckpt.tensors[name].reshape(p.shape)))
    return RendererResult(texture=texture, interior=interior, composite=composite,
                          history=ckpt.meta.get("history", []),
                          erosion_radius=ckpt.arch["erosion_radius"], variant=variant)


def mapping_to_checkpoint(mapping: PersonMapping, person_id: str) -> Checkpoint:
    return Checkpoint(
        stage="mapping",
        arch={"type": "mapping", "expression_dim": EXPRESSION_DIM, "code_dim": CODE_DIM},
        tensors={"matrix": mapping.matrix.astype(np.float32)},
        meta={"person_id": person_id, "rank_deficient": bool(mapping.rank_deficient)},
    )


def mapping_from_checkpoint(ckpt: Checkpoint) -> PersonMapping:
    if ckpt.stage != "mapping":
        raise InvalidInputError(f"expected a mapping checkpoint, got stage {ckpt.stage!r}")
    return PersonMapping(ckpt.tensors["matrix"].astype(np.float64),
                         rank_deficient=bool(ckpt.meta.get("rank_deficient", False)))
