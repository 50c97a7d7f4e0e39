"""Training objectives for both pipeline stages.

Vertex losses are weighted RMS distances in millimeters with a 10x weight on
the mouth region; the rendering loss combines absolute color error, a masked
face-interior term, and a pluggable perceptual feature distance. All functions
operate on torch tensors (numpy inputs are converted) and are differentiable.
"""

from __future__ import annotations

import warnings

import numpy as np
import torch

from .errors import InvalidInputError

MOUTH_WEIGHT = 10.0
TEMPORAL_WEIGHT = 20.0


def mouth_vertex_weights(mouth_mask, mouth_weight: float = MOUTH_WEIGHT) -> np.ndarray:
    """Per-vertex loss weights: `mouth_weight` on mouth vertices, 1 elsewhere, normalized."""
    mask = np.asarray(mouth_mask, dtype=bool)
    w = np.where(mask, mouth_weight, 1.0)
    return w / w.sum()


def _as_tensor(x, name):
    t = torch.as_tensor(x)
    if not torch.is_floating_point(t):
        t = t.double()
    if not torch.isfinite(t).all():
        raise InvalidInputError(f"{name} contains non-finite values")
    return t


def _masked_sqrt(x):
    # sqrt with subgradient 0 at the kink: the zero/negative branch is cut out
    # of the graph so no inf * 0 = nan leaks through the chain rule.
    positive = (x > 0).to(x.dtype)
    return torch.sqrt(x * positive + (1.0 - positive)) * positive


def weighted_rms(v, v_ref, weights):
    """sqrt(sum_i w_i ||v_i - v_ref_i||^2 / sum_i w_i), batched over leading dims.

    `v` and `v_ref` are (V, 3) or (..., V, 3); the result is the mean of the
    per-item RMS values over any leading batch dimensions.
    """
    v = _as_tensor(v, "v")
    v_ref = _as_tensor(v_ref, "v_ref")
    if v.shape != v_ref.shape or v.shape[-1] != 3 or v.ndim < 2:
        raise InvalidInputError(f"vertex arrays must share a (..., V, 3) shape, got {tuple(v.shape)} vs {tuple(v_ref.shape)}")
    w = _as_tensor(weights, "weights").reshape(-1)
    if w.shape[0] != v.shape[-2]:
        raise InvalidInputError(f"weights length {w.shape[0]} does not match V={v.shape[-2]}")
    if (w < 0).any() or w.sum() <= 0:
        raise InvalidInputError("weights must be non-negative with positive sum")
    w = (w / w.sum()).to(v.dtype)
    sq = ((v - v_ref) ** 2).sum(dim=-1)          # (..., V)
    msq = (sq * w).sum(dim=-1)                   # (...,)
    return _masked_sqrt(msq).mean()


def temporal_loss(predicted, reference, weights):
    """Weighted RMS of forward, backward and central frame-difference errors.

    `predicted` and `reference` are (3, V, 3) triplets in (t-1, t, t+1) order,
    or (..., 3, V, 3) batches thereof.
    """
    p = _as_tensor(predicted, "predicted")
    r = _as_tensor(reference, "reference")
    if p.shape != r.shape or p.ndim < 3 or p.shape[-3] != 3:
        raise InvalidInputError(f"triplets must share a (..., 3, V, 3) shape, got {tuple(p.shape)} vs {tuple(r.shape)}")
    prev_p, cur_p, next_p = p.unbind(dim=-3)
    prev_r, cur_r, next_r = r.unbind(dim=-3)
    loss = weighted_rms(cur_p - prev_p, cur_r - prev_r, weights)
    loss = loss + weighted_rms(next_p - cur_p, next_r - cur_r, weights)
    loss = loss + weighted_rms(next_p - prev_p, next_r - prev_r, weights)
    return loss


def expression_loss(predicted, reference, weights, temporal_weight: float = TEMPORAL_WEIGHT):
    """Per-frame vertex RMS at the center frame plus the weighted temporal term."""
    p = _as_tensor(predicted, "predicted")
    r = _as_tensor(reference, "reference")
    if p.shape != r.shape or p.ndim < 3 or p.shape[-3] != 3:
        raise InvalidInputError(f"triplets must share a (..., 3, V, 3) shape, got {tuple(p.shape)} vs {tuple(r.shape)}")
    rms = weighted_rms(p.select(-3, 1), r.select(-3, 1), weights)
    return rms + temporal_weight * temporal_loss(p, r, weights)


class GradientFeatures:
    """Multi-scale image-gradient feature distance, the default perceptual term.

    Features are horizontal/vertical finite differences of average-pooled
    copies of the image at the given scales; the distance is the mean absolute
    feature difference, zero iff the inputs' gradients agree at every scale.
    """

    def __init__(self, scales=(1, 2, 4)):
        self.scales = tuple(scales)

    def __call__(self, image, reference):
        total = image.new_zeros(())
        for s in self.scales:
            a = torch.nn.functional.avg_pool2d(image, s) if s > 1 else image
            b = torch.nn.functional.avg_pool2d(reference, s) if s > 1 else reference
            dx = (a[..., :, 1:] - a[..., :, :-1]) - (b[..., :, 1:] - b[..., :, :-1])
            dy = (a[..., 1:, :] - a[..., :-1, :]) - (b[..., 1:, :] - b[..., :-1, :])
            total = total + dx.abs().mean() + dy.abs().mean()
        return total / len(self.scales)


def rendering_loss(final, intermediate, reference, interior_mask, perceptual=None):
    """l1(final, ref) + l1(intermediate, ref) restricted to the interior mask
    + perceptual(final, ref).

    Images are (3, H, W) or (B, 3, H, W) with values in [0, 1]; the mask is
    (H, W) (or batched) boolean. An empty mask zeroes the masked term with a
    warning. `perceptual=None` disables the feature term.
    """
    f = _as_tensor(final, "final")
    i = _as_tensor(intermediate, "intermediate")
    r = _as_tensor(reference, "reference")
    if f.shape != r.shape or i.shape != r.shape:
        raise InvalidInputError(
            f"image shapes differ: final {tuple(f.shape)}, intermediate {tuple(i.shape)}, "
            f"reference {tuple(r.shape)}"
        )
    if f.ndim not in (3, 4) or f.shape[-3] != 3:
        raise InvalidInputError(f"images must be (..., 3, H, W), got {tuple(f.shape)}")
    mask = torch.as_tensor(interior_mask).bool()
    if mask.shape[-2:] != f.shape[-2:]:
        raise InvalidInputError(
            f"mask shape {tuple(mask.shape)} does not match image {tuple(f.shape[-2:])}"
        )

    loss = (f - r).abs().mean()
    if mask.any():
        m = mask.broadcast_to(i.shape[:-3] + mask.shape[-2:]) if mask.ndim == 2 else mask
        diff = (i - r).abs().mean(dim=-3)  # mean over channels, (..., H, W)
        loss = loss + diff[m].mean()
    else:
        warnings.warn("rendering_loss: empty interior mask, masked term contributes 0")
    if perceptual is not None:
        loss = loss + perceptual(f, r)
    return loss
