"""Audio-to-expression networks.

A small per-frame convolutional regressor maps each 16x29 logit window to a
32-dim audio-expression code bounded by TanH, and a content-aware temporal
filter turns 8 consecutive per-frame codes into softmax weights for a convex
blend, yielding the smoothed code for the center frame.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .audio import LOGIT_WIDTH, WINDOW_LENGTH
from .errors import InvalidInputError
from .face import CODE_DIM

LEAKY_SLOPE = 0.02
FILTER_WINDOW = 8   # per-frame codes consumed by the temporal filter
FILTER_BACK = 4     # window covers frames t-4 .. t+3

# published feature-map chain of the per-frame net as (time, channels)
PER_FRAME_SHAPE_CHAIN = ((16, 29), (8, 32), (4, 32), (2, 64), (1, 64))


def xavier_init_(module: nn.Module) -> nn.Module:
    """Xavier-uniform weights, zero biases, on every conv/linear submodule."""
    for m in module.modules():
        if isinstance(m, (nn.Conv1d, nn.Conv2d, nn.Linear)):
            nn.init.xavier_uniform_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
    return module


class PerFrameNet(nn.Module):
    """16x29 logit window -> 32-dim code in (-1, 1).

    Four (3,1)-kernel, (2,1)-stride convolutions filter along time, reducing
    (16x29) -> (8x32) -> (4x32) -> (2x64) -> (1x64); three fully connected
    layers map 64 -> 128 -> 64 -> 32 with a final TanH.
    """

    def __init__(self):
        super().__init__()
        self.convs = nn.ModuleList([
            nn.Conv2d(LOGIT_WIDTH, 32, kernel_size=(3, 1), stride=(2, 1), padding=(1, 0)),
            nn.Conv2d(32, 32, kernel_size=(3, 1), stride=(2, 1), padding=(1, 0)),
            nn.Conv2d(32, 64, kernel_size=(3, 1), stride=(2, 1), padding=(1, 0)),
            nn.Conv2d(64, 64, kernel_size=(3, 1), stride=(2, 1), padding=(1, 0)),
        ])
        self.fcs = nn.ModuleList([
            nn.Linear(64, 128),
            nn.Linear(128, 64),
            nn.Linear(64, CODE_DIM),
        ])
        self.act = nn.LeakyReLU(LEAKY_SLOPE)
        xavier_init_(self)

    def forward(self, windows, return_intermediates=False):
        x = torch.as_tensor(windows)
        if x.ndim == 2:
            x = x.unsqueeze(0)
        if x.ndim != 3 or x.shape[-2:] != (WINDOW_LENGTH, LOGIT_WIDTH):
            raise InvalidInputError(
                f"windows must be (B, {WINDOW_LENGTH}, {LOGIT_WIDTH}), got {tuple(x.shape)}"
            )
        # logits become channels; time is the filtered spatial axis
        x = x.permute(0, 2, 1).unsqueeze(-1)
        intermediates = [(x.shape[2], x.shape[1])]
        for conv in self.convs:
            x = self.act(conv(x))
            intermediates.append((x.shape[2], x.shape[1]))
        x = x.flatten(1)
        x = self.act(self.fcs[0](x))
        x = self.act(self.fcs[1](x))
        code = torch.tanh(self.fcs[2](x))
        if return_intermediates:
            return code, tuple(intermediates)
        return code


class FilterNet(nn.Module):
    """8 consecutive codes -> 8 nonnegative blend weights summing to 1.

    Five kernel-3 1D convolutions reduce the code dimension 32 -> 16 -> 8 ->
    4 -> 2 -> 1 over the length-8 time axis, then an affine 8 -> 8 head with
    softmax produces the weights.
    """

    def __init__(self):
        super().__init__()
        self.convs = nn.ModuleList([
            nn.Conv1d(CODE_DIM, 16, kernel_size=3, padding=1),
            nn.Conv1d(16, 8, kernel_size=3, padding=1),
            nn.Conv1d(8, 4, kernel_size=3, padding=1),
            nn.Conv1d(4, 2, kernel_size=3, padding=1),
            nn.Conv1d(2, 1, kernel_size=3, padding=1),
        ])
        self.head = nn.Linear(FILTER_WINDOW, FILTER_WINDOW)
        self.act = nn.LeakyReLU(LEAKY_SLOPE)
        xavier_init_(self)

    def forward(self, codes):
        x = torch.as_tensor(codes)
        if x.ndim == 2:
            x = x.unsqueeze(0)
        if x.ndim != 3 or x.shape[-2:] != (FILTER_WINDOW, CODE_DIM):
            raise InvalidInputError(
                f"codes must be (B, {FILTER_WINDOW}, {CODE_DIM}), got {tuple(x.shape)}"
            )
        x = x.transpose(1, 2)  # (B, 32, 8)
        for conv in self.convs:
            x = self.act(conv(x))
        return torch.softmax(self.head(x.flatten(1)), dim=1)


class AudioExpressionNet(nn.Module):
    """Per-frame regressor plus temporal filter, trained jointly."""

    def __init__(self):
        super().__init__()
        self.per_frame = PerFrameNet()
        self.filter = FilterNet()

    def per_frame_codes(self, windows):
        return self.per_frame(windows)

    def filter_weights(self, codes):
        return self.filter(codes)

    def blend(self, codes, weights):
        """Convex combination of 8 codes, (B, 8, 32) x (B, 8) -> (B, 32)."""
        return (codes * weights.unsqueeze(-1)).sum(dim=1)

    def filtered_prediction(self, windows):
        """(B, 8, 16, 29) windows for frames t-4..t+3 -> smoothed code at t."""
        x = torch.as_tensor(windows)
        if x.ndim == 3:
            x = x.unsqueeze(0)
        if x.ndim != 4 or x.shape[1] != FILTER_WINDOW:
            raise InvalidInputError(
                f"expected (B, {FILTER_WINDOW}, {WINDOW_LENGTH}, {LOGIT_WIDTH}) windows, "
                f"got {tuple(x.shape)}"
            )
        b = x.shape[0]
        codes = self.per_frame(x.reshape(b * FILTER_WINDOW, WINDOW_LENGTH, LOGIT_WIDTH))
        codes = codes.reshape(b, FILTER_WINDOW, CODE_DIM)
        weights = self.filter(codes)
        return self.blend(codes, weights)


def filter_window_indices(t: int, frame_count: int) -> np.ndarray:
    """Frame indices t-4..t+3 feeding the filter, edge-replicated at sequence ends."""
    return np.clip(np.arange(t - FILTER_BACK, t - FILTER_BACK + FILTER_WINDOW), 0, frame_count - 1)


def filtered_sequence_codes(net: AudioExpressionNet, per_frame_codes: torch.Tensor) -> torch.Tensor:
    """Smoothed codes for a whole sequence from its per-frame codes (F, 32)."""
    f = per_frame_codes.shape[0]
    idx = np.stack([filter_window_indices(t, f) for t in range(f)])
    windows = per_frame_codes[torch.as_tensor(idx, dtype=torch.long)]  # (F, 8, 32)
    weights = net.filter(windows)
    return net.blend(windows, weights)
