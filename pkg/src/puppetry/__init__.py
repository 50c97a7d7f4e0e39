"""Audio-driven facial reenactment at desk scale.

Pipeline: 50 Hz character logits -> per-frame 16x29 windows -> shared 32-dim
audio-expression codes (with content-aware temporal filtering) -> person-
specific 76-dim blendshape coefficients -> posed face mesh -> deferred neural
rendering with a learnable 256x256x16 texture and two dilated U-Nets.
"""

from .audio import LogitStream, load_logit_stream, save_logit_stream, window_for_frame
from .errors import (ConfigError, FormatError, InvalidInputError, PuppetryError,
                     TrainingDiverged)
from .expression_net import AudioExpressionNet, FilterNet, PerFrameNet
from .face import (FaceBasis, PersonMapping, fit_person_mapping,
                   map_audio_expression, reconstruct_vertices)
from .losses import expression_loss, rendering_loss, temporal_loss, weighted_rms
from .oracle import OracleSpec, generate_sequence
from .raster import CameraPose, UVMap, rasterize
from .renderer import DilatedUNet, NeuralTexture, erode_background, sample_texture
from .training import TrainingConfig, adapt_new_target, train_a2e, train_renderer

__all__ = [
    "AudioExpressionNet", "CameraPose", "ConfigError", "DilatedUNet", "FaceBasis",
    "FilterNet", "FormatError", "InvalidInputError", "LogitStream", "NeuralTexture",
    "OracleSpec", "PerFrameNet", "PersonMapping", "PuppetryError", "TrainingConfig",
    "TrainingDiverged", "UVMap", "adapt_new_target", "erode_background",
    "expression_loss", "fit_person_mapping", "generate_sequence", "load_logit_stream",
    "map_audio_expression", "rasterize", "reconstruct_vertices", "rendering_loss",
    "sample_texture", "save_logit_stream", "temporal_loss", "train_a2e",
    "train_renderer", "weighted_rms", "window_for_frame",
]

__version__ = "0.1.0"
