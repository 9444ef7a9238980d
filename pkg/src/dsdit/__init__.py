"""Reference-guided super-resolution with a twin-branch diffusion transformer.

Everything runs on a small float64 autodiff engine (:mod:`dsdit.tensor`) in
pixel space, so the whole pipeline trains on a CPU.
"""

from .attention import BranchProjection, joint_attention, m3_attention, siamese_combine
from .flow import SamplerConfig, autoguide, euler_sample, interpolate, rf_loss
from .model import AdamW, Checkpoint, ModelConfig, build_model, load_checkpoint, save_checkpoint
from .tensor import SeededRng, Tape, Tensor, backward, grad_check

__version__ = "0.1.0"

__all__ = [
    "AdamW", "BranchProjection", "Checkpoint", "ModelConfig", "SamplerConfig", "SeededRng",
    "Tape", "Tensor", "autoguide", "backward", "build_model", "euler_sample", "grad_check",
    "interpolate", "joint_attention", "load_checkpoint", "m3_attention", "rf_loss",
    "save_checkpoint", "siamese_combine",
]
