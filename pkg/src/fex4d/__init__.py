"""Diffusion-based generation of 3D facial landmark sequences.

An unconditionally trained denoiser is steered at sampling time by a noisy
classifier, a text-alignment head, or known frames; a spiral-mesh
retargeter turns landmark motion into dense mesh animation.
"""

__version__ = "0.1.0"

from .data import CorpusStats, SequenceRecord, make_synthetic_corpus  # noqa: E402
from .denoiser import DenoiserConfig, SequenceDenoiser, TrainSettings, train_denoiser  # noqa: E402
from .sampler import FrameMask, GuidanceConfig, Models  # noqa: E402
from .schedule import NoiseSchedule, make_schedule, scaled_schedule  # noqa: E402

__all__ = [
    "CorpusStats", "SequenceRecord", "make_synthetic_corpus",
    "DenoiserConfig", "SequenceDenoiser", "TrainSettings", "train_denoiser",
    "FrameMask", "GuidanceConfig", "Models",
    "NoiseSchedule", "make_schedule", "scaled_schedule",
]
