"""Windowed diffusion generation of listener facial reactions."""

from .core import (
    FRAME_DIM,
    FRAME_NAMES,
    GenerationConfig,
    ReactionFrame,
    Session,
    SpeakerWindow,
    WindowTensor,
    frame_index,
    frame_name,
    validate_session,
)
from .generator import Normalizer, TrainConfig, generate_session, train
from .losses import AUPairRegistry
from .schedule import NoiseSchedule, build_cosine_schedule
from .score_net import ConditionBundle, NetConfig, ScoreNet

__version__ = "0.1.0"

__all__ = [
    "AUPairRegistry",
    "ConditionBundle",
    "FRAME_DIM",
    "FRAME_NAMES",
    "GenerationConfig",
    "NetConfig",
    "NoiseSchedule",
    "Normalizer",
    "ReactionFrame",
    "ScoreNet",
    "Session",
    "SpeakerWindow",
    "TrainConfig",
    "WindowTensor",
    "build_cosine_schedule",
    "frame_index",
    "frame_name",
    "generate_session",
    "train",
    "validate_session",
]
