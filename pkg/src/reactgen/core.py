"""Domain types and dimension conventions shared across the package.

A listener frame is 58 reals: 52 ARKit blendshape activations followed by
3 head rotation angles (radians) and 3 head translations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

EXPR_NAMES = (
    # left eye
    "eyeBlinkLeft", "eyeLookDownLeft", "eyeLookInLeft", "eyeLookOutLeft",
    "eyeLookUpLeft", "eyeSquintLeft", "eyeWideLeft",
    # right eye
    "eyeBlinkRight", "eyeLookDownRight", "eyeLookInRight", "eyeLookOutRight",
    "eyeLookUpRight", "eyeSquintRight", "eyeWideRight",
    # jaw
    "jawForward", "jawLeft", "jawRight", "jawOpen",
    # mouth
    "mouthClose", "mouthFunnel", "mouthPucker", "mouthLeft", "mouthRight",
    "mouthSmileLeft", "mouthSmileRight", "mouthFrownLeft", "mouthFrownRight",
    "mouthDimpleLeft", "mouthDimpleRight", "mouthStretchLeft", "mouthStretchRight",
    "mouthRollLower", "mouthRollUpper", "mouthShrugLower", "mouthShrugUpper",
    "mouthPressLeft", "mouthPressRight", "mouthLowerDownLeft", "mouthLowerDownRight",
    "mouthUpperUpLeft", "mouthUpperUpRight",
    # brows, cheeks, nose, tongue
    "browDownLeft", "browDownRight", "browInnerUp", "browOuterUpLeft", "browOuterUpRight",
    "cheekPuff", "cheekSquintLeft", "cheekSquintRight",
    "noseSneerLeft", "noseSneerRight", "tongueOut",
)
POSE_NAMES = ("angleX", "angleY", "angleZ", "transX", "transY", "transZ")
FRAME_NAMES = EXPR_NAMES + POSE_NAMES

N_EXPR = len(EXPR_NAMES)
N_POSE = len(POSE_NAMES)
FRAME_DIM = N_EXPR + N_POSE
DEFAULT_WINDOW = 16
DEFAULT_AUDIO_DIM = 16

_NAME_TO_INDEX = {name.lower(): i for i, name in enumerate(FRAME_NAMES)}

ANGLE_LIMIT = math.pi / 2
TRANS_LIMIT = 1.0

SOLVERS = ("ode_2m", "sde_2m", "euler_reference")


class DimensionError(ValueError):
    """Array shapes disagree with the configured dimensions."""


class ConfigError(ValueError):
    """Invalid configuration value."""


def frame_name(index: int) -> str:
    """Canonical blendshape or pose name of a frame coordinate."""
    if not 0 <= index < FRAME_DIM:
        raise IndexError(f"frame index {index} outside [0, {FRAME_DIM})")
    return FRAME_NAMES[index]


def frame_index(name: str) -> int:
    """Inverse of :func:`frame_name`. Matching is case-insensitive."""
    try:
        return _NAME_TO_INDEX[name.strip().lower()]
    except KeyError:
        raise KeyError(f"unknown blendshape name {name!r}") from None


def decode_frames(frames: np.ndarray) -> np.ndarray:
    """Clamp diffusion-space frames into the valid coefficient ranges."""
    out = np.array(frames, dtype=float, copy=True)
    out[..., :N_EXPR] = np.clip(out[..., :N_EXPR], 0.0, 1.0)
    out[..., N_EXPR:N_EXPR + 3] = np.clip(out[..., N_EXPR:N_EXPR + 3], -ANGLE_LIMIT, ANGLE_LIMIT)
    out[..., N_EXPR + 3:] = np.clip(out[..., N_EXPR + 3:], -TRANS_LIMIT, TRANS_LIMIT)
    return out


@dataclass(frozen=True)
class ReactionFrame:
    expr: np.ndarray
    pose: np.ndarray

    def __post_init__(self):
        expr = np.asarray(self.expr, dtype=float)
        pose = np.asarray(self.pose, dtype=float)
        if expr.shape != (N_EXPR,) or pose.shape != (N_POSE,):
            raise DimensionError(f"expected ({N_EXPR},) + ({N_POSE},), got {expr.shape} + {pose.shape}")
        object.__setattr__(self, "expr", expr)
        object.__setattr__(self, "pose", pose)

    @classmethod
    def from_vector(cls, vec) -> "ReactionFrame":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (FRAME_DIM,):
            raise DimensionError(f"frame must have length {FRAME_DIM}, got {vec.shape}")
        return cls(vec[:N_EXPR], vec[N_EXPR:])

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.expr, self.pose])


@dataclass(frozen=True)
class WindowTensor:
    data: np.ndarray
    start_index: int

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim != 2:
            raise DimensionError(f"window data must be 2-D, got shape {data.shape}")
        if self.start_index < 0:
            raise ValueError("start_index must be non-negative")
        object.__setattr__(self, "data", data)

    @property
    def w(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class SpeakerWindow:
    face: WindowTensor
    audio: WindowTensor

    @property
    def w(self) -> int:
        return self.face.w

    @property
    def start_index(self) -> int:
        return self.face.start_index


@dataclass(frozen=True)
class Session:
    """A speaker stream split into windows plus one or more GT listener sequences."""

    session_id: str
    speaker: tuple[SpeakerWindow, ...]
    listeners: tuple[np.ndarray, ...]

    def __post_init__(self):
        object.__setattr__(self, "speaker", tuple(self.speaker))
        object.__setattr__(self, "listeners", tuple(np.asarray(x, dtype=float) for x in self.listeners))

    @property
    def w(self) -> int:
        return self.speaker[0].w if self.speaker else DEFAULT_WINDOW

    @property
    def n_windows(self) -> int:
        return len(self.speaker)

    @property
    def speaker_face(self) -> np.ndarray:
        return np.concatenate([s.face.data for s in self.speaker], axis=0)

    @property
    def speaker_audio(self) -> np.ndarray:
        return np.concatenate([s.audio.data for s in self.speaker], axis=0)

    @classmethod
    def from_arrays(cls, session_id: str, speaker_face, speaker_audio, listeners, w: int = DEFAULT_WINDOW):
        """Tile contiguous speaker arrays into non-overlapping windows of ``w`` frames."""
        face = np.asarray(speaker_face, dtype=float)
        audio = np.asarray(speaker_audio, dtype=float)
        if face.shape[0] != audio.shape[0]:
            raise DimensionError("speaker face and audio lengths differ")
        if face.shape[0] % w:
            raise DimensionError(f"speaker length {face.shape[0]} is not a multiple of w={w}")
        windows = [
            SpeakerWindow(WindowTensor(face[k:k + w], k), WindowTensor(audio[k:k + w], k))
            for k in range(0, face.shape[0], w)
        ]
        return cls(session_id, tuple(windows), tuple(listeners))

    def __eq__(self, other):
        if not isinstance(other, Session):
            return NotImplemented
        return (
            self.session_id == other.session_id
            and self.w == other.w
            and len(self.speaker) == len(other.speaker)
            and len(self.listeners) == len(other.listeners)
            and np.array_equal(self.speaker_face, other.speaker_face)
            and np.array_equal(self.speaker_audio, other.speaker_audio)
            and all(np.array_equal(a, b) for a, b in zip(self.listeners, other.listeners))
        )

    __hash__ = None


@dataclass(frozen=True)
class GenerationConfig:
    T: int = 50
    solver: str = "sde_2m"
    eta: float = 1.0
    guidance_scale: float = 1.5
    m_samples: int = 1
    seed: int = 0
    constraint_gate_step: int = 5
    use_timestamp: bool = True
    use_history: bool = True

    def __post_init__(self):
        if self.T < 2:
            raise ConfigError(f"T must be >= 2 for the multistep solvers, got {self.T}")
        if self.solver not in SOLVERS:
            raise ConfigError(f"solver must be one of {SOLVERS}, got {self.solver!r}")
        if self.eta < 0:
            raise ConfigError("eta must be >= 0")
        if self.guidance_scale < 0:
            raise ConfigError("guidance_scale must be >= 0")
        if self.m_samples < 1:
            raise ConfigError("m_samples must be >= 1")

    def replace(self, **changes) -> "GenerationConfig":
        return replace(self, **changes)


@dataclass(frozen=True)
class Violation:
    field: str
    index: tuple
    rule: str

    def __str__(self):
        where = "".join(f"[{i}]" for i in self.index)
        return f"{self.field}{where}: {self.rule}"


def validate_session(session: Session, w: int | None = None, decoded: bool = True) -> list[Violation]:
    """Collect every broken session invariant; never raises.

    With ``decoded`` the listener coefficients are also range-checked, which is
    only meaningful for exported (clamped) data.
    """
    out: list[Violation] = []
    if not session.speaker:
        out.append(Violation("speaker", (), "no speaker windows"))
        return out
    w = session.w if w is None else w

    for k, win in enumerate(session.speaker):
        if win.face.w != w:
            out.append(Violation("speaker.face", (k,), f"window length {win.face.w} != w={w}"))
        if win.face.data.shape[1:] != (FRAME_DIM,):
            out.append(Violation("speaker.face", (k,), f"frame dim {win.face.data.shape[1:]} != {FRAME_DIM}"))
        if win.audio.data.shape[0] != win.face.w:
            out.append(Violation("speaker.audio", (k,), "audio and face window lengths differ"))
        if win.audio.start_index != win.face.start_index:
            out.append(Violation("speaker.audio", (k,), "audio and face start_index differ"))
        if win.face.start_index % w:
            out.append(Violation("speaker.face", (k,), f"start_index {win.face.start_index} not a multiple of w"))
        if win.face.start_index != k * w:
            out.append(Violation("speaker.face", (k,), "windows are not contiguous"))

    H = len(session.speaker) * w
    lengths = {x.shape[0] for x in session.listeners}
    if len(lengths) > 1:
        out.append(Violation("listeners", (), f"listener lengths differ: {sorted(lengths)}"))
    for m, seq in enumerate(session.listeners):
        if seq.ndim != 2 or seq.shape[1] != FRAME_DIM:
            out.append(Violation("listeners", (m,), f"shape {seq.shape} is not H x {FRAME_DIM}"))
            continue
        if seq.shape[0] % w:
            out.append(Violation("listeners", (m,), f"H not multiple of w ({seq.shape[0]} mod {w} != 0)"))
        elif seq.shape[0] != H:
            out.append(Violation("listeners", (m,), f"H={seq.shape[0]} != windows*w={H}"))
        if decoded:
            bad = np.argwhere((seq[:, :N_EXPR] < 0.0) | (seq[:, :N_EXPR] > 1.0))
            for f, c in bad:
                out.append(Violation("listeners", (m, int(f), int(c)), f"expr coefficient {seq[f, c]:.4g} outside [0, 1]"))
            angles = np.abs(seq[:, N_EXPR:N_EXPR + 3]) > ANGLE_LIMIT
            for f, c in np.argwhere(angles):
                out.append(Violation("listeners", (m, int(f), N_EXPR + int(c)), "rotation outside [-pi/2, pi/2]"))
            trans = np.abs(seq[:, N_EXPR + 3:]) > TRANS_LIMIT
            for f, c in np.argwhere(trans):
                out.append(Violation("listeners", (m, int(f), N_EXPR + 3 + int(c)), "translation outside [-1, 1]"))
    return out
