"""Synthetic dyadic corpus and session file IO.

The synthetic speaker is a handful of smooth regime-switching factors pushed
through signed loadings and a sigmoid onto blendshape groups. Left/right
blendshapes of a symmetric AU pair share one group; loadings of mutually
exclusive groups point apart and those of co-occurring groups point together,
so the AU-pair priors hold in the ground truth by construction.

Each listener replays the speaker through a personal style: per-group gains,
a reaction lag and an idle oscillation. On top of that every listener follows
the prosody channels (present only in the audio) and a shared conversational
rhythm made of slow cosines of the absolute frame index, plus an engagement
ramp. Rhythm, prosody and speaker factors are orthonormalized jointly so the
listener logits keep the loading geometry of the speaker.
"""

from __future__ import annotations

import csv
import functools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (
    DEFAULT_AUDIO_DIM,
    DEFAULT_WINDOW,
    FRAME_DIM,
    FRAME_NAMES,
    N_EXPR,
    Session,
    frame_index,
    validate_session,
)
from .losses import AUPairRegistry

MAX_LAG = 8
N_ENVELOPE = 4
N_PROSODY = 8


class SessionParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class SessionValidationError(ValueError):
    def __init__(self, session_id: str, violations):
        self.violations = list(violations)
        shown = "; ".join(str(v) for v in self.violations[:5])
        super().__init__(f"session {session_id!r} has {len(self.violations)} violation(s): {shown}")


# -- synthetic corpus -----------------------------------------------------------

@dataclass(frozen=True)
class GroupLayout:
    """Blendshape groups: each symmetric pair is one group, every other blendshape its own."""

    members: tuple[tuple[int, ...], ...]
    exclusive: tuple[tuple[int, int], ...]
    co_occurring: tuple[tuple[int, int], ...]

    @property
    def n_groups(self) -> int:
        return len(self.members)

    def group_of(self) -> np.ndarray:
        out = np.empty(N_EXPR, dtype=int)
        for g, mem in enumerate(self.members):
            out[list(mem)] = g
        return out

    def expand(self, grouped: np.ndarray) -> np.ndarray:
        """(..., n_groups) -> (..., 52) by copying each group value to its members."""
        return grouped[..., self.group_of()]


def group_layout(registry: AUPairRegistry | None = None) -> GroupLayout:
    registry = registry or AUPairRegistry.default()
    parent = list(range(N_EXPR))
    for a, b in registry.symmetric:
        parent[max(a, b)] = min(a, b)
    roots = sorted({parent[i] for i in range(N_EXPR)})
    groups = tuple(tuple(i for i in range(N_EXPR) if parent[i] == r) for r in roots)
    gid = {i: k for k, mem in enumerate(groups) for i in mem}

    def group_pairs(pairs):
        out = []
        for a, b in pairs:
            ga, gb = gid[a], gid[b]
            if ga != gb:
                key = (min(ga, gb), max(ga, gb))
                if key not in out:
                    out.append(key)
        return out

    exclusive = group_pairs(registry.mutually_exclusive)
    co = [p for p in group_pairs(registry.co_occurred) if p not in exclusive]
    return GroupLayout(groups, tuple(exclusive), tuple(co))


def regime_signals(rng: np.random.Generator, n_signals: int, n_frames: int, w: int,
                   freq_range=(1 / 48, 1 / 10)) -> np.ndarray:
    """Unit-scale smooth signals whose sinusoid mixture changes every 2-4 windows.

    Consecutive regimes are cross-faded over a few frames so the result stays smooth.
    """
    t = np.arange(n_frames, dtype=float)
    bounds = [0]
    while bounds[-1] < n_frames:
        bounds.append(bounds[-1] + w * int(rng.integers(2, 5)))
    fade = max(2, w // 4)
    out = np.zeros((n_frames, n_signals))
    weight_sum = np.zeros((n_frames, 1))
    for k in range(len(bounds) - 1):
        lo, hi = bounds[k], bounds[k + 1]
        n_sin = rng.integers(2, 5, size=n_signals)
        sig = np.zeros((n_frames, n_signals))
        for j in range(n_signals):
            freqs = rng.uniform(*freq_range, size=n_sin[j])
            phases = rng.uniform(0, 2 * np.pi, size=n_sin[j])
            amps = rng.uniform(0.5, 1.0, size=n_sin[j])
            amps = amps * np.sqrt(2.0 / np.sum(amps**2))
            sig[:, j] = np.sin(2 * np.pi * freqs[None, :] * t[:, None] + phases).dot(amps)
        ramp_in = np.clip((t - lo + fade / 2) / fade, 0, 1) if k else np.ones_like(t)
        ramp_out = np.clip((hi - t + fade / 2) / fade, 0, 1) if k < len(bounds) - 2 else np.ones_like(t)
        wgt = (ramp_in * ramp_out)[:, None]
        wgt = wgt * wgt * (3 - 2 * wgt)
        out += wgt * sig
        weight_sum += wgt
    return out / np.maximum(weight_sum, 1e-12)


def _envelope(x: np.ndarray, decay: float = 0.8) -> np.ndarray:
    """Causal one-pole low-pass filter along time."""
    out = np.empty_like(x)
    acc = x[0].copy()
    for i in range(x.shape[0]):
        acc = decay * acc + (1 - decay) * x[i]
        out[i] = acc
    return out


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# logit-space weights
W_FACTOR = 2.0
W_OWN = 0.35
N_FACTORS = 8
W_PROSODY = 1.0
W_RHYTHM = 1.0
RHYTHM_PERIODS = (24.0, 29.0, 35.0, 41.0, 48.0, 55.0, 64.0, 75.0)
ENGAGE_SCALE = 96.0
BACKCHANNEL_PERIOD = 48.0


@functools.lru_cache(maxsize=8)
def factor_loadings(layout: GroupLayout, n_factors: int = N_FACTORS, margin: float = 0.35) -> np.ndarray:
    """Unit loading vectors per group: obtuse for exclusive pairs, acute for co-occurring ones.

    Found by projected hinge-loss descent from a fixed seed, so the result is deterministic.
    """
    exc = np.array(layout.exclusive, dtype=int).reshape(-1, 2)
    co = np.array(layout.co_occurring, dtype=int).reshape(-1, 2)
    L = np.random.default_rng(0).standard_normal((layout.n_groups, n_factors))
    L /= np.linalg.norm(L, axis=1, keepdims=True)
    for _ in range(3000):
        g = np.zeros_like(L)
        on = (L[exc[:, 0]] * L[exc[:, 1]]).sum(axis=1) > -margin
        np.add.at(g, exc[on, 0], L[exc[on, 1]])
        np.add.at(g, exc[on, 1], L[exc[on, 0]])
        on = (L[co[:, 0]] * L[co[:, 1]]).sum(axis=1) < margin
        np.add.at(g, co[on, 0], -L[co[on, 1]])
        np.add.at(g, co[on, 1], -L[co[on, 0]])
        L -= 0.05 * g
        L /= np.linalg.norm(L, axis=1, keepdims=True)
    return L


def rhythm_signals(n_frames: int, offset: int = 0) -> np.ndarray:
    """Session-independent sinusoids of the absolute frame index ``t - offset``."""
    t = np.arange(n_frames, dtype=float)[:, None] - offset
    return np.cos(2 * np.pi * t / np.array(RHYTHM_PERIODS) + np.arange(len(RHYTHM_PERIODS)))


def orthonormal_block(raw: np.ndarray) -> np.ndarray:
    """Columns made exactly uncorrelated with unit variance (Gram-Schmidt in column order).

    With fewer frames than columns only standardization is possible.
    """
    n, k = raw.shape
    centered = raw - raw.mean(axis=0)
    if n <= k:
        return centered / np.maximum(centered.std(axis=0), 1e-12)
    q, _ = np.linalg.qr(centered)
    return q * np.sqrt(n)


def orthonormal_factors(rng, n_factors: int, n_frames: int, w: int) -> np.ndarray:
    """Regime-switching signals made exactly uncorrelated over the timeline, unit variance."""
    return orthonormal_block(regime_signals(rng, n_factors, n_frames, w))


def synth_session(rng: np.random.Generator, session_id: str, n_listeners: int, w: int, n_windows: int,
                  layout: GroupLayout, audio_dim: int = DEFAULT_AUDIO_DIM) -> Session:
    H = w * n_windows
    n_ext = H + MAX_LAG
    G = layout.n_groups

    # speaker logits on an extended timeline so listeners can look MAX_LAG frames back
    loadings = factor_loadings(layout)
    # rhythm, prosody and face factors are orthogonalized jointly so that adding
    # them in the listener keeps the sign of every pair correlation
    K = loadings.shape[1]
    raw = np.concatenate([rhythm_signals(n_ext, MAX_LAG), regime_signals(rng, N_PROSODY, n_ext, w),
                          regime_signals(rng, K, n_ext, w)], axis=1)
    block = orthonormal_block(raw)
    rhythm = block[MAX_LAG:, :K]
    prosody = block[:, K:K + N_PROSODY]
    factors = block[:, K + N_PROSODY:]
    own = regime_signals(rng, G, n_ext, w)
    bias = rng.uniform(-2.0, -0.5, size=G)
    logits = bias + W_FACTOR * factors @ loadings.T + W_OWN * own
    pose_lat = regime_signals(rng, 6, n_ext, w)
    pose = np.concatenate([0.15 * pose_lat[:, :3], 0.1 * pose_lat[:, 3:]], axis=1)
    speaker_ext = np.concatenate([layout.expand(_sigmoid(logits)), pose], axis=1)

    # audio: low-passed face activity, prosody channels the listener reacts to, noise
    face_energy = np.abs(np.diff(speaker_ext[:, :N_EXPR], axis=0, prepend=speaker_ext[:1, :N_EXPR]))
    regions = np.array_split(np.arange(N_EXPR), N_ENVELOPE)
    env = _envelope(np.stack([face_energy[:, r].mean(axis=1) for r in regions], axis=1))
    env = (env - env.mean(axis=0)) / (env.std(axis=0) + 1e-9)
    n_noise = max(audio_dim - N_ENVELOPE - N_PROSODY, 0)
    audio_ext = np.concatenate([env, prosody, 0.5 * rng.standard_normal((n_ext, n_noise))], axis=1)[:, :audio_dim]

    speaker = speaker_ext[MAX_LAG:]
    audio = audio_ext[MAX_LAG:]
    frames = np.arange(H, dtype=float)
    smile_groups = _groups_named(layout, ("mouthSmileLeft", "cheekSquintLeft"))
    engage_groups = _groups_named(layout, ("mouthSmileLeft", "cheekSquintLeft", "browInnerUp"))

    listeners = []
    for _ in range(n_listeners):
        lag = int(rng.integers(2, MAX_LAG + 1))
        src = slice(MAX_LAG - lag, MAX_LAG - lag + H)
        gain = rng.uniform(0.3, 1.2, size=G)
        l_bias = bias + rng.normal(0.0, 0.3, size=G)
        idle = 0.3 * regime_signals(rng, G, H, w, freq_range=(1 / 64, 1 / 24))
        lg = l_bias + gain * (logits[src] - bias) + idle
        # prosody and rhythm enter through the same loadings, so pair structure is kept
        lg += (W_PROSODY * prosody[src, :N_FACTORS] + W_RHYTHM * rhythm) @ loadings.T
        engagement = rng.uniform(0.8, 1.6) * (1.0 - np.exp(-frames / ENGAGE_SCALE))
        lg[:, engage_groups] += engagement[:, None]
        expr = layout.expand(_sigmoid(lg))

        pose_gain = rng.uniform(0.3, 1.2, size=6)
        l_pose = pose_gain * pose[src]
        l_pose[:, 0] += 0.15 * prosody[src, 1]
        l_pose[:, 0] += 0.1 * rng.uniform(0.5, 1.0) * np.cos(2 * np.pi * frames / BACKCHANNEL_PERIOD)
        l_pose += 0.02 * regime_signals(rng, 6, H, w)
        l_pose[:, :3] = np.clip(l_pose[:, :3], -np.pi / 2, np.pi / 2)
        l_pose[:, 3:] = np.clip(l_pose[:, 3:], -1.0, 1.0)
        listeners.append(np.concatenate([expr, l_pose], axis=1))

    return Session.from_arrays(session_id, speaker, audio, listeners, w=w)


def _groups_named(layout: GroupLayout, names) -> list[int]:
    gof = layout.group_of()
    return sorted({int(gof[frame_index(n)]) for n in names})


def synth_corpus(n_sessions: int, n_listeners_per_session: int = 3, w: int = DEFAULT_WINDOW,
                 windows_per_session: int = 8, seed: int = 0, audio_dim: int = DEFAULT_AUDIO_DIM,
                 registry: AUPairRegistry | None = None) -> list[Session]:
    """Seed-deterministic list of synthetic sessions."""
    if n_listeners_per_session < 2:
        raise ValueError("need at least two listeners per session")
    layout = group_layout(registry)
    rng = np.random.default_rng(seed)
    return [
        synth_session(rng, f"synth-{seed}-{k:04d}", n_listeners_per_session, w, windows_per_session, layout, audio_dim)
        for k in range(n_sessions)
    ]


def listener_lag(session: Session, listener: int, max_lag: int = 48) -> int:
    """Frames by which a listener trails the speaker, via the synchrony metric."""
    from .metrics import fr_syn

    return fr_syn(session.speaker_face, session.listeners[listener], max_lag)


# -- JSONL sessions -----------------------------------------------------------

def session_to_record(session: Session) -> dict:
    return {
        "session_id": session.session_id,
        "w": session.w,
        "speaker_face": session.speaker_face.tolist(),
        "speaker_audio": session.speaker_audio.tolist(),
        "listeners": [x.tolist() for x in session.listeners],
    }


def session_from_record(rec: dict, line: int = 0) -> Session:
    for key in ("session_id", "w", "speaker_face", "speaker_audio", "listeners"):
        if key not in rec:
            raise SessionParseError(line, f"missing field {key!r}")
    try:
        face = np.asarray(rec["speaker_face"], dtype=float)
        audio = np.asarray(rec["speaker_audio"], dtype=float)
        listeners = [np.asarray(x, dtype=float) for x in rec["listeners"]]
    except (TypeError, ValueError) as exc:
        raise SessionParseError(line, f"non-numeric or ragged array: {exc}") from None
    if face.ndim != 2 or face.shape[1] != FRAME_DIM:
        raise SessionParseError(line, f"speaker_face must be H x {FRAME_DIM}, got {face.shape}")
    if audio.ndim != 2 or audio.shape[0] != face.shape[0]:
        raise SessionParseError(line, f"speaker_audio must be H x A with H={face.shape[0]}, got {audio.shape}")
    w = int(rec["w"])
    if w <= 0 or face.shape[0] % w:
        raise SessionParseError(line, f"speaker length {face.shape[0]} is not a positive multiple of w={w}")
    return Session.from_arrays(str(rec["session_id"]), face, audio, listeners, w=w)


def save_sessions(sessions, path) -> None:
    with open(path, "w") as fh:
        for s in sessions:
            fh.write(json.dumps(session_to_record(s)) + "\n")


def load_sessions(path, validate: bool = True) -> list[Session]:
    out = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise SessionParseError(lineno, f"invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise SessionParseError(lineno, "expected a JSON object")
            session = session_from_record(rec, lineno)
            if validate:
                bad = validate_session(session)
                if bad:
                    raise SessionValidationError(session.session_id, bad)
            out.append(session)
    return out


# -- CSV listener sequences -----------------------------------------------------

def save_listener_csv(seq, path) -> None:
    seq = np.asarray(seq, dtype=float)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(("frame_index",) + FRAME_NAMES)
        for i, row in enumerate(seq):
            wr.writerow([i] + [repr(float(v)) for v in row])


def load_listener_csv(path) -> np.ndarray:
    """Read one listener sequence; columns may come in any order and any name case."""
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        try:
            header = next(rd)
        except StopIteration:
            raise SessionParseError(1, "empty CSV file") from None
        cols = {}
        frame_col = None
        for j, name in enumerate(header):
            if name.strip().lower() == "frame_index":
                frame_col = j
                continue
            try:
                cols[frame_index(name)] = j
            except KeyError:
                raise SessionParseError(1, f"unknown column {name!r}") from None
        missing = [FRAME_NAMES[i] for i in range(FRAME_DIM) if i not in cols]
        if missing:
            raise SessionParseError(1, f"missing columns: {', '.join(missing[:5])}")
        rows = []
        order = []
        for lineno, row in enumerate(rd, start=2):
            if not row:
                continue
            try:
                rows.append([float(row[cols[i]]) for i in range(FRAME_DIM)])
                order.append(int(row[frame_col]) if frame_col is not None else lineno - 2)
            except (ValueError, IndexError):
                raise SessionParseError(lineno, "malformed row") from None
    arr = np.array(rows, dtype=float).reshape(-1, FRAME_DIM)
    return arr[np.argsort(order, kind="stable")]
