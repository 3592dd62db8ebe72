"""Online windowed generation of listener reactions and the training loop.

Generation walks the speaker windows in order. Window k is denoised from a
fresh Gaussian draw, conditioned on the speaker window, the global timestamp
``h = (k + 1) w`` and the last frame the same sample produced for window k-1.
Training uses ground-truth previous windows instead (teacher forcing).

The network works in a standardized coordinate system: every listener and
speaker channel is shifted and scaled by corpus statistics kept in a
:class:`Normalizer` stored alongside the model weights.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .core import FRAME_DIM, ConfigError, GenerationConfig, Session, SpeakerWindow, decode_frames
from .losses import DEFAULT_GATE, DEFAULT_LAMBDA_FAC, AUPairRegistry, LossBreakdown, loss_dm, loss_fac, loss_fbk, total_loss
from .schedule import NoiseSchedule, build_cosine_schedule
from .score_net import AdamWConfig, ConditionBundle, ScoreNet, adamw_step
from .solvers import SolverTrajectory, guided_data_model, initial_state, solve_euler_reference, solve_ode_2m, solve_sde_2m

log = logging.getLogger(__name__)


# -- normalization ------------------------------------------------------------

@dataclass(frozen=True)
class Normalizer:
    """Per-channel affine standardization for listener frames, speaker face and audio."""

    listener_mean: np.ndarray
    listener_std: np.ndarray
    face_mean: np.ndarray
    face_std: np.ndarray
    audio_mean: np.ndarray
    audio_std: np.ndarray

    @classmethod
    def identity(cls, audio_dim: int) -> "Normalizer":
        z, o = np.zeros(FRAME_DIM), np.ones(FRAME_DIM)
        return cls(z, o, z, o, np.zeros(audio_dim), np.ones(audio_dim))

    @classmethod
    def fit(cls, corpus, min_std: float = 1e-3) -> "Normalizer":
        lis = np.concatenate([x for s in corpus for x in s.listeners])
        face = np.concatenate([s.speaker_face for s in corpus])
        audio = np.concatenate([s.speaker_audio for s in corpus])

        def stats(a):
            return a.mean(axis=0), np.maximum(a.std(axis=0), min_std)

        return cls(*stats(lis), *stats(face), *stats(audio))

    def encode(self, frames):
        return (np.asarray(frames, dtype=float) - self.listener_mean) / self.listener_std

    def decode(self, z):
        return np.asarray(z, dtype=float) * self.listener_std + self.listener_mean

    def face(self, f):
        return (np.asarray(f, dtype=float) - self.face_mean) / self.face_std

    def audio(self, a):
        return (np.asarray(a, dtype=float) - self.audio_mean) / self.audio_std

    def to_dict(self) -> dict:
        return {k: np.asarray(v).tolist() for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(**{k: np.asarray(v, dtype=float) for k, v in d.items()})


def model_normalizer(net: ScoreNet) -> Normalizer:
    extra = getattr(net, "extra", None) or {}
    if "normalizer" in extra:
        return Normalizer.from_dict(extra["normalizer"])
    return Normalizer.identity(net.config.audio_dim)


def with_flags(net: ScoreNet, **flags) -> ScoreNet:
    """A view of ``net`` sharing its parameters with some conditioning switched off."""
    view = ScoreNet.__new__(ScoreNet)
    view.__dict__.update(net.__dict__)
    view.config = replace(net.config, **flags)
    return view


# -- generation ---------------------------------------------------------------

class _StackedRng:
    """Draws sample m of a batch from its own generator so samples do not share noise."""

    def __init__(self, rngs):
        self.rngs = rngs

    def standard_normal(self, shape):
        return np.stack([r.standard_normal(tuple(shape[1:])) for r in self.rngs])


def sample_streams(seed: int, m_samples: int) -> list[np.random.Generator]:
    """One generator per sample, seeded with ``seed XOR m``."""
    return [np.random.default_rng(int(seed) ^ m) for m in range(m_samples)]


def run_solver(x_T, schedule: NoiseSchedule, model, config: GenerationConfig, rng,
               keep_trajectory: bool = False):
    if config.solver == "ode_2m":
        traj = solve_ode_2m(x_T, schedule, model)
    elif config.solver == "sde_2m":
        traj = solve_sde_2m(x_T, schedule, model, eta=config.eta, rng=rng)
    else:
        final = solve_euler_reference(x_T, schedule, model, substeps=schedule.T, mode="ode")
        traj = SolverTrajectory(states=[np.asarray(x_T), final])
    return traj if keep_trajectory else traj.final


def _speaker_windows(speaker) -> list[SpeakerWindow]:
    if isinstance(speaker, Session):
        return list(speaker.speaker)
    return list(speaker)


def generate_session(speaker, net: ScoreNet, config: GenerationConfig | None = None,
                     normalizer: Normalizer | None = None, return_trajectories: bool = False):
    """Generate ``config.m_samples`` listener sequences for a speaker stream.

    Parameters
    ----------
    speaker : Session or sequence of SpeakerWindow
        Contiguous speaker windows.
    net : ScoreNet
        Trained or freshly initialized score network.
    config : GenerationConfig
        Solver, step count, guidance and seeding.
    normalizer : Normalizer, optional
        Defaults to the statistics stored with ``net``.
    return_trajectories : bool
        Also return, per window, the solver trajectory of the whole sample batch.

    Returns
    -------
    list of (H, 58) arrays, one per sample; with ``return_trajectories`` a
    ``(sequences, trajectories)`` tuple.
    """
    config = config or GenerationConfig()
    windows = _speaker_windows(speaker)
    if not windows:
        raise ValueError("speaker stream has no windows")
    norm = normalizer or model_normalizer(net)
    flags = {}
    if not config.use_timestamp:
        flags["use_timestamp"] = False
    if not config.use_history:
        flags["use_history"] = False
    model_net = with_flags(net, **flags) if flags else net

    schedule = build_cosine_schedule(config.T)
    M = config.m_samples
    rngs = sample_streams(config.seed, M)
    stacked = _StackedRng(rngs)
    w = windows[0].w
    past = np.zeros((M, FRAME_DIM))
    pieces, trajectories = [], []
    for k, win in enumerate(windows):
        cond = ConditionBundle(
            speaker_face=norm.face(win.face.data),
            speaker_audio=norm.audio(win.audio.data),
            alpha=1.0,
            sigma=1.0,
            timestamp=(k + 1) * w,
            past_frame=past if k else np.zeros((M, FRAME_DIM)),
        )
        model = guided_data_model(model_net, cond, config.guidance_scale)
        x_T = np.stack([initial_state(r, (w, FRAME_DIM), schedule) for r in rngs])
        out = run_solver(x_T, schedule, model, config, stacked, keep_trajectory=return_trajectories)
        if return_trajectories:
            trajectories.append(out)
            out = out.final
        frames = decode_frames(norm.decode(out))
        pieces.append(frames)
        past = norm.encode(frames[:, -1, :])
    seqs = list(np.concatenate(pieces, axis=1))
    return (seqs, trajectories) if return_trajectories else seqs


# -- training -----------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    """Training knobs; defaults are desk scale, :meth:`full_scale` gives the full-size run."""

    iterations: int = 2000
    batch_size: int = 32
    lr: float = 3e-3
    lambda_fac: float = DEFAULT_LAMBDA_FAC
    gate: int = DEFAULT_GATE
    use_fbk: bool = True
    use_fac: bool = True
    cond_dropout: float = 0.1
    lr_schedule: str = "cosine"
    seed: int = 0
    beta1: float = AdamWConfig.beta1
    beta2: float = AdamWConfig.beta2
    weight_decay: float = AdamWConfig.weight_decay

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size < 1:
            raise ConfigError("iterations must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.cond_dropout <= 1.0:
            raise ConfigError("cond_dropout must lie in [0, 1]")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError("lr_schedule must be 'constant' or 'cosine'")

    def lr_at(self, iteration: int) -> float:
        if self.lr_schedule == "constant" or self.iterations <= 1:
            return self.lr
        return 0.5 * self.lr * (1.0 + np.cos(np.pi * iteration / self.iterations))

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        return cls(**{"iterations": 30000, "batch_size": 100, "lr": 1e-4, **overrides})


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)

    def append(self, iteration: int, parts: LossBreakdown, seconds: float):
        self.rows.append({"iteration": iteration, **parts.as_dict(), "seconds": seconds})

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    def to_csv(self) -> str:
        keys = ("iteration", "dm", "fbk", "fac", "total", "lambda_fac", "seconds")
        lines = [",".join(keys)]
        lines += [",".join(repr(r[k]) if isinstance(r[k], float) else str(r[k]) for k in keys) for r in self.rows]
        return "\n".join(lines) + "\n"


class TrainingDiverged(FloatingPointError):
    def __init__(self, iteration: int, cause: FloatingPointError):
        super().__init__(f"iteration {iteration}: {cause}")
        self.iteration = iteration


@dataclass(frozen=True)
class _WindowBank:
    """All (listener, window) training examples in standardized coordinates."""

    x0: np.ndarray        # (N, w, 58)
    prev: np.ndarray      # (N, w, 58), zeros where there is no previous window
    has_prev: np.ndarray  # (N,) bool
    past: np.ndarray      # (N, 58) last frame of the previous window, zeros for k = 0
    face: np.ndarray
    audio: np.ndarray
    timestamp: np.ndarray

    @classmethod
    def build(cls, corpus, norm: Normalizer) -> "_WindowBank":
        cols = {k: [] for k in ("x0", "prev", "has_prev", "past", "face", "audio", "timestamp")}
        for s in corpus:
            w = s.w
            face = norm.face(s.speaker_face)
            audio = norm.audio(s.speaker_audio)
            for lis in s.listeners:
                z = norm.encode(lis)
                for k in range(s.n_windows):
                    cur = slice(k * w, (k + 1) * w)
                    cols["x0"].append(z[cur])
                    cols["prev"].append(z[cur.start - w:cur.start] if k else np.zeros((w, FRAME_DIM)))
                    cols["has_prev"].append(k > 0)
                    cols["past"].append(z[cur.start - 1] if k else np.zeros(FRAME_DIM))
                    cols["face"].append(face[cur])
                    cols["audio"].append(audio[cur])
                    cols["timestamp"].append((k + 1) * w)
        return cls(**{k: np.asarray(v) for k, v in cols.items()})

    def __len__(self):
        return self.x0.shape[0]


def train(corpus, net: ScoreNet, schedule: NoiseSchedule | None = None, registry: AUPairRegistry | None = None,
          hyper: TrainConfig | None = None, callback=None) -> TrainingLog:
    """Fit ``net`` on a corpus of sessions in place and return the per-iteration loss log.

    Each iteration draws a batch of windows, a noise level per window from the
    log-normal proposal, and a joint condition-dropout flag.

    The score-matching term compares scores scaled by sigma/alpha, which turns
    it into a unit-variance regression at every noise level. The kinematics
    and AU-pair terms compare the clean-window estimates implied by predicted
    and exact scores, so they act on motion rather than on the white noise
    that dominates raw score differences at low noise. Windows whose noise level is at or
    below ``hyper.gate`` and that have a previous window are also run through
    the network at the previous window to form the kinematics term.

    Raises
    ------
    TrainingDiverged
        When a loss component becomes non-finite.
    """
    hyper = hyper or TrainConfig()
    if not corpus:
        raise ValueError("empty corpus")
    schedule = schedule or build_cosine_schedule(net.config.train_steps)
    registry = registry or AUPairRegistry.default()
    norm = Normalizer.fit(corpus)
    net.extra = {**(getattr(net, "extra", None) or {}), "normalizer": norm.to_dict()}
    bank = _WindowBank.build(corpus, norm)
    rng = np.random.default_rng(hyper.seed)
    lam_fac = hyper.lambda_fac if hyper.use_fac else 0.0
    history = TrainingLog()
    B = min(hyper.batch_size, len(bank))

    for it in range(hyper.iterations):
        t0 = time.perf_counter()
        idx = rng.choice(len(bank), size=B, replace=False)
        t_idx, _ = schedule.sample_training_noise_level(rng, size=B)
        dropped = (rng.random(B) < hyper.cond_dropout).astype(float)
        eps = rng.standard_normal(bank.x0[idx].shape)

        # windows that also need a prediction for their previous window
        fb = np.flatnonzero(bank.has_prev[idx] & (t_idx <= hyper.gate)) if hyper.use_fbk else np.array([], int)
        eps_prev = rng.standard_normal((fb.size,) + bank.x0.shape[1:])
        prev_idx = idx[fb] - 1  # the bank stores windows of one listener consecutively

        all_idx = np.concatenate([idx, prev_idx])
        all_t = np.concatenate([t_idx, t_idx[fb]])
        all_eps = np.concatenate([eps, eps_prev])
        a = schedule.alpha[all_t][:, None, None]
        s = schedule.sigma[all_t]
        x_t = a * bank.x0[all_idx] + s[:, None, None] * all_eps
        cond = ConditionBundle(
            speaker_face=bank.face[all_idx],
            speaker_audio=bank.audio[all_idx],
            alpha=schedule.alpha[all_t],
            sigma=s,
            timestamp=bank.timestamp[all_idx],
            past_frame=bank.past[all_idx],
            cond_dropped=np.concatenate([dropped, dropped[fb]]),
            step_index=all_t,
        )
        net.zero_grad()
        score = net.apply(x_t, cond)
        s1 = s[:, None, None]
        target = -all_eps / s1  # exact score of the perturbation kernel
        # denoising term on (sigma/alpha)-scaled scores: unit-variance target at every level
        r = s1 / a
        dm = loss_dm(score[:B] * r[:B], target[:B] * r[:B])
        # constraint terms on the data predictions implied by the scores; the
        # exact target score maps back to the clean window itself
        x0_pred = (x_t + score * (s1 * s1)) * (1.0 / a)
        x0_true = bank.x0[all_idx]
        if fb.size:
            fbk = loss_fbk(x0_pred[:B][fb], x0_true[:B][fb], x0_pred[B:], x0_true[B:], t_idx[fb], hyper.gate)
            fbk = fbk * (fb.size / B)  # average over the whole batch
        else:
            fbk = ad.Tensor(0.0)
        fac = loss_fac(x0_pred[:B], x0_true[:B], registry)
        try:
            breakdown = total_loss(float(dm.data), float(fbk.data), float(fac.data), lam_fac)
        except FloatingPointError as exc:
            raise TrainingDiverged(it, exc) from None
        loss = dm + fbk
        if lam_fac:
            loss = loss + fac * lam_fac
        loss.backward()
        net.opt_state = adamw_step(net.params.arrays(), net.params.grads(), net.opt_state, lr=hyper.lr_at(it),
                                   beta1=hyper.beta1, beta2=hyper.beta2, weight_decay=hyper.weight_decay)
        history.append(it, breakdown, time.perf_counter() - t0)
        log.debug("iter %d dm=%.5f fbk=%.5f fac=%.3f", it, breakdown.dm, breakdown.fbk, breakdown.fac)
        if callback is not None:
            callback(it, breakdown)
    return history
