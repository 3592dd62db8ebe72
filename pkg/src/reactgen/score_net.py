"""Conditional score network with exact reverse-mode gradients.

Pipeline per window::

    noisy frames -> linear projection + bidirectional input LSTM
                    (forward state from past frame)
                 -> K residual blocks with adaptive group norm (step + timestamp)
                 -> causal cross-attention over speaker face+audio
                 -> residual output LSTM (state from past frame) -> linear head

The head emits ``F`` and the clean-window estimate is ``D = alpha x + sigma F``,
so ``F`` targets ``sigma x0 - alpha eps`` and stays unit scale at every noise
level for standardized data. The returned score is the one implied by ``D``,
``(alpha D - x) / sigma^2 = -x + (alpha / sigma) F``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .core import DEFAULT_AUDIO_DIM, DEFAULT_WINDOW, FRAME_DIM, ConfigError, DimensionError
from .schedule import build_cosine_schedule


@dataclass(frozen=True)
class NetConfig:
    frame_dim: int = FRAME_DIM
    audio_dim: int = DEFAULT_AUDIO_DIM
    window: int = DEFAULT_WINDOW
    hidden: int = 128
    blocks: int = 2
    groups: int = 8
    embed: int = 64
    train_steps: int = 50
    use_face: bool = True
    use_audio: bool = True
    use_timestamp: bool = True
    use_history: bool = True

    def __post_init__(self):
        if self.hidden % self.groups:
            raise ConfigError(f"hidden width {self.hidden} not divisible by {self.groups} groups")
        if self.embed % 2:
            raise ConfigError("embedding width must be even")

    @property
    def cond_dim(self) -> int:
        return self.frame_dim + self.audio_dim


@dataclass
class ConditionBundle:
    """Conditions for one window or a batch of windows.

    ``alpha``/``sigma`` give the noise level of the input (scalars or per-batch
    arrays). ``cond_dropped`` swaps speaker face and audio jointly for the
    learned null embedding.
    """

    speaker_face: np.ndarray
    speaker_audio: np.ndarray
    alpha: float | np.ndarray
    sigma: float | np.ndarray
    timestamp: int | np.ndarray
    past_frame: np.ndarray | None = None
    cond_dropped: bool | np.ndarray = False
    step_index: int | None = None

    @classmethod
    def at_step(cls, schedule, step_index: int, **kwargs) -> "ConditionBundle":
        return cls(alpha=schedule.alpha[step_index], sigma=schedule.sigma[step_index],
                   step_index=step_index, **kwargs)

    def dropped(self) -> "ConditionBundle":
        return ConditionBundle(self.speaker_face, self.speaker_audio, self.alpha, self.sigma,
                               self.timestamp, self.past_frame, True, self.step_index)


def timestamp_encoding(h, dim: int) -> np.ndarray:
    """Sinusoidal code of the global frame index, shape (..., dim)."""
    h = np.asarray(h, dtype=float)[..., None]
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    return np.concatenate([np.sin(h * freqs), np.cos(h * freqs)], axis=-1)


def lstm(x, h0, c0, w_x, w_h, b) -> Tensor:
    """One-layer LSTM over axis 1 of ``x`` (B, w, I); returns all hidden states (B, w, C).

    Gate order in the 4C pre-activation is (input, forget, cell, output).
    """
    x, h0, c0, w_x, w_h, b = map(ad.as_tensor, (x, h0, c0, w_x, w_h, b))
    X, Wx, Wh = x.data, w_x.data, w_h.data
    B, n, _ = X.shape
    C = Wh.shape[0]
    xs = X @ Wx + b.data
    h, c = h0.data, c0.data
    H = np.empty((B, n, C))
    cache = []
    for t in range(n):
        z = xs[:, t] + h @ Wh
        i = _sig(z[:, :C])
        f = _sig(z[:, C:2 * C])
        g = np.tanh(z[:, 2 * C:3 * C])
        o = _sig(z[:, 3 * C:])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        cache.append((i, f, g, o, c, tc, h))
        h, c = h_new, c_new
        H[:, t] = h

    def back(dH):
        dWh = np.zeros_like(Wh)
        dZ = np.empty((B, n, 4 * C))
        dh_next = np.zeros((B, C))
        dc_next = np.zeros((B, C))
        for t in range(n - 1, -1, -1):
            i, f, g, o, c_prev, tc, h_prev = cache[t]
            dh = dH[:, t] + dh_next
            do = dh * tc
            dc = dh * o * (1.0 - tc * tc) + dc_next
            dz = np.concatenate([
                dc * g * i * (1.0 - i),
                dc * c_prev * f * (1.0 - f),
                dc * i * (1.0 - g * g),
                do * o * (1.0 - o),
            ], axis=1)
            dZ[:, t] = dz
            dWh += h_prev.T @ dz
            dh_next = dz @ Wh.T
            dc_next = dc * f
        dX = dZ @ Wx.T
        dWx = X.reshape(B * n, -1).T @ dZ.reshape(B * n, -1)
        db = dZ.sum(axis=(0, 1))
        return dX, dh_next, dc_next, dWx, dWh, db

    return ad._make(H, (x, h0, c0, w_x, w_h, b), back)


def _sig(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def adaptive_group_norm(hidden, step_embed, time_embed, block_params, groups: int = 8, eps: float = 1e-5):
    """Group-normalize (B, w, C) over frames x channels-in-group, then scale/shift by the embedding.

    ``block_params`` holds ``scale_w``, ``scale_b``, ``shift_w``, ``shift_b``.
    Accepts arrays or Tensors; unbatched (w, C) input is supported.
    """
    hidden = ad.as_tensor(hidden)
    squeeze = hidden.ndim == 2
    if squeeze:
        hidden = ad.reshape(hidden, (1,) + hidden.shape)
    B, n, C = hidden.shape
    if C % groups:
        raise ConfigError(f"channels {C} not divisible by {groups} groups")
    emb = ad.add(step_embed, time_embed)
    if emb.ndim == 1:
        emb = ad.reshape(emb, (1, -1))
    g = ad.reshape(hidden, (B, n, groups, C // groups))
    mu = ad.mean(g, axis=(1, 3), keepdims=True)
    centered = g - mu
    var = ad.mean(centered * centered, axis=(1, 3), keepdims=True)
    normed = ad.reshape(centered * ad.power(var + eps, -0.5), (B, n, C))
    scale = emb @ block_params["scale_w"] + block_params["scale_b"]
    shift = emb @ block_params["shift_w"] + block_params["shift_b"]
    out = normed * ad.reshape(scale, (-1, 1, C)) + ad.reshape(shift, (-1, 1, C))
    if squeeze:
        out = ad.reshape(out, (n, C))
    return out


def causal_cross_attention(queries, keys_values, block_params, return_weights: bool = False):
    """Single-head attention; query frame i only sees speaker frames j <= i.

    ``block_params`` holds ``wq``, ``wk``, ``wv``, ``wo``, ``bo``. Returns the
    projected attention output (without residual), optionally with weights.
    """
    q_in = ad.as_tensor(queries)
    kv = ad.as_tensor(keys_values)
    squeeze = q_in.ndim == 2
    if squeeze:
        q_in = ad.reshape(q_in, (1,) + q_in.shape)
        kv = ad.reshape(kv, (1,) + kv.shape)
    n = q_in.shape[1]
    if kv.shape[1] != n:
        raise DimensionError(f"queries have {n} frames, keys/values {kv.shape[1]}")
    q = q_in @ block_params["wq"]
    k = kv @ block_params["wk"]
    v = kv @ block_params["wv"]
    d = q.shape[-1]
    scores = (q @ ad.transpose(k)) * (1.0 / math.sqrt(d))
    mask = np.tril(np.ones((n, n), dtype=bool))
    weights = ad.softmax(scores, axis=-1, mask=mask)
    out = (weights @ v) @ block_params["wo"] + block_params["bo"]
    if squeeze:
        out = ad.reshape(out, out.shape[1:])
        weights = ad.reshape(weights, weights.shape[1:])
    return (out, weights) if return_weights else out


def _param_shapes(cfg: NetConfig) -> dict[str, tuple]:
    D, C, E, S = cfg.frame_dim, cfg.hidden, cfg.embed, cfg.cond_dim
    shapes = {
        "in.init_h.w": (D, C), "in.init_h.b": (C,),
        "in.init_c.w": (D, C), "in.init_c.b": (C,),
        "in.lstm.wx": (D, 4 * C), "in.lstm.wh": (C, 4 * C), "in.lstm.b": (4 * C,),
        "in.proj.w": (D, C), "in.proj.b": (C,),
        "in.back.wx": (D, 4 * C), "in.back.wh": (C, 4 * C), "in.back.b": (4 * C,),
        "emb.step_table": (cfg.train_steps + 1, E),
        "emb.time.w": (E, E), "emb.time.b": (E,),
    }
    for k in range(cfg.blocks):
        p = f"block{k}"
        for j in (1, 2):
            shapes.update({
                f"{p}.gn{j}.scale_w": (E, C), f"{p}.gn{j}.scale_b": (C,),
                f"{p}.gn{j}.shift_w": (E, C), f"{p}.gn{j}.shift_b": (C,),
                f"{p}.lin{j}.w": (C, C), f"{p}.lin{j}.b": (C,),
            })
    shapes.update({
        "attn.wq": (C, C), "attn.wk": (S, C), "attn.wv": (S, C), "attn.wo": (C, C), "attn.bo": (C,),
        "null_cond": (S,),
        "out.init_h.w": (D, C), "out.init_h.b": (C,),
        "out.init_c.w": (D, C), "out.init_c.b": (C,),
        "out.lstm.wx": (C, 4 * C), "out.lstm.wh": (C, 4 * C), "out.lstm.b": (4 * C,),
        "head.w": (C, D), "head.b": (D,),
    })
    return shapes


def init_params(cfg: NetConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    out = {}
    for name, shape in _param_shapes(cfg).items():
        if name.endswith("scale_b"):
            val = np.ones(shape)
        elif name == "emb.step_table":
            val = rng.standard_normal(shape)
        elif name == "null_cond":
            val = 0.1 * rng.standard_normal(shape)
        elif len(shape) == 1:
            val = np.zeros(shape)
        elif name.endswith(("init_h.w", "init_c.w")):
            val = 0.1 * rng.standard_normal(shape) / math.sqrt(shape[0])
        elif ".lin2." in name or name == "attn.wo":
            val = 0.1 * rng.standard_normal(shape) / math.sqrt(shape[0])
        else:
            val = rng.standard_normal(shape) / math.sqrt(shape[0])
        out[name] = val
    # forget-gate bias 1
    C = cfg.hidden
    out["in.lstm.b"][C:2 * C] = 1.0
    out["in.back.b"][C:2 * C] = 1.0
    out["out.lstm.b"][C:2 * C] = 1.0
    return out


class DenoiserParams:
    """Named parameter blocks, each a leaf Tensor whose ``grad`` is the gradient buffer."""

    def __init__(self, arrays: dict[str, np.ndarray]):
        self.tensors = {k: Tensor(np.array(v, dtype=float), requires_grad=True, name=k) for k, v in arrays.items()}

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in self.tensors.items()}

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def sub(self, prefix: str) -> dict[str, Tensor]:
        n = len(prefix) + 1
        return {k[n:]: t for k, t in self.tensors.items() if k.startswith(prefix + ".")}


class ScoreNet:
    """Score estimator s(x_t, c) for a window of listener frames."""

    def __init__(self, config: NetConfig | None = None, seed: int = 0, params: dict | None = None):
        self.config = config or NetConfig()
        self.params = DenoiserParams(params if params is not None else init_params(self.config, np.random.default_rng(seed)))
        self._lam_grid = build_cosine_schedule(self.config.train_steps).lam
        self._recorded: Tensor | None = None
        # AdamW state, created lazily by adamw_step
        self.opt_state: dict | None = None

    # -- conditioning helpers -------------------------------------------------
    def _step_position(self, alpha, sigma) -> np.ndarray:
        lam = np.log(np.asarray(alpha, dtype=float)) - np.log(np.asarray(sigma, dtype=float))
        # lambda grid decreases with index; interpolate on the reversed grid
        lam_rev = self._lam_grid[::-1]
        pos_rev = np.interp(lam, lam_rev, np.arange(len(lam_rev), dtype=float))
        return (len(lam_rev) - 1) - pos_rev

    def _step_embedding(self, alpha, sigma, B: int) -> Tensor:
        pos = np.broadcast_to(self._step_position(alpha, sigma), (B,))
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, self.config.train_steps)
        frac = (pos - lo)[:, None]
        table = self.params["emb.step_table"]
        return ad.getitem(table, lo) * (1.0 - frac) + ad.getitem(table, hi) * frac

    def _batch(self, x, cond: ConditionBundle):
        cfg = self.config
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=float)
        squeeze = x.ndim == 2
        if squeeze:
            x = x[None]
        B, n, D = x.shape
        if D != cfg.frame_dim:
            raise DimensionError(f"listener frames have dim {D}, expected {cfg.frame_dim}")

        def per_batch(a, tail):
            a = np.asarray(a, dtype=float)
            if a.ndim == len(tail):
                a = np.broadcast_to(a, (B,) + a.shape)
            if a.shape != (B,) + tail:
                raise DimensionError(f"condition shape {a.shape} does not match {(B,) + tail}")
            return a

        face = per_batch(cond.speaker_face, (n, cfg.frame_dim))
        audio = per_batch(cond.speaker_audio, (n, cfg.audio_dim))
        past = np.zeros((B, cfg.frame_dim)) if cond.past_frame is None else per_batch(cond.past_frame, (cfg.frame_dim,))
        dropped = np.broadcast_to(np.asarray(cond.cond_dropped, dtype=float), (B,))
        sigma = np.broadcast_to(np.asarray(cond.sigma, dtype=float), (B,))
        alpha = np.broadcast_to(np.asarray(cond.alpha, dtype=float), (B,))
        ts = np.broadcast_to(np.asarray(cond.timestamp, dtype=float), (B,))
        return squeeze, x, face, audio, past, dropped, alpha, sigma, ts

    # -- model ---------------------------------------------------------------
    def apply(self, x, cond: ConditionBundle, x_tensor: Tensor | None = None) -> Tensor:
        """Build the differentiable graph for the score estimate; returns (B, w, D) or (w, D)."""
        cfg, P = self.config, self.params
        squeeze, x, face, audio, past, dropped, alpha, sigma, ts = self._batch(x, cond)
        B, n, D = x.shape
        xin = x_tensor if x_tensor is not None else Tensor(x)
        if xin.ndim == 2:
            xin = ad.reshape(xin, (1,) + xin.shape)

        if not cfg.use_history:
            past = np.zeros_like(past)
        h0 = past @ P["in.init_h.w"] + P["in.init_h.b"]
        c0 = past @ P["in.init_c.w"] + P["in.init_c.b"]
        hdn = xin @ P["in.proj.w"] + P["in.proj.b"] + lstm(xin, h0, c0, P["in.lstm.wx"], P["in.lstm.wh"], P["in.lstm.b"])
        # backward direction over the noisy listener frames only, so the
        # speaker stream, which enters later, stays causal
        zero = np.zeros((B, cfg.hidden))
        back = lstm(xin[:, ::-1], zero, zero, P["in.back.wx"], P["in.back.wh"], P["in.back.b"])
        hdn = hdn + back[:, ::-1]

        step_emb = self._step_embedding(alpha, sigma, B)
        if cfg.use_timestamp:
            code = timestamp_encoding(ts, cfg.embed)
            time_emb = ad.silu(code @ P["emb.time.w"] + P["emb.time.b"])
        else:
            time_emb = Tensor(np.zeros((B, cfg.embed)))

        for k in range(cfg.blocks):
            bp = P.sub(f"block{k}")
            y = adaptive_group_norm(hdn, step_emb, time_emb, _gn(bp, 1), cfg.groups)
            y = ad.silu(y) @ bp["lin1.w"] + bp["lin1.b"]
            y = adaptive_group_norm(y, step_emb, time_emb, _gn(bp, 2), cfg.groups)
            y = ad.silu(y) @ bp["lin2.w"] + bp["lin2.b"]
            hdn = hdn + y

        spk = np.concatenate([face * float(cfg.use_face), audio * float(cfg.use_audio)], axis=-1)
        if not (cfg.use_face or cfg.use_audio):
            dropped = np.ones_like(dropped)
        keep = (1.0 - dropped)[:, None, None]
        kv = Tensor(spk * keep) + ad.reshape(P["null_cond"], (1, 1, -1)) * (1.0 - keep)
        hdn = hdn + causal_cross_attention(hdn, kv, P.sub("attn"))

        h0 = past @ P["out.init_h.w"] + P["out.init_h.b"]
        c0 = past @ P["out.init_c.w"] + P["out.init_c.b"]
        hdn = hdn + lstm(hdn, h0, c0, P["out.lstm.wx"], P["out.lstm.wh"], P["out.lstm.b"])
        F = hdn @ P["head.w"] + P["head.b"]
        score = F * (alpha / sigma)[:, None, None] - xin
        if squeeze:
            score = ad.reshape(score, score.shape[1:])
        return score

    def forward(self, x, cond: ConditionBundle, record: bool = False) -> np.ndarray:
        if record:
            out = self.apply(x, cond)
            self._recorded = out
            return out.data.copy()
        with ad.no_grad():
            return self.apply(x, cond).data

    __call__ = forward

    def backward(self, loss_grad) -> None:
        """Push dLoss/dScore through the last recorded forward into the gradient buffers."""
        if self._recorded is None:
            raise RuntimeError("backward() called without a recorded forward pass")
        out, self._recorded = self._recorded, None
        out.backward(np.asarray(loss_grad, dtype=float))

    def zero_grad(self):
        self.params.zero_grad()

    # -- persistence ---------------------------------------------------------
    def save(self, path, extra: dict | None = None) -> None:
        blocks = dict(self.params.arrays())
        header = {"config": asdict(self.config), "extra": extra or {}, "step": 0}
        if self.opt_state is not None:
            header["step"] = self.opt_state["step"]
            for k in self.params:
                blocks[f"__m__/{k}"] = self.opt_state["m"][k]
                blocks[f"__v__/{k}"] = self.opt_state["v"][k]
        write_checkpoint(path, blocks, header)

    @classmethod
    def load(cls, path) -> "ScoreNet":
        blocks, header = read_checkpoint(path)
        net = cls(NetConfig(**header["config"]), params={k: v for k, v in blocks.items() if not k.startswith("__")})
        if any(k.startswith("__m__/") for k in blocks):
            net.opt_state = {
                "step": header["step"],
                "m": {k: blocks[f"__m__/{k}"] for k in net.params},
                "v": {k: blocks[f"__v__/{k}"] for k in net.params},
            }
        net.extra = header.get("extra", {})
        return net


def _gn(bp: dict, j: int) -> dict:
    return {k: bp[f"gn{j}.{k}"] for k in ("scale_w", "scale_b", "shift_w", "shift_b")}


@dataclass(frozen=True)
class AdamWConfig:
    lr: float = 1e-4
    beta1: float = 0.95
    beta2: float = 0.999
    weight_decay: float = 1e-3
    eps: float = 1e-8


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: dict | None,
               lr: float = 1e-4, beta1: float = 0.95, beta2: float = 0.999,
               weight_decay: float = 1e-3, eps: float = 1e-8) -> dict:
    """Decoupled-weight-decay Adam, updating ``params`` in place; returns the new state.

    ``state`` is ``None`` before the first step.
    """
    if state is None:
        state = {"step": 0, "m": {k: np.zeros_like(v) for k, v in params.items()},
                 "v": {k: np.zeros_like(v) for k, v in params.items()}}
    state["step"] += 1
    t = state["step"]
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for k, p in params.items():
        g = grads[k]
        m = state["m"][k]
        v = state["v"][k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * weight_decay * p
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def write_checkpoint(path, blocks: dict[str, np.ndarray], header: dict) -> None:
    """Binary container: 8-byte little-endian header length, JSON header, raw float64 blocks."""
    entries = []
    offset = 0
    for name, arr in blocks.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    meta = dict(header, blocks=entries)
    raw = json.dumps(meta).encode("utf-8")
    with open(Path(path), "wb") as fh:
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for arr in blocks.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    (n,) = struct.unpack("<Q", data[:8])
    meta = json.loads(data[8:8 + n].decode("utf-8"))
    base = 8 + n
    blocks = {}
    for e in meta.pop("blocks"):
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        start = base + e["offset"]
        blocks[e["name"]] = np.frombuffer(data, dtype="<f8", count=count, offset=start).reshape(e["shape"]).copy()
    return blocks, meta
