"""Training objectives: score matching, facial kinematics, and AU-pair constraints.

All loss functions accept plain arrays (returning a float) or autodiff
Tensors (returning a scalar Tensor), so the same code serves evaluation and
training. Leading batch axes are averaged; frames and pairs are summed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .core import N_EXPR, frame_index

PAIR_SETS = ("symmetric", "co_occurred", "mutually_exclusive")
EXPECTED_PAIR_COUNTS = {"symmetric": 20, "co_occurred": 30, "mutually_exclusive": 58}
DEFAULT_LAMBDA_FAC = 1e-4
DEFAULT_GATE = 5


class RegistryError(ValueError):
    pass


@dataclass(frozen=True)
class AUPairRegistry:
    symmetric: tuple[tuple[int, int], ...]
    co_occurred: tuple[tuple[int, int], ...]
    mutually_exclusive: tuple[tuple[int, int], ...]

    @classmethod
    def from_names(cls, table: dict) -> "AUPairRegistry":
        sets = {}
        for key in PAIR_SETS:
            pairs = []
            for entry in table.get(key, []):
                a, b = entry
                pairs.append((frame_index(a), frame_index(b)))
            sets[key] = tuple(pairs)
        return cls(**sets)

    @classmethod
    def from_json(cls, path) -> "AUPairRegistry":
        return cls.from_names(json.loads(Path(path).read_text()))

    @classmethod
    def default(cls) -> "AUPairRegistry":
        text = resources.files("reactgen").joinpath("au_pairs.json").read_text()
        return cls.from_names(json.loads(text))

    def all_pairs(self) -> np.ndarray:
        """Every registered pair as an (n, 2) index array, sets concatenated in order."""
        return np.array(self.symmetric + self.co_occurred + self.mutually_exclusive, dtype=int).reshape(-1, 2)

    def overlaps(self) -> list[tuple[str, str, tuple[int, int]]]:
        keyed = {name: {tuple(sorted(p)) for p in getattr(self, name)} for name in PAIR_SETS}
        out = []
        for i, a in enumerate(PAIR_SETS):
            for b in PAIR_SETS[i + 1:]:
                out.extend((a, b, p) for p in sorted(keyed[a] & keyed[b]))
        return out

    def problems(self) -> list[str]:
        """Structural problems: bad indices, self pairs, duplicates inside a set, pairs shared by sets."""
        out = []
        for name in PAIR_SETS:
            seen = set()
            for a, b in getattr(self, name):
                if not (0 <= a < N_EXPR and 0 <= b < N_EXPR):
                    out.append(f"{name}: pair ({a}, {b}) is not an expression coefficient")
                if a == b:
                    out.append(f"{name}: self pair ({a}, {a})")
                key = tuple(sorted((a, b)))
                if key in seen:
                    out.append(f"{name}: duplicate pair {key}")
                seen.add(key)
        for a, b, p in self.overlaps():
            out.append(f"pair {p} appears in both {a} and {b}")
        return out


# -- forward process ----------------------------------------------------------

def forward_diffuse(x0, t_index, eps, schedule):
    """x_t = alpha_t x0 + sigma_t eps; ``t_index`` may be an int or per-batch array."""
    a = _per_batch(schedule.alpha[np.asarray(t_index)], np.ndim(x0))
    s = _per_batch(schedule.sigma[np.asarray(t_index)], np.ndim(x0))
    return a * np.asarray(x0, dtype=float) + s * np.asarray(eps, dtype=float)


def target_score(x0, x_t, t_index, schedule):
    """Score of the Gaussian perturbation kernel, -(x_t - alpha_t x0) / sigma_t^2."""
    sig = schedule.sigma[np.asarray(t_index)]
    if np.any(sig == 0):
        raise ZeroDivisionError("target score undefined at sigma_t = 0")
    a = _per_batch(schedule.alpha[np.asarray(t_index)], np.ndim(x0))
    s = _per_batch(sig, np.ndim(x0))
    return -(np.asarray(x_t, dtype=float) - a * np.asarray(x0, dtype=float)) / s**2


def _per_batch(v, ndim):
    v = np.asarray(v, dtype=float)
    return v.reshape(v.shape + (1,) * (ndim - v.ndim)) if v.ndim else v


def _out(x: Tensor, tensor_mode: bool):
    return x if tensor_mode else float(x.data)


def _batch_mean(per_window: Tensor) -> Tensor:
    return per_window if per_window.ndim == 0 else ad.mean(per_window)


# -- losses -------------------------------------------------------------------

def loss_dm(pred_score, target):
    """Mean squared error between predicted and target scores."""
    tensor_mode = isinstance(pred_score, Tensor) or isinstance(target, Tensor)
    pred, tgt = ad.as_tensor(pred_score), ad.as_tensor(target)
    if pred.shape != tgt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {tgt.shape}")
    diff = pred - tgt
    return _out(ad.mean(diff * diff), tensor_mode)


def loss_fbk(pred_cur, target_cur, pred_prev, target_prev, t_index, gate: int = DEFAULT_GATE):
    """Velocity-matching loss between the previous and current window.

    For every frame i of the current window (indexed in prev || cur), compares
    ||s(i) - s(i-1)|| and ||s(i) - s(i-w)|| / w between target and predicted
    scores with an absolute difference. Steps above ``gate`` contribute 0, as
    does a missing previous window.
    """
    tensor_mode = any(isinstance(x, Tensor) for x in (pred_cur, target_cur, pred_prev, target_prev))
    if pred_prev is None or target_prev is None:
        return _out(Tensor(0.0), tensor_mode)
    t = np.asarray(t_index)
    active = (t <= gate).astype(float)
    if not active.any():
        return _out(Tensor(0.0), tensor_mode)

    def velocities(prev, cur):
        seq = ad.concat([ad.as_tensor(prev), ad.as_tensor(cur)], axis=-2)
        w = seq.shape[-2] // 2
        step = ad.norm(seq[..., w:, :] - seq[..., w - 1:2 * w - 1, :])
        span = ad.norm(seq[..., w:, :] - seq[..., :w, :]) * (1.0 / w)
        return step, span

    v_step, v_span = velocities(target_prev, target_cur)
    p_step, p_span = velocities(pred_prev, pred_cur)
    per_window = ad.tsum(ad.tabs(v_step - p_step) + ad.tabs(v_span - p_span), axis=-1)
    if per_window.ndim:
        per_window = per_window * active.reshape(per_window.shape)
    else:
        per_window = per_window * float(active)
    return _out(_batch_mean(per_window), tensor_mode)


def loss_fac(pred_score, target_score, registry: AUPairRegistry):
    """Sum over frames and registered AU pairs of | |t_i - t_j| - |p_i - p_j| |."""
    tensor_mode = isinstance(pred_score, Tensor) or isinstance(target_score, Tensor)
    pairs = registry.all_pairs()
    pred, tgt = ad.as_tensor(pred_score), ad.as_tensor(target_score)
    d_true = ad.tabs(tgt[..., pairs[:, 0]] - tgt[..., pairs[:, 1]])
    d_pred = ad.tabs(pred[..., pairs[:, 0]] - pred[..., pairs[:, 1]])
    per_window = ad.tsum(ad.tabs(d_true - d_pred), axis=(-2, -1))
    return _out(_batch_mean(per_window), tensor_mode)


@dataclass(frozen=True)
class LossBreakdown:
    dm: float
    fbk: float
    fac: float
    total: float
    lambda_fac: float

    def as_dict(self) -> dict:
        return {"dm": self.dm, "fbk": self.fbk, "fac": self.fac, "total": self.total, "lambda_fac": self.lambda_fac}


def total_loss(dm, fbk, fac, lambda_fac: float = DEFAULT_LAMBDA_FAC) -> LossBreakdown:
    for name, v in (("dm", dm), ("fbk", fbk), ("fac", fac)):
        if not math.isfinite(float(v)):
            raise FloatingPointError(f"loss component {name} is not finite: {v}")
    dm, fbk, fac = float(dm), float(fbk), float(fac)
    total = dm + fbk + lambda_fac * fac if lambda_fac else dm + fbk
    return LossBreakdown(dm, fbk, fac, total, lambda_fac)
