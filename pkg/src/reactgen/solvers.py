"""Reverse-time samplers on a variance-preserving schedule.

``model`` arguments are callables ``model(x, alpha, sigma) -> x0_hat`` returning
a data prediction at noise level (alpha, sigma). :func:`guided_data_model`
turns a score network plus conditions into such a callable.

Solver step i moves from schedule index t_{i-1} to t_i, where t_0 = T is the
noisiest grid point and t_T = 0 the cleanest.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import ConfigError


@dataclass
class SolverTrajectory:
    states: list = field(default_factory=list)
    noise_draws: list = field(default_factory=list)
    data_predictions: list = field(default_factory=list)

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


def cfg_combine(score_cond, score_uncond, scale: float):
    """Classifier-free guidance: uncond + scale * (cond - uncond)."""
    return score_uncond + scale * (score_cond - score_uncond)


def data_prediction_at(x_t, score, alpha, sigma):
    """x0 estimate implied by a score under the Gaussian kernel: (x + sigma^2 s) / alpha."""
    alpha = np.asarray(alpha, dtype=float)
    if np.any(np.abs(alpha) < 1e-12):
        raise ZeroDivisionError("data prediction undefined at alpha ~ 0")
    return (np.asarray(x_t, dtype=float) + np.asarray(sigma, dtype=float) ** 2 * np.asarray(score, dtype=float)) / alpha


def data_prediction(x_t, guided_score, t_index, schedule):
    return data_prediction_at(x_t, guided_score, schedule.alpha[t_index], schedule.sigma[t_index])


def score_from_data(x_t, x0_hat, alpha, sigma):
    return (alpha * x0_hat - x_t) / sigma**2


def initial_state(rng: np.random.Generator, shape, schedule) -> np.ndarray:
    """x_T ~ N(0, sigma_T^2 I)."""
    return schedule.sigma[schedule.T] * rng.standard_normal(shape)


def guided_data_model(net, cond, scale: float):
    """Wrap a score network as ``model(x, alpha, sigma)`` with classifier-free guidance.

    ``cond`` is a ConditionBundle whose noise level fields are overwritten per
    query. The conditional and unconditional passes share one batched call.
    """
    from .score_net import ConditionBundle

    def model(x, alpha, sigma):
        x = np.asarray(x, dtype=float)
        batched = x.ndim == 3
        xb = x if batched else x[None]
        B = xb.shape[0]

        def rep(a, tail_ndim):
            a = np.asarray(a, dtype=float)
            if a.ndim == tail_ndim:
                a = np.broadcast_to(a, (B,) + a.shape)
            return np.concatenate([a, a], axis=0)

        past = None if cond.past_frame is None else rep(cond.past_frame, 1)
        both = ConditionBundle(
            speaker_face=rep(cond.speaker_face, 2),
            speaker_audio=rep(cond.speaker_audio, 2),
            alpha=alpha,
            sigma=sigma,
            timestamp=np.concatenate([np.broadcast_to(np.asarray(cond.timestamp, dtype=float), (B,))] * 2),
            past_frame=past,
            cond_dropped=np.concatenate([np.zeros(B), np.ones(B)]),
        )
        scores = net.forward(np.concatenate([xb, xb], axis=0), both)
        guided = cfg_combine(scores[:B], scores[B:], scale)
        out = data_prediction_at(xb, guided, alpha, sigma)
        return out if batched else out[0]

    return model


def _multistep(x_T, schedule, model, eta: float, rng, keep_predictions: bool) -> SolverTrajectory:
    if schedule.T < 2:
        raise ConfigError("the 2M solvers need T >= 2")
    if eta < 0:
        raise ConfigError("eta must be >= 0")
    idx = schedule.denoising_indices()
    alpha, sigma, lam = schedule.alpha, schedule.sigma, schedule.lam
    x = np.array(x_T, dtype=float)
    traj = SolverTrajectory(states=[x])
    m_older = None
    h_prev = None
    for i in range(1, schedule.T + 1):
        s, t = idx[i - 1], idx[i]
        h = lam[t] - lam[s]
        m = model(x, alpha[s], sigma[s])
        if keep_predictions:
            traj.data_predictions.append(m)
        if m_older is None:
            D = m
        else:
            r = h_prev / h
            D = (1.0 + 1.0 / (2.0 * r)) * m - m_older / (2.0 * r)
        decay = np.exp(-eta * h) * (sigma[t] / sigma[s])
        x = decay * x - alpha[t] * np.expm1(-h - eta * h) * D
        if eta > 0:
            z = rng.standard_normal(x.shape)
            traj.noise_draws.append(z)
            x = x + sigma[t] * np.sqrt(-np.expm1(-2.0 * eta * h)) * z
        traj.states.append(x)
        m_older, h_prev = m, h
    return traj


def solve_ode_2m(x_T, schedule, model, keep_predictions: bool = False) -> SolverTrajectory:
    """Deterministic second-order multistep exponential integrator on data predictions."""
    return _multistep(x_T, schedule, model, 0.0, None, keep_predictions)


def solve_sde_2m(x_T, schedule, model, eta: float = 1.0, rng: np.random.Generator | None = None,
                 keep_predictions: bool = False) -> SolverTrajectory:
    """Stochastic variant; ``eta`` couples the injected noise. ``eta = 0`` is the ODE solver."""
    if eta < 0:
        raise ConfigError("eta must be >= 0")
    if eta > 0 and rng is None:
        raise ConfigError("the SDE solver needs an rng when eta > 0")
    return _multistep(x_T, schedule, model, eta, rng, keep_predictions)


def solve_euler_reference(x_T, schedule, model, substeps: int, mode: str = "ode",
                          rng: np.random.Generator | None = None) -> np.ndarray:
    """First-order reference integrator in log-SNR time.

    Each schedule interval is split into ``substeps // T`` equal pieces in lambda.
    ``mode="ode"`` integrates the probability flow dx/dlambda = alpha (x0_hat - alpha x);
    ``mode="sde"`` runs Euler-Maruyama on
    dx = (2 alpha x0_hat - (1 + alpha^2) x) dlambda + sigma sqrt(2) dW.
    """
    if substeps < schedule.T:
        raise ConfigError("substeps must be >= T")
    if mode not in ("ode", "sde"):
        raise ConfigError(f"mode must be 'ode' or 'sde', got {mode!r}")
    if mode == "sde" and rng is None:
        raise ConfigError("sde mode needs an rng")
    per = substeps // schedule.T
    lam_path = schedule.lam[schedule.denoising_indices()]
    x = np.array(x_T, dtype=float)
    for k in range(schedule.T):
        grid = np.linspace(lam_path[k], lam_path[k + 1], per + 1)
        for j in range(per):
            lam, dl = grid[j], grid[j + 1] - grid[j]
            a = np.sqrt(1.0 / (1.0 + np.exp(-2.0 * lam)))
            s = np.sqrt(1.0 / (1.0 + np.exp(2.0 * lam)))
            x0 = model(x, a, s)
            if mode == "ode":
                x = x + dl * a * (x0 - a * x)
            else:
                x = x + dl * (2.0 * a * x0 - (1.0 + a * a) * x) + s * np.sqrt(2.0 * dl) * rng.standard_normal(x.shape)
    return x
