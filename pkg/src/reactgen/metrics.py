"""Diversity, appropriateness, synchrony and distribution metrics for reaction sequences.

Every sequence is an (H, D) array of frames.
"""

from __future__ import annotations

import warnings

import numpy as np


def _stack(seqs, name="sequences") -> np.ndarray:
    arr = np.asarray([np.asarray(s, dtype=float) for s in seqs])
    if arr.ndim != 3:
        raise ValueError(f"{name} must be a list of equally shaped (H, D) arrays")
    return arr


def fr_var(sequences) -> float:
    """Mean temporal variance of each coefficient, averaged over sequences and dims."""
    arr = _stack(sequences)
    if arr.shape[0] == 0:
        raise ValueError("need at least one sequence")
    if arr.shape[1] < 2:
        raise ValueError("sequences need H >= 2 frames")
    # shifting by the first frame keeps constant sequences at exactly 0
    return float((arr - arr[:, :1]).var(axis=1).mean())


def fr_dvs(per_speaker_reactions) -> float:
    """Across-speaker variance at each aligned (frame, dim), averaged."""
    lengths = {np.shape(r)[0] for r in per_speaker_reactions}
    if len(lengths) > 1:
        raise ValueError(f"reactions have different lengths: {sorted(lengths)}")
    arr = _stack(per_speaker_reactions, "per_speaker_reactions")
    if arr.shape[0] < 2:
        raise ValueError("need reactions for at least two speakers")
    return float((arr - arr[:1]).var(axis=0).mean())


def fr_div(samples) -> float:
    """Mean over unordered sample pairs of the frame-wise mean squared distance."""
    arr = _stack(samples, "samples")
    M = arr.shape[0]
    if M < 2:
        raise ValueError("fr_div needs at least two samples")
    flat = (arr - arr[:1]).reshape(M, -1)
    # sum_{i<j} |a_i - a_j|^2 = M sum_i |a_i|^2 - |sum_i a_i|^2
    total = M * np.sum(flat * flat) - np.sum(flat.sum(axis=0) ** 2)
    n_pairs = M * (M - 1) / 2
    return float(max(total, 0.0) / n_pairs / flat.shape[1])


def concordance(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-column concordance correlation coefficient; constant columns score 0."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    mx, my = x.mean(axis=0), y.mean(axis=0)
    vx, vy = x.var(axis=0), y.var(axis=0)
    cov = ((x - mx) * (y - my)).mean(axis=0)
    denom = vx + vy + (mx - my) ** 2
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(denom > 0, 2.0 * cov / np.where(denom > 0, denom, 1.0), 0.0)
    # constant columns carry no correlation information
    return np.where((vx > 0) & (vy > 0), out, 0.0)


def fr_corr(generated, appropriate_set) -> float:
    """Best-match concordance: mean over samples of max over appropriate GTs of dim-averaged CCC."""
    gen = _stack(generated, "generated")
    gts = _stack(appropriate_set, "appropriate_set")
    if gen.shape[0] == 0 or gts.shape[0] == 0:
        raise ValueError("fr_corr needs non-empty generated and appropriate sets")
    scores = [max(float(concordance(g, t).mean()) for t in gts) for g in gen]
    return float(np.mean(scores))


def _lagged_pair(a, b, lag):
    H = a.shape[0]
    if lag >= 0:
        return a[:H - lag], b[lag:]
    return a[-lag:], b[:H + lag]


def lag_correlations(speaker, generated, max_lag: int) -> np.ndarray:
    """Dim-averaged Pearson correlation of speaker[t] and generated[t + lag] for lag = -max_lag..max_lag.

    Dims with zero variance in the overlap are skipped; NaN where no dim is usable.
    """
    s = np.asarray(speaker, dtype=float)
    g = np.asarray(generated, dtype=float)
    if s.shape != g.shape:
        raise ValueError(f"speaker {s.shape} and generated {g.shape} shapes differ")
    if not 0 <= max_lag < s.shape[0]:
        raise ValueError("need 0 <= max_lag < H")
    out = np.full(2 * max_lag + 1, np.nan)
    for k, lag in enumerate(range(-max_lag, max_lag + 1)):
        a, b = _lagged_pair(s, g, lag)
        a = a - a.mean(axis=0)
        b = b - b.mean(axis=0)
        den = np.sqrt((a * a).sum(axis=0) * (b * b).sum(axis=0))
        ok = den > 1e-12
        if ok.any():
            out[k] = np.mean((a * b).sum(axis=0)[ok] / den[ok])
    return out


def fr_syn(speaker_face, generated, max_lag: int = 48) -> int:
    """Time-lagged cross correlation synchrony: |lag| of the peak correlation, in frames.

    Ties resolve to the most negative lag. A degenerate (constant) signal
    yields ``max_lag`` with a RuntimeWarning.
    """
    corr = lag_correlations(speaker_face, generated, max_lag)
    if np.all(np.isnan(corr)):
        warnings.warn("synchrony undefined for constant signals; returning max_lag", RuntimeWarning, stacklevel=2)
        return int(max_lag)
    k = int(np.nanargmax(corr))
    return abs(k - max_lag)


def sequence_embedding(seq) -> np.ndarray:
    """Per-dim (mean, std) over time, concatenated."""
    seq = np.asarray(seq, dtype=float)
    return np.concatenate([seq.mean(axis=0), seq.std(axis=0)])


def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((a + a.T) / 2)
    return (vecs * np.sqrt(np.maximum(vals, 0.0))) @ vecs.T


def _tr_sqrt_product(a: np.ndarray, b: np.ndarray) -> float:
    ra = _psd_sqrt(a)
    mid = ra @ b @ ra
    return float(np.sum(np.sqrt(np.maximum(np.linalg.eigvalsh((mid + mid.T) / 2), 0.0))))


def frechet_gaussian(mu1, cov1, mu2, cov2) -> float:
    """||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2)."""
    mu1, mu2 = np.atleast_1d(mu1).astype(float), np.atleast_1d(mu2).astype(float)
    cov1, cov2 = np.atleast_2d(cov1).astype(float), np.atleast_2d(cov2).astype(float)
    # both orderings of tr((S1^1/2 S2 S1^1/2)^1/2) are equal in exact arithmetic;
    # averaging them keeps the result symmetric when a covariance is near singular
    tr_cross = 0.5 * (_tr_sqrt_product(cov1, cov2) + _tr_sqrt_product(cov2, cov1))
    diff = mu1 - mu2
    if not diff.any() and np.array_equal(cov1, cov2):
        return 0.0
    # rounding can push the trace term a hair below zero
    return float(max(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * tr_cross, 0.0))


def frechet_coeff_distance(set_a, set_b) -> float:
    """Frechet distance between Gaussian fits of the (mean, std) embeddings of two sequence sets."""
    if len(set_a) < 2 or len(set_b) < 2:
        raise ValueError("each set needs at least two sequences")
    ea = np.array([sequence_embedding(s) for s in set_a])
    eb = np.array([sequence_embedding(s) for s in set_b])
    return frechet_gaussian(ea.mean(axis=0), np.cov(ea, rowvar=False), eb.mean(axis=0), np.cov(eb, rowvar=False))


def boundary_jump(sequence, w: int) -> float:
    """Mean Euclidean jump between the last frame of window k and the first of window k+1."""
    seq = np.asarray(sequence, dtype=float)
    starts = np.arange(w, seq.shape[0], w)
    if starts.size == 0:
        return 0.0
    return float(np.linalg.norm(seq[starts] - seq[starts - 1], axis=1).mean())


def symmetric_pair_gap(sequence, pairs) -> float:
    """Mean absolute difference between the members of each (i, j) pair over all frames."""
    seq = np.asarray(sequence, dtype=float)
    pairs = np.asarray(pairs, dtype=int).reshape(-1, 2)
    return float(np.abs(seq[..., pairs[:, 0]] - seq[..., pairs[:, 1]]).mean())

