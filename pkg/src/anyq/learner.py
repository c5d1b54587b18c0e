"""Per-row LUT learning by calibration-weighted k-means.

For row ``i`` the learner looks for ``2^n`` scaled-domain values that
minimize ``sum_j alpha_ij * E|x_j| * (wS_ij - q(j))^2``. The group offsets
drop out of the output error, which is why the samples are the scaled
weights and only the scales (not the offsets) enter the sample weights.
Assignment is nearest-value, the update is the weighted mean of each
cluster, and the two alternate until the loss stops improving.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .codebooks import NF4_VALUES, codebook_for, int_grid, round_to_codebook, scaled_domain_table
from .core import (
    CodebookKind,
    ConfigError,
    GranularityKind,
    Init,
    LearnerConfig,
    QuantConfig,
    ShapeError,
    Weighting,
    as_matrix,
    rng_for_row,
)
from .pack import QuantizedTensor
from .scaling import ScaleSet, compute_scales, scale_weights


class InvariantError(AssertionError):
    """Raised by ``check_invariants`` runs when a k-means invariant breaks."""


@dataclass(frozen=True, eq=False)
class RowLut:
    values: np.ndarray
    row: int = 0


@dataclass(frozen=True, eq=False)
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    loss: float
    iterations: int
    converged: bool


def build_sample_weights(scales: ScaleSet, row: int, stats=None, mode: Weighting = Weighting.WEIGHTS_ACTIVATIONS_SCALES) -> np.ndarray:
    """k-means sample weights for one row.

    ``stats`` is the per-input-channel mean absolute activation; ``None``
    stands for all ones.
    """
    k = scales.shape[1]
    if stats is None:
        act = np.ones(k, dtype=np.float32)
    else:
        act = np.asarray(stats, dtype=np.float32)
        if act.shape != (k,):
            raise ShapeError(f"activation stats have length {act.size}, row has {k} columns")
        if np.any(act < 0) or not np.all(np.isfinite(act)):
            raise ValueError("activation stats must be finite and non-negative")
    if mode is Weighting.WEIGHTS_ONLY:
        return np.ones(k, dtype=np.float32)
    if mode is Weighting.WEIGHTS_ACTIVATIONS:
        return act.copy()
    alpha_row = scales.alphas[scales.index[row]]
    return (alpha_row * act).astype(np.float32)


def _draw(cdf: np.ndarray, rng: np.random.Generator) -> int:
    total = cdf[-1]
    idx = int(np.searchsorted(cdf, rng.random() * total, side="right"))
    idx = min(idx, len(cdf) - 1)
    # never land on a zero-probability entry at the clipped end
    while idx > 0 and cdf[idx] == cdf[idx - 1]:
        idx -= 1
    return idx


def _pad(distinct: np.ndarray, k: int) -> np.ndarray:
    out = np.empty(k, dtype=np.float32)
    out[: len(distinct)] = distinct
    out[len(distinct) :] = distinct[-1]
    return out


def kmeans_pp_init(samples, weights, k: int, rng: np.random.Generator, local_trials: Optional[int] = None) -> np.ndarray:
    """Weighted k-means++ seeding, returned sorted.

    The first seed is drawn with probability proportional to the sample
    weight, later seeds proportional to ``weight * D^2``. With
    ``local_trials > 1`` several candidates are drawn per step and the one
    that lowers the potential most is kept. If the row has at most ``k``
    distinct (positive-weight) values, those values are returned, padded by
    repeating the largest.
    """
    s = np.asarray(samples, dtype=np.float32)
    w = np.asarray(weights, dtype=np.float64)
    if not np.any(w > 0):
        raise ValueError("k-means++ needs at least one positive sample weight")
    distinct = np.unique(s[w > 0])
    if len(distinct) <= k:
        return _pad(distinct, k)
    trials = local_trials if local_trials is not None else 2 + int(math.log(k))
    x = s.astype(np.float64)

    chosen = [s[_draw(np.cumsum(w), rng)]]
    d2 = (x - chosen[0]) ** 2
    for _ in range(1, k):
        cdf = np.cumsum(w * d2)
        if cdf[-1] <= 0:
            break
        if trials == 1:
            c = _draw(cdf, rng)
            best_d2 = np.minimum(d2, (x - x[c]) ** 2)
        else:
            best_pot = np.inf
            for _ in range(trials):
                cand = _draw(cdf, rng)
                cand_d2 = np.minimum(d2, (x - x[cand]) ** 2)
                pot = float(np.dot(w, cand_d2))
                if pot < best_pot:
                    best_pot, c, best_d2 = pot, cand, cand_d2
        chosen.append(s[c])
        d2 = best_d2
    return np.sort(np.array(chosen, dtype=np.float32))


def random_init(samples, weights, k: int, rng: np.random.Generator) -> np.ndarray:
    """``k`` distinct positive-weight sample values chosen uniformly."""
    s = np.asarray(samples, dtype=np.float32)
    w = np.asarray(weights, dtype=np.float64)
    if not np.any(w > 0):
        raise ValueError("random init needs at least one positive sample weight")
    distinct = np.unique(s[w > 0])
    if len(distinct) <= k:
        return _pad(distinct, k)
    pick = rng.permutation(len(distinct))[:k]
    return np.sort(distinct[pick])


def initial_centroids(samples, weights, k: int, cfg: LearnerConfig, rng: np.random.Generator, grid=None) -> np.ndarray:
    """Starting centroids for one run.

    ``grid`` is the integer grid in the scaled domain used by
    ``Init.INT_GRID``; without it the signed ``log2(k)``-bit grid is used.
    """
    if cfg.init is Init.KMEANS_PP:
        return kmeans_pp_init(samples, weights, k, rng, cfg.local_trials)
    if cfg.init is Init.RANDOM:
        return random_init(samples, weights, k, rng)
    if cfg.init is Init.INT_GRID:
        if grid is None:
            bits = int(round(math.log2(k)))
            if (1 << bits) != k:
                raise ConfigError(f"int grid seeding needs k == 2^bits, got k={k}")
            grid = int_grid(bits).values
        grid = np.asarray(grid, dtype=np.float32)
        if len(grid) != k:
            raise ConfigError(f"int grid has {len(grid)} values, need {k}")
        return np.sort(grid)
    if k != 16:
        raise ConfigError("nf4 seeding needs k == 16")
    return np.array(NF4_VALUES, dtype=np.float32)


def _loss(x: np.ndarray, w: np.ndarray, centroids: np.ndarray, assign: np.ndarray) -> float:
    r = x - centroids.astype(np.float64)[assign]
    return float(np.dot(w, r * r))


def _m_step(x, w, assign, centroids):
    k = len(centroids)
    wsum = np.bincount(assign, weights=w, minlength=k)
    wx = np.bincount(assign, weights=w * x, minlength=k)
    count = np.bincount(assign, minlength=k)
    new = centroids.astype(np.float64).copy()
    weighted = wsum > 0
    new[weighted] = wx[weighted] / wsum[weighted]
    # clusters made only of zero-weight samples take their plain mean
    plain = (~weighted) & (count > 0)
    if np.any(plain):
        xs = np.bincount(assign, weights=x, minlength=k)
        new[plain] = xs[plain] / count[plain]
    return new.astype(np.float32)


def _repair_empty(x, w, centroids, assign):
    """Move each empty centroid onto the sample with the largest weighted error."""
    k = len(centroids)
    for _ in range(k):
        count = np.bincount(assign, minlength=k)
        empty = np.flatnonzero(count == 0)
        if len(empty) == 0:
            break
        err = w * (x - centroids.astype(np.float64)[assign]) ** 2
        worst = int(np.argmax(err))
        if err[worst] <= 0:
            break
        centroids = centroids.copy()
        centroids[empty[0]] = np.float32(x[worst])
        centroids = np.sort(centroids)
        assign = round_to_codebook(x.astype(np.float32), centroids).astype(np.intp)
    return centroids, assign


def _lloyd(s, w, c0, cfg: LearnerConfig, check: bool) -> KMeansResult:
    x = s.astype(np.float64)
    c = np.sort(np.asarray(c0, dtype=np.float32))
    a = round_to_codebook(s, c).astype(np.intp)
    c, a = _repair_empty(x, w, c, a)
    loss = _loss(x, w, c, a)
    converged = fixed_point = False
    it = 0
    while it < cfg.max_iters and not converged:
        it += 1
        new_c = _m_step(x, w, a, c)
        order = np.argsort(new_c, kind="stable")
        new_c = new_c[order]
        relabel = np.empty(len(order), dtype=np.intp)
        relabel[order] = np.arange(len(order))
        prev_a = relabel[a]
        new_a = round_to_codebook(s, new_c).astype(np.intp)
        new_c, new_a = _repair_empty(x, w, new_c, new_a)
        new_loss = _loss(x, w, new_c, new_a)
        if check and new_loss > loss * (1 + 1e-12) + 1e-300:
            raise InvariantError(f"loss increased at iteration {it}: {loss!r} -> {new_loss!r}")
        stable = np.array_equal(new_a, prev_a)
        improved = loss - new_loss
        c, a = new_c, new_a
        if stable or new_loss == 0:
            converged = fixed_point = True
        elif cfg.rel_tol > 0 and improved <= cfg.rel_tol * loss:
            converged = True
        loss = new_loss
    if check:
        _check_solution(x, w, c, a, require_fixed_point=fixed_point)
    return KMeansResult(c, a, loss, it, converged)


def _best_transfer(x, w, c, a, loss):
    """Single-sample move with the largest exact loss decrease, or ``None``.

    Moving sample ``i`` from cluster ``p`` (total weight ``Wp``) to ``q``
    changes the loss by ``Wq*w/(Wq+w) * (x-cq)^2 - Wp*w/(Wp-w) * (x-cp)^2``
    once both means are updated. Lloyd fixed points can still admit such
    moves; taking them escapes shallow local minima.
    """
    k = len(c)
    wsum = np.bincount(a, weights=w, minlength=k)
    count = np.bincount(a, minlength=k)
    cd = c.astype(np.float64)
    wi = w
    wp = wsum[a]
    movable = (wi > 0) & (wp - wi > 0)
    if not np.any(movable):
        return None
    with np.errstate(divide="ignore", invalid="ignore"):
        cost_out = np.where(movable, wp * wi / (wp - wi) * (x - cd[a]) ** 2, 0.0)
        gain_in = wsum[None, :] * wi[:, None] / (wsum[None, :] + wi[:, None]) * (x[:, None] - cd[None, :]) ** 2
    delta = gain_in - cost_out[:, None]
    delta[~movable, :] = np.inf
    delta[np.arange(len(x)), a] = np.inf
    delta[:, count == 0] = np.inf
    i, q = np.unravel_index(int(np.argmin(delta)), delta.shape)
    if not delta[i, q] < -1e-9 * loss:
        return None
    moved = a.copy()
    moved[i] = q
    return _m_step(x, w, moved, c)


def _refine(s, w, res: KMeansResult, cfg: LearnerConfig, check: bool) -> KMeansResult:
    """Alternate single-sample transfers with Lloyd until neither helps."""
    x = s.astype(np.float64)
    for _ in range(cfg.max_iters):
        if res.loss <= 0:
            break
        c = _best_transfer(x, w, res.centroids, res.assignments, res.loss)
        if c is None:
            break
        nxt = _lloyd(s, w, c, cfg, check)
        if not nxt.loss < res.loss:
            break
        res = KMeansResult(nxt.centroids, nxt.assignments, nxt.loss, res.iterations + nxt.iterations, nxt.converged)
    return res


def _check_solution(x, w, c, a, require_fixed_point: bool = True):
    dist = (x[:, None] - c.astype(np.float64)[None, :]) ** 2
    own = dist[np.arange(len(x)), a]
    if np.any(own > dist.min(axis=1)):
        raise InvariantError("a sample is not assigned to its nearest centroid")
    if not require_fixed_point:
        return
    k = len(c)
    wsum = np.bincount(a, weights=w, minlength=k)
    count = np.bincount(a, minlength=k)
    wx = np.bincount(a, weights=w * x, minlength=k)
    xs = np.bincount(a, weights=x, minlength=k)
    for j in range(k):
        if count[j] == 0:
            continue
        mean = wx[j] / wsum[j] if wsum[j] > 0 else xs[j] / count[j]
        if abs(float(c[j]) - mean) > 1e-6 * max(abs(mean), 1e-30) + 1e-30:
            raise InvariantError(f"centroid {j} = {c[j]!r} is not the weighted mean {mean!r} of its cluster")


def weighted_kmeans(samples, weights, k: int, cfg: LearnerConfig = LearnerConfig(), rng: Optional[np.random.Generator] = None,
                    grid=None, check_invariants: bool = False) -> KMeansResult:
    """1-D weighted k-means with ``cfg.restarts`` seeded runs; the lowest loss wins.

    Each Lloyd run stops when assignments no longer change, the loss reaches
    zero, or the relative loss decrease falls to ``cfg.rel_tol`` or below;
    it is then polished by single-sample transfers. The returned
    assignments are always nearest-centroid for the returned centroids. With
    ``check_invariants`` every iteration asserts monotone descent, and the
    final solution is checked for nearest assignment and (when converged by
    stable assignments) the weighted-mean fixed point.
    """
    s = np.asarray(samples, dtype=np.float32).ravel()
    w = np.asarray(weights, dtype=np.float64).ravel()
    if s.shape != w.shape:
        raise ShapeError(f"{len(s)} samples but {len(w)} weights")
    if len(s) == 0:
        raise ValueError("no samples")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("sample weights must be finite and non-negative")
    if not np.any(w > 0):
        raise ValueError("at least one sample weight must be positive")
    if not np.all(np.isfinite(s)):
        raise ValueError("samples must be finite")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if rng is None:
        rng = rng_for_row(0, 0)

    best = None
    for _ in range(cfg.restarts):
        c0 = initial_centroids(s, w, k, cfg, rng, grid)
        res = _refine(s, w, _lloyd(s, w, c0, cfg, check_invariants), cfg, check_invariants)
        if best is None or res.loss < best.loss:
            best = res
    return best


def learn_row_lut(ws_row, weights, cfg: LearnerConfig, rng: np.random.Generator, bits: int = 4, row: int = 0,
                  grid=None, check_invariants: bool = False) -> tuple[RowLut, np.ndarray]:
    """Learn one row's ``2^bits``-entry LUT; returns it with the row's codes."""
    ws_row = np.asarray(ws_row, dtype=np.float32).ravel()
    weights = np.asarray(weights, dtype=np.float64).ravel()
    if ws_row.shape != weights.shape:
        raise ShapeError(f"row has {len(ws_row)} values but {len(weights)} weights")
    res = weighted_kmeans(ws_row, weights, 1 << bits, cfg, rng, grid=grid, check_invariants=check_invariants)
    return RowLut(res.centroids, row), res.assignments.astype(np.uint8)


def default_workers() -> int:
    env = os.environ.get("ANYQ_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"ANYQ_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def quantize_any(w, cfg: QuantConfig, stats=None, workers: Optional[int] = None) -> QuantizedTensor:
    """Quantize ``w`` to a learned per-row LUT format.

    Rows are independent work items, each with its own ``rng_for_row``
    stream, so the result does not depend on ``workers``.
    """
    if cfg.codebook is not CodebookKind.ANY:
        raise ConfigError("quantize_any needs a learned (any-n) format")
    if cfg.granularity.kind not in (GranularityKind.ROW, GranularityKind.GROUP):
        raise ConfigError(f"learned LUTs are per row; {cfg.granularity} scaling is not supported")
    w = as_matrix(w, "weights")
    n, k = w.shape
    if stats is not None:
        stats = np.asarray(stats, dtype=np.float32)
        if stats.shape != (k,):
            raise ShapeError(f"activation stats have length {stats.size}, weights have K={k}")
        if np.any(stats < 0) or not np.all(np.isfinite(stats)):
            raise ValueError("activation stats must be finite and non-negative")

    base = codebook_for(cfg)
    grid = scaled_domain_table(cfg).values
    scales = compute_scales(w, cfg.granularity, cfg.symmetric, base.qmin, base.qmax)
    ws = scale_weights(w, scales)
    lc = cfg.learner

    def work(i: int):
        sw = build_sample_weights(scales, i, stats, lc.weighting)
        if not np.any(sw > 0):
            sw = np.ones(k, dtype=np.float32)
        lut, codes = learn_row_lut(ws[i], sw, lc, rng_for_row(cfg.seed, i), cfg.bits, i, grid)
        return lut.values, codes

    workers = default_workers() if workers is None else max(1, int(workers))
    if workers == 1 or n == 1:
        results = [work(i) for i in range(n)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, range(n)))
    luts = np.stack([r[0] for r in results]).astype(np.float32)
    codes = np.stack([r[1] for r in results]).astype(np.uint8)
    return QuantizedTensor((n, k), cfg, codes, scales.alphas, scales.betas, luts)
