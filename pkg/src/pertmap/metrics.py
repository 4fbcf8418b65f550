"""Distributional evaluation metrics.

Two-sample metrics compare a predicted post-perturbation sample matrix
against the ground-truth one: entropic optimal transport (Sinkhorn
divergence on the squared-Euclidean cost, reported on the square-root
scale), multi-scale RBF maximum mean discrepancy, RMSE of the per-gene
means, the transposed rank across conditions, the magnitude ratio of
predicted to true effect sizes, and the Pearson correlation of per-gene
variances.  The differential-expression pipeline combines per-gene Wilcoxon
rank-sum tests, Benjamini-Hochberg correction, fold-change thresholds, and
precision-recall sweeps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import (
    DegenerateEffectError,
    InvalidArgumentError,
    NumericalFailureError,
    UndefinedCorrelationError,
    UndefinedMetricError,
)

_LOG_FC_PSEUDOCOUNT = 1e-6
_P_FLOOR = 1e-300


@dataclass(frozen=True)
class MetricConfig:
    sinkhorn_epsilon: float = 0.1
    mmd_gammas: tuple[float, ...] = (10.0, 1.0, 0.1, 0.01, 0.001)
    deg_tau_l: float = 0.2
    deg_tau_p: float = 2.0
    sinkhorn_max_iters: int = 20_000
    # Sup-norm bound on the relative marginal violation.  Overlapping clouds
    # at small epsilon stall near 1e-5, so the default stays above that.
    sinkhorn_tol: float = 1e-4

    def __post_init__(self):
        if self.sinkhorn_epsilon <= 0:
            raise InvalidArgumentError("sinkhorn_epsilon must be positive")
        if any(g <= 0 for g in self.mmd_gammas):
            raise InvalidArgumentError("mmd_gammas must be positive")


# -- entropic optimal transport -------------------------------------------


def _pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _logsumexp(m: np.ndarray, axis: int) -> np.ndarray:
    mx = m.max(axis=axis, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    return (mx + np.log(np.exp(m - mx).sum(axis=axis, keepdims=True))).squeeze(axis)


def _entropic_ot_value(cost: np.ndarray, epsilon: float, max_iters: int, tol: float) -> float:
    """Entropy-regularized transport value between uniform marginals.

    Runs log-domain Sinkhorn with an epsilon-scaling warm start (halving
    from a tenth of the cost range down to the target), then evaluates
    <P, C> + eps * (sum P log P + 1) at the optimum.
    """
    n, m = cost.shape
    log_a = -math.log(n)
    log_b = -math.log(m)
    f = np.zeros(n)
    g = np.zeros(m)

    schedule = []
    eps_hi = float(cost.max()) / 10.0
    while eps_hi > epsilon * 2.0:
        schedule.append(eps_hi)
        eps_hi /= 2.0
    schedule.append(epsilon)

    iters_used = 0
    for eps_cur in schedule:
        final = eps_cur == epsilon
        budget = max_iters - iters_used if final else 30
        converged = not final
        residual = math.inf
        for _ in range(max(budget, 1)):
            iters_used += 1
            f = -eps_cur * _logsumexp((g[None, :] - cost) / eps_cur + log_b, axis=1)
            g = -eps_cur * _logsumexp((f[:, None] - cost) / eps_cur + log_a, axis=0)
            # Column marginals are exact right after the g update; the row
            # marginals carry the remaining violation.
            row_over_a = np.exp(
                _logsumexp((f[:, None] + g[None, :] - cost) / eps_cur + log_b, axis=1)
            )
            residual = float(np.max(np.abs(row_over_a - 1.0)))
            if final and residual < tol:
                converged = True
                break
        if final and not converged:
            raise NumericalFailureError(
                f"Sinkhorn did not converge in {max_iters} iterations (residual {residual:.3e})"
            )

    log_p = (f[:, None] + g[None, :] - cost) / epsilon + log_a + log_b
    p = np.exp(log_p)
    transport = float((p * cost).sum())
    entropy_term = float((p * np.where(p > 0, log_p, 0.0)).sum())
    return transport + epsilon * (entropy_term + 1.0)


def sinkhorn_divergence(y: np.ndarray, y_hat: np.ndarray, cfg: MetricConfig = MetricConfig()) -> float:
    """Debiased entropic transport distance, square-root scale.

    Computes the divergence on the squared-cost scale,
    ot(Y, Yhat) - ot(Y, Y)/2 - ot(Yhat, Yhat)/2, then reports
    sqrt(max(., 0)) so magnitudes are comparable to a Euclidean distance.
    """
    y = np.atleast_2d(np.asarray(y, dtype=float))
    y_hat = np.atleast_2d(np.asarray(y_hat, dtype=float))
    if y.shape[0] < 1 or y_hat.shape[0] < 1:
        raise InvalidArgumentError("both samples must be non-empty")
    eps, iters, tol = cfg.sinkhorn_epsilon, cfg.sinkhorn_max_iters, cfg.sinkhorn_tol
    cross = _entropic_ot_value(_pairwise_sq_dists(y, y_hat), eps, iters, tol)
    self_y = _entropic_ot_value(_pairwise_sq_dists(y, y), eps, iters, tol)
    self_h = _entropic_ot_value(_pairwise_sq_dists(y_hat, y_hat), eps, iters, tol)
    return math.sqrt(max(cross - 0.5 * self_y - 0.5 * self_h, 0.0))


# -- kernel two-sample distance --------------------------------------------


def mmd_rbf(y: np.ndarray, y_hat: np.ndarray, cfg: MetricConfig = MetricConfig()) -> float:
    """RBF-kernel MMD, biased V-statistic, averaged over the length scales.

    Returns sqrt(mean_gamma MMD^2(gamma)); the biased estimator is
    non-negative and exactly zero for identical inputs.
    """
    y = np.atleast_2d(np.asarray(y, dtype=float))
    y_hat = np.atleast_2d(np.asarray(y_hat, dtype=float))
    d_yy = _pairwise_sq_dists(y, y)
    d_hh = _pairwise_sq_dists(y_hat, y_hat)
    d_yh = _pairwise_sq_dists(y, y_hat)
    total = 0.0
    for gamma in cfg.mmd_gammas:
        mmd2 = (
            np.exp(-gamma * d_yy).mean()
            + np.exp(-gamma * d_hh).mean()
            - 2.0 * np.exp(-gamma * d_yh).mean()
        )
        total += max(float(mmd2), 0.0)
    return math.sqrt(total / len(cfg.mmd_gammas))


# -- moment and ranking metrics --------------------------------------------


def rmse_means(y: np.ndarray, y_hat: np.ndarray) -> float:
    """Root mean squared error between the per-gene means."""
    mu = np.asarray(y, dtype=float).mean(axis=0)
    mu_hat = np.asarray(y_hat, dtype=float).mean(axis=0)
    if mu.shape != mu_hat.shape:
        raise InvalidArgumentError("gene dimensions do not match")
    return float(np.sqrt(np.mean((mu_hat - mu) ** 2)))


def transposed_rank_contributions(
    predicted_means: np.ndarray, observed_means: np.ndarray
) -> np.ndarray:
    """Per-condition transposed-rank terms.

    Term i is the fraction of non-matching observed means at least as close
    (Euclidean, ties count) to prediction i as its matched observed mean.
    """
    pred = np.atleast_2d(np.asarray(predicted_means, dtype=float))
    obs = np.atleast_2d(np.asarray(observed_means, dtype=float))
    if pred.shape != obs.shape:
        raise InvalidArgumentError("prediction and observation lists must align")
    p = pred.shape[0]
    if p < 2:
        raise InvalidArgumentError("transposed rank needs at least two conditions")
    dists = np.sqrt(_pairwise_sq_dists(pred, obs))
    matched = np.diag(dists)
    closer = dists <= matched[:, None]
    np.fill_diagonal(closer, False)
    return closer.sum(axis=1) / (p - 1)


def transposed_rank(predicted_means: np.ndarray, observed_means: np.ndarray) -> float:
    return float(transposed_rank_contributions(predicted_means, observed_means).mean())


def magnitude_ratio(
    y_obs: np.ndarray,
    y_int: np.ndarray,
    y_hat: np.ndarray,
    cfg: MetricConfig = MetricConfig(),
) -> float:
    """Predicted effect size over true effect size, both measured as
    transport distances from the observational sample."""
    denominator = sinkhorn_divergence(y_obs, y_int, cfg)
    if denominator < 1e-9:
        raise DegenerateEffectError(
            "observational and interventional samples are indistinguishable"
        )
    return sinkhorn_divergence(y_obs, y_hat, cfg) / denominator


def variance_correlation(y_int: np.ndarray, y_hat: np.ndarray) -> float:
    """Pearson correlation between the per-gene sample variances."""
    v_int = np.asarray(y_int, dtype=float).var(axis=0, ddof=1)
    v_hat = np.asarray(y_hat, dtype=float).var(axis=0, ddof=1)
    if v_int.shape != v_hat.shape or v_int.size < 2:
        raise InvalidArgumentError("variance vectors must align and have length >= 2")
    if np.ptp(v_int) == 0.0 or np.ptp(v_hat) == 0.0:
        raise UndefinedCorrelationError("a variance vector is constant")
    return float(np.corrcoef(v_int, v_hat)[0, 1])


# -- differential expression -------------------------------------------------


def wilcoxon_rank_sum(x: np.ndarray, y: np.ndarray) -> float:
    """Two-sided rank-sum p-value, normal approximation.

    Uses mid-ranks for ties, the tie-corrected variance, and a continuity
    correction.  Degenerate inputs (all values identical) return 1.
    """
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    nx, ny = x.size, y.size
    if nx < 1 or ny < 1:
        raise InvalidArgumentError("both samples must be non-empty")
    combined = np.concatenate([x, y])
    if np.all(combined == combined[0]):
        return 1.0
    ranks = rankdata(combined)
    u = float(ranks[:nx].sum()) - nx * (nx + 1) / 2.0
    n = nx + ny
    _, counts = np.unique(combined, return_counts=True)
    tie_term = float((counts**3 - counts).sum())
    var_u = nx * ny / 12.0 * ((n + 1) - tie_term / (n * (n - 1)))
    if var_u <= 0.0:
        return 1.0
    mean_u = nx * ny / 2.0
    delta = u - mean_u
    z = (delta - 0.5 * np.sign(delta)) / math.sqrt(var_u) if delta != 0.0 else 0.0
    return min(1.0, math.erfc(abs(z) / math.sqrt(2.0)))


def bh_adjust(pvalues: Sequence[float]) -> np.ndarray:
    """Benjamini-Hochberg adjusted p-values (monotone, capped at 1)."""
    p = np.asarray(pvalues, dtype=float)
    m = p.size
    order = np.argsort(p, kind="stable")
    scaled = p[order] * m / np.arange(1, m + 1)
    adjusted_sorted = np.minimum.accumulate(scaled[::-1])[::-1]
    adjusted = np.empty(m)
    adjusted[order] = np.minimum(adjusted_sorted, 1.0)
    return adjusted


@dataclass(frozen=True)
class DegStats:
    neglog10_p: np.ndarray  # -log10 of BH-adjusted p-values, per gene
    log2_fold_change: np.ndarray


def deg_stats(y_ref: np.ndarray, y_alt: np.ndarray) -> DegStats:
    """Per-gene Wilcoxon significance and log2 fold-change of the means.

    Means are clamped at zero before the pseudocount is added, so the
    fold-change stays defined for real-valued (not strictly positive) data.
    """
    y_ref = np.atleast_2d(np.asarray(y_ref, dtype=float))
    y_alt = np.atleast_2d(np.asarray(y_alt, dtype=float))
    if y_ref.shape[1] != y_alt.shape[1]:
        raise InvalidArgumentError("gene dimensions do not match")
    if y_ref.shape[0] < 1 or y_alt.shape[0] < 1:
        raise InvalidArgumentError("both batches must be non-empty")
    d = y_ref.shape[1]
    pvals = np.array([wilcoxon_rank_sum(y_ref[:, g], y_alt[:, g]) for g in range(d)])
    padj = bh_adjust(pvals)
    neglog = -np.log10(np.maximum(padj, _P_FLOOR))
    mu_ref = np.maximum(y_ref.mean(axis=0), 0.0) + _LOG_FC_PSEUDOCOUNT
    mu_alt = np.maximum(y_alt.mean(axis=0), 0.0) + _LOG_FC_PSEUDOCOUNT
    return DegStats(neglog10_p=neglog, log2_fold_change=np.log2(mu_alt / mu_ref))


def deg_labels(
    y_obs: np.ndarray, y_int: np.ndarray, cfg: MetricConfig = MetricConfig()
) -> tuple[np.ndarray, DegStats]:
    """Ground-truth differential-expression labels.

    A gene is differentially expressed when the adjusted significance
    exceeds tau_p and the absolute log2 fold-change exceeds tau_l.
    """
    stats = deg_stats(y_obs, y_int)
    labels = (stats.neglog10_p > cfg.deg_tau_p) & (
        np.abs(stats.log2_fold_change) > cfg.deg_tau_l
    )
    return labels.astype(int), stats


def deg_scores(
    y_obs: np.ndarray, y_hat: np.ndarray, cfg: MetricConfig = MetricConfig()
) -> np.ndarray:
    """Ranking scores |log2 fold-change| gated by predicted significance."""
    stats = deg_stats(y_obs, y_hat)
    return np.abs(stats.log2_fold_change) * (stats.neglog10_p > cfg.deg_tau_p)


def target_only_scores(d: int, target: int) -> np.ndarray:
    """Baseline score vector: positive only at the perturbed gene."""
    scores = np.zeros(d)
    scores[target] = 1.0
    return scores


@dataclass(frozen=True)
class PrCurve:
    recalls: np.ndarray
    precisions: np.ndarray
    auprc: float
    baseline_rate: float  # positives / total, the random-ranking AUPRC
    points: list = field(repr=False, default_factory=list)


def auprc_curve(scores: np.ndarray, labels: np.ndarray) -> PrCurve:
    """Precision-recall sweep over the distinct score values.

    Classifiers are score > r for every distinct score r (tied genes enter
    together) plus an include-everything block; empty prediction sets are
    skipped.  The area is the rectangular integral over recall.
    """
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).astype(bool).ravel()
    if scores.shape != labels.shape:
        raise InvalidArgumentError("scores and labels must align")
    positives = int(labels.sum())
    if positives == 0:
        raise UndefinedMetricError("no positive labels; AUPRC is undefined")

    thresholds = np.concatenate([np.unique(scores)[::-1], [-np.inf]])
    recalls, precisions = [], []
    for r in thresholds:
        predicted = scores > r
        n_pred = int(predicted.sum())
        if n_pred == 0:
            continue
        tp = int((predicted & labels).sum())
        recalls.append(tp / positives)
        precisions.append(tp / n_pred)

    auprc = 0.0
    prev_recall = 0.0
    for rec, prec in zip(recalls, precisions):
        auprc += (rec - prev_recall) * prec
        prev_recall = rec
    return PrCurve(
        recalls=np.array(recalls),
        precisions=np.array(precisions),
        auprc=float(auprc),
        baseline_rate=positives / labels.size,
        points=list(zip(recalls, precisions)),
    )
