"""Ranking metrics, confidence intervals, the random baseline and the
logging-policy evaluations (accuracy against logged order, strength against
expert grades), plus per-bucket analysis by estimated policy quality.

DCG uses exponential gain ``2^g - 1`` and discount ``1 / log2(i + 1)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .errors import ValidationError

Z_95 = 1.959964


def dcg_at_k(grades, k: int) -> float:
    """``sum_{i<=min(k,n)} (2^g_i - 1) / log2(i + 1)`` for grades in rank order."""
    if k < 1:
        raise ValidationError("k must be >= 1")
    g = np.asarray(grades, dtype=np.float64)[:k]
    return float(np.sum((2.0 ** g - 1.0) / np.log2(np.arange(2, g.size + 2))))


def ndcg_at_k(grades, k: int) -> float:
    """DCG normalised by the ideal (descending) ordering; 0.0 if that is 0."""
    ideal = dcg_at_k(np.sort(np.asarray(grades))[::-1], k)
    return dcg_at_k(grades, k) / ideal if ideal > 0 else 0.0


def batch_dcg(values: np.ndarray, k: int, gains: bool = False) -> np.ndarray:
    """Row-wise DCG@k of a ``(Q, n)`` matrix already in ranked order."""
    v = np.asarray(values, dtype=np.float64)[:, :k]
    gain = v if gains else 2.0 ** v - 1.0
    return gain @ (1.0 / np.log2(np.arange(2, v.shape[1] + 2)))


def grouped_ndcg(scores, grades, group_sizes, k: int = 10) -> np.ndarray:
    """Per-query nDCG@k of score-descending rankings (ties keep input order)."""
    s_all = np.asarray(scores, dtype=np.float64)
    g_all = np.asarray(grades, dtype=np.float64)
    sizes = np.asarray(group_sizes, dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    out = np.zeros(len(sizes))
    for n in np.unique(sizes):
        qs = np.flatnonzero(sizes == n)
        idx = offsets[qs][:, None] + np.arange(n)
        s, g = s_all[idx], g_all[idx]
        ranked = np.take_along_axis(g, np.argsort(-s, axis=1, kind="stable"), axis=1)
        ideal = batch_dcg(-np.sort(-g, axis=1), k)
        dcg = batch_dcg(ranked, k)
        out[qs] = np.divide(dcg, ideal, out=np.zeros_like(dcg), where=ideal > 0)
    return out


def rank_order(scores, doc_ids=None) -> np.ndarray:
    """Indices by score descending, ties broken by ascending doc id."""
    s = np.asarray(scores, dtype=np.float64)
    tie = np.arange(len(s)) if doc_ids is None else np.asarray(doc_ids)
    return np.lexsort((tie, -s))


# --- confidence intervals ---------------------------------------------------


@dataclass(frozen=True, eq=False)
class MetricResult:
    per_query: np.ndarray = field(repr=False)
    mean: float
    ci_half_width: float
    n_queries: int
    level: float = 0.95
    ci_low: float | None = None
    ci_high: float | None = None

    def __post_init__(self):
        if self.ci_low is None:
            object.__setattr__(self, "ci_low", self.mean - self.ci_half_width)
        if self.ci_high is None:
            object.__setattr__(self, "ci_high", self.mean + self.ci_half_width)

    def disjoint_from(self, other: "MetricResult") -> bool:
        return self.ci_low > other.ci_high or other.ci_low > self.ci_high


def mean_with_ci(values, level: float = 0.95, method: str = "normal", n_resamples: int = 2000,
                 seed: int = 0) -> MetricResult:
    """Mean of per-query values with a two-sided confidence interval.

    ``normal`` uses ``z * s / sqrt(n)`` (sample std with ``n - 1``);
    ``bootstrap`` uses the percentile interval of resampled means.
    """
    v = np.asarray(values, dtype=np.float64)
    n = v.size
    if n < 2:
        raise ValidationError(f"need at least 2 values for a confidence interval, got {n}")
    mean = float(np.mean(v))
    if method == "normal":
        z = Z_95 if level == 0.95 else float(norm.ppf(0.5 + level / 2.0))
        sd = 0.0 if np.ptp(v) == 0 else float(np.std(v, ddof=1))  # constant samples: exactly zero width
        return MetricResult(v, mean, float(z * sd / np.sqrt(n)), n, level)
    if method == "bootstrap":
        rng = np.random.default_rng(seed)
        means = v[rng.integers(0, n, size=(n_resamples, n))].mean(axis=1)
        lo, hi = np.quantile(means, [0.5 - level / 2.0, 0.5 + level / 2.0])
        return MetricResult(v, mean, float((hi - lo) / 2.0), n, level, float(lo), float(hi))
    raise ValidationError(f"unknown CI method {method!r}")


def paired_difference(a: MetricResult, b: MetricResult, level: float = 0.95) -> MetricResult:
    """CI of the per-query difference ``a - b`` over the same queries."""
    if a.n_queries != b.n_queries:
        raise ValidationError("paired comparison needs results over the same queries")
    return mean_with_ci(a.per_query - b.per_query, level)


# --- rankers and policy evaluations -----------------------------------------


def random_ranker(queries, seed: int = 0) -> list:
    """A uniformly random permutation (ranked doc indices) per query.

    Each query draws from its own stream keyed on ``(seed, query_id)``.
    """
    from .simulation import query_rng

    return [query_rng(seed, q.query_id).permutation(len(q)) for q in queries]


def random_scores(queries, seed: int = 0) -> list:
    """Scores whose descending order reproduces :func:`random_ranker`."""
    out = []
    for perm in random_ranker(queries, seed):
        s = np.empty(len(perm))
        s[perm] = np.arange(len(perm), 0, -1, dtype=np.float64)
        out.append(s)
    return out


def per_query_ndcg(score_lists, queries, k: int = 10, grade_attr: str = "grades") -> np.ndarray:
    vals = np.empty(len(queries))
    for i, (s, q) in enumerate(zip(score_lists, queries)):
        grades = np.asarray(getattr(q, grade_attr))
        if len(s) != len(grades):
            raise ValidationError(f"query {q.query_id}: {len(s)} scores for {len(grades)} documents")
        vals[i] = ndcg_at_k(grades[rank_order(s, q.doc_ids)], k)
    return vals


def per_query_dcg(score_lists, queries, k: int = 10) -> np.ndarray:
    return np.array([dcg_at_k(np.asarray(q.grades)[rank_order(s, q.doc_ids)], k)
                     for s, q in zip(score_lists, queries)])


def proxy_grades(positions, top: int = 5) -> np.ndarray:
    """Relevance proxy of a logged order: ``min(4, max(0, top - position))``."""
    return np.clip(top - np.asarray(positions, dtype=np.int64), 0, 4)


def policy_accuracy(score_lists, impressions, k: int = 10, top: int = 5, **ci) -> MetricResult:
    """How well estimator scores reproduce the logged order (nDCG@k of proxy grades)."""
    vals = np.empty(len(impressions))
    for i, (s, imp) in enumerate(zip(score_lists, impressions)):
        if len(s) != len(imp):
            raise ValidationError(f"query {imp.query_id}: {len(s)} scores for {len(imp)} documents")
        vals[i] = ndcg_at_k(proxy_grades(imp.positions, top)[rank_order(s, imp.doc_ids)], k)
    return mean_with_ci(vals, **ci)


def policy_strength(score_lists, queries, k: int = 10, **ci) -> MetricResult:
    """Ranking quality of scores against expert grades: mean nDCG@k with CI."""
    return mean_with_ci(per_query_ndcg(score_lists, queries, k), **ci)


# --- bucket analysis --------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BucketReport:
    boundaries: list  # (low, high) of the estimated-policy nDCG per bucket
    assignment: np.ndarray
    results: list  # per bucket: {model: MetricResult or None}
    relative: list  # per bucket: {model: mean / random mean}
    counts: list


def equal_count_buckets(values, n_buckets: int) -> np.ndarray:
    """Quantile bucket per value; equal values share the lowest bucket any of them got."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    bucket = np.empty(len(v), dtype=np.int64)
    bucket[order] = np.arange(len(v)) * n_buckets // len(v)
    for val in np.unique(v):
        same = v == val
        bucket[same] = bucket[same].min()
    return bucket


def _summary(vals) -> MetricResult | None:
    if len(vals) == 0:
        return None
    if len(vals) == 1:
        return MetricResult(np.asarray(vals), float(vals[0]), float("nan"), 1)
    return mean_with_ci(vals)


def bucket_analysis(model_scores: dict, queries, policy_scores, n_buckets: int = 5, k: int = 10,
                    random_name: str = "random") -> BucketReport:
    """Group queries by estimated-policy nDCG@k and compare models per group.

    ``model_scores`` maps model name to per-query score arrays and must
    include ``random_name``; relative values divide by its bucket mean.
    """
    if len(queries) < n_buckets:
        raise ValidationError(f"{len(queries)} queries cannot fill {n_buckets} buckets")
    if random_name not in model_scores:
        raise ValidationError(f"model scores must include the {random_name!r} baseline")
    policy_ndcg = per_query_ndcg(policy_scores, queries, k)
    assignment = equal_count_buckets(policy_ndcg, n_buckets)
    per_model = {name: per_query_ndcg(s, queries, k) for name, s in model_scores.items()}
    boundaries, results, relative, counts = [], [], [], []
    for b in range(n_buckets):
        members = assignment == b
        counts.append(int(members.sum()))
        vals = policy_ndcg[members]
        boundaries.append((float(vals.min()), float(vals.max())) if vals.size else (float("nan"), float("nan")))
        res = {name: _summary(v[members]) for name, v in per_model.items()}
        rnd = res[random_name]
        rel = {}
        for name, r in res.items():
            if r is None or rnd is None or rnd.mean == 0:
                rel[name] = float("nan")
            else:
                rel[name] = r.mean / rnd.mean
        results.append(res)
        relative.append(rel)
    return BucketReport(boundaries, assignment, results, relative, counts)


# --- report files -----------------------------------------------------------

METRIC_COLUMNS = ("model", "metric", "k", "mean", "ci_low", "ci_high", "n")
BUCKET_COLUMNS = ("bucket_index", "boundary_low", "boundary_high", "model", "mean", "relative_to_random", "n")


def _fmt(x) -> str:
    return repr(float(x))


def write_metric_csv(path, rows) -> None:
    """``rows`` are ``(model, metric, k, MetricResult)`` tuples."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for model, metric, k, r in rows:
            w.writerow([model, metric, k, _fmt(r.mean), _fmt(r.ci_low), _fmt(r.ci_high), r.n_queries])


def write_bucket_csv(path, report: BucketReport) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BUCKET_COLUMNS)
        for b, (lo, hi) in enumerate(report.boundaries):
            for name, r in report.results[b].items():
                mean = r.mean if r is not None else float("nan")
                w.writerow([b, _fmt(lo), _fmt(hi), name, _fmt(mean), _fmt(report.relative[b][name]), report.counts[b]])
