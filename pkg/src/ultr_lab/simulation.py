"""Synthetic ranking world, tunable logging policy and position-based clicks.

The logging policy scores each document with
``alpha * grade / 4 + (1 - alpha) * u`` where ``u ~ Uniform(0, 1)``, so
``alpha`` slides from a random shuffle (0) to a relevance oracle (1).
Clicks follow a position-based model: ``P(click) = exam(k) * attract(g)``
with ``exam(k) = k ** -eta`` and ``attract(g) = eps + (1 - eps)(2^g - 1)/15``.

Every query draws from its own generator keyed on ``(seed, query_id)``, so
results do not depend on generation order.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .data import Impression
from .errors import ValidationError

DEFAULT_GRADE_PROBS = (0.45, 0.30, 0.15, 0.07, 0.03)


def stable_hash64(*parts) -> int:
    """Platform-independent 64-bit hash of the string forms of ``parts``."""
    h = hashlib.blake2b("\x1f".join(str(p) for p in parts).encode("utf-8"), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def query_rng(seed: int, query_id) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, stable_hash64(query_id)])


@dataclass(frozen=True)
class WorldConfig:
    n_queries: int = 2000
    docs_per_query: int = 10
    feature_dim: int = 12
    informative_dims: int = 6
    feature_noise_sigma: float = 0.25
    grade_probs: tuple = DEFAULT_GRADE_PROBS
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "grade_probs", tuple(float(p) for p in self.grade_probs))
        p = np.asarray(self.grade_probs)
        if p.shape != (5,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValidationError(f"grade_probs must be 5 non-negative numbers summing to 1, got {self.grade_probs}")
        if self.n_queries < 1:
            raise ValidationError(f"n_queries must be >= 1, got {self.n_queries}")
        if self.docs_per_query < 2:
            raise ValidationError(f"docs_per_query must be >= 2, got {self.docs_per_query}")
        if not 1 <= self.informative_dims <= self.feature_dim:
            raise ValidationError(
                f"informative_dims must lie in 1..feature_dim ({self.feature_dim}), got {self.informative_dims}")
        if not self.feature_noise_sigma >= 0:
            raise ValidationError(f"feature_noise_sigma must be >= 0, got {self.feature_noise_sigma}")


@dataclass(frozen=True)
class PolicyConfig:
    alpha: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError(f"alpha must lie in [0, 1], got {self.alpha}")


@dataclass(frozen=True)
class ClickConfig:
    eta: float = 1.0
    epsilon: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.eta >= 0:
            raise ValidationError(f"eta must be >= 0, got {self.eta}")
        if not 0.0 <= self.epsilon < 1.0:
            raise ValidationError(f"epsilon must lie in [0, 1), got {self.epsilon}")

    def examination(self, positions) -> np.ndarray:
        return (1.0 / np.asarray(positions, dtype=np.float64)) ** self.eta

    def attractiveness(self, grades) -> np.ndarray:
        g = np.asarray(grades, dtype=np.float64)
        return self.epsilon + (1.0 - self.epsilon) * (2.0 ** g - 1.0) / 15.0

    def click_probability(self, positions, grades) -> np.ndarray:
        return self.examination(positions) * self.attractiveness(grades)


@dataclass(frozen=True, eq=False)
class SyntheticWorld:
    config: WorldConfig
    query_ids: tuple
    doc_ids: tuple
    grades: np.ndarray = field(repr=False)  # (n_queries, docs_per_query)
    features: np.ndarray = field(repr=False)  # (n_queries, docs_per_query, feature_dim)


def _doc_ids(n: int) -> tuple:
    width = len(str(n - 1))
    return tuple(f"d{j:0{width}d}" for j in range(n))


def generate_world(config: WorldConfig) -> SyntheticWorld:
    """Draw grades i.i.d. from ``grade_probs`` and grade-correlated features.

    The first ``informative_dims`` features of a grade-``g`` document are
    ``Normal(g/4, sigma)``; the rest are standard normal noise.
    """
    n, d, m = config.docs_per_query, config.feature_dim, config.informative_dims
    qids = tuple(f"q{i}" for i in range(config.n_queries))
    grades = np.empty((config.n_queries, n), dtype=np.int64)
    feats = np.empty((config.n_queries, n, d))
    for i, qid in enumerate(qids):
        rng = query_rng(config.seed, qid)
        g = rng.choice(5, size=n, p=config.grade_probs)
        grades[i] = g
        feats[i, :, :m] = g[:, None] / 4.0 + config.feature_noise_sigma * rng.standard_normal((n, m))
        feats[i, :, m:] = rng.standard_normal((n, d - m))
    grades.setflags(write=False)
    feats.setflags(write=False)
    return SyntheticWorld(config, qids, _doc_ids(n), grades, feats)


def logging_policy_order(grades: np.ndarray, u: np.ndarray, alpha: float) -> np.ndarray:
    """Document indices sorted by policy score, ties to the lower index."""
    s = alpha * (grades / 4.0) + (1.0 - alpha) * u
    return np.lexsort((np.arange(len(s)), -s))


def apply_logging_policy(world: SyntheticWorld, policy: PolicyConfig) -> list[Impression]:
    """Rank every query with the logging policy.

    Impression entries are stored in logged order (position 1 first) and
    carry the true grades; clicks are left unset.
    """
    out = []
    for i, qid in enumerate(world.query_ids):
        g = world.grades[i]
        u = query_rng(policy.seed, qid).random(len(g))
        order = logging_policy_order(g, u, policy.alpha)
        out.append(Impression(
            qid,
            tuple(world.doc_ids[j] for j in order),
            world.features[i, order],
            np.arange(1, len(order) + 1),
            None,
            g[order],
        ))
    return out


def simulate_clicks(impressions, click_cfg: ClickConfig) -> list[Impression]:
    """Sample ``clicked ~ Bernoulli(exam(position) * attract(grade))``."""
    out = []
    for imp in impressions:
        if imp.grades is None:
            raise ValidationError(f"query {imp.query_id}: grades required to simulate clicks")
        p = click_cfg.click_probability(imp.positions, imp.grades)
        draws = query_rng(click_cfg.seed, imp.query_id).random(len(imp))
        out.append(imp.with_clicks(draws < p))
    return out


def measure_position_relevance_correlation(impressions) -> float:
    """Pearson correlation between true grade and reciprocal position."""
    g = np.concatenate([imp.grades for imp in impressions]).astype(np.float64)
    r = 1.0 / np.concatenate([imp.positions for imp in impressions])
    if g.std() == 0.0 or r.std() == 0.0:
        raise ValidationError("correlation undefined: zero variance in grades or positions")
    return float(np.corrcoef(g, r)[0, 1])


def simulate(world_cfg: WorldConfig, policy_cfg: PolicyConfig, click_cfg: ClickConfig):
    """Convenience wrapper: world, logged rankings and clicks in one call."""
    world = generate_world(world_cfg)
    return world, simulate_clicks(apply_logging_policy(world, policy_cfg), click_cfg)
