import numpy as np
import pytest

from ultr_lab.data import Impression
from ultr_lab.errors import ValidationError
from ultr_lab.simulation import (
    ClickConfig,
    PolicyConfig,
    WorldConfig,
    apply_logging_policy,
    generate_world,
    logging_policy_order,
    measure_position_relevance_correlation,
    simulate,
    simulate_clicks,
)


def test_degenerate_grade_distribution():
    w = generate_world(WorldConfig(n_queries=20, grade_probs=(1, 0, 0, 0, 0)))
    assert np.all(w.grades == 0)


def test_noiseless_features_are_grade_means():
    w = generate_world(WorldConfig(n_queries=50, feature_dim=4, informative_dims=4, feature_noise_sigma=0.0,
                                   grade_probs=(0, 0, 0, 0, 1)))
    assert np.all(w.features == 1.0)


def test_uniform_grade_frequencies():
    w = generate_world(WorldConfig(n_queries=1000, grade_probs=(0.2,) * 5, seed=4))
    freq = np.bincount(w.grades.ravel(), minlength=5) / w.grades.size
    assert np.all(np.abs(freq - 0.2) <= 3 * np.sqrt(0.2 * 0.8 / 10000))


@pytest.mark.parametrize("kwargs", [dict(docs_per_query=1), dict(n_queries=0), dict(informative_dims=0),
                                    dict(informative_dims=13), dict(grade_probs=(0.5, 0.5, 0.1, 0, 0)),
                                    dict(feature_noise_sigma=-1.0)])
def test_world_config_validation(kwargs):
    with pytest.raises(ValidationError):
        WorldConfig(**kwargs)


@pytest.mark.parametrize("kwargs,cls", [(dict(alpha=1.5), PolicyConfig), (dict(eta=-1), ClickConfig),
                                        (dict(epsilon=1.0), ClickConfig)])
def test_policy_click_config_validation(kwargs, cls):
    with pytest.raises(ValidationError):
        cls(**kwargs)


def test_world_regeneration_is_bit_identical():
    a, b = generate_world(WorldConfig(n_queries=30, seed=9)), generate_world(WorldConfig(n_queries=30, seed=9))
    assert a.grades.tobytes() == b.grades.tobytes() and a.features.tobytes() == b.features.tobytes()


def test_generation_is_order_independent():
    # a query's draws depend only on (seed, query_id), not on how many queries precede it
    small = generate_world(WorldConfig(n_queries=5, seed=2))
    big = generate_world(WorldConfig(n_queries=50, seed=2))
    np.testing.assert_array_equal(small.features, big.features[:5])


def test_oracle_policy_sorts_by_grade():
    order = logging_policy_order(np.array([1, 4, 0, 3, 2]), np.random.default_rng(0).random(5), 1.0)
    np.testing.assert_array_equal(order, [1, 3, 4, 0, 2])


def test_oracle_policy_ties_break_by_doc_id():
    w = generate_world(WorldConfig(n_queries=5, grade_probs=(0, 0, 1, 0, 0)))
    for imp in apply_logging_policy(w, PolicyConfig(alpha=1.0)):
        assert list(imp.doc_ids) == sorted(imp.doc_ids)


def test_random_policy_first_position_uniform():
    w = generate_world(WorldConfig(n_queries=10000, feature_dim=2, informative_dims=1, seed=1))
    imps = apply_logging_policy(w, PolicyConfig(alpha=0.0, seed=3))
    n = w.config.docs_per_query
    first = np.bincount([int(i.doc_ids[0][1:]) for i in imps], minlength=n) / len(imps)
    tol = 3 * np.sqrt((1 / n) * (1 - 1 / n) / 10000)
    assert np.all(np.abs(first - 1 / n) <= tol)


def _imps(positions, grades):
    n = len(positions)
    return [Impression("q", tuple(f"d{i}" for i in range(n)), np.zeros((n, 1)), positions, None, grades)]


def test_click_probability_certain_and_impossible():
    cfg = ClickConfig(eta=0.0, epsilon=0.0, seed=1)
    imps = [_imps([1, 2, 3], [4, 0, 4])[0]]
    imps = [Impression(f"q{i}", i0.doc_ids, i0.features, i0.positions, None, i0.grades) for i in range(200)
            for i0 in imps]
    out = simulate_clicks(imps, cfg)
    clicks = np.stack([o.clicks for o in out])
    assert clicks[:, [0, 2]].all() and not clicks[:, 1].any()


def test_ctr_at_position_two():
    n = 20000
    imps = [Impression(f"q{i}", ("a", "b"), np.zeros((2, 1)), [2, 1], None, [4, 0]) for i in range(n)]
    clicks = np.array([o.clicks[0] for o in simulate_clicks(imps, ClickConfig(eta=1.0, seed=5))])
    assert abs(clicks.mean() - 0.5) <= 3 * np.sqrt(0.25 / n)


def test_click_marginals_per_cell():
    _, imps = simulate(WorldConfig(n_queries=8000, feature_dim=2, informative_dims=1, seed=11),
                       PolicyConfig(alpha=0.5, seed=12), ClickConfig(eta=1.0, epsilon=0.05, seed=13))
    pos = np.concatenate([i.positions for i in imps])
    g = np.concatenate([i.grades for i in imps])
    c = np.concatenate([i.clicks for i in imps])
    cfg = ClickConfig(eta=1.0, epsilon=0.05)
    checked = 0
    for k in range(1, 11):
        for grade in range(5):
            cell = (pos == k) & (g == grade)
            if cell.sum() < 1000:
                continue
            p = cfg.click_probability(k, grade)
            assert abs(c[cell].mean() - p) <= 3 * np.sqrt(p * (1 - p) / cell.sum())
            checked += 1
    assert checked >= 10


def test_simulation_is_deterministic():
    args = (WorldConfig(n_queries=40, seed=1), PolicyConfig(0.7, seed=2), ClickConfig(seed=3))
    _, a = simulate(*args)
    _, b = simulate(*args)
    for x, y in zip(a, b):
        assert x.doc_ids == y.doc_ids
        assert x.clicks.tobytes() == y.clicks.tobytes() and x.features.tobytes() == y.features.tobytes()


def test_simulated_positions_are_permutations():
    _, imps = simulate(WorldConfig(n_queries=30, docs_per_query=7), PolicyConfig(0.3), ClickConfig())
    for imp in imps:
        assert sorted(imp.positions) == list(range(1, 8))


def test_correlation_zero_under_random_policy():
    w = generate_world(WorldConfig(n_queries=10000, feature_dim=2, informative_dims=1, seed=21))
    r = measure_position_relevance_correlation(apply_logging_policy(w, PolicyConfig(0.0, seed=22)))
    assert abs(r) <= 0.02


def test_correlation_oracle_policy_matches_direct_computation():
    w = generate_world(WorldConfig(n_queries=2000, feature_dim=2, informative_dims=1, seed=23))
    imps = apply_logging_policy(w, PolicyConfig(1.0))
    # independent computation: sort grades descending per query, correlate with 1/rank
    g = -np.sort(-w.grades, axis=1)
    recip = np.broadcast_to(1.0 / np.arange(1, g.shape[1] + 1), g.shape)
    expected = np.corrcoef(g.ravel(), recip.ravel())[0, 1]
    r = measure_position_relevance_correlation(imps)
    assert r == pytest.approx(expected, abs=1e-12)
    assert r > 0.5


def test_correlation_oracle_policy_distinct_grades_high():
    grades = [np.random.default_rng(i).permutation(5) for i in range(200)]
    imps = [Impression(f"q{i}", tuple("abcde"), np.zeros((5, 1)), np.argsort(np.argsort(-g)) + 1, None, g)
            for i, g in enumerate(grades)]
    assert measure_position_relevance_correlation(imps) > 0.9


def test_correlation_undefined_with_equal_grades():
    imps = _imps([1, 2, 3], [2, 2, 2])
    with pytest.raises(ValidationError, match="undefined"):
        measure_position_relevance_correlation(imps)


def test_correlation_monotone_in_alpha():
    w = generate_world(WorldConfig(n_queries=5000, feature_dim=2, informative_dims=1, seed=31))
    rs = [measure_position_relevance_correlation(apply_logging_policy(w, PolicyConfig(a, seed=32)))
          for a in (0.0, 0.25, 0.5, 0.75, 1.0)]
    assert all(b >= a for a, b in zip(rs, rs[1:])), rs
