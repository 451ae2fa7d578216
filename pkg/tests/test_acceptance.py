"""Acceptance gate. Each test prints a PASS/FAIL line in the terminal summary
(see conftest.py) and asserts the same condition, so a red criterion also
fails the run. Runs take several minutes on one core."""

import itertools
import math
import time

import numpy as np
import pytest

from ultr_lab import gbdt as gb
from ultr_lab import metrics
from ultr_lab import models as M
from ultr_lab import pipeline as P
from ultr_lab.config import config_from_dict
from ultr_lab.data import QueryGroup, scale_impressions
from ultr_lab.nn import DenseNet, finite_diff_check, group_ids_from_sizes, init_dense, read_checkpoint_parts
from ultr_lab.simulation import (
    ClickConfig,
    PolicyConfig,
    WorldConfig,
    apply_logging_policy,
    generate_world,
    measure_position_relevance_correlation,
    simulate,
)

pytestmark = pytest.mark.acceptance

MASTER_SEED = 0
LOSSES = ("bce_logit", "squared_error", "listwise_softmax_ce")
ALL_ARMS = ["random", "naive", "two_tower", "two_tower_dropout", "two_tower_backdoor", "gbdt_expert",
            "policy_estimator"]


def interval(r):
    return f"{r.mean:.4f} [{r.ci_low:.4f}, {r.ci_high:.4f}]"


def as_queries(impressions):
    return [QueryGroup(i.query_id, i.doc_ids, i.features, i.grades) for i in impressions if i.grades.max() > 0]


# --- 1. gradient correctness ------------------------------------------------


def _gradient_case(seed, loss):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(2, 6))
    sizes = [d, *rng.integers(2, 8, int(rng.integers(1, 3))).tolist(), 1]
    net = init_dense(sizes, seed=seed)
    # nonzero biases keep pre-activations away from the ReLU kink
    net = DenseNet(net.weights, [rng.normal(0, 0.1, b.shape) for b in net.biases], net.activations)
    n = int(rng.integers(4, 12))
    x = rng.normal(size=(n, d))
    groups = group_ids_from_sizes([n // 2, n - n // 2])
    if loss == "bce_logit":
        t = rng.random(n)
    elif loss == "squared_error":
        t = rng.normal(size=n)
    else:
        t = rng.random(n)
        for g in (0, 1):
            t[groups == g] /= t[groups == g].sum()
    return finite_diff_check(net, x, t, loss, h=1e-5, groups=groups)


def test_criterion_01_gradient_correctness(criterion):
    t0 = time.perf_counter()
    worst = {loss: max(_gradient_case(seed, loss) for seed in range(50)) for loss in LOSSES}
    secs = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-4 and secs < 60
    detail = ", ".join(f"{k} {v:.2e}" for k, v in worst.items())
    assert criterion(ok, f"max rel err over 50 nets: {detail}; {secs:.1f}s (limits 1e-4, 60s)")


# --- 2. dropout with tau = 0 ------------------------------------------------


def test_criterion_02_dropout_tau_zero_identical(criterion, tmp_path):
    t0 = time.perf_counter()
    _, imps = simulate(WorldConfig(n_queries=5000, seed=1), PolicyConfig(0.8, seed=2), ClickConfig(seed=3))
    imps = scale_impressions(imps)
    cfg = M.TrainConfig(seed=17, tau=0.0)
    std = M.train_two_tower(imps, "standard", cfg)
    drop = M.train_two_tower(imps, "dropout", cfg)
    M.save_model(tmp_path / "a.ckpt", std)
    M.save_model(tmp_path / "b.ckpt", drop)
    (_, pa), (_, pb) = read_checkpoint_parts(tmp_path / "a.ckpt"), read_checkpoint_parts(tmp_path / "b.ckpt")
    same_payload = pa == pb
    same_file = (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    secs = time.perf_counter() - t0
    ok = same_payload and secs < 120
    assert criterion(ok, f"parameter payload identical: {same_payload} ({len(pa)} bytes), whole file identical: "
                         f"{same_file}; {secs:.1f}s (limit 120s)")


# --- 3 and 4. identifiability and debiasing on an unconfounded log ---------


@pytest.fixture(scope="module")
def unconfounded():
    t0 = time.perf_counter()
    world = WorldConfig(n_queries=60_000, seed=31)
    _, imps = simulate(world, PolicyConfig(0.0, seed=32), ClickConfig(eta=1.0, seed=33))
    imps = scale_impressions(imps)
    train, test = imps[:50_000], as_queries(imps[50_000:])
    cfg = M.TrainConfig(seed=34)
    two_tower = M.train_two_tower(train, "standard", cfg)
    naive = M.train_naive(train, cfg)
    return two_tower, naive, test, time.perf_counter() - t0


def test_criterion_03_position_bias_identifiable(criterion, unconfounded):
    model, _, _, secs = unconfounded
    bias = model.position_bias()
    diffs = np.array([bias[k - 1] - bias[0] for k in range(2, 6)])
    target = -np.log(np.arange(2, 6))
    err = np.abs(diffs - target)
    ok = bool(np.all(err <= 0.15)) and secs < 600
    detail = ", ".join(f"k={k}: {d:+.3f} vs {t:+.3f}" for k, d, t in zip(range(2, 6), diffs, target))
    assert criterion(ok, f"bias(k)-bias(1) {detail}; max err {err.max():.3f} (limit 0.15); "
                         f"{secs:.0f}s incl. both fits (limit 600s)")


def test_criterion_04_two_tower_beats_naive(criterion, unconfounded):
    two_tower, naive, test, _ = unconfounded
    a = metrics.mean_with_ci(metrics.per_query_ndcg(M.score_queries(two_tower, test), test))
    b = metrics.mean_with_ci(metrics.per_query_ndcg(M.score_queries(naive, test), test))
    d = metrics.paired_difference(a, b)
    ok = len(test) >= 1000 and d.ci_low > 0
    assert criterion(ok, f"nDCG@10 two-tower {a.mean:.4f}, naive {b.mean:.4f}, paired diff {interval(d)} "
                         f"over {len(test)} queries (CI must exclude 0 from above)")


# --- 5 and 6. policy estimation and the arm comparison ---------------------


def _run(tmp, alpha, **extra):
    raw = {"master_seed": MASTER_SEED, "world": {"n_queries": 5000}, "policy": {"alpha": alpha}, **extra}
    return P.Run(config_from_dict(raw), tmp)


@pytest.fixture(scope="module")
def confounded(tmp_path_factory):
    run = _run(tmp_path_factory.mktemp("confounded"), 0.8)
    P.run_all(run)
    return run


def _table1(run):
    rows = {r["method"]: r for r in P.read_csv(run.path(P.TABLE1))}
    get = lambda m, col: (float(rows[m][f"{col}_mean"]), float(rows[m][f"{col}_ci"]))
    return get


def _fmt(mean, half):
    return f"{mean:.4f} +/- {half:.4f}"


def test_criterion_05_policy_estimation(criterion, confounded, tmp_path):
    get = _table1(confounded)
    acc = get("lambdamart", "accuracy")
    est_s, rnd_s = get("lambdamart", "strength"), get("random", "strength")
    disjoint = est_s[0] - est_s[1] > rnd_s[0] + rnd_s[1]

    control = _run(tmp_path, 0.0, neural_estimator=False,
                   arms=[a for a in ALL_ARMS if a != "two_tower_backdoor"])
    P.cmd_simulate(control)
    P.cmd_estimate_policy(control)
    cget = _table1(control)
    c_est, c_rnd = cget("lambdamart", "strength"), cget("random", "strength")
    overlap = c_est[0] - c_est[1] <= c_rnd[0] + c_rnd[1] and c_rnd[0] - c_rnd[1] <= c_est[0] + c_est[1]

    ok = acc[0] >= 0.9 and disjoint and overlap
    assert criterion(ok, f"alpha=0.8: accuracy {_fmt(*acc)} (need >= 0.9), strength {_fmt(*est_s)} vs random "
                         f"{_fmt(*rnd_s)} disjoint: {disjoint}; alpha=0 strength {_fmt(*c_est)} vs random "
                         f"{_fmt(*c_rnd)} overlap: {overlap}")


def test_criterion_06_arm_comparison(criterion, confounded):
    rows = {r["model"]: r for r in P.read_csv(confounded.path(P.TABLE2)) if r["metric"] == "ndcg"}
    full = set(rows) == set(ALL_ARMS) and confounded.path(P.REPORT).is_file()
    rnd_hi = float(rows["random"]["ci_high"])
    beats = {a: float(rows[a]["ci_low"]) > rnd_hi for a in ("naive", "two_tower", "two_tower_dropout",
                                                             "two_tower_backdoor")}
    ok = full and all(beats.values())
    detail = ", ".join(f"{a} {float(rows[a]['mean']):.4f} [{float(rows[a]['ci_low']):.4f}, "
                       f"{float(rows[a]['ci_high']):.4f}]" for a in ALL_ARMS)
    assert criterion(ok, f"full table emitted: {full}; nDCG@10 {detail}; trained arms above random "
                         f"with disjoint CIs: {all(beats.values())}")


# --- 7. metric oracles ------------------------------------------------------


def _group(qid, grades):
    n = len(grades)
    return QueryGroup(qid, tuple(f"d{i}" for i in range(n)), np.zeros((n, 1)), np.asarray(grades))


def test_criterion_07_metric_oracles(criterion):
    hand = [
        (metrics.dcg_at_k([3, 2], 2), 7 + 3 / math.log2(3)),
        (metrics.dcg_at_k([4], 10), 15.0),
        (metrics.dcg_at_k([0, 0, 0], 10), 0.0),
        (metrics.ndcg_at_k([2, 3], 2), (3 + 7 / math.log2(3)) / (7 + 3 / math.log2(3))),
        (metrics.ndcg_at_k([4, 3, 1, 0], 10), 1.0),
        (metrics.ndcg_at_k([0, 1, 0, 2], 3), (1 / math.log2(3)) / (3 + 1 / math.log2(3))),
    ]
    hand_err = max(abs(a - b) for a, b in hand)
    z = []
    for grades in ([2, 0, 1], [4, 0, 0, 1, 3], [1, 1, 0, 2, 0, 4]):
        vals = [metrics.ndcg_at_k([grades[i] for i in p], 10) for p in itertools.permutations(range(len(grades)))]
        qs = [_group(f"q{i}", grades) for i in range(10_000)]
        got = metrics.per_query_ndcg(metrics.random_scores(qs, seed=len(grades)), qs, 10).mean()
        z.append(abs(got - np.mean(vals)) / (np.std(vals) / 100))
    ok = hand_err <= 1e-4 and max(z) <= 3
    assert criterion(ok, f"max hand-value error {hand_err:.1e} (limit 1e-4); random ranker vs exact "
                         f"permutation mean, |z| = {', '.join(f'{v:.2f}' for v in z)} (limit 3)")


# --- 8. LambdaRank properties -----------------------------------------------


def _separable_toy(n_queries, seed, n=10, margin=0.5):
    rng = np.random.default_rng(seed)
    blocks = []
    for _ in range(n_queries):
        while True:
            X = rng.uniform(-1, 1, (4 * n, 2))
            X = X[np.abs(X[:, 0] - X[:, 1]) > margin][:n]
            y = X[:, 0] > X[:, 1]
            if len(X) == n and 0 < y.sum() < n:
                break
        blocks.append(X)
    X = np.concatenate(blocks)
    return gb.RankSet(X, (X[:, 0] > X[:, 1]).astype(float), [n] * n_queries, [f"q{i}" for i in range(n_queries)])


def test_criterion_08_lambdarank_properties(criterion):
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(200):
        sizes = rng.integers(1, 16, rng.integers(1, 6)).tolist()
        n = sum(sizes)
        g, _ = gb.lambda_gradients(np.round(rng.normal(size=n), 1), rng.integers(0, 5, n).astype(float), sizes)
        off = np.concatenate([[0], np.cumsum(sizes)])
        worst = max(worst, max(abs(g[a:b].sum()) for a, b in zip(off[:-1], off[1:])))
    data = _separable_toy(100, 1)
    pred, _, _ = gb.kfold_fit_predict(data, 5, gb.Objective(), gb.GbdtParams(500, 10, 0.01), seed=3)
    oof = metrics.grouped_ndcg(pred, data.labels, data.group_sizes, 10)
    ok = worst <= 1e-12 and oof.min() == 1.0
    assert criterion(ok, f"max |per-query lambda sum| {worst:.1e} (limit 1e-12); 5-fold out-of-fold nDCG@10 "
                         f"min {oof.min():.6f}, mean {oof.mean():.6f} (need 1.0)")


# --- 9. confounding probe ---------------------------------------------------


def test_criterion_09_correlation_monotone(criterion):
    world = generate_world(WorldConfig(n_queries=5000, seed=41))
    alphas = (0.0, 0.25, 0.5, 0.75, 1.0)
    rs = [measure_position_relevance_correlation(apply_logging_policy(world, PolicyConfig(a, seed=42)))
          for a in alphas]
    ok = all(b >= a for a, b in zip(rs, rs[1:]))
    assert criterion(ok, "correlation by alpha " + ", ".join(f"{a}: {r:.4f}" for a, r in zip(alphas, rs)))


# --- 10. determinism and CI coverage ---------------------------------------


def test_criterion_10_determinism_and_coverage(criterion, tmp_path):
    raw = {"master_seed": MASTER_SEED, "expert_folds": 3, "world": {"n_queries": 400},
           "train": {"epochs": 2, "hidden": [32, 32], "policy_hidden": [32, 16], "backdoor_epochs": 2},
           "gbdt": {"n_trees": 30, "learning_rate": 0.1}}
    runs = [P.Run(config_from_dict(raw), tmp_path / name) for name in ("a", "b")]
    for run in runs:
        P.run_all(run)
    names = (P.TABLE1, P.TABLE2, P.BUCKETS, P.PER_QUERY)
    identical = all(runs[0].path(n).read_bytes() == runs[1].path(n).read_bytes() for n in names)

    rng = np.random.default_rng(2024)
    covered = sum(r.ci_low <= 2 / 7 <= r.ci_high
                  for r in (metrics.mean_with_ci(rng.beta(2, 5, 100)) for _ in range(200)))
    coverage = covered / 200
    ok = identical and 0.90 <= coverage <= 0.98
    assert criterion(ok, f"two pipeline runs byte-identical CSVs: {identical}; 95% CI coverage over 200 "
                         f"replicates {coverage:.3f} (need [0.90, 0.98])")
