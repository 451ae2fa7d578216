"""Experiment stages: simulate, estimate the logging policy, train arms,
evaluate and report. Every stage reads and writes files inside one run
directory and records content hashes and timings in ``manifest.json``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import gbdt as gb
from . import metrics
from . import models as M
from .config import ARMS, ExperimentConfig, derive_seed
from .data import (
    AnnotatedExample,
    group_annotations,
    load_annotations,
    load_click_log,
    scale_features_log1p,
    scale_impressions,
    split_by_query,
    write_annotations,
    write_click_log,
    write_grades,
)
from .errors import TrainingError, ValidationError
from .simulation import apply_logging_policy, generate_world, simulate_clicks

log = logging.getLogger(__name__)

CLICKS = "clicks.tsv"
GRADES = "grades.tsv"
ANNOTATIONS = "annotations.svm"
LAMBDAMART = "policy/lambdamart.json"
NEURAL = "policy/neural.ckpt"
TABLE1 = "table1.csv"
TABLE2 = "table2.csv"
BUCKETS = "buckets.csv"
PER_QUERY = "per_query.csv"
REPORT = "report.txt"
MANIFEST = "manifest.json"
TABLE1_COLUMNS = ("method", "accuracy_mean", "accuracy_ci", "strength_mean", "strength_ci")
CURVE_COLUMNS = ("epoch", "split", "loss")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def checkpoint_name(arm: str) -> str:
    return f"models/{arm}.json" if arm in ("gbdt_expert", "random", "policy_estimator") else f"models/{arm}.ckpt"


class Run:
    """A run directory plus the manifest bookkeeping of one stage."""

    def __init__(self, cfg: ExperimentConfig, run_dir, overwrite: bool = False):
        self.cfg = cfg
        self.dir = Path(run_dir)
        self.overwrite = overwrite
        self.touched: list[Path] = []

    def path(self, rel) -> Path:
        return self.dir / rel

    def input(self, rel, external: bool = False) -> Path:
        """Resolve and record an input; ``external`` paths are relative to the cwd."""
        p = Path(rel) if external else self.dir / rel
        if not p.is_file():
            raise ValidationError(f"missing input file {p}")
        self.touched.append(p)
        return p

    def output(self, rel) -> Path:
        p = self.dir / rel
        if p.exists() and not self.overwrite:
            raise FileExistsError(f"{p} exists; stage outputs are immutable (pass --overwrite)")
        p.parent.mkdir(parents=True, exist_ok=True)
        self.touched.append(p)
        return p

    def finish(self, stage: str, seconds: float) -> None:
        mpath = self.dir / MANIFEST
        manifest = json.loads(mpath.read_text()) if mpath.exists() else {"files": {}, "stages": {}}
        manifest["toolkit_version"] = __version__
        manifest["config"] = self.cfg.snapshot()
        for p in self.touched:
            key = str(p.relative_to(self.dir)) if p.is_relative_to(self.dir) else str(p.resolve())
            manifest["files"][key] = sha256_file(p)
        manifest["stages"][stage] = {"seconds": round(seconds, 3)}
        mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        self.touched = []


def _staged(stage):
    def wrap(fn):
        def inner(run: Run, *args, **kwargs):
            t0 = time.perf_counter()
            out = fn(run, *args, **kwargs)
            run.finish(stage if not args else f"{stage}:{args[0]}", time.perf_counter() - t0)
            return out
        inner.__name__ = fn.__name__
        inner.__doc__ = fn.__doc__
        return inner
    return wrap


# --- data access ------------------------------------------------------------


def load_clicks(run: Run):
    imps = load_click_log(run.input(run.cfg.click_log, True) if run.cfg.click_log else run.input(CLICKS))
    if not imps:
        raise ValidationError("click log is empty")
    return scale_impressions(imps) if run.cfg.scale_features else imps


def click_splits(run: Run, impressions):
    return split_by_query(impressions, run.cfg.split, derive_seed(run.cfg.master_seed, "split", "split"))


def load_test_queries(run: Run):
    """Annotated queries used for evaluation (those with at least one relevant document)."""
    examples = load_annotations(run.input(run.cfg.annotations, True) if run.cfg.annotations else run.input(ANNOTATIONS))
    groups = group_annotations(examples)
    if run.cfg.scale_features:
        groups = [type(g)(g.query_id, g.doc_ids, scale_features_log1p(g.features), g.grades) for g in groups]
    groups = [g for g in groups if g.grades.max() > 0]
    if len(groups) < 2:
        raise ValidationError("need at least two annotated queries with a relevant document")
    return groups


def write_curve(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for epoch, split, loss in rows:
            w.writerow([epoch, split, repr(float(loss))])


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# --- stages -----------------------------------------------------------------


@_staged("simulate")
def cmd_simulate(run: Run):
    """Write the click log, the grades sidecar and test-split annotations."""
    cfg = run.cfg
    paths = [run.output(CLICKS), run.output(GRADES), run.output(ANNOTATIONS)]
    world = generate_world(cfg.world)
    imps = simulate_clicks(apply_logging_policy(world, cfg.policy), cfg.clicks)
    write_click_log(paths[0], imps)
    write_grades(paths[1], imps)
    test = click_splits(run, imps).test
    write_annotations(paths[2], [AnnotatedExample(i.query_id, d, i.features[j], int(i.grades[j]))
                                 for i in test for j, d in enumerate(i.doc_ids)])
    log.info("simulated %d queries into %s", len(imps), run.dir)
    return paths


def _fit_policy_gbdt(run: Run, train, val):
    est = M.estimate_logging_policy_gbdt(train, run.cfg.gbdt, run.cfg.estimator_objective, validation=val)
    est.gbdt.save(run.output(LAMBDAMART))
    write_curve(run.output("curves/policy_estimator.csv"), est.curve)
    return est


def _query_scores(model, items):
    return [model.relevance_scores(i.features) for i in items]


@_staged("estimate-policy")
def cmd_estimate_policy(run: Run):
    """Fit logging-policy estimators and write the accuracy/strength table."""
    cfg = run.cfg
    split = click_splits(run, load_clicks(run))
    queries = load_test_queries(run)
    if not split.test:
        raise ValidationError("the click log split has no test queries for the accuracy evaluation")
    estimators = {"lambdamart": _fit_policy_gbdt(run, split.train, split.validation)}
    if cfg.neural_estimator:
        est = M.estimate_logging_policy_neural(split.train, cfg.train_config("policy_neural"), split.validation)
        M.save_model(run.output(NEURAL), est, {"arm": "policy_neural"})
        write_curve(run.output("curves/policy_neural.csv"), est.curve)
        estimators["neural"] = est
    ci = {"level": cfg.eval.ci_level, "method": cfg.eval.ci_method}
    k = cfg.eval.k
    rows = []
    for name, est in estimators.items():
        acc = metrics.policy_accuracy(_query_scores(est, split.test), split.test, k, **ci)
        strength = metrics.policy_strength(_query_scores(est, queries), queries, k, **ci)
        rows.append((name, acc, strength))
    acc = metrics.policy_accuracy(metrics.random_scores(split.test, cfg.arm_seed("random", "accuracy")),
                                  split.test, k, **ci)
    strength = metrics.policy_strength(metrics.random_scores(queries, cfg.arm_seed("random", "eval")), queries, k, **ci)
    rows.append(("random", acc, strength))
    out = run.output(TABLE1)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TABLE1_COLUMNS)
        for name, a, s in rows:
            w.writerow([name, repr(a.mean), repr(a.ci_half_width), repr(s.mean), repr(s.ci_half_width)])
    return rows


def _biased_exam_logits(run: Run, clicks):
    cfg = run.cfg
    if cfg.backdoor_exam_source == "ctr":
        return M.empirical_ctr_logits(clicks, cfg.train.k_max)
    ckpt = run.path(checkpoint_name("two_tower"))
    if ckpt.is_file():
        return M.load_model(run.input(checkpoint_name("two_tower"))).position_bias()
    return M.train_two_tower(clicks, "standard", cfg.train_config("two_tower")).position_bias()


def train_arm(run: Run, arm: str):
    cfg = run.cfg
    if arm not in ARMS:
        raise ValidationError(f"unknown arm {arm!r}; valid arms are {list(ARMS)}")
    if arm == "random":
        with open(run.output(checkpoint_name(arm)), "w", encoding="utf-8") as fh:
            json.dump({"kind": "random", "seed": cfg.arm_seed("random", "eval")}, fh, sort_keys=True)
        return None
    if arm == "gbdt_expert":
        queries = load_test_queries(run)
        data = gb.RankSet(np.concatenate([q.features for q in queries]), np.concatenate([q.grades for q in queries]),
                          [len(q) for q in queries], [q.query_id for q in queries])
        pred, fold, fold_models = gb.kfold_fit_predict(data, cfg.expert_folds, gb.Objective("lambdarank"), cfg.gbdt,
                                                       cfg.arm_seed(arm, "folds"))
        per_query = np.split(pred, np.cumsum(data.group_sizes)[:-1])
        blob = {
            "kind": "gbdt_expert",
            "k_folds": cfg.expert_folds,
            "queries": {q.query_id: {"fold": int(f), "doc_ids": list(q.doc_ids), "scores": s.tolist()}
                        for q, f, s in zip(queries, fold, per_query)},
            "models": [m.to_dict() for m in fold_models],
        }
        with open(run.output(checkpoint_name(arm)), "w", encoding="utf-8") as fh:
            json.dump(blob, fh, sort_keys=True)
        write_curve(run.output(f"curves/{arm}.csv"),
                    [(r, f"fold{i}", loss) for i, m in enumerate(fold_models) for r, _, loss in m.history])
        return blob

    if arm == "policy_estimator" and run.path(LAMBDAMART).is_file():
        # the estimate-policy stage already fitted this model deterministically
        model = gb.GbdtModel.load(run.input(LAMBDAMART))
        model.save(run.output(checkpoint_name(arm)))
        return model
    split = click_splits(run, load_clicks(run))
    if arm == "policy_estimator":
        est = _fit_policy_gbdt(run, split.train, split.validation)
        est.gbdt.save(run.output(checkpoint_name(arm)))
        return est.gbdt
    tcfg = cfg.train_config(arm)
    if arm == "naive":
        model = M.train_naive(split.train, tcfg, split.validation)
    elif arm == "two_tower":
        model = M.train_two_tower(split.train, "standard", tcfg, split.validation)
    elif arm == "two_tower_dropout":
        model = M.train_two_tower(split.train, "dropout", tcfg, split.validation)
    else:
        policy = M.load_model(run.input(NEURAL))
        exam = _biased_exam_logits(run, split.train)
        model = M.train_backdoor_variant(split.train, policy, exam, tcfg, split.validation)
    M.save_model(run.output(checkpoint_name(arm)), model, {"arm": arm, "train": M.config_dict(tcfg)})
    write_curve(run.output(f"curves/{arm}.csv"), model.curve)
    return model


def cmd_train(run: Run, arm: str):
    """Train one arm, attaching the arm name to any training failure."""
    t0 = time.perf_counter()
    try:
        out = train_arm(run, arm)
    except TrainingError as e:
        raise TrainingError(f"arm {arm}: {e}") from e
    run.finish(f"train:{arm}", time.perf_counter() - t0)
    return out


def arm_scores(run: Run, arm: str, queries) -> list:
    cfg = run.cfg
    if arm == "random":
        return metrics.random_scores(queries, cfg.arm_seed("random", "eval"))
    if arm == "oracle":
        return [q.grades.astype(np.float64) for q in queries]
    if arm == "policy_estimator":
        est = gb.GbdtModel.load(run.input(checkpoint_name(arm)))
        return [gb.predict(est, q.features) for q in queries]
    if arm == "gbdt_expert":
        with open(run.input(checkpoint_name(arm)), encoding="utf-8") as fh:
            blob = json.load(fh)["queries"]
        out = []
        for q in queries:
            entry = blob.get(q.query_id)
            if entry is None or entry["doc_ids"] != list(q.doc_ids):
                raise ValidationError(f"expert checkpoint does not cover query {q.query_id}")
            out.append(np.array(entry["scores"]))
        return out
    model = M.load_model(run.input(checkpoint_name(arm)))
    return M.score_queries(model, queries)


@_staged("evaluate")
def cmd_evaluate(run: Run):
    """Score every arm on the annotated queries; write table and bucket CSVs."""
    cfg = run.cfg
    queries = load_test_queries(run)
    arms = list(cfg.arms) + (["oracle"] if cfg.eval.include_oracle else [])
    k = cfg.eval.k
    ci = {"level": cfg.eval.ci_level, "method": cfg.eval.ci_method}
    scores = {arm: arm_scores(run, arm, queries) for arm in arms}
    est = gb.GbdtModel.load(run.input(LAMBDAMART))
    policy_scores = [gb.predict(est, q.features) for q in queries]

    rows, per_query = [], {}
    for arm in arms:
        ndcg = metrics.per_query_ndcg(scores[arm], queries, k)
        per_query[arm] = ndcg
        rows.append((arm, "ndcg", k, metrics.mean_with_ci(ndcg, **ci)))
        rows.append((arm, "dcg", k, metrics.mean_with_ci(metrics.per_query_dcg(scores[arm], queries, k), **ci)))
    metrics.write_metric_csv(run.output(TABLE2), rows)
    report = metrics.bucket_analysis(scores, queries, policy_scores, cfg.eval.n_buckets, k)
    metrics.write_bucket_csv(run.output(BUCKETS), report)
    with open(run.output(PER_QUERY), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["query_id", *arms])
        for i, q in enumerate(queries):
            w.writerow([q.query_id, *(repr(float(per_query[a][i])) for a in arms)])
    return rows, report


def _table(header, rows) -> str:
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]
    fmt = lambda r: "  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip()
    return "\n".join([fmt(header), "  ".join("-" * w for w in widths), *map(fmt, rows)])


def cmd_report(run: Run) -> str:
    """Fixed-format summary; every number is copied verbatim from the CSVs."""
    t0 = time.perf_counter()
    if not run.path(TABLE1).is_file() and not run.path(TABLE2).is_file():
        raise ValidationError(f"no metric CSVs ({TABLE1}, {TABLE2}) in {run.dir}")
    parts = []
    if run.path(TABLE1).is_file():
        t1 = read_csv(run.input(TABLE1))
        parts.append("Logging-policy estimation (nDCG, mean +/- 95% CI half-width)\n" + _table(
            ("method", "accuracy", "strength"),
            [(r["method"], f"{r['accuracy_mean']} +/- {r['accuracy_ci']}", f"{r['strength_mean']} +/- {r['strength_ci']}")
             for r in t1]))
    if run.path(TABLE2).is_file():
        t2 = read_csv(run.input(TABLE2))
        by_model = {}
        for r in t2:
            by_model.setdefault(r["model"], {})[f"{r['metric']}@{r['k']}"] = f"{r['mean']} [{r['ci_low']}, {r['ci_high']}]"
        cols = list(dict.fromkeys(f"{r['metric']}@{r['k']}" for r in t2))
        parts.append("Ranking performance on annotated queries (mean [95% CI])\n" + _table(
            ("model", *cols), [(m, *(v.get(c, "") for c in cols)) for m, v in by_model.items()]))
    if run.path(BUCKETS).is_file():
        b = read_csv(run.input(BUCKETS))
        parts.append("By estimated logging-policy nDCG bucket\n" + _table(
            ("bucket", "low", "high", "model", "mean", "relative_to_random", "n"),
            [(r["bucket_index"], r["boundary_low"], r["boundary_high"], r["model"], r["mean"],
              r["relative_to_random"], r["n"]) for r in b]))
    text = "\n\n".join(parts) + "\n"
    with open(run.output(REPORT), "w", encoding="utf-8") as fh:
        fh.write(text)
    run.finish("report", time.perf_counter() - t0)
    return text


def run_all(run: Run, simulate: bool = True) -> str:
    if simulate:
        cmd_simulate(run)
    cmd_estimate_policy(run)
    for arm in run.cfg.arms:
        cmd_train(run, arm)
    cmd_evaluate(run)
    return cmd_report(run)
