"""Click models and logging-policy estimators.

``TwoTowerModel`` adds a relevance logit computed from query-document
features to a bias logit computed from a one-hot position, and maps the
sum through a sigmoid to a click probability. Variants:

* ``standard``: both towers trained jointly on clicks.
* ``dropout``: inverted dropout with rate ``tau`` on the bias logit during
  training only.
* ``backdoor``: the bias tower is replaced by a fixed, adjusted position
  effect derived from a frozen logging-policy embedding (see
  :func:`train_backdoor_variant`).

At ranking time only the relevance tower is used.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import gbdt as gb
from . import metrics
from .errors import TrainingError, ValidationError
from .nn import (
    DenseNet,
    DropoutSpec,
    adam_init,
    adam_step,
    backward_from_output,
    check_finite_params,
    dropout_mask,
    embed,
    forward,
    forward_cache,
    group_ids_from_sizes,
    init_dense,
    load_checkpoint,
    loss_and_grad,
    minibatches,
    save_checkpoint,
)

VARIANTS = ("standard", "dropout", "backdoor")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3
    batch_size: int = 512
    lr: float = 0.01
    seed: int = 0
    hidden: tuple = (256, 256)
    k_max: int = 10
    tau: float = 0.3
    # neural policy estimator
    policy_hidden: tuple = (256, 64)
    target_temperature: float = 10.0
    # backdoor step (ii)
    backdoor_position_input: bool = True
    backdoor_hidden: int = 32
    backdoor_epochs: int = 3

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "policy_hidden", tuple(int(h) for h in self.policy_hidden))
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0 or self.k_max < 1:
            raise ValidationError(f"invalid training config {self}")
        if not 0.0 <= self.tau < 1.0:
            raise ValidationError(f"tau must lie in [0, 1), got {self.tau}")
        if not self.policy_hidden or self.target_temperature <= 0:
            raise ValidationError("policy network needs at least one hidden layer and a positive temperature")


def flatten(impressions, need_clicks: bool = True):
    """Stack impressions into ``(X, positions, clicks, group_sizes)``."""
    if not impressions:
        raise ValidationError("no impressions")
    X = np.concatenate([i.features for i in impressions])
    pos = np.concatenate([i.positions for i in impressions])
    sizes = np.array([len(i) for i in impressions], dtype=np.int64)
    if need_clicks:
        if any(i.clicks is None for i in impressions):
            raise ValidationError("impressions carry no clicks")
        clicks = np.concatenate([i.clicks for i in impressions]).astype(np.float64)
    else:
        clicks = None
    return X, pos, clicks, sizes


def one_hot_positions(positions, k_max: int) -> np.ndarray:
    """One-hot rows for positions ``1..k_max``; deeper positions clamp to ``k_max``."""
    k = np.clip(np.asarray(positions, dtype=np.int64), 1, k_max)
    out = np.zeros((k.size, k_max))
    out[np.arange(k.size), k - 1] = 1.0
    return out


def params_digest(net: DenseNet) -> str:
    h = hashlib.sha256()
    for p in net.params():
        h.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return h.hexdigest()


# --- model types ------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BackdoorArtifacts:
    policy_net: DenseNet
    policy_digest: str
    bias_head: DenseNet
    combiner: DenseNet
    mean_embedding: np.ndarray
    biased_exam_logits: np.ndarray
    adjusted_logits: np.ndarray
    position_input: bool


@dataclass(eq=False)
class TwoTowerModel:
    relevance: DenseNet
    bias: DenseNet
    variant: str = "standard"
    tau: float = 0.0
    k_max: int = 10
    artifacts: BackdoorArtifacts | None = None
    curve: list = field(default_factory=list)

    def relevance_scores(self, X) -> np.ndarray:
        return forward(self.relevance, np.atleast_2d(X))[:, 0]

    def bias_logits(self, positions) -> np.ndarray:
        return forward(self.bias, one_hot_positions(np.atleast_1d(positions), self.k_max))[:, 0]

    def position_bias(self) -> np.ndarray:
        """Bias logit for every position ``1..k_max``."""
        return self.bias_logits(np.arange(1, self.k_max + 1))


@dataclass(eq=False)
class NaiveModel:
    relevance: DenseNet
    curve: list = field(default_factory=list)

    def relevance_scores(self, X) -> np.ndarray:
        return forward(self.relevance, np.atleast_2d(X))[:, 0]


def click_logit(model: TwoTowerModel, x, k) -> float | np.ndarray:
    """``relevance(x) + bias(one_hot(k))``; apply a sigmoid for the click probability."""
    x = np.asarray(x, dtype=np.float64)
    r = model.relevance_scores(x)
    b = model.bias_logits(k)
    out = r + b
    return float(out[0]) if x.ndim == 1 and np.ndim(k) == 0 else out


def rank_by_relevance(model, features, doc_ids) -> list:
    """Doc ids ordered by relevance score; the bias tower is never consulted."""
    return [doc_ids[i] for i in metrics.rank_order(model.relevance_scores(features), list(doc_ids))]


def score_queries(model, queries) -> list:
    """Per-query relevance (or policy) scores for a sequence of query groups."""
    sizes = [len(q) for q in queries]
    if not sizes:
        return []
    flat = model.relevance_scores(np.concatenate([q.features for q in queries]))
    return np.split(flat, np.cumsum(sizes)[:-1])


# --- click-model training ---------------------------------------------------


def _streams(seed):
    return (np.random.default_rng([seed, 0]), np.random.default_rng([seed, 1]), np.random.default_rng([seed, 2]))


def _mean_bce(rel, bias, X, onehot, C, batch=8192):
    total = 0.0
    for s in range(0, len(C), batch):
        z = forward(rel, X[s:s + batch])[:, 0]
        if bias is not None:
            z = z + forward(bias, onehot[s:s + batch])[:, 0]
        total += loss_and_grad("bce_logit", z, C[s:s + batch])[0] * len(z)
    return total / len(C)


def _fit_clicks(impressions, cfg: TrainConfig, use_bias: bool, tau: float = 0.0, fixed_bias: DenseNet | None = None,
                validation=None):
    X, pos, C, _ = flatten(impressions)
    init_rng, shuffle_rng, drop_rng = _streams(cfg.seed)
    rel = init_dense([X.shape[1], *cfg.hidden, 1], init_rng)
    bias = fixed_bias if fixed_bias is not None else (init_dense([cfg.k_max, 1], init_rng) if use_bias else None)
    train_bias = use_bias and fixed_bias is None
    onehot = one_hot_positions(pos, cfg.k_max) if use_bias else None
    spec = DropoutSpec(tau, True, drop_rng)
    params = rel.params() + (bias.params() if train_bias else [])
    state = adam_init(params, cfg.lr)
    n_rel = len(rel.params())
    val = None
    if validation:
        vX, vpos, vC, _ = flatten(validation)
        val = (vX, one_hot_positions(vpos, cfg.k_max) if use_bias else None, vC)
    curve = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        losses, weights = [], []
        for idx in minibatches(len(C), cfg.batch_size, shuffle_rng):
            out_r, cache_r = forward_cache(rel, X[idx])
            z = out_r[:, 0]
            mask = None
            if use_bias:
                out_b, cache_b = forward_cache(bias, onehot[idx])
                mask = dropout_mask(out_b.shape, spec) if tau > 0 else None
                z = z + (out_b[:, 0] if mask is None else (out_b * mask)[:, 0])
            value, dz = loss_and_grad("bce_logit", z, C[idx])
            if not np.isfinite(value):
                raise TrainingError("non-finite click loss", step)
            grads = backward_from_output(rel, cache_r, dz[:, None])
            if train_bias:
                db = dz[:, None] if mask is None else dz[:, None] * mask
                grads += backward_from_output(bias, cache_b, db)
            params, state = adam_step(params, grads, state)
            rel = rel.with_params(params[:n_rel])
            if train_bias:
                bias = bias.with_params(params[n_rel:])
            losses.append(value)
            weights.append(len(idx))
            step += 1
        check_finite_params(params)
        curve.append((epoch, "train", float(np.average(losses, weights=weights))))
        if val is not None:
            curve.append((epoch, "validation", _mean_bce(rel, bias, *val)))
    return rel, bias, curve


def train_two_tower(clicks, variant: str = "standard", cfg: TrainConfig = TrainConfig(), validation=None,
                    tau: float | None = None) -> TwoTowerModel:
    """Fit relevance and bias towers jointly with binary cross-entropy on clicks.

    For ``variant="dropout"`` the bias logit passes through inverted dropout
    with rate ``tau`` (default ``cfg.tau``) while training.
    """
    if variant not in ("standard", "dropout"):
        raise ValidationError(f"train_two_tower handles 'standard' and 'dropout', got {variant!r}")
    rate = (cfg.tau if tau is None else tau) if variant == "dropout" else 0.0
    if not 0.0 <= rate < 1.0:
        raise ValidationError(f"tau must lie in [0, 1), got {rate}")
    rel, bias, curve = _fit_clicks(clicks, cfg, True, rate, validation=validation)
    return TwoTowerModel(rel, bias, variant, rate, cfg.k_max, curve=curve)


def train_naive(clicks, cfg: TrainConfig = TrainConfig(), validation=None) -> NaiveModel:
    """Relevance tower alone, trained on clicks with no position input."""
    rel, _, curve = _fit_clicks(clicks, cfg, False, validation=validation)
    return NaiveModel(rel, curve)


# --- logging-policy estimation ----------------------------------------------


@dataclass(eq=False)
class PolicyEstimator:
    kind: str  # "gbdt" or "neural"
    gbdt: gb.GbdtModel | None = None
    net: DenseNet | None = None
    curve: list = field(default_factory=list)

    def relevance_scores(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if self.kind == "gbdt":
            return gb.predict(self.gbdt, X)
        return forward(self.net, X)[:, 0]

    def embedding(self, X) -> np.ndarray:
        """Penultimate-layer activations of the neural estimator."""
        if self.net is None:
            raise ValidationError("only the neural estimator exposes an embedding")
        return embed(self.net, np.atleast_2d(np.asarray(X, dtype=np.float64)))

    @property
    def embedding_dim(self) -> int:
        if self.net is None:
            raise ValidationError("only the neural estimator exposes an embedding")
        return self.net.weights[-1].shape[0]


def policy_rankset(impressions, target: str = "proxy") -> gb.RankSet:
    """Features with a position-derived label: ``reciprocal`` (1/k) or ``proxy`` grades."""
    X, pos, _, sizes = flatten(impressions, need_clicks=False)
    if target == "reciprocal":
        y = 1.0 / pos
    elif target == "proxy":
        y = metrics.proxy_grades(pos).astype(np.float64)
    else:
        raise ValidationError(f"unknown policy target {target!r}")
    return gb.RankSet(X, y, sizes, tuple(i.query_id for i in impressions))


def estimate_logging_policy_gbdt(clicks, params: gb.GbdtParams = gb.GbdtParams(), objective: str = "lambdarank",
                                 validation=None) -> PolicyEstimator:
    """Boosted trees predicting logged positions from features.

    ``pointwise`` regresses ``1/k``; ``lambdarank`` ranks by proxy grades
    derived from ``k`` (LambdaMART).
    """
    target = "reciprocal" if objective == "pointwise" else "proxy"
    train = policy_rankset(clicks, target)
    val = policy_rankset(validation, target) if validation else None
    model = gb.fit_gbdt(train, val, gb.Objective(objective), params)
    return PolicyEstimator("gbdt", gbdt=model, curve=list(model.history))


def attention_targets(positions, group_sizes, temperature: float) -> np.ndarray:
    """Per-query ``softmax(temperature / k)`` over the logged positions."""
    z = temperature / np.asarray(positions, dtype=np.float64)
    groups = group_ids_from_sizes(group_sizes)
    starts = np.concatenate([[0], np.cumsum(group_sizes)[:-1]])
    z = z - np.repeat(np.maximum.reduceat(z, starts), group_sizes)
    e = np.exp(z)
    return e / np.repeat(np.add.reduceat(e, starts), group_sizes), groups


def estimate_logging_policy_neural(clicks, cfg: TrainConfig = TrainConfig(), validation=None) -> PolicyEstimator:
    """Feed-forward scorer trained with a listwise attention (softmax) loss."""
    X, pos, _, sizes = flatten(clicks, need_clicks=False)
    target, _ = attention_targets(pos, sizes, cfg.target_temperature)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    init_rng, shuffle_rng, _ = _streams(cfg.seed)
    net = init_dense([X.shape[1], *cfg.policy_hidden, 1], init_rng)
    params = net.params()
    state = adam_init(params, cfg.lr)
    per_batch = max(1, cfg.batch_size // max(1, int(np.median(sizes))))
    curve = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for qs in minibatches(len(sizes), per_batch, shuffle_rng):
            rows = np.concatenate([np.arange(offsets[q], offsets[q + 1]) for q in qs])
            out, cache = forward_cache(net, X[rows])
            value, dz = loss_and_grad("listwise_softmax_ce", out[:, 0], target[rows],
                                      group_ids_from_sizes(sizes[qs]))
            if not np.isfinite(value):
                raise TrainingError("non-finite listwise loss", step)
            params, state = adam_step(params, backward_from_output(net, cache, dz[:, None]), state)
            net = net.with_params(params)
            losses.append(value)
            step += 1
        check_finite_params(params)
        curve.append((epoch, "train", float(np.mean(losses))))
        if validation:
            vX, vpos, _, vsizes = flatten(validation, need_clicks=False)
            vt, vg = attention_targets(vpos, vsizes, cfg.target_temperature)
            curve.append((epoch, "validation", loss_and_grad("listwise_softmax_ce", forward(net, vX)[:, 0], vt, vg)[0]))
    return PolicyEstimator("neural", net=net, curve=curve)


# --- backdoor adjustment ----------------------------------------------------


def empirical_ctr_logits(clicks, k_max: int = 10, clip: float = 1e-4) -> np.ndarray:
    """Logit of the click-through rate at each position ``1..k_max``."""
    _, pos, C, _ = flatten(clicks)
    k = np.clip(pos, 1, k_max)
    ctr = np.array([C[k == p].mean() if np.any(k == p) else np.nan for p in range(1, k_max + 1)])
    if np.any(np.isnan(ctr)):
        raise ValidationError("some positions have no impressions")
    ctr = np.clip(ctr, clip, 1 - clip)
    return np.log(ctr) - np.log1p(-ctr)


def _embedding_batches(policy_net, X, batch=8192):
    for s in range(0, X.shape[0], batch):
        yield embed(policy_net, X[s:s + batch])


def train_backdoor_variant(clicks, policy_net: PolicyEstimator | None, biased_exam_logits,
                           cfg: TrainConfig = TrainConfig(), validation=None) -> TwoTowerModel:
    """Two-tower model whose bias tower is adjusted through a frozen policy embedding.

    Step (ii): a fresh linear position tower plus a small combiner network
    over the frozen policy embedding (and, if ``backdoor_position_input``,
    the position one-hot) regress ``biased_exam_logits[k]`` with squared
    error. Step (iii): the embedding pathway is marginalised by evaluating
    the combiner at the mean training embedding; the resulting per-position
    logits become a fixed bias tower while the relevance tower is fit on
    clicks.
    """
    if policy_net is None or policy_net.net is None:
        raise ValidationError("backdoor adjustment needs a trained neural policy estimator")
    target_logits = np.asarray(biased_exam_logits, dtype=np.float64)
    if target_logits.shape != (cfg.k_max,) or not np.all(np.isfinite(target_logits)):
        raise ValidationError(f"biased_exam_logits must be {cfg.k_max} finite values")
    frozen = policy_net.net
    digest = params_digest(frozen)

    X, pos, _, _ = flatten(clicks)
    onehot = one_hot_positions(pos, cfg.k_max)
    y = target_logits[np.clip(pos, 1, cfg.k_max) - 1]
    emb_dim = policy_net.embedding_dim
    rng = np.random.default_rng([cfg.seed, 3])
    head = init_dense([cfg.k_max, 1], rng)
    comb_in = emb_dim + (cfg.k_max if cfg.backdoor_position_input else 0)
    comb = init_dense([comb_in, cfg.backdoor_hidden, 1], rng)
    params = head.params() + comb.params()
    n_head = len(head.params())
    state = adam_init(params, cfg.lr)
    shuffle_rng = np.random.default_rng([cfg.seed, 4])
    step = 0
    for _ in range(cfg.backdoor_epochs):
        for idx in minibatches(len(y), cfg.batch_size, shuffle_rng):
            e = embed(frozen, X[idx])
            ci = np.hstack([e, onehot[idx]]) if cfg.backdoor_position_input else e
            out_h, cache_h = forward_cache(head, onehot[idx])
            out_c, cache_c = forward_cache(comb, ci)
            value, dz = loss_and_grad("squared_error", out_h[:, 0] + out_c[:, 0], y[idx])
            if not np.isfinite(value):
                raise TrainingError("non-finite backdoor regression loss", step)
            grads = backward_from_output(head, cache_h, dz[:, None]) + backward_from_output(comb, cache_c, dz[:, None])
            params, state = adam_step(params, grads, state)
            head, comb = head.with_params(params[:n_head]), comb.with_params(params[n_head:])
            step += 1
    check_finite_params(params)

    emb_sum = np.zeros(emb_dim)
    for e in _embedding_batches(frozen, X):
        emb_sum += e.sum(axis=0)
    mean_emb = emb_sum / X.shape[0]
    eye = np.eye(cfg.k_max)
    ci = np.hstack([np.repeat(mean_emb[None, :], cfg.k_max, 0), eye]) if cfg.backdoor_position_input else \
        np.repeat(mean_emb[None, :], cfg.k_max, 0)
    adjusted = forward(head, eye)[:, 0] + forward(comb, ci)[:, 0]
    fixed = DenseNet([adjusted[:, None].copy()], [np.zeros(1)], ["identity"])

    rel, bias, curve = _fit_clicks(clicks, cfg, True, fixed_bias=fixed, validation=validation)
    if params_digest(frozen) != digest:
        raise AssertionError("frozen policy network was modified during backdoor training")
    art = BackdoorArtifacts(frozen, digest, head, comb, mean_emb, target_logits, adjusted, cfg.backdoor_position_input)
    return TwoTowerModel(rel, bias, "backdoor", 0.0, cfg.k_max, art, curve)


# --- persistence ------------------------------------------------------------


def save_model(path, model, meta: dict | None = None) -> None:
    """Checkpoint a two-tower, naive or neural policy model (nn checkpoint format)."""
    meta = dict(meta or {})
    if isinstance(model, TwoTowerModel):
        nets = {"relevance": model.relevance, "bias": model.bias}
        meta.update(kind="two_tower", variant=model.variant, tau=model.tau, k_max=model.k_max)
        if model.artifacts is not None:
            a = model.artifacts
            nets.update(policy=a.policy_net, backdoor_head=a.bias_head, backdoor_combiner=a.combiner)
            meta.update(policy_digest=a.policy_digest, mean_embedding=a.mean_embedding.tolist(),
                        biased_exam_logits=a.biased_exam_logits.tolist(), adjusted_logits=a.adjusted_logits.tolist(),
                        backdoor_position_input=a.position_input)
    elif isinstance(model, NaiveModel):
        nets = {"relevance": model.relevance}
        meta.update(kind="naive")
    elif isinstance(model, PolicyEstimator) and model.kind == "neural":
        nets = {"policy": model.net}
        meta.update(kind="policy_neural")
    else:
        raise ValidationError(f"cannot checkpoint {type(model).__name__}")
    save_checkpoint(path, nets, meta)


def load_model(path):
    nets, meta = load_checkpoint(path)
    kind = meta.get("kind")
    if kind == "naive":
        return NaiveModel(nets["relevance"])
    if kind == "policy_neural":
        return PolicyEstimator("neural", net=nets["policy"])
    if kind == "two_tower":
        art = None
        if "policy" in nets:
            art = BackdoorArtifacts(nets["policy"], meta["policy_digest"], nets["backdoor_head"],
                                    nets["backdoor_combiner"], np.array(meta["mean_embedding"]),
                                    np.array(meta["biased_exam_logits"]), np.array(meta["adjusted_logits"]),
                                    bool(meta["backdoor_position_input"]))
        return TwoTowerModel(nets["relevance"], nets["bias"], meta["variant"], float(meta["tau"]),
                             int(meta["k_max"]), art)
    raise ValidationError(f"{path}: unknown checkpoint kind {kind!r}")


def config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["hidden"] = list(cfg.hidden)
    d["policy_hidden"] = list(cfg.policy_hidden)
    return d


def with_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    return replace(cfg, seed=seed)
