"""Link-prediction loss, optimizers, the chronological training loop and the
per-negative gradient probe."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import autodiff as ad
from .graph import TemporalGraph
from .model import Embedding, ModelConfig, ModelState, embedding_expr, init_for_graph, memory_update, score_expr
from .sampling import (
    CandidateCache,
    SamplerConfig,
    SamplerContext,
    build_static_distribution,
    draw_negatives,
    refresh_snapshot,
    topk_batch,
    universe_for,
)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 200
    learning_rate: float = 1e-4
    optimizer: str = "adam"
    seed: int = 0
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    stopping: str = "patience"
    patience: int = 5
    precision: str = "fast"
    validate: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise TrainingError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise TrainingError("batch_size must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise TrainingError(f"unknown optimizer {self.optimizer!r}")
        if self.stopping not in ("max-epochs", "patience"):
            raise TrainingError(f"unknown stopping rule {self.stopping!r}")
        if self.epochs < 0:
            raise TrainingError("epochs must be >= 0")


@dataclass
class LossRecord:
    epoch: int
    batch: int
    loss: float
    negative_scores: np.ndarray
    strategy: str
    wall_time: float


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_mrr: float | None
    val_recall: dict[int, float]
    wall_time_s: float
    train_time_s: float


@dataclass
class TrainTrace:
    """Instrumentation hooks filled in by :func:`train`."""

    refreshes: list[tuple[int, int]] = field(default_factory=list)
    recompute_epochs: list[int] = field(default_factory=list)
    batch_starts: dict[int, list[int]] = field(default_factory=dict)
    built: dict[int, bytes] = field(default_factory=dict)
    served: dict[int, bytes] = field(default_factory=dict)
    losses: list[LossRecord] = field(default_factory=list)
    negatives: dict[int, list[list[int]]] = field(default_factory=dict)


@dataclass
class TrainResult:
    state: ModelState
    metrics: list[EpochMetrics]
    best_epoch: int | None
    train_time_s: float
    final_state: ModelState | None = None


# ---------------------------------------------------------------- scores and loss


def pair_score(h_a, h_b, mode: str = "dot", params=None) -> float:
    a = np.asarray(h_a.vector if isinstance(h_a, Embedding) else h_a, dtype=np.float64)
    b = np.asarray(h_b.vector if isinstance(h_b, Embedding) else h_b, dtype=np.float64)
    if mode == "dot":
        return float(a @ b)
    if mode == "cosine":
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0 or nb == 0:
            return 0.0
        return float(a @ b / (na * nb))
    if mode in ("mlp", "mlp-concat"):
        expr = score_expr(ad.const(a.reshape(1, -1)), ad.const(b.reshape(1, -1)), "mlp-concat", 1)
        return float(ad.evaluate(expr, params, "exact")[0])
    raise TrainingError(f"unknown score mode {mode!r}")


def link_loss(h_u: ad.Expr, h_v: ad.Expr, negatives: list[ad.Expr], score_mode: str = "dot", n: int = 1) -> ad.Expr:
    """Mean over rows of -log s(score(v, u)) - sum_neg log s(-score(neg, u))."""
    if not negatives:
        raise TrainingError("link_loss needs at least one negative")
    total = -ad.log_sigmoid(score_expr(h_v, h_u, score_mode, n))
    for h_n in negatives:
        total = total - ad.log_sigmoid(-score_expr(h_n, h_u, score_mode, n))
    return ad.mean(total)


# ---------------------------------------------------------------- optimizers


class SGD:
    def __init__(self, learning_rate: float):
        self.learning_rate = learning_rate

    def step(self, params: dict, grads: dict) -> dict:
        _check_finite(grads)
        for k, g in grads.items():
            params[k] = params[k] - self.learning_rate * g
        return params


class Adam:
    def __init__(self, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict, grads: dict) -> dict:
        _check_finite(grads)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, g in grads.items():
            g = np.asarray(g, dtype=np.float64)
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            m *= b1
            m += (1 - b1) * g
            v = self.v[k]
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1**self.t)
            vhat = v / (1 - b2**self.t)
            params[k] = params[k] - self.learning_rate * mhat / (np.sqrt(vhat) + self.eps)
        return params


def _check_finite(grads: dict) -> None:
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise TrainingError(f"non-finite gradient for parameters {bad}; step aborted")


def make_optimizer(name: str, learning_rate: float):
    return SGD(learning_rate) if name == "sgd" else Adam(learning_rate)


def optimizer_step(params: dict, grads: dict, cfg: TrainConfig, optimizer=None) -> dict:
    """Apply one update in place. ``optimizer`` carries Adam moments between calls."""
    for k, g in grads.items():
        if np.shape(g) != np.shape(params[k]):
            raise TrainingError(f"gradient shape mismatch for {k}")
    optimizer = optimizer or make_optimizer(cfg.optimizer, cfg.learning_rate)
    return optimizer.step(params, grads)


# ---------------------------------------------------------------- batch loss


def batch_loss_expr(state: ModelState, graph: TemporalGraph, ordinals, negatives: np.ndarray, cutoff: int) -> ad.Expr:
    """Loss expression for a batch; ``negatives`` is (B, Q)."""
    ordinals = np.asarray(ordinals)
    b = len(ordinals)
    u = graph.sources[ordinals]
    v = graph.targets[ordinals]
    t = graph.times[ordinals]
    q = negatives.shape[1]
    nodes = np.concatenate([u, v] + [negatives[:, j] for j in range(q)])
    h = embedding_expr(state, graph, nodes, np.tile(t, 2 + q), cutoff)
    part = lambda j: ad.slice_(h, (slice(j * b, (j + 1) * b),))  # noqa: E731
    return link_loss(part(0), part(1), [part(2 + j) for j in range(q)], state.config.score_mode, b)


def batches(rng_range: range, batch_size: int):
    for s in range(rng_range.start, rng_range.stop, batch_size):
        yield range(s, min(s + batch_size, rng_range.stop))


# ---------------------------------------------------------------- training loop


def train(
    graph: TemporalGraph,
    split,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    candidate_policy: str = "all-nodes",
    trace: TrainTrace | None = None,
    init: ModelState | None = None,
) -> TrainResult:
    """Chronological mini-batch training with pluggable negative sampling.

    Returns the best-validation checkpoint (parameters plus memory rolled
    through the validation range) when validation is enabled, otherwise the
    final state.
    """
    from .evaluation import evaluate

    train_range, val_range = split[0], split[1]
    if len(train_range) == 0:
        raise TrainingError("train range is empty")
    state = init.copy() if init is not None else init_for_graph(model_cfg, graph, train_cfg.seed)
    if train_cfg.epochs == 0:
        return TrainResult(state, [], None, 0.0)

    scfg = train_cfg.sampler
    rng = np.random.default_rng(train_cfg.seed)
    sampler_rng = np.random.default_rng([train_cfg.seed, 1])
    optimizer = make_optimizer(train_cfg.optimizer, train_cfg.learning_rate)
    cache = CandidateCache()
    static = None
    if scfg.strategy == "static-hn":
        static = build_static_distribution(graph, train_range, seed=train_cfg.seed)
    universes: dict[int, np.ndarray] = {}

    def universe(u: int) -> np.ndarray:
        key = int(graph.partition[u]) if scfg.restrict_to_partition else -1
        if key not in universes:
            universes[key] = universe_for(graph, u, scfg.restrict_to_partition)
        return universes[key]

    def allowed(u: int) -> np.ndarray:
        mask = np.zeros(graph.num_nodes, dtype=bool)
        mask[universe(u)] = True
        return mask

    metrics: list[EpochMetrics] = []
    best_mrr, best_state, best_epoch, stale = -np.inf, None, None, 0
    wall0 = time.perf_counter()
    train_time = 0.0
    wanted = list(state.params)

    for epoch in range(train_cfg.epochs):
        t_epoch = time.perf_counter()
        state.reset_memory()
        recompute = epoch % scfg.recompute_frequency == 0
        snapshot = None
        served = CandidateCache()
        losses = []
        if trace is not None:
            trace.batch_starts[epoch] = []
            if recompute and scfg.uses_cache:
                trace.recompute_epochs.append(epoch)
        epoch_negs = []
        for batch_id, br in enumerate(batches(train_range, train_cfg.batch_size)):
            b0 = br.start
            ords = np.arange(br.start, br.stop)
            us, vs, ts = graph.sources[ords], graph.targets[ords], graph.times[ords]
            if trace is not None:
                trace.batch_starts[epoch].append(b0)
            if scfg.uses_cache:
                if batch_id % scfg.refresh_period == 0 and recompute:
                    snapshot = refresh_snapshot(state, graph, float(ts[0]), b0)
                    if trace is not None:
                        trace.refreshes.append((epoch, batch_id))
                if recompute:
                    lists = topk_batch(
                        snapshot, us, vs, scfg.K, scfg.similarity, state.params,
                        allowed if scfg.restrict_to_partition else None,
                    )
                    for i, o in enumerate(ords):
                        cache.put((int(us[i]), int(vs[i]), float(ts[i]), int(o)), lists[i], epoch)
            negs = []
            for i, o in enumerate(ords):
                ctx = SamplerContext(
                    int(us[i]), int(vs[i]), float(ts[i]), int(o), sampler_rng, universe(int(us[i])),
                    graph=graph, cache=cache, static=static, cutoff=b0,
                )
                if scfg.uses_cache:
                    served.lists[ctx.key] = cache.get(ctx.key)
                negs.append(draw_negatives(scfg, ctx))
            negs = np.asarray(negs, dtype=np.int64)
            epoch_negs.extend(negs.tolist())
            loss_expr = batch_loss_expr(state, graph, ords, negs, b0)
            try:
                value, grads = ad.value_and_gradient(loss_expr, state.params, wanted, train_cfg.precision)
            except ad.NonFiniteError as exc:
                raise TrainingError(f"non-finite loss at epoch {epoch} batch {batch_id}: {exc}") from exc
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch} batch {batch_id}")
            optimizer.step(state.params, grads)
            memory_update(state, graph, ords)
            rec = LossRecord(epoch, batch_id, float(value), negs, scfg.strategy, time.perf_counter() - wall0)
            losses.append(rec)
            if trace is not None:
                trace.losses.append(rec)
        train_time += time.perf_counter() - t_epoch
        if trace is not None:
            trace.negatives[epoch] = epoch_negs
            if scfg.uses_cache:
                served.built_in_epoch = cache.built_in_epoch
                trace.served[epoch] = served.to_bytes()
                if recompute:
                    trace.built[epoch] = cache.to_bytes()
        train_loss = float(np.mean([r.loss for r in losses]))
        log.info("epoch %d train_loss %.5f", epoch, train_loss)

        val_mrr, val_recall = None, {}
        if train_cfg.validate and len(val_range):
            val_metrics, rolled = evaluate(state, graph, val_range, candidate_policy, return_state=True)
            val_mrr, val_recall = val_metrics.mrr, dict(val_metrics.recall_at)
            if val_mrr > best_mrr:
                best_mrr, best_state, best_epoch, stale = val_mrr, rolled, epoch, 0
            else:
                stale += 1
        metrics.append(
            EpochMetrics(epoch, train_loss, val_mrr, val_recall, time.perf_counter() - t_epoch, train_time)
        )
        if train_cfg.stopping == "patience" and best_state is not None and stale >= train_cfg.patience:
            log.info("early stop at epoch %d", epoch)
            break

    final = state
    if best_state is None:
        best_state = state
    return TrainResult(best_state, metrics, best_epoch, train_time, final_state=final)


# ---------------------------------------------------------------- gradient probe


@dataclass
class VarianceProbeReport:
    key: tuple
    candidates: np.ndarray
    grad_norms: np.ndarray
    losses: np.ndarray
    spearman: float | None
    degenerate: bool

    @property
    def candidate_count(self) -> int:
        return len(self.candidates)


def gradient_variance_probe(
    state: ModelState,
    graph: TemporalGraph,
    ordinal: int,
    candidates,
    include_positive: bool = False,
    precision: str = "exact",
) -> VarianceProbeReport:
    """Per-candidate negative loss and full-parameter gradient norm for one interaction.

    By default each candidate's loss is the negative term
    ``-log s(-score(c, u))`` and the gradient is that term's gradient, i.e.
    the part of the interaction loss that depends on the negative.
    """
    e = graph.interaction(ordinal)
    candidates = np.asarray(candidates, dtype=np.int64)
    if np.any((candidates == e.source) | (candidates == e.target)):
        raise TrainingError("probe candidates must exclude u and v")
    n = len(candidates)
    nodes = np.concatenate([[e.source, e.target], candidates])
    h = embedding_expr(state, graph, nodes, np.full(len(nodes), e.time), cutoff=ordinal)
    h_u = ad.slice_(h, (slice(0, 1),))
    h_v = ad.slice_(h, (slice(1, 2),))
    mode = state.config.score_mode
    wanted = list(state.params)
    norms = np.empty(n)
    losses = np.empty(n)
    for i in range(n):
        h_c = ad.slice_(h, (slice(2 + i, 3 + i),))
        if include_positive:
            loss = link_loss(h_u, h_v, [h_c], mode, 1)
        else:
            loss = ad.mean(-ad.log_sigmoid(-score_expr(h_c, h_u, mode, 1)))
        value, grads = ad.value_and_gradient(loss, state.params, wanted, precision)
        losses[i] = float(value)
        norms[i] = float(np.sqrt(np.sum([np.sum(np.square(g, dtype=np.float64)) for g in grads.values()])))
    degenerate = n < 2 or np.ptp(losses) == 0 or np.ptp(norms) == 0
    rho = None if degenerate else float(stats.spearmanr(losses, norms).statistic)
    return VarianceProbeReport(e.key, candidates, norms, losses, rho, bool(degenerate))
