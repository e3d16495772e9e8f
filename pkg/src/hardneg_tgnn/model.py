"""Temporal message-passing encoder with optional GRU node memory.

Embeddings are built as autodiff expressions over a batch of (node, time)
queries. Neighborhoods are read from the graph's :class:`NeighborIndex`
restricted to ``time < t`` and, when given, ``ordinal < cutoff``.

Memory follows the deferred raw-message scheme: an event's message is stored
as pending for both endpoints and only passes through the GRU when memory is
next read. The loss of a batch therefore never sees that batch's own events.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .graph import TemporalGraph

CHECKPOINT_FORMAT = "hardneg-tgnn-checkpoint"
CHECKPOINT_VERSION = 1

VARIANTS = ("tgat", "tgn")
OUT_INIT_SCALE = 0.1
SCORE_MODES = ("dot", "mlp-concat")


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    variant: str = "tgn"
    layers: int | None = None
    embed_dim: int = 100
    time_dim: int = 100
    neighbor_limit: int = 10
    use_memory: bool | None = None
    score_mode: str = "dot"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ModelError(f"unknown variant {self.variant!r}")
        if self.layers is None:
            self.layers = 1 if self.variant == "tgn" else 2
        if self.use_memory is None:
            self.use_memory = self.variant == "tgn"
        if self.variant == "tgn" and not self.use_memory:
            raise ModelError("variant tgn requires use_memory=true")
        if self.layers < 1 or min(self.embed_dim, self.time_dim, self.neighbor_limit) < 1:
            raise ModelError("layers and dimensions must be >= 1")
        if self.score_mode not in SCORE_MODES:
            raise ModelError(f"unknown score_mode {self.score_mode!r}")


@dataclass
class Embedding:
    vector: np.ndarray
    node: int
    at_time: float


@dataclass
class ModelState:
    config: ModelConfig
    params: dict[str, np.ndarray]
    node_dim: int
    edge_dim: int
    memory: np.ndarray
    last_update: np.ndarray
    pending_raw: np.ndarray
    pending_time: np.ndarray
    has_pending: np.ndarray
    clock: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def num_nodes(self) -> int:
        return self.memory.shape[0]

    def copy(self) -> "ModelState":
        return copy.deepcopy(self)

    def reset_memory(self) -> None:
        self.memory[:] = 0.0
        self.last_update[:] = 0.0
        self.pending_raw[:] = 0.0
        self.pending_time[:] = 0.0
        self.has_pending[:] = False
        self.clock = 0.0


# ---------------------------------------------------------------- parameters


def _glorot(rng, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def message_input_dim(cfg: ModelConfig, node_dim: int, edge_dim: int) -> int:
    return 2 * cfg.embed_dim + cfg.time_dim + 2 * node_dim + edge_dim


def raw_message_dim(cfg: ModelConfig, edge_dim: int) -> int:
    return 2 * cfg.embed_dim + edge_dim


def init_state(cfg: ModelConfig, num_nodes: int, node_dim: int, edge_dim: int, seed: int = 0) -> ModelState:
    rng = np.random.default_rng(seed)
    d = cfg.embed_dim
    p: dict[str, np.ndarray] = {
        "time.w": (1.0 / 10 ** np.linspace(0, 9, cfg.time_dim)).reshape(1, -1),
        "time.b": np.zeros(cfg.time_dim),
    }
    if node_dim != d:
        p["feat.W"] = _glorot(rng, max(node_dim, 1), d)[:node_dim]
    m_in = message_input_dim(cfg, node_dim, edge_dim)
    for layer in range(1, cfg.layers + 1):
        p[f"msg{layer}.W"] = _glorot(rng, m_in, d)
        p[f"msg{layer}.b"] = np.zeros(d)
        p[f"comb{layer}.W"] = _glorot(rng, 2 * d, d)
        p[f"comb{layer}.b"] = np.zeros(d)
        if cfg.variant == "tgat":
            p[f"att{layer}.Wq"] = _glorot(rng, d, d)
            p[f"att{layer}.Wk"] = _glorot(rng, d, d)
    p["out.W"] = _glorot(rng, d, d) * OUT_INIT_SCALE
    p["out.b"] = np.zeros(d)
    if cfg.use_memory:
        g_in = raw_message_dim(cfg, edge_dim) + cfg.time_dim
        p["gru.Wx"] = _glorot(rng, g_in, 3 * d)
        p["gru.Wh"] = _glorot(rng, d, 3 * d)
        p["gru.bx"] = np.zeros(3 * d)
        p["gru.bh"] = np.zeros(3 * d)
    if cfg.score_mode == "mlp-concat":
        p["score.W1"] = _glorot(rng, 2 * d, d)
        p["score.b1"] = np.zeros(d)
        p["score.w2"] = _glorot(rng, d, 1)
        p["score.b2"] = np.zeros(1)
    raw = raw_message_dim(cfg, edge_dim)
    return ModelState(
        config=cfg,
        params=p,
        node_dim=node_dim,
        edge_dim=edge_dim,
        memory=np.zeros((num_nodes, d)),
        last_update=np.zeros(num_nodes),
        pending_raw=np.zeros((num_nodes, raw)),
        pending_time=np.zeros(num_nodes),
        has_pending=np.zeros(num_nodes, dtype=bool),
    )


def init_for_graph(cfg: ModelConfig, graph: TemporalGraph, seed: int = 0) -> ModelState:
    return init_state(cfg, graph.num_nodes, graph.node_dim, graph.edge_dim, seed)


# ---------------------------------------------------------------- building blocks


def _affine(x: ad.Expr, prefix: str, n: int, w: str = "W", b: str = "b") -> ad.Expr:
    return ad.matmul(x, ad.param(f"{prefix}.{w}")) + ad.tile_rows(ad.param(f"{prefix}.{b}"), n)


def time_encoding_expr(delta_t: np.ndarray) -> ad.Expr:
    """cos(w * dt + b) for a vector of elapsed times, shape (n, time_dim)."""
    dt = np.asarray(delta_t, dtype=np.float64).reshape(-1, 1)
    return ad.cos(ad.matmul(ad.const(dt), ad.param("time.w")) + ad.tile_rows(ad.param("time.b"), len(dt)))


def message_expr(layer: int, h_self, h_nbr, time_enc, x_self, x_nbr, x_edge, n: int) -> ad.Expr:
    inp = ad.concat([h_self, h_nbr, time_enc, x_self, x_nbr, x_edge], axis=1)
    return ad.tanh(_affine(inp, f"msg{layer}", n))


def aggregate_expr(cfg: ModelConfig, layer: int, h_self: ad.Expr, msgs: ad.Expr, mask: np.ndarray) -> ad.Expr:
    """Combine a node's previous-layer embedding with its (n, k, d) padded messages.

    Padded slots must hold zero messages; ``mask`` marks the real ones.
    """
    n, k = mask.shape
    d = cfg.embed_dim
    if cfg.variant == "tgat":
        q = ad.matmul(h_self, ad.param(f"att{layer}.Wq"))
        keys = ad.reshape(ad.matmul(ad.reshape(msgs, (n * k, d)), ad.param(f"att{layer}.Wk")), (n, k, d))
        agg = ad.attention(q, keys, msgs, mask)
    else:
        agg = ad.sum(msgs, axis=1)
    return ad.tanh(_affine(ad.concat([h_self, agg], axis=1), f"comb{layer}", n))


def gru_expr(h: ad.Expr, x: ad.Expr, n: int, d: int) -> ad.Expr:
    gx = _affine(x, "gru", n, "Wx", "bx")
    gh = _affine(h, "gru", n, "Wh", "bh")
    z = ad.sigmoid(ad.slice_(gx, (slice(None), slice(0, d))) + ad.slice_(gh, (slice(None), slice(0, d))))
    r = ad.sigmoid(ad.slice_(gx, (slice(None), slice(d, 2 * d))) + ad.slice_(gh, (slice(None), slice(d, 2 * d))))
    cand = ad.tanh(ad.slice_(gx, (slice(None), slice(2 * d, 3 * d))) + r * ad.slice_(gh, (slice(None), slice(2 * d, 3 * d))))
    return cand + z * (h - cand)


def memory_rows_expr(state: ModelState, nodes: np.ndarray) -> ad.Expr:
    """Effective memory (committed memory with pending messages folded in) for ``nodes``."""
    nodes = np.asarray(nodes, dtype=np.int64)
    d = state.config.embed_dim
    pend = state.has_pending[nodes]
    base = ad.const(state.memory[nodes])
    if not pend.any():
        return base
    pn = nodes[pend]
    dt = state.pending_time[pn] - state.last_update[pn]
    x = ad.concat([ad.const(state.pending_raw[pn]), time_encoding_expr(dt)], axis=1)
    updated = gru_expr(ad.const(state.memory[pn]), x, len(pn), d)
    index = np.arange(len(nodes))
    index[pend] = len(nodes) + np.arange(len(pn))
    return ad.take_rows(ad.concat([base, updated], axis=0), index)


def score_expr(cand: ad.Expr, src: ad.Expr, mode: str, n: int) -> ad.Expr:
    """Pair scores of matching rows, shape (n,)."""
    if mode == "dot":
        return ad.rowdot(cand, src)
    hidden = ad.tanh(_affine(ad.concat([cand, src], axis=1), "score", n, "W1", "b1"))
    return ad.reshape(_affine(hidden, "score", n, "w2", "b2"), (n,))


# ---------------------------------------------------------------- batched embeddings


class _Layer0:
    __slots__ = ("offset", "size")

    def __init__(self, offset: int, size: int):
        self.offset = offset
        self.size = size


class _LayerL:
    __slots__ = ("layer", "nodes", "times", "mask", "rows", "nbr", "nbr_time", "nbr_ord", "self_plan", "nbr_plan")


def _plan(graph, cfg, nodes, times, layer, cutoff, requests):
    if layer == 0:
        plan = _Layer0(sum(len(r) for r in requests), len(nodes))
        requests.append(nodes)
        return plan
    nbr, ords, ntimes, mask = graph.neighbors.query(nodes, times, cfg.neighbor_limit, cutoff)
    p = _LayerL()
    p.layer, p.nodes, p.times, p.mask = layer, nodes, times, mask
    flat = np.flatnonzero(mask)
    p.rows = flat // mask.shape[1]
    p.nbr = nbr.reshape(-1)[flat]
    p.nbr_time = ntimes.reshape(-1)[flat]
    p.nbr_ord = ords.reshape(-1)[flat]
    p.self_plan = _plan(graph, cfg, nodes, times, layer - 1, cutoff, requests)
    p.nbr_plan = _plan(graph, cfg, p.nbr, times[p.rows], layer - 1, cutoff, requests)
    return p


def _build(state, graph, plan, table, inverse):
    cfg = state.config
    if isinstance(plan, _Layer0):
        return ad.take_rows(table, inverse[plan.offset : plan.offset + plan.size])
    d = cfg.embed_dim
    n, k = plan.mask.shape
    h_self = _build(state, graph, plan.self_plan, table, inverse)
    nv = len(plan.rows)
    if nv == 0:
        msgs = ad.const(np.zeros((n, k, d)))
    else:
        h_nbr = _build(state, graph, plan.nbr_plan, table, inverse)
        msg = message_expr(
            plan.layer,
            ad.take_rows(h_self, plan.rows),
            h_nbr,
            time_encoding_expr(plan.times[plan.rows] - plan.nbr_time),
            ad.const(graph.node_features[plan.nodes[plan.rows]]),
            ad.const(graph.node_features[plan.nbr]),
            ad.const(graph.edge_features[plan.nbr_ord]),
            nv,
        )
        pad = np.zeros(n * k, dtype=np.int64)
        pad[np.flatnonzero(plan.mask)] = 1 + np.arange(nv)
        padded = ad.take_rows(ad.concat([ad.const(np.zeros((1, d))), msg], axis=0), pad)
        msgs = ad.reshape(padded, (n, k, d))
    return aggregate_expr(cfg, plan.layer, h_self, msgs, plan.mask)


def layer_zero_expr(state: ModelState, graph: TemporalGraph, nodes: np.ndarray) -> ad.Expr:
    cfg = state.config
    x = graph.node_features[nodes]
    if state.node_dim == cfg.embed_dim:
        h = ad.const(x)
    else:
        h = ad.matmul(ad.const(x), ad.param("feat.W"))
    if cfg.use_memory:
        h = h + memory_rows_expr(state, nodes)
    return h


def embedding_expr(state: ModelState, graph: TemporalGraph, nodes, times, cutoff=None) -> ad.Expr:
    """Expression for h^L of each (node, time) query, shape (n, embed_dim)."""
    nodes = np.asarray(nodes, dtype=np.int64)
    times = np.broadcast_to(np.asarray(times, dtype=np.float64), nodes.shape).copy()
    if nodes.size and (nodes.min() < 0 or nodes.max() >= graph.num_nodes):
        raise ModelError("unknown node id in embedding query")
    requests: list[np.ndarray] = []
    plan = _plan(graph, state.config, nodes, times, state.config.layers, cutoff, requests)
    allnodes = np.concatenate(requests)
    uniq, inverse = np.unique(allnodes, return_inverse=True)
    table = layer_zero_expr(state, graph, uniq)
    return _affine(_build(state, graph, plan, table, inverse), "out", len(nodes))


def embed_nodes(state, graph, nodes, times, cutoff=None, precision: str = "fast", chunk: int = 4096) -> np.ndarray:
    """Forward-only embeddings as an (n, d) float64 array."""
    nodes = np.asarray(nodes, dtype=np.int64)
    times = np.broadcast_to(np.asarray(times, dtype=np.float64), nodes.shape)
    out = np.empty((len(nodes), state.config.embed_dim))
    for s in range(0, len(nodes), chunk):
        e = embedding_expr(state, graph, nodes[s : s + chunk], times[s : s + chunk], cutoff)
        out[s : s + chunk] = ad.evaluate(e, state.params, precision)
    return out


def embed(node: int, t: float, state: ModelState, graph: TemporalGraph, cutoff=None, precision: str = "exact") -> Embedding:
    if t < 0:
        raise ModelError("time must be >= 0")
    if not 0 <= node < graph.num_nodes:
        raise ModelError(f"unknown node id {node}")
    vec = embed_nodes(state, graph, [node], [t], cutoff, precision)[0]
    return Embedding(vec, int(node), float(t))


# ---------------------------------------------------------------- single-query helpers


def time_encode(delta_t: float, state: ModelState, precision: str = "exact") -> np.ndarray:
    if delta_t < 0:
        raise ModelError("delta_t must be >= 0")
    return ad.evaluate(time_encoding_expr([delta_t]), state.params, precision)[0]


def layer_zero(node: int, t: float, state: ModelState, graph: TemporalGraph, precision: str = "exact") -> np.ndarray:
    if not 0 <= node < graph.num_nodes:
        raise ModelError(f"unknown node id {node}")
    return ad.evaluate(layer_zero_expr(state, graph, np.array([node])), state.params, precision)[0]


def compute_message(
    state: ModelState,
    graph: TemporalGraph,
    event_ordinal: int,
    t: float,
    layer: int,
    neighbor_embedding: np.ndarray,
    self_embedding: np.ndarray,
    self_node: int,
    precision: str = "exact",
) -> np.ndarray:
    """Message sent to ``self_node`` along one of its earlier events."""
    e = graph.interaction(event_ordinal)
    if not e.time < t:
        raise ModelError("message event must precede the query time")
    other = e.target if e.source == self_node else e.source
    expr = message_expr(
        layer,
        ad.const(np.reshape(self_embedding, (1, -1))),
        ad.const(np.reshape(neighbor_embedding, (1, -1))),
        time_encoding_expr([t - e.time]),
        ad.const(graph.node_features[[self_node]]),
        ad.const(graph.node_features[[other]]),
        ad.const(e.edge_features.reshape(1, -1)),
        1,
    )
    return ad.evaluate(expr, state.params, precision)[0]


def aggregate(state: ModelState, layer: int, messages, self_embedding, precision: str = "exact") -> np.ndarray:
    d = state.config.embed_dim
    msgs = np.asarray(messages, dtype=np.float64).reshape(1, -1, d)
    k = msgs.shape[1]
    if k == 0:
        msgs = np.zeros((1, 1, d))
        mask = np.zeros((1, 1), dtype=bool)
    else:
        mask = np.ones((1, k), dtype=bool)
    expr = aggregate_expr(state.config, layer, ad.const(np.reshape(self_embedding, (1, d))), ad.const(msgs), mask)
    return ad.evaluate(expr, state.params, precision)[0]


def effective_memory(state: ModelState, nodes) -> np.ndarray:
    return ad.evaluate(memory_rows_expr(state, np.asarray(nodes)), state.params, "exact")


# ---------------------------------------------------------------- memory


def memory_update(state: ModelState, graph: TemporalGraph, ordinals) -> ModelState:
    """Fold a chronological batch of events into node memory, in place.

    Nodes touched by the batch first commit their pending message through the
    GRU, then store the batch's events as their new pending messages (the
    last event per node wins). Returns ``state`` for chaining.
    """
    ordinals = np.asarray(ordinals, dtype=np.int64)
    if not state.config.use_memory or len(ordinals) == 0:
        if len(ordinals):
            state.clock = max(state.clock, float(graph.times[ordinals].max()))
        return state
    times = graph.times[ordinals]
    if np.any(np.diff(times) < 0) or times[0] < state.clock:
        raise ModelError("memory_update batch is out of chronological order")
    src = graph.sources[ordinals]
    dst = graph.targets[ordinals]
    touched = np.unique(np.concatenate([src, dst]))
    pend = touched[state.has_pending[touched]]
    if len(pend):
        new = ad.evaluate(memory_rows_expr(state, pend), state.params, "fast").astype(np.float64)
        state.memory[pend] = new
        state.last_update[pend] = state.pending_time[pend]
        state.has_pending[pend] = False
    d = state.config.embed_dim
    for i, o in enumerate(ordinals):
        u, v = src[i], dst[i]
        x = graph.edge_features[o]
        su, sv = state.memory[u].copy(), state.memory[v].copy()
        state.pending_raw[u, :d] = su
        state.pending_raw[u, d : 2 * d] = sv
        state.pending_raw[u, 2 * d :] = x
        state.pending_raw[v, :d] = sv
        state.pending_raw[v, d : 2 * d] = su
        state.pending_raw[v, 2 * d :] = x
        state.pending_time[[u, v]] = times[i]
        state.has_pending[[u, v]] = True
    state.clock = float(times[-1])
    return state


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(state: ModelState, path) -> None:
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(state.config),
        "node_dim": state.node_dim,
        "edge_dim": state.edge_dim,
        "clock": state.clock,
        "params": sorted(state.params),
        "extra": state.extra,
    }
    arrays = {f"param/{k}": v for k, v in state.params.items()}
    arrays.update(
        memory=state.memory,
        last_update=state.last_update,
        pending_raw=state.pending_raw,
        pending_time=state.pending_time,
        has_pending=state.has_pending,
    )
    with open(path, "wb") as fh:
        np.savez(fh, header=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path) -> ModelState:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    with np.load(path) as data:
        header = json.loads(bytes(data["header"]).decode())
        if header.get("format") != CHECKPOINT_FORMAT or header.get("version") != CHECKPOINT_VERSION:
            raise ModelError(f"{path}: unsupported checkpoint header")
        params = {k: data[f"param/{k}"].copy() for k in header["params"]}
        return ModelState(
            config=ModelConfig(**header["config"]),
            params=params,
            node_dim=header["node_dim"],
            edge_dim=header["edge_dim"],
            memory=data["memory"].copy(),
            last_update=data["last_update"].copy(),
            pending_raw=data["pending_raw"].copy(),
            pending_time=data["pending_time"].copy(),
            has_pending=data["has_pending"].copy(),
            clock=header["clock"],
            extra=header.get("extra", {}),
        )
