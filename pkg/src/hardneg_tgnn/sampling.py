"""Negative-node samplers: uniform, top-K hard negatives, and heuristic baselines."""

from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .graph import NONE, TemporalGraph
from .model import ModelState, embed_nodes

log = logging.getLogger(__name__)

STRATEGIES = ("uniform", "hard-topk", "nearest-only", "static-hn", "ifq-hn", "hybrid-un-hn")
CACHED_STRATEGIES = ("hard-topk", "nearest-only", "hybrid-un-hn")
SIMILARITIES = ("dot", "cosine", "mlp")

CACHE_MAGIC = b"HNCC"
CACHE_VERSION = 1


class SamplingError(ValueError):
    pass


class SchedulingError(KeyError):
    """A hard-negative lookup missed the cache: it was never built in a refresh epoch."""


@dataclass
class SamplerConfig:
    strategy: str = "uniform"
    K: int = 5
    refresh_period: int = 20
    recompute_frequency: int = 1
    similarity: str = "dot"
    restrict_to_partition: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise SamplingError(f"unknown strategy {self.strategy!r}")
        if self.similarity not in SIMILARITIES:
            raise SamplingError(f"unknown similarity {self.similarity!r}")
        if min(self.K, self.refresh_period, self.recompute_frequency) < 1:
            raise SamplingError("K, refresh_period and recompute_frequency must be >= 1")

    @property
    def uses_cache(self) -> bool:
        return self.strategy in CACHED_STRATEGIES


@dataclass
class EmbeddingSnapshot:
    matrix: np.ndarray
    at_ordinal: int
    at_time: float


# ---------------------------------------------------------------- uniform


def sample_uniform(universe, exclude, rng: np.random.Generator) -> int:
    universe = np.asarray(universe)
    exclude = set(int(x) for x in exclude)
    if len(universe):
        for _ in range(32):
            c = int(universe[rng.integers(len(universe))])
            if c not in exclude:
                return c
    remaining = np.array([x for x in universe if int(x) not in exclude])
    if len(remaining) == 0:
        raise SamplingError("no candidate left after exclusion")
    return int(remaining[rng.integers(len(remaining))])


# ---------------------------------------------------------------- snapshots and top-K


def refresh_snapshot(state: ModelState, graph: TemporalGraph, t: float, ordinal: int, chunk: int = 4096) -> EmbeddingSnapshot:
    """Embeddings of every node at time ``t`` using events before ``ordinal``."""
    nodes = np.arange(graph.num_nodes)
    matrix = embed_nodes(state, graph, nodes, np.full(len(nodes), t), cutoff=ordinal, chunk=chunk)
    return EmbeddingSnapshot(matrix, int(ordinal), float(t))


def similarity_scores(matrix: np.ndarray, sources, similarity: str = "dot", params=None) -> np.ndarray:
    """Scores of every row of ``matrix`` against each source row, shape (len(sources), N)."""
    sources = np.asarray(sources, dtype=np.int64)
    src = matrix[sources]
    if similarity == "dot":
        return src @ matrix.T
    if similarity == "cosine":
        norms = np.linalg.norm(matrix, axis=1)
        safe = np.where(norms > 0, norms, 1.0)
        unit = matrix / safe[:, None]
        out = unit[sources] @ unit.T
        out[:, norms == 0] = 0.0
        out[norms[sources] == 0, :] = 0.0
        return out
    if similarity == "mlp":
        if params is None or "score.W1" not in params:
            raise SamplingError("mlp similarity needs an mlp-concat scorer")
        d = matrix.shape[1]
        w1 = params["score.W1"]
        cand = matrix @ w1[:d]
        base = src @ w1[d:] + params["score.b1"]
        hidden = np.tanh(cand[None, :, :] + base[:, None, :])
        return hidden @ params["score.w2"][:, 0] + params["score.b2"][0]
    raise SamplingError(f"unknown similarity {similarity!r}")


def _ranked(scores: np.ndarray, allowed: np.ndarray, K: int) -> np.ndarray:
    ids = np.flatnonzero(allowed)
    if len(ids) == 0:
        raise SamplingError("fewer than one candidate remains after exclusion")
    # stable sort on -score keeps ascending node id among ties
    order = np.argsort(-scores[ids], kind="stable")
    return ids[order[:K]]


def topk_candidates(
    snapshot: EmbeddingSnapshot,
    u: int,
    K: int,
    exclude=(),
    similarity: str = "dot",
    params=None,
    allowed: np.ndarray | None = None,
) -> list[int]:
    if K < 1:
        raise SamplingError("K must be >= 1")
    scores = similarity_scores(snapshot.matrix, [u], similarity, params)[0]
    mask = np.ones(len(scores), dtype=bool) if allowed is None else allowed.copy()
    mask[list(int(x) for x in exclude)] = False
    return [int(x) for x in _ranked(scores, mask, K)]


def topk_batch(
    snapshot: EmbeddingSnapshot,
    sources,
    targets,
    K: int,
    similarity: str = "dot",
    params=None,
    allowed_for=None,
) -> list[np.ndarray]:
    """Top-K lists for a batch of interactions, each excluding its own {u, v}."""
    sources = np.asarray(sources)
    targets = np.asarray(targets)
    scores = similarity_scores(snapshot.matrix, sources, similarity, params)
    n = snapshot.matrix.shape[0]
    out = []
    for i, (u, v) in enumerate(zip(sources, targets)):
        mask = np.ones(n, dtype=bool) if allowed_for is None else allowed_for(int(u)).copy()
        mask[u] = False
        mask[v] = False
        out.append(_ranked(scores[i], mask, K))
    return out


# ---------------------------------------------------------------- cache


class CandidateCache:
    """Interaction key -> candidate list, built in recompute epochs."""

    def __init__(self):
        self.lists: dict[tuple, tuple[int, ...]] = {}
        self.built_in_epoch: int | None = None

    def __len__(self) -> int:
        return len(self.lists)

    def __contains__(self, key) -> bool:
        return key in self.lists

    def put(self, key: tuple, candidates, epoch: int) -> None:
        u, v = key[0], key[1]
        cands = tuple(int(c) for c in candidates)
        if u in cands or v in cands:
            raise SamplingError(f"candidate list for {key} contains an endpoint")
        self.lists[key] = cands
        self.built_in_epoch = epoch

    def get(self, key: tuple) -> tuple[int, ...]:
        try:
            return self.lists[key]
        except KeyError:
            raise SchedulingError(f"no cached candidates for interaction {key}") from None

    def to_bytes(self, keys=None) -> bytes:
        """Versioned little-endian spill format."""
        keys = sorted(self.lists, key=lambda k: k[3]) if keys is None else list(keys)
        buf = io.BytesIO()
        buf.write(CACHE_MAGIC)
        buf.write(struct.pack("<HqQ", CACHE_VERSION, -1 if self.built_in_epoch is None else self.built_in_epoch, len(keys)))
        for key in keys:
            cands = self.lists[key]
            buf.write(struct.pack("<qqdqI", key[0], key[1], key[2], key[3], len(cands)))
            buf.write(np.asarray(cands, dtype="<i8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "CandidateCache":
        if data[:4] != CACHE_MAGIC:
            raise SamplingError("not a candidate cache file")
        version, epoch, count = struct.unpack_from("<HqQ", data, 4)
        if version != CACHE_VERSION:
            raise SamplingError(f"unsupported cache version {version}")
        cache = cls()
        cache.built_in_epoch = None if epoch < 0 else epoch
        off = 4 + struct.calcsize("<HqQ")
        rec = struct.calcsize("<qqdqI")
        for _ in range(count):
            u, v, t, o, n = struct.unpack_from("<qqdqI", data, off)
            off += rec
            cands = np.frombuffer(data, dtype="<i8", count=n, offset=off)
            off += 8 * n
            cache.lists[(u, v, t, o)] = tuple(int(c) for c in cands)
        return cache

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "CandidateCache":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def sample_hard_negative(cache: CandidateCache, key: tuple, rng: np.random.Generator) -> int:
    cands = cache.get(key)
    if not cands:
        raise SamplingError(f"empty candidate list for {key}")
    return cands[int(rng.integers(len(cands)))]


# ---------------------------------------------------------------- heuristic baselines


def _categorical_excluding(probs: np.ndarray, exclude, universe, rng) -> int:
    p = probs.copy()
    p[list(int(x) for x in exclude)] = 0.0
    total = p.sum()
    if total <= 0:
        return sample_uniform(universe, exclude, rng)
    return int(rng.choice(len(p), p=p / total))


class StaticDistribution:
    """Per-source softmax over cosine similarities of static-graph embeddings."""

    def __init__(self, embeddings: np.ndarray, static_nodes: np.ndarray):
        norms = np.linalg.norm(embeddings, axis=1, keepdims=True)
        self.unit = embeddings / np.where(norms > 0, norms, 1.0)
        self.static_nodes = np.asarray(static_nodes, dtype=np.int64)
        self.num_nodes = embeddings.shape[0]
        self._in_static = np.zeros(self.num_nodes, dtype=bool)
        self._in_static[self.static_nodes] = True
        self._rows: dict[int, np.ndarray] = {}

    def probabilities(self, u: int) -> np.ndarray:
        u = int(u)
        if u in self._rows:
            return self._rows[u]
        p = np.zeros(self.num_nodes)
        if not self._in_static[u]:
            p[:] = 1.0 / self.num_nodes
        else:
            cos = self.unit[self.static_nodes] @ self.unit[u]
            w = np.exp(cos - cos.max())
            p[self.static_nodes] = w / w.sum()
        self._rows[u] = p
        return p

    def sample(self, u: int, exclude, universe, rng) -> int:
        p = self.probabilities(u)
        if universe is not None and len(universe) < self.num_nodes:
            mask = np.zeros(self.num_nodes, dtype=bool)
            mask[np.asarray(universe)] = True
            p = np.where(mask, p, 0.0)
        return _categorical_excluding(p, exclude, universe, rng)


def _static_gat_loss(h, edges, negs):
    hu = ad.take_rows(h, edges[:, 0])
    hv = ad.take_rows(h, edges[:, 1])
    hn = ad.take_rows(h, negs)
    pos = ad.log_sigmoid(ad.rowdot(hu, hv))
    neg = ad.log_sigmoid(-ad.rowdot(hu, hn))
    return -ad.mean(pos + neg)


def _gat_layer(h, layer: int, nbr: np.ndarray, mask: np.ndarray, n: int, dim: int) -> ad.Expr:
    k = nbr.shape[1]
    z = ad.matmul(h, ad.param(f"gat{layer}.W"))
    s_self = ad.matmul(z, ad.param(f"gat{layer}.a_src"))  # (n, 1)
    s_nbr = ad.reshape(ad.take_rows(ad.matmul(z, ad.param(f"gat{layer}.a_dst")), nbr.reshape(-1)), (n, k))
    e = ad.leaky_relu(ad.matmul(s_self, ad.const(np.ones((1, k)))) + s_nbr, 0.2)
    alpha = ad.softmax(e + ad.const(np.where(mask, 0.0, -1e9)), axis=1)
    zn = ad.reshape(ad.take_rows(z, nbr.reshape(-1)), (n, k, dim))
    alpha3 = ad.reshape(ad.matmul(ad.reshape(alpha, (n * k, 1)), ad.const(np.ones((1, dim)))), (n, k, dim))
    return ad.sum(alpha3 * zn, axis=1)


def build_static_distribution(
    graph: TemporalGraph,
    train_range=None,
    dim: int = 64,
    epochs: int = 50,
    learning_rate: float = 0.01,
    max_neighbors: int = 25,
    seed: int = 0,
) -> StaticDistribution:
    """Train a 2-layer GAT on the time-collapsed train graph, then build the
    per-source cosine-softmax sampling distribution."""
    from .training import Adam

    train_range = range(len(graph)) if train_range is None else train_range
    if len(train_range) == 0:
        raise SamplingError("train split is empty")
    sl = slice(train_range.start, train_range.stop)
    pairs = np.unique(np.stack([graph.sources[sl], graph.targets[sl]], axis=1), axis=0)
    static_nodes = np.unique(pairs)
    local = {int(v): i for i, v in enumerate(static_nodes)}
    n = len(static_nodes)
    edges = np.array([[local[int(a)], local[int(b)]] for a, b in pairs], dtype=np.int64)

    adj: list[dict[int, int]] = [dict() for _ in range(n)]
    for a, b in edges:
        adj[a][b] = adj[a].get(b, 0) + 1
        adj[b][a] = adj[b].get(a, 0) + 1
    k = 1 + min(max_neighbors, max((len(x) for x in adj), default=0))
    nbr = np.zeros((n, k), dtype=np.int64)
    mask = np.zeros((n, k), dtype=bool)
    for i in range(n):
        nbr[i, 0], mask[i, 0] = i, True
        top = sorted(adj[i], key=lambda j: (-adj[i][j], j))[: k - 1]
        nbr[i, 1 : 1 + len(top)] = top
        mask[i, 1 : 1 + len(top)] = True

    rng = np.random.default_rng(seed)
    params = {
        "x": rng.normal(scale=0.1, size=(n, dim)),
        "gat1.W": rng.normal(scale=1 / np.sqrt(dim), size=(dim, dim)),
        "gat1.a_src": rng.normal(scale=0.1, size=(dim, 1)),
        "gat1.a_dst": rng.normal(scale=0.1, size=(dim, 1)),
        "gat2.W": rng.normal(scale=1 / np.sqrt(dim), size=(dim, dim)),
        "gat2.a_src": rng.normal(scale=0.1, size=(dim, 1)),
        "gat2.a_dst": rng.normal(scale=0.1, size=(dim, 1)),
    }
    opt = Adam(learning_rate)

    def forward():
        h = ad.tanh(_gat_layer(ad.param("x"), 1, nbr, mask, n, dim))
        return _gat_layer(h, 2, nbr, mask, n, dim)

    for _ in range(epochs):
        negs = rng.integers(0, n, size=len(edges))
        loss = _static_gat_loss(forward(), edges, negs)
        _, grads = ad.value_and_gradient(loss, params, list(params), precision="exact")
        opt.step(params, grads)
    h_local = ad.evaluate(forward(), params, "exact")
    full = np.zeros((graph.num_nodes, dim))
    full[static_nodes] = h_local
    return StaticDistribution(full, static_nodes)


def build_ifq_distribution(graph: TemporalGraph, source: int, before: float, universe=None, cutoff=None) -> np.ndarray:
    """Probabilities proportional to how often ``source`` met each node before ``before``."""
    idx = graph.neighbors
    pos = idx.history(int(source), before, cutoff)
    counts = np.bincount(idx.other[pos], minlength=graph.num_nodes).astype(np.float64)
    if universe is not None:
        keep = np.zeros(graph.num_nodes, dtype=bool)
        keep[np.asarray(universe)] = True
        counts = np.where(keep, counts, 0.0)
    total = counts.sum()
    if total == 0:
        p = np.zeros(graph.num_nodes)
        members = np.arange(graph.num_nodes) if universe is None else np.asarray(universe)
        p[members] = 1.0 / len(members)
        return p
    return counts / total


# ---------------------------------------------------------------- dispatch


@dataclass
class SamplerContext:
    u: int
    v: int
    t: float
    ordinal: int
    rng: np.random.Generator
    universe: np.ndarray
    graph: TemporalGraph | None = None
    cache: CandidateCache | None = None
    static: StaticDistribution | None = None
    cutoff: int | None = None
    extra: dict = field(default_factory=dict)

    @property
    def key(self) -> tuple:
        return (int(self.u), int(self.v), float(self.t), int(self.ordinal))

    @property
    def exclude(self) -> tuple[int, int]:
        return (int(self.u), int(self.v))


def universe_for(graph: TemporalGraph, u: int, restrict_to_partition: bool) -> np.ndarray:
    if not restrict_to_partition or graph.partition[u] == NONE:
        return np.arange(graph.num_nodes)
    return np.flatnonzero((graph.partition != graph.partition[u]) & (graph.partition != NONE))


def draw_negatives(config: SamplerConfig, ctx: SamplerContext) -> list[int]:
    s = config.strategy
    if s == "uniform":
        out = [sample_uniform(ctx.universe, ctx.exclude, ctx.rng)]
    elif s == "hard-topk":
        out = [sample_hard_negative(ctx.cache, ctx.key, ctx.rng)]
    elif s == "nearest-only":
        out = [ctx.cache.get(ctx.key)[0]]
    elif s == "hybrid-un-hn":
        out = [sample_uniform(ctx.universe, ctx.exclude, ctx.rng), sample_hard_negative(ctx.cache, ctx.key, ctx.rng)]
    elif s == "static-hn":
        out = [ctx.static.sample(ctx.u, ctx.exclude, ctx.universe, ctx.rng)]
    elif s == "ifq-hn":
        probs = build_ifq_distribution(ctx.graph, ctx.u, ctx.t, ctx.universe, ctx.cutoff)
        out = [_categorical_excluding(probs, ctx.exclude, ctx.universe, ctx.rng)]
    else:
        raise SamplingError(f"unknown strategy {s!r}")
    if any(x in ctx.exclude for x in out):
        raise SamplingError("sampler returned an interaction endpoint")
    return out
