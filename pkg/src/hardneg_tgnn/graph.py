"""Continuous-time interaction log: loading, splitting, neighborhood queries."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

SOURCE, TARGET, NONE = 1, 2, 0
PARTITION_NAMES = {SOURCE: "source", TARGET: "target", NONE: "none"}

GRAPH_FORMAT = "hardneg-tgnn-graph"
GRAPH_VERSION = 1


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class Interaction:
    source: int
    target: int
    time: float
    edge_features: np.ndarray
    ordinal: int

    @property
    def key(self) -> tuple[int, int, float, int]:
        return (self.source, self.target, self.time, self.ordinal)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.70
    validation_fraction: float = 0.15

    def __post_init__(self):
        if not (0 < self.train_fraction < 1 and 0 < self.validation_fraction < 1):
            raise GraphError("split fractions must lie in (0, 1)")
        if self.train_fraction + self.validation_fraction >= 1:
            raise GraphError("train_fraction + validation_fraction must be < 1")


class TemporalGraph:
    """Chronologically sorted interaction log with a node registry.

    Columns are stored as parallel arrays; ``interaction(i)`` materialises a
    single :class:`Interaction`. Instances are treated as immutable.
    """

    def __init__(self, sources, targets, times, edge_features, node_features, partition=None):
        sources = np.asarray(sources, dtype=np.int64)
        targets = np.asarray(targets, dtype=np.int64)
        times = np.asarray(times, dtype=np.float64)
        edge_features = np.asarray(edge_features, dtype=np.float64)
        node_features = np.asarray(node_features, dtype=np.float64)
        m = len(sources)
        if not (len(targets) == len(times) == m):
            raise GraphError("source/target/time columns differ in length")
        if edge_features.ndim != 2 or edge_features.shape[0] != m:
            raise GraphError(f"edge features must be ({m}, D_e), got {edge_features.shape}")
        if node_features.ndim != 2:
            raise GraphError("node features must be a 2-d array")
        if np.any(times < 0):
            raise GraphError("negative timestamp")
        n = node_features.shape[0]
        if m and (min(sources.min(), targets.min()) < 0 or max(sources.max(), targets.max()) >= n):
            raise GraphError("interaction references a node outside the registry")
        if np.any(np.diff(times) < 0):
            raise GraphError("interactions must be sorted by time")
        self.sources = sources
        self.targets = targets
        self.times = times
        self.edge_features = edge_features
        self.node_features = node_features
        if partition is None:
            partition = np.zeros(n, dtype=np.int8)
        self.partition = np.asarray(partition, dtype=np.int8)
        if self.partition.shape != (n,):
            raise GraphError("partition must have one label per node")
        self._index: NeighborIndex | None = None

    @property
    def num_nodes(self) -> int:
        return self.node_features.shape[0]

    @property
    def num_interactions(self) -> int:
        return len(self.sources)

    @property
    def edge_dim(self) -> int:
        return self.edge_features.shape[1]

    @property
    def node_dim(self) -> int:
        return self.node_features.shape[1]

    @property
    def is_bipartite(self) -> bool:
        return bool(np.any(self.partition != NONE))

    def __len__(self) -> int:
        return self.num_interactions

    def interaction(self, i: int) -> Interaction:
        return Interaction(
            int(self.sources[i]), int(self.targets[i]), float(self.times[i]), self.edge_features[i], int(i)
        )

    def __iter__(self):
        return (self.interaction(i) for i in range(len(self)))

    @property
    def neighbors(self) -> "NeighborIndex":
        if self._index is None:
            self._index = NeighborIndex(self)
        return self._index

    def truncated(self, m: int) -> "TemporalGraph":
        """First ``m`` interactions over the same node registry."""
        m = min(m, len(self))
        return TemporalGraph(
            self.sources[:m], self.targets[:m], self.times[:m], self.edge_features[:m],
            self.node_features, self.partition,
        )

    def with_columns(self, **columns) -> "TemporalGraph":
        cols = dict(
            sources=self.sources, targets=self.targets, times=self.times,
            edge_features=self.edge_features, node_features=self.node_features, partition=self.partition,
        )
        cols.update(columns)
        return TemporalGraph(**cols)

    def equals(self, other: "TemporalGraph") -> bool:
        return all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("sources", "targets", "times", "edge_features", "node_features", "partition")
        )


class NeighborIndex:
    """Per-node event lists sorted by ordinal, flattened into one CSR layout.

    Interactions are undirected: each event is listed under both endpoints.
    """

    def __init__(self, graph: TemporalGraph):
        m = len(graph)
        n = graph.num_nodes
        loop = graph.sources == graph.targets  # a self-loop is listed once
        owner = np.concatenate([graph.sources, graph.targets[~loop]])
        other = np.concatenate([graph.targets, graph.sources[~loop]])
        ordinal = np.concatenate([np.arange(m), np.arange(m)[~loop]])
        order = np.lexsort((ordinal, owner))
        self.owner = owner[order]
        self.other = other[order]
        self.ordinal = ordinal[order]
        self.time = graph.times[self.ordinal]
        self.offsets = np.searchsorted(self.owner, np.arange(n + 1), side="left")
        self._stride = m + 1
        self._keys = self.owner * self._stride + self.ordinal
        self._times = graph.times
        self.num_nodes = n

    def horizon(self, t, cutoff=None) -> np.ndarray:
        """First ordinal excluded by (time < t, ordinal < cutoff)."""
        h = np.searchsorted(self._times, np.asarray(t, dtype=np.float64), side="left")
        if cutoff is not None:
            h = np.minimum(h, cutoff)
        return h

    def query(self, nodes, t, limit: int, cutoff=None):
        """Most recent ``limit`` events per node, oldest first, padded at the front.

        Returns ``(other, ordinal, time, mask)`` arrays of shape (n, limit).
        """
        nodes = np.asarray(nodes, dtype=np.int64)
        if len(self.owner) == 0:
            empty = np.zeros((len(nodes), limit), dtype=np.int64)
            return empty, empty, np.zeros(empty.shape), np.zeros(empty.shape, dtype=bool)
        h = self.horizon(np.broadcast_to(t, nodes.shape), cutoff)
        end = np.searchsorted(self._keys, nodes * self._stride + h, side="left")
        start = self.offsets[nodes]
        pos = end[:, None] - limit + np.arange(limit)[None, :]
        mask = pos >= start[:, None]
        safe = np.where(mask, pos, 0)
        return self.other[safe], self.ordinal[safe], self.time[safe], mask

    def history(self, node: int, t: float, cutoff=None) -> np.ndarray:
        """All event positions (into the flat arrays) of ``node`` strictly before ``t``."""
        h = int(self.horizon(t, cutoff))
        start = self.offsets[node]
        end = np.searchsorted(self._keys, node * self._stride + h, side="left")
        return np.arange(start, end)


def temporal_neighborhood(g: TemporalGraph, node: int, t: float, limit: int = 10) -> list[Interaction]:
    if limit < 1:
        raise GraphError("limit must be >= 1")
    if not 0 <= node < g.num_nodes:
        raise GraphError(f"unknown node id {node}")
    _, ordinals, _, mask = g.neighbors.query([node], t, limit)
    return [g.interaction(int(o)) for o in ordinals[0][mask[0]]]


def chronological_split(g: TemporalGraph, spec: SplitSpec) -> tuple[range, range, range]:
    m = len(g)
    if m == 0:
        raise GraphError("cannot split an empty graph")
    a = int(np.floor(spec.train_fraction * m))
    b = int(np.floor((spec.train_fraction + spec.validation_fraction) * m))
    if a == 0 or b == a or b == m:
        raise GraphError(f"split {spec} of {m} interactions leaves an empty range")
    if g.times[0] == g.times[-1]:
        log.warning("all timestamps equal; split falls back to ordinal order")
    return range(0, a), range(a, b), range(b, m)


# ---------------------------------------------------------------- I/O


def load_interactions(path, format: str = "jodie-csv") -> TemporalGraph:
    """Read a Jodie-layout CSV: ``user_id,item_id,timestamp,state_label,f1..fD``.

    Users and items get disjoint contiguous id ranges (users first, each in
    order of first appearance). Node features are zero vectors of the edge
    feature dimension.
    """
    if format != "jodie-csv":
        raise GraphError(f"unsupported format {format!r}")
    path = Path(path)
    users, items, times, feats = [], [], [], []
    width = None
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise GraphError(f"{path}: empty file")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < 4:
                raise GraphError(f"{path}:{lineno}: expected at least 4 columns")
            f = row[4:]
            if width is None:
                width = len(f)
            elif len(f) != width:
                raise GraphError(f"{path}:{lineno}: ragged feature row ({len(f)} vs {width})")
            users.append(row[0].strip())
            items.append(row[1].strip())
            times.append(float(row[2]))
            feats.append([float(x) for x in f])
    if not users:
        raise GraphError(f"{path}: no interactions")

    user_ids = {u: i for i, u in enumerate(dict.fromkeys(users))}
    item_ids = {v: i for i, v in enumerate(dict.fromkeys(items))}
    n_users = len(user_ids)
    src = np.array([user_ids[u] for u in users], dtype=np.int64)
    dst = np.array([n_users + item_ids[v] for v in items], dtype=np.int64)
    times_arr = np.array(times, dtype=np.float64)
    edge = np.array(feats, dtype=np.float64).reshape(len(users), width)
    if np.any(np.diff(times_arr) < 0):
        log.warning("%s: timestamps not monotone; re-sorting (ties keep file order)", path)
        order = np.argsort(times_arr, kind="stable")
        src, dst, times_arr, edge = src[order], dst[order], times_arr[order], edge[order]
    n = n_users + len(item_ids)
    partition = np.full(n, TARGET, dtype=np.int8)
    partition[:n_users] = SOURCE
    node_features = np.zeros((n, width))
    return TemporalGraph(src, dst, times_arr, edge, node_features, partition)


def save_graph(g: TemporalGraph, path) -> None:
    """Compact re-serialisation (npz with a versioned header) for fast reload."""
    header = json.dumps({"format": GRAPH_FORMAT, "version": GRAPH_VERSION})
    with open(path, "wb") as fh:
        np.savez(
            fh,
            header=np.frombuffer(header.encode(), dtype=np.uint8),
            sources=g.sources.astype("<i8"),
            targets=g.targets.astype("<i8"),
            times=g.times.astype("<f8"),
            edge_features=g.edge_features.astype("<f8"),
            node_features=g.node_features.astype("<f8"),
            partition=g.partition.astype("i1"),
        )


def load_graph(path) -> TemporalGraph:
    with np.load(path) as data:
        header = json.loads(bytes(data["header"]).decode())
        if header.get("format") != GRAPH_FORMAT or header.get("version") != GRAPH_VERSION:
            raise GraphError(f"{path}: unsupported graph file header {header}")
        return TemporalGraph(
            data["sources"], data["targets"], data["times"], data["edge_features"],
            data["node_features"], data["partition"],
        )


def generate_synthetic(
    n_sources: int = 50,
    n_targets: int = 20,
    n_events: int = 5000,
    recurrence_prob: float = 0.9,
    feature_dim: int = 8,
    seed: int = 0,
    feature_noise: float = 0.5,
    n_clusters: int | None = None,
    cluster_spread: float = 0.3,
    time_scale: float = 1.0,
) -> TemporalGraph:
    """Bipartite log with planted recurrence.

    Each event picks a source uniformly; with probability ``recurrence_prob``
    the source repeats its previous target, otherwise the target is uniform.
    Edge features are a seeded Gaussian signature of the target plus Gaussian
    noise of scale ``feature_noise``; node features are zero.

    With ``n_clusters`` set, target ``j`` gets the signature of cluster
    ``j % n_clusters`` plus a private offset of scale ``cluster_spread``, so
    targets in one cluster look alike and are easy to confuse.
    Inter-event gaps are exponential with mean ``time_scale``.
    """
    if min(n_sources, n_targets, n_events, feature_dim) < 1:
        raise GraphError("counts must be >= 1")
    if n_clusters is not None and n_clusters < 1:
        raise GraphError("n_clusters must be >= 1")
    if not time_scale > 0:
        raise GraphError("time_scale must be > 0")
    if not 0 <= recurrence_prob <= 1:
        raise GraphError("recurrence_prob must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    src = rng.integers(0, n_sources, size=n_events)
    repeat = rng.random(n_events) < recurrence_prob
    fresh = rng.integers(0, n_targets, size=n_events)
    last = np.full(n_sources, -1, dtype=np.int64)
    dst = np.empty(n_events, dtype=np.int64)
    for i in range(n_events):
        s = src[i]
        dst[i] = last[s] if repeat[i] and last[s] >= 0 else fresh[i]
        last[s] = dst[i]
    times = np.cumsum(rng.exponential(time_scale, size=n_events))
    # each target has a Gaussian signature that its edges carry, plus noise
    signature = rng.normal(size=(n_targets, feature_dim))
    if n_clusters is not None:
        centers = rng.normal(size=(n_clusters, feature_dim))
        signature = centers[np.arange(n_targets) % n_clusters] + cluster_spread * signature
    edge = signature[dst] + feature_noise * rng.normal(size=(n_events, feature_dim))
    n = n_sources + n_targets
    partition = np.full(n, TARGET, dtype=np.int8)
    partition[:n_sources] = SOURCE
    return TemporalGraph(src, dst + n_sources, times, edge, np.zeros((n, feature_dim)), partition)


def write_jodie_csv(g: TemporalGraph, path) -> None:
    """Inverse of :func:`load_interactions` for bipartite graphs (state label 0)."""
    n_src = int(np.sum(g.partition == SOURCE)) if g.is_bipartite else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["user_id", "item_id", "timestamp", "state_label"] + [f"f{i}" for i in range(g.edge_dim)])
        for i in range(len(g)):
            w.writerow(
                [int(g.sources[i]), int(g.targets[i]) - n_src, repr(float(g.times[i])), 0]
                + [repr(float(x)) for x in g.edge_features[i]]
            )
