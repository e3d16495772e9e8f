"""Chronological ranking evaluation (MRR, Recall@k) and embedding export."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .graph import NONE, PARTITION_NAMES, TemporalGraph
from .model import ModelState, embed_nodes, memory_update, score_expr

RECALL_KS = (1, 5, 10)
POLICIES = ("all-nodes", "opposite-partition")
TABLE_COLUMNS = ("Method", "MRR", "Recall@1", "Recall@5", "Recall@10")


class EvaluationError(ValueError):
    pass


@dataclass
class RankResult:
    key: tuple
    rank: int
    candidate_count: int


@dataclass
class RankingMetrics:
    mrr: float
    recall_at: dict[int, float]
    n_evaluated: int
    ranks: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64), repr=False)

    def as_dict(self) -> dict[str, float]:
        out = {"MRR": self.mrr}
        out.update({f"Recall@{k}": v for k, v in self.recall_at.items()})
        return out


def rank_of(scores, candidate_ids, target: int) -> int:
    """1 + #higher scores + #equal scores held by a smaller node id."""
    scores = np.asarray(scores)
    ids = np.asarray(candidate_ids)
    pos = np.flatnonzero(ids == target)
    if len(pos) != 1:
        raise EvaluationError("target must appear exactly once among the candidates")
    s = scores[pos[0]]
    return int(1 + np.sum(scores > s) + np.sum((scores == s) & (ids < target)))


def metrics_from_ranks(ranks, ks=RECALL_KS) -> RankingMetrics:
    ranks = np.asarray(ranks, dtype=np.int64)
    if len(ranks) == 0:
        return RankingMetrics(0.0, {k: 0.0 for k in ks}, 0, ranks)
    # fsum is correctly rounded, so the value does not depend on summation order
    return RankingMetrics(
        math.fsum(1.0 / ranks) / len(ranks),
        {k: float(np.mean(ranks <= k)) for k in ks},
        len(ranks),
        ranks,
    )


def candidate_set(graph: TemporalGraph, u: int, policy: str = "all-nodes") -> np.ndarray:
    if policy not in POLICIES:
        raise EvaluationError(f"unknown candidate policy {policy!r}")
    ids = np.arange(graph.num_nodes)
    if policy == "opposite-partition" and graph.partition[u] != NONE:
        keep = (graph.partition != graph.partition[u]) & (graph.partition != NONE)
    else:
        keep = ids != u
    return ids[keep]


def _score_rows(state: ModelState, cand: np.ndarray, src: np.ndarray) -> np.ndarray:
    mode = state.config.score_mode
    if mode == "dot":
        return np.einsum("nd,nd->n", cand, src)
    expr = score_expr(ad.const(cand), ad.const(src), mode, len(cand))
    return ad.evaluate(expr, state.params, "fast").astype(np.float64)


def rank_target(state: ModelState, graph: TemporalGraph, u: int, v: int, t: float, candidates, cutoff=None, ordinal=-1) -> RankResult:
    candidates = np.asarray(candidates, dtype=np.int64)
    if len(candidates) == 0:
        raise EvaluationError("empty candidate set")
    if u in candidates:
        raise EvaluationError("source must not be a candidate")
    nodes = np.concatenate([[u], candidates])
    h = embed_nodes(state, graph, nodes, np.full(len(nodes), t), cutoff)
    scores = _score_rows(state, h[1:], np.broadcast_to(h[0], h[1:].shape))
    return RankResult((int(u), int(v), float(t), int(ordinal)), rank_of(scores, candidates, v), len(candidates))


def evaluate(
    state: ModelState,
    graph: TemporalGraph,
    interactions: range,
    candidate_policy: str = "all-nodes",
    batch_size: int = 200,
    warmup: range | None = None,
    return_state: bool = False,
    max_rows: int = 20000,
):
    """Rank the true target of every interaction, batch by batch.

    Within a batch all predictions use memory and neighborhoods as of the
    batch start; the batch is then revealed to memory. Works on a copy, so
    the caller's state (parameters and memory) is left untouched.
    """
    if len(interactions) == 0:
        raise EvaluationError("empty evaluation range")
    st = state.copy()
    if warmup is not None:
        for s in range(warmup.start, warmup.stop, batch_size):
            memory_update(st, graph, np.arange(s, min(s + batch_size, warmup.stop)))
    ranks = []
    cand_cache: dict[int, np.ndarray] = {}
    for s in range(interactions.start, interactions.stop, batch_size):
        ords = np.arange(s, min(s + batch_size, interactions.stop))
        us, vs, ts = graph.sources[ords], graph.targets[ords], graph.times[ords]
        cands = []
        for u in us:
            key = int(u) if candidate_policy == "all-nodes" else int(graph.partition[u]) * graph.num_nodes + int(u)
            if key not in cand_cache:
                cand_cache[key] = candidate_set(graph, int(u), candidate_policy)
            cands.append(cand_cache[key])
        i = 0
        while i < len(ords):
            # chunk events so the per-event candidate embeddings stay bounded
            j, rows = i, 0
            while j < len(ords) and (j == i or rows + len(cands[j]) + 1 <= max_rows):
                rows += len(cands[j]) + 1
                j += 1
            nodes = np.concatenate([np.concatenate([[us[k]], cands[k]]) for k in range(i, j)])
            times = np.concatenate([np.full(len(cands[k]) + 1, ts[k]) for k in range(i, j)])
            h = embed_nodes(st, graph, nodes, times, cutoff=s)
            off = 0
            for k in range(i, j):
                m = len(cands[k])
                hu = h[off]
                hc = h[off + 1 : off + 1 + m]
                scores = _score_rows(st, hc, np.broadcast_to(hu, hc.shape))
                ranks.append(rank_of(scores, cands[k], vs[k]))
                off += m + 1
            i = j
        memory_update(st, graph, ords)
    metrics = metrics_from_ranks(ranks)
    return (metrics, st) if return_state else metrics


# ---------------------------------------------------------------- reports and export


def write_metrics_report(metrics: RankingMetrics, kv_path, csv_path=None, method: str = "model") -> None:
    lines = [f"method={method}", f"n_evaluated={metrics.n_evaluated}", f"mrr={metrics.mrr!r}"]
    lines += [f"recall@{k}={v!r}" for k, v in metrics.recall_at.items()]
    Path(kv_path).write_text("\n".join(lines) + "\n")
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TABLE_COLUMNS)
            w.writerow([method, metrics.mrr] + [metrics.recall_at[k] for k in RECALL_KS])


def export_snapshot(state: ModelState, graph: TemporalGraph, t: float, path, cutoff=None) -> Path:
    """Write all-node embeddings at time ``t``: a ``# t=.. d=..`` header, then
    one ``node_id,partition,e0..e{d-1}`` row per node."""
    nodes = np.arange(graph.num_nodes)
    h = embed_nodes(state, graph, nodes, np.full(len(nodes), t), cutoff, precision="exact")
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            fh.write(f"# t={float(t)!r} d={h.shape[1]}\n")
            w = csv.writer(fh)
            for i in nodes:
                w.writerow([int(i), PARTITION_NAMES[int(graph.partition[i])]] + [repr(float(x)) for x in h[i]])
    except OSError as exc:
        raise EvaluationError(f"cannot write snapshot to {path}: {exc}") from exc
    return path


def read_snapshot(path):
    """Parse an exported snapshot into ``(t, node_ids, partitions, matrix)``."""
    with open(path, newline="") as fh:
        header = fh.readline().strip()
        fields = dict(tok.split("=", 1) for tok in header.lstrip("#").split())
        rows = list(csv.reader(fh))
    ids = np.array([int(r[0]) for r in rows], dtype=np.int64)
    parts = [r[1] for r in rows]
    d = int(fields["d"])
    mat = np.array([[float(x) for x in r[2:]] for r in rows]).reshape(len(rows), d)
    return float(fields["t"]), ids, parts, mat
