"""Command line entry point: train-eval, probe, export and synth.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
import traceback
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import SYNTHETIC, ConfigError, RunSpec, effective_config, fingerprint, parse_config, with_overrides
from .evaluation import RECALL_KS, RankingMetrics, evaluate, export_snapshot, write_metrics_report
from .graph import SplitSpec, TemporalGraph, chronological_split, generate_synthetic, load_graph, load_interactions, save_graph, write_jodie_csv
from .model import load_checkpoint, save_checkpoint
from .training import gradient_variance_probe, train

log = logging.getLogger("hardneg_tgnn")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
METRIC_NAMES = ("MRR",) + tuple(f"Recall@{k}" for k in RECALL_KS)


@dataclass
class SeedResult:
    seed: int
    metrics: RankingMetrics | None
    train_time_s: float = 0.0
    best_epoch: int | None = None
    error: str | None = None


@dataclass
class StudyReport:
    results: list[SeedResult]
    fingerprint: str
    wall_time_s: float
    mean: dict[str, float] = field(default_factory=dict)
    std: dict[str, float | None] = field(default_factory=dict)

    def __post_init__(self):
        ok = [r.metrics.as_dict() for r in self.results if r.metrics is not None]
        for name in METRIC_NAMES:
            vals = [m[name] for m in ok]
            self.mean[name] = float(np.mean(vals)) if vals else float("nan")
            # sample standard deviation needs two runs
            self.std[name] = float(np.std(vals, ddof=1)) if len(vals) >= 2 else None

    @property
    def failed(self) -> list[int]:
        return [r.seed for r in self.results if r.error is not None]

    def write(self, out_dir: Path) -> None:
        with open(out_dir / "report.tsv", "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t")
            w.writerow(("seed",) + METRIC_NAMES + ("train_time_s", "best_epoch", "status"))
            for r in self.results:
                vals = [r.metrics.as_dict()[n] for n in METRIC_NAMES] if r.metrics else [""] * len(METRIC_NAMES)
                w.writerow([r.seed, *vals, r.train_time_s, "" if r.best_epoch is None else r.best_epoch, r.error or "ok"])
            w.writerow(["mean", *[self.mean[n] for n in METRIC_NAMES], "", "", ""])
            w.writerow(["std", *["" if self.std[n] is None else self.std[n] for n in METRIC_NAMES], "", "", ""])
        summary = {
            "fingerprint": self.fingerprint,
            "wall_time_s": self.wall_time_s,
            "mean": self.mean,
            "std": self.std,
            "seeds": [r.seed for r in self.results],
            "failed": self.failed,
        }
        (out_dir / "report.json").write_text(json.dumps(summary, indent=2) + "\n")


# ---------------------------------------------------------------- data


def load_dataset(spec: RunSpec) -> TemporalGraph:
    if spec.dataset == SYNTHETIC:
        s = spec.synthetic
        g = generate_synthetic(
            s.n_sources, s.n_targets, s.n_events, s.recurrence_prob, s.feature_dim, s.seed,
            feature_noise=s.feature_noise, n_clusters=s.n_clusters, cluster_spread=s.cluster_spread, time_scale=s.time_scale,
        )
    elif spec.dataset.endswith(".npz"):
        g = load_graph(spec.dataset)
    else:
        g = load_interactions(spec.dataset, "jodie-csv")
    if spec.truncate is not None and spec.truncate < len(g):
        g = g.truncated(spec.truncate)
    return g


def seed_dir(spec: RunSpec, seed: int) -> Path:
    return Path(spec.output_dir) / f"seed_{seed}"


def _write_epoch_table(path: Path, result) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow(["epoch", "train_loss", "val_mrr"] + [f"val_recall@{k}" for k in RECALL_KS] + ["wall_time_s", "train_time_s"])
        for m in result.metrics:
            w.writerow(
                [m.epoch, m.train_loss, "" if m.val_mrr is None else m.val_mrr]
                + [m.val_recall.get(k, "") for k in RECALL_KS]
                + [m.wall_time_s, m.train_time_s]
            )


def run_seed(spec: RunSpec, graph: TemporalGraph, seed: int) -> SeedResult:
    out = seed_dir(spec, seed)
    out.mkdir(parents=True, exist_ok=True)
    split = chronological_split(graph, SplitSpec())
    tcfg = replace(spec.train, seed=seed)
    res = train(graph, split, spec.model, tcfg, spec.candidate_policy)
    metrics = evaluate(res.state, graph, split[2], spec.candidate_policy)
    save_checkpoint(res.state, out / "checkpoint.npz")
    _write_epoch_table(out / "metrics.tsv", res)
    write_metrics_report(metrics, out / "test_metrics.txt", out / "test_metrics.csv", method=spec.train.sampler.strategy)
    return SeedResult(seed, metrics, res.train_time_s, res.best_epoch)


def cmd_train_eval(spec: RunSpec) -> StudyReport:
    """Train and test once per seed; a failing seed is recorded and the rest still run."""
    t0 = time.perf_counter()
    out = Path(spec.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(effective_config(spec))
    log.info("effective config:\n%s", effective_config(spec))
    graph = load_dataset(spec)
    results = []
    for seed in spec.seeds:
        try:
            r = run_seed(spec, graph, seed)
            log.info("seed %d test MRR %.4f", seed, r.metrics.mrr)
        except Exception as exc:  # keep the other seeds going
            seed_dir(spec, seed).mkdir(parents=True, exist_ok=True)
            (seed_dir(spec, seed) / "error.txt").write_text(traceback.format_exc())
            log.error("seed %d failed: %s", seed, exc)
            r = SeedResult(seed, None, error=f"{type(exc).__name__}: {exc}")
        results.append(r)
    report = StudyReport(results, fingerprint(spec), time.perf_counter() - t0)
    report.write(out)
    return report


def _checkpoint_path(spec: RunSpec, seed: int, explicit) -> Path:
    path = Path(explicit) if explicit else seed_dir(spec, seed) / "checkpoint.npz"
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return path


def cmd_probe(spec: RunSpec, n_interactions: int, n_candidates: int, checkpoint=None, out_path=None) -> Path:
    """Per-interaction loss/gradient-norm rank correlation over random candidates."""
    seed = spec.seeds[0]
    out_path = Path(out_path) if out_path else seed_dir(spec, seed) / "probe.tsv"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    state = load_checkpoint(_checkpoint_path(spec, seed, checkpoint))
    graph = load_dataset(spec)
    rng = np.random.default_rng(seed)
    train_range = chronological_split(graph, SplitSpec())[0]
    n_interactions = min(n_interactions, len(train_range))
    ordinals = np.sort(rng.choice(np.asarray(train_range), size=n_interactions, replace=False))
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow(["ordinal", "source", "target", "time", "candidates", "spearman", "min_loss", "max_loss", "min_grad_norm", "max_grad_norm"])
        for o in ordinals:
            e = graph.interaction(int(o))
            pool = np.setdiff1d(np.arange(graph.num_nodes), [e.source, e.target])
            cands = rng.choice(pool, size=min(n_candidates, len(pool)), replace=False)
            rep = gradient_variance_probe(state, graph, int(o), cands)
            w.writerow([
                int(o), e.source, e.target, repr(e.time), rep.candidate_count,
                "" if rep.spearman is None else rep.spearman,
                rep.losses.min(), rep.losses.max(), rep.grad_norms.min(), rep.grad_norms.max(),
            ])
    return out_path


def cmd_export(spec: RunSpec, timestamps, checkpoint=None, out_dir=None) -> list[Path]:
    seed = spec.seeds[0]
    state = load_checkpoint(_checkpoint_path(spec, seed, checkpoint))
    graph = load_dataset(spec)
    out_dir = Path(out_dir) if out_dir else seed_dir(spec, seed) / "snapshots"
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, t in enumerate(timestamps):
        # memory in the checkpoint is left as is; only neighborhoods depend on t
        paths.append(export_snapshot(state, graph, float(t), out_dir / f"snapshot_{i:03d}.csv"))
    return paths


def cmd_synth(spec: RunSpec, out_path) -> Path:
    g = load_dataset(replace(spec, dataset=SYNTHETIC))
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    if out_path.suffix == ".npz":
        save_graph(g, out_path)
    else:
        write_jodie_csv(g, out_path)
    return out_path


# ---------------------------------------------------------------- argument handling


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hardneg-tgnn", description="Temporal link prediction with hard negative sampling")
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run config; defaults apply when omitted")
    common.add_argument("--seed", type=int, help="run this single seed instead of the configured list")
    common.add_argument("--strategy")
    common.add_argument("--topk", type=int)
    common.add_argument("--refresh-period", type=int)
    common.add_argument("--recompute-freq", type=int)
    common.add_argument("--truncate", type=int, help="keep only the first N interactions")
    common.add_argument("--deterministic", action="store_true", help="float64 throughout for bit-identical reruns")
    common.add_argument("--output-dir")
    common.add_argument("-v", "--verbose", action="store_true")

    sub.add_parser("train-eval", parents=[common], help="train and test every seed, then aggregate")
    pr = sub.add_parser("probe", parents=[common], help="loss vs gradient-norm probe on a checkpoint")
    pr.add_argument("--checkpoint")
    pr.add_argument("--n-interactions", type=int, default=50)
    pr.add_argument("--n-candidates", type=int, default=64)
    pr.add_argument("--out")
    ex = sub.add_parser("export", parents=[common], help="write all-node embedding snapshots")
    ex.add_argument("--checkpoint")
    ex.add_argument("--timestamps", type=float, nargs="+", required=True)
    ex.add_argument("--out")
    sy = sub.add_parser("synth", parents=[common], help="write the planted synthetic log")
    sy.add_argument("--out", required=True, help=".csv (Jodie layout) or .npz")
    return p


def resolve_spec(args) -> RunSpec:
    spec = parse_config(args.config) if args.config else RunSpec()
    return with_overrides(
        spec,
        strategy=args.strategy,
        topk=args.topk,
        refresh_period=args.refresh_period,
        recompute_freq=args.recompute_freq,
        seed=args.seed,
        truncate=args.truncate,
        output_dir=args.output_dir,
        deterministic=args.deterministic,
    )


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        spec = resolve_spec(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "train-eval":
            report = cmd_train_eval(spec)
            for r in report.results:
                print(f"seed {r.seed}: " + (f"MRR {r.metrics.mrr:.4f}" if r.metrics else f"FAILED {r.error}"))
            std = report.std["MRR"]
            print(f"mean MRR {report.mean['MRR']:.4f}" + ("" if std is None else f" +- {std:.4f}"))
            return EXIT_RUNTIME if report.failed else EXIT_OK
        if args.command == "probe":
            print(cmd_probe(spec, args.n_interactions, args.n_candidates, args.checkpoint, args.out))
        elif args.command == "export":
            for path in cmd_export(spec, args.timestamps, args.checkpoint, args.out):
                print(path)
        elif args.command == "synth":
            print(cmd_synth(spec, args.out))
    except Exception as exc:
        if args.verbose:
            traceback.print_exc()
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
