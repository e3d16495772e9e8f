"""Run configuration: strict INI parsing, defaults and the effective-config echo.

A config has up to six sections::

    [data]      dataset (path or "synthetic"), truncate
    [synthetic] generator arguments, used when dataset = synthetic
    [model]     encoder settings
    [train]     optimisation settings
    [sampler]   negative sampling settings
    [run]       seeds, output_dir, candidate_policy, deterministic

Unknown sections or keys are rejected by name.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field, fields
from pathlib import Path

from .evaluation import POLICIES
from .model import ModelConfig
from .sampling import SamplerConfig
from .training import TrainConfig

SYNTHETIC = "synthetic"
DEFAULT_SEEDS = (0, 1, 2, 3, 4)


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional(parse):
    def inner(text: str):
        return None if text.strip().lower() in ("", "none") else parse(text)

    return inner


def _seeds(text: str) -> tuple[int, ...]:
    return tuple(int(tok) for tok in text.replace(",", " ").split())


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class SyntheticConfig:
    n_sources: int = 50
    n_targets: int = 100
    n_events: int = 20000
    recurrence_prob: float = 0.9
    feature_dim: int = 8
    seed: int = 0
    feature_noise: float = 0.3
    n_clusters: int | None = 10
    cluster_spread: float = 0.3
    time_scale: float = 1.0


@dataclass
class RunSpec:
    dataset: str = SYNTHETIC
    truncate: int | None = None
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    candidate_policy: str = "all-nodes"
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    output_dir: str = "runs"
    deterministic: bool = False

    @property
    def sampler(self) -> SamplerConfig:
        return self.train.sampler


# section -> key -> parser
SCHEMA = {
    "data": {"dataset": str, "truncate": _optional(int)},
    "synthetic": {
        "n_sources": int,
        "n_targets": int,
        "n_events": int,
        "recurrence_prob": float,
        "feature_dim": int,
        "seed": int,
        "feature_noise": float,
        "n_clusters": _optional(int),
        "cluster_spread": float,
        "time_scale": float,
    },
    "model": {
        "variant": str,
        "layers": _optional(int),
        "embed_dim": int,
        "time_dim": int,
        "neighbor_limit": int,
        "use_memory": _optional(_bool),
        "score_mode": str,
    },
    "train": {
        "epochs": int,
        "batch_size": int,
        "learning_rate": float,
        "optimizer": str,
        "stopping": str,
        "patience": int,
        "precision": str,
        "validate": _bool,
    },
    "sampler": {
        "strategy": str,
        "K": int,
        "refresh_period": int,
        "recompute_frequency": int,
        "similarity": str,
        "restrict_to_partition": _bool,
    },
    "run": {"seeds": _seeds, "output_dir": str, "candidate_policy": str, "deterministic": _bool},
}


def _read_sections(text: str, source: str) -> dict[str, dict[str, str]]:
    cp = configparser.ConfigParser(interpolation=None, default_section="\0none")
    cp.optionxform = str  # keep key case (K)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    out = {}
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{sec}]")
        for key in cp[sec]:
            if key not in SCHEMA[sec]:
                raise ConfigError(f"{source}: unknown key {key!r} in [{sec}]")
        out[sec] = dict(cp[sec])
    return out


def _typed(raw: dict[str, dict[str, str]], source: str) -> dict[str, dict]:
    typed = {}
    for sec, items in raw.items():
        typed[sec] = {}
        for key, text in items.items():
            try:
                typed[sec][key] = SCHEMA[sec][key](text)
            except ValueError as exc:
                raise ConfigError(f"{source}: [{sec}] {key} = {text!r}: {exc}") from exc
    return typed


def build_spec(values: dict[str, dict], source: str = "<config>", check_paths: bool = True) -> RunSpec:
    """Assemble a RunSpec from already-typed section values; defaults fill the gaps."""
    try:
        data = values.get("data", {})
        run = values.get("run", {})
        sampler = SamplerConfig(**values.get("sampler", {}))
        train = TrainConfig(sampler=sampler, **values.get("train", {}))
        spec = RunSpec(
            dataset=data.get("dataset", SYNTHETIC),
            truncate=data.get("truncate"),
            synthetic=SyntheticConfig(**values.get("synthetic", {})),
            model=ModelConfig(**values.get("model", {})),
            train=train,
            **run,
        )
    except (TypeError, ValueError, RuntimeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{source}: {exc}") from exc
    if spec.deterministic:
        # float64 end to end, so reruns match bit for bit
        spec.train.precision = "exact"
    validate(spec, check_paths)
    return spec


def validate(spec: RunSpec, check_paths: bool = True) -> None:
    if len(spec.seeds) < 1:
        raise ConfigError("at least one seed is required")
    if len(set(spec.seeds)) != len(spec.seeds):
        raise ConfigError("seeds must be distinct")
    if spec.candidate_policy not in POLICIES:
        raise ConfigError(f"unknown candidate_policy {spec.candidate_policy!r}")
    if spec.truncate is not None and spec.truncate < 1:
        raise ConfigError("truncate must be >= 1")
    if spec.train.precision not in ("fast", "exact"):
        raise ConfigError(f"unknown precision {spec.train.precision!r}")
    if spec.dataset != SYNTHETIC and check_paths and not Path(spec.dataset).is_file():
        raise ConfigError(f"dataset not found: {spec.dataset}")


def parse_config_text(text: str, source: str = "<config>", check_paths: bool = True) -> RunSpec:
    return build_spec(_typed(_read_sections(text, source), source), source, check_paths)


def parse_config(path, check_paths: bool = True) -> RunSpec:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, str(path), check_paths)


def section_values(spec: RunSpec) -> dict[str, dict]:
    sampler = spec.train.sampler
    return {
        "data": {"dataset": spec.dataset, "truncate": spec.truncate},
        "synthetic": {f.name: getattr(spec.synthetic, f.name) for f in fields(SyntheticConfig)},
        "model": {k: getattr(spec.model, k) for k in SCHEMA["model"]},
        "train": {k: getattr(spec.train, k) for k in SCHEMA["train"]},
        "sampler": {k: getattr(sampler, k) for k in SCHEMA["sampler"]},
        "run": {
            "seeds": tuple(spec.seeds),
            "output_dir": spec.output_dir,
            "candidate_policy": spec.candidate_policy,
            "deterministic": spec.deterministic,
        },
    }


def effective_config(spec: RunSpec) -> str:
    """Every key with its resolved value, in a form :func:`parse_config_text` accepts."""
    buf = io.StringIO()
    for sec, items in section_values(spec).items():
        buf.write(f"[{sec}]\n")
        for key, value in items.items():
            buf.write(f"{key} = {_fmt(value)}\n")
        buf.write("\n")
    return buf.getvalue()


def fingerprint(spec: RunSpec) -> str:
    """Hash of the effective config minus the seed list and output location."""
    values = section_values(spec)
    values["run"] = {k: v for k, v in values["run"].items() if k not in ("seeds", "output_dir")}
    text = repr(sorted((s, sorted(d.items())) for s, d in values.items()))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def with_overrides(spec: RunSpec, **over) -> RunSpec:
    """Apply command-line style overrides (None means keep the config value)."""
    sampler_keys = {"strategy": "strategy", "topk": "K", "refresh_period": "refresh_period", "recompute_freq": "recompute_frequency"}
    values = section_values(spec)
    for name, key in sampler_keys.items():
        if over.get(name) is not None:
            values["sampler"][key] = over[name]
    if over.get("seed") is not None:
        values["run"]["seeds"] = (int(over["seed"]),)
    if over.get("truncate") is not None:
        values["data"]["truncate"] = over["truncate"]
    if over.get("output_dir") is not None:
        values["run"]["output_dir"] = str(over["output_dir"])
    if over.get("deterministic"):
        values["run"]["deterministic"] = True
    return build_spec(values, "<overrides>", check_paths=False)
