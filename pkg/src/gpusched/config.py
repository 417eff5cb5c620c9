"""Run configuration: defaults, an INI-style file, and command-line overrides.

Precedence is flags > file > defaults.  The file uses one section per
component::

    [trace]
    path = traces/philly.csv
    format = philly

    [cluster]
    nodes = 8 x V100:8:64:512

    [ppo]
    pi_lr = 1e-3

A written snapshot (``to_ini``) holds every field, so a command can be
re-run from the snapshot alone.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, fields, replace

from .agent import PpoHyper
from .cluster import ClusterSpec, helios_layout, parse_node_groups
from .trace import GenConfig


class ConfigError(ValueError):
    pass


# section -> field names (each RunConfig field lives in exactly one section)
SECTIONS = {
    "trace": ("trace_path", "trace_format", "train_fraction"),
    "generate": ("job_count", "arrival_rate", "runtime_mean", "runtime_sigma", "gpu_demand_weights",
                 "gpu_type_mix", "vc_mix", "estimate_noise", "users", "max_runtime", "gen_seed"),
    "cluster": ("nodes", "cpu_per_gpu", "mem_per_gpu", "confine_vc"),
    "sim": ("base_policy", "metric", "k", "backfill", "tau"),
    "train": ("epochs", "batches", "batch_size", "naive", "use_allocator", "runtime_source", "seed"),
    "ppo": ("clip", "pi_lr", "vf_lr", "ppo_epochs", "minibatch", "ent_coef", "vf_coef"),
    "eval": ("runs", "eval_batch", "eval_seed", "eval_runtime_source"),
    "output": ("out_dir",),
}

# file keys that differ from field names
ALIASES = {("trace", "path"): "trace_path", ("trace", "format"): "trace_format",
           ("generate", "seed"): "gen_seed", ("ppo", "epochs"): "ppo_epochs",
           ("eval", "batch"): "eval_batch", ("eval", "seed"): "eval_seed",
           ("eval", "runtime_source"): "eval_runtime_source", ("output", "dir"): "out_dir"}


@dataclass
class RunConfig:
    trace_path: str = ""
    trace_format: str = "canonical"
    train_fraction: float = 0.9

    job_count: int = 10_000
    arrival_rate: float = 0.014
    runtime_mean: float = 3600.0
    runtime_sigma: float = 1.2
    gpu_demand_weights: str = "0.5,0.2,0.15,0.1,0.05"
    gpu_type_mix: str = "V100:1"
    vc_mix: str = "default:1"
    estimate_noise: str = "1.0,1.0"
    users: int = 32
    max_runtime: int = 7 * 86400
    gen_seed: int = 0

    nodes: str = "8 x V100:8:64:512"
    cpu_per_gpu: int = 4
    mem_per_gpu: float = 32.0
    confine_vc: bool = True

    base_policy: str = "fifo"
    metric: str = "wait"
    k: int = 16
    backfill: bool = True
    tau: float = 10.0

    epochs: int = 20
    batches: int = 100
    batch_size: int = 256
    naive: bool = False
    use_allocator: str = "auto"  # auto = on unless naive
    runtime_source: str = "actual"
    seed: int = 0

    clip: float = 0.2
    pi_lr: float = 1e-4
    vf_lr: float = 1e-3
    ppo_epochs: int = 4
    minibatch: int = 256
    ent_coef: float = 0.01
    vf_coef: float = 1.0

    runs: int = 10
    eval_batch: int = 1024
    eval_seed: int = 1
    eval_runtime_source: str = "requested"

    out_dir: str = "runs"

    # -- derived component configs ------------------------------------------------
    def gen_config(self) -> GenConfig:
        cfg = GenConfig(
            job_count=self.job_count, arrival_rate=self.arrival_rate,
            runtime_mean=self.runtime_mean, runtime_sigma=self.runtime_sigma,
            gpu_demand_weights=_floats(self.gpu_demand_weights, "gpu_demand_weights"),
            gpu_type_mix=_mix(self.gpu_type_mix, "gpu_type_mix"),
            vc_mix=_mix(self.vc_mix, "vc_mix"),
            estimate_noise=_floats(self.estimate_noise, "estimate_noise"),
            users=self.users, max_runtime=self.max_runtime, seed=self.gen_seed)
        return cfg

    def cluster_spec(self) -> ClusterSpec:
        if self.nodes.strip().lower() == "helios":
            spec = helios_layout()
            return replace(spec, confine_vc=self.confine_vc)
        return parse_node_groups(self.nodes, self.cpu_per_gpu, self.mem_per_gpu, self.confine_vc)

    def hyper(self) -> PpoHyper:
        return PpoHyper(clip=self.clip, pi_lr=self.pi_lr, vf_lr=self.vf_lr, epochs=self.ppo_epochs,
                        minibatch=self.minibatch, ent_coef=self.ent_coef, vf_coef=self.vf_coef)

    def allocator_flag(self):
        if self.use_allocator == "auto":
            return None
        return _bool(self.use_allocator, "use_allocator")

    # -- persistence ----------------------------------------------------------------
    def to_ini(self) -> str:
        reverse = {v: key for (sec, key), v in ALIASES.items()}
        lines = []
        for sec, names in SECTIONS.items():
            lines.append(f"[{sec}]")
            for name in names:
                lines.append(f"{reverse.get(name, name)} = {_fmt(getattr(self, name))}")
            lines.append("")
        return "\n".join(lines)


_TYPES = {f.name: type(f.default) for f in fields(RunConfig)}
_SECTION_OF = {name: sec for sec, names in SECTIONS.items() for name in names}


def _floats(text, name):
    try:
        return tuple(float(x) for x in str(text).split(",") if x.strip())
    except ValueError as exc:
        raise ConfigError(f"{name}: expected comma-separated numbers, got {text!r}") from exc


def _mix(text, name):
    out = {}
    for part in str(text).split(","):
        if not part.strip():
            continue
        label, sep, w = part.partition(":")
        try:
            out[label.strip()] = float(w) if sep else 1.0
        except ValueError as exc:
            raise ConfigError(f"{name}: bad weight in {part!r}") from exc
    total = sum(out.values())
    if not out or total <= 0:
        raise ConfigError(f"{name}: empty mix")
    return {k: v / total for k, v in out.items()}


def _bool(text, name):
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{name}: expected a boolean, got {text!r}")


def _fmt(v):
    return str(v).lower() if isinstance(v, bool) else repr(v) if isinstance(v, float) else str(v)


def coerce(name, value):
    if name not in _TYPES:
        raise ConfigError(f"unknown setting {name!r}")
    kind = _TYPES[name]
    if isinstance(value, kind) and not (kind is int and isinstance(value, bool)):
        return value
    try:
        if kind is bool:
            return _bool(value, name)
        if kind is int:
            return int(str(value).replace("_", ""))
        if kind is float:
            return float(value)
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot read {value!r} as {kind.__name__}") from exc
    return str(value)


def read_file(path) -> dict:
    """Settings from an INI file as ``{field: value}``."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    out = {}
    for sec in parser.sections():
        if sec not in SECTIONS:
            raise ConfigError(f"unknown section [{sec}]")
        for key, value in parser.items(sec):
            name = ALIASES.get((sec, key), key)
            if _SECTION_OF.get(name) != sec:
                raise ConfigError(f"unknown key {key!r} in [{sec}]")
            out[name] = coerce(name, value)
    return out


def load(path=None, overrides=None) -> RunConfig:
    """Defaults, then the file (if any), then non-None ``overrides``."""
    values = read_file(path) if path else {}
    for name, v in (overrides or {}).items():
        if v is not None:
            values[name] = coerce(name, v)
    cfg = RunConfig(**values)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig):
    if not 0 < cfg.train_fraction <= 1:
        raise ConfigError("train_fraction must lie in (0, 1]")
    if cfg.trace_format not in ("canonical", "philly", "helios", "alibaba"):
        raise ConfigError(f"unknown trace format {cfg.trace_format!r}")
    for name in ("runtime_source", "eval_runtime_source"):
        if getattr(cfg, name) not in ("actual", "requested"):
            raise ConfigError(f"{name} must be 'actual' or 'requested'")
    for name in ("epochs", "batches", "batch_size", "runs", "eval_batch", "k"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"{name} must be positive")
    if cfg.use_allocator != "auto":
        _bool(cfg.use_allocator, "use_allocator")
