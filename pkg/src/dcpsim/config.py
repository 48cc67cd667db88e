"""Experiment configuration: a YAML file with nested sections.

Every section is optional and falls back to the library defaults, so a
config only has to spell out what differs. ``dump_config`` writes the fully
expanded form, and loading that output reproduces the same object.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from .scheduler import DEFAULT_BUCKET, BucketFn, DualBalancedDCP, LeastBatch, LeastCache, Policy, UniformCP
from .simengine import ClusterConfig, LatencyModel
from .workload import ConstantRate, Poisson, TraceConfig

MODES = ("simulate", "sweep", "calibrate-bucket", "validate-merge")
POLICY_KINDS = ("dcp", "least_batch", "least_cache", "uniform_cp")


class ConfigError(ValueError):
    """Raised for malformed or inconsistent configuration files."""


@dataclass(frozen=True)
class PolicySpec:
    kind: str = "dcp"
    degree: int = 2  # uniform_cp only
    hol_strict: bool = True
    bucket: tuple | None = None  # dcp only; None means the shipped table

    def build(self) -> Policy:
        try:
            if self.kind == "dcp":
                b = DEFAULT_BUCKET if self.bucket is None else BucketFn.from_list(self.bucket)
                return DualBalancedDCP(b, hol_strict=self.hol_strict)
            if self.kind == "least_batch":
                return LeastBatch(hol_strict=self.hol_strict)
            if self.kind == "least_cache":
                return LeastCache(hol_strict=self.hol_strict)
            if self.kind == "uniform_cp":
                return UniformCP(self.degree, hol_strict=self.hol_strict)
        except (TypeError, ValueError, IndexError) as e:
            raise ConfigError(f"invalid {self.kind} policy: {e}") from e
        raise ConfigError(f"unknown policy kind {self.kind!r}; expected one of {POLICY_KINDS}")

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"kind": self.kind, "hol_strict": self.hol_strict}
        if self.kind == "uniform_cp":
            d["degree"] = self.degree
        if self.kind == "dcp" and self.bucket is not None:
            d["bucket"] = [list(r) for r in self.bucket]
        return d


@dataclass(frozen=True)
class TraceSpec:
    long_ratio: float = 0.01
    arrival: str = "poisson"  # or "constant"
    rate: float = 10.0  # req/s
    duration_s: float = 60.0
    output_len: tuple[int, int] = (64, 512)
    log_uniform: bool = False
    replay: str | None = None  # CSV trace path; overrides generation

    def build(self, seed: int) -> TraceConfig:
        from .workload import GITHUB_ISSUE, SHAREGPT_4O

        if self.arrival not in ("poisson", "constant"):
            raise ConfigError(f"trace.arrival must be 'poisson' or 'constant', got {self.arrival!r}")
        arr = Poisson(self.rate) if self.arrival == "poisson" else ConstantRate(self.rate)
        short, long_ = SHAREGPT_4O, GITHUB_ISSUE
        if self.log_uniform:
            short, long_ = replace(short, log_uniform=True), replace(long_, log_uniform=True)
        return TraceConfig(short, long_, self.long_ratio, arr, self.duration_s, tuple(self.output_len), seed)


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "simulate"
    seed: int = 0
    slo_ms: float = 50.0
    out: str = "out"
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    trace: TraceSpec = field(default_factory=TraceSpec)
    policies: tuple[PolicySpec, ...] = (PolicySpec(),)
    model: LatencyModel = field(default_factory=LatencyModel)
    rate_grid: tuple[float, ...] = ()
    target: float = 0.99

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.slo_ms <= 0:
            raise ConfigError("slo_ms must be positive")
        if not self.policies:
            raise ConfigError("at least one policy is required")
        if not 0 < self.target <= 1:
            raise ConfigError("target must lie in (0, 1]")
        g = list(self.rate_grid)
        if any(b <= a for a, b in zip(g, g[1:])) or any(r <= 0 for r in g):
            raise ConfigError("rate_grid must be positive and strictly ascending")
        if self.mode == "sweep" and not g:
            raise ConfigError("sweep mode needs a non-empty rate_grid")
        for p in self.policies:
            p.build()
            if p.kind == "uniform_cp" and self.cluster.instances_per_node % p.degree:
                raise ConfigError(
                    f"uniform_cp degree {p.degree} does not divide instances_per_node "
                    f"{self.cluster.instances_per_node}")

    def to_dict(self) -> dict:
        t = asdict(self.trace)
        t["output_len"] = list(self.trace.output_len)
        return {
            "mode": self.mode,
            "seed": self.seed,
            "slo_ms": self.slo_ms,
            "out": self.out,
            "cluster": asdict(self.cluster),
            "trace": t,
            "policies": [p.to_dict() for p in self.policies],
            "model": self.model.to_dict(),
            "rate_grid": list(self.rate_grid),
            "target": self.target,
        }


def _section(cls, raw: Any, name: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    kw = dict(raw)
    if cls is TraceSpec and "output_len" in kw:
        kw["output_len"] = tuple(kw["output_len"])
    if cls is PolicySpec and kw.get("bucket") is not None:
        kw["bucket"] = tuple(tuple(r) for r in kw["bucket"])
    try:
        return cls(**kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {name!r} section: {e}") from e


_TOP_KEYS = {"mode", "seed", "slo_ms", "out", "cluster", "trace", "policy", "policies", "model", "rate_grid", "target"}


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    if "policy" in raw and "policies" in raw:
        raise ConfigError("give either 'policy' or 'policies', not both")
    pol_raw = raw.get("policies", [raw["policy"]] if "policy" in raw else None)
    if pol_raw is not None and not isinstance(pol_raw, list):
        raise ConfigError("'policies' must be a list")
    policies = (PolicySpec(),) if pol_raw is None else tuple(
        _section(PolicySpec, p, f"policies[{i}]") for i, p in enumerate(pol_raw))
    kw: dict[str, Any] = {k: raw[k] for k in ("mode", "seed", "slo_ms", "out", "target") if k in raw}
    if "rate_grid" in raw:
        kw["rate_grid"] = tuple(float(r) for r in raw["rate_grid"])
    try:
        return ExperimentConfig(
            cluster=_section(ClusterConfig, raw.get("cluster"), "cluster"),
            trace=_section(TraceSpec, raw.get("trace"), "trace"),
            model=_section(LatencyModel, raw.get("model"), "model"),
            policies=policies,
            **kw,
        )
    except TypeError as e:
        raise ConfigError(str(e)) from e


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e
    cfg = config_from_dict(raw or {})
    # relative replay paths resolve against the config file
    if cfg.trace.replay and not Path(cfg.trace.replay).is_absolute():
        cfg = replace(cfg, trace=replace(cfg.trace, replay=str(Path(path).parent / cfg.trace.replay)))
    return cfg


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
