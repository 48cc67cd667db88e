"""Synthetic decode traces mixing short- and long-context requests."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import TextIO, Union

import numpy as np

from .core import Request


@dataclass(frozen=True)
class LengthDistribution:
    """Interval-mass length distribution: (lower, upper, probability) buckets.

    Lengths are drawn in [lower, upper). ``log_uniform`` switches the
    intra-bucket draw from uniform to log-uniform.
    """

    buckets: tuple[tuple[int, int, float], ...]
    name: str = ""
    log_uniform: bool = False

    def __post_init__(self):
        object.__setattr__(self, "buckets", tuple(tuple(b) for b in self.buckets))
        if not self.buckets:
            raise ValueError("distribution needs at least one bucket")
        total = sum(p for _, _, p in self.buckets)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"bucket probabilities sum to {total}, not 1")
        for lo, hi, p in self.buckets:
            if not lo < hi:
                raise ValueError(f"bucket [{lo}, {hi}) is empty")
            if p < 0:
                raise ValueError("negative bucket probability")
        spans = sorted((lo, hi) for lo, hi, _ in self.buckets)
        for (_, hi), (lo2, _) in zip(spans, spans[1:]):
            if lo2 < hi:
                raise ValueError("buckets overlap")

    @property
    def probabilities(self) -> np.ndarray:
        return np.array([p for _, _, p in self.buckets])

    def bucket_index(self, lengths) -> np.ndarray:
        lengths = np.asarray(lengths)
        out = np.full(lengths.shape, -1)
        for i, (lo, hi, _) in enumerate(self.buckets):
            out[(lengths >= lo) & (lengths < hi)] = i
        return out


# Interval masses of the two source datasets. The short-context masses
# (85.7 / 10.7 / 3.5 percent) total 99.9 and are renormalized.
_SHORT_MASS = (85.7, 10.7, 3.5)
SHAREGPT_4O = LengthDistribution(
    tuple(
        (lo, hi, m / sum(_SHORT_MASS))
        for (lo, hi), m in zip(((1, 1_000), (1_000, 10_000), (10_000, 100_000)), _SHORT_MASS)
    ),
    name="sharegpt-4o",
)
GITHUB_ISSUE = LengthDistribution(
    ((100_000, 500_000, 0.6506), (500_000, 1_000_000, 0.3494)),
    name="github-issue",
)


def sample_lengths(dist: LengthDistribution, rng: np.random.Generator, n: int) -> np.ndarray:
    idx = rng.choice(len(dist.buckets), size=n, p=dist.probabilities)
    lo = np.array([b[0] for b in dist.buckets], dtype=float)[idx]
    hi = np.array([b[1] for b in dist.buckets], dtype=float)[idx]
    u = rng.random(n)
    if dist.log_uniform:
        vals = np.exp(np.log(lo) + u * (np.log(hi) - np.log(lo)))
    else:
        vals = lo + u * (hi - lo)
    return np.clip(np.floor(vals), lo, hi - 1).astype(np.int64)


def sample_length(dist: LengthDistribution, rng: np.random.Generator) -> int:
    return int(sample_lengths(dist, rng, 1)[0])


@dataclass(frozen=True)
class ConstantRate:
    rate: float  # req/s

    def __post_init__(self):
        if self.rate <= 0:
            raise ValueError("rate must be positive")


@dataclass(frozen=True)
class Poisson:
    rate: float  # req/s

    def __post_init__(self):
        if self.rate <= 0:
            raise ValueError("rate must be positive")


Arrival = Union[ConstantRate, Poisson]


@dataclass(frozen=True)
class TraceConfig:
    short_dist: LengthDistribution = SHAREGPT_4O
    long_dist: LengthDistribution = GITHUB_ISSUE
    long_ratio: float = 0.01
    arrival: Arrival = field(default_factory=lambda: Poisson(10.0))
    duration: float = 60.0  # s
    output_len_dist: tuple[int, int] = (64, 512)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.long_ratio <= 1.0:
            raise ValueError("long_ratio must lie in [0, 1]")
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        lo, hi = self.output_len_dist
        if not 1 <= lo <= hi:
            raise ValueError("output_len_dist must satisfy 1 <= min <= max")

    def with_rate(self, rate: float) -> TraceConfig:
        return replace(self, arrival=type(self.arrival)(rate))


def arrival_times_ms(arrival: Arrival, duration_s: float, rng: np.random.Generator) -> np.ndarray:
    if isinstance(arrival, ConstantRate):
        n = int(np.floor(arrival.rate * duration_s + 1e-9))
        return np.arange(n) * (1000.0 / arrival.rate)
    # Poisson: draw inter-arrival gaps in chunks until past the horizon
    horizon = duration_s * 1000.0
    mean_gap = 1000.0 / arrival.rate
    chunks, t = [], 0.0
    while t < horizon:
        gaps = rng.exponential(mean_gap, size=max(16, int(arrival.rate * duration_s * 0.25) + 16))
        times = t + np.cumsum(gaps)
        chunks.append(times)
        t = times[-1]
    times = np.concatenate(chunks)
    return times[times < horizon]


def gen_trace(config: TraceConfig) -> list[Request]:
    rng = np.random.default_rng(config.seed)
    times = arrival_times_ms(config.arrival, config.duration, rng)
    n = len(times)
    is_long = rng.random(n) < config.long_ratio
    short = sample_lengths(config.short_dist, rng, n)
    long_ = sample_lengths(config.long_dist, rng, n)
    lengths = np.where(is_long, long_, short)
    lo, hi = config.output_len_dist
    outs = rng.integers(lo, hi + 1, size=n)
    return [
        Request(i, int(lengths[i]), float(times[i]), int(outs[i]))
        for i in range(n)
    ]


TRACE_COLUMNS = ("id", "arrival_ms", "seq_len", "output_len")


def write_trace_csv(requests: list[Request], fh: TextIO) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for r in requests:
        w.writerow([r.id, repr(float(r.arrival_time)), r.seq_len, r.output_len])


def read_trace_csv(fh: TextIO) -> list[Request]:
    rows = csv.DictReader(fh)
    reqs = [
        Request(int(row["id"]), int(row["seq_len"]), float(row["arrival_ms"]), int(row["output_len"]))
        for row in rows
    ]
    reqs.sort(key=lambda r: (r.arrival_time, r.id))
    return reqs
