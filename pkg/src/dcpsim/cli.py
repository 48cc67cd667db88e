"""Command-line experiment driver.

    dcpsim --config configs/straggler_2x4.yaml --mode simulate --out runs/a

Outputs go to ``--out`` (or the config's ``out``). Tables carry no run
metadata; the only wall-clock timestamp is the first line of summary.txt.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import os
import sys
from dataclasses import replace
from pathlib import Path

import yaml

from .config import MODES, ConfigError, ExperimentConfig, dump_config, load_config
from .scheduler import policy_label
from .simengine import RunMetrics, calibrate_bucket, fmt6, run_simulation, slo_sweep, write_requests_csv, write_summary
from .workload import gen_trace, read_trace_csv

MERGE_TOL = 1e-5


def _threads() -> int:
    raw = os.environ.get("DCPSIM_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"DCPSIM_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def _header(mode: str) -> str:
    stamp = _dt.datetime.now(_dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
    return f"# dcpsim {mode} {stamp}\n"


def _trace(cfg: ExperimentConfig):
    if cfg.trace.replay:
        try:
            with open(cfg.trace.replay, newline="") as fh:
                return read_trace_csv(fh)
        except (OSError, KeyError, ValueError) as e:
            raise ConfigError(f"cannot read replay trace {cfg.trace.replay}: {e}") from e
    return gen_trace(cfg.trace.build(cfg.seed))


def run_simulate(cfg: ExperimentConfig, out: Path) -> list[RunMetrics]:
    trace = _trace(cfg)
    runs = [run_simulation(trace, p.build(), cfg.cluster, cfg.model, cfg.slo_ms) for p in cfg.policies]
    with open(out / "requests.csv", "w", newline="") as fh:
        if len(runs) == 1:
            write_requests_csv(runs[0], fh)
        else:
            _write_multi_requests(runs, fh)
    with open(out / "summary.txt", "w") as fh:
        fh.write(_header("simulate"))
        for m in runs:
            write_summary(m, fh)
            fh.write("\n")
    return runs


def _write_multi_requests(runs: list[RunMetrics], fh, rate=None) -> None:
    w = csv.writer(fh, lineterminator="\n")
    cols = ["policy"] + (["rate"] if rate is not None else []) + ["id", "arrival", "admit", "finish", "tpot_ms", "cp_degree"]
    w.writerow(cols)
    for i, m in enumerate(runs):
        lead = [m.policy] + ([fmt6(float(rate[i]))] if rate is not None else [])
        for r in m.requests:
            w.writerow(lead + [r.id, fmt6(r.arrival_ms), fmt6(r.admit_ms), fmt6(r.finish_ms), fmt6(r.tpot_ms), r.cp_degree])


def run_sweep(cfg: ExperimentConfig, out: Path) -> dict[str, float | None]:
    if cfg.trace.replay:
        raise ConfigError("sweep mode generates traces per rate; trace.replay is not supported")
    tc = cfg.trace.build(cfg.seed)
    workers = _threads()
    best: dict[str, float | None] = {}
    rows, keep, keep_rate = [], [], []
    for p in cfg.policies:
        pol = p.build()
        res = slo_sweep(tc, pol, cfg.cluster, cfg.model, cfg.slo_ms, cfg.rate_grid, cfg.target, workers=workers)
        label = policy_label(pol)
        best[label] = res.max_rate
        for rate, m in zip(res.rates, res.metrics):
            rows.append([label, fmt6(float(rate)), fmt6(m.slo_attainment), fmt6(m.p99_tpot_ms), fmt6(m.mean_tpot_ms),
                         m.n_requests, m.n_finished, m.hol_events])
        if res.max_rate is not None:
            i = res.rates.index(res.max_rate)
            keep.append(res.metrics[i])
            keep_rate.append(res.max_rate)
    with open(out / "rates.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["policy", "rate", "attainment", "p99_tpot_ms", "mean_tpot_ms", "n_requests", "n_finished", "hol_events"])
        w.writerows(rows)
    # per-request rows of each policy's highest sustainable run
    with open(out / "requests.csv", "w", newline="") as fh:
        _write_multi_requests(keep, fh, keep_rate)
    with open(out / "summary.txt", "w") as fh:
        fh.write(_header("sweep"))
        fh.write(f"slo_ms: {fmt6(cfg.slo_ms)}\ntarget: {fmt6(cfg.target)}\n")
        for label, r in best.items():
            fh.write(f"max_rate[{label}]: {'none sustainable' if r is None else fmt6(float(r))}\n")
    return best


def run_calibrate(cfg: ExperimentConfig, out: Path):
    b = calibrate_bucket(cfg.model)
    text = yaml.safe_dump({"bucket": b.to_list()}, sort_keys=False)
    (out / "bucket.yaml").write_text(text)
    with open(out / "summary.txt", "w") as fh:
        fh.write(_header("calibrate-bucket"))
        for m, d in b.thresholds:
            fh.write(f"{'inf' if m is None else m}: {d}\n")
    print(text, end="")
    return b


def run_validate_merge(cfg: ExperimentConfig, out: Path) -> float:
    from .attn_merge import validate_merge

    res = validate_merge(1000, seed=cfg.seed)
    err = res["max_rel_err"]
    ok = err < MERGE_TOL
    with open(out / "summary.txt", "w") as fh:
        fh.write(_header("validate-merge"))
        fh.write(f"cases: {res['cases']}\nmax_rel_err: {err:.3e}\npass: {ok}\n")
    print(f"validate-merge: {res['cases']} cases, max relative error {err:.3e} ({'ok' if ok else 'FAIL'})")
    return err


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dcpsim", description="DP-EP decode scheduling simulator")
    ap.add_argument("--config", required=True, help="YAML experiment config")
    ap.add_argument("--mode", choices=MODES, help="overrides the config's mode")
    ap.add_argument("--seed", type=int, help="overrides the config's seed")
    ap.add_argument("--out", help="output directory (overrides the config's out)")
    ap.add_argument("--dump-config", action="store_true", help="print the expanded config and exit")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        over = {k: v for k, v in (("mode", args.mode), ("seed", args.seed), ("out", args.out)) if v is not None}
        cfg = replace(cfg, **over) if over else cfg
        if args.dump_config:
            print(dump_config(cfg), end="")
            return 0
        out = Path(cfg.out)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise ConfigError(f"cannot create output directory {out}: {e}") from e
        if cfg.mode == "simulate":
            runs = run_simulate(cfg, out)
            for m in runs:
                print(f"{m.policy}: attainment {m.slo_attainment:.4f}, p99 TPOT {m.p99_tpot_ms:.2f} ms, "
                      f"HoL {m.hol_events}, unschedulable {m.n_unschedulable}")
        elif cfg.mode == "sweep":
            for label, r in run_sweep(cfg, out).items():
                print(f"{label}: max sustainable rate {'none' if r is None else r}")
        elif cfg.mode == "calibrate-bucket":
            run_calibrate(cfg, out)
        else:
            if run_validate_merge(cfg, out) >= MERGE_TOL:
                return 1
    except ConfigError as e:
        print(f"dcpsim: config error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
