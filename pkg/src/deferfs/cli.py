"""Command-line entry point.

    deferfs run --servers 8 --workload single-dir --ops 10000 --seed 7

Runs a workload against a simulated cluster, verifies the quiesced state
against the reference model, prints one JSON metrics document to stdout
and writes a CSV of per-operation latency samples. Exit code 0 iff the
verification verdict is PASS.
"""

from __future__ import annotations

import argparse
import json
import sys

from .config import ClusterConfig
from .core import HashConfig
from .harness import run_workload
from .netsim import FaultProfile
from .workload import DATACENTER_RATIOS, PANGU_RATIOS, WorkloadSpec


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deferfs")
    sub = p.add_subparsers(dest="cmd", required=True)
    run = sub.add_parser("run", help="run a workload and verify the outcome")
    run.add_argument("--servers", type=int, default=4)
    run.add_argument("--clients", type=int, default=4)
    run.add_argument("--workload", choices=["single-dir", "multi-dir", "burst", "mixed"],
                     default="single-dir")
    run.add_argument("--ops", type=int, default=10_000)
    run.add_argument("--inflight", type=int, default=32)
    run.add_argument("--dirs", type=int, default=1024)
    run.add_argument("--burst-size", type=int, default=10)
    run.add_argument("--ratios", choices=["pangufs", "datacenter"], default="pangufs")
    run.add_argument("--skew", action="store_true",
                     help="80%% of operations in 20%% of directories")
    run.add_argument("--loss", type=float, default=0.0)
    run.add_argument("--dup", type=float, default=0.0)
    run.add_argument("--reorder", type=int, default=0)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--stages", type=int, default=10)
    run.add_argument("--index-bits", type=int, default=17)
    run.add_argument("--push-threshold", type=int, default=29)
    run.add_argument("--mode", choices=["async", "sync"], default="async")
    run.add_argument("--csv", default="latency_samples.csv",
                     help="per-operation latency sample file")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = ClusterConfig(
        n_servers=args.servers,
        n_clients=args.clients,
        hash=HashConfig(seed=args.seed, index_bits=args.index_bits),
        stages=args.stages,
        mode=args.mode,
        push_threshold=args.push_threshold,
    )
    spec = WorkloadSpec(
        pattern=args.workload,
        op_count=args.ops,
        inflight=args.inflight,
        n_dirs=args.dirs,
        burst_size=args.burst_size,
        ratios=PANGU_RATIOS if args.ratios == "pangufs" else DATACENTER_RATIOS,
        skew=(0.8, 0.2) if args.skew else None,
        seed=args.seed,
    )
    profile = FaultProfile(loss=args.loss, dup=args.dup,
                           reorder_window=args.reorder, seed=args.seed)
    result = run_workload(spec, cfg, profile)
    if result.divergence:
        result.metrics["divergence"] = result.divergence
    print(json.dumps(result.metrics, indent=2, sort_keys=True))
    with open(args.csv, "w") as f:
        f.write("op_index,op_type,issue_us,complete_us,latency_us,errno\n")
        for row in result.driver.per_op_rows:
            f.write(",".join(str(x) for x in row) + "\n")
    return 0 if result.verdict else 1


if __name__ == "__main__":
    sys.exit(main())
