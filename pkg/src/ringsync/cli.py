"""Command-line entry point: verify, bench, fit, predict, crossover, synth."""

from __future__ import annotations

import argparse
import csv
import json
import sys

import numpy as np

from . import metrics
from .collectives import allreduce_cluster, comm_volume_ps, comm_volume_ring
from .core import ClusterConfig, ReduceOp, Strategy
from .trainer import make_task, train
from .transport import LinkProfile, TransportError, load_topology

BENCH_COLUMNS = ["n", "t_seconds", "t1", "t2", "t3", "elements_sent", "strategy"]


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _non_negative_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _non_negative_float(text: str) -> float:
    value = float(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or any(v < 1 for v in values):
        raise argparse.ArgumentTypeError(f"worker counts must be >= 1, got {text!r}")
    return values


def _relative_error(got: np.ndarray, want: np.ndarray) -> float:
    denom = max(float(np.max(np.abs(want), initial=0.0)), np.finfo(float).tiny)
    return float(np.max(np.abs(got - want), initial=0.0)) / denom


def cmd_verify(args) -> int:
    n, k = args.workers, args.grad_size
    config = ClusterConfig(n, Strategy(args.strategy), ReduceOp(args.reduce))
    rng = np.random.default_rng(args.seed)
    buffers = [rng.standard_normal(k) for _ in range(n)]
    addresses = load_topology(args.topology) if args.topology else None
    outputs, ledger = allreduce_cluster(buffers, config, transport=args.transport, addresses=addresses)

    expected = np.sum(np.stack(buffers), axis=0) if k else np.zeros(0)
    if config.reduce_op is ReduceOp.MEAN:
        expected = expected / n
    failures = []
    for r, out in enumerate(outputs):
        err = _relative_error(out, expected)
        if err > 1e-12:
            failures.append(f"rank {r}: relative error {err:.3e} exceeds 1e-12")
        if not np.array_equal(out, outputs[0]):
            failures.append(f"rank {r}: output differs bitwise from rank 0")

    print(f"strategy={config.strategy.value} workers={n} grad_size={k} transport={args.transport}")
    if config.strategy is Strategy.RING:
        for r in range(n):
            rec = ledger.workers.get(r)
            sent = rec.elements_sent if rec else 0
            frames = rec.frames_sent if rec else 0
            want = comm_volume_ring(k, n, r)
            want_frames = 2 * (n - 1)
            if sent != want or frames != want_frames:
                failures.append(
                    f"rank {r}: ledger sent {sent} elements in {frames} frames, "
                    f"expected {want} in {want_frames}"
                )
        sent = sorted({comm_volume_ring(k, n, r) for r in range(n)})
        per_worker = str(sent[0]) if len(sent) == 1 else f"{sent[0]}..{sent[-1]}"
        print(f"elements sent per worker: {per_worker}; frames per worker: {2 * (n - 1)}")
    else:
        up, down = comm_volume_ps(k, n)
        srv = ledger.server
        if srv.elements_received != up or srv.elements_sent != down:
            failures.append(
                f"server: ledger uplink {srv.elements_received} / downlink {srv.elements_sent}, "
                f"expected {up} / {down}"
            )
        print(f"server uplink elements: {srv.elements_received}; downlink elements: {srv.elements_sent}")
    if failures:
        print("FAIL")
        for line in failures:
            print(f"  {line}")
        return 1
    print("PASS")
    return 0


def cmd_bench(args) -> int:
    config_strategy = Strategy(args.strategy)
    profile = LinkProfile(args.per_message_delay, args.per_byte_delay)
    task = make_task(args.seed, args.samples, args.dims, args.noise)
    lr = args.lr if args.lr is not None else 1.0 / np.linalg.norm(task.features, 2) ** 2
    try:
        fh = open(args.out, "w", newline="", encoding="utf-8")
    except OSError as exc:
        print(f"error: cannot write {args.out}: {exc}", file=sys.stderr)
        return 1
    with fh:
        writer = csv.writer(fh)
        writer.writerow(BENCH_COLUMNS)
        for n in args.workers_list:
            config = ClusterConfig(n, config_strategy)
            result = train(
                task, config, args.steps, lr,
                transport=args.transport, profile=profile, compute_delay=args.compute_delay,
            )
            t1 = sum(t.t1_compute for t in result.timings)
            t2 = sum(t.t2_communication for t in result.timings)
            t3 = sum(t.t3_overhead for t in result.timings) + result.setup_seconds
            busiest = max((rec.elements_sent for rec in result.ledger.records()), default=0)
            writer.writerow([n, repr(result.wall_seconds), repr(t1), repr(t2), repr(t3), busiest, config_strategy.value])
            fh.flush()
            print(f"{config_strategy.value} n={n}: {result.wall_seconds:.4f}s, busiest endpoint sent {busiest} elements")
    return 0


def cmd_fit(args) -> int:
    samples = [s for s in metrics.read_samples(args.input) if s.n >= 2]
    report = metrics.fit_cost_model(samples, args.model)
    payload = json.dumps(report.to_dict(), indent=2)
    if args.out:
        metrics.write_report(args.out, report)
    print(payload)
    if not report.valid:
        names = ", ".join(f"{p}={getattr(report.model, p):.6g}" for p in report.negative_parameters())
        print(f"warning: fitted model is invalid, negative parameter(s): {names}", file=sys.stderr)
    return 0


def cmd_predict(args) -> int:
    model = metrics.read_model(args.model)
    print(repr(metrics.predict_time(model, args.n)))
    return 0


def cmd_crossover(args) -> int:
    ps = metrics.read_model(args.ps)
    ring = metrics.read_model(args.ring)
    for label, model, arch in (("--ps", ps, metrics.Architecture.PS), ("--ring", ring, metrics.Architecture.RING)):
        if model.architecture is not arch:
            print(f"error: {label} model has architecture {model.architecture.value}", file=sys.stderr)
            return 1
        if not model.valid:
            print(f"warning: {label} model is not valid (negative or zero parameter)", file=sys.stderr)
    n = metrics.crossover(ps, ring, args.n_max)
    print("none" if n is None else n)
    return 0


def cmd_synth(args) -> int:
    model = metrics.CostModel(args.model, args.T, args.C, args.P)
    samples = metrics.synthesize(model, args.n_list)
    metrics.write_samples(args.out, samples)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ringsync", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="run one all-reduce and check it against the direct sum")
    p.add_argument("--workers", type=_positive_int, required=True)
    p.add_argument("--grad-size", type=_non_negative_int, default=1000)
    p.add_argument("--strategy", choices=[s.value for s in Strategy], default="ring")
    p.add_argument("--transport", choices=["inproc", "tcp"], default="inproc")
    p.add_argument("--reduce", choices=[r.value for r in ReduceOp], default="sum")
    p.add_argument("--topology", help="JSON list of host:port per rank (TCP only)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="time synchronous SGD for several worker counts")
    p.add_argument("--strategy", choices=[s.value for s in Strategy], default="ring")
    p.add_argument("--workers-list", type=_int_list, default=[1, 2, 3, 4, 5, 6, 7, 8])
    p.add_argument("--steps", type=_positive_int, default=20)
    p.add_argument("--compute-delay", type=_non_negative_float, default=0.0,
                   help="single-worker compute seconds per step, split across workers")
    p.add_argument("--per-byte-delay", type=_non_negative_float, default=0.0)
    p.add_argument("--per-message-delay", type=_non_negative_float, default=0.0)
    p.add_argument("--transport", choices=["inproc", "tcp"], default="inproc")
    p.add_argument("--samples", type=_positive_int, default=256)
    p.add_argument("--dims", type=_positive_int, default=16)
    p.add_argument("--noise", type=_non_negative_float, default=0.1)
    p.add_argument("--lr", type=_non_negative_float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("fit", help="fit a cost model to n,t_seconds samples")
    p.add_argument("--input", required=True)
    p.add_argument("--model", choices=[a.value for a in metrics.Architecture], required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="predict training time for n workers")
    p.add_argument("--model", required=True, help="model JSON written by fit")
    p.add_argument("--n", type=_positive_int, required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("crossover", help="smallest n where the ring model beats PS")
    p.add_argument("--ps", required=True)
    p.add_argument("--ring", required=True)
    p.add_argument("--n-max", type=int, default=64)
    p.set_defaults(func=cmd_crossover)

    p = sub.add_parser("synth", help="write noiseless samples from given model parameters")
    p.add_argument("--model", choices=[a.value for a in metrics.Architecture], required=True)
    p.add_argument("--T", type=float, required=True)
    p.add_argument("--C", type=float, required=True)
    p.add_argument("--P", type=float, required=True)
    p.add_argument("--n-list", type=_int_list, default=[2, 3, 4, 5, 6, 7, 8])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, TransportError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
