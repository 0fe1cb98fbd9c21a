"""Command-line front end.

Subcommands: bench, save, load, plan, simulate, estimate. Tabular output is
CSV on stdout; ``plan`` prints JSON. Exit codes: 0 ok, 2 usage, 3 I/O,
4 verification (checksum or content mismatch).
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import re
import sys
from pathlib import Path

from fastckpt import ckpt_format, partition, perf_model, pipeline_sim, tensorspec, write_engine

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_VERIFY = 4

SCRATCH_ENV = "FASTCKPT_SCRATCH"

_UNITS = {"": 1, "b": 1, "kib": 1 << 10, "mib": 1 << 20, "gib": 1 << 30, "tib": 1 << 40}
_SIZE_RE = re.compile(r"^\s*([0-9]*\.?[0-9]+(?:[eE][+-]?[0-9]+)?)\s*([a-zA-Z]*)\s*$")


class UsageError(Exception):
    pass


def parse_size(text: str) -> int:
    """``512``, ``2MiB``, ``1.5GiB`` or ``1.3e9`` to a byte count."""
    m = _SIZE_RE.match(text)
    if not m or m.group(2).lower() not in _UNITS:
        raise UsageError(f"bad size {text!r} (use B, KiB, MiB, GiB or TiB)")
    value = float(m.group(1)) * _UNITS[m.group(2).lower()]
    if not value.is_integer():
        raise UsageError(f"size {text!r} is not a whole number of bytes")
    return int(value)


def parse_size_list(text: str) -> list[int]:
    """Comma list of sizes; ``A..B`` expands to A, 2A, 4A, ... up to B."""
    out: list[int] = []
    for item in filter(None, (s.strip() for s in text.split(","))):
        if ".." in item:
            lo, hi = (parse_size(x) for x in item.split("..", 1))
            if lo <= 0 or hi < lo:
                raise UsageError(f"bad range {item!r}")
            while lo <= hi:
                out.append(lo)
                lo *= 2
        else:
            out.append(parse_size(item))
    return out


def parse_rate(text: str) -> float:
    """Bytes per second, as a plain number (``5e9``) or a size (``2GiB``)."""
    try:
        return float(text)
    except ValueError:
        return float(parse_size(text))


def _scratch(args, required: bool = True) -> Path | None:
    raw = os.environ.get(SCRATCH_ENV) or args.scratch
    if raw is None:
        if required:
            raise UsageError(f"--scratch (or ${SCRATCH_ENV}) is required for this subcommand")
        return None
    path = Path(raw)
    if not path.is_dir():
        raise FileNotFoundError(f"scratch directory {path} does not exist")
    if not os.access(path, os.W_OK):
        raise PermissionError(f"scratch directory {path} is not writable")
    return path


def _inside(scratch: Path, name: str) -> Path:
    target = (scratch / name).resolve()
    if scratch.resolve() not in target.parents:
        raise UsageError(f"{name!r} must name a file inside the scratch directory")
    return target


def _topology(args) -> tuple[partition.Topology, list[int]]:
    try:
        topo = partition.Topology(args.nodes, args.sockets, args.ranks_per_node)
    except partition.PlanError as exc:
        raise UsageError(str(exc)) from None
    dp = args.dp if args.dp is not None else topo.world_size
    if dp < 1 or dp > topo.world_size:
        raise UsageError(f"--dp must be in [1, {topo.world_size}]")
    return topo, list(range(dp))


def _strategy(text: str) -> partition.WriterStrategy:
    try:
        return partition.WriterStrategy.parse(text)
    except partition.PlanError as exc:
        raise UsageError(str(exc)) from None


def _add_topology(p: argparse.ArgumentParser, writers_default: str = "replica"):
    p.add_argument("--writers", default=writers_default, help="replica, socket or fixed:K")
    p.add_argument("--nodes", type=int, default=1)
    p.add_argument("--sockets", type=int, default=2, help="CPU sockets per node")
    p.add_argument("--ranks-per-node", type=int, default=8)
    p.add_argument("--dp", type=int, default=None, help="data-parallel ranks (default: all)")


def _spec_from(args) -> tensorspec.CheckpointSpec | None:
    try:
        if getattr(args, "spec", None):
            return tensorspec.load_spec(args.spec, args.seed)
        if getattr(args, "synthetic", None):
            return tensorspec.synthetic_spec(parse_size(args.synthetic), args.seed or 0)
    except ckpt_format.FormatError as exc:
        raise UsageError(str(exc)) from None
    return None


# --- subcommands ------------------------------------------------------------


def cmd_bench(args) -> int:
    sizes = parse_size_list(args.sizes)
    buffers = parse_size_list(args.buffers)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    for m in modes:
        if m not in ("single", "double", "baseline"):
            raise UsageError(f"unknown mode {m!r}")
    if args.repeats < 0:
        raise UsageError("--repeats must be >= 0")
    scratch = _scratch(args)
    out_path = _inside(scratch, args.out) if args.out else None
    rows = write_engine.bench_write(
        sizes, buffers, modes, args.repeats, scratch, args.alignment, args.seed, direct=not args.no_direct
    )
    if out_path is not None:
        with open(out_path, "w", newline="") as f:
            write_engine.write_bench_csv(rows, f)
    write_engine.write_bench_csv(rows, sys.stdout)
    return EXIT_OK


def cmd_plan(args) -> int:
    topo, dp = _topology(args)
    try:
        p = partition.plan(parse_size(args.bytes), dp, _strategy(args.writers), topo)
    except partition.PlanError as exc:
        raise UsageError(str(exc)) from None
    print(p.to_json())
    return EXIT_OK


def cmd_save(args) -> int:
    spec = _spec_from(args)
    if (spec is None) == (args.raw is None):
        raise UsageError("save needs exactly one of --spec, --synthetic or --raw")
    topo, dp = _topology(args)
    strategy = _strategy(args.writers)
    scratch = _scratch(args)
    stem = _inside(scratch, args.name)
    if spec is not None:
        stream = ckpt_format.serialize(tensorspec.iter_records(spec))
    else:
        stream = ckpt_format.SerializedStream(Path(args.raw).read_bytes())
    try:
        p = partition.plan(len(stream), dp, strategy, topo)
    except partition.PlanError as exc:
        raise UsageError(str(exc)) from None
    buffer = write_engine.StagingBuffer(parse_size(args.buffer), args.alignment, direct=not args.no_direct)
    manifest, stats = write_engine.write_shards(stream, stem, [tuple(a) for a in p.assignments], args.mode, buffer)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["writer_id", "offset", "length", "crc32", "wall_seconds", "throughput_bps", "fallback"])
    for entry, st in zip(manifest.shards, stats):
        w.writerow([entry.writer_id, entry.offset, entry.length, entry.crc32, st.wall_seconds, st.throughput, int(st.fallback)])
    logging.getLogger(__name__).info("wrote %s", ckpt_format.manifest_path(stem))
    return EXIT_OK


def cmd_load(args) -> int:
    spec = _spec_from(args)
    if args.raw:
        data = ckpt_format.read_sharded(args.manifest, args.readers)
        print(f"total_bytes,crc32\n{len(data)},{ckpt_format.crc32(data)}")
        return EXIT_OK
    records = ckpt_format.load_parallel(args.manifest, args.readers, copy=False)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["name", "dtype", "shape", "bytes"])
    for rec in records:
        w.writerow([rec.name, rec.dtype.name, "x".join(map(str, rec.shape)), rec.nbytes])
    if args.verify:
        if spec is None:
            raise UsageError("--verify needs --spec or --synthetic (and the save-time --seed)")
        if len(records) != len(spec.tensors):
            print(f"verify: FAIL record count {len(records)} != {len(spec.tensors)}", file=sys.stderr)
            return EXIT_VERIFY
        for i, rec in enumerate(records):
            if rec != tensorspec.materialize(spec, i):
                print(f"verify: FAIL tensor {rec.name!r} differs", file=sys.stderr)
                return EXIT_VERIFY
        print("verify: OK", file=sys.stderr)
    return EXIT_OK


def _train_config(args, mode: str, gas: int | None = None) -> pipeline_sim.TrainConfig:
    try:
        return pipeline_sim.TrainConfig(args.tf, args.tb, args.to, gas or args.gas, args.iterations, mode)
    except (ValueError, perf_model.DomainError) as exc:
        raise UsageError(str(exc)) from None


def cmd_simulate(args) -> int:
    size = parse_size(args.bytes)
    if args.live:
        if args.gas_sweep:
            raise UsageError("--gas-sweep is synthetic only")
        scratch = _scratch(args)
        buffer = write_engine.StagingBuffer(parse_size(args.buffer), args.alignment)
        task = pipeline_sim.CkptTask(size, live=pipeline_sim.LiveSink(scratch, buffer, write_engine.WriteMode.parse(args.write_mode), args.seed))
        results = [pipeline_sim.run_live(_train_config(args, args.mode), task, args.live_writers)]
    else:
        if args.bandwidth is None:
            raise UsageError("synthetic simulate needs --bandwidth (bytes/s)")
        try:
            task = pipeline_sim.CkptTask(size, bandwidth=parse_rate(args.bandwidth))
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        try:
            if args.gas_sweep:
                results = pipeline_sim.gas_sweep(_train_config(args, "pipelined"), parse_size_list(args.gas_sweep), task)
            else:
                results = [pipeline_sim.simulate(_train_config(args, args.mode), task)]
        except perf_model.DomainError as exc:
            raise UsageError(str(exc)) from None
    if args.events:
        scratch = _scratch(args)
        with open(_inside(scratch, args.events), "w", newline="") as f:
            for r in results:
                pipeline_sim.write_events_csv(r.events, f)
    pipeline_sim.write_summary_csv(results, sys.stdout)
    return EXIT_OK


def cmd_estimate(args) -> int:
    w = csv.writer(sys.stdout, lineterminator="\n")
    try:
        if args.what == "size":
            n = perf_model.estimate_checkpoint_bytes(float(args.params), args.bytes_per_param)
            w.writerow(["params", "bytes_per_param", "checkpoint_bytes", "checkpoint_gib"])
            w.writerow([args.params, args.bytes_per_param, n, n / 2**30])
        elif args.what == "bandwidth":
            if args.ckpt_bytes is not None:
                size = parse_size(args.ckpt_bytes)
            elif args.params is not None:
                size = perf_model.estimate_checkpoint_bytes(float(args.params), args.bytes_per_param)
            else:
                raise UsageError("estimate bandwidth needs --params or --ckpt-bytes")
            if args.tfb is not None:
                timing = perf_model.IterationTiming(args.tfb, 0.0, gas=args.gas)
            elif args.tf is not None and args.tb is not None:
                timing = perf_model.IterationTiming(args.tf, args.tb, gas=args.gas)
            else:
                raise UsageError("estimate bandwidth needs --tfb or both --tf and --tb")
            bw = perf_model.required_bandwidth(size, timing)
            w.writerow(["checkpoint_bytes", "compute_seconds", "gas", "required_bandwidth_bps"])
            w.writerow([size, timing.compute_seconds, timing.gas, bw])
        else:
            cost = perf_model.recovery_overhead(perf_model.RecoverySpec(args.n, args.m, args.t))
            w.writerow(["n", "m", "t", "recovery_gpu_seconds"])
            w.writerow([args.n, args.m, args.t, cost])
    except (perf_model.SizingError, perf_model.DomainError) as exc:
        raise UsageError(str(exc)) from None
    return EXIT_OK


# --- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fastckpt", description=__doc__.splitlines()[0])
    parser.add_argument("--scratch", default=None, help=f"scratch directory (overridden by ${SCRATCH_ENV})")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bench", help="write-throughput sweep over sizes, IO buffers and modes")
    p.add_argument("--sizes", default="16MiB,512MiB")
    p.add_argument("--buffers", default="2MiB..128MiB")
    p.add_argument("--modes", default="single,double")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--alignment", type=int, default=ckpt_format.DEFAULT_ALIGNMENT)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="also write the CSV to this file in scratch")
    p.add_argument("--no-direct", action="store_true", help="use buffered I/O for the direct path")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("save", help="serialize and write a sharded checkpoint")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--spec", help="tensor spec JSON file")
    src.add_argument("--synthetic", help="payload size of a synthetic float32 checkpoint, e.g. 1GiB")
    src.add_argument("--raw", help="file whose bytes are saved as-is")
    p.add_argument("--seed", type=int, default=None, help="fill seed (default: the spec file's, else 0)")
    p.add_argument("--name", default="checkpoint", help="file stem inside scratch")
    _add_topology(p)
    p.add_argument("--buffer", default="8MiB")
    p.add_argument("--mode", default="double", choices=["single", "double"])
    p.add_argument("--alignment", type=int, default=ckpt_format.DEFAULT_ALIGNMENT)
    p.add_argument("--no-direct", action="store_true")
    p.set_defaults(func=cmd_save)

    p = sub.add_parser("load", help="read, reassemble and verify a sharded checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--readers", type=int, default=4)
    p.add_argument("--verify", action="store_true")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--spec")
    src.add_argument("--synthetic")
    p.add_argument("--seed", type=int, default=None, help="fill seed used at save time")
    p.add_argument("--raw", action="store_true", help="checkpoint was saved from raw bytes")
    p.set_defaults(func=cmd_load)

    p = sub.add_parser("plan", help="print the byte-range plan as JSON")
    p.add_argument("--bytes", required=True)
    _add_topology(p)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("simulate", help="training/checkpoint schedule")
    p.add_argument("--mode", default="pipelined", choices=["sequential", "pipelined", "none"])
    p.add_argument("--tf", type=float, default=0.5, help="forward seconds per micro-step")
    p.add_argument("--tb", type=float, default=1.0, help="backward seconds per micro-step")
    p.add_argument("--to", type=float, default=0.1, help="optimizer seconds")
    p.add_argument("--gas", type=int, default=1)
    p.add_argument("--iterations", type=int, default=10)
    p.add_argument("--bytes", default="1GiB", help="checkpoint size")
    p.add_argument("--bandwidth", default=None, help="synthetic write bandwidth in bytes/s")
    p.add_argument("--gas-sweep", default=None, help="e.g. 1..512")
    p.add_argument("--events", default=None, help="event-log CSV file inside scratch")
    p.add_argument("--live", action="store_true", help="real persister and disk writes")
    p.add_argument("--live-writers", type=int, default=1)
    p.add_argument("--buffer", default="8MiB")
    p.add_argument("--write-mode", default="double", choices=["single", "double"])
    p.add_argument("--alignment", type=int, default=ckpt_format.DEFAULT_ALIGNMENT)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate", help="analytical sizing, bandwidth and recovery cost")
    est = p.add_subparsers(dest="what", required=True)
    e = est.add_parser("size")
    e.add_argument("--params", required=True)
    e.add_argument("--bytes-per-param", type=int, default=perf_model.BYTES_PER_PARAM)
    e = est.add_parser("bandwidth")
    e.add_argument("--params", default=None)
    e.add_argument("--ckpt-bytes", default=None)
    e.add_argument("--bytes-per-param", type=int, default=perf_model.BYTES_PER_PARAM)
    e.add_argument("--tfb", type=float, default=None, help="forward+backward seconds per micro-step")
    e.add_argument("--tf", type=float, default=None)
    e.add_argument("--tb", type=float, default=None)
    e.add_argument("--gas", type=int, default=1)
    e = est.add_parser("recovery")
    e.add_argument("--n", type=int, required=True, help="iterations between checkpoints")
    e.add_argument("--m", type=int, required=True, help="GPU count")
    e.add_argument("--t", type=float, required=True, help="iteration seconds")
    p.set_defaults(func=cmd_estimate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"fastckpt: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ckpt_format.CorruptionError, ckpt_format.ManifestError, ckpt_format.FormatError) as exc:
        print(f"fastckpt: verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (ckpt_format.LoadError, write_engine.SetupError, pipeline_sim.LiveRunError, OSError) as exc:
        print(f"fastckpt: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
