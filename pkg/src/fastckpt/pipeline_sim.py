"""Training loop / checkpoint persister schedule.

The trainer runs ``gas`` forward/backward micro-steps, blocks before the
optimizer until the previous checkpoint has been persisted, runs the
optimizer, and then hands the new checkpoint to the persister. In
``sequential`` mode the trainer instead waits for each checkpoint right after
issuing it, and ``none`` never checkpoints.

``simulate`` evaluates the schedule as a discrete-event model in exact
rational arithmetic. ``run_live`` runs the same handshake with a real
persister thread writing sharded checkpoints through the write engine.
"""

from __future__ import annotations

import csv
import enum
import os
import queue
import statistics
import threading
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from fastckpt.ckpt_format import DType, TensorRecord, manifest_path, serialize
from fastckpt.partition import Topology, WriterStrategy, plan
from fastckpt.perf_model import DomainError
from fastckpt.tensorspec import iter_records, synthetic_spec
from fastckpt.write_engine import StagingBuffer, WriteEngine, WriteMode, write_shards

EVENT_COLUMNS = ["iter", "phase", "start_s", "end_s"]
SUMMARY_COLUMNS = [
    "mode",
    "gas",
    "iterations",
    "steady_state_iter_s",
    "slowdown",
    "stall_s",
    "drain_s",
    "total_s",
]


class ScheduleMode(enum.Enum):
    SEQUENTIAL = "sequential"
    PIPELINED = "pipelined"
    NONE = "none"

    @classmethod
    def parse(cls, value: "ScheduleMode | str") -> "ScheduleMode":
        if isinstance(value, ScheduleMode):
            return value
        value = value.lower()
        if value in ("nocheckpoint", "no_checkpoint"):
            return cls.NONE
        return cls(value)


@dataclass(frozen=True)
class TrainConfig:
    t_forward: float
    t_backward: float
    t_optimizer: float = 0.0
    gas: int = 1
    iterations: int = 10
    mode: ScheduleMode = ScheduleMode.PIPELINED

    def __post_init__(self):
        object.__setattr__(self, "mode", ScheduleMode.parse(self.mode))
        if self.iterations < 1:
            raise DomainError("iterations must be >= 1")
        if self.gas < 1:
            raise DomainError("gas must be >= 1")
        if min(self.t_forward, self.t_backward, self.t_optimizer) < 0:
            raise DomainError("phase times must be >= 0")

    def with_(self, **kw) -> "TrainConfig":
        fields = dict(self.__dict__)
        fields.update(kw)
        return TrainConfig(**fields)


@dataclass(frozen=True)
class LiveSink:
    scratch_dir: str | os.PathLike
    buffer: StagingBuffer = field(default_factory=StagingBuffer)
    write_mode: WriteMode = WriteMode.DOUBLE
    seed: int = 0


@dataclass(frozen=True)
class CkptTask:
    bytes: int
    bandwidth: float | None = None
    live: LiveSink | None = None

    def __post_init__(self):
        if (self.bandwidth is None) == (self.live is None):
            raise ValueError("CkptTask needs exactly one of bandwidth or live sink")
        if self.bytes < 0:
            raise ValueError("bytes must be >= 0")


@dataclass(frozen=True)
class Event:
    iter: int
    phase: str
    start_s: float
    end_s: float


@dataclass
class SimResult:
    mode: ScheduleMode
    gas: int
    iter_times: list[float]
    steady_state_iter_time: float
    slowdown: float
    stall_seconds: float
    drain_seconds: float = 0.0
    total_seconds: float = 0.0
    events: list[Event] = field(default_factory=list, repr=False)
    checkpoints: list[Path] = field(default_factory=list, repr=False)
    persister_allocations: int = 0
    persister_collectives: int = 0

    def summary_row(self) -> dict:
        return {
            "mode": self.mode.value,
            "gas": self.gas,
            "iterations": len(self.iter_times),
            "steady_state_iter_s": self.steady_state_iter_time,
            "slowdown": self.slowdown,
            "stall_s": self.stall_seconds,
            "drain_s": self.drain_seconds,
            "total_s": self.total_seconds,
        }


def _steady_state(iter_times: Sequence) -> object:
    # iteration 0 has no pending checkpoint and is excluded
    tail = iter_times[1:] if len(iter_times) > 1 else iter_times
    return statistics.median(tail)


def _ratio(num, den) -> float:
    if den == 0:
        return 1.0 if num == 0 else float("inf")
    return float(num / den)


def simulate(train: TrainConfig, ckpt: CkptTask) -> SimResult:
    """Discrete-event evaluation of the schedule with a synthetic sink."""
    if ckpt.bandwidth is None:
        raise ValueError("simulate needs a synthetic (bandwidth) sink; use run_live for real writes")
    if ckpt.bandwidth < 0:
        raise DomainError("bandwidth must be >= 0")
    if ckpt.bytes and ckpt.bandwidth == 0:
        raise DomainError("zero bandwidth with a non-empty checkpoint")
    F, B, O = Fraction(train.t_forward), Fraction(train.t_backward), Fraction(train.t_optimizer)
    t_ckpt = Fraction(ckpt.bytes) / Fraction(ckpt.bandwidth) if ckpt.bytes else Fraction(0)
    mode = train.mode

    events: list[tuple[int, str, Fraction, Fraction]] = []
    iter_times: list[Fraction] = []
    now = Fraction(0)
    stall = Fraction(0)
    pending: Fraction | None = None
    for i in range(train.iterations):
        start = now
        for _ in range(train.gas):
            events.append((i, "F", now, now + F))
            now += F
            events.append((i, "B", now, now + B))
            now += B
        if pending is not None:
            if pending > now:
                events.append((i, "STALL", now, pending))
                stall += pending - now
                now = pending
            pending = None
        events.append((i, "O", now, now + O))
        now += O
        if mode is not ScheduleMode.NONE:
            done = now + t_ckpt
            events.append((i, "CKPT_REQ", now, now))
            events.append((i, "CKPT_DONE", now, done))
            if mode is ScheduleMode.SEQUENTIAL:
                if done > now:
                    events.append((i, "STALL", now, done))
                stall += done - now
                now = done
            else:
                pending = done
        iter_times.append(now - start)
    drain = max(Fraction(0), pending - now) if pending is not None else Fraction(0)

    steady = _steady_state(iter_times)
    base = train.gas * (F + B) + O
    return SimResult(
        mode=mode,
        gas=train.gas,
        iter_times=[float(t) for t in iter_times],
        steady_state_iter_time=float(steady),
        slowdown=_ratio(steady, base),
        stall_seconds=float(stall),
        drain_seconds=float(drain),
        total_seconds=float(now + drain),
        events=[Event(i, p, float(s), float(e)) for i, p, s, e in events],
    )


def closed_form_iter_time(train: TrainConfig, t_ckpt: float) -> Fraction:
    """Steady-state iteration time of each schedule, evaluated exactly."""
    compute = train.gas * (Fraction(train.t_forward) + Fraction(train.t_backward))
    t_opt, t_c = Fraction(train.t_optimizer), Fraction(t_ckpt)
    if train.mode is ScheduleMode.PIPELINED and train.iterations > 1:
        return max(compute, t_c) + t_opt
    if train.mode is ScheduleMode.NONE or train.mode is ScheduleMode.PIPELINED:
        return compute + t_opt
    return compute + t_opt + t_c


def gas_sweep(base: TrainConfig, gas_values: Iterable[int], ckpt: CkptTask) -> list[SimResult]:
    rows = []
    for gas in gas_values:
        for mode in (ScheduleMode.PIPELINED, ScheduleMode.SEQUENTIAL):
            rows.append(simulate(base.with_(gas=gas, mode=mode), ckpt))
    return rows


def schedule_violations(events: Sequence[Event]) -> list[str]:
    """Check the trainer/persister handshake in an event log.

    Checkpoint i must finish before optimizer i+1 starts, and a new request
    may only be issued once the previous checkpoint is done.
    """
    problems = []
    done: dict[int, float] = {}
    opt_start: dict[int, float] = {}
    req: dict[int, float] = {}
    for ev in events:
        if ev.phase == "CKPT_DONE":
            done[ev.iter] = ev.end_s
        elif ev.phase == "CKPT_REQ":
            req[ev.iter] = ev.start_s
        elif ev.phase == "O":
            opt_start[ev.iter] = ev.start_s
    for i, end in done.items():
        nxt = opt_start.get(i + 1)
        if nxt is not None and end > nxt:
            problems.append(f"checkpoint {i} done at {end} after optimizer {i + 1} start {nxt}")
    issued = sorted(req)
    for a, b in zip(issued, issued[1:]):
        if a not in done:
            problems.append(f"checkpoint {a} never completed")
        elif req[b] < done[a]:
            problems.append(f"checkpoint {b} requested at {req[b]} while {a} outstanding until {done[a]}")
    if issued and issued[-1] not in done:
        problems.append(f"checkpoint {issued[-1]} never completed")
    return problems


# --- live mode --------------------------------------------------------------


class AcceleratorMemory:
    """Stand-in for device memory holding the model state.

    Counts allocations per actor so tests can check that the persister only
    reads existing tensors.
    """

    def __init__(self):
        self.allocations: dict[str, int] = {}
        self.tensors: dict[str, TensorRecord] = {}
        self._lock = threading.Lock()

    def allocate(self, actor: str, record: TensorRecord) -> None:
        with self._lock:
            self.allocations[actor] = self.allocations.get(actor, 0) + 1
            self.tensors[record.name] = record

    def snapshot(self) -> list[TensorRecord]:
        with self._lock:
            return list(self.tensors.values())


def synthetic_state(total_bytes: int, seed: int = 0, tensor_count: int = 8) -> list[TensorRecord]:
    """Seeded model-state tensors whose payloads sum to about ``total_bytes``."""
    return list(iter_records(synthetic_spec(total_bytes, seed, tensor_count)))


class _Persister(threading.Thread):
    def __init__(self, sink: LiveSink, writer_count: int):
        super().__init__(name="fastckpt-persister", daemon=True)
        self.sink = sink
        self.requests: queue.Queue = queue.Queue(maxsize=1)
        self.completions: queue.Queue = queue.Queue(maxsize=1)
        self.collectives = 0
        topo = Topology(1, 1, writer_count)
        self.ranks = list(range(writer_count))
        self.strategy = WriterStrategy.fixed(writer_count)
        self.topo = topo
        self.engines = [WriteEngine(sink.buffer, sink.write_mode) for _ in range(writer_count)]

    def run(self):
        try:
            while True:
                req = self.requests.get()
                if req is None:
                    return
                it, records = req
                try:
                    stream = serialize(records)
                    p = plan(len(stream), self.ranks, self.strategy, self.topo)
                    stem = Path(self.sink.scratch_dir) / f"ckpt-{it:05d}" / "model"
                    stem.parent.mkdir(parents=True, exist_ok=True)
                    write_shards(stream, stem, [tuple(a) for a in p.assignments], engines=self.engines)
                    self.completions.put((it, manifest_path(stem), None, time.perf_counter()))
                except BaseException as exc:
                    self.completions.put((it, None, exc, time.perf_counter()))
        finally:
            for e in self.engines:
                e.close()


class LiveRunError(RuntimeError):
    def __init__(self, message: str, iteration: int):
        super().__init__(message)
        self.iteration = iteration


def run_live(train: TrainConfig, ckpt: CkptTask, writer_count: int = 1) -> SimResult:
    """Run the handshake for real: timed compute phases on this thread,
    a persister thread writing ``writer_count`` shards per checkpoint."""
    if ckpt.live is None:
        raise ValueError("run_live needs a live sink")
    if writer_count < 1:
        raise ValueError("writer_count must be >= 1")
    sink = ckpt.live
    if not Path(sink.scratch_dir).is_dir():
        raise LiveRunError(f"scratch directory {sink.scratch_dir} does not exist", -1)
    mode = train.mode
    memory = AcceleratorMemory()
    for rec in synthetic_state(ckpt.bytes, sink.seed):
        memory.allocate("trainer", rec)

    persister = _Persister(sink, writer_count) if mode is not ScheduleMode.NONE else None
    if persister is not None:
        persister.start()

    events: list[Event] = []
    iter_times: list[float] = []
    checkpoints: list[Path] = []
    stall = 0.0
    t0 = time.perf_counter()
    clock = lambda: time.perf_counter() - t0  # noqa: E731

    def phase(i: int, name: str, seconds: float):
        s = clock()
        if seconds > 0:
            time.sleep(seconds)
        events.append(Event(i, name, s, clock()))

    outstanding: tuple[int, float] | None = None

    def await_checkpoint(i: int, as_stall: bool = True) -> float:
        nonlocal outstanding
        it, req_at = outstanding
        s = clock()
        done_it, path, err, done_perf = persister.completions.get()
        end = clock()
        if err is not None:
            raise LiveRunError(f"checkpoint of iteration {done_it} failed: {err}", done_it) from err
        events.append(Event(it, "CKPT_DONE", req_at, done_perf - t0))
        waited = max(0.0, done_perf - t0 - s)
        if as_stall and waited > 0:
            events.append(Event(i, "STALL", s, end))
        checkpoints.append(path)
        outstanding = None
        return waited

    try:
        for i in range(train.iterations):
            start = clock()
            for _ in range(train.gas):
                phase(i, "F", train.t_forward)
                phase(i, "B", train.t_backward)
            if outstanding is not None:
                stall += await_checkpoint(i)
            phase(i, "O", train.t_optimizer)
            step = np.array([i + 1], dtype=np.int64).tobytes()
            memory.allocate("trainer", TensorRecord("optimizer.step", DType.i64, (1,), step))
            if persister is not None:
                req_at = clock()
                events.append(Event(i, "CKPT_REQ", req_at, req_at))
                persister.requests.put((i, memory.snapshot()))
                outstanding = (i, req_at)
                if mode is ScheduleMode.SEQUENTIAL:
                    stall += await_checkpoint(i)
            iter_times.append(clock() - start)
        end = clock()
        if outstanding is not None:
            await_checkpoint(train.iterations, as_stall=False)
        drain = clock() - end
    finally:
        if persister is not None:
            persister.requests.put(None)
            persister.join()

    steady = _steady_state(iter_times)
    base = train.gas * (train.t_forward + train.t_backward) + train.t_optimizer
    return SimResult(
        mode=mode,
        gas=train.gas,
        iter_times=iter_times,
        steady_state_iter_time=steady,
        slowdown=_ratio(steady, base),
        stall_seconds=stall,
        drain_seconds=drain,
        total_seconds=clock(),
        events=events,
        checkpoints=checkpoints,
        persister_allocations=memory.allocations.get("persister", 0),
        persister_collectives=persister.collectives if persister is not None else 0,
    )


def write_events_csv(events: Iterable[Event], out) -> None:
    w = csv.writer(out, lineterminator="\n")
    w.writerow(EVENT_COLUMNS)
    for ev in events:
        w.writerow([ev.iter, ev.phase, repr(ev.start_s), repr(ev.end_s)])


def write_summary_csv(results: Iterable[SimResult], out) -> None:
    w = csv.DictWriter(out, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in results:
        w.writerow(r.summary_row())
