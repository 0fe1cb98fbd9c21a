"""Staged checkpoint writer.

Bytes are copied from (simulated) accelerator memory into an aligned staging
buffer and flushed to the destination file with direct, cache-bypassing I/O.
Only the aligned prefix of a file goes down the direct path; the trailing
sub-alignment suffix is written through the ordinary buffered path into the
same file. In double-buffer mode two staging buffers form a depth-2
pipeline: the copy into one buffer overlaps the device write of the other.
"""

from __future__ import annotations

import csv
import ctypes
import ctypes.util
import enum
import errno
import logging
import mmap
import os
import queue
import shutil
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

from fastckpt.ckpt_format import (
    DEFAULT_ALIGNMENT,
    SerializedStream,
    ShardEntry,
    ShardManifest,
    check_alignment,
    crc32,
    manifest_path,
    shard_path,
)

log = logging.getLogger(__name__)

MiB = 1 << 20
# direct flushes smaller than this are never split across the queue depth
MIN_SUBREQUEST = 1 * MiB

BENCH_COLUMNS = [
    "size_bytes",
    "buffer_bytes",
    "mode",
    "repeat",
    "wall_seconds",
    "throughput_bps",
    "direct_writes",
    "buffered_writes",
    "fallback",
]


class WriteError(OSError):
    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message)
        self.offset = offset


class SetupError(RuntimeError):
    pass


class WriteMode(enum.Enum):
    SINGLE = "single"
    DOUBLE = "double"

    @property
    def buffer_count(self) -> int:
        return 2 if self is WriteMode.DOUBLE else 1

    @classmethod
    def parse(cls, value: "WriteMode | str") -> "WriteMode":
        if isinstance(value, WriteMode):
            return value
        return cls(value.lower())


@dataclass(frozen=True)
class StagingBuffer:
    """Size and placement of the IO buffer.

    ``queue_depth`` bounds how many aligned sub-requests one flush is split
    into; they are issued concurrently.
    """

    capacity: int = 8 * MiB
    alignment: int = DEFAULT_ALIGNMENT
    lock: bool = True
    queue_depth: int = 8
    direct: bool = True

    def __post_init__(self):
        check_alignment(self.alignment)
        if self.capacity < self.alignment or self.capacity % self.alignment:
            raise ValueError(f"capacity {self.capacity} must be a positive multiple of alignment {self.alignment}")
        if self.queue_depth < 1:
            raise ValueError("queue_depth must be >= 1")


@dataclass
class EngineStats:
    bytes_written: int = 0
    wall_seconds: float = 0.0
    direct_write_count: int = 0
    buffered_write_count: int = 0
    direct_bytes: int = 0
    buffered_bytes: int = 0
    fallback: bool = False
    locked: bool = False
    max_in_flight: int = 0
    mode: str = WriteMode.SINGLE.value
    buffer_bytes: int = 0
    # with tracing: (path, offset, length) of every write syscall, and
    # (offset, length) of every direct-path flush in issue order
    trace: list[tuple[str, int, int]] | None = None
    flushes: list[tuple[int, int]] | None = None

    @property
    def throughput(self) -> float:
        return self.bytes_written / self.wall_seconds if self.wall_seconds > 0 else 0.0


@dataclass(frozen=True)
class Flush:
    offset: int
    length: int
    data: memoryview = field(repr=False, compare=False)


class PendingQueue:
    """FIFO of pending bytes that flushes in ``threshold``-sized units.

    ``acquire`` supplies the (staging) memory that queued bytes are copied
    into and ``sink`` consumes a full unit before the queue moves to the next
    buffer. Without them the queue owns plain ``bytearray`` storage and the
    returned flush events keep their data alive.
    """

    def __init__(
        self,
        threshold: int,
        alignment: int = DEFAULT_ALIGNMENT,
        sink: Callable[[Flush], None] | None = None,
        acquire: Callable[[], memoryview] | None = None,
    ):
        check_alignment(alignment)
        if threshold < alignment or threshold % alignment:
            raise ValueError(f"threshold {threshold} must be a positive multiple of {alignment}")
        self.threshold = threshold
        self.alignment = alignment
        self._sink = sink
        self._acquire = acquire or (lambda: memoryview(bytearray(threshold)))
        self._buf: memoryview | None = None
        self.queued = 0
        self.offset = 0

    @property
    def flushed(self) -> int:
        return self.offset

    def append(self, data) -> list[Flush]:
        src = memoryview(data).cast("B")
        events = []
        while len(src):
            if self._buf is None:
                self._buf = self._acquire()
            take = min(self.threshold - self.queued, len(src))
            self._buf[self.queued : self.queued + take] = src[:take]
            self.queued += take
            src = src[take:]
            if self.queued >= self.threshold:
                events.append(self._emit(self.queued))
        return events

    def drain(self) -> Flush | None:
        """Hand out whatever is still queued (fewer than ``threshold`` bytes)."""
        if not self.queued:
            return None
        ev = Flush(self.offset, self.queued, self._buf[: self.queued])
        self.offset += self.queued
        self.queued = 0
        self._buf = None
        return ev

    def _emit(self, n: int) -> Flush:
        ev = Flush(self.offset, n, self._buf[:n])
        if self._sink is not None:
            self._sink(ev)
        self.offset += n
        self.queued = 0
        self._buf = None
        return ev


# --- staging memory ---------------------------------------------------------

_libc = None


def _mlock(buf: mmap.mmap) -> bool:
    global _libc
    try:
        if _libc is None:
            _libc = ctypes.CDLL(ctypes.util.find_library("c"), use_errno=True)
        addr = ctypes.addressof(ctypes.c_char.from_buffer(buf))
        return _libc.mlock(ctypes.c_void_p(addr), ctypes.c_size_t(len(buf))) == 0
    except (OSError, AttributeError, TypeError):
        return False


class _Staging:
    """Page-aligned anonymous mapping, page-locked when the platform allows."""

    def __init__(self, capacity: int, lock: bool):
        self.map = mmap.mmap(-1, capacity)
        self.locked = _mlock(self.map) if lock else False
        self.view = memoryview(self.map)

    def close(self):
        self.view.release()
        try:
            self.map.close()
        except BufferError:
            # slices still referenced from an in-flight traceback; the mapping
            # is unmapped once they are collected
            pass


# --- destination file -------------------------------------------------------


class _Destination:
    def __init__(self, path: os.PathLike | str, direct: bool, trace: list | None, truncate: bool = True):
        self.path = os.fspath(path)
        self.trace = trace
        self.fallback = False
        self.direct = False
        self.lock = threading.Lock()
        flags = os.O_WRONLY | os.O_CREAT | (os.O_TRUNC if truncate else 0)
        self.fd = -1
        if direct and hasattr(os, "O_DIRECT"):
            try:
                self.fd = os.open(self.path, flags | os.O_DIRECT, 0o644)
                self.direct = True
            except OSError as exc:
                if exc.errno != errno.EINVAL:
                    raise WriteError(f"cannot open {self.path}: {exc}", 0) from exc
        if self.fd < 0:
            self.fallback = direct
            self.direct = False
            try:
                self.fd = os.open(self.path, flags, 0o644)
            except OSError as exc:
                raise WriteError(f"cannot open {self.path}: {exc}", 0) from exc

    def _reopen_buffered(self):
        with self.lock:
            if not self.direct:
                return
            log.warning("direct I/O rejected for %s, falling back to buffered writes", self.path)
            os.close(self.fd)
            self.fd = os.open(self.path, os.O_WRONLY)
            self.direct = False
            self.fallback = True

    def pwrite(self, view: memoryview, offset: int, path: str = "direct") -> None:
        if self.trace is not None:
            with self.lock:
                self.trace.append((path, offset, len(view)))
        done = 0
        while done < len(view):
            try:
                n = os.pwrite(self.fd, view[done:], offset + done)
            except OSError as exc:
                if exc.errno == errno.EINVAL and self.direct:
                    self._reopen_buffered()
                    continue
                raise WriteError(f"write to {self.path} failed at offset {offset + done}: {exc}", offset + done) from exc
            if n <= 0:
                raise WriteError(f"short write to {self.path} at offset {offset + done}", offset + done)
            done += n

    def sync(self):
        try:
            os.fdatasync(self.fd)
        except OSError as exc:
            raise WriteError(f"sync of {self.path} failed: {exc}") from exc

    def close(self):
        if self.fd >= 0:
            os.close(self.fd)
            self.fd = -1


# --- engine -----------------------------------------------------------------


class WriteEngine:
    """One writer's staging buffers and I/O workers.

    Not safe to share between threads; create one engine per writer. The
    staging memory is allocated once and reused across ``write`` calls.
    """

    def __init__(self, buffer: StagingBuffer | None = None, mode: WriteMode | str = WriteMode.SINGLE):
        self.buffer = buffer or StagingBuffer()
        self.mode = WriteMode.parse(mode)
        self._staging = [_Staging(self.buffer.capacity, self.buffer.lock) for _ in range(self.mode.buffer_count)]
        self._pool = ThreadPoolExecutor(self.buffer.queue_depth) if self.buffer.queue_depth > 1 else None
        self._jobs: queue.Queue | None = None
        self._writer: threading.Thread | None = None
        if self.mode is WriteMode.DOUBLE:
            self._jobs = queue.Queue()
            self._writer = threading.Thread(target=self._write_loop, name="fastckpt-writer", daemon=True)
            self._writer.start()
        self._free = [threading.Event() for _ in self._staging]
        for ev in self._free:
            ev.set()
        self._error: BaseException | None = None
        self._dest: _Destination | None = None
        self._stats: EngineStats | None = None

    @property
    def locked(self) -> bool:
        return all(s.locked for s in self._staging)

    def close(self):
        if self._writer is not None:
            self._jobs.put(None)
            self._writer.join()
            self._writer = None
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None
        for s in self._staging:
            s.close()
        self._staging = []

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # pipeline stages

    def _direct_write(self, view: memoryview, offset: int) -> None:
        dest = self._dest
        n = len(view)
        parts = min(self.buffer.queue_depth, n // MIN_SUBREQUEST)
        if self._pool is None or parts < 2:
            dest.pwrite(view, offset)
            return
        step = -(-n // parts)
        step += -step % self.buffer.alignment
        futures = [
            self._pool.submit(dest.pwrite, view[start : start + step], offset + start) for start in range(0, n, step)
        ]
        for fut in futures:
            fut.result()

    def _write_loop(self):
        while True:
            job = self._jobs.get()
            if job is None:
                return
            idx, view, offset = job
            try:
                if self._error is None:
                    self._direct_write(view, offset)
            except BaseException as exc:  # surfaced on the copy side
                self._error = exc
            finally:
                view.release()
                self._free[idx].set()

    def _raise_pending(self):
        if self._error is not None:
            err, self._error = self._error, None
            raise err

    def write(self, data, dest_path: os.PathLike | str, trace: bool = False, segments: Iterable[tuple[int, int]] | None = None) -> EngineStats:
        """Write ``data`` to ``dest_path`` and return timing and path counters.

        ``segments`` optionally lists (offset, length) pieces to append in
        order, mimicking a sequence of per-tensor writes; the resulting file
        is the same either way.
        """
        if isinstance(data, SerializedStream):
            if segments is None and data.record_offsets:
                segments = _stream_segments(data)
            data = data.data
        src = memoryview(data).cast("B")
        total = len(src)
        align = self.buffer.alignment
        stats = EngineStats(mode=self.mode.value, buffer_bytes=self.buffer.capacity, locked=self.locked)
        if trace:
            stats.trace, stats.flushes = [], []
        self._stats = stats
        state = {"cur": 0}
        double = self.mode is WriteMode.DOUBLE

        def acquire() -> memoryview:
            if double:
                state["cur"] ^= 1
            idx = state["cur"]
            self._free[idx].wait()
            self._raise_pending()
            return self._staging[idx].view

        def submit(idx: int, view: memoryview, offset: int):
            busy = sum(not ev.is_set() for i, ev in enumerate(self._free) if i != idx)
            stats.max_in_flight = max(stats.max_in_flight, busy + 1)
            stats.direct_write_count += 1
            stats.direct_bytes += len(view)
            if stats.flushes is not None:
                stats.flushes.append((offset, len(view)))
            if double:
                self._free[idx].clear()
                self._jobs.put((idx, view, offset))
            else:
                try:
                    self._direct_write(view, offset)
                finally:
                    view.release()

        def sink(ev: Flush):
            submit(state["cur"], ev.data, ev.offset)

        start = time.perf_counter()
        self._dest = _Destination(dest_path, self.buffer.direct, stats.trace)
        try:
            q = PendingQueue(self.buffer.capacity, align, sink=sink, acquire=acquire)
            if segments is None:
                q.append(src)
            else:
                for off, length in segments:
                    q.append(src[off : off + length])
            tail = q.drain()
            suffix = None
            if tail is not None:
                aligned = tail.length - tail.length % align
                if aligned:
                    submit(state["cur"], tail.data[:aligned], tail.offset)
                if tail.length > aligned:
                    suffix = (tail.data[aligned:], tail.offset + aligned)
                tail.data.release()
            for ev in self._free:
                ev.wait()
            self._raise_pending()
            if stats.direct_bytes:
                self._dest.sync()
            if suffix is not None:
                self._write_suffix(*suffix, stats)
            stats.fallback = self._dest.fallback
        finally:
            for ev in self._free:
                ev.wait()
            self._dest.close()
            self._dest = None
        stats.wall_seconds = time.perf_counter() - start
        stats.bytes_written = total
        return stats

    def _write_suffix(self, view: memoryview, offset: int, stats: EngineStats):
        n = len(view)
        dest = _Destination(self._dest.path, direct=False, trace=self._dest.trace, truncate=False)
        try:
            dest.pwrite(view, offset, path="buffered")
            dest.sync()
        finally:
            dest.close()
            view.release()
        stats.buffered_write_count += 1
        stats.buffered_bytes += n


def _stream_segments(stream: SerializedStream) -> list[tuple[int, int]]:
    segs = []
    pos = 0
    for start, length in stream.record_offsets:
        if start > pos:
            segs.append((pos, start - pos))
        segs.append((start, length))
        pos = start + length
    if pos < len(stream.data):
        segs.append((pos, len(stream.data) - pos))
    return segs


def write_checkpoint(
    stream,
    dest_path: os.PathLike | str,
    mode: WriteMode | str = WriteMode.SINGLE,
    buffer: StagingBuffer | None = None,
    trace: bool = False,
) -> EngineStats:
    with WriteEngine(buffer, mode) as engine:
        return engine.write(stream, dest_path, trace=trace)


def write_shards(
    stream,
    stem: os.PathLike | str,
    assignments: Sequence[tuple[int, int, int]],
    mode: WriteMode | str = WriteMode.DOUBLE,
    buffer: StagingBuffer | None = None,
    engines: Sequence[WriteEngine] | None = None,
) -> tuple[ShardManifest, list[EngineStats]]:
    """Persist ``stream`` as one shard file per (writer_id, offset, length)
    assignment, all writers running concurrently, then write the manifest.

    The manifest is written last (atomically), so its presence means every
    shard is on stable storage.
    """
    data = stream.data if isinstance(stream, SerializedStream) else stream
    src = memoryview(data).cast("B")
    buffer = buffer or StagingBuffer()
    k = len(assignments)
    own = engines is None
    if own:
        engines = [WriteEngine(buffer, mode) for _ in range(k)]
    elif len(engines) < k:
        raise ValueError(f"need {k} engines, got {len(engines)}")

    def run(i: int):
        writer_id, offset, length = assignments[i]
        piece = src[offset : offset + length]
        stats = engines[i].write(piece, shard_path(stem, i, k))
        return ShardEntry(writer_id, offset, length, crc32(piece)), stats

    try:
        if k == 1:
            results = [run(0)]
        else:
            with ThreadPoolExecutor(k) as pool:
                results = list(pool.map(run, range(k)))
    finally:
        if own:
            for e in engines:
                e.close()
    manifest = ShardManifest(len(src), buffer.alignment, [r[0] for r in results])
    manifest.validate()
    target = manifest_path(stem)
    tmp = target.with_name(target.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(manifest.to_json())
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, target)
    return manifest, [r[1] for r in results]


# --- benchmark --------------------------------------------------------------


def _baseline_write(data: memoryview, path: Path) -> EngineStats:
    start = time.perf_counter()
    with open(path, "wb") as f:
        f.write(data)
        f.flush()
        os.fdatasync(f.fileno())
    wall = time.perf_counter() - start
    return EngineStats(
        bytes_written=len(data),
        wall_seconds=wall,
        buffered_write_count=1 if len(data) else 0,
        buffered_bytes=len(data),
        mode="baseline",
    )


def _drop_cache(path: Path):
    try:
        fd = os.open(path, os.O_RDONLY)
    except OSError:
        return
    try:
        os.posix_fadvise(fd, 0, 0, os.POSIX_FADV_DONTNEED)
    except (OSError, AttributeError):
        pass
    finally:
        os.close(fd)


def bench_write(
    sizes: Sequence[int],
    buffer_sizes: Sequence[int],
    modes: Sequence[WriteMode | str],
    repeats: int,
    scratch_dir: os.PathLike | str,
    alignment: int = DEFAULT_ALIGNMENT,
    seed: int = 0,
    direct: bool = True,
) -> list[dict]:
    """Sweep write throughput over checkpoint size, IO buffer size and mode.

    ``modes`` takes ``single``, ``double`` and, for reference, ``baseline``
    (one plain buffered write of the whole payload). Each run writes a fresh
    file, syncs it before the clock stops, and deletes it afterwards.
    """
    rows: list[dict] = []
    if repeats <= 0 or not sizes or not buffer_sizes or not modes:
        return rows
    scratch = Path(scratch_dir)
    if not scratch.is_dir():
        raise SetupError(f"scratch directory {scratch} does not exist")
    need = max(sizes)
    free = shutil.disk_usage(scratch).free
    if free < need * 2:
        raise SetupError(f"scratch {scratch} has {free} bytes free, need {need * 2}")
    mode_names = [m if m == "baseline" else WriteMode.parse(m).value for m in modes]

    import numpy as np

    rng = np.random.default_rng(seed)
    target = scratch / f"fastckpt-bench-{os.getpid()}.dat"
    for size in sizes:
        payload = memoryview(rng.integers(0, 256, size, dtype=np.uint8)).cast("B")
        for buf_size in buffer_sizes:
            staging = StagingBuffer(buf_size, alignment, direct=direct)
            for mode in mode_names:
                engine = None if mode == "baseline" else WriteEngine(staging, mode)
                try:
                    for rep in range(repeats):
                        try:
                            if engine is None:
                                stats = _baseline_write(payload, target)
                            else:
                                stats = engine.write(payload, target)
                        finally:
                            _drop_cache(target)
                            target.unlink(missing_ok=True)
                        rows.append(
                            {
                                "size_bytes": size,
                                "buffer_bytes": buf_size,
                                "mode": mode,
                                "repeat": rep,
                                "wall_seconds": stats.wall_seconds,
                                "throughput_bps": stats.throughput,
                                "direct_writes": stats.direct_write_count,
                                "buffered_writes": stats.buffered_write_count,
                                "fallback": int(stats.fallback),
                            }
                        )
                        log.info("bench size=%d buffer=%d mode=%s rep=%d %.2f MB/s", size, buf_size, mode, rep, stats.throughput / 1e6)
                finally:
                    if engine is not None:
                        engine.close()
    return rows


def write_bench_csv(rows: Iterable[dict], out) -> None:
    writer = csv.DictWriter(out, fieldnames=BENCH_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
