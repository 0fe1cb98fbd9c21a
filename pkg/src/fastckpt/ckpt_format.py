"""Checkpoint container: serialized tensor records, shard manifests, and
parallel reassembly.

Stream layout (little-endian)::

    b"FPCK" | version u32 | record_count u64 | records... | crc32 u32

    record: name_len u16 | name | dtype u8 | ndim u8 | dims u64 * ndim
            | payload_len u64 | payload

The trailing CRC32 covers every preceding byte of the stream.
"""

from __future__ import annotations

import enum
import json
import math
import os
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

MAGIC = b"FPCK"
VERSION = 1
MANIFEST_VERSION = 1
DEFAULT_ALIGNMENT = 512

_HEADER = struct.Struct("<4sIQ")
_FOOTER = struct.Struct("<I")
_U16 = struct.Struct("<H")
_U8x2 = struct.Struct("<BB")
_U64 = struct.Struct("<Q")

HEADER_SIZE = _HEADER.size
FOOTER_SIZE = _FOOTER.size


class CheckpointError(Exception):
    pass


class FormatError(CheckpointError):
    pass


class ManifestError(CheckpointError):
    pass


class CorruptionError(CheckpointError):
    def __init__(self, message: str, writer_id: int | None = None):
        super().__init__(message)
        self.writer_id = writer_id


class LoadError(CheckpointError):
    def __init__(self, message: str, shard: int | None = None):
        super().__init__(message)
        self.shard = shard


class DType(enum.IntEnum):
    f16 = 0
    f32 = 1
    f64 = 2
    i8 = 3
    i32 = 4
    i64 = 5

    @property
    def itemsize(self) -> int:
        return _ITEMSIZE[self]

    @classmethod
    def parse(cls, value: "DType | str | int") -> "DType":
        if isinstance(value, DType):
            return value
        if isinstance(value, str):
            try:
                return cls[value]
            except KeyError:
                raise FormatError(f"unknown dtype {value!r}") from None
        try:
            return cls(value)
        except ValueError:
            raise FormatError(f"unknown dtype code {value}") from None


_ITEMSIZE = {DType.f16: 2, DType.f32: 4, DType.f64: 8, DType.i8: 1, DType.i32: 4, DType.i64: 8}


@dataclass(frozen=True)
class TensorRecord:
    name: str
    dtype: DType
    shape: tuple[int, ...]
    payload: bytes

    def __post_init__(self):
        object.__setattr__(self, "dtype", DType.parse(self.dtype))
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        self.validate()

    def validate(self) -> None:
        encoded = self.name.encode("utf-8")
        if not encoded or len(encoded) > 0xFFFF:
            raise FormatError(f"tensor name must be 1..65535 bytes, got {len(encoded)}")
        if len(self.shape) > 0xFF:
            raise FormatError(f"{self.name}: at most 255 dims supported")
        if any(d < 0 or d >= 2**64 for d in self.shape):
            raise FormatError(f"{self.name}: invalid shape {self.shape}")
        expected = math.prod(self.shape) * self.dtype.itemsize
        if len(self.payload) != expected:
            raise FormatError(
                f"{self.name}: payload is {len(self.payload)} bytes, shape {self.shape} "
                f"of {self.dtype.name} needs {expected}"
            )

    @property
    def nbytes(self) -> int:
        return len(self.payload)

    def encoded_size(self) -> int:
        return 2 + len(self.name.encode("utf-8")) + 2 + 8 * len(self.shape) + 8 + len(self.payload)


@dataclass
class SerializedStream:
    data: bytes | bytearray
    record_offsets: list[tuple[int, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.data)

    @classmethod
    def from_bytes(cls, data: bytes) -> "SerializedStream":
        """Wrap raw stream bytes, recovering record offsets from the headers."""
        _, offsets = _parse(memoryview(data), with_payloads=False)
        return cls(data, offsets)


def _record_header(rec: TensorRecord) -> bytes:
    name = rec.name.encode("utf-8")
    return b"".join(
        [
            _U16.pack(len(name)),
            name,
            _U8x2.pack(int(rec.dtype), len(rec.shape)),
            struct.pack(f"<{len(rec.shape)}Q", *rec.shape),
            _U64.pack(len(rec.payload)),
        ]
    )


def serialized_size(records: Sequence[TensorRecord]) -> int:
    return HEADER_SIZE + sum(r.encoded_size() for r in records) + FOOTER_SIZE


def serialize(records: Iterable[TensorRecord]) -> SerializedStream:
    records = list(records)
    for rec in records:
        rec.validate()
    total = serialized_size(records)
    out = bytearray(total)
    _HEADER.pack_into(out, 0, MAGIC, VERSION, len(records))
    pos = HEADER_SIZE
    offsets = []
    for rec in records:
        start = pos
        head = _record_header(rec)
        out[pos : pos + len(head)] = head
        pos += len(head)
        out[pos : pos + len(rec.payload)] = rec.payload
        pos += len(rec.payload)
        offsets.append((start, pos - start))
    _FOOTER.pack_into(out, pos, zlib.crc32(memoryview(out)[:pos]))
    return SerializedStream(out, offsets)


def _parse(buf: memoryview, with_payloads: bool, copy: bool = True):
    if len(buf) < HEADER_SIZE + FOOTER_SIZE:
        raise FormatError(f"stream too short ({len(buf)} bytes)")
    magic, version, count = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {bytes(magic)!r}")
    if version != VERSION:
        raise FormatError(f"unsupported stream version {version}")
    end = len(buf) - FOOTER_SIZE
    (crc,) = _FOOTER.unpack_from(buf, end)
    if zlib.crc32(buf[:end]) != crc:
        raise CorruptionError("stream CRC32 mismatch")
    pos = HEADER_SIZE
    records, offsets = [], []
    try:
        for _ in range(count):
            start = pos
            (name_len,) = _U16.unpack_from(buf, pos)
            pos += 2
            name = bytes(buf[pos : pos + name_len]).decode("utf-8")
            pos += name_len
            code, ndim = _U8x2.unpack_from(buf, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
            pos += 8 * ndim
            (plen,) = _U64.unpack_from(buf, pos)
            pos += 8
            if pos + plen > end:
                raise FormatError(f"record {name!r} runs past end of stream")
            if with_payloads:
                view = buf[pos : pos + plen]
                records.append(TensorRecord(name, DType.parse(code), shape, bytes(view) if copy else view))
            pos += plen
            offsets.append((start, pos - start))
    except struct.error as exc:
        raise FormatError(f"truncated record: {exc}") from None
    if pos != end:
        raise FormatError(f"{end - pos} trailing bytes after {count} records")
    return records, offsets


def deserialize(data: bytes | SerializedStream, copy: bool = True) -> list[TensorRecord]:
    """Parse a stream back into records.

    With ``copy=False`` payloads are memoryviews into ``data`` (no copy of
    large tensors); they compare equal to the corresponding ``bytes``.
    """
    if isinstance(data, SerializedStream):
        data = data.data
    records, _ = _parse(memoryview(data), with_payloads=True, copy=copy)
    return records


@dataclass(frozen=True)
class AlignedSplit:
    prefix_len: int
    suffix_len: int
    alignment: int = DEFAULT_ALIGNMENT

    @property
    def total(self) -> int:
        return self.prefix_len + self.suffix_len


def check_alignment(alignment: int) -> None:
    if alignment < 512 or alignment & (alignment - 1):
        raise ValueError(f"alignment must be a power of two >= 512, got {alignment}")


def split_aligned(total: int, alignment: int = DEFAULT_ALIGNMENT) -> AlignedSplit:
    check_alignment(alignment)
    if total < 0:
        raise ValueError("total must be >= 0")
    prefix = total & ~(alignment - 1)
    return AlignedSplit(prefix, total - prefix, alignment)


# --- shard manifests --------------------------------------------------------


@dataclass(frozen=True)
class ShardEntry:
    writer_id: int
    offset: int
    length: int
    crc32: int


@dataclass
class ShardManifest:
    total_bytes: int
    alignment: int = DEFAULT_ALIGNMENT
    shards: list[ShardEntry] = field(default_factory=list)
    format_version: int = MANIFEST_VERSION

    def validate(self) -> None:
        pos = 0
        for i, shard in enumerate(self.shards):
            if shard.length < 0:
                raise ManifestError(f"shard {i} has negative length")
            if shard.offset != pos:
                kind = "gap" if shard.offset > pos else "overlap"
                raise ManifestError(f"{kind} at shard {i} (writer {shard.writer_id}): offset {shard.offset}, expected {pos}")
            pos += shard.length
        if pos != self.total_bytes:
            raise ManifestError(f"shards cover {pos} bytes, manifest says {self.total_bytes}")

    def to_json(self) -> str:
        doc = {
            "version": self.format_version,
            "total_bytes": self.total_bytes,
            "alignment": self.alignment,
            "shards": [
                {"writer_id": s.writer_id, "offset": s.offset, "length": s.length, "crc32": s.crc32}
                for s in self.shards
            ],
        }
        return json.dumps(doc, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ShardManifest":
        try:
            doc = json.loads(text)
            shards = [
                ShardEntry(int(s["writer_id"]), int(s["offset"]), int(s["length"]), int(s["crc32"]))
                for s in doc["shards"]
            ]
            manifest = cls(int(doc["total_bytes"]), int(doc["alignment"]), shards, int(doc["version"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"malformed manifest: {exc}") from None
        if manifest.format_version != MANIFEST_VERSION:
            raise ManifestError(f"unsupported manifest version {manifest.format_version}")
        return manifest

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ShardManifest":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise LoadError(f"cannot read manifest {path}: {exc}") from exc
        return cls.from_json(text)


def manifest_path(stem: str | os.PathLike) -> Path:
    return Path(f"{os.fspath(stem)}.manifest.json")


def shard_path(stem: str | os.PathLike, index: int, count: int) -> Path:
    return Path(f"{os.fspath(stem)}.shard-{index}-of-{count}")


def stem_of(manifest_file: str | os.PathLike) -> str:
    name = os.fspath(manifest_file)
    suffix = ".manifest.json"
    if not name.endswith(suffix):
        raise ManifestError(f"manifest file name must end with {suffix!r}: {name}")
    return name[: -len(suffix)]


def crc32(data) -> int:
    return zlib.crc32(data) & 0xFFFFFFFF


def assemble(shards: Sequence[bytes], manifest: ShardManifest) -> SerializedStream:
    """Concatenate shard payloads in offset order after checking each CRC.

    Works at the byte level only; ``record_offsets`` of the result is left
    empty (use ``SerializedStream.from_bytes`` to recover it).
    """
    manifest.validate()
    if len(shards) != len(manifest.shards):
        raise ManifestError(f"got {len(shards)} shards, manifest lists {len(manifest.shards)}")
    out = bytearray(manifest.total_bytes)
    for data, entry in zip(shards, manifest.shards):
        if len(data) != entry.length:
            raise CorruptionError(
                f"shard of writer {entry.writer_id} is {len(data)} bytes, expected {entry.length}", entry.writer_id
            )
        if crc32(data) != entry.crc32:
            raise CorruptionError(f"CRC32 mismatch in shard of writer {entry.writer_id}", entry.writer_id)
        out[entry.offset : entry.offset + entry.length] = data
    return SerializedStream(bytes(out))


def _read_shard(path: Path, index: int, entry: ShardEntry, dest: memoryview) -> None:
    try:
        with open(path, "rb", buffering=0) as f:
            got = f.readinto(dest)
            extra = f.read(1)
    except FileNotFoundError:
        raise LoadError(f"missing shard {index} ({path})", index) from None
    except OSError as exc:
        raise LoadError(f"cannot read shard {index} ({path}): {exc}", index) from exc
    if got != entry.length or extra:
        raise CorruptionError(f"shard {index} of writer {entry.writer_id} has wrong length", entry.writer_id)
    if crc32(dest) != entry.crc32:
        raise CorruptionError(f"CRC32 mismatch in shard {index} of writer {entry.writer_id}", entry.writer_id)


def read_sharded(manifest_file: str | os.PathLike, reader_count: int = 1) -> bytearray:
    """Read and verify every shard listed in a manifest, returning the stream bytes.

    Shards are read straight into their slot of one output buffer; up to
    ``reader_count`` shards are read at a time.
    """
    if reader_count < 1:
        raise ValueError("reader_count must be >= 1")
    manifest = ShardManifest.load(manifest_file)
    manifest.validate()
    stem = stem_of(manifest_file)
    k = len(manifest.shards)
    out = bytearray(manifest.total_bytes)
    view = memoryview(out)
    jobs = [
        (shard_path(stem, i, k), i, e, view[e.offset : e.offset + e.length]) for i, e in enumerate(manifest.shards)
    ]
    if reader_count == 1 or k <= 1:
        for job in jobs:
            _read_shard(*job)
    else:
        with ThreadPoolExecutor(max_workers=min(reader_count, k)) as pool:
            futures = [pool.submit(_read_shard, *job) for job in jobs]
            for fut in futures:
                fut.result()
    view.release()
    return out


def load_parallel(manifest_file: str | os.PathLike, reader_count: int = 1, copy: bool = True) -> list[TensorRecord]:
    data = read_sharded(manifest_file, reader_count)
    return deserialize(data, copy=copy)
