import struct
import zlib

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fastckpt.ckpt_format import (
    AlignedSplit,
    CorruptionError,
    DType,
    FormatError,
    LoadError,
    ManifestError,
    SerializedStream,
    ShardEntry,
    ShardManifest,
    TensorRecord,
    assemble,
    crc32,
    deserialize,
    load_parallel,
    manifest_path,
    serialize,
    shard_path,
    split_aligned,
)
from fastckpt.partition import Topology, WriterStrategy, plan
from fastckpt.write_engine import StagingBuffer, write_shards


def test_single_f32_record_layout_by_hand():
    payload = struct.pack("<2f", 1.0, -2.0)
    stream = serialize([TensorRecord("w", DType.f32, (2,), payload)])
    # magic+version+count, name_len, name, dtype, ndim, dim, payload_len, payload, crc
    assert 16 + 2 + 1 + 1 + 1 + 8 + 8 + 8 + 4 == 49
    body = (
        b"FPCK"
        + (1).to_bytes(4, "little")
        + (1).to_bytes(8, "little")
        + (1).to_bytes(2, "little")
        + b"w"
        + bytes([1, 1])
        + (2).to_bytes(8, "little")
        + (8).to_bytes(8, "little")
        + payload
    )
    expected = body + zlib.crc32(body).to_bytes(4, "little")
    assert len(stream) == 49
    assert bytes(stream.data) == expected
    assert stream.record_offsets == [(16, 29)]


def test_empty_record_list():
    stream = serialize([])
    assert len(stream) == 16 + 4
    assert stream.record_offsets == []
    assert deserialize(stream) == []


def test_two_records_keep_order():
    a = TensorRecord("a", DType.i8, (3,), b"\x01\x02\x03")
    b = TensorRecord("b", DType.i64, (1, 1), b"\xff" * 8)
    stream = serialize([a, b])
    (s0, l0), (s1, l1) = stream.record_offsets
    assert s0 < s1 and s0 + l0 == s1
    assert s1 + l1 == len(stream) - 4
    assert deserialize(stream) == [a, b]
    assert bytes(stream.data).index(b"\x01\x02\x03") < bytes(stream.data).index(b"\xff" * 8)


def test_from_bytes_recovers_offsets():
    recs = [TensorRecord(f"t{i}", DType.f16, (i,), bytes(2 * i)) for i in range(4)]
    stream = serialize(recs)
    assert SerializedStream.from_bytes(bytes(stream.data)).record_offsets == stream.record_offsets


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(name="x", dtype=DType.f32, shape=(3,), payload=b"\0" * 8),
        dict(name="", dtype=DType.f32, shape=(1,), payload=b"\0" * 4),
        dict(name="x" * 70000, dtype=DType.i8, shape=(1,), payload=b"\0"),
        dict(name="x", dtype=9, shape=(1,), payload=b"\0"),
    ],
)
def test_invalid_records_rejected(kwargs):
    with pytest.raises(FormatError):
        TensorRecord(**kwargs)


def test_deserialize_detects_damage():
    data = bytearray(serialize([TensorRecord("w", DType.f32, (2,), b"\0" * 8)]).data)
    bad = bytearray(data)
    bad[30] ^= 0x01
    with pytest.raises(CorruptionError):
        deserialize(bytes(bad))
    bad = bytearray(data)
    bad[0:4] = b"XXXX"
    with pytest.raises(FormatError):
        deserialize(bytes(bad))
    with pytest.raises(FormatError):
        deserialize(b"FPCK")


def test_zero_copy_deserialize():
    rec = TensorRecord("w", DType.f64, (4,), bytes(range(32)))
    out = deserialize(serialize([rec]), copy=False)
    assert isinstance(out[0].payload, memoryview)
    assert out == [rec]


# property-generated records, shared with the acceptance suite
names = st.text(st.characters(blacklist_categories=("Cs",)), min_size=1, max_size=12)


@st.composite
def records(draw):
    dtype = draw(st.sampled_from(list(DType)))
    shape = tuple(draw(st.lists(st.integers(0, 5), max_size=4)))
    n = 1
    for d in shape:
        n *= d
    payload = draw(st.binary(min_size=n * dtype.itemsize, max_size=n * dtype.itemsize))
    return TensorRecord(draw(names), dtype, shape, payload)


record_lists = st.lists(records(), max_size=6)


@settings(max_examples=200)
@given(record_lists)
def test_round_trip_property(recs):
    stream = serialize(recs)
    assert deserialize(stream) == recs
    assert serialize(deserialize(stream)).data == stream.data


@given(record_lists, record_lists)
def test_serialization_injective(a, b):
    assert (serialize(a).data == serialize(b).data) == (a == b)


@pytest.mark.parametrize("total, prefix, suffix", [(1030, 1024, 6), (1024, 1024, 0), (0, 0, 0), (511, 0, 511)])
def test_split_aligned_examples(total, prefix, suffix):
    assert split_aligned(total, 512) == AlignedSplit(prefix, suffix, 512)


def test_split_aligned_gib_checkpoint():
    s = split_aligned(17 * 2**30 + 12345, 512)
    assert s.suffix_len < 512
    assert s.suffix_len / s.total < 1e-7


@given(st.integers(0, 2**40 - 1), st.sampled_from([512, 1024, 4096, 1 << 20]))
def test_split_aligned_property(total, alignment):
    s = split_aligned(total, alignment)
    assert s.prefix_len + s.suffix_len == total
    assert s.suffix_len < alignment
    assert s.prefix_len % alignment == 0


@pytest.mark.parametrize("alignment", [0, 256, 513, 1000])
def test_split_aligned_bad_alignment(alignment):
    with pytest.raises(ValueError):
        split_aligned(100, alignment)


def _manifest(data: bytes, lengths):
    shards, entries, pos = [], [], 0
    for i, n in enumerate(lengths):
        shards.append(data[pos : pos + n])
        entries.append(ShardEntry(i, pos, n, crc32(data[pos : pos + n])))
        pos += n
    return shards, ShardManifest(len(data), 512, entries)


def test_assemble_three_shards():
    data = b"0123456789"
    shards, manifest = _manifest(data, [4, 3, 3])
    assert bytes(assemble(shards, manifest).data) == data


def test_assemble_single_shard_identity():
    data = bytes(serialize([TensorRecord("x", DType.i8, (5,), b"abcde")]).data)
    shards, manifest = _manifest(data, [len(data)])
    assert bytes(assemble(shards, manifest).data) == data


def test_assemble_names_corrupt_writer():
    data = bytes(serialize([TensorRecord("x", DType.i8, (10,), bytes(10))]).data)
    shards, manifest = _manifest(data, [10, 10, len(data) - 20])
    bad = bytearray(shards[1])
    bad[3] ^= 0x10
    shards[1] = bytes(bad)
    with pytest.raises(CorruptionError) as err:
        assemble(shards, manifest)
    assert err.value.writer_id == 1


def test_manifest_gap_and_overlap():
    with pytest.raises(ManifestError, match="gap"):
        ShardManifest(10, 512, [ShardEntry(0, 0, 4, 0), ShardEntry(1, 5, 5, 0)]).validate()
    with pytest.raises(ManifestError, match="overlap"):
        ShardManifest(10, 512, [ShardEntry(0, 0, 4, 0), ShardEntry(1, 3, 7, 0)]).validate()
    with pytest.raises(ManifestError):
        ShardManifest(11, 512, [ShardEntry(0, 0, 4, 0), ShardEntry(1, 4, 6, 0)]).validate()


def test_manifest_json_keys_and_round_trip():
    m = ShardManifest(10, 512, [ShardEntry(0, 0, 4, 11), ShardEntry(2, 4, 6, 22)])
    import json

    doc = json.loads(m.to_json())
    assert set(doc) == {"version", "total_bytes", "alignment", "shards"}
    assert doc["shards"][1] == {"writer_id": 2, "offset": 4, "length": 6, "crc32": 22}
    assert ShardManifest.from_json(m.to_json()) == m
    with pytest.raises(ManifestError):
        ShardManifest.from_json('{"version": 1}')


@pytest.fixture
def saved(scratch):
    recs = [TensorRecord(f"layer{i}", DType.f32, (1000 + i,), bytes(range(256)) * 15 + bytes(4 * (1000 + i) - 3840)) for i in range(5)]
    stream = serialize(recs)
    topo = Topology(2, 2, 2)
    p = plan(len(stream), range(4), WriterStrategy.replica(), topo)
    stem = scratch / "model"
    write_shards(stream, stem, [tuple(a) for a in p.assignments], "double", StagingBuffer(4096))
    return recs, stem


@pytest.mark.parametrize("readers", [1, 4])
def test_load_parallel_round_trip(saved, readers):
    recs, stem = saved
    assert load_parallel(manifest_path(stem), readers) == recs


def test_load_parallel_missing_shard(saved):
    _, stem = saved
    shard_path(stem, 2, 4).unlink()
    with pytest.raises(LoadError) as err:
        load_parallel(manifest_path(stem), 4)
    assert err.value.shard == 2
    assert "shard 2" in str(err.value)


def test_load_parallel_flipped_byte(saved):
    _, stem = saved
    p = shard_path(stem, 3, 4)
    raw = bytearray(p.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    p.write_bytes(raw)
    with pytest.raises(CorruptionError) as err:
        load_parallel(manifest_path(stem), 2)
    assert err.value.writer_id == 3
