"""Checkpoint persistence engine: aligned staged writes, byte-granular
sharding across data-parallel writers, and checkpoint/training pipelining."""

from fastckpt.ckpt_format import (
    AlignedSplit,
    CheckpointError,
    CorruptionError,
    DType,
    FormatError,
    LoadError,
    ManifestError,
    SerializedStream,
    ShardManifest,
    TensorRecord,
    assemble,
    deserialize,
    load_parallel,
    serialize,
    split_aligned,
)
from fastckpt.partition import (
    PartitionPlan,
    PlanError,
    Topology,
    WriterStrategy,
    balance,
    plan,
    select_writers,
)
from fastckpt.perf_model import (
    IterationTiming,
    ModelProfile,
    RecoverySpec,
    estimate_checkpoint_bytes,
    recovery_overhead,
    required_bandwidth,
)
from fastckpt.pipeline_sim import CkptTask, SimResult, TrainConfig, gas_sweep, run_live, simulate
from fastckpt.write_engine import (
    EngineStats,
    PendingQueue,
    StagingBuffer,
    WriteMode,
    bench_write,
    write_checkpoint,
    write_shards,
)

__all__ = [
    "AlignedSplit",
    "CheckpointError",
    "CkptTask",
    "CorruptionError",
    "DType",
    "EngineStats",
    "FormatError",
    "IterationTiming",
    "LoadError",
    "ManifestError",
    "ModelProfile",
    "PartitionPlan",
    "PendingQueue",
    "PlanError",
    "RecoverySpec",
    "SerializedStream",
    "ShardManifest",
    "SimResult",
    "StagingBuffer",
    "TensorRecord",
    "Topology",
    "TrainConfig",
    "WriteMode",
    "WriterStrategy",
    "assemble",
    "balance",
    "bench_write",
    "deserialize",
    "estimate_checkpoint_bytes",
    "gas_sweep",
    "load_parallel",
    "plan",
    "recovery_overhead",
    "required_bandwidth",
    "run_live",
    "select_writers",
    "serialize",
    "simulate",
    "split_aligned",
    "write_checkpoint",
    "write_shards",
]

__version__ = "0.1.0"
