"""Analytical sizing, bandwidth and recovery-cost models."""

from __future__ import annotations

from dataclasses import dataclass, field

# fp16 weights (2) + fp32 master weights, momentum, variance (4 each)
BYTES_PER_PARAM = 14
MAX_BYTES = 2**64 - 1


class SizingError(ValueError):
    pass


class DomainError(ValueError):
    pass


def _as_count(value: float | int, what: str) -> int:
    if isinstance(value, float):
        if not value.is_integer():
            raise SizingError(f"{what} must be integral, got {value!r}")
        value = int(value)
    if value < 0:
        raise SizingError(f"{what} must be >= 0, got {value}")
    return int(value)


def estimate_checkpoint_bytes(param_count: float | int, bytes_per_param: int = BYTES_PER_PARAM) -> int:
    """Checkpoint size in bytes for mixed-precision Adam training.

    ``param_count`` may be given as a float such as ``1.3e9`` as long as it is
    integral; the product is computed with Python integers so it is exact.
    """
    params = _as_count(param_count, "param_count")
    per = _as_count(bytes_per_param, "bytes_per_param")
    total = params * per
    if total > MAX_BYTES:
        raise SizingError(f"checkpoint size {total} overflows 64-bit byte count")
    return total


@dataclass(frozen=True)
class ModelProfile:
    param_count: int
    bytes_per_param: int = BYTES_PER_PARAM
    checkpoint_bytes: int = field(default=-1)

    def __post_init__(self):
        if self.param_count < 0 or self.bytes_per_param < 0:
            raise SizingError("profile fields must be >= 0")
        if self.checkpoint_bytes < 0:
            object.__setattr__(
                self, "checkpoint_bytes", estimate_checkpoint_bytes(self.param_count, self.bytes_per_param)
            )


@dataclass(frozen=True)
class IterationTiming:
    t_forward: float
    t_backward: float
    t_optimizer: float = 0.0
    gas: int = 1

    def __post_init__(self):
        if min(self.t_forward, self.t_backward, self.t_optimizer) < 0:
            raise DomainError("iteration times must be >= 0")
        if self.gas < 1:
            raise DomainError(f"gas must be >= 1, got {self.gas}")

    @property
    def compute_seconds(self) -> float:
        """Forward+backward time of one optimizer step (all micro-steps)."""
        return self.gas * (self.t_forward + self.t_backward)


@dataclass(frozen=True)
class RecoverySpec:
    interval_n: int
    gpu_count_m: int
    iter_time_t: float

    def __post_init__(self):
        if self.interval_n < 1:
            raise DomainError("interval_n must be >= 1")
        if self.gpu_count_m < 1:
            raise DomainError("gpu_count_m must be >= 1")
        if self.iter_time_t < 0:
            raise DomainError("iter_time_t must be >= 0")


def required_bandwidth(checkpoint_bytes: float, timing: IterationTiming) -> float:
    """Write bandwidth (bytes/s) needed for a checkpoint to hide behind the
    forward and backward passes of the next iteration."""
    denom = timing.gas * (timing.t_forward + timing.t_backward)
    if denom <= 0:
        raise DomainError("gas * (t_forward + t_backward) must be > 0")
    return checkpoint_bytes / denom


def recovery_overhead(spec: RecoverySpec) -> float:
    """Expected GPU-seconds lost to recomputation after a failure that lands
    uniformly at random inside a checkpoint interval."""
    return spec.interval_n / 2 * spec.gpu_count_m * spec.iter_time_t
