"""Communication-free partitioning of a serialized checkpoint across writers.

Every rank evaluates :func:`plan` locally with the same inputs during setup,
so all ranks agree on who writes which byte range without exchanging any
messages.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from itertools import accumulate, zip_longest
from typing import Sequence

DGX2_SSD_WRITE_BW = 24.8e9


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class Topology:
    node_count: int = 1
    sockets_per_node: int = 1
    ranks_per_node: int = 1
    ssd_write_bw_per_node: float = DGX2_SSD_WRITE_BW

    def __post_init__(self):
        if self.node_count < 1 or self.sockets_per_node < 1:
            raise PlanError("node_count and sockets_per_node must be >= 1")
        if self.ranks_per_node < self.sockets_per_node:
            raise PlanError("ranks_per_node must be >= sockets_per_node")

    @property
    def world_size(self) -> int:
        return self.node_count * self.ranks_per_node

    def node_of(self, rank: int) -> int:
        return rank // self.ranks_per_node

    def socket_of(self, rank: int) -> int:
        # equals local // (ranks_per_node / sockets_per_node) when it divides evenly
        local = rank % self.ranks_per_node
        return local * self.sockets_per_node // self.ranks_per_node

    def location(self, rank: int) -> tuple[int, int]:
        return self.node_of(rank), self.socket_of(rank)


class StrategyKind(enum.Enum):
    REPLICA = "replica"
    SOCKET = "socket"
    FIXED = "fixed"


@dataclass(frozen=True)
class WriterStrategy:
    kind: StrategyKind = StrategyKind.REPLICA
    k: int | None = None

    def __post_init__(self):
        if self.kind is StrategyKind.FIXED and (self.k is None or self.k < 1):
            raise PlanError("Fixed strategy needs k >= 1")

    @classmethod
    def replica(cls) -> "WriterStrategy":
        return cls(StrategyKind.REPLICA)

    @classmethod
    def socket(cls) -> "WriterStrategy":
        return cls(StrategyKind.SOCKET)

    @classmethod
    def fixed(cls, k: int) -> "WriterStrategy":
        return cls(StrategyKind.FIXED, k)

    @classmethod
    def parse(cls, text: str) -> "WriterStrategy":
        """Parse ``replica``, ``socket`` or ``fixed:K``."""
        name, _, arg = text.strip().lower().partition(":")
        try:
            kind = StrategyKind(name)
        except ValueError:
            raise PlanError(f"unknown writer strategy {text!r}") from None
        if kind is StrategyKind.FIXED:
            try:
                return cls.fixed(int(arg))
            except ValueError:
                raise PlanError(f"fixed strategy needs an integer count, got {text!r}") from None
        if arg:
            raise PlanError(f"strategy {name} takes no argument")
        return cls(kind)

    def __str__(self) -> str:
        return f"fixed:{self.k}" if self.kind is StrategyKind.FIXED else self.kind.value


@dataclass(frozen=True)
class Assignment:
    rank: int
    offset: int
    length: int

    def __iter__(self):
        return iter((self.rank, self.offset, self.length))


@dataclass(frozen=True)
class PartitionPlan:
    total_bytes: int
    assignments: tuple[Assignment, ...] = field(default_factory=tuple)

    @property
    def writers(self) -> list[int]:
        return [a.rank for a in self.assignments]

    def range_of(self, rank: int) -> tuple[int, int] | None:
        """The [start, end) byte range ``rank`` writes, or None for non-writers."""
        for a in self.assignments:
            if a.rank == rank:
                return a.offset, a.offset + a.length
        return None

    def to_rows(self) -> list[dict]:
        return [{"writer_id": a.rank, "offset": a.offset, "length": a.length} for a in self.assignments]

    def to_json(self) -> str:
        return json.dumps({"total_bytes": self.total_bytes, "assignments": self.to_rows()}, indent=2)


def _check_ranks(dp_ranks: Sequence[int], topo: Topology) -> list[int]:
    ranks = sorted(dp_ranks)
    if not ranks:
        raise PlanError("dp_ranks must not be empty")
    if len(set(ranks)) != len(ranks):
        raise PlanError("dp_ranks contains duplicates")
    if ranks[0] < 0 or ranks[-1] >= topo.world_size:
        raise PlanError(f"dp_ranks must lie in [0, {topo.world_size}) for this topology")
    return ranks


def _socket_groups(ranks: list[int], topo: Topology) -> list[list[int]]:
    groups: dict[tuple[int, int], list[int]] = {}
    for r in ranks:
        groups.setdefault(topo.location(r), []).append(r)
    return [groups[key] for key in sorted(groups)]


def select_writers(dp_ranks: Sequence[int], strategy: WriterStrategy, topo: Topology) -> list[int]:
    """Choose which data-parallel ranks write, in ascending rank order.

    Socket picks the lowest rank on every occupied (node, socket). Fixed(k)
    walks the sockets round-robin: first the Socket choice, then the
    second-lowest rank of each socket, and so on, stopping after k ranks.
    """
    ranks = _check_ranks(dp_ranks, topo)
    if strategy.kind is StrategyKind.REPLICA:
        return ranks
    groups = _socket_groups(ranks, topo)
    if strategy.kind is StrategyKind.SOCKET:
        return sorted(g[0] for g in groups)
    if strategy.k > len(ranks):
        raise PlanError(f"fixed:{strategy.k} needs at least {strategy.k} DP ranks, have {len(ranks)}")
    order = [r for rnd in zip_longest(*groups) for r in rnd if r is not None]
    return sorted(order[: strategy.k])


def balance(total: int, k: int) -> list[int]:
    """Split ``total`` bytes into ``k`` lengths differing by at most one."""
    if k < 1:
        raise PlanError("k must be >= 1")
    if total < 0:
        raise PlanError("total must be >= 0")
    q, r = divmod(total, k)
    return [q + 1] * r + [q] * (k - r)


def plan(total: int, dp_ranks: Sequence[int], strategy: WriterStrategy, topo: Topology) -> PartitionPlan:
    writers = select_writers(dp_ranks, strategy, topo)
    lengths = balance(total, len(writers))
    offsets = [0, *accumulate(lengths)][:-1]
    return PartitionPlan(total, tuple(Assignment(w, o, n) for w, o, n in zip(writers, offsets, lengths)))
