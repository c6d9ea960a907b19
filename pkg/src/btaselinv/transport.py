"""Message passing between ranks.

:class:`InProcessTransport` runs ``P`` ranks as threads of the current
process. Each ordered pair of ranks has a bounded FIFO channel, and payloads
are deep-copied on send, so ranks never share mutable state. Collectives
are written once on top of point-to-point ``send``/``recv`` in
:class:`RankContext`; :class:`MPIContext` provides the same interface over
an ``mpi4py`` communicator.

Environment variables
---------------------
SERINV_TIMEOUT
    Seconds a blocking operation waits before raising
    :class:`~btaselinv.errors.TransportFailure` (default 60).
SERINV_CHANNEL_CAPACITY
    Maximum number of in-flight messages per rank pair (default 4).
SERINV_TRANSPORT
    ``inprocess`` (default) or ``cluster``; read by :func:`make_transport`.
"""

from __future__ import annotations

import copy
import os
import queue
import threading
import time
from typing import Any, Callable, Sequence

import numpy as np

from .errors import ShapeMismatch, TransportFailure
from .kernels import KernelLedger

__all__ = [
    "RankContext",
    "InProcessTransport",
    "MPIContext",
    "MPITransport",
    "make_transport",
    "reduce_sum",
    "gather_blocks",
    "scatter_blocks",
    "bcast",
    "barrier",
    "default_timeout",
    "default_capacity",
]

_POLL = 0.05


def default_timeout() -> float:
    return float(os.environ.get("SERINV_TIMEOUT", "60"))


def default_capacity() -> int:
    return max(1, int(os.environ.get("SERINV_CHANNEL_CAPACITY", "4")))


class _CollectivesMixin:
    """Collectives expressed with ``send``/``recv``; needs ``rank`` and ``size``."""

    rank: int
    size: int

    def reduce_sum(self, block: np.ndarray, root: int = 0) -> np.ndarray | None:
        """Elementwise sum of every rank's block, delivered at ``root``.

        Contributions are added in rank-ascending order starting from rank
        0's block, so the result is reproducible run to run.
        """
        block = np.asarray(block, dtype=np.float64)
        parts = self.gather_blocks(block, root)
        if self.rank != root:
            return None
        total = parts[0].copy()
        for r, part in enumerate(parts[1:], start=1):
            if part.shape != total.shape:
                raise ShapeMismatch(f"rank {r} contributed shape {part.shape}, expected {total.shape}")
            total = total + part
        return total

    def gather_blocks(self, obj: Any, root: int = 0) -> list | None:
        """Collect one object per rank at ``root``, ordered by rank."""
        if self.rank != root:
            self.send(root, obj)
            return None
        out = []
        for r in range(self.size):
            out.append(copy.deepcopy(obj) if r == root else self.recv(r))
        return out

    def scatter_blocks(self, objs: Sequence | None, root: int = 0) -> Any:
        """Send ``objs[r]`` from ``root`` to every rank ``r``; return own item."""
        if self.rank == root:
            if objs is None or len(objs) != self.size:
                raise ShapeMismatch(f"scatter needs exactly {self.size} items")
            for r in range(self.size):
                if r != root:
                    self.send(r, objs[r])
            return copy.deepcopy(objs[root])
        return self.recv(root)

    def bcast(self, obj: Any, root: int = 0) -> Any:
        """Return ``root``'s object on every rank."""
        if self.rank == root:
            for r in range(self.size):
                if r != root:
                    self.send(r, obj)
            return copy.deepcopy(obj)
        return self.recv(root)


class _World:
    """Shared state of one in-process group of ranks."""

    def __init__(self, size: int, timeout: float, capacity: int, abort: threading.Event):
        self.size = size
        self.timeout = timeout
        self.abort = abort
        self.channels = {(s, d): queue.Queue(maxsize=capacity) for s in range(size) for d in range(size) if s != d}
        self.capacity = capacity
        self._children: dict[tuple[int, int], "_World"] = {}
        self._lock = threading.Lock()

    def child(self, key: tuple[int, int]) -> "_World":
        with self._lock:
            if key not in self._children:
                self._children[key] = _World(key[1], self.timeout, self.capacity, self.abort)
            return self._children[key]


class RankContext(_CollectivesMixin):
    """Rank-private handle to an in-process group.

    Attributes
    ----------
    rank : int
        Rank id in ``[0, size)``.
    size : int
        Number of ranks in the group.
    """

    def __init__(self, world: _World, rank: int):
        self._world = world
        self.rank = rank
        self.size = world.size
        self._splits = 0

    def _check_abort(self) -> None:
        if self._world.abort.is_set():
            raise TransportFailure(f"rank {self.rank}: aborted because a peer failed")

    def _wait(self, op: Callable[[float], Any], what: str) -> Any:
        deadline = time.monotonic() + self._world.timeout
        while True:
            self._check_abort()
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise TransportFailure(f"rank {self.rank}: timed out on {what}")
            try:
                return op(min(_POLL, remaining))
            except (queue.Full, queue.Empty):
                continue

    def send(self, dst: int, obj: Any) -> None:
        """Send a deep copy of ``obj`` to rank ``dst``."""
        if not 0 <= dst < self.size or dst == self.rank:
            raise ValueError(f"invalid destination rank {dst}")
        chan = self._world.channels[(self.rank, dst)]
        payload = copy.deepcopy(obj)
        self._wait(lambda t: chan.put(payload, timeout=t), f"send to {dst}")

    def recv(self, src: int) -> Any:
        """Receive the next object sent by rank ``src``."""
        if not 0 <= src < self.size or src == self.rank:
            raise ValueError(f"invalid source rank {src}")
        chan = self._world.channels[(src, self.rank)]
        return self._wait(lambda t: chan.get(timeout=t), f"recv from {src}")

    def barrier(self) -> None:
        """Block until every rank of the group has arrived."""
        # gather-then-release over the channels, so peer failure and the
        # timeout are handled by the same polling loop as send/recv
        if self.size == 1:
            return
        self.gather_blocks(None, 0)
        self.bcast(None, 0)

    def subgroup(self, size: int) -> "RankContext | None":
        """Split off the first ``size`` ranks into a new group.

        Every rank of the current group must call this in the same order.
        Ranks ``>= size`` receive ``None``.
        """
        if not 1 <= size <= self.size:
            raise ValueError(f"subgroup size {size} outside [1, {self.size}]")
        key = (self._splits, size)
        self._splits += 1
        if self.rank >= size:
            return None
        return RankContext(self._world.child(key), self.rank)


class InProcessTransport:
    """Run a rank function on ``P`` threads connected by bounded channels.

    Parameters
    ----------
    P : int
        Number of ranks.
    timeout : float, optional
        Seconds before a blocked operation fails; default from the
        environment.
    capacity : int, optional
        Channel capacity per rank pair; default from the environment.

    Attributes
    ----------
    ledgers : list of KernelLedger
        Per-rank kernel ledgers of the most recent :meth:`run`.
    """

    name = "inprocess"

    def __init__(self, P: int, timeout: float | None = None, capacity: int | None = None):
        if P < 1:
            raise ValueError("P must be >= 1")
        self.P = P
        self.timeout = default_timeout() if timeout is None else float(timeout)
        self.capacity = default_capacity() if capacity is None else int(capacity)
        self.ledgers: list[KernelLedger] = []

    def run(self, fn: Callable[..., Any], *args, **kwargs) -> list:
        """Call ``fn(ctx, *args, **kwargs)`` on every rank and collect results.

        If a rank raises, its peers are released with
        :class:`TransportFailure` and the first original exception is
        re-raised here.
        """
        abort = threading.Event()
        world = _World(self.P, self.timeout, self.capacity, abort)
        results: list[Any] = [None] * self.P
        errors: list[BaseException | None] = [None] * self.P
        self.ledgers = [KernelLedger() for _ in range(self.P)]

        def body(rank: int) -> None:
            ctx = RankContext(world, rank)
            try:
                with self.ledgers[rank].active():
                    results[rank] = fn(ctx, *args, **kwargs)
            except BaseException as exc:  # noqa: BLE001 - re-raised by run()
                errors[rank] = exc
                abort.set()

        if self.P == 1:
            body(0)
        else:
            threads = [threading.Thread(target=body, args=(r,), name=f"rank-{r}") for r in range(self.P)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
        failed = [e for e in errors if e is not None]
        if failed:
            primary = [e for e in failed if not isinstance(e, TransportFailure)]
            raise (primary or failed)[0]
        return results


class MPIContext(_CollectivesMixin):
    """Rank handle over an ``mpi4py`` communicator with the same contract."""

    def __init__(self, comm):
        self.comm = comm
        self.rank = comm.Get_rank()
        self.size = comm.Get_size()

    def send(self, dst: int, obj: Any) -> None:
        self.comm.send(obj, dest=dst, tag=0)

    def recv(self, src: int) -> Any:
        return self.comm.recv(source=src, tag=0)

    def barrier(self) -> None:
        self.comm.Barrier()

    def subgroup(self, size: int) -> "MPIContext | None":
        if not 1 <= size <= self.size:
            raise ValueError(f"subgroup size {size} outside [1, {self.size}]")
        member = self.rank < size
        sub = self.comm.Split(0 if member else 1, self.rank)
        return MPIContext(sub) if member else None


class MPITransport:
    """Run a rank function on the ranks of an MPI communicator.

    World size comes from the launcher (``mpirun``/``srun``) through
    ``MPI.COMM_WORLD``. :meth:`run` returns a list with this process's
    result at its rank index and ``None`` elsewhere.
    """

    name = "cluster"

    def __init__(self, comm=None):
        if comm is None:
            from mpi4py import MPI

            comm = MPI.COMM_WORLD
        self.comm = comm
        self.P = comm.Get_size()
        self.ledgers: list[KernelLedger] = []

    def run(self, fn: Callable[..., Any], *args, **kwargs) -> list:
        ctx = MPIContext(self.comm)
        led = KernelLedger()
        with led.active():
            value = fn(ctx, *args, **kwargs)
        self.ledgers = [led]
        out = [None] * self.P
        out[ctx.rank] = value
        return out


def make_transport(P: int, kind: str | None = None):
    """Build the transport named by ``kind`` or ``SERINV_TRANSPORT``."""
    kind = kind or os.environ.get("SERINV_TRANSPORT", "inprocess")
    if kind == "inprocess":
        return InProcessTransport(P)
    if kind == "cluster":
        t = MPITransport()
        if t.P != P:
            raise TransportFailure(f"launcher started {t.P} ranks but {P} were requested")
        return t
    raise ValueError(f"unknown transport {kind!r}")


def reduce_sum(ctx, block, root: int = 0):
    """Module-level alias of ``ctx.reduce_sum``."""
    return ctx.reduce_sum(block, root)


def gather_blocks(ctx, blocks, root: int = 0):
    """Module-level alias of ``ctx.gather_blocks``."""
    return ctx.gather_blocks(blocks, root)


def scatter_blocks(ctx, blocks, root: int = 0):
    """Module-level alias of ``ctx.scatter_blocks``."""
    return ctx.scatter_blocks(blocks, root)


def bcast(ctx, obj, root: int = 0):
    """Module-level alias of ``ctx.bcast``."""
    return ctx.bcast(obj, root)


def barrier(ctx) -> None:
    """Module-level alias of ``ctx.barrier``."""
    ctx.barrier()
