"""In-process rank harness.

Ranks are threads sharing one address space. Each ordered (sender, receiver)
pair owns a FIFO mailbox, which gives the reliable in-order transport the
collectives are built on. A watchdog turns collective mismatches (one rank in
a fence, the others gone) into a TimeoutDiagnostic instead of a hang.
"""

from __future__ import annotations

import os
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable

from .errors import HarnessAborted, RankFailure, TimeoutDiagnostic

DEFAULT_WATCHDOG_MS = 30_000
_POLL_S = 0.05
_COLL_TAG = -1


def default_watchdog_s() -> float:
    return int(os.environ.get("STORWIN_WATCHDOG_MS", DEFAULT_WATCHDOG_MS)) / 1000.0


def default_ranks() -> int:
    return int(os.environ.get("STORWIN_RANKS", 1))


class WindowRegistry:
    """win_id -> per-rank descriptor table, shared by every rank of a group."""

    def __init__(self, group_size: int):
        self.group_size = group_size
        self._tables: dict[int, list] = {}
        self._next_id = 1
        self._lock = threading.Lock()

    def new_id(self) -> int:
        with self._lock:
            win_id = self._next_id
            self._next_id += 1
            return win_id

    def register(self, win_id: int, rank: int, descriptor) -> None:
        with self._lock:
            table = self._tables.setdefault(win_id, [None] * self.group_size)
            table[rank] = descriptor

    def deregister(self, win_id: int, rank: int) -> None:
        with self._lock:
            table = self._tables.get(win_id)
            if table is None:
                return
            table[rank] = None
            if all(d is None for d in table):
                del self._tables[win_id]

    def lookup(self, win_id: int, rank: int):
        # Reads are lock-free: tables are only replaced under the lock, and a
        # win_id is stable between collective allocate and collective free.
        table = self._tables.get(win_id)
        return None if table is None else table[rank]

    def live(self) -> list[int]:
        with self._lock:
            return sorted(self._tables)

    def descriptors(self) -> list:
        with self._lock:
            return [d for t in self._tables.values() for d in t if d is not None]

    def __len__(self) -> int:
        return len(self._tables)


class _Group:
    def __init__(self, size: int):
        self.size = size
        self.registry = WindowRegistry(size)
        self.aborted = threading.Event()
        self._barrier = threading.Barrier(size)
        self._mail: dict[tuple[int, int, int], queue.SimpleQueue] = {}
        self._mail_lock = threading.Lock()

    def mailbox(self, src: int, dest: int, tag: int) -> queue.SimpleQueue:
        key = (src, dest, tag)
        box = self._mail.get(key)
        if box is None:
            with self._mail_lock:
                box = self._mail.setdefault(key, queue.SimpleQueue())
        return box

    def abort(self) -> None:
        self.aborted.set()
        self._barrier.abort()


@dataclass
class RankContext:
    rank: int
    group_size: int
    _group: _Group = field(repr=False)

    @property
    def registry(self) -> WindowRegistry:
        return self._group.registry

    @property
    def aborted(self) -> threading.Event:
        return self._group.aborted

    def check_aborted(self) -> None:
        if self._group.aborted.is_set():
            raise HarnessAborted(f"rank {self.rank}: group aborted")

    def send(self, dest: int, msg: Any, tag: int = 0) -> None:
        self._group.mailbox(self.rank, dest, tag).put(msg)

    def recv(self, src: int, tag: int = 0) -> Any:
        box = self._group.mailbox(src, self.rank, tag)
        while True:
            try:
                return box.get(timeout=_POLL_S)
            except queue.Empty:
                self.check_aborted()

    def barrier(self) -> None:
        try:
            self._group._barrier.wait()
        except threading.BrokenBarrierError:
            raise HarnessAborted(f"rank {self.rank}: barrier broken") from None

    def allgather(self, value: Any) -> list:
        for dest in range(self.group_size):
            if dest != self.rank:
                self.send(dest, value, _COLL_TAG)
        return [
            value if src == self.rank else self.recv(src, _COLL_TAG)
            for src in range(self.group_size)
        ]

    def bcast(self, value: Any, root: int = 0) -> Any:
        return self.allgather(value if self.rank == root else None)[root]

    def wait_on(self, cond: threading.Condition, predicate: Callable[[], bool]) -> None:
        """cond.wait_for that gives up when the group aborts. Caller holds cond."""
        while not predicate():
            cond.wait(_POLL_S)
            self.check_aborted()


def barrier(ctx: RankContext) -> None:
    ctx.barrier()


@dataclass
class HarnessResult:
    results: list
    leaked: list[int]
    elapsed_s: float

    @property
    def ok(self) -> bool:
        return not self.leaked


def spawn_ranks(
    nranks: int,
    entry: Callable[[RankContext], Any],
    watchdog_s: float | None = None,
) -> HarnessResult:
    """Run entry(ctx) on `nranks` concurrent ranks and join them.

    Raises RankFailure for the lowest rank whose entry raised (ranks that were
    only knocked out of a collective by the abort are not reported), and
    TimeoutDiagnostic if any rank is still running when the watchdog expires.
    Windows left registered (abandoned without free) are returned in
    `leaked`; their storage mappings are dropped without a final flush.
    """
    if nranks < 1:
        raise ValueError(f"need at least one rank, got {nranks}")
    if watchdog_s is None:
        watchdog_s = default_watchdog_s()

    group = _Group(nranks)
    results: list = [None] * nranks
    errors: dict[int, BaseException] = {}
    done = [threading.Event() for _ in range(nranks)]

    def run(rank: int) -> None:
        ctx = RankContext(rank, nranks, group)
        try:
            results[rank] = entry(ctx)
        except BaseException as exc:  # noqa: BLE001 - propagated via RankFailure
            errors[rank] = exc
            group.abort()
        finally:
            done[rank].set()

    threads = [
        threading.Thread(target=run, args=(r,), name=f"storwin-rank-{r}", daemon=True)
        for r in range(nranks)
    ]
    start = time.perf_counter()
    for t in threads:
        t.start()

    deadline = start + watchdog_s
    for r, ev in enumerate(done):
        ev.wait(max(0.0, deadline - time.perf_counter()))
    running = [r for r, ev in enumerate(done) if not ev.is_set()]
    if running:
        group.abort()
        for ev in done:
            ev.wait(1.0)
        _drop_leaked(group.registry)
        raise TimeoutDiagnostic(running, watchdog_s)

    elapsed = time.perf_counter() - start
    leaked = group.registry.live()
    _drop_leaked(group.registry)

    if errors:
        primary = {r: e for r, e in errors.items() if not isinstance(e, HarnessAborted)}
        pool = primary or errors
        rank = min(pool)
        raise RankFailure(rank, pool[rank]) from pool[rank]
    return HarnessResult(results=results, leaked=leaked, elapsed_s=elapsed)


def _drop_leaked(registry: WindowRegistry) -> None:
    for desc in registry.descriptors():
        abandon = getattr(desc, "_abandon", None)
        if abandon is not None:
            abandon()
