"""One-sided put / get / accumulate with fence and lock epochs.

Operations are queued on the origin's window handle when issued and applied
to the target when the epoch that contains them is closed: fence for every
target, flush or unlock for one target. The target never participates in
lock epochs. Applying an operation goes through the target window's local
read/write path, so memory, storage and hybrid windows behave identically.
Epoch close gives visibility in the target window; durability of storage
windows is still governed by their flush policy and explicit syncs.

Overlapping writes to the same bytes within one epoch (put/put, put/get,
Replace/anything) are undefined; overlapping Sum accumulates are not.
Likewise a local read of bytes that other ranks target in the current epoch
is unordered with their operations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadElemSize,
    LockHeld,
    NoEpoch,
    NotLocked,
    RangeError,
    RmaError,
    UnknownRank,
)
from .runtime import RankContext
from .window import WindowDescriptor

COMBINERS = ("sum", "replace")
_INT_DTYPES = {4: np.dtype("<i4"), 8: np.dtype("<i8")}


@dataclass
class RmaRequest:
    op: str  # put | get | accumulate
    target_rank: int
    target_disp: int
    elem_size: int
    count: int
    combiner: str | None = None
    origin: object = field(default=None, repr=False)

    @property
    def nbytes(self) -> int:
        return self.count * self.elem_size


def _as_bytes(buf) -> memoryview:
    if isinstance(buf, np.ndarray):
        buf = np.ascontiguousarray(buf)
    return memoryview(buf).cast("B")


def _target(win: WindowDescriptor, rank: int) -> WindowDescriptor:
    win._live()
    ctx = win._ctx
    if not 0 <= rank < ctx.group_size:
        raise UnknownRank(f"rank {rank} outside group of {ctx.group_size}")
    target = ctx.registry.lookup(win.win_id, rank)
    if target is None:
        raise UnknownRank(f"rank {rank} has no part of window {win.win_id}")
    return target


def _issue(win: WindowDescriptor, req: RmaRequest, apply) -> None:
    target = _target(win, req.target_rank)
    if win._epoch is None and req.target_rank not in win._locks:
        raise NoEpoch(f"{req.op} to rank {req.target_rank} outside any epoch")
    if req.target_disp < 0 or req.count < 0:
        raise RangeError(f"negative displacement or count in {req}")
    offset = req.target_disp * target.disp_unit
    if offset + req.nbytes > target.size_bytes:
        raise RangeError(
            f"{req.op} of {req.nbytes} bytes at byte {offset} exceeds rank "
            f"{req.target_rank}'s window of {target.size_bytes} bytes"
        )
    if req.count == 0:
        return
    win._pending.setdefault(req.target_rank, []).append((apply, target, offset))


def put(win: WindowDescriptor, origin, target_rank: int, target_disp: int = 0,
        *, elem_size: int = 1) -> None:
    data = bytes(_as_bytes(origin))
    if len(data) % elem_size:
        raise RangeError(f"{len(data)} origin bytes is not a whole number of {elem_size}-byte elements")
    req = RmaRequest("put", target_rank, target_disp, elem_size, len(data) // elem_size, origin=data)

    def apply(target, offset):
        target.write(offset, data)

    _issue(win, req, apply)


def get(win: WindowDescriptor, out, target_rank: int, target_disp: int = 0,
        *, elem_size: int = 1) -> None:
    """Read target bytes into `out` (a writable buffer), valid after epoch close."""
    dest = _as_bytes(out)
    if dest.readonly:
        raise ValueError("get needs a writable origin buffer")
    if len(dest) % elem_size:
        raise RangeError(f"{len(dest)} origin bytes is not a whole number of {elem_size}-byte elements")
    req = RmaRequest("get", target_rank, target_disp, elem_size, len(dest) // elem_size, origin=out)

    def apply(target, offset):
        dest[:] = target.read(offset, len(dest))

    _issue(win, req, apply)


def accumulate(win: WindowDescriptor, origin, target_rank: int, target_disp: int = 0,
               *, op: str = "sum", elem_size: int | None = None) -> None:
    """Element-wise target <- target (+) origin, atomic per element.

    `sum` treats elements as little-endian two's-complement integers of
    `elem_size` (4 or 8) bytes and wraps on overflow; `replace` stores them.
    """
    if op not in COMBINERS:
        raise RmaError(f"unknown combiner {op!r}; expected one of {COMBINERS}")
    if elem_size is None:
        elem_size = origin.dtype.itemsize if isinstance(origin, np.ndarray) else 8
    if elem_size not in _INT_DTYPES:
        raise BadElemSize(f"accumulate supports 4- or 8-byte elements, not {elem_size}")
    data = bytes(_as_bytes(origin))
    if len(data) % elem_size:
        raise RangeError(f"{len(data)} origin bytes is not a whole number of {elem_size}-byte elements")
    dtype = _INT_DTYPES[elem_size]
    req = RmaRequest("accumulate", target_rank, target_disp, elem_size,
                     len(data) // elem_size, combiner=op, origin=data)

    def apply(target, offset):
        with target._acc_lock:
            if op == "replace":
                target.write(offset, data)
                return
            current = np.frombuffer(target.read(offset, len(data)), dtype=dtype)
            incoming = np.frombuffer(data, dtype=dtype)
            target.write(offset, (current + incoming).tobytes())

    _issue(win, req, apply)


def _complete(win: WindowDescriptor, targets=None) -> None:
    ranks = list(win._pending) if targets is None else [t for t in targets if t in win._pending]
    for rank in ranks:
        for apply, target, offset in win._pending.pop(rank):
            apply(target, offset)


def fence(win: WindowDescriptor, ctx: RankContext | None = None, *, nosucceed: bool = False) -> None:
    """Collective epoch boundary: completes every rank's RMA on this window.

    Each fence closes the current epoch and opens the next; pass
    nosucceed=True on the last fence so the window can be freed.
    """
    ctx = ctx or win._ctx
    win._live()
    if win._locks:
        raise RmaError(f"fence while holding locks on ranks {sorted(win._locks)}")
    _complete(win)
    ctx.barrier()
    win._epoch = None if nosucceed else "fence"


def lock(win: WindowDescriptor, target_rank: int, exclusive: bool = False) -> None:
    target = _target(win, target_rank)
    if target_rank in win._locks:
        raise LockHeld(f"rank {win.rank} already holds a lock on rank {target_rank}")
    if win._epoch is not None:
        raise RmaError("lock requested inside a fence epoch")
    ctx = win._ctx
    with target._access:
        if exclusive:
            ctx.wait_on(target._access,
                        lambda: target._exclusive_holder is None and target._shared_holders == 0)
            target._exclusive_holder = win.rank
        else:
            ctx.wait_on(target._access, lambda: target._exclusive_holder is None)
            target._shared_holders += 1
    win._locks[target_rank] = exclusive


def flush(win: WindowDescriptor, target_rank: int) -> None:
    if target_rank not in win._locks:
        raise NotLocked(f"rank {win.rank} holds no lock on rank {target_rank}")
    _complete(win, [target_rank])


def unlock(win: WindowDescriptor, target_rank: int) -> None:
    if target_rank not in win._locks:
        raise NotLocked(f"rank {win.rank} holds no lock on rank {target_rank}")
    _complete(win, [target_rank])
    target = _target(win, target_rank)
    exclusive = win._locks.pop(target_rank)
    with target._access:
        if exclusive:
            target._exclusive_holder = None
        else:
            target._shared_holders -= 1
        target._access.notify_all()
