"""Windows: hint-driven allocation over memory, storage, or both.

Allocation follows one path for every kind. The hints decide the backing,
the backing is created, and the allocation kind is cached on the window as
the ``storwin.alloc_kind`` attribute. Freeing reads that attribute back to
decide how the space is released.

Recognised hints (anything else is carried along and ignored):

    alloc_type      memory | storage | hybrid        (default memory)
    storage_path    data file for storage / hybrid windows
    storage_offset  byte offset of the region in that file (default 0)
    memory_bytes    hybrid split: [0, memory_bytes) lives in memory
    sync_mode       deferred | eager                 (default deferred)
"""

from __future__ import annotations

import json
import os
import threading
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from .errors import (
    AllocationFailed,
    EpochOpen,
    FlushFailed,
    HybridSplitInvalid,
    InvalidHint,
    ReservedKey,
    StoragePathInvalid,
    StorwinError,
    UseAfterClose,
)
from .runtime import RankContext
from .storage import FlushPolicy, StorageMapping, map_create, sidecar_path_for

ALLOC_KIND_ATTR = "storwin.alloc_kind"
RESERVED_PREFIX = "storwin."

ALLOC_TYPES = ("memory", "storage", "hybrid")
SYNC_MODES = ("deferred", "eager")


class HintSet(Mapping):
    """Ordered, case-sensitive string -> string hints. Unknown keys are kept."""

    def __init__(self, entries: Mapping | None = None, **kw):
        self._entries: dict[str, str] = {}
        for source in (entries or {}, kw):
            for key, value in dict(source).items():
                self._entries[str(key)] = str(value)

    def __getitem__(self, key):
        return self._entries[key]

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def __repr__(self):
        return f"HintSet({self._entries!r})"

    def _int(self, key: str, default: int | None = None) -> int | None:
        raw = self._entries.get(key)
        if raw is None:
            return default
        try:
            value = int(raw)
        except ValueError:
            raise InvalidHint(f"hint {key}={raw!r} is not an integer") from None
        if value < 0:
            raise InvalidHint(f"hint {key}={raw!r} is negative")
        return value

    @property
    def alloc_type(self) -> str:
        value = self._entries.get("alloc_type", "memory")
        if value not in ALLOC_TYPES:
            raise InvalidHint(f"alloc_type={value!r}; expected one of {ALLOC_TYPES}")
        return value

    @property
    def sync_mode(self) -> str:
        value = self._entries.get("sync_mode", "deferred")
        if value not in SYNC_MODES:
            raise InvalidHint(f"sync_mode={value!r}; expected one of {SYNC_MODES}")
        return value

    def allocation_kind(self, size_bytes: int) -> "AllocationKind":
        alloc_type = self.alloc_type
        if alloc_type == "memory":
            return Memory()
        path = self._entries.get("storage_path", "")
        if not path:
            raise StoragePathInvalid(f"alloc_type={alloc_type} needs a storage_path hint")
        offset = self._int("storage_offset", 0)
        if alloc_type == "storage":
            return Storage(path, offset)
        memory_bytes = self._int("memory_bytes")
        if memory_bytes is None:
            raise InvalidHint("alloc_type=hybrid needs a memory_bytes hint")
        if memory_bytes >= size_bytes:
            raise HybridSplitInvalid(
                f"memory_bytes={memory_bytes} must be below the window size {size_bytes}"
            )
        return Hybrid(memory_bytes, path, offset)


@dataclass(frozen=True)
class Memory:
    name = "memory"


@dataclass(frozen=True)
class Storage:
    path: str
    offset: int = 0
    name = "storage"


@dataclass(frozen=True)
class Hybrid:
    memory_bytes: int
    path: str
    offset: int = 0
    name = "hybrid"


AllocationKind = Union[Memory, Storage, Hybrid]


def encode_kind(kind: AllocationKind) -> bytes:
    body = {"kind": kind.name}
    if not isinstance(kind, Memory):
        body.update(path=kind.path, offset=kind.offset)
    if isinstance(kind, Hybrid):
        body["memory_bytes"] = kind.memory_bytes
    return json.dumps(body, sort_keys=True).encode()


def decode_kind(raw: bytes) -> AllocationKind:
    body = json.loads(raw)
    if body["kind"] == "memory":
        return Memory()
    if body["kind"] == "storage":
        return Storage(body["path"], body["offset"])
    if body["kind"] == "hybrid":
        return Hybrid(body["memory_bytes"], body["path"], body["offset"])
    raise ValueError(f"unknown allocation kind {body['kind']!r}")


@dataclass
class _Region:
    start: int
    stop: int
    memory: np.ndarray | None = None
    mapping: StorageMapping | None = None

    def view(self, offset: int, count: int) -> np.ndarray:
        local = offset - self.start
        if self.memory is not None:
            return self.memory[local:local + count]
        return self.mapping.view(local, count)


@dataclass(eq=False)
class WindowDescriptor:
    win_id: int
    rank: int
    size_bytes: int
    disp_unit: int
    kind: AllocationKind
    attributes: dict[str, bytes] = field(default_factory=dict)

    _ctx: RankContext | None = field(default=None, repr=False)
    _regions: list[_Region] = field(default_factory=list, repr=False)
    _freed: bool = field(default=False, repr=False)
    # one-sided state, driven by rma
    _epoch: str | None = field(default=None, repr=False)
    _locks: dict[int, bool] = field(default_factory=dict, repr=False)
    _pending: dict[int, list] = field(default_factory=dict, repr=False)
    _acc_lock: threading.Lock = field(default_factory=threading.Lock, repr=False)
    _access: threading.Condition = field(default_factory=threading.Condition, repr=False)
    _exclusive_holder: int | None = field(default=None, repr=False)
    _shared_holders: int = field(default=0, repr=False)

    def __eq__(self, other):
        if not isinstance(other, WindowDescriptor):
            return NotImplemented
        return self.identity() == other.identity() and self.win_id == other.win_id

    __hash__ = object.__hash__

    def identity(self) -> tuple:
        """Everything that describes the window except its id."""
        return (self.rank, self.size_bytes, self.disp_unit, self.kind, dict(self.attributes))

    @property
    def mapping(self) -> StorageMapping | None:
        for region in self._regions:
            if region.mapping is not None:
                return region.mapping
        return None

    @property
    def file_range(self) -> tuple[int, int] | None:
        """[start, stop) window offsets that live in the data file, if any."""
        for region in self._regions:
            if region.mapping is not None:
                return region.start, region.stop
        return None

    def _live(self) -> None:
        if self._freed:
            raise UseAfterClose(f"window {self.win_id} on rank {self.rank} was freed")

    def _pieces(self, offset: int, count: int):
        self._live()
        if offset < 0 or count < 0 or offset + count > self.size_bytes:
            raise IndexError(
                f"range [{offset}, {offset + count}) outside window of {self.size_bytes} bytes"
            )
        end = offset + count
        for region in self._regions:
            lo, hi = max(offset, region.start), min(end, region.stop)
            if lo < hi:
                yield region, lo, hi

    def read(self, offset: int = 0, count: int | None = None) -> bytes:
        """Local read of the window bytes."""
        if count is None:
            count = self.size_bytes - offset
        return b"".join(r.view(lo, hi - lo).tobytes() for r, lo, hi in self._pieces(offset, count))

    def write(self, offset: int, data) -> None:
        """Local store into the window; storage regions account the dirty bytes."""
        src = np.frombuffer(memoryview(data).cast("B"), dtype=np.uint8)
        for region, lo, hi in self._pieces(offset, len(src)):
            region.view(lo, hi - lo)[:] = src[lo - offset:hi - offset]
            if region.mapping is not None:
                region.mapping.note_written(lo - region.start, hi - lo)

    def view(self, offset: int = 0, count: int | None = None) -> np.ndarray:
        """Writable uint8 view; the range must not cross the hybrid split."""
        if count is None:
            count = self.size_bytes - offset
        pieces = list(self._pieces(offset, count))
        if len(pieces) > 1:
            raise ValueError(f"[{offset}, {offset + count}) spans the hybrid split")
        if not pieces:
            return np.zeros(0, dtype=np.uint8)
        region, lo, hi = pieces[0]
        return region.view(lo, hi - lo)

    def split_points(self) -> list[int]:
        return [r.start for r in self._regions[1:]]

    def note_written(self, offset: int, count: int) -> None:
        """Report bytes stored through view() so storage regions see them."""
        for region, lo, hi in self._pieces(offset, count):
            if region.mapping is not None:
                region.mapping.note_written(lo - region.start, hi - lo)

    def sync(self, offset: int = 0, count: int | None = None, wait: bool = True) -> None:
        """sync_range over the file-backed part of [offset, offset+count)."""
        if count is None:
            count = self.size_bytes - offset
        for region, lo, hi in self._pieces(offset, count):
            if region.mapping is not None:
                local = lo - region.start
                region.mapping.sync_range(local, hi - lo, wait)

    @property
    def stall_count(self) -> int:
        return sum(r.mapping.stall_count for r in self._regions if r.mapping is not None)

    def _abandon(self) -> None:
        # Crash emulation used by the harness: no flush, no deregistration.
        for region in self._regions:
            if region.mapping is not None:
                region.mapping.abandon()
        self._freed = True


def attr_get(win: WindowDescriptor, key: str) -> bytes | None:
    return win.attributes.get(key)


def attr_set(win: WindowDescriptor, key: str, value) -> None:
    if not key:
        raise ValueError("attribute key must be non-empty")
    if key.startswith(RESERVED_PREFIX):
        raise ReservedKey(f"attribute keys starting with {RESERVED_PREFIX!r} are reserved")
    win.attributes[key] = bytes(value)


def _file_part(kind: AllocationKind, size_bytes: int) -> int:
    if isinstance(kind, Storage):
        return size_bytes
    if isinstance(kind, Hybrid):
        return size_bytes - kind.memory_bytes
    return 0


def win_allocate(
    size_bytes: int,
    disp_unit: int,
    hints: Mapping | None,
    ctx: RankContext,
    policy: FlushPolicy | None = None,
) -> WindowDescriptor:
    """Collectively allocate a window. Every rank of ctx's group must call this.

    Ranks sharing one storage_path get consecutive regions of that file (in
    rank order, starting at each rank's storage_offset) and per-rank sidecars.
    If any rank fails, every rank raises AllocationFailed; the failing rank
    raises the specific subclass.
    """
    hints = HintSet(hints)
    error: StorwinError | None = None
    kind: AllocationKind = Memory()
    sync_mode = "deferred"
    try:
        if disp_unit < 1 or size_bytes < 0:
            raise AllocationFailed(f"bad window shape: size {size_bytes}, disp_unit {disp_unit}")
        if size_bytes % disp_unit:
            raise AllocationFailed(f"disp_unit {disp_unit} does not divide size {size_bytes}")
        kind = hints.allocation_kind(size_bytes)
        sync_mode = hints.sync_mode
    except AllocationFailed as exc:
        error = exc

    path = None
    if not isinstance(kind, Memory):
        path = os.path.abspath(kind.path)
    file_bytes = _file_part(kind, size_bytes)
    proposal = ctx.registry.new_id() if ctx.rank == 0 else None
    info = ctx.allgather((error is None, path, file_bytes, proposal))
    win_id = info[0][3]
    if error is not None:
        raise error
    failed = [r for r, (ok, *_rest) in enumerate(info) if not ok]
    if failed:
        raise AllocationFailed(f"allocation failed on ranks {failed}")

    sidecar = None
    if path is not None:
        sharers = [r for r, entry in enumerate(info) if entry[1] == path]
        if len(sharers) > 1:
            before = sum(info[r][2] for r in sharers if r < ctx.rank)
            kind = _placed(kind, path, kind.offset + before)
            sidecar = Path(f"{path}.rank{ctx.rank}.winmeta")
        else:
            kind = _placed(kind, path, kind.offset)

    base_policy = policy or FlushPolicy()
    if base_policy.mode != sync_mode and "sync_mode" in hints:
        base_policy = base_policy.with_mode(sync_mode)
    regions: list[_Region] = []
    try:
        regions = _create_regions(kind, size_bytes, disp_unit, base_policy, sidecar)
    except (StorwinError, OSError) as exc:
        error = exc

    statuses = ctx.allgather(error is None)
    if not all(statuses):
        for region in regions:
            if region.mapping is not None:
                region.mapping.abandon()
        failed = [r for r, ok in enumerate(statuses) if not ok]
        raise AllocationFailed(f"backing creation failed on ranks {failed}") from error

    win = WindowDescriptor(
        win_id=win_id,
        rank=ctx.rank,
        size_bytes=size_bytes,
        disp_unit=disp_unit,
        kind=kind,
        attributes={ALLOC_KIND_ATTR: encode_kind(kind)},
        _ctx=ctx,
        _regions=regions,
    )
    ctx.registry.register(win_id, ctx.rank, win)
    ctx.barrier()
    return win


def _placed(kind, path: str, offset: int):
    if isinstance(kind, Storage):
        return Storage(path, offset)
    return Hybrid(kind.memory_bytes, path, offset)


def _create_regions(kind, size_bytes, disp_unit, policy, sidecar) -> list[_Region]:
    if isinstance(kind, Memory):
        return [_Region(0, size_bytes, memory=np.zeros(size_bytes, dtype=np.uint8))]
    if isinstance(kind, Storage) and size_bytes == 0:
        # Nothing to map; leave the data file in place so the path is valid.
        Path(kind.path).touch(exist_ok=True)
        return [_Region(0, 0, memory=np.zeros(0, dtype=np.uint8))]
    split = kind.memory_bytes if isinstance(kind, Hybrid) else 0
    mapping = map_create(
        kind.path, kind.offset, size_bytes - split, policy,
        disp_unit=disp_unit, sidecar_path=sidecar or sidecar_path_for(kind.path),
    )
    regions = []
    if split:
        regions.append(_Region(0, split, memory=np.zeros(split, dtype=np.uint8)))
    regions.append(_Region(split, size_bytes, mapping=mapping))
    return regions


def win_free(win: WindowDescriptor, ctx: RankContext | None = None) -> None:
    """Collectively free a window, flushing its storage part back to the file."""
    ctx = ctx or win._ctx
    win._live()
    if win._epoch is not None or win._locks:
        raise EpochOpen(f"window {win.win_id}: close the epoch before freeing")
    ctx.barrier()

    kind = decode_kind(attr_get(win, ALLOC_KIND_ATTR))
    error = None
    if not isinstance(kind, Memory):
        for region in win._regions:
            if region.mapping is not None:
                try:
                    region.mapping.close_with_flush()
                except (StorwinError, OSError) as exc:
                    error = exc
    win._regions = []
    win._freed = True
    ctx.registry.deregister(win.win_id, win.rank)
    if error is not None:
        raise FlushFailed(f"window {win.win_id}: write-back failed: {error}") from error
