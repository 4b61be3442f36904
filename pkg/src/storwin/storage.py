"""File-backed byte regions with a user-space dirty-page flush policy.

A StorageMapping is a MAP_SHARED mapping of [file_offset, file_offset+length)
of a data file. The kernel page cache does the real write-back; this layer
keeps its own dirty accounting at 4 KiB chunk granularity so the throttling
behaviour is observable and testable:

* dirty bytes >= background_threshold_bytes wakes the mapping's flusher thread
* dirty bytes >= dirty_limit_bytes blocks the writer until the flusher has
  brought the count back under the limit (counted in ``stall_count``)
* the flusher also wakes every ``flush_interval_ms``

Every mapping has a sidecar (``path + ".winmeta"`` by default) recording its
geometry and a counter of whole-mapping syncs, so a later process can
reattach and validate the region.
"""

from __future__ import annotations

import contextlib
import ctypes
import ctypes.util
import mmap
import os
import threading
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import (
    IoFailure,
    LengthMismatch,
    OutOfRange,
    SidecarConflict,
    SidecarCorrupt,
    SidecarMissing,
    UseAfterClose,
)

CHUNK = 4096
DEFAULT_MEMORY_BUDGET = 1 << 30
DIRTY_RATIO = 0.20
BACKGROUND_RATIO = 0.10
DEFAULT_FLUSH_INTERVAL_MS = 15_000
SIDECAR_SUFFIX = ".winmeta"
SIDECAR_MAGIC = "SWIN1"

_MS_SYNC = 4
KNOWN_FAULTS = frozenset({"skip-sync"})
_faults: set[str] = set()
_libc = None
try:
    _libc = ctypes.CDLL(ctypes.util.find_library("c"), use_errno=True)
    _libc.msync.argtypes = (ctypes.c_void_p, ctypes.c_size_t, ctypes.c_int)
    _libc.msync.restype = ctypes.c_int
except (OSError, AttributeError):  # pragma: no cover - non-glibc platforms
    _libc = None


@dataclass(frozen=True)
class FlushPolicy:
    dirty_limit_bytes: int = int(DIRTY_RATIO * DEFAULT_MEMORY_BUDGET)
    background_threshold_bytes: int = int(BACKGROUND_RATIO * DEFAULT_MEMORY_BUDGET)
    flush_interval_ms: int = DEFAULT_FLUSH_INTERVAL_MS
    mode: str = "deferred"

    def __post_init__(self):
        if self.dirty_limit_bytes <= 0 or self.background_threshold_bytes <= 0:
            raise ValueError("flush thresholds must be positive")
        if self.background_threshold_bytes > self.dirty_limit_bytes:
            raise ValueError(
                f"background threshold {self.background_threshold_bytes} exceeds "
                f"dirty limit {self.dirty_limit_bytes}"
            )
        if self.flush_interval_ms <= 0:
            raise ValueError("flush_interval_ms must be positive")
        if self.mode not in ("deferred", "eager"):
            raise ValueError(f"unknown sync mode {self.mode!r}")

    @classmethod
    def from_budget(
        cls,
        memory_budget_bytes: int = DEFAULT_MEMORY_BUDGET,
        *,
        dirty_limit_bytes: int | None = None,
        background_threshold_bytes: int | None = None,
        flush_interval_ms: int = DEFAULT_FLUSH_INTERVAL_MS,
        mode: str = "deferred",
    ) -> "FlushPolicy":
        """Kernel-style defaults: 20% of the budget dirty, flushing from 10%.

        Explicit limits override the ratios. When only the hard limit is given
        the background threshold follows it down so the pair stays ordered.
        """
        limit = dirty_limit_bytes or max(1, int(DIRTY_RATIO * memory_budget_bytes))
        background = background_threshold_bytes or max(
            1, int(BACKGROUND_RATIO * memory_budget_bytes)
        )
        if dirty_limit_bytes and not background_threshold_bytes:
            background = min(background, max(1, limit // 2))
        return cls(limit, background, flush_interval_ms, mode)

    def with_mode(self, mode: str) -> "FlushPolicy":
        return replace(self, mode=mode)


@dataclass
class WindowSidecar:
    size_bytes: int
    disp_unit: int
    file_offset: int
    last_sync_epoch: int = 0
    magic: str = SIDECAR_MAGIC

    _FIELDS = ("size_bytes", "disp_unit", "file_offset", "last_sync_epoch")

    def render(self) -> str:
        lines = [f"magic={self.magic}"]
        lines += [f"{name}={getattr(self, name)}" for name in self._FIELDS]
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> "WindowSidecar":
        values = {}
        for line in text.splitlines():
            key, sep, value = line.partition("=")
            if sep:
                values.setdefault(key.strip(), value.strip())
        if values.get("magic") != SIDECAR_MAGIC:
            raise SidecarCorrupt(f"bad sidecar magic {values.get('magic')!r}")
        try:
            fields = {name: int(values[name]) for name in cls._FIELDS}
        except (KeyError, ValueError) as exc:
            raise SidecarCorrupt(f"malformed sidecar field: {exc}") from None
        if min(fields.values()) < 0 or fields["disp_unit"] < 1:
            raise SidecarCorrupt(f"invalid sidecar values {fields}")
        return cls(**fields)

    @classmethod
    def load(cls, path) -> "WindowSidecar":
        try:
            text = Path(path).read_text(encoding="ascii")
        except FileNotFoundError:
            raise SidecarMissing(f"no sidecar at {path}") from None
        except UnicodeDecodeError:
            raise SidecarCorrupt(f"sidecar {path} is not ASCII") from None
        except OSError as exc:
            raise IoFailure(f"cannot read sidecar {path}: {exc}") from exc
        return cls.parse(text)

    def store(self, path) -> None:
        # Write-then-rename so a crash mid-update leaves the old sidecar intact.
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        try:
            with open(tmp, "w", encoding="ascii") as fh:
                fh.write(self.render())
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, path)
        except OSError as exc:
            raise IoFailure(f"cannot write sidecar {path}: {exc}") from exc


@contextlib.contextmanager
def inject_faults(faults):
    """Enable named runtime faults for the duration of the block.

    skip-sync: waited syncs (sync_range wait=True, close_with_flush) silently
    do nothing, as a broken write-back path would.
    """
    unknown = set(faults) - KNOWN_FAULTS
    if unknown:
        raise ValueError(f"unknown faults {sorted(unknown)}; known: {sorted(KNOWN_FAULTS)}")
    saved = set(_faults)
    _faults.update(faults)
    try:
        yield
    finally:
        _faults.clear()
        _faults.update(saved)


def sidecar_path_for(path) -> Path:
    return Path(str(path) + SIDECAR_SUFFIX)


class StorageMapping:
    """One mapped region of a data file. Create with map_create or map_attach."""

    def __init__(self, path, fd, file_offset, length, policy, disp_unit, sidecar, sidecar_path):
        self.path = Path(path)
        self.file_offset = file_offset
        self.length = length
        self.policy = policy
        self.disp_unit = disp_unit
        self.sidecar_path = Path(sidecar_path)
        self._sidecar = sidecar
        self._fd = fd

        aligned = file_offset - file_offset % mmap.ALLOCATIONGRANULARITY
        self._delta = file_offset - aligned
        try:
            self._mm = mmap.mmap(fd, self._delta + length, offset=aligned)
        except (OSError, ValueError) as exc:
            os.close(fd)
            raise IoFailure(f"mmap of {path} failed: {exc}") from exc
        base = np.frombuffer(self._mm, dtype=np.uint8)
        self._addr = base.ctypes.data
        self._buf = base[self._delta:self._delta + length]
        del base

        self._nchunks = -(-length // CHUNK)
        self._last_chunk = length - (self._nchunks - 1) * CHUNK
        self._dirty = np.zeros(self._nchunks, dtype=bool)
        self._inflight = np.zeros(self._nchunks, dtype=bool)
        self._dirty_count = 0  # bytes in _dirty
        self._inflight_count = 0  # bytes in _inflight
        self._overlap_count = 0  # bytes in both

        self._cond = threading.Condition()
        self._flush_lock = threading.Lock()
        self._flusher: threading.Thread | None = None
        self._wake = False
        self._stop = False
        self._closed = False

        self.stall_count = 0
        self.blocked_seconds = 0.0
        self.flush_count = 0

    # -- accounting ----------------------------------------------------------

    @property
    def dirty_bytes(self) -> int:
        with self._cond:
            return self._dirty_count + self._inflight_count - self._overlap_count

    @property
    def last_sync_epoch(self) -> int:
        return self._sidecar.last_sync_epoch

    @property
    def closed(self) -> bool:
        return self._closed

    def _span_bytes(self, mask: np.ndarray, first: int) -> int:
        """Byte count of the chunks selected by mask, which starts at chunk `first`."""
        n = int(np.count_nonzero(mask))
        if n and first + len(mask) == self._nchunks and mask[-1]:
            n_bytes = n * CHUNK - (CHUNK - self._last_chunk)
        else:
            n_bytes = n * CHUNK
        return n_bytes

    def _chunks(self, offset: int, count: int) -> tuple[int, int]:
        return offset // CHUNK, -(-(offset + count) // CHUNK)

    def _mark_dirty(self, offset: int, count: int) -> None:
        a, b = self._chunks(offset, count)
        fresh = ~self._dirty[a:b]
        self._dirty_count += self._span_bytes(fresh, a)
        self._overlap_count += self._span_bytes(fresh & self._inflight[a:b], a)
        self._dirty[a:b] = True

    def _clear_dirty(self, a: int, b: int) -> None:
        was = self._dirty[a:b]
        self._dirty_count -= self._span_bytes(was, a)
        self._overlap_count -= self._span_bytes(was & self._inflight[a:b], a)
        self._dirty[a:b] = False

    # -- data access ---------------------------------------------------------

    def _check(self, offset: int, count: int) -> None:
        if self._closed:
            raise UseAfterClose(f"mapping of {self.path} is closed")
        if offset < 0 or count < 0 or offset + count > self.length:
            raise OutOfRange(
                f"range [{offset}, {offset + count}) outside mapping of {self.length} bytes"
            )

    def view(self, offset: int = 0, count: int | None = None) -> np.ndarray:
        """Writable uint8 view of the mapped bytes. Writes through it bypass the
        dirty accounting until reported with note_written."""
        if count is None:
            count = self.length - offset
        self._check(offset, count)
        return self._buf[offset:offset + count]

    def read_bytes(self, offset: int, count: int) -> bytes:
        self._check(offset, count)
        return self._buf[offset:offset + count].tobytes()

    def write_bytes(self, offset: int, data) -> None:
        src = np.frombuffer(memoryview(data).cast("B"), dtype=np.uint8)
        self._check(offset, len(src))
        self._buf[offset:offset + len(src)] = src
        self.note_written(offset, len(src))

    def note_written(self, offset: int, count: int) -> None:
        """Account for `count` bytes just stored at `offset` and apply the policy.

        Blocks while the mapping is at its dirty limit.
        """
        self._check(offset, count)
        if count == 0:
            return
        if self.policy.mode == "eager":
            with self._cond:
                self._mark_dirty(offset, count)
            self._sync_chunks(*self._chunks(offset, count))
            return
        with self._cond:
            self._mark_dirty(offset, count)
            self._ensure_flusher()
            dirty = self._dirty_count + self._inflight_count - self._overlap_count
            if dirty < self.policy.background_threshold_bytes:
                return
            self._wake = True
            self._cond.notify_all()
            if dirty < self.policy.dirty_limit_bytes:
                return
            self.stall_count += 1
            t0 = time.perf_counter()
            while (
                self._dirty_count + self._inflight_count - self._overlap_count
                >= self.policy.dirty_limit_bytes
            ):
                if not self._wake:
                    self._wake = True
                    self._cond.notify_all()
                self._cond.wait(0.05)
            self.blocked_seconds += time.perf_counter() - t0

    # -- write-back ----------------------------------------------------------

    def _msync(self, offset: int, count: int) -> None:
        start = self._delta + offset
        aligned = start - start % mmap.PAGESIZE
        size = start + count - aligned
        if size <= 0:
            return
        if _libc is not None:
            # ctypes drops the GIL for the duration of the call, unlike mmap.flush.
            if _libc.msync(self._addr + aligned, size, _MS_SYNC) != 0:
                err = ctypes.get_errno()
                raise IoFailure(f"msync of {self.path} failed: {os.strerror(err)}")
        else:  # pragma: no cover
            try:
                self._mm.flush(aligned, size)
            except OSError as exc:
                raise IoFailure(f"msync of {self.path} failed: {exc}") from exc

    def _flush_dirty(self) -> None:
        """Write back every currently dirty chunk (the flusher's unit of work)."""
        with self._flush_lock:
            with self._cond:
                if not self._dirty_count:
                    return
                self._inflight[:] = self._dirty
                self._inflight_count = self._dirty_count
                self._overlap_count = self._dirty_count
                self._clear_dirty(0, self._nchunks)
                batch = self._inflight.copy()
            try:
                for a, b in _runs(batch):
                    self._msync(a * CHUNK, min(b * CHUNK, self.length) - a * CHUNK)
            finally:
                with self._cond:
                    self._inflight[:] = False
                    self._inflight_count = 0
                    self._overlap_count = 0
                    self.flush_count += 1
                    self._cond.notify_all()

    def _sync_chunks(self, a: int, b: int) -> None:
        with self._flush_lock:
            start, stop = a * CHUNK, min(b * CHUNK, self.length)
            self._msync(start, stop - start)
            with self._cond:
                self._clear_dirty(a, b)
                self.flush_count += 1
                self._cond.notify_all()

    def _ensure_flusher(self) -> None:
        # caller holds _cond
        if self._flusher is None and not self._stop:
            self._flusher = threading.Thread(
                target=self._flusher_main, name=f"storwin-flush-{self.path.name}", daemon=True
            )
            self._flusher.start()

    def _flusher_main(self) -> None:
        interval = self.policy.flush_interval_ms / 1000.0
        while True:
            with self._cond:
                self._cond.wait_for(lambda: self._wake or self._stop, interval)
                if self._stop:
                    return
                self._wake = False
            try:
                self._flush_dirty()
            except IoFailure:
                # Surfaced to callers by the next synchronous sync/close.
                pass

    def sync_range(self, offset: int, count: int, wait: bool = True) -> None:
        self._check(offset, count)
        if wait and "skip-sync" in _faults:
            return
        whole = offset == 0 and count == self.length
        if not wait:
            with self._cond:
                self._ensure_flusher()
                self._wake = True
                self._cond.notify_all()
            return
        if not whole:
            if count:
                self._sync_chunks(*self._chunks(offset, count))
            return
        with self._flush_lock:
            # msync the whole region, so bytes stored through view() without
            # note_written are covered too.
            self._msync(0, self.length)
            with self._cond:
                self._clear_dirty(0, self._nchunks)
                self.flush_count += 1
                self._cond.notify_all()
            self._sidecar.last_sync_epoch += 1
            self._sidecar.store(self.sidecar_path)

    def _stop_flusher(self) -> None:
        with self._cond:
            self._stop = True
            self._cond.notify_all()
            flusher = self._flusher
        if flusher is not None and flusher is not threading.current_thread():
            flusher.join()

    def _release(self) -> None:
        self._closed = True
        self._buf = None
        try:
            self._mm.close()
        except BufferError:
            # A caller still holds a view(); the mapping is released with it.
            pass
        try:
            os.close(self._fd)
        except OSError:
            pass

    def close_with_flush(self) -> None:
        if self._closed:
            raise UseAfterClose(f"mapping of {self.path} already closed")
        self._stop_flusher()
        try:
            self.sync_range(0, self.length, wait=True)
        finally:
            self._release()

    def abandon(self) -> None:
        """Drop the mapping without a final sync, as a crashed process would."""
        if self._closed:
            return
        self._stop_flusher()
        self._release()

    def __repr__(self) -> str:
        state = "closed" if self._closed else f"dirty={self.dirty_bytes}"
        return (
            f"StorageMapping({str(self.path)!r}, offset={self.file_offset}, "
            f"length={self.length}, {state})"
        )


def _runs(mask: np.ndarray):
    """Yield [start, stop) index pairs of the True runs in a boolean array."""
    idx = np.flatnonzero(mask)
    if not idx.size:
        return
    breaks = np.flatnonzero(np.diff(idx) > 1)
    starts = np.concatenate(([idx[0]], idx[breaks + 1]))
    stops = np.concatenate((idx[breaks] + 1, [idx[-1] + 1]))
    yield from zip(starts.tolist(), stops.tolist())


def map_create(
    path,
    file_offset: int,
    length: int,
    policy: FlushPolicy | None = None,
    *,
    disp_unit: int = 1,
    sidecar_path=None,
) -> StorageMapping:
    """Create (or re-create) a zero-filled mapped region and its sidecar."""
    if length <= 0:
        raise ValueError(f"mapping length must be positive, got {length}")
    if file_offset < 0:
        raise ValueError(f"negative file offset {file_offset}")
    policy = policy or FlushPolicy()
    path = Path(path)
    sidecar_path = Path(sidecar_path) if sidecar_path else sidecar_path_for(path)

    if sidecar_path.exists():
        old = WindowSidecar.load(sidecar_path)
        if old.size_bytes != length or old.file_offset != file_offset:
            raise SidecarConflict(
                f"{sidecar_path} records size={old.size_bytes} offset={old.file_offset}, "
                f"requested size={length} offset={file_offset}"
            )

    try:
        fd = os.open(path, os.O_RDWR | os.O_CREAT, 0o644)
    except OSError as exc:
        raise IoFailure(f"cannot create {path}: {exc}") from exc
    try:
        current = os.fstat(fd).st_size
        if current < file_offset + length:
            os.ftruncate(fd, file_offset + length)
    except OSError as exc:
        os.close(fd)
        raise IoFailure(f"cannot extend {path}: {exc}") from exc

    sidecar = WindowSidecar(length, disp_unit, file_offset, 0)
    mapping = StorageMapping(path, fd, file_offset, length, policy, disp_unit, sidecar, sidecar_path)
    if current > file_offset:
        # Stale bytes from an earlier window; a new window reads as zeros.
        mapping._buf[:] = 0
        mapping._msync(0, length)
    try:
        sidecar.store(sidecar_path)
    except IoFailure:
        mapping.abandon()
        raise
    return mapping


def map_attach(
    path,
    expected_length: int | None = None,
    policy: FlushPolicy | None = None,
    *,
    sidecar_path=None,
) -> StorageMapping:
    """Reattach to a region left behind by an earlier (possibly crashed) owner."""
    path = Path(path)
    sidecar_path = Path(sidecar_path) if sidecar_path else sidecar_path_for(path)
    sidecar = WindowSidecar.load(sidecar_path)
    if expected_length is not None and expected_length != sidecar.size_bytes:
        raise LengthMismatch(
            f"expected {expected_length} bytes, sidecar records {sidecar.size_bytes}"
        )
    if sidecar.size_bytes == 0:
        raise SidecarCorrupt(f"{sidecar_path} records an empty region")
    try:
        fd = os.open(path, os.O_RDWR)
    except OSError as exc:
        raise IoFailure(f"cannot open {path}: {exc}") from exc
    end = sidecar.file_offset + sidecar.size_bytes
    if os.fstat(fd).st_size < end:
        os.close(fd)
        raise IoFailure(f"{path} is shorter than the {end} bytes its sidecar describes")
    return StorageMapping(
        path, fd, sidecar.file_offset, sidecar.size_bytes, policy or FlushPolicy(),
        sidecar.disp_unit, sidecar, sidecar_path,
    )


def write_bytes(m: StorageMapping, offset: int, data) -> None:
    m.write_bytes(offset, data)


def read_bytes(m: StorageMapping, offset: int, count: int) -> bytes:
    return m.read_bytes(offset, count)


def sync_range(m: StorageMapping, offset: int, count: int, wait: bool = True) -> None:
    m.sync_range(offset, count, wait)


def close_with_flush(m: StorageMapping) -> None:
    m.close_with_flush()
