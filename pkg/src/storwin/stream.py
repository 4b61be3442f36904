"""STREAM over one-sided windows.

The four kernels run on arrays a, b, c that live in three windows (one per
array), each allocated in the benchmark mode:

    memory                   plain memory windows
    storage                  file-backed windows, whole-array kernels, no syncs
    hybrid                   half memory / half file per window
    storage_blocked          kernels in blocks, async sync of each output block
    storage_blocked_synced   kernels in blocks, waited sync of each output block
    explicit_io              no mapping: pread inputs, compute, pwrite output
    explicit_io_synced       as above with fdatasync after every block write

Blocked and explicit modes include the final write-back of the output array
in every rep's time. Every rep is validated on sampled indices against the
scalar recurrences before its time counts.
"""

from __future__ import annotations

import csv
import math
import os
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import SizeOverflow, ValidationError
from .runtime import RankContext, spawn_ranks
from .storage import DEFAULT_MEMORY_BUDGET, FlushPolicy
from .window import win_allocate, win_free

KERNELS = ("copy", "scale", "add", "triad")
MODES = (
    "memory",
    "storage",
    "hybrid",
    "storage_blocked",
    "storage_blocked_synced",
    "explicit_io",
    "explicit_io_synced",
)
BLOCKED_MODES = ("storage_blocked", "storage_blocked_synced", "explicit_io", "explicit_io_synced")
CSV_COLUMNS = (
    "mode", "kernel", "elements", "block_elements", "rep", "seconds", "mb_per_s", "stall_count",
)

DEFAULT_BLOCK_ELEMENTS = 1_000_000
DEFAULT_REPS = 10
STREAM_INIT = {"a": 1.0, "b": 2.0, "c": 0.0}
DEFAULT_SCALAR = 3.0
SAMPLE_SIZE = 1000
# Whole-array kernels walk the arrays in strides so storage windows see their
# pages dirtied progressively, the way a sequential store loop dirties them.
STRIDE_ELEMENTS = 1 << 17

_ELEM = 8
_WORDS = {"copy": 2, "scale": 2, "add": 3, "triad": 3}
# kernel -> (inputs, output)
_OPERANDS = {
    "copy": (("a",), "c"),
    "scale": (("c",), "b"),
    "add": (("a", "b"), "c"),
    "triad": (("b", "c"), "a"),
}


@dataclass(frozen=True)
class KernelSpec:
    kernel: str
    elements: int
    scalar: float = DEFAULT_SCALAR
    reps: int = DEFAULT_REPS

    def __post_init__(self):
        if self.kernel not in KERNELS:
            raise ValueError(f"unknown kernel {self.kernel!r}")
        if self.elements < 1 or self.reps < 1:
            raise ValueError("elements and reps must be positive")

    @property
    def bytes_moved(self) -> int:
        return bytes_moved(self.kernel, self.elements)


def bytes_moved(kernel: str, elements: int) -> int:
    return _WORDS[kernel] * _ELEM * elements


def bandwidth_mb_s(kernel: str, elements: int, seconds: float) -> float:
    return bytes_moved(kernel, elements) / seconds / 1e6


def apply_kernel(kernel: str, arrays: dict, scalar: float, lo: int = 0, hi: int | None = None) -> None:
    """One kernel over [lo, hi) of float64 arrays a, b, c (in place)."""
    a, b, c = (arrays[k][lo:hi] for k in "abc")
    if kernel == "copy":
        np.copyto(c, a)
    elif kernel == "scale":
        np.multiply(c, scalar, out=b)
    elif kernel == "add":
        np.add(a, b, out=c)
    elif kernel == "triad":
        np.multiply(c, scalar, out=a)
        np.add(a, b, out=a)
    else:
        raise ValueError(f"unknown kernel {kernel!r}")


def reference(kernel: str, scalar: float, a: float, b: float, c: float) -> float:
    """Scalar recurrence for one element; returns the new output value."""
    if kernel == "copy":
        return a
    if kernel == "scale":
        return scalar * c
    if kernel == "add":
        return a + b
    return b + scalar * c


def plain_stream(elements: int, reps: int = DEFAULT_REPS, scalar: float = DEFAULT_SCALAR) -> dict:
    """Textbook in-memory STREAM loop (no windows); best time per kernel."""
    arrays = {k: np.full(elements, v) for k, v in STREAM_INIT.items()}
    best = {k: math.inf for k in KERNELS}
    for _ in range(reps):
        for kernel in KERNELS:
            t0 = time.perf_counter()
            apply_kernel(kernel, arrays, scalar)
            best[kernel] = min(best[kernel], time.perf_counter() - t0)
    return best


# -- array placement ---------------------------------------------------------

def slice_bounds(elements: int, nranks: int, rank: int, align: int) -> tuple[int, int]:
    """Contiguous per-rank slice; boundaries are multiples of `align` elements."""
    nblocks = -(-elements // align)
    lo_block = nblocks * rank // nranks
    hi_block = nblocks * (rank + 1) // nranks
    return min(lo_block * align, elements), min(hi_block * align, elements)


class _WindowArrays:
    """a, b, c as three windows of the selected kind, viewed as float64."""

    def __init__(self, ctx, mode, n, workdir, policy, hybrid_split=None):
        self.mode = mode
        self.n = n
        self.windows = {}
        for name in "abc":
            hints = {}
            if mode != "memory":
                hints = {"alloc_type": "storage", "storage_path": str(Path(workdir) / f"stream_{name}.dat")}
                if mode == "hybrid":
                    split = hybrid_split if hybrid_split is not None else (n // 2) * _ELEM
                    if n * _ELEM > split:
                        hints.update(alloc_type="hybrid", memory_bytes=str(split))
            self.windows[name] = win_allocate(n * _ELEM, _ELEM, hints, ctx, policy)
        splits = sorted({p // _ELEM for w in self.windows.values() for p in w.split_points()})
        self.segments = list(zip([0] + splits, splits + [n]))

    def segment_arrays(self, lo, hi):
        return {k: w.view(lo * _ELEM, (hi - lo) * _ELEM).view(np.float64) for k, w in self.windows.items()}

    def initialize(self):
        for name, w in self.windows.items():
            for lo, hi in self.segments:
                self.segment_arrays(lo, hi)[name][:] = STREAM_INIT[name]
            w.note_written(0, self.n * _ELEM)
            w.sync()

    def sample(self, idx):
        out = {name: np.empty(len(idx)) for name in "abc"}
        for lo, hi in self.segments:
            sel = (idx >= lo) & (idx < hi)
            arrays = self.segment_arrays(lo, hi)
            for name in "abc":
                out[name][sel] = arrays[name][idx[sel] - lo]
        return out

    def run(self, kernel, scalar, block, sync_each_block, wait):
        out_win = self.windows[_OPERANDS[kernel][1]]
        for seg_lo, seg_hi in self.segments:
            arrays = self.segment_arrays(seg_lo, seg_hi)
            step = block
            if not step:
                in_file = out_win.file_range is not None and out_win.file_range[0] < seg_hi * _ELEM
                step = STRIDE_ELEMENTS if in_file else max(1, seg_hi - seg_lo)
            for lo in range(0, seg_hi - seg_lo, step):
                hi = min(lo + step, seg_hi - seg_lo)
                apply_kernel(kernel, arrays, scalar, lo, hi)
                byte_lo, nbytes = (seg_lo + lo) * _ELEM, (hi - lo) * _ELEM
                out_win.note_written(byte_lo, nbytes)
                if sync_each_block:
                    out_win.sync(byte_lo, nbytes, wait=wait)
        if block:
            # the rep ends once the output array is back in the file
            out_win.sync(wait=True)

    def stall_count(self):
        return sum(w.stall_count for w in self.windows.values())

    def final(self):
        return {k: np.frombuffer(w.read(), dtype=np.float64).copy() for k, w in self.windows.items()}

    def close(self):
        for w in self.windows.values():
            win_free(w)


class _ExplicitArrays:
    """a, b, c as byte ranges of plain files, moved with pread/pwrite."""

    def __init__(self, ctx, n, global_lo, workdir, synced):
        self.n = n
        self.base = global_lo * _ELEM
        self.synced = synced
        self.fds = {}
        for name in "abc":
            path = Path(workdir) / f"explicit_{name}.dat"
            self.fds[name] = os.open(path, os.O_RDWR | os.O_CREAT, 0o644)
        self._pool = ThreadPoolExecutor(max_workers=1, thread_name_prefix="storwin-readahead")
        self.segments = [(0, n)]

    def initialize(self):
        chunk = np.empty(min(self.n, 1 << 20))
        for name, fd in self.fds.items():
            chunk[:] = STREAM_INIT[name]
            for lo in range(0, self.n, len(chunk)):
                hi = min(lo + len(chunk), self.n)
                os.pwrite(fd, chunk[:hi - lo].tobytes(), self.base + lo * _ELEM)
            os.fsync(fd)

    def _read(self, name, lo, buf):
        view = memoryview(buf).cast("B")
        got = os.preadv(self.fds[name], [view], self.base + lo * _ELEM)
        if got != len(view):
            raise OSError(f"short read from explicit_{name}.dat: {got} of {len(view)} bytes")
        return buf

    def sample(self, idx):
        out = {}
        one = np.empty(1)
        for name in "abc":
            out[name] = np.array([self._read(name, int(i), one)[0] for i in idx])
        return out

    def run(self, kernel, scalar, block, sync_each_block, wait):
        inputs, output = _OPERANDS[kernel]
        block = block or DEFAULT_BLOCK_ELEMENTS
        scratch = [{k: np.empty(min(block, self.n)) for k in "abc"} for _ in range(2)]

        def fetch(slot, lo, hi):
            for name in inputs:
                self._read(name, lo, scratch[slot][name][:hi - lo])

        starts = list(range(0, self.n, block))
        pending = self._pool.submit(fetch, 0, 0, min(block, self.n))
        for i, lo in enumerate(starts):
            hi = min(lo + block, self.n)
            pending.result()
            if i + 1 < len(starts):
                nlo = starts[i + 1]
                pending = self._pool.submit(fetch, (i + 1) % 2, nlo, min(nlo + block, self.n))
            bufs = {k: v[:hi - lo] for k, v in scratch[i % 2].items()}
            apply_kernel(kernel, bufs, scalar)
            os.pwrite(self.fds[output], bufs[output], self.base + lo * _ELEM)
            if self.synced:
                os.fdatasync(self.fds[output])
        os.fdatasync(self.fds[output])

    def stall_count(self):
        return 0

    def final(self):
        out = {}
        for name in "abc":
            out[name] = self._read(name, 0, np.empty(self.n))
        return out

    def close(self):
        self._pool.shutdown()
        for fd in self.fds.values():
            os.close(fd)


# -- runs ----------------------------------------------------------------------

@dataclass
class RepRecord:
    mode: str
    kernel: str
    elements: int
    block_elements: int
    rep: int
    seconds: float
    mb_per_s: float
    stall_count: int

    def row(self) -> list:
        return [
            self.mode, self.kernel, self.elements, self.block_elements, self.rep,
            f"{self.seconds:.9f}", f"{self.mb_per_s:.3f}", self.stall_count,
        ]


@dataclass
class BenchConfig:
    elements: int
    modes: tuple[str, ...] = ("memory", "storage")
    kernels: tuple[str, ...] = KERNELS
    reps: int = DEFAULT_REPS
    block_elements: int = DEFAULT_BLOCK_ELEMENTS
    ranks: int = 1
    scalar: float = DEFAULT_SCALAR
    workdir: str = "."
    policy: FlushPolicy = field(default_factory=FlushPolicy)
    memory_budget_bytes: int = DEFAULT_MEMORY_BUDGET
    seed: int = 0
    keep_files: bool = False
    watchdog_s: float | None = None


def _sample_indices(n: int, seed: int, rank: int) -> np.ndarray:
    if n <= SAMPLE_SIZE:
        return np.arange(n)
    rng = np.random.default_rng([seed, rank])
    idx = rng.choice(n, SAMPLE_SIZE, replace=False)
    return np.unique(np.concatenate(([0, n - 1], idx)))


def _validate(kernel, scalar, before, after, idx, mode, rep, rank):
    inputs, output = _OPERANDS[kernel]
    for j, i in enumerate(idx):
        want = reference(kernel, scalar, float(before["a"][j]), float(before["b"][j]), float(before["c"][j]))
        got = float(after[output][j])
        if got != want and not (math.isnan(got) and math.isnan(want)):
            raise ValidationError(
                f"{mode}/{kernel} rep {rep} rank {rank}: {output}[{int(i)}] = {got!r}, expected {want!r}"
            )
        for name in "abc":
            if name != output and after[name][j] != before[name][j]:
                raise ValidationError(
                    f"{mode}/{kernel} rep {rep} rank {rank}: input {name}[{int(i)}] changed"
                )


def _blocking(mode):
    sync_each = mode in ("storage_blocked", "storage_blocked_synced")
    wait = mode == "storage_blocked_synced"
    return sync_each, wait


def clear_workdir(workdir) -> None:
    """Remove data and sidecar files a previous benchmark left in workdir."""
    for pattern in ("stream_*.dat*", "explicit_*.dat"):
        for path in Path(workdir).glob(pattern):
            path.unlink()


def run_mode(cfg: BenchConfig, mode: str, keep_final: bool = False):
    """Run every configured kernel for cfg.reps reps in one mode.

    Returns (records, final_arrays or None). Kernels are interleaved per rep
    as in STREAM.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "memory" and 3 * _ELEM * cfg.elements > cfg.memory_budget_bytes:
        raise SizeOverflow(
            f"3 arrays of {cfg.elements} doubles exceed the memory budget of "
            f"{cfg.memory_budget_bytes} bytes"
        )
    Path(cfg.workdir).mkdir(parents=True, exist_ok=True)
    clear_workdir(cfg.workdir)
    block = cfg.block_elements if mode in BLOCKED_MODES else 0
    sync_each, wait = _blocking(mode)

    def entry(ctx: RankContext):
        lo, hi = slice_bounds(cfg.elements, ctx.group_size, ctx.rank, block or 1)
        n = hi - lo
        if mode.startswith("explicit_io"):
            arrays = _ExplicitArrays(ctx, n, lo, cfg.workdir, synced=mode == "explicit_io_synced")
        else:
            arrays = _WindowArrays(ctx, mode, n, cfg.workdir, cfg.policy)
        try:
            arrays.initialize()
            idx = _sample_indices(n, cfg.seed, ctx.rank)
            records = []
            for rep in range(cfg.reps):
                for kernel in cfg.kernels:
                    before = arrays.sample(idx)
                    stalls0 = arrays.stall_count()
                    ctx.barrier()
                    t0 = time.perf_counter()
                    arrays.run(kernel, cfg.scalar, block, sync_each, wait)
                    dt = time.perf_counter() - t0
                    stalls = arrays.stall_count() - stalls0
                    _validate(kernel, cfg.scalar, before, arrays.sample(idx), idx, mode, rep, ctx.rank)
                    times = ctx.allgather((dt, stalls))
                    seconds = max(t for t, _ in times)
                    records.append(RepRecord(
                        mode, kernel, cfg.elements, block, rep, seconds,
                        bandwidth_mb_s(kernel, cfg.elements, seconds),
                        sum(s for _, s in times),
                    ))
            final = arrays.final() if keep_final else None
            return records, final
        finally:
            arrays.close()

    result = spawn_ranks(cfg.ranks, entry, cfg.watchdog_s)
    records = result.results[0][0]
    final = None
    if keep_final:
        final = {k: np.concatenate([r[1][k] for r in result.results]) for k in "abc"}
    if not cfg.keep_files:
        clear_workdir(cfg.workdir)
    return records, final


def run_kernel(spec: KernelSpec, mode: str, **overrides) -> list[float]:
    """Per-rep seconds for one kernel in one mode."""
    cfg = BenchConfig(elements=spec.elements, modes=(mode,), kernels=(spec.kernel,),
                      reps=spec.reps, scalar=spec.scalar, **overrides)
    records, _ = run_mode(cfg, mode)
    return [r.seconds for r in records]


def run_blocked(spec: KernelSpec, block_elements: int = DEFAULT_BLOCK_ELEMENTS,
                sync_each_block: bool = True, wait: bool = False, **overrides) -> list[float]:
    mode = "storage_blocked_synced" if wait else "storage_blocked"
    if not sync_each_block:
        raise ValueError("blocked runs without per-block sync are plain storage mode")
    return run_kernel(spec, mode, block_elements=block_elements, **overrides)


def run_explicit_io(spec: KernelSpec, block_elements: int = DEFAULT_BLOCK_ELEMENTS,
                    synced: bool = False, **overrides) -> list[float]:
    mode = "explicit_io_synced" if synced else "explicit_io"
    return run_kernel(spec, mode, block_elements=block_elements, **overrides)


def run_bench(cfg: BenchConfig) -> list[RepRecord]:
    records = []
    for mode in cfg.modes:
        recs, _ = run_mode(cfg, mode)
        records.extend(recs)
    return records


# -- statistics and output -----------------------------------------------------

@dataclass
class BenchReport:
    mode: str
    kernel: str
    elements: int
    times: list[float]
    mb_per_s: list[float]
    mean_s: float
    min_s: float
    max_s: float
    stddev_s: float | None
    mean_mb_s: float
    min_mb_s: float
    max_mb_s: float
    stddev_mb_s: float | None
    total_s: float
    warmup_s: float | None = None

    @property
    def best_mb_s(self) -> float:
        return self.max_mb_s


def summarize(times, spec: KernelSpec, mode: str, warmup_s: float | None = None) -> BenchReport:
    """Statistics over rep times. Standard deviations use the n-1 estimator and
    are None for a single rep."""
    times = [float(t) for t in times]
    if not times:
        raise ValueError("no rep times to summarize")
    bw = [bandwidth_mb_s(spec.kernel, spec.elements, t) for t in times]
    many = len(times) > 1
    return BenchReport(
        mode=mode,
        kernel=spec.kernel,
        elements=spec.elements,
        times=times,
        mb_per_s=bw,
        mean_s=statistics.fmean(times),
        min_s=min(times),
        max_s=max(times),
        stddev_s=statistics.stdev(times) if many else None,
        mean_mb_s=statistics.fmean(bw),
        min_mb_s=min(bw),
        max_mb_s=max(bw),
        stddev_mb_s=statistics.stdev(bw) if many else None,
        total_s=sum(times),
        warmup_s=warmup_s,
    )


def summarize_records(records: list[RepRecord]) -> list[BenchReport]:
    """Group rep records by (mode, kernel); rep 0 is treated as warm-up when
    there is more than one rep."""
    groups: dict[tuple[str, str], list[RepRecord]] = {}
    for rec in records:
        groups.setdefault((rec.mode, rec.kernel), []).append(rec)
    reports = []
    for (mode, kernel), recs in groups.items():
        recs.sort(key=lambda r: r.rep)
        times = [r.seconds for r in recs]
        warmup = None
        if len(times) > 1:
            warmup, times = times[0], times[1:]
        spec = KernelSpec(kernel, recs[0].elements, reps=len(recs))
        reports.append(summarize(times, spec, mode, warmup))
    return reports


def speedup(baseline_times, improved_times) -> list[float]:
    """Per-pair speedup baseline / improved (e.g. explicit-I/O over mapped)."""
    return [b / m for b, m in zip(baseline_times, improved_times)]


def write_csv(path, records: list[RepRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for rec in records:
            writer.writerow(rec.row())


def format_table(reports: list[BenchReport]) -> str:
    lines = [f"{'mode':<24}{'kernel':<8}{'MB/s mean':>14}{'+-':>4}{'stddev':>12}{'best MB/s':>14}"]
    for rep in reports:
        sd = "n/a" if rep.stddev_mb_s is None else f"{rep.stddev_mb_s:.1f}"
        lines.append(
            f"{rep.mode:<24}{rep.kernel:<8}{rep.mean_mb_s:>14.1f}{'':>4}{sd:>12}{rep.best_mb_s:>14.1f}"
        )
    return "\n".join(lines)
