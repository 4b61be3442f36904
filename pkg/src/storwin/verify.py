"""Property suites: random RMA programs against a sequential oracle,
durability across an abandoned rank, and hybrid split routing.

The oracle is deliberately naive. Windows are bytearrays, accumulates are
Python integer arithmetic on int.from_bytes, and each epoch is replayed in
several orders to confirm that the program's outcome does not depend on
the order of operations inside an epoch.
"""

from __future__ import annotations

import contextlib
import math
import random
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rma, storage
from .errors import StorageError
from .runtime import spawn_ranks
from .window import win_allocate, win_free

MAX_RANKS = 4
MAX_WINDOW = 4096
MAX_OPS = 64
BACKINGS = ("memory", "storage", "hybrid")


@dataclass
class Op:
    kind: str  # put | get | sum | replace
    origin: int
    target: int
    disp: int
    elem_size: int
    count: int
    data: bytes = b""

    def byte_range(self, disp_unit: int) -> tuple[int, int]:
        lo = self.disp * disp_unit
        return lo, lo + self.count * self.elem_size


@dataclass
class Program:
    seed: int
    nranks: int
    sizes: list[int]
    disp_units: list[int]
    epochs: list[list[Op]] = field(default_factory=list)

    @property
    def n_ops(self) -> int:
        return sum(len(e) for e in self.epochs)


def _op_key(op: Op) -> tuple[str, int]:
    return (op.kind, op.elem_size if op.kind == "sum" else 0)


def _conflicts(key_a, range_a, key_b, range_b) -> bool:
    """Overlapping accesses in one epoch are allowed only for get/get and for
    sum/sum with equal element size."""
    if range_a[0] >= range_b[1] or range_b[0] >= range_a[1]:
        return False
    return not (key_a == key_b and key_a[0] in ("get", "sum"))


def generate_program(seed: int, max_ranks: int = MAX_RANKS, max_window: int = MAX_WINDOW,
                     max_ops: int = MAX_OPS) -> Program:
    """Random fence-epoch program with no undefined overlaps inside an epoch."""
    rng = random.Random(seed)
    nranks = rng.randint(1, max_ranks)
    disp_units = [rng.choice((1, 4, 8)) for _ in range(nranks)]
    sizes = [
        0 if rng.random() < 0.1 else du * rng.randint(1, max_window // du)
        for du in disp_units
    ]
    prog = Program(seed, nranks, sizes, disp_units)

    epoch: list[Op] = []
    claimed: list[tuple[int, tuple, tuple[int, int]]] = []
    for _ in range(rng.randint(0, max_ops)):
        if epoch and rng.random() < 0.2:
            prog.epochs.append(epoch)
            epoch, claimed = [], []
        for _attempt in range(20):
            op = _random_op(rng, nranks, sizes, disp_units)
            key, span = _op_key(op), op.byte_range(disp_units[op.target])
            if not any(t == op.target and _conflicts(k, r, key, span) for t, k, r in claimed):
                epoch.append(op)
                claimed.append((op.target, key, span))
                break
    if epoch:
        prog.epochs.append(epoch)
    return prog


def _random_op(rng, nranks, sizes, disp_units) -> Op:
    origin = rng.randrange(nranks)
    target = rng.randrange(nranks)
    size, du = sizes[target], disp_units[target]
    kind = rng.choice(("put", "get", "sum", "replace"))
    accumulate = kind in ("sum", "replace")
    elem_size = rng.choice((4, 8)) if accumulate else rng.choice((1, 2, 4, 8))
    # accumulate elements stay aligned to their size so overlapping sums agree
    align = math.lcm(elem_size, du) if accumulate else du
    if size < elem_size:
        return Op(kind, origin, target, 0, elem_size, 0)
    byte_lo = align * rng.randrange(-(-size // align))
    room = (size - byte_lo) // elem_size
    count = rng.randint(0, min(room, 64))
    data = b"" if kind == "get" else rng.randbytes(count * elem_size)
    return Op(kind, origin, target, byte_lo // du, elem_size, count, data)


# -- oracle --------------------------------------------------------------------

def _apply(windows, gets, op, disp_units):
    lo, hi = op.byte_range(disp_units[op.target])
    win = windows[op.target]
    if op.kind == "put" or op.kind == "replace":
        win[lo:hi] = op.data
    elif op.kind == "get":
        gets.append(bytes(win[lo:hi]))
    else:
        mod = 1 << (8 * op.elem_size)
        for i in range(op.count):
            a = lo + i * op.elem_size
            b = a + op.elem_size
            cur = int.from_bytes(win[a:b], "little")
            inc = int.from_bytes(op.data[a - lo:b - lo], "little")
            win[a:b] = ((cur + inc) % mod).to_bytes(op.elem_size, "little")


def oracle(prog: Program) -> tuple[list[bytes], list[list[bytes]]]:
    """Final window bytes per rank and get results per origin, in program order."""
    windows = [bytearray(s) for s in prog.sizes]
    gets: list[list[bytes]] = [[] for _ in range(prog.nranks)]
    shuffle = random.Random(prog.seed ^ 0x5EED)
    for epoch in prog.epochs:
        outcomes = []
        orders = [list(epoch), list(reversed(epoch)), shuffle.sample(epoch, len(epoch))]
        for order in orders:
            trial = [bytearray(w) for w in windows]
            trial_gets = {id(op): [] for op in epoch}
            for op in order:
                _apply(trial, trial_gets[id(op)], op, prog.disp_units)
            outcomes.append((trial, [trial_gets[id(op)] for op in epoch]))
        first = outcomes[0]
        for other in outcomes[1:]:
            if other != first:
                raise AssertionError(f"seed {prog.seed}: epoch outcome depends on operation order")
        windows = first[0]
        for op, result in zip(epoch, first[1]):
            if op.kind == "get":
                gets[op.origin].extend(result)
    return [bytes(w) for w in windows], gets


# -- runtime execution ---------------------------------------------------------

def _hints(backing, rank, size, workdir, rng_split):
    if backing == "memory":
        return {}
    path = str(Path(workdir) / "prog.dat")
    if backing == "storage":
        return {"alloc_type": "storage", "storage_path": path}
    if size == 0:
        return {}
    return {"alloc_type": "hybrid", "storage_path": path, "memory_bytes": str(rng_split(size))}


def execute(prog: Program, backing: str = "memory", workdir=None, watchdog_s: float | None = None):
    """Run a program on the runtime; returns (final bytes per rank, gets per origin)."""
    if backing not in BACKINGS:
        raise ValueError(f"unknown backing {backing!r}")
    with contextlib.ExitStack() as stack:
        if workdir is None and backing != "memory":
            workdir = stack.enter_context(tempfile.TemporaryDirectory(prefix="storwin-prog-"))
        split_rng = random.Random(prog.seed + 1)
        splits = [split_rng.randrange(s) if s else 0 for s in prog.sizes]

        def entry(ctx):
            r = ctx.rank
            hints = _hints(backing, r, prog.sizes[r], workdir, lambda s: splits[r])
            win = win_allocate(prog.sizes[r], prog.disp_units[r], hints, ctx)
            gets = []
            rma.fence(win)
            for i, epoch in enumerate(prog.epochs):
                mine = []
                for op in epoch:
                    if op.origin != r:
                        continue
                    if op.kind == "put":
                        rma.put(win, op.data, op.target, op.disp, elem_size=op.elem_size)
                    elif op.kind == "get":
                        buf = bytearray(op.count * op.elem_size)
                        rma.get(win, buf, op.target, op.disp, elem_size=op.elem_size)
                        mine.append(buf)
                    else:
                        rma.accumulate(win, op.data, op.target, op.disp,
                                       op=op.kind, elem_size=op.elem_size)
                rma.fence(win, nosucceed=i == len(prog.epochs) - 1)
                gets.extend(bytes(b) for b in mine)
            if not prog.epochs:
                rma.fence(win, nosucceed=True)
            final = win.read()
            win_free(win)
            return final, gets

        result = spawn_ranks(prog.nranks, entry, watchdog_s)
    return [res[0] for res in result.results], [res[1] for res in result.results]


def check_program(seed: int, backing: str = "memory") -> bool:
    prog = generate_program(seed)
    return execute(prog, backing) == oracle(prog)


# -- suites --------------------------------------------------------------------

@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{self.name:<20} {'PASS' if self.passed else 'FAIL'}  {self.detail}"


def suite_rma_oracle(seed: int = 0, programs: int = 50) -> SuiteResult:
    failures = []
    for s in range(seed, seed + programs):
        prog = generate_program(s)
        expected = oracle(prog)
        for backing in BACKINGS:
            if execute(prog, backing) != expected:
                failures.append((s, backing))
    detail = f"{programs} programs x {len(BACKINGS)} backings"
    if failures:
        detail += f", mismatches: {failures[:5]}"
    return SuiteResult("rma-oracle", not failures, detail)


def suite_durability(seed: int = 0, size: int = 64 * 1024) -> SuiteResult:
    """Write, sync, abandon without free, reattach: the synced bytes must survive."""
    pattern = np.random.default_rng(seed).integers(0, 256, size, dtype=np.uint8).tobytes()
    problems = []
    with tempfile.TemporaryDirectory(prefix="storwin-dur-") as workdir:
        path = str(Path(workdir) / "dur.dat")

        def writer(ctx):
            win = win_allocate(size, 8, {"alloc_type": "storage", "storage_path": path}, ctx)
            win.write(0, pattern)
            win.sync(wait=True)
            m = win.mapping
            return m.last_sync_epoch, m.dirty_bytes
            # no win_free: the rank is abandoned here

        result = spawn_ranks(1, writer)
        epoch, dirty = result.results[0]
        if epoch != 1:
            problems.append(f"sidecar epoch {epoch} after one sync")
        if dirty != 0:
            problems.append(f"{dirty} dirty bytes after a waited sync")
        if not result.leaked:
            problems.append("abandoned window was not reported as leaked")
        try:
            m = storage.map_attach(path, size)
            recovered = m.read_bytes(0, size)
            if m.last_sync_epoch < 1:
                problems.append("reattached region was never synced")
            m.close_with_flush()
            if recovered != pattern:
                bad = sum(x != y for x, y in zip(recovered, pattern))
                problems.append(f"{bad} of {size} bytes differ after reattach")
        except StorageError as exc:
            problems.append(f"reattach failed: {exc!r}")
    return SuiteResult("durability", not problems,
                       "; ".join(problems) or f"{size} synced bytes recovered after abandonment")


def suite_hybrid_routing(seed: int = 0) -> SuiteResult:
    """A put across the split lands low bytes in memory, high bytes in the file."""
    rng = np.random.default_rng(seed)
    size, split, file_offset = 8192, 3000, 4096
    lo, hi = split - 100, split + 200
    payload = rng.integers(1, 256, hi - lo, dtype=np.uint8).tobytes()
    problems = []
    with tempfile.TemporaryDirectory(prefix="storwin-hyb-") as workdir:
        path = Path(workdir) / "hyb.dat"
        hints = {"alloc_type": "hybrid", "storage_path": str(path),
                 "memory_bytes": str(split), "storage_offset": str(file_offset)}

        def entry(ctx):
            win = win_allocate(size, 1, hints if ctx.rank == 1 else {}, ctx)
            rma.fence(win)
            if ctx.rank == 0:
                rma.put(win, payload, 1, lo)
            rma.fence(win, nosucceed=True)
            seen = win.read(lo, hi - lo) if ctx.rank == 1 else None
            win_free(win)
            return seen

        seen = spawn_ranks(2, entry).results[1]
        if seen != payload:
            problems.append("window contents differ from the put payload")
        data = path.read_bytes()
        expect = bytearray(size - split)
        expect[0:hi - split] = payload[split - lo:]
        if data[file_offset:] != bytes(expect):
            problems.append("file region does not hold exactly the high part of the put")
        if any(data[:file_offset]):
            problems.append("bytes before storage_offset were touched")
    return SuiteResult("hybrid-routing", not problems,
                       "; ".join(problems) or f"split at {split}, put [{lo}, {hi})")


def suite_flush_policy(seed: int = 0) -> SuiteResult:
    stalls = {limit: sequential_write_stalls(limit) for limit in (64 << 10, 1 << 20, 64 << 20)}
    counts = [stalls[k] for k in sorted(stalls)]
    ok = counts[0] > 0 and counts[-1] == 0 and counts == sorted(counts, reverse=True)
    return SuiteResult("flush-policy", ok, "stalls by dirty limit " + ", ".join(
        f"{k >> 10}KiB={v}" for k, v in sorted(stalls.items())))


def sequential_write_stalls(dirty_limit: int, total: int = 4 << 20, write_size: int = 64 << 10,
                            workdir=None) -> int:
    """Stall count of a sequential write workload against one mapping.

    Background write-back starts only at the limit, so every stall drains
    the mapping and the count does not depend on flusher timing.
    """
    policy = storage.FlushPolicy.from_budget(
        dirty_limit_bytes=dirty_limit, background_threshold_bytes=dirty_limit)
    with contextlib.ExitStack() as stack:
        if workdir is None:
            workdir = stack.enter_context(tempfile.TemporaryDirectory(prefix="storwin-flush-"))
        m = storage.map_create(Path(workdir) / "seq.dat", 0, total, policy)
        block = bytes(range(256)) * (write_size // 256)
        for off in range(0, total, write_size):
            m.write_bytes(off, block)
        stalls = m.stall_count
        m.close_with_flush()
    return stalls


SUITES = {
    "rma-oracle": suite_rma_oracle,
    "durability": suite_durability,
    "hybrid-routing": suite_hybrid_routing,
    "flush-policy": suite_flush_policy,
}


def run_suites(seed: int = 0, inject: set[str] | None = None) -> list[SuiteResult]:
    results = []
    with storage.inject_faults(inject or set()):
        for name, suite in SUITES.items():
            try:
                results.append(suite(seed))
            except Exception as exc:  # noqa: BLE001 - a crashing suite is a failing suite
                results.append(SuiteResult(name, False, f"raised {type(exc).__name__}: {exc}"))
    return results
