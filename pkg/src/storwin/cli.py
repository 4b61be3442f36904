"""storwin command line: bench, verify, recover-demo.

Exit codes: 0 ok, 1 I/O error, 2 verification failure, 64 usage error.
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import stream, verify
from .errors import (
    IoFailure,
    RankFailure,
    SidecarCorrupt,
    SidecarMissing,
    StorwinError,
    TimeoutDiagnostic,
    ValidationError,
)
from .runtime import default_ranks, spawn_ranks
from .storage import DEFAULT_MEMORY_BUDGET, FlushPolicy, KNOWN_FAULTS, inject_faults, map_attach
from .window import win_allocate

EXIT_OK, EXIT_IO, EXIT_VERIFY, EXIT_USAGE = 0, 1, 2, 64

DEMO_FAULTS = {"corrupt-byte", "corrupt-sidecar"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


@dataclass
class CliConfig:
    command: str
    ranks: int = 1
    elements: int = 1_000_000
    modes: list[str] = field(default_factory=lambda: ["memory", "storage"])
    block_elements: int = stream.DEFAULT_BLOCK_ELEMENTS
    sync_mode: str = "deferred"
    dirty_limit_bytes: int | None = None
    background_threshold_bytes: int | None = None
    flush_interval_ms: int = 15_000
    memory_budget_bytes: int = DEFAULT_MEMORY_BUDGET
    path: str = "."
    csv: str | None = None
    seed: int = 0
    reps: int = stream.DEFAULT_REPS
    phase: str = "both"
    inject: list[str] = field(default_factory=list)
    watchdog_ms: int | None = None

    def policy(self) -> FlushPolicy:
        return FlushPolicy.from_budget(
            self.memory_budget_bytes,
            dirty_limit_bytes=self.dirty_limit_bytes,
            background_threshold_bytes=self.background_threshold_bytes,
            flush_interval_ms=self.flush_interval_ms,
            mode=self.sync_mode,
        )

    @property
    def watchdog_s(self) -> float | None:
        return None if self.watchdog_ms is None else self.watchdog_ms / 1000.0


def _positive(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _csv_list(text):
    return [item for item in text.split(",") if item]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--ranks", type=_positive, default=default_ranks())
    common.add_argument("--elements", type=_positive, default=1_000_000)
    common.add_argument("--modes", type=_csv_list, default=["memory", "storage"],
                        help=f"comma-separated, from {','.join(stream.MODES)}")
    common.add_argument("--block-elements", type=_positive, default=stream.DEFAULT_BLOCK_ELEMENTS)
    common.add_argument("--reps", type=_positive, default=stream.DEFAULT_REPS)
    common.add_argument("--sync-mode", choices=("deferred", "eager"), default="deferred")
    common.add_argument("--dirty-limit-bytes", type=_positive)
    common.add_argument("--background-threshold-bytes", type=_positive)
    common.add_argument("--flush-interval-ms", type=_positive, default=15_000)
    common.add_argument("--memory-budget-bytes", type=_positive, default=DEFAULT_MEMORY_BUDGET)
    common.add_argument("--path", default=".", help="working directory for window files")
    common.add_argument("--csv", help="bench output (default: <path>/storwin_bench.csv)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--watchdog-ms", type=_positive,
                        help="harness watchdog (default: $STORWIN_WATCHDOG_MS or 30000)")
    common.add_argument("--inject", type=_csv_list, default=[],
                        help="fault injection: skip-sync, corrupt-byte, corrupt-sidecar")
    common.add_argument("--phase", choices=("1", "2", "both"), default="both",
                        help="recover-demo phase")

    parser = _Parser(prog="storwin", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("bench", parents=[common], help="STREAM over windows, CSV output")
    sub.add_parser("verify", parents=[common], help="run the property suites")
    sub.add_parser("recover-demo", parents=[common], help="crash and reattach a storage window")
    return parser


def parse_config(argv) -> CliConfig:
    args = build_parser().parse_args(argv)
    cfg = CliConfig(**{k: v for k, v in vars(args).items()})
    bad = [m for m in cfg.modes if m not in stream.MODES]
    if bad:
        raise UsageError(f"unknown mode(s) {bad}; choose from {list(stream.MODES)}")
    faults = set(cfg.inject) - KNOWN_FAULTS - DEMO_FAULTS
    if faults:
        raise UsageError(f"unknown fault(s) {sorted(faults)}")
    try:
        cfg.policy()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return cfg


def _root_cause(exc: BaseException) -> BaseException:
    while isinstance(exc, RankFailure):
        exc = exc.cause
    return exc


def cmd_bench(cfg: CliConfig) -> int:
    bench = stream.BenchConfig(
        elements=cfg.elements,
        modes=tuple(cfg.modes),
        reps=cfg.reps,
        block_elements=cfg.block_elements,
        ranks=cfg.ranks,
        workdir=cfg.path,
        policy=cfg.policy(),
        memory_budget_bytes=cfg.memory_budget_bytes,
        seed=cfg.seed,
        watchdog_s=cfg.watchdog_s,
    )
    csv_path = cfg.csv or str(Path(cfg.path) / "storwin_bench.csv")
    try:
        with inject_faults(set(cfg.inject) & KNOWN_FAULTS):
            records = stream.run_bench(bench)
        stream.write_csv(csv_path, records)
    except (RankFailure, StorwinError, OSError) as exc:
        cause = _root_cause(exc)
        print(f"bench failed: {cause}", file=sys.stderr)
        return EXIT_VERIFY if isinstance(cause, ValidationError) else EXIT_IO
    print(stream.format_table(stream.summarize_records(records)))
    by_mode = {}
    for rec in records:
        by_mode.setdefault(rec.mode, []).append(rec.seconds)
    if "explicit_io" in by_mode and "storage_blocked" in by_mode:
        ratios = stream.speedup(by_mode["explicit_io"], by_mode["storage_blocked"])
        print(f"speedup storage_blocked vs explicit_io: median {float(np.median(ratios)):.3f}")
    print(f"wrote {len(records)} rows to {csv_path}")
    return EXIT_OK


def cmd_verify(cfg: CliConfig) -> int:
    results = verify.run_suites(cfg.seed, set(cfg.inject) & KNOWN_FAULTS)
    for res in results:
        print(res.line())
    ok = all(r.passed for r in results)
    print("all suites passed" if ok else "verification FAILED")
    return EXIT_OK if ok else EXIT_VERIFY


# -- recover-demo ----------------------------------------------------------------

def _demo_path(cfg: CliConfig, rank: int) -> Path:
    return Path(cfg.path) / f"recover_r{rank}.dat"


def _demo_pattern(seed: int, rank: int, size: int) -> bytes:
    return np.random.default_rng([seed, rank]).integers(0, 256, size, dtype=np.uint8).tobytes()


def recover_phase1(cfg: CliConfig) -> int:
    """Write a seeded pattern, sync it, then leave without freeing the window."""
    size = cfg.elements * 8
    Path(cfg.path).mkdir(parents=True, exist_ok=True)
    for r in range(cfg.ranks):
        for stale in (_demo_path(cfg, r), Path(str(_demo_path(cfg, r)) + ".winmeta")):
            stale.unlink(missing_ok=True)

    def entry(ctx):
        hints = {"alloc_type": "storage", "storage_path": str(_demo_path(cfg, ctx.rank))}
        win = win_allocate(size, 8, hints, ctx, cfg.policy())
        win.write(0, _demo_pattern(cfg.seed, ctx.rank, size))
        win.sync(wait=True)
        return win.mapping.last_sync_epoch

    with inject_faults(set(cfg.inject) & KNOWN_FAULTS):
        result = spawn_ranks(cfg.ranks, entry, cfg.watchdog_s)
    print(f"phase 1: wrote and synced {size} bytes on {cfg.ranks} rank(s); "
          f"abandoned {len(result.leaked)} window(s) without free")
    return EXIT_OK


def _inject_demo_faults(cfg: CliConfig) -> None:
    if "corrupt-byte" in cfg.inject:
        path = _demo_path(cfg, 0)
        with open(path, "r+b") as fh:
            fh.seek(os.path.getsize(path) // 2)
            byte = fh.read(1)
            fh.seek(-1, os.SEEK_CUR)
            fh.write(bytes([byte[0] ^ 0xFF]))
    if "corrupt-sidecar" in cfg.inject:
        meta = Path(str(_demo_path(cfg, 0)) + ".winmeta")
        meta.write_text(meta.read_text().replace("magic=SWIN1", "magic=XXXXX"))


def recover_phase2(cfg: CliConfig) -> int:
    """Reattach each rank's region and compare it with the regenerated pattern."""
    size = cfg.elements * 8
    try:
        _inject_demo_faults(cfg)
    except OSError as exc:
        print(f"phase 2: cannot inject faults: {exc}", file=sys.stderr)
        return EXIT_IO
    total = 0
    status = EXIT_OK
    for r in range(cfg.ranks):
        path = _demo_path(cfg, r)
        try:
            m = map_attach(path, size)
        except SidecarCorrupt as exc:
            print(f"rank {r}: sidecar rejected: {exc}", file=sys.stderr)
            status = max(status, EXIT_VERIFY)
            continue
        except (SidecarMissing, IoFailure, StorwinError, OSError) as exc:
            print(f"rank {r}: {type(exc).__name__}: {exc}", file=sys.stderr)
            return EXIT_IO
        try:
            got = m.read_bytes(0, size)
            synced = m.last_sync_epoch
        finally:
            m.abandon()
        want = _demo_pattern(cfg.seed, r, size)
        if synced < 1 or got != want:
            diff = int(np.count_nonzero(np.frombuffer(got, np.uint8) != np.frombuffer(want, np.uint8)))
            print(f"rank {r}: verification FAILED ({diff} bytes differ, last_sync_epoch={synced})",
                  file=sys.stderr)
            status = max(status, EXIT_VERIFY)
            continue
        print(f"rank {r}: recovered {size} bytes, verified")
        total += size
    if status == EXIT_OK:
        print(f"recovered {total} bytes, verified")
    return status


def cmd_recover_demo(cfg: CliConfig) -> int:
    if cfg.phase == "1":
        code = recover_phase1(cfg)
        sys.stdout.flush()
        sys.stderr.flush()
        # abrupt exit: no interpreter teardown, nothing else gets flushed or freed
        os._exit(code)
    if cfg.phase == "both":
        argv = [sys.executable, "-m", "storwin", "recover-demo", "--phase", "1",
                "--path", cfg.path, "--elements", str(cfg.elements), "--ranks", str(cfg.ranks),
                "--seed", str(cfg.seed)]
        if set(cfg.inject) & KNOWN_FAULTS:
            argv += ["--inject", ",".join(sorted(set(cfg.inject) & KNOWN_FAULTS))]
        proc = subprocess.run(argv, capture_output=True, text=True)
        sys.stdout.write(proc.stdout)
        sys.stderr.write(proc.stderr)
        if proc.returncode != 0:
            return EXIT_IO
    return recover_phase2(cfg)


COMMANDS = {"bench": cmd_bench, "verify": cmd_verify, "recover-demo": cmd_recover_demo}


def main(argv=None) -> int:
    try:
        cfg = parse_config(argv)
    except UsageError as exc:
        print(f"storwin: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[cfg.command](cfg)
    except TimeoutDiagnostic as exc:
        print(f"storwin: {exc}", file=sys.stderr)
        return EXIT_IO


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
