import os
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from storwin import storage
from storwin.errors import (
    IoFailure,
    LengthMismatch,
    OutOfRange,
    SidecarConflict,
    SidecarCorrupt,
    SidecarMissing,
    UseAfterClose,
)
from storwin.storage import (
    CHUNK,
    FlushPolicy,
    WindowSidecar,
    close_with_flush,
    map_attach,
    map_create,
    read_bytes,
    sync_range,
    write_bytes,
)

# thresholds far above anything these tests dirty, so no flusher activity
QUIET = FlushPolicy(1 << 40, 1 << 40, 10**9, "deferred")


@pytest.fixture
def wpath(tmp_path):
    return tmp_path / "w.dat"


def test_policy_defaults_follow_budget():
    p = FlushPolicy()
    assert p.dirty_limit_bytes == int(0.20 * (1 << 30))
    assert p.background_threshold_bytes == int(0.10 * (1 << 30))
    assert p.flush_interval_ms == 15000
    assert p.mode == "deferred"


@pytest.mark.parametrize("kwargs", [
    dict(dirty_limit_bytes=0, background_threshold_bytes=1, flush_interval_ms=1, mode="deferred"),
    dict(dirty_limit_bytes=10, background_threshold_bytes=11, flush_interval_ms=1, mode="deferred"),
    dict(dirty_limit_bytes=10, background_threshold_bytes=5, flush_interval_ms=0, mode="deferred"),
    dict(dirty_limit_bytes=10, background_threshold_bytes=5, flush_interval_ms=1, mode="lazy"),
])
def test_policy_rejects_bad_values(kwargs):
    with pytest.raises(ValueError):
        FlushPolicy(**kwargs)


def test_policy_limit_only_keeps_order():
    p = FlushPolicy.from_budget(dirty_limit_bytes=64 << 10)
    assert p.background_threshold_bytes <= p.dirty_limit_bytes == 64 << 10


def test_create_zero_filled(wpath):
    m = map_create(wpath, 0, 4096)
    assert os.path.getsize(wpath) == 4096
    assert read_bytes(m, 0, 4096) == bytes(4096)
    assert m.last_sync_epoch == 0
    m.close_with_flush()


def test_create_at_offset_extends_file(wpath):
    m = map_create(wpath, 8192, 4096)
    assert os.path.getsize(wpath) == 12288
    m.close_with_flush()


def test_create_in_unwritable_location(tmp_path):
    blocker = tmp_path / "plainfile"
    blocker.write_bytes(b"x")
    with pytest.raises(IoFailure):
        map_create(blocker / "w.dat", 0, 4096)


def test_create_rejects_empty_length(wpath):
    with pytest.raises(ValueError):
        map_create(wpath, 0, 0)


def test_create_conflicting_sidecar(wpath):
    map_create(wpath, 0, 4096).close_with_flush()
    with pytest.raises(SidecarConflict):
        map_create(wpath, 0, 8192)


def test_sidecar_format(wpath):
    m = map_create(wpath, 4096, 8192, disp_unit=8)
    m.close_with_flush()
    text = (wpath.parent / "w.dat.winmeta").read_text()
    assert text.splitlines() == [
        "magic=SWIN1", "size_bytes=8192", "disp_unit=8", "file_offset=4096", "last_sync_epoch=1",
    ]
    assert text.endswith("\n")


def test_sidecar_ignores_unknown_lines():
    sc = WindowSidecar.parse("magic=SWIN1\nsize_bytes=4\nnote=hi\ndisp_unit=1\nfile_offset=0\nlast_sync_epoch=3\n")
    assert (sc.size_bytes, sc.last_sync_epoch) == (4, 3)


@pytest.mark.parametrize("text", [
    "magic=SWIN2\nsize_bytes=4\ndisp_unit=1\nfile_offset=0\nlast_sync_epoch=0\n",
    "magic=SWIN1\nsize_bytes=4\ndisp_unit=1\nlast_sync_epoch=0\n",
    "magic=SWIN1\nsize_bytes=four\ndisp_unit=1\nfile_offset=0\nlast_sync_epoch=0\n",
])
def test_sidecar_corrupt(text):
    with pytest.raises(SidecarCorrupt):
        WindowSidecar.parse(text)


def test_read_your_writes(wpath):
    m = map_create(wpath, 0, 4096, QUIET)
    write_bytes(m, 0, bytes([1, 2, 3]))
    assert read_bytes(m, 0, 3) == bytes([1, 2, 3])
    data = os.urandom(1000)
    write_bytes(m, 1234, data)
    assert read_bytes(m, 1234, 1000) == data
    m.close_with_flush()


def test_out_of_range(wpath):
    m = map_create(wpath, 0, 4096, QUIET)
    with pytest.raises(OutOfRange):
        write_bytes(m, 4096, b"x")
    with pytest.raises(OutOfRange):
        read_bytes(m, 4095, 2)
    with pytest.raises(OutOfRange):
        sync_range(m, 0, 4097)
    with pytest.raises(IndexError):
        read_bytes(m, -1, 1)
    m.close_with_flush()


def test_sync_makes_bytes_durable(wpath):
    m = map_create(wpath, 0, 8192, QUIET)
    pattern = os.urandom(8192)
    write_bytes(m, 0, pattern)
    assert m.dirty_bytes == 8192
    sync_range(m, 0, 8192, wait=True)
    assert m.dirty_bytes == 0
    with open(wpath, "rb") as fh:
        assert fh.read() == pattern
    m.close_with_flush()


def test_sync_epoch_counts(wpath):
    m = map_create(wpath, 0, 4096, QUIET)
    sync_range(m, 0, 4096, wait=True)
    sync_range(m, 0, 4096, wait=True)
    assert m.last_sync_epoch == 2
    assert WindowSidecar.load(str(wpath) + ".winmeta").last_sync_epoch == 2
    sync_range(m, 0, 100, wait=True)  # partial syncs do not advance the epoch
    assert m.last_sync_epoch == 2
    m.close_with_flush()


def test_async_sync_returns_and_flushes(wpath):
    m = map_create(wpath, 0, 3 * CHUNK, QUIET)
    write_bytes(m, 0, b"\x07" * (3 * CHUNK))
    sync_range(m, 0, 3 * CHUNK, wait=False)
    for _ in range(200):
        if m.dirty_bytes == 0:
            break
        time.sleep(0.01)
    assert m.dirty_bytes == 0
    m.close_with_flush()


def test_close_semantics(wpath):
    m = map_create(wpath, 0, 4096, QUIET)
    write_bytes(m, 10, b"abc")
    close_with_flush(m)
    with open(wpath, "rb") as fh:
        assert fh.read()[10:13] == b"abc"
    assert WindowSidecar.load(str(wpath) + ".winmeta").last_sync_epoch == 1
    with pytest.raises(UseAfterClose):
        close_with_flush(m)
    with pytest.raises(UseAfterClose):
        read_bytes(m, 0, 1)


def test_close_clean_mapping_still_advances_epoch(wpath):
    m = map_create(wpath, 0, 4096, QUIET)
    sync_range(m, 0, 4096)
    m.close_with_flush()
    assert WindowSidecar.load(str(wpath) + ".winmeta").last_sync_epoch == 2


def test_attach_after_abandon(wpath):
    m = map_create(wpath, 4096, 3 * CHUNK + 100, QUIET, disp_unit=4)
    pattern = os.urandom(m.length)
    write_bytes(m, 0, pattern)
    sync_range(m, 0, m.length)
    m.abandon()
    r = map_attach(wpath)
    assert (r.length, r.file_offset, r.last_sync_epoch) == (3 * CHUNK + 100, 4096, 1)
    assert read_bytes(r, 0, r.length) == pattern
    r.close_with_flush()


def test_attach_errors(wpath):
    map_create(wpath, 0, 4096).close_with_flush()
    with pytest.raises(LengthMismatch):
        map_attach(wpath, 100)
    os.remove(str(wpath) + ".winmeta")
    with pytest.raises(SidecarMissing):
        map_attach(wpath)


def test_attach_bad_magic(wpath):
    map_create(wpath, 0, 4096).close_with_flush()
    meta = str(wpath) + ".winmeta"
    with open(meta, "w") as fh:
        fh.write("magic=NOPE\n")
    with pytest.raises(SidecarCorrupt):
        map_attach(wpath)


def test_attach_truncated_file(wpath):
    map_create(wpath, 0, 8192).close_with_flush()
    os.truncate(wpath, 100)
    with pytest.raises(IoFailure):
        map_attach(wpath)


def test_recreate_zeroes_stale_bytes(wpath):
    m = map_create(wpath, 0, 4096)
    write_bytes(m, 0, b"\xff" * 4096)
    m.close_with_flush()
    m = map_create(wpath, 0, 4096)
    assert read_bytes(m, 0, 4096) == bytes(4096)
    m.close_with_flush()


def test_eager_mode_never_leaves_dirty_bytes(wpath):
    m = map_create(wpath, 0, 4 * CHUNK, QUIET.with_mode("eager"))
    write_bytes(m, 100, b"x" * 5000)
    assert m.dirty_bytes == 0
    with open(wpath, "rb") as fh:
        fh.seek(100)
        assert fh.read(5000) == b"x" * 5000
    m.close_with_flush()


def test_skip_sync_fault_is_scoped(wpath):
    m = map_create(wpath, 0, 4096, QUIET)
    write_bytes(m, 0, b"z")
    with storage.inject_faults({"skip-sync"}):
        sync_range(m, 0, 4096)
        assert m.last_sync_epoch == 0 and m.dirty_bytes == CHUNK
    sync_range(m, 0, 4096)
    assert m.last_sync_epoch == 1
    with pytest.raises(ValueError):
        with storage.inject_faults({"no-such-fault"}):
            pass
    m.close_with_flush()


# -- dirty accounting against a scalar re-simulation -----------------------------

def _chunk_bytes(chunks, length):
    last = length - (length - 1) // CHUNK * CHUNK
    return sum(last if c == (length - 1) // CHUNK else CHUNK for c in chunks)


op_strategy = st.one_of(
    st.tuples(st.just("write"), st.integers(0, 20_000), st.integers(0, 9000)),
    st.tuples(st.just("sync"), st.integers(0, 20_000), st.integers(0, 9000)),
    st.tuples(st.just("sync_all"), st.just(0), st.just(0)),
)


@settings(max_examples=60, deadline=None)
@given(length=st.integers(1, 20_000), ops=st.lists(op_strategy, max_size=30))
def test_dirty_accounting_matches_oracle(tmp_path_factory, length, ops):
    path = tmp_path_factory.mktemp("acct") / "w.dat"
    m = map_create(path, 0, length, QUIET)
    dirty = set()
    epoch = 0
    try:
        for kind, off, cnt in ops:
            off %= length
            cnt = min(cnt, length - off)
            if kind == "write":
                write_bytes(m, off, b"\x01" * cnt)
                if cnt:
                    dirty |= set(range(off // CHUNK, (off + cnt - 1) // CHUNK + 1))
            elif kind == "sync":
                sync_range(m, off, cnt)
                if off == 0 and cnt == length:
                    dirty.clear()
                    epoch += 1
                elif cnt:
                    dirty -= set(range(off // CHUNK, (off + cnt - 1) // CHUNK + 1))
            else:
                sync_range(m, 0, length)
                dirty.clear()
                epoch += 1
            assert m.dirty_bytes == _chunk_bytes(dirty, length)
            assert 0 <= m.dirty_bytes <= length
            assert m.last_sync_epoch == epoch
    finally:
        m.close_with_flush()


def _stall_oracle(writes, limit, length):
    """Single-threaded model: write-back starts only at the limit and drains all."""
    dirty, stalls = set(), 0
    for off, cnt in writes:
        dirty |= set(range(off // CHUNK, (off + cnt - 1) // CHUNK + 1))
        if _chunk_bytes(dirty, length) >= limit:
            stalls += 1
            dirty.clear()
    return stalls


def _stalls(path, writes, limit, length):
    policy = FlushPolicy(limit, limit, 10**9, "deferred")
    m = map_create(path, 0, length, policy)
    for off, cnt in writes:
        write_bytes(m, off, b"\x02" * cnt)
    stalls = m.stall_count
    m.close_with_flush()
    return stalls


def test_small_limit_blocks_writer(wpath):
    writes = [(i * 512, 512) for i in range(4)]
    assert _stall_oracle(writes, 1024, 2048) >= 1
    assert _stalls(wpath, writes, 1024, 2048) == _stall_oracle(writes, 1024, 2048)


write_strategy = st.lists(st.tuples(st.integers(0, 64 * CHUNK - 1), st.integers(1, 3 * CHUNK)),
                          min_size=1, max_size=40)


@settings(max_examples=40, deadline=None)
@given(writes=write_strategy, limit=st.integers(1, 16 * CHUNK))
def test_stall_count_matches_oracle(tmp_path_factory, writes, limit):
    length = 64 * CHUNK
    writes = [(off, min(cnt, length - off)) for off, cnt in writes]
    path = tmp_path_factory.mktemp("stall") / "w.dat"
    assert _stalls(path, writes, limit, length) == _stall_oracle(writes, limit, length)


@settings(max_examples=40, deadline=None)
@given(writes=write_strategy, limits=st.lists(st.integers(1, 32 * CHUNK), min_size=2, max_size=4))
def test_stalls_non_increasing_in_limit(tmp_path_factory, writes, limits):
    length = 64 * CHUNK
    writes = [(off, min(cnt, length - off)) for off, cnt in writes]
    counts = []
    for limit in sorted(limits):
        path = tmp_path_factory.mktemp("mono") / "w.dat"
        counts.append(_stalls(path, writes, limit, length))
    assert counts == sorted(counts, reverse=True)


def test_background_flusher_drains_without_explicit_sync(wpath):
    policy = FlushPolicy(1 << 30, CHUNK, 10**9, "deferred")
    m = map_create(wpath, 0, 8 * CHUNK, policy)
    write_bytes(m, 0, np.ones(8 * CHUNK, np.uint8))
    deadline = time.monotonic() + 5
    while m.dirty_bytes and time.monotonic() < deadline:
        time.sleep(0.01)
    assert m.dirty_bytes == 0 and m.flush_count >= 1 and m.stall_count == 0
    m.close_with_flush()


def test_interval_flush(wpath):
    policy = FlushPolicy(1 << 30, 1 << 30, 50, "deferred")
    m = map_create(wpath, 0, CHUNK, policy)
    write_bytes(m, 0, b"q")
    deadline = time.monotonic() + 5
    while m.dirty_bytes and time.monotonic() < deadline:
        time.sleep(0.01)
    assert m.dirty_bytes == 0
    m.close_with_flush()
