"""One-sided communication windows backed by memory, storage, or both."""

from .errors import *  # noqa: F401,F403
from .rma import accumulate, fence, flush, get, lock, put, unlock
from .runtime import HarnessResult, RankContext, WindowRegistry, barrier, spawn_ranks
from .storage import (
    FlushPolicy,
    StorageMapping,
    WindowSidecar,
    close_with_flush,
    inject_faults,
    map_attach,
    map_create,
    sync_range,
)
from .window import (
    HintSet,
    Hybrid,
    Memory,
    Storage,
    WindowDescriptor,
    attr_get,
    attr_set,
    win_allocate,
    win_free,
)

__version__ = "0.1.0"
