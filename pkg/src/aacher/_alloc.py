"""glibc allocator tuning for the training hot loop.

The networks allocate many short-lived ~1 MB temporaries per step. By default
glibc serves those with fresh mmap pages and returns them on free, so every
temporary pays page faults. Raising the mmap/trim thresholds keeps freed
blocks in the heap for reuse. No-op off glibc.
"""
import ctypes
import ctypes.util

_M_TRIM_THRESHOLD = -1
_M_TOP_PAD = -2
_M_MMAP_THRESHOLD = -3
_done = False


def keep_freed_memory(limit: int = 256 << 20) -> bool:
    global _done
    if _done:
        return True
    name = ctypes.util.find_library("c")
    try:
        libc = ctypes.CDLL(name)
        mallopt = libc.mallopt
    except (OSError, AttributeError, TypeError):
        return False
    ok = all(mallopt(opt, val) == 1 for opt, val in
             ((_M_MMAP_THRESHOLD, limit), (_M_TRIM_THRESHOLD, 2 * limit), (_M_TOP_PAD, 16 << 20)))
    _done = ok
    return ok
