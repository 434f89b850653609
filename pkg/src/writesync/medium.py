"""Synchronizable units: files or pages that can be dirtied and timed-synced.

Two backends share one handle interface:

``simulated``
    A write-buffer model driven by virtual time. Every handle carries its
    own virtual clock (one clock per agent); all handles attached to one
    :class:`SimulatedMedium` share the per-unit dirty state, the noise RNG
    and a lock that serialises mutations.

``posix``
    Real files (``unit_<i>.dat``) or pages of one mapped file
    (``pages.dat``) synced with fdatasync/fsync/sync/msync/F_FULLFSYNC and
    timed with the monotonic nanosecond clock. Sender handles open units
    read-only; the receiver creates and writes them.
"""

from __future__ import annotations

import ctypes
import ctypes.util
import logging
import os
import sys
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

log = logging.getLogger(__name__)

BACKENDS = ("posix", "simulated")
MODES = ("file", "page")
ROLES = ("sender", "receiver")
PRIMITIVES = ("sync_all", "fsync", "fdatasync", "msync", "fcntl_fullfsync")
FILE_PRIMITIVES = ("sync_all", "fsync", "fdatasync", "fcntl_fullfsync")
# primitives that also flush metadata and pay the extra simulated cost
METADATA_PRIMITIVES = ("sync_all", "fsync", "fcntl_fullfsync")

FILE_DESCRIPTOR_BUDGET = 1022
PAGES_FILE = "pages.dat"


class MediumError(Exception):
    """Base class for medium failures."""


class MediumConfigError(MediumError, ValueError):
    pass


class RoleError(MediumError):
    """Operation not permitted for the handle's role."""


class PrimitiveError(MediumError):
    """Primitive unavailable or incompatible with the medium mode."""


def unit_file_name(index: int) -> str:
    return f"unit_{index}.dat"


def page_capacity(file_size_bytes: int, page_size_bytes: int = 4096) -> int:
    """Bits a page-mode medium of the given size can carry (one page per bit)."""
    return file_size_bytes // page_size_bytes


@dataclass(frozen=True)
class SimParams:
    t_b_ns: int = 918_000
    t_u_ns: int = 64_000
    noise_frac: float = 0.05
    writeback_period_ns: int = 30_000_000_000
    metadata_extra_ns: int = 2_000_000
    write_cost_ns: int = 1_000
    seed: int = 0

    def __post_init__(self):
        # t_u == t_b is allowed: it models a medium with no observable gap
        if not 0 <= self.t_u_ns <= self.t_b_ns:
            raise MediumConfigError("simulator needs 0 <= t_u_ns <= t_b_ns")
        if self.noise_frac < 0:
            raise MediumConfigError("noise_frac must be >= 0")
        if self.writeback_period_ns <= 0:
            raise MediumConfigError("writeback_period_ns must be > 0")
        if self.metadata_extra_ns < 0 or self.write_cost_ns < 0:
            raise MediumConfigError("costs must be >= 0")


@dataclass(frozen=True)
class MediumConfig:
    backend: str = "simulated"
    mode: str = "file"
    unit_count: int = 1
    primitive: str = "fdatasync"
    dir_path: Optional[str] = None
    page_size_bytes: int = 4096
    file_size_bytes: Optional[int] = None  # default: one page per file, or unit_count pages
    sim: SimParams = field(default_factory=SimParams)

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise MediumConfigError(f"unknown backend {self.backend!r}")
        if self.mode not in MODES:
            raise MediumConfigError(f"unknown mode {self.mode!r}")
        if self.primitive not in PRIMITIVES:
            raise MediumConfigError(f"unknown primitive {self.primitive!r}")
        check_primitive_mode(self.primitive, self.mode)
        if self.unit_count <= 0:
            raise MediumConfigError("empty medium: unit_count must be positive")
        if self.page_size_bytes <= 0:
            raise MediumConfigError("page_size_bytes must be positive")
        if self.backend == "posix" and self.mode == "file" and self.unit_count > FILE_DESCRIPTOR_BUDGET:
            raise MediumConfigError(
                f"descriptor budget: file mode is limited to {FILE_DESCRIPTOR_BUDGET} units per process"
            )
        if self.backend == "posix" and not self.dir_path:
            raise MediumConfigError("posix backend needs dir_path")
        if self.file_size_bytes is None:
            size = self.page_size_bytes * (self.unit_count if self.mode == "page" else 1)
            object.__setattr__(self, "file_size_bytes", size)
        if self.file_size_bytes <= 0:
            raise MediumConfigError("file_size_bytes must be positive")
        if self.mode == "page" and self.file_size_bytes < self.unit_count * self.page_size_bytes:
            raise MediumConfigError("page mode needs file_size_bytes >= unit_count * page_size_bytes")

    def with_units(self, unit_count: int) -> "MediumConfig":
        size = None if self.mode == "page" else self.file_size_bytes
        if self.mode == "page" and self.file_size_bytes >= unit_count * self.page_size_bytes:
            size = self.file_size_bytes
        return replace(self, unit_count=unit_count, file_size_bytes=size)


def check_primitive_mode(primitive: str, mode: str) -> None:
    if primitive == "msync" and mode != "page":
        raise PrimitiveError("msync needs page mode")
    if primitive != "msync" and mode == "page":
        raise PrimitiveError(f"{primitive} needs file mode; page mode syncs with msync")


# -- simulated backend -------------------------------------------------------


class SimulatedMedium:
    """Shared write-buffer state for any number of simulated handles.

    A dirty unit stays cached until it is synced or until it has been dirty
    for ``writeback_period_ns``, after which the background flusher is
    deemed to have written it back. The flusher is applied lazily whenever
    a unit is inspected.
    """

    def __init__(self, config: MediumConfig):
        if config.backend != "simulated":
            raise MediumConfigError("SimulatedMedium needs backend='simulated'")
        self.config = config
        self.params = config.sim
        n = config.unit_count
        self._dirty = np.zeros(n, dtype=bool)
        self._dirty_since = np.zeros(n, dtype=np.int64)
        self._rng = np.random.default_rng(self.params.seed)
        self._lock = threading.Lock()
        self.now_ns = 0  # latest operation start seen by any handle

    def open(self, role: str) -> "SimHandle":
        return SimHandle(self, role)

    def _draw(self, mean_ns: int) -> int:
        if self.params.noise_frac == 0:
            return int(mean_ns)
        x = mean_ns * (1.0 + self.params.noise_frac * self._rng.standard_normal())
        return max(0, int(round(x)))

    def _fresh(self, unit: int, now: int) -> bool:
        if not self._dirty[unit]:
            return False
        if now - self._dirty_since[unit] >= self.params.writeback_period_ns:
            self._dirty[unit] = False
            return False
        return True

    def _mark(self, now: int) -> None:
        if now > self.now_ns:
            self.now_ns = now

    def dirty(self, unit: int, now: int) -> None:
        with self._lock:
            self._mark(now)
            self._dirty[unit] = True
            self._dirty_since[unit] = now

    def sync(self, units: Sequence[int], primitive: str, now: int) -> List[int]:
        """Sync each of ``units`` as if issued concurrently at ``now``."""
        p = self.params
        extra = p.metadata_extra_ns if primitive in METADATA_PRIMITIVES else 0
        with self._lock:
            self._mark(now)
            if primitive == "sync_all":
                cached = any(self._fresh(u, now) for u in range(self.config.unit_count))
                self._dirty[:] = False
                lat = self._draw(p.t_b_ns + extra) if cached else self._draw(p.t_u_ns)
                return [lat for _ in units]
            out = []
            for u in units:
                if self._fresh(u, now):
                    out.append(self._draw(p.t_b_ns + extra))
                    self._dirty[u] = False
                else:
                    out.append(self._draw(p.t_u_ns))
            return out

    def unit_state(self, unit: int, now: int) -> Tuple[bool, int]:
        with self._lock:
            fresh = self._fresh(unit, now)
            return fresh, int(self._dirty_since[unit])


class SimHandle:
    backend = "simulated"

    def __init__(self, medium: SimulatedMedium, role: str):
        if role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}")
        self.medium = medium
        self.config = medium.config
        self.role = role
        self.virtual_now_ns = 0
        self.closed = False

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self) -> None:
        self.closed = True

    def _check_unit(self, unit: int) -> None:
        if not 0 <= unit < self.config.unit_count:
            raise IndexError(f"unit {unit} out of range 0..{self.config.unit_count - 1}")

    def now_ns(self) -> int:
        return self.virtual_now_ns

    def dirty(self, unit: int) -> None:
        if self.role != "receiver":
            raise RoleError("only the receiver writes to units")
        self._check_unit(unit)
        self.medium.dirty(unit, self.virtual_now_ns)
        self.virtual_now_ns += self.medium.params.write_cost_ns

    def sync_unit(self, unit: int, primitive: Optional[str] = None) -> int:
        return self.sync_many([unit], primitive)[0]

    def sync_many(self, units: Sequence[int], primitive: Optional[str] = None) -> List[int]:
        """Concurrent syncs: the clock advances by the slowest one."""
        primitive = primitive or self.config.primitive
        check_primitive_mode(primitive, self.config.mode)
        for u in units:
            self._check_unit(u)
        lats = self.medium.sync(list(units), primitive, self.virtual_now_ns)
        self.virtual_now_ns += max(lats, default=0)
        return lats

    def advance_clock(self, dt_ns: int) -> None:
        if dt_ns < 0:
            raise ValueError("virtual time cannot go backwards")
        self.virtual_now_ns += int(dt_ns)

    def sleep_until(self, t_ns: int) -> None:
        if t_ns > self.virtual_now_ns:
            self.virtual_now_ns = int(t_ns)

    def unit_state(self, unit: int) -> Tuple[bool, int]:
        """(dirty, dirty_since_ns) with the write-back deadline applied."""
        self._check_unit(unit)
        return self.medium.unit_state(unit, self.virtual_now_ns)


# -- posix backend -----------------------------------------------------------

_PROT_READ, _PROT_WRITE, _MAP_SHARED = 0x1, 0x2, 0x1
_MS_SYNC = 0x10 if sys.platform == "darwin" else 0x4
_libc = None


def _get_libc():
    global _libc
    if _libc is None:
        lib = ctypes.CDLL(ctypes.util.find_library("c"), use_errno=True)
        lib.mmap.restype = ctypes.c_void_p
        lib.mmap.argtypes = [ctypes.c_void_p, ctypes.c_size_t, ctypes.c_int, ctypes.c_int, ctypes.c_int, ctypes.c_long]
        lib.munmap.argtypes = [ctypes.c_void_p, ctypes.c_size_t]
        lib.msync.argtypes = [ctypes.c_void_p, ctypes.c_size_t, ctypes.c_int]
        _libc = lib
    return _libc


def available_primitives() -> List[str]:
    """Primitives this host can issue, in the order the CLI prefers them."""
    out = []
    if hasattr(os, "fdatasync"):
        out.append("fdatasync")
    try:
        if hasattr(_get_libc(), "msync"):
            out.append("msync")
    except OSError:
        pass
    try:
        import fcntl

        if hasattr(fcntl, "F_FULLFSYNC"):
            out.append("fcntl_fullfsync")
    except ImportError:
        pass
    out.append("fsync")
    if hasattr(os, "sync"):
        out.append("sync_all")
    return out


def precise_sleep_until(t_ns: int) -> None:
    """Sleep on the monotonic clock, spinning for the final stretch."""
    while True:
        remaining = t_ns - time.monotonic_ns()
        if remaining <= 0:
            return
        if remaining > 300_000:
            time.sleep((remaining - 200_000) / 1e9)


class PosixHandle:
    backend = "posix"

    def __init__(self, config: MediumConfig, role: str):
        if config.backend != "posix":
            raise MediumConfigError("PosixHandle needs backend='posix'")
        if role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}")
        self.config = config
        self.role = role
        self.closed = False
        self._fds: List[int] = []
        self._addr: Optional[int] = None
        self._map_len = 0
        self._pool: Optional[ThreadPoolExecutor] = None
        self._counter = 0
        root = Path(config.dir_path)
        if not root.is_dir():
            raise MediumError(f"directory {root} does not exist")
        try:
            if config.mode == "file":
                self._open_files(root)
            else:
                self._map_pages(root)
        except BaseException:
            self.close()
            raise
        if role == "receiver":
            self._flush_everything()

    def _open_path(self, path: Path, size: int) -> int:
        if self.role == "sender":
            if not path.exists():
                raise MediumError(f"{path} is missing; the sender never creates unit files")
            return os.open(path, os.O_RDONLY)
        fd = os.open(path, os.O_RDWR | os.O_CREAT, 0o644)
        if os.fstat(fd).st_size < size:
            os.ftruncate(fd, size)
        return fd

    def _open_files(self, root: Path) -> None:
        for i in range(self.config.unit_count):
            try:
                self._fds.append(self._open_path(root / unit_file_name(i), self.config.file_size_bytes))
            except OSError as e:
                if e.errno == 24:  # EMFILE
                    raise MediumError("descriptor budget exceeded") from e
                raise

    def _map_pages(self, root: Path) -> None:
        fd = self._open_path(root / PAGES_FILE, self.config.file_size_bytes)
        self._fds.append(fd)
        length = self.config.unit_count * self.config.page_size_bytes
        if os.fstat(fd).st_size < length:
            raise MediumError(f"{PAGES_FILE} is shorter than {length} bytes")
        prot = _PROT_READ if self.role == "sender" else _PROT_READ | _PROT_WRITE
        libc = _get_libc()
        addr = libc.mmap(None, length, prot, _MAP_SHARED, fd, 0)
        if addr in (None, ctypes.c_void_p(-1).value):
            err = ctypes.get_errno()
            raise MediumError(f"mmap failed: {os.strerror(err)}")
        self._addr, self._map_len = addr, length

    def _flush_everything(self) -> None:
        if self.config.mode == "file":
            for fd in self._fds:
                os.fdatasync(fd) if hasattr(os, "fdatasync") else os.fsync(fd)
        else:
            _get_libc().msync(self._addr, self._map_len, _MS_SYNC)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        if self._pool is not None:
            self._pool.shutdown(wait=True)
        if self._addr is not None:
            _get_libc().munmap(self._addr, self._map_len)
            self._addr = None
        for fd in self._fds:
            os.close(fd)
        self._fds = []

    def _check_unit(self, unit: int) -> None:
        if not 0 <= unit < self.config.unit_count:
            raise IndexError(f"unit {unit} out of range 0..{self.config.unit_count - 1}")

    def now_ns(self) -> int:
        return time.monotonic_ns()

    def fileno(self, unit: int = 0) -> int:
        return self._fds[unit if self.config.mode == "file" else 0]

    def dirty(self, unit: int) -> None:
        if self.role != "receiver":
            raise RoleError("only the receiver writes to units")
        self._check_unit(unit)
        self._counter = (self._counter + 1) & 0xFF
        value = bytes([self._counter])
        if self.config.mode == "file":
            os.pwrite(self._fds[unit], value, 0)
        else:
            ctypes.memmove(self._addr + unit * self.config.page_size_bytes, value, 1)

    def _issue(self, unit: int, primitive: str) -> None:
        if primitive == "fdatasync":
            os.fdatasync(self._fds[unit])
        elif primitive == "fsync":
            os.fsync(self._fds[unit])
        elif primitive == "sync_all":
            os.sync()
        elif primitive == "fcntl_fullfsync":
            import fcntl

            if not hasattr(fcntl, "F_FULLFSYNC"):
                raise PrimitiveError("F_FULLFSYNC is not available on this platform")
            fcntl.fcntl(self._fds[unit], fcntl.F_FULLFSYNC)
        else:
            page = self.config.page_size_bytes
            if _get_libc().msync(self._addr + unit * page, page, _MS_SYNC) != 0:
                raise MediumError(f"msync failed: {os.strerror(ctypes.get_errno())}")

    def sync_unit(self, unit: int, primitive: Optional[str] = None) -> int:
        primitive = primitive or self.config.primitive
        check_primitive_mode(primitive, self.config.mode)
        self._check_unit(unit)
        t0 = time.monotonic_ns()
        self._issue(unit, primitive)
        return time.monotonic_ns() - t0

    def sync_many(self, units: Sequence[int], primitive: Optional[str] = None) -> List[int]:
        """Sync ``units`` from a pool of worker threads, one unit per worker."""
        if self._pool is None or self._pool._max_workers < len(units):
            if self._pool is not None:
                self._pool.shutdown(wait=True)
            self._pool = ThreadPoolExecutor(max_workers=max(1, len(units)))
        futures = [self._pool.submit(self.sync_unit, u, primitive) for u in units]
        return [f.result() for f in futures]

    def advance_clock(self, dt_ns: int) -> None:
        raise MediumError("posix media run on the real clock; sleep instead")

    def sleep_until(self, t_ns: int) -> None:
        precise_sleep_until(t_ns)


MediumHandle = (SimHandle, PosixHandle)


def open_medium(config: MediumConfig, role: str, attach_to: Optional[SimHandle] = None):
    """Open a handle on ``config``.

    For the simulated backend a fresh :class:`SimulatedMedium` is created
    unless ``attach_to`` names an existing handle whose medium is shared.
    """
    if role not in ROLES:
        raise ValueError(f"role must be one of {ROLES}")
    if config.backend == "simulated":
        medium = attach_to.medium if attach_to is not None else SimulatedMedium(config)
        return medium.open(role)
    return PosixHandle(config, role)
