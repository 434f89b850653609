"""Sender (Trojan) and receiver (Spy) procedures for the six strategies.

Every procedure is a generator that yields medium operations (:class:`Dirty`,
:class:`Sync`, :class:`Sleep`, ...) and receives their results. The same
procedure therefore runs

* against one real handle with :func:`drive` (one process per role), or
* against a shared simulated medium with :func:`run_coupled`, which steps
  whichever agent has the earliest virtual clock. That gives a deterministic
  discrete-event schedule with both agents on one timeline.

Bits follow the channel convention: the receiver decodes 1 when its sync is
fast, i.e. when the sender's sync cleaned the unit first.

Rounds are bracketed by a rendezvous on two reserved units placed after the
data units: the Spy dirties ``ready`` to start a round and ``end`` to close
it; the Trojan learns about either by seeing a cached-class sync latency.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Generator, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import codec
from .calibration import CalibrationResult, midpoint_threshold
from .medium import MediumConfig, SimParams, SimHandle, open_medium

log = logging.getLogger(__name__)

DEFAULT_HANDSHAKE_TIMEOUT_NS = 60_000_000_000
DEFAULT_POLL_NS = 10_000
MAX_END_POLL_NS = 50_000_000


class HandshakeTimeout(TimeoutError):
    pass


class LagWarning(UserWarning):
    """OneShot receiver started measuring after the lag budget."""


# -- operations --------------------------------------------------------------


@dataclass(frozen=True)
class Dirty:
    unit: int


@dataclass(frozen=True)
class Sync:
    unit: int
    primitive: Optional[str] = None


@dataclass(frozen=True)
class SyncMany:
    units: Tuple[int, ...]
    primitive: Optional[str] = None


@dataclass(frozen=True)
class Sleep:
    ns: int


@dataclass(frozen=True)
class SleepUntil:
    t_ns: int


@dataclass(frozen=True)
class Now:
    pass


Procedure = Generator[object, object, object]


def execute(op, handle):
    if isinstance(op, Sync):
        return handle.sync_unit(op.unit, op.primitive)
    if isinstance(op, Now):
        return handle.now_ns()
    if isinstance(op, Dirty):
        return handle.dirty(op.unit)
    if isinstance(op, SyncMany):
        return handle.sync_many(op.units, op.primitive)
    if isinstance(op, Sleep):
        if op.ns > 0:
            handle.sleep_until(handle.now_ns() + op.ns)
        return None
    if isinstance(op, SleepUntil):
        handle.sleep_until(op.t_ns)
        return None
    raise TypeError(f"unknown operation {op!r}")


def drive(proc: Procedure, handle):
    """Run one procedure to completion against ``handle``; return its value."""
    try:
        op = next(proc)
        while True:
            op = proc.send(execute(op, handle))
    except StopIteration as stop:
        return stop.value


def run_coupled(
    sender: Procedure,
    receiver: Procedure,
    sender_handle: SimHandle,
    receiver_handle: SimHandle,
    stop_with_receiver: bool = False,
):
    """Interleave two procedures on one simulated medium.

    The agent whose clock is earliest executes its next operation; the
    receiver goes first on ties. Medium state changes take effect at the
    start of the operation. Returns ``(sender_value, receiver_value)``.

    With ``stop_with_receiver`` the sender is closed as soon as the receiver
    returns, and its value is ``None`` unless it had already finished. A
    sender that missed a rendezvous then cannot stall the run.
    """
    if sender_handle.medium is not receiver_handle.medium:
        raise ValueError("coupled agents must share one simulated medium")
    agents = [[receiver, receiver_handle, None, False, None], [sender, sender_handle, None, False, None]]
    for a in agents:
        try:
            a[2] = next(a[0])
        except StopIteration as stop:
            a[3], a[4] = True, stop.value
    while True:
        live = [a for a in agents if not a[3]]
        if not live:
            break
        a = min(live, key=lambda x: x[1].virtual_now_ns)
        result = execute(a[2], a[1])
        try:
            a[2] = a[0].send(result)
        except StopIteration as stop:
            a[3], a[4] = True, stop.value
        if stop_with_receiver and agents[0][3] and not agents[1][3]:
            agents[1][0].close()
            break
    return agents[1][4], agents[0][4]


def slot_wait(start_ns: int, slot_ns: int, clock) -> bool:
    """Block until ``start_ns + slot_ns`` on ``clock``; True if already late."""
    deadline = start_ns + slot_ns
    if clock.now_ns() > deadline:
        return True
    clock.sleep_until(deadline)
    return False


def _slot_wait(start_ns: int, slot_ns: int):
    deadline = start_ns + slot_ns
    now = yield Now()
    if now > deadline:
        return True
    yield SleepUntil(deadline)
    return False


# -- configuration -----------------------------------------------------------


@dataclass(frozen=True)
class Timing:
    """Latency estimates both parties agree on before a round."""

    t_b_ns: int
    t_u_ns: int
    threshold_ns: int
    overhead_ns: int = 0  # per-slot software slack on real clocks
    # real disks have a long tail of slow clean syncs; demand a clearly cached
    # latency before treating a poll as a rendezvous signal
    strict_signal: bool = False

    @classmethod
    def from_calibration(cls, cal: CalibrationResult, overhead_ns: int = 0, strict_signal: bool = False) -> "Timing":
        return cls(cal.t_b_hat_ns, cal.t_u_hat_ns, cal.threshold_ns, overhead_ns, strict_signal)

    @property
    def signal_threshold_ns(self) -> int:
        if not self.strict_signal:
            return self.threshold_ns
        return max(self.threshold_ns, (self.threshold_ns + self.t_b_ns) // 2)

    @classmethod
    def from_sim(cls, params: SimParams, primitive: str = "fdatasync") -> "Timing":
        extra = params.metadata_extra_ns if primitive in ("fsync", "sync_all", "fcntl_fullfsync") else 0
        t_b = params.t_b_ns + extra
        return cls(t_b, params.t_u_ns, midpoint_threshold(t_b, params.t_u_ns))


def as_timing(t: Union[Timing, CalibrationResult]) -> Timing:
    return Timing.from_calibration(t) if isinstance(t, CalibrationResult) else t


@dataclass(frozen=True)
class SingleFile:
    primitive: str = "fdatasync"
    slot_ns: Optional[int] = None
    receiver_sleep_ns: Optional[int] = None
    kind = "single_file"

    def __post_init__(self):
        if self.primitive not in ("sync_all", "fsync", "fdatasync", "fcntl_fullfsync"):
            raise ValueError(f"SingleFile cannot use {self.primitive!r}")


@dataclass(frozen=True)
class SinglePage:
    slot_ns: Optional[int] = None
    receiver_sleep_ns: Optional[int] = None
    sync_len_bytes: int = 4096
    kind = "single_page"


@dataclass(frozen=True)
class MultiBit:
    files: int = 4
    workers: int = 4
    slot_ns: Optional[int] = None
    receiver_sleep_ns: Optional[int] = None
    kind = "multibit"

    def __post_init__(self):
        if self.files != 4:
            raise ValueError("MultiBit carries 2-bit symbols and needs exactly 4 files")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass(frozen=True)
class AsyncSlot:
    units: int = 8
    mode: str = "file"
    slot_ns: Optional[int] = None
    kind = "async_slot"

    def __post_init__(self):
        if self.units < 2:
            raise ValueError("AsyncSlot needs at least 2 units")


@dataclass(frozen=True)
class AsyncFree:
    units: int = 500
    t_s_ns: int = 20_000
    resync_period_bits: Optional[int] = None
    initial_sleep_ns: int = 3_000_000
    prng_seed: int = 0
    sync_seq: str = codec.DEFAULT_SYNC_SEQ
    kind = "async_free"

    def __post_init__(self):
        if self.units < 1 or self.t_s_ns < 0 or self.initial_sleep_ns < 0:
            raise ValueError("invalid AsyncFree parameters")
        if self.resync_period_bits is not None and self.resync_period_bits < 1:
            raise ValueError("resync_period_bits must be >= 1")


@dataclass(frozen=True)
class OneShot:
    units: Optional[int] = None  # defaults to the payload length
    mode: str = "page"
    max_receiver_lag_ns: int = 20_000_000_000
    receiver_lag_ns: Optional[int] = None  # measure start after the first dirty
    kind = "oneshot"


StrategyConfig = Union[SingleFile, SinglePage, MultiBit, AsyncSlot, AsyncFree, OneShot]
STRATEGY_KINDS = {c.kind: c for c in (SingleFile, SinglePage, MultiBit, AsyncSlot, AsyncFree, OneShot)}


def data_units(cfg: StrategyConfig, n_bits: int) -> int:
    if isinstance(cfg, (SingleFile, SinglePage)):
        return 1
    if isinstance(cfg, MultiBit):
        return cfg.files
    if isinstance(cfg, (AsyncSlot, AsyncFree)):
        return cfg.units
    units = cfg.units if cfg.units is not None else n_bits
    if units < n_bits:
        raise ValueError(f"OneShot needs one unit per bit: {units} units < {n_bits} bits")
    return max(units, 1)


def required_units(cfg: StrategyConfig, n_bits: int) -> int:
    """Data units plus the two reserved handshake units."""
    return data_units(cfg, n_bits) + 2


def strategy_mode(cfg: StrategyConfig) -> str:
    if isinstance(cfg, SinglePage):
        return "page"
    if isinstance(cfg, (AsyncSlot, OneShot)):
        return cfg.mode
    return "file"


def medium_for(cfg: StrategyConfig, base: MediumConfig, n_bits: int) -> MediumConfig:
    """``base`` with the mode, primitive and unit count ``cfg`` needs."""
    from dataclasses import replace

    mode = strategy_mode(cfg)
    if mode == "page":
        primitive = "msync"
    elif isinstance(cfg, SingleFile):
        primitive = cfg.primitive
    else:
        primitive = base.primitive if base.primitive in ("fdatasync", "fsync", "fcntl_fullfsync", "sync_all") else "fdatasync"
    page = cfg.sync_len_bytes if isinstance(cfg, SinglePage) else base.page_size_bytes
    n = required_units(cfg, n_bits)
    size = base.file_size_bytes if base.mode == mode else None
    if mode == "page" and (size is None or size < n * page):
        size = n * page
    if mode == "file" and base.mode != "file":
        size = None
    return replace(base, mode=mode, primitive=primitive, unit_count=n, page_size_bytes=page, file_size_bytes=size)


def default_slot_ns(cfg: StrategyConfig, tm: Timing) -> int:
    slot = getattr(cfg, "slot_ns", None)
    if slot is not None:
        return int(slot)
    if isinstance(cfg, AsyncSlot):
        # each side does at most one sync per slot
        return int(round(1.2 * tm.t_b_ns)) + tm.overhead_ns
    # room for the receiver's sleep plus its own cached-cost sync
    return int(round(2.3 * tm.t_b_ns)) + 2 * tm.overhead_ns


def default_receiver_sleep_ns(cfg, tm: Timing, slot_ns: int) -> int:
    if getattr(cfg, "receiver_sleep_ns", None) is not None:
        return int(cfg.receiver_sleep_ns)
    # 1.2 * t_b when the slot allows it; otherwise whatever still fits
    # after the measuring sync, so the receiver never overruns by design.
    # A concurrent measurement costs the slowest of several noisy syncs.
    measure = 1.25 if isinstance(cfg, MultiBit) else 1.1
    fit = slot_ns - int(round(measure * tm.t_b_ns)) - 2 * tm.overhead_ns
    return int(max(0, min(round(1.2 * tm.t_b_ns), fit)))


def default_resync_period_bits(cfg: AsyncFree, tm: Timing, write_cost_ns: int = 1_000) -> int:
    """Bits before the sender's average lead could cover the unit ring.

    Per bit the sender averages ``(t_b + t_s) / 2`` and the receiver
    ``(t_b + t_u) / 2`` plus one write, so the lead grows by
    ``(t_u - t_s) / 2 + write`` per bit; the ring holds ``units * t_b``.
    """
    if cfg.resync_period_bits is not None:
        return cfg.resync_period_bits
    gain = (tm.t_u_ns - cfg.t_s_ns) / 2 + write_cost_ns
    if gain <= 0:
        return 1 << 30
    return max(1, int(cfg.units * tm.t_b_ns // gain))


# -- traces ------------------------------------------------------------------


@dataclass
class RxTrace:
    """Receiver records, one per measured bit, plus round bookkeeping."""

    seq: List[int] = field(default_factory=list)
    unit: List[int] = field(default_factory=list)
    latency_ns: List[int] = field(default_factory=list)
    bit: List[int] = field(default_factory=list)
    t_ns: List[int] = field(default_factory=list)  # measure start
    rearm_ns: List[int] = field(default_factory=list)  # re-dirty time (AsyncFree)
    overruns: int = 0
    flagged: List[int] = field(default_factory=list)
    aborted_rounds: List[int] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)
    start_ns: Optional[int] = None  # first data dirty
    end_ns: Optional[int] = None  # last decode
    elapsed_ns: Optional[int] = None  # throughput window
    measure_ns: Optional[int] = None  # OneShot: measuring phase alone
    rounds: int = 0

    def record(self, unit: int, latency: int, bit: int, t: int) -> None:
        self.seq.append(len(self.seq))
        self.unit.append(int(unit))
        self.latency_ns.append(int(latency))
        self.bit.append(int(bit))
        self.t_ns.append(int(t))

    def __len__(self) -> int:
        return len(self.seq)

    @property
    def span_ns(self) -> Optional[int]:
        if self.start_ns is None or self.end_ns is None:
            return None
        return self.end_ns - self.start_ns

    def rows(self):
        return list(zip(self.seq, self.unit, self.latency_ns, self.bit))

    def to_csv(self, fh) -> None:
        fh.write("seq,unit,latency_ns,bit\n")
        for row in self.rows():
            fh.write("%d,%d,%d,%d\n" % row)


@dataclass
class TxTrace:
    t_ns: List[int] = field(default_factory=list)  # action start per transmitted bit
    sync_latency_ns: List[int] = field(default_factory=list)  # per sync issued
    overruns: int = 0
    rounds: int = 0
    start_ns: Optional[int] = None


# -- handshake ---------------------------------------------------------------


@dataclass(frozen=True)
class Layout:
    n_data: int

    @property
    def ready(self) -> int:
        return self.n_data

    @property
    def end(self) -> int:
        return self.n_data + 1


def await_signal(units: Sequence[int], tm: Timing, timeout_ns: int, poll_ns: int = DEFAULT_POLL_NS, backoff: bool = False):
    """Trojan side: poll ``units`` until one shows a cached-class latency.

    Returns ``(unit, t)`` where ``t`` is the clock just after detection.
    The detecting sync also cleans the unit, which re-arms it.
    """
    t0 = yield Now()
    wait = poll_ns
    while True:
        for u in units:
            lat = yield Sync(u)
            if lat >= tm.signal_threshold_ns:
                now = yield Now()
                return u, now
        now = yield Now()
        if now - t0 > timeout_ns:
            raise HandshakeTimeout(f"no signal on units {list(units)} within {timeout_ns / 1e9:.1f} s")
        yield Sleep(wait)
        if backoff:
            wait = min(2 * wait, MAX_END_POLL_NS)


def handshake_start(role: str, layout: Layout, tm: Timing, timeout_ns: int = DEFAULT_HANDSHAKE_TIMEOUT_NS, poll_ns: int = DEFAULT_POLL_NS):
    """Open a round. The Spy returns the clock before its signal write;
    the Trojan returns the clock just after it detected the signal."""
    if role == "receiver":
        t = yield Now()
        yield Dirty(layout.ready)
        return t
    _, t = yield from await_signal([layout.ready], tm, timeout_ns, poll_ns)
    return t


def handshake_end(role: str, layout: Layout, tm: Timing, timeout_ns: int = DEFAULT_HANDSHAKE_TIMEOUT_NS):
    """Close a round. The Trojan returns ``True`` when the Spy signalled the
    end and ``False`` when it re-armed ``ready`` instead (resend)."""
    if role == "receiver":
        yield Dirty(layout.end)
        return True
    unit, _ = yield from await_signal([layout.end, layout.ready], tm, timeout_ns, backoff=True)
    return unit == layout.end


def expected_detection_ns(tm: Timing, poll_ns: int = DEFAULT_POLL_NS) -> int:
    """Spy's estimate of when the Trojan finishes detecting its signal,
    measured from the signal write."""
    return tm.t_b_ns + (tm.t_u_ns + poll_ns) // 2


# -- strategy bodies ---------------------------------------------------------
# Trojan bodies start at the detection time ``t0``; Spy bodies start at the
# clock read just before the ready write.


def _trojan_slotted(cfg, bits: np.ndarray, tm: Timing, t0: int, tx: TxTrace, units_for: Callable):
    slot = default_slot_ns(cfg, tm)
    tx.start_ns = t0
    for i, sym in enumerate(bits):
        start = t0 + i * slot
        if i:
            yield SleepUntil(start)
        tx.t_ns.append(start)
        unit = units_for(i, sym)
        if unit is not None:
            tx.sync_latency_ns.append((yield Sync(unit)))
        if (yield from _slot_wait(start, slot)):
            tx.overruns += 1


def _spy_single(cfg, n_bits: int, tm: Timing, t_signal: int, rx: RxTrace):
    slot = default_slot_ns(cfg, tm)
    sleep = default_receiver_sleep_ns(cfg, tm, slot)
    anchor = t_signal + expected_detection_ns(tm) - sleep // 2
    bits = np.zeros(n_bits, dtype=np.uint8)
    for i in range(n_bits):
        start = anchor + i * slot
        yield SleepUntil(start)
        if rx.start_ns is None:
            rx.start_ns = start
        yield Dirty(0)
        yield Sleep(sleep)
        t = yield Now()
        lat = yield Sync(0)
        bits[i] = 1 if lat < tm.threshold_ns else 0
        rx.record(0, lat, bits[i], t)
        rx.end_ns = yield Now()
        if (yield from _slot_wait(start, slot)):
            rx.overruns += 1
    rx.elapsed_ns = n_bits * slot
    return bits


def _spy_multibit(cfg: MultiBit, n_bits: int, tm: Timing, t_signal: int, rx: RxTrace):
    slot = default_slot_ns(cfg, tm)
    sleep = default_receiver_sleep_ns(cfg, tm, slot)
    anchor = t_signal + expected_detection_ns(tm) - sleep // 2
    n_sym = (n_bits + 1) // 2
    units = tuple(range(cfg.files))
    symbols = np.zeros(n_sym, dtype=np.uint8)
    for i in range(n_sym):
        start = anchor + i * slot
        yield SleepUntil(start)
        if rx.start_ns is None:
            rx.start_ns = start
        for u in units:
            yield Dirty(u)
        yield Sleep(sleep)
        t = yield Now()
        lats = yield SyncMany(units)
        sym = int(np.argmin(lats))
        if sum(1 for x in lats if x < tm.threshold_ns) != 1:
            rx.flagged.append(i)
        symbols[i] = sym
        for b in codec.ungroup2([sym]):
            rx.record(sym, lats[sym], b, t)
        rx.end_ns = yield Now()
        if (yield from _slot_wait(start, slot)):
            rx.overruns += 1
    rx.elapsed_ns = n_sym * slot
    return codec.ungroup2(symbols, n_bits)


def _spy_async_slot(cfg: AsyncSlot, n_bits: int, tm: Timing, t_signal: int, rx: RxTrace):
    slot = default_slot_ns(cfg, tm)
    # one slot behind the sender, halfway through its slot
    anchor = t_signal + expected_detection_ns(tm) + slot
    bits = np.zeros(n_bits, dtype=np.uint8)
    rx.start_ns = rx.start_ns if rx.start_ns is not None else t_signal
    for i in range(n_bits):
        start = anchor + i * slot
        yield SleepUntil(start)
        u = i % cfg.units
        t = yield Now()
        lat = yield Sync(u)
        bits[i] = 1 if lat < tm.threshold_ns else 0
        rx.record(u, lat, bits[i], t)
        rx.end_ns = yield Now()
        yield Dirty(u)
        if (yield from _slot_wait(start, slot)):
            rx.overruns += 1
    rx.elapsed_ns = n_bits * slot
    return bits


def _trojan_async_free_round(cfg: AsyncFree, symbols: np.ndarray, k0: int, tx: TxTrace):
    for j, b in enumerate(symbols):
        t = yield Now()
        tx.t_ns.append(t)
        if b:
            tx.sync_latency_ns.append((yield Sync((k0 + j) % cfg.units)))
        elif cfg.t_s_ns:
            yield Sleep(cfg.t_s_ns)


def _spy_async_free_round(cfg: AsyncFree, n: int, k0: int, tm: Timing, rx: RxTrace):
    out = np.zeros(n, dtype=np.uint8)
    for j in range(n):
        u = (k0 + j) % cfg.units
        t = yield Now()
        lat = yield Sync(u)
        out[j] = 1 if lat < tm.threshold_ns else 0
        rx.record(u, lat, out[j], t)
        rx.end_ns = yield Now()
        rx.rearm_ns.append(rx.end_ns)
        yield Dirty(u)
    return out


def _oneshot_settle_ns(n_bits: int, tm: Timing) -> int:
    # Trojan detection plus up to n cached-cost syncs, with 25% headroom
    return int(1.25 * n_bits * tm.t_b_ns + 2 * tm.t_b_ns + tm.t_u_ns)


# -- sessions ----------------------------------------------------------------


def _split_rounds(n: int, period: int) -> List[int]:
    if n == 0:
        return [0]
    return [min(period, n - s) for s in range(0, n, period)]


def trojan_procedure(
    cfg: StrategyConfig,
    bits,
    timing,
    timeout_ns: int = DEFAULT_HANDSHAKE_TIMEOUT_NS,
    order: Optional[Sequence[int]] = None,
    max_rounds: int = 1_000,
):
    """Sender session: wait for the Spy, transmit, then wait for the end
    signal. A re-armed ``ready`` instead of ``end`` triggers a resend."""
    tm = as_timing(timing)
    payload = codec.as_bits(bits)
    n = payload.size
    layout = Layout(data_units(cfg, n))
    tx = TxTrace()

    if isinstance(cfg, AsyncFree):
        # stop-and-resync rounds, each after the first led by the sync sequence
        period = default_resync_period_bits(cfg, tm)
        white = codec.xor_encode(payload, codec.PrngStream(cfg.prng_seed))
        seq = codec.as_bits(cfg.sync_seq)
        k = 0
        pos = 0
        for r, m in enumerate(_split_rounds(n, period)):
            yield from handshake_start("sender", layout, tm, timeout_ns)
            symbols = white[pos : pos + m] if r == 0 else np.concatenate([seq, white[pos : pos + m]])
            if tx.start_ns is None:
                tx.start_ns = yield Now()
            yield from _trojan_async_free_round(cfg, symbols, k, tx)
            k += symbols.size
            pos += m
            tx.rounds += 1
        yield from handshake_end("sender", layout, tm, timeout_ns)
        return tx

    t0 = yield from handshake_start("sender", layout, tm, timeout_ns)
    for _ in range(max_rounds):
        tx.rounds += 1
        if isinstance(cfg, OneShot):
            tx.start_ns = t0
            idx = range(n) if order is None else order
            if sorted(idx) != list(range(n)):
                raise ValueError("order must be a permutation of the bit indices")
            for i in idx:
                if payload[i]:
                    tx.t_ns.append((yield Now()))
                    tx.sync_latency_ns.append((yield Sync(i)))
        elif isinstance(cfg, MultiBit):
            yield from _trojan_slotted(cfg, codec.group2(payload), tm, t0, tx, lambda i, s: int(s))
        elif isinstance(cfg, AsyncSlot):
            yield from _trojan_slotted(cfg, payload, tm, t0, tx, lambda i, b: i % cfg.units if b else None)
        else:
            yield from _trojan_slotted(cfg, payload, tm, t0, tx, lambda i, b: 0 if b else None)
        unit, t0 = yield from await_signal([layout.end, layout.ready], tm, timeout_ns, backoff=True)
        if unit == layout.end:
            return tx
    raise HandshakeTimeout(f"gave up after {max_rounds} re-armed rounds")


def spy_procedure(
    cfg: StrategyConfig,
    n_bits: int,
    timing,
    validate: Optional[Callable[[np.ndarray], bool]] = None,
    timeout_ns: int = DEFAULT_HANDSHAKE_TIMEOUT_NS,
):
    """Receiver session returning ``(bits, RxTrace)``.

    With ``validate`` given, a round whose bits it rejects is discarded and
    ``ready`` re-armed so the Trojan resends; after ``timeout_ns`` without
    an accepted round :class:`HandshakeTimeout` is raised.
    """
    tm = as_timing(timing)
    layout = Layout(data_units(cfg, n_bits))
    t_first = None
    while True:
        rx = RxTrace()
        if isinstance(cfg, AsyncFree):
            bits = yield from _spy_async_free(cfg, n_bits, tm, layout, rx)
        elif isinstance(cfg, OneShot):
            bits = yield from _spy_oneshot(cfg, n_bits, tm, layout, rx)
        else:
            if isinstance(cfg, AsyncSlot):
                rx.start_ns = yield Now()
                for u in range(cfg.units):
                    yield Dirty(u)
            t_signal = yield from handshake_start("receiver", layout, tm)
            rx.rounds = 1
            if isinstance(cfg, MultiBit):
                bits = yield from _spy_multibit(cfg, n_bits, tm, t_signal, rx)
            elif isinstance(cfg, AsyncSlot):
                bits = yield from _spy_async_slot(cfg, n_bits, tm, t_signal, rx)
            else:
                bits = yield from _spy_single(cfg, n_bits, tm, t_signal, rx)
        if t_first is None:
            t_first = rx.start_ns if rx.start_ns is not None else 0
        if validate is None or validate(bits):
            yield from handshake_end("receiver", layout, tm)
            return bits, rx
        now = yield Now()
        if now - t_first > timeout_ns:
            raise HandshakeTimeout("no valid frame before the handshake timeout")
        log.info("round rejected; re-arming")


def _spy_async_free(cfg: AsyncFree, n_bits: int, tm: Timing, layout: Layout, rx: RxTrace):
    period = default_resync_period_bits(cfg, tm)
    seq = codec.as_bits(cfg.sync_seq)
    rx.start_ns = yield Now()
    for u in range(cfg.units):
        yield Dirty(u)
    payload = []
    k = 0
    for r, m in enumerate(_split_rounds(n_bits, period)):
        yield from handshake_start("receiver", layout, tm)
        yield Sleep(cfg.initial_sleep_ns)
        n = m if r == 0 else m + seq.size
        got = yield from _spy_async_free_round(cfg, n, k, tm, rx)
        k += n
        if r:
            if not np.array_equal(got[: seq.size], seq):
                rx.aborted_rounds.append(r)
            got = got[seq.size :]
        payload.append(got)
        rx.rounds += 1
    rx.elapsed_ns = (rx.end_ns - rx.start_ns) if rx.end_ns is not None else None
    white = np.concatenate(payload) if payload else np.zeros(0, np.uint8)
    return codec.xor_decode(white, codec.PrngStream(cfg.prng_seed))


def _spy_oneshot(cfg: OneShot, n_bits: int, tm: Timing, layout: Layout, rx: RxTrace):
    rx.start_ns = yield Now()
    for u in range(n_bits):
        yield Dirty(u)
    dirty_done = yield Now()
    yield from handshake_start("receiver", layout, tm)
    rx.rounds = 1
    earliest = (yield Now()) + _oneshot_settle_ns(n_bits, tm)
    if cfg.receiver_lag_ns is not None:
        target = rx.start_ns + cfg.receiver_lag_ns
        if target < earliest:
            rx.warnings.append("receiver_lag_ns is shorter than the sender needs; using the settle time")
        earliest = max(earliest, target)
    yield SleepUntil(earliest)
    measure_start = yield Now()
    lag = measure_start - rx.start_ns
    if lag > cfg.max_receiver_lag_ns:
        msg = f"receiver lag {lag / 1e9:.1f} s exceeds the {cfg.max_receiver_lag_ns / 1e9:.1f} s budget; bits skew towards 1"
        rx.warnings.append(msg)
        warnings.warn(msg, LagWarning, stacklevel=2)
    bits = np.zeros(n_bits, dtype=np.uint8)
    for i in range(n_bits):
        t = yield Now()
        lat = yield Sync(i)
        bits[i] = 1 if lat < tm.threshold_ns else 0
        rx.record(i, lat, bits[i], t)
    rx.end_ns = yield Now()
    # dirtying phase plus measuring phase; the idle wait is excluded
    rx.measure_ns = rx.end_ns - measure_start
    rx.elapsed_ns = (dirty_done - rx.start_ns) + rx.measure_ns
    return bits


# -- public entry points -----------------------------------------------------


def send(handle, cfg: StrategyConfig, bits, timing, **kw) -> TxTrace:
    return drive(trojan_procedure(cfg, bits, timing, **kw), handle)


def recv(handle, cfg: StrategyConfig, n_bits: int, timing, **kw) -> Tuple[np.ndarray, RxTrace]:
    return drive(spy_procedure(cfg, n_bits, timing, **kw), handle)


send_single = send_multibit = send_async = send_oneshot = send
recv_single = recv_multibit = recv_async = recv_oneshot = recv


@dataclass
class CoupledRun:
    sent: np.ndarray
    received: np.ndarray
    rx: RxTrace
    tx: TxTrace
    medium: MediumConfig


def run_strategy_sim(
    cfg: StrategyConfig,
    bits,
    medium: Optional[MediumConfig] = None,
    timing=None,
    order: Optional[Sequence[int]] = None,
) -> CoupledRun:
    """Run Trojan and Spy over one fresh simulated medium.

    ``timing`` defaults to the simulator's exact latencies, which is what a
    noiseless calibration would report.
    """
    payload = codec.as_bits(bits)
    base = medium or MediumConfig()
    if base.backend != "simulated":
        raise ValueError("run_strategy_sim needs a simulated medium")
    mcfg = medium_for(cfg, base, payload.size)
    tm = as_timing(timing) if timing is not None else Timing.from_sim(mcfg.sim, mcfg.primitive)
    rh = open_medium(mcfg, "receiver")
    sh = open_medium(mcfg, "sender", attach_to=rh)
    tx, (received, rx) = run_coupled(
        trojan_procedure(cfg, payload, tm, order=order),
        spy_procedure(cfg, payload.size, tm),
        sh,
        rh,
    )
    return CoupledRun(payload, received, rx, tx, mcfg)


def async_free_horizon(tx_t: Sequence[int], rx_t: Sequence[int], units: int, rx_redirty: Optional[Sequence[int]] = None) -> int:
    """Number of leading bit indices at which the sender acted before the
    receiver measured and no earlier than the receiver re-armed the unit
    one ring turn back."""
    n = min(len(tx_t), len(rx_t))
    back = rx_redirty if rx_redirty is not None else rx_t
    for j in range(n):
        if tx_t[j] >= rx_t[j]:
            return j
        if j >= units and tx_t[j] < back[j - units]:
            return j
    return n
