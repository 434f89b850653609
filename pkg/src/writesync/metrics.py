"""Transmission rate, bit error rate and the repeated-trial benchmark."""

from __future__ import annotations

import logging
import math
import multiprocessing
import time
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np

from . import codec
from .calibration import CalibrationResult, calibrate
from .medium import MediumConfig, open_medium
from .protocols import (
    RxTrace,
    StrategyConfig,
    Timing,
    as_timing,
    medium_for,
    run_coupled,
    spy_procedure,
    trojan_procedure,
    drive,
)

log = logging.getLogger(__name__)

POSIX_OVERHEAD_NS = 100_000
STARTUP_GRACE_S = 0.3

REPORT_KEYS = ("tr_bps", "peak_bps", "ber_pct", "sd", "se", "trials")


def ber(sent, received) -> float:
    """Fraction of differing positions."""
    a, b = codec.as_bits(sent), codec.as_bits(received)
    if a.size != b.size:
        raise ValueError(f"length mismatch: {a.size} sent, {b.size} received")
    if a.size == 0:
        return 0.0
    return float(np.count_nonzero(a != b)) / a.size


def tr(n_bits: int, elapsed_ns: float) -> float:
    """Bits per second."""
    if elapsed_ns <= 0:
        raise ValueError("elapsed time must be positive")
    return n_bits * 1e9 / elapsed_ns


@dataclass
class TrialResult:
    sent: np.ndarray
    received: np.ndarray
    elapsed_ns: int
    overruns: int = 0
    trace: Optional[RxTrace] = None

    def __post_init__(self):
        self.sent = codec.as_bits(self.sent)
        self.received = codec.as_bits(self.received)
        if self.sent.size != self.received.size:
            raise ValueError("sent and received lengths differ")

    @property
    def ber(self) -> float:
        return ber(self.sent, self.received)

    @property
    def tr_bps(self) -> float:
        return tr(self.sent.size, self.elapsed_ns)


@dataclass(frozen=True)
class Report:
    """Means over trials. ``sd`` and ``se`` are over per-trial BER, as fractions."""

    tr_bps: float
    peak_bps: float
    ber_pct: float
    sd: float
    se: float
    trials: int

    def to_text(self) -> str:
        return "".join(f"{k}={getattr(self, k)!r}\n" for k in REPORT_KEYS)

    @classmethod
    def from_text(cls, text: str) -> "Report":
        vals = {}
        for line in text.splitlines():
            if line.strip():
                k, _, v = line.partition("=")
                vals[k.strip()] = v.strip()
        missing = set(REPORT_KEYS) - set(vals)
        if missing:
            raise ValueError(f"report lacks {sorted(missing)}")
        return cls(**{k: (int(vals[k]) if k == "trials" else float(vals[k])) for k in REPORT_KEYS})


def aggregate(trials: Sequence[TrialResult]) -> Report:
    if not trials:
        raise ValueError("no trials to aggregate")
    bers = np.array([t.ber for t in trials])
    rates = np.array([t.tr_bps for t in trials])
    n = len(trials)
    # identical trials must give exactly zero spread, not float residue
    sd = float(np.std(bers, ddof=1)) if n > 1 and np.ptp(bers) > 0 else 0.0
    return Report(
        tr_bps=float(np.mean(rates)),
        peak_bps=float(np.max(rates)),
        ber_pct=float(np.mean(bers)) * 100.0,
        sd=sd,
        se=sd / math.sqrt(n),
        trials=n,
    )


def make_payload(n_bits: int, ones_ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Random payload with exactly ``round(n_bits * ones_ratio)`` ones."""
    if not 0.0 <= ones_ratio <= 1.0:
        raise ValueError("ones ratio must lie in [0, 1]")
    bits = np.zeros(n_bits, dtype=np.uint8)
    bits[: int(round(n_bits * ones_ratio))] = 1
    rng.shuffle(bits)
    return bits


@dataclass
class BenchResult:
    report: Report
    trials: List[TrialResult] = field(default_factory=list)
    calibration: Optional[CalibrationResult] = None
    medium: Optional[MediumConfig] = None


def _trojan_child(mcfg, cfg, bits, timing, timeout_ns):
    with open_medium(mcfg, "sender") as h:
        drive(trojan_procedure(cfg, bits, timing, timeout_ns=timeout_ns), h)


def bench(
    strategy: StrategyConfig,
    medium: MediumConfig,
    trials: int = 50,
    bits_per_trial: int = 1024,
    payload_ones_ratio: float = 0.5,
    seed: int = 0,
    calibration_samples: int = 1000,
    timing=None,
    handshake_timeout_ns: int = 60_000_000_000,
) -> BenchResult:
    """Repeat a transmission ``trials`` times and aggregate.

    Calibration runs once up front (on a medium built from the same
    parameters) unless ``timing`` is supplied. On the simulated backend the
    whole run is a function of ``seed``.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if bits_per_trial < 1:
        raise ValueError("bits_per_trial must be >= 1")
    mcfg = medium_for(strategy, medium, bits_per_trial)
    ss = np.random.SeedSequence(seed)
    cal_seed, payload_seed, *trial_seeds = ss.spawn(trials + 2)
    rng = np.random.default_rng(payload_seed)
    cal = None
    if timing is None:
        cal_cfg = mcfg
        if mcfg.backend == "simulated":
            cal_cfg = replace(mcfg, sim=replace(mcfg.sim, seed=int(cal_seed.generate_state(1)[0])))
        with open_medium(cal_cfg, "receiver") as h:
            cal = calibrate(h, mcfg.primitive, calibration_samples)
        posix = mcfg.backend == "posix"
        timing = Timing.from_calibration(cal, POSIX_OVERHEAD_NS if posix else 0, strict_signal=posix)
    tm = as_timing(timing)

    results = []
    for k in range(trials):
        payload = make_payload(bits_per_trial, payload_ones_ratio, rng)
        if mcfg.backend == "simulated":
            tcfg = replace(mcfg, sim=replace(mcfg.sim, seed=int(trial_seeds[k].generate_state(1)[0])))
            rh = open_medium(tcfg, "receiver")
            sh = open_medium(tcfg, "sender", attach_to=rh)
            _, (received, rx) = run_coupled(
                trojan_procedure(strategy, payload, tm, timeout_ns=handshake_timeout_ns),
                spy_procedure(strategy, payload.size, tm, timeout_ns=handshake_timeout_ns),
                sh,
                rh,
                stop_with_receiver=True,
            )
        else:
            received, rx = _posix_trial(strategy, mcfg, payload, tm, handshake_timeout_ns)
        results.append(TrialResult(payload, received, rx.elapsed_ns, rx.overruns, rx))
        log.debug("trial %d: ber=%.4f tr=%.1f", k, results[-1].ber, results[-1].tr_bps)
    return BenchResult(aggregate(results), results, cal, mcfg)


def _posix_trial(strategy, mcfg: MediumConfig, payload, tm: Timing, timeout_ns: int):
    with open_medium(mcfg, "receiver") as rh:
        child = multiprocessing.Process(target=_trojan_child, args=(mcfg, strategy, payload, tm, timeout_ns))
        child.start()
        # let the Trojan reach its polling loop before the ready signal
        time.sleep(STARTUP_GRACE_S)
        try:
            received, rx = drive(spy_procedure(strategy, payload.size, tm, timeout_ns=timeout_ns), rh)
        finally:
            child.join(timeout=max(5.0, timeout_ns / 1e9))
            if child.is_alive():
                child.terminate()
    return received, rx


def write_traces(result: BenchResult, directory) -> List[str]:
    """One ``trial_<k>.csv`` per trial; returns the paths written."""
    from pathlib import Path

    out = []
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for k, t in enumerate(result.trials):
        p = d / f"trial_{k:03d}.csv"
        with open(p, "w", newline="") as fh:
            t.trace.to_csv(fh)
        out.append(str(p))
    return out
