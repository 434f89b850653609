"""Command-line front end: calibrate, send, recv, bench, degrade.

Every command reads one INI-style config file. Exit codes: 0 ok, 1
configuration or I/O error, 2 calibration failed, 3 handshake timeout.
"""

from __future__ import annotations

import argparse
import configparser
import os
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import codec
from .calibration import CalibrationError, calibrate, midpoint_threshold, samples_csv_rows
from .medium import MediumConfig, MediumError, SimParams, available_primitives, open_medium
from .metrics import POSIX_OVERHEAD_NS, bench, write_traces
from .protocols import (
    STRATEGY_KINDS,
    HandshakeTimeout,
    SingleFile,
    Timing,
    medium_for,
    recv,
    send,
)

EXIT_OK, EXIT_CONFIG, EXIT_CALIBRATION, EXIT_HANDSHAKE = 0, 1, 2, 3
ACK_FLAG = "--i-understand-this-is-a-research-tool"
CONFIG_DIR = Path(__file__).with_name("configs")

ETHICS_BANNER = """\
*** research tool ***
This loop issues sync calls back to back to flush data other processes
have written, which slows their storage I/O. Run it only on machines you
own or are authorised to test, never against shared production systems.
"""

# section -> key -> (type, default, help)
SCHEMA: Dict[str, Dict[str, tuple]] = {
    "medium": {
        "backend": (str, "simulated", "simulated or posix"),
        "mode": (str, None, "file or page; must agree with the strategy when set"),
        "primitive": (str, "fdatasync", "sync primitive for file-mode strategies"),
        "dir_path": (str, None, "directory holding the unit files (posix)"),
        "page_size_bytes": (int, 4096, "page size for page mode"),
        "file_size_bytes": (int, None, "file size; default one page per unit"),
    },
    "sim": {
        "t_b_ns": (int, 918_000, "mean sync latency of a dirty unit"),
        "t_u_ns": (int, 64_000, "mean sync latency of a clean unit"),
        "noise_frac": (float, 0.05, "relative latency noise (std dev)"),
        "writeback_period_ns": (int, 30_000_000_000, "background flusher deadline"),
        "metadata_extra_ns": (int, 2_000_000, "extra cost of fsync/sync on a dirty unit"),
        "write_cost_ns": (int, 1_000, "cost of one write"),
        "seed": (int, 0, "noise seed"),
    },
    "strategy": {
        "kind": (str, "single_file", "|".join(STRATEGY_KINDS)),
        "primitive": (str, "fdatasync", "single_file: sync_all, fsync, fdatasync or fcntl_fullfsync"),
        "slot_ns": (int, None, "slot length; default 2.3 t_b (1.2 t_b for async_slot)"),
        "receiver_sleep_ns": (int, None, "receiver wait inside a slot; default min(1.2 t_b, slot - 1.1 t_b)"),
        "sync_len_bytes": (int, 4096, "single_page: msync length"),
        "files": (int, 4, "multibit: file count"),
        "workers": (int, 4, "multibit: concurrent measurers"),
        "units": (int, None, "async_slot 8, async_free 500, oneshot one per bit"),
        "mode": (str, None, "async_slot/oneshot: file or page"),
        "t_s_ns": (int, 20_000, "async_free: sender wait for a 0"),
        "resync_period_bits": (int, None, "async_free: bits between rendezvous"),
        "initial_sleep_ns": (int, 3_000_000, "async_free: receiver head start for the sender"),
        "prng_seed": (int, 0, "async_free: whitening seed shared by both sides"),
        "sync_seq": (str, codec.DEFAULT_SYNC_SEQ, "frame sync sequence"),
        "max_receiver_lag_ns": (int, 20_000_000_000, "oneshot: lag budget before a warning"),
        "receiver_lag_ns": (int, None, "oneshot: start measuring this long after the first write"),
        "t_b_ns": (int, None, "pre-negotiated cached latency (send/recv need it)"),
        "t_u_ns": (int, None, "pre-negotiated uncached latency"),
        "threshold_ns": (int, None, "decision threshold; default midpoint"),
        "handshake_timeout_s": (float, 60.0, "rendezvous timeout"),
        "length_header_bits": (int, codec.DEFAULT_LENGTH_HEADER_BITS, "frame length field width"),
    },
    "bench": {
        "trials": (int, 50, "repetitions"),
        "bits_per_trial": (int, 1024, "payload bits per trial"),
        "payload_ones_ratio": (float, 0.5, "fraction of ones in each payload"),
        "seed": (int, 0, "payload and noise seed"),
        "calibration_samples": (int, 1000, "samples per class"),
        "sweep_slot_factors": (str, None, "comma list; one report per slot = factor * t_b"),
    },
    "output": {
        "dir": (str, None, "where reports, traces and samples go; nothing is written when unset"),
        "traces": (bool, True, "write per-trial trace CSVs"),
    },
}

STRATEGY_KEYS = {
    "single_file": {"primitive", "slot_ns", "receiver_sleep_ns"},
    "single_page": {"slot_ns", "receiver_sleep_ns", "sync_len_bytes"},
    "multibit": {"files", "workers", "slot_ns", "receiver_sleep_ns"},
    "async_slot": {"units", "mode", "slot_ns"},
    "async_free": {"units", "t_s_ns", "resync_period_bits", "initial_sleep_ns", "prng_seed", "sync_seq"},
    "oneshot": {"units", "mode", "max_receiver_lag_ns", "receiver_lag_ns"},
}
COMMON_STRATEGY_KEYS = {"kind", "t_b_ns", "t_u_ns", "threshold_ns", "handshake_timeout_s", "length_header_bits", "sync_seq"}


class ConfigError(Exception):
    pass


def _convert(typ, raw: str, where: str):
    try:
        if typ is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return typ(raw.strip())
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {typ.__name__}") from None


@dataclass
class RunConfig:
    values: Dict[str, Dict[str, object]] = field(default_factory=dict)
    set_keys: Dict[str, set] = field(default_factory=dict)
    source: Optional[str] = None

    def get(self, section: str, key: str):
        return self.values[section][key]

    def given(self, section: str, key: str) -> bool:
        return key in self.set_keys.get(section, set())

    # -- builders --

    def sim_params(self) -> SimParams:
        return SimParams(**self.values["sim"])

    def medium(self) -> MediumConfig:
        m = self.values["medium"]
        mode = m["mode"] or "file"
        primitive = m["primitive"]
        if mode == "page" and primitive != "msync":
            primitive = "msync"
        return MediumConfig(
            backend=m["backend"],
            mode=mode,
            unit_count=1,
            primitive=primitive,
            dir_path=m["dir_path"],
            page_size_bytes=m["page_size_bytes"],
            file_size_bytes=m["file_size_bytes"],
            sim=self.sim_params(),
        )

    def strategy(self, slot_ns: Optional[int] = None):
        s = self.values["strategy"]
        kind = s["kind"]
        cls = STRATEGY_KINDS[kind]
        kw = {k: s[k] for k in STRATEGY_KEYS[kind] if self.given("strategy", k)}
        if slot_ns is not None:
            kw["slot_ns"] = slot_ns
        try:
            return cls(**kw)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"[strategy]: {e}") from None

    def timing(self) -> Optional[Timing]:
        s = self.values["strategy"]
        if s["t_b_ns"] is None or s["t_u_ns"] is None:
            return None
        thr = s["threshold_ns"] if s["threshold_ns"] is not None else midpoint_threshold(s["t_b_ns"], s["t_u_ns"])
        posix = self.values["medium"]["backend"] == "posix"
        return Timing(s["t_b_ns"], s["t_u_ns"], thr, POSIX_OVERHEAD_NS if posix else 0, posix)

    @property
    def timeout_ns(self) -> int:
        return int(self.values["strategy"]["handshake_timeout_s"] * 1e9)

    def output_dir(self) -> Optional[Path]:
        d = self.values["output"]["dir"]
        return Path(d) if d else None


def resolve_config_path(name: str) -> Path:
    p = Path(name)
    if p.is_file():
        return p
    bundled = CONFIG_DIR / p.name
    if bundled.is_file() and p.parent == Path("."):
        return bundled
    raise ConfigError(f"config file {name} not found")


def load_config(path: Optional[str]) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    rc = RunConfig(values={sec: {k: spec[1] for k, spec in keys.items()} for sec, keys in SCHEMA.items()})
    if path is not None:
        p = resolve_config_path(path)
        rc.source = str(p)
        try:
            with open(p) as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as e:
            raise ConfigError(f"cannot read {p}: {e}") from None
    for sec in parser.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]")
        for key, raw in parser.items(sec):
            if key not in SCHEMA[sec]:
                raise ConfigError(f"unknown key {key!r} in [{sec}]")
            typ = SCHEMA[sec][key][0]
            rc.values[sec][key] = _convert(typ, raw, f"[{sec}] {key}")
            rc.set_keys.setdefault(sec, set()).add(key)
    _validate(rc)
    return rc


def _validate(rc: RunConfig) -> None:
    kind = rc.get("strategy", "kind")
    if kind not in STRATEGY_KINDS:
        raise ConfigError(f"[strategy] kind must be one of {', '.join(STRATEGY_KINDS)}")
    allowed = STRATEGY_KEYS[kind] | COMMON_STRATEGY_KEYS
    extra = rc.set_keys.get("strategy", set()) - allowed
    if extra:
        raise ConfigError(f"[strategy] keys {sorted(extra)} do not apply to kind {kind}")
    if rc.get("bench", "trials") < 1:
        raise ConfigError("[bench] trials must be >= 1")
    if rc.get("bench", "bits_per_trial") < 1:
        raise ConfigError("[bench] bits_per_trial must be >= 1")
    if not 0 <= rc.get("bench", "payload_ones_ratio") <= 1:
        raise ConfigError("[bench] payload_ones_ratio must lie in [0, 1]")
    if rc.get("bench", "calibration_samples") < 10:
        raise ConfigError("[bench] calibration_samples must be >= 10")
    try:
        rc.medium()
        rc.strategy()
        codec.as_bits(rc.get("strategy", "sync_seq"))
        factors = rc.get("bench", "sweep_slot_factors")
        if factors:
            _slot_factors(factors)
    except ConfigError:
        raise
    except Exception as e:
        raise ConfigError(str(e)) from None
    mode = rc.get("medium", "mode")
    if mode is not None:
        from .protocols import strategy_mode

        if strategy_mode(rc.strategy()) != mode:
            raise ConfigError(f"[medium] mode={mode} contradicts strategy {kind}")


def _slot_factors(text: str) -> List[float]:
    try:
        out = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"[bench] sweep_slot_factors: bad list {text!r}") from None
    if not out or any(f <= 0 for f in out):
        raise ConfigError("[bench] sweep_slot_factors must be positive numbers")
    return out


def schema_help() -> str:
    lines = ["config file sections, keys and defaults:"]
    for sec, keys in SCHEMA.items():
        lines.append(f"  [{sec}]")
        for k, (typ, default, doc) in keys.items():
            d = "unset" if default is None else default
            lines.append(f"    {k} = {d}    ({doc})")
    lines.append("")
    lines.append("exit codes: 0 ok, 1 config/io error, 2 calibration failed, 3 handshake timeout")
    lines.append(f"bundled configs: {', '.join(sorted(p.name for p in CONFIG_DIR.glob('*.cfg')))}")
    return "\n".join(lines)


def _emit(lines: Dict[str, object], out=None) -> str:
    text = "".join(f"{k}={v}\n" for k, v in lines.items())
    (out or sys.stdout).write(text)
    return text


def _write(out_dir: Optional[Path], name: str, text: str) -> None:
    if out_dir is None:
        return
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / name).write_text(text)


# -- commands ----------------------------------------------------------------


def cmd_calibrate(rc: RunConfig, n: Optional[int] = None) -> int:
    n = n or rc.get("bench", "calibration_samples")
    mcfg = medium_for(rc.strategy(), rc.medium(), 1)
    with open_medium(mcfg, "receiver") as h:
        try:
            cal = calibrate(h, mcfg.primitive, n)
        except CalibrationError as e:
            print(f"calibration failed: {e}", file=sys.stderr)
            if e.result is not None:
                _emit(e.result.as_dict())
            return EXIT_CALIBRATION
    _emit({"primitive": mcfg.primitive, **cal.as_dict()})
    rows = "".join(f"{s},{c},{lat}\n" for s, c, lat in samples_csv_rows(cal))
    _write(rc.output_dir(), "calibration.csv", "seq,class,latency_ns\n" + rows)
    return EXIT_OK


def _need_posix(rc: RunConfig, what: str) -> None:
    if rc.get("medium", "backend") != "posix":
        raise ConfigError(
            f"{what} needs backend=posix: a simulated medium lives inside one process and cannot be shared by two CLI invocations"
        )


def _need_timing(rc: RunConfig) -> Timing:
    tm = rc.timing()
    if tm is None:
        raise ConfigError("send/recv need [strategy] t_b_ns and t_u_ns; copy them from a calibrate run on the same medium")
    return tm


def _read_payload(hex_text: Optional[str], payload_file: Optional[str]) -> np.ndarray:
    if (hex_text is None) == (payload_file is None):
        raise ConfigError("give exactly one of --hex or --payload-file")
    if hex_text is not None:
        try:
            return codec.hex_to_bits(hex_text)
        except ValueError as e:
            raise ConfigError(str(e)) from None
    try:
        return codec.bytes_to_bits(Path(payload_file).read_bytes())
    except OSError as e:
        raise ConfigError(f"cannot read payload: {e}") from None


def cmd_send(rc: RunConfig, hex_text: Optional[str] = None, payload_file: Optional[str] = None) -> int:
    _need_posix(rc, "send")
    tm = _need_timing(rc)
    payload = _read_payload(hex_text, payload_file)
    n_len = rc.get("strategy", "length_header_bits")
    stream = codec.frame(payload, rc.get("strategy", "sync_seq"), n_len)
    cfg = rc.strategy()
    mcfg = medium_for(cfg, rc.medium(), stream.size)
    with open_medium(mcfg, "sender") as h:
        tx = send(h, cfg, stream, tm, timeout_ns=rc.timeout_ns)
    _emit({"sent_bits": payload.size, "frame_bits": stream.size, "rounds": tx.rounds})
    return EXIT_OK


def cmd_recv(rc: RunConfig, n_bits: int) -> int:
    _need_posix(rc, "recv")
    tm = _need_timing(rc)
    seq = rc.get("strategy", "sync_seq")
    n_len = rc.get("strategy", "length_header_bits")
    total = codec.frame_length(n_bits, seq, n_len)
    cfg = rc.strategy()
    mcfg = medium_for(cfg, rc.medium(), total)

    def valid(bits):
        try:
            f = codec.deframe(bits, seq, n_len)
        except codec.TruncatedFrameError:
            return False
        return f is not None and f.payload.size == n_bits

    with open_medium(mcfg, "receiver") as h:
        bits, rx = recv(h, cfg, total, tm, validate=valid, timeout_ns=rc.timeout_ns)
    payload = codec.deframe(bits, seq, n_len).payload
    out = rc.output_dir()
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "payload.bin").write_bytes(codec.bits_to_bytes(payload))
        with open(out / "rx_trace.csv", "w", newline="") as fh:
            rx.to_csv(fh)
    _emit({"bits": codec.bits_to_str(payload), "hex": codec.bits_to_bytes(payload).hex(), "overruns": rx.overruns})
    return EXIT_OK


def cmd_bench(rc: RunConfig) -> int:
    b = rc.values["bench"]
    medium = rc.medium()
    tm = rc.timing()
    out = rc.output_dir()
    kwargs = dict(
        trials=b["trials"],
        bits_per_trial=b["bits_per_trial"],
        payload_ones_ratio=b["payload_ones_ratio"],
        seed=b["seed"],
        calibration_samples=b["calibration_samples"],
        handshake_timeout_ns=rc.timeout_ns,
    )
    factors = b["sweep_slot_factors"]
    if not factors:
        res = bench(rc.strategy(), medium, timing=tm, **kwargs)
        text = res.report.to_text()
        sys.stdout.write(text)
        _write(out, "report.txt", text)
        if out is not None and rc.values["output"]["traces"]:
            write_traces(res, out / "traces")
        return EXIT_OK
    if rc.get("strategy", "kind") not in ("single_file", "single_page", "multibit", "async_slot"):
        raise ConfigError("sweep_slot_factors needs a slotted strategy")
    if tm is None:
        # one calibration fixes t_b for the whole sweep
        mcfg = medium_for(rc.strategy(), medium, b["bits_per_trial"])
        if mcfg.backend == "simulated":
            mcfg = replace(mcfg, sim=replace(mcfg.sim, seed=b["seed"]))
        with open_medium(mcfg, "receiver") as h:
            cal = calibrate(h, mcfg.primitive, b["calibration_samples"])
        posix = mcfg.backend == "posix"
        tm = Timing.from_calibration(cal, POSIX_OVERHEAD_NS if posix else 0, strict_signal=posix)
    for f in _slot_factors(factors):
        slot = int(round(f * tm.t_b_ns))
        res = bench(rc.strategy(slot_ns=slot), medium, timing=tm, **kwargs)
        text = res.report.to_text()
        sys.stdout.write(f"# slot_ns={slot} factor={f}\n{text}\n")
        _write(out, f"report_slot_{slot}.txt", text)
        if out is not None and rc.values["output"]["traces"]:
            write_traces(res, out / f"traces_slot_{slot}")
    return EXIT_OK


def _degrade_posix(target: Path, primitive: str, duration_s: float, interval_us: int):
    if not target.exists():
        raise ConfigError(f"target {target} does not exist")
    fd = os.open(target, os.O_RDONLY)
    try:
        if primitive == "sync_all":
            call = os.sync
        elif primitive == "fsync":
            call = lambda: os.fsync(fd)  # noqa: E731
        else:
            call = lambda: os.fdatasync(fd)  # noqa: E731
        calls = 0
        t0 = time.monotonic_ns()
        end = t0 + int(duration_s * 1e9)
        while True:
            now = time.monotonic_ns()
            if now >= end:
                break
            call()
            calls += 1
            if interval_us:
                time.sleep(interval_us / 1e6)
        elapsed = time.monotonic_ns() - t0
    finally:
        os.close(fd)
    return calls, elapsed


def _degrade_sim(rc: RunConfig, duration_s: float, interval_us: int):
    mcfg = replace(rc.medium(), backend="simulated", mode="file", primitive="fdatasync", unit_count=1, dir_path=None)
    h = open_medium(mcfg, "receiver")
    end = int(duration_s * 1e9)
    calls = 0
    while h.now_ns() < end:
        h.sync_unit(0)
        calls += 1
        h.advance_clock(interval_us * 1000)
    return calls, h.now_ns()


def cmd_degrade(rc: RunConfig, duration_s: float, interval_us: int, target: Optional[str] = None, acknowledged: bool = False) -> int:
    sys.stderr.write(ETHICS_BANNER)
    if not acknowledged:
        print(f"refusing to run without {ACK_FLAG}", file=sys.stderr)
        return EXIT_CONFIG
    if duration_s <= 0 or interval_us < 0:
        raise ConfigError("duration must be > 0 and interval >= 0")
    backend = rc.get("medium", "backend")
    primitive = rc.get("medium", "primitive")
    if backend == "simulated" and target is None:
        calls, elapsed = _degrade_sim(rc, duration_s, interval_us)
    else:
        path = Path(target or rc.get("medium", "dir_path") or "")
        if not str(path):
            raise ConfigError("degrade needs --target or [medium] dir_path")
        if primitive == "msync":
            primitive = "fdatasync"
        calls, elapsed = _degrade_posix(path, primitive, duration_s, interval_us)
    _emit({"calls": calls, "elapsed_s": round(elapsed / 1e9, 6), "calls_per_sec": round(calls * 1e9 / elapsed, 2)})
    return EXIT_OK


# -- argument parsing --------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="writesync",
        description="Timing channel over write buffers and sync latency.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=schema_help(),
    )
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_, epilog=schema_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
        sp.add_argument("-c", "--config", help="config file or bundled config name")
        sp.add_argument("--out", help="override [output] dir")
        return sp

    sp = add("calibrate", "measure cached/uncached latencies and print the threshold")
    sp.add_argument("-n", type=int, default=None, help="samples per class (default [bench] calibration_samples)")
    sp = add("send", "transmit a payload (posix, Trojan side)")
    sp.add_argument("--hex", dest="hex_text")
    sp.add_argument("--payload-file")
    sp = add("recv", "receive a payload (posix, Spy side)")
    sp.add_argument("--bits", type=int, required=True, help="payload length in bits")
    add("bench", "repeat transmissions and report TR/BER")
    sp = add("degrade", "loop the sync primitive and report calls per second")
    sp.add_argument("--duration", type=float, default=1.0, help="seconds (default 1)")
    sp.add_argument("--interval-us", type=int, default=0, help="pause between calls (default 0)")
    sp.add_argument("--target", help="file or directory to sync (default [medium] dir_path)")
    sp.add_argument(ACK_FLAG, dest="ack", action="store_true")
    sub.add_parser("primitives", help="list sync primitives available on this host")
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        import logging

        logging.basicConfig(level=logging.DEBUG)
    if args.command == "primitives":
        print("\n".join(available_primitives()))
        return EXIT_OK
    try:
        rc = load_config(args.config)
        if args.out:
            rc.values["output"]["dir"] = args.out
        if args.command == "calibrate":
            return cmd_calibrate(rc, args.n)
        if args.command == "send":
            return cmd_send(rc, args.hex_text, args.payload_file)
        if args.command == "recv":
            if args.bits < 0:
                raise ConfigError("--bits must be >= 0")
            return cmd_recv(rc, args.bits)
        if args.command == "bench":
            return cmd_bench(rc)
        return cmd_degrade(rc, args.duration, args.interval_us, args.target, args.ack)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except HandshakeTimeout as e:
        print(f"handshake timeout: {e}", file=sys.stderr)
        return EXIT_HANDSHAKE
    except CalibrationError as e:
        print(f"calibration failed: {e}", file=sys.stderr)
        return EXIT_CALIBRATION
    except (OSError, MediumError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
