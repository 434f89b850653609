import re

import pytest

from writesync import cli
from writesync.metrics import Report


def write_cfg(tmp_path, text, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def kv(text):
    return dict(line.split("=", 1) for line in text.splitlines() if "=" in line and not line.startswith("#"))


def test_calibrate_sim_defaults(capsys, tmp_path):
    cfg = write_cfg(tmp_path, f"[output]\ndir = {tmp_path}/out\n")
    assert cli.main(["calibrate", "-c", cfg, "-n", "1000"]) == 0
    out = kv(capsys.readouterr().out)
    assert abs(int(out["threshold_ns"]) - 491_000) / 491_000 < 0.03
    csv = (tmp_path / "out" / "calibration.csv").read_text().splitlines()
    assert csv[0] == "seq,class,latency_ns" and len(csv) == 2001


def test_calibrate_without_gap_exits_2(tmp_path):
    cfg = write_cfg(tmp_path, "[sim]\nt_b_ns = 64000\nt_u_ns = 64000\nnoise_frac = 0\n")
    assert cli.main(["calibrate", "-c", cfg, "-n", "20"]) == 2


def test_missing_config_exits_1(tmp_path):
    assert cli.main(["calibrate", "-c", str(tmp_path / "nope.cfg")]) == 1


def test_unknown_keys_rejected(tmp_path, capsys):
    assert cli.main(["bench", "-c", write_cfg(tmp_path, "[sim]\nbogus = 1\n")]) == 1
    assert cli.main(["bench", "-c", write_cfg(tmp_path, "[nope]\n")]) == 1
    assert cli.main(["bench", "-c", write_cfg(tmp_path, "[strategy]\nkind = oneshot\nslot_ns = 5\n")]) == 1
    assert cli.main(["bench", "-c", write_cfg(tmp_path, "[sim]\nt_b_ns = fast\n")]) == 1
    assert "unknown" in capsys.readouterr().err


def test_trials_zero_is_config_error(tmp_path):
    assert cli.main(["bench", "-c", write_cfg(tmp_path, "[bench]\ntrials = 0\n")]) == 1


def test_mode_must_match_strategy(tmp_path):
    cfg = write_cfg(tmp_path, "[medium]\nmode = file\n[strategy]\nkind = single_page\n")
    assert cli.main(["bench", "-c", cfg]) == 1


def test_bundled_oneshot_config(capsys, tmp_path):
    assert cli.main(["bench", "-c", "table2_oneshot_page.cfg", "--out", str(tmp_path / "o")]) == 0
    rep = Report.from_text(capsys.readouterr().out)
    assert rep.ber_pct == 0.0
    assert rep.trials == 50
    assert 1500 <= rep.tr_bps <= 2500
    assert (tmp_path / "o" / "report.txt").exists()
    assert len(list((tmp_path / "o" / "traces").glob("*.csv"))) == 50


def test_bundled_sweep_tr_decreasing(capsys, tmp_path):
    text = (cli.CONFIG_DIR / "fig5_sweep.cfg").read_text().replace("trials = 50", "trials = 3")
    cfg = write_cfg(tmp_path, text)
    assert cli.main(["bench", "-c", cfg]) == 0
    out = capsys.readouterr().out
    blocks = [b for b in out.split("\n\n") if b.strip()]
    assert len(blocks) == 4
    slots = [int(re.search(r"slot_ns=(\d+)", b).group(1)) for b in blocks]
    rates = [float(kv(b)["tr_bps"]) for b in blocks]
    assert slots == sorted(slots)
    assert all(a > b for a, b in zip(rates, rates[1:]))


def test_bench_deterministic_files(tmp_path):
    cfg = write_cfg(tmp_path, "[strategy]\nkind = multibit\n[bench]\ntrials = 2\nbits_per_trial = 64\nseed = 3\n")
    for d in ("a", "b"):
        assert cli.main(["bench", "-c", cfg, "--out", str(tmp_path / d)]) == 0
    for name in ("report.txt", "traces/trial_000.csv", "traces/trial_001.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_send_recv_reject_sim(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "[strategy]\nkind = oneshot\n")
    assert cli.main(["send", "-c", cfg, "--hex", "0xDEAD"]) == 1
    assert cli.main(["recv", "-c", cfg, "--bits", "16"]) == 1
    assert "posix" in capsys.readouterr().err


def test_send_needs_timing(tmp_path):
    cfg = write_cfg(tmp_path, f"[medium]\nbackend = posix\ndir_path = {tmp_path}\n")
    assert cli.main(["send", "-c", cfg, "--hex", "0xDEAD"]) == 1


def test_recv_without_sender_times_out(tmp_path):
    cfg = write_cfg(
        tmp_path,
        f"[medium]\nbackend = posix\ndir_path = {tmp_path}\n"
        "[strategy]\nkind = oneshot\nmode = page\nt_b_ns = 900000\nt_u_ns = 60000\nhandshake_timeout_s = 0.5\n",
    )
    assert cli.main(["recv", "-c", cfg, "--bits", "16"]) == 3


def test_degrade_requires_ack(tmp_path, capsys):
    assert cli.main(["degrade", "--target", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert "research tool" in err and cli.ACK_FLAG in err


def test_degrade_posix_directory(tmp_path, capsys):
    assert cli.main(["degrade", cli.ACK_FLAG, "--target", str(tmp_path), "--duration", "0.2"]) == 0
    assert float(kv(capsys.readouterr().out)["calls_per_sec"]) > 0


def test_degrade_missing_target(tmp_path):
    assert cli.main(["degrade", cli.ACK_FLAG, "--target", str(tmp_path / "gone"), "--duration", "0.1"]) == 1


def test_degrade_sim_rate_cap(capsys):
    assert cli.main(["degrade", cli.ACK_FLAG, "--duration", "1", "--interval-us", "10000"]) == 0
    assert float(kv(capsys.readouterr().out)["calls_per_sec"]) <= 100
    assert cli.main(["degrade", cli.ACK_FLAG, "--duration", "1"]) == 0
    assert float(kv(capsys.readouterr().out)["calls_per_sec"]) > 0


def test_help_lists_defaults(capsys):
    with pytest.raises(SystemExit):
        cli.main(["--help"])
    out = capsys.readouterr().out
    for key in ("t_b_ns = 918000", "trials = 50", "kind = single_file", "table2_oneshot_page.cfg"):
        assert key in out


def test_primitives_lists_something(capsys):
    assert cli.main(["primitives"]) == 0
    assert "fsync" in capsys.readouterr().out
