"""Real-disk checks. Timing on shared or virtual disks is unreliable, so these
only run with WRITESYNC_LINUX_INTEGRATION=1 on Linux."""

import os
import sys

import numpy as np
import pytest

from writesync.calibration import calibrate
from writesync.medium import MediumConfig, open_medium
from writesync.metrics import bench
from writesync.protocols import SingleFile

pytestmark = pytest.mark.skipif(
    not (sys.platform.startswith("linux") and os.environ.get("WRITESYNC_LINUX_INTEGRATION") == "1"),
    reason="set WRITESYNC_LINUX_INTEGRATION=1 on Linux to run real-disk tests",
)


def cfg(tmp_path, **kw):
    return MediumConfig(backend="posix", dir_path=str(tmp_path), **kw)


def test_fdatasync_on_read_only_descriptor(tmp_path):
    c = cfg(tmp_path, unit_count=1)
    with open_medium(c, "receiver") as rh, open_medium(c, "sender") as sh:
        rh.dirty(0)
        assert sh.sync_unit(0, "fdatasync") > 0


def test_separation_ratio(tmp_path):
    with open_medium(cfg(tmp_path, unit_count=1), "receiver") as rh:
        r = calibrate(rh, "fdatasync", 500)
    print(f"t_b_hat={r.t_b_hat_ns} t_u_hat={r.t_u_hat_ns} ratio={r.separation_ratio:.2f}")
    assert r.separation_ratio >= 5


def test_single_file_round_trip(tmp_path):
    res = bench(SingleFile(), cfg(tmp_path), trials=1, bits_per_trial=128, calibration_samples=300, handshake_timeout_ns=20 * 10**9)
    print(res.report.to_text())
    assert res.report.ber_pct <= 5.0
