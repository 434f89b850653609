import os
import stat

import numpy as np
import pytest

from writesync.medium import (
    MediumConfig,
    MediumConfigError,
    MediumError,
    PrimitiveError,
    RoleError,
    SimParams,
    open_medium,
    page_capacity,
)

NOISELESS = SimParams(noise_frac=0)


def sim(units=1, **kw):
    return open_medium(MediumConfig(unit_count=units, sim=replace_sim(**kw)), "receiver")


def replace_sim(**kw):
    from dataclasses import replace

    return replace(NOISELESS, **kw)


def test_noiseless_latencies():
    h = sim()
    h.dirty(0)
    assert h.sync_unit(0) == 918_000
    assert h.sync_unit(0) == 64_000


def test_dirty_refreshes_age():
    h = sim()
    h.dirty(0)
    h.advance_clock(10_000)
    h.dirty(0)
    dirty, since = h.unit_state(0)
    assert dirty and since == 10_000 + 1_000


def test_clock_advances_by_write_cost_and_latency():
    h = sim()
    h.dirty(0)
    assert h.now_ns() == 1_000
    h.sync_unit(0)
    assert h.now_ns() == 1_000 + 918_000


def test_writeback_deadline():
    h = sim()
    h.dirty(0)
    h.advance_clock(31 * 10**9)
    assert h.sync_unit(0) == 64_000

    h.dirty(0)
    h.advance_clock(30 * 10**9 - 1_000 - 1)
    assert h.sync_unit(0) == 918_000  # synced strictly before T + period

    h.dirty(0)
    h.advance_clock(30 * 10**9 - 1_000)
    assert h.sync_unit(0) == 64_000  # exactly at the deadline: flushed


def test_advance_clock_rules():
    h = sim()
    h.advance_clock(0)
    assert h.now_ns() == 0
    with pytest.raises(ValueError):
        h.advance_clock(-1)


def test_metadata_primitives_pay_extra():
    h = sim()
    h.dirty(0)
    assert h.sync_unit(0, "fsync") == 918_000 + 2_000_000
    h.dirty(0)
    assert h.sync_unit(0, "fcntl_fullfsync") == 2_918_000
    assert h.sync_unit(0, "fsync") == 64_000


def test_sync_all_cleans_every_unit():
    h = sim(units=3)
    h.dirty(2)
    assert h.sync_unit(0, "sync_all") == 2_918_000
    assert not h.unit_state(2)[0]
    assert h.sync_unit(1, "sync_all") == 64_000


def test_sync_many_advances_by_slowest():
    h = sim(units=4)
    h.dirty(1)
    t = h.now_ns()
    lats = h.sync_many([0, 1, 2, 3])
    assert lats == [64_000, 918_000, 64_000, 64_000]
    assert h.now_ns() - t == 918_000


def test_sender_cannot_dirty():
    rh = sim()
    sh = open_medium(rh.config, "sender", attach_to=rh)
    with pytest.raises(RoleError):
        sh.dirty(0)
    rh.dirty(0)
    assert sh.sync_unit(0) == 918_000
    assert rh.sync_unit(0) == 64_000


def test_agents_keep_their_own_clocks():
    rh = sim()
    sh = open_medium(rh.config, "sender", attach_to=rh)
    rh.advance_clock(5_000)
    assert sh.now_ns() == 0


def test_unit_range():
    h = sim(units=2)
    with pytest.raises(IndexError):
        h.dirty(2)
    with pytest.raises(IndexError):
        h.sync_unit(-1)


def test_config_errors():
    with pytest.raises(MediumConfigError):
        MediumConfig(unit_count=0)
    with pytest.raises(MediumConfigError):
        MediumConfig(backend="posix", dir_path="/tmp", unit_count=1023)
    MediumConfig(backend="posix", dir_path="/tmp", unit_count=1022)
    with pytest.raises(PrimitiveError):
        MediumConfig(mode="file", primitive="msync")
    with pytest.raises(PrimitiveError):
        MediumConfig(mode="page", primitive="fdatasync")
    with pytest.raises(MediumConfigError):
        MediumConfig(mode="page", primitive="msync", unit_count=4, file_size_bytes=3 * 4096)
    with pytest.raises(MediumConfigError):
        SimParams(t_b_ns=10, t_u_ns=20)
    with pytest.raises(MediumConfigError):
        SimParams(noise_frac=-0.1)
    with pytest.raises(MediumConfigError):
        MediumConfig(backend="posix")


def test_page_mode_defaults_and_capacity():
    c = MediumConfig(mode="page", primitive="msync", unit_count=8)
    assert c.file_size_bytes == 8 * 4096
    assert page_capacity(25 * 1024 * 1024, 4096) == 6400
    assert page_capacity(1024 * 1024, 4096) == 256


def test_primitive_mode_mismatch_on_sync():
    h = sim()
    with pytest.raises(PrimitiveError):
        h.sync_unit(0, "msync")


def test_noise_is_seeded_and_positive():
    def run(seed):
        h = open_medium(MediumConfig(sim=SimParams(seed=seed, noise_frac=0.5)), "receiver")
        out = []
        for _ in range(200):
            h.dirty(0)
            out.append(h.sync_unit(0))
            out.append(h.sync_unit(0))
        return out

    a, b = run(4), run(4)
    assert a == b
    assert a != run(5)
    assert min(a) >= 0


def test_separation_ratio_noiseless():
    assert 918_000 / 64_000 > 10


# -- posix backend: functional checks (no timing assertions) --


def posix(tmp_path, role, **kw):
    cfg = MediumConfig(backend="posix", dir_path=str(tmp_path), **kw)
    return open_medium(cfg, role)


def test_posix_file_layout_and_read_only_sender(tmp_path):
    with posix(tmp_path, "receiver", unit_count=3) as rh:
        assert sorted(os.listdir(tmp_path)) == ["unit_0.dat", "unit_1.dat", "unit_2.dat"]
        with posix(tmp_path, "sender", unit_count=3) as sh:
            flags = __import__("fcntl").fcntl(sh.fileno(1), __import__("fcntl").F_GETFL)
            assert flags & os.O_ACCMODE == os.O_RDONLY
            rh.dirty(1)
            assert sh.sync_unit(1) >= 0
            with pytest.raises(RoleError):
                sh.dirty(0)
            with pytest.raises(MediumError):
                sh.advance_clock(10)


def test_posix_sender_never_creates(tmp_path):
    with pytest.raises(MediumError):
        posix(tmp_path, "sender", unit_count=1)
    assert os.listdir(tmp_path) == []


def test_posix_missing_dir(tmp_path):
    with pytest.raises(MediumError):
        open_medium(MediumConfig(backend="posix", dir_path=str(tmp_path / "nope")), "receiver")


def test_posix_page_mode(tmp_path):
    with posix(tmp_path, "receiver", unit_count=4, mode="page", primitive="msync") as rh:
        assert os.listdir(tmp_path) == ["pages.dat"]
        assert os.path.getsize(tmp_path / "pages.dat") == 4 * 4096
        rh.dirty(2)
        with posix(tmp_path, "sender", unit_count=4, mode="page", primitive="msync") as sh:
            assert sh.sync_unit(2) >= 0
            assert len(sh.sync_many([0, 1])) == 2
    data = (tmp_path / "pages.dat").read_bytes()
    assert data[2 * 4096] != 0


def test_posix_dirty_writes_byte_zero(tmp_path):
    with posix(tmp_path, "receiver", unit_count=1) as rh:
        rh.dirty(0)
        rh.sync_unit(0)
    assert (tmp_path / "unit_0.dat").read_bytes()[0] != 0
