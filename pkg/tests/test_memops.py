import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcram.circuit import PulseSpec, transient_batch
from dcram.device import MemcapacitorParams, MemcapacitorState
from dcram.memops import (RETENTION_D_GRID, RETENTION_K_GRID, CellBit, CellSetup, LogicThresholds,
                          NoCrossingError, ProtocolError, extract_write_threshold, read_refresh,
                          read_refresh_batch, restore_batch, retention_sweep, retention_time,
                          write_batch, write_bit, written_level)

SETUP = CellSetup()

# (ivd0 V, amplitude V, final ivd V, cell energy fJ) from an explicit ODE of the
# same circuit integrated with Radau; regenerate with tests/oracles/write_ode.py
WRITE_TABLE = [
    (0.0, 1.0, 3.388612340090869, 2.273493738694779),
    (-3.389, 1.0, 3.3583975743183507, 4.891516113113254),
    (0.5, -1.0, -3.3815820741904017, 2.642957858481363),
    (0.0, 0.5, 0.05590238563762805, 0.026377847634101868),
    (2.0, 0.0, 1.9999998248379562, 3.9597341450735355e-08),
]


@pytest.mark.parametrize("ivd0, amp, ivd, energy", WRITE_TABLE)
def test_write_matches_ode_oracle(ivd0, amp, ivd, energy):
    pulse = SETUP.write_pulse.scaled(amp)
    net = SETUP.write_netlist(pulse)
    res = transient_batch(net, 4.0, initial_ivd=[[ivd0]], step=SETUP.step)
    assert res.ivd[0, 0] == pytest.approx(ivd, abs=1e-5)
    assert res.energy_cell[0, 0] == pytest.approx(energy, rel=1e-4, abs=1e-6)


@settings(max_examples=200, deadline=None)
@given(st.floats(-10, 10, allow_nan=False), st.floats(0.01, 2))
def test_threshold_bits_agree_with_bit(ivd, thr):
    t = LogicThresholds(thr)
    b = t.bit(ivd)
    assert int(t.bits(ivd)) == (-1 if b is None else b)
    if abs(ivd) < thr:
        assert b is None


def test_threshold_validation_and_charge():
    with pytest.raises(ValueError):
        LogicThresholds(0.0)
    p = MemcapacitorParams()
    assert LogicThresholds(0.3).Q_r(p) == pytest.approx(0.3 * p.C2)
    assert CellBit.from_ivd(0.1).defined is False


def test_written_level_is_a_strong_one():
    w = written_level(SETUP)
    assert 3.0 < w < 4.0
    r = write_bit(0.0, 1, SETUP)
    assert r.written and r.ivd == pytest.approx(w)
    assert r.state(SETUP.device).ivd(SETUP.device) == pytest.approx(w)


def test_write_accepts_state_objects():
    s = MemcapacitorState.from_ivd(-3.0, SETUP.device)
    assert write_bit(s, 1, SETUP).bit.value == 1


def test_write_rejects_bad_requests():
    with pytest.raises(ValueError):
        write_bit(0.0, 2, SETUP)
    with pytest.raises(ValueError):
        write_bit(0.0, 1, SETUP, pulse=SETUP.write_pulse.scaled(-1.0))


def test_subthreshold_write_raises_protocol_error():
    with pytest.raises(ProtocolError):
        write_bit(0.0, 1, SETUP, pulse=SETUP.write_pulse.scaled(0.2))


def test_write_batch_symmetric_and_overwrites():
    ivd, e = write_batch([0.0, 0.0, 3.389, -3.389], [1, 0, 0, 1], SETUP)
    assert ivd[0] == pytest.approx(-ivd[1], abs=1e-9)
    assert ivd[2] < -3.0 and ivd[3] > 3.0
    assert np.all(e > 0)


def test_write_waveforms_optional():
    r = write_bit(0.0, 0, SETUP, keep_waveforms=True)
    assert r.waveforms is not None and r.waveforms.ivd[-1, 0] == pytest.approx(r.ivd)


@pytest.mark.parametrize("stored, bit", [(-3.389, 0), (3.389, 1), (-0.5, 0), (0.5, 1)])
def test_read_refresh_recovers_and_restores(stored, bit):
    r = read_refresh(stored, SETUP)
    assert r.bit == bit
    assert r.activated == (bit == 0)
    # the read pulse always leaves a 1 behind before any refresh
    assert SETUP.thresholds.bit(r.post_read_ivd) == 1
    assert SETUP.thresholds.bit(r.ivd) == bit
    assert read_refresh(r.ivd, SETUP, keep_waveforms=False).bit == bit


def test_read_of_undefined_cell_does_nothing():
    r = read_refresh(0.1, SETUP)
    assert not r.ok and r.energy == 0.0


def test_read_energy_zero_exceeds_one():
    e0 = read_refresh(-0.5, SETUP, keep_waveforms=False).energy
    e1 = read_refresh(0.5, SETUP, keep_waveforms=False).energy
    assert e0 > e1 > 0


def test_read_refresh_batch_matches_single():
    stored = [-3.0, -0.5, 0.0, 0.5, 3.0]
    bits, final, energy = read_refresh_batch(stored, SETUP)
    assert list(bits) == [0, 0, -1, 1, 1]
    assert final[2] == 0.0 and energy[2] == 0.0
    single = read_refresh(-0.5, SETUP, keep_waveforms=False)
    assert final[1] == pytest.approx(single.ivd, abs=1e-9)


def test_restore_lands_in_a_narrow_band():
    stored = np.array([-5.0, -2.0, -0.4, 0.4, 2.0, 5.0])
    bits, final, _ = restore_batch(stored, SETUP)
    assert list(bits) == [0, 0, 0, 1, 1, 1]
    assert np.all(np.abs(final) > 3.3) and np.all(np.abs(final) < 4.4)
    assert np.all(np.sign(final) == np.sign(stored))


def test_threshold_grid_validation():
    with pytest.raises(ValueError):
        extract_write_threshold(SETUP, amplitudes=[1.0, 0.5])
    with pytest.raises(NoCrossingError):
        extract_write_threshold(SETUP, amplitudes=np.linspace(0.0, 0.2, 3))


def test_retention_sweep_shapes_and_csv(tmp_path):
    tab = retention_sweep((3.9, 7.5), (8.0, 10.0), ivd0=1.0, t_end=1e3)
    assert tab.ivd.shape == (2, 2, tab.t.size)
    assert tab.t[-1] == pytest.approx(1e3)
    assert tab.best_at(1e3) == (3.9, 10.0)
    path = tmp_path / "ret.csv"
    tab.to_csv(path)
    header = next(csv.reader(open(path)))
    assert header[0] == "t_s" and len(header) == 5
    with pytest.raises(ValueError):
        retention_sweep((), (8.0,))
    assert RETENTION_K_GRID == (3.9, 7.5, 25.0) and RETENTION_D_GRID == (6.0, 8.0, 10.0)


def test_retention_time():
    p = SETUP.device
    t = retention_time(3.389, p, 0.3)
    assert 10 < t < 1e3
    # already below the level: the first sample time
    assert retention_time(0.2, p, 0.3) <= 1e-5
    assert math.isinf(retention_time(3.0, p.with_middle(thickness=10.0), 1e-3, t_end=1.0))


def test_cell_setup_validation():
    with pytest.raises(ValueError):
        CellSetup(read_pulse=PulseSpec(1.0, width=2.0))
    with pytest.raises(ValueError):
        CellSetup(window=1.5)
