import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcram.circuit import (Capacitor, CellElement, CouplingConfig, Netlist, PulseSpec, Resistor,
                           SolverError, StepControl, TransmissionLineParams, VsaParams,
                           build_coupled, build_single_cell, concatenate, dissipated_energy,
                           pulse_shape, transient_batch, transient_solve, vsa_evaluate,
                           vsa_evaluate_batch, waveforms_summary, waveforms_to_csv, write_csv)
from dcram.device import MemcapacitorParams

DEV = MemcapacitorParams()
WRITE = PulseSpec(1.0, width=1.0, slew=10.0, start=1.0)


def _ramp(t, tau):
    t = np.maximum(t, 0.0)
    return t - tau * (1.0 - np.exp(-t / tau))


def test_rc_only_response_matches_closed_form():
    # without tunnelling the cell is a linear capacitor C0; a 1 MOhm switch makes tau ~ 1 ns
    r = 1e6
    pulse = PulseSpec(1.0, width=3.0, slew=1.0, start=0.5)
    net = build_single_cell(DEV, None, pulse, switch_resistance=r)
    wf = transient_solve(net, 6.0, StepControl(dt=1e-3), tunneling=False)
    tau = r * DEV.C0 * 1e9
    t = wf.t
    # trapezoid = sum of four ramps with slope +/- 1 V/ns
    exact = _ramp(t - 0.5, tau) - _ramp(t - 1.5, tau) - _ramp(t - 3.5, tau) + _ramp(t - 4.5, tau)
    v = wf.voltage("cell_a")
    sel = np.abs(exact) > 0.05
    assert np.max(np.abs(v[sel] - exact[sel]) / np.abs(exact[sel])) < 1e-6
    assert np.all(wf.ivd == 0.0)


def _final_ivd(dt, ivd0=0.0):
    net = build_single_cell(DEV, TransmissionLineParams(), WRITE)
    return transient_batch(net, 4.0, initial_ivd=[[ivd0]], step=StepControl(dt=dt)).ivd[0, 0]


@pytest.mark.parametrize("ivd0", [0.0, -3.389])
def test_step_halving_second_order(ivd0):
    vals = [_final_ivd(dt, ivd0) for dt in (2e-3, 1e-3, 5e-4)]
    order = math.log2(abs(vals[0] - vals[1]) / abs(vals[1] - vals[2]))
    assert order >= 1.98


def test_kcl_residual_and_halving_check_reported():
    net = build_single_cell(DEV, TransmissionLineParams(), WRITE)
    wf = transient_solve(net, 4.0, StepControl(check_kcl=True, check_halving=True),
                         initial_ivd=[0.0])
    assert wf.max_kcl_residual < 1e-8
    assert wf.halving_error is not None and wf.halving_error < 1e-5


def test_doubling_line_segments_changes_peak_current_little():
    peaks = []
    for n in (10, 20):
        net = build_single_cell(DEV, TransmissionLineParams(n_segments=n), WRITE)
        wf = transient_solve(net, 4.0, initial_ivd=[0.0])
        peaks.append(np.max(np.abs(wf.i_probe)))
    assert abs(peaks[1] - peaks[0]) / peaks[0] < 0.02


@settings(max_examples=10, deadline=None)
@given(st.floats(-4.0, 4.0), st.floats(0.0, 1.5))
def test_single_cell_polarity_mirror(ivd0, amp):
    net = build_single_cell(DEV, TransmissionLineParams(), WRITE)
    res = transient_batch(net, 4.0, initial_ivd=[[ivd0], [-ivd0]], amplitudes=[[amp], [-amp]])
    assert res.ivd[1, 0] == pytest.approx(-res.ivd[0, 0], abs=1e-9)
    assert res.energy_cell[1, 0] == pytest.approx(res.energy_cell[0, 0], rel=1e-7, abs=1e-12)


def test_batch_rows_match_individual_solves():
    net = build_single_cell(DEV, TransmissionLineParams(), WRITE)
    ivd0 = np.array([[-3.0], [0.0], [0.5]])
    amps = np.array([[1.0], [-0.7], [0.3]])
    batch = transient_batch(net, 4.0, initial_ivd=ivd0, amplitudes=amps)
    for i in range(3):
        one = transient_solve(net.with_sources(drive=WRITE.scaled(amps[i, 0])), 4.0,
                              initial_ivd=ivd0[i])
        assert batch.ivd[i, 0] == pytest.approx(one.ivd[-1, 0], abs=1e-12)
        assert batch.energy_cell[i, 0] == pytest.approx(one.energy_cell[-1], rel=1e-9, abs=1e-15)


def test_write_dissipates_and_quadrature_agrees():
    net = build_single_cell(DEV, TransmissionLineParams(), WRITE)
    wf = transient_solve(net, 4.0, initial_ivd=[0.0])
    assert wf.ivd[-1, 0] > 3.0
    rep = dissipated_energy(wf, net)
    assert rep.cell[-1] == pytest.approx(wf.energy_cell[-1], rel=1e-6)
    assert rep.periphery[-1] == pytest.approx(wf.energy_periphery[-1], rel=1e-6)
    assert np.all(np.diff(wf.energy_cell) >= -1e-12)
    assert rep.total > rep.value > 0


def test_zero_amplitude_leaves_state_nearly_untouched():
    net = build_single_cell(DEV, TransmissionLineParams(), WRITE.scaled(0.0))
    wf = transient_solve(net, 4.0, initial_ivd=[1.0])
    # only zero-bias leakage over 4 ns, far below a mV
    assert abs(wf.ivd[-1, 0] - 1.0) < 1e-3


@settings(max_examples=200, deadline=None)
@given(st.floats(-2, 2), st.floats(0.1, 5), st.floats(0.5, 50), st.floats(0, 3),
       st.floats(-1, 10))
def test_pulse_shape_bounded_and_zero_outside(amp, width, slew, start, t):
    p = PulseSpec(amp, width, slew, start)
    v = float(p(t))
    assert abs(v) <= abs(amp) + 1e-12
    if t <= start or t >= p.end:
        assert v == 0.0


@settings(max_examples=100, deadline=None)
@given(st.floats(0.1, 2), st.floats(0.2, 5), st.floats(1, 50))
def test_pulse_width_is_full_width_at_half_maximum(amp, width, slew):
    p = PulseSpec(amp, width, slew, 0.0)
    half_up = p.rise_time / 2
    assert float(p(half_up)) == pytest.approx(amp / 2)
    assert float(p(half_up + width)) == pytest.approx(amp / 2)


def test_pulse_shape_broadcasts():
    v = pulse_shape(np.array([[1.5]]), np.array([1.0, -2.0]), 1.0, 10.0, 1.0)
    assert v.shape == (1, 2)
    np.testing.assert_allclose(v, [[1.0, -2.0]])


@pytest.mark.parametrize("kwargs", [dict(width=0), dict(slew=-1), dict(amplitude=math.nan)])
def test_pulse_rejects_bad_parameters(kwargs):
    args = dict(amplitude=1.0, width=1.0, slew=10.0, start=1.0)
    args.update(kwargs)
    with pytest.raises(ValueError):
        PulseSpec(**args)


def test_line_and_step_validation():
    with pytest.raises(ValueError):
        TransmissionLineParams(r_per_mm=0)
    with pytest.raises(ValueError):
        TransmissionLineParams(n_segments=0)
    with pytest.raises(ValueError):
        StepControl(dt=0)
    with pytest.raises(ValueError):
        build_single_cell(DEV, None, WRITE, switch_resistance=0)


def test_disconnected_island_is_rejected():
    net = Netlist(sources={"drive": (WRITE,)})
    net.resistors.append(Resistor("r", "drive", "a", 1e3))
    net.cells.append(CellElement("cell", "a", "b", DEV, 1))
    net.capacitors.append(Capacitor("c", "b", 1.0))
    net.validate()
    net.resistors.append(Resistor("r_island", "x", "y", 1e3))
    with pytest.raises(ValueError):
        net.validate()


def test_coupled_chain_structure():
    net = build_coupled([DEV] * 3, CouplingConfig.three_cell_fixed(), (WRITE, WRITE.scaled(-1)))
    assert [c.name for c in net.cells] == ["cell0", "cell1", "cell2"]
    assert {r.name for r in net.resistors} == {"access1", "couple0", "couple1", "access2"}
    with pytest.raises(ValueError):
        build_coupled([DEV] * 2, CouplingConfig.three_cell_fixed(), (WRITE, WRITE))


def test_two_cell_configurations():
    pols = {i: CouplingConfig.two_cell(i).polarities for i in (1, 2, 3, 4)}
    assert pols == {1: (1, 1), 2: (1, -1), 3: (-1, 1), 4: (-1, -1)}
    with pytest.raises(ValueError):
        CouplingConfig.two_cell(5)


def _coupled(config, ivd0, amps):
    net = build_coupled([DEV] * config.arity, config, (WRITE, WRITE))
    return transient_batch(net, 4.0, initial_ivd=ivd0, amplitudes=amps).ivd[0]


def test_flipping_all_polarities_equals_negating_drives():
    ivd0 = [[3.389, -3.389]]
    a = _coupled(CouplingConfig.two_cell(2), ivd0, [[0.73, -0.73]])
    b = _coupled(CouplingConfig.two_cell(3), ivd0, [[-0.73, 0.73]])
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_reversed_chain_is_the_same_circuit():
    # reading a chain from the other end swaps drives and cells and flips polarities
    cfg = CouplingConfig.three_cell_fixed()
    a = _coupled(cfg, [[3.389, 3.389, -3.389]], [[1.1, -1.1]])
    b = _coupled(cfg.flipped(), [[-3.389, 3.389, 3.389]], [[-1.1, 1.1]])
    np.testing.assert_allclose(a, b[::-1], atol=1e-9)


def test_amplitude_shape_errors():
    net = build_single_cell(DEV, None, WRITE)
    with pytest.raises(ValueError):
        transient_batch(net, 4.0, amplitudes=[[1.0, 2.0]])
    with pytest.raises(ValueError):
        transient_batch(net, 4.0, initial_ivd=[[0.0, 1.0]])
    with pytest.raises(ValueError):
        transient_batch(net, 4.0, initial_ivd=np.zeros((2, 1)), amplitudes=np.ones((3, 1)))


def test_newton_failure_raises_solver_error():
    net = build_single_cell(DEV, None, WRITE.scaled(1.5))
    with pytest.raises(SolverError):
        transient_batch(net, 4.0, step=StepControl(dt=0.5, max_newton=1))


def test_concatenate_continues_energy():
    net = build_single_cell(DEV, TransmissionLineParams(), WRITE)
    a = transient_solve(net, (0.0, 2.0), initial_ivd=[0.0])
    b = transient_solve(net, (2.0, 4.0), t_start_state=a._y[-1])
    full = transient_solve(net, 4.0, initial_ivd=[0.0])
    joined = concatenate(a, b)
    assert joined.ivd[-1, 0] == pytest.approx(full.ivd[-1, 0], abs=1e-9)
    assert joined.energy_cell[-1] == pytest.approx(full.energy_cell[-1], rel=1e-6)


def test_vsa_batch_matches_single_evaluation():
    net = build_single_cell(DEV, TransmissionLineParams(), PulseSpec(1.0, 0.5, 10.0, 1.0),
                            vsa=VsaParams())
    ivds = [-0.5, 0.5]
    batch = vsa_evaluate_batch(net, ivds)
    for i, v in enumerate(ivds):
        one = vsa_evaluate(net, v)
        assert bool(batch.activated[i]) == one.activated
        assert batch.final_ivd[i] == pytest.approx(one.waveforms.ivd[-1, 0], abs=1e-9)
    assert list(batch.activated) == [True, False]


def test_vsa_requires_single_cell():
    net = build_coupled([DEV] * 2, CouplingConfig.two_cell(1), (WRITE, WRITE))
    with pytest.raises(ValueError):
        vsa_evaluate(net, 0.5)


def test_csv_export(tmp_path):
    net = build_single_cell(DEV, None, WRITE)
    wf = transient_solve(net, 3.0, StepControl(dt=1e-2), initial_ivd=[0.0])
    path = tmp_path / "wf.csv"
    waveforms_to_csv(wf, path)
    raw = path.read_bytes()
    assert b"\r\n" not in raw
    rows = list(csv.reader(raw.decode().splitlines()))
    assert rows[0][0].startswith("t")
    assert len(rows) == len(wf.t) + 1
    summary = waveforms_summary(wf)
    assert summary["final_ivd_V"][0] == pytest.approx(wf.ivd[-1, 0])


def test_write_csv_rejects_ragged_columns(tmp_path):
    with pytest.raises(ValueError):
        write_csv(tmp_path / "x.csv", {"a": [1, 2], "b": [1]})
