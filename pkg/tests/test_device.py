import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcram.device import (HIGH_K, LOW_K, LOW_K_RETENTION, BarrierParams, DivergentCapacitance,
                          MemcapacitorParams, MemcapacitorState, UndefinedCapacitance,
                          decay_envelope, dynamic_capacitance, internal_current, plate_charge,
                          simmons_conductance, simmons_current, simmons_iv, state_derivative,
                          storage_decay, terminal_voltage)

# (height eV, thickness nm, V, current A) for a 0.25 um^2 barrier, m* = 1;
# regenerate with tests/oracles/simmons_mp.py
SIMMONS_TABLE = [
    (0.2, 8, -1.5, -0.0042721468130341996),
    (0.2, 8, -0.7, -1.7924267989662501e-5),
    (0.2, 8, -0.2, -1.3311358007346364e-14),
    (0.2, 8, -1e-3, -5.0133682293770795e-20),
    (0.2, 8, 1e-6, 5.0116689114079424e-23),
    (0.2, 8, 1e-3, 5.0133682293770795e-20),
    (0.2, 8, 0.05, 5.3306664583681246e-18),
    (0.2, 8, 0.1, 5.8907796097231954e-17),
    (0.2, 8, 0.19999, 1.3303399818972873e-14),
    (0.2, 8, 0.2, 1.3311358007346364e-14),
    (0.2, 8, 0.20001, 1.3329953678199982e-14),
    (0.2, 8, 0.35, 2.7223933288782459e-9),
    (0.2, 8, 0.7, 1.7924267989662501e-5),
    (0.2, 8, 1.0, 0.00033740488192400018),
    (0.2, 8, 1.5, 0.0042721468130341996),
    (0.2, 10, -1.5, -0.001152862015000919),
    (0.2, 10, -0.7, -1.801013894694957e-6),
    (0.2, 10, -0.2, -1.3062361751919225e-17),
    (0.2, 10, -1e-3, -4.2476854995498714e-24),
    (0.2, 10, 1e-6, 4.2454201128568162e-27),
    (0.2, 10, 1e-3, 4.2476854995498714e-24),
    (0.2, 10, 0.05, 6.5130506984495822e-22),
    (0.2, 10, 0.1, 1.3474662707840407e-20),
    (0.2, 10, 0.19999, 1.3052437671766253e-17),
    (0.2, 10, 0.2, 1.3062361751919225e-17),
    (0.2, 10, 0.20001, 1.3084848402352193e-17),
    (0.2, 10, 0.35, 4.2945083944111159e-11),
    (0.2, 10, 0.7, 1.801013894694957e-6),
    (0.2, 10, 1.0, 5.908575993652803e-5),
    (0.2, 10, 1.5, 0.001152862015000919),
    (0.2, 6, -1.5, -0.01790885341192785),
    (0.2, 6, -0.7, -0.00020290711362593165),
    (0.2, 6, -0.2, -1.5434040076920198e-11),
    (0.2, 6, -1e-3, -6.261854154490519e-16),
    (0.2, 6, 1e-6, 6.2606752736307266e-19),
    (0.2, 6, 1e-3, 6.261854154490519e-16),
    (0.2, 6, 0.05, 4.8664775668406026e-14),
    (0.2, 6, 0.1, 2.9262368758264646e-13),
    (0.2, 6, 0.19999, 1.5427311949264484e-11),
    (0.2, 6, 0.2, 1.5434040076920198e-11),
    (0.2, 6, 0.20001, 1.545059425743571e-11),
    (0.2, 6, 0.35, 1.9635337415904573e-7),
    (0.2, 6, 0.7, 0.00020290711362593165),
    (0.2, 6, 1.0, 0.0021895178510778938),
    (0.2, 6, 1.5, 0.01790885341192785),
    (3.0, 6, -1.5, -8.5993639062934486e-42),
    (3.0, 6, -0.7, -3.9006134795702519e-45),
    (3.0, 6, -0.2, -4.0998161306458677e-47),
    (3.0, 6, -1e-3, -1.2724800414321366e-49),
    (3.0, 6, 1e-6, 1.2724635066357618e-52),
    (3.0, 6, 1e-3, 1.2724800414321366e-49),
    (3.0, 6, 0.05, 6.5711033472736383e-48),
    (3.0, 6, 0.1, 1.4446376532242353e-47),
    (3.0, 6, 0.19999, 4.0994305684552713e-47),
    (3.0, 6, 0.2, 4.0998161306458677e-47),
    (3.0, 6, 0.20001, 4.1002017253402338e-47),
    (3.0, 6, 0.35, 1.6060100963737738e-46),
    (3.0, 6, 0.7, 3.9006134795702519e-45),
    (3.0, 6, 1.0, 6.5140760017812709e-44),
    (3.0, 6, 1.5, 8.5993639062934486e-42),
]


@pytest.mark.parametrize("height, thickness, v, expected", SIMMONS_TABLE)
def test_simmons_current_matches_high_precision_table(height, thickness, v, expected):
    barrier = BarrierParams(height, thickness, 3.9)
    got = simmons_current(v, barrier, 0.25)
    assert got == pytest.approx(expected, rel=1e-9)


def test_simmons_current_vectorised_equals_scalar():
    v = np.linspace(-1.5, 1.5, 61)
    vec = simmons_current(v, LOW_K, 0.25)
    assert vec.shape == v.shape
    assert np.array_equal(vec, [simmons_current(x, LOW_K, 0.25) for x in v])


def test_simmons_current_zero_at_zero_bias():
    assert simmons_current(0.0, LOW_K, 0.25) == 0.0


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-6, 1.5), st.floats(0.1, 1.0), st.floats(4.0, 12.0))
def test_simmons_current_is_odd(v, height, thickness):
    b = BarrierParams(height, thickness, 3.9)
    assert simmons_current(-v, b, 0.25) == -simmons_current(v, b, 0.25)


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-4, 1.49), st.floats(1e-3, 0.01))
def test_simmons_current_strictly_increasing(v, dv):
    assert simmons_current(v + dv, LOW_K, 0.25) > simmons_current(v, LOW_K, 0.25)


@settings(max_examples=100, deadline=None)
@given(st.floats(-1.5, 1.5).filter(lambda v: abs(abs(v) - 0.2) > 1e-3))
def test_conductance_is_derivative_of_current(v):
    h = 1e-6
    fd = (simmons_current(v + h, LOW_K, 0.25) - simmons_current(v - h, LOW_K, 0.25)) / (2 * h)
    g = simmons_conductance(v, LOW_K, 0.25)
    assert g == pytest.approx(fd, rel=1e-5)


def test_fused_iv_matches_separate_functions():
    v = np.linspace(-1.5, 1.5, 301)
    i, g = simmons_iv(v, LOW_K, 0.25)
    np.testing.assert_allclose(i, simmons_current(v, LOW_K, 0.25), rtol=1e-13, atol=0)
    np.testing.assert_allclose(g, simmons_conductance(v, LOW_K, 0.25), rtol=1e-12, atol=0)


def test_current_continuous_at_barrier_height():
    b = LOW_K
    below = simmons_current(0.2 - 1e-12, b, 0.25)
    above = simmons_current(0.2 + 1e-12, b, 0.25)
    assert above == pytest.approx(below, rel=1e-9)


def test_thicker_barrier_leaks_less():
    v = np.array([0.05, 0.3, 1.0])
    assert np.all(simmons_current(v, LOW_K_RETENTION, 0.25) < simmons_current(v, LOW_K, 0.25))


@pytest.mark.parametrize("kwargs", [dict(height=0), dict(height=-1), dict(thickness=0),
                                    dict(rel_permittivity=0.5), dict(eff_mass_ratio=0),
                                    dict(height=math.nan)])
def test_barrier_rejects_unphysical_values(kwargs):
    args = dict(height=0.2, thickness=8, rel_permittivity=3.9)
    args.update(kwargs)
    with pytest.raises(ValueError):
        BarrierParams(**args)


def test_simmons_rejects_nonfinite_voltage():
    with pytest.raises(ValueError):
        simmons_current(math.inf, LOW_K, 0.25)


def test_default_cell_capacitances():
    p = MemcapacitorParams()
    c = p.capacitances_fF()
    # parallel plates: eps0 k A / d
    eps0 = 8.8541878188e-12
    assert c["C2"] == pytest.approx(eps0 * 3.9 * 0.25e-12 / 8e-9 * 1e15, rel=1e-12)
    assert c["C1"] == pytest.approx(eps0 * 50 * 0.25e-12 / 6e-9 * 1e15, rel=1e-12)
    assert 1 / c["C0"] == pytest.approx(2 / c["C1"] + 1 / c["C2"], rel=1e-12)
    assert 0 < p.coupling_ratio < 1


@settings(max_examples=100, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3))
def test_state_round_trip(ivd, v_c):
    p = MemcapacitorParams()
    s = MemcapacitorState.from_ivd(ivd, p, v_c)
    assert s.ivd(p) == pytest.approx(ivd, abs=1e-12)
    assert terminal_voltage(s, p) == pytest.approx(v_c, abs=1e-12)


def test_state_derivative_is_minus_internal_current():
    p = MemcapacitorParams()
    s = MemcapacitorState.from_ivd(1.0, p, 0.5)
    assert state_derivative(0.5, s, p) == -internal_current(s, p)
    # positive IVD at zero bias discharges
    s0 = MemcapacitorState.from_ivd(1.0, p)
    assert state_derivative(0.0, s0, p) < 0


def test_state_derivative_rejects_inconsistent_charge():
    p = MemcapacitorParams()
    s = MemcapacitorState(Q=0.0, q=plate_charge(1.0, 0.0, p))
    with pytest.raises(ValueError):
        state_derivative(0.0, s, p)


def test_dynamic_capacitance_special_cases():
    p = MemcapacitorParams()
    assert dynamic_capacitance(MemcapacitorState.from_ivd(0.0, p, 1.0), 1.0) == \
        pytest.approx(p.C0 * 1e15)
    with pytest.raises(UndefinedCapacitance):
        dynamic_capacitance(MemcapacitorState(), 0.0)
    with pytest.raises(DivergentCapacitance):
        dynamic_capacitance(MemcapacitorState(Q=0.0, q=1e-16), 0.0)


# (k, d nm, ivd0 V, t s, ivd V); regenerate with tests/oracles/decay_mp.py
DECAY_TABLE = [
    (3.9, 8, 1.0, 1e-6, 0.999999930868212),
    (3.9, 8, 1.0, 1, 0.940965912052088),
    (3.9, 8, 1.0, 10, 0.705203779060275),
    (3.9, 8, 1.0, 100, 0.291361669735781),
    (3.9, 8, 1.0, 1000, 0.00316863959380252),
    (3.9, 10, 2.0, 1e-9, 1.99999999999819),
    (3.9, 10, 2.0, 1e-3, 1.99999818662015),
    (3.9, 10, 2.0, 1, 1.99819657775322),
    (3.9, 10, 2.0, 1e3, 1.58509526345396),
    (3.9, 10, 2.0, 1e6, 0.318775326363796),
    (7.5, 10, 1.5, 1e-3, 1.49939447605935),
    (7.5, 10, 1.5, 1, 1.37717081671029),
    (7.5, 10, 1.5, 1e3, 0.904125649574026),
    (7.5, 10, 1.5, 1e5, 0.438765190813097),
]


@pytest.mark.parametrize("k, d, ivd0, t, expected", DECAY_TABLE)
def test_storage_decay_matches_quadrature_table(k, d, ivd0, t, expected):
    p = MemcapacitorParams().with_middle(rel_permittivity=k, thickness=d)
    res = storage_decay(ivd0, p, t_end=t, n_samples=15)
    assert res.ivd[-1] == pytest.approx(expected, rel=1e-6)


def test_storage_decay_negative_is_mirror_image():
    p = MemcapacitorParams()
    a = storage_decay(1.2, p, t_end=1e3)
    b = storage_decay(-1.2, p, t_end=1e3)
    np.testing.assert_allclose(b.ivd, -a.ivd, rtol=1e-12)


def test_storage_decay_zero_stays_zero():
    res = storage_decay(0.0, MemcapacitorParams(), t_end=10.0)
    assert np.all(res.ivd == 0.0)


@settings(max_examples=15, deadline=None)
@given(st.floats(0.05, 3.0))
def test_storage_decay_monotone_and_bounded_by_envelope(ivd0):
    p = MemcapacitorParams(middle_layer=LOW_K_RETENTION)
    res = storage_decay(ivd0, p, t_end=1e4, n_samples=60)
    env = decay_envelope(p, t_end=1e4, n_samples=60)
    # allow round-off from the integrator on the flat early part
    assert np.all(np.diff(res.ivd) <= 1e-12 * ivd0)
    assert np.all(res.ivd <= env.ivd * (1 + 1e-9))


def test_outer_layer_blocks_conduction():
    # the high-k layers are treated as insulators; their Simmons current is negligible
    assert abs(simmons_current(1.5, HIGH_K, 0.25)) < 1e-40
