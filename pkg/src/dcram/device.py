"""
Three-insulator solid-state memcapacitive cell.

The stack is metal / high-k / metal / low-k / metal / high-k / metal.  The
outer high-k layers block conduction; electrons tunnel through the low-k
middle layer.  Two charges describe the cell completely:

    q : charge on the external plates
    Q : charge on the internal metal layer next to the positive terminal

with

    V_C   = Q/C2 + q/C0                 (terminal voltage)
    dQ/dt = -I((Q + q)/C2)              (tunnel current through low-k)

Units: SI internally.  Interfaces take eV, nm and um^2 for geometry and
report capacitances in fF where noted.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.constants import e as ELEMENTARY_CHARGE
from scipy.constants import epsilon_0, h as PLANCK, m_e

UM2 = 1e-12  # m^2 per um^2
NM = 1e-9
FEMTO = 1e-15


class DecayError(RuntimeError):
    """Storage-mode integration failed; ``t_last`` is the last good time (s)."""

    def __init__(self, message: str, t_last: float):
        super().__init__(f"{message} (last valid t = {t_last:.6g} s)")
        self.t_last = t_last


class DivergentCapacitance(ArithmeticError):
    """q != 0 while V_C == 0: the dynamic capacitance is infinite."""


class UndefinedCapacitance(ArithmeticError):
    """q == 0 and V_C == 0: the dynamic capacitance is 0/0."""


def _check_finite(**values):
    for name, v in values.items():
        if not np.all(np.isfinite(v)):
            raise ValueError(f"{name} must be finite, got {v!r}")


@dataclass(frozen=True)
class BarrierParams:
    """One insulating layer.

    Attributes
    ----------
    height : float
        Barrier height in eV.
    thickness : float
        Physical thickness in nm.
    rel_permittivity : float
        Relative dielectric constant k.
    eff_mass_ratio : float
        Tunneling effective mass in units of the free electron mass.
    """

    height: float
    thickness: float
    rel_permittivity: float
    eff_mass_ratio: float = 1.0

    def __post_init__(self):
        _check_finite(height=self.height, thickness=self.thickness,
                      rel_permittivity=self.rel_permittivity,
                      eff_mass_ratio=self.eff_mass_ratio)
        if self.height <= 0:
            raise ValueError(f"barrier height must be > 0 eV, got {self.height}")
        if self.thickness <= 0:
            raise ValueError(f"thickness must be > 0 nm, got {self.thickness}")
        if self.rel_permittivity < 1:
            raise ValueError(f"relative permittivity must be >= 1, got {self.rel_permittivity}")
        if self.eff_mass_ratio <= 0:
            raise ValueError(f"effective mass ratio must be > 0, got {self.eff_mass_ratio}")

    def plate_capacitance(self, area_um2: float) -> float:
        """Parallel-plate capacitance of this layer in farads."""
        return epsilon_0 * self.rel_permittivity * area_um2 * UM2 / (self.thickness * NM)


HIGH_K = BarrierParams(height=3.0, thickness=6.0, rel_permittivity=50.0)
LOW_K = BarrierParams(height=0.2, thickness=8.0, rel_permittivity=3.9)
# thicker barrier: longest retention of the swept stacks, but a higher write threshold
LOW_K_RETENTION = BarrierParams(height=0.2, thickness=10.0, rel_permittivity=3.9)


@dataclass(frozen=True)
class MemcapacitorParams:
    """Layer stack of one cell.

    ``outer_layer`` is used for both high-k layers and is treated as a
    perfect insulator; only its capacitance matters.
    """

    area: float = 0.25
    outer_layer: BarrierParams = HIGH_K
    middle_layer: BarrierParams = LOW_K

    def __post_init__(self):
        _check_finite(area=self.area)
        if self.area <= 0:
            raise ValueError(f"area must be > 0 um^2, got {self.area}")

    @property
    def C1(self) -> float:
        return self.outer_layer.plate_capacitance(self.area)

    C3 = C1

    @property
    def C2(self) -> float:
        return self.middle_layer.plate_capacitance(self.area)

    @property
    def C0(self) -> float:
        return 1.0 / (1.0 / self.C1 + 1.0 / self.C2 + 1.0 / self.C3)

    @property
    def coupling_ratio(self) -> float:
        """C0/C2: fraction of the terminal voltage that lands on the low-k layer at Q = 0."""
        return self.C0 / self.C2

    def capacitances_fF(self) -> dict:
        return {name: getattr(self, name) / FEMTO for name in ("C0", "C1", "C2", "C3")}

    def with_middle(self, **changes) -> "MemcapacitorParams":
        """Copy with some middle-layer fields replaced (k, thickness, ...)."""
        mid = self.middle_layer
        fields = dict(height=mid.height, thickness=mid.thickness,
                      rel_permittivity=mid.rel_permittivity,
                      eff_mass_ratio=mid.eff_mass_ratio)
        fields.update(changes)
        return MemcapacitorParams(self.area, self.outer_layer, BarrierParams(**fields))


@dataclass(frozen=True)
class MemcapacitorState:
    """Charge pair (Q, q) in coulombs."""

    Q: float = 0.0
    q: float = 0.0

    def __post_init__(self):
        _check_finite(Q=self.Q, q=self.q)

    def ivd(self, params: MemcapacitorParams) -> float:
        """Internal voltage difference Q/C2 in volts."""
        return self.Q / params.C2

    @classmethod
    def from_ivd(cls, ivd: float, params: MemcapacitorParams, v_c: float = 0.0):
        Q = ivd * params.C2
        return cls(Q=Q, q=plate_charge(v_c, Q, params))


# ----------------------------------------------------------------------------
# Tunnel current
# ----------------------------------------------------------------------------

def _simmons_terms(v, barrier: BarrierParams):
    """Shared pieces of the rectangular-barrier Simmons expression for v >= 0.

    Below the barrier height the barrier is trapezoidal with mean height
    phi - eV/2 over the full thickness.  Above it the barrier is triangular:
    mean height phi/2 over the shortened width s*phi/(eV).
    """
    phi = barrier.height * ELEMENTARY_CHARGE
    s = barrier.thickness * NM
    ev = ELEMENTARY_CHARGE * v
    low = ev < phi
    width = np.where(low, s, s * phi / np.where(low, phi, ev))
    mean = np.where(low, phi - ev / 2.0, phi / 2.0)
    # A = 4 pi beta dS sqrt(2m)/h with beta = 1
    a_per_len = 4.0 * np.pi * math.sqrt(2.0 * barrier.eff_mass_ratio * m_e) / PLANCK
    return low, phi, s, ev, width, mean, a_per_len


def simmons_current(v_mid, barrier: BarrierParams, area: float):
    """Tunnel current (A) through ``barrier`` for voltage ``v_mid`` (V) across it.

    Symmetric rectangular barrier, no image force.  Works elementwise on
    arrays; odd in ``v_mid``.
    """
    v_mid = np.asarray(v_mid, dtype=float)
    _check_finite(v_mid=v_mid, area=area)
    sign = np.sign(v_mid)
    v = np.abs(v_mid)
    low, phi, s, ev, width, mean, apl = _simmons_terms(v, barrier)
    a = apl * width
    pre = ELEMENTARY_CHARGE / (2.0 * np.pi * PLANCK * width**2)
    r1, r2 = np.sqrt(mean), np.sqrt(mean + ev)
    # mean*exp(-a r1) - (mean+ev)*exp(-a r2), rearranged so small bias does not cancel
    x = a * ev / (r1 + r2)
    j = pre * np.exp(-a * r1) * (-(mean + ev) * np.expm1(-x) - ev)
    out = sign * j * area * UM2
    return out if out.ndim else float(out)


def simmons_conductance(v_mid, barrier: BarrierParams, area: float):
    """Analytic dI/dV (S) of :func:`simmons_current`; even in ``v_mid``."""
    v_mid = np.asarray(v_mid, dtype=float)
    v = np.abs(v_mid)
    low, phi, s, ev, width, mean, apl = _simmons_terms(v, barrier)
    e = ELEMENTARY_CHARGE
    area_m2 = area * UM2
    a = apl * width
    pre = e / (2.0 * np.pi * PLANCK * width**2)

    # v < phi/e: width fixed, mean = phi - ev/2
    u1, u2 = mean, mean + ev
    r1, r2 = np.sqrt(u1), np.sqrt(u2)
    x1, x2 = np.exp(-a * r1), np.exp(-a * r2)
    g_low = pre * e * 0.5 * (x1 * (a * r1 / 2.0 - 1.0) + x2 * (a * r2 / 2.0 - 1.0))

    # v >= phi/e: mean = phi/2, width = s*phi/ev, so a and pre depend on v
    half = phi / 2.0
    rh = math.sqrt(half)
    t1 = half * x1
    t2 = (half + ev) * x2
    # d a / d(ev) = -a/ev ; d pre / d(ev) = 2 pre / ev
    ev_safe = np.where(low, 1.0, ev)
    da = -a / ev_safe
    dt1 = t1 * (-rh) * da
    dt2 = x2 + t2 * (-(da * r2 + a / (2.0 * r2)))
    dpre = 2.0 * pre / ev_safe
    g_high = e * (dpre * (t1 - t2) + pre * (dt1 - dt2))

    g = np.where(low, g_low, g_high) * area_m2
    return g if g.ndim else float(g)


def simmons_iv(v_mid, barrier: BarrierParams, area: float):
    """Current (A) and conductance (S) together, for solver inner loops.

    Same values as :func:`simmons_current` and :func:`simmons_conductance`
    but sharing the common terms and skipping input validation.
    """
    v_mid = np.asarray(v_mid, dtype=float)
    sign = np.sign(v_mid)
    v = np.abs(v_mid)
    low, phi, s, ev, width, mean, apl = _simmons_terms(v, barrier)
    e = ELEMENTARY_CHARGE
    area_m2 = area * UM2
    a = apl * width
    pre = e / (2.0 * np.pi * PLANCK * width**2)
    r1, r2 = np.sqrt(mean), np.sqrt(mean + ev)
    x1 = np.exp(-a * r1)
    x2 = np.exp(-a * r2)
    j = pre * x1 * (-(mean + ev) * np.expm1(-a * ev / (r1 + r2)) - ev)
    g = pre * e * 0.5 * (x1 * (a * r1 / 2.0 - 1.0) + x2 * (a * r2 / 2.0 - 1.0))
    if not low.all():
        ev_safe = np.where(low, 1.0, ev)
        da = -a / ev_safe
        t1 = mean * x1
        t2 = (mean + ev) * x2
        dt1 = -t1 * r1 * da
        dt2 = x2 - t2 * (da * r2 + a / (2.0 * r2))
        g_high = e * (2.0 * pre / ev_safe * (t1 - t2) + pre * (dt1 - dt2))
        g = np.where(low, g, g_high)
    return sign * j * area_m2, g * area_m2


def internal_current(state: MemcapacitorState, params: MemcapacitorParams) -> float:
    """Tunnel current I(Q+q) evaluated at middle-layer voltage (Q+q)/C2."""
    v_mid = (state.Q + state.q) / params.C2
    return simmons_current(v_mid, params.middle_layer, params.area)


def plate_charge(v_c, Q, params: MemcapacitorParams):
    """Plate charge q that satisfies V_C = Q/C2 + q/C0."""
    return params.C0 * (v_c - Q / params.C2)


def terminal_voltage(state: MemcapacitorState, params: MemcapacitorParams) -> float:
    return state.Q / params.C2 + state.q / params.C0


def state_derivative(v_c: float, state: MemcapacitorState, params: MemcapacitorParams) -> float:
    """dQ/dt (A) for a cell held at terminal voltage ``v_c``."""
    expected = plate_charge(v_c, state.Q, params)
    scale = max(abs(expected), abs(state.q), params.C0 * 1e-9)
    if abs(expected - state.q) > 1e-9 * scale:
        raise ValueError(f"state q={state.q:.6g} C inconsistent with V_C={v_c} V "
                         f"(expected {expected:.6g} C)")
    return -internal_current(state, params)


def dynamic_capacitance(state: MemcapacitorState, v_c: float) -> float:
    """C_d = q/V_C in fF."""
    if v_c == 0.0:
        if state.q == 0.0:
            raise UndefinedCapacitance("q = 0 and V_C = 0")
        raise DivergentCapacitance(f"V_C = 0 with q = {state.q:.3g} C")
    return state.q / v_c / FEMTO


# ----------------------------------------------------------------------------
# Storage mode
# ----------------------------------------------------------------------------

#: middle-layer voltage below which storage decay is treated as ohmic
LINEAR_V_MID = 1e-5

#: middle-layer voltage used as the "infinitely written" start of an envelope
ENVELOPE_V_MID = 2.0


@dataclass
class DecayResult:
    t: np.ndarray  # s
    ivd: np.ndarray  # V
    ivd0: float
    params: MemcapacitorParams = field(repr=False)

    def at(self, t: float) -> float:
        """IVD interpolated in log-time."""
        return float(np.interp(np.log(t), np.log(self.t), self.ivd))


def log_time_grid(t_end: float, decades: int = 14, per_decade: int = 10) -> np.ndarray:
    return t_end * np.logspace(-decades, 0, decades * per_decade + 1)


def storage_ivd_rate(ivd, params: MemcapacitorParams):
    """d(IVD)/dt at V_C = 0 (V/s)."""
    r = params.coupling_ratio
    return -simmons_current((1.0 - r) * np.asarray(ivd), params.middle_layer, params.area) / params.C2


def storage_decay(ivd0: float, params: MemcapacitorParams, t_end: float = 1e6,
                  n_samples: int | None = None, t0: float = 0.0,
                  rtol: float = 1e-11) -> DecayResult:
    """Integrate the V_C = 0 decay dQ/dt = -I((1 - C0/C2) Q) from IVD ``ivd0``.

    Samples on a logarithmic grid ending at ``t_end`` (14 decades, 10 points
    per decade unless ``n_samples`` is given).  ``t0`` shifts the start time.
    """
    from scipy.integrate import solve_ivp

    _check_finite(ivd0=ivd0, t_end=t_end)
    if t_end <= 0:
        raise ValueError("t_end must be > 0")
    if n_samples is None:
        t = log_time_grid(t_end)
    else:
        t = t_end * np.logspace(-14, 0, n_samples)
    if ivd0 == 0.0:
        return DecayResult(t, np.zeros_like(t), 0.0, params)

    # integrate in log-time with state log|IVD| to keep the huge dynamic range tame
    sgn = math.copysign(1.0, ivd0)
    r = params.coupling_ratio
    mid, area, c2 = params.middle_layer, params.area, params.C2

    def rhs(tau, y):
        tt = math.exp(tau)
        v = math.exp(y[0])
        return [-tt * simmons_current((1.0 - r) * v, mid, area) / (c2 * v)]

    def jac(tau, y):
        tt = math.exp(tau)
        v = math.exp(y[0])
        vm = (1.0 - r) * v
        i = simmons_current(vm, mid, area)
        g = simmons_conductance(vm, mid, area)
        return [[-tt * ((1.0 - r) * g - i / v) / c2]]

    # early part from t0 to t[0] in linear time: very short but the current may be large
    first = t[0]
    y_start = math.log(abs(ivd0))
    if first > 0:
        early = solve_ivp(lambda tt, y: [-simmons_current((1.0 - r) * math.exp(y[0]), mid, area)
                                         / (c2 * math.exp(y[0]))],
                          (0.0, first), [y_start], method="Radau", rtol=rtol, atol=1e-12,
                          jac=lambda tt, y: [[-((1.0 - r) * simmons_conductance((1.0 - r) * math.exp(y[0]), mid, area)
                                                - simmons_current((1.0 - r) * math.exp(y[0]), mid, area) / math.exp(y[0])) / c2]])
        if not early.success:
            raise DecayError(early.message, float(early.t[-1]) + t0)
        y_start = float(early.y[0, -1])
    taus = np.log(t)
    # below LINEAR_V_MID the barrier is ohmic and the decay is a plain exponential
    y_linear = math.log(LINEAR_V_MID / (1.0 - r))

    def ohmic(tau, y):
        return y[0] - y_linear
    ohmic.terminal = True

    if y_start <= y_linear:
        sol_t, sol_y, t_switch, y_switch = np.empty(0), np.empty(0), taus[0], y_start
    else:
        sol = solve_ivp(rhs, (taus[0], taus[-1]), [y_start], method="Radau", t_eval=taus,
                        rtol=rtol, atol=1e-12, jac=jac, events=ohmic)
        if not sol.success:
            raise DecayError(sol.message, float(np.exp(sol.t[-1])) if sol.t.size else 0.0)
        sol_t, sol_y = sol.t, sol.y[0]
        if sol.t_events[0].size:
            t_switch, y_switch = float(sol.t_events[0][0]), float(sol.y_events[0][0][0])
        else:
            t_switch, y_switch = taus[-1], sol_y[-1]
    log_ivd = np.empty_like(taus)
    n_done = sol_t.size
    log_ivd[:n_done] = sol_y
    if n_done < taus.size:
        g0 = simmons_conductance(0.0, mid, area)
        rate = (1.0 - r) * g0 / c2
        log_ivd[n_done:] = y_switch - rate * (t[n_done:] - math.exp(t_switch))
    ivd = sgn * np.exp(log_ivd)
    return DecayResult(t + t0, ivd, ivd0, params)


def decay_envelope(params: MemcapacitorParams, t_end: float = 1e6, **kw) -> DecayResult:
    """Decay from a saturating initial charge; bounds every other trajectory from above."""
    ivd0 = ENVELOPE_V_MID / (1.0 - params.coupling_ratio)
    return storage_decay(ivd0, params, t_end, **kw)
