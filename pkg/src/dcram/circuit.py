"""
Netlists of memcapacitive cells behind RC bit lines, and their transient solution.

Solver units are ns, V, fF, fC, uA (= fC/ns) and fJ, which keeps every matrix
entry of order one.  Public dataclasses use the units named in their fields.

The network equations are written in charge form

    d/dt g(y, t) + h(y, t) = 0

with y = [free node voltages, cell IVDs].  g collects capacitor and plate
charges (linear), h the resistor currents (linear) and the tunnel currents
(nonlinear, one scalar per cell, a function of that cell's middle-layer
voltage only).  Trapezoidal integration turns each step into a linear solve
plus a k-dimensional Newton problem in the k middle-layer voltages.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .device import MemcapacitorParams, simmons_iv

GND = "gnd"
UA_PER_A = 1e6
FF_PER_F = 1e15


class SolverError(RuntimeError):
    """Newton failed to converge at some time step."""

    def __init__(self, message: str, t: float, residual: float):
        super().__init__(f"{message} at t = {t:.6g} ns (residual {residual:.3g} V)")
        self.t = t
        self.residual = residual


# ----------------------------------------------------------------------------
# Parameters
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class TransmissionLineParams:
    """Bit line modelled as an RC ladder.

    r_per_mm in kOhm/mm, c_per_mm in pF/mm, length in mm.  A zero length
    means no line: the cell is driven directly.
    """

    r_per_mm: float = 1.5
    c_per_mm: float = 0.2
    length: float = 1.0
    n_segments: int = 10

    def __post_init__(self):
        if self.r_per_mm <= 0 or self.c_per_mm <= 0:
            raise ValueError("line R and C per mm must be positive")
        if self.length < 0:
            raise ValueError("line length must be >= 0")
        if int(self.n_segments) != self.n_segments or self.n_segments < 1:
            raise ValueError("n_segments must be an integer >= 1")

    @property
    def present(self) -> bool:
        return self.length > 0


@dataclass(frozen=True)
class PulseSpec:
    """Trapezoidal ("smooth square") pulse.

    ``width`` is the full width at half amplitude in ns, ``slew`` the edge
    rate in V/ns and ``start`` the time (ns) the rising edge begins.
    """

    amplitude: float
    width: float = 1.0
    slew: float = 10.0
    start: float = 1.0

    def __post_init__(self):
        if not all(math.isfinite(x) for x in (self.amplitude, self.width, self.slew, self.start)):
            raise ValueError("pulse parameters must be finite")
        if self.width <= 0:
            raise ValueError(f"pulse width must be > 0 ns, got {self.width}")
        if self.slew <= 0:
            raise ValueError(f"pulse slew must be > 0 V/ns, got {self.slew}")

    @property
    def rise_time(self) -> float:
        return abs(self.amplitude) / self.slew

    @property
    def end(self) -> float:
        return self.start + self.width + self.rise_time

    def __call__(self, t):
        return pulse_shape(t, self.amplitude, self.width, self.slew, self.start)

    def shifted(self, dt: float) -> "PulseSpec":
        return replace(self, start=self.start + dt)

    def scaled(self, amplitude: float) -> "PulseSpec":
        return replace(self, amplitude=amplitude)


def pulse_shape(t, amplitude, width, slew, start):
    """Value of a trapezoidal pulse; broadcasts over ``t`` and ``amplitude``."""
    t = np.asarray(t, dtype=float)
    amplitude = np.asarray(amplitude, dtype=float)
    tr = np.abs(amplitude) / slew
    x = t - start
    safe_tr = np.where(tr > 0, tr, 1.0)
    with np.errstate(over="ignore"):  # near-zero amplitudes give near-zero edges
        up = np.clip(x / safe_tr, 0.0, 1.0)
        down = np.clip((width + tr - x) / safe_tr, 0.0, 1.0)
    frac = np.minimum(up, down)
    frac = np.where(tr > 0, frac, 0.0)
    return amplitude * frac


@dataclass(frozen=True)
class VsaParams:
    """Behavioural voltage sense amplifier.

    During ``delay`` (ns) after the read pulse starts the VSA only senses.
    Its input V_VSA is the charge the cell draws from the bit line minus
    the charge a reference cell at Q = 0 would draw, over
    ``sense_capacitance`` (fF).  If V_VSA ever exceeds ``threshold`` (V) it
    then drives ``refresh_pulse`` (start measured from the end of the delay)
    and dissipates ``internal_loss`` fJ.
    """

    threshold: float = 0.1
    delay: float = 0.5
    refresh_pulse: PulseSpec = PulseSpec(-1.0, width=1.0, slew=10.0, start=0.1)
    internal_loss: float = 0.5
    sense_capacitance: float = 1.0

    def __post_init__(self):
        if self.threshold <= 0:
            raise ValueError("VSA threshold must be > 0")
        if self.delay <= 0 or self.sense_capacitance <= 0 or self.internal_loss < 0:
            raise ValueError("VSA delay, sense capacitance must be > 0 and loss >= 0")


# ----------------------------------------------------------------------------
# Netlist
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class CouplingConfig:
    """How two or three cells are chained between the two drives.

    Cells sit in series in list order from drive V1 to drive V2.  A cell with
    polarity +1 is written towards 1 when the V1 side is positive with
    respect to the V2 side; polarity -1 is the reversed device.
    """

    kind: str
    polarities: tuple
    index: int | None = None

    TWO_CELL = {1: (1, 1), 2: (1, -1), 3: (-1, 1), 4: (-1, -1)}

    def __post_init__(self):
        if self.kind not in ("two_cell", "three_cell_fixed"):
            raise ValueError(f"unknown coupling kind {self.kind!r}")
        if any(p not in (1, -1) for p in self.polarities):
            raise ValueError("polarities must be +1 or -1")
        n = 2 if self.kind == "two_cell" else 3
        if len(self.polarities) != n:
            raise ValueError(f"{self.kind} needs {n} polarities")

    @property
    def arity(self) -> int:
        return len(self.polarities)

    @classmethod
    def two_cell(cls, index: int) -> "CouplingConfig":
        if index not in cls.TWO_CELL:
            raise ValueError(f"two-cell configuration index must be 1-4, got {index}")
        return cls("two_cell", cls.TWO_CELL[index], index)

    @classmethod
    def three_cell_fixed(cls, polarities=(-1, -1, -1)) -> "CouplingConfig":
        return cls("three_cell_fixed", tuple(polarities), None)

    def flipped(self) -> "CouplingConfig":
        """All polarities reversed."""
        pol = tuple(-p for p in self.polarities)
        if self.kind == "two_cell":
            idx = {v: k for k, v in self.TWO_CELL.items()}[pol]
            return CouplingConfig(self.kind, pol, idx)
        return CouplingConfig(self.kind, pol, None)

    @property
    def label(self) -> str:
        if self.kind == "two_cell":
            return f"two_cell[{self.index}]"
        return "three_cell_fixed[" + "".join("+" if p > 0 else "-" for p in self.polarities) + "]"


@dataclass(frozen=True)
class CellElement:
    name: str
    a: str
    b: str
    device: MemcapacitorParams
    polarity: int = 1

    @property
    def plus_minus(self) -> tuple:
        """(p, n) nodes of the V_C = V_p - V_n convention.

        Positive V_C drives Q negative, so a cell that a positive a-b voltage
        writes to 1 has its p plate on the b side.
        """
        return (self.b, self.a) if self.polarity > 0 else (self.a, self.b)


@dataclass(frozen=True)
class Resistor:
    name: str
    a: str
    b: str
    resistance: float  # ohm
    role: str = "line"  # "line" or "switch"


@dataclass(frozen=True)
class Capacitor:
    name: str
    node: str
    capacitance: float  # fF to ground


@dataclass
class Netlist:
    cells: list = field(default_factory=list)
    resistors: list = field(default_factory=list)
    capacitors: list = field(default_factory=list)
    sources: dict = field(default_factory=dict)  # node -> tuple of PulseSpec
    vsa: VsaParams | None = None
    lines: dict = field(default_factory=dict)  # name -> TransmissionLineParams
    probe: str | None = None  # resistor whose current is the end-of-bit-line current
    coupling: CouplingConfig | None = None

    def fixed_nodes(self) -> list:
        return [GND] + list(self.sources)

    def free_nodes(self) -> list:
        fixed = set(self.fixed_nodes())
        seen = []
        for el in self._terminals():
            for n in el:
                if n not in fixed and n not in seen:
                    seen.append(n)
        return seen

    def _terminals(self):
        for c in self.cells:
            yield (c.a, c.b)
        for r in self.resistors:
            yield (r.a, r.b)
        for c in self.capacitors:
            yield (c.node, GND)

    def validate(self) -> None:
        for c in self.cells:
            if c.a == c.b:
                raise ValueError(f"cell {c.name} has both terminals on node {c.a}")
        parent = {}

        def find(x):
            parent.setdefault(x, x)
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        # sources are tied to ground through their ideal generators
        for s in self.sources:
            parent[find(s)] = find(GND)
        for a, b in self._terminals():
            parent[find(a)] = find(b)
        roots = {find(n) for n in self.free_nodes() + self.fixed_nodes()}
        if len(roots) > 1:
            raise ValueError("netlist connection graph is not connected")
        names = [r.name for r in self.resistors]
        if self.probe is not None and self.probe not in names:
            raise ValueError(f"probe {self.probe!r} is not a resistor")

    def with_sources(self, **sources) -> "Netlist":
        new = replace(self, sources=dict(self.sources))
        for node, pulses in sources.items():
            new.sources[node] = _as_train(pulses)
        return new

    def with_vsa(self, vsa: VsaParams | None) -> "Netlist":
        return replace(self, vsa=vsa)

    @property
    def state_dimension(self) -> int:
        return len(self.free_nodes()) + len(self.cells)


def _as_train(pulses) -> tuple:
    if isinstance(pulses, PulseSpec):
        return (pulses,)
    return tuple(pulses)


def _add_line(net: Netlist, name: str, fixed_node: str, line: TransmissionLineParams | None) -> str:
    """RC pi-ladder from ``fixed_node``; returns the far-end node."""
    if line is None or not line.present:
        return fixed_node
    n = int(line.n_segments)
    r_seg = line.r_per_mm * line.length / n * 1e3  # ohm
    c_seg = line.c_per_mm * line.length / n * 1e3  # fF
    prev = fixed_node
    for i in range(1, n + 1):
        node = f"{name}{i}"
        net.resistors.append(Resistor(f"{name}_r{i}", prev, node, r_seg, "line"))
        net.capacitors.append(Capacitor(f"{name}_c{i}", node, c_seg if i < n else c_seg / 2))
        prev = node
    net.lines[name] = line
    return prev


def build_single_cell(device: MemcapacitorParams, line: TransmissionLineParams | None,
                      drive: PulseSpec | Sequence[PulseSpec], switch_resistance: float = 1e3,
                      vsa: VsaParams | None = None) -> Netlist:
    """drive - bit line - access switch - cell - dual bit line - ground.

    The cell's a terminal faces the bit line, so a positive pulse writes 1.
    """
    if switch_resistance <= 0:
        raise ValueError("switch resistance must be > 0")
    net = Netlist(sources={"drive": _as_train(drive)}, vsa=vsa)
    bl_end = _add_line(net, "bl", "drive", line)
    dbl_end = _add_line(net, "dbl", GND, line)
    net.resistors.append(Resistor("access", bl_end, "cell_a", switch_resistance, "switch"))
    cell_b = dbl_end if dbl_end != GND else GND
    net.cells.append(CellElement("cell", "cell_a", cell_b, device, 1))
    net.probe = "access"
    net.validate()
    return net


def build_coupled(devices: Sequence[MemcapacitorParams], topology: CouplingConfig,
                  drives: tuple, line: TransmissionLineParams | None = None,
                  switch_resistance: float = 1e3) -> Netlist:
    """Series chain V1 - line - switch - cells ... - switch - line - V2.

    Neighbouring cells are joined through a coupling switch.  ``drives`` is
    (V1 pulse, V2 pulse).
    """
    if len(devices) != topology.arity:
        raise ValueError(f"{topology.label} needs {topology.arity} cells, got {len(devices)}")
    v1, v2 = drives
    net = Netlist(sources={"drive1": _as_train(v1), "drive2": _as_train(v2)}, coupling=topology)
    end1 = _add_line(net, "bl", "drive1", line)
    end2 = _add_line(net, "dbl", "drive2", line)
    net.resistors.append(Resistor("access1", end1, "c0a", switch_resistance, "switch"))
    for i, (dev, pol) in enumerate(zip(devices, topology.polarities)):
        net.cells.append(CellElement(f"cell{i}", f"c{i}a", f"c{i}b", dev, pol))
        if i + 1 < len(devices):
            net.resistors.append(Resistor(f"couple{i}", f"c{i}b", f"c{i + 1}a",
                                          switch_resistance, "switch"))
    last = len(devices) - 1
    net.resistors.append(Resistor("access2", f"c{last}b", end2, switch_resistance, "switch"))
    net.probe = "access1"
    net.validate()
    return net


# ----------------------------------------------------------------------------
# Assembled system
# ----------------------------------------------------------------------------

class _System:
    """Matrices of d/dt(M y + Ms s) + K y + Ks s + E I(Cm y + cs s) = 0."""

    def __init__(self, net: Netlist, tunneling: bool = True):
        net.validate()
        self.net = net
        self.nodes = net.free_nodes()
        self.sources = list(net.sources)
        self.tunneling = tunneling
        nn, k, ns = len(self.nodes), len(net.cells), len(self.sources)
        self.nn, self.k, self.ns = nn, k, ns
        n = nn + k
        self.n = n
        idx = {name: i for i, name in enumerate(self.nodes)}
        sidx = {name: i for i, name in enumerate(self.sources)}

        M = np.zeros((n, n))
        Ms = np.zeros((n, ns))
        K = np.zeros((n, n))
        Ks = np.zeros((n, ns))
        Cm = np.zeros((k, n))
        cs = np.zeros((k, ns))

        def stamp(rows_mat, src_mat, row, node, value):
            if node in idx:
                rows_mat[row, idx[node]] += value
            elif node in sidx:
                src_mat[row, sidx[node]] += value

        for c in net.capacitors:
            if c.node in idx:
                M[idx[c.node], idx[c.node]] += c.capacitance
        for r in net.resistors:
            g = UA_PER_A / r.resistance  # uA/V
            for row_node, sign in ((r.a, 1.0), (r.b, -1.0)):
                if row_node not in idx:
                    continue
                row = idx[row_node]
                stamp(K, Ks, row, r.a, sign * g)
                stamp(K, Ks, row, r.b, -sign * g)

        self.c0 = np.zeros(k)
        self.c2 = np.zeros(k)
        self.ratio = np.zeros(k)
        self.barriers = []
        self.areas = []
        for j, cell in enumerate(net.cells):
            dev = cell.device
            c0, c2 = dev.C0 * FF_PER_F, dev.C2 * FF_PER_F
            r = c0 / c2
            self.c0[j], self.c2[j], self.ratio[j] = c0, c2, r
            self.barriers.append(dev.middle_layer)
            self.areas.append(dev.area)
            p, m = cell.plus_minus
            zi = nn + j
            # plate charge q = C0 (V_p - V_m - z) on p, -q on m
            for row_node, sign in ((p, 1.0), (m, -1.0)):
                if row_node not in idx:
                    continue
                row = idx[row_node]
                stamp(M, Ms, row, p, sign * c0)
                stamp(M, Ms, row, m, -sign * c0)
                M[row, zi] += -sign * c0
            # internal charge Q = C2 z
            M[zi, zi] = c2
            # middle voltage (1 - r) z + r (V_p - V_m)
            Cm[j, zi] = 1.0 - r
            stamp(Cm, cs, j, p, r)
            stamp(Cm, cs, j, m, -r)

        self.M, self.Ms, self.K, self.Ks, self.Cm, self.cs = M, Ms, K, Ks, Cm, cs
        self.E = np.zeros((n, k))
        for j in range(k):
            self.E[nn + j, j] = 1.0

        # resistor incidence into the full voltage vector [free, sources, gnd]
        full = {**idx, **{s: nn + i for i, s in enumerate(self.sources)}, GND: nn + ns}
        self.full_index = full
        self.res_a = np.array([full[r.a] for r in net.resistors], dtype=int)
        self.res_b = np.array([full[r.b] for r in net.resistors], dtype=int)
        self.res_g = np.array([UA_PER_A / r.resistance for r in net.resistors])
        self.res_switch = np.array([r.role == "switch" for r in net.resistors])
        names = [r.name for r in net.resistors]
        self.probe = names.index(net.probe) if net.probe is not None else None
        self._factor_cache = {}

    # -- nonlinearity ---------------------------------------------------------
    def current(self, m):
        """Tunnel currents (uA) and conductances (uA/V), shape like m (B, k)."""
        if not self.tunneling or self.k == 0:
            return np.zeros_like(m), np.zeros_like(m)
        cur = np.empty_like(m)
        cond = np.empty_like(m)
        for j in range(self.k):
            cur[:, j], cond[:, j] = simmons_iv(m[:, j], self.barriers[j], self.areas[j])
        return cur * UA_PER_A, cond * UA_PER_A

    # -- step operators -------------------------------------------------------
    def factors(self, dt: float):
        key = round(dt, 15)
        if key not in self._factor_cache:
            A = self.M + 0.5 * dt * self.K
            Ainv = np.linalg.inv(A)
            W1 = Ainv @ (self.M - 0.5 * dt * self.K)
            Wa = Ainv @ (-self.Ms - 0.5 * dt * self.Ks)
            Wb = Ainv @ (self.Ms - 0.5 * dt * self.Ks)
            WE = 0.5 * dt * Ainv @ self.E
            P = self.Cm @ WE
            self._factor_cache[key] = (W1, Wa, Wb, WE, P)
        return self._factor_cache[key]

    @property
    def n_pulses(self) -> int:
        return max((len(tr) for tr in self.net.sources.values()), default=0)

    def default_amplitudes(self, B: int = 1) -> np.ndarray:
        """(B, ns, P) pulse amplitudes taken from the netlist."""
        amps = np.zeros((self.ns, self.n_pulses))
        for i, name in enumerate(self.sources):
            for j, p in enumerate(self.net.sources[name]):
                amps[i, j] = p.amplitude
        return np.broadcast_to(amps, (B,) + amps.shape).copy()

    def source_values(self, t: float, amps: np.ndarray) -> np.ndarray:
        """(B, ns) source voltages at time t for per-row pulse amplitudes (B, ns, P)."""
        out = np.zeros((amps.shape[0], self.ns))
        for i, name in enumerate(self.sources):
            for j, p in enumerate(self.net.sources[name]):
                if p.start <= t <= p.start + p.width + np.max(np.abs(amps[:, i, j])) / p.slew:
                    out[:, i] += pulse_shape(t, amps[:, i, j], p.width, p.slew, p.start)
        return out

    def middle(self, y, s):
        return y @ self.Cm.T + s @ self.cs.T

    def full_voltages(self, y, s):
        B = y.shape[0]
        return np.concatenate([y[:, :self.nn], s, np.zeros((B, 1))], axis=1)

    def powers(self, y, s, cur=None, m=None):
        """Instantaneous cell (tunnel) and periphery (resistor) power, uW = fJ/ns."""
        v = self.full_voltages(y, s)
        dv = v[:, self.res_a] - v[:, self.res_b]
        p_res = dv * dv * self.res_g
        if m is None:
            m = self.middle(y, s)
        if cur is None:
            cur, _ = self.current(m)
        p_cell = m * cur
        return p_cell, p_res

    def probe_current(self, y, s):
        if self.probe is None:
            return np.zeros(y.shape[0])
        v = self.full_voltages(y, s)
        i = self.probe
        return (v[:, self.res_a[i]] - v[:, self.res_b[i]]) * self.res_g[i]

    def residual(self, y0, y1, s0, s1, i0, i1, dt):
        """Trapezoidal KCL/charge residual of one step, in uA."""
        g = (y1 - y0) @ self.M.T + (s1 - s0) @ self.Ms.T
        h = (y0 + y1) @ self.K.T + (s0 + s1) @ self.Ks.T + (i0 + i1) @ self.E.T
        return g / dt + 0.5 * h

    def initial_state(self, ivd0: np.ndarray) -> np.ndarray:
        B = ivd0.shape[0]
        y = np.zeros((B, self.n))
        y[:, self.nn:] = ivd0
        return y


# ----------------------------------------------------------------------------
# Transient solution
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class StepControl:
    """Fixed-step trapezoidal integration settings (times in ns)."""

    dt: float = 1e-3
    max_newton: int = 60
    newton_tol: float = 1e-10  # V, on the middle-layer voltage update
    max_update: float = 0.2  # V, Newton damping limit per iteration
    check_halving: bool = False
    halving_tol: float = 1e-3  # V, on cell IVDs
    check_kcl: bool = False
    save_every: int = 1

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("time step must be > 0")
        if self.dt < 1e-9:
            raise ValueError("time step underflow")


@dataclass
class BatchResult:
    """Final states and energies of a batch of identical-topology circuits."""

    t_end: float
    y: np.ndarray  # (B, n)
    ivd: np.ndarray  # (B, k) V
    energy_cell: np.ndarray  # (B, k) fJ
    energy_periphery: np.ndarray  # (B,) fJ
    energy_switch: np.ndarray  # (B,) fJ, part of periphery
    max_kcl_residual: float = 0.0  # uA
    charge_probe: np.ndarray | None = None  # (B,) fC through the probe
    probe_peak: np.ndarray | None = None  # (B,) fC, see _integrate


@dataclass
class Waveforms:
    """Time series of one simulation.  Times in ns."""

    t: np.ndarray
    node_names: list
    cell_names: list
    v: np.ndarray  # (T, nodes) V
    ivd: np.ndarray  # (T, k) V
    q_fC: np.ndarray  # (T, k) plate charge, fC
    v_mid: np.ndarray  # (T, k) V
    sources: np.ndarray  # (T, ns) V
    source_names: list
    i_probe: np.ndarray  # (T,) uA, end of bit line
    energy_cell: np.ndarray  # (T,) fJ, tunnelling in all cells
    energy_periphery: np.ndarray  # (T,) fJ, lines and switches
    energy_vsa: np.ndarray | None = None  # (T,) fJ
    vsa_in: np.ndarray | None = None  # (T,) V
    vsa_out: np.ndarray | None = None  # (T,) V
    max_kcl_residual: float = 0.0
    halving_error: float | None = None  # V, max IVD difference against dt/2

    @property
    def Q(self) -> np.ndarray:
        """Internal charges in coulombs, (T, k)."""
        c2 = np.array([self._c2[i] for i in range(len(self.cell_names))])
        return self.ivd * c2

    @property
    def q(self) -> np.ndarray:
        return self.q_fC * 1e-15

    @property
    def energy(self) -> np.ndarray:
        """Cell dissipation plus VSA loss (fJ): the per-operation energy."""
        out = self.energy_cell.copy()
        if self.energy_vsa is not None:
            out = out + self.energy_vsa
        return out

    def voltage(self, node: str) -> np.ndarray:
        return self.v[:, self.node_names.index(node)]

    def final_ivd(self) -> np.ndarray:
        return self.ivd[-1].copy()

    _c2: tuple = field(default=(), repr=False)


def _time_grid(t_span, dt):
    t0, t1 = (0.0, float(t_span)) if np.isscalar(t_span) else map(float, t_span)
    if t1 <= t0:
        raise ValueError("t_span must be positive")
    n = int(round((t1 - t0) / dt))
    n = max(n, 1)
    return t0, t1, n, (t1 - t0) / n


def _solve_small(P, cond, rhs):
    """Solve (I + P diag(cond)) x = rhs for each batch row."""
    k = P.shape[0]
    if k == 1:
        return rhs / (1.0 + P[0, 0] * cond)
    J = P[None, :, :] * cond[:, None, :]
    J[:, range(k), range(k)] += 1.0
    if k == 2:
        a, b, c, d = J[:, 0, 0], J[:, 0, 1], J[:, 1, 0], J[:, 1, 1]
        det = a * d - b * c
        return np.stack([(d * rhs[:, 0] - b * rhs[:, 1]) / det,
                         (a * rhs[:, 1] - c * rhs[:, 0]) / det], axis=1)
    if k == 3:
        # Cramer's rule
        det = (
            J[:, 0, 0] * (J[:, 1, 1] * J[:, 2, 2] - J[:, 1, 2] * J[:, 2, 1])
            - J[:, 0, 1] * (J[:, 1, 0] * J[:, 2, 2] - J[:, 1, 2] * J[:, 2, 0])
            + J[:, 0, 2] * (J[:, 1, 0] * J[:, 2, 1] - J[:, 1, 1] * J[:, 2, 0]))
        out = np.empty_like(rhs)
        for col in range(3):
            Jc = J.copy()
            Jc[:, :, col] = rhs
            out[:, col] = (Jc[:, 0, 0] * (Jc[:, 1, 1] * Jc[:, 2, 2] - Jc[:, 1, 2] * Jc[:, 2, 1])
                           - Jc[:, 0, 1] * (Jc[:, 1, 0] * Jc[:, 2, 2] - Jc[:, 1, 2] * Jc[:, 2, 0])
                           + Jc[:, 0, 2] * (Jc[:, 1, 0] * Jc[:, 2, 1] - Jc[:, 1, 1] * Jc[:, 2, 0]))
        return out / det[:, None]
    return np.linalg.solve(J, rhs[..., None])[..., 0]


def _newton(system: _System, m_lin, P, m_guess, t, step: StepControl):
    m = m_guess.copy()
    k = system.k
    active = np.ones(m.shape[0], dtype=bool)
    for _ in range(step.max_newton):
        mm = m[active]
        cur, cond = system.current(mm)
        F = mm + cur @ P.T - m_lin[active]
        delta = _solve_small(P, cond, -F)
        delta = np.clip(delta, -step.max_update, step.max_update)
        m[active] = mm + delta
        done = np.max(np.abs(delta), axis=1) < step.newton_tol
        idx = np.flatnonzero(active)
        active[idx[done]] = False
        if not active.any():
            return m
    cur, _ = system.current(m)
    res = np.max(np.abs(m + cur @ P.T - m_lin))
    raise SolverError("Newton iteration did not converge", t, float(res))


def _integrate(system: _System, t0: float, t1: float, y0: np.ndarray, amps: np.ndarray,
               step: StepControl, record: bool, dt: float | None = None,
               probe_ref: np.ndarray | None = None, track_from: float = 0.0):
    """Core fixed-step trapezoidal loop.  Returns (BatchResult, trace dict or None).

    With ``probe_ref`` (reference cumulative probe charge per step) the loop
    also tracks the peak of (probe charge - reference) from ``track_from`` on.
    """
    if dt is None:
        _, _, nsteps, dt = _time_grid((t0, t1), step.dt)
    else:
        nsteps = int(round((t1 - t0) / dt))
    W1, Wa, Wb, WE, P = system.factors(dt)
    B = y0.shape[0]
    y = y0.copy()
    s = system.source_values(t0, amps)
    m = system.middle(y, s)
    m_prev = m
    cur, _ = system.current(m)
    p_cell, p_res = system.powers(y, s, cur, m)
    e_cell = np.zeros((B, system.k))
    e_per = np.zeros(B)
    e_sw = np.zeros(B)
    i_pr = system.probe_current(y, s)
    q_probe = np.zeros(B)
    max_res = 0.0
    peak = np.full(B, -np.inf)
    if probe_ref is not None and t0 >= track_from - 1e-9:
        peak = np.maximum(peak, q_probe - probe_ref[0])

    trace = None
    if record:
        nsave = nsteps // step.save_every + 1
        trace = {k: [] for k in ("t", "y", "s", "m", "i", "ec", "ep")}

        def save(t):
            trace["t"].append(t)
            trace["y"].append(y[0].copy())
            trace["s"].append(s[0].copy())
            trace["m"].append(m[0].copy())
            trace["i"].append(i_pr[0])
            trace["ec"].append(e_cell[0].sum())
            trace["ep"].append(e_per[0])
        save(t0)

    for n in range(1, nsteps + 1):
        t = t0 + n * dt
        s1 = system.source_values(t, amps)
        y_lin = y @ W1.T + s1 @ Wa.T + s @ Wb.T - cur @ WE.T
        if system.k:
            m_lin = y_lin @ system.Cm.T + s1 @ system.cs.T
            m1 = _newton(system, m_lin, P, 2.0 * m - m_prev, t, step) if system.tunneling else m_lin
            cur1, _ = system.current(m1)
            y1 = y_lin - cur1 @ WE.T
        else:
            m1, cur1, y1 = m, cur, y_lin
        if step.check_kcl:
            r = system.residual(y, y1, s, s1, cur, cur1, dt)
            max_res = max(max_res, float(np.max(np.abs(r))))
        p_cell1, p_res1 = system.powers(y1, s1, cur1, m1)
        e_cell += 0.5 * dt * (p_cell + p_cell1)
        e_per += 0.5 * dt * (p_res.sum(axis=1) + p_res1.sum(axis=1))
        e_sw += 0.5 * dt * (p_res[:, system.res_switch].sum(axis=1) + p_res1[:, system.res_switch].sum(axis=1))
        i_pr1 = system.probe_current(y1, s1)
        q_probe += 0.5 * dt * (i_pr + i_pr1)
        if probe_ref is not None and t >= track_from - 1e-9:
            peak = np.maximum(peak, q_probe - probe_ref[n])
        m_prev = m
        y, s, m, cur, p_cell, p_res, i_pr = y1, s1, m1, cur1, p_cell1, p_res1, i_pr1
        if record and n % step.save_every == 0:
            save(t)

    res = BatchResult(t1, y, y[:, system.nn:].copy(), e_cell, e_per, e_sw, max_res, q_probe)
    if probe_ref is not None:
        res.probe_peak = peak
    return res, trace


def transient_batch(netlist: Netlist, t_span, initial_ivd=None, amplitudes=None,
                    step: StepControl = StepControl(), tunneling: bool = True,
                    initial_state=None) -> BatchResult:
    """Solve many copies of ``netlist`` that differ only in initial IVDs and drive amplitudes.

    Parameters
    ----------
    initial_ivd : array_like, optional
        (B, k) cell IVDs in volts; the network is otherwise at rest.
    amplitudes : array_like, optional
        (B, n_sources) amplitudes of the first pulse of each source, or
        (B, n_sources, n_pulses) for every pulse of each train.  Edge times
        follow each row's own amplitude.
    initial_state : array_like, optional
        (B, n) full state vectors, e.g. ``BatchResult.y`` of an earlier run.
    """
    system = _System(netlist, tunneling)
    amps = _batch_amplitudes(system, amplitudes)
    if initial_state is not None:
        y0 = np.atleast_2d(np.asarray(initial_state, dtype=float))
    else:
        ivd0 = np.zeros((1, system.k)) if initial_ivd is None else np.atleast_2d(
            np.asarray(initial_ivd, dtype=float))
        if ivd0.shape[1] != system.k:
            raise ValueError(f"initial_ivd needs {system.k} columns")
        y0 = system.initial_state(ivd0)
    B = max(y0.shape[0], amps.shape[0])
    for name, arr in (("initial state", y0), ("amplitudes", amps)):
        if arr.shape[0] not in (1, B):
            raise ValueError(f"batch size of {name} ({arr.shape[0]}) does not match {B}")
    y0 = np.broadcast_to(y0, (B,) + y0.shape[1:]).copy()
    amps = np.broadcast_to(amps, (B,) + amps.shape[1:]).copy()
    t0, t1, _, _ = _time_grid(t_span, step.dt)
    res, _ = _integrate(system, t0, t1, y0, amps, step, record=False)
    return res


def _batch_amplitudes(system: _System, amplitudes) -> np.ndarray:
    base = system.default_amplitudes(1)
    if amplitudes is None:
        return base
    a = np.asarray(amplitudes, dtype=float)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim == 2:
        if a.shape[1] != system.ns:
            raise ValueError(f"amplitudes need {system.ns} columns")
        out = np.broadcast_to(base, (a.shape[0],) + base.shape[1:]).copy()
        out[:, :, 0] = a
        return out
    if a.shape[1:] != base.shape[1:]:
        raise ValueError(f"amplitudes must have shape (B, {system.ns}, {system.n_pulses})")
    return a


def transient_solve(netlist: Netlist, t_span, step: StepControl = StepControl(),
                    initial_ivd=None, tunneling: bool = True, t_start_state=None) -> Waveforms:
    """Full waveforms of one circuit.

    ``initial_ivd`` gives each cell's IVD (V) at the start; the network is
    otherwise at rest.  ``t_start_state`` continues from a saved state vector
    (as in ``Waveforms`` traces) instead.
    """
    system = _System(netlist, tunneling)
    t0, t1, nsteps, dt = _time_grid(t_span, step.dt)
    if t_start_state is not None:
        y0 = np.asarray(t_start_state, dtype=float)[None, :]
    else:
        ivd0 = np.zeros((1, system.k)) if initial_ivd is None else np.atleast_2d(
            np.asarray(initial_ivd, dtype=float))
        y0 = system.initial_state(ivd0)
    amps = system.default_amplitudes(1)
    res, tr = _integrate(system, t0, t1, y0, amps, step, record=True, dt=dt)
    wf = _to_waveforms(system, tr, res)
    if step.check_halving:
        fine = replace(step, dt=dt / 2, check_halving=False, save_every=step.save_every * 2)
        res2, _ = _integrate(system, t0, t1, y0, amps, fine, record=False, dt=dt / 2)
        wf.halving_error = float(np.max(np.abs(res2.ivd - res.ivd)))
    return wf


def _to_waveforms(system: _System, tr: dict, res: BatchResult) -> Waveforms:
    y = np.array(tr["y"])
    s = np.array(tr["s"]).reshape(len(tr["t"]), system.ns)
    ivd = y[:, system.nn:]
    # plate charge from node voltages
    q = np.zeros_like(ivd)
    vfull = np.concatenate([y[:, :system.nn], s, np.zeros((len(y), 1))], axis=1)
    for j, cell in enumerate(system.net.cells):
        p, mnode = cell.plus_minus
        vc = vfull[:, system.full_index[p]] - vfull[:, system.full_index[mnode]]
        q[:, j] = system.c0[j] * (vc - ivd[:, j])
    wf = Waveforms(
        t=np.array(tr["t"]), node_names=list(system.nodes),
        cell_names=[c.name for c in system.net.cells], v=y[:, :system.nn], ivd=ivd,
        q_fC=q, v_mid=np.array(tr["m"]).reshape(len(y), system.k), sources=s,
        source_names=list(system.sources), i_probe=np.array(tr["i"]),
        energy_cell=np.array(tr["ec"]), energy_periphery=np.array(tr["ep"]),
        max_kcl_residual=res.max_kcl_residual,
    )
    wf._c2 = tuple(c.device.C2 for c in system.net.cells)
    wf._system = system
    wf._y = y
    return wf


def concatenate(a: Waveforms, b: Waveforms) -> Waveforms:
    """Join two consecutive simulations (b starts where a ends), offsetting b's energies."""
    ec = np.concatenate([a.energy_cell, b.energy_cell[1:] + a.energy_cell[-1]])
    ep = np.concatenate([a.energy_periphery, b.energy_periphery[1:] + a.energy_periphery[-1]])
    cat = lambda x, y: np.concatenate([x, y[1:]])
    wf = Waveforms(
        t=cat(a.t, b.t), node_names=a.node_names, cell_names=a.cell_names,
        v=cat(a.v, b.v), ivd=cat(a.ivd, b.ivd), q_fC=cat(a.q_fC, b.q_fC),
        v_mid=cat(a.v_mid, b.v_mid), sources=cat(a.sources, b.sources),
        source_names=a.source_names, i_probe=cat(a.i_probe, b.i_probe),
        energy_cell=ec, energy_periphery=ep,
        max_kcl_residual=max(a.max_kcl_residual, b.max_kcl_residual),
    )
    wf._c2 = a._c2
    wf._y = cat(a._y, b._y)
    wf._system = a._system
    return wf


# ----------------------------------------------------------------------------
# Energy
# ----------------------------------------------------------------------------

@dataclass
class EnergyReport:
    """Dissipated energy in fJ.

    ``cell`` is tunnelling dissipation inside the memcapacitors, ``vsa`` the
    sense-amplifier activation loss and ``periphery`` the resistive loss in
    lines and switches.  ``value`` (cell + vsa) is the per-operation figure.
    """

    t: np.ndarray
    cell: np.ndarray
    periphery: np.ndarray
    vsa: np.ndarray

    @property
    def trace(self) -> np.ndarray:
        return self.cell + self.vsa

    @property
    def value(self) -> float:
        return float(self.trace[-1])

    @property
    def total(self) -> float:
        return float(self.cell[-1] + self.vsa[-1] + self.periphery[-1])


def dissipated_energy(waveforms: Waveforms, netlist: Netlist) -> EnergyReport:
    """Recompute dissipation from saved waveforms by trapezoidal quadrature of power."""
    system = _System(netlist)
    y = waveforms._y
    s = waveforms.sources
    m = system.middle(y, s)
    cur, _ = system.current(m)
    p_cell, p_res = system.powers(y, s, cur, m)
    t = waveforms.t
    dt = np.diff(t)
    cell = np.concatenate([[0.0], np.cumsum(0.5 * dt * (p_cell[1:].sum(1) + p_cell[:-1].sum(1)))])
    per = np.concatenate([[0.0], np.cumsum(0.5 * dt * (p_res[1:].sum(1) + p_res[:-1].sum(1)))])
    vsa = waveforms.energy_vsa if waveforms.energy_vsa is not None else np.zeros_like(t)
    return EnergyReport(t, cell, per, vsa)


# ----------------------------------------------------------------------------
# Sense amplifier
# ----------------------------------------------------------------------------

@dataclass
class VsaOutcome:
    activated: bool
    waveforms: Waveforms
    decision_time: float  # ns
    post_read_ivd: float  # V, cell IVD when the read pulse is over
    vsa_peak: float  # V, max V_VSA during the delay window


@dataclass
class VsaBatchOutcome:
    activated: np.ndarray  # (B,) bool
    vsa_peak: np.ndarray  # (B,) V
    post_read_ivd: np.ndarray  # (B,) V
    final_ivd: np.ndarray  # (B,) V
    energy_cell: np.ndarray  # (B,) fJ
    energy_vsa: np.ndarray  # (B,) fJ
    energy_periphery: np.ndarray  # (B,) fJ

    @property
    def energy(self) -> np.ndarray:
        return self.energy_cell + self.energy_vsa


@dataclass(frozen=True)
class _ReadTiming:
    read: PulseSpec
    refresh: PulseSpec
    t_dec: float
    t_post: float
    t_end: float


def _read_timing(netlist: Netlist, settle: float) -> _ReadTiming:
    vsa = netlist.vsa
    if vsa is None:
        raise ValueError("netlist has no VSA attached")
    if len(netlist.cells) != 1 or "drive" not in netlist.sources:
        raise ValueError("VSA evaluation needs a single-cell netlist")
    read = netlist.sources["drive"][0]
    t_dec = read.start + vsa.delay
    refresh = vsa.refresh_pulse.shifted(t_dec)
    t_post = max(t_dec, min(read.end, refresh.start))
    t_end = max(refresh.end, read.end) + settle
    return _ReadTiming(read, refresh, t_dec, t_post, t_end)


_REFERENCE_CACHE: dict = {}


def _reference_charge(netlist: Netlist, t_end: float, step: StepControl):
    """Cumulative probe charge (fC) of the same read on a cell holding Q = 0."""
    key = (netlist.cells[0].device, tuple(netlist.sources["drive"]),
           tuple(sorted((k, v) for k, v in netlist.lines.items())), step.dt, t_end,
           tuple(r.resistance for r in netlist.resistors))
    if key not in _REFERENCE_CACHE:
        ref_net = netlist.with_sources(drive=netlist.sources["drive"][:1])
        wf = transient_solve(ref_net, (0.0, t_end), replace(step, save_every=1), initial_ivd=[0.0])
        _REFERENCE_CACHE[key] = (wf.t, _cumulative_charge(wf))
    return _REFERENCE_CACHE[key]


def _cumulative_charge(wf: Waveforms) -> np.ndarray:
    dt = np.diff(wf.t)
    return np.concatenate([[0.0], np.cumsum(0.5 * dt * (wf.i_probe[1:] + wf.i_probe[:-1]))])


def vsa_evaluate(netlist: Netlist, ivd0: float, step: StepControl = StepControl(),
                 settle: float = 2.0) -> VsaOutcome:
    """Read a single cell through its VSA and refresh a detected 0.

    ``netlist`` is a single-cell netlist whose drive is the read pulse.  The
    VSA compares the charge drawn by the cell against a reference cell at
    Q = 0; it is inert until ``delay`` after the read pulse starts.
    """
    vsa = netlist.vsa
    tm = _read_timing(netlist, settle)
    step = replace(step, save_every=1)
    read_only = netlist.with_sources(drive=(tm.read,))

    wf_read = transient_solve(read_only, (0.0, tm.t_dec), step, initial_ivd=[ivd0])
    t_ref, q_ref = _reference_charge(netlist, tm.t_dec, step)
    v_in = (_cumulative_charge(wf_read) - q_ref[:len(wf_read.t)]) / vsa.sense_capacitance
    window = wf_read.t >= tm.read.start - 1e-9
    peak = float(np.max(v_in[window]))
    activated = peak > vsa.threshold

    cont_net = netlist.with_sources(drive=(tm.read, tm.refresh) if activated else (tm.read,))
    wf_rest = transient_solve(cont_net, (tm.t_dec, tm.t_end), step, t_start_state=wf_read._y[-1])
    wf = concatenate(wf_read, wf_rest)
    post_read = float(np.interp(tm.t_post, wf.t, wf.ivd[:, 0]))

    n = len(wf.t)
    vsa_in = np.concatenate([v_in, np.full(n - len(v_in), v_in[-1])])
    out = np.zeros(n)
    loss = np.zeros(n)
    if activated:
        after = wf.t >= tm.t_dec
        out[after] = tm.refresh(wf.t[after])
        loss[after] = vsa.internal_loss
    wf.vsa_in, wf.vsa_out, wf.energy_vsa = vsa_in, out, loss
    return VsaOutcome(activated, wf, tm.t_dec, post_read, peak)


def vsa_evaluate_batch(netlist: Netlist, ivd0, step: StepControl = StepControl(),
                       settle: float = 2.0) -> VsaBatchOutcome:
    """:func:`vsa_evaluate` for many stored IVDs at once, without waveforms."""
    vsa = netlist.vsa
    tm = _read_timing(netlist, settle)
    ivd0 = np.asarray(ivd0, dtype=float).reshape(-1, 1)
    B = ivd0.shape[0]
    _, q_ref = _reference_charge(netlist, tm.t_dec, step)
    full = netlist.with_sources(drive=(tm.read, tm.refresh))
    system = _System(full)
    amps = system.default_amplitudes(B)
    amps[:, 0, 1] = 0.0
    y0 = system.initial_state(ivd0)

    _, _, n1, dt = _time_grid((0.0, tm.t_dec), step.dt)
    r1, _ = _integrate(system, 0.0, tm.t_dec, y0, amps, step, False, dt=dt,
                       probe_ref=q_ref, track_from=tm.read.start)
    peak = r1.probe_peak / vsa.sense_capacitance
    activated = peak > vsa.threshold
    amps[activated, 0, 1] = tm.refresh.amplitude

    e_cell = r1.energy_cell.sum(axis=1)
    e_per = r1.energy_periphery.copy()
    y = r1.y
    post = y[:, system.nn].copy()
    if tm.t_post > tm.t_dec:
        r2, _ = _integrate(system, tm.t_dec, tm.t_post, y, amps, step, False)
        e_cell += r2.energy_cell.sum(axis=1)
        e_per += r2.energy_periphery
        y = r2.y
        post = r2.ivd[:, 0].copy()
    r3, _ = _integrate(system, tm.t_post, tm.t_end, y, amps, step, False)
    e_cell += r3.energy_cell.sum(axis=1)
    e_per += r3.energy_periphery
    e_vsa = np.where(activated, vsa.internal_loss, 0.0)
    return VsaBatchOutcome(activated, peak, post, r3.ivd[:, 0].copy(), e_cell, e_vsa, e_per)


# ----------------------------------------------------------------------------
# Export
# ----------------------------------------------------------------------------

def waveforms_to_csv(wf: Waveforms, path) -> None:
    """Write time series as CSV: t_ns followed by one column per signal."""
    cols = {"t_ns": wf.t}
    for j, name in enumerate(wf.source_names):
        cols[f"v_{name}_V"] = wf.sources[:, j]
    for j, name in enumerate(wf.cell_names):
        cols[f"ivd_{name}_V"] = wf.ivd[:, j]
        cols[f"q_{name}_fC"] = wf.q_fC[:, j]
    cols["i_probe_uA"] = wf.i_probe
    cols["energy_cell_fJ"] = wf.energy_cell
    cols["energy_periphery_fJ"] = wf.energy_periphery
    if wf.energy_vsa is not None:
        cols["energy_vsa_fJ"] = wf.energy_vsa
        cols["vsa_in_V"] = wf.vsa_in
        cols["vsa_out_V"] = wf.vsa_out
    write_csv(path, cols)


def waveforms_summary(wf: Waveforms) -> dict:
    """Peak current, final IVDs and energies as plain JSON-able values."""
    k = int(np.argmax(np.abs(wf.i_probe)))
    return {
        "peak_current_uA": float(wf.i_probe[k]),
        "peak_current_time_ns": float(wf.t[k]),
        "final_ivd_V": [float(x) for x in wf.ivd[-1]],
        "energy_cell_fJ": float(wf.energy_cell[-1]),
        "energy_vsa_fJ": float(wf.energy_vsa[-1]) if wf.energy_vsa is not None else 0.0,
        "energy_periphery_fJ": float(wf.energy_periphery[-1]),
    }


def write_csv(path, columns: dict) -> None:
    """Comma-separated, header row, LF line endings, repr-exact floats."""
    names = list(columns)
    data = [np.asarray(columns[n]) for n in names]
    n = len(data[0]) if data else 0
    if any(len(col) != n for col in data):
        raise ValueError("all CSV columns must have the same length")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(names) + "\n")
        for i in range(n):
            fh.write(",".join(_fmt(col[i]) for col in data) + "\n")


def _fmt(x) -> str:
    if isinstance(x, (str, np.str_)):
        return str(x)
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))
