"""
Memory protocols on one cell: WRITE, destructive READ with REFRESH,
write-threshold extraction and retention sweeps.

A cell stores 1 when its IVD is at or above the logic threshold and 0 when
it is at or below minus that threshold; in between the bit is undefined.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .circuit import (PulseSpec, StepControl, TransmissionLineParams, VsaParams, Waveforms,
                      build_single_cell, transient_batch, transient_solve, vsa_evaluate,
                      vsa_evaluate_batch, write_csv)
from .device import (BarrierParams, DecayResult, MemcapacitorParams, MemcapacitorState,
                     decay_envelope, storage_decay)


class ProtocolError(RuntimeError):
    """A WRITE or READ left a cell in an undefined logic state."""


class NoCrossingError(ValueError):
    """The amplitude grid never produces a write above the detection level."""


@dataclass(frozen=True)
class LogicThresholds:
    """Logic-level thresholds.

    ``ivd_threshold`` is Q_r/C2 in volts; ``V_t`` the measured write
    threshold, if known.
    """

    ivd_threshold: float = 0.3
    V_t: float | None = None

    def __post_init__(self):
        if not self.ivd_threshold > 0:
            raise ValueError("logic threshold must be > 0")

    def Q_r(self, params: MemcapacitorParams) -> float:
        """Charge threshold in coulombs."""
        return self.ivd_threshold * params.C2

    def bit(self, ivd: float) -> int | None:
        if ivd >= self.ivd_threshold:
            return 1
        if ivd <= -self.ivd_threshold:
            return 0
        return None

    def bits(self, ivd) -> np.ndarray:
        """Vectorised :meth:`bit`: 1, 0, or -1 for undefined."""
        ivd = np.asarray(ivd)
        return np.where(ivd >= self.ivd_threshold, 1, np.where(ivd <= -self.ivd_threshold, 0, -1))


@dataclass(frozen=True)
class CellBit:
    value: int | None
    ivd: float

    @property
    def defined(self) -> bool:
        return self.value is not None

    @classmethod
    def from_ivd(cls, ivd: float, thresholds: LogicThresholds = LogicThresholds()) -> "CellBit":
        return cls(thresholds.bit(ivd), float(ivd))


@dataclass(frozen=True)
class CellSetup:
    """Everything needed to run protocols on one cell.

    ``window`` is the simulated time (ns) of a write.
    """

    device: MemcapacitorParams = MemcapacitorParams()
    line: TransmissionLineParams | None = TransmissionLineParams()
    switch_resistance: float = 1e3
    write_pulse: PulseSpec = PulseSpec(1.0, width=1.0, slew=10.0, start=1.0)
    read_pulse: PulseSpec = PulseSpec(1.0, width=0.5, slew=10.0, start=1.0)
    vsa: VsaParams = VsaParams()
    thresholds: LogicThresholds = LogicThresholds()
    step: StepControl = StepControl()
    window: float = 4.0

    def __post_init__(self):
        if self.vsa.delay < self.read_pulse.width:
            raise ValueError("VSA delay must cover the read pulse width")
        if self.window <= self.write_pulse.end:
            raise ValueError("write window must extend past the write pulse")

    def write_netlist(self, pulse: PulseSpec | None = None):
        return build_single_cell(self.device, self.line, pulse or self.write_pulse,
                                 self.switch_resistance)

    def read_netlist(self):
        return build_single_cell(self.device, self.line, self.read_pulse,
                                 self.switch_resistance, vsa=self.vsa)


def _as_ivd(cell, params: MemcapacitorParams) -> float:
    if isinstance(cell, MemcapacitorState):
        return cell.ivd(params)
    return float(cell)


# ----------------------------------------------------------------------------
# WRITE
# ----------------------------------------------------------------------------

@dataclass
class WriteResult:
    ivd: float
    bit: CellBit
    target: int
    energy: float  # fJ, cell dissipation
    waveforms: Waveforms | None = None

    @property
    def written(self) -> bool:
        return self.bit.value == self.target

    def state(self, params: MemcapacitorParams) -> MemcapacitorState:
        return MemcapacitorState.from_ivd(self.ivd, params)


def write_bit(cell, bit: int, setup: CellSetup = CellSetup(), pulse: PulseSpec | None = None,
              keep_waveforms: bool = False) -> WriteResult:
    """Apply a write pulse to a cell holding ``cell`` (IVD in V or a state).

    The pulse defaults to the setup's write pulse with its sign set by
    ``bit``.  A pulse whose sign contradicts ``bit`` is rejected.  Raises
    :class:`ProtocolError` if the cell ends undefined.
    """
    if bit not in (0, 1):
        raise ValueError(f"bit must be 0 or 1, got {bit!r}")
    ivd0 = _as_ivd(cell, setup.device)
    if pulse is None:
        mag = abs(setup.write_pulse.amplitude)
        pulse = setup.write_pulse.scaled(mag if bit else -mag)
    if pulse.amplitude != 0 and (pulse.amplitude > 0) != (bit == 1):
        raise ValueError("pulse polarity does not match the target bit")
    net = setup.write_netlist(pulse)
    window = max(setup.window, pulse.end + 1.0)
    if keep_waveforms:
        wf = transient_solve(net, window, setup.step, initial_ivd=[ivd0])
        ivd, energy = float(wf.ivd[-1, 0]), float(wf.energy_cell[-1])
    else:
        res = transient_batch(net, window, initial_ivd=[[ivd0]], step=setup.step)
        ivd, energy, wf = float(res.ivd[0, 0]), float(res.energy_cell[0, 0]), None
    cb = CellBit.from_ivd(ivd, setup.thresholds)
    if not cb.defined:
        raise ProtocolError(f"write left the cell undefined (IVD {ivd:.3g} V)")
    return WriteResult(ivd, cb, bit, energy, wf)


def write_batch(ivd0, bits, setup: CellSetup = CellSetup()):
    """Standard writes of ``bits`` on cells holding ``ivd0``; returns (ivd, energy) arrays.

    No protocol checks: the caller inspects the returned levels.
    """
    ivd0 = np.asarray(ivd0, dtype=float).ravel()
    bits = np.asarray(bits).ravel()
    mag = abs(setup.write_pulse.amplitude)
    amps = np.where(bits == 1, mag, -mag)[:, None]
    net = setup.write_netlist()
    res = transient_batch(net, setup.window, initial_ivd=ivd0[:, None], amplitudes=amps,
                          step=setup.step)
    return res.ivd[:, 0].copy(), res.energy_cell[:, 0].copy()


@lru_cache(maxsize=32)
def written_level(setup: CellSetup = CellSetup()) -> float:
    """IVD right after a standard write of 1 into a cell holding Q = 0."""
    return write_bit(0.0, 1, setup).ivd


# ----------------------------------------------------------------------------
# READ + REFRESH
# ----------------------------------------------------------------------------

@dataclass
class ReadResult:
    """Outcome of one destructive read.

    ``bit`` is the value recovered (None when the stored value was
    undefined, in which case nothing was simulated).  ``post_read_ivd`` is
    the IVD after the read pulse and before any refresh.
    """

    bit: int | None
    ivd: float
    energy: float  # fJ, cell + VSA
    activated: bool = False
    post_read_ivd: float = math.nan
    energy_periphery: float = 0.0
    waveforms: Waveforms | None = None

    @property
    def ok(self) -> bool:
        return self.bit is not None


def read_refresh(cell, setup: CellSetup = CellSetup(), keep_waveforms: bool = True) -> ReadResult:
    """Destructive READ through the VSA, followed by REFRESH of a detected 0."""
    ivd0 = _as_ivd(cell, setup.device)
    if setup.thresholds.bit(ivd0) is None:
        return ReadResult(None, ivd0, 0.0)
    net = setup.read_netlist()
    if keep_waveforms:
        out = vsa_evaluate(net, ivd0, setup.step)
        wf = out.waveforms
        return ReadResult(0 if out.activated else 1, float(wf.ivd[-1, 0]), float(wf.energy[-1]),
                          out.activated, out.post_read_ivd, float(wf.energy_periphery[-1]), wf)
    b = vsa_evaluate_batch(net, [ivd0], setup.step)
    return ReadResult(0 if b.activated[0] else 1, float(b.final_ivd[0]), float(b.energy[0]),
                      bool(b.activated[0]), float(b.post_read_ivd[0]), float(b.energy_periphery[0]))


def read_refresh_batch(ivd0, setup: CellSetup = CellSetup()):
    """Batched READ + REFRESH.

    Returns (bits, final ivd, energy) arrays; bits are -1 where the stored
    value was undefined, and such cells are left untouched.
    """
    ivd0 = np.asarray(ivd0, dtype=float).ravel()
    bits = np.full(ivd0.shape, -1)
    final = ivd0.copy()
    energy = np.zeros(ivd0.shape)
    ok = setup.thresholds.bits(ivd0) >= 0
    if ok.any():
        b = vsa_evaluate_batch(setup.read_netlist(), ivd0[ok], setup.step)
        bits[ok] = np.where(b.activated, 0, 1)
        final[ok] = b.final_ivd
        energy[ok] = b.energy
    return bits, final, energy


def restore_batch(ivd0, setup: CellSetup = CellSetup()):
    """READ + REFRESH followed by a standard write of the bit that was read.

    A plain refresh leaves a 1 anywhere between roughly 2.4 and 4.2 V
    depending on how strong it was; the extra write pulls both values back
    into a narrow band, which coupled operations downstream rely on.
    Returns (bits, final ivd, energy) like :func:`read_refresh_batch`.
    """
    bits, final, energy = read_refresh_batch(ivd0, setup)
    ok = bits >= 0
    if ok.any():
        v, e = write_batch(final[ok], bits[ok], setup)
        final[ok] = v
        energy[ok] += e
    return bits, final, energy


# ----------------------------------------------------------------------------
# Write threshold
# ----------------------------------------------------------------------------

@dataclass
class ThresholdResult:
    V_t: float
    amplitudes: np.ndarray  # V
    ivd_end: np.ndarray  # V, at the end of the transient window
    ivd_settled: np.ndarray  # V, ``settle`` seconds after the pulse
    saturation: float  # V, largest settled |IVD| on the grid
    settle: float  # s

    def to_csv(self, path) -> None:
        write_csv(path, {"amplitude_V": self.amplitudes, "ivd_end_V": self.ivd_end,
                         "ivd_settled_V": self.ivd_settled})


def extract_write_threshold(setup: CellSetup = CellSetup(), amplitudes=None,
                            settle: float = 1.0, fraction: float = 0.1) -> ThresholdResult:
    """Write threshold V_t from an amplitude sweep starting at Q = 0.

    Each amplitude is applied with the write-pulse template; the IVD is then
    left to decay at V_C = 0 for ``settle`` seconds.  V_t is where the
    settled |IVD| first reaches ``fraction`` of its largest value on the
    grid (linear interpolation).
    """
    if amplitudes is None:
        amplitudes = np.linspace(0.0, 1.5, 31)
    amps = np.asarray(amplitudes, dtype=float)
    if amps.ndim != 1 or amps.size < 2 or np.any(np.diff(amps) <= 0):
        raise ValueError("amplitude grid must be increasing with at least two points")
    net = setup.write_netlist()
    res = transient_batch(net, setup.window, amplitudes=amps[:, None], step=setup.step)
    ivd_end = res.ivd[:, 0].copy()
    dt_left = settle - (setup.window - setup.write_pulse.end) * 1e-9
    settled = np.array([storage_decay(v, setup.device, dt_left).ivd[-1] if v != 0 else 0.0
                        for v in ivd_end])
    mag = np.abs(settled)
    sat = float(mag.max())
    if sat < setup.thresholds.ivd_threshold:
        raise NoCrossingError(f"no amplitude in [{amps[0]}, {amps[-1]}] V writes a bit "
                              f"(largest settled IVD {sat:.3g} V)")
    level = fraction * sat
    i = int(np.argmax(mag >= level))
    if i == 0:
        raise NoCrossingError("grid starts above the threshold; extend it towards 0 V")
    a0, a1, m0, m1 = amps[i - 1], amps[i], mag[i - 1], mag[i]
    v_t = float(a0 + (level - m0) * (a1 - a0) / (m1 - m0))
    return ThresholdResult(v_t, amps, ivd_end, settled, sat, settle)


# ----------------------------------------------------------------------------
# Retention
# ----------------------------------------------------------------------------

RETENTION_K_GRID = (3.9, 7.5, 25.0)
RETENTION_D_GRID = (6.0, 8.0, 10.0)


@dataclass
class RetentionTable:
    """IVD(t) at V_C = 0 for every (k, d) middle layer.

    ``ivd[i, j, :]`` belongs to ``k_grid[i]``, ``d_grid[j]``.
    """

    k_grid: tuple
    d_grid: tuple
    t: np.ndarray  # s
    ivd: np.ndarray
    ivd0: float | None  # None for envelopes

    def series(self, k: float, d: float) -> np.ndarray:
        return self.ivd[self.k_grid.index(k), self.d_grid.index(d)]

    def best_at(self, t: float) -> tuple:
        """(k, d) with the largest |IVD| at time ``t``."""
        j = int(np.argmin(np.abs(np.log(self.t / t))))
        flat = np.abs(self.ivd[:, :, j])
        i, jj = np.unravel_index(int(np.argmax(flat)), flat.shape)
        return self.k_grid[i], self.d_grid[jj]

    def to_csv(self, path) -> None:
        cols = {"t_s": self.t}
        for i, k in enumerate(self.k_grid):
            for j, d in enumerate(self.d_grid):
                cols[f"ivd_k{k:g}_d{d:g}nm_V"] = self.ivd[i, j]
        write_csv(path, cols)


def retention_sweep(k_grid=RETENTION_K_GRID, d_grid=RETENTION_D_GRID, ivd0: float | None = None,
                    base: MemcapacitorParams = MemcapacitorParams(), t_end: float = 1e6,
                    per_decade: int = 1) -> RetentionTable:
    """Storage decay for every middle layer (k, d) in the grid.

    ``ivd0=None`` gives the envelopes (saturated start); otherwise every
    cell starts from the same IVD.  Samples are taken at decade times from
    1e-8 s to ``t_end``.
    """
    k_grid, d_grid = tuple(float(k) for k in k_grid), tuple(float(d) for d in d_grid)
    if not k_grid or not d_grid:
        raise ValueError("retention grids must be non-empty")
    decades = int(round(math.log10(t_end) + 8))
    t = t_end * np.logspace(-decades, 0, decades * per_decade + 1)
    out = np.zeros((len(k_grid), len(d_grid), t.size))
    for i, k in enumerate(k_grid):
        for j, d in enumerate(d_grid):
            params = base.with_middle(rel_permittivity=k, thickness=d)
            if ivd0 is None:
                res = decay_envelope(params, t_end)
            else:
                res = storage_decay(ivd0, params, t_end)
            out[i, j] = np.interp(np.log(t), np.log(res.t), res.ivd) if ivd0 != 0 else 0.0
    return RetentionTable(k_grid, d_grid, t, out, ivd0)


def retention_time(ivd0: float, params: MemcapacitorParams, level: float,
                   t_end: float = 1e8) -> float:
    """Time (s) for a stored IVD to decay to ``level``; inf if it never does by ``t_end``."""
    res = storage_decay(ivd0, params, t_end)
    mag = np.abs(res.ivd)
    below = np.flatnonzero(mag <= level)
    if below.size == 0:
        return math.inf
    i = int(below[0])
    if i == 0:
        return float(res.t[0])
    # log-log interpolation between the bracketing samples
    lt = np.log(res.t[i - 1:i + 1])
    lv = np.log(mag[i - 1:i + 1])
    return float(np.exp(np.interp(math.log(level), lv[::-1], lt[::-1])))


# ----------------------------------------------------------------------------
# Report
# ----------------------------------------------------------------------------

def cell_report(setup: CellSetup = CellSetup(), partial_ivd: float = 0.5) -> dict:
    """Compact characterisation of one cell design as a JSON-able dict."""
    thr = extract_write_threshold(setup)
    w = write_bit(0.0, 1, setup)
    r1 = read_refresh(partial_ivd, setup, keep_waveforms=False)
    r0 = read_refresh(-partial_ivd, setup, keep_waveforms=False)
    dev = setup.device
    return {
        "capacitances_fF": dev.capacitances_fF(),
        "coupling_ratio": dev.coupling_ratio,
        "write_threshold_V": thr.V_t,
        "saturation_ivd_1s_V": thr.saturation,
        "written_ivd_V": w.ivd,
        "write_energy_fJ": w.energy,
        "retention_half_life_s": retention_time(w.ivd, dev, w.ivd / 2),
        "retention_time_s": retention_time(w.ivd, dev, setup.thresholds.ivd_threshold),
        "read_energy_stored1_fJ": r1.energy,
        "read_energy_stored0_fJ": r0.energy,
        "logic_threshold_V": setup.thresholds.ivd_threshold,
    }
