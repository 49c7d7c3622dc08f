"""
Coupled-cell logic: run two- and three-cell pulse experiments, extract the
boolean function each cell ends up holding, classify operating points into
regions, sweep operation maps and execute multi-level schedules.

Truth tables are integer bitmasks.  For n inputs the row index is the input
word with the first input as the most significant bit, so with two inputs
A = 0b1100 and B = 0b1010; with three, A = 0xF0, B = 0xCC, C = 0xAA.
"""
from __future__ import annotations

import itertools
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .circuit import (CouplingConfig, PulseSpec, StepControl, build_coupled, transient_batch,
                      write_csv)
from .memops import (CellSetup, LogicThresholds, read_refresh_batch, restore_batch, write_batch,
                     written_level)

__all__ = [
    "CouplingConfig", "LogicSetup", "GateLibraryEntry", "CoupledResult", "OperationMap",
    "ScheduleLevel", "OperationSchedule", "ScheduleRun", "ScheduleError", "REGIONS",
    "run_coupled", "extract_gate", "extract_gates", "sweep_operation_map", "execute_schedule",
    "execute_schedules", "classify_region", "level_band", "projection_mask", "apply_truth_table",
    "default_grid", "format_function", "input_rows", "full_mask",
]

REGIONS = ("identity", "logic_operation", "forced_state", "non_readable")
POST_STEPS = ("REFRESH", "W0", "W1", "NONE")


def projection_mask(j: int, n: int) -> int:
    """Truth table of input ``j`` (0 = most significant) among ``n`` inputs."""
    mask = 0
    for row in range(2 ** n):
        if (row >> (n - 1 - j)) & 1:
            mask |= 1 << row
    return mask


def full_mask(n: int) -> int:
    return (1 << (2 ** n)) - 1


def input_rows(n: int) -> np.ndarray:
    """All input words as a (2^n, n) 0/1 array, row index = word value."""
    return np.array(list(itertools.product((0, 1), repeat=n)), dtype=int).reshape(-1, n)


def apply_truth_table(table: int, args: tuple, width: int) -> int:
    """Compose a gate's truth table with argument truth tables.

    ``args`` are masks over a function space of ``width`` rows; the result
    is the mask of table(args...) over the same space.
    """
    n = len(args)
    full = (1 << width) - 1
    out = 0
    for row in range(2 ** n):
        if not (table >> row) & 1:
            continue
        term = full
        for j, x in enumerate(args):
            term &= x if (row >> (n - 1 - j)) & 1 else (~x & full)
        out |= term
    return out


def classify_region(outputs: tuple, readable: bool, arity: int) -> str:
    if not readable:
        return "non_readable"
    if all(f == projection_mask(j, arity) for j, f in enumerate(outputs)):
        return "identity"
    full = full_mask(arity)
    if all(f in (0, full) for f in outputs):
        return "forced_state"
    return "logic_operation"


# ----------------------------------------------------------------------------
# Setup
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class LogicSetup:
    """Protocol constants for coupled operations.

    Drives share ``pulse`` timing (width, slew, start); only amplitudes
    differ.  Inputs are written as +/- ``input_level`` (V), by default the
    IVD of a standard write from Q = 0.  With ``restore`` set, a REFRESH
    post-step is followed by a write of the sensed bit so that outputs
    re-enter the next level at a full-strength level.
    """

    cell: CellSetup = CellSetup()
    pulse: PulseSpec = PulseSpec(1.0, width=1.0, slew=10.0, start=1.0)
    window: float = 4.0
    step: StepControl = StepControl()
    map_step: StepControl = StepControl(dt=2e-3)
    chunk: int = 4096
    input_level: float | None = None
    restore: bool = True

    @property
    def thresholds(self) -> LogicThresholds:
        return self.cell.thresholds

    @property
    def level(self) -> float:
        if self.input_level is not None:
            return self.input_level
        return written_level(self.cell)

    def netlist(self, config: CouplingConfig):
        c = self.cell
        return build_coupled([c.device] * config.arity, config, (self.pulse, self.pulse),
                             c.line, c.switch_resistance)


@lru_cache(maxsize=8)
def level_band(setup: LogicSetup = LogicSetup()) -> tuple:
    """Smallest and largest |IVD| a cell can hold when it enters a coupled level.

    Cells arrive either from a write (W0, W1, initial inputs) or from a
    REFRESH post-step; both are simulated from a spread of prior states
    and the extreme magnitudes of the outcomes are returned.
    """
    prior = np.linspace(-5.0, 5.0, 21)
    finals = []
    for bit in (0, 1):
        v, _ = write_batch(prior, np.full(prior.shape, bit), setup.cell)
        finals.append(v)
    stored = np.concatenate([np.linspace(-5.0, -0.35, 12), np.linspace(0.35, 5.0, 12)])
    post = restore_batch if setup.restore else read_refresh_batch
    bits, v, _ = post(stored, setup.cell)
    finals.append(v[bits >= 0])
    mags = np.abs(np.concatenate(finals))
    return float(mags.min()), float(mags.max())


def _simulate(config: CouplingConfig, amps: np.ndarray, ivd0: np.ndarray, setup: LogicSetup,
              step: StepControl):
    """Final IVDs (R, n) and cell energies (R,) for rows of drive pairs and initial IVDs."""
    net = setup.netlist(config)
    R = amps.shape[0]
    ivd = np.empty((R, config.arity))
    energy = np.empty(R)
    for lo in range(0, R, setup.chunk):
        hi = min(R, lo + setup.chunk)
        res = transient_batch(net, setup.window, initial_ivd=ivd0[lo:hi], amplitudes=amps[lo:hi],
                              step=step)
        ivd[lo:hi] = res.ivd
        energy[lo:hi] = res.energy_cell.sum(axis=1)
    return ivd, energy


# ----------------------------------------------------------------------------
# Single experiments and gate extraction
# ----------------------------------------------------------------------------

@dataclass
class CoupledResult:
    ivd: tuple
    bits: tuple  # 0, 1 or None per cell
    energy: float  # fJ


def _check_inputs(inputs, n):
    inputs = tuple(int(b) if b in (0, 1) else b for b in inputs)
    if len(inputs) != n:
        raise ValueError(f"expected {n} input bits, got {len(inputs)}")
    if any(b not in (0, 1) for b in inputs):
        raise ValueError("inputs must be defined bits (0 or 1)")
    return inputs


def run_coupled(config: CouplingConfig, V1: float, V2: float, inputs,
                setup: LogicSetup = LogicSetup()) -> CoupledResult:
    """Write ``inputs`` into the chain, apply the synchronized pulse pair, read the bits."""
    inputs = _check_inputs(inputs, config.arity)
    w = setup.level
    ivd0 = np.array([[w if b else -w for b in inputs]])
    ivd, energy = _simulate(config, np.array([[V1, V2]], float), ivd0, setup, setup.step)
    bits = tuple(setup.thresholds.bit(v) for v in ivd[0])
    return CoupledResult(tuple(float(v) for v in ivd[0]), bits, float(energy[0]))


@dataclass(frozen=True)
class GateLibraryEntry:
    """Per-cell boolean outputs of one (config, V1, V2) operating point.

    ``margin`` is the smallest |IVD| minus the logic threshold over all
    input words and cells (negative when some output is undefined).
    """

    config: CouplingConfig
    V1: float
    V2: float
    outputs: tuple
    region: str
    margin: float = 0.0
    energy_max: float = 0.0

    @property
    def arity(self) -> int:
        return self.config.arity

    def apply(self, args: tuple, width: int) -> tuple:
        """Symbolic effect on argument truth tables (one per chain position)."""
        return tuple(apply_truth_table(f, args, width) for f in self.outputs)

    def labels(self) -> tuple:
        return tuple(format_function(f, self.arity) for f in self.outputs)

    def to_dict(self) -> dict:
        return {"config": self.config.label, "polarities": list(self.config.polarities),
                "config_index": self.config.index, "V1": self.V1, "V2": self.V2,
                "outputs": list(self.outputs), "labels": list(self.labels()),
                "region": self.region, "margin_V": self.margin, "energy_max_fJ": self.energy_max}

    @classmethod
    def from_dict(cls, d: dict) -> "GateLibraryEntry":
        pol = tuple(d["polarities"])
        kind = "two_cell" if len(pol) == 2 else "three_cell_fixed"
        cfg = CouplingConfig(kind, pol, d.get("config_index"))
        return cls(cfg, float(d["V1"]), float(d["V2"]), tuple(d["outputs"]), d["region"],
                   float(d.get("margin_V", 0.0)), float(d.get("energy_max_fJ", 0.0)))


def format_function(mask: int, n: int) -> str:
    """Short sum-of-products label, e.g. 'A+B', 'AB', "A'B"."""
    names = "ABC"[:n]
    full = full_mask(n)
    if mask == 0:
        return "0"
    if mask == full:
        return "1"
    for j in range(n):
        if mask == projection_mask(j, n):
            return names[j]
        if mask == (~projection_mask(j, n) & full):
            return names[j] + "'"
    terms = []
    for row in range(2 ** n):
        if (mask >> row) & 1:
            terms.append("".join(names[j] + ("" if (row >> (n - 1 - j)) & 1 else "'")
                                 for j in range(n)))
    # common two-input names read better than minterm lists
    if n == 2:
        named = {0b1110: "A+B", 0b1000: "AB", 0b0110: "A^B", 0b1001: "(A^B)'",
                 0b1011: "A+B'", 0b1101: "A'+B", 0b0100: "AB'", 0b0010: "A'B",
                 0b0111: "(AB)'", 0b0001: "(A+B)'"}
        if mask in named:
            return named[mask]
    return "+".join(terms)


def _entries_from_runs(config, amps, ivd, energy, thresholds, n_points):
    n = config.arity
    rows = 2 ** n
    ivd = ivd.reshape(n_points, rows, n)
    energy = energy.reshape(n_points, rows)
    bits = thresholds.bits(ivd)
    weights = (1 << np.arange(rows))[None, :, None]
    masks = np.sum(np.where(bits == 1, weights, 0), axis=1)
    readable = np.all(bits >= 0, axis=(1, 2))
    margin = np.min(np.abs(ivd), axis=(1, 2)) - thresholds.ivd_threshold
    out = []
    for p in range(n_points):
        outs = tuple(int(m) for m in masks[p])
        out.append(GateLibraryEntry(config, float(amps[p, 0]), float(amps[p, 1]), outs,
                                    classify_region(outs, bool(readable[p]), n),
                                    float(margin[p]), float(energy[p].max())))
    return out


def extract_gates(config: CouplingConfig, pairs, setup: LogicSetup = LogicSetup(),
                  step: StepControl | None = None, levels=None) -> list:
    """Gate entries for many (V1, V2) pairs in one batched run.

    ``levels`` optionally gives the input magnitudes per cell (tuple of n
    values); by default every cell uses ``setup.level``.
    """
    pairs = np.asarray(pairs, dtype=float).reshape(-1, 2)
    n = config.arity
    words = input_rows(n)
    lv = np.full(n, setup.level) if levels is None else np.asarray(levels, float)
    init = np.where(words == 1, lv, -lv)
    P = pairs.shape[0]
    amps = np.repeat(pairs, len(words), axis=0)
    ivd0 = np.tile(init, (P, 1))
    ivd, energy = _simulate(config, amps, ivd0, setup, step or setup.step)
    return _entries_from_runs(config, pairs, ivd, energy, setup.thresholds, P)


def extract_gate(config: CouplingConfig, V1: float, V2: float,
                 setup: LogicSetup = LogicSetup()) -> GateLibraryEntry:
    """Run every input word at one operating point and classify it."""
    return extract_gates(config, [(V1, V2)], setup)[0]


# ----------------------------------------------------------------------------
# Operation maps
# ----------------------------------------------------------------------------

def default_grid(n: int = 81, span: float = 2.0) -> np.ndarray:
    return np.round(np.linspace(-span, span, n), 10)


@dataclass
class OperationMap:
    config: CouplingConfig
    v1: np.ndarray
    v2: np.ndarray
    entries: list  # row-major over (v1, v2)

    def entry(self, i: int, j: int) -> GateLibraryEntry:
        return self.entries[i * len(self.v2) + j]

    def nearest(self, V1: float, V2: float) -> GateLibraryEntry:
        i = int(np.argmin(np.abs(self.v1 - V1)))
        j = int(np.argmin(np.abs(self.v2 - V2)))
        return self.entry(i, j)

    @property
    def regions(self) -> np.ndarray:
        return np.array([e.region for e in self.entries]).reshape(len(self.v1), len(self.v2))

    def region_counts(self) -> dict:
        r = self.regions.ravel()
        return {k: int(np.sum(r == k)) for k in REGIONS}

    def logic_functions(self) -> dict:
        """Distinct output tuples of the logic region, with their point counts."""
        out = {}
        for e in self.entries:
            if e.region == "logic_operation":
                out[e.outputs] = out.get(e.outputs, 0) + 1
        return out

    def to_csv(self, path) -> None:
        n = self.config.arity
        cols = {"V1": [e.V1 for e in self.entries], "V2": [e.V2 for e in self.entries],
                "region": [e.region for e in self.entries]}
        for j in range(n):
            cols[f"f{'ABC'[j]}_mask"] = [e.outputs[j] for e in self.entries]
        cols["margin_V"] = [e.margin for e in self.entries]
        cols["energy_max_fJ"] = [e.energy_max for e in self.entries]
        write_csv(path, cols)


def _map_chunk(args):
    config, pairs, setup = args
    return extract_gates(config, pairs, setup, setup.map_step)


def sweep_operation_map(config: CouplingConfig, v1_grid=None, v2_grid=None,
                        setup: LogicSetup = LogicSetup(), jobs: int = 1) -> OperationMap:
    """Classify every (V1, V2) on the grid (default 81 x 81 over [-2, 2] V)."""
    v1 = default_grid() if v1_grid is None else np.asarray(v1_grid, dtype=float)
    v2 = default_grid() if v2_grid is None else np.asarray(v2_grid, dtype=float)
    if v1.size == 0 or v2.size == 0:
        raise ValueError("voltage grids must be non-empty")
    pairs = np.array([(a, b) for a in v1 for b in v2])
    setup = replace(setup, input_level=setup.level)
    per = max(1, setup.chunk // 2 ** config.arity)
    chunks = [(config, pairs[i:i + per], setup) for i in range(0, len(pairs), per)]
    if jobs > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(jobs) as ex:
            parts = list(ex.map(_map_chunk, chunks))
    else:
        parts = [_map_chunk(c) for c in chunks]
    return OperationMap(config, v1, v2, [e for part in parts for e in part])


# ----------------------------------------------------------------------------
# Schedules
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class ScheduleLevel:
    """One synchronized pulse pair on the registry cells ``cells`` (chain order),
    followed by a post-step per participating cell."""

    config: CouplingConfig
    V1: float
    V2: float
    cells: tuple
    post: tuple

    def __post_init__(self):
        if len(self.cells) != self.config.arity or len(self.post) != self.config.arity:
            raise ValueError("level cells/post-steps must match the configuration arity")
        if len(set(self.cells)) != len(self.cells):
            raise ValueError("a cell cannot appear twice in one level")
        if any(p not in POST_STEPS for p in self.post):
            raise ValueError(f"post-steps must be among {POST_STEPS}")

    def to_dict(self) -> dict:
        return {"config": self.config.label, "polarities": list(self.config.polarities),
                "config_index": self.config.index, "V1": self.V1, "V2": self.V2,
                "cells": list(self.cells), "post": list(self.post)}

    @classmethod
    def from_dict(cls, d: dict) -> "ScheduleLevel":
        pol = tuple(d["polarities"])
        kind = "two_cell" if len(pol) == 2 else "three_cell_fixed"
        return cls(CouplingConfig(kind, pol, d.get("config_index")), float(d["V1"]),
                   float(d["V2"]), tuple(d["cells"]), tuple(d["post"]))


@dataclass(frozen=True)
class OperationSchedule:
    """Registry contents plus ordered levels; ``output`` is the result cell.

    ``registry`` entries are input names ('A', 'B', 'C') or constants '0'/'1'.
    """

    registry: tuple
    levels: tuple
    output: int
    arity: int

    def __post_init__(self):
        names = "ABC"[:self.arity]
        for r in self.registry:
            if r not in tuple(names) + ("0", "1"):
                raise ValueError(f"registry entry {r!r} is not an input of arity {self.arity} or a constant")
        if not 0 <= self.output < len(self.registry):
            raise ValueError("output cell outside the registry")
        for lv in self.levels:
            if max(lv.cells) >= len(self.registry):
                raise ValueError("level uses a cell outside the registry")

    @property
    def registry_size(self) -> int:
        return len(self.registry)

    def initial_masks(self) -> tuple:
        width = 2 ** self.arity
        return tuple(_registry_mask(r, self.arity, width) for r in self.registry)

    def predict_with(self, tables: dict) -> list:
        """Symbolic truth tables after each level given {(config label, V1, V2): outputs}."""
        width = 2 ** self.arity
        full = (1 << width) - 1
        state = list(self.initial_masks())
        out = [tuple(state)]
        for lv in self.levels:
            outs = tables[(lv.config.label, lv.V1, lv.V2)]
            args = tuple(state[c] for c in lv.cells)
            res = tuple(apply_truth_table(f, args, width) for f in outs)
            for c, r, p in zip(lv.cells, res, lv.post):
                state[c] = 0 if p == "W0" else full if p == "W1" else r
            out.append(tuple(state))
        return out

    def to_dict(self) -> dict:
        return {"arity": self.arity, "registry": list(self.registry), "output": self.output,
                "levels": [lv.to_dict() for lv in self.levels]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "OperationSchedule":
        return cls(tuple(d["registry"]), tuple(ScheduleLevel.from_dict(x) for x in d["levels"]),
                   int(d["output"]), int(d["arity"]))


def _registry_mask(entry: str, arity: int, width: int) -> int:
    if entry == "1":
        return (1 << width) - 1
    if entry == "0":
        return 0
    return projection_mask("ABC".index(entry), arity)


class ScheduleError(RuntimeError):
    def __init__(self, message: str, level: int):
        super().__init__(f"level {level}: {message}")
        self.level = level


@dataclass
class ScheduleRun:
    """Simulated execution of one schedule on one input word."""

    inputs: tuple
    output: int | None
    bits: tuple
    ivd: tuple
    energy: float  # fJ, coupled pulses plus post-steps
    level_bits: list  # registry bits after every level (index 0 = initial)
    failed_level: int | None = None

    @property
    def ok(self) -> bool:
        return self.failed_level is None


def _initial_bits(schedule: OperationSchedule, inputs: tuple) -> list:
    out = []
    for r in schedule.registry:
        out.append(1 if r == "1" else 0 if r == "0" else inputs["ABC".index(r)])
    return out


def execute_schedules(schedules, setup: LogicSetup = LogicSetup(), inputs=None) -> list:
    """Simulate schedules on input words, all rows advancing level by level in lockstep.

    Returns, per schedule, a list of :class:`ScheduleRun` (one per input word;
    all 2^arity words unless ``inputs`` is given for a single schedule).
    """
    schedules = list(schedules)
    rows = []  # (schedule index, inputs)
    for s_idx, sch in enumerate(schedules):
        words = [tuple(int(b) for b in w) for w in input_rows(sch.arity)] if inputs is None \
            else [tuple(inputs)]
        rows += [(s_idx, w) for w in words]
    w_level = setup.level
    thr = setup.thresholds
    size = max(s.registry_size for s in schedules)
    R = len(rows)
    ivd = np.zeros((R, size))
    energy = np.zeros(R)
    failed = [None] * R
    history = []
    for r, (s_idx, word) in enumerate(rows):
        bits = _initial_bits(schedules[s_idx], word)
        ivd[r, :len(bits)] = np.where(np.array(bits) == 1, w_level, -w_level)
        history.append([tuple(bits)])

    depth = max((len(s.levels) for s in schedules), default=0)
    for L in range(depth):
        active = [r for r in range(R) if failed[r] is None and L < len(schedules[rows[r][0]].levels)]
        groups = {}
        for r in active:
            lv = schedules[rows[r][0]].levels[L]
            groups.setdefault(lv.config, []).append(r)
        for config, members in groups.items():
            lvs = [schedules[rows[r][0]].levels[L] for r in members]
            amps = np.array([(lv.V1, lv.V2) for lv in lvs])
            init = np.array([ivd[r, list(lv.cells)] for r, lv in zip(members, lvs)])
            out, e = _simulate(config, amps, init, setup, setup.step)
            for k, (r, lv) in enumerate(zip(members, lvs)):
                ivd[r, list(lv.cells)] = out[k]
                energy[r] += e[k]
        # post-steps, batched by kind
        jobs = {"REFRESH": [], "W0": [], "W1": []}
        for r in active:
            lv = schedules[rows[r][0]].levels[L]
            for c, p in zip(lv.cells, lv.post):
                if p != "NONE":
                    jobs[p].append((r, c))
        if jobs["REFRESH"]:
            idx = jobs["REFRESH"]
            post = restore_batch if setup.restore else read_refresh_batch
            bits, fin, e = post([ivd[r, c] for r, c in idx], setup.cell)
            for (r, c), b, v, ee in zip(idx, bits, fin, e):
                ivd[r, c] = v
                energy[r] += ee
        for kind, bit in (("W0", 0), ("W1", 1)):
            idx = jobs[kind]
            if idx:
                fin, e = write_batch([ivd[r, c] for r, c in idx], [bit] * len(idx), setup.cell)
                for (r, c), v, ee in zip(idx, fin, e):
                    ivd[r, c] = v
                    energy[r] += ee
        for r in active:
            sch = schedules[rows[r][0]]
            b = thr.bits(ivd[r, :sch.registry_size])
            history[r].append(tuple(int(x) if x >= 0 else None for x in b))
            if np.any(b[list(sch.levels[L].cells)] < 0):
                failed[r] = L

    results = [[] for _ in schedules]
    for r, (s_idx, word) in enumerate(rows):
        sch = schedules[s_idx]
        b = thr.bits(ivd[r, :sch.registry_size])
        bits = tuple(int(x) if x >= 0 else None for x in b)
        results[s_idx].append(ScheduleRun(word, bits[sch.output], bits,
                                          tuple(float(v) for v in ivd[r, :sch.registry_size]),
                                          float(energy[r]), history[r], failed[r]))
    return results


def execute_schedule(schedule: OperationSchedule, inputs, setup: LogicSetup = LogicSetup()) -> ScheduleRun:
    """Simulate one schedule on one input word.

    Raises :class:`ScheduleError` with the level index if a participating
    cell is left undefined.
    """
    inputs = _check_inputs(inputs, schedule.arity)
    run = execute_schedules([schedule], setup, inputs=inputs)[0][0]
    if run.failed_level is not None:
        raise ScheduleError("participating cell left in an undefined state", run.failed_level)
    return run
