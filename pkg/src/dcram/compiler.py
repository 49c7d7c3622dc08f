"""
Compile boolean functions into DCRAM operation schedules.

Search is symbolic: a registry state is the tuple of truth tables its cells
hold, and a move applies one library gate to some cells and then a
post-step (REFRESH, WRITE 0 or WRITE 1) to each of them.  Breadth-first
search gives schedules of minimal level count; every returned schedule is
then simulated on all input words.
"""
from __future__ import annotations

import itertools
import json
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np

from .circuit import CouplingConfig, write_csv
from .logic import (GateLibraryEntry, LogicSetup, OperationMap, OperationSchedule, ScheduleLevel,
                    _simulate, classify_region, default_grid, execute_schedules, format_function,
                    full_mask, level_band, input_rows, projection_mask, sweep_operation_map)

POSTS = ("REFRESH", "W0", "W1")


# ----------------------------------------------------------------------------
# Functions and registries
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class BooleanFunction:
    """Truth table over ``arity`` inputs; for three inputs ``mask`` is the 0-255 code."""

    arity: int
    mask: int

    def __post_init__(self):
        if self.arity not in (1, 2, 3):
            raise ValueError("arity must be 1, 2 or 3")
        if not 0 <= self.mask <= full_mask(self.arity):
            raise ValueError(f"mask must fit in {2 ** self.arity} bits")

    @property
    def code(self) -> int:
        return self.mask

    @property
    def width(self) -> int:
        return 2 ** self.arity

    def __call__(self, *bits) -> int:
        if len(bits) != self.arity or any(b not in (0, 1) for b in bits):
            raise ValueError(f"expected {self.arity} bits in {{0, 1}}, got {bits}")
        row = 0
        for b in bits:
            row = (row << 1) | int(b)
        return (self.mask >> row) & 1

    @classmethod
    def from_callable(cls, fn, arity: int) -> "BooleanFunction":
        mask = 0
        for row, word in enumerate(input_rows(arity)):
            if fn(*(int(b) for b in word)):
                mask |= 1 << row
        return cls(arity, mask)

    @classmethod
    def projection(cls, j: int, arity: int) -> "BooleanFunction":
        return cls(arity, projection_mask(j, arity))

    @classmethod
    def constant(cls, value: int, arity: int) -> "BooleanFunction":
        return cls(arity, full_mask(arity) if value else 0)

    @property
    def label(self) -> str:
        return format_function(self.mask, self.arity)


@dataclass(frozen=True)
class RegistrySpec:
    """Initial registry contents: input names 'A'..'C' or constants '0'/'1'."""

    contents: tuple
    arity: int

    def __post_init__(self):
        names = tuple("ABC"[:self.arity])
        if len(self.contents) < self.arity:
            raise ValueError("registry must hold at least one cell per input")
        for c in self.contents:
            if c not in names + ("0", "1"):
                raise ValueError(f"registry entry {c!r} invalid for arity {self.arity}")

    @property
    def size(self) -> int:
        return len(self.contents)

    def masks(self) -> tuple:
        return tuple(full_mask(self.arity) if c == "1" else 0 if c == "0"
                     else projection_mask("ABC".index(c), self.arity) for c in self.contents)

    @classmethod
    def two_bit(cls) -> "RegistrySpec":
        """A, B and a constant-1 cell used for negation."""
        return cls(("A", "B", "1"), 2)

    @classmethod
    def fixed_two_bit(cls) -> "RegistrySpec":
        """Fixed three-cell chain holding (1, A, B)."""
        return cls(("1", "A", "B"), 2)

    @classmethod
    def three_bit(cls, duplicate: str = "A") -> "RegistrySpec":
        """Five cells: constant 1, A, B, C and a copy of one input."""
        if duplicate not in "ABC":
            raise ValueError("duplicate must be one of A, B, C")
        return cls(("1", "A", "B", "C", duplicate), 3)


# ----------------------------------------------------------------------------
# Gate library
# ----------------------------------------------------------------------------

def _swap_table(table: int) -> int:
    """Truth table of f(b, a) given that of f(a, b)."""
    out = 0
    for row in range(4):
        if (table >> row) & 1:
            a, b = row >> 1, row & 1
            out |= 1 << ((b << 1) | a)
    return out


@dataclass
class GateLibrary:
    """Operating points available to the compiler.

    ``fixed`` libraries act on the registry cells in place (no choice of
    cells); otherwise any ordered tuple of distinct cells can be coupled.
    """

    entries: list
    fixed: bool = False
    notes: list = field(default_factory=list)

    def tables(self) -> dict:
        return {(e.config.label, e.V1, e.V2): e.outputs for e in self.entries}

    def moves_entries(self) -> list:
        """Entries in tie-break order with symbolically redundant ones removed."""
        def key(e):
            return (e.config.index or 0, e.config.polarities, e.V1, e.V2)
        out, seen = [], set()
        for e in sorted(self.entries, key=key):
            sig = e.outputs
            if not self.fixed and e.arity == 2:
                sw = (_swap_table(e.outputs[1]), _swap_table(e.outputs[0]))
                sig = min(sig, sw)
            sig = (e.arity, sig)
            if sig in seen:
                continue
            seen.add(sig)
            out.append(e)
        return out

    def to_dict(self) -> dict:
        return {"fixed": self.fixed, "entries": [e.to_dict() for e in self.entries],
                "notes": list(self.notes)}

    @classmethod
    def from_dict(cls, d: dict) -> "GateLibrary":
        return cls([GateLibraryEntry.from_dict(x) for x in d["entries"]], bool(d["fixed"]),
                   list(d.get("notes", [])))


def builtin_library(kind: str = "dynamic") -> GateLibrary:
    """Library shipped with the package, extracted with default settings on a 41 x 41 grid.

    ``kind`` is "dynamic" (two-cell configurations) or "fixed" (three-cell
    chain).  Re-extract with :func:`extract_dynamic_library` or
    :func:`extract_fixed_library` after changing device or protocol settings.
    """
    if kind not in ("dynamic", "fixed"):
        raise ValueError("kind must be 'dynamic' or 'fixed'")
    text = resources.files("dcram").joinpath("data", f"library_{kind}.json").read_text("utf-8")
    return GateLibrary.from_dict(json.loads(text))


def robust_margins(candidates, setup: LogicSetup, band: tuple | None = None,
                   mixed: bool = True) -> np.ndarray:
    """Worst-case margin of each candidate over the input levels cells can really hold.

    With ``mixed`` every cell's input magnitude is taken independently from
    four points spanning ``band`` (default :func:`level_band`) plus the
    nominal written level; otherwise each cell is at the lowest or the
    highest level only (a cheaper screen over the corners).  A candidate
    whose outputs change anywhere gets -inf.
    """
    if not candidates:
        return np.zeros(0)
    config = candidates[0].config
    n = config.arity
    lo, hi = level_band(setup) if band is None else band
    if mixed:
        points = sorted(set(np.round(np.r_[np.linspace(lo, hi, 3), setup.level], 6)))
        mags = np.array(list(itertools.product(points, repeat=n)))
    else:
        mags = np.array(list(itertools.product((lo, hi), repeat=n)))
    words = input_rows(n)
    P, M, R = len(candidates), len(mags), len(words)
    init = np.where(words[None, :, :] == 1, mags[:, None, :], -mags[:, None, :])  # (M, R, n)
    ivd0 = np.tile(init.reshape(-1, n), (P, 1))
    amps = np.repeat(np.array([(c.V1, c.V2) for c in candidates]), M * R, axis=0)
    ivd, _ = _simulate(config, amps, ivd0, setup, setup.step)
    ivd = ivd.reshape(P, M, R, n)
    bits = setup.thresholds.bits(ivd)
    weights = (1 << np.arange(R))[None, None, :, None]
    masks = np.sum(np.where(bits == 1, weights, 0), axis=2)  # (P, M, n)
    out = np.empty(P)
    for p, c in enumerate(candidates):
        stable = np.all(bits[p] >= 0) and np.all(masks[p] == np.array(c.outputs)[None, :])
        out[p] = (np.min(np.abs(ivd[p])) - setup.thresholds.ivd_threshold) if stable else -np.inf
    return out


def library_from_maps(maps, setup: LogicSetup = LogicSetup(), fixed: bool = False,
                      candidates: int = 6, include_hold: bool = True) -> GateLibrary:
    """One robust operating point per distinct logic function found in the maps.

    Every point of each (configuration, output tuple) is screened with each
    input at the lowest or the highest level a cell can hold; the
    ``candidates`` best are then checked with independently mixed levels
    and the most robust one is kept.  A zero-drive "hold" entry per
    topology is added so that write-only levels exist.
    """
    entries, notes = [], []
    for m in maps:
        groups = {}
        for e in m.entries:
            if e.region == "logic_operation":
                groups.setdefault(e.outputs, []).append(e)
        for outs in sorted(groups):
            pool = sorted(groups[outs], key=lambda e: (-e.margin, e.V1, e.V2))
            screen = robust_margins(pool, setup, mixed=False)
            order = np.argsort(-screen, kind="stable")[:candidates]
            pool = [pool[i] for i in order if np.isfinite(screen[i])]
            scores = robust_margins(pool, setup)
            if not pool or not np.isfinite(scores.max()):
                notes.append(f"{m.config.label} {format_labels(outs, m.config.arity)}: "
                             "no operating point survives perturbed inputs; dropped")
                continue
            best = int(np.argmax(scores))
            entries.append(replace(pool[best], margin=float(scores[best])))
        if include_hold:
            arity = m.config.arity
            entries.append(GateLibraryEntry(m.config, 0.0, 0.0,
                                            tuple(projection_mask(j, arity) for j in range(arity)),
                                            "identity", 0.0, 0.0))
    if include_hold and not fixed:
        # one hold entry is enough for reconfigurable libraries
        holds = [e for e in entries if e.region == "identity"]
        entries = [e for e in entries if e.region != "identity"] + holds[:1]
    return GateLibrary(entries, fixed, notes)


def format_labels(outs, arity):
    return "(" + ", ".join(format_function(f, arity) for f in outs) + ")"


def extract_dynamic_library(setup: LogicSetup = LogicSetup(), grid=None, jobs: int = 1) -> tuple:
    """Maps of the four two-cell configurations and the library distilled from them."""
    grid = default_grid(41) if grid is None else grid
    maps = [sweep_operation_map(CouplingConfig.two_cell(i), grid, grid, setup, jobs)
            for i in (1, 2, 3, 4)]
    return library_from_maps(maps, setup), maps


def extract_fixed_library(setup: LogicSetup = LogicSetup(), grid=None, jobs: int = 1) -> tuple:
    """Map of the fixed three-cell chain and its library."""
    grid = default_grid(41) if grid is None else grid
    m = sweep_operation_map(CouplingConfig.three_cell_fixed(), grid, grid, setup, jobs)
    return library_from_maps([m], setup, fixed=True), m


# ----------------------------------------------------------------------------
# Search
# ----------------------------------------------------------------------------

class CompilationError(RuntimeError):
    def __init__(self, message: str, explored: int):
        super().__init__(f"{message} ({explored} registry states explored)")
        self.explored = explored


class _Gate:
    """A library entry prepared for fast symbolic application."""

    def __init__(self, entry: GateLibraryEntry):
        self.entry = entry
        self.n = entry.arity
        rows = 2 ** self.n
        self.select = [[r for r in range(rows) if (f >> r) & 1] for f in entry.outputs]

    def apply(self, args, full):
        n = self.n
        terms = []
        for row in range(2 ** n):
            t = full
            for j, x in enumerate(args):
                t &= x if (row >> (n - 1 - j)) & 1 else (full ^ x)
            terms.append(t)
        outs = []
        for sel in self.select:
            v = 0
            for r in sel:
                v |= terms[r]
            outs.append(v)
        return outs


class _Search:
    """Level-by-level BFS over registry states, shared between targets."""

    def __init__(self, library: GateLibrary, registries, arity: int):
        self.library = library
        self.arity = arity
        self.full = full_mask(arity)
        self.gates = [_Gate(e) for e in library.moves_entries()]
        self.registries = list(registries)
        size = {r.size for r in self.registries}
        if len(size) != 1:
            raise ValueError("all start registries must have the same size")
        self.size = size.pop()
        if library.fixed:
            bad = [g.entry for g in self.gates if g.n != self.size]
            if bad:
                raise ValueError("fixed library gates must span the whole registry")
        # key -> (actual state, parent key, move, registry index)
        self.nodes = {}
        self.level_of = {}
        self.found = {}  # mask -> key (first reached)
        frontier = []
        for ri, reg in enumerate(self.registries):
            st = reg.masks()
            key = self._key(st)
            if key not in self.nodes:
                self.nodes[key] = (st, None, None, ri)
                self.level_of[key] = 0
                frontier.append(key)
                for f in st:
                    self.found.setdefault(f, key)
        self.frontier = frontier
        self.depth = 0
        self.exhausted = False

    def _key(self, st):
        return st if self.library.fixed else tuple(sorted(st))

    def _cell_tuples(self, n):
        if self.library.fixed:
            return [tuple(range(self.size))]
        return list(itertools.permutations(range(self.size), n))

    def expand(self) -> int:
        """Advance one level; returns the number of new states."""
        new = []
        full = self.full
        level = self.depth + 1
        post_options = {}
        for key in self.frontier:
            st = self.nodes[key][0]
            for g in self.gates:
                n = g.n
                if n not in post_options:
                    post_options[n] = list(itertools.product(POSTS, repeat=n))
                for cells in self._cell_tuples(n):
                    outs = g.apply([st[c] for c in cells], full)
                    for post in post_options[n]:
                        child = list(st)
                        for c, o, p in zip(cells, outs, post):
                            child[c] = o if p == "REFRESH" else 0 if p == "W0" else full
                        child = tuple(child)
                        ck = self._key(child)
                        if ck in self.nodes:
                            continue
                        self.nodes[ck] = (child, key, (g.entry, cells, post), None)
                        self.level_of[ck] = level
                        new.append(ck)
                        for f in child:
                            if f not in self.found:
                                self.found[f] = ck
        self.frontier = new
        self.depth = level
        if not new:
            self.exhausted = True
        return len(new)

    def run_until(self, targets, max_levels: int) -> None:
        targets = set(targets)
        while not targets <= set(self.found) and self.depth < max_levels and not self.exhausted:
            self.expand()

    def level(self, mask: int):
        key = self.found.get(mask)
        return None if key is None else self.level_of[key]

    def schedule(self, mask: int) -> tuple:
        """Schedule reaching ``mask`` (and the gate entries per level)."""
        key = self.found[mask]
        chain = []
        k = key
        while True:
            st, parent, move, ri = self.nodes[k]
            if parent is None:
                start = ri
                break
            chain.append(move)
            k = parent
        chain.reverse()
        reg = self.registries[start]
        levels = tuple(ScheduleLevel(e.config, e.V1, e.V2, tuple(cells), tuple(post))
                       for e, cells, post in chain)
        final = self.nodes[key][0]
        return OperationSchedule(reg.contents, levels, final.index(mask), self.arity), \
            tuple(e for e, _, _ in chain), reg


@dataclass
class CompilationResult:
    function: BooleanFunction
    schedule: OperationSchedule
    gates: tuple
    registry: RegistrySpec
    explored: int
    verified: bool = False
    runs: list = field(default_factory=list)
    symbolic_agrees: bool | None = None

    @property
    def levels(self) -> int:
        return len(self.schedule.levels)

    @property
    def energy_max(self) -> float:
        return max((r.energy for r in self.runs), default=0.0)

    def to_dict(self) -> dict:
        return {"function": {"arity": self.function.arity, "mask": self.function.mask,
                             "label": self.function.label},
                "levels": self.levels, "verified": self.verified,
                "explored_states": self.explored, "schedule": self.schedule.to_dict(),
                "energy_max_fJ": self.energy_max}


def _default_registries(arity: int) -> list:
    if arity == 1:
        return [RegistrySpec(("A", "1"), 1)]
    if arity == 2:
        return [RegistrySpec.two_bit()]
    return [RegistrySpec.three_bit(x) for x in "ABC"]


def _compile(fn, library, registries, max_levels, setup, verify):
    if not any(e.region == "logic_operation" for e in library.entries):
        raise ValueError("library has no logic_operation entry")
    if max_levels < 0:
        raise ValueError("max_levels must be >= 0")
    search = _Search(library, registries, fn.arity)
    search.run_until([fn.mask], max_levels)
    if search.level(fn.mask) is None or search.level(fn.mask) > max_levels:
        why = "library is not universal for this registry" if search.exhausted else \
            f"not reachable within {max_levels} levels"
        raise CompilationError(f"{fn.label}: {why}", len(search.nodes))
    sched, gates, reg = search.schedule(fn.mask)
    res = CompilationResult(fn, sched, gates, reg, len(search.nodes))
    if verify:
        verify_results([res], library, setup)
    return res


def compile_dynamic(fn: BooleanFunction, library: GateLibrary, registry=None, max_levels: int = 4,
                    setup: LogicSetup = LogicSetup(), verify: bool = True) -> CompilationResult:
    """Minimal-level schedule for ``fn`` with freely chosen cell couplings.

    ``registry`` is a :class:`RegistrySpec` or a list of alternatives (the
    three five-cell registries by default for three inputs).
    """
    if library.fixed:
        raise ValueError("compile_dynamic needs a reconfigurable library")
    regs = _default_registries(fn.arity) if registry is None else (
        [registry] if isinstance(registry, RegistrySpec) else list(registry))
    return _compile(fn, library, regs, max_levels, setup, verify)


def compile_fixed(fn: BooleanFunction, library: GateLibrary, registry: RegistrySpec | None = None,
                  max_levels: int = 4, setup: LogicSetup = LogicSetup(),
                  verify: bool = True) -> CompilationResult:
    """As :func:`compile_dynamic` but on the fixed chain: only amplitudes and post-steps vary."""
    if not library.fixed:
        raise ValueError("compile_fixed needs a fixed-topology library")
    reg = registry or RegistrySpec.fixed_two_bit()
    return _compile(fn, library, [reg], max_levels, setup, verify)


def verify_results(results, library: GateLibrary, setup: LogicSetup = LogicSetup()) -> None:
    """Simulate every result's schedule on all input words and set ``verified``."""
    results = list(results)
    if not results:
        return
    tables = library.tables()
    runs = execute_schedules([r.schedule for r in results], setup)
    for res, rr in zip(results, runs):
        res.runs = rr
        fn = res.function
        ok = all(r.ok and r.output == fn(*r.inputs) for r in rr)
        predicted = res.schedule.predict_with(tables)
        agree = True
        for r in rr:
            row = int("".join(map(str, r.inputs)), 2) if r.inputs else 0
            for lv, masks in enumerate(predicted):
                if lv >= len(r.level_bits):
                    break
                want = tuple((m >> row) & 1 for m in masks)
                if r.level_bits[lv] != want:
                    agree = False
        res.verified = ok and agree
        res.symbolic_agrees = agree


# ----------------------------------------------------------------------------
# Census and throughput
# ----------------------------------------------------------------------------

@dataclass
class CensusResult:
    levels: dict  # code -> minimal level count (None if not reached)
    results: dict  # code -> CompilationResult
    bound: int
    explored: int
    verified_codes: list = field(default_factory=list)

    @property
    def histogram(self) -> dict:
        return dict(sorted(Counter(self.levels.values()).items(), key=lambda kv: (kv[0] is None, kv[0] or 0)))

    @property
    def max_level(self):
        vals = [v for v in self.levels.values() if v is not None]
        return max(vals) if vals else None

    @property
    def deviations(self) -> list:
        """Codes that miss the bound or were not reached."""
        return [c for c, v in self.levels.items() if v is None or v > self.bound]

    @property
    def all_verified(self) -> bool:
        return all(self.results[c].verified for c in self.verified_codes)

    def to_csv(self, path) -> None:
        codes = sorted(self.levels)
        write_csv(path, {"code": codes,
                         "levels": [-1 if self.levels[c] is None else self.levels[c] for c in codes],
                         "verified": [int(self.results[c].verified) if c in self.results else 0
                                      for c in codes]})


def three_bit_level_census(library: GateLibrary, registries=None, bound: int = 4,
                           max_levels: int = 6, verify_sample: int = 32, seed: int = 0,
                           setup: LogicSetup = LogicSetup()) -> CensusResult:
    """Minimal level count of all 256 three-input functions from one shared search.

    The search continues past ``bound`` (up to ``max_levels``) so that a
    weaker library still yields the achieved distribution.  A random
    sample of ``verify_sample`` codes (always including the deepest ones)
    is simulated on all eight input words.
    """
    if not library.entries:
        raise ValueError("library is empty")
    regs = registries or _default_registries(3)
    search = _Search(library, regs, 3)
    search.run_until(range(256), max_levels)
    levels, results = {}, {}
    for code in range(256):
        lv = search.level(code)
        levels[code] = lv
        if lv is not None:
            sched, gates, reg = search.schedule(code)
            results[code] = CompilationResult(BooleanFunction(3, code), sched, gates, reg,
                                              len(search.nodes))
    census = CensusResult(levels, results, bound, len(search.nodes))
    if verify_sample:
        reached = sorted(results)
        deepest = [c for c in reached if levels[c] == census.max_level]
        rng = np.random.default_rng(seed)
        forced = deepest[:8]
        rest = [c for c in reached if c not in forced]
        size = min(len(rest), max(0, verify_sample - len(forced)))
        picks = sorted(set(forced) | {int(c) for c in rng.choice(rest, size=size, replace=False)})
        verify_results([results[c] for c in picks], library, setup)
        census.verified_codes = picks
    return census


def estimate_speedup(parallel_bits: int = 65536, bits_per_cpu_word: int = 64,
                     cpu_access_ns: float = 10.0, dcram_levels: float = 4, level_ns: float = 5.0,
                     outputs_per_gate: int = 2) -> float:
    """Throughput ratio of DCRAM in-memory evaluation over a word-at-a-time CPU.

    DCRAM evaluates ``parallel_bits`` functions in ``dcram_levels * level_ns``
    and each gate yields ``outputs_per_gate`` results; the CPU handles one
    word of ``bits_per_cpu_word`` per ``cpu_access_ns``.
    """
    vals = dict(parallel_bits=parallel_bits, bits_per_cpu_word=bits_per_cpu_word,
                cpu_access_ns=cpu_access_ns, level_ns=level_ns, outputs_per_gate=outputs_per_gate)
    for k, v in vals.items():
        if not v > 0:
            raise ValueError(f"{k} must be > 0")
    if not dcram_levels > 0:
        raise ValueError("dcram_levels must be > 0")
    if math.isinf(dcram_levels):
        return 0.0
    dcram_rate = parallel_bits / (dcram_levels * level_ns)
    cpu_rate = bits_per_cpu_word / cpu_access_ns
    return dcram_rate / cpu_rate * outputs_per_gate
