"""
Command-line front end.

    dcram <decay|pulse|readwrite|map|compile|census|report> [--config FILE]
          [--out DIR] [--jobs N] [--preset paper]

The config file is INI: one section per area ([device], [circuit],
[protocol]) plus one per experiment.  Unknown sections or keys are errors.
"""
from __future__ import annotations

import argparse
import configparser
import datetime as _dt
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .circuit import (CouplingConfig, PulseSpec, SolverError, StepControl, TransmissionLineParams,
                      VsaParams, build_single_cell, transient_solve, waveforms_summary,
                      waveforms_to_csv)
from .compiler import (BooleanFunction, CompilationError, GateLibrary, RegistrySpec,
                       builtin_library, compile_dynamic, compile_fixed, estimate_speedup, extract_dynamic_library,
                       extract_fixed_library, three_bit_level_census)
from .device import BarrierParams, DecayError, MemcapacitorParams
from .logic import LogicSetup, default_grid, sweep_operation_map
from .memops import (CellSetup, LogicThresholds, ProtocolError, cell_report, read_refresh,
                     retention_sweep)


class ConfigError(ValueError):
    pass


# Every known key with its type and default.
_SCHEMA = {
    "run": {"seed": (int, 0)},
    "device": {
        "area_um2": (float, 0.25),
        "high_k_height_eV": (float, 3.0),
        "high_k_thickness_nm": (float, 6.0),
        "high_k_permittivity": (float, 50.0),
        "barrier_height_eV": (float, 0.2),
        "barrier_thickness_nm": (float, 8.0),
        "barrier_permittivity": (float, 3.9),
        "eff_mass_ratio": (float, 1.0),
    },
    "circuit": {
        "line_r_kohm_per_mm": (float, 1.5),
        "line_c_pf_per_mm": (float, 0.2),
        "line_length_mm": (float, 1.0),
        "line_segments": (int, 10),
        "switch_ohm": (float, 1000.0),
        "slew_V_per_ns": (float, 10.0),
        "dt_ps": (float, 1.0),
        "map_dt_ps": (float, 2.0),
    },
    "protocol": {
        "write_amplitude_V": (float, 1.0),
        "write_width_ns": (float, 1.0),
        "read_amplitude_V": (float, 1.0),
        "read_width_ns": (float, 0.5),
        "logic_threshold_V": (float, 0.3),
        "vsa_threshold_V": (float, 0.1),
        "vsa_delay_ns": (float, 0.5),
        "vsa_loss_fJ": (float, 0.5),
        "vsa_sense_fF": (float, 1.0),
        "refresh_amplitude_V": (float, -1.0),
        "refresh_width_ns": (float, 1.0),
    },
    "decay": {
        "k_grid": ("floats", (3.9, 7.5, 25.0)),
        "d_grid_nm": ("floats", (6.0, 8.0, 10.0)),
        "ivd0_V": ("optfloat", None),
        "t_end_s": (float, 1e6),
        "per_decade": (int, 10),
    },
    "pulse": {
        "amplitude_V": (float, 1.0),
        "width_ns": (float, 1.0),
        "initial_ivd_V": ("floats", (0.0, 1.0, -1.0)),
        "window_ns": (float, 4.0),
    },
    "readwrite": {"stored_ivd_V": ("floats", (0.5, -0.5))},
    "map": {
        "config": (str, "2"),
        "v_min": (float, -2.0),
        "v_max": (float, 2.0),
        "points": (int, 81),
    },
    "compile": {
        "mode": (str, "dynamic"),
        "arity": (int, 2),
        "function": (int, 9),
        "max_levels": (int, 4),
        "library_points": (int, 41),
        "library": (str, "auto"),
    },
    "census": {
        "bound": (int, 4),
        "max_levels": (int, 6),
        "verify_sample": (int, 32),
        "library_points": (int, 41),
        "library": (str, "auto"),
    },
    "report": {"outputs_per_gate": (int, 2)},
}

# Keys that may be zero or negative; every other number must be > 0.
_SIGNED = {("decay", "ivd0_V"), ("pulse", "amplitude_V"), ("pulse", "initial_ivd_V"),
           ("readwrite", "stored_ivd_V"), ("map", "v_min"), ("map", "v_max"),
           ("protocol", "refresh_amplitude_V"), ("protocol", "write_amplitude_V"),
           ("protocol", "read_amplitude_V"), ("run", "seed"), ("compile", "function"),
           ("compile", "max_levels"), ("census", "verify_sample"), ("census", "max_levels"),
           ("census", "bound")}

PRESETS = {"paper": {}}


@dataclass
class ExperimentConfig:
    """Fully resolved settings of one run."""

    values: dict
    command: str
    out: Path
    jobs: int = 1
    source: str | None = None

    def get(self, section: str, key: str):
        return self.values[section][key]

    def canonical(self) -> dict:
        return {s: {k: _jsonable(v) for k, v in sorted(kv.items())}
                for s, kv in sorted(self.values.items())}

    def hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    # -- builders ---------------------------------------------------------
    def device(self) -> MemcapacitorParams:
        d = self.values["device"]
        outer = BarrierParams(d["high_k_height_eV"], d["high_k_thickness_nm"],
                              d["high_k_permittivity"])
        mid = BarrierParams(d["barrier_height_eV"], d["barrier_thickness_nm"],
                            d["barrier_permittivity"], d["eff_mass_ratio"])
        return MemcapacitorParams(d["area_um2"], outer, mid)

    def line(self) -> TransmissionLineParams | None:
        c = self.values["circuit"]
        if c["line_length_mm"] == 0:
            return None
        return TransmissionLineParams(c["line_r_kohm_per_mm"], c["line_c_pf_per_mm"],
                                      c["line_length_mm"], c["line_segments"])

    def cell_setup(self) -> CellSetup:
        c, p = self.values["circuit"], self.values["protocol"]
        slew = c["slew_V_per_ns"]
        vsa = VsaParams(p["vsa_threshold_V"], p["vsa_delay_ns"],
                        PulseSpec(p["refresh_amplitude_V"], p["refresh_width_ns"], slew, 0.1),
                        p["vsa_loss_fJ"], p["vsa_sense_fF"])
        return CellSetup(self.device(), self.line(), c["switch_ohm"],
                         PulseSpec(p["write_amplitude_V"], p["write_width_ns"], slew, 1.0),
                         PulseSpec(p["read_amplitude_V"], p["read_width_ns"], slew, 1.0), vsa,
                         LogicThresholds(p["logic_threshold_V"]),
                         StepControl(dt=c["dt_ps"] * 1e-3))

    def logic_setup(self) -> LogicSetup:
        c = self.values["circuit"]
        cell = self.cell_setup()
        return LogicSetup(cell, PulseSpec(1.0, 1.0, c["slew_V_per_ns"], 1.0), step=cell.step,
                          map_step=StepControl(dt=c["map_dt_ps"] * 1e-3))


def _jsonable(v):
    if isinstance(v, tuple):
        return list(v)
    return v


def _find_line(text: str, section: str, key: str | None) -> int | None:
    cur = None
    for n, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            cur = s[1:-1].strip()
            if key is None and cur == section:
                return n
        elif key is not None and cur == section and s.split("=", 1)[0].strip() == key:
            return n
    return None


def _parse_value(kind, raw: str):
    raw = raw.strip()
    if kind == "floats":
        parts = [p for p in raw.replace(";", ",").split(",") if p.strip()]
        return tuple(float(p) for p in parts)
    if kind == "optfloat":
        return None if raw.lower() in ("", "none", "envelope") else float(raw)
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    return raw


def load_config(path: str | None, command: str, out: str | None = None, jobs: int = 1,
                preset: str | None = None) -> ExperimentConfig:
    """Resolve defaults, preset and file into a validated :class:`ExperimentConfig`."""
    values = {s: {k: d for k, (_, d) in keys.items()} for s, keys in _SCHEMA.items()}
    text = ""
    out_dir = out
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
        parser.optionxform = str
        try:
            parser.read_string(text, source=str(path))
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        file_preset = None
        for section in parser.sections():
            line = _find_line(text, section, None)
            if section == "run":
                for key in parser[section]:
                    if key == "preset":
                        file_preset = parser[section][key].strip()
                    elif key == "out":
                        out_dir = out_dir or parser[section][key].strip()
                    elif key not in _SCHEMA["run"]:
                        raise ConfigError(f"{path}:{_find_line(text, section, key)}: unknown key "
                                          f"'{key}' in [run]")
            elif section not in _SCHEMA:
                raise ConfigError(f"{path}:{line}: unknown section [{section}]")
        preset = preset or file_preset
        if preset is not None and preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; available: {', '.join(PRESETS)}")
        for section in parser.sections():
            for key, raw in parser[section].items():
                if section == "run" and key in ("preset", "out"):
                    continue
                where = f"{path}:{_find_line(text, section, key)}"
                if key not in _SCHEMA[section]:
                    raise ConfigError(f"{where}: unknown key '{key}' in [{section}]")
                kind = _SCHEMA[section][key][0]
                try:
                    values[section][key] = _parse_value(kind, raw)
                except ValueError as exc:
                    raise ConfigError(f"{where}: bad value for {section}.{key}: {raw!r}") from exc
    elif preset is not None and preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; available: {', '.join(PRESETS)}")
    _validate(values, path)
    return ExperimentConfig(values, command, Path(out_dir or "dcram_out"), jobs, path)


def _validate(values: dict, path) -> None:
    for section, kv in values.items():
        for key, v in kv.items():
            if (section, key) in _SIGNED or isinstance(v, str) or v is None:
                continue
            items = v if isinstance(v, tuple) else (v,)
            if section == "circuit" and key == "line_length_mm":
                if any(x < 0 for x in items):
                    raise ConfigError(f"{section}.{key} must be >= 0")
                continue
            if any(not x > 0 for x in items):
                raise ConfigError(f"{section}.{key} must be positive, got {v!r}")
    for section, key in (("decay", "k_grid"), ("decay", "d_grid_nm"), ("pulse", "initial_ivd_V"),
                         ("readwrite", "stored_ivd_V")):
        if len(values[section][key]) == 0:
            raise ConfigError(f"{section}.{key} must not be empty")
    if values["map"]["v_max"] <= values["map"]["v_min"]:
        raise ConfigError("map.v_max must exceed map.v_min")
    if values["compile"]["mode"] not in ("dynamic", "fixed"):
        raise ConfigError("compile.mode must be 'dynamic' or 'fixed'")
    if values["compile"]["arity"] not in (1, 2, 3):
        raise ConfigError("compile.arity must be 1, 2 or 3")
    if not 0 <= values["compile"]["function"] < 2 ** (2 ** values["compile"]["arity"]):
        raise ConfigError("compile.function does not fit the arity")
    if values["device"]["barrier_permittivity"] < 1 or values["device"]["high_k_permittivity"] < 1:
        raise ConfigError("relative permittivities must be >= 1")


# ----------------------------------------------------------------------------
# Manifest
# ----------------------------------------------------------------------------

@dataclass
class RunManifest:
    command: str
    config_hash: str
    version: str
    started: str
    finished: str = ""
    files: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"command": self.command, "config_hash": self.config_hash,
                "tool_version": self.version, "started": self.started,
                "finished": self.finished, "files": sorted(self.files)}


class _Writer:
    """Creates output files and records them for the manifest."""

    def __init__(self, out: Path, manifest: RunManifest):
        self.out = out
        self.manifest = manifest
        out.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        self.manifest.files.append(name)
        return self.out / name

    def json(self, name: str, data) -> None:
        with open(self.path(name), "w", encoding="utf-8", newline="\n") as fh:
            json.dump(data, fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")

    def text(self, name: str, text: str) -> None:
        with open(self.path(name), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o)}")


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


# ----------------------------------------------------------------------------
# Commands
# ----------------------------------------------------------------------------

def cmd_decay(cfg: ExperimentConfig, w: _Writer) -> None:
    d = cfg.values["decay"]
    base = cfg.device()
    tab = retention_sweep(d["k_grid"], d["d_grid_nm"], d["ivd0_V"], base, d["t_end_s"],
                          d["per_decade"])
    tab.to_csv(w.path("decay.csv"))
    best = tab.best_at(d["t_end_s"])
    w.json("decay.json", {"best_at_t_end": {"k": best[0], "d_nm": best[1]},
                          "ivd_at_t_end_V": {f"k{k:g}_d{dd:g}nm": float(tab.series(k, dd)[-1])
                                             for k in tab.k_grid for dd in tab.d_grid}})


def cmd_pulse(cfg: ExperimentConfig, w: _Writer) -> None:
    p = cfg.values["pulse"]
    setup = cfg.cell_setup()
    pulse = PulseSpec(p["amplitude_V"], p["width_ns"], cfg.get("circuit", "slew_V_per_ns"), 1.0)
    net = build_single_cell(setup.device, setup.line, pulse, setup.switch_resistance)
    summary = {}
    for v0 in p["initial_ivd_V"]:
        wf = transient_solve(net, max(p["window_ns"], pulse.end + 0.5), setup.step,
                             initial_ivd=[v0])
        name = f"pulse_ivd{v0:+.3f}V.csv"
        waveforms_to_csv(wf, w.path(name))
        summary[name] = waveforms_summary(wf)
    w.json("pulse.json", summary)


def cmd_readwrite(cfg: ExperimentConfig, w: _Writer) -> None:
    setup = cfg.cell_setup()
    summary = {}
    for v0 in cfg.values["readwrite"]["stored_ivd_V"]:
        r = read_refresh(v0, setup)
        name = f"readwrite_ivd{v0:+.3f}V.csv"
        if r.waveforms is not None:
            waveforms_to_csv(r.waveforms, w.path(name))
        summary[f"{v0:+.3f}"] = {"bit": r.bit, "vsa_activated": r.activated,
                                 "post_read_ivd_V": r.post_read_ivd, "final_ivd_V": r.ivd,
                                 "energy_fJ": r.energy, "energy_periphery_fJ": r.energy_periphery}
    w.json("readwrite.json", summary)


def _config_from_name(name: str) -> CouplingConfig:
    if name.strip().lower() in ("fixed", "three_cell", "3"):
        return CouplingConfig.three_cell_fixed()
    try:
        return CouplingConfig.two_cell(int(name))
    except ValueError as exc:
        raise ConfigError(f"map.config must be 1-4 or 'fixed', got {name!r}") from exc


def cmd_map(cfg: ExperimentConfig, w: _Writer) -> None:
    m = cfg.values["map"]
    grid = np.round(np.linspace(m["v_min"], m["v_max"], m["points"]), 10)
    config = _config_from_name(m["config"])
    omap = sweep_operation_map(config, grid, grid, cfg.logic_setup(), cfg.jobs)
    tag = config.label.replace("[", "_").replace("]", "").replace("+", "p").replace("-", "m")
    omap.to_csv(w.path(f"map_{tag}.csv"))
    w.json(f"map_{tag}.json", {
        "config": config.label, "region_counts": omap.region_counts(),
        "logic_functions": [{"outputs": list(k), "labels": [e for e in _labels(k, config.arity)],
                             "points": v} for k, v in sorted(omap.logic_functions().items())]})


def _labels(outs, arity):
    from .logic import format_function
    return [format_function(f, arity) for f in outs]


_PHYSICS = ("device", "circuit", "protocol")


def _library(cfg: ExperimentConfig, section: str, fixed: bool, w: _Writer) -> GateLibrary:
    """Gate library named by ``<section>.library``.

    "builtin" uses the packaged library, "extract" sweeps fresh maps at
    ``library_points`` per axis, and any other value is a JSON path.  "auto"
    means builtin when the device, circuit and protocol settings are the
    defaults the packaged libraries were extracted with, extract otherwise.
    """
    s = cfg.values[section]
    choice = s["library"]
    kind = "fixed" if fixed else "dynamic"
    if choice == "auto":
        defaults = all(cfg.values[sec][k] == d for sec in _PHYSICS
                       for k, (_, d) in _SCHEMA[sec].items())
        choice = "builtin" if defaults else "extract"
    if choice == "builtin":
        return builtin_library(kind)
    if choice == "extract":
        grid = default_grid(s["library_points"])
        setup = cfg.logic_setup()
        extract = extract_fixed_library if fixed else extract_dynamic_library
        lib = extract(setup, grid, cfg.jobs)[0]
        w.json(f"library_{kind}.json", lib.to_dict())
        return lib
    try:
        data = json.loads(Path(choice).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ConfigError(f"{section}.library: cannot load {choice}: {exc}") from exc
    lib = GateLibrary.from_dict(data)
    if lib.fixed != fixed:
        raise ConfigError(f"{section}.library has the wrong topology kind")
    return lib


def cmd_compile(cfg: ExperimentConfig, w: _Writer) -> None:
    c = cfg.values["compile"]
    fn = BooleanFunction(c["arity"], c["function"])
    fixed = c["mode"] == "fixed"
    lib = _library(cfg, "compile", fixed, w)
    setup = cfg.logic_setup()
    if fixed:
        cells = {1: ("1", "A", "1"), 2: ("1", "A", "B"), 3: ("A", "B", "C")}[fn.arity]
        reg = RegistrySpec(cells, fn.arity)
        res = compile_fixed(fn, lib, reg, c["max_levels"], setup)
    else:
        res = compile_dynamic(fn, lib, None, c["max_levels"], setup)
    transcript = [{"inputs": list(r.inputs), "output": r.output, "expected": fn(*r.inputs),
                   "energy_fJ": r.energy, "registry_bits_per_level": [list(b) for b in r.level_bits]}
                  for r in res.runs]
    w.json("compile.json", {**res.to_dict(), "verification": transcript})
    if not res.verified:
        raise CompilationError(f"schedule for {fn.label} failed simulation", res.explored)


def cmd_census(cfg: ExperimentConfig, w: _Writer) -> None:
    c = cfg.values["census"]
    lib = _library(cfg, "census", False, w)
    census = three_bit_level_census(lib, None, c["bound"], c["max_levels"], c["verify_sample"],
                                    cfg.get("run", "seed"), cfg.logic_setup())
    census.to_csv(w.path("census.csv"))
    w.json("census.json", {
        "histogram": {str(k): v for k, v in census.histogram.items()},
        "max_level": census.max_level, "bound": census.bound,
        "deviations": census.deviations, "explored_states": census.explored,
        "verified_codes": census.verified_codes, "all_verified": census.all_verified})


def cmd_report(cfg: ExperimentConfig, w: _Writer) -> None:
    rep = cell_report(cfg.cell_setup())
    k = cfg.values["report"]["outputs_per_gate"]
    speed = estimate_speedup(outputs_per_gate=k)
    rep["speedup"] = {"outputs_per_gate": k, "ratio": speed}
    w.json("report.json", rep)
    w.text("speedup.txt",
           f"DCRAM speedup over a 64-bit CPU at 10 ns per access\n"
           f"65536 parallel bits, 4 levels x 5 ns, {k} output(s) per gate\n"
           f"ratio = {speed:g}\n")


COMMANDS = {"decay": cmd_decay, "pulse": cmd_pulse, "readwrite": cmd_readwrite, "map": cmd_map,
            "compile": cmd_compile, "census": cmd_census, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dcram", description="DCRAM cell, logic and compiler experiments")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="INI config file")
    ap.add_argument("--out", help="output directory (default: dcram_out)")
    ap.add_argument("--jobs", type=int, default=1, help="worker processes for sweeps")
    ap.add_argument("--preset", choices=sorted(PRESETS), help="parameter preset")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return 2
    try:
        cfg = load_config(args.config, args.command, args.out, args.jobs, args.preset)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    manifest = RunManifest(args.command, cfg.hash(), __version__, _now())
    writer = _Writer(cfg.out, manifest)
    try:
        COMMANDS[args.command](cfg, writer)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (SolverError, ProtocolError, CompilationError, DecayError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        manifest.finished = _now()
        with open(cfg.out / "manifest.json", "w", encoding="utf-8", newline="\n") as fh:
            data = manifest.to_dict()
            data["files"] = sorted(set(data["files"]) | {"manifest.json"})
            json.dump(data, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
