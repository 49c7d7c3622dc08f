import json
import re

import pytest

from dcram.cli import ConfigError, load_config, main


def _write(tmp_path, text, name="run.ini"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


DECAY = """
[decay]
k_grid = 3.9, 7.5
d_grid_nm = 8, 10
ivd0_V = 1.0
t_end_s = 100
per_decade = 3
"""


def test_decay_run_is_deterministic(tmp_path):
    cfg = _write(tmp_path, DECAY)
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["decay", "--config", cfg, "--out", str(out)]) == 0
        outs.append(out)
    a, b = outs
    assert (a / "decay.csv").read_bytes() == (b / "decay.csv").read_bytes()
    ma = json.loads((a / "manifest.json").read_text())
    mb = json.loads((b / "manifest.json").read_text())
    assert ma["config_hash"] == mb["config_hash"]
    assert ma["files"] == ["decay.csv", "decay.json", "manifest.json"]
    best = json.loads((a / "decay.json").read_text())["best_at_t_end"]
    assert best == {"k": 3.9, "d_nm": 10.0}


def test_config_hash_tracks_values(tmp_path):
    h1 = load_config(_write(tmp_path, DECAY), "decay").hash()
    h2 = load_config(_write(tmp_path, DECAY.replace("100", "200"), "b.ini"), "decay").hash()
    assert h1 != h2
    assert load_config(None, "decay").hash() == load_config(None, "decay", preset="paper").hash()


@pytest.mark.parametrize("text, where", [
    ("[device]\narea_um2 = 0.25\nbogus = 1\n", ":3: unknown key 'bogus'"),
    ("\n[nosuch]\nx = 1\n", ":2: unknown section [nosuch]"),
    ("[run]\ncolour = red\n", ":2: unknown key 'colour'"),
    ("[device]\narea_um2 = abc\n", ":2: bad value"),
])
def test_config_errors_name_the_line(tmp_path, text, where):
    with pytest.raises(ConfigError, match=re.escape(where)):
        load_config(_write(tmp_path, text), "report")


@pytest.mark.parametrize("text", [
    "[decay]\nk_grid =\n",
    "[map]\nv_min = 1\nv_max = 1\n",
    "[device]\narea_um2 = -1\n",
    "[compile]\nmode = other\n",
    "[compile]\narity = 2\nfunction = 16\n",
    "[run]\npreset = nosuch\n",
])
def test_invalid_values_exit_with_two(tmp_path, text, capsys):
    assert main(["report", "--config", _write(tmp_path, text), "--out", str(tmp_path)]) == 2
    assert "config error" in capsys.readouterr().err


def test_missing_config_and_bad_jobs(tmp_path):
    assert main(["report", "--config", str(tmp_path / "none.ini")]) == 2
    assert main(["report", "--jobs", "0"]) == 2


def test_runtime_error_exits_with_one_and_keeps_manifest(tmp_path, capsys):
    # a 0.2 V write cannot switch the cell
    cfg = _write(tmp_path, "[protocol]\nwrite_amplitude_V = 0.2\n")
    out = tmp_path / "o"
    assert main(["report", "--config", cfg, "--out", str(out)]) == 1
    assert "error" in capsys.readouterr().err
    assert json.loads((out / "manifest.json").read_text())["command"] == "report"


def test_report_command(tmp_path):
    out = tmp_path / "r"
    assert main(["report", "--out", str(out)]) == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["speedup"]["ratio"] == pytest.approx(1024.0)
    assert "ratio = 1024" in (out / "speedup.txt").read_text()


def test_readwrite_command(tmp_path):
    cfg = _write(tmp_path, "[readwrite]\nstored_ivd_V = 0.5, -0.5\n")
    out = tmp_path / "rw"
    assert main(["readwrite", "--config", cfg, "--out", str(out)]) == 0
    s = json.loads((out / "readwrite.json").read_text())
    assert s["+0.500"]["bit"] == 1 and s["-0.500"]["bit"] == 0
    assert s["-0.500"]["vsa_activated"] and not s["+0.500"]["vsa_activated"]


def test_compile_command_uses_builtin_library(tmp_path):
    cfg = _write(tmp_path, "[compile]\nmode = fixed\nfunction = 9\n")
    out = tmp_path / "c"
    assert main(["compile", "--config", cfg, "--out", str(out)]) == 0
    res = json.loads((out / "compile.json").read_text())
    assert res["verified"] and res["levels"] == 2
    assert [v["output"] for v in res["verification"]] == [1, 0, 0, 1]
    assert not (out / "library_fixed.json").exists()


def test_compile_rejects_wrong_library_kind(tmp_path):
    lib = tmp_path / "lib.json"
    lib.write_text(json.dumps({"fixed": True, "entries": []}))
    cfg = _write(tmp_path, f"[compile]\nmode = dynamic\nlibrary = {lib}\n")
    assert main(["compile", "--config", cfg, "--out", str(tmp_path / "x")]) == 2
