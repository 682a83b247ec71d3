import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from renormsolve import cli
from renormsolve import config as cfgmod
from renormsolve.discretization import build_mesh, write_snapshot
from renormsolve.errors import (
    CompatibilityError,
    ConfigError,
    InvalidParameterError,
    NonConvergenceError,
    NumericError,
    ReportIOError,
    ValidationError,
)
from renormsolve.report import RunReport, emit_report

BUNDLED = cfgmod.bundled_names()


def small(name, **overrides):
    """A bundled config text with a reduced mesh."""
    text = cfgmod.load(name).to_ini()
    for old, new in overrides.items():
        text = text.replace(old, new)
    return text


def write(tmp_path, text, name="run.ini"):
    path = tmp_path / name
    path.write_text(text)
    return path


def run_main(args, capsys):
    code = cli.main(args)
    out = capsys.readouterr()
    return code, out.out, out.err


# ---- config -------------------------------------------------------------


def test_bundled_names():
    assert set(BUNDLED) == {"poisson_1d", "continuation_dipole_2d", "stability_1d", "zero_order_1d", "diagnose_1d"}


@pytest.mark.parametrize("name", BUNDLED)
def test_round_trip(name):
    cfg = cfgmod.load(name)
    again = cfgmod.parse(cfgmod.dumps(cfg), base_dir=cfg.base_dir)
    assert again == cfg
    assert again.digest() == cfg.digest()


def test_unknown_section_named():
    with pytest.raises(ConfigError) as info:
        cfgmod.parse("[probelm]\np = 2\n")
    assert info.value.key == "probelm"


def test_unknown_key_named():
    with pytest.raises(ConfigError) as info:
        cfgmod.parse("[problem]\nprobelm = 2\n")
    assert info.value.key == "problem.probelm"


def test_digest_ignores_output():
    cfg = cfgmod.load("poisson_1d")
    assert cfg.with_output_directory("/elsewhere").digest() == cfg.digest()


def test_field_spec_render_round_trip():
    spec = cfgmod.parse_field_spec("dipole(x0=0.3 0.3, x1=0.7 0.7, width=0.1, mass=1.0)", "f", "problem.f")
    assert spec.vector("x0") == (0.3, 0.3)
    assert cfgmod.parse_field_spec(spec.render(), "f", "problem.f") == spec


@pytest.mark.parametrize(
    "text,key",
    [
        ("[problem]\np = abc\n", "problem.p"),
        ("[problem]\nf = nosuch()\n", "problem.f"),
        ("[mesh]\ndomain = torus\n", "mesh.domain"),
        ("[experiment]\nkind = solve\n[problem]\nlambda = power(r=2)\n", "problem.lambda"),
    ],
)
def test_schema_violations_name_key(text, key):
    with pytest.raises(ConfigError) as info:
        cfgmod.parse(text)
    assert info.value.key == key


# ---- reports ------------------------------------------------------------


def test_poisson_report_keys(tmp_path, capsys):
    code, out, _ = run_main(["solve", "--config", "poisson_1d", "--out", str(tmp_path)], capsys)
    assert code == 0
    files = sorted(tmp_path.iterdir())
    assert [f.suffix for f in files] == [".json"]
    doc = json.loads(files[0].read_text())
    assert {"config", "solution", "estimates", "timings"} <= set(doc)
    assert doc["config_hash"] == cfgmod.load("poisson_1d").digest()
    assert files[0].name == f"poisson_1d-{doc['config_hash']}.json"
    assert out.strip() == str(files[0])


def test_continuation_writes_one_csv_per_curve(tmp_path, capsys):
    path = write(tmp_path, small("continuation_dipole_2d", **{"resolution = 32": "resolution = 8"}))
    code, _, _ = run_main(["continue", "--config", str(path), "--out", str(tmp_path / "o")], capsys)
    assert code == 0
    files = sorted(p.name for p in (tmp_path / "o").iterdir())
    docs = [f for f in files if f.endswith(".json")]
    csvs = [f for f in files if f.endswith(".csv")]
    assert len(docs) == 1
    doc = json.loads((tmp_path / "o" / docs[0]).read_text())
    curves = doc["estimates"]["final"]["curves"]
    assert len(csvs) == len(curves) == 6
    stem = docs[0][: -len(".json")]
    assert set(csvs) == {f"{stem}-{name}.csv" for name in curves}
    rows = (tmp_path / "o" / f"{stem}-energy_decay.csv").read_text().splitlines()
    assert rows[0] == "parameter,value"
    assert len(rows) == 1 + len(curves["energy_decay"]["values"])


def test_rerun_byte_identical(tmp_path, capsys):
    path = write(tmp_path, small("stability_1d", **{"resolution = 128": "resolution = 32"}))
    for d in ("a", "b"):
        assert run_main(["run", "--config", str(path), "--out", str(tmp_path / d)], capsys)[0] == 0
    a = sorted((tmp_path / "a").iterdir())
    b = sorted((tmp_path / "b").iterdir())
    assert [p.name for p in a] == [p.name for p in b]
    assert all(x.read_bytes() == y.read_bytes() for x, y in zip(a, b))


def test_wall_clock_opt_in(tmp_path):
    cfg = cfgmod.load("poisson_1d")
    assert "wall_clock_seconds" not in cli.execute(cfg).body["timings"]
    timed = cfgmod.parse(cfg.to_ini().replace("wall_clock = false", "wall_clock = true"))
    assert timed.digest() == cfg.digest()
    assert cli.execute(timed).body["timings"]["wall_clock_seconds"] >= 0


def test_non_finite_report_rejected(tmp_path):
    rep = RunReport("x", "0" * 12, {"value": float("nan")}, {})
    with pytest.raises(NumericError):
        emit_report(rep, tmp_path, ("json",))


def test_out_overrides_config_directory(tmp_path, capsys):
    text = cfgmod.load("poisson_1d").to_ini().replace("directory = out", "directory = ignored")
    path = write(tmp_path, text)
    assert run_main(["solve", "--config", str(path), "--out", str(tmp_path / "here")], capsys)[0] == 0
    assert any((tmp_path / "here").iterdir())
    assert not any(p.name.startswith("ignored") for p in tmp_path.iterdir())


def test_config_directory_relative_to_file(tmp_path, capsys):
    text = cfgmod.load("diagnose_1d").to_ini().replace("directory = out", "directory = reports")
    path = write(tmp_path, text)
    assert run_main(["diagnose", "--config", str(path)], capsys)[0] == 0
    assert len(list((tmp_path / "reports").glob("*.json"))) == 1


def test_validate_config_prints_canonical_form(capsys):
    code, out, _ = run_main(["validate-config", "--config", "continuation_dipole_2d"], capsys)
    assert code == 0
    body = out.rsplit("# hash", 1)[0]
    cfg = cfgmod.load("continuation_dipole_2d")
    assert cfgmod.parse(body, base_dir=cfg.base_dir) == cfg
    assert out.strip().endswith(cfg.digest())


def test_list_configs(capsys):
    code, out, _ = run_main(["list-configs"], capsys)
    assert code == 0 and out.split() == BUNDLED


# ---- exit codes ---------------------------------------------------------


def error_block(err):
    return json.loads(err.strip().splitlines()[-1])["error"]


def test_unknown_key_exit(tmp_path, capsys):
    path = write(tmp_path, "[probelm]\np = 2\n")
    code, _, err = run_main(["solve", "--config", str(path)], capsys)
    block = error_block(err)
    assert code == 2 and block["kind"] == "config" and "probelm" in block["message"] and block["key"] == "probelm"


def test_missing_config_file_exit(tmp_path, capsys):
    code, _, err = run_main(["solve", "--config", str(tmp_path / "absent.ini")], capsys)
    assert code == error_block(err)["exit_code"] != 0


def test_nonconvergence_exit(tmp_path, capsys):
    text = small("poisson_1d", **{"constant(value=0.0)": "constant(value=0.5)", "f = cosine()": "f = dipole(x0=0.25, x1=0.75, width=0.1)"})
    path = write(tmp_path, text.replace("picard_max_iter = 200", "picard_max_iter = 1"))
    code, _, err = run_main(["solve", "--config", str(path), "--out", str(tmp_path)], capsys)
    assert code == 3 and error_block(err)["kind"] == "non-convergence"


def test_numeric_exit(tmp_path, capsys):
    m = build_mesh("interval", 64)
    v = np.cos(np.pi * m.nodes[:, 0])
    v[3] = np.nan
    write_snapshot(tmp_path / "nan.snap", m, v)
    path = write(tmp_path, small("poisson_1d", **{"f = cosine()": "f = file(path=nan.snap)"}))
    code, _, err = run_main(["solve", "--config", str(path), "--out", str(tmp_path)], capsys)
    assert code == 4 and error_block(err)["kind"] == "numeric"


def test_io_exit(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("")
    code, _, err = run_main(["solve", "--config", "poisson_1d", "--out", str(blocker)], capsys)
    assert code == 5 and error_block(err)["kind"] == "io"


@pytest.mark.parametrize(
    "exc,code",
    [
        (RuntimeError("boom"), 1),
        (InvalidParameterError("bad"), 2),
        (ConfigError("bad", "k"), 2),
        (NonConvergenceError("slow", [1.0]), 3),
        (NumericError("nan"), 4),
        (FloatingPointError("overflow"), 4),
        (ReportIOError("disk"), 5),
        (ValidationError("assumption"), 6),
        (CompatibilityError("mean"), 6),
    ],
)
def test_exit_code_taxonomy(monkeypatch, capsys, exc, code):
    def boom(cfg):
        raise exc

    monkeypatch.setitem(cli.RUNNERS, "solve", boom)
    got, _, err = run_main(["solve", "--config", "poisson_1d"], capsys)
    assert got == code
    assert error_block(err)["exit_code"] == code


def test_console_entry_point(tmp_path):
    r = subprocess.run(
        [sys.executable, "-m", "renormsolve.cli", "diagnose", "--config", "diagnose_1d", "--out", str(tmp_path)],
        capture_output=True,
        text=True,
    )
    assert r.returncode == 0, r.stderr
    doc = json.loads(Path(r.stdout.strip()).read_text())
    assert doc["diagnostics"]["assumptions"]["passed"]
