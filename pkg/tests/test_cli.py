import shutil
import subprocess

import numpy as np
import pytest

from lusingrad.cli import RunConfig, compare, main, parse_config_text, read_kv
from lusingrad.errors import ConfigError, FingerprintMismatchError
from lusingrad.field_core import read_mask


# --- config parsing ----------------------------------------------------------------


def test_parse_config_text():
    text = "# comment\ngrid.cells = 32  # trailing\n\nbudgets.eps=0.2\noutput.dump_fields = no\n"
    assert parse_config_text(text) == {"grid.cells": 32, "budgets.eps": 0.2, "output.dump_fields": False}


@pytest.mark.parametrize(
    "text,match",
    [("grid.cell = 3", "unknown key"), ("grid.cells 3", "expected key = value"), ("grid.cells = x", "bad value")],
)
def test_parse_config_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config_text(text)


@pytest.mark.parametrize(
    "mode,settings",
    [
        ("rough", {"budgets.eps": 0.0}),
        ("iterate", {"schedule.s": -1.0}),
        ("forms", {"forms.n": 60}),
        ("forms", {"forms.form": "dx3"}),
        ("rough", {"field.generator": "random-trigonometric"}),
        ("rough", {"field.generator": "nope"}),
        ("bogus", {}),
    ],
)
def test_config_validation(mode, settings):
    with pytest.raises(ConfigError):
        RunConfig.build(mode, settings)


def test_canonical_excludes_output_dir():
    a = RunConfig.build("rough", {"output.dir": "x"})
    b = RunConfig.build("rough", {"output.dir": "y"})
    assert a.canonical() == b.canonical()


# --- runs --------------------------------------------------------------------------------


def test_bad_config_writes_nothing(tmp_path):
    out = tmp_path / "run"
    assert main(["rough", "--set", "budgets.epsilon=1", "--out", str(out)]) == 2
    assert not out.exists()
    cfg = tmp_path / "c.txt"
    cfg.write_text("grid.cells = -4\n")
    assert main(["rough", "--config", str(cfg), "--out", str(out)]) == 2
    assert not out.exists()
    assert main(["rough", "--config", str(tmp_path / "missing.txt"), "--out", str(out)]) == 2
    assert not out.exists()


def test_rough_zero_generator(tmp_path):
    out = tmp_path / "z"
    assert main(["rough", "--generator", "zero", "--cells", "64", "--out", str(out)]) == 0
    cert = read_kv(out / "certificate.txt")
    assert float(cert["theta_achieved"]) == 0.0
    assert read_kv(out / "metrics.txt")["status"] == "OK"
    dom, K = read_mask(out / "K_mask.lgf")
    assert K.shape == (64, 64)
    assert (out / "potential_0.txt").read_text().startswith("POT1 term=0 N=2")


def test_rough_rotational_and_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    args = ["rough", "--cells", "128", "--set", "budgets.theta=0.05"]
    assert main(args + ["--out", str(a)]) == 0
    assert main(args + ["--out", str(b)]) == 0
    assert (a / "certificate.txt").read_bytes() == (b / "certificate.txt").read_bytes()
    assert (a / "potential_0.txt").read_bytes() == (b / "potential_0.txt").read_bytes()
    assert main(["compare", str(a), str(b)]) == 0


def test_compare_detects_changes(tmp_path):
    a = tmp_path / "a"
    assert main(["rough", "--generator", "zero", "--cells", "64", "--out", str(a)]) == 0
    rows = read_kv(a / "metrics.txt")
    assert compare(rows, dict(rows)) == []
    changed = dict(rows, eps_achieved=repr(float(rows["eps_achieved"]) * 1.5 + 1e-3))
    assert [d[0] for d in compare(rows, changed)] == ["eps_achieved"]
    assert compare(rows, dict(rows, wall_clock_s="123.0")) == []
    with pytest.raises(FingerprintMismatchError):
        compare(rows, dict(rows, fingerprint="0" * 64))
    p = tmp_path / "m.txt"
    p.write_text("".join(f"{k} = {v}\n" for k, v in changed.items()))
    assert main(["compare", str(a), str(p)]) == 1


def test_compare_fingerprint_mismatch_exit_code(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["rough", "--generator", "zero", "--cells", "64", "--out", str(a)]) == 0
    assert main(["rough", "--generator", "zero", "--cells", "72", "--out", str(b)]) == 0
    assert main(["compare", str(a), str(b)]) == 5


def test_iterate_zero_field(tmp_path):
    out = tmp_path / "it"
    assert main(["iterate", "--generator", "zero", "--cells", "64", "--out", str(out)]) == 0
    head = (out / "schedule.txt").read_text().splitlines()
    assert head[0].split()[:4] == ["n", "eps_n", "eta_n", "theta_n"] and head[0].endswith("partial_Y")
    assert len(head) == 2
    cert = read_kv(out / "certificate.txt")
    assert all(cert[k] == "true" for k in cert if k.startswith("check."))


def test_diagnose(tmp_path):
    out = tmp_path / "d"
    assert main(["diagnose", "--cells", "64", "--out", str(out)]) == 0
    cert = read_kv(out / "certificate.txt")
    assert float(cert["graph_area"]) >= 1.0
    assert 0 < float(cert["transversality_gap"]) <= 1.0
    assert sum(k.startswith("path.") and k.endswith(".measure") for k in cert) == 10


def test_small_grid_is_too_coarse(tmp_path):
    # one boundary ring of a 32-cell grid is 12% of the square, above the 10% slack
    out = tmp_path / "s"
    assert main(["iterate", "--generator", "zero", "--cells", "32", "--out", str(out)]) == 4
    assert "grid too coarse" in read_kv(out / "metrics.txt")["error"]


def test_forms_grid_too_coarse(tmp_path):
    out = tmp_path / "f"
    assert main(["forms", "--set", "forms.n=32", "--out", str(out)]) == 4
    m = read_kv(out / "metrics.txt")
    assert m["status"] == "FAILED" and "grid too coarse" in m["error"]


def test_budget_failure_exit_code(tmp_path):
    out = tmp_path / "b"
    # theta far below what one affine piece per simplex can deliver
    assert main(["rough", "--cells", "64", "--set", "budgets.theta=1e-9", "--out", str(out)]) in (3, 4)
    assert read_kv(out / "metrics.txt")["status"] == "FAILED"


def test_console_script():
    exe = shutil.which("lusingrad")
    assert exe is not None
    res = subprocess.run([exe, "--help"], capture_output=True, text=True, check=True)
    for mode in ("rough", "iterate", "forms", "diagnose", "compare"):
        assert mode in res.stdout
