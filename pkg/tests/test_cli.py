import json
import shutil
import subprocess
import sys
from pathlib import Path

import pytest

from merton_tc.cli import EXIT_ASSERT, EXIT_ERROR, EXIT_OK, build_parser, main

QUICK = Path(__file__).resolve().parents[1] / "configs" / "p0_quick.json"


def _checks(out):
    return json.loads((out / "checks.json").read_text())


@pytest.mark.parametrize("cmd, files", [
    ("merton", ["merton_closed_form.csv", "merton_fd.csv"]),
    ("corrector", ["wbar.csv", "second_corrector.csv", "corrector.json"]),
    ("residual", ["residual.json"]),
    ("ergodic", ["band_curve.csv", "ergodic.json"]),
    ("hjb", ["solution.csv", "boundaries.csv", "metadata.json"]),
    ("subsolution", ["subsolution.json"]),
    ("expand", ["expansion.csv", "expansion.json"]),
])
def test_subcommands_pass(tmp_path, cmd, files, capsys):
    assert main([cmd, "--config", str(QUICK), "--out", str(tmp_path)]) == EXIT_OK
    for f in files:
        assert (tmp_path / f).exists()
    payload = _checks(tmp_path)
    assert payload["command"] == cmd and all(c["passed"] for c in payload["checks"])
    printed = capsys.readouterr().out
    assert "PASS" in printed and "FAIL" not in printed


def test_seed_override(tmp_path):
    main(["ergodic", "--config", str(QUICK), "--out", str(tmp_path / "a"), "--seed", "99"])
    assert _checks(tmp_path / "a")["seed"] == 99
    main(["ergodic", "--config", str(QUICK), "--out", str(tmp_path / "b")])
    assert _checks(tmp_path / "b")["seed"] == 7


def test_same_seed_same_outputs(tmp_path):
    for d in "ab":
        main(["ergodic", "--config", str(QUICK), "--out", str(tmp_path / d), "--seed", "5"])
    assert (tmp_path / "a/band_curve.csv").read_bytes() == (tmp_path / "b/band_curve.csv").read_bytes()


def test_failed_assertion_gives_nonzero_exit(tmp_path):
    cfg = json.loads(QUICK.read_text())
    cfg["subsolution"]["K"] = 0.0
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    assert main(["subsolution", "--config", str(path), "--out", str(tmp_path / "o")]) == EXIT_ASSERT
    cfg["subsolution"]["expect_pass"] = False
    path.write_text(json.dumps(cfg))
    assert main(["subsolution", "--config", str(path), "--out", str(tmp_path / "o")]) == EXIT_OK


def test_bad_config_gives_error_exit(tmp_path, capsys):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"model": {"r": 0.02}}))
    assert main(["merton", "--config", str(path), "--out", str(tmp_path)]) == EXIT_ERROR
    assert "error" in capsys.readouterr().err
    cfg = json.loads(QUICK.read_text())
    cfg["hjb"]["bogus"] = 1
    path.write_text(json.dumps(cfg))
    assert main(["hjb", "--config", str(path), "--out", str(tmp_path)]) == EXIT_ERROR


def test_zero_cost_config(tmp_path):
    cfg = json.loads(QUICK.read_text())
    cfg["model"].update(lambda_buy=0.0, lambda_sell=0.0)
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    for cmd in ("residual", "expand", "subsolution"):
        assert main([cmd, "--config", str(path), "--out", str(tmp_path / cmd)]) == EXIT_OK, cmd


def test_parser_requires_config():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["hjb", "--out", "x"])


def test_console_script(tmp_path):
    exe = shutil.which("merton-tc")
    cmd = [exe] if exe else [sys.executable, "-m", "merton_tc.cli"]
    res = subprocess.run(cmd + ["residual", "--config", str(QUICK), "--out", str(tmp_path)],
                         capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert res.stdout.startswith("PASS")
