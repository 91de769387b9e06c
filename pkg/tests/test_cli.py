import re
import shutil
import subprocess
import sys
from pathlib import Path

import pytest

from funnelkit import cli
from funnelkit.fungen import Certificate

ROOT = Path(__file__).resolve().parents[1]
CERTS = ROOT / "certificates"

LINEAR_CONFIG = """\
[model]
name = first_order

[region]
names = x_r u_r
nominal = 0 0
expand_lo = -0.5 -0.5
expand_hi = 0.5 0.5
max_lo = -1 -1
max_hi = 1 1

[degrees]
V = {vdeg}

[search]
mode = fixed
p = 1
"""


def run(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_odd_degree_names_file_and_line(tmp_path, capsys):
    cfg = tmp_path / "odd.ini"
    cfg.write_text(LINEAR_CONFIG.format(vdeg=3))
    code, _, err = run(["synth", "--config", str(cfg), "--out-dir", str(tmp_path)], capsys)
    assert code == cli.EXIT_ERROR
    line = LINEAR_CONFIG.splitlines().index("V = {vdeg}") + 1
    assert f"{cfg}:{line}" in err
    assert "even" in err


def test_fixed_synth_writes_certificate(tmp_path, capsys):
    cfg = tmp_path / "lin.ini"
    cfg.write_text(LINEAR_CONFIG.format(vdeg=2))
    code, out, _ = run(["synth", "--config", str(cfg), "--out-dir", str(tmp_path)], capsys)
    assert code == cli.EXIT_OK
    cert = Certificate.load(tmp_path / "lin.cert")
    assert cert.gamma < 0
    assert (tmp_path / "lin_log.csv").read_text().startswith("tag,round,step")


def test_unknown_degree_key(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text(LINEAR_CONFIG.format(vdeg=2).replace("V = 2", "V = 2\nfoo = 1"))
    code, _, err = run(["synth", "--config", str(cfg)], capsys)
    assert code == cli.EXIT_ERROR
    assert re.search(r"bad\.ini:\d+: \[degrees\] foo", err)


def test_missing_config_is_error(tmp_path, capsys):
    code, _, err = run(["synth", "--config", str(tmp_path / "none.ini")], capsys)
    assert code == cli.EXIT_ERROR and "cannot read" in err


def test_corrupt_beta_rejected(tmp_path, capsys):
    text = (CERTS / "pendulum_region1.cert").read_text().replace("beta = 1.0", "beta = x")
    bad = tmp_path / "bad.cert"
    bad.write_text(text)
    code, _, err = run(["verify", str(bad), "--trials", "0"], capsys)
    assert code == cli.EXIT_ERROR
    assert "beta" in err


def test_audit_only_mode(capsys, tmp_path):
    code, out, _ = run(["verify", str(CERTS / "pendulum_region1.cert"), "--trials", "0",
                        "--out-dir", str(tmp_path)], capsys)
    assert code == cli.EXIT_OK
    assert "sampling audit only" in out
    assert not list(tmp_path.iterdir())


def test_verify_fails_on_doubled_level(tmp_path, capsys):
    text = (CERTS / "pendulum_region1.cert").read_text().replace("beta = 1.0", "beta = 2.0")
    p = tmp_path / "double.cert"
    p.write_text(text)
    code, out, _ = run(["verify", str(p), "--trials", "0"], capsys)
    assert code == cli.EXIT_FAIL
    assert "FAIL" in out


def test_verify_csv_idempotent(tmp_path, capsys):
    for d in ("a", "b"):
        code, _, _ = run(["verify", str(CERTS / "nominal_only.cert"), "--trials", "20",
                          "--audit-points", "2000", "--out-dir", str(tmp_path / d)], capsys)
        assert code == cli.EXIT_OK
    a = (tmp_path / "a" / "nominal_only_mc.csv").read_text()
    b = (tmp_path / "b" / "nominal_only_mc.csv").read_text()
    assert a == b
    assert a.splitlines()[0] == "trial,worst_margin,t_worst,reference_target,disturbance"
    assert len(a.splitlines()) == 21


def test_plan_without_obstacles(tmp_path, capsys):
    sc = tmp_path / "straight.ini"
    text = (ROOT / "scenarios" / "bicycle_straight.ini").read_text()
    sc.write_text(text.replace("../certificates/", str(CERTS) + "/"))
    code, out, _ = run(["plan", "--config", str(sc), "--out-dir", str(tmp_path)], capsys)
    assert code == cli.EXIT_OK
    assert "1 segments" in out and "switch times []" in out
    assert (tmp_path / "straight.plan").exists()
    code, out, _ = run(["plot", str(tmp_path / "straight.plan"), "--out-dir", str(tmp_path)], capsys)
    assert code == cli.EXIT_OK
    first = (tmp_path / "straight.svg").read_text()
    run(["plot", str(tmp_path / "straight.plan"), "--out-dir", str(tmp_path)], capsys)
    assert (tmp_path / "straight.svg").read_text() == first


def test_plan_missing_certificate(tmp_path, capsys):
    sc = tmp_path / "s.ini"
    sc.write_text((ROOT / "scenarios" / "bicycle_straight.ini").read_text())
    code, _, err = run(["plan", "--config", str(sc)], capsys)
    assert code == cli.EXIT_ERROR
    assert re.search(r"s\.ini:\d+: \[certificates\] maneuver", err)


def test_bad_threads(capsys):
    code, _, err = run(["verify", str(CERTS / "nominal_only.cert"), "--threads", "0"], capsys)
    assert code == cli.EXIT_ERROR


def test_console_script_help():
    exe = shutil.which("funnelkit")
    cmd = [exe] if exe else [sys.executable, "-m", "funnelkit.cli"]
    r = subprocess.run(cmd + ["--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for c in ("synth", "verify", "plan", "plot"):
        assert c in r.stdout
