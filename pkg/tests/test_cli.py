import json
import subprocess
import sys

import pytest

from sglab.cli import OUTPUT_ENV, execute, main, verify
from sglab.config import build, parse_text

SMALL = "kind = gff-extremes\nseed = 5\nn = 64\nsamples = 10\nthreshold = -2\nh0 = -2\nh1 = -1.8\n"


def write_cfg(tmp_path, text, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_double_run_gives_identical_points(tmp_path, monkeypatch):
    cfg = write_cfg(tmp_path, SMALL)
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "a"))
    assert main(["run", str(cfg)]) == 0
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "b"))
    assert main(["run", str(cfg)]) == 0
    a = json.loads((tmp_path / "a" / "manifest.json").read_text())
    b = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert a["files"] == b["files"]
    pts = sorted((tmp_path / "a" / "points").iterdir())
    assert len(pts) == 10
    for p in pts:
        assert p.read_bytes() == (tmp_path / "b" / "points" / p.name).read_bytes()
    assert a["rng_streams"]["root_seed"] == 5


def test_worker_count_does_not_change_checksums(tmp_path):
    one = execute(build(parse_text(SMALL)), tmp_path / "w1")
    two = execute(build(parse_text(SMALL), ["workers=2"]), tmp_path / "w2")
    assert one["files"] == two["files"]


def test_invalid_beta_exits_2(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "kind = sg-extremes\nseed = 1\nn = 16\nbeta = 21.991148575128552\n")
    assert main(["run", str(cfg)]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["exit_code"] == 2 and err["message"] == "beta out of range (0, 6π)"


def test_missing_config_is_io_failure(tmp_path, capsys):
    assert main(["run", str(tmp_path / "absent.cfg")]) == 4
    assert json.loads(capsys.readouterr().err)["error"] == "io_failure"


def test_numerical_abort_exits_3(tmp_path, capsys, monkeypatch):
    import sglab.cli as cli
    from sglab.sinegordon import NumericalError

    def boom(cfg, out):
        raise NumericalError("gradient estimator above ceiling")

    monkeypatch.setitem(cli.RUNNERS, "gff-extremes", boom)
    cfg = write_cfg(tmp_path, SMALL)
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "out"))
    assert main(["run", str(cfg)]) == 3
    assert json.loads(capsys.readouterr().err)["error"] == "numerical_abort"


def test_verify_detects_tampering(tmp_path, capsys):
    execute(build(parse_text(SMALL)), tmp_path)
    manifest = tmp_path / "manifest.json"
    assert verify(manifest, rerun=True) == []
    assert main(["verify", str(manifest)]) == 0
    victim = sorted((tmp_path / "points").iterdir())[0]
    victim.write_text(victim.read_text() + "\n")
    assert main(["verify", str(manifest)]) == 1
    assert "checksum mismatch" in capsys.readouterr().out
    victim.unlink()
    assert any(p.startswith("missing") for p in verify(manifest))


def test_overrides_reach_the_config_echo(tmp_path, monkeypatch):
    cfg = write_cfg(tmp_path, SMALL)
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "o"))
    assert main(["run", str(cfg), "--override", "samples=3"]) == 0
    m = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert m["config"]["samples"] == 3
    assert "report.json" in m["files"] and "config.txt" in m["files"]


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "sglab.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "verify" in proc.stdout


@pytest.mark.parametrize("argv", [[], ["frobnicate"]])
def test_bad_usage(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 2
