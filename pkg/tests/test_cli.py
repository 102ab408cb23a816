import json
import os
import struct
import subprocess
import sys

import pytest

from mkvflow import mkvg
from mkvflow.cli import main


@pytest.fixture
def data_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("MKV_DATA_DIR", str(tmp_path))
    return tmp_path


def manifest(d):
    return json.loads((d / "manifest.json").read_text())


def test_verify_trivial(data_dir):
    assert main(["verify", "--suite", "trivial", "--out", "v"]) == 0
    rows = json.loads((data_dir / "v" / "verify_trivial.json").read_text())
    assert rows and all(r["passed"] for r in rows)
    man = manifest(data_dir / "v")
    assert man["status"] == "ok" and man["command"] == "verify"
    assert "verify_trivial.json" in man["outputs"]


def test_kernel_from_json(data_dir):
    (data_dir / "constant.json").write_text(json.dumps({"name": "constant", "cells": 64}))
    code = main(["kernel", "--scenario", str(data_dir / "constant.json"), "--kernel-out", "k.mkvg",
                 "--n-x", "4", "--n-t", "4", "--out", "k"])
    assert code == 0
    path = data_dir / "k" / "k.mkvg"
    buf = path.read_bytes()
    assert buf[:4] == b"MKVG" and struct.unpack_from("<I", buf, 4)[0] == 2
    k = mkvg.read(path)
    assert k["values"].shape == (4, 4, 64)
    mass = k["values"].sum(-1) * (k["hi"][0] - k["lo"][0]) / 64
    assert abs(mass - 1).max() <= 0.01
    man = manifest(data_dir / "k")
    assert len(man["scenario_hash"]) == 64 and man["summary"]["mass_ok"]


def test_example3(data_dir, capsys):
    assert main(["example3", "--out", "e3"]) == 0
    out = capsys.readouterr().out
    for key in ("c1 = 0.954499736104", "c2 = 0.682689492137", "lambda1", "lambda2",
                "residual [W]", "d_phi"):
        assert key in out
    assert (data_dir / "e3" / "flow_W.mkvg").exists()


def test_unknown_scenario(data_dir):
    assert main(["fixpoint", "--scenario", "missing_name", "--out", "u"]) == 2
    assert json.loads((data_dir / "u" / "diagnosis.json").read_text())["error"] == "usage"
    assert manifest(data_dir / "u")["status"] == "usage_error"


def test_bad_params(data_dir):
    (data_dir / "bad.json").write_text(json.dumps({"name": "example4", "params": {"kappa": 3}}))
    assert main(["nfpe", "--scenario", str(data_dir / "bad.json"), "--out", "b"]) == 2
    assert (data_dir / "b" / "diagnosis.json").exists()


def test_argparse_error(data_dir, capsys):
    assert main(["nosuchcommand"]) == 2
    assert main(["norms", "--field", "square"]) == 2


def test_divergent_norm(data_dir):
    code = main(["norms", "--field", "power", "--exponent", "0.5", "--p", "2", "--q", "4",
                 "--out", "n"])
    assert code == 1
    diag = json.loads((data_dir / "n" / "diagnosis.json").read_text())
    assert diag["error"] and manifest(data_dir / "n")["status"] == "failed"


def test_failed_check_diagnosis(data_dir):
    # one Picard step cannot reach tol 1e-12
    code = main(["fixpoint", "--scenario", "example1", "--max-iter", "1", "--tol", "1e-12",
                 "--quiet", "--out", "f"])
    assert code == 1
    assert json.loads((data_dir / "f" / "diagnosis.json").read_text())["error"] == "check_failed"


def test_one_manifest_per_run(data_dir):
    for name in ("a", "b"):
        assert main(["scenarios", "list", "--out", name]) == 0
    for name in ("a", "b"):
        files = os.listdir(data_dir / name)
        assert files.count("manifest.json") == 1


def test_idempotent(data_dir):
    args = ["norms", "--field", "ball", "--T", "0.25,1"]
    assert main(args + ["--out", "r1"]) == 0
    assert main(args + ["--out", "r2"]) == 0
    assert (data_dir / "r1" / "norms.csv").read_bytes() == (data_dir / "r2" / "norms.csv").read_bytes()
    args = ["particles", "--scenario", "constant", "--N", "500", "--record", "0.5", "--seed", "3"]
    assert main(args + ["--out", "p1"]) == 0
    assert main(args + ["--out", "p2"]) == 0
    a = (data_dir / "p1" / "particles_flow.mkvg").read_bytes()
    assert a == (data_dir / "p2" / "particles_flow.mkvg").read_bytes()


def test_absolute_out_ignores_data_dir(data_dir, tmp_path_factory):
    target = tmp_path_factory.mktemp("abs")
    assert main(["scenarios", "show", "ou", "--out", str(target)]) == 0
    assert (target / "ou.json").exists() and not (data_dir / str(target).lstrip("/")).exists()


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "mkvflow", "--version"], capture_output=True,
                         text=True)
    assert res.returncode == 0 and res.stdout.strip()
