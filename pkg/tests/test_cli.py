import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from ckelab.cli import main
from ckelab.continuation import ContinuationTrace
from ckelab.harness import bl1p2_split, decomposition_search


def _report(d):
    return json.loads((d / "report.json").read_text())


def _write(tmp_path, cfg):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg))
    return str(p)


def test_solve_exact_start(tmp_path):
    out = tmp_path / "s"
    assert main(["solve", "--config", "p1xp1-product-1.2-0.6", "--out", str(out)]) == 0
    rep = _report(out)
    assert rep["cke_residual"] < 1e-8
    man = json.loads((out / "manifest.json").read_text())
    assert {"config", "versions", "grid", "tolerances", "norm_convention", "seed"} <= set(man)
    assert (out / "checkpoint.npz").exists() and list((out / "fields").glob("*.txt"))


def test_solve_obstructed(tmp_path):
    out = tmp_path / "b"
    assert main(["solve", "--config", "bl1p2-anticanonical", "--out", str(out)]) == 2
    rep = _report(out)
    assert rep["status"] == "NoConvergence" and rep["reason"]


def test_malformed_config(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text('{"model": "P1",}')
    assert main(["solve", "--config", str(p), "--out", str(tmp_path / "x")]) == 1
    assert "bad.json:1" in capsys.readouterr().err


def test_bad_flags(tmp_path):
    args = ["solve", "--config", "p1-trivial-0.3-0.7", "--out", str(tmp_path)]
    assert main(args + ["--tol-newton", "-1"]) == 1
    assert main(args + ["--jobs", "0"]) == 1
    assert main(args + ["--resolution", "2"]) == 1


def test_deform_symmetric_flags_every_t(tmp_path):
    out = tmp_path / "d"
    assert main(["deform", "--config", "p1-trivial-0.3-0.7", "--out", str(out)]) == 0
    rep = _report(out)
    rows = list(csv.DictReader(open(out / "trace.csv")))
    assert len(rep["cke_found"]) == len(rows) == 11
    assert all(f["cke_residual"] < 1e-7 for f in rep["cke_found"])
    assert rep["expansion"]["zero_at_resolution"]
    assert len(list((out / "fields").glob("phi_t*.txt"))) == 11


def test_deform_trace_free_product(tmp_path):
    out = tmp_path / "tf"
    assert main(["deform", "--config", "p1xp1-trivial-half", "--out", str(out), "--resolution", "10"]) == 0
    rep = _report(out)
    assert "expansion" in rep and rep["expansion"]["zero_at_resolution"]
    assert rep["predicted_order4"] < 1e-20


def test_deform_beyond_cone(tmp_path):
    cfg = {"model": "P1", "decomposition": {"type": "scaled", "lambdas": ["3/10", "7/10"]},
           "eta": {"scaling": [1, -1]}, "t_grid": {"min": 0, "max": 5, "count": 6}, "resolution": 16}
    out = tmp_path / "c"
    assert main(["deform", "--config", _write(tmp_path, cfg), "--out", str(out)]) == 2
    rep = _report(out)
    assert rep["failure"]["status"] == "NotKaehler"
    assert rep["reached"] < 5


def test_deform_jobs_fan_out(tmp_path):
    cfg = {"model": "P1", "decomposition": {"type": "scaled", "lambdas": ["3/10", "7/10"]},
           "eta": [{"scaling": [1, -1]}, {"scaling": [-1, 1]}],
           "t_grid": {"min": 0, "max": 0.02, "count": 3}, "resolution": 16}
    path = _write(tmp_path, cfg)
    assert main(["deform", "--config", path, "--out", str(tmp_path / "j2"), "--jobs", "2"]) == 0
    assert main(["deform", "--config", path, "--out", str(tmp_path / "j1")]) == 0
    for k in range(2):
        a = (tmp_path / "j2" / f"eta-{k}" / "trace.csv").read_bytes()
        b = (tmp_path / "j1" / f"eta-{k}" / "trace.csv").read_bytes()
        assert a == b
    assert len(_report(tmp_path / "j2")["directions"]) == 2


def test_futaki_exact_and_obstructed(tmp_path):
    assert main(["futaki", "--config", "p1xp1-product-1.2-0.6", "--out", str(tmp_path / "f0")]) == 0
    assert all(abs(r["futaki"]) < 1e-8 for r in _report(tmp_path / "f0")["values"])
    assert main(["futaki", "--config", "bl1p2-anticanonical", "--out", str(tmp_path / "f1")]) == 0
    for r in _report(tmp_path / "f1")["values"]:
        assert abs(r["futaki"] - r["barycenter"]) < 1e-10
        assert r["defect"] < 1e-6 * abs(r["futaki"])
    assert (tmp_path / "f1" / "futaki.csv").exists()


def test_kernel_report(tmp_path):
    out = tmp_path / "k"
    assert main(["kernel", "--config", "p1xp1-product-1.2-0.6", "--out", str(out), "--resolution", "12"]) == 0
    rep = _report(out)
    assert rep["d"] == 4 and rep["passed"]


def test_expand_synthetic(tmp_path):
    ts = np.geomspace(1e-3, 1e-1, 12)
    ContinuationTrace.synthetic(ts, 3 * ts**2 + ts**3).to_csv(tmp_path / "syn.csv")
    out = tmp_path / "e"
    assert main(["expand", "--config", "p1-trivial-0.3-0.7", "--trace", str(tmp_path / "syn.csv"),
                 "--out", str(out), "--tol-newton", "1e-30"]) == 0
    ex = _report(out)["expansion"]
    assert abs(ex["order"] - 2) < 0.05 and abs(ex["coefficient"] - 3) < 0.03


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "ckelab", "solve", "--config", "p1-trivial-0.3-0.7",
                        "--out", str(tmp_path)], capture_output=True)
    assert r.returncode == 0


def test_bl1_split_keeps_barycenter():
    dec = bl1p2_split("3/2", "1/2")
    assert np.allclose(dec.barycenters().sum(axis=0), [1 / 12, -1 / 6])


def test_decomposition_search_small():
    res = decomposition_search(M=10, max_iter=20, splits=[("3/2", "1/2")])
    assert res["candidates"][-1]["status"] == "UnsupportedGeometry"
    assert not res["exercised"]
