import json
import subprocess
import sys

from gsconv.cli import main
from gsconv.network import make_spec

SMALL = ["--task", "local", "--dims", "16,16,16"]


def _spec_file(tmp_path, insert="csc"):
    spec = make_spec(1, 3, channels=(8, 16), groups=[(2, 2, 1), (2, 2, 2)], insert=insert)
    path = tmp_path / f"spec_{insert}.json"
    spec.save(path)
    return path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_verify_gs_grid(capsys):
    code, out, _ = run(capsys, "verify-gs")
    assert code == 0
    assert out.strip().endswith("cases passed") and "FAIL" not in out


def test_verify_gs_fault_injection(capsys):
    code, out, _ = run(capsys, "verify-gs", "--inject-fault")
    assert code == 1 and "FAIL" in out


def test_verify_gs_bad_axis(capsys):
    code, _, err = run(capsys, "verify-gs", "--no-grid", "--dims", "1,5,4,4,8", "--groups", "2,1,1", "--cg", "1")
    assert code == 1
    assert err.startswith("gsconv: config-error:") and "axis D" in err and err.count("\n") == 1


def test_verify_gs_user_case(capsys):
    code, out, _ = run(capsys, "verify-gs", "--no-grid", "--dims", "2,4,4,4,8", "--groups", "2,2,1", "--cg", "2", "--cs", "8")
    assert code == 0 and "1/1 cases passed" in out


def test_gen_writes_manifest(tmp_path, capsys):
    code, _, _ = run(capsys, "gen", *SMALL, "--count", "3", "--out", tmp_path / "d", "--seed", "5")
    assert code == 0
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert manifest["task"]["seed"] == 5 and len(manifest["samples"]) == 3


def test_train_deterministic_and_eval(tmp_path, capsys):
    spec = _spec_file(tmp_path)
    args = ["train", *SMALL, "--count", "6", "--spec", spec, "--iters", "6", "--log-every", "3", "--batch", "2", "--seed", "2"]
    assert run(capsys, *args, "--out", tmp_path / "a")[0] == 0
    assert run(capsys, *args, "--out", tmp_path / "b")[0] == 0
    a = (tmp_path / "a" / "metrics.csv").read_text()
    assert a == (tmp_path / "b" / "metrics.csv").read_text()
    assert a.splitlines()[0] == "iter,loss,dice_class1,dice_class2,mDice,lr"
    assert (tmp_path / "a" / "checkpoint.gsck").read_bytes() == (tmp_path / "b" / "checkpoint.gsck").read_bytes()
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["seed"] == 2 and manifest["train_config"]["max_iters"] == 6

    ev = ["eval", *SMALL, "--count", "4", "--checkpoint", tmp_path / "a" / "checkpoint.gsck"]
    code, out1, _ = run(capsys, *ev)
    assert code == 0
    mdice = float(out1.strip().splitlines()[-1].split("=")[1])
    assert 0 <= mdice <= 1
    assert run(capsys, *ev)[1] == out1

    code, _, err = run(capsys, *ev, "--spec", _spec_file(tmp_path, "ccs"))
    assert code == 1 and err.startswith("gsconv: config-error:")


def test_train_missing_spec_is_io_error(tmp_path, capsys):
    code, _, err = run(capsys, "train", *SMALL, "--spec", tmp_path / "nope.json", "--out", tmp_path / "o", "--iters", "1")
    assert code == 1 and err.startswith("gsconv: io-error:")


def test_flag_overrides_spec(tmp_path, capsys):
    spec = make_spec(4, 3, insert="none")
    path = tmp_path / "s.json"
    spec.save(path)
    code, out, _ = run(capsys, "profile", "--spec", path, "--preset", "prosgv3", "--insert", "csc", "--input", "1,16,128,128,4")
    assert code == 0
    assert ",gs," in out


def test_profile_baseline(tmp_path, capsys):
    code, _, _ = run(capsys, "profile", "--input", "1,64,128,128,4", "--baseline", "conv3", "--out", tmp_path / "p.csv")
    assert code == 0
    text = (tmp_path / "p.csv").read_text()
    assert text.startswith("# FLOPs: 1 MAC = 2 FLOPs")
    rows = [l.split(",") for l in text.splitlines()[2:]]
    assert all(r[5] == "27.0000" for r in rows if r[1] == "pointwise/conv3")
    code, out, _ = run(capsys, "profile", "--input", "1,64,128,128,4", "--baseline", "conv3", "--format", "text")
    assert code == 0 and "TOTAL" in out


def test_bench_schema(capsys):
    argv = ["bench", "--dims", "1,8,8,8,16", "--reps", "2"]
    code, out, _ = run(capsys, *argv)
    assert code == 0
    a = json.loads(out)
    assert set(a) == {"dims", "groups", "c_g", "c_s", "elements", "table_ns_per_element",
                      "naive_ns_per_element", "speedup", "equal"}
    assert a["equal"] is True and a["c_s"] == 8
    b = json.loads(run(capsys, *argv)[1])
    assert set(a) == set(b)
    assert {k: v for k, v in a.items() if "ns" not in k and k != "speedup"} == \
           {k: v for k, v in b.items() if "ns" not in k and k != "speedup"}


def test_usage_error_is_single_line():
    res = subprocess.run([sys.executable, "-m", "gsconv", "profile"], capture_output=True, text=True)
    assert res.returncode == 2
    assert res.stderr.startswith("gsconv: usage-error:") and res.stderr.count("\n") == 1
