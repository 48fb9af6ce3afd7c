import fcntl
import json
import shutil
import subprocess
import sys

import pytest

from gridpredict.cli import main

CONFIG = """
[run]
seed = 5
out = {out}
horizon = 40

[grid]
cases = 1, 2
classes = Low
n_per_cell = 2
n_train = 1

[deep_dmd]
epochs = 2

[stgcn]
m = 24
blocks = 1-4-8, 8-4-8
optimizer = adam
epochs = 1
batches_per_epoch = 2

[sweep]
windows = 24, 50
axis = activation
values = tanh, relu
"""


def write_config(tmp_path, name="run.ini", out="out", body=CONFIG):
    p = tmp_path / name
    p.write_text(body.format(out=out))
    return p


def snapshot(d):
    return {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = write_config(tmp)
    assert main(["simulate", "--config", str(cfg)]) == 0
    assert main(["fit", "--config", str(cfg), "--method", "all"]) == 0
    assert main(["evaluate", "--config", str(cfg)]) == 0
    return tmp, cfg


def test_artifacts(run):
    tmp, _ = run
    out = tmp / "out"
    assert len(list((out / "dataset").glob("*.csv"))) == 4
    for m in ("robust_dmd", "deep_dmd", "stgcn"):
        assert (out / "models" / f"{m}.json").exists()
        assert (out / "models" / f"{m}.log.csv").read_text().startswith("epoch,loss")
    rows = (out / "report" / "report.csv").read_text().splitlines()
    assert len(rows) == 1 + 4 * 2  # persistence plus three models, two cells
    assert not (out / ".lock").exists()


def test_rerun_is_byte_identical(run):
    tmp, _ = run
    cfg = write_config(tmp, "rerun.ini", out="out2")
    for cmd in (["simulate"], ["fit", "--method", "all"], ["evaluate"]):
        assert main(cmd + ["--config", str(cfg)]) == 0
    assert snapshot(tmp / "out") == snapshot(tmp / "out2")


def test_predict(run, capsys):
    tmp, cfg = run
    scen = sorted((tmp / "out" / "dataset").glob("*test*.csv"))[0]
    for method in ("robust-dmd", "stgcn"):
        f = tmp / f"pred_{method}.csv"
        assert main(["predict", "--config", str(cfg), "--method", method, "--scenario", str(scen),
                     "--out-file", str(f)]) == 0
        lines = f.read_text().splitlines()
        assert len(lines) == 41
    # 500 steps at 50/s cover 10 s after the origin
    f = tmp / "pred_long.csv"
    assert main(["predict", "--config", str(cfg), "--method", "robust-dmd", "--scenario", str(scen),
                 "--horizon", "500", "--out-file", str(f)]) == 0
    rows = f.read_text().splitlines()
    t_first, t_last = float(rows[1].split(",")[0]), float(rows[-1].split(",")[0])
    assert len(rows) == 501 and t_last - t_first == pytest.approx(9.98)
    f = tmp / "pred_empty.csv"
    assert main(["predict", "--config", str(cfg), "--method", "stgcn", "--scenario", str(scen),
                 "--horizon", "0", "--out-file", str(f)]) == 0
    assert f.read_text().splitlines() == ["time," + ",".join(f"freq_{b}" for b in range(1, 10))]


def test_predict_bus_mismatch(run, capsys):
    tmp, cfg = run
    scen = sorted((tmp / "out" / "dataset").glob("*test*.csv"))[0]
    lines = scen.read_text().splitlines()
    cut = tmp / "eight_buses.csv"
    cut.write_text("\n".join(",".join(r.split(",")[:9]) for r in lines) + "\n")
    for method in ("stgcn", "robust-dmd"):
        assert main(["predict", "--config", str(cfg), "--method", method, "--scenario", str(cut)]) == 1
        assert "model" in capsys.readouterr().err


def test_evaluate_refuses_other_dataset(run, tmp_path):
    tmp, _ = run
    shutil.copytree(tmp / "out", tmp_path / "out")
    cfg = write_config(tmp_path)
    ds = tmp_path / "out" / "dataset"
    # regenerate the dataset with another seed; models now refer to stale hashes
    assert main(["simulate", "--config", str(cfg), "--seed", "6"]) == 0
    assert main(["evaluate", "--config", str(cfg)]) == 1
    # a tampered file fails manifest verification
    assert main(["simulate", "--config", str(cfg)]) == 0
    f = sorted(ds.glob("*.csv"))[0]
    f.write_text(f.read_text() + "\n")
    assert main(["evaluate", "--config", str(cfg)]) == 1


def test_smoke_config_single_file(tmp_path):
    body = CONFIG.replace("cases = 1, 2", "cases = 3").replace("n_per_cell = 2", "n_per_cell = 1").replace(
        "n_train = 1", "n_train = 0")
    cfg = write_config(tmp_path, body=body)
    assert main(["simulate", "--config", str(cfg)]) == 0
    assert len(list((tmp_path / "out" / "dataset").glob("*.csv"))) == 1


def test_exit_codes(tmp_path, capsys):
    assert main(["fit", "--config", str(tmp_path / "none.ini"), "--method", "stgcn"]) == 1
    cfg = write_config(tmp_path)
    assert main(["fit", "--config", str(cfg), "--method", "stgcn"]) == 1  # no dataset yet
    assert main(["fit", "--config", str(cfg), "--method", "lstm"]) == 1
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 1


def test_lock_blocks_second_command(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "out"
    out.mkdir()
    with open(out / ".lock", "w") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        assert main(["simulate", "--config", str(cfg)]) == 1
    assert main(["simulate", "--config", str(cfg)]) == 0


def test_sweeps(run):
    tmp, _ = run
    cfg = write_config(tmp, "sweep.ini", out="out_sweep")
    shutil.copytree(tmp / "out" / "dataset", tmp / "out_sweep" / "dataset")
    assert main(["sweep", "--config", str(cfg), "--method", "stgcn"]) == 0
    rows = (tmp / "out_sweep" / "sweep" / "window.csv").read_text().splitlines()
    assert rows[0].startswith("M,seconds") and len(rows) == 3
    assert main(["sweep", "--config", str(cfg), "--method", "deep-dmd"]) == 0
    rows = (tmp / "out_sweep" / "sweep" / "deep_dmd_activation.csv").read_text().splitlines()
    assert [r.split(",")[1] for r in rows[1:]] == ["tanh", "relu"]


def test_gradcheck_command():
    ok = subprocess.run([sys.executable, "-m", "gridpredict.cli", "gradcheck"], capture_output=True, text=True)
    assert ok.returncode == 0 and ok.stdout.count("PASS") == 12
    bad = subprocess.run([sys.executable, "-m", "gridpredict.cli", "gradcheck", "--wrong-sign"],
                         capture_output=True, text=True)
    assert bad.returncode == 2 and "FAIL" in bad.stdout
