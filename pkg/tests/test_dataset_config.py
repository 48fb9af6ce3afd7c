import json

import numpy as np
import pytest

from gridpredict.config import TRAIN_START, load_config, with_overrides
from gridpredict.dataset import load_dataset, read_series_csv, series_to_csv, verify_manifest, write_dataset
from gridpredict.errors import ConfigError, ValidationError
from gridpredict.grid import default_network
from gridpredict.simulator import default_params, generate_grid, simulate_scenarios

G9 = default_network()


@pytest.fixture(scope="module")
def small():
    scen = generate_grid(G9, 2, seed=1, n_train=1, cases=(1,), classes=("Low",))
    return scen, simulate_scenarios(G9, default_params(G9), scen, 2.0)


def test_csv_roundtrip_exact(tmp_path, small):
    _, series = small
    p = tmp_path / "s.csv"
    p.write_text(series_to_csv(series[0]))
    assert p.read_text().splitlines()[0].startswith("time,freq_1,freq_2")
    back = read_series_csv(p)
    np.testing.assert_array_equal(back.values, series[0].values)
    assert back.sample_rate == 50.0 and back.channel_labels == series[0].channel_labels


def test_column_mapping_import(tmp_path):
    p = tmp_path / "ext.csv"
    p.write_text("t,V_B2,F_B2,F_B1,V_B1,junk\n0.0,1.0,60.0,60.1,1.01,9\n0.02,1.0,60.01,60.1,1.01,9\n")
    s = read_series_csv(p, {"F_B1": "freq_1", "F_B2": "freq_2", "V_B1": "vmag_1", "V_B2": "vmag_2"}, "t")
    assert s.channel_labels == ("freq_1", "freq_2", "vmag_1", "vmag_2")
    np.testing.assert_array_equal(s.values[1], [60.1, 60.01, 1.01, 1.0])
    with pytest.raises(ValidationError):
        read_series_csv(p, {"F_B9": "freq_9"}, "t")


def test_dataset_manifest(tmp_path, small):
    scen, series = small
    m = write_dataset(tmp_path / "d", scen, series, {"seed": 1})
    assert len(m["files"]) == 4
    assert verify_manifest(tmp_path / "d") == m
    sc, s = load_dataset(tmp_path / "d", split="train")
    assert [x.split for x in sc] == ["train"] and len(s) == 1
    side = json.loads((tmp_path / "d" / f"{scen[0].name}.json").read_text())
    assert side["sample_rate"] == 50.0 and side["scenario"]["case_index"] == 1
    csv = tmp_path / "d" / f"{scen[0].name}.csv"
    csv.write_text(csv.read_text().replace("60.0", "60.5", 1))
    with pytest.raises(ValidationError):
        verify_manifest(tmp_path / "d")
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "missing")


def test_load_config(tmp_path):
    net = tmp_path / "net.txt"
    from gridpredict.grid import write_edge_list

    write_edge_list(G9, net)
    cfg_path = tmp_path / "run.ini"
    cfg_path.write_text(
        "[run]\nseed = 4\nout = runs/x\nnetwork = net.txt\nhorizon = 100\n"
        "[grid]\ncases = 1, 3\nclasses = Low, High\nn_per_cell = 3\nn_train = 1\n"
        "[robust_dmd]\nlambda1 = 0.02\n"
        "[deep_dmd]\nhidden = 8, 8\nepochs = 5\naffine = false\n"
        "[stgcn]\nm = 50\nblocks = 1-4-8, 8-4-8\noptimizer = adam\n"
        "[sweep]\nwindows = 50, 100\n"
    )
    cfg = load_config(cfg_path)
    assert cfg.seed == 4 and cfg.out == (tmp_path / "runs/x").resolve()
    assert cfg.grid.cases == (1, 3) and cfg.grid.classes == ("Low", "High")
    assert cfg.lambda1 == 0.02 and cfg.deep_dmd.hidden == (8, 8) and cfg.deep_dmd.affine is False
    assert cfg.stgcn.M == 50 and cfg.stgcn.blocks == ((1, 4, 8), (8, 4, 8))
    assert cfg.stgcn.train_start == TRAIN_START == 13
    assert cfg.graph() == G9
    assert cfg.dataset_dir == cfg.out / "dataset"
    o = with_overrides(cfg, seed=9, out=tmp_path / "y", horizon=0)
    assert (o.seed, o.horizon, o.out) == (9, 0, (tmp_path / "y").resolve())


@pytest.mark.parametrize("text", [
    "[run]\nout = x\n",
    "[run]\nseed = 1\n",
    "[run]\nseed = 1\nout = x\n[extra]\na = 1\n",
    "[run]\nseed = 1\nout = x\ncolour = red\n",
    "[run]\nseed = one\nout = x\n",
    "[run]\nseed = 1\nout = x\n[grid]\nclasses = Huge\n",
    "[run]\nseed = 1\nout = x\n[stgcn]\nm = 4\n",
    "[run]\nseed = 1\nout = x\nnetwork = nowhere.txt\n",
])
def test_config_errors(tmp_path, text):
    p = tmp_path / "bad.ini"
    p.write_text(text)
    with pytest.raises(ConfigError):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.ini")
