import subprocess
import sys

import numpy as np
import pytest

from chartjepa.cli import config_hash, main, parse_angle, resolve
from chartjepa.models import load_checkpoint

SIM = ["--sim.trajectories", "10", "--sim.steps", "40", "--sim.antennas", "2",
       "--sim.subcarriers", "4", "--sim.regions", "4", "--quiet"]
SMALL = ["--model.widths", "16,8", "--model.hidden", "8", "--model.head_hidden", "8",
         "--train.epochs", "2", "--train.horizon", "5", "--train.batch", "32",
         "--train.pretrain_epochs", "2", "--train.pretrain_fraction", "0.5",
         "--train.pretrain_pairs_per_point", "4", "--quiet"]
EVAL = ["--horizons", "5,10", "--regions", "4", "--fit_fraction", "1", "--quiet"]


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["simulate", "--out", str(d / "a.ds"), "--seed", "1", *SIM]) == 0
    assert main(["train", "--dataset", str(d / "a.ds"), "--mode", "adp", "--out",
                 str(d / "m.ckpt"), *SMALL]) == 0
    return d


def test_simulate_writes_dataset_and_manifest(work):
    assert (work / "a.ds").stat().st_size > 0
    manifest = (work / "a.ds.manifest").read_text()
    assert manifest.startswith("CHARTJEPA-MANIFEST v1")
    assert "config_hash" in manifest


def test_zero_steps_is_a_config_error(tmp_path, capsys):
    out = tmp_path / "z.ds"
    assert main(["simulate", "--out", str(out), "--sim.steps", "0", "--quiet"]) == 1
    assert not out.exists()
    assert "sim.steps" in capsys.readouterr().err


def test_missing_input_and_unknown_command(tmp_path):
    assert main(["train", "--dataset", str(tmp_path / "nope.ds"), "--out",
                 str(tmp_path / "m.ckpt")]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["simulate", "--sim.steps", "many"]) == 1
    assert main(["simulate", "--out", str(tmp_path / "no/such/dir/x.ds")]) == 1


def test_bad_config_file(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("sim.nonsense = 3\n")
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "x.ds")]) == 1


def test_config_file_with_flag_override(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("seed = 4\n[sim]\ntrajectories = 3   # short\nsteps = 9\n")
    merged = resolve("simulate", {"sim.steps": "12"}, str(cfg))
    assert merged["seed"] == 4 and merged["sim.trajectories"] == 3 and merged["sim.steps"] == 12
    assert merged["sim.test_every"] == 5


def test_config_hash_ignores_output_paths():
    a = resolve("simulate", {"out": "one.ds"}, None)
    b = resolve("simulate", {"out": "two.ds"}, None)
    c = resolve("simulate", {"seed": "9"}, None)
    assert config_hash("simulate", a) == config_hash("simulate", b) != config_hash("simulate", c)


def test_angle_parsing():
    assert parse_angle("pi/65") == pytest.approx(np.pi / 65)
    assert parse_angle("-pi/65") == pytest.approx(-np.pi / 65)
    assert parse_angle("2*pi/130") == pytest.approx(np.pi / 65)
    assert parse_angle("pi") == pytest.approx(np.pi)
    assert parse_angle("0.01") == 0.01
    with pytest.raises(ValueError):
        parse_angle("tau/2")


def test_reruns_are_byte_identical(tmp_path, work):
    for name in ("b", "c"):
        assert main(["simulate", "--out", str(tmp_path / f"{name}.ds"), "--seed", "1", *SIM]) == 0
    assert (tmp_path / "b.ds").read_bytes() == (tmp_path / "c.ds").read_bytes() == \
        (work / "a.ds").read_bytes()
    for name in ("m1", "m2"):
        assert main(["train", "--dataset", str(work / "a.ds"), "--mode", "adp", "--out",
                     str(tmp_path / f"{name}.ckpt"), *SMALL]) == 0
    assert (tmp_path / "m1.ckpt").read_bytes() == (tmp_path / "m2.ckpt").read_bytes()
    assert (tmp_path / "m1.ckpt").read_bytes() == (work / "m.ckpt").read_bytes()
    assert (tmp_path / "m1.ckpt.log.csv").read_text() == (tmp_path / "m2.ckpt.log.csv").read_text()


def test_log_has_one_row_per_step(work):
    lines = (work / "m.ckpt.log.csv").read_text().splitlines()
    assert lines[0].startswith("# chartjepa")
    ck = load_checkpoint(work / "m.ckpt")
    assert len(lines) - 2 == ck.step > 0


def test_evaluate_outputs(work, capsys):
    prefix = work / "ev"
    assert main(["evaluate", "--dataset", str(work / "a.ds"), "--checkpoint", str(work / "m.ckpt"),
                 "--out", str(prefix), "--horizons", "5,10", "--regions", "4",
                 "--fit_fraction", "1", "--biases", "0,pi/65"]) == 0
    down = (work / "ev.downstream.csv").read_text().splitlines()[2:]
    rollout = [r for r in down if r.startswith("rollout")]
    greedy = [r for r in down if r.startswith("greedy")]
    assert len(rollout) == 4 and len(greedy) == 2
    metrics = (work / "ev.metrics.csv").read_text().splitlines()
    assert metrics[1] == "metric,value,k,n"
    values = {r.split(",")[0]: float(r.split(",")[1]) for r in metrics[2:]}
    assert set(values) == {"ct", "tw", "ks", "rd"}
    assert all(0.0 <= v <= 1.0 for v in values.values())
    emb = (work / "ev.embedding.csv").read_text().splitlines()
    assert emb[1] == "x,y,region,trajectory_id" and len(emb) == 2 + 80
    assert "CT" in capsys.readouterr().out


def test_evaluate_several_checkpoints(work, tmp_path):
    init = tmp_path / "init.ckpt"
    assert main(["pretrain", "--dataset", str(work / "a.ds"), "--mode", "adp", "--out", str(init),
                 *SMALL]) == 0
    assert main(["evaluate", "--dataset", str(work / "a.ds"), "--checkpoint",
                 f"{work / 'm.ckpt'},{init}", "--labels", "full,stage1", "--out",
                 str(tmp_path / "ev"), *EVAL]) == 0
    down = (tmp_path / "ev.downstream.csv").read_text()
    assert "full:rollout" in down and "stage1:greedy" in down and "stage1:rollout" not in down
    assert (tmp_path / "ev.full.embedding.csv").exists()
    assert (tmp_path / "ev.stage1.embedding.csv").exists()
    rows = (tmp_path / "ev.metrics.csv").read_text().splitlines()
    assert rows[1] == "model,metric,value,k,n" and len(rows) == 2 + 8


def test_zero_epochs_from_init_keeps_the_encoder(work, tmp_path):
    init = tmp_path / "s1.ckpt"
    assert main(["pretrain", "--dataset", str(work / "a.ds"), "--mode", "adp", "--out", str(init),
                 *SMALL]) == 0
    out = tmp_path / "m0.ckpt"
    assert main(["train", "--dataset", str(work / "a.ds"), "--init", str(init), "--out", str(out),
                 *SMALL, "--train.epochs", "0"]) == 0
    a, b = load_checkpoint(init), load_checkpoint(out)
    assert all(np.array_equal(a.encoder[k], b.encoder[k]) for k in a.encoder)
    assert b.step == 0


def test_pretrain_modes_differ(work, tmp_path):
    for mode in ("adp", "geodesic"):
        assert main(["pretrain", "--dataset", str(work / "a.ds"), "--mode", mode, "--out",
                     str(tmp_path / f"{mode}.ckpt"), *SMALL, "--train.knn", "30"]) == 0
    assert (tmp_path / "adp.ckpt").read_bytes() != (tmp_path / "geodesic.ckpt").read_bytes()
    report = (tmp_path / "geodesic.ckpt.metrics.csv").read_text()
    assert "ct," in report


def test_disconnected_graph_exits_two(work, tmp_path, capsys):
    code = main(["pretrain", "--dataset", str(work / "a.ds"), "--mode", "geodesic", "--out",
                 str(tmp_path / "g.ckpt"), *SMALL, "--train.knn", "1"])
    assert code == 2
    assert "train.knn" in capsys.readouterr().err


def test_architecture_mismatch_exits_two(work, tmp_path, capsys):
    other = tmp_path / "wide.ds"
    sim = [a if a != "2" else "3" for a in SIM]  # three antennas per array
    assert main(["simulate", "--out", str(other), *sim]) == 0
    code = main(["evaluate", "--dataset", str(other), "--checkpoint", str(work / "m.ckpt"),
                 "--out", str(tmp_path / "ev"), *EVAL])
    assert code == 2
    assert "input features" in capsys.readouterr().err


def test_conflicting_train_options(work, tmp_path):
    assert main(["train", "--dataset", str(work / "a.ds"), "--init", str(work / "m.ckpt"),
                 "--from-scratch", "--out", str(tmp_path / "x.ckpt")]) == 1


def test_predict_writes_a_chart_path(work, tmp_path):
    out = tmp_path / "p.csv"
    assert main(["predict", "--dataset", str(work / "a.ds"), "--checkpoint", str(work / "m.ckpt"),
                 "--start", "3", "--horizon", "12", "--out", str(out), "--quiet"]) == 0
    lines = out.read_text().splitlines()
    assert lines[1] == "step,x,y" and len(lines) == 2 + 13
    assert main(["predict", "--dataset", str(work / "a.ds"), "--checkpoint", str(work / "m.ckpt"),
                 "--start", "35", "--horizon", "12", "--out", str(out)]) == 1


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "chartjepa", "--version"], capture_output=True,
                          text=True)
    assert proc.returncode == 0 and "chartjepa" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "chartjepa", "simulate", "--out",
                           str(tmp_path / "x.ds"), "--sim.trajectories", "0"],
                          capture_output=True, text=True)
    assert proc.returncode == 1 and "error" in proc.stderr
