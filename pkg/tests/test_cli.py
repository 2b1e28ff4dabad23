import csv
import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from oracles import single_view_floater
from ocsplat import cli
from ocsplat.losses import psnr
from ocsplat.oc import ObservationStats
from ocsplat.scene import load_dataset, read_document, write_document
from ocsplat.trainer import TrainConfig, Trainer

GOLDEN = Path(__file__).parent / "golden"
GEN = ["--views", "24", "--width", "48", "--gaussians", "60", "--test-views", "3"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("gen", "--out", root / "data", "--seed", 5, *GEN) == 0
    ds = root / "data" / "dataset.json"
    assert run("train", "--dataset", ds, "--out", root / "run", "--iters", 240, "--eval-every", 48) == 0
    return root, ds, root / "run"


def test_csv_headers_match_golden(trained, tmp_path):
    root, ds, out = trained
    assert run("eval", "--checkpoint", out / "checkpoint.json", "--dataset", ds, "--out", tmp_path) == 0
    assert run("export-oc", "--checkpoint", out / "checkpoint.json", "--dataset", ds, "--out", tmp_path) == 0
    golden = json.loads((GOLDEN / "csv_headers.json").read_text())
    for name, header in golden.items():
        path = (out if name == "train_metrics.csv" else tmp_path) / name.replace("train_", "")
        assert path.read_text().splitlines()[0] == header, name


def test_train_writes_artifacts(trained):
    _, ds, out = trained
    rows = _rows(out / "metrics.csv")
    assert [int(r["iter"]) for r in rows] == [48, 96, 144, 192, 240]
    renders = sorted((out / "renders").iterdir())
    assert len(renders) == len(load_dataset(ds).test_views)
    assert cli.read_image(renders[0]).shape == (48, 3)


def test_eval_reproduces_last_training_row(trained, tmp_path):
    _, ds, out = trained
    assert run("eval", "--checkpoint", out / "checkpoint.json", "--dataset", ds, "--out", tmp_path, "--maps") == 0
    assert _rows(tmp_path / "metrics.csv")[0] == _rows(out / "metrics.csv")[-1]
    assert (tmp_path / "anchors.csv").exists()
    maps = sorted((tmp_path / "maps").iterdir())
    assert len(maps) == 24 * len(cli.MAP_NAMES)
    ocr = np.loadtxt(tmp_path / "maps" / "view_000_ocr.txt")
    assert ocr.shape == (48,) and np.all((ocr >= 0) & (ocr <= 1))


def test_render_matches_eval_psnr(trained, tmp_path):
    _, ds, out = trained
    data = load_dataset(ds)
    trainer = Trainer.from_checkpoint(read_document(out / "checkpoint.json"), data)
    per_view = trainer.evaluate()["psnr_per_view"]
    for j in range(len(data.test_views)):
        assert run("render", "--checkpoint", out / "checkpoint.json", "--dataset", ds, "--out", tmp_path,
                   "--view", j) == 0
        img = cli.read_image(tmp_path / f"test_{j:03d}.txt")
        assert psnr(img, data.test_views[j].image) == per_view[j]
        assert np.loadtxt(tmp_path / f"test_{j:03d}_oc.txt").shape == (48,)
    np.testing.assert_array_equal(cli.read_image(out / "renders" / "test_000.txt"),
                                  cli.read_image(tmp_path / "test_000.txt"))


def test_export_oc_shows_floater_below_threshold(tmp_path):
    assert run("gen", "--out", tmp_path, "--seed", 6, "--fraction", 0, "--camera-arc", np.pi, *GEN) == 0
    ds = tmp_path / "dataset.json"
    data = load_dataset(ds)
    t = Trainer(data, TrainConfig(seed=0, disable=("ocp",)))
    t.train(2 * t.z)
    f = single_view_floater(data, np.random.default_rng(0))
    t.scene = t.scene.concat(f)
    t.stats = t.stats.concat(ObservationStats.zeros(1))
    t.grad_accum = np.append(t.grad_accum, 0.0)
    t.grad_count = np.append(t.grad_count, 0)
    t.scene_opt = t._make_scene_optimizer()
    t.train(5 * t.z)
    ck = tmp_path / "floater.json"
    write_document(ck, t.to_checkpoint())
    idx = int(np.argmin(np.linalg.norm(t.scene.positions - f.positions[0], axis=1)))
    assert np.linalg.norm(t.scene.positions[idx] - f.positions[0]) < 0.02
    out = tmp_path / "oc"
    assert run("export-oc", "--checkpoint", ck, "--dataset", ds, "--out", out) == 0
    rows = _rows(out / "oc.csv")
    assert len(rows) == len(t.scene)
    assert int(rows[idx]["m"]) >= 1
    assert float(rows[idx]["oc"]) < 0.03
    assert np.median([float(r["oc"]) for r in rows]) > float(rows[idx]["oc"])
    assert len(list((out / "oc_maps").iterdir())) == len(data.views)


def test_gen_is_deterministic(tmp_path):
    assert run("gen", "--out", tmp_path / "a", "--seed", 7, *GEN) == 0
    assert run("gen", "--out", tmp_path / "b", "--seed", 7, *GEN) == 0
    assert (tmp_path / "a" / "dataset.json").read_bytes() == (tmp_path / "b" / "dataset.json").read_bytes()


def test_gen_zero_fraction(tmp_path):
    assert run("gen", "--out", tmp_path, "--fraction", 0, *GEN) == 0
    ds = load_dataset(tmp_path / "dataset.json")
    assert not any(v.gt_mask.any() for v in ds.views)
    Trainer(ds, TrainConfig())


def test_train_is_deterministic_across_threads(trained, tmp_path):
    _, ds, out = trained
    for threads in (1, 4):
        assert run("train", "--dataset", ds, "--out", tmp_path / f"t{threads}", "--iters", 240,
                   "--eval-every", 48, "--threads", threads) == 0
    a = (out / "metrics.csv").read_bytes()
    assert (tmp_path / "t1" / "metrics.csv").read_bytes() == a
    assert (tmp_path / "t4" / "metrics.csv").read_bytes() == a


def test_disable_occ_forces_unit_ratio(trained, tmp_path):
    _, ds, _ = trained
    out = tmp_path / "run"
    assert run("train", "--dataset", ds, "--out", out, "--iters", 144, "--disable", "occ") == 0
    ck = read_document(out / "checkpoint.json")
    assert ck["train_config"]["disable"] == ["occ"]
    assert run("eval", "--checkpoint", out / "checkpoint.json", "--dataset", ds, "--out", tmp_path / "e", "--maps") == 0
    for i in range(24):
        np.testing.assert_array_equal(np.loadtxt(tmp_path / "e" / "maps" / f"view_{i:03d}_ocr.txt"), 1.0)


def test_disable_dynamic_threshold_uses_fixed_scheme(trained, tmp_path):
    _, ds, _ = trained
    out = tmp_path / "run"
    assert run("train", "--dataset", ds, "--out", out, "--iters", 144,
               "--disable", "dynamic-threshold,ocp") == 0
    assert read_document(out / "checkpoint.json")["train_config"]["disable"] == ["dynamic-threshold", "ocp"]
    assert run("eval", "--checkpoint", out / "checkpoint.json", "--dataset", ds, "--out", tmp_path / "e") == 0
    assert _rows(tmp_path / "e" / "anchors.csv")[0]["mode"] == "fixed_fallback"


def test_interrupted_run_leaves_loadable_checkpoint(trained, tmp_path, monkeypatch):
    _, ds, _ = trained
    real = Trainer.train_step

    def flaky(self, *a, **k):
        if self.iteration == 60:
            raise KeyboardInterrupt
        return real(self, *a, **k)

    monkeypatch.setattr(Trainer, "train_step", flaky)
    with pytest.raises(KeyboardInterrupt):
        run("train", "--dataset", ds, "--out", tmp_path, "--iters", 240, "--eval-every", 48)
    monkeypatch.undo()
    assert run("eval", "--checkpoint", tmp_path / "checkpoint.json", "--dataset", ds, "--out", tmp_path / "e") == 0
    assert _rows(tmp_path / "e" / "metrics.csv")[0]["iter"] == "48"
    assert not list(tmp_path.glob("*.tmp"))


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["train"],
        ["frobnicate"],
        ["train", "--dataset", "x", "--out", "y", "--disable", "everything"],
        ["train", "--dataset", "x", "--out", "y", "--threads", "0"],
    ],
)
def test_usage_errors(argv, capsys):
    assert cli.main(argv) == 1
    assert capsys.readouterr().err


def test_invalid_lambda_is_usage_error(trained, tmp_path):
    _, ds, _ = trained
    assert run("train", "--dataset", ds, "--out", tmp_path, "--lambda4", 0.8, "--lambda5", 0.5) == 1


def test_io_errors(tmp_path):
    assert run("train", "--dataset", tmp_path / "missing.json", "--out", tmp_path) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run("train", "--dataset", bad, "--out", tmp_path) == 2
    bad.write_text(json.dumps({"schema_version": 42}))
    assert run("eval", "--checkpoint", bad, "--dataset", bad, "--out", tmp_path) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_failure_exit_code(trained, tmp_path):
    _, ds, _ = trained
    doc = read_document(ds)
    doc["views"][0]["image"][3] = [1e300, 0.0, 0.0]
    path = tmp_path / "overflow.json"
    write_document(path, doc)
    assert run("train", "--dataset", path, "--out", tmp_path / "run", "--iters", 48) == 3


def test_render_view_out_of_range(trained, tmp_path):
    _, ds, out = trained
    assert run("render", "--checkpoint", out / "checkpoint.json", "--dataset", ds, "--out", tmp_path,
               "--view", 99) == 1


def test_outputs_stay_inside_out_dir(trained, tmp_path):
    _, ds, _ = trained
    cwd = tmp_path / "cwd"
    cwd.mkdir()
    env = dict(os.environ)
    proc = subprocess.run(
        [sys.executable, "-m", "ocsplat", "train", "--dataset", str(ds), "--out", str(tmp_path / "o"),
         "--iters", "48"],
        cwd=cwd, env=env, capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert not list(cwd.iterdir())
    assert {p.name for p in (tmp_path / "o").iterdir()} == {"checkpoint.json", "metrics.csv", "renders"}
