import csv

import numpy as np
import pytest

from chainimpute.cli import main, read_config
from chainimpute.fileio import read_dataset, read_recording


def run(*argv):
    assert main([str(a) for a in argv]) == 0


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    run("synth", "--out-dir", d, "--seed", 1, "--n", 3, "--V", 20, "--T", 10,
        "--n-subjects", 3, "--windows-per-subject", 2)
    return d


def test_synth_writes_recordings(dataset):
    recs = read_dataset(dataset)
    assert len(recs) == 6
    assert recs[0].values.shape == (20, 10)


def test_corrupt_train_impute_evaluate(dataset, tmp_path):
    corrupted = tmp_path / "corrupted"
    run("corrupt", "--in", dataset, "--out", corrupted, "--mode", "region", "--rate", 0.25, "--seed", 2)
    for rec in read_dataset(corrupted):
        assert rec.missing_voxels.sum() == 5
        assert rec.truth is not None

    model_dir = tmp_path / "model"
    run("train", "--model", "phi+d", "--data", dataset, "--out-dir", model_dir, "--seed", 3,
        "--epochs-phi", 2, "--epochs-d", 2, "--alternations", 2, "--hidden-d", 8)
    assert (model_dir / "spatial.phiw").exists() and (model_dir / "denoiser.grud").exists()

    imputed = tmp_path / "imputed"
    run("impute", "--model-dir", model_dir, "--in", corrupted, "--out", imputed)
    for ref, est in zip(read_dataset(corrupted), read_dataset(imputed)):
        assert not np.isnan(est.values).any()
        obs = ~ref.missing_voxels
        assert est.values[obs].tobytes() == ref.values[obs].tobytes()

    out = tmp_path / "eval"
    run("evaluate", "--reference", corrupted, "--imputed", imputed, "--model", "phi+d",
        "--out-dir", out, "--metric-mode", "paper-literal")
    rows = list(csv.DictReader((out / "evaluation.csv").open()))
    assert [r["metric"] for r in rows] == ["mae_time", "rmse_time", "mae_feature", "rmse_feature"]
    assert all(float(r["mean"]) >= 0 and r["n"] == "6" for r in rows)
    assert "paper-literal" in (out / "evaluation.md").read_text()


def test_knn_impute_needs_no_training(dataset, tmp_path):
    src = sorted(dataset.glob("*.mtsr"))[0]
    corrupted = tmp_path / "c.mtsr"
    run("corrupt", "--in", src, "--out", corrupted, "--mode", "value", "--rate", 0.1)
    out = tmp_path / "i.mtsr"
    run("impute", "--model", "knn", "--in", corrupted, "--out", out)
    assert not np.isnan(read_recording(out).values).any()


def test_config_file_and_flag_override(dataset, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# benchmark config\nmodels = mean, knn\nmissing_rates = 0.1\n"
                   "n_train_subjects = 2\nseeds = 4\nmetric_mode = paper-literal\n")
    assert read_config(cfg)["models"] == "mean, knn"
    out = tmp_path / "bench"
    run("bench", "--config", cfg, "--data", dataset, "--out-dir", out, "--rates", "0.25")
    rows = list(csv.DictReader((out / "report.csv").open()))
    assert {r["model"] for r in rows} == {"mean", "knn"}
    assert {r["rate"] for r in rows} == {"0.25"}
    assert "paper-literal" in (out / "report_meta.json").read_text()


def test_search_writes_trial_log(dataset, tmp_path):
    out = tmp_path / "search"
    run("search", "--data", dataset, "--n-iters", 2, "--folds", 3, "--search-model", "phi",
        "--out-dir", out, "--rates", "0.25")
    rows = list(csv.DictReader((out / "trials.csv").open()))
    assert len(rows) == 2
    assert "lr_phi" in (out / "best.cfg").read_text()


def test_csv_input(tmp_path):
    p = tmp_path / "rec.csv"
    p.write_text("voxel,x,y,z,t0,t1\n0,0,0,0,1,2\n1,1,0,0,,\n2,0,1,0,3,4\n")
    out = tmp_path / "out.mtsr"
    run("impute", "--model", "knn", "--in", p, "--out", out)
    assert read_recording(out).values[1].tolist() == [2.0, 3.0]
