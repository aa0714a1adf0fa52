import json

import numpy as np
import pytest

from ldmlplus.cli import build_synth_config, build_train_config, load_config, main
from ldmlplus.errors import ConfigError
from ldmlplus.formats import load_model, read_features


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    cfg = out / "cfg.yaml"
    cfg.write_text("synth:\n  n_ids: 24\n")
    assert run("synth", "--config", cfg, "--seed", 3, "--out", out) == 0
    return out


@pytest.fixture(scope="module")
def mv_model(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("mv")
    code = run("train", "--mode", "mvldml+", "--view", data_dir / "train_view0.csv",
               "--view", data_dir / "train_view1.csv", "--privileged", data_dir / "train_privileged.csv",
               "--out", out)
    assert code == 0
    return out


def test_synth_outputs(data_dir):
    names = json.loads((data_dir / "synth.json").read_text())["files"]
    assert names == ["train_view0.csv", "train_view1.csv", "train_privileged.csv",
                     "test_view0.csv", "test_view1.csv"]
    t = read_features(data_dir / "train_view1.csv")
    assert t.dim == 40 and len(t) == 48


def test_synth_binary(tmp_path):
    assert run("synth", "--format", "binary", "--out", tmp_path) == 0
    assert (tmp_path / "train_view0.bin").read_bytes()[:4] == b"PMLF"


def test_train_mvldml(mv_model):
    log = json.loads((mv_model / "train_log.json").read_text())
    assert log["mode"] == "mvldml+"
    assert np.all(np.diff(log["history"]) <= 0)
    assert abs(sum(log["view_weights"]) - 1) < 1e-12
    assert load_model(mv_model / "model.pmlm").n_views == 2


def test_sigma_one(data_dir, tmp_path):
    assert run("train", "--mode", "ldml", "--sigma-one", "--view", data_dir / "train_view0.csv",
               "--out", tmp_path) == 0
    assert json.loads((tmp_path / "train_log.json").read_text())["sigma"] == 1.0


def test_missing_privileged_names_flag(data_dir, tmp_path, capsys):
    code = run("train", "--mode", "ldml+", "--view", data_dir / "train_view0.csv", "--out", tmp_path)
    assert code == 2
    assert "--privileged" in capsys.readouterr().err
    code = run("train", "--mode", "ldml+", "--view", data_dir / "train_view0.csv",
               "--privileged", tmp_path / "nope.csv", "--out", tmp_path)
    assert code == 3
    assert "--privileged" in capsys.readouterr().err


def test_mismatched_files_are_data_errors(data_dir, tmp_path):
    code = run("train", "--mode", "ldml+", "--view", data_dir / "train_view0.csv",
               "--privileged", data_dir / "test_view0.csv", "--out", tmp_path)
    assert code == 3


def test_config_errors(tmp_path, data_dir):
    bad = tmp_path / "bad.yaml"
    bad.write_text("trian: {lam: 1}\n")
    assert run("synth", "--config", bad, "--out", tmp_path) == 2
    bad.write_text("train: {lam: -1}\n")
    assert run("train", "--mode", "ldml", "--view", data_dir / "train_view0.csv",
               "--config", bad, "--out", tmp_path) == 2
    bad.write_text("synth: [unclosed\n")
    assert run("synth", "--config", bad, "--out", tmp_path) == 2
    assert run("synth", "--config", tmp_path / "missing.yaml", "--out", tmp_path) == 2


def test_numerical_failure_exit_code(tmp_path):
    rows = "\n".join(f"{i // 2},{i % 2},{1e200 * (i + 1)!r}" for i in range(8))
    (tmp_path / "huge.csv").write_text(rows + "\n")
    assert run("train", "--mode", "ldml", "--view", tmp_path / "huge.csv", "--out", tmp_path) == 4


def test_eval_model_report(mv_model, data_dir, tmp_path):
    assert run("eval", "--model", mv_model / "model.pmlm", "--view", data_dir / "test_view0.csv",
               "--view", data_dir / "test_view1.csv", "--out", tmp_path) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert 0 <= rep["summary"]["rank1"]["mean"] <= 1
    assert (tmp_path / "cmc.csv").read_text().startswith("rank,cmc_mean,cmc_std")


def test_eval_perfect_model(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(
        "synth:\n  n_ids: 12\n  views: [{dim: 6, noise_sigma: 0.0}]\n"
        "  privileged: {dim: 4, noise_sigma: 0.0}\n"
    )
    assert run("synth", "--config", cfg, "--out", tmp_path) == 0
    assert run("train", "--mode", "ldml", "--view", tmp_path / "train_view0.csv", "--out", tmp_path / "m") == 0
    # evaluating on the training features themselves
    assert run("eval", "--model", tmp_path / "m" / "model.pmlm", "--view", tmp_path / "train_view0.csv",
               "--out", tmp_path / "e") == 0
    rep = json.loads((tmp_path / "e" / "report.json").read_text())
    assert rep["summary"]["rank1"]["mean"] == 1.0


def test_eval_repeats_deterministic_across_threads(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("synth: {n_ids: 16}\ntrain: {max_iters: 20}\n")
    reports = []
    for threads, sub in ((1, "a"), (3, "b"), (1, "c")):
        assert run("eval", "--mode", "ldml+", "--n-repeats", 3, "--threads", threads, "--config", cfg,
                   "--seed", 9, "--out", tmp_path / sub) == 0
        reports.append((tmp_path / sub / "report.json").read_bytes())
    assert reports[0] == reports[1] == reports[2]
    doc = json.loads(reports[0])
    assert doc["n_repeats"] == 3 and len(set(doc["split_seeds"])) == 3


def test_eval_repeats_on_feature_files(data_dir, tmp_path):
    assert run("eval", "--mode", "ldml", "--view", data_dir / "train_view0.csv", "--n-repeats", 2,
               "--out", tmp_path) == 0
    doc = json.loads((tmp_path / "report.json").read_text())
    assert doc["source"] == "features" and len(doc["splits"]) == 2


def test_eval_needs_model_or_mode(tmp_path):
    assert run("eval", "--out", tmp_path) == 2
    assert run("eval", "--mode", "ldml", "--n-repeats", 0, "--out", tmp_path) == 2


def test_histogram_command(mv_model, data_dir, tmp_path):
    assert run("histogram", "--model", mv_model / "model.pmlm", "--view", data_dir / "train_view0.csv",
               "--view", data_dir / "train_view1.csv", "--privileged", data_dir / "train_privileged.csv",
               "--bins", 20, "--out", tmp_path) == 0
    doc = json.loads((tmp_path / "histogram.json").read_text())
    assert set(doc["overlap"]) == {"original_view0_euclidean", "original_view0_learned",
                                   "original_view1_euclidean", "original_view1_learned",
                                   "privileged_euclidean", "privileged_learned"}
    # learned metric separates training pairs better than the raw features
    assert doc["overlap"]["original_view0_learned"] < doc["overlap"]["original_view0_euclidean"]
    assert len((tmp_path / "hist_privileged_learned.csv").read_text().splitlines()) == 21


def test_histogram_separable_toy(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("synth:\n  n_ids: 10\n  views: [{dim: 5, noise_sigma: 0.0}]\n")
    run("synth", "--config", cfg, "--out", tmp_path)
    run("train", "--mode", "ldml", "--view", tmp_path / "train_view0.csv", "--out", tmp_path / "m")
    assert run("histogram", "--model", tmp_path / "m" / "model.pmlm", "--view", tmp_path / "train_view0.csv",
               "--out", tmp_path / "h") == 0
    doc = json.loads((tmp_path / "h" / "histogram.json").read_text())
    assert doc["overlap"]["original_view0_learned"] == 0.0


def test_pca_command(data_dir, tmp_path):
    assert run("pca", "--input", data_dir / "train_view0.csv", "--apply", data_dir / "test_view0.csv",
               "--energy", 0.8, "--out", tmp_path) == 0
    info = json.loads((tmp_path / "pca.json").read_text())
    assert info["retained_energy"] >= 0.8
    assert read_features(tmp_path / "pca_test_view0.csv").dim == info["n_components"]


def test_train_with_pca(data_dir, tmp_path):
    assert run("train", "--mode", "ldml+", "--view", data_dir / "train_view0.csv", "--privileged",
               data_dir / "train_privileged.csv", "--pca-energy", 0.9, "--out", tmp_path) == 0
    model = load_model(tmp_path / "model.pmlm")
    assert model.pca[0].dim == 30 and model.metrics[0].dim == model.pca[0].n_components


def test_config_builders(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"lam": 1e-4, "sigma": 2.5, "max_iters": 7},
                               "synth": {"privileged": "random", "n_ids": 10}}))
    c = load_config(cfg)
    t = build_train_config(c, seed=4)
    assert (t.hp.lam, t.hp.global_sigma, t.max_iters, t.seed) == (1e-4, 2.5, 7, 4)
    assert build_train_config(c, sigma_one=True).hp.global_sigma == 1.0
    s = build_synth_config(c, seed=2)
    assert s.privileged.random and s.seed == 2
    with pytest.raises(ConfigError):
        build_train_config({"train": {"bogus": 1}})
    # defaults follow the documented hyperparameters
    d = build_train_config({})
    assert (d.hp.lam, d.hp.r, d.eta0_m, d.eta0_p, d.cap_s, d.max_iters, d.rel_tol) == (
        1e-3, 3.0, 2.0 ** 20, 2.0 ** 15, 2.0 ** 5, 400, 1e-4)
