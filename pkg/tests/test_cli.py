import json

import numpy as np
import pytest

from chorus.cli import main
from chorus.config import ConfigError, dataset_spec_from, parse_kv, train_config_from
from chorus.inference import read_embeddings
from chorus.objectives import PoolingMethod

SPEC = "n_train = 40\nn_eval = 12\nn_hetero = 8\ncandidate_pool_size = 10\nseed = 1\n"
TRAIN = ("# tiny run\nsteps = 3\nwarmup_steps = 1\nretrieval_batch = 8\ngen_batch = 2\n"
         "model.k_chorus = 4\nmodel.d_model = 16\nmodel.num_heads = 2\nmodel.d_ff = 32\n")


def test_parse_kv():
    assert parse_kv("a = 1\n\n# c\nb=x # trailing\n") == {"a": "1", "b": "x"}
    for bad in ("a", "a =", "= 1", "a = 1\na = 2"):
        with pytest.raises(ConfigError):
            parse_kv(bad)


def test_train_config_keys():
    cfg, seed = train_config_from(parse_kv("steps = 50\nwarmup_steps = 5\nalpha_g = 0.25\ngate_p = 1\n"
                                           "temperature = 0.05\npooling = mlp\nmodel.k_chorus = 8\nseed = 4\n"
                                           "text_reconstruction = true"))
    assert (cfg.steps, cfg.weights.generation, cfg.gate.p, cfg.scoring.temperature) == (50, 0.25, 1.0, 0.05)
    assert cfg.pooling == PoolingMethod.MLP and cfg.model.k_chorus == 8 and seed == 4
    assert cfg.text_reconstruction is True
    for bad in ({"bogus": "1"}, {"steps": "many"}, {"gate_p": "1.5"}, {"model.num_heads": "3"},
                {"warmup_steps": "5000"}, {"weights": "1"}, {"text_reconstruction": "maybe"}):
        with pytest.raises(ConfigError):
            train_config_from(bad)
    with pytest.raises(ConfigError):
        dataset_spec_from({"n_eval": "5", "candidate_pool_size": "9"})


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "spec.cfg").write_text(SPEC)
    (root / "train.cfg").write_text(TRAIN)
    assert main(["gen-data", "--spec", str(root / "spec.cfg"), "--out", str(root / "data")]) == 0
    assert main(["train", "--config", str(root / "train.cfg"), "--data", str(root / "data"),
                 "--out", str(root / "ckpt")]) == 0
    return root


def test_pipeline_outputs(workspace, capsys):
    root = workspace
    assert (root / "data" / "dataset.jsonl").exists()
    assert len((root / "ckpt" / "metrics.jsonl").read_text().splitlines()) == 3
    ckpt, data = str(root / "ckpt" / "final.ckpt"), str(root / "data")
    assert main(["eval", "--ckpt", ckpt, "--data", data, "--out", str(root / "rep.json"), "--n-qa", "2"]) == 0
    report = json.loads((root / "rep.json").read_text())
    assert report["n_queries"] == 12 and 0 <= report["precision_at_1"] <= 1

    assert main(["embed", "--ckpt", ckpt, "--data", data, "--out", str(root / "e.bin")]) == 0
    assert main(["embed", "--ckpt", ckpt, "--data", data, "--out", str(root / "e.csv"), "--format", "csv"]) == 0
    binary = read_embeddings(root / "e.bin")
    assert binary.shape == (12, 16)
    assert np.allclose(np.loadtxt(root / "e.csv", delimiter=","), binary, rtol=1e-6, atol=1e-7)

    capsys.readouterr()
    for mode in ("native", "compressed"):
        assert main(["generate", mode, "--ckpt", ckpt, "--data", data, "--sample", "2",
                     "--max-new-tokens", "3"]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["mode"] == mode and out["gold"] is not None
    assert out["cache"]["chorus"] == 4

    assert main(["visualize", "--ckpt", ckpt, "--data", data, "--sample", "3", "--layer", "2",
                 "--out", str(root / "hm.csv")]) == 0
    hm = np.loadtxt(root / "hm.csv", delimiter=",")
    assert hm.shape == (4, 16) and np.allclose(hm.sum(axis=1), 1, atol=1e-5)
    assert (root / "hm.svg").read_text().startswith("<svg")


def test_exit_codes(workspace, monkeypatch):
    root = workspace
    ckpt, data = str(root / "ckpt" / "final.ckpt"), str(root / "data")
    assert main([]) == 1
    assert main(["bogus"]) == 1
    assert main(["visualize", "--ckpt", ckpt, "--data", data, "--layer", "3", "--out", str(root / "x.csv")]) == 1
    assert main(["generate", "native", "--ckpt", ckpt, "--data", data, "--sample", "99"]) == 1
    (root / "bad.cfg").write_text("steps\n")
    assert main(["train", "--config", str(root / "bad.cfg"), "--data", data, "--out", str(root / "o")]) == 1
    assert main(["eval", "--ckpt", str(root / "missing.ckpt"), "--data", data]) == 2
    (root / "junk.ckpt").write_bytes(b"nope")
    assert main(["eval", "--ckpt", str(root / "junk.ckpt"), "--data", data]) == 2
    monkeypatch.setenv("CHORUS_NUM_THREADS", "zero")
    assert main(["gen-data", "--out", str(root / "d2")]) == 1
    monkeypatch.setenv("CHORUS_NUM_THREADS", "1")
    assert main(["gen-data", "--spec", str(root / "spec.cfg"), "--out", str(root / "d3")]) == 0
    assert (root / "d3" / "dataset.jsonl").read_bytes() == (root / "data" / "dataset.jsonl").read_bytes()
