import hashlib
import json
import os

import pytest

from ktasr import cli
from ktasr.config import RunConfig, load_config, parse_config_text
from ktasr.errors import ConfigError

TINY_TEXT = """\
encoder.d_model = 16
encoder.n_layers = 1
encoder.n_heads = 2
encoder.ffn_dim = 16
encoder.feat_dim = 5
encoder.vocab_size = 4
teacher.n_layers = 1
teacher.n_heads = 2
kt.n_heads = 2
synth.vocab_size = 4
synth.f_in = 5
synth.n_train = 16
synth.n_dev = 4
synth.n_test = 4
synth.seq_len_min = 2
synth.seq_len_max = 4
train.max_epochs = 2
train.warmup_steps = 4
train.freeze_encoder_until = 1
train.batch_size = 4
train.avg_best_k = 2
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_TEXT)
    return str(path)


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown"):
        RunConfig({"train.lamda": 0.5})


def test_bad_value_rejected():
    with pytest.raises(ConfigError):
        RunConfig({"kt.shift": "rihgt"})
    with pytest.raises(ConfigError):
        RunConfig({"train.lambda": "1.5"})


def test_canonical_text_round_trip_and_fingerprint():
    cfg = RunConfig({"seed": 7, "train.lambda": 0.3})
    text = cfg.canonical_text()
    again = RunConfig(parse_config_text(text))
    assert again.canonical_text() == text
    assert cfg.fingerprint() == again.fingerprint()
    lines = text.strip().splitlines()
    assert lines == sorted(lines)
    assert RunConfig({"seed": 8}).fingerprint() != cfg.fingerprint()


def test_load_config_overrides(tiny_config):
    cfg = load_config(tiny_config, {"train.lambda": "0.7", "seed": 99})
    assert cfg["train.lambda"] == 0.7
    assert cfg["seed"] == 99
    assert cfg["encoder.d_model"] == 16


def test_kt_off_flag_implies_lambda_one():
    import argparse
    args = argparse.Namespace(set=None, seed=None, kt="off", shift=None,
                              query=None)
    over = cli._collect_overrides(args)
    assert over == {"kt.enabled": "off", "train.lambda": 1.0}


def test_bad_set_syntax():
    import argparse
    args = argparse.Namespace(set=["train.lambda:0.5"], seed=None)
    with pytest.raises(ConfigError):
        cli._collect_overrides(args)


def _sha_tree(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in sorted(files):
            p = os.path.join(dirpath, f)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, root)] = hashlib.sha256(fh.read()).hexdigest()
    return out


def test_gen_data_rerun_identical(tiny_config, tmp_path):
    for d in ("a", "b"):
        rc = cli.main(["gen-data", "--config", tiny_config,
                       "--out", str(tmp_path / d)])
        assert rc == 0
    assert _sha_tree(tmp_path / "a") == _sha_tree(tmp_path / "b")


def test_cli_train_decode_eval_round_trip(tiny_config, tmp_path, capsys):
    data = str(tmp_path / "data")
    run = str(tmp_path / "run")
    assert cli.main(["gen-data", "--config", tiny_config, "--out", data]) == 0
    assert cli.main(["train", "--config", tiny_config, "--data", data,
                     "--run-dir", run, "--quiet"]) == 0
    assert os.path.exists(os.path.join(run, "loss_curve.png"))
    hyp = str(tmp_path / "hyp.jsonl")
    assert cli.main(["decode", "--model", os.path.join(run, "model_infer.bin"),
                     "--manifest", os.path.join(data, "dev.jsonl"),
                     "--out", hyp]) == 0
    capsys.readouterr()
    assert cli.main(["eval", "--ref", os.path.join(data, "dev.jsonl"),
                     "--hyp", hyp,
                     "--out", str(tmp_path / "score.json")]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert 0.0 <= rep["cer"]
    assert set(rep) == {"cer", "subs", "ins", "dels", "n_ref_tokens"}
    with open(hyp) as f:
        recs = [json.loads(l) for l in f]
    assert all(set(r) == {"id", "hyp_tokens", "hyp_text"} for r in recs)


def test_exit_code_config_error(tmp_path):
    rc = cli.main(["gen-data", "--set", "no.such.key=1",
                   "--out", str(tmp_path / "x")])
    assert rc == 2


def test_exit_code_data_error(tmp_path):
    rc = cli.main(["decode", "--model", str(tmp_path / "missing.bin"),
                   "--manifest", str(tmp_path / "m.jsonl"),
                   "--out", str(tmp_path / "h.jsonl")])
    assert rc == 3


def test_verify_fast_suites(capsys):
    assert cli.main(["verify", "kt-props"]) == 0
    out = capsys.readouterr().out
    assert "[PASS] kt-props" in out


def test_run_root_env(tiny_config, tmp_path, monkeypatch):
    monkeypatch.setenv("KTASR_RUN_ROOT", str(tmp_path / "root"))
    data = str(tmp_path / "data")
    assert cli.main(["gen-data", "--config", tiny_config, "--out", data]) == 0
    assert cli.main(["train", "--config", tiny_config, "--data", data,
                     "--quiet"]) == 0
    assert os.path.exists(tmp_path / "root" / "train" / "model_final.bin")
