import json

import pytest

from ctvae.cli import main, version_string
from ctvae.models import GENERATOR_KINDS

TINY = dict(embed_dim=8, hidden_dim=16, latent_dim=4, batch_size=32, epochs=1, n_z=3, beam_size=2, seq2seq_beam=3,
            max_len=10)


@pytest.fixture
def run(tmp_path):
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    out = tmp_path / "run"
    assert main(["gen-data", "--out", str(out), "--seed", "1", "--n-posts", "30"]) == 0
    return out, cfg


def cli(out, cfg, *argv):
    return main([*argv, "--out", str(out), "--config", str(cfg)])


def test_usage_errors_exit_one(capsys):
    assert main([]) == 1
    assert main(["fly"]) == 1
    assert main(["train", "generator", "--bogus"]) == 1
    assert main(["train", "generator", "--model-kind", "gpt"]) == 1
    assert "usage" in capsys.readouterr().err
    assert main(["--help"]) == 0


def test_runtime_errors_exit_two(tmp_path, capsys):
    assert main(["train", "generator", "--out", str(tmp_path / "empty")]) == 2
    assert main(["eval", "--out", str(tmp_path / "empty")]) == 2
    assert "FileNotFoundError" in capsys.readouterr().err
    assert main(["gen-data", "--out", str(tmp_path), "--n-posts", "2"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["pipeline", "--out", str(tmp_path), "--config", str(bad)]) == 2
    bad.write_text('{"hidden_dim": 0}')
    assert main(["pipeline", "--out", str(tmp_path), "--config", str(bad)]) == 2


def test_unknown_config_field_is_runtime_error(run):
    out, cfg = run
    cfg.write_text('{"dropout": 0.5}')
    assert cli(out, cfg, "train", "lm") == 2


def test_kind_mismatch_is_runtime_error(run, capsys):
    out, cfg = run
    assert cli(out, cfg, "train", "generator", "--model-kind", "seq2seq") == 0
    assert cli(out, cfg, "generate", "--model-kind", "ctvae", "--checkpoint", str(out / "seq2seq.ckpt")) == 2
    assert "CheckpointKindError" in capsys.readouterr().err


def test_train_twice_gives_identical_checkpoints(run, tmp_path):
    out, cfg = run
    paths = [tmp_path / "a.ckpt", tmp_path / "b.ckpt"]
    for p in paths:
        assert cli(out, cfg, "train", "generator", "--model-kind", "ctvae", "--seed", "7", "--checkpoint", str(p)) == 0
    assert paths[0].read_bytes() == paths[1].read_bytes()
    manifest = json.loads((out / "manifests" / "train-ctvae.json").read_text())
    assert set(manifest) == {"command", "argv", "seed", "config_hash", "config", "version", "wall_time_s",
                             "artifacts"}
    assert manifest["seed"] == 7 and manifest["config"]["hidden_dim"] == 16
    assert manifest["version"].startswith("v")


def test_stepwise_commands_and_eval_rows(run, capsys):
    out, cfg = run
    assert cli(out, cfg, "train", "tcd") == 0
    assert cli(out, cfg, "train", "lm") == 0
    kinds = ["seq2seq", "ctvae"]
    for kind in kinds:
        assert cli(out, cfg, "train", "generator", "--model-kind", kind) == 0
        assert cli(out, cfg, "generate", "--model-kind", kind, "--max-posts", "2") == 0
        assert cli(out, cfg, "rerank", "--model-kind", kind) == 0
    capsys.readouterr()
    assert cli(out, cfg, "eval") == 0
    table = capsys.readouterr().out.splitlines()
    assert [line.split("\t")[0] for line in table[1:]] == kinds
    assert (out / "report.tsv").read_text().splitlines() == table
    ranked = [json.loads(line) for line in (out / "ctvae.ranked.jsonl").read_text().splitlines()]
    assert len(ranked) == 2 and all(1 <= len(r["ranked"]) <= 5 for r in ranked)
    for name in ("train-tcd", "train-lm", "generate-ctvae", "rerank-ctvae", "eval"):
        assert (out / "manifests" / f"{name}.json").exists()


def test_pipeline_end_to_end(tmp_path):
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    out = tmp_path / "p"
    assert main(["pipeline", "--out", str(out), "--config", str(cfg), "--n-posts", "9", "--max-posts", "1"]) == 0
    for kind in GENERATOR_KINDS:
        for suffix in ("ckpt", "candidates.jsonl", "ranked.jsonl"):
            assert (out / f"{kind}.{suffix}").exists()
    assert len((out / "report.tsv").read_text().splitlines()) == 1 + len(GENERATOR_KINDS)
    assert json.loads((out / "manifests" / "pipeline.json").read_text())["command"] == "pipeline"


def test_version_string_shape():
    v = version_string()
    assert v.startswith("v") and " " not in v
