"""Command line: exit codes, artifacts, config echo and replay."""

import csv

import pytest

from frla.cli import EFFECTIVE_CONFIG, run
from frla.config import load_config

SMALL = ["image_size=16", "n_source=24", "n_source_val=12", "n_target=16", "n_teacher=24",
         "source_epochs=2", "teacher_epochs=2", "epochs=1", "batch_size=8"]


def cli(*args, env=None):
    # defaults first so a test's own --set wins
    argv = [args[0]] + [a for kv in SMALL for a in ("--set", kv)] + list(args[1:])
    return run(argv, env=env or {})


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Generated data plus pretrained checkpoints shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    assert cli("gen-data", "--out", str(root / "data")) == 0
    data = ["--set", f"data_dir={root / 'data'}"]
    assert cli("pretrain-source", *data, "--out", str(root / "src")) == 0
    assert cli("pretrain-teacher", *data, "--out", str(root / "vil")) == 0
    ckpts = data + ["--set", f"source_ckpt={root / 'src' / 'source.ckpt'}",
                    "--set", f"teacher_ckpt={root / 'vil' / 'teacher.ckpt'}"]
    return root, ckpts


class TestUsage:
    def test_no_command(self, capsys):
        assert run([], env={}) == 1
        assert "usage" in capsys.readouterr().err

    def test_unknown_flag(self, capsys):
        assert run(["adapt", "--bogus"], env={}) == 1
        err = capsys.readouterr().err
        assert "--bogus" in err and "usage" in err

    def test_missing_config_named(self, tmp_path, capsys):
        assert run(["adapt", "--config", str(tmp_path / "missing.txt")], env={}) == 1
        assert "missing.txt" in capsys.readouterr().err

    def test_bad_key(self, tmp_path, capsys):
        assert run(["eval", "--set", "nonsense=1", "--out", str(tmp_path)], env={}) == 1
        assert "nonsense" in capsys.readouterr().err

    def test_missing_checkpoint_is_config_error(self, tmp_path):
        assert run(["adapt", "--set", f"source_ckpt={tmp_path / 'x.ckpt'}", "--out", str(tmp_path)], env={}) == 1


class TestArtifacts:
    def test_gen_data_layout(self, workspace):
        root, _ = workspace
        for name in ("source_train", "source_val", "target", "teacher_corpus", "teacher_val"):
            assert (root / "data" / name / "manifest.txt").is_file()
        assert (root / "data" / "target_example_class0.pgm").is_file()

    def test_effective_config_echoed(self, workspace):
        root, _ = workspace
        cfg = load_config(root / "src" / EFFECTIVE_CONFIG, env={})
        assert cfg.image_size == 16 and cfg.seed == 0
        assert (root / "src" / "history.csv").is_file()

    def test_adapt_zero_epochs_copies_checkpoint(self, workspace):
        root, ckpts = workspace
        out = root / "adapt0"
        assert cli("adapt", *ckpts, "--set", "epochs=0", "--out", str(out)) == 0
        assert (out / "model.ckpt").read_bytes() == (root / "src" / "source.ckpt").read_bytes()

    def test_eval_and_cam(self, workspace):
        root, ckpts = workspace
        out = root / "eval"
        assert cli("eval", *ckpts, "--model", str(root / "vil" / "teacher.ckpt"), "--out", str(out)) == 0
        rows = list(csv.reader((out / "metrics.csv").open()))
        assert rows[0][:2] == ["model", "average"] and len(rows[0]) == 6
        assert cli("cam", *ckpts, "--index", "1", "--out", str(root / "cam")) == 0
        assert list((root / "cam").glob("cam_1_class*.pgm"))

    def test_cam_index_out_of_range(self, workspace):
        root, ckpts = workspace
        assert cli("cam", *ckpts, "--index", "999", "--out", str(root / "cam2")) == 1

    def test_corrupt_checkpoint_is_runtime_error(self, workspace, capsys):
        root, ckpts = workspace
        bad = root / "bad.ckpt"
        bad.write_bytes((root / "src" / "source.ckpt").read_bytes()[:50])
        assert cli("eval", *ckpts, "--model", str(bad), "--out", str(root / "evbad")) == 2
        assert "CheckpointError" in capsys.readouterr().err

    def test_ablate_and_report(self, workspace, capsys):
        root, ckpts = workspace
        out = root / "ablate"
        assert cli("ablate", *ckpts, "--out", str(out)) == 0
        header = next(csv.reader((out / "comparison.csv").open()))
        assert header == ["metric", "source", "dis", "dis+fr", "dis+la", "dis+fr+la"]
        assert (out / "cam_lesion_mass.csv").is_file() and (out / "source" / "metrics.csv").is_file()
        assert cli("report", str(out / "dis"), str(out / "dis+fr"), "--out", str(root / "rep")) == 0
        assert "worst_class_delta" in capsys.readouterr().out

    def test_report_malformed_log(self, workspace, capsys):
        root, ckpts = workspace
        d = root / "broken"
        d.mkdir()
        (d / "runlog.jsonl").write_text("{\n")
        assert cli("report", str(d), "--out", str(root / "rep2")) == 2
        assert "runlog.jsonl:1" in capsys.readouterr().err


class TestSeedAndReplay:
    def test_env_seed_precedence(self, tmp_path):
        assert cli("report", "--out", str(tmp_path / "a"), env={"FRLA_SEED": "7"}) == 2  # no runs given
        assert load_config(tmp_path / "a" / EFFECTIVE_CONFIG, env={}).seed == 7
        assert cli("report", "--set", "seed=3", "--out", str(tmp_path / "b"), env={"FRLA_SEED": "7"}) == 2
        assert load_config(tmp_path / "b" / EFFECTIVE_CONFIG, env={}).seed == 3

    def test_replay_from_echoed_config(self, workspace):
        root, ckpts = workspace
        first = root / "rep_a"
        assert cli("adapt", *ckpts, "--set", "epochs=2", "--out", str(first)) == 0
        second = root / "rep_b"
        assert run(["adapt", "--config", str(first / EFFECTIVE_CONFIG), "--out", str(second)], env={}) == 0
        for name in ("model.ckpt", "runlog.jsonl", "metrics.csv"):
            assert (first / name).read_bytes() == (second / name).read_bytes()
