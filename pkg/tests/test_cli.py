import argparse
import json

import pytest

from tokenlab import cli
from tokenlab.checkpoint import load_checkpoint
from tokenlab.runner import read_results

FAST = ["++train.max_epochs=1", "++model.token_dim=8", "++model.ffn_dim=8", "++model.max_seq_len=32"]


def _subparsers():
    parser = cli.build_parser()
    action = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    return action.choices


def test_commands_registered():
    assert tuple(_subparsers()) == cli.COMMANDS


@pytest.mark.parametrize("command", cli.COMMANDS)
def test_help_lists_every_flag(command, capsys):
    assert cli.main([command, "--help"]) == 0
    text = capsys.readouterr().out
    for action in _subparsers()[command]._actions:
        for opt in action.option_strings:
            assert opt in text
    for flag in ("--seed", "--config", "--out"):
        assert flag in text


def test_gen_cohort_deterministic(tmp_path):
    for name in ("a.tsv", "b.tsv"):
        assert cli.main(["gen-cohort", "--preset", "readmission_like", "--n", "300", "--seed", "7",
                         "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a.tsv").read_bytes() == (tmp_path / "b.tsv").read_bytes()


def test_gen_cohort_from_spec_file(tmp_path):
    spec = tmp_path / "s.txt"
    spec.write_text("n_patients = 50\ntask.x = 1, 0, 1, 0.2\n")
    assert cli.main(["gen-cohort", "--config", str(spec), "--out", str(tmp_path / "c.tsv")]) == 0
    assert "\tx\t" in (tmp_path / "c.tsv").read_text()


@pytest.mark.parametrize("argv", [
    ["gen-cohort", "--out", "x.tsv"],                         # neither preset nor config
    ["gen-cohort", "--preset", "small"],                      # missing --out
    ["train", "--cohort", "small"],                           # missing --task
    ["train", "--task", "t", "++model.token_dim"],            # malformed override
    ["train", "--task", "t", "++optim.lr=1"],                 # unknown section
    ["train", "--task", "t", "--bogus"],                      # unknown flag
    ["nope"],
    ["report", "--results", "missing.csv", "--out", "d", "triplet-ablation"],
    ["gen-cohort", "--preset", "small", "--out", "x.tsv", "++model.token_dim=8"],
])
def test_validation_errors_exit_1(argv, tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert cli.main(argv) == 1
    captured = capsys.readouterr()
    assert captured.err and not captured.out


def test_train_override_and_bad_value(tmp_path, capsys):
    ckpt = tmp_path / "m.tlm"
    base = ["train", "--cohort", "small", "--n", "200", "--task", "mortality_like", "--out", str(ckpt)]
    assert cli.main(base + FAST + ["++model.token_dim=12", "++model.n_heads=3"]) == 0
    assert load_checkpoint(ckpt).config["model"]["token_dim"] == 12
    out = capsys.readouterr().out
    assert out.startswith("# tokenlab-results v1") and ",mortality_like,0," in out
    assert cli.main(base + FAST + ["++model.token_dim=9"]) == 1       # not a multiple of n_heads
    assert cli.main(base + FAST + ["++model.no_such_field=1"]) == 1
    conf = tmp_path / "o.txt"
    conf.write_text("train.max_epochs = 1\nmodel.token_dim = 8\nmodel.max_seq_len = 32\n")
    assert cli.main(base[:-1] + [str(tmp_path / "n.tlm"), "--config", str(conf)]) == 0
    assert load_checkpoint(tmp_path / "n.tlm").config["model"]["max_seq_len"] == 32


def test_train_byte_reproducible(tmp_path):
    base = ["train", "--cohort", "small", "--n", "200", "--task", "readmission_like", "--seed", "3"] + FAST
    assert cli.main(base + ["--out", str(tmp_path / "a")]) == 0
    assert cli.main(base + ["--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_build_cache(tmp_path, capsys):
    assert cli.main(["build-cache", "--cohort", "small", "--encoder", "tiny-clinical",
                     "--out", str(tmp_path / "c.tlcache")]) == 0
    assert (tmp_path / "c.tlcache").stat().st_size > 0 and capsys.readouterr().out.strip()


def test_run_suite_and_report(tmp_path, capsys):
    results = tmp_path / "r.csv"
    argv = ["run-suite", "triplet-ablation", "--cohort", "small", "--seeds", "1-2", "--out", str(results)] + FAST
    assert cli.main(argv) == 0
    records = read_results(results)
    assert len(records) == 4 * 4 * 2
    assert {r.variant for r in records} == {"Triplet", "No time", "No value", "Code-only"}
    assert cli.main(argv) == 0 and len(read_results(results)) == 32      # resumed, nothing rerun
    out_dir = tmp_path / "rep"
    assert cli.main(["report", "triplet-ablation", "--results", str(results), "--out", str(out_dir)]) == 0
    assert (out_dir / "report.md").exists() and (out_dir / "waterfall.csv").exists()
    assert cli.main(["report", "triplet-ablation", "--results", str(results), "--format", "csv",
                     "--out", str(out_dir / "csv")]) == 0
    assert (out_dir / "csv" / "report.csv").exists()


def test_grad_check_command(tmp_path, monkeypatch, capsys):
    from tokenlab import gradcheck
    subset = [t for t in gradcheck.shipped_tokenizers() if t[0] == "triplet-full"]
    real = gradcheck.run_shipped_checks
    monkeypatch.setattr(cli, "run_shipped_checks", lambda seed: real(seed=seed, tokenizers=subset))
    assert cli.main(["grad-check", "--out", str(tmp_path / "g.json")]) == 0
    data = json.loads((tmp_path / "g.json").read_text())
    assert set(data["configurations"]) == {"triplet-full/transformer", "triplet-full/linear-head"}


def test_module_entry_point_exit_codes(tmp_path):
    import subprocess
    import sys
    ok = subprocess.run([sys.executable, "-m", "tokenlab", "--help"], capture_output=True, text=True)
    assert ok.returncode == 0 and "gen-cohort" in ok.stdout
    bad = subprocess.run([sys.executable, "-m", "tokenlab", "train"], capture_output=True, text=True)
    assert bad.returncode == 1 and "--task" in bad.stderr and bad.stdout == ""
