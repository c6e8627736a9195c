import json

import pytest

from iwm.cli import EXIT_CHECKPOINT, EXIT_DATA, EXIT_USAGE, SUBCOMMANDS, main

TINY = """seed = 0
[dataset]
n_classes = 2
n_samples = 48
image_size = 16
[encoder]
image_size = 16
patch_size = 4
dim = 16
depth = 1
heads = 2
[predictor]
dim = 16
depth = 1
heads = 2
conditioning = feature
[pretrain]
epochs = 1
batch_size = 8
log_every = 1
[eval]
images = 2
bank = 4
trials = 2
actions = 3
views = 2
[finetune]
epochs = 1
steps = 2
batch_size = 8
probe_aug = none
[probe]
epochs = 1
batch_size = 16
"""


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    assert main(["pretrain", "--config", str(cfg), "--out", str(root / "run")]) == 0
    return root, cfg


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def test_pretrain_outputs(trained):
    root, _ = trained
    run_dir = root / "run"
    for name in ("metrics.jsonl", "timing.jsonl", "summary.jsonl", "resolved_config.txt", "checkpoint"):
        assert (run_dir / name).exists()


def test_pretrain_rerun_is_bit_identical(trained, tmp_path):
    root, cfg = trained
    assert main(["pretrain", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    for name in ("metrics.jsonl", "summary.jsonl", "checkpoint/tensors.bin"):
        if (root / "run" / name).exists():
            assert (tmp_path / name).read_bytes() == (root / "run" / name).read_bytes()


@pytest.mark.parametrize("command,artefact", [
    ("eval-mrr", "mrr.jsonl"), ("retrieve", "retrieval_manifest.json"), ("probe-linear", "probe.jsonl"),
    ("probe-attentive", "probe.jsonl"), ("finetune-predictor", "finetune.jsonl"),
    ("marginalize", "marginalize.jsonl"), ("simmatrix", "simmatrix.csv"),
])
def test_eval_subcommands_are_deterministic(trained, tmp_path, capsys, command, artefact):
    root, cfg = trained
    ck = str(root / "run" / "checkpoint")
    outs = []
    for rep in range(2):
        out = tmp_path / str(rep)
        code, stdout, _ = run(capsys, command, "--config", str(cfg), "--checkpoint", ck, "--out", str(out),
                              "--set", "eval.preset=default")
        assert code == 0 and json.loads(stdout)["ok"]
        outs.append((out / artefact).read_bytes())
    assert outs[0] == outs[1]


def test_ablation_and_plot_data(trained, tmp_path, capsys):
    root, cfg = trained
    ck = str(root / "run" / "checkpoint")
    code, _, _ = run(capsys, "finetune-predictor", "--ablation", "--config", str(cfg), "--checkpoint", ck,
                     "--out", str(tmp_path / "abl"), "--set", "finetune.steps=1")
    assert code == 0
    lines = (tmp_path / "abl" / "prediction_task_ablation.csv").read_text().splitlines()
    assert lines[0] == "null_latents,on_teacher,one_token,accuracy,predictor_tokens" and len(lines) == 9
    code, _, _ = run(capsys, "plot-data", "--inputs", str(tmp_path / "abl"), "--out", str(tmp_path / "plots"))
    assert code == 0
    assert len((tmp_path / "plots" / "prediction_task_ablation.csv").read_text().splitlines()) == 9


def test_multitask_subcommand(trained, tmp_path, capsys):
    root, cfg = trained
    extra = "\n[tasks.shape]\nn_classes = 2\nn_samples = 32\nimage_size = 16\n" \
            "[tasks.stripes]\nn_classes = 2\nn_samples = 32\nimage_size = 16\nlabel = background\n"
    mcfg = tmp_path / "multi.cfg"
    mcfg.write_text(TINY + extra)
    code, stdout, err = run(capsys, "finetune-multitask", "--config", str(mcfg), "--checkpoint",
                            str(root / "run" / "checkpoint"), "--out", str(tmp_path / "m"))
    assert code == 0, err
    header = (tmp_path / "m" / "multitask.csv").read_text().splitlines()[0]
    assert header.startswith("task,multitask,single_task,delta")


def test_selftest_runs(tmp_path, capsys):
    code, stdout, _ = run(capsys, "selftest", "--set", "selftest.seeds=1", "--out", str(tmp_path))
    assert code == 0 and json.loads(stdout)["failed"] == 0
    assert (tmp_path / "gradcheck.jsonl").read_text().count("\n") >= 20


def test_usage_errors(tmp_path, capsys):
    code, _, err = run(capsys, "pretrain", "--bogus")
    assert code == EXIT_USAGE and json.loads(err)["ok"] is False
    code, _, _ = run(capsys, "no-such-command")
    assert code == EXIT_USAGE
    code, _, err = run(capsys, "pretrain", "--config", str(tmp_path / "missing.cfg"), "--out", str(tmp_path))
    assert code == EXIT_USAGE and "missing.cfg" in err
    code, _, _ = run(capsys, "eval-mrr", "--out", str(tmp_path))
    assert code == EXIT_USAGE


def test_checkpoint_and_data_errors(tmp_path, capsys):
    code, _, _ = run(capsys, "eval-mrr", "--checkpoint", str(tmp_path / "nope"), "--out", str(tmp_path / "o"))
    assert code == EXIT_CHECKPOINT
    code, _, _ = run(capsys, "pretrain", "--out", str(tmp_path / "p"), "--set", "dataset.kind=folder",
                     "--set", f"dataset.root={tmp_path / 'absent'}")
    assert code == EXIT_DATA


def test_help_lists_every_subcommand(capsys):
    assert main(["--help"]) == 0
    text = capsys.readouterr().out
    assert all(name in text for name in SUBCOMMANDS)
