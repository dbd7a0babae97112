import json

import pytest

from gendistill.cli import EXIT_BUDGET, EXIT_FAIL, EXIT_OK, load_split, main
from gendistill.core import load_distilled

SMALL = ["--dataset", "toy", "--num-classes", "3", "--resolution", "8"]
DISTILL = ["distill", "--backend", "stub", *SMALL]


@pytest.fixture
def distilled(tmp_path):
    out = tmp_path / "d"
    assert main([*DISTILL, "--ipc", "2", "--pda", "--factor", "3", "--out", str(out)]) == EXIT_OK
    return out


def test_distill_writes_dataset_timing_and_config(distilled, capsys):
    ds = load_distilled(distilled)
    assert ds.ipc == 6 and len(ds) == 18 and ds.resolution == 8
    assert "timing_report" not in ds.metadata
    timing = json.loads((distilled / "timing.json").read_text())
    assert {"generation", "augmentation", "saving"} <= set(timing["phases"])
    cfg = json.loads((distilled / "config.json").read_text())
    assert cfg["version"] == 1 and cfg["command"] == "distill" and cfg["args"]["ipc"] == 2


def test_distill_is_idempotent(tmp_path):
    args = [*DISTILL, "--ipc", "2", "--seed", "4"]
    assert main([*args, "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main([*args, "--out", str(tmp_path / "b")]) == EXIT_OK
    a, b = load_distilled(tmp_path / "a"), load_distilled(tmp_path / "b")
    assert (a.images.data == b.images.data).all()
    assert (tmp_path / "a/manifest.json").read_bytes() == (tmp_path / "b/manifest.json").read_bytes()


def test_distill_budget_exit_code(tmp_path):
    out = tmp_path / "p"
    code = main([*DISTILL, "--ipc", "50", "--budget-seconds", "1e-9", "--out", str(out)])
    assert code == EXIT_BUDGET
    ds = load_distilled(out)
    assert ds.class_counts().tolist() == [ds.ipc] * 3
    assert json.loads((out / "timing.json").read_text())["aborted"]


def test_distill_toy_needs_checkpoint(tmp_path):
    assert main([*DISTILL, "--backend", "toy", "--out", str(tmp_path)]) == EXIT_FAIL


def test_augment_testset_evaluate_report_grid(distilled, tmp_path, capsys):
    assert main(["augment", "--distilled", str(distilled), "--factor", "2", "--out", str(tmp_path / "aug")]) == EXIT_OK
    assert load_distilled(tmp_path / "aug").ipc == 12
    assert main(["testset", *SMALL, "--per-class", "2", "--out", str(tmp_path / "t")]) == EXIT_OK
    ev = tmp_path / "e"
    assert main(["evaluate", "--distilled", str(distilled), "--test", str(tmp_path / "t"), "--mode", "desk",
                 "--epochs", "1", "--repeats", "2", "--label", "stub", "--out", str(ev)]) == EXIT_OK
    line = capsys.readouterr().out.strip().splitlines()[-1]
    assert line.startswith("stub\tIPC 6\t") and "±" in line
    assert (ev / "report.json").is_file() and (ev / "loss_curves.png").is_file()
    assert main(["report", "--reports", str(ev / "report.json"), "--out", str(tmp_path / "r")]) == EXIT_OK
    table = (tmp_path / "r" / "table.tsv").read_text().splitlines()
    assert table[0].split("\t") == ["model", "dataset", "ipc", "accuracy", "repeats", "mode"]
    assert (tmp_path / "r" / "accuracy.png").is_file()
    assert main(["grid", "--distilled", str(distilled), "--classes", "3", "--factor", "3",
                 "--out", str(tmp_path / "g.png")]) == EXIT_OK


def test_evaluate_label_mismatch(distilled, tmp_path, capsys):
    main(["testset", "--dataset", "toy", "--num-classes", "4", "--resolution", "8", "--per-class", "1",
          "--out", str(tmp_path / "t")])
    code = main(["evaluate", "--distilled", str(distilled), "--test", str(tmp_path / "t"), "--mode", "desk",
                 "--epochs", "1", "--repeats", "1", "--out", str(tmp_path / "e")])
    assert code == EXIT_FAIL
    assert "label spaces differ" in capsys.readouterr().err


def test_config_file_supplies_defaults(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"version": 1, "command": "distill",
                               "args": {"dataset": "toy", "num_classes": 2, "resolution": 8, "ipc": 3,
                                        "backend": "stub", "pda": False}}))
    assert main(["distill", "--config", str(cfg), "--out", str(tmp_path / "d")]) == EXIT_OK
    assert load_distilled(tmp_path / "d").ipc == 3
    # command-line flags win over the file
    assert main(["distill", "--config", str(cfg), "--ipc", "1", "--out", str(tmp_path / "d1")]) == EXIT_OK
    assert load_distilled(tmp_path / "d1").ipc == 1


def test_config_file_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"args": {}}))
    assert main(["distill", "--config", str(bad), "--out", str(tmp_path / "x")]) == EXIT_FAIL
    wrong = tmp_path / "wrong.json"
    wrong.write_text(json.dumps({"version": 1, "command": "grid"}))
    assert main(["distill", "--config", str(wrong), "--out", str(tmp_path / "x")]) == EXIT_FAIL


def test_train_then_toy_distill(tmp_path):
    tr = tmp_path / "tr"
    assert main(["train", "--steps", "3", "--teacher-steps", "2", "--extractor-steps", "2", "--per-class", "16",
                 "--batch-size", "8", "--out", str(tr)]) == EXIT_OK
    for f in ("student.pt", "history.csv", "add_losses.png", "config.json", "classes.txt"):
        assert (tr / f).is_file()
    out = tmp_path / "d"
    assert main(["distill", "--dataset", "blobs", "--classes-file", str(tr / "classes.txt"), "--resolution", "8",
                 "--backend", "toy", "--checkpoint", str(tr / "student.pt"), "--ipc", "2",
                 "--out", str(out)]) == EXIT_OK
    assert load_distilled(out).registry.class_names == ("blob", "hole")


def test_load_split_requires_registry_for_folders(tmp_path):
    (tmp_path / "cls").mkdir()
    with pytest.raises(ValueError):
        load_split(tmp_path)
    with pytest.raises(FileNotFoundError):
        load_split(tmp_path / "nope")


def test_distill_ipc_zero_default_backend(tmp_path):
    # the default (external) backend is never loaded when nothing is requested
    assert main(["distill", "--ipc", "0", "--out", str(tmp_path)]) == EXIT_OK
    ds = load_distilled(tmp_path)
    assert len(ds) == 0 and ds.num_classes == 100


def test_no_pda_flag(tmp_path):
    assert main([*DISTILL, "--ipc", "2", "--no-pda", "--out", str(tmp_path)]) == EXIT_OK
    ds = load_distilled(tmp_path)
    assert ds.ipc == 2 and "pda" not in ds.metadata


def test_config_echo_reproduces_run(tmp_path):
    a = tmp_path / "a"
    assert main([*DISTILL, "--ipc", "2", "--seed", "9", "--out", str(a)]) == EXIT_OK
    b = tmp_path / "b"
    assert main(["distill", "--config", str(a / "config.json"), "--out", str(b)]) == EXIT_OK
    assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()
    assert (load_distilled(a).images.data == load_distilled(b).images.data).all()


def test_corrupt_manifest_nonzero(distilled, tmp_path):
    (distilled / "manifest.json").write_text("{not json")
    code = main(["evaluate", "--distilled", str(distilled), "--test", str(distilled), "--out", str(tmp_path)])
    assert code == EXIT_FAIL


def test_repeats_one_has_zero_std(distilled, tmp_path, capsys):
    assert main(["evaluate", "--distilled", str(distilled), "--test", str(distilled), "--mode", "desk",
                 "--epochs", "1", "--repeats", "1", "--out", str(tmp_path)]) == EXIT_OK
    assert capsys.readouterr().out.strip().endswith("±0.0000")


def test_grid_sizes(distilled, tmp_path):
    one = tmp_path / "one"
    main([*DISTILL, "--dataset", "toy", "--num-classes", "1", "--ipc", "1", "--no-pda", "--out", str(one)])
    assert main(["grid", "--distilled", str(one), "--classes", "1", "--factor", "1",
                 "--out", str(tmp_path / "g1.png")]) == EXIT_OK
    assert main(["grid", "--distilled", str(distilled), "--classes", "10", "--factor", "3",
                 "--out", str(tmp_path / "g.png")]) == EXIT_FAIL


def test_usage_error_is_not_budget_code():
    assert main(["distill"]) == EXIT_FAIL
