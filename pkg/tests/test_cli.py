import hashlib

import pytest

from aunets import cli
from aunets.datakit import VIEWS

from conftest import run_cli


def _tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_params_table(capsys):
    assert run_cli("params", "--profile", "vgg16") == 0
    out = capsys.readouterr().out
    row = next(l for l in out.splitlines() if l.startswith("Horizontal"))
    assert "237,029,186" in row
    assert len(out.strip().splitlines()) == 8


def test_gen_data_deterministic(tmp_path):
    for name in ("a", "b"):
        assert run_cli("gen-data", "--seed", 1, "--out", tmp_path / name, "--subjects", 3, "--views", 2, "--frames", 5) == 0
    assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")


def test_usage_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["train-au", "--data", str(tmp_path)])  # --au / --view missing
    assert e.value.code == 1
    with pytest.raises(SystemExit) as e:
        cli.main(["params", "--bogus"])
    assert e.value.code == 1
    assert "usage" in capsys.readouterr().err


def test_bad_view_and_fusion(tiny_dataset, tmp_path):
    assert run_cli("train-au", "--data", tiny_dataset, "--out", tmp_path, "--au", 1, "--view", "V12") == 1
    assert run_cli("train-au", "--data", tiny_dataset, "--out", tmp_path, "--au", 1, "--view", "V1",
                   "--fusion", "sideways") == 1
    assert run_cli("train-au", "--data", tiny_dataset, "--out", tmp_path, "--au", 99, "--view", "V1") == 1


def test_missing_dataset_is_data_error(tmp_path):
    assert run_cli("pretrain", "--data", tmp_path / "nope", "--out", tmp_path) == 2


def test_missing_checkpoints(tiny_dataset, tmp_path, capsys):
    assert run_cli("train-au", "--data", tiny_dataset, "--out", tmp_path, "--au", 1, "--view", "frontal") == 3
    assert run_cli("train-au", "--data", tiny_dataset, "--out", tmp_path, "--au", 2, "--view", "V2") == 3
    assert "V1 / AU2" in capsys.readouterr().err
    assert run_cli("predict", "--data", tiny_dataset, "--out", tmp_path) == 3


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nseed = 4\nmedian-window = 5\nfusion = channels\n")
    args = cli.build_parser().parse_args(["pretrain", "--data", "x", "--config", str(cfg), "--seed", "9"])
    rc = cli.run_config(args)
    assert (rc.seed, rc.median_window, rc.fusion) == (9, 5, "channels")
    cfg.write_text("nonsense = 1\n")
    assert run_cli("pretrain", "--data", tmp_path, "--config", cfg) == 2


def test_even_median_window_rejected(tiny_dataset, tmp_path):
    assert run_cli("pretrain", "--data", tiny_dataset, "--out", tmp_path, "--median-window", 4) == 1


@pytest.mark.slow
def test_predict_then_evaluate(trained_run, capsys):
    common = trained_run["common"]
    capsys.readouterr()
    assert run_cli("evaluate", *common) == 0
    out = capsys.readouterr().out
    av = next(l for l in out.splitlines() if l.strip().startswith("Av."))
    mean_f1 = float(av.split("|")[1].split()[2]) / 100
    assert mean_f1 >= 0.85
    assert run_cli("evaluate", *common, "--by-view") == 0
    assert "predicted_view=V9" in capsys.readouterr().out


@pytest.mark.slow
def test_predict_does_not_touch_dataset(trained_run, tmp_path):
    before = _tree_digest(trained_run["data"])
    out = tmp_path / "again"
    import shutil
    shutil.copytree(trained_run["out"], out)
    common = ("--data", trained_run["data"], "--out", out, "--seed", 0)
    assert run_cli("predict", *common) == 0
    assert _tree_digest(trained_run["data"]) == before
    a = sorted((trained_run["out"] / "predictions").glob("*.csv"))
    b = sorted((out / "predictions").glob("*.csv"))
    assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]


@pytest.mark.slow
def test_saliency_command(trained_run, tmp_path):
    common = ("--data", trained_run["data"], "--out", trained_run["out"])
    assert run_cli("saliency", *common, "--au", 12, "--view", "V1", "--patch", 16, "--stride", 8) == 0
    assert list((trained_run["out"] / "saliency").glob("*AU12_horizontal.npy"))
