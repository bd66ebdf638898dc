import shutil
import time
from pathlib import Path

import pytest

from aunets import cli
from aunets.datakit import SYNTH_AUS, VIEWS


def run_cli(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """A small synthetic set for loader / CLI plumbing tests."""
    root = tmp_path_factory.mktemp("tiny") / "synth"
    assert run_cli("gen-data", "--out", root, "--subjects", 3, "--views", 2, "--frames", 12, "--seed", 3) == 0
    return root


@pytest.fixture(scope="session")
def trained_run(tmp_path_factory):
    """The full cascade trained through the CLI: 6 subjects x 9 views x 48 frames, TINY profile.

    Returns a dict with the dataset root, the run directory and wall-clock
    time per stage. Shared by every end-to-end test.
    """
    base = tmp_path_factory.mktemp("e2e")
    data, out = base / "synth", base / "run"
    times = {}
    t = time.perf_counter()
    assert run_cli("gen-data", "--out", data, "--seed", 0) == 0
    times["gen-data"] = time.perf_counter() - t
    common = ("--data", data, "--out", out, "--seed", 0, "--profile", "tiny", "--fusion", "horizontal")
    for stage in ("pretrain", "train-view"):
        t = time.perf_counter()
        assert run_cli(stage, *common) == 0
        times[stage] = time.perf_counter() - t
    t = time.perf_counter()
    for view in VIEWS:
        for au in SYNTH_AUS:
            assert run_cli("train-au", *common, "--au", au, "--view", view) == 0
    times["train-au"] = time.perf_counter() - t
    t = time.perf_counter()
    assert run_cli("predict", *common) == 0
    times["predict"] = time.perf_counter() - t
    return {"data": data, "out": out, "common": common, "times": times}


@pytest.fixture
def copy_run(trained_run, tmp_path):
    """A private copy of the trained run directory, safe to modify."""
    dst = tmp_path / "run"
    shutil.copytree(trained_run["out"], dst)
    return dst
