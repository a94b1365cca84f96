from pathlib import Path

import pytest

from shiftcloud.cli import main

TINY_TRACK = """name = tiny
[segments]
straight 30
arc 25 40
straight 25
"""

TINY_CONFIG = """[world]
width = 160
height = 48
spacing = 2.0
[cloud]
target_points = 64
[augment]
offsets = -1, 1
[model]
point_dims = 3, 8, 16
head_dims = 16, 8, 1
[train]
epochs = 2
[eval]
frames = 12
starts = 5
alpha = 0.3
"""


def write_tiny(root) -> tuple[str, str]:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "tiny.track").write_text(TINY_TRACK)
    (root / "tiny.ini").write_text(TINY_CONFIG)
    return str(root / "tiny.track"), str(root / "tiny.ini")


def run_chain(root, seed=7) -> Path:
    """gen-world -> gen-dataset -> train -> evaluate through the CLI."""
    root = Path(root)
    track, ini = write_tiny(root)
    common = ["--seed", str(seed), "--config", ini]
    steps = [
        ["gen-world", "--track", track, "--out", str(root / "world")],
        ["gen-dataset", "--world", str(root / "world"), "--out", str(root / "data")],
        ["train", "--dataset", str(root / "data"), "--out", str(root / "model")],
        ["evaluate", "--checkpoint", f"ours={root / 'model' / 'model.ckpt'}", "--tracks", track,
         "--calib", track, "--out", str(root / "eval")],
    ]
    for argv in steps:
        assert main(argv + common) == 0, argv
    return root


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    return run_chain(tmp_path_factory.mktemp("tiny"))


def pytest_configure(config):
    config._criteria = {}


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` prints and records one acceptance line."""
    results = request.config._criteria

    def record(n, ok, detail=""):
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        results[n] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, "_criteria", {})
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
