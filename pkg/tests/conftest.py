from pathlib import Path

import pytest

from uncspan import cli

# Small enough to run the whole pipeline in seconds, and with more test rows
# than one attack chunk so --threads actually splits the work.
SMALL_CONFIG = """\
[experiment]
seed = 7

[data]
n_train = 600
n_test = 1100
n_out = 120

[model]
hidden = 8, 8

[train]
epochs = 3
epsilon = 0.1
inner_steps = 3

[attack]
epsilons = 0, 0.05, 0.1
steps = 5

[theory]
grid_n = 2000
convergence_tolerance = 1.0
"""

PIPELINE = ["generate", "train", "attack", "span", "calibrate", "ood-eval", "verify-theory", "report"]


def write_config(directory, text=SMALL_CONFIG, extra=""):
    path = Path(directory) / "experiment.ini"
    path.write_text(text + extra)
    return path


def run_pipeline(config, out, threads=1):
    codes = {}
    for command in PIPELINE:
        codes[command] = cli.main([command, "--config", str(config), "--out", str(out), "--threads", str(threads)])
    return codes


def snapshot(out):
    out = Path(out)
    return {
        str(p.relative_to(out)): p.read_bytes()
        for p in sorted(out.rglob("*"))
        if p.is_file() and p.suffix in (".csv", ".json", ".ckpt")
    }


@pytest.fixture(scope="session")
def small_run(tmp_path_factory):
    """Full pipeline on the small config, once with 1 thread and once with 4."""
    root = tmp_path_factory.mktemp("pipeline")
    config = write_config(root)
    codes_1 = run_pipeline(config, root / "t1", threads=1)
    codes_4 = run_pipeline(config, root / "t4", threads=4)
    return {"config": config, "root": root, "codes": (codes_1, codes_4),
            "out": root / "t1", "out4": root / "t4"}


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
