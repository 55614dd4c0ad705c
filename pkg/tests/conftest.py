import os
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

MNIST_DIR = Path(os.environ.get("INOSGD_MNIST_DIR", "/root/data/mnist"))
MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def mnist_paths():
    """Resolved MNIST file paths, accepting plain or gzipped files; None if absent."""
    out = {}
    for key, name in MNIST_FILES.items():
        for cand in (MNIST_DIR / name, MNIST_DIR / (name + ".gz")):
            if cand.exists():
                out[key] = str(cand)
                break
        else:
            return None
    return out


@pytest.fixture
def mnist():
    paths = mnist_paths()
    if paths is None:
        pytest.skip(f"MNIST files not found under {MNIST_DIR}")
    return paths


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report():
    """Record one pass/fail line per acceptance criterion."""

    def _report(number: int, title: str, ok: bool, detail: str):
        ACCEPTANCE_LINES.append(f"ACCEPTANCE {number} {'PASS' if ok else 'FAIL'}: {title} | {detail}")
        return ok

    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
