from __future__ import annotations

import sys
from pathlib import Path

import torch

# oracles.py lives next to the tests
sys.path.insert(0, str(Path(__file__).parent))
torch.set_num_threads(1)

# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
