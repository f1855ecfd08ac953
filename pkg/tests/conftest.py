from __future__ import annotations

import pytest
import torch

from tsasd.dataset import SyntheticCorpusSpec, generate_synthetic


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """4 identities x 3 tracks x 60 frames; returns (manifest path, entries)."""
    spec = SyntheticCorpusSpec(n_identities=4, tracks_per_identity=3, track_length=60, seed=11)
    return generate_synthetic(spec, tmp_path_factory.mktemp("corpus"))


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
