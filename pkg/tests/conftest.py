import re

import pytest
import torch

from avse import corpus

torch.set_num_threads(1)

TINY = corpus.SyntheticSpec(train_speakers=2, test_speakers=1, utterances_per_speaker=2,
                            min_duration=1.0, max_duration=1.3, noise_duration=3.0)

# Small enough for unit tests; latent width shrunk from 2048 to keep them fast.
TINY_CONFIG = {
    "autoencoder.widths": [4],
    "autoencoder.latent_dim": 64,
    "ae_training.epochs": 1,
    "model.conv_channels": [2, 2, 2],
    "model.lstm_hidden": 8,
    "model.fc2": 16,
    "model.latent_dim": 64,
    "training.epochs": 2,
    "training.batch_size": 4,
    "training.lr": 1e-3,
    "training.budget": 6,
}


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    return corpus.generate_synthetic_corpus(root, TINY, seed=11)


ACCEPTANCE = {}
DETAILS = {}
CRITERIA = {1: "EOFP bit-exactness", 2: "figure decode", 3: "compression ratios", 4: "DSP round trip",
            5: "gradient suite", 6: "augmentation exactness", 7: "desk-scale training smoke",
            8: "zero-out robustness", 9: "asynchronization robustness", 10: "STOI validity"}


def note(number: int, text: str) -> None:
    """Attach measured values to a criterion's summary line."""
    DETAILS[number] = text


def pytest_runtest_logreport(report):
    match = re.search(r"test_acceptance\.py::.*::test_c(\d+)_", report.nodeid)
    if match and (report.when == "call" or report.failed):
        number = int(match.group(1))
        if ACCEPTANCE.get(number) != "FAIL":
            ACCEPTANCE[number] = "PASS" if report.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        detail = f"  ({DETAILS[number]})" if number in DETAILS else ""
        terminalreporter.write_line(f"{ACCEPTANCE[number]}  criterion {number:2d}: {CRITERIA[number]}{detail}")
