import pytest
import torch

from ucmar.data_sim import DatasetConfig, build_dataset
from ucmar.train import TrainConfig

torch.set_num_threads(1)

# Lines recorded by tests/test_acceptance.py, echoed in the terminal summary.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def tiny_dataset():
    """24 train / 6 test pairs on a 32 x 32 grid."""
    return build_dataset(DatasetConfig(n_train=24, n_test=6, grid_size=32, mask_bank_size=12, n_test_masks=3, seed=3))


@pytest.fixture
def tiny_config():
    return TrainConfig(
        grid_size=32,
        depth=2,
        base_channels=8,
        phase1_epochs=3,
        checkpoint_epochs=(1, 2, 3),
        total_epochs=3,
        anneal_period=6,
        batch_size=4,
        base_lr=1e-3,
        min_lr=1e-5,
    )
