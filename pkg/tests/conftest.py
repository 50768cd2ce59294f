import numpy as np
import pytest
import torch

from protosleep.data import DatasetConfig, Recording
from protosleep.features import AFRConfig, BranchConfig, FeatureConfig, MRCNNConfig, StackedCNNConfig
from protosleep.model import ModelConfig, PrototypeSleepNet

TINY_FEATURES = FeatureConfig(
    MRCNNConfig(BranchConfig(8, 10, 2, 2, 2, 3), BranchConfig(8, 40, 5, 2, 2, 3), dropout=0.0),
    AFRConfig(8, 4),
    StackedCNNConfig(1, 1, 3, 3, 2),
)
TINY_DATA = DatasetConfig(epoch_seconds=2, sampling_hz=50, window_len=2)


def central_diff(f, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    """Central finite-difference gradient of scalar ``f`` at ``x`` (float64)."""
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + h
            up = float(f())
            flat[i] = old - h
            down = float(f())
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
    return g


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    a, b = a.detach().double().ravel(), b.detach().double().ravel()
    denom = max(a.norm().item(), b.norm().item(), 1e-300)
    return (a - b).norm().item() / denom


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    return PrototypeSleepNet(ModelConfig(TINY_FEATURES, num_prototypes=6), TINY_DATA, seed=0)


def make_recording(subject_id, labels, epoch_samples, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels, dtype=np.uint8)
    return Recording(subject_id, rng.standard_normal(len(labels) * epoch_samples).astype(np.float32), labels)


@pytest.fixture
def tiny_recordings():
    rng = np.random.default_rng(1)
    return [
        make_recording(f"S{i}", rng.integers(0, 5, 12), TINY_DATA.epoch_samples, seed=i) for i in range(4)
    ]


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
