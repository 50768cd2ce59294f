"""Distances -> similarities -> waveform/proportion scores -> stage logits."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigError, ShapeError

EPS_SIM = 1e-4


def similarity(dist: torch.Tensor, eps: float = EPS_SIM) -> torch.Tensor:
    """log((d + 1) / (d + eps)); strictly decreasing in d, tends to 0 as d grows."""
    if not 0.0 < eps < 1.0:
        raise ConfigError(f"similarity epsilon must be in (0, 1), got {eps}")
    return torch.log((dist + 1.0) / (dist + eps))


def wscore(sim: torch.Tensor, norm: nn.Module | None = None) -> torch.Tensor:
    """Presence score: max over patches, then normalization and ReLU. (N, M, P) -> (N, M)."""
    v = sim.amax(dim=-1)
    return torch.relu(v if norm is None else norm(v))


def pscore(sim: torch.Tensor, norm: nn.Module | None = None) -> torch.Tensor:
    """Proportion score: mean over patches, then normalization and ReLU."""
    v = sim.mean(dim=-1)
    return torch.relu(v if norm is None else norm(v))


@dataclass
class StagePrediction:
    logits: torch.Tensor
    activations: torch.Tensor
    probabilities: torch.Tensor
    predicted: torch.Tensor


def predict_from_logits(logits: torch.Tensor) -> StagePrediction:
    act = torch.sigmoid(logits)
    prob = act / act.sum(dim=-1, keepdim=True)
    # torch.argmax returns the first maximal index, i.e. the lower stage code on ties
    return StagePrediction(logits, act, prob, torch.argmax(act, dim=-1))


class DecisionHead(nn.Module):
    """Batch-normalized score paths and the linear layer mapping Score (2M) to 5 logits.

    The linear layer is evaluated in float64 whatever the parameter dtype. Products of
    float32 values are exact in float64, so the per-prototype contributions sum back
    to the logits with rounding error near 1e-15 instead of float32's 1e-7.
    """

    def __init__(self, num_prototypes: int, num_classes: int = 5):
        super().__init__()
        self.M = num_prototypes
        self.w_norm = nn.BatchNorm1d(num_prototypes)
        self.p_norm = nn.BatchNorm1d(num_prototypes)
        self.fc = nn.Linear(2 * num_prototypes, num_classes)

    @property
    def weight_matrix(self) -> torch.Tensor:
        """FC weights as a (2M, classes) matrix; rows 0..M-1 are WScore, M..2M-1 PScore."""
        return self.fc.weight.t()

    def scores(self, sim: torch.Tensor) -> torch.Tensor:
        return torch.cat([wscore(sim, self.w_norm), pscore(sim, self.p_norm)], dim=-1)

    def forward(self, score: torch.Tensor) -> torch.Tensor:
        if score.shape[-1] != 2 * self.M:
            raise ShapeError(f"score length {score.shape[-1]} != 2M = {2 * self.M}")
        return nn.functional.linear(score.double(), self.fc.weight.double(), self.fc.bias.double())


def decide(score: torch.Tensor, head: DecisionHead) -> StagePrediction:
    return predict_from_logits(head(score))


def contribution_matrix(score: torch.Tensor, head: DecisionHead) -> torch.Tensor:
    """Score[i] * W[i, c]; shape (..., 2M, classes). Column sums plus bias give the logits."""
    if score.shape[-1] != 2 * head.M:
        raise ShapeError(f"score length {score.shape[-1]} != 2M = {2 * head.M}")
    return score.double().unsqueeze(-1) * head.weight_matrix.double()
