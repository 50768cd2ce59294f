"""Training objective: classification, prototype diversity, two clustering terms, L1."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import torch

from .errors import ConfigError, NumericError, ValidationError

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
# Mean-min distances below 1 would flip the sign of the log; clamping at 1 bounds the
# penalty at 1 / eps for collapsed prototypes and keeps it nonnegative.
DIST_FLOOR = 1.0
EPS_DIV = 1e-4


@dataclass(frozen=True)
class LossWeights:
    cls: float = 50.0
    dist: float = 8.0
    r1: float = 9.0
    r2: float = 18.0
    l1: float = 0.3

    def __post_init__(self):
        if min(asdict(self).values()) < 0:
            raise ConfigError("loss weights must be nonnegative")


@dataclass
class LossBreakdown:
    l_class: torch.Tensor
    l_dist: torch.Tensor
    l_r1: torch.Tensor
    l_r2: torch.Tensor
    l_l1: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(v.detach()) for k, v in vars(self).items()}


def class_loss(probabilities: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log probability of the true stage."""
    p = probabilities.gather(1, labels.long().view(-1, 1)).squeeze(1)
    if bool((p < PROB_FLOOR).any()):
        log.warning("true-class probability below %g clamped", PROB_FLOOR)
    return -torch.log(p.clamp_min(PROB_FLOOR)).mean()


def pairwise_sq_dists(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """(A, D), (B, D) -> (A, B) squared L2 distances, computed from differences.

    Coordinates are accumulated left to right, so the result equals a plain loop
    bit for bit (a vectorised reduction would reorder the additions).
    """
    cols_a, cols_b = a.unbind(1), b.unbind(1)
    d = (cols_a[0][:, None] - cols_b[0][None, :]).pow(2)
    for x, y in zip(cols_a[1:], cols_b[1:]):
        d = d + (x[:, None] - y[None, :]).pow(2)
    return d


def diversity_loss(prototypes: torch.Tensor, eps: float = EPS_DIV) -> torch.Tensor:
    """1 / (log(mean_j min_{i != j} ||w_i - w_j||^2) + eps)."""
    M = prototypes.shape[0]
    if M < 2:
        raise ConfigError("diversity loss needs at least two prototypes")
    w = prototypes.reshape(M, -1)
    d = pairwise_sq_dists(w, w)
    d = d + torch.diag(torch.full((M,), float("inf"), dtype=d.dtype, device=d.device))
    mean_min = d.amin(dim=1).mean().clamp_min(DIST_FLOOR)
    return 1.0 / (torch.log(mean_min) + eps)


def _check(patches: torch.Tensor, prototypes: torch.Tensor):
    if patches.shape[0] == 0:
        raise ValidationError("empty patch set")
    if prototypes.shape[0] == 0:
        raise ValidationError("empty prototype bank")


def nearest_sq_dists(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """For every row of ``a``, the squared distance to its closest row of ``b``."""
    return pairwise_sq_dists(a, b).amin(dim=1)


def r1_loss(prototypes: torch.Tensor, patches: torch.Tensor) -> torch.Tensor:
    """Mean over prototypes of the squared distance to the closest patch."""
    _check(patches, prototypes)
    return nearest_sq_dists(prototypes.reshape(prototypes.shape[0], -1), patches).mean()


def r2_loss(prototypes: torch.Tensor, patches: torch.Tensor) -> torch.Tensor:
    """Mean over patches of the squared distance to the closest prototype."""
    _check(patches, prototypes)
    return nearest_sq_dists(patches, prototypes.reshape(prototypes.shape[0], -1)).mean()


def l1_loss(weight_matrix: torch.Tensor) -> torch.Tensor:
    return weight_matrix.abs().sum()


def total_loss(l_class, l_dist, l_r1, l_r2, l_l1, weights: LossWeights) -> LossBreakdown:
    terms = {"class": l_class, "dist": l_dist, "r1": l_r1, "r2": l_r2, "l1": l_l1}
    for name, v in terms.items():
        value = float(v.detach())
        if not math.isfinite(value):
            raise NumericError(f"loss term {name} is not finite ({value})")
    # accumulated in float64 so the total matches a recomputed weighted sum
    total = (
        weights.cls * l_class.double()
        + weights.dist * l_dist.double()
        + weights.r1 * l_r1.double()
        + weights.r2 * l_r2.double()
        + weights.l1 * l_l1.double()
    )
    return LossBreakdown(l_class, l_dist, l_r1, l_r2, l_l1, total)
