from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .data import DatasetConfig
from .decision import EPS_SIM, DecisionHead, StagePrediction, predict_from_logits, similarity
from .features import FeatureConfig, FeatureExtractor, branch_length
from .losses import EPS_DIV
from .sensing import PrototypeBank


@dataclass(frozen=True)
class ModelConfig:
    features: FeatureConfig = field(default_factory=FeatureConfig)
    num_prototypes: int = 8
    prototype_len: int = 1
    eps_sim: float = EPS_SIM
    eps_div: float = EPS_DIV

    def to_dict(self) -> dict:
        return {
            "features": self.features.to_dict(),
            "num_prototypes": self.num_prototypes,
            "prototype_len": self.prototype_len,
            "eps_sim": self.eps_sim,
            "eps_div": self.eps_div,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            FeatureConfig.from_dict(d["features"]),
            int(d["num_prototypes"]),
            int(d["prototype_len"]),
            float(d["eps_sim"]),
            float(d["eps_div"]),
        )


@dataclass
class ModelOutput:
    features: torch.Tensor  # N C K
    dist: torch.Tensor  # N M P
    sim: torch.Tensor  # N M P
    score: torch.Tensor  # N 2M, [WScore | PScore]
    logits: torch.Tensor  # N 5

    def prediction(self) -> StagePrediction:
        return predict_from_logits(self.logits)


def model_dims(cfg: ModelConfig, data_cfg: DatasetConfig) -> dict:
    n = data_cfg.window_samples
    K = branch_length(n, cfg.features.mrcnn.small) + branch_length(n, cfg.features.mrcnn.large)
    return {
        "K": K,
        "C": cfg.features.afr.reduce_channels,
        "M": cfg.num_prototypes,
        "K1": cfg.prototype_len,
        "P": K - cfg.prototype_len + 1,
        "input_samples": n,
    }


class PrototypeSleepNet(nn.Module):
    """Feature extractor -> prototype distances -> presence/proportion scores -> logits."""

    def __init__(self, cfg: ModelConfig, data_cfg: DatasetConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.data_cfg = data_cfg
        gen = torch.Generator().manual_seed(seed)
        self.extractor = FeatureExtractor(cfg.features, data_cfg.window_samples)
        if cfg.prototype_len > self.extractor.K:
            raise ValueError(f"prototype length {cfg.prototype_len} exceeds K={self.extractor.K}")
        self.bank = PrototypeBank(cfg.num_prototypes, self.extractor.C, cfg.prototype_len, generator=gen)
        self.head = DecisionHead(cfg.num_prototypes, data_cfg.num_classes)

    @property
    def M(self) -> int:
        return self.cfg.num_prototypes

    def describe(self) -> dict:
        return model_dims(self.cfg, self.data_cfg)

    def decide_from_features(self, s: torch.Tensor) -> ModelOutput:
        dist = self.bank(s)
        sim = similarity(dist, self.cfg.eps_sim)
        score = self.head.scores(sim)
        return ModelOutput(s, dist, sim, score, self.head(score))

    def forward_detailed(self, x: torch.Tensor) -> ModelOutput:
        return self.decide_from_features(self.extractor(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_detailed(x).logits

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.extractor(x)

    def min_distances(self, x: torch.Tensor) -> torch.Tensor:
        return self.bank(self.extractor(x)).amin(dim=-1)
