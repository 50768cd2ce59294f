"""Feature extraction: raw window -> feature map s of shape (C, K).

Tensors follow the torch convention (batch, channels, time), so a feature map
is stored as (N, C, K) and a patch is a (C, K1) slice along the time axis.

Shape arithmetic (no padding in the two-scale front end) for the default
30 s x 100 Hz x 10 epoch window (30,000 samples):

    small: conv(50, /6) 4992 -> pool(4, /4) 1248 -> conv(7) 1242 -> pool(4, /4) 310
    large: conv(400, /50) 593 -> pool(4, /4) 148 -> conv(7) 142 -> pool(4, /4) 35
    concat along time: K = 345, C = 64
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch import nn

from .errors import ConfigError, NumericError, ShapeError


@dataclass(frozen=True)
class BranchConfig:
    filters: int
    kernel: int
    stride: int
    pool: int = 4
    pool_stride: int = 4
    conv2_kernel: int = 7


@dataclass(frozen=True)
class MRCNNConfig:
    small: BranchConfig = BranchConfig(64, 50, 6)
    large: BranchConfig = BranchConfig(64, 400, 50)
    dropout: float = 0.5


@dataclass(frozen=True)
class AFRConfig:
    reduce_channels: int = 64
    se_reduction: int = 16


@dataclass(frozen=True)
class StackedCNNConfig:
    num_blocks: int = 2
    units_per_block: int = 2
    block_kernel: int = 3
    depthwise_kernel: int = 7
    expansion: int = 2


@dataclass(frozen=True)
class FeatureConfig:
    mrcnn: MRCNNConfig = MRCNNConfig()
    afr: AFRConfig = AFRConfig()
    stacked: StackedCNNConfig = StackedCNNConfig()
    # "sigmoid" squashes the feature map into (0, 1), the range prototypes are initialized in
    output_activation: str = "sigmoid"

    def __post_init__(self):
        if self.output_activation not in ("sigmoid", "none"):
            raise ConfigError(f"unknown output_activation {self.output_activation!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureConfig":
        m = d["mrcnn"]
        return cls(
            MRCNNConfig(BranchConfig(**m["small"]), BranchConfig(**m["large"]), m["dropout"]),
            AFRConfig(**d["afr"]),
            StackedCNNConfig(**d["stacked"]),
            d.get("output_activation", "sigmoid"),
        )


def _conv_len(n: int, kernel: int, stride: int) -> int:
    return (n - kernel) // stride + 1


def branch_layers(b: BranchConfig) -> list[tuple[int, int]]:
    """(kernel, stride) of every time-resampling layer in a branch, in order."""
    return [(b.kernel, b.stride), (b.pool, b.pool_stride), (b.conv2_kernel, 1), (b.pool, b.pool_stride)]


def branch_length(n: int, b: BranchConfig) -> int:
    for k, s in branch_layers(b):
        n = _conv_len(n, k, s)
        if n < 1:
            raise ShapeError(f"input too short for branch with kernel {b.kernel}")
    return n


def branch_spans(n: int, b: BranchConfig) -> list[tuple[int, int]]:
    """Input-sample span [start, stop) of each output position (receptive field)."""
    rf, jump = 1, 1
    for k, s in branch_layers(b):
        rf += (k - 1) * jump
        jump *= s
    return [(p * jump, p * jump + rf) for p in range(branch_length(n, b))]


class Branch(nn.Module):
    def __init__(self, b: BranchConfig):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv1d(1, b.filters, b.kernel, b.stride, bias=False),
            nn.BatchNorm1d(b.filters),
            nn.GELU(),
            nn.MaxPool1d(b.pool, b.pool_stride),
            nn.Conv1d(b.filters, b.filters, b.conv2_kernel, bias=False),
            nn.BatchNorm1d(b.filters),
            nn.GELU(),
            nn.MaxPool1d(b.pool, b.pool_stride),
        )

    def forward(self, x):
        return self.net(x)


class MRCNN(nn.Module):
    """Two convolutional branches at different time scales, joined along time."""

    def __init__(self, cfg: MRCNNConfig, input_len: int):
        super().__init__()
        if cfg.small.filters != cfg.large.filters:
            raise ShapeError("both branches must end with the same channel count")
        self.cfg = cfg
        self.input_len = input_len
        self.small = Branch(cfg.small)
        self.large = Branch(cfg.large)
        self.dropout = nn.Dropout(cfg.dropout)
        self.out_len = branch_length(input_len, cfg.small) + branch_length(input_len, cfg.large)
        self.out_channels = cfg.small.filters

    def forward(self, x):
        if x.dim() == 2:
            x = x.unsqueeze(1)
        if x.dim() != 3 or x.shape[1] != 1 or x.shape[-1] != self.input_len:
            raise ShapeError(f"expected (N, 1, {self.input_len}) input, got {tuple(x.shape)}")
        return self.dropout(torch.cat([self.small(x), self.large(x)], dim=-1))

    def position_spans(self) -> list[tuple[int, int]]:
        return branch_spans(self.input_len, self.cfg.small) + branch_spans(self.input_len, self.cfg.large)


class SqueezeExcite(nn.Module):
    def __init__(self, channels: int, reduction: int):
        super().__init__()
        self.fc = nn.Sequential(
            nn.Linear(channels, channels // reduction),
            nn.ReLU(),
            nn.Linear(channels // reduction, channels),
            nn.Sigmoid(),
        )

    def forward(self, x):
        return self.fc(x.mean(dim=-1)).unsqueeze(-1)


class AFR(nn.Module):
    """Residual squeeze-and-excitation recalibration.

    ``out = residual(x) + gate * features(x)`` where ``gate`` is in (0, 1) per
    channel. Passing ``gate`` overrides the learned excitation (used to probe the
    two extremes).
    """

    def __init__(self, in_channels: int, cfg: AFRConfig):
        super().__init__()
        C = cfg.reduce_channels
        if C % cfg.se_reduction:
            raise ShapeError(f"reduce_channels {C} not divisible by se_reduction {cfg.se_reduction}")
        self.in_channels = in_channels
        self.features = nn.Sequential(
            nn.Conv1d(in_channels, C, 1, bias=False),
            nn.BatchNorm1d(C),
            nn.ReLU(),
            nn.Conv1d(C, C, 1, bias=False),
            nn.BatchNorm1d(C),
        )
        self.se = SqueezeExcite(C, cfg.se_reduction)
        self.residual = nn.Sequential(nn.Conv1d(in_channels, C, 1, bias=False), nn.BatchNorm1d(C))

    def forward(self, x, gate=None):
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"AFR expects {self.in_channels} channels, got {x.shape[1]}")
        f = self.features(x)
        g = self.se(f) if gate is None else gate
        return self.residual(x) + g * f


class ChannelLayerNorm(nn.LayerNorm):
    """LayerNorm over channels at every time position of an (N, C, K) tensor."""

    def forward(self, x):
        return super().forward(x.transpose(1, 2)).transpose(1, 2)


class ConvUnit(nn.Module):
    """Standard conv widening the channels, then a depthwise separable conv back."""

    def __init__(self, C: int, cfg: StackedCNNConfig):
        super().__init__()
        H = C * cfg.expansion
        self.net = nn.Sequential(
            nn.Conv1d(C, H, 1),
            nn.GELU(),
            nn.Conv1d(H, H, cfg.depthwise_kernel, padding=cfg.depthwise_kernel // 2, groups=H),
            nn.Conv1d(H, C, 1),
        )

    def forward(self, x):
        return self.net(x)


class ConvBlock(nn.Module):
    def __init__(self, C: int, cfg: StackedCNNConfig):
        super().__init__()
        self.conv = nn.Conv1d(C, C, cfg.block_kernel, padding=cfg.block_kernel // 2)
        self.norm = ChannelLayerNorm(C)
        self.units = nn.Sequential(*[ConvUnit(C, cfg) for _ in range(cfg.units_per_block)])

    def forward(self, x):
        r = self.norm(x + self.conv(x))
        return r + self.units(r)


class StackedCNN(nn.Module):
    def __init__(self, C: int, cfg: StackedCNNConfig):
        super().__init__()
        if cfg.num_blocks < 1 or cfg.units_per_block < 1:
            raise ShapeError("num_blocks and units_per_block must be >= 1")
        if cfg.block_kernel % 2 == 0 or cfg.depthwise_kernel % 2 == 0:
            raise ShapeError("stacked CNN kernels must be odd to preserve length")
        self.blocks = nn.Sequential(*[ConvBlock(C, cfg) for _ in range(cfg.num_blocks)])

    def forward(self, x):
        if not torch.isfinite(x).all():
            raise NumericError("non-finite values entering the stacked CNN")
        return self.blocks(x)


class FeatureExtractor(nn.Module):
    def __init__(self, cfg: FeatureConfig, input_len: int):
        super().__init__()
        self.cfg = cfg
        self.input_len = input_len
        self.mrcnn = MRCNN(cfg.mrcnn, input_len)
        self.afr = AFR(self.mrcnn.out_channels, cfg.afr)
        self.stacked = StackedCNN(cfg.afr.reduce_channels, cfg.stacked)

    @property
    def K(self) -> int:
        return self.mrcnn.out_len

    @property
    def C(self) -> int:
        return self.cfg.afr.reduce_channels

    def forward(self, x):
        s = self.stacked(self.afr(self.mrcnn(x)))
        return torch.sigmoid(s) if self.cfg.output_activation == "sigmoid" else s

    def position_spans(self) -> list[tuple[int, int]]:
        """Input-sample span of each feature position before the stacked CNN widens it."""
        return self.mrcnn.position_spans()
