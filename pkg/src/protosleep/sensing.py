"""Wave prototypes: patch distances, nearest-patch search, projection, occlusion.

Feature maps are (N, C, K); prototypes are (M, C, K1); distance maps are (N, M, P)
with P = K - K1 + 1 patches taken at stride 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, ShapeError, ValidationError


@dataclass
class PrototypeSource:
    subject_id: str
    epoch_index: int
    patch: int
    distance: float

    def to_dict(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "epoch_index": self.epoch_index,
            "patch": self.patch,
            "distance": self.distance,
        }


@dataclass
class PrototypeMeta:
    projected: bool = False
    source: PrototypeSource | None = None
    occlusion: tuple[float, float] | None = None

    def to_dict(self) -> dict:
        return {
            "projected": self.projected,
            "source": None if self.source is None else self.source.to_dict(),
            "occlusion": None if self.occlusion is None else list(self.occlusion),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PrototypeMeta":
        src = d.get("source")
        occ = d.get("occlusion")
        return cls(
            bool(d.get("projected", False)),
            None if src is None else PrototypeSource(**src),
            None if occ is None else tuple(occ),
        )


class PrototypeBank(nn.Module):
    def __init__(self, num_prototypes: int, channels: int, length: int = 1, generator=None):
        super().__init__()
        if num_prototypes < 1 or length < 1:
            raise ConfigError("need at least one prototype of length >= 1")
        init = torch.rand(num_prototypes, channels, length, generator=generator)
        self.prototypes = nn.Parameter(init)
        self.meta = [PrototypeMeta() for _ in range(num_prototypes)]

    @property
    def M(self) -> int:
        return self.prototypes.shape[0]

    @property
    def K1(self) -> int:
        return self.prototypes.shape[2]

    @property
    def projected(self) -> bool:
        return all(m.projected for m in self.meta)

    def forward(self, s):
        return distance_map(s, self.prototypes)


def extract_patches(s: torch.Tensor, K1: int) -> torch.Tensor:
    """(N, C, K) -> (N, C, P, K1): every length-K1 window along time, stride 1."""
    K = s.shape[-1]
    if not 1 <= K1 <= K:
        raise ShapeError(f"patch length {K1} must be in 1..{K}")
    return s.unfold(-1, K1, 1)


def distance_map(s: torch.Tensor, prototypes: torch.Tensor) -> torch.Tensor:
    """Squared L2 distance between every prototype and every patch: (N, M, P)."""
    if s.shape[1] != prototypes.shape[1]:
        raise ShapeError(f"feature channels {s.shape[1]} != prototype channels {prototypes.shape[1]}")
    patches = extract_patches(s, prototypes.shape[2])  # N C P K1
    diff = patches.unsqueeze(1) - prototypes[None, :, :, None, :]  # N M C P K1
    return diff.pow(2).sum(dim=(2, 4))


def flat_patches(s: torch.Tensor, K1: int) -> torch.Tensor:
    """All patches of a batch as rows: (N * P, C * K1)."""
    p = extract_patches(s, K1)  # N C P K1
    N, C, P, _ = p.shape
    return p.permute(0, 2, 1, 3).reshape(N * P, C * K1)


@dataclass
class Match:
    window: int
    patch: int
    distance: float
    ref: tuple = field(default=())


def _ordered(refs) -> np.ndarray:
    return np.array(sorted(range(len(refs)), key=lambda i: refs[i]), dtype=np.int64)


def _prototype_distances(prototype: torch.Tensor, features: torch.Tensor, chunk: int = 256) -> torch.Tensor:
    out = []
    with torch.no_grad():
        for i in range(0, len(features), chunk):
            out.append(distance_map(features[i : i + chunk], prototype[None])[:, 0])
    return torch.cat(out)


def nearest_patches(prototype, features, refs, n: int = 1, dedupe=None) -> list[Match]:
    """The ``n`` closest patches to one prototype, ascending by distance.

    Ties break by (ref, patch index) ascending. ``dedupe(window, patch)`` returns a
    key; only the closest patch per key is kept.
    """
    if len(features) == 0:
        raise ValidationError("nearest-patch search over an empty feature set")
    if len(refs) != len(features):
        raise ShapeError("one ref per feature map required")
    order = _ordered(refs)
    d = _prototype_distances(prototype, features[torch.as_tensor(order)]).double().cpu().numpy()
    P = d.shape[1]
    flat = d.ravel()
    ranked = np.argsort(flat, kind="stable")
    out, seen = [], set()
    for idx in ranked:
        w, p = int(order[idx // P]), int(idx % P)
        if dedupe is not None:
            key = dedupe(w, p)
            if key in seen:
                continue
            seen.add(key)
        out.append(Match(w, p, float(flat[idx]), tuple(refs[w])))
        if len(out) == n:
            break
    return out


def nearest_patch(bank: PrototypeBank, j: int, features, refs) -> Match:
    return nearest_patches(bank.prototypes[j].detach(), features, refs, 1)[0]


def project_prototypes(bank: PrototypeBank, features, refs) -> PrototypeBank:
    """Replace every prototype by its nearest training patch, in place."""
    K1 = bank.K1
    matches = [nearest_patch(bank, j, features, refs) for j in range(bank.M)]
    with torch.no_grad():
        for j, m in enumerate(matches):
            patch = features[m.window, :, m.patch : m.patch + K1]
            bank.prototypes[j].copy_(patch.to(bank.prototypes.dtype))
            sid, eidx = m.ref
            bank.meta[j] = PrototypeMeta(True, PrototypeSource(str(sid), int(eidx), m.patch, m.distance))
    return bank


@dataclass
class OcclusionResult:
    onset_s: float
    duration_s: float
    curve: np.ndarray
    base_distance: float

    def to_dict(self) -> dict:
        return {
            "onset_s": self.onset_s,
            "duration_s": self.duration_s,
            "base_distance": self.base_distance,
            "curve": [float(v) for v in self.curve],
        }


def occlusion_positions(n_samples: int, win: int, stride: int) -> int:
    if win > n_samples:
        raise ConfigError(f"occlusion window of {win} samples exceeds the {n_samples}-sample signal")
    if win < 1 or stride < 1:
        raise ConfigError("occlusion window and stride must cover at least one sample")
    return (n_samples - win) // stride + 1


def occlusion_localize(
    min_distance_fn,
    j: int,
    signal,
    sampling_hz: int,
    win_s: float = 1.0,
    stride_s: float = 0.25,
    batch: int = 32,
) -> OcclusionResult:
    """Slide a zero mask over ``signal`` and track prototype ``j``'s minimum patch distance.

    ``min_distance_fn(x)`` maps a (B, T) float tensor to (B, M) minimum distances. The
    curve holds the distance increase at each mask position; the returned interval is
    the position with the largest increase (first one on ties).
    """
    x = torch.as_tensor(np.asarray(signal), dtype=torch.float32)
    T = x.shape[-1]
    win, stride = int(round(win_s * sampling_hz)), int(round(stride_s * sampling_hz))
    n = occlusion_positions(T, win, stride)
    with torch.no_grad():
        base = float(min_distance_fn(x[None])[0, j])
        curve = np.empty(n, dtype=np.float64)
        for start in range(0, n, batch):
            idx = range(start, min(n, start + batch))
            xs = x.repeat(len(idx), 1)
            for r, i in enumerate(idx):
                xs[r, i * stride : i * stride + win] = 0.0
            curve[start : start + len(idx)] = min_distance_fn(xs)[:, j].double().numpy() - base
    best = int(np.argmax(curve))
    return OcclusionResult(best * stride / sampling_hz, win / sampling_hz, curve, base)
