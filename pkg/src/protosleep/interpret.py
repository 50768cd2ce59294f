"""Explanations: per-window scoring sheets, prototype cards, Score comparisons and exports.

Contributions are the raw linear terms Score[i] * W[i, c] before the sigmoid. The
sigmoid is monotone, so rankings by contribution are rankings by activation too.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import STAGES, EpochWindow
from .decision import contribution_matrix
from .errors import ValidationError
from .model import PrototypeSleepNet
from .sensing import OcclusionResult, nearest_patches, occlusion_localize
from .training import Inference, compute_features

CONTRIBUTION_NOTE = "contribution = Score * FC weight (pre-sigmoid); logit = sum of contributions + bias"


def row_labels(M: int) -> list[str]:
    """Names of the 2M Score entries: waveform estimators then proportion estimators."""
    return [f"WE{j}" for j in range(M)] + [f"PE{j}" for j in range(M)]


def _require_projected(model: PrototypeSleepNet):
    if not model.bank.projected:
        raise ValidationError(
            "prototypes are not projected onto training segments; "
            "train with final projection enabled (or run projection) before explaining"
        )


@dataclass
class ExplanationReport:
    ref: tuple
    actual: int | None
    predicted: int
    score: np.ndarray  # 2M
    contributions: np.ndarray  # 2M x 5
    bias: np.ndarray  # 5
    logits: np.ndarray  # 5, as computed by the model
    top: dict[str, list[tuple[str, float]]] = field(default_factory=dict)

    def reconstructed_logits(self) -> np.ndarray:
        return self.contributions.sum(axis=0) + self.bias

    def to_dict(self) -> dict:
        M = len(self.score) // 2
        return {
            "note": CONTRIBUTION_NOTE,
            "ref": list(self.ref),
            "actual": None if self.actual is None else STAGES[self.actual],
            "predicted": STAGES[self.predicted],
            "score": dict(zip(row_labels(M), map(float, self.score))),
            "logits": dict(zip(STAGES, map(float, self.logits))),
            "bias": dict(zip(STAGES, map(float, self.bias))),
            "contributions": {
                name: dict(zip(STAGES, map(float, row))) for name, row in zip(row_labels(M), self.contributions)
            },
            "top_contributors": {k: [[n, float(v)] for n, v in vs] for k, vs in self.top.items()},
        }

    def to_csv(self) -> str:
        """WE/PE contribution table: one row per Score entry, one column per stage."""
        M = len(self.score) // 2
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["estimator", "score", *STAGES])
        for name, s, row in zip(row_labels(M), self.score, self.contributions):
            w.writerow([name, repr(float(s)), *(repr(float(v)) for v in row)])
        w.writerow(["bias", "", *(repr(float(v)) for v in self.bias)])
        return buf.getvalue()


@torch.no_grad()
def explain(model: PrototypeSleepNet, window, top_k: int = 3) -> ExplanationReport:
    """Scoring sheet for one window (an ``EpochWindow`` or a raw signal array)."""
    _require_projected(model)
    model.eval()
    if isinstance(window, EpochWindow):
        signal, ref, actual = window.signal, window.ref, int(window.label)
    else:
        signal, ref, actual = window, (), None
    x = torch.as_tensor(np.asarray(signal, dtype=np.float32))[None]
    out = model.forward_detailed(x)
    contrib = contribution_matrix(out.score, model.head)[0].numpy()
    names = row_labels(model.M)
    top = {}
    for c, stage in enumerate(STAGES):
        order = np.argsort(-contrib[:, c], kind="stable")[:top_k]
        top[stage] = [(names[i], float(contrib[i, c])) for i in order]
    return ExplanationReport(
        ref=tuple(ref),
        actual=actual,
        predicted=int(out.prediction().predicted[0]),
        score=out.score[0].double().numpy(),
        contributions=contrib,
        bias=model.head.fc.bias.detach().double().numpy(),
        logits=out.logits[0].double().numpy(),
        top=top,
    )


@dataclass
class CardSegment:
    ref: tuple
    patch: int
    distance: float
    onset_s: float  # receptive-field span of the patch within its window
    duration_s: float


@dataclass
class PrototypeCard:
    index: int
    segments: list[CardSegment]
    we_weights: np.ndarray  # 5
    pe_weights: np.ndarray  # 5
    dominant_stage: int  # stage receiving the largest contribution on the source window
    occlusion: OcclusionResult | None = None

    @property
    def source(self) -> tuple:
        return self.segments[0].ref

    def to_dict(self) -> dict:
        return {
            "prototype": self.index,
            "dominant_stage": STAGES[self.dominant_stage],
            "we_weights": dict(zip(STAGES, map(float, self.we_weights))),
            "pe_weights": dict(zip(STAGES, map(float, self.pe_weights))),
            "segments": [
                {
                    "ref": list(s.ref),
                    "patch": s.patch,
                    "distance": s.distance,
                    "onset_s": s.onset_s,
                    "duration_s": s.duration_s,
                }
                for s in self.segments
            ],
            "occlusion": None if self.occlusion is None else self.occlusion.to_dict(),
        }


def patch_span(model: PrototypeSleepNet, patch: int) -> tuple[int, int]:
    """Input-sample span covered by feature positions ``patch .. patch + K1 - 1``."""
    spans = model.extractor.position_spans()[patch : patch + model.bank.K1]
    return min(s for s, _ in spans), max(e for _, e in spans)


def patch_epoch(model: PrototypeSleepNet, window: EpochWindow, patch: int) -> tuple[str, int]:
    """(subject, absolute epoch) holding the centre of a patch's span."""
    start, stop = patch_span(model, patch)
    offset = min((start + stop) // 2 // model.data_cfg.epoch_samples, model.data_cfg.window_len - 1)
    return window.subject_id, window.epoch_index - model.data_cfg.window_len + 1 + offset


def dominant_stage(model: PrototypeSleepNet, window: EpochWindow, j: int) -> int:
    """Stage to which prototype ``j`` (both estimators together) contributes most on ``window``."""
    with torch.no_grad():
        model.eval()
        score = model.forward_detailed(torch.from_numpy(np.asarray(window.signal, np.float32))[None]).score
        c = contribution_matrix(score, model.head)[0]
    return int(torch.argmax(c[j] + c[model.M + j]))


def build_prototype_cards(
    model: PrototypeSleepNet,
    windows: list[EpochWindow],
    n: int = 3,
    occlusion: bool = True,
    win_s: float = 1.0,
    stride_s: float = 0.25,
) -> list[PrototypeCard]:
    """One card per prototype with its ``n`` nearest training segments (at most one per
    epoch), WE/PE weight rows and, optionally, the occlusion interval on the source window."""
    _require_projected(model)
    model.eval()
    feats = compute_features(model, windows)
    refs = [w.ref for w in windows]
    fs = model.data_cfg.sampling_hz
    W = model.head.weight_matrix.detach().double().numpy()
    cards = []
    for j in range(model.M):
        matches = nearest_patches(
            model.bank.prototypes[j].detach(),
            feats,
            refs,
            n,
            dedupe=lambda w, p: patch_epoch(model, windows[w], p),
        )
        segments = []
        for m in matches:
            start, stop = patch_span(model, m.patch)
            segments.append(CardSegment(m.ref, m.patch, m.distance, start / fs, (stop - start) / fs))
        src = windows[matches[0].window]
        occ = None
        if occlusion:
            occ = occlusion_localize(model.min_distances, j, src.signal, fs, win_s, stride_s)
        cards.append(PrototypeCard(j, segments, W[j], W[model.M + j], dominant_stage(model, src, j), occ))
    return cards


@dataclass
class ErrorScoreSummary:
    """Mean Score per (stage, prototype, estimator) over correct and misclassified windows."""

    M: int
    counts: dict[int, tuple[int, int]]  # stage -> (n_correct, n_error)
    correct_means: dict[int, np.ndarray | None]  # stage -> 2M
    error_means: dict[int, np.ndarray | None]
    flags: list[str]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["stage", "prototype", "estimator", "correct_mean", "error_mean", "n_correct", "n_error"])
        fmt = lambda a, i: "" if a is None else repr(float(a[i]))  # noqa: E731
        for stage in sorted(self.counts):
            nc, ne = self.counts[stage]
            for i in range(2 * self.M):
                est, j = ("WE", i) if i < self.M else ("PE", i - self.M)
                w.writerow(
                    [STAGES[stage], j, est, fmt(self.correct_means[stage], i), fmt(self.error_means[stage], i), nc, ne]
                )
        return buf.getvalue()


def error_score_summary(inf: Inference) -> ErrorScoreSummary:
    M = inf.scores.shape[1] // 2
    pred = inf.predicted
    counts, cm, em, flags = {}, {}, {}, []
    for stage in range(5):
        rows = inf.labels == stage
        if not rows.any():
            flags.append(f"{STAGES[stage]}: no instances, omitted")
            continue
        ok = rows & (pred == stage)
        bad = rows & (pred != stage)
        counts[stage] = (int(ok.sum()), int(bad.sum()))
        cm[stage] = inf.scores[ok].mean(axis=0) if ok.any() else None
        em[stage] = inf.scores[bad].mean(axis=0) if bad.any() else None
        if not ok.any():
            flags.append(f"{STAGES[stage]}: no correctly classified windows")
        if not bad.any():
            flags.append(f"{STAGES[stage]}: no misclassified windows")
    return ErrorScoreSummary(M, counts, cm, em, flags)


def export_score_embeddings(inf: Inference) -> str:
    """CSV of (ref, stage, prediction, nearest prototype, 2M Scores), ordered by ref."""
    M = inf.scores.shape[1] // 2
    pred = inf.predicted
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["subject_id", "epoch_index", "stage", "predicted", "nearest_prototype", *row_labels(M)])
    for i in sorted(range(len(inf.refs)), key=lambda i: tuple(inf.refs[i])):
        sid, epoch = inf.refs[i]
        w.writerow(
            [
                sid,
                epoch,
                STAGES[inf.labels[i]],
                STAGES[pred[i]],
                int(np.argmin(inf.min_dist[i])),
                *(repr(float(v)) for v in inf.scores[i]),
            ]
        )
    return buf.getvalue()
