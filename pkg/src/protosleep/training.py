"""Mini-batch training with early stopping, cross-validation and logit-sum ensembles."""

from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint, from_model, load_model, save_checkpoint, to_model
from .data import DatasetConfig, EpochWindow, FoldAssignment, Recording, windows_for
from .decision import StagePrediction, predict_from_logits
from .errors import ConfigError, NumericError, TrainingDiverged
from .evaluation import ConfusionMatrix, confusion
from .losses import (
    LossBreakdown,
    LossWeights,
    class_loss,
    diversity_loss,
    l1_loss,
    nearest_sq_dists,
    r1_loss,
    r2_loss,
    total_loss,
)
from .model import ModelConfig, PrototypeSleepNet
from .sensing import flat_patches, project_prototypes

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 64
    patience: int = 50
    max_epochs: int = 200
    seed: int = 0
    projection_period: int | None = 10
    final_projection: bool = True
    weights: LossWeights = field(default_factory=LossWeights)
    deterministic: bool = True
    # "batch": clustering minima over the mini-batch's patches; "full": also over a
    # training-set patch cache refreshed at the start of every epoch
    cluster_scope: str = "batch"
    # before every validation pass (and after the final projection) replace the score
    # batch-norm running statistics by exact eval-mode statistics over the training set
    recalibrate_norms: bool = True
    # evenly spaced training windows used for that, except after a projection (all)
    recalibration_windows: int = 256

    def __post_init__(self):
        if self.cluster_scope not in ("batch", "full"):
            raise ConfigError(f"cluster_scope must be 'batch' or 'full', got {self.cluster_scope!r}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch normalization)")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.recalibration_windows < 1:
            raise ConfigError("recalibration_windows must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "weights" in d:
            d["weights"] = LossWeights(**d["weights"])
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


class EarlyStopping:
    """Tracks the best validation loss; ``step`` returns True once ``patience``
    consecutive epochs have failed to improve on it."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ConfigError("patience must be >= 1")
        self.patience = patience
        self.best = float("inf")
        self.best_epoch = -1
        self.bad_epochs = 0

    def step(self, epoch: int, loss: float) -> bool:
        if loss < self.best:
            self.best, self.best_epoch, self.bad_epochs = loss, epoch, 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience

    @property
    def improved(self) -> bool:
        return self.bad_epochs == 0


def stack_batch(windows: list[EpochWindow], idx) -> tuple[torch.Tensor, torch.Tensor]:
    x = np.stack([windows[i].signal for i in idx]).astype(np.float32, copy=False)
    y = np.array([windows[i].label for i in idx], dtype=np.int64)
    return torch.from_numpy(x), torch.from_numpy(y)


@torch.no_grad()
def nearest_rows(a: torch.Tensor, b: torch.Tensor, chunk: int = 8192) -> torch.Tensor:
    """Index of the closest row of ``b`` for every row of ``a`` (no gradient)."""
    out = []
    for i in range(0, len(a), chunk):
        out.append(torch.cdist(a[i : i + chunk].double(), b.double()).argmin(dim=1))
    return torch.cat(out)


def full_scope_terms(W: torch.Tensor, patches: torch.Tensor, cache: torch.Tensor):
    """R1 and R2 with minima over the batch patches plus a detached patch cache.

    Cache rows carry gradient to the prototypes only.
    """
    Wf = W.reshape(W.shape[0], -1)
    d1 = torch.minimum(nearest_sq_dists(Wf, patches), (Wf - cache[nearest_rows(Wf, cache)]).pow(2).sum(-1))
    d2_batch = nearest_sq_dists(patches, Wf)
    d2_cache = (cache - Wf[nearest_rows(cache, Wf)]).pow(2).sum(-1)
    r2 = (d2_batch.sum() + d2_cache.sum()) / (len(d2_batch) + len(d2_cache))
    return d1.mean(), r2


def compute_losses(model: PrototypeSleepNet, out, labels, weights: LossWeights, cache=None) -> LossBreakdown:
    W = model.bank.prototypes
    patches = flat_patches(out.features, model.bank.K1)
    if cache is None:
        r1, r2 = r1_loss(W, patches), r2_loss(W, patches)
    else:
        r1, r2 = full_scope_terms(W, patches, cache)
    return total_loss(
        class_loss(out.prediction().probabilities, labels),
        diversity_loss(W, model.cfg.eps_div),
        r1,
        r2,
        l1_loss(model.head.weight_matrix),
        weights,
    )


def batches(n: int, size: int):
    for i in range(0, n, size):
        yield range(i, min(n, i + size))


@torch.no_grad()
def compute_features(model: PrototypeSleepNet, windows, batch_size: int = 64) -> torch.Tensor:
    model.eval()
    out = [model.features(stack_batch(windows, idx)[0]) for idx in batches(len(windows), batch_size)]
    return torch.cat(out)


@torch.no_grad()
def validation_pass(model: PrototypeSleepNet, windows, weights: LossWeights, batch_size: int = 64) -> dict:
    """Eval-mode total objective and accuracy over ``windows``."""
    model.eval()
    total, correct, n = 0.0, 0, 0
    for idx in batches(len(windows), batch_size):
        x, y = stack_batch(windows, idx)
        out = model.forward_detailed(x)
        total += float(compute_losses(model, out, y, weights).total) * len(idx)
        correct += int((out.prediction().predicted == y).sum())
        n += len(idx)
    return {"val_loss": total / max(n, 1), "val_acc": correct / max(n, 1)}


def validation_loss(model: PrototypeSleepNet, windows, weights: LossWeights, batch_size: int = 64) -> float:
    return validation_pass(model, windows, weights, batch_size)["val_loss"]


@dataclass
class Inference:
    refs: list[tuple[str, int]]
    labels: np.ndarray
    logits: np.ndarray
    scores: np.ndarray
    min_dist: np.ndarray

    @property
    def predicted(self) -> np.ndarray:
        return predict_from_logits(torch.from_numpy(self.logits)).predicted.numpy()

    def confusion(self) -> ConfusionMatrix:
        return confusion(self.labels, self.predicted)


@torch.no_grad()
def run_inference(model: PrototypeSleepNet, windows, batch_size: int = 1) -> Inference:
    """Eval-mode outputs for ``windows``.

    One window per forward pass by default: float32 convolution kernels round
    differently with batch size, so batching would make a window's logits depend on
    its neighbours (and disagree with a single-window explanation). On CPU this costs
    almost nothing.
    """
    model.eval()
    logits, scores, mind = [], [], []
    for idx in batches(len(windows), batch_size):
        out = model.forward_detailed(stack_batch(windows, idx)[0])
        logits.append(out.logits.double().numpy())
        scores.append(out.score.double().numpy())
        mind.append(out.dist.amin(-1).double().numpy())
    M = model.M
    return Inference(
        [w.ref for w in windows],
        np.array([w.label for w in windows], dtype=np.int64),
        np.concatenate(logits) if logits else np.zeros((0, 5)),
        np.concatenate(scores) if scores else np.zeros((0, 2 * M)),
        np.concatenate(mind) if mind else np.zeros((0, M)),
    )


@torch.no_grad()
def recalibrate_score_norms(model: PrototypeSleepNet, feats: torch.Tensor):
    """Replace the running statistics of the two score batch norms with exact
    population statistics over ``feats``.

    Running averages are gathered in train mode (dropout on) over a handful of steps
    per epoch, and projection moves prototypes onto patches where the similarity is
    steepest. Either way they can sit far from what the eval-mode network produces.
    """
    head = model.head
    was_training = head.training
    sim = torch.cat([model.decide_from_features(feats[i : i + 256]).sim for i in range(0, len(feats), 256)])
    norms = (head.w_norm, head.p_norm)
    saved = [bn.momentum for bn in norms]
    for bn in norms:
        bn.reset_running_stats()
        bn.momentum = None  # cumulative average; one pass over everything = exact
    head.train()
    head.scores(sim)
    for bn, mom in zip(norms, saved):
        bn.momentum = mom
    head.train(was_training)


def project_on(model: PrototypeSleepNet, windows, feats=None) -> dict:
    """Project the bank onto ``windows``; returns full-set clustering terms measured before."""
    if feats is None:
        feats = compute_features(model, windows)
    patches = flat_patches(feats, model.bank.K1)
    W = model.bank.prototypes.detach()
    before = {"full_r1": float(r1_loss(W, patches)), "full_r2": float(r2_loss(W, patches))}
    project_prototypes(model.bank, feats, [w.ref for w in windows])
    return before


def _snapshot(model: PrototypeSleepNet):
    return copy.deepcopy(model.state_dict()), copy.deepcopy(model.bank.meta)


def _restore(model: PrototypeSleepNet, snap):
    model.load_state_dict(snap[0])
    model.bank.meta = copy.deepcopy(snap[1])


def _write(fp, record: dict):
    if fp is not None:
        fp.write(json.dumps(record, sort_keys=True) + "\n")
        fp.flush()


def train_fold(
    train: list[EpochWindow],
    val: list[EpochWindow],
    model_cfg: ModelConfig,
    data_cfg: DatasetConfig,
    cfg: TrainConfig,
    log_path=None,
) -> Checkpoint:
    """Train on ``train``, early-stop on the validation loss, return the best checkpoint.

    The returned checkpoint's ``training`` dict holds the per-epoch history. With
    ``final_projection`` the best model is projected onto the training patches before
    it is returned.
    """
    if not train or not val:
        raise ConfigError("train_fold needs non-empty train and validation windows")
    overlap = {w.subject_id for w in train} & {w.subject_id for w in val}
    if overlap:
        raise ConfigError(f"subjects in both train and validation: {sorted(overlap)}")
    if cfg.deterministic:
        torch.set_num_threads(1)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = PrototypeSleepNet(model_cfg, data_cfg, seed=cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=cfg.betas)
    stopper = EarlyStopping(cfg.patience)
    history = []
    best = _snapshot(model)
    fp = open(log_path, "w") if log_path else None
    t0 = time.perf_counter()
    try:
        calib = train[:: max(1, -(-len(train) // cfg.recalibration_windows))]
        for epoch in range(cfg.max_epochs):
            model.train()
            sums, count = {}, 0
            perm = rng.permutation(len(train))
            cache = None
            if cfg.cluster_scope == "full":
                cache = flat_patches(compute_features(model, train), model.bank.K1)
                model.train()
            for idx in batches(len(train), cfg.batch_size):
                if len(idx) < 2:  # batch norm needs two samples
                    continue
                x, y = stack_batch(train, perm[idx.start : idx.stop])
                try:
                    b = compute_losses(model, model.forward_detailed(x), y, cfg.weights, cache)
                except NumericError as e:
                    _restore(model, best)
                    raise TrainingDiverged(str(e), from_model(model, cfg.weights, {"history": history}, cfg.seed), epoch) from e
                opt.zero_grad()
                b.total.backward()
                opt.step()
                for k, v in b.as_floats().items():
                    sums[k] = sums.get(k, 0.0) + v * len(idx)
                count += len(idx)
            record = {"epoch": epoch, "lr": cfg.learning_rate, "train": {k: v / count for k, v in sums.items()}}
            projecting = bool(cfg.projection_period) and (epoch + 1) % cfg.projection_period == 0
            if projecting:
                feats = compute_features(model, train)
                record.update(project_on(model, train, feats))
                record["projected"] = True
            elif cfg.recalibrate_norms:
                feats = compute_features(model, calib)
            if cfg.recalibrate_norms:
                recalibrate_score_norms(model, feats)
            record.update(validation_pass(model, val, cfg.weights))
            history.append(record)
            # wall time goes to the log only, so checkpoints stay bit-reproducible
            _write(fp, {**record, "elapsed_s": round(time.perf_counter() - t0, 3)})
            log.info(
                "epoch %d train %.4f val %.4f acc %.3f",
                epoch, record["train"]["total"], record["val_loss"], record["val_acc"],
            )
            stop = stopper.step(epoch, record["val_loss"])
            if stopper.improved:
                best = _snapshot(model)
            if stop:
                break
        _restore(model, best)
        summary = {"best_epoch": stopper.best_epoch, "best_val_loss": stopper.best, "epochs_run": len(history)}
        if cfg.final_projection:
            feats = compute_features(model, train)
            summary.update(project_on(model, train, feats))
            if cfg.recalibrate_norms:
                recalibrate_score_norms(model, feats)
            summary["val_loss_after_projection"] = validation_loss(model, val, cfg.weights)
            _write(fp, {"final_projection": summary})
    finally:
        if fp is not None:
            fp.close()
    model.eval()
    training = {"summary": summary, "history": history, "config": cfg.to_dict()}
    return from_model(model, cfg.weights, training, cfg.seed)


@dataclass
class CVResult:
    confusion: ConfusionMatrix
    fold_confusions: list[ConfusionMatrix]
    checkpoints: list[Checkpoint]
    predictions: list[Inference]


def fold_windows(recordings: list[Recording], folds: FoldAssignment, fold: int, data_cfg: DatasetConfig):
    return (
        windows_for(recordings, data_cfg, folds.train_subjects(fold)),
        windows_for(recordings, data_cfg, folds.val_subjects(fold)),
        windows_for(recordings, data_cfg, folds.test_subjects(fold)),
    )


def cross_validate(
    recordings: list[Recording],
    folds: FoldAssignment,
    model_cfg: ModelConfig,
    data_cfg: DatasetConfig,
    cfg: TrainConfig,
    out_dir=None,
    only_folds=None,
) -> CVResult:
    """Train and test every fold; the aggregate confusion matrix is the sum over folds."""
    cms, ckpts, preds = [], [], []
    for f in range(folds.fold_count) if only_folds is None else only_folds:
        train, val, test = fold_windows(recordings, folds, f, data_cfg)
        log_path = None if out_dir is None else Path(out_dir) / f"fold{f:02d}.log.jsonl"
        ckpt = train_fold(train, val, model_cfg, data_cfg, cfg, log_path)
        ckpt.training["fold"] = f
        if out_dir is not None:
            save_checkpoint(ckpt, Path(out_dir) / f"fold{f:02d}.ckpt")
        inf = run_inference(to_model(ckpt), test)
        cms.append(inf.confusion())
        ckpts.append(ckpt)
        preds.append(inf)
    total = ConfusionMatrix(np.sum([c.counts for c in cms], axis=0))
    return CVResult(total, cms, ckpts, preds)


@dataclass
class EnsembleSpec:
    checkpoints: list

    def load(self) -> list[PrototypeSleepNet]:
        models = [c if isinstance(c, PrototypeSleepNet) else load_model(c) for c in self.checkpoints]
        check_compatible(models)
        return models


def check_compatible(models: list[PrototypeSleepNet]):
    if not models:
        raise ConfigError("ensemble needs at least one member")
    ref = models[0].data_cfg
    for m in models[1:]:
        if m.data_cfg.num_classes != ref.num_classes or m.data_cfg.window_samples != ref.window_samples:
            raise ConfigError("ensemble members disagree on classes or input length")


@torch.no_grad()
def ensemble_logits(models: list[PrototypeSleepNet], x: torch.Tensor) -> torch.Tensor:
    check_compatible(models)
    total = None
    for m in models:
        m.eval()
        z = m(x).double()
        total = z if total is None else total + z
    return total


def ensemble_predict(spec, windows, batch_size: int = 1) -> StagePrediction:
    models = spec.load() if isinstance(spec, EnsembleSpec) else spec
    parts = [ensemble_logits(models, stack_batch(windows, idx)[0]) for idx in batches(len(windows), batch_size)]
    return predict_from_logits(torch.cat(parts))
