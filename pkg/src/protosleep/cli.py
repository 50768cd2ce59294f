"""Command-line interface: ``python -m protosleep <command> ...``.

Configuration is JSON with five sections (``synth``, ``data``, ``split``, ``model``,
``train``). Values resolve as defaults < ``--config FILE`` < flags; ``--set
section.key=VALUE`` overrides any single entry (VALUE is parsed as JSON when possible).
Artifacts go to ``--out``, or to ``$PROTOSLEEP_ROOT/<command>`` when it is omitted.
Every command writes ``run_manifest.json`` with the resolved config and versions.

Exit codes: 0 ok, 2 usage, 3 config/validation, 4 data format, 5 numeric, 6 I/O.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np
import scipy
import torch

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint, to_model
from .data import (
    MANIFEST,
    STAGES,
    DatasetConfig,
    FoldAssignment,
    assign_folds,
    load_dataset,
    normalize_recording,
    read_manifest,
    windows_for,
)
from .errors import ConfigError, ProtoSleepError, ValidationError
from .evaluation import confusion, metrics, metrics_json
from .interpret import build_prototype_cards, error_score_summary, explain, export_score_embeddings
from .model import ModelConfig
from .synth import SynthConfig, generate_dataset
from .training import (
    EnsembleSpec,
    TrainConfig,
    cross_validate,
    ensemble_predict,
    fold_windows,
    run_inference,
    train_fold,
)

log = logging.getLogger("protosleep")

ROOT_ENV = "PROTOSLEEP_ROOT"
RUN_MANIFEST = "run_manifest.json"
IO_EXIT = 6


def default_config() -> dict:
    return {
        "synth": {"seed": 0, "subjects": 6, "epochs_per_subject": 200, "noise_sd": 0.3},
        "data": {"window_len": 10, "normalize": True},
        "split": {"folds": 3, "val_subjects": 1, "seed": 0},
        "model": ModelConfig().to_dict(),
        "train": TrainConfig().to_dict(),
    }


def deep_merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in out:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = deep_merge(out[k], v, f"{path}{k}.")
        else:
            out[k] = v
    return out


def parse_set(item: str) -> dict:
    if "=" not in item:
        raise ConfigError(f"--set expects section.key=value, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out = node = {}
    parts = key.split(".")
    for p in parts[:-1]:
        node[p] = {}
        node = node[p]
    node[parts[-1]] = value
    return out


def resolve_config(args) -> dict:
    cfg = default_config()
    if getattr(args, "config", None):
        try:
            cfg = deep_merge(cfg, json.loads(Path(args.config).read_text()))
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {args.config} is not valid JSON: {e}") from e
    flag_map = {
        "seed": ("synth" if args.command == "synth" else "train", "seed"),
        "max_epochs": ("train", "max_epochs"),
        "folds": ("split", "folds"),
        "val_subjects": ("split", "val_subjects"),
        "fold_seed": ("split", "seed"),
        "window_len": ("data", "window_len"),
    }
    for flag, (section, key) in flag_map.items():
        v = getattr(args, flag, None)
        if v is not None:
            cfg[section][key] = v
    for item in getattr(args, "set", None) or []:
        cfg = deep_merge(cfg, parse_set(item))
    return cfg


def build(cfg: dict, cls, section: str):
    try:
        return cls.from_dict(cfg[section]) if hasattr(cls, "from_dict") else cls(**cfg[section])
    except (TypeError, KeyError) as e:
        raise ConfigError(f"bad {section} config: {e}") from e


def versions() -> dict:
    return {
        "protosleep": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "torch": torch.__version__,
    }


def out_dir(args) -> Path:
    if args.out:
        p = Path(args.out)
    else:
        p = Path(os.environ.get(ROOT_ENV, "runs")) / args.command
    p.mkdir(parents=True, exist_ok=True)
    return p


def write_manifest(out: Path, args, cfg: dict, extra: dict | None = None):
    rec = {
        "command": args.command,
        "argv": args.argv,
        "config": cfg,
        "versions": versions(),
        "torch_threads": torch.get_num_threads(),
    }
    rec.update(extra or {})
    (out / RUN_MANIFEST).write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n")


def load_recordings(data: str, cfg: dict):
    manifest = Path(data)
    if manifest.is_dir():
        manifest = manifest / MANIFEST
    meta, _ = read_manifest(manifest)
    recs = load_dataset(manifest)
    if cfg["data"]["normalize"]:
        recs = [normalize_recording(r) for r in recs]
    dcfg = DatasetConfig(
        epoch_seconds=int(meta["epoch_seconds"]),
        sampling_hz=int(meta["sampling_hz"]),
        window_len=int(cfg["data"]["window_len"]),
    )
    return recs, dcfg


def _split(recs, cfg) -> FoldAssignment:
    s = cfg["split"]
    return assign_folds(recs, int(s["folds"]), int(s["val_subjects"]), int(s["seed"]))


def _subjects_arg(value: str | None):
    return None if value is None else [s for s in value.split(",") if s]


def _eval_windows(args, ckpt, recs, dcfg):
    subjects = _subjects_arg(args.subjects)
    if subjects is None:
        subjects = ckpt.training.get("subjects", {}).get("test")
    ws = windows_for(recs, dcfg, subjects)
    if not ws:
        raise ValidationError("no windows to evaluate (check --subjects)")
    return ws


def _check_data_cfg(ckpt, dcfg):
    if ckpt.data_config != dcfg:
        raise ValidationError(f"dataset settings {dcfg} differ from the checkpoint's {ckpt.data_config}")


def predictions_csv(inf) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["subject_id", "epoch_index", "label", "predicted", *(f"logit_{s}" for s in STAGES)])
    pred = inf.predicted
    for i in sorted(range(len(inf.refs)), key=lambda i: tuple(inf.refs[i])):
        sid, e = inf.refs[i]
        w.writerow([sid, e, STAGES[inf.labels[i]], STAGES[pred[i]], *(repr(float(v)) for v in inf.logits[i])])
    return buf.getvalue()


def read_predictions(path) -> dict[tuple[str, int], np.ndarray]:
    """Logits stored by ``eval``, keyed by window ref."""
    out = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out[(row["subject_id"], int(row["epoch_index"]))] = np.array(
                [float(row[f"logit_{s}"]) for s in STAGES]
            )
    return out


# --------------------------------------------------------------------------- commands


def cmd_synth(args, cfg):
    s = cfg["synth"]
    for flag, key in (("subjects", "subjects"), ("epochs", "epochs_per_subject")):
        if getattr(args, flag) is not None:
            s[key] = getattr(args, flag)
    out = out_dir(args)
    generate_dataset(build(cfg, SynthConfig, "synth"), out)
    write_manifest(out, args, cfg)
    print(out)


def _train_setup(args, cfg):
    recs, dcfg = load_recordings(args.data, cfg)
    return recs, dcfg, build(cfg, ModelConfig, "model"), build(cfg, TrainConfig, "train"), _split(recs, cfg)


def cmd_train(args, cfg):
    recs, dcfg, mcfg, tcfg, folds = _train_setup(args, cfg)
    if not 0 <= args.fold < folds.fold_count:
        raise ConfigError(f"fold {args.fold} outside 0..{folds.fold_count - 1}")
    out = out_dir(args)
    train, val, test = fold_windows(recs, folds, args.fold, dcfg)
    ckpt = train_fold(train, val, mcfg, dcfg, tcfg, log_path=out / "train.log.jsonl")
    ckpt.training["fold"] = args.fold
    ckpt.training["subjects"] = {
        "train": folds.train_subjects(args.fold),
        "val": folds.val_subjects(args.fold),
        "test": folds.test_subjects(args.fold),
    }
    save_checkpoint(ckpt, out / "model.ckpt")
    (out / "folds.json").write_text(json.dumps(folds.to_dict(), indent=2, sort_keys=True) + "\n")
    result = {"checkpoint": "model.ckpt", **ckpt.training["summary"]}
    if test:
        inf = run_inference(to_model(ckpt), test)
        cm = inf.confusion()
        (out / "test_metrics.json").write_text(metrics_json(cm, metrics(cm)))
        result["test_acc"] = metrics(cm).acc
    write_manifest(out, args, cfg, {"result": result})
    print(json.dumps(result, indent=2))


def cmd_cv(args, cfg):
    recs, dcfg, mcfg, tcfg, folds = _train_setup(args, cfg)
    out = out_dir(args)
    only = None if args.only_folds is None else [int(f) for f in args.only_folds.split(",")]
    res = cross_validate(recs, folds, mcfg, dcfg, tcfg, out_dir=out, only_folds=only)
    report = metrics(res.confusion)
    (out / "metrics.json").write_text(metrics_json(res.confusion, report))
    (out / "folds.json").write_text(json.dumps(folds.to_dict(), indent=2, sort_keys=True) + "\n")
    per_fold = [metrics(c).to_dict() for c in res.fold_confusions]
    write_manifest(out, args, cfg, {"per_fold": per_fold})
    print(json.dumps({k: report.to_dict()[k] for k in ("acc", "mf1", "kappa")}, indent=2))


def _load_for_eval(args, cfg):
    ckpt = load_checkpoint(args.ckpt)
    cfg["data"]["window_len"] = ckpt.data_config.window_len
    recs, dcfg = load_recordings(args.data, cfg)
    _check_data_cfg(ckpt, dcfg)
    return ckpt, recs, dcfg


def cmd_eval(args, cfg):
    ckpt, recs, dcfg = _load_for_eval(args, cfg)
    ws = _eval_windows(args, ckpt, recs, dcfg)
    inf = run_inference(to_model(ckpt), ws)
    out = out_dir(args)
    (out / "predictions.csv").write_text(predictions_csv(inf))
    cm = inf.confusion()
    rep = metrics(cm)
    (out / "metrics.json").write_text(metrics_json(cm, rep))
    (out / "metrics.csv").write_text(rep.to_csv())
    write_manifest(out, args, cfg, {"checkpoint": str(args.ckpt)})
    print(json.dumps({k: rep.to_dict()[k] for k in ("acc", "mf1", "kappa")}, indent=2))


def _parse_window(spec: str) -> tuple[str, int]:
    try:
        sid, epoch = spec.rsplit(":", 1)
        return sid, int(epoch)
    except ValueError as e:
        raise ConfigError(f"--window expects SUBJECT:EPOCH, got {spec!r}") from e


def cmd_explain(args, cfg):
    ckpt, recs, dcfg = _load_for_eval(args, cfg)
    ref = _parse_window(args.window)
    ws = [w for w in windows_for(recs, dcfg, [ref[0]]) if w.ref == ref]
    if not ws:
        raise ValidationError(f"no window ends at {ref[0]} epoch {ref[1]}")
    rep = explain(to_model(ckpt), ws[0], top_k=args.top)
    out = out_dir(args)
    (out / "explanation.json").write_text(json.dumps(rep.to_dict(), indent=2) + "\n")
    (out / "contributions.csv").write_text(rep.to_csv())
    write_manifest(out, args, cfg, {"checkpoint": str(args.ckpt), "window": list(ref)})
    print(json.dumps({"predicted": STAGES[rep.predicted], "top": rep.top[STAGES[rep.predicted]]}, indent=2))


def cmd_cards(args, cfg):
    ckpt, recs, dcfg = _load_for_eval(args, cfg)
    subjects = _subjects_arg(args.subjects) or ckpt.training.get("subjects", {}).get("train")
    ws = windows_for(recs, dcfg, subjects)
    if not ws:
        raise ValidationError("no training windows for prototype cards")
    cards = build_prototype_cards(to_model(ckpt), ws, n=args.top, occlusion=not args.no_occlusion)
    out = out_dir(args)
    (out / "cards.json").write_text(json.dumps([c.to_dict() for c in cards], indent=2) + "\n")
    write_manifest(out, args, cfg, {"checkpoint": str(args.ckpt), "subjects": subjects})
    for c in cards:
        print(f"prototype {c.index}: {STAGES[c.dominant_stage]} source {c.source}")


def cmd_ensemble(args, cfg):
    ckpts = [load_checkpoint(p) for p in args.ckpt]
    cfg["data"]["window_len"] = ckpts[0].data_config.window_len
    recs, dcfg = load_recordings(args.data, cfg)
    for c in ckpts:
        _check_data_cfg(c, dcfg)
    ws = _eval_windows(args, ckpts[0], recs, dcfg)
    pred = ensemble_predict(EnsembleSpec([to_model(c) for c in ckpts]), ws)
    cm = confusion([w.label for w in ws], pred.predicted.numpy())
    rep = metrics(cm)
    out = out_dir(args)
    (out / "metrics.json").write_text(metrics_json(cm, rep))
    write_manifest(out, args, cfg, {"checkpoints": [str(p) for p in args.ckpt]})
    print(json.dumps({k: rep.to_dict()[k] for k in ("acc", "mf1", "kappa")}, indent=2))


def cmd_errors(args, cfg):
    ckpt, recs, dcfg = _load_for_eval(args, cfg)
    inf = run_inference(to_model(ckpt), _eval_windows(args, ckpt, recs, dcfg))
    summary = error_score_summary(inf)
    out = out_dir(args)
    (out / "error_scores.csv").write_text(summary.to_csv())
    write_manifest(out, args, cfg, {"checkpoint": str(args.ckpt), "flags": summary.flags})
    for f in summary.flags:
        print(f)


def cmd_export_scores(args, cfg):
    ckpt, recs, dcfg = _load_for_eval(args, cfg)
    inf = run_inference(to_model(ckpt), _eval_windows(args, ckpt, recs, dcfg))
    out = out_dir(args)
    (out / "scores.csv").write_text(export_score_embeddings(inf))
    write_manifest(out, args, cfg, {"checkpoint": str(args.ckpt)})
    print(out / "scores.csv")


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="protosleep", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config entry")
        p.add_argument("--out", help="output directory")
        if data:
            p.add_argument("--data", required=True, help="dataset directory or manifest")
        return p

    p = common(sub.add_parser("synth", help="generate a synthetic dataset"), data=False)
    p.add_argument("--subjects", type=int)
    p.add_argument("--epochs", type=int, help="epochs per subject")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    for name, func, help_ in (("train", cmd_train, "train one fold"), ("cv", cmd_cv, "cross-validate")):
        p = common(sub.add_parser(name, help=help_))
        p.add_argument("--seed", type=int)
        p.add_argument("--max-epochs", type=int)
        p.add_argument("--folds", type=int)
        p.add_argument("--val-subjects", type=int)
        p.add_argument("--fold-seed", type=int)
        p.add_argument("--window-len", type=int)
        if name == "train":
            p.add_argument("--fold", type=int, default=0)
        else:
            p.add_argument("--only-folds", help="comma-separated fold indices")
        p.set_defaults(func=func)

    def model_cmd(name, func, help_):
        p = common(sub.add_parser(name, help=help_))
        p.add_argument("--ckpt", required=True)
        p.add_argument("--subjects", help="comma-separated subject ids (default: checkpoint's test subjects)")
        p.set_defaults(func=func)
        return p

    model_cmd("eval", cmd_eval, "evaluate a checkpoint")
    p = model_cmd("explain", cmd_explain, "scoring sheet for one window")
    p.add_argument("--window", required=True, help="SUBJECT:EPOCH of the window's last epoch")
    p.add_argument("--top", type=int, default=3)
    p = model_cmd("cards", cmd_cards, "prototype cards (default subjects: checkpoint's training subjects)")
    p.add_argument("--top", type=int, default=3)
    p.add_argument("--no-occlusion", action="store_true")
    model_cmd("errors", cmd_errors, "Score means for correct vs misclassified windows")
    model_cmd("export-scores", cmd_export_scores, "export Score vectors per window")

    p = common(sub.add_parser("ensemble", help="logit-sum ensemble of checkpoints"))
    p.add_argument("--ckpt", required=True, nargs="+")
    p.add_argument("--subjects")
    p.set_defaults(func=cmd_ensemble)
    return ap


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        args.func(args, cfg)
    except ProtoSleepError as e:
        log.error("%s: %s", type(e).__name__, e)
        return e.exit_code
    except OSError as e:
        log.error("I/O error: %s", e)
        return IO_EXIT
    return 0


if __name__ == "__main__":
    sys.exit(main())
