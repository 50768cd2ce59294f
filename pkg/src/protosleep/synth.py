"""Synthetic single-channel EEG with planted stage-characteristic waveforms.

Every epoch is pink background noise plus non-overlapping waveform bursts chosen
from the stage's rules. The planted events are logged so tests can check
localization against ground truth.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import sawtooth as _sawtooth
from scipy.signal.windows import hann, tukey

from .data import Recording, save_dataset
from .errors import ConfigError

EVENTS_FILE = "events.json"


@dataclass(frozen=True)
class WaveformTemplate:
    name: str
    freq_range: tuple[float, float]
    duration_range: tuple[float, float]
    amplitude_range: tuple[float, float]


TEMPLATES = {
    t.name: t
    for t in (
        WaveformTemplate("alpha", (8.5, 12.0), (3.0, 8.0), (0.9, 1.3)),
        WaveformTemplate("lamf", (4.0, 7.0), (4.0, 10.0), (0.4, 0.6)),
        WaveformTemplate("spindle", (12.0, 14.0), (0.5, 2.0), (0.8, 1.2)),
        WaveformTemplate("kcomplex", (0.5, 2.0), (0.6, 1.0), (2.5, 3.5)),
        WaveformTemplate("delta", (0.5, 2.0), (3.0, 8.0), (2.0, 3.0)),
        WaveformTemplate("sawtooth", (2.0, 6.0), (2.0, 5.0), (0.8, 1.2)),
        WaveformTemplate("rem_artifact", (2.0, 3.3), (0.3, 0.5), (2.0, 3.0)),
        WaveformTemplate("blink_artifact", (1.2, 2.5), (0.4, 0.8), (3.0, 4.0)),
    )
}

# Waveform families that mark each stage (W, N1, N2, N3, REM).
STAGE_FAMILIES = {
    0: ("alpha", "blink_artifact", "rem_artifact"),
    1: ("lamf",),
    2: ("spindle", "kcomplex"),
    3: ("delta", "spindle"),
    4: ("sawtooth", "rem_artifact"),
}


@dataclass(frozen=True)
class Rule:
    """``coverage``: fill a U(lo, hi) fraction of the epoch with bursts.
    ``count``: with probability ``prob`` plant an integer U{lo..hi} number of events."""

    template: str
    kind: str
    lo: float
    hi: float
    prob: float = 1.0


DEFAULT_STAGE_MIX = {
    0: (
        Rule("alpha", "coverage", 0.40, 0.70),
        Rule("blink_artifact", "count", 1, 2, 0.6),
        Rule("rem_artifact", "count", 1, 2, 0.4),
    ),
    1: (Rule("lamf", "coverage", 0.55, 0.85),),
    2: (Rule("spindle", "count", 1, 4), Rule("kcomplex", "count", 1, 2, 0.7)),
    3: (Rule("delta", "coverage", 0.25, 0.60), Rule("spindle", "count", 1, 1, 0.3)),
    4: (Rule("sawtooth", "coverage", 0.20, 0.40), Rule("rem_artifact", "count", 1, 3)),
}

# Stage chain: which stage follows which. With ``dwell_range`` set the chain is
# semi-Markov: each bout lasts a uniform number of epochs and then jumps along the
# off-diagonal of this matrix. The default cycle W -> N1 -> N2 -> N3 -> REM -> W has no
# stage pair in both orders, so the stage of a window's last epoch is recoverable from
# which stages the window contains (see scripts/pilot_separability.py).
DEFAULT_TRANSITIONS = (
    (0.0, 1.0, 0.0, 0.0, 0.0),
    (0.0, 0.0, 1.0, 0.0, 0.0),
    (0.0, 0.0, 0.0, 1.0, 0.0),
    (0.0, 0.0, 0.0, 0.0, 1.0),
    (1.0, 0.0, 0.0, 0.0, 0.0),
)
# Bouts of 20-40 epochs: four full bouts fit in 200 epochs, so every default-length
# recording visits all five stages.
DEFAULT_DWELL = (20, 40)


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    subjects: int = 6
    epochs_per_subject: int = 200
    noise_sd: float = 0.3
    epoch_seconds: int = 30
    sampling_hz: int = 100
    stage_mix: dict = field(default_factory=lambda: dict(DEFAULT_STAGE_MIX))
    transitions: tuple = DEFAULT_TRANSITIONS
    dwell_range: tuple[int, int] | None = DEFAULT_DWELL
    subject_gain: tuple[float, float] = (0.7, 1.4)

    def __post_init__(self):
        if self.subjects < 1 or self.epochs_per_subject < 1:
            raise ConfigError("subjects and epochs_per_subject must be positive")
        P = np.asarray(self.transitions, dtype=float)
        if P.shape != (5, 5) or np.any(P < 0) or not np.allclose(P.sum(1), 1.0):
            raise ConfigError("transitions must be a row-stochastic 5x5 matrix")
        if self.dwell_range is not None:
            lo, hi = self.dwell_range
            if not 1 <= lo <= hi:
                raise ConfigError(f"dwell_range must satisfy 1 <= lo <= hi, got {self.dwell_range}")
            if np.any(np.diag(P) >= 1.0):
                raise ConfigError("with dwell_range set, every stage needs a way out (diagonal < 1)")
        for stage in range(5):
            for rule in self.stage_mix.get(stage, ()):
                if rule.template not in TEMPLATES or rule.kind not in ("coverage", "count"):
                    raise ConfigError(f"bad rule {rule}")
        # composition floors for N1 (LAMF) and N3 (delta)
        floors = {1: ("lamf", 0.5), 3: ("delta", 0.2)}
        for stage, (name, floor) in floors.items():
            cov = [r for r in self.stage_mix.get(stage, ()) if r.template == name and r.kind == "coverage"]
            if not cov or cov[0].lo <= floor:
                raise ConfigError(f"stage {stage} needs {name} coverage above {floor:.0%}")


def stationary_distribution(transitions, dwell_range=None) -> np.ndarray:
    """Long-run share of epochs per stage.

    Without ``dwell_range`` this is the stationary vector of the Markov chain. With it,
    the jump chain's stationary vector weighted by the mean bout length (equal for all
    stages here, so the jump chain's vector itself).
    """
    P = np.asarray(transitions, dtype=float)
    if dwell_range is not None:
        P = _jump_chain(P)
    w, v = np.linalg.eig(P.T)
    pi = np.real(v[:, np.argmin(np.abs(w - 1.0))])
    return pi / pi.sum()


def _jump_chain(P: np.ndarray) -> np.ndarray:
    J = P * (1.0 - np.eye(len(P)))
    return J / J.sum(axis=1, keepdims=True)


def stage_sequence(n: int, transitions, rng: np.random.Generator, dwell_range=None) -> np.ndarray:
    """Stage labels for ``n`` epochs, starting from the long-run stage distribution.

    With ``dwell_range=(lo, hi)`` bouts last U{lo..hi} epochs (the first bout is
    entered at a uniformly random point) and the next stage follows the jump chain.
    """
    P = np.asarray(transitions, dtype=float)
    state = rng.choice(5, p=stationary_distribution(P, dwell_range))
    seq = np.empty(n, dtype=np.uint8)
    if dwell_range is None:
        for i in range(n):
            seq[i] = state
            state = rng.choice(5, p=P[state])
        return seq
    J = _jump_chain(P)
    lo, hi = dwell_range
    left = int(rng.integers(1, int(rng.integers(lo, hi + 1)) + 1))
    for i in range(n):
        seq[i] = state
        left -= 1
        if left == 0:
            state = rng.choice(5, p=J[state])
            left = int(rng.integers(lo, hi + 1))
    return seq


def pink_noise(n: int, sd: float, rng: np.random.Generator) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(len(spec), dtype=float)
    f[0] = 1.0
    x = np.fft.irfft(spec / np.sqrt(f), n)
    x -= x.mean()
    return x * (sd / x.std())


def _waveform(name: str, n: int, fs: int, rng: np.random.Generator) -> np.ndarray:
    tpl = TEMPLATES[name]
    amp = rng.uniform(*tpl.amplitude_range)
    t = np.arange(n) / fs
    freq = rng.uniform(*tpl.freq_range)
    phase = rng.uniform(0, 2 * np.pi)
    if name in ("alpha", "delta"):
        return amp * np.sin(2 * np.pi * freq * t + phase) * tukey(n, 0.5)
    if name == "spindle":
        return amp * np.sin(2 * np.pi * freq * t + phase) * hann(n)
    if name == "lamf":
        f2 = rng.uniform(*tpl.freq_range)
        mix = np.sin(2 * np.pi * freq * t + phase) + 0.7 * np.sin(2 * np.pi * f2 * t + rng.uniform(0, 2 * np.pi))
        return amp * mix / 1.2 * tukey(n, 0.5)
    if name == "sawtooth":
        return amp * _sawtooth(2 * np.pi * freq * t + phase, width=0.15) * tukey(n, 0.3)
    if name == "kcomplex":
        # sharp negative deflection then slower positive wave
        k = max(1, int(round(0.35 * n)))
        neg = -np.sin(np.pi * np.arange(k) / k)
        pos = 0.6 * np.sin(np.pi * np.arange(n - k) / (n - k))
        return amp * np.concatenate([neg, pos])
    if name == "rem_artifact":
        k = max(1, int(round(0.2 * n)))
        shape = np.concatenate([np.linspace(0, 1, k, endpoint=False), np.linspace(1, 0, n - k)])
        return amp * rng.choice((-1.0, 1.0)) * shape
    if name == "blink_artifact":
        k = max(1, min(n - 1, int(round(0.04 * fs))))
        rise = np.linspace(0, 1, k, endpoint=False)
        decay = np.exp(-np.arange(n - k) / (0.25 * (n - k)))
        out = np.concatenate([rise, decay])
        out[-k:] *= np.linspace(1, 0, k)
        return amp * out
    raise ConfigError(f"unknown template {name}")


def _burst_lengths(rule: Rule, epoch_n: int, fs: int, rng) -> list[int]:
    tpl = TEMPLATES[rule.template]
    lo, hi = (int(round(d * fs)) for d in tpl.duration_range)
    if rule.kind == "count":
        if rng.random() >= rule.prob:
            return []
        k = int(rng.integers(int(rule.lo), int(rule.hi) + 1))
        return [int(rng.integers(lo, hi + 1)) for _ in range(k)]
    target = int(np.ceil(rng.uniform(rule.lo, rule.hi) * epoch_n))
    out, total = [], 0
    while total < target:
        need = target - total
        n = int(rng.integers(lo, hi + 1))
        if need < hi:
            n = max(need, lo)
        out.append(n)
        total += n
    return out


def generate_epoch(stage: int, cfg: SynthConfig, rng: np.random.Generator):
    """One epoch of signal and its planted-event list ``[(name, onset_s, duration_s), ...]``."""
    if stage not in range(5):
        raise ConfigError(f"stage must be in 0..4, got {stage}")
    fs = cfg.sampling_hz
    n = cfg.epoch_seconds * fs
    bursts = []
    for rule in cfg.stage_mix.get(stage, ()):
        bursts.extend((rule.template, m) for m in _burst_lengths(rule, n, fs, rng))
    free = n - sum(m for _, m in bursts)
    if free < 0:
        raise ConfigError(f"stage {stage} rules overfill a {cfg.epoch_seconds} s epoch")
    order = rng.permutation(len(bursts))
    cuts = np.sort(rng.integers(0, free + 1, size=len(bursts)))
    gaps = np.diff(np.concatenate([[0], cuts]))
    x = pink_noise(n, cfg.noise_sd, rng)
    events = []
    pos = 0
    for gap, idx in zip(gaps, order):
        name, m = bursts[idx]
        pos += int(gap)
        x[pos : pos + m] += _waveform(name, m, fs, rng)
        events.append((name, pos / fs, m / fs))
        pos += m
    return x, events


def generate_subject(subject_id: str, cfg: SynthConfig, seed_seq) -> tuple[Recording, list]:
    rng = np.random.default_rng(seed_seq)
    labels = stage_sequence(cfg.epochs_per_subject, cfg.transitions, rng, cfg.dwell_range)
    gain = rng.uniform(*cfg.subject_gain)
    chunks, log = [], []
    for i, stage in enumerate(labels):
        x, ev = generate_epoch(int(stage), cfg, rng)
        chunks.append(x * gain)
        log.append({"subject_id": subject_id, "epoch_index": i, "events": [list(e) for e in ev]})
    samples = np.concatenate(chunks).astype("<f4")
    return Recording(subject_id, samples, labels), log


def subject_ids(cfg: SynthConfig) -> list[str]:
    return [f"S{i:02d}" for i in range(cfg.subjects)]


def generate_recordings(cfg: SynthConfig):
    seqs = np.random.SeedSequence(cfg.seed).spawn(cfg.subjects)
    recs, log = [], []
    for sid, ss in zip(subject_ids(cfg), seqs):
        r, ev = generate_subject(sid, cfg, ss)
        recs.append(r)
        log.extend(ev)
    return recs, log


def generate_dataset(cfg: SynthConfig, out_dir) -> Path:
    """Write a dataset container plus the ``events.json`` sidecar into ``out_dir``."""
    out_dir = Path(out_dir)
    recs, log = generate_recordings(cfg)
    save_dataset(out_dir, recs, cfg.epoch_seconds, cfg.sampling_hz)
    sidecar = {
        "epoch_seconds": cfg.epoch_seconds,
        "sampling_hz": cfg.sampling_hz,
        "seed": cfg.seed,
        "entries": log,
    }
    (out_dir / EVENTS_FILE).write_text(json.dumps(sidecar, indent=1) + "\n")
    return out_dir


def load_events(path) -> dict[tuple[str, int], list[tuple[str, float, float]]]:
    p = Path(path)
    if p.is_dir():
        p = p / EVENTS_FILE
    raw = json.loads(p.read_text())
    return {
        (e["subject_id"], int(e["epoch_index"])): [(n, float(o), float(d)) for n, o, d in e["events"]]
        for e in raw["entries"]
    }


def window_events(events: dict, subject_id: str, last_epoch: int, window_len: int, epoch_seconds: int):
    """Events inside an L-epoch window, with onsets relative to the window start."""
    out = []
    first = last_epoch - window_len + 1
    for k in range(window_len):
        for name, onset, dur in events.get((subject_id, first + k), ()):
            out.append((name, k * epoch_seconds + onset, dur))
    return out
