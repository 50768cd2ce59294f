import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protosleep.errors import ConfigError
from protosleep.synth import (
    DEFAULT_STAGE_MIX,
    STAGE_FAMILIES,
    TEMPLATES,
    Rule,
    SynthConfig,
    generate_epoch,
    generate_recordings,
    load_events,
    generate_dataset,
    stage_sequence,
    stationary_distribution,
    window_events,
)


def test_recordings_are_deterministic():
    cfg = SynthConfig(seed=11, subjects=2, epochs_per_subject=6)
    (a, ea), (b, eb) = generate_recordings(cfg), generate_recordings(cfg)
    for ra, rb in zip(a, b):
        assert ra.samples.tobytes() == rb.samples.tobytes()
        np.testing.assert_array_equal(ra.labels, rb.labels)
    assert ea == eb


def test_different_seeds_differ():
    a, _ = generate_recordings(SynthConfig(seed=1, subjects=1, epochs_per_subject=3))
    b, _ = generate_recordings(SynthConfig(seed=2, subjects=1, epochs_per_subject=3))
    assert a[0].samples.tobytes() != b[0].samples.tobytes()


def test_shapes_and_dtypes():
    recs, _ = generate_recordings(SynthConfig(seed=0, subjects=3, epochs_per_subject=4))
    for r in recs:
        assert r.samples.dtype == np.float32 and r.samples.shape == (4 * 3000,)
        assert r.labels.dtype == np.uint8 and set(r.labels) <= set(range(5))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 4), st.integers(0, 2**31))
def test_events_fit_epoch_and_do_not_overlap(stage, seed):
    cfg = SynthConfig()
    x, events = generate_epoch(stage, cfg, np.random.default_rng(seed))
    assert x.shape == (3000,) and np.isfinite(x).all()
    spans = sorted((o, o + d) for _, o, d in events)
    for (s0, e0), (s1, _) in zip(spans, spans[1:]):
        assert e0 <= s1 + 1e-9
    assert all(0 <= s and e <= 30 + 1e-9 for s, e in spans)
    allowed = {r.template for r in DEFAULT_STAGE_MIX[stage]}
    assert {n for n, _, _ in events} <= allowed


@pytest.mark.parametrize("stage,name,floor", [(1, "lamf", 0.5), (3, "delta", 0.2)])
def test_composition_floors(stage, name, floor):
    rng = np.random.default_rng(0)
    for _ in range(50):
        _, events = generate_epoch(stage, SynthConfig(), rng)
        assert sum(d for n, _, d in events if n == name) / 30 > floor


def test_event_durations_follow_templates():
    rng = np.random.default_rng(3)
    for stage in range(5):
        for _ in range(20):
            for name, _, d in generate_epoch(stage, SynthConfig(), rng)[1]:
                lo, hi = TEMPLATES[name].duration_range
                if name in ("alpha", "lamf", "delta", "sawtooth"):
                    continue  # coverage fill may cut the last burst short or stretch it to the minimum
                assert lo - 0.01 <= d <= hi + 0.01


def test_planted_band_power():
    # spindle-bearing N2 epochs carry more 12-14 Hz power than N1 epochs
    rng = np.random.default_rng(5)

    def band(x, lo, hi):
        f = np.fft.rfftfreq(len(x), 0.01)
        p = np.abs(np.fft.rfft(x)) ** 2
        return p[(f >= lo) & (f <= hi)].sum() / p.sum()

    n2 = np.mean([band(generate_epoch(2, SynthConfig(), rng)[0], 12, 14) for _ in range(20)])
    n1 = np.mean([band(generate_epoch(1, SynthConfig(), rng)[0], 12, 14) for _ in range(20)])
    assert n2 > 2 * n1


def test_stationary_distribution_is_fixed_point():
    P = np.array(SynthConfig().transitions)
    pi = stationary_distribution(P)
    np.testing.assert_allclose(pi @ P, pi, atol=1e-12)
    assert abs(pi.sum() - 1) < 1e-12 and (pi > 0).all()


def test_stage_sequence_follows_transitions():
    cfg = SynthConfig()
    P = np.array(cfg.transitions)
    seq = stage_sequence(5000, P, np.random.default_rng(0), cfg.dwell_range)
    for a, b in zip(seq, seq[1:]):
        assert a == b or P[a, b] > 0


def test_dwell_lengths_within_range():
    cfg = SynthConfig()
    lo, hi = cfg.dwell_range
    seq = stage_sequence(5000, cfg.transitions, np.random.default_rng(1), cfg.dwell_range)
    cuts = np.flatnonzero(np.diff(seq)) + 1
    bouts = np.diff(cuts)  # interior bouts only; the first and last are truncated
    assert len(bouts) > 50
    assert bouts.min() >= lo and bouts.max() <= hi


def test_geometric_chain_without_dwell():
    P = np.full((5, 5), 0.2)
    seq = stage_sequence(2000, P, np.random.default_rng(0))
    assert np.mean(seq[1:] == seq[:-1]) == pytest.approx(0.2, abs=0.04)


def test_class_frequencies_match_stationary():
    cfg = SynthConfig()
    pi = stationary_distribution(cfg.transitions, cfg.dwell_range)
    seq = stage_sequence(30_000, cfg.transitions, np.random.default_rng(2), cfg.dwell_range)
    freq = np.bincount(seq, minlength=5) / len(seq)
    np.testing.assert_allclose(freq, pi, atol=0.03)


def test_config_rejects_bad_inputs():
    with pytest.raises(ConfigError):
        SynthConfig(transitions=((1, 0, 0, 0, 0),) * 4)
    with pytest.raises(ConfigError):
        SynthConfig(transitions=((0.5, 0.6, 0, 0, 0),) + ((0.2,) * 5,) * 4)
    with pytest.raises(ConfigError):
        SynthConfig(dwell_range=(5, 2))
    with pytest.raises(ConfigError):
        SynthConfig(transitions=((1, 0, 0, 0, 0),) + ((0.2,) * 5,) * 4, dwell_range=(2, 3))
    low = dict(DEFAULT_STAGE_MIX)
    low[1] = (Rule("lamf", "coverage", 0.3, 0.5),)
    with pytest.raises(ConfigError):
        SynthConfig(stage_mix=low)
    with pytest.raises(ConfigError):
        generate_epoch(7, SynthConfig(), np.random.default_rng(0))


def test_stage_families_cover_every_stage():
    assert set(STAGE_FAMILIES) == set(range(5))
    for stage, rules in DEFAULT_STAGE_MIX.items():
        assert rules[0].template in STAGE_FAMILIES[stage]


def test_events_sidecar_and_window_offsets(tmp_path):
    out = generate_dataset(SynthConfig(seed=4, subjects=1, epochs_per_subject=4), tmp_path)
    ev = load_events(out)
    assert len(ev) == 4
    w = window_events(ev, "S00", 3, 2, 30)
    expected = [(n, 30 * k + o, d) for k, e in enumerate((2, 3)) for n, o, d in ev[("S00", e)]]
    assert w == expected
