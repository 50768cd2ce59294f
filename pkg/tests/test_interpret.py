import numpy as np
import pytest
import torch

from protosleep.data import windows_for
from protosleep.errors import ValidationError
from protosleep.interpret import (
    build_prototype_cards,
    error_score_summary,
    explain,
    export_score_embeddings,
    patch_epoch,
    row_labels,
)
from protosleep.sensing import project_prototypes
from protosleep.training import Inference, compute_features, run_inference

from conftest import TINY_DATA


@pytest.fixture
def projected(tiny_model, tiny_recordings):
    ws = windows_for(tiny_recordings, TINY_DATA)
    tiny_model.eval()
    project_prototypes(tiny_model.bank, compute_features(tiny_model, ws), [w.ref for w in ws])
    return tiny_model, ws


def test_explain_requires_projection(tiny_model, tiny_recordings):
    w = windows_for(tiny_recordings, TINY_DATA)[0]
    with pytest.raises(ValidationError, match="projection"):
        explain(tiny_model, w)


def test_explanation_reconstructs_logits(projected):
    model, ws = projected
    for w in ws[:10]:
        rep = explain(model, w)
        assert np.abs(rep.reconstructed_logits() - rep.logits).max() < 1e-6
        assert rep.contributions.shape == (12, 5) and rep.ref == w.ref
        top = rep.top["W"]
        assert len(top) == 3 and top[0][1] >= top[1][1] >= top[2][1]
    d = rep.to_dict()
    assert set(d["score"]) == set(row_labels(6)) and "note" in d
    assert rep.to_csv().splitlines()[0] == "estimator,score,W,N1,N2,N3,REM"


def test_zeroed_head_gives_zero_contributions(projected):
    model, ws = projected
    with torch.no_grad():
        model.head.fc.weight.zero_()
    assert not explain(model, ws[0]).contributions.any()


def test_cards_top_segment_is_projection_source(projected):
    model, ws = projected
    cards = build_prototype_cards(model, ws, n=3, occlusion=True, win_s=0.5, stride_s=0.5)
    assert len(cards) == model.M
    for card in cards:
        src = model.bank.meta[card.index].source
        assert card.segments[0].ref == (src.subject_id, src.epoch_index)
        assert card.segments[0].distance == 0.0
        dists = [s.distance for s in card.segments]
        assert dists == sorted(dists)
        keys = {patch_epoch(model, next(w for w in ws if w.ref == s.ref), s.patch) for s in card.segments}
        assert len(keys) == len(card.segments)
        assert card.occlusion is not None and 0 <= card.occlusion.onset_s < 4
        assert 0 <= card.dominant_stage < 5
        assert card.to_dict()["prototype"] == card.index


def _inference(labels, preds, scores):
    scores = np.asarray(scores, dtype=float)
    logits = np.full((len(preds), 5), -5.0)
    logits[np.arange(len(preds)), preds] = 5.0
    refs = [("S0", i) for i in range(len(labels))]
    return Inference(refs, np.asarray(labels), logits, scores, np.zeros((len(labels), scores.shape[1] // 2)))


def test_error_summary_hand_means():
    inf = _inference([2, 2, 2], [2, 0, 2], [[1.0, 3.0], [5.0, 7.0], [3.0, 1.0]])
    s = error_score_summary(inf)
    assert s.counts[2] == (2, 1)
    np.testing.assert_allclose(s.correct_means[2], [2.0, 2.0])
    np.testing.assert_allclose(s.error_means[2], [5.0, 7.0])
    assert any("W: no instances" in f for f in s.flags)
    assert "N2,0,WE,2.0,5.0,2,1" in s.to_csv()


def test_error_summary_all_correct_flags_empty_group():
    s = error_score_summary(_inference([1, 1], [1, 1], [[1.0, 2.0], [3.0, 4.0]]))
    assert s.error_means[1] is None
    assert "N1: no misclassified windows" in s.flags


def test_summary_conserves_counts(projected):
    model, ws = projected
    inf = run_inference(model, ws)
    s = error_score_summary(inf)
    rows = inf.confusion().counts.sum(axis=1)
    for stage, (nc, ne) in s.counts.items():
        assert nc + ne == rows[stage]


def test_score_export_is_sorted_and_stable(projected):
    model, ws = projected
    inf = run_inference(model, ws[::-1])
    text = export_score_embeddings(inf)
    lines = text.splitlines()
    assert len(lines) == len(ws) + 1
    assert len(lines[0].split(",")) == 5 + 2 * model.M
    refs = [(l.split(",")[0], int(l.split(",")[1])) for l in lines[1:]]
    assert refs == sorted(refs)
    assert export_score_embeddings(run_inference(model, ws)) == text
