import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from protosleep.errors import ConfigError, NumericError, ValidationError
from protosleep.losses import (
    EPS_DIV,
    LossWeights,
    class_loss,
    diversity_loss,
    l1_loss,
    nearest_sq_dists,
    r1_loss,
    r2_loss,
    total_loss,
)

from conftest import central_diff, rel_err

T = lambda v: torch.tensor(v, dtype=torch.float64)  # noqa: E731


def brute_minima(A, B):
    return [min(sum((a[k] - b[k]) ** 2 for k in range(len(a))) for b in B) for a in A]


def test_class_loss_values():
    assert float(class_loss(T([[0.2] * 5]), torch.tensor([3]))) == pytest.approx(-math.log(0.2))
    assert float(class_loss(T([[0, 1, 0, 0, 0]]), torch.tensor([1]))) == 0.0
    p = T([[0.1, 0.9, 0, 0, 0], [0.5, 0.5, 0, 0, 0]])
    per = [-math.log(0.9), -math.log(0.5)]
    assert float(class_loss(p, torch.tensor([1, 0]))) == pytest.approx(np.mean(per))


def test_class_loss_clamps_zero_probability(caplog):
    v = float(class_loss(T([[1.0, 0, 0, 0, 0]]), torch.tensor([2])))
    assert v == pytest.approx(-math.log(1e-12))
    assert "clamped" in caplog.text


def test_diversity_oracle():
    W = T([[[0.0]], [[2.0]]])
    assert float(diversity_loss(W)) == pytest.approx(1 / (math.log(4) + 1e-4), abs=1e-12)
    assert float(diversity_loss(W)) == pytest.approx(0.7213, abs=1e-4)


def test_diversity_identical_prototypes_is_large_and_finite():
    v = float(diversity_loss(torch.ones(3, 4, 1, dtype=torch.float64)))
    assert math.isfinite(v) and v == pytest.approx(1 / EPS_DIV)


def test_diversity_needs_two():
    with pytest.raises(ConfigError):
        diversity_loss(torch.zeros(1, 2, 1))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(1.01, 5.0))
def test_diversity_decreases_with_scale(seed, t):
    W = torch.from_numpy(np.random.default_rng(seed).uniform(-3, 3, (4, 3, 1)))
    base = float(diversity_loss(W))
    d = torch.cdist(W.reshape(4, -1), W.reshape(4, -1)) ** 2
    if float((d + torch.diag(torch.full((4,), math.inf, dtype=d.dtype))).amin(1).mean()) <= 1:
        return
    assert float(diversity_loss(W * t)) < base


def test_r1_r2_hand_values():
    assert float(r1_loss(T([[0.0]]), T([[1.0], [3.0]]))) == 1.0
    assert float(r2_loss(T([[1.0]]), T([[0.0], [4.0]]))) == 5.0
    S = T([[1.0, 2.0], [3.0, 4.0]])
    assert float(r1_loss(S[:1], S)) == 0.0
    assert float(r2_loss(S, S)) == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 10), st.integers(1, 50), st.integers(1, 4), st.integers(0, 2**31))
def test_r1_r2_match_brute_force_exactly(M, n, D, seed):
    rng = np.random.default_rng(seed)
    W, S = rng.standard_normal((M, D)), rng.standard_normal((n, D))
    m1, m2 = brute_minima(W, S), brute_minima(S, W)
    assert nearest_sq_dists(T(W), T(S)).tolist() == m1
    assert nearest_sq_dists(T(S), T(W)).tolist() == m2
    assert float(r1_loss(T(W), T(S))) == float(T(m1).mean())
    assert float(r2_loss(T(W), T(S))) == float(T(m2).mean())
    assert float(r1_loss(T(W), T(S))) == pytest.approx(math.fsum(m1) / M, rel=1e-14)
    assert float(r2_loss(T(W), T(S))) == pytest.approx(math.fsum(m2) / n, rel=1e-14)


def test_empty_sets():
    with pytest.raises(ValidationError):
        r1_loss(T([[0.0]]), torch.zeros(0, 1, dtype=torch.float64))
    with pytest.raises(ValidationError):
        r2_loss(torch.zeros(0, 1, dtype=torch.float64), T([[0.0]]))


def test_l1():
    assert float(l1_loss(torch.ones(16, 5))) == 80.0
    assert float(l1_loss(torch.zeros(16, 5))) == 0.0
    w = torch.randn(16, 5, dtype=torch.float64)
    assert float(l1_loss(w / 2)) == pytest.approx(float(l1_loss(w)) / 2)


def test_total_with_unit_terms():
    one = T(1.0)
    assert float(total_loss(one, one, one, one, one, LossWeights()).total) == pytest.approx(85.3, abs=1e-12)
    b = total_loss(T(0.7), one, one, one, one, LossWeights(1, 0, 0, 0, 0))
    assert float(b.total) == 0.7


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=5, max_size=5), st.lists(st.floats(0, 60), min_size=5, max_size=5))
def test_total_is_weighted_sum(terms, lams):
    b = total_loss(*map(T, terms), LossWeights(*lams))
    assert abs(float(b.total) - sum(t * w for t, w in zip(terms, lams))) < 1e-9
    assert all(v >= 0 for v in b.as_floats().values())


def test_non_finite_term_named():
    with pytest.raises(NumericError, match="r2"):
        total_loss(T(1.0), T(1.0), T(1.0), T(math.nan), T(1.0), LossWeights())


def test_negative_weight_rejected():
    with pytest.raises(ConfigError):
        LossWeights(cls=-1)


@pytest.mark.parametrize("seed", range(5))
def test_term_gradients_match_finite_differences(seed):
    g = torch.Generator().manual_seed(seed)
    W = torch.rand(4, 3, 1, generator=g, dtype=torch.float64) * 4
    S = torch.randn(12, 3, generator=g, dtype=torch.float64)
    H = torch.randn(8, 5, generator=g, dtype=torch.float64)
    W.requires_grad_(True)
    H.requires_grad_(True)

    def f():
        return (
            diversity_loss(W) + r1_loss(W, S) + r2_loss(W, S) + 0.3 * l1_loss(H)
        )

    f().backward()
    assert rel_err(W.grad, central_diff(f, W)) < 1e-4
    assert rel_err(H.grad, central_diff(f, H)) < 1e-4
