import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from feddwa.errors import InvalidInputError
from feddwa.losses import DALossConfig, cross_entropy, daloss

from conftest import central_difference


def test_cross_entropy_single_pixel():
    loss, grad = cross_entropy(np.array([[0.0, 0.0]]), np.array([0]))
    assert loss == pytest.approx(math.log(2), abs=1e-15)
    assert np.allclose(grad, [[-0.5, 0.5]], atol=1e-15)


def test_cross_entropy_saturates():
    loss, _ = cross_entropy(np.array([[[30.0, 0.0, 0.0]]]), np.array([[0]]))
    assert loss < 1e-12


def test_cross_entropy_gradient_finite_differences(rng):
    logits = rng.standard_normal((3, 4, 5))
    mask = rng.integers(0, 5, size=(3, 4))
    _, grad = cross_entropy(logits, mask)
    flat = logits.ravel()
    fd = central_difference(lambda v: cross_entropy(v.reshape(logits.shape), mask)[0], flat, range(flat.size))
    assert np.max(np.abs(grad.ravel() - fd)) < 1e-6


def test_cross_entropy_rejects_bad_mask():
    with pytest.raises(InvalidInputError):
        cross_entropy(np.zeros((2, 3)), np.array([0, 3]))
    with pytest.raises(InvalidInputError):
        cross_entropy(np.zeros((2, 3)), np.array([0.0, 1.0]))


def test_config_rejects_negative_c():
    with pytest.raises(InvalidInputError):
        DALossConfig(C=-0.1)
    assert DALossConfig().C == 0.1


def _fixture(rng, n=30):
    logits = rng.standard_normal((4, 4, 3))
    mask = rng.integers(0, 3, size=(4, 4))
    return logits, mask, rng.standard_normal(n), rng.standard_normal(n)


@pytest.mark.parametrize("C,k", [(0.0, 0.7), (0.1, 0.0)])
def test_daloss_reduces_to_cross_entropy_bitwise(rng, C, k):
    logits, mask, g_prev, g_local = _fixture(rng)
    loss, dl, extra = daloss(logits, mask, k, g_prev, g_local, DALossConfig(C=C))
    ce, dce = cross_entropy(logits, mask)
    assert loss == ce
    assert dl.tobytes() == dce.tobytes()
    assert not np.any(extra)


def test_daloss_hand_arithmetic():
    # two classes, one pixel: logits [z, 0] with softmax(z) = exp(-0.5) gives CE = 0.5
    z = -math.log(math.exp(0.5) - 1.0)
    logits = np.array([[z, 0.0]])
    mask = np.array([0])
    assert cross_entropy(logits, mask)[0] == pytest.approx(0.5, abs=1e-14)
    g_prev, g_local = np.zeros(2), np.array([2.0, 0.0])  # ||delta||^2 = 4
    loss, _, extra = daloss(logits, mask, 0.2, g_prev, g_local, DALossConfig(C=0.1))
    assert loss == pytest.approx(0.58, abs=1e-14)
    assert np.allclose(extra, 2 * 0.1 * 0.2 * g_local)


def test_daloss_length_mismatch(rng):
    logits, mask, g_prev, _ = _fixture(rng)
    with pytest.raises(InvalidInputError):
        daloss(logits, mask, 0.1, g_prev, np.zeros(3), DALossConfig())


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 10), st.floats(0, 10))
def test_daloss_monotone_in_kld(seed, k1, k2):
    rng = np.random.default_rng(seed)
    logits, mask, g_prev, g_local = _fixture(rng)
    lo, hi = sorted((k1, k2))
    cfg = DALossConfig(C=float(rng.uniform(0, 1)))
    assert daloss(logits, mask, lo, g_prev, g_local, cfg)[0] <= daloss(logits, mask, hi, g_prev, g_local, cfg)[0]


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_proximal_pull_points_to_global(seed):
    rng = np.random.default_rng(seed)
    logits, mask, g_prev, g_local = _fixture(rng)
    k = float(rng.uniform(0.01, 2))
    cfg = DALossConfig(C=0.1)
    extra = daloss(logits, mask, k, g_prev, g_local, cfg)[2]
    # a step against the extra gradient moves toward g_prev
    assert float(extra @ (g_prev - g_local)) < 0
    assert np.allclose(extra, 2 * cfg.C * k * (g_local - g_prev))
