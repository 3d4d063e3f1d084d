import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dnasforge import functional as F
from dnasforge.data import synth_blobs
from dnasforge.errors import DomainError
from dnasforge.optim import SGD
from dnasforge.quant import (ALPHA_MIN, QuantConfig, dorefa_weights, frozen_rounding, pact, pact_clip,
                             pact_quantize, project_alpha, q_k, q_k_array)
from dnasforge.tensor import Tensor, parameter

from helpers import TOL, grad_error

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def on_grid(values, k, lo=0.0, hi=1.0):
    n = 2 ** k - 1
    i = (np.asarray(values) - lo) / (hi - lo) * n
    return np.all(np.abs(i - np.rint(i)) < 1e-9) and np.all((i > -1e-9) & (i < n + 1e-9))


def test_q_k_examples():
    assert q_k(0.7, 1) == 1.0
    assert q_k(0.4, 2) == 1 / 3
    for k in range(1, 9):
        assert q_k(0.0, k) == 0.0 and q_k(1.0, k) == 1.0


def test_q_k_half_step_rounds_up():
    assert q_k(0.5, 2) == 2 / 3
    assert q_k(0.5, 1) == 1.0


def test_q_k_domain():
    with pytest.raises(DomainError):
        q_k(1.1, 2)
    with pytest.raises(DomainError):
        q_k(-0.01, 2)
    with pytest.raises(DomainError):
        q_k(0.5, 0)
    assert q_k(1 + 1e-10, 3) == 1.0


@settings(max_examples=50)
@given(arrays(np.float64, 20, elements=st.floats(0, 1)), st.integers(1, 8))
def test_q_k_monotone_and_on_grid(x, k):
    xs = np.sort(x)
    q = q_k_array(xs, k)
    assert np.all(np.diff(q) >= 0)
    assert on_grid(q, k)
    assert np.all(np.abs(q - xs) <= 0.5 / (2 ** k - 1) + 1e-12)


def test_dorefa_examples():
    assert dorefa_weights(Tensor([0.3]), 4).data.tolist() == [1.0]
    assert dorefa_weights(Tensor([-0.8, 0.8]), 3).data.tolist() == [-1.0, 1.0]
    out = dorefa_weights(Tensor([0.0, 1.0]), 2).data
    assert abs(out[0] - 1 / 3) < 1e-15 and out[1] == 1.0


def test_dorefa_zero_weights_and_full_precision():
    assert np.array_equal(dorefa_weights(Tensor(np.zeros(5)), 2).data, np.zeros(5))
    w = Tensor(np.random.default_rng(0).normal(size=(3, 3)))
    assert dorefa_weights(w, 32) is w
    with pytest.raises(ValueError):
        dorefa_weights(Tensor(np.zeros(0)), 2)
    with pytest.raises(DomainError):
        dorefa_weights(w, 9)


@settings(max_examples=40)
@given(arrays(np.float64, (4, 5), elements=finite), st.integers(1, 8))
def test_dorefa_lands_on_signed_grid(w, k):
    out = dorefa_weights(Tensor(w), k).data
    assert on_grid(out, k, -1.0, 1.0) or not np.any(w)


def test_pact_clip_examples():
    a = Tensor(6.0)
    assert pact_clip(Tensor([-3.0, 8.0, 3.0]), a).data.tolist() == [0.0, 6.0, 3.0]


def test_pact_quantize_examples():
    a = Tensor(6.0)
    assert pact_quantize(Tensor([6.0, 0.0, 3.0]), a, 2).data.tolist() == [6.0, 0.0, 4.0]
    with pytest.raises(DomainError):
        pact_quantize(Tensor([1.0]), Tensor(0.0), 2)
    y = Tensor([0.1, 2.2])
    assert pact_quantize(y, a, 32) is y


@settings(max_examples=40)
@given(arrays(np.float64, 30, elements=st.floats(-10, 20)), st.floats(0.1, 15), st.integers(1, 8))
def test_pact_output_on_grid_and_monotone(x, alpha, k):
    xs = np.sort(x)
    clip = pact_clip(Tensor(xs), Tensor(alpha)).data
    assert np.all(np.diff(clip) >= 0)
    out = pact(Tensor(xs), Tensor(alpha), k).data
    assert on_grid(out / alpha, k)


def test_pact_clip_gradients():
    x = Tensor([-1.0, 2.0, 6.0, 7.0], requires_grad=True)
    a = Tensor(np.array([6.0]), requires_grad=True)
    pact_clip(x, a).sum().backward()
    assert x.grad.tolist() == [0.0, 1.0, 0.0, 0.0]
    assert a.grad.tolist() == [2.0]


def test_pact_clip_finite_difference_away_from_kinks():
    rng = np.random.default_rng(3)
    x = Tensor(rng.uniform(-2, 8, size=12), requires_grad=True)
    x.data[np.abs(x.data) < 0.05] += 0.2
    x.data[np.abs(x.data - 5.0) < 0.05] += 0.2
    a = Tensor(np.array([5.0]), requires_grad=True)
    r = rng.normal(size=12)
    assert grad_error(lambda ts: (pact_clip(ts[0], ts[1]) * r).sum(), [x, a]) < TOL


def test_ste_gradients_under_frozen_rounding():
    rng = np.random.default_rng(5)
    w = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    x = Tensor(rng.uniform(0.1, 4.0, size=6), requires_grad=True)
    a = Tensor(np.array([3.0]), requires_grad=True)
    r1, r2 = rng.normal(size=(4, 3)), rng.normal(size=6)

    def f(ts):
        return (dorefa_weights(ts[0], 3) * r1).sum() + (pact(ts[1], ts[2], 2) * r2).sum()

    with frozen_rounding() as offsets:
        f([w, x, a])
    with frozen_rounding(list(offsets)):
        pass

    def replayed(ts):
        with frozen_rounding(list(offsets)):
            return f(ts)

    assert grad_error(replayed, [w, x, a]) < TOL


def test_frozen_rounding_record_matches_plain_forward():
    w = Tensor(np.random.default_rng(1).normal(size=8))
    plain = dorefa_weights(w, 2).data
    with frozen_rounding() as offs:
        recorded = dorefa_weights(w, 2).data
    with frozen_rounding(offs):
        replay = dorefa_weights(w, 2).data
    assert np.array_equal(plain, recorded)
    assert np.allclose(plain, replay, atol=1e-15)


def test_quant_config_and_alpha_projection():
    QuantConfig(4, 8)
    with pytest.raises(DomainError):
        QuantConfig(0, 8)
    with pytest.raises(DomainError):
        QuantConfig(4, 4, pact_alpha=0.0)
    a = parameter(np.array([-0.5]))
    project_alpha(a)
    assert a.data[0] == ALPHA_MIN


@pytest.mark.parametrize("k", [2, 3, 4, 8])
def test_quantised_linear_classifier_learns(k):
    d = synth_blobs(64, 4, 6, 0.0, seed=2)
    x = d.images.reshape(len(d), -1)
    w = parameter(np.random.default_rng(k).normal(0, 0.1, (x.shape[1], 4)))
    b = parameter(np.zeros(4))
    opt = SGD([w, b], lr=0.1, momentum=0.9)
    for _ in range(200):
        opt.zero_grad()
        F.softmax_cross_entropy(F.linear(Tensor(x), dorefa_weights(w, k), b), d.labels).backward()
        opt.step()
    pred = F.linear(Tensor(x), dorefa_weights(w, k), b).data.argmax(axis=1)
    assert np.mean(pred == d.labels) == 1.0
