import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scorealign import autodiff as ad
from scorealign.processes import (
    AdaptiveGenWeight,
    ConstantWeight,
    EdmLambda,
    ForwardProcess,
    LogNormalTime,
    UniformTime,
    clamp_time,
    diffuse,
    sample_time,
    transition_score,
    transition_score_tensor,
)

EDM = ForwardProcess("edm")


def test_edm_scales():
    t = np.array([0.1, 1.0, 80.0])
    assert np.array_equal(EDM.alpha(t), np.ones(3))
    assert np.array_equal(EDM.beta(t), t)


def test_diffuse_matches_formula_and_rowwise_times():
    rng = np.random.default_rng(0)
    x0, eps, t = rng.normal(size=(4, 2)), rng.normal(size=(4, 2)), np.array([0.1, 0.5, 1.0, 2.0])
    assert np.allclose(diffuse(EDM, x0, t, eps).value, x0 + t[:, None] * eps)


def test_diffuse_gradient_flows_through_x0_only():
    tape = ad.Tape()
    x0 = tape.watch(np.ones((3, 2)))
    tape.backward(ad.sum(diffuse(EDM, x0, 0.5, np.ones((3, 2)))))
    assert np.array_equal(tape.grad(x0), np.ones((3, 2)))


def test_diffuse_rejects_bad_time_and_shape():
    with pytest.raises(ValueError):
        diffuse(EDM, np.zeros((2, 1)), 0.0, np.zeros((2, 1)))
    with pytest.raises(ValueError):
        diffuse(EDM, np.zeros((2, 1)), 1e6, np.zeros((2, 1)))
    with pytest.raises(ad.ShapeError):
        diffuse(EDM, np.zeros((2, 1)), 1.0, np.zeros((3, 1)))


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 50.0), st.integers(0, 1000))
def test_transition_score_recovers_noise(t, seed):
    rng = np.random.default_rng(seed)
    x0, eps = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    xt = diffuse(EDM, x0, t, eps).value
    assert np.allclose(transition_score(EDM, xt, x0, t), -eps / t)
    assert np.allclose(transition_score_tensor(EDM, xt, x0, t).value, -eps / t)


def test_linear_process():
    vp = ForwardProcess.linear(lambda t: np.exp(-t), lambda t: np.sqrt(1 - np.exp(-2 * t)), 5.0)
    x0, eps = np.ones((2, 1)), np.ones((2, 1))
    out = diffuse(vp, x0, 1.0, eps).value
    assert np.allclose(out, np.exp(-1) + np.sqrt(1 - np.exp(-2)))
    with pytest.raises(ValueError):
        ForwardProcess("linear")


def test_unknown_kind():
    with pytest.raises(ValueError):
        ForwardProcess("ode")


def test_time_sampling_is_per_element_and_clamped():
    rng = np.random.default_rng(0)
    t = sample_time(LogNormalTime(-2.0, 2.0), rng, 10_000, EDM)
    assert t.shape == (10_000,) and len(np.unique(t)) == 10_000
    assert np.all(t > 0) and np.all(t <= EDM.T)
    assert abs(np.mean(np.log(t)) + 2.0) < 0.1
    vp = ForwardProcess("vp")
    assert clamp_time(vp, np.array([1e-9, 1e9])).tolist() == [vp.sigma_min, vp.sigma_max]
    u = sample_time(UniformTime(0.5, 1.5), rng, 1000)
    assert u.min() >= 0.5 and u.max() <= 1.5


def test_weightings():
    t = np.array([0.5, 2.0])
    assert np.allclose(EdmLambda(0.5)(t), (t**2 + 0.25) / (0.25 * t**2))
    assert np.array_equal(ConstantWeight(2.0)(t), [2.0, 2.0])
    gap = np.array([[3.0, 4.0], [0.0, 0.0]])
    assert np.allclose(AdaptiveGenWeight()(t, gap), [0.2, 1e8])
    with pytest.raises(ValueError):
        AdaptiveGenWeight()(t)
    with pytest.raises(ValueError):
        EdmLambda()(np.array([0.0]))
