import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scorealign import autodiff as ad
from scorealign.nn import (
    AdamState,
    CheckpointError,
    EmaState,
    Mlp,
    adam_step,
    ema_update,
    load_checkpoint,
    params_hash,
    save_checkpoint,
)


def test_zero_gradient_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    out = adam_step(p, {"w": np.zeros(2)}, AdamState(0.1))
    assert np.array_equal(out["w"], p["w"])


def test_degenerate_adam_is_sign_descent():
    p = {"w": np.array([0.0, 0.0, 0.0])}
    g = {"w": np.array([3.0, -0.01, 7.0])}
    out = adam_step(p, g, AdamState(0.05, beta1=0.0, beta2=0.0, eps=0.0))
    assert np.allclose(out["w"], -0.05 * np.sign(g["w"]))


def test_adam_converges_on_quadratic():
    p = {"w": np.array([0.0])}
    state = AdamState(0.1)
    for _ in range(100):
        p = adam_step(p, {"w": 2 * (p["w"] - 3.0)}, state)
    assert abs(p["w"][0] - 3.0) < 0.05


def test_adam_rejects_nan_with_name():
    with pytest.raises(FloatingPointError, match="'w'"):
        adam_step({"w": np.zeros(2)}, {"w": np.array([np.nan, 0.0])}, AdamState(0.1))


def test_adam_rejects_bad_lr():
    with pytest.raises(ValueError):
        adam_step({"w": np.zeros(1)}, {"w": np.zeros(1)}, AdamState(0.0))


def test_ema_decay_zero_copies():
    st_ = EmaState.from_params({"w": np.ones(2)}, 0.0)
    assert np.array_equal(ema_update(st_, {"w": np.array([4.0, 5.0])})["w"], [4.0, 5.0])


def test_ema_direct_formula():
    st_ = EmaState.from_params({"w": np.array([1.0])}, 0.95)
    assert np.isclose(ema_update(st_, {"w": np.array([0.0])})["w"][0], 0.95)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.0, 0.99), st.integers(1, 30), st.floats(-5, 5), st.floats(-5, 5))
def test_ema_geometric_decay(decay, k, shadow, target):
    st_ = EmaState.from_params({"w": np.array([shadow])}, decay)
    for _ in range(k):
        ema_update(st_, {"w": np.array([target])})
    assert np.isclose(st_.shadow["w"][0] - target, (shadow - target) * decay**k, atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.0, 0.99), st.lists(st.floats(-10, 10), min_size=1, max_size=20))
def test_ema_stays_in_hull(decay, values):
    st_ = EmaState.from_params({"w": np.array([values[0]])}, decay)
    for v in values:
        ema_update(st_, {"w": np.array([v])})
    assert min(values) - 1e-9 <= st_.shadow["w"][0] <= max(values) + 1e-9


def test_ema_rejects_bad_decay_and_shape():
    with pytest.raises(ValueError):
        EmaState.from_params({"w": np.zeros(1)}, 1.0)
    st_ = EmaState.from_params({"w": np.zeros(2)}, 0.5)
    with pytest.raises(ad.ShapeError):
        ema_update(st_, {"w": np.zeros(3)})


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(3)
    tensors = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=5) * 1e-300, "c": np.array(np.pi)}
    save_checkpoint(tmp_path / "x.json", tensors, {"iteration": 7})
    back, meta = load_checkpoint(tmp_path / "x.json")
    assert meta == {"iteration": 7}
    assert list(back) == list(tensors)
    assert params_hash(back) == params_hash(tensors)


def test_checkpoint_rejects_foreign_file(tmp_path):
    (tmp_path / "bad.json").write_text('{"format": "other"}')
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.json")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.json")


def test_mlp_shapes_and_in_scale():
    mlp = Mlp([3, 16, 2])
    p = mlp.init(np.random.default_rng(0), in_scale=3.0)
    assert p["w0"].shape == (3, 16) and p["b1"].shape == (2,)
    assert np.any(p["b0"] != 0)
    assert mlp.param_count() == 3 * 16 + 16 + 16 * 2 + 2
    assert mlp.forward(np.zeros((5, 3)), p).shape == (5, 2)
