import json

import numpy as np
import pytest

from scorealign.analytic import AffineGenerator, GaussianMixture
from scorealign.distances import PseudoHuber, SquaredL2
from scorealign.processes import ForwardProcess
from scorealign.verify import (
    CrnStream,
    CrnViolation,
    DsmRecoveryConfig,
    central_mass_grid,
    check_dsm_recovery,
    check_score_projection,
    check_theorem1,
    check_theorem2,
    gradient_error,
    make_field,
    two_class_1d,
    two_mode_gmm,
    validated_fd,
)

EDM = ForwardProcess("edm")
P1 = AffineGenerator([[0.4]], [0.5], 2.5)
Q1 = GaussianMixture.gaussian([0.0], [[1.0]])


def test_gradient_error_is_scale_free():
    assert gradient_error(np.array([1.1, 2.0]), np.array([1.0, 2.0])) == pytest.approx(0.05)
    assert gradient_error(np.array([11.0, 20.0]), np.array([10.0, 20.0])) == pytest.approx(0.05)


def test_validated_fd_richardson_is_exact_for_cubics():
    fd, change, ok = validated_fd(lambda p: float(p["x"][0] ** 3), {"x": np.array([2.0])}, 0.1)
    assert ok and fd["x"][0] == pytest.approx(12.0, rel=1e-12)


def test_validated_fd_flags_unstable_step():
    _, change, ok = validated_fd(lambda p: float(np.abs(p["x"][0]) ** 0.5), {"x": np.array([1e-3])}, 1e-3)
    assert not ok and change > 0.1


def test_crn_stream_detects_misaligned_draws():
    sizes = iter([3, 4])
    stream = CrnStream(0, lambda rng: rng.normal(size=next(sizes)))
    stream()
    stream()
    with pytest.raises(CrnViolation):
        stream.assert_aligned()


def test_fields():
    x = np.ones((2, 3))
    for kind in ("constant", "linear", "identity", "tanh"):
        assert make_field(kind, 3)(x).shape == (2, 3)
    with pytest.raises(ValueError):
        make_field("cubic", 3)


def test_score_projection_and_shifted_control():
    ok = check_score_projection(P1, EDM, 0.5, "linear", 200_000)
    assert ok.passed and ok.stderr > 0
    bad = check_score_projection(P1, EDM, 0.5, "linear", 200_000, score_shift=1.0)
    assert bad.passed and bad.error > 10


def test_theorem1_exact_1d():
    r = check_theorem1(P1, Q1, EDM, SquaredL2(), path="exact")
    assert r.passed and r.error <= 1e-4 and r.details["fd_step_ok"]


def test_theorem1_detached_direction_fails_in_2d():
    p2 = AffineGenerator([[0.5, 0.1], [-0.1, 0.3]], [0.4, -0.2], 2.5)
    q2 = GaussianMixture.gaussian([0.0, 0.3], [[1.0, 0.2], [0.2, 0.7]])
    r = check_theorem1(p2, q2, EDM, SquaredL2(), path="exact", detach_direction=True)
    assert not r.passed and r.error > 0.1


def test_theorem1_mc_small():
    r = check_theorem1(P1, Q1, EDM, PseudoHuber(0.1), 20_000, time_grid=[0.2, 0.8, 2.0])
    assert r.error <= 2e-2


def test_theorem2_and_flipped_control():
    gen = AffineGenerator([[0.4]], [0.3], 2.5)
    r = check_theorem2(gen, two_class_1d(), EDM, 1, n=20_000)
    assert r.passed and r.details["sign_test"]
    bad = check_theorem2(gen, two_class_1d(), EDM, 1, n=20_000, flip_sign=True)
    assert not bad.passed and bad.error > 1


def test_central_mass_grid_inside_support():
    pts = central_mass_grid(two_mode_gmm(), EDM, 0.1)
    assert len(pts) > 100
    assert np.all(np.min(np.abs(np.abs(pts[:, 0]) - 2.0)) < 1.5)


def test_untrained_score_is_far_off():
    r = check_dsm_recovery(DsmRecoveryConfig(two_mode_gmm(), steps=0, train=False, hidden=(16, 16)))
    assert r.passed and r.error > 0.5


def test_report_serialises():
    r = check_theorem1(P1, Q1, EDM, SquaredL2(), path="exact")
    doc = json.loads(r.to_json())
    assert doc["name"].startswith("theorem1") and isinstance(doc["estimate"], list)
