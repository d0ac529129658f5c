import numpy as np
import pytest

from scorealign.analytic import GaussianMixture
from scorealign.config import BUILTIN_GMMS
from scorealign.losses import ModeAffinity
from scorealign.nn import params_hash
from scorealign.training import (
    METRIC_COLUMNS,
    PRESETS,
    Alignment,
    AlignmentConfig,
    ScoreTrainConfig,
    ScoreTraining,
    TrainingError,
)


def small(**kw):
    base = dict(iterations=6, batch_size=32, gen_hidden=(8,), assistant_hidden=(8,), assistant_pretrain_steps=3,
                eval_every=3, eval_samples=50)
    return AlignmentConfig(**{**base, **kw})


def gmm():
    return BUILTIN_GMMS["three-component-2d"]()


def reward():
    return ModeAffinity(np.array([[2.0, 0.0]]), 1.5)


def test_presets():
    assert PRESETS["dit-style"] == {"alpha_rew": 10.0, "alpha_cfg": 4.5}
    assert PRESETS["sd15-style"] == {"alpha_rew": 1000.0, "alpha_cfg": 1.5}
    cfg = AlignmentConfig()
    cfg.apply_preset("sd15-style")
    assert (cfg.alpha_rew, cfg.alpha_cfg) == (1000.0, 1.5)
    with pytest.raises(ValueError):
        cfg.apply_preset("sdxl")


@pytest.mark.parametrize("bad", [dict(alpha_rew=-1), dict(k_ta=0), dict(distance="l1"), dict(baseline="kl"),
                                 dict(batch_size=31), dict(ema_decay=1.0), dict(loss_space="x"), dict(lr_gen=0)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        Alignment(small(**bad), gmm())


def test_zero_iterations_is_a_no_op():
    al = Alignment(small(iterations=0), gmm())
    st = al.init_state()
    h = params_hash(st.gen_params)
    st, rows = al.run(st)
    assert rows == [] and params_hash(st.gen_params) == h


def test_rows_have_all_columns_and_eval_cadence():
    al = Alignment(small(alpha_rew=1.0, alpha_cfg=1.0), gmm(), reward=reward())
    _, rows = al.run()
    assert [r["iter"] for r in rows] == list(range(1, 7))
    assert all(set(r) == set(METRIC_COLUMNS) for r in rows)
    assert [r["iter"] for r in rows if r["energy_distance"] != ""] == [3, 6]
    assert all(np.isfinite(r["loss_reg"]) for r in rows)


def test_k_ta_controls_assistant_steps(monkeypatch):
    al = Alignment(small(k_ta=3, iterations=2), gmm())
    st = al.init_state()
    calls = []
    orig = al._assistant_step
    monkeypatch.setattr(al, "_assistant_step", lambda *a: calls.append(1) or orig(*a))
    al.run(st)
    assert len(calls) == 6


def test_generator_frozen_during_assistant_phase(monkeypatch):
    al = Alignment(small(iterations=1), gmm())
    st = al.init_state()
    orig = al.update_assistant

    def tamper(state):
        out = orig(state)
        state.gen_params["b0"] = state.gen_params["b0"] + 1.0
        return out

    monkeypatch.setattr(al, "update_assistant", tamper)
    with pytest.raises(TrainingError, match="generator parameters changed"):
        al.run(st)


def test_assistant_frozen_during_generator_phase(monkeypatch):
    al = Alignment(small(iterations=1), gmm())
    st = al.init_state()
    orig = al.update_generator

    def tamper(state):
        out = orig(state)
        state.asst_params["b0"] = state.asst_params["b0"] + 1.0
        return out

    monkeypatch.setattr(al, "update_generator", tamper)
    with pytest.raises(TrainingError, match="assistant parameters changed"):
        al.run(st)


def test_ema_tracks_parameters():
    al = Alignment(small(iterations=4, ema_decay=0.0), gmm())
    st, _ = al.run()
    assert params_hash(st.gen_ema.shadow) == params_hash(st.gen_params)


def test_antithetic_batch_structure():
    al = Alignment(small(), gmm())
    b = al.generator_batch(al.init_state())
    h = len(b) // 2
    assert np.array_equal(b.z[:h], b.z[h:]) and np.array_equal(b.t[:h], b.t[h:])
    assert np.array_equal(b.eps[:h], -b.eps[h:])


def test_same_seed_same_trajectory():
    a = Alignment(small(seed=3), gmm(), reward=reward()).run()
    b = Alignment(small(seed=3), gmm(), reward=reward()).run()
    c = Alignment(small(seed=4), gmm(), reward=reward()).run()
    assert params_hash(a[0].gen_params) == params_hash(b[0].gen_params)
    assert a[1] == b[1]
    assert params_hash(a[0].gen_params) != params_hash(c[0].gen_params)


def test_resume_from_tensors_equals_unbroken_run():
    cfg = small(iterations=6)
    full, rows_full = Alignment(cfg, gmm()).run()
    al = Alignment(cfg, gmm())
    half, _ = al.run(iterations=3)
    restored = al.state_from_checkpoint(half.to_tensors(), half.to_meta())
    resumed, rows = Alignment(cfg, gmm()).run(restored)
    assert params_hash(resumed.gen_params) == params_hash(full.gen_params)
    assert params_hash(resumed.asst_params) == params_hash(full.asst_params)
    assert rows == rows_full[3:]


def test_checkpoint_architecture_mismatch():
    st = Alignment(small(), gmm()).init_state()
    other = Alignment(small(gen_hidden=(4,)), gmm())
    with pytest.raises(TrainingError):
        other.state_from_checkpoint(st.to_tensors(), st.to_meta())


def test_dipp_kl_and_squared_l2_variants_run():
    for kw in (dict(baseline="dipp-kl"), dict(distance="squared-l2", loss_space="score"), dict(w="adaptive"),
               dict(assistant_warm_start="reference")):
        _, rows = Alignment(small(iterations=2, **kw), gmm()).run()
        assert len(rows) == 2


def test_reward_ignored_when_alpha_zero():
    _, rows = Alignment(small(iterations=2), gmm(), reward=reward()).run()
    assert all(r["loss_reward"] == 0.0 for r in rows)


def test_guidance_log_ratio_needs_analytic_reference():
    trainer = ScoreTraining(ScoreTrainConfig(iterations=0, hidden=(4,)), gmm())
    st = trainer.init_state()
    al = Alignment(small(), gmm(), reference_model=(trainer.model, st.params))
    with pytest.raises(TrainingError):
        al.guidance_log_ratio(al.init_state().gen_params, 10, np.random.default_rng(0))


def test_score_training_resume_and_conditioning():
    cfg = ScoreTrainConfig(iterations=4, batch_size=16, hidden=(8,))
    tr = ScoreTraining(cfg, gmm())
    assert tr.model.n_classes == 2
    full, _ = tr.run()
    half = tr.init_state()
    while half.iteration < 2:
        tr.step(half)
    back = tr.state_from_checkpoint(half.to_tensors(), half.to_meta())
    done, rows = tr.run(back)
    assert [r["iter"] for r in rows] == [3, 4]
    assert params_hash(done.params) == params_hash(full.params)


def test_reference_samples_restricted_to_training_classes():
    al = Alignment(small(classes=(1,)), gmm())
    x = al.reference_samples(500)
    assert np.all(gmm().assign(x) == 2)


def test_unlabelled_mixture_trains():
    g = GaussianMixture(np.array([0.5, 0.5]), np.array([[-1.0], [1.0]]), np.array([[[0.2]], [[0.2]]]))
    _, rows = Alignment(small(iterations=2), g).run()
    assert len(rows) == 2
