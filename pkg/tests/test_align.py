from __future__ import annotations

import numpy as np
import pytest
from conftest import affine_oracle

from noisealign import grad_engine as ge
from noisealign.align import (
    AlignmentConfig,
    AlignmentError,
    best_of_n,
    dno_optimize,
    mira_loss,
    mira_optimize,
    noise_shell_penalty,
    run_method,
)
from noisealign.optim import AdamW, GradientDescent, make_optimizer
from noisealign.rewards import RewardSpec, evaluate
from noisealign.rng import make_stream
from noisealign.sampler import INITIAL_ONLY, NoiseBundle, sample
from noisealign.schedule import build_linear_schedule
from noisealign.score_model import GuidanceSetting, gaussian_model, ring_model

HACK = RewardSpec("hackable_peak", peak=(5.0, 0.0), width=1.0)


def toy():
    return build_linear_schedule(100, train_steps=1000), ring_model(5, 3.0, 0.1), GuidanceSetting(5.0)


def test_mira_loss_examples():
    assert mira_loss(0.7, 2.0, 5.0, 0.0) == -0.7
    assert mira_loss(0.7, 3.0, 3.0, 0.9) == -0.7
    assert mira_loss(0.5, 2.0, 3.0, 0.2) == pytest.approx(-0.3, abs=1e-15)
    assert mira_loss(0.5, 4.0, 3.0, 0.2, "linear") == pytest.approx(-0.7)
    assert mira_loss(0.5, 4.0, 3.0, 0.2, "hinge") == pytest.approx(-0.5)
    assert mira_loss(0.5, 4.0, 3.0, 0.2, "absolute") == pytest.approx(-0.3)


def test_zero_iterations_is_a_noop(ring, sched10):
    b = NoiseBundle.draw(make_stream(0), 2, 10)
    rep = mira_optimize(b, "c0", HACK, AlignmentConfig(iterations=0), sched10, ring, GuidanceSetting(5.0))
    assert rep.records == []
    np.testing.assert_array_equal(rep.final_bundle.initial, b.initial)
    np.testing.assert_array_equal(rep.final_bundle.injected, b.injected)
    assert rep.final_drift == 0.0


def test_convex_quadratic_gradient_flow():
    s = build_linear_schedule(10, eta=0.0, train_steps=1000)
    mean = np.array([1.0, -0.5])
    m = gaussian_model(mean, 0.3)
    G = np.prod([A for A, _, _ in affine_oracle(s, mean, 0.3)])
    spec = RewardSpec("target_distance", target=tuple(mean))
    # the loss is ||G z + c - m||^2, so this step size halves the error every iteration
    cfg = AlignmentConfig(iterations=40, optimizer="gd", learning_rate=0.25 / G**2, beta=0.0)
    b = NoiseBundle(np.array([2.0, 1.0]), np.zeros((10, 2)))
    rep = mira_optimize(b, "c0", spec, cfg, s, m, GuidanceSetting(1.0))
    r = rep.column("reward")
    stop = np.argmax(r > -1e-6) if np.any(r > -1e-6) else len(r)
    assert stop > 0 and np.all(np.diff(r[: stop + 1]) > 0)
    assert rep.final_reward > -1e-6


def test_beta_separates_drift():
    s, m, g = toy()
    b = NoiseBundle.draw(make_stream(0, 0, "z_init"), 2, 100)
    r0 = mira_optimize(b, "c0", HACK, AlignmentConfig(beta=0.0, penalty="absolute"), s, m, g)
    r5 = mira_optimize(b, "c0", HACK, AlignmentConfig(beta=0.5, penalty="absolute"), s, m, g)
    assert abs(r0.final_drift) >= 10 * abs(r5.final_drift)
    assert r0.final_reward > r5.final_reward


def test_iteration_zero_drift_and_loss_reconstruction(ring, sched10):
    g = GuidanceSetting(5.0)
    b = NoiseBundle.draw(make_stream(3), 2, 10)
    for penalty in ("linear", "hinge", "absolute"):
        cfg = AlignmentConfig(iterations=6, beta=0.7, penalty=penalty)
        rep = mira_optimize(b, "c0", HACK, cfg, sched10, ring, g)
        assert rep.records[0].drift == 0.0
        for rec in rep.records:
            S = rep.s0 - rec.drift
            assert rec.loss == pytest.approx(float(mira_loss(rec.reward, S, rep.s0, 0.7, penalty)), abs=1e-10)


def test_mira_beta0_equals_dno_lambda0(ring, sched10):
    g = GuidanceSetting(5.0)
    b = NoiseBundle.draw(make_stream(9), 2, 10)
    a = mira_optimize(b, "c0", HACK, AlignmentConfig(iterations=8, beta=0.0, seed=2), sched10, ring, g)
    d = dno_optimize(b, "c0", HACK, AlignmentConfig(method="dno", iterations=8, seed=2), sched10, ring, g)
    np.testing.assert_array_equal(a.final_bundle.initial, d.final_bundle.initial)
    np.testing.assert_array_equal(a.final_bundle.injected, d.final_bundle.injected)
    np.testing.assert_array_equal(a.column("loss"), d.column("loss"))
    np.testing.assert_array_equal(d.column("loss"), -d.column("reward"))
    assert "stand-in" in d.notes["dno_regularizer"]


def test_shell_penalty_zero_on_shell(ring, sched10):
    rng = np.random.default_rng(0)
    vecs = rng.normal(size=(11, 2))
    vecs *= np.sqrt(2) / np.linalg.norm(vecs, axis=1, keepdims=True)
    b = NoiseBundle(vecs[0], vecs[1:])
    assert float(noise_shell_penalty(b)) == pytest.approx(0.0, abs=1e-24)
    cfg = AlignmentConfig(method="dno", iterations=1, dno_noise_reg_weight=3.0)
    rep = dno_optimize(b, "c0", HACK, cfg, sched10, ring, GuidanceSetting(5.0))
    assert rep.records[0].loss == pytest.approx(-rep.records[0].reward, abs=1e-15)


def test_gradient_descent_is_exact():
    opt = GradientDescent(0.1)
    p = [np.array([1.0, 2.0])]
    out = opt.step(p, [np.array([0.5, -1.0])])
    np.testing.assert_array_equal(out[0], np.array([1.0, 2.0]) - 0.1 * np.array([0.5, -1.0]))


def test_adamw_matches_reference_on_scripted_gradients():
    rng = np.random.default_rng(4)
    grads = rng.normal(size=(12, 3))
    lr, b1, b2, eps, wd = 0.01, 0.9, 0.999, 1e-8, 0.05
    opt = AdamW(lr, (b1, b2), eps, wd)
    p = np.array([0.5, -0.3, 1.2])
    ref = p.copy()
    m = np.zeros(3)
    v = np.zeros(3)
    for k, g in enumerate(grads, start=1):
        (p,) = opt.step([p], [g])
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g**2
        mhat = m / (1 - b1**k)
        vhat = v / (1 - b2**k)
        ref = ref - lr * wd * ref
        ref = ref - lr * mhat / (np.sqrt(vhat) + eps)
        np.testing.assert_allclose(p, ref, rtol=0, atol=1e-12)
    with pytest.raises(ValueError):
        make_optimizer("sgd", 0.1)


def test_best_of_n(ring, sched10):
    g = GuidanceSetting(5.0)
    dark = RewardSpec("darkness")
    one = best_of_n("c0", dark, AlignmentConfig(method="best_of_n", best_of_n_count=1, seed=5), sched10, ring, g)
    rng = make_stream(5, 0, "best_of_n")
    b = NoiseBundle.draw(rng, 2, 10)
    tr = sample(b, "c0", sched10, ring, g, rng)
    assert one.final_reward == float(evaluate(dark, tr.x0))
    fifty = best_of_n("c0", dark, AlignmentConfig(method="best_of_n", best_of_n_count=50), sched10, ring, g)
    assert len(fifty.records) == 50
    assert fifty.final_reward >= np.median(fifty.column("reward"))


def test_best_of_n_monotone_in_n():
    s = build_linear_schedule(5, train_steps=1000)
    m = ring_model(5, 3.0, 0.1)
    g = GuidanceSetting(1.0)
    dark = RewardSpec("darkness")
    means = []
    for n in (1, 10, 50):
        vals = [best_of_n("uncond", dark, AlignmentConfig(method="best_of_n", best_of_n_count=n, seed=rep),
                          s, m, g).final_reward for rep in range(100)]
        means.append(np.mean(vals))
    assert means[0] <= means[1] <= means[2]


def test_errors(ring, sched10):
    g = GuidanceSetting(1.0)
    b = NoiseBundle.draw(make_stream(0), 2, 10)
    with pytest.raises(ge.NonDifferentiableError, match="mira_dpo_optimize"):
        mira_optimize(b, "c0", RewardSpec("quantized_target", target=(3.0, 0.0)), AlignmentConfig(), sched10, ring, g)
    with pytest.raises(AlignmentError):
        mira_optimize(b, "c0", HACK, AlignmentConfig(method="dno"), sched10, ring, g)
    with pytest.raises(AlignmentError):
        AlignmentConfig(method="best_of_n")
    with pytest.raises(AlignmentError):
        AlignmentConfig(best_of_n_count=3)
    with pytest.raises(AlignmentError):
        AlignmentConfig(penalty="quadratic")
    with pytest.raises(AlignmentError):
        AlignmentConfig(learning_rate=0.0)


def test_derivation_faithful_and_initial_only_modes(ring, sched10):
    g = GuidanceSetting(5.0)
    b = NoiseBundle.draw(make_stream(1), 2, 10)
    cfg = AlignmentConfig(iterations=4, surrogate="derivation-faithful")
    rep = mira_optimize(b, "c0", HACK, cfg, sched10, ring, g)
    assert rep.records[0].drift == pytest.approx(0.0, abs=1e-12)
    cfg = AlignmentConfig(iterations=4, noise_mode=INITIAL_ONLY)
    rep = run_method(b, "c0", HACK, cfg, sched10, ring, g)
    assert rep.final_bundle.injected is None and len(rep.records) == 4
    rep2 = run_method(b, "c0", HACK, cfg, sched10, ring, g)
    np.testing.assert_array_equal(rep.column("reward"), rep2.column("reward"))
