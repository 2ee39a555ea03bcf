from __future__ import annotations

import math

import numpy as np
import pytest
from conftest import affine_oracle
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm, qmc

from noisealign.analysis import (
    AnalysisError,
    AR1Process,
    DriftEstimate,
    ar1_kl,
    ar1_kl_mc,
    ar1_marginal,
    ar1_simulate,
    gaussian_marginal_kl,
    gaussian_trajectory_kl,
    mc_drift,
    median_bandwidth,
    mmd_drift,
    mmd_permutation_null,
    mmd_unbiased,
)
from noisealign.rng import make_stream
from noisealign.sampler import INITIAL_ONLY, NoiseBundle, sample
from noisealign.schedule import build_linear_schedule
from noisealign.score_model import UNCONDITIONAL, GuidanceSetting, gaussian_model, ring_model

G1 = GuidanceSetting(1.0)
MEAN = np.array([1.0, -0.5])
C = 0.3


# -- AR(1) ----------------------------------------------------------------------------------


def test_ar1_marginal_examples():
    assert ar1_marginal(AR1Process(1.0, 1.0, 5), 0.0) == (0.0, 5.0)
    m, v = ar1_marginal(AR1Process(1.1, 1.0, 10), 1.0)
    assert m == pytest.approx(1.1**10, rel=1e-14) and m == pytest.approx(2.59374, abs=1e-5)
    assert v == pytest.approx((1.1**20 - 1) / 0.21, rel=1e-12) and v == pytest.approx(27.274, abs=1e-3)
    assert ar1_marginal(AR1Process(2.0, 1.0, 1), 3.0) == pytest.approx((6.0, 1.0))


def test_ar1_marginal_against_simulation():
    proc = AR1Process(1.1, 1.0, 10)
    x = ar1_simulate(proc, 1.0, 1_000_000, make_stream(0, 0, "ar1"))
    m, v = ar1_marginal(proc, 1.0)
    n = x.size
    assert abs(x.mean() - m) < 3 * math.sqrt(v / n)
    assert abs(x.var(ddof=1) - v) < 3 * v * math.sqrt(2 / (n - 1))


def test_ar1_kl_examples():
    proc = AR1Process(1.1, 1.0, 10)
    assert ar1_kl(proc, 0.3, 0.3) == 0.0
    kl = ar1_kl(proc, 1.0, 0.99)
    m1, v = ar1_marginal(proc, 1.0)
    m2, _ = ar1_marginal(proc, 0.99)
    assert kl == pytest.approx((m1 - m2) ** 2 / (2 * v), rel=1e-10)
    assert kl == pytest.approx(1.233e-5, rel=1e-3)
    # the closed form saturates at (theta^2 - 1) delta^2 / (2 sigma^2) once theta^(2T) is large,
    # so theta = 3 gives about 32x the theta = 1.1 value, growing like theta^2 beyond that
    kl3 = ar1_kl(AR1Process(3.0, 1.0, 10), 1.0, 0.99)
    assert kl3 == pytest.approx(3.0**20 * 8 * 1e-4 / (2 * (3.0**20 - 1)), rel=1e-10)
    assert kl3 / kl == pytest.approx(32.4326, rel=1e-5)
    assert ar1_kl(AR1Process(100.0, 1.0, 10), 1.0, 0.99) / kl > 1e3
    assert ar1_kl(AR1Process(1.0, 2.0, 4), 1.0, 0.0) == pytest.approx(1.0 / 32)


def test_ar1_kl_mc_single_cell():
    proc = AR1Process(1.5, 1.0, 10)
    est = ar1_kl_mc(proc, 1.0, 0.99, 1_000_000, make_stream(1, 0, "cell"))
    assert est.z_score(ar1_kl(proc, 1.0, 0.99)) < 3


@settings(max_examples=100, deadline=None)
@given(theta=st.floats(0.2, 3.0), sigma=st.floats(0.1, 3.0), T=st.integers(1, 30),
       z1=st.floats(-3, 3), delta=st.floats(1e-4, 1.0))
def test_ar1_kl_properties(theta, sigma, T, z1, delta):
    proc = AR1Process(theta, sigma, T)
    z2 = z1 - delta
    kl = ar1_kl(proc, z1, z2)
    assert kl >= 0
    assert kl == pytest.approx(ar1_kl(proc, z2, z1), rel=1e-12)
    assert ar1_kl(proc, z1, z1 - 2 * delta) / kl == pytest.approx(4.0, abs=1e-10)


@settings(max_examples=50, deadline=None)
@given(t1=st.floats(1.01, 3.0), t2=st.floats(1.01, 3.0), T=st.integers(2, 20))
def test_ar1_kl_increasing_in_theta(t1, t2, T):
    lo, hi = sorted((t1, t2))
    if hi - lo < 1e-6:
        return
    assert ar1_kl(AR1Process(lo, 1.0, T), 1.0, 0.99) < ar1_kl(AR1Process(hi, 1.0, T), 1.0, 0.99)


def test_ar1_invalid():
    with pytest.raises(AnalysisError):
        AR1Process(1.1, 0.0, 5)
    with pytest.raises(AnalysisError):
        AR1Process(1.1, 1.0, 0)


# -- Gaussian chain KLs ------------------------------------------------------------------


def scalar_oracle(schedule, z1, z2):
    maps = affine_oracle(schedule, MEAN, C)
    d2 = float(np.sum((np.asarray(z1) - np.asarray(z2)) ** 2))
    A0, _, s0 = maps[0]
    traj = A0**2 * d2 / (2 * s0**2)
    gain, var = 1.0, 0.0
    for A, _, sig in maps:
        gain, var = A * gain, A**2 * var + sig**2
    return traj, gain**2 * d2 / (2 * var)


def test_trajectory_kl_identical_is_zero():
    s = build_linear_schedule(10, train_steps=1000)
    m = gaussian_model(MEAN, C)
    z = np.array([0.1, 0.2])
    assert gaussian_trajectory_kl(s, m, z, z, G1) == 0.0


def test_one_stochastic_step_by_hand():
    # T = 2: step t=1 is the only stochastic one (the final step has sigma = 0)
    s = build_linear_schedule(2, train_steps=1000)
    m = gaussian_model([0.7], C)
    z1, z2 = np.array([0.5]), np.array([-0.4])
    a = s.alpha_bars[1]
    v = a * C + 1 - a
    mu = lambda z: s.state_coef[1] * z + s.score_coef[1] * (-(z - math.sqrt(a) * 0.7) / v)  # noqa: E731
    expected = float((mu(z1) - mu(z2))[0] ** 2 / (2 * s.sigmas[1] ** 2))
    assert gaussian_trajectory_kl(s, m, z1, z2, G1) == pytest.approx(expected, rel=1e-12)
    # a single stochastic step: the path bound is tight
    assert gaussian_marginal_kl(s, m, z1, z2, G1) == pytest.approx(expected, rel=1e-10)


def test_single_deterministic_step_is_infinite():
    s = build_linear_schedule(1, eta=1.0)
    m = gaussian_model([0.0], C)
    assert gaussian_trajectory_kl(s, m, np.array([1.0]), np.array([0.0]), G1) == math.inf


def test_kls_match_scalar_oracle():
    rng = np.random.default_rng(0)
    m = gaussian_model(MEAN, C)
    for T in (3, 10, 20):
        s = build_linear_schedule(T, train_steps=1000)
        z1, z2 = rng.normal(size=2), rng.normal(size=2)
        traj, marg = scalar_oracle(s, z1, z2)
        assert gaussian_trajectory_kl(s, m, z1, z2, G1) == pytest.approx(traj, rel=1e-8)
        assert gaussian_marginal_kl(s, m, z1, z2, G1) == pytest.approx(marg, rel=1e-8)


@pytest.mark.parametrize("T", [3, 5, 10])
def test_upper_bound_strict(T):
    s = build_linear_schedule(T, train_steps=1000)
    m = gaussian_model(MEAN, C)
    rng = make_stream(T, 0, "pairs")
    for _ in range(20):
        z1, z2 = rng.normal(size=2), rng.normal(size=2)
        assert gaussian_trajectory_kl(s, m, z1, z2, G1) > gaussian_marginal_kl(s, m, z1, z2, G1)


def test_multi_component_rejected(ring, sched10):
    with pytest.raises(AnalysisError):
        gaussian_trajectory_kl(sched10, ring, np.zeros(2), np.ones(2), G1)


# -- Monte Carlo drift ------------------------------------------------------------------------


def bundle(z):
    return NoiseBundle(np.asarray(z, float), None, INITIAL_ONLY)


def test_mc_drift_same_bundle_is_exactly_zero(ring, sched10):
    b = bundle([0.3, -0.7])
    for est in ("transition", "score"):
        d = mc_drift(b, b, "c1", sched10, ring, GuidanceSetting(5.0), 200, make_stream(0), estimator=est)
        assert d.value == 0.0 and d.standard_error == 0.0 and d.sample_count == 200


def test_mc_drift_matches_trajectory_kl():
    s = build_linear_schedule(10, train_steps=1000)
    m = gaussian_model(MEAN, C)
    rng = make_stream(7, 0, "pair")
    z1, z2 = rng.normal(size=2), rng.normal(size=2)
    kl = gaussian_trajectory_kl(s, m, z1, z2, G1)
    est = mc_drift(bundle(z1), bundle(z2), "c0", s, m, G1, 10_000, make_stream(7, 0, "mc"))
    assert abs(0.5 * est.value - kl) < 3 * 0.5 * est.standard_error


def test_mc_drift_unbiased_over_seeds():
    s = build_linear_schedule(5, train_steps=1000)
    m = gaussian_model(MEAN, C)
    z1, z2 = np.array([0.3, 0.1]), np.array([-0.2, 0.4])
    kl = gaussian_trajectory_kl(s, m, z1, z2, G1)
    vals = [mc_drift(bundle(z1), bundle(z2), "c0", s, m, G1, 500, make_stream(i, 0, "u")).value for i in range(200)]
    se = np.std(vals, ddof=1) / np.sqrt(len(vals))
    assert abs(np.mean(vals) - 2 * kl) < 3 * se


def test_mc_drift_near_identical_bundles_straddle_zero(ring, sched10):
    g = GuidanceSetting(5.0)
    z = np.array([0.2, 0.5])
    vals = [mc_drift(bundle(z + 1e-3), bundle(z), "c0", sched10, ring, g, 50, make_stream(i, 0, "s"),
                     estimator=est).value
            for i in range(30) for est in ("transition", "score")]
    assert min(vals) < 0 < max(vals)


def test_mc_drift_sharding_is_deterministic(ring, sched10):
    g = GuidanceSetting(5.0)
    args = (bundle([0.1, 0.1]), bundle([0.0, 0.3]), "c0", sched10, ring, g, 101)
    a = mc_drift(*args, make_stream(3), shards=4)
    b = mc_drift(*args, make_stream(3), shards=4)
    assert a == b and a.sample_count == 101
    with pytest.raises(AnalysisError):
        mc_drift(*args[:-1], 1)
    with pytest.raises(AnalysisError):
        mc_drift(*args, estimator="nope")


def test_drift_estimate_summation_is_order_independent():
    rng = np.random.default_rng(0)
    v = rng.normal(size=10_001) * 1e3
    a = DriftEstimate.from_samples(v)
    b = DriftEstimate.from_samples(v[::-1].copy())
    assert abs(a.value - b.value) <= 1e-12 * max(1.0, abs(a.value))


# -- MMD ---------------------------------------------------------------------------------------


def gaussian_cloud(n, mean, s, seed):
    u = qmc.Sobol(2, scramble=True, seed=seed).random(n)
    return np.asarray(mean) + s * norm.ppf(u)


def test_mmd_identical_sets():
    pts = np.random.default_rng(0).normal(size=(50, 2))
    assert mmd_unbiased(pts, pts, 1.0) <= 0.0
    assert mmd_drift(pts, pts, 1.0) == 0.0


def test_mmd_separated_gaussians_closed_form():
    s, h, d = 1.0, 3.0, 2
    mu1, mu2 = np.zeros(2), np.array([10.0, 0.0])
    a = gaussian_cloud(4096, mu1, s, 1)
    b = gaussian_cloud(4096, mu2, s, 2)
    c = (h**2 / (h**2 + 2 * s**2)) ** (d / 2)
    pop = 2 * c * (1 - math.exp(-100.0 / (2 * (h**2 + 2 * s**2))))
    assert abs(mmd_drift(a, b, h) - pop) < 1e-3


def test_mmd_same_mixture_below_permutation_quantile():
    m = ring_model(5, 3.0, 0.1)
    s = build_linear_schedule(20, train_steps=1000)
    g = GuidanceSetting(1.0)
    rng = make_stream(0, 0, "perm")
    draws = []
    for _ in range(2):
        z = rng.standard_normal((500, 2))
        draws.append(np.asarray(sample(NoiseBundle(z, None, INITIAL_ONLY), UNCONDITIONAL, s, m, g, rng).x0))
    h = median_bandwidth(*draws)
    stat = mmd_unbiased(draws[0], draws[1], h)
    null = mmd_permutation_null(draws[0], draws[1], h, 200, make_stream(0, 0, "perm-null"))
    assert stat < np.quantile(null, 0.95)


def test_mmd_grows_along_translation_ladder():
    a = gaussian_cloud(512, np.zeros(2), 1.0, 3)
    b0 = gaussian_cloud(512, np.zeros(2), 1.0, 4)
    vals = [mmd_drift(a, b0 + np.array([shift, 0.0]), 1.5) for shift in (0.0, 0.5, 1.0, 2.0, 4.0, 8.0)]
    assert np.all(np.diff(vals) > 0)


def test_mmd_errors():
    with pytest.raises(AnalysisError):
        mmd_drift(np.zeros((1, 2)), np.ones((5, 2)), 1.0)
    with pytest.raises(AnalysisError):
        mmd_drift(np.zeros((3, 2)), np.ones((5, 2)), 0.0)
    with pytest.raises(AnalysisError):
        median_bandwidth(np.zeros((3, 2)), np.zeros((3, 2)))
