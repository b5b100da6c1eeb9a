from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from casimir_films import analysis as A
from casimir_films import instrument as I

P = I.CantileverParams()


@pytest.fixture(scope="module")
def run(au_law):
    """One noisy run of 35 sweeps over Au/Au and its analysis."""
    sweeps = I.simulate_run(au_law, P, seed=5)
    return sweeps, A.analyze_run(sweeps, P)


def _runset(a0, truncated=()):
    sweeps = [I.SweepRecord(i, [0.0], [0.0], [1.0], [1.0], [0.0], [1.0], 0.0, truncated=i in truncated)
              for i in range(len(a0))]
    return A.RunSet(sweeps, np.asarray(a0), np.full(len(a0), 1e-10))


# ---------------------------------------------------------------------------
# a0


def test_fit_a0_noise_free(au_law):
    sw = I.simulate_sweep(au_law, P, noise=I.NoiseModel.noiseless(a0_start=570e-9), seed=1)
    fit = A.fit_a0(sw)
    assert fit.a0 == pytest.approx(570e-9, rel=1e-9)
    assert fit.gain == pytest.approx(I.NoiseModel().signal_gain, rel=1e-9)


def test_fit_a0_constant_signal():
    n = 20
    sw = I.SweepRecord(0, np.linspace(0, 4e-7, n), np.zeros(n), np.ones(n), np.ones(n), np.arange(n, dtype=float),
                       np.full(n, 3.0), 1e4, sigma_signal=1e-3)
    with pytest.raises(A.CalibrationQualityError):
        A.fit_a0(sw)


def test_fit_a0_too_short():
    sw = I.SweepRecord(0, [0.0, 1e-8], [0, 0], [1, 1], [1, 1], [0, 1], [1, 1], 1e4)
    with pytest.raises(A.CalibrationQualityError):
        A.fit_a0(sw)


def test_fit_a0_coverage(au_law):
    hits = 0
    n = 200
    noise = I.NoiseModel(a0_drift_per_sweep=0.0)
    for seed in range(n):
        sw = I.simulate_sweep(au_law, P, noise=noise, seed=seed)
        fit = A.fit_a0(sw)
        hits += abs(fit.a0 - sw.a0_true) <= fit.sigma_a0
    assert 0.60 <= hits / n <= 0.76


# ---------------------------------------------------------------------------
# screening


def test_screen_small_drifts():
    rs = A.screen_sweeps(_runset(600e-9 + 1e-9 * np.arange(8)))
    assert rs.flags == {} and rs.accepted == list(range(8))


def test_screen_single_jump():
    a0 = 600e-9 + 1e-9 * np.arange(8)
    a0[4:] += 8e-9
    rs = A.screen_sweeps(_runset(a0))
    assert rs.flags == {4: ["DA0_GT_5NM"]}
    assert rs.rejection_log() == [{"sweep": 4, "reasons": ["DA0_GT_5NM"]}]


def test_screen_second_difference():
    rs = A.screen_sweeps(_runset(np.cumsum([600e-9, 0.0, 4e-9, 0.0])))
    assert rs.flags == {2: ["DDA0_GT_3NM"]}


def test_screen_keeps_truncation_reason():
    rs = A.screen_sweeps(_runset(np.full(3, 6e-7), truncated=(1,)))
    assert rs.flags == {1: ["TRUNCATED"]}


@settings(max_examples=40)
@given(st.lists(st.floats(-9e-9, 9e-9), min_size=2, max_size=12), st.randoms(use_true_random=False))
def test_screen_idempotent_and_order_independent(steps, rnd):
    rs = _runset(6e-7 + np.cumsum(steps))
    once = A.screen_sweeps(rs)
    assert A.screen_sweeps(once).flags == once.flags
    perm = list(range(len(steps)))
    rnd.shuffle(perm)
    shuffled = A.RunSet([rs.sweeps[k] for k in perm], rs.a0[perm], rs.sigma_a0[perm])
    assert A.screen_sweeps(shuffled).flags == once.flags


def test_jump_in_simulated_run_flagged(au_law):
    noise = I.NoiseModel(a0_jumps=((3, 8e-9),))
    rs = A.fit_runset(I.simulate_run(au_law, P, replace(I.SweepPlan(), n_sweeps=6), noise, seed=2))
    assert rs.flags == {3: ["DA0_GT_5NM"]}


# ---------------------------------------------------------------------------
# drift interpolation


def test_constant_a0_gives_time_independent_offset(au_law):
    noise = I.NoiseModel.noiseless()
    sweeps = I.simulate_run(au_law, P, replace(I.SweepPlan(), n_sweeps=4), noise, seed=0)
    corr = A.interpolate_drift(A.fit_runset(sweeps))
    for c in corr:
        assert np.allclose(c.a + c.record.a_pz_m, noise.a0_start, rtol=0, atol=1e-15)


def test_linear_drift_removed(au_law):
    noise = I.NoiseModel.noiseless(a0_drift_per_sweep=4e-9)
    sweeps = I.simulate_run(au_law, P, replace(I.SweepPlan(), n_sweeps=6), noise, seed=0)
    rs = A.fit_runset(sweeps)
    assert rs.flags == {}
    plan = I.SweepPlan()
    cycle = plan.n_points * plan.point_time + plan.gap_time
    for c in A.interpolate_drift(rs):
        truth = noise.a0_start + noise.a0_drift_per_sweep * c.record.t_s / cycle - c.record.a_pz_m
        assert np.max(np.abs(c.a - truth)) < 0.1e-9


def test_omega0_tracks_planted_drift(au_law):
    noise = I.NoiseModel(a0_drift_per_sweep=0.0, sigma_delta_omega=0.0, sigma_signal_rel=0.0, sigma_V=0.0)
    sweeps = I.simulate_run(au_law, P, seed=9, noise=noise)
    clean = I.simulate_run(au_law, P, seed=9, noise=replace(noise, sigma_omega0_cal=0.0))
    corr = A.interpolate_drift(A.fit_runset(sweeps))
    start = {s.index: s.omega0_cal for s in clean}
    dev = np.array([c.omega0[0] - start[c.record.index] for c in corr])
    assert np.sqrt(np.mean(dev**2)) < 1.5 * noise.sigma_omega0_cal
    assert np.ptp(list(start.values())) <= 2 * math.pi * 0.08 + 1e-12


def test_single_sweep_fallback(au_law):
    sw = I.simulate_sweep(au_law, P, noise=I.NoiseModel.noiseless(), seed=0)
    corr = A.interpolate_drift(A.fit_runset([sw]), single_sweep_sigma=2e-9)
    assert len(corr) == 1
    assert np.all(corr[0].sigma_a >= 2e-9)


def test_no_accepted_sweeps():
    with pytest.raises(A.EmptyResultError):
        A.interpolate_drift(A.screen_sweeps(_runset(np.full(2, 6e-7), truncated=(0, 1))))


# ---------------------------------------------------------------------------
# gradients and budget


def test_noise_free_pipeline_recovers_law(au_law):
    sweeps = I.simulate_run(au_law, P, replace(I.SweepPlan(), n_sweeps=3), I.NoiseModel.noiseless(), seed=0)
    pts = A.gradient_pipeline(A.interpolate_drift(A.fit_runset(sweeps)), P)
    truth = np.array([au_law(x) for x in pts.a])
    assert np.max(np.abs(pts.value / truth - 1)) < 1e-6


def test_electrostatic_contribution_subtracted():
    zero = lambda a: 0.0 * a
    plan = replace(I.SweepPlan(), n_sweeps=3, v_ms_ref=0.5)
    sweeps = I.simulate_run(zero, P, plan, I.NoiseModel.noiseless(), seed=0)
    corr = A.interpolate_drift(A.fit_runset(sweeps))
    pts = A.gradient_pipeline(corr, P)
    es = np.concatenate([A.electrostatic_excitation_gradient(c.a, c.record.V_ex, c.record.V_ac) for c in corr])
    # the planted excitation term is large; what survives the subtraction is not
    assert np.max(es) > 1e-3
    assert np.max(np.abs(pts.value)) < 5e-3 * np.max(es)


def test_error_budget_scale(run):
    _, res = run
    b = A.error_budget(res.points)
    assert b["total"] * 1e6 == pytest.approx(116.1, rel=0.02)
    assert b["mass"] * 1e6 == pytest.approx(78.7, rel=0.05)
    assert b["frequency"] * 1e6 == pytest.approx(78.4, rel=0.05)
    ranked = sorted(A.BUDGET_KEYS, key=lambda k: -b[k])
    assert set(ranked[:2]) == {"mass", "frequency"}


def test_doubling_voltage_errors(run):
    sweeps, _ = run
    corr = A.interpolate_drift(A.fit_runset(sweeps))
    base = A.gradient_pipeline(corr, P)
    doubled = A.gradient_pipeline([replace(c, record=replace(c.record, sigma_V=2 * c.record.sigma_V)) for c in corr], P)
    for k in A.BUDGET_KEYS:
        factor = 2.0 if k == "voltages" else 1.0
        assert np.allclose(doubled.components[k], factor * base.components[k], rtol=1e-12, atol=0)


def test_pipeline_coverage(run, au_law):
    _, res = run
    pts = res.points
    truth = np.array([au_law(x) for x in pts.a])
    assert np.mean(np.abs(pts.value - truth) <= pts.sigma) >= 0.60


# ---------------------------------------------------------------------------
# running mean


def test_running_mean_equal_sigma():
    y = np.arange(10.0)
    c = A.weighted_running_mean(np.arange(10.0), y, np.ones(10), width=3)
    assert np.allclose(c.value, np.convolve(y, np.ones(3) / 3, mode="valid"))
    assert np.allclose(c.sigma, 1 / math.sqrt(3))


def test_running_mean_weight_ratio():
    c = A.weighted_running_mean([1.0, 2.0], [0.0, 1.0], [1.0, 0.1], width=2)
    assert c.value[0] == pytest.approx(100 / 101)


def test_running_mean_zero_sigma_is_exact():
    c = A.weighted_running_mean([1.0, 2.0, 3.0], [5.0, 7.0, 9.0], [1.0, 0.0, 1.0], width=2)
    assert list(c.value) == [7.0, 7.0]
    assert list(c.sigma) == [0.0, 0.0]
    assert [f["reason"] for f in c.flags] == ["ZERO_SIGMA", "ZERO_SIGMA"]


def test_running_mean_errors():
    with pytest.raises(ValueError):
        A.weighted_running_mean([1.0], [1.0], [1.0], width=0)
    with pytest.raises(A.EmptyResultError):
        A.weighted_running_mean([1.0, 2.0], [1.0, 1.0], [1.0, 1.0], width=3)


def test_weighting_beats_plain_mean_on_heteroscedastic_noise():
    a = np.linspace(80e-9, 200e-9, 300)
    truth = 1e-3 * (a / 1e-7) ** -3
    law = lambda x: 1e-3 * (x / 1e-7) ** -3
    mse_w = mse_u = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        sig = truth * rng.choice([0.01, 0.1], a.size)
        y = truth + sig * rng.standard_normal(a.size)
        w = A.weighted_running_mean(a, y, sig, sigma_a=sig, width=15)
        u = A.weighted_running_mean(a, y, np.ones_like(y), width=15)
        mse_w += np.mean((w.value / law(w.a) - 1) ** 2)
        mse_u += np.mean((u.value / law(u.a) - 1) ** 2)
    assert mse_w < 0.5 * mse_u


# ---------------------------------------------------------------------------
# reductions


def _curve(a, value, rel=0.01):
    value = np.asarray(value, dtype=float)
    return A.AveragedCurve(np.asarray(a), value, rel * np.abs(value), np.full(len(a), 1e-10), 1)


def test_identical_curves():
    a = np.linspace(70e-9, 150e-9, 41)
    c = _curve(a, 1e-3 * (a / 1e-7) ** -3)
    red = A.relative_reduction(c, c)
    assert np.all(red.delta == 0.0) and red.window_mean == 0.0
    assert red.hist_counts.sum() == np.sum((a >= 80e-9) & (a <= 120e-9))
    assert red.hist_edges[0] < 0 < red.hist_edges[-1]


def test_window_outside_overlap():
    a = np.linspace(90e-9, 150e-9, 20)
    c = _curve(a, np.ones(20))
    with pytest.raises(A.RangeError):
        A.relative_reduction(c, c)
    with pytest.raises(A.RangeError):
        A.relative_reduction(c, c, window=(120e-9, 100e-9))


@given(st.floats(-0.05, 0.05))
def test_reduction_antisymmetric_to_first_order(d):
    a = np.linspace(70e-9, 150e-9, 41)
    ref = _curve(a, 1e-3 * (a / 1e-7) ** -3)
    smp = _curve(a, (1 + d) * ref.value)
    fwd = A.relative_reduction(smp, ref).window_mean
    back = A.relative_reduction(ref, smp).window_mean
    assert fwd + back == pytest.approx(0.0, abs=1.1 * d**2 + 1e-15)


def test_planted_reduction_closed_loop(au_law):
    plan = replace(I.SweepPlan(), n_sweeps=20)
    ref = A.analyze_run(I.simulate_run(au_law, P, plan, seed=31), P)
    smp = A.analyze_run(I.simulate_run(au_law.scaled(0.96), P, plan, seed=32), P)
    red = A.relative_reduction(smp.curve, ref.curve)
    assert red.window_mean == pytest.approx(-0.040, abs=max(3 * red.window_sigma, 0.01))
    assert red.to_dict()["window"] == [80e-9, 120e-9]


def test_reference_halves_agree(au_law):
    plan = replace(I.SweepPlan(), n_sweeps=16)
    runs = [A.analyze_run(I.simulate_run(au_law, P, plan, seed=40 + k), P) for k in range(4)]
    mean = lambda rs: A.weighted_running_mean(np.concatenate([r.points.a for r in rs]),
                                              np.concatenate([r.points.value for r in rs]),
                                              np.concatenate([r.points.sigma for r in rs]), width=32)
    red = A.relative_reduction(mean(runs[:2]), mean(runs[2:]))
    n_eff = max(1, np.sum((red.a >= 80e-9) & (red.a <= 120e-9)) // 32)
    assert abs(red.window_mean) < 3 * red.window_sigma + 3 * np.median(red.sigma) / math.sqrt(n_eff)
