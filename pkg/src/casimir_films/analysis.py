"""From recorded distance sweeps to averaged Casimir gradients and reductions.

The chain is: per-sweep separation offset ``a0`` from the electrostatic
signal, screening of sweeps with anomalous ``a0`` drift, spline correction
of ``a0`` and ``omega0`` drifts, per-point gradient with propagated
statistical errors, a 1/sigma^2-weighted running mean, and the relative
reduction of a sample curve against a reference curve.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.constants import epsilon_0
from scipy.interpolate import CubicSpline

from .instrument import DEFAULT_RADIUS, CantileverParams, SweepRecord

CENTER_POINT = 15          # zero-based index of sweep point 16
DA0_LIMIT = 5e-9
DDA0_LIMIT = 3e-9
DEFAULT_WINDOW = (80e-9, 120e-9)

# Inputs of the default error budget (see README)
SIGMA_MASS_REL = 0.02145
SIGMA_OMEGA0 = 0.222       # rad/s, per omega0 calibration
SIGMA_RADIUS = 0.8e-6      # m


class AnalysisError(Exception):
    pass


class CalibrationQualityError(AnalysisError):
    pass


class EmptyResultError(AnalysisError):
    pass


class RangeError(AnalysisError):
    pass


# ---------------------------------------------------------------------------
# a0 determination


@dataclass
class A0Fit:
    a0: float            # at the sweep's point-16 timestamp [m]
    sigma_a0: float
    gain: float          # signal = gain * V^2 / a
    chi2_red: float


def _center_index(n: int) -> int:
    return min(CENTER_POINT, n - 1)


def fit_a0(sweep: SweepRecord, drift_rate: float = 0.0, max_chi2: float = 25.0, check: bool = True) -> A0Fit:
    """Fit the separation offset of one sweep from its electrostatic signal.

    Model: ``S = K (V_ac^2 + V_ex^2) / a`` with
    ``a = a0 + drift_rate (t - t16) - a_pz``. For a known drift rate,
    ``V^2 / S`` is linear in ``a_pz``, so the fit is a weighted linear
    regression (relative errors on ``S`` and on the recorded voltages).
    ``check=False`` skips the residual tests (used for provisional fits
    made before the drift rate is known).
    """
    n = len(sweep)
    if n < 3:
        raise CalibrationQualityError(f"sweep {sweep.index}: too few points ({n}) for an a0 fit")
    v2 = sweep.V_ac**2 + sweep.V_ex**2
    if np.any(sweep.signal <= 0) or np.any(v2 <= 0):
        raise CalibrationQualityError(f"sweep {sweep.index}: non-positive signal or voltage")
    t16 = sweep.t_s[_center_index(n)]
    y = v2 / sweep.signal
    x = sweep.a_pz_m - drift_rate * (sweep.t_s - t16)
    rel = np.hypot(sweep.sigma_signal, 2 * sweep.sigma_V * np.sqrt(v2) / v2)
    w = 1.0 / rel**2 if np.all(rel > 0) else np.ones(n)
    # y = (a0 - x) / K = c0 + c1 x, with relative error rel on y
    wy = w / y**2
    A = np.column_stack([np.ones(n), x])
    AtW = A.T * wy
    cov = np.linalg.inv(AtW @ A)
    c0, c1 = cov @ (AtW @ y)
    resid = y - (c0 + c1 * x)
    chi2 = float(np.sum(wy * resid**2))
    dof = max(n - 2, 1)
    chi2_red = chi2 / dof
    if not np.all(rel > 0):
        cov = cov * chi2_red     # unweighted: scale by the residual variance
    if not c1 < 0 or abs(c1) < 3 * math.sqrt(cov[1, 1]):
        raise CalibrationQualityError(f"sweep {sweep.index}: signal shows no 1/a dependence")
    a0 = -c0 / c1
    # gradient of a0 = -c0/c1 w.r.t. (c0, c1)
    g = np.array([-1.0 / c1, c0 / c1**2])
    sigma = math.sqrt(float(g @ cov @ g))
    if check and np.all(rel > 0) and chi2_red > max_chi2:
        raise CalibrationQualityError(f"sweep {sweep.index}: a0 fit reduced chi^2 {chi2_red:.3g} > {max_chi2}")
    if check and not np.all(rel > 0) and np.sqrt(np.mean((resid / y) ** 2)) > 1e-6:
        raise CalibrationQualityError(f"sweep {sweep.index}: noise-free sweep does not follow the 1/a model")
    return A0Fit(float(a0), sigma, float(-1.0 / c1), chi2_red)


# ---------------------------------------------------------------------------
# screening


@dataclass
class RunSet:
    sweeps: list
    a0: np.ndarray
    sigma_a0: np.ndarray
    flags: dict = field(default_factory=dict)    # sweep index -> list of reason codes
    drift_rate: np.ndarray | None = None

    def __post_init__(self):
        order = np.argsort([s.index for s in self.sweeps], kind="stable")
        self.sweeps = [self.sweeps[i] for i in order]
        self.a0 = np.asarray(self.a0, dtype=float)[order]
        self.sigma_a0 = np.asarray(self.sigma_a0, dtype=float)[order]
        if self.drift_rate is not None:
            self.drift_rate = np.asarray(self.drift_rate, dtype=float)[order]

    @property
    def accepted(self) -> list[int]:
        """Positions (in index order) of sweeps without a rejection flag."""
        return [k for k, s in enumerate(self.sweeps) if not self.flags.get(s.index)]

    def rejection_log(self) -> list[dict]:
        return [{"sweep": s.index, "reasons": list(self.flags[s.index])}
                for s in self.sweeps if self.flags.get(s.index)]


def screen_sweeps(runset: RunSet, da0_limit: float = DA0_LIMIT, dda0_limit: float = DDA0_LIMIT) -> RunSet:
    """Flag sweeps with anomalous drift of ``a0``.

    ``DA0_GT_5NM``: ``|a0(i) - a0(i-1)| > 5 nm``. ``DDA0_GT_3NM``: the
    change of a transition relative to the last unflagged transition
    exceeds 3 nm. Flags are recomputed from scratch (idempotent) and
    ``TRUNCATED`` marks sweeps that ended in pull-in.
    """
    flags: dict[int, list[str]] = {}
    sweeps = runset.sweeps
    a0 = runset.a0
    prev_ok = None
    for k in range(len(sweeps)):
        idx = sweeps[k].index
        reasons = []
        if sweeps[k].truncated:
            reasons.append("TRUNCATED")
        if k > 0:
            d = a0[k] - a0[k - 1]
            if abs(d) > da0_limit:
                reasons.append("DA0_GT_5NM")
            elif prev_ok is not None and abs(d - prev_ok) > dda0_limit:
                reasons.append("DDA0_GT_3NM")
            else:
                prev_ok = d
        if reasons:
            flags[idx] = reasons
    return RunSet(list(sweeps), a0.copy(), runset.sigma_a0.copy(), flags,
                  None if runset.drift_rate is None else runset.drift_rate.copy())


def _common_drift_rate(tc: np.ndarray, a0: np.ndarray, w: np.ndarray, segment: np.ndarray) -> float:
    """Weighted slope of ``a0(t)`` shared by all segments, one offset per segment."""
    seg_ids = np.unique(segment)
    A = np.column_stack([tc - tc.mean()] + [(segment == k).astype(float) for k in seg_ids])
    if A.shape[0] <= A.shape[1]:
        return 0.0
    sw = np.sqrt(w)
    coef, *_ = np.linalg.lstsq(A * sw[:, None], a0 * sw, rcond=None)
    return float(coef[0])


def fit_runset(sweeps: Sequence[SweepRecord], max_chi2: float = 25.0) -> RunSet:
    """Fit ``a0`` for every sweep and screen.

    A first pass assumes no drift within a sweep. The drift rate is then
    estimated as one weighted slope of ``a0(t)`` over the accepted sweeps,
    with a separate offset after every ``DA0_GT_5NM`` jump, and the fits
    are repeated with it.
    """
    if not sweeps:
        raise EmptyResultError("no sweeps")
    sweeps = sorted(sweeps, key=lambda s: s.index)
    fits = [fit_a0(s, 0.0, max_chi2, check=False) for s in sweeps]
    rs = screen_sweeps(RunSet(list(sweeps), [f.a0 for f in fits], [f.sigma_a0 for f in fits]))
    tc = np.array([s.t_s[_center_index(len(s))] for s in sweeps])
    jumps = np.array(["DA0_GT_5NM" in rs.flags.get(s.index, ()) for s in sweeps])
    segment = np.cumsum(jumps)
    ok = np.array(rs.accepted, dtype=int)
    rate = 0.0
    if ok.size >= 2:
        rate = _common_drift_rate(tc[ok], rs.a0[ok], 1.0 / np.maximum(rs.sigma_a0[ok], 1e-15) ** 2, segment[ok])
    rates = np.full(len(sweeps), rate)
    fits = [fit_a0(s, rate, max_chi2) for s in sweeps]
    return screen_sweeps(RunSet(list(sweeps), [f.a0 for f in fits], [f.sigma_a0 for f in fits], {}, rates))


# ---------------------------------------------------------------------------
# drift interpolation


@dataclass
class CorrectedSweep:
    record: SweepRecord
    a: np.ndarray
    sigma_a: np.ndarray
    omega0: np.ndarray


def interpolate_drift(runset: RunSet, single_sweep_sigma: float = 1e-9) -> list[CorrectedSweep]:
    """Per-point separation and resonance frequency from spline-interpolated drifts.

    ``a0(t)`` is a natural cubic spline through the accepted sweeps' ``a0``
    at their point-16 timestamps; ``omega0(t)`` likewise through the
    calibrations recorded at each sweep start. One accepted sweep gives
    constants, with ``single_sweep_sigma`` added in quadrature to ``sigma_a0``.
    """
    ok = runset.accepted
    if not ok:
        raise EmptyResultError("no accepted sweeps")
    sw = [runset.sweeps[k] for k in ok]
    a0 = runset.a0[ok]
    sa0 = runset.sigma_a0[ok]
    tc = np.array([s.t_s[_center_index(len(s))] for s in sw])
    ts = np.array([s.t_s[0] for s in sw])
    w0 = np.array([s.omega0_cal for s in sw])
    out = []
    if len(sw) == 1:
        s = sw[0]
        sig = math.hypot(sa0[0], single_sweep_sigma)
        n = len(s)
        return [CorrectedSweep(s, a0[0] - s.a_pz_m, np.full(n, sig), np.full(n, w0[0]))]
    a_spl = CubicSpline(tc, a0, bc_type="natural")
    w_spl = CubicSpline(ts, w0, bc_type="natural")
    for s in sw:
        a = a_spl(s.t_s) - s.a_pz_m
        sig = np.interp(s.t_s, tc, sa0)
        out.append(CorrectedSweep(s, a, sig, w_spl(s.t_s)))
    return out


# ---------------------------------------------------------------------------
# gradients and error budget

BUDGET_KEYS = ("radius", "mass", "voltages", "frequency", "omega0", "distance")


@dataclass
class GradientPoints:
    a: np.ndarray
    sigma_a: np.ndarray
    value: np.ndarray
    sigma: np.ndarray
    sweep: np.ndarray
    components: dict

    def __len__(self):
        return self.a.size


def electrostatic_excitation_gradient(a, V_ex, V_ac, R=DEFAULT_RADIUS):
    """Gradient of the two AC excitations, ``pi eps0 R (V_ex^2 + V_ac^2) / (2 a^2)``."""
    return math.pi * epsilon_0 * R * (np.asarray(V_ex) ** 2 + np.asarray(V_ac) ** 2) / (2 * np.asarray(a) ** 2)


def power_law_slope(a, g) -> float:
    """Exponent ``p`` of a least-squares fit ``g ~ a^-p`` over positive values."""
    a, g = np.asarray(a), np.asarray(g)
    ok = (g > 0) & (a > 0)
    if ok.sum() < 2:
        return 0.0
    return float(-np.polyfit(np.log(a[ok]), np.log(g[ok]), 1)[0])


def gradient_pipeline(corrected: Sequence[CorrectedSweep], params: CantileverParams, R: float = DEFAULT_RADIUS,
                      sigma_mass_rel: float = SIGMA_MASS_REL, sigma_omega0: float = SIGMA_OMEGA0,
                      sigma_radius: float = SIGMA_RADIUS) -> GradientPoints:
    """Casimir gradient per point with its statistical error components.

    ``G_tot = m (omega0(t)^2 - (omega0_cal + delta_omega)^2)`` minus the
    electrostatic excitation gradient at the corrected separation. The
    distance component converts ``sigma_a`` through the slope of a global
    power-law fit to the result.
    """
    if not corrected:
        raise EmptyResultError("no corrected sweeps")
    m = params.m
    a, sa, val, idx = [], [], [], []
    comp = {k: [] for k in BUDGET_KEYS}
    for c in corrected:
        s = c.record
        w = s.omega0_cal + s.delta_omega_rad_s
        g_tot = m * (c.omega0**2 - w**2)
        g_es = electrostatic_excitation_gradient(c.a, s.V_ex, s.V_ac, R)
        a.append(c.a)
        sa.append(c.sigma_a)
        val.append(g_tot - g_es)
        idx.append(np.full(len(s), s.index))
        comp["frequency"].append(2 * m * np.abs(w) * s.sigma_delta_omega)
        comp["omega0"].append(2 * m * np.abs(c.omega0) * sigma_omega0)
        comp["mass"].append(np.abs(g_tot) * sigma_mass_rel)
        comp["voltages"].append(math.pi * epsilon_0 * R / c.a**2 * s.sigma_V * np.hypot(s.V_ex, s.V_ac))
        comp["radius"].append(g_es * sigma_radius / R)
    a = np.concatenate(a)
    sa = np.concatenate(sa)
    val = np.concatenate(val)
    components = {k: np.concatenate(v) for k, v in comp.items() if k != "distance"}
    p = power_law_slope(a, val)
    components["distance"] = np.abs(p * val / a) * sa
    sigma = np.sqrt(sum(v**2 for v in components.values()))
    order = np.argsort(a, kind="stable")
    return GradientPoints(a[order], sa[order], val[order], sigma[order], np.concatenate(idx)[order],
                          {k: v[order] for k, v in components.items()})


def error_budget(points: GradientPoints, a_eval: float = 100e-9, rel_width: float = 0.03) -> dict:
    """Mean error components of the points within ``rel_width`` (log) of ``a_eval``."""
    sel = np.abs(np.log(points.a / a_eval)) < rel_width
    if not np.any(sel):
        sel = np.argsort(np.abs(np.log(points.a / a_eval)))[: max(1, len(points) // 34)]
    out = {k: float(np.mean(v[sel])) for k, v in points.components.items()}
    out["total"] = math.sqrt(sum(v**2 for v in out.values()))
    out["a_eval"] = a_eval
    return out


# ---------------------------------------------------------------------------
# averaging and reductions


@dataclass
class AveragedCurve:
    a: np.ndarray
    value: np.ndarray
    sigma: np.ndarray
    sigma_a: np.ndarray
    width: int
    flags: list = field(default_factory=list)

    def to_csv(self, path) -> None:
        np.savetxt(path, np.column_stack([self.a, self.value, self.sigma]), delimiter=",",
                   header="a_m,value,sigma", comments="", fmt="%.10e")


def weighted_running_mean(a, value, sigma, sigma_a=None, width: int = 35) -> AveragedCurve:
    """Running mean over ``width`` consecutive points (sorted by ``a``).

    Separations are averaged with weights ``1/sigma_a^2``, values with
    ``1/sigma^2``; the reported sigma is the error of the weighted mean.
    Zero-sigma points are exact: when present in a window they alone
    determine the mean, and the window is flagged.
    """
    if width < 1:
        raise ValueError("width must be >= 1")
    a = np.asarray(a, dtype=float)
    y = np.asarray(value, dtype=float)
    s = np.asarray(sigma, dtype=float)
    sa = np.ones_like(a) if sigma_a is None else np.asarray(sigma_a, dtype=float)
    order = np.argsort(a, kind="stable")
    a, y, s, sa = a[order], y[order], s[order], sa[order]
    n = a.size
    if n < width:
        raise EmptyResultError(f"{n} points are fewer than the running-mean width {width}")
    out_a, out_y, out_s, out_sa, flags = [], [], [], [], []

    def wmean(x, sx):
        exact = sx == 0
        if np.any(exact):
            return float(np.mean(x[exact])), 0.0, True
        wt = 1.0 / sx**2
        return float(np.sum(wt * x) / np.sum(wt)), float(1.0 / math.sqrt(np.sum(wt))), False

    for i in range(n - width + 1):
        sl = slice(i, i + width)
        ma, ea, fa = wmean(a[sl], sa[sl])
        my, ey, fy = wmean(y[sl], s[sl])
        if fa or fy:
            flags.append({"window": i, "reason": "ZERO_SIGMA"})
        out_a.append(ma)
        out_y.append(my)
        out_s.append(ey)
        out_sa.append(ea)
    return AveragedCurve(np.array(out_a), np.array(out_y), np.array(out_s), np.array(out_sa), width, flags)


@dataclass
class Reduction:
    a: np.ndarray
    delta: np.ndarray
    sigma: np.ndarray
    window: tuple[float, float]
    window_mean: float
    window_sigma: float
    hist_counts: np.ndarray
    hist_edges: np.ndarray

    def to_dict(self) -> dict:
        return {"a_m": self.a.tolist(), "delta": self.delta.tolist(), "sigma": self.sigma.tolist(),
                "window": list(self.window), "window_mean": self.window_mean, "window_sigma": self.window_sigma,
                "histogram": {"counts": self.hist_counts.tolist(), "edges": self.hist_edges.tolist()}}


def relative_reduction(sample: AveragedCurve, reference: AveragedCurve,
                       window: tuple[float, float] = DEFAULT_WINDOW) -> Reduction:
    """``Delta(a) = sample/reference - 1`` on the sample's separations.

    The reference is interpolated linearly. The window mean is weighted by
    ``1/sigma_Delta^2``; its sigma is the weighted standard deviation of the
    in-window values. The histogram uses Freedman-Diaconis bins.
    """
    lo = max(sample.a.min(), reference.a.min())
    hi = min(sample.a.max(), reference.a.max())
    if window[0] < lo or window[1] > hi or window[0] >= window[1]:
        raise RangeError(f"window [{window[0]:.3g}, {window[1]:.3g}] m outside the common range [{lo:.3g}, {hi:.3g}] m")
    sel = (sample.a >= lo) & (sample.a <= hi)
    a = sample.a[sel]
    s, ss = sample.value[sel], sample.sigma[sel]
    r = np.interp(a, reference.a, reference.value)
    sr = np.interp(a, reference.a, reference.sigma)
    ratio = s / r
    delta = ratio - 1.0
    sig = np.abs(ratio) * np.hypot(ss / s, sr / r)
    inw = (a >= window[0]) & (a <= window[1])
    if not np.any(inw):
        raise RangeError("no averaged points inside the window")
    d = delta[inw]
    wt = 1.0 / sig[inw] ** 2 if np.all(sig[inw] > 0) else np.ones(d.size)
    mean = float(np.sum(wt * d) / np.sum(wt))
    std = float(math.sqrt(np.sum(wt * (d - mean) ** 2) / np.sum(wt)))
    if np.ptp(d) == 0:
        edges = np.array([d[0] - 0.5e-3, d[0] + 0.5e-3])
    else:
        edges = np.histogram_bin_edges(d, bins="fd")
    counts, edges = np.histogram(d, bins=edges)
    return Reduction(a, delta, sig, tuple(window), mean, std, counts, edges)


# ---------------------------------------------------------------------------
# whole run


@dataclass
class RunAnalysis:
    runset: RunSet
    points: GradientPoints
    curve: AveragedCurve


def analyze_run(sweeps: Sequence[SweepRecord], params: CantileverParams, R: float = DEFAULT_RADIUS,
                width: int | None = None, **budget) -> RunAnalysis:
    """a0 fits, screening, drift correction, gradients and running mean for one run."""
    rs = fit_runset(sweeps)
    corrected = interpolate_drift(rs)
    pts = gradient_pipeline(corrected, params, R, **budget)
    curve = weighted_running_mean(pts.a, pts.value, pts.sigma, pts.sigma_a, width or len(corrected))
    return RunAnalysis(rs, pts, curve)
