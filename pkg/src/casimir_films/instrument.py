"""Sphere-on-cantilever AFM in air.

Frequency shift <-> force gradient, electrostatic calibrations, the damped
equation of motion with separation-dependent squeeze-film damping, its
small-signal transfer functions, and a synthetic sweep simulator.

Notation: ``G`` is the force gradient dF/da (positive = attractive, softening
the spring), ``gamma0`` the gap-side damping and ``dgamma0`` its derivative
with respect to the separation.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
from scipy.constants import epsilon_0
from scipy.optimize import brentq, least_squares


DEFAULT_MASS = 1.871e-8
DEFAULT_OMEGA0 = 2 * math.pi * 609.07
DEFAULT_RADIUS = 77.9e-6
AIR_VISCOSITY = 1.81e-5
RECORD_VERSION = 1


class InstrumentError(Exception):
    pass


class PullInError(InstrumentError):
    """The gradient exceeds the spring constant; no stable oscillation."""


class BracketError(InstrumentError):
    pass


class CalibrationFitError(InstrumentError):
    pass


class RootError(InstrumentError):
    pass


class RecordVersionError(InstrumentError):
    pass


@dataclass(frozen=True)
class CantileverParams:
    """Lumped cantilever model; ``k`` is derived as ``m * omega0**2``.

    ``gamma0(a) = gamma0_C * a**-gamma0_n`` is the squeeze-film damping
    towards the plate, ``gamma1`` the damping towards the base.
    """

    m: float = DEFAULT_MASS
    omega0: float = DEFAULT_OMEGA0
    gamma1: float = DEFAULT_MASS * DEFAULT_OMEGA0 / 100.0
    gamma0_C: float = 6 * math.pi * AIR_VISCOSITY * DEFAULT_RADIUS**2
    gamma0_n: float = 1.0
    k: float | None = None

    def __post_init__(self):
        if not (self.m > 0 and self.omega0 > 0):
            raise ValueError("m and omega0 must be positive")
        k = self.m * self.omega0**2
        if self.k is None:
            object.__setattr__(self, "k", k)
        elif not math.isclose(self.k, k, rel_tol=1e-9):
            raise ValueError(f"inconsistent k={self.k} (m*omega0^2={k})")
        if self.gamma0_C < 0 or self.gamma1 < 0:
            raise ValueError("damping coefficients must be non-negative")

    def gamma0(self, a):
        return self.gamma0_C * np.asarray(a, dtype=float) ** (-self.gamma0_n)

    def dgamma0(self, a):
        """d gamma0 / d a."""
        a = np.asarray(a, dtype=float)
        return -self.gamma0_n * self.gamma0_C * a ** (-self.gamma0_n - 1)

    @classmethod
    def from_quality_factor(cls, m: float, omega0: float, Q: float, **kw) -> "CantileverParams":
        return cls(m=m, omega0=omega0, gamma1=m * omega0 / Q, **kw)


# ---------------------------------------------------------------------------
# frequency shift


def gradient_from_shift(m, omega0, delta_omega):
    """``m (omega0**2 - (omega0 + delta_omega)**2)``."""
    delta_omega = np.asarray(delta_omega, dtype=float)
    out = m * (omega0**2 - (omega0 + delta_omega) ** 2)
    return out if out.ndim else float(out)


def shift_from_gradient(m, omega0, dFda):
    """Inverse of :func:`gradient_from_shift` on the stable branch."""
    g = np.asarray(dFda, dtype=float)
    if np.any(g >= m * omega0**2):
        raise PullInError(f"gradient {np.max(g):.4g} N/m reaches the spring constant {m * omega0**2:.4g} N/m")
    # written to avoid cancellation for small gradients
    out = -(g / m) / (np.sqrt(omega0**2 - g / m) + omega0)
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# electrostatics


def electrostatic_gradient(a, v_ms, R=DEFAULT_RADIUS):
    """Sphere-plate PFA gradient ``pi eps0 R <V^2> / a^2`` (``v_ms`` = mean square voltage)."""
    a = np.asarray(a, dtype=float)
    return math.pi * epsilon_0 * R * np.asarray(v_ms, dtype=float) / a**2


def electrostatic_response(a, V_ex, V_AC, omega, params: CantileverParams, R=DEFAULT_RADIUS, gamma=None):
    """Cantilever response to the electrostatic excitation used for calibration.

    ``4 pi R eps0 V2 / (a^2 (m w0^2 + 2 pi eps0 R V2 / a^2 + i gamma w - m w^2))``
    with ``V2 = V_ex**2 + V_AC**2``.
    """
    if np.any(np.asarray(a) <= 0):
        raise ValueError("a must be positive")
    gamma = params.gamma1 if gamma is None else gamma
    v2 = np.asarray(V_ex, dtype=float) ** 2 + np.asarray(V_AC, dtype=float) ** 2
    a = np.asarray(a, dtype=float)
    omega = np.asarray(omega, dtype=float)
    den = a**2 * (params.m * params.omega0**2 + 2 * math.pi * epsilon_0 * R * v2 / a**2
                  + 1j * gamma * omega - params.m * omega**2)
    out = 4 * math.pi * R * epsilon_0 * v2 / den
    return out if np.ndim(out) else complex(out)


@dataclass
class FrequencySweepRecord:
    frequencies: np.ndarray
    response: np.ndarray
    phase: np.ndarray
    a: float = 2.5e-6
    V_ex: float = 1.0
    V_AC: float = 0.0

    def __post_init__(self):
        self.frequencies = np.asarray(self.frequencies, dtype=float)
        self.phase = np.unwrap(np.asarray(self.phase, dtype=float))
        self.response = np.asarray(self.response, dtype=complex)


def synthetic_frequency_sweep(params: CantileverParams, phi_off=0.0, a=2.5e-6, V_ex=1.0, V_AC=0.0,
                              R=DEFAULT_RADIUS, span=0.05, n=201, phase_noise=0.0, rng=None):
    """Phase sweep around the resonance; ``phase_noise`` is an absolute rms in rad."""
    w = params.omega0 * np.linspace(1 - span, 1 + span, n)
    resp = electrostatic_response(a, V_ex, V_AC, w, params, R)
    phase = np.angle(resp) + phi_off
    if phase_noise:
        rng = rng or np.random.default_rng(0)
        phase = phase + phase_noise * rng.standard_normal(n)
    return FrequencySweepRecord(w, resp, phase, a, V_ex, V_AC)


def calibrate_omega0(sweep: FrequencySweepRecord, params: CantileverParams, R=DEFAULT_RADIUS) -> dict:
    """Fit ``Arg[response] + phi_off`` to the measured phase.

    Returns fitted ``omega0``, ``phi_off`` and ``gamma``. The mass is held at
    ``params.m``.
    """
    w, ph = sweep.frequencies, sweep.phase
    if np.ptp(ph) < 0.5 * math.pi:
        raise BracketError("phase varies by less than pi/2 across the sweep; resonance not bracketed")
    # the phase passes through its midpoint at resonance
    mid = 0.5 * (ph.max() + ph.min())
    i = int(np.argmin(np.abs(ph - mid)))
    if i in (0, w.size - 1):
        raise BracketError("resonance at the edge of the sweep")
    w_guess = w[i]
    # half-width from the pi/4 points of the phase curve
    width = max(abs(w[np.argmin(np.abs(ph - (mid + math.pi / 4)))] - w[np.argmin(np.abs(ph - (mid - math.pi / 4)))]), 1e-9 * w_guess)
    g_guess = params.m * width
    v2 = sweep.V_ex**2 + sweep.V_AC**2
    k_es = 2 * math.pi * epsilon_0 * R * v2 / sweep.a**2
    w0_guess = math.sqrt(max(w_guess**2 - k_es / params.m, 1e-6 * w_guess**2))
    phi_guess = float(np.angle(np.exp(1j * (ph[i] + math.pi / 2))))

    def model(x):
        w0, phi, lg = x[0] * w0_guess, x[1], math.exp(x[2]) * g_guess
        p = CantileverParams(m=params.m, omega0=w0, gamma1=lg, gamma0_C=0.0)
        return np.unwrap(np.angle(electrostatic_response(sweep.a, sweep.V_ex, sweep.V_AC, w, p, R, gamma=lg))) + phi

    def resid(x):
        r = model(x) - ph
        return np.angle(np.exp(1j * r))  # wrap to (-pi, pi]

    res = least_squares(resid, [1.0, phi_guess, 0.0], x_scale=[1e-4, 0.1, 0.1], xtol=1e-15, ftol=1e-15, gtol=1e-15)
    if not res.success:
        raise CalibrationFitError(res.message)
    w0 = res.x[0] * w0_guess
    if not (w[0] <= w0 <= w[-1]):
        raise BracketError(f"fitted omega0={w0:.6g} outside the sweep")
    return {"omega0": float(w0), "phi_off": float(np.angle(np.exp(1j * res.x[1]))),
            "gamma": float(math.exp(res.x[2]) * g_guess), "residual_rms": float(np.sqrt(np.mean(res.fun**2)))}


def mass_parabola(V_dc, a, m, omega0, V0=0.0, omega_off=0.0, v_ms_extra=0.0, R=DEFAULT_RADIUS):
    """Frequency shift vs DC bias: ``shift(pi eps0 R ((V - V0)^2 + extra)/a^2) + omega_off``."""
    g = electrostatic_gradient(a, (np.asarray(V_dc, dtype=float) - V0) ** 2 + v_ms_extra, R)
    return shift_from_gradient(m, omega0, g) + omega_off


def calibrate_mass(V_dc, delta_omega, a, omega0, R=DEFAULT_RADIUS, v_ms_extra=0.0) -> dict:
    """Fit ``m``, ``V0`` and ``omega_off`` to a frequency-shift parabola.

    Starts from a quadratic polynomial fit (curvature ~ -pi eps0 R/(m omega0 a^2))
    and refines with the exact shift model.
    """
    V = np.asarray(V_dc, dtype=float)
    y = np.asarray(delta_omega, dtype=float)
    if np.unique(V).size < 5:
        raise CalibrationFitError("need at least 5 distinct V_DC values")
    c2, c1, c0 = np.polyfit(V, y, 2)
    scale = np.max(np.abs(y - y.mean())) + 1e-300
    if not c2 < 0 or abs(c2) * np.ptp(V) ** 2 < 1e-8 * scale:
        raise CalibrationFitError("data are not a downward parabola (degenerate or collinear input)")
    V0 = -c1 / (2 * c2)
    m0 = -math.pi * epsilon_0 * R / (c2 * omega0 * a**2)
    off0 = c0 - c2 * V0**2 + (math.pi * epsilon_0 * R * v_ms_extra / (a**2 * m0)) / (2 * omega0)
    ys = np.std(y) or 1.0

    def resid(x):
        m = m0 * math.exp(x[0])
        try:
            return (mass_parabola(V, a, m, omega0, x[1], x[2] * ys, v_ms_extra, R) - y) / ys
        except PullInError:
            return np.full(V.size, 1e6)

    res = least_squares(resid, [0.0, V0, off0 / ys], xtol=1e-15, ftol=1e-15, gtol=1e-15, method="lm")
    m = m0 * math.exp(res.x[0])
    J = res.jac
    dof = max(V.size - 3, 1)
    s2 = float(np.sum(res.fun**2)) * ys**2 / dof
    try:
        cov = np.linalg.inv(J.T @ J) * s2 / ys**2
        sig = np.sqrt(np.diag(cov))
    except np.linalg.LinAlgError:
        sig = np.full(3, np.nan)
    return {"m": float(m), "V0": float(res.x[1]), "omega_off": float(res.x[2] * ys),
            "sigma_m": float(m * sig[0]), "sigma_V0": float(sig[1]), "sigma_omega_off": float(sig[2] * ys)}


# ---------------------------------------------------------------------------
# equation of motion in air


@dataclass(frozen=True)
class OperatingPoint:
    """Separation-dependent inputs of the equation of motion at one ``a``."""

    G: float  # dF/da
    gamma0: float
    dgamma0: float

    @classmethod
    def at(cls, a: float, params: CantileverParams, gradient: float | Callable[[float], float]) -> "OperatingPoint":
        g = gradient(a) if callable(gradient) else float(gradient)
        return cls(float(g), float(params.gamma0(a)), float(params.dgamma0(a)))


@dataclass(frozen=True)
class ExcitationConfig:
    """Amplitudes of the three excitation channels (force F [N], plate X0 [m], base X1 [m])."""

    F: float = 0.0
    X0: float = 0.0
    X1: float = 0.0
    source: str = "F"
    V_ex: float = 0.0
    V_AC: float = 0.0
    V_DC: float = 0.0

    def __post_init__(self):
        if self.source not in ("F", "X0", "X1"):
            raise ValueError("source must be 'F', 'X0' or 'X1'")


def _num_den(omega, params: CantileverParams, op: OperatingPoint, F, X0, X1):
    w = np.asarray(omega, dtype=float)
    m, k = params.m, params.k
    G, g0, gp, g1 = op.G, op.gamma0, op.dgamma0, params.gamma1
    N = F - G * (X0 - X1) - 1j * w * (g0 * (X1 - X0) + 3 * gp * X0 * X1 + 1j * w * m * X1)
    D = k - G + 1j * w * (g0 + g1 + 2 * gp * (X0 - X1)) - m * w**2
    return N, D


def eom_response(omega, params: CantileverParams, excitation: ExcitationConfig, op: OperatingPoint):
    """Relative cantilever motion ``Y(omega)`` (cantilever minus base).

    ``Y = [F - G(X0-X1) - i w (gamma0 (X1-X0) + 3 gamma0' X0 X1 + i w m X1)]
          / [k - G + i w (gamma0 + gamma1 + 2 gamma0' (X0-X1)) - m w^2]``
    """
    N, D = _num_den(omega, params, op, excitation.F, excitation.X0, excitation.X1)
    out = N / D
    return out if np.ndim(out) else complex(out)


def _partials(source, w, params, op, F, X0, X1):
    m, G, g0, gp = params.m, op.G, op.gamma0, op.dgamma0
    one = np.ones_like(np.asarray(w, dtype=complex))
    if source == "F":
        return 1.0 * one, 0.0 * one
    if source == "X0":
        return -G - 1j * w * (-g0 + 3 * gp * X1), 2j * w * gp
    if source == "X1":
        return G - 1j * w * (g0 + 3 * gp * X0 + 1j * w * m), -2j * w * gp
    raise ValueError("source must be 'F', 'X0' or 'X1'")


def transfer_function(source: str, omega, params: CantileverParams, op: OperatingPoint,
                      excitation: ExcitationConfig | None = None):
    """Small-signal coefficient ``dY/dB`` at ``B = 0`` for ``B`` in {F, X0, X1}.

    The other two channels are held at the amplitudes given in ``excitation``.
    """
    ex = excitation or ExcitationConfig()
    amps = {"F": ex.F, "X0": ex.X0, "X1": ex.X1}
    amps[source] = 0.0
    w = np.asarray(omega, dtype=float)
    N, D = _num_den(w, params, op, amps["F"], amps["X0"], amps["X1"])
    NB, DB = _partials(source, w, params, op, amps["F"], amps["X0"], amps["X1"])
    out = (NB * D - N * DB) / D**2
    return out if np.ndim(out) else complex(out)


def absolute_transfer_function(source, omega, params, op, excitation=None):
    """Transfer function of the absolute motion ``X = Y + X1``."""
    t = transfer_function(source, omega, params, op, excitation)
    return t + 1.0 if source == "X1" else t


def closed_form_phase(source: str, params: CantileverParams, op: OperatingPoint,
                      excitation: ExcitationConfig | None = None) -> float:
    """arctan of Im/Re of ``transfer_function`` at ``sqrt((k - G)/m)`` in closed form."""
    ex = excitation or ExcitationConfig()
    m, k, g1 = params.m, params.k, params.gamma1
    G, g0, gp = op.G, op.gamma0, op.dgamma0
    s = g0 + g1
    root = math.sqrt(m * (k - G))
    if source == "F":
        return -math.pi / 2
    if source == "X0":
        num = root * (G * s + 2 * gp * (ex.F + (k - G) * ex.X1))
        den = (k - G) * (g0 * s - 3 * gp * s * ex.X1 + 6 * gp**2 * ex.X1**2)
    elif source == "X1":
        num = root * (k * s + 2 * gp * (ex.F + (k - G) * ex.X0))
        den = (k - G) * (g0 * s + 3 * gp * s * ex.X0 + 6 * gp**2 * ex.X0**2)
    else:
        raise ValueError("source must be 'F', 'X0' or 'X1'")
    return math.atan(num / den) if den != 0 else math.copysign(math.pi / 2, num)


@dataclass
class ResonanceResult:
    source: str
    omega_closed: float
    omega_numeric: float
    phase: float           # arctan(Im/Re) at omega_closed
    phase_closed: float    # closed_form_phase
    phase_numeric: float   # arctan(Im/Re) at omega_numeric


def _arctan_phase(z: complex) -> float:
    if z.real == 0.0:
        return math.copysign(math.pi / 2, z.imag)
    return math.atan(z.imag / z.real)


def resonance_and_phase(source: str, params: CantileverParams, op: OperatingPoint,
                        excitation: ExcitationConfig | None = None, bracket=(0.5, 1.5)) -> ResonanceResult:
    """Resonance from ``Re transfer_function = 0`` and the phase there.

    ``omega_numeric`` is the root of the real part (Brent's method in a
    relative bracket around ``sqrt((k - G)/m)``); ``phase`` is evaluated at
    the closed-form frequency with ``m omega^2`` replaced by ``k - G``
    exactly, so that the force channel gives ``-pi/2`` to the last bit.
    """
    if not params.k > op.G:
        raise PullInError("k <= dF/da")
    ex = excitation or ExcitationConfig()
    w_r = math.sqrt((params.k - op.G) / params.m)

    def re(w):
        return transfer_function(source, w, params, op, ex).real

    lo, hi = bracket[0] * w_r, bracket[1] * w_r
    flo, fhi = re(lo), re(hi)
    if flo * fhi > 0:
        raise RootError(f"Re Y_{source} does not change sign in [{lo:.6g}, {hi:.6g}]")
    # pick the sign change closest to w_r when several exist
    grid = np.linspace(lo, hi, 2001)
    vals = transfer_function(source, grid, params, op, ex).real
    idx = np.nonzero(np.sign(vals[:-1]) * np.sign(vals[1:]) <= 0)[0]
    j = idx[np.argmin(np.abs(grid[idx] - w_r))]
    w_num = brentq(re, grid[j], grid[j + 1], xtol=1e-14 * w_r, rtol=4 * np.finfo(float).eps, maxiter=200)

    # exact substitution m w_r^2 = k - G in the denominator
    amps = {"F": ex.F, "X0": ex.X0, "X1": ex.X1}
    amps[source] = 0.0
    F, X0, X1 = amps["F"], amps["X0"], amps["X1"]
    w = w_r
    kG = params.k - op.G  # = m w_r^2
    N = F - op.G * (X0 - X1) - 1j * w * (op.gamma0 * (X1 - X0) + 3 * op.dgamma0 * X0 * X1) + kG * X1
    D = 1j * w * (op.gamma0 + params.gamma1 + 2 * op.dgamma0 * (X0 - X1))
    NB, DB = _partials(source, w, params, op, F, X0, X1)
    if source == "X1":
        NB = op.G - 1j * w * (op.gamma0 + 3 * op.dgamma0 * X0) + kG
    y_r = complex((NB * D - N * DB) / D**2)
    y_n = complex(transfer_function(source, w_num, params, op, ex))
    return ResonanceResult(source, w_r, float(w_num), _arctan_phase(y_r),
                           closed_form_phase(source, params, op, ex), _arctan_phase(y_n))


# ---------------------------------------------------------------------------
# sweep simulator


@dataclass
class SweepRecord:
    """One distance sweep (piezo positions increase, separations decrease)."""

    index: int
    a_pz_m: np.ndarray
    delta_omega_rad_s: np.ndarray
    V_ac: np.ndarray
    V_ex: np.ndarray
    t_s: np.ndarray
    signal: np.ndarray
    omega0_cal: float
    sigma_delta_omega: float = 0.0
    sigma_signal: float = 0.0
    sigma_V: float = 0.0
    a0_true: float | None = None
    truncated: bool = False
    version: int = RECORD_VERSION

    def __post_init__(self):
        for name in ("a_pz_m", "delta_omega_rad_s", "V_ac", "V_ex", "t_s", "signal"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        n = self.a_pz_m.size
        if any(getattr(self, f).size != n for f in ("delta_omega_rad_s", "V_ac", "V_ex", "t_s", "signal")):
            raise ValueError("all per-point arrays must have equal length")
        if n > 1 and np.any(np.diff(self.t_s) <= 0):
            raise ValueError("timestamps must increase")

    def __len__(self):
        return self.a_pz_m.size

    def to_json(self) -> str:
        d = {}
        for k, v in asdict(self).items():
            d[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SweepRecord":
        d = json.loads(text)
        if d.get("version", RECORD_VERSION) != RECORD_VERSION:
            raise RecordVersionError(f"unsupported record version {d.get('version')}")
        return cls(**d)


def write_records(records: Iterable[SweepRecord], path: str | Path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_records(path: str | Path) -> list[SweepRecord]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                try:
                    out.append(SweepRecord.from_json(line))
                except (json.JSONDecodeError, TypeError) as exc:
                    raise ValueError(f"{path}: line {lineno}: {exc}") from None
    versions = {r.version for r in out}
    if len(versions) > 1:
        raise RecordVersionError(f"mixed record versions {sorted(versions)}")
    return out


@dataclass(frozen=True)
class SweepPlan:
    n_points: int = 34
    a_start: float = 500e-9
    a_stop: float = 70e-9
    n_sweeps: int = 35
    point_time: float = 145.0
    gap_time: float = 600.0
    v_ms_ref: float = 4.22e-3   # mean-square excitation voltage at a_ref [V^2]
    a_ref: float = 100e-9
    ac_fraction: float = 0.5    # share of v_ms carried by V_AC

    def nominal_gaps(self) -> np.ndarray:
        return np.geomspace(self.a_start, self.a_stop, self.n_points)


@dataclass(frozen=True)
class NoiseModel:
    sigma_delta_omega: float = 0.551     # rad/s per point
    sigma_omega0_cal: float = 0.222      # rad/s per calibration
    omega0_drift_span: float = 2 * math.pi * 0.08
    omega0_step: float = 0.05            # rad/s rms random-walk step per sweep
    a0_start: float = 600e-9
    a0_drift_per_sweep: float = 1e-9
    a0_jumps: tuple = ()                 # ((sweep_index, jump_m), ...)
    sigma_signal_rel: float = 3.7e-3
    sigma_V: float = 2.5e-6
    signal_gain: float = 1.0e-6          # signal = gain * V^2 / a  [arb * m / V^2]

    @classmethod
    def noiseless(cls, **kw) -> "NoiseModel":
        base = dict(sigma_delta_omega=0.0, sigma_omega0_cal=0.0, omega0_drift_span=0.0, omega0_step=0.0,
                    a0_drift_per_sweep=0.0, sigma_signal_rel=0.0, sigma_V=0.0)
        base.update(kw)
        return cls(**base)


def _bounded_walk(rng, n, step, span):
    """Random walk clipped so that max - min never exceeds ``span``."""
    x = np.zeros(n)
    lo = hi = 0.0
    for i in range(1, n):
        x[i] = min(max(x[i - 1] + step * rng.standard_normal(), hi - span), lo + span)
        lo, hi = min(lo, x[i]), max(hi, x[i])
    return x


def simulate_run(gradient_law: Callable, params: CantileverParams, plan: SweepPlan = SweepPlan(),
                 noise: NoiseModel = NoiseModel(), seed: int = 0, R: float = DEFAULT_RADIUS,
                 t_start: float = 0.0) -> list[SweepRecord]:
    """Simulate ``plan.n_sweeps`` distance sweeps over a Casimir law ``gradient_law(a)``.

    Every point sees the total gradient (Casimir + electrostatic from
    ``V_ex``, ``V_AC``), converted to a frequency shift relative to the
    instantaneous resonance ``omega0(t)``; the record stores the shift
    relative to that sweep's (noisy) calibrated ``omega0``. Excitation
    voltages scale as ``sqrt(a)`` so the recorded signal ``gain V^2 / a`` has
    constant magnitude along the sweep.
    """
    rng = np.random.default_rng(np.random.Philox(key=seed))
    gaps = plan.nominal_gaps()
    sweep_time = plan.n_points * plan.point_time
    walk = _bounded_walk(rng, plan.n_sweeps * plan.n_points, noise.omega0_step / math.sqrt(plan.n_points),
                         noise.omega0_drift_span)
    jumps = dict(noise.a0_jumps)
    records = []
    a0_offset = 0.0
    t = t_start
    for i in range(plan.n_sweeps):
        a0_offset += jumps.get(i, 0.0)
        t_pts = t + plan.point_time * np.arange(plan.n_points)
        t_center = t_pts[min(15, plan.n_points - 1)]
        a0_t = noise.a0_start + a0_offset + noise.a0_drift_per_sweep * (t_pts - t_start) / (sweep_time + plan.gap_time)
        a0_center = noise.a0_start + a0_offset + noise.a0_drift_per_sweep * (t_center - t_start) / (sweep_time + plan.gap_time)
        # the piezo schedule follows the expected drift but not sudden jumps
        a_pz = noise.a0_start + noise.a0_drift_per_sweep * i - gaps
        a_true = a0_t - a_pz
        w0_t = params.omega0 + walk[i * plan.n_points: (i + 1) * plan.n_points]
        w0_cal = float(w0_t[0] + noise.sigma_omega0_cal * rng.standard_normal())
        v_ms = plan.v_ms_ref * gaps / plan.a_ref
        V_ac = np.sqrt(2 * plan.ac_fraction * v_ms)
        V_ex = np.sqrt(2 * (1 - plan.ac_fraction) * v_ms)
        truncated = False
        keep = plan.n_points
        g_tot = np.empty(plan.n_points)
        for j, a in enumerate(a_true):
            if a > 0:
                g_tot[j] = gradient_law(a) + electrostatic_gradient(a, 0.5 * (V_ac[j] ** 2 + V_ex[j] ** 2), R)
            if a <= 0 or g_tot[j] >= params.m * w0_t[j] ** 2:
                truncated, keep = True, j
                break
        sl = slice(0, keep)
        w_true = np.sqrt(w0_t[sl] ** 2 - g_tot[sl] / params.m)
        w_meas = w_true + noise.sigma_delta_omega * rng.standard_normal(keep)
        v2 = V_ac[sl] ** 2 + V_ex[sl] ** 2
        signal = noise.signal_gain * v2 / a_true[sl] * (1 + noise.sigma_signal_rel * rng.standard_normal(keep))
        Vac_rec = V_ac[sl] + noise.sigma_V * rng.standard_normal(keep)
        Vex_rec = V_ex[sl] + noise.sigma_V * rng.standard_normal(keep)
        records.append(SweepRecord(
            index=i, a_pz_m=a_pz[sl], delta_omega_rad_s=w_meas - w0_cal, V_ac=Vac_rec, V_ex=Vex_rec,
            t_s=t_pts[sl], signal=signal, omega0_cal=w0_cal, sigma_delta_omega=noise.sigma_delta_omega,
            sigma_signal=noise.sigma_signal_rel, sigma_V=noise.sigma_V, a0_true=float(a0_center),
            truncated=truncated,
        ))
        t += sweep_time + plan.gap_time
    return records


def simulate_sweep(gradient_law, params, plan=SweepPlan(), noise=NoiseModel(), seed=0, R=DEFAULT_RADIUS):
    """A single sweep (the first of :func:`simulate_run`)."""
    one = SweepPlan(**{**asdict(plan), "n_sweeps": 1})
    return simulate_run(gradient_law, params, one, noise, seed, R)[0]
