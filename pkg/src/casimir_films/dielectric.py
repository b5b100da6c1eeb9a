"""Dielectric response functions: Drude-Lorentz models, tabulated spectra,
Kramers-Kronig continuation to imaginary frequencies and model fitting.

All frequencies are angular frequencies in s^-1.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.integrate import trapezoid
from scipy.interpolate import PchipInterpolator
from scipy.optimize import least_squares

logger = logging.getLogger(__name__)

#: Marker returned for eps(i*0) of a Drude metal. Only the static reflection
#: limit of the Lifshitz sum consumes it.
STATIC_DRUDE = math.inf

DEFAULT_CROSSOVER = 7.53e15
VALIDATION_RANGE = (1e11, 1e18)


class DielectricError(Exception):
    """Base class for errors raised by this module."""


class EvaluationError(DielectricError):
    """Model evaluated too close to a resonance pole."""


class ModelValidationError(DielectricError):
    """eps(i xi) <= 1 somewhere on the checked imaginary-frequency range."""

    def __init__(self, message: str, xi: float):
        super().__init__(message)
        self.xi = xi


class CoverageError(DielectricError):
    """Tabulated spectrum does not cover enough of the frequency axis."""


class SingularInputError(DielectricError):
    pass


class GapError(DielectricError):
    pass


class FitError(DielectricError):
    """Least-squares fit did not converge; best-so-far result attached."""

    def __init__(self, message: str, model: "DrudeLorentzModel", report: "FitReport"):
        super().__init__(message)
        self.model = model
        self.report = report


@dataclass(frozen=True)
class OscillatorTerm:
    """One Lorentz term ``strength / (omega**2 - 1j*w*gamma - w**2)``.

    ``strength`` and ``gamma`` carry no sign constraint; fitted tables
    contain negative entries.
    """

    omega: float
    strength: float
    gamma: float

    def __post_init__(self):
        if not self.omega > 0:
            raise ValueError(f"oscillator frequency must be positive, got {self.omega}")


@dataclass(frozen=True)
class DrudeLorentzModel:
    """Plasma (Drude) term plus an ordered list of Lorentz oscillators.

    ``omega_p = 0`` disables the Drude term (insulator).
    """

    omega_p: float
    tau_D: float
    oscillators: tuple[OscillatorTerm, ...] = ()
    name: str = ""

    def __post_init__(self):
        if self.omega_p < 0:
            raise ValueError("omega_p must be non-negative")
        if not self.tau_D > 0:
            raise ValueError("tau_D must be positive")
        object.__setattr__(self, "oscillators", tuple(self.oscillators))

    @property
    def is_metal(self) -> bool:
        return self.omega_p > 0

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Oscillator frequencies, strengths and dampings as arrays."""
        osc = self.oscillators
        return (
            np.array([o.omega for o in osc], dtype=float),
            np.array([o.strength for o in osc], dtype=float),
            np.array([o.gamma for o in osc], dtype=float),
        )

    def to_dict(self) -> dict:
        return {
            "omega_p": self.omega_p,
            "tau_D": self.tau_D,
            "oscillators": [
                {"omega": o.omega, "xi": o.strength, "gamma": o.gamma} for o in self.oscillators
            ],
        }

    @classmethod
    def from_dict(cls, data: dict, name: str = "") -> "DrudeLorentzModel":
        osc = tuple(
            OscillatorTerm(float(o["omega"]), float(o["xi"]), float(o["gamma"]))
            for o in data.get("oscillators", [])
        )
        return cls(float(data["omega_p"]), float(data["tau_D"]), osc, name=name)

    def static_permittivity(self) -> float:
        """eps(i*0): infinite for Drude metals, else 1 + sum(strength/omega**2)."""
        if self.is_metal:
            return STATIC_DRUDE
        return float(eval_imag_axis(self, 0.0))


def save_model(model: DrudeLorentzModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), indent=2, sort_keys=True) + "\n")


def load_model(path: str | Path) -> DrudeLorentzModel:
    path = Path(path)
    return DrudeLorentzModel.from_dict(json.loads(path.read_text()), name=path.stem)


# ---------------------------------------------------------------------------
# evaluation


def eval_real_axis(model: DrudeLorentzModel, omega):
    """Complex permittivity on the real frequency axis.

    ``eps = 1 - wp^2/(w(w + i/tau)) + sum_j xi_j/(w_j^2 - i w g_j - w^2)``

    ``omega = 0`` is accepted only for models without a Drude term.
    """
    w = np.asarray(omega, dtype=float)
    if np.any(w < 0) or (model.is_metal and np.any(w == 0)):
        raise ValueError("omega must be positive")
    wj, sj, gj = model.arrays()
    with np.errstate(divide="ignore", invalid="ignore"):
        drude = np.where(w > 0, model.omega_p**2 / (w * (w + 1j / model.tau_D)), 0.0) if model.is_metal else 0.0
    wc = w[..., None]
    denom = wj**2 - 1j * wc * gj - wc**2
    scale = np.maximum(wj**2, wc**2)
    if np.any(np.abs(denom) < 64 * np.finfo(float).eps * scale):
        bad = np.argwhere(np.abs(denom) < 64 * np.finfo(float).eps * scale)[0]
        raise EvaluationError(
            f"evaluation at omega={np.atleast_1d(w)[bad[0]] if w.ndim else float(w):.6g} s^-1 "
            f"hits the undamped pole of oscillator {bad[-1] + 1}"
        )
    return 1.0 - drude + np.sum(sj / denom, axis=-1)


def eval_imag_axis(model: DrudeLorentzModel, xi, *, causal: bool = True):
    """Permittivity at imaginary frequency ``i*xi``.

    With ``causal=True`` (default) each oscillator is continued on the branch
    that is analytic in the upper half plane, i.e. the term whose
    Kramers-Kronig transform of the model's absorption ``eps''(omega)`` it
    is::

        sign(g_j) * xi_j / (w_j^2 + |g_j| xi + xi^2)

    For oscillators with ``g_j >= 0`` this equals the literal substitution
    ``omega -> i xi`` of :func:`eval_real_axis`. ``causal=False`` applies the
    literal substitution to every term; with negative fitted dampings this
    produces poles on the imaginary axis.

    Returns :data:`STATIC_DRUDE` at ``xi = 0`` for Drude metals.
    """
    x = np.asarray(xi, dtype=float)
    if np.any(x < 0):
        raise ValueError("xi must be non-negative")
    wj, sj, gj = model.arrays()
    if causal:
        sj = np.where(gj < 0, -sj, sj)
        gj = np.abs(gj)
    xc = x[..., None]
    lorentz = np.sum(sj / (wj**2 + xc * gj + xc**2), axis=-1)
    if model.is_metal:
        with np.errstate(divide="ignore"):
            drude = np.where(x > 0, model.omega_p**2 / (x * (x + 1.0 / model.tau_D)), np.inf)
        out = 1.0 + drude + lorentz
    else:
        out = 1.0 + lorentz
    return out if out.ndim else float(out)


def validate_imag_axis(model: DrudeLorentzModel, xi_grid=None) -> None:
    """Raise :class:`ModelValidationError` if eps(i xi) <= 1 on the grid."""
    if xi_grid is None:
        xi_grid = np.logspace(np.log10(VALIDATION_RANGE[0]), np.log10(VALIDATION_RANGE[1]), 1401)
    xi_grid = np.asarray(xi_grid, dtype=float)
    eps = eval_imag_axis(model, xi_grid)
    bad = ~(np.asarray(eps) > 1.0)
    if np.any(bad):
        x = float(xi_grid[np.argmax(bad)])
        raise ModelValidationError(
            f"model {model.name or '<unnamed>'}: eps(i xi) <= 1 at xi={x:.4e} s^-1", xi=x
        )


def _read_table(text: str, name: str) -> DrudeLorentzModel:
    header: dict[str, str] = {}
    rows = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            if "=" in line:
                key, val = line[1:].split("=", 1)
                header[key.split("[")[0].strip()] = val.strip()
            continue
        j, w, s, g = line.split()
        # decimal strings scaled via the literal exponent keep values bit-exact
        rows.append(OscillatorTerm(float(w + "e15"), float(s + "e30"), float(g + "e15")))
    return DrudeLorentzModel(float(header["omega_p"]), float(header["tau_D"]), tuple(rows), name=name)


_BUNDLED = {"au": "au_drude_lorentz.txt", "psi": "psi_drude_lorentz.txt"}


def bundled_model(name: str) -> DrudeLorentzModel:
    """Load a bundled parameter table (``"au"`` or ``"psi"``) and validate it."""
    key = name.lower().replace(" ", "").replace("_", "")
    if key in ("psi", "ps1", "psl"):
        key = "psi"
    if key not in _BUNDLED:
        raise KeyError(f"unknown bundled model {name!r}; choose from {sorted(_BUNDLED)}")
    text = resources.files("casimir_films.data").joinpath(_BUNDLED[key]).read_text()
    model = _read_table(text, key)
    validate_imag_axis(model)
    return model


# ---------------------------------------------------------------------------
# tabulated spectra


@dataclass(frozen=True)
class TabulatedSpectrum:
    """Complex permittivity sampled on a strictly increasing frequency grid."""

    omega: np.ndarray
    eps_real: np.ndarray
    eps_imag: np.ndarray
    provenance: tuple[str, ...] = ()

    def __post_init__(self):
        w = np.asarray(self.omega, dtype=float)
        er = np.asarray(self.eps_real, dtype=float)
        ei = np.asarray(self.eps_imag, dtype=float)
        if not (w.shape == er.shape == ei.shape) or w.ndim != 1:
            raise ValueError("omega, eps_real and eps_imag must be 1-D arrays of equal length")
        if w.size > 1 and np.any(np.diff(w) <= 0):
            raise ValueError("omega must be strictly increasing")
        prov = tuple(self.provenance) or ("measured",) * w.size
        if len(prov) != w.size:
            raise ValueError("one provenance tag per point is required")
        meas = np.array([p == "measured" for p in prov])
        if np.any(ei[meas] < 0):
            raise ValueError("measured eps_imag must be non-negative")
        object.__setattr__(self, "omega", w)
        object.__setattr__(self, "eps_real", er)
        object.__setattr__(self, "eps_imag", ei)
        object.__setattr__(self, "provenance", prov)

    def __len__(self):
        return self.omega.size

    @property
    def eps(self) -> np.ndarray:
        return self.eps_real + 1j * self.eps_imag

    @classmethod
    def from_model(cls, model: DrudeLorentzModel, omega, provenance: str = "measured") -> "TabulatedSpectrum":
        omega = np.asarray(omega, dtype=float)
        eps = eval_real_axis(model, omega)
        return cls(omega, eps.real, eps.imag, (provenance,) * omega.size)


def read_spectrum_csv(path: str | Path) -> TabulatedSpectrum:
    """Read ``omega_rad_per_s, eps_real, eps_imag, provenance`` CSV.

    Malformed rows raise ``ValueError`` naming the line number.
    """
    omega, er, ei, prov = [], [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: line 1: empty spectrum file")
        cols = [h.strip() for h in header]
        if cols[:3] != ["omega_rad_per_s", "eps_real", "eps_imag"]:
            raise ValueError(f"{path}: line 1: unexpected header {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row or not "".join(row).strip():
                continue
            try:
                omega.append(float(row[0]))
                er.append(float(row[1]))
                ei.append(float(row[2]))
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from None
            prov.append(row[3].strip() if len(row) > 3 and row[3].strip() else "measured")
    if not omega:
        raise ValueError(f"{path}: line 2: no data rows")
    return TabulatedSpectrum(np.array(omega), np.array(er), np.array(ei), tuple(prov))


def write_spectrum_csv(spectrum: TabulatedSpectrum, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["omega_rad_per_s", "eps_real", "eps_imag", "provenance"])
        for row in zip(spectrum.omega, spectrum.eps_real, spectrum.eps_imag, spectrum.provenance):
            w.writerow([repr(float(row[0])), repr(float(row[1])), repr(float(row[2])), row[3]])


def merge_with_literature(
    measured: TabulatedSpectrum,
    literature: TabulatedSpectrum,
    crossover_omega: float = DEFAULT_CROSSOVER,
) -> TabulatedSpectrum:
    """Measured points up to ``crossover_omega``, literature points above it."""
    keep_m = measured.omega <= crossover_omega
    keep_l = literature.omega > crossover_omega
    if not np.any(keep_l):
        raise GapError("literature data do not extend above the crossover frequency")
    if np.any(keep_m):
        last, first = measured.omega[keep_m][-1], literature.omega[keep_l][0]
        if first / last > 10.0:
            raise GapError(
                f"gap of {np.log10(first / last):.2f} decades between measured data "
                f"(ends {last:.3e}) and literature data (starts {first:.3e})"
            )
    prov = tuple(np.array(measured.provenance)[keep_m]) + ("literature",) * int(keep_l.sum())
    return TabulatedSpectrum(
        np.concatenate([measured.omega[keep_m], literature.omega[keep_l]]),
        np.concatenate([measured.eps_real[keep_m], literature.eps_real[keep_l]]),
        np.concatenate([measured.eps_imag[keep_m], literature.eps_imag[keep_l]]),
        prov,
    )


# ---------------------------------------------------------------------------
# ellipsometry


@dataclass(frozen=True)
class EllipsometricPoint:
    wavelength: float
    psi: float
    delta: float
    phi: float

    def __post_init__(self):
        if not 0 <= self.psi < math.pi / 2:
            raise ValueError("psi must lie in [0, pi/2)")
        if not 0 < self.phi < math.pi / 2:
            raise ValueError("angle of incidence must lie in (0, pi/2)")


def ellipsometry_to_epsilon(point: EllipsometricPoint) -> complex:
    """Effective single-layer permittivity from (psi, Delta) at incidence phi."""
    rho = math.tan(point.psi) * complex(math.cos(point.delta), math.sin(point.delta))
    if abs(1 + rho) < 1e-12:
        raise SingularInputError(f"rho = -1 at wavelength {point.wavelength:.4g} m")
    s2 = math.sin(point.phi) ** 2
    t2 = math.tan(point.phi) ** 2
    return s2 * (1 + t2 * (1 - rho) ** 2 / (1 + rho) ** 2)


def read_ellipsometry_csv(path: str | Path) -> list[EllipsometricPoint]:
    pts = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for lineno, row in enumerate(reader, start=2):
            try:
                pts.append(
                    EllipsometricPoint(
                        float(row["wavelength_m"]), float(row["psi_rad"]),
                        float(row["delta_rad"]), float(row["phi_rad"]),
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from None
    return pts


# ---------------------------------------------------------------------------
# Kramers-Kronig


def _drude_tail_from_points(omega, eps_real, eps_imag) -> tuple[float, float] | None:
    """(omega_p, tau) of a Drude term through one low-frequency sample, or None."""
    if not (eps_real < 1 and eps_imag > 0):
        return None
    tau = (1 - eps_real) / (omega * eps_imag)
    wp2 = (1 - eps_real) * (1 + (omega * tau) ** 2) / tau**2
    return math.sqrt(wp2), tau


def kk_transform(
    spectrum: TabulatedSpectrum,
    xi,
    tail_model: DrudeLorentzModel | None = None,
    refine: int = 8,
    min_decades: float = 6.0,
):
    """eps(i xi) = 1 + (2/pi) * int_0^inf w eps''(w) / (w^2 + xi^2) dw.

    The tabulated part is integrated in ``ln(omega)`` on a grid refined
    ``refine``-fold by log-log monotone interpolation of ``eps''``. Below
    the table a Drude tail is used (from ``tail_model`` if given, otherwise
    matched to the lowest sample; dielectric data get ``eps'' ~ omega``);
    above it ``eps'' ~ omega**-3`` matched at the last sample. Both tails are
    integrated in closed form.
    """
    w = spectrum.omega
    e2 = np.clip(spectrum.eps_imag, 0.0, None)
    x = np.atleast_1d(np.asarray(xi, dtype=float))
    if w.size < 2:
        raise CoverageError("spectrum needs at least two points")
    decades = math.log10(w[-1] / w[0])
    if decades < min_decades:
        raise CoverageError(
            f"spectrum spans {decades:.2f} decades ({w[0]:.3e}..{w[-1]:.3e} s^-1); "
            f"{min_decades - decades:.2f} more decades required"
        )
    lo, hi = w[0] / 10, w[-1] * 10
    if np.any((x < lo) | (x > hi)):
        bad = x[(x < lo) | (x > hi)][0]
        side = "below" if bad < lo else "above"
        miss = math.log10(lo / bad) if bad < lo else math.log10(bad / hi)
        raise CoverageError(
            f"xi={bad:.3e} s^-1 lies {miss:.2f} decades {side} the usable range {lo:.3e}..{hi:.3e}"
        )

    u = np.log(w)
    if refine > 1:
        uf = np.concatenate(
            [np.linspace(u[i], u[i + 1], refine, endpoint=False) for i in range(u.size - 1)] + [u[-1:]]
        )
        positive = e2 > 0
        if np.all(positive):
            e2f = np.exp(PchipInterpolator(u, np.log(e2))(uf))
        else:
            e2f = PchipInterpolator(u, e2)(uf).clip(0.0)
    else:
        uf, e2f = u, e2
    wf = np.exp(uf)
    integrand = wf**2 * e2f / (wf**2 + x[:, None] ** 2)
    body = trapezoid(integrand, uf, axis=-1)

    # low tail: Drude-shaped eps'' = wp^2/(tau w (w^2 + 1/tau^2))
    if tail_model is not None and tail_model.is_metal:
        tail = (tail_model.omega_p, tail_model.tau_D)
    else:
        tail = _drude_tail_from_points(w[0], spectrum.eps_real[0], e2[0])
    w0 = w[0]
    if tail is not None:
        wp, tau = tail
        g = 1.0 / tau
        # int_0^W dw / ((w^2+g^2)(w^2+x^2)), closed form; equal-width limit handled separately
        with np.errstate(divide="ignore", invalid="ignore"):
            xs = np.where(x > 0, x, 1e-300)
            diff = xs**2 - g**2
            gen = (np.arctan(w0 / g) / g - np.arctan(w0 / xs) / xs) / diff
            same = (np.arctan(w0 / g) / g + w0 / (w0**2 + g**2)) / (2 * g**2)
            low = np.where(np.abs(diff) > 1e-10 * g**2, gen, same)
        low = wp**2 / tau * low
    else:
        # eps'' = e2[0] * w / w0 below the table
        c = e2[0] / w0
        low = c * (w0 - x * np.arctan(w0 / np.where(x > 0, x, 1e-300)))
        low = np.where(x > 0, low, c * w0)

    # high tail: eps'' = e2[-1] (W/w)^3
    W = w[-1]
    r = x / W
    with np.errstate(divide="ignore", invalid="ignore"):
        g_r = np.where(r > 1e-2, (r - np.arctan(r)) / np.where(r > 0, r, 1) ** 3, 1 / 3 - r**2 / 5 + r**4 / 7)
    high = e2[-1] * g_r

    out = 1.0 + (2.0 / math.pi) * (body + low + high)
    return out if np.ndim(xi) else float(out[0])


# ---------------------------------------------------------------------------
# fitting


@dataclass
class FitReport:
    converged: bool
    residual_norm: float
    iterations: int
    parameters: dict[str, float]
    n_starts: int
    best_start: int
    boundary: bool = False
    weights: dict[str, float] = field(default_factory=lambda: {"eps_real": 1.0, "eps_imag": 1.0})
    transform: str = "slog"
    message: str = ""

    def to_dict(self) -> dict:
        return {
            "converged": self.converged,
            "residual_norm": self.residual_norm,
            "iterations": self.iterations,
            "parameters": self.parameters,
            "n_starts": self.n_starts,
            "best_start": self.best_start,
            "boundary": self.boundary,
            "weights": self.weights,
            "transform": self.transform,
            "message": self.message,
        }


def _slog(x, s):
    return np.sign(x) * np.log1p(np.abs(x) / s)


def _pack(model: DrudeLorentzModel) -> np.ndarray:
    wj, sj, gj = model.arrays()
    rest = np.column_stack([wj, sj, gj]).ravel() if wj.size else np.empty(0)
    return np.concatenate([[model.omega_p, model.tau_D], rest])


def _unpack(theta: np.ndarray, name: str = "") -> DrudeLorentzModel:
    # omega_j enters as omega_j^2 only, so its sign is irrelevant
    osc = tuple(OscillatorTerm(abs(theta[2 + 3 * j]), theta[3 + 3 * j], theta[4 + 3 * j])
                for j in range((theta.size - 2) // 3))
    return DrudeLorentzModel(abs(theta[0]), theta[1], osc, name=name)


def _model_and_jac(theta, w):
    """eps(w) and d eps / d theta for the packed parameter vector."""
    wp, tau = theta[0], theta[1]
    osc = theta[2:].reshape(-1, 3)
    wj, sj, gj = osc[:, 0], osc[:, 1], osc[:, 2]
    base = w * (w + 1j / tau)
    eps = 1 - wp**2 / base
    jac = np.empty((w.size, theta.size), dtype=complex)
    jac[:, 0] = -2 * wp / base
    jac[:, 1] = -(wp**2) / (w * (w + 1j / tau) ** 2) * (1j / tau**2)
    if wj.size:
        wc = w[:, None]
        D = wj**2 - 1j * wc * gj - wc**2
        eps = eps + np.sum(sj / D, axis=1)
        jac[:, 2::3] = -sj * 2 * wj / D**2
        jac[:, 3::3] = 1 / D
        jac[:, 4::3] = 1j * wc * sj / D**2
    return eps, jac


def _default_initial(spectrum: TabulatedSpectrum, n: int) -> DrudeLorentzModel:
    w = spectrum.omega
    tail = _drude_tail_from_points(w[0], spectrum.eps_real[0], spectrum.eps_imag[0])
    wp, tau = tail if tail else (1e-3 * w[0], 1e-14)
    centers = np.geomspace(w[0] * 3, w[-1] / 3, n) if n else []
    osc = tuple(OscillatorTerm(c, 0.5 * c**2, 0.5 * c) for c in centers)
    return DrudeLorentzModel(wp, tau, osc)


def fit_model(
    spectrum: TabulatedSpectrum,
    n_oscillators: int,
    initial: DrudeLorentzModel | None = None,
    n_starts: int = 8,
    perturbation: float = 0.1,
    max_iterations: int = 2000,
    slog_scale: float = 1e-3,
    seed: int = 0,
) -> tuple[DrudeLorentzModel, FitReport]:
    """Synchronous least-squares fit of log-scaled eps' and eps'' vs log omega.

    Residuals are ``slog(eps_model) - slog(eps_data)`` for the real and
    imaginary parts with equal weights, where
    ``slog(x) = sign(x) * ln(1 + |x|/slog_scale)`` behaves like ``ln|x|``
    for ``|x| >> slog_scale`` and stays finite for sign changes of eps'.
    Parameters are optimized in units of their starting values (``tau_D``
    logarithmically) with a
    Levenberg-Marquardt solver and an analytic Jacobian. Start 0 is the
    given (or default) initial model, starts 1.. are multiplicatively
    perturbed copies; the lowest-cost result wins.

    Raises :class:`FitError` (carrying the best-so-far model and report)
    when no start converges within ``max_iterations`` function evaluations.
    """
    n_par = 2 + 3 * n_oscillators
    if len(spectrum) < 3 * n_par:
        raise ValueError(f"need at least {3 * n_par} spectral points for {n_par} parameters")
    if initial is None:
        initial = _default_initial(spectrum, n_oscillators)
    if len(initial.oscillators) != n_oscillators:
        raise ValueError("initial model has the wrong number of oscillators")

    w = spectrum.omega
    target = np.concatenate([_slog(spectrum.eps_real, slog_scale), _slog(spectrum.eps_imag, slog_scale)])
    theta0 = _pack(initial)
    scale = np.where(np.abs(theta0) > 0, np.abs(theta0), 1.0)
    if initial.omega_p == 0:
        scale[0] = w[0]
    # tau_D is optimized as ln(tau_D / tau_0) so it stays positive even where
    # the data barely constrain it (insulators)
    tau0 = initial.tau_D

    def to_theta(v):
        t = v * scale
        t[1] = tau0 * np.exp(np.clip(v[1], -50.0, 50.0))
        return t

    def residuals(v):
        eps, _ = _model_and_jac(to_theta(v), w)
        return np.concatenate([_slog(eps.real, slog_scale), _slog(eps.imag, slog_scale)]) - target

    def jacobian(v):
        t = to_theta(v)
        eps, jac = _model_and_jac(t, w)
        dr = jac.real / (slog_scale + np.abs(eps.real))[:, None]
        di = jac.imag / (slog_scale + np.abs(eps.imag))[:, None]
        chain = scale.copy()
        chain[1] = t[1]
        return np.vstack([dr, di]) * chain

    rng = np.random.default_rng(seed)
    best = None
    for start in range(max(1, n_starts)):
        v0 = theta0 / scale
        v0[1] = 0.0
        if start:
            kick = perturbation * rng.standard_normal(v0.size)
            v0 = v0 * np.exp(kick)
            v0[1] = kick[1]
        try:
            res = least_squares(residuals, v0, jac=jacobian, method="lm", max_nfev=max_iterations,
                                xtol=1e-12, ftol=1e-12, gtol=1e-12)
        except (FloatingPointError, ValueError) as exc:  # pragma: no cover - pathological starts
            logger.debug("start %d failed: %s", start, exc)
            continue
        cost = float(np.sum(res.fun**2))
        logger.debug("start %d: cost %.3e status %d nfev %d", start, cost, res.status, res.nfev)
        if best is None or cost < best[0]:
            best = (cost, start, res)
    if best is None:  # pragma: no cover
        raise FitError("all starts failed", initial, FitReport(False, math.inf, 0, {}, n_starts, -1))

    cost, start, res = best
    theta = to_theta(res.x)
    model = _unpack(theta, name=initial.name)
    params = {"omega_p": model.omega_p, "tau_D": model.tau_D}
    for j, o in enumerate(model.oscillators, start=1):
        params.update({f"omega_{j}": o.omega, f"xi_{j}": o.strength, f"gamma_{j}": o.gamma})
    converged = res.status > 0
    boundary = model.omega_p < 1e-6 * w[0] or any(o.omega < 1e-6 * w[0] for o in model.oscillators)
    report = FitReport(
        converged=converged,
        residual_norm=math.sqrt(cost),
        iterations=int(res.nfev),
        parameters=params,
        n_starts=max(1, n_starts),
        best_start=start,
        boundary=bool(boundary),
        message=str(res.message),
    )
    if not converged:
        raise FitError(f"fit did not converge: {res.message}", model, report)
    return model, report
