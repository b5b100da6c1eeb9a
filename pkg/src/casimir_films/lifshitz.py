"""Sphere-plate Casimir force gradient in the proximity force approximation.

The gradient is evaluated from the finite-temperature Lifshitz formula as a
primed sum over Matsubara frequencies ``xi_n = 2 pi kB T n / hbar`` of an
integral over the perpendicular wave number ``q = p xi_n / c``::

    dF/da = 2 R kB T sum'_n int_{xi_n/c}^inf q^2 sum_pol
            r1 r3 exp(-2 a q) / (1 - r1 r3 exp(-2 a q)) dq

where ``r1`` (plate) and ``r3`` (sphere) are reflection coefficients seen
from the vacuum gap. Attractive gradients are returned as positive numbers.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from scipy.constants import c as C_LIGHT, hbar, k as K_B
from scipy.integrate import trapezoid
from scipy.interpolate import CubicSpline, PchipInterpolator

from .dielectric import DrudeLorentzModel, eval_imag_axis, validate_imag_axis

A_MIN, A_MAX = 10e-9, 10e-6
DEFAULT_WINDOW = (80e-9, 120e-9)


class LifshitzError(Exception):
    pass


class LifshitzConvergenceError(LifshitzError):
    """Matsubara sum did not reach the requested tolerance."""

    def __init__(self, message: str, partial_sum: float, tail_estimate: float, n_terms: int):
        super().__init__(message)
        self.partial_sum = partial_sum
        self.tail_estimate = tail_estimate
        self.n_terms = n_terms


class SeparationRangeError(LifshitzError, ValueError):
    pass


# ---------------------------------------------------------------------------
# reflection coefficients


def kappa(p, eps):
    """``sqrt(p**2 - 1 + eps)``."""
    return np.sqrt(np.asarray(p, dtype=float) ** 2 - 1.0 + np.asarray(eps, dtype=float))


def fresnel_tm(p, eps_m, eps_mp):
    """TM coefficient ``(e_m k_m' - e_m' k_m)/(e_m k_m' + e_m' k_m)``.

    Infinite permittivities (perfect conductors) are taken as limits:
    ``fresnel_tm(p, 1, inf) == -1`` and ``fresnel_tm(p, inf, 1) == 1``.
    """
    p, em, emp = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (p, eps_m, eps_mp)))
    inf_m, inf_mp = np.isinf(em), np.isinf(emp)
    with np.errstate(invalid="ignore", divide="ignore"):
        km, kmp = kappa(p, em), kappa(p, emp)
        num = em * kmp - emp * km
        den = em * kmp + emp * km
        r = num / den
    r = np.where(inf_mp & ~inf_m, -1.0, r)
    r = np.where(inf_m & ~inf_mp, 1.0, r)
    r = np.where(inf_m & inf_mp, 0.0, r)
    return r if r.ndim else float(r)


def fresnel_te(p, eps_m, eps_mp):
    """TE coefficient ``(k_m' - k_m)/(k_m' + k_m)`` for non-magnetic media."""
    p, em, emp = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (p, eps_m, eps_mp)))
    inf_m, inf_mp = np.isinf(em), np.isinf(emp)
    with np.errstate(invalid="ignore"):
        km, kmp = kappa(p, em), kappa(p, emp)
        r = (kmp - km) / (kmp + km)
    r = np.where(inf_mp & ~inf_m, 1.0, r)
    r = np.where(inf_m & ~inf_mp, -1.0, r)
    r = np.where(inf_m & inf_mp, 0.0, r)
    return r if r.ndim else float(r)


def _static_tm(eps_m, eps_mp):
    """TM coefficient in the limit xi -> 0 at fixed q (p -> inf)."""
    em, emp = np.broadcast_arrays(np.asarray(eps_m, dtype=float), np.asarray(eps_mp, dtype=float))
    with np.errstate(invalid="ignore"):
        r = (em - emp) / (em + emp)
    r = np.where(np.isinf(emp) & ~np.isinf(em), -1.0, r)
    r = np.where(np.isinf(em) & ~np.isinf(emp), 1.0, r)
    return np.where(np.isinf(em) & np.isinf(emp), 0.0, r)


def layered_reflection(film_eps, substrate_eps, thickness, p, xi):
    """Gap-side (TM, TE) reflection of a film of ``thickness`` on a substrate.

    ``r = (r12 + r23 e) / (1 + r12 r23 e)`` with ``e = exp(-2 kappa_f d xi / c)``,
    ``r12`` the vacuum/film and ``r23`` the film/substrate coefficient.
    """
    if thickness < 0:
        raise ValueError("thickness must be non-negative")
    p = np.asarray(p, dtype=float)
    xi = np.asarray(xi, dtype=float)
    if math.isinf(thickness):
        return fresnel_tm(p, 1.0, film_eps), fresnel_te(p, 1.0, film_eps)
    e = np.exp(-2.0 * kappa(p, film_eps) * thickness * xi / C_LIGHT)
    out = []
    for fr in (fresnel_tm, fresnel_te):
        r12 = fr(p, 1.0, film_eps)
        r23 = fr(p, film_eps, substrate_eps)
        out.append((r12 + r23 * e) / (1.0 + r12 * r23 * e))
    return tuple(o if np.ndim(o) else float(o) for o in out)


# ---------------------------------------------------------------------------
# media


class Medium(Protocol):
    """Anything that yields gap-side reflection coefficients.

    ``reflection(xi, q)`` gets ``xi`` of shape ``(n,)`` (all > 0) and ``q`` of
    shape ``(n, m)``; ``static_reflection(q)`` gives the ``xi -> 0`` limit.
    """

    def reflection(self, xi: np.ndarray, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]: ...

    def static_reflection(self, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]: ...


class _BulkMedium:
    """Semi-infinite medium defined by its eps(i xi)."""

    name = "bulk"

    def eps(self, xi: np.ndarray) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError

    def static_eps(self) -> float:  # pragma: no cover - abstract
        raise NotImplementedError

    def reflection(self, xi, q):
        e = np.asarray(self.eps(xi), dtype=float)[:, None]
        p = q * C_LIGHT / xi[:, None]
        return fresnel_tm(p, 1.0, e), fresnel_te(p, 1.0, e)

    def static_reflection(self, q):
        e0 = self.static_eps()
        tm = np.full_like(q, float(_static_tm(1.0, e0)))
        return tm, np.zeros_like(q)


@dataclass(frozen=True)
class ModelMedium(_BulkMedium):
    model: DrudeLorentzModel
    causal: bool = True

    @property
    def name(self):
        return self.model.name or "model"

    def eps(self, xi):
        return eval_imag_axis(self.model, xi, causal=self.causal)

    def static_eps(self):
        return self.model.static_permittivity()


@dataclass(frozen=True)
class ConstantMedium(_BulkMedium):
    """Dispersionless eps(i xi) = value (``1`` is vacuum)."""

    value: float

    @property
    def name(self):
        return f"eps={self.value:g}"

    def eps(self, xi):
        return np.full(np.shape(xi), float(self.value))

    def static_eps(self):
        return float(self.value)


class TabulatedMedium(_BulkMedium):
    """eps(i xi) given on a grid, e.g. from a Kramers-Kronig transform.

    Interpolates ``ln(eps - 1)`` against ``ln xi`` (monotone cubic) and
    extrapolates linearly in that plane outside the grid. ``static`` is the
    value used at ``xi = 0`` (``inf`` for metals).
    """

    def __init__(self, xi, eps, static: float = math.inf, name: str = "tabulated"):
        xi = np.asarray(xi, dtype=float)
        eps = np.asarray(eps, dtype=float)
        if np.any(eps <= 1.0):
            raise ValueError("tabulated eps(i xi) must exceed 1")
        self._u = np.log(xi)
        self._v = np.log(eps - 1.0)
        self._interp = PchipInterpolator(self._u, self._v, extrapolate=False)
        self._static = float(static)
        self.name = name

    def eps(self, xi):
        u = np.log(np.asarray(xi, dtype=float))
        v = self._interp(u)
        lo, hi = u < self._u[0], u > self._u[-1]
        s_lo = (self._v[1] - self._v[0]) / (self._u[1] - self._u[0])
        s_hi = (self._v[-1] - self._v[-2]) / (self._u[-1] - self._u[-2])
        v = np.where(lo, self._v[0] + s_lo * (u - self._u[0]), v)
        v = np.where(hi, self._v[-1] + s_hi * (u - self._u[-1]), v)
        return 1.0 + np.exp(v)

    def static_eps(self):
        return self._static


class PerfectConductor:
    """eps -> inf at every frequency (TM and TE reflect completely)."""

    name = "perfect conductor"

    def reflection(self, xi, q):
        return -np.ones_like(q), np.ones_like(q)

    def static_reflection(self, q):
        return -np.ones_like(q), np.ones_like(q)


@dataclass(frozen=True)
class FilmMedium:
    """Film of given thickness on a semi-infinite substrate."""

    film: _BulkMedium
    substrate: _BulkMedium
    thickness: float

    @property
    def name(self):
        return f"{self.film.name}({self.thickness:.3g} m)/{self.substrate.name}"

    def reflection(self, xi, q):
        ef = np.asarray(self.film.eps(xi), dtype=float)[:, None]
        es = np.asarray(self.substrate.eps(xi), dtype=float)[:, None]
        p = q * C_LIGHT / xi[:, None]
        return layered_reflection(ef, es, self.thickness, p, xi[:, None])

    def static_reflection(self, q):
        ef, es = self.film.static_eps(), self.substrate.static_eps()
        e = np.exp(-2.0 * q * self.thickness)
        r12, r23 = float(_static_tm(1.0, ef)), float(_static_tm(ef, es))
        tm = (r12 + r23 * e) / (1.0 + r12 * r23 * e)
        return tm, np.zeros_like(q)


def as_medium(source) -> Medium:
    """Wrap a model, a number, ``"pec"`` or an existing medium."""
    if isinstance(source, DrudeLorentzModel):
        return ModelMedium(source)
    if isinstance(source, (int, float)):
        return PerfectConductor() if math.isinf(source) else ConstantMedium(float(source))
    if isinstance(source, str) and source.lower() in ("pec", "perfect", "perfect_conductor"):
        return PerfectConductor()
    if hasattr(source, "reflection") and hasattr(source, "static_reflection"):
        return source
    raise TypeError(f"cannot use {source!r} as a dielectric source")


@dataclass(frozen=True)
class MaterialAssignment:
    """Plate (medium 1) and sphere (medium 3) across a vacuum gap (medium 2)."""

    plate: object
    sphere: object

    def __post_init__(self):
        object.__setattr__(self, "plate", as_medium(self.plate))
        object.__setattr__(self, "sphere", as_medium(self.sphere))

    def validate(self, xi_max: float = 1e18) -> None:
        """Check eps(i xi) > 1 for model-based media (raises ModelValidationError)."""
        for med in (self.plate, self.sphere):
            for m in (med, getattr(med, "film", None), getattr(med, "substrate", None)):
                if isinstance(m, ModelMedium) and m.causal:
                    validate_imag_axis(m.model)


# ---------------------------------------------------------------------------
# configuration and Matsubara grid


@dataclass(frozen=True)
class LifshitzConfig:
    temperature: float = 296.0
    sphere_radius: float = 77.9e-6
    matsubara_tol: float = 1e-8
    quad_tol: float = 1e-7
    max_terms: int = 200_000
    zero_temperature: bool = False

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if not self.sphere_radius > 0:
            raise ValueError("sphere_radius must be positive")
        for name in ("matsubara_tol", "quad_tol"):
            v = getattr(self, name)
            if not 0 < v <= 1e-2:
                raise ValueError(f"{name} must lie in (0, 1e-2], got {v}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class MatsubaraGrid:
    temperature: float
    n_terms: int

    @property
    def spacing(self) -> float:
        return 2.0 * math.pi * K_B * self.temperature / hbar

    @property
    def xi(self) -> np.ndarray:
        return self.spacing * np.arange(self.n_terms + 1)

    @property
    def weights(self) -> np.ndarray:
        w = np.ones(self.n_terms + 1)
        w[0] = 0.5
        return w


def matsubara_frequency(n, temperature: float = 296.0):
    return 2.0 * math.pi * K_B * temperature * np.asarray(n) / hbar


# ---------------------------------------------------------------------------
# quadrature

# panels in t = 2 a (q - q0); dense near 0 where the n = 1 integrand of good
# conductors is steep, cut at t = 64 (t^2 e^-t < 1e-24)
_PANEL_EDGES = np.array([0.0, 0.02, 0.08, 0.25, 0.6, 1.2, 2.2, 3.6, 5.5, 8.0, 11.5, 16.0, 22.0, 30.0, 40.0, 52.0, 64.0])


@lru_cache(maxsize=16)
def _panel_rule(order: int, split: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(order)
    edges = _PANEL_EDGES
    if split > 1:
        edges = np.concatenate(
            [np.linspace(edges[i], edges[i + 1], split, endpoint=False) for i in range(edges.size - 1)] + [edges[-1:]]
        )
    lo, hi = edges[:-1, None], edges[1:, None]
    nodes = (0.5 * (hi - lo) * x + 0.5 * (hi + lo)).ravel()
    weights = (0.5 * (hi - lo) * w).ravel()
    return nodes, weights


def _xi_integrals(a: float, xi: np.ndarray, materials: MaterialAssignment, rule) -> np.ndarray:
    """int_{xi/c}^inf q^2 sum_pol r1 r3 e^{-2aq}/(1 - r1 r3 e^{-2aq}) dq for xi > 0."""
    t, w = rule
    q0 = xi / C_LIGHT
    q = q0[:, None] + t[None, :] / (2.0 * a)
    tm1, te1 = materials.plate.reflection(xi, q)
    tm3, te3 = materials.sphere.reflection(xi, q)
    e = np.exp(-2.0 * a * q)
    acc = np.zeros_like(q)
    for rr in (tm1 * tm3, te1 * te3):
        acc += rr * e / (1.0 - rr * e)
    return (q**2 * acc) @ w / (2.0 * a)


def _static_integral(a: float, materials: MaterialAssignment, rule) -> float:
    """The xi -> 0 term: int_0^inf q^2 sum_pol r r e^{-2aq}/(1 - r r e^{-2aq}) dq."""
    t, w = rule
    q = t / (2.0 * a)
    tm1, te1 = materials.plate.static_reflection(q)
    tm3, te3 = materials.sphere.static_reflection(q)
    e = np.exp(-t)
    acc = np.zeros_like(q)
    with np.errstate(invalid="ignore", divide="ignore"):
        for rr in (tm1 * tm3, te1 * te3):
            # t^2 cancels the 1/(1 - e^-t) singularity of perfect reflectors
            term = np.where(t > 0, t**2 * rr * e / (1.0 - rr * e), 0.0)
            acc += term
    return float(acc @ w) / (2.0 * a) ** 3


@dataclass
class GradientResult:
    a: float
    value: float
    rel_err: float
    n_terms: int
    static_term: float
    tail_estimate: float
    quad_order: int


def _check_a(a: float) -> None:
    if not (A_MIN * (1 - 1e-12) <= a <= A_MAX * (1 + 1e-12)):
        raise SeparationRangeError(f"separation {a:.4g} m outside the validated range [10 nm, 10 um]")


def _sum_matsubara(a, materials, config, rule):
    spacing = 2.0 * math.pi * K_B * config.temperature / hbar
    static = _static_integral(a, materials, rule)
    chunk = 64
    terms: list[np.ndarray] = []
    n_done = 0
    while True:
        if n_done >= config.max_terms:
            partial = 0.5 * static + float(np.sum(np.concatenate(terms)))
            last = np.concatenate(terms)[-10:]
            ratio = abs(last[-1] / last[-2]) if last[-2] != 0 else 0.0
            tail = abs(last[-1]) * ratio / (1 - ratio) if ratio < 1 else math.inf
            raise LifshitzConvergenceError(
                f"Matsubara sum not converged after {n_done} terms (tail estimate {tail:.3e})",
                partial_sum=partial, tail_estimate=tail, n_terms=n_done,
            )
        n = np.arange(n_done + 1, min(n_done + chunk, config.max_terms) + 1)
        terms.append(_xi_integrals(a, n * spacing, materials, rule))
        n_done = int(n[-1])
        allt = np.concatenate(terms)
        total = 0.5 * static + float(np.sum(allt))
        if allt.size >= 10:
            tail_block = float(np.sum(np.abs(allt[-10:])))
            if total == 0.0 and tail_block == 0.0:
                break
            if total != 0.0 and tail_block <= config.matsubara_tol * abs(total):
                break
    allt = np.concatenate(terms)
    return static, allt, tail_block


def _zero_temperature_integral(a, materials, rule):
    """hbar/(2 pi) int_0^inf dxi f(xi) with the same panel rule in x = 2 a xi / c."""
    t, w = rule
    xi = t * C_LIGHT / (2.0 * a)
    pos = xi > 0
    f = np.zeros_like(xi)
    f[pos] = _xi_integrals(a, xi[pos], materials, rule)
    return hbar / (2.0 * math.pi) * float(f @ w) * C_LIGHT / (2.0 * a)


def gradient_pfa(a: float, materials: MaterialAssignment, config: LifshitzConfig | None = None,
                 full_output: bool = False):
    """Casimir force gradient dF/da [N/m] between sphere and plate (positive = attractive).

    The q-integral is done on fixed Gauss-Legendre panels in
    ``t = 2 a (q - xi_n/c)``; the panel order is doubled until two successive
    results agree to ``config.quad_tol``. The Matsubara sum stops once the
    last ten terms contribute less than ``config.matsubara_tol`` of the total.
    """
    config = config or LifshitzConfig()
    _check_a(a)
    R = config.sphere_radius
    previous = None
    order = 8
    while True:
        rule = _panel_rule(order, 1)
        if config.zero_temperature:
            total = _zero_temperature_integral(a, materials, rule)
            static, n_terms, tail = 0.0, 0, 0.0
            value = 2.0 * R * total
        else:
            static, terms, tail_abs = _sum_matsubara(a, materials, config, rule)
            total = 0.5 * static + float(np.sum(terms))
            value = 2.0 * R * K_B * config.temperature * total
            n_terms = int(terms.size)
            tail = 2.0 * R * K_B * config.temperature * tail_abs
        if previous is not None:
            diff = abs(value - previous)
            if diff <= config.quad_tol * abs(value) or order >= 64:
                break
        previous = value
        order *= 2
    rel_err = max(diff, tail) / abs(value) if value else 0.0
    if not full_output:
        return value
    static_val = 2.0 * R * K_B * config.temperature * 0.5 * static if not config.zero_temperature else 0.0
    return GradientResult(a, value, rel_err, n_terms, static_val, tail, order)


def gradient_curve(a_grid: Sequence[float], materials: MaterialAssignment,
                   config: LifshitzConfig | None = None) -> list[GradientResult]:
    return [gradient_pfa(float(a), materials, config, full_output=True) for a in a_grid]


def ideal_gradient(a, R: float = 77.9e-6):
    """Zero-temperature perfect-conductor PFA gradient ``2 pi R pi^2 hbar c / (240 a^4)``."""
    return 2.0 * math.pi * R * math.pi**2 * hbar * C_LIGHT / (240.0 * np.asarray(a, dtype=float) ** 4)


def window_mean(a, values, window: tuple[float, float] = DEFAULT_WINDOW) -> float:
    """Mean of ``values`` over ``window``, trapezoid-weighted by the spacing of ``a``."""
    a = np.asarray(a, dtype=float)
    values = np.asarray(values, dtype=float)
    sel = (a >= window[0] * (1 - 1e-9)) & (a <= window[1] * (1 + 1e-9))
    if sel.sum() == 0:
        raise ValueError(f"no grid points inside window {window}")
    if sel.sum() == 1:
        return float(values[sel][0])
    aw, vw = a[sel], values[sel]
    order = np.argsort(aw)
    aw, vw = aw[order], vw[order]
    return float(trapezoid(vw, aw) / (aw[-1] - aw[0]))


@dataclass
class ReductionCurve:
    a: np.ndarray
    grad_A: np.ndarray
    grad_B: np.ndarray
    delta: np.ndarray
    window: tuple[float, float]
    window_mean: float
    rel_err_A: np.ndarray = field(default_factory=lambda: np.empty(0))
    rel_err_B: np.ndarray = field(default_factory=lambda: np.empty(0))


def reduction_curve(a_grid, materials_A: MaterialAssignment, materials_B: MaterialAssignment,
                    config: LifshitzConfig | None = None,
                    window: tuple[float, float] = DEFAULT_WINDOW) -> ReductionCurve:
    """Relative difference ``dF_B/dF_A - 1`` on ``a_grid`` and its window mean."""
    a = np.asarray(a_grid, dtype=float)
    ra = gradient_curve(a, materials_A, config)
    rb = gradient_curve(a, materials_B, config)
    gA = np.array([r.value for r in ra])
    gB = np.array([r.value for r in rb])
    delta = gB / gA - 1.0
    return ReductionCurve(
        a, gA, gB, delta, tuple(window), window_mean(a, delta, window),
        np.array([r.rel_err for r in ra]), np.array([r.rel_err for r in rb]),
    )


def write_gradient_csv(results: Sequence[GradientResult], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["a_m", "dFda_N_per_m", "rel_err"])
        for r in results:
            w.writerow([repr(float(r.a)), repr(float(r.value)), repr(float(r.rel_err))])


class GradientLaw:
    """Smooth-surface gradient tabulated on a log grid, spline-interpolated in log-log.

    Cheap to call, for Monte-Carlo kernels and the sweep simulator.
    """

    def __init__(self, materials: MaterialAssignment, config: LifshitzConfig | None = None,
                 a_min: float = 20e-9, a_max: float = 2e-6, n: int = 48, scale: float = 1.0):
        self.a = np.geomspace(a_min, a_max, n)
        self.values = scale * np.array([gradient_pfa(float(x), materials, config) for x in self.a])
        self._spline = CubicSpline(np.log(self.a), np.log(self.values))

    def __call__(self, a):
        a = np.asarray(a, dtype=float)
        if np.any(a < self.a[0] * (1 - 1e-12)) or np.any(a > self.a[-1] * (1 + 1e-12)):
            raise SeparationRangeError(f"separation outside tabulated range [{self.a[0]:.3g}, {self.a[-1]:.3g}] m")
        out = np.exp(self._spline(np.log(a)))
        return float(out) if out.ndim == 0 else out

    def scaled(self, factor: float) -> "GradientLaw":
        new = object.__new__(GradientLaw)
        new.a = self.a
        new.values = self.values * factor
        new._spline = CubicSpline(np.log(new.a), np.log(new.values))
        return new
