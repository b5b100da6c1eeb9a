"""Roughness and patch-potential corrections from topography and potential maps.

Both corrections use the proximity force approximation with the sphere
placed over a randomly shifted, periodically tiled plate map. The roughness
factor compares the local-gap integral of the parallel-plate pressure
gradient with the smooth-sphere value; the patch gradient is the second
separation derivative of the local-capacitor electrostatic energy.
"""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.constants import epsilon_0
from scipy.interpolate import CubicSpline
from scipy.ndimage import map_coordinates
from scipy.optimize import least_squares

from .lifshitz import window_mean

logger = logging.getLogger(__name__)

ONE_SIGMA = (15.865, 84.135)
MIN_GAP = 30e-9


class SurfaceError(Exception):
    pass


class SphereFitError(SurfaceError):
    pass


class SamplingExhaustedError(SurfaceError):
    """Too few acceptable Monte-Carlo shifts; the partial result is attached."""

    def __init__(self, message: str, partial: "CorrectionResult | None"):
        super().__init__(message)
        self.partial = partial


class GeometryError(SurfaceError):
    pass


class AlignmentError(SurfaceError):
    pass


class DataQualityWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# maps


@dataclass(frozen=True)
class HeightMap:
    """Topography [m] on a square-pixel grid; row index is y, column index x."""

    grid: np.ndarray
    pitch: float
    role: str = "plate"
    mask: np.ndarray | None = None

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=float)
        if g.ndim != 2 or g.size == 0:
            raise ValueError("grid must be a non-empty 2-D array")
        if not np.all(np.isfinite(g)):
            raise ValueError("heights must be finite")
        if not self.pitch > 0:
            raise ValueError("pitch must be positive")
        if self.role not in ("sphere", "plate"):
            raise ValueError("role must be 'sphere' or 'plate'")
        object.__setattr__(self, "grid", g)
        if self.mask is not None:
            m = np.asarray(self.mask, dtype=bool)
            if m.shape != g.shape:
                raise ValueError("mask shape differs from grid")
            object.__setattr__(self, "mask", m)

    @property
    def shape(self):
        return self.grid.shape

    @property
    def side_length(self) -> tuple[float, float]:
        ny, nx = self.grid.shape
        return nx * self.pitch, ny * self.pitch

    def values(self) -> np.ndarray:
        """Unmasked pixel values."""
        return self.grid if self.mask is None else self.grid[~self.mask]

    def sampling_grid(self, remove_mean: bool = True) -> np.ndarray:
        """Heights used for sampling; masked pixels are set to the mean plane."""
        ref = self.values().mean()
        g = self.grid - ref if remove_mean else self.grid.copy()
        if self.mask is not None:
            g = np.where(self.mask, 0.0 if remove_mean else ref, g)
        return g


@dataclass(frozen=True)
class PotentialMap:
    """Surface potential [V] on a square-pixel grid."""

    grid: np.ndarray
    pitch: float

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=float)
        if g.ndim != 2 or g.size == 0:
            raise ValueError("grid must be a non-empty 2-D array")
        if not np.all(np.isfinite(g)):
            raise ValueError("potentials must be finite")
        if not self.pitch > 0:
            raise ValueError("pitch must be positive")
        object.__setattr__(self, "grid", g)

    @property
    def shape(self):
        return self.grid.shape

    @property
    def side_length(self) -> tuple[float, float]:
        ny, nx = self.grid.shape
        return nx * self.pitch, ny * self.pitch

    def values(self) -> np.ndarray:
        return self.grid


def surface_stats(m: HeightMap | PotentialMap) -> dict:
    """rms about the mean, peak-to-peak and mean of the unmasked values."""
    v = m.values()
    if v.size == 0:
        raise ValueError("empty map")
    mean = float(v.mean())
    return {"rms": float(np.sqrt(np.mean((v - mean) ** 2))), "peak_peak": float(v.max() - v.min()), "mean": mean}


def write_map(m: HeightMap | PotentialMap, path: str | Path) -> None:
    """Plain-text grid with a one-line JSON header (``.npz`` for binary)."""
    path = Path(path)
    ny, nx = m.shape
    header = {"nx": nx, "ny": ny, "pitch_m": m.pitch, "unit": "V" if isinstance(m, PotentialMap) else "m"}
    if isinstance(m, HeightMap):
        header["role"] = m.role
    if path.suffix == ".npz":
        np.savez(path, grid=m.grid, header=json.dumps(header, sort_keys=True))
        return
    with open(path, "w") as fh:
        fh.write("# " + json.dumps(header, sort_keys=True) + "\n")
        np.savetxt(fh, m.grid, fmt="%.10e")


def read_map(path: str | Path) -> HeightMap | PotentialMap:
    path = Path(path)
    if path.suffix == ".npz":
        with np.load(path) as z:
            header = json.loads(str(z["header"]))
            grid = z["grid"]
    else:
        with open(path) as fh:
            first = fh.readline()
            if not first.startswith("#"):
                raise ValueError(f"{path}: line 1: missing map header")
            try:
                header = json.loads(first[1:])
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: line 1: bad header: {exc}") from None
            grid = np.loadtxt(fh, ndmin=2)
    if grid.shape != (header["ny"], header["nx"]):
        raise ValueError(f"{path}: grid shape {grid.shape} differs from header ({header['ny']}, {header['nx']})")
    if header["unit"] == "V":
        return PotentialMap(grid, header["pitch_m"])
    if header["unit"] == "nm":
        grid = grid * 1e-9
    return HeightMap(grid, header["pitch_m"], header.get("role", "plate"))


# ---------------------------------------------------------------------------
# synthetic maps


def gaussian_random_field(shape, pitch: float, rms: float, corr_length: float, rng: np.random.Generator) -> np.ndarray:
    """Periodic Gaussian field with correlation ``exp(-r^2/corr_length^2)``, rescaled to ``rms``."""
    ny, nx = shape
    white = rng.standard_normal((ny, nx))
    kx = 2 * np.pi * np.fft.fftfreq(nx, d=pitch)
    ky = 2 * np.pi * np.fft.fftfreq(ny, d=pitch)
    k2 = ky[:, None] ** 2 + kx[None, :] ** 2
    amp = np.exp(-k2 * corr_length**2 / 8.0)  # sqrt of the Gaussian spectrum
    f = np.real(np.fft.ifft2(np.fft.fft2(white) * amp))
    f -= f.mean()
    s = f.std()
    return f * (rms / s) if s > 0 else f


@dataclass(frozen=True)
class ClusterSpec:
    """Flat-topped clusters planted on a synthetic map (heights above the mean plane)."""

    count: int = 0
    height_range: tuple[float, float] = (40e-9, 100e-9)
    radius: float = 150e-9
    sign: int = 1  # -1 plants holes


def synthetic_height_map(n: int = 256, pitch: float = 40e-9, rms: float = 3.2e-9, corr_length: float = 150e-9,
                         seed: int = 0, role: str = "plate", clusters: ClusterSpec = ClusterSpec()
                         ) -> tuple[HeightMap, np.ndarray]:
    """Gaussian roughness plus planted clusters. Returns the map and the planted-pixel mask."""
    rng = np.random.default_rng(np.random.Philox(key=seed))
    g = gaussian_random_field((n, n), pitch, rms, corr_length, rng)
    planted = np.zeros((n, n), dtype=bool)
    yy, xx = np.mgrid[0:n, 0:n]
    for _ in range(clusters.count):
        cx, cy = rng.uniform(0, n, 2)
        h = rng.uniform(*clusters.height_range)
        # periodic distance
        dx = np.minimum(np.abs(xx - cx), n - np.abs(xx - cx))
        dy = np.minimum(np.abs(yy - cy), n - np.abs(yy - cy))
        disk = (dx**2 + dy**2) * pitch**2 <= clusters.radius**2
        g = np.where(disk, clusters.sign * h, g)
        planted |= disk
    return HeightMap(g, pitch, role), planted


def synthetic_potential_map(n: int = 128, pitch: float = 80e-9, rms: float = 2.4e-3, corr_length: float = 300e-9,
                            mean: float = 0.0, seed: int = 0) -> PotentialMap:
    rng = np.random.default_rng(np.random.Philox(key=seed))
    return PotentialMap(mean + gaussian_random_field((n, n), pitch, rms, corr_length, rng), pitch)


def spherical_cap(n: int, pitch: float, R: float, center=(0.0, 0.0), apex: float = 0.0) -> HeightMap:
    """Height of a sphere of radius ``R`` seen from above, apex at ``center``."""
    c = (np.arange(n) - (n - 1) / 2) * pitch
    X, Y = np.meshgrid(c, c)
    r2 = (X - center[0]) ** 2 + (Y - center[1]) ** 2
    return HeightMap(apex - (R - np.sqrt(R**2 - r2)), pitch, "sphere")


# ---------------------------------------------------------------------------
# sphere fit and peak removal


@dataclass
class SphereFit:
    radius: float
    center: tuple[float, float, float]  # x0, y0 [m] relative to the map centre; apex height z0 [m]
    residual: HeightMap
    degenerate: bool
    orientation: int  # +1 dome up, -1 bowl


def fit_sphere(m: HeightMap) -> SphereFit:
    """Least-squares spherical cap ``z = z0 + s (sqrt(R^2 - r^2) - R)``.

    A paraboloid fit gives the starting point; the geometric fit runs in
    micrometre units. A map without measurable curvature is reported as
    ``degenerate`` with ``R = inf``.
    """
    ny, nx = m.shape
    xs = (np.arange(nx) - (nx - 1) / 2) * m.pitch
    ys = (np.arange(ny) - (ny - 1) / 2) * m.pitch
    X, Y = np.meshgrid(xs, ys)
    sel = np.ones(m.shape, bool) if m.mask is None else ~m.mask
    x, y, z = X[sel] * 1e6, Y[sel] * 1e6, m.grid[sel] * 1e6  # micrometres
    A = np.column_stack([np.ones_like(x), x, y, x**2 + y**2])
    coef, *_ = np.linalg.lstsq(A, z, rcond=None)
    c0, c1, c2, c3 = coef
    half = 0.5 * max(np.ptp(x), np.ptp(y))
    noise = np.std(z - A @ coef) + 1e-12 * (np.ptp(z) + 1)
    if abs(c3) * half**2 < 1e-3 * noise or c3 == 0:
        resid = HeightMap(m.grid - m.values().mean(), m.pitch, m.role, m.mask)
        return SphereFit(math.inf, (0.0, 0.0, float(np.mean(z) * 1e-6)), resid, True, 0)
    s = 1.0 if c3 > 0 else -1.0  # -1: dome, height falls away from the apex
    R0 = 1.0 / (2 * abs(c3))
    x0, y0 = -c1 / (2 * c3), -c2 / (2 * c3)
    z0 = c0 - c3 * (x0**2 + y0**2)

    def model(p, xx, yy):
        R, a, b, zz = p
        r2 = (xx - a) ** 2 + (yy - b) ** 2
        return zz + s * r2 / (R + np.sqrt(np.maximum(R**2 - r2, 0.0)))

    res = least_squares(lambda p: model(p, x, y) - z, [R0, x0, y0, z0], x_scale=[R0, 1.0, 1.0, 1e-3],
                        xtol=1e-15, ftol=1e-15, gtol=1e-15)
    if not res.success or not res.x[0] > half:
        raise SphereFitError(f"sphere fit failed: {res.message}")
    R, a, b, zz = res.x
    full = model(res.x, X * 1e6, Y * 1e6) * 1e-6
    residual = HeightMap(m.grid - full, m.pitch, m.role, m.mask)
    return SphereFit(float(R * 1e-6), (float(a * 1e-6), float(b * 1e-6), float(zz * 1e-6)), residual, False, int(-s))


def preprocess_peaks(m: HeightMap, cutoff: float = 30e-9, max_fraction: float = 0.2) -> HeightMap:
    """Mask pixels more than ``cutoff`` above the median plane."""
    if not cutoff > 0:
        raise ValueError("cutoff must be positive")
    ref = np.median(m.values())
    new = m.grid - ref > cutoff
    mask = new if m.mask is None else (m.mask | new)
    frac = float(mask.mean())
    if frac > max_fraction:
        warnings.warn(f"{100 * frac:.1f}% of pixels masked (> {100 * max_fraction:.0f}%)", DataQualityWarning, stacklevel=2)
    return replace(m, mask=mask)


# ---------------------------------------------------------------------------
# Monte-Carlo machinery


@dataclass
class CorrectionResult:
    a_grid: np.ndarray
    eta: np.ndarray
    band_lo: np.ndarray
    band_hi: np.ndarray
    n_accepted: int
    n_attempts: int = 0
    log: list = field(default_factory=list)
    samples: np.ndarray | None = None
    gradient: np.ndarray | None = None      # additive patch gradient [N/m]
    gradient_lo: np.ndarray | None = None
    gradient_hi: np.ndarray | None = None
    flags: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = {"a_m": self.a_grid.tolist(), "eta": self.eta.tolist(), "band_lo": self.band_lo.tolist(),
             "band_hi": self.band_hi.tolist(), "n_accepted": self.n_accepted, "n_attempts": self.n_attempts,
             "log": self.log, "flags": self.flags}
        if self.gradient is not None:
            d.update(gradient=self.gradient.tolist(), gradient_lo=self.gradient_lo.tolist(),
                     gradient_hi=self.gradient_hi.tolist())
        return d


def _shift_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed).jumped(index))


def _bands(samples: np.ndarray):
    mean = samples.mean(axis=0)
    lo, hi = np.percentile(samples, ONE_SIGMA, axis=0)
    return mean, np.minimum(lo, mean), np.maximum(hi, mean)


def polar_nodes(a: float, R: float, radius_factor: float = 3.0, n_r: int = 64, n_phi: int = 192):
    """Polar quadrature around the closest-approach point.

    Radial Gauss-Legendre nodes in ``v = ln(1 + r^2/(2 a R))`` up to
    ``r_max = radius_factor sqrt(2 a R)``, uniform in angle. Returns x, y
    [m] and area weights (sum = pi r_max^2).
    """
    vmax = math.log1p(radius_factor**2)
    t, w = np.polynomial.legendre.leggauss(n_r)
    v = 0.5 * vmax * (t + 1)
    wv = 0.5 * vmax * w
    r = np.sqrt(2 * a * R * np.expm1(v))
    # dA = r dr dphi = a R e^v dv dphi
    wr = a * R * np.exp(v) * wv
    phi = (np.arange(n_phi) + 0.5) * 2 * math.pi / n_phi
    x = (r[:, None] * np.cos(phi)[None, :]).ravel()
    y = (r[:, None] * np.sin(phi)[None, :]).ravel()
    wa = np.repeat(wr * (2 * math.pi / n_phi), n_phi)
    return x, y, wa


def _sample(grid: np.ndarray, pitch: float, x, y, periodic: bool, center=None):
    """Bilinear interpolation at physical coordinates (origin at ``center`` pixel)."""
    ny, nx = grid.shape
    cy, cx = center if center is not None else ((ny - 1) / 2, (nx - 1) / 2)
    coords = np.vstack([np.asarray(y) / pitch + cy, np.asarray(x) / pitch + cx])
    if periodic:
        return map_coordinates(grid, coords, order=1, mode="grid-wrap")
    return map_coordinates(grid, coords, order=1, mode="constant", cval=0.0)


def sphere_profile(r2, R):
    """``R - sqrt(R^2 - r^2)`` without cancellation."""
    return r2 / (R + np.sqrt(R**2 - r2))


class PressureKernel:
    """Local parallel-plate pressure gradient from a sphere-plate gradient law.

    In the proximity force approximation ``G(a) = 2 pi R P(a)``, so the local
    kernel is ``-dP/dh = -G'(h)/(2 pi R)``. ``G`` is tabulated on a log grid
    and differentiated through a cubic spline in ``ln h``.
    """

    def __init__(self, gradient_fn: Callable[[float], float], h_min: float, h_max: float, R: float, n: int = 48):
        self.h = np.geomspace(h_min, h_max, n)
        g = np.array([gradient_fn(float(h)) for h in self.h])
        if np.any(g <= 0):
            raise ValueError("gradient_fn must be positive on the tabulated range")
        self.R = R
        self._spline = CubicSpline(np.log(self.h), np.log(g))
        self._d = self._spline.derivative()

    def __call__(self, h):
        u = np.log(h)
        if np.any(u < math.log(self.h[0]) - 1e-9) or np.any(u > math.log(self.h[-1]) + 1e-9):
            raise GeometryError(f"local gap outside tabulated range [{self.h[0]:.3g}, {self.h[-1]:.3g}] m")
        g = np.exp(self._spline(u))
        return -g * self._d(u) / h / (2 * math.pi * self.R)


def roughness_eta(a_grid: Sequence[float], sphere_map: HeightMap, plate_map: HeightMap, R: float,
                  gradient_fn: Callable[[float], float], n_mc: int = 100, seed: int = 0,
                  max_attempts: int | None = None, min_gap: float = MIN_GAP,
                  radius_factor: float = 3.0, n_r: int = 64, n_phi: int = 192,
                  kernel: PressureKernel | None = None, remove_mean: bool = True) -> CorrectionResult:
    """Monte-Carlo roughness factor over random lateral plate shifts.

    For each shift the local gap is ``a + R - sqrt(R^2 - r^2) - r_s - r_p``
    with ``r_s`` the (flattened) sphere map sampled about its centre and
    ``r_p`` the periodically tiled plate map. ``eta`` is the ratio of the
    area integral of the local pressure gradient to the same integral for
    smooth surfaces, evaluated with identical nodes (so flat maps give 1
    exactly). Map means are removed unless ``remove_mean`` is False. Shifts whose smallest gap at the smallest ``a`` falls below
    ``min_gap`` are rejected and logged.
    """
    a = np.asarray(a_grid, dtype=float)
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    max_attempts = max_attempts or 20 * n_mc
    s_grid = sphere_map.sampling_grid(remove_mean)
    p_grid = plate_map.sampling_grid(remove_mean)
    Lx, Ly = plate_map.side_length
    nodes = [polar_nodes(ai, R, radius_factor, n_r, n_phi) for ai in a]
    smooth = []
    for ai, (x, y, w) in zip(a, nodes):
        smooth.append(ai + sphere_profile(x**2 + y**2, R))
    rough_s = [_sample(s_grid, sphere_map.pitch, x, y, periodic=False) for x, y, _ in nodes]
    if kernel is None:
        lo = max(min(min_gap, a.min()) * 0.5, 5e-9)
        hi = max(float(h.max()) for h in smooth) + 10 * (np.abs(s_grid).max() + np.abs(p_grid).max()) + 1e-9
        kernel = PressureKernel(gradient_fn, lo, hi, R)
    denom = np.array([float(np.sum(w * kernel(h))) for (x, y, w), h in zip(nodes, smooth)])
    i_min = int(np.argmin(a))

    samples, log = [], []
    attempt = 0
    while len(samples) < n_mc and attempt < max_attempts:
        rng = _shift_rng(seed, attempt)
        xo, yo = rng.uniform(0, Lx), rng.uniform(0, Ly)
        rp = [_sample(p_grid, plate_map.pitch, x + xo, y + yo, periodic=True, center=(0, 0)) for x, y, _ in nodes]
        gap_min = float(np.min(smooth[i_min] - rough_s[i_min] - rp[i_min]))
        ok = gap_min >= min_gap
        log.append({"shift": attempt, "x_m": xo, "y_m": yo, "min_gap_m": gap_min, "accepted": bool(ok)})
        attempt += 1
        if not ok:
            continue
        eta = np.array([float(np.sum(w * kernel(h - (s + p)))) for (x, y, w), h, s, p in zip(nodes, smooth, rough_s, rp)])
        samples.append(eta / denom)
    if not samples:
        raise SamplingExhaustedError(f"no acceptable shifts in {attempt} attempts", None)
    S = np.array(samples)
    mean, blo, bhi = _bands(S)
    result = CorrectionResult(a, mean, blo, bhi, len(samples), attempt, log, S)
    if len(samples) < n_mc:
        raise SamplingExhaustedError(f"only {len(samples)} of {n_mc} shifts accepted in {attempt} attempts", result)
    return result


def patch_energy(a: float, dV: np.ndarray, x, y, w, R: float, V0: float):
    """PFA local-capacitor energy ``sum eps0 (dV - V0)^2 / (2 h) dA``."""
    h = a + sphere_profile(x**2 + y**2, R)
    return float(np.sum(w * epsilon_0 * (dV - V0) ** 2 / (2 * h)))


def force_minimizing_bias(a: float, dV, x, y, w, R: float) -> float:
    """Bias minimizing the PFA force ``sum eps0 (dV - V0)^2/(2 h^2) dA``."""
    h = a + sphere_profile(x**2 + y**2, R)
    wt = w / h**2
    return float(np.sum(wt * dV) / np.sum(wt))


def _mad_outlier(values: np.ndarray, k: float = 5.0) -> bool:
    if values.size < 3:
        return False
    med = np.median(values)
    mad = np.median(np.abs(values - med))
    floor = 1e-9 * (np.median(np.abs(values)) + 1e-300)
    return bool(np.any(np.abs(values - med) > k * 1.4826 * max(mad, floor)))


def patch_gradient(a_grid: Sequence[float], sphere_pot: PotentialMap, plate_pot: PotentialMap, R: float,
                   n_mc: int = 100, seed: int = 0, smooth_gradient: Callable[[float], float] | None = None,
                   V0: float | None = None, radius_factor: float = 10.0, n_r: int = 64, n_phi: int = 192,
                   max_attempts: int | None = None, rel_step: float = 1e-3) -> CorrectionResult:
    """Monte-Carlo patch-potential force gradient (positive = attractive).

    Both potential maps are tiled periodically; for each random placement
    the potential difference ``V_s - V_p`` is sampled on polar nodes, the
    bias ``V0`` is set to the force-minimizing value (unless given) and the
    gradient is the central second difference of the local-capacitor energy
    with step ``rel_step * a``. Placements whose energy curve over
    ``a_grid`` shows outliers (MAD x 5 on second differences of
    ``ln E``) are rejected. ``eta = 1 + gradient / smooth_gradient(a)``
    when ``smooth_gradient`` is given.
    """
    a = np.asarray(a_grid, dtype=float)
    for pm in (sphere_pot, plate_pot):
        if min(pm.side_length) < math.sqrt(2 * a.max() * R):
            raise GeometryError("potential map smaller than the interaction spot sqrt(2 a R)")
    max_attempts = max_attempts or 10 * n_mc
    order = np.argsort(a)
    nodes = [polar_nodes(ai, R, radius_factor, n_r, n_phi) for ai in a]
    Ls, Lp = sphere_pot.side_length, plate_pot.side_length
    grads, energies, log = [], [], []
    attempt = 0
    while len(grads) < n_mc and attempt < max_attempts:
        rng = _shift_rng(seed, attempt)
        so = rng.uniform(0, 1, 2) * Ls
        po = rng.uniform(0, 1, 2) * Lp
        g = np.empty(a.size)
        e = np.empty(a.size)
        v0_used = np.empty(a.size)
        for i, (ai, (x, y, w)) in enumerate(zip(a, nodes)):
            vs = _sample(sphere_pot.grid, sphere_pot.pitch, x + so[0], y + so[1], periodic=True, center=(0, 0))
            vp = _sample(plate_pot.grid, plate_pot.pitch, x + po[0], y + po[1], periodic=True, center=(0, 0))
            dV = vs - vp
            v0 = force_minimizing_bias(ai, dV, x, y, w, R) if V0 is None else V0
            d = rel_step * ai
            em, e0, ep = (patch_energy(ai + s, dV, x, y, w, R, v0) for s in (-d, 0.0, d))
            g[i] = (ep - 2 * e0 + em) / d**2
            e[i] = e0
            v0_used[i] = v0
        ok = True
        if a.size >= 5 and np.all(e > 0):
            le = np.log(e[order])
            ok = not _mad_outlier(np.diff(le, 2))
        log.append({"shift": attempt, "sphere_offset_m": so.tolist(), "plate_offset_m": po.tolist(),
                    "V0": v0_used.tolist(), "accepted": ok})
        attempt += 1
        if ok:
            grads.append(g)
            energies.append(e)
    if not grads:
        raise SamplingExhaustedError(f"no acceptable placements in {attempt} attempts", None)
    Gs = np.array(grads)
    gmean, glo, ghi = _bands(Gs)
    if smooth_gradient is not None:
        gs = np.array([smooth_gradient(float(ai)) for ai in a])
        etas = 1.0 + Gs / gs
    else:
        etas = np.ones_like(Gs)
    mean, blo, bhi = _bands(etas)
    flags = ["outlier_rule:MADx5_on_energy_increments"]
    result = CorrectionResult(a, mean, blo, bhi, len(grads), attempt, log, etas, gmean, glo, ghi, flags)
    if len(grads) < n_mc:
        raise SamplingExhaustedError(f"only {len(grads)} of {n_mc} placements accepted", result)
    return result


# ---------------------------------------------------------------------------
# combination


@dataclass
class CombinedReduction:
    a_grid: np.ndarray
    delta: np.ndarray
    delta_lo: np.ndarray
    delta_hi: np.ndarray
    window: tuple[float, float] | None = None
    window_mean: float | None = None
    window_lo: float | None = None
    window_hi: float | None = None

    def to_dict(self) -> dict:
        return {"a_m": self.a_grid.tolist(), "delta": self.delta.tolist(), "delta_lo": self.delta_lo.tolist(),
                "delta_hi": self.delta_hi.tolist(), "window": list(self.window) if self.window else None,
                "window_mean": self.window_mean, "window_lo": self.window_lo, "window_hi": self.window_hi}


def _as_eta(x, n):
    if x is None:
        one = np.ones(n)
        return one, one, one, None
    if isinstance(x, CorrectionResult):
        return x.eta, x.band_lo, x.band_hi, x.a_grid
    arr = np.broadcast_to(np.asarray(x, dtype=float), (n,))
    return arr, arr, arr, None


def combine_corrections(grad_A, grad_B, eta_rough_A=None, eta_rough_B=None, eta_patch_A=None, eta_patch_B=None,
                        a_grid=None, window: tuple[float, float] | None = (80e-9, 120e-9)) -> CombinedReduction:
    """``Delta = (G_B/G_A) (eta_rough_B/eta_rough_A) (eta_patch_B/eta_patch_A) - 1``.

    Band edges combine the asymmetric Monte-Carlo half-widths of every
    factor in quadrature (relative), upper edges of numerator factors with
    lower edges of denominator factors and vice versa.
    """
    gA = np.asarray(grad_A, dtype=float)
    gB = np.asarray(grad_B, dtype=float)
    n = gA.size
    if gB.size != n:
        raise AlignmentError("gradient arrays differ in length")
    parts = [_as_eta(x, n) for x in (eta_rough_A, eta_rough_B, eta_patch_A, eta_patch_B)]
    grids = [p[3] for p in parts if p[3] is not None]
    if a_grid is None and grids:
        a_grid = grids[0]
    a_grid = np.arange(n, dtype=float) if a_grid is None else np.asarray(a_grid, dtype=float)
    for g in grids:
        if g.shape != a_grid.shape or not np.allclose(g, a_grid, rtol=1e-12, atol=0):
            raise AlignmentError("correction results are on different a-grids")
    (rA, rAl, rAh, _), (rB, rBl, rBh, _), (pA, pAl, pAh, _), (pB, pBl, pBh, _) = parts
    ratio = (gB / gA) * (rB / rA) * (pB / pA)
    delta = ratio - 1.0
    up = np.sqrt(((rBh - rB) / rB) ** 2 + ((rA - rAl) / rA) ** 2 + ((pBh - pB) / pB) ** 2 + ((pA - pAl) / pA) ** 2)
    dn = np.sqrt(((rB - rBl) / rB) ** 2 + ((rAh - rA) / rA) ** 2 + ((pB - pBl) / pB) ** 2 + ((pAh - pA) / pA) ** 2)
    res = CombinedReduction(a_grid, delta, delta - ratio * dn, delta + ratio * up)
    if window is not None:
        res.window = tuple(window)
        res.window_mean = window_mean(a_grid, delta, window)
        res.window_lo = window_mean(a_grid, res.delta_lo, window)
        res.window_hi = window_mean(a_grid, res.delta_hi, window)
    return res
