"""Analytic dynamic phantoms built from pulsating ellipses.

Coordinates are in field-of-view units with the origin at the FOV center.
Pixel ``i`` along an axis of length ``N`` sits at ``(i - N/2) * fov / N``,
the first array axis is x and the second is y.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import j1


@dataclass(frozen=True)
class Ellipse:
    cx: float
    cy: float
    a: float
    b: float
    tilt: float = 0.0
    intensity: float = 1.0

    def __post_init__(self):
        if self.a <= 0 or self.b <= 0:
            raise ValueError(f"semi-axes must be positive, got a={self.a}, b={self.b}")


@dataclass(frozen=True)
class DynamicEllipse:
    ellipse: Ellipse
    amplitude: float = 0.0
    phase: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.amplitude < 1.0:
            raise ValueError(f"pulsation amplitude must lie in [0, 1), got {self.amplitude}")


@dataclass(frozen=True)
class PhantomSpec:
    background: tuple[Ellipse, ...] = ()
    dynamic: tuple[DynamicEllipse, ...] = ()
    fov: float = 1.0
    n_phases: int = 30

    def __post_init__(self):
        object.__setattr__(self, "background", tuple(self.background))
        object.__setattr__(self, "dynamic", tuple(self.dynamic))
        if self.n_phases < 1:
            raise ValueError("n_phases must be >= 1")
        if self.fov <= 0:
            raise ValueError("fov must be positive")
        half = self.fov / 2
        for e in self.background + tuple(d.ellipse for d in self.dynamic):
            if abs(e.cx) + e.a > half + 1e-12 or abs(e.cy) + e.b > half + 1e-12:
                raise ValueError(f"ellipse {e} leaves the field of view")

    def ellipses_at(self, t: float) -> list[Ellipse]:
        """Ellipses at (possibly fractional or out-of-range) phase ``t``."""
        out = list(self.background)
        for d in self.dynamic:
            s = pulsation(d, t, self.n_phases)
            if s <= 0:
                raise ValueError("pulsation drives a semi-axis to a non-positive value")
            out.append(replace(d.ellipse, a=d.ellipse.a * s, b=d.ellipse.b * s))
        return out


def pulsation(d: DynamicEllipse, t: float, n_phases: int) -> float:
    """Semi-axis scale factor ``1 + alpha * sin(2 pi t / Nt + phase)``."""
    return 1.0 + d.amplitude * math.sin(2 * math.pi * t / n_phases + d.phase)


def _check_phase(spec: PhantomSpec, t: int):
    if not 0 <= t < spec.n_phases:
        raise ValueError(f"phase index {t} outside [0, {spec.n_phases})")


def pixel_coordinates(n: int, fov: float) -> np.ndarray:
    return (np.arange(n) - n / 2) * (fov / n)


def render_frame(spec: PhantomSpec, t: int, grid: tuple[int, int], rotation: float = 0.0) -> np.ndarray:
    """Sample the phantom at pixel centers for cardiac phase ``t``.

    The whole scene is rotated counter-clockwise by ``rotation`` about the
    FOV center.
    """
    _check_phase(spec, t)
    nx, ny = grid
    if nx < 8 or ny < 8:
        raise ValueError("grid must be at least 8 x 8")
    x = pixel_coordinates(nx, spec.fov)[:, None]
    y = pixel_coordinates(ny, spec.fov)[None, :]
    # pull pixel centers back into the unrotated scene
    c, s = math.cos(rotation), math.sin(rotation)
    xs = c * x + s * y
    ys = -s * x + c * y
    img = np.zeros((nx, ny))
    for e in spec.ellipses_at(t):
        ct, st = math.cos(e.tilt), math.sin(e.tilt)
        dx, dy = xs - e.cx, ys - e.cy
        u = ct * dx + st * dy
        v = -st * dx + ct * dy
        img += e.intensity * ((u / e.a) ** 2 + (v / e.b) ** 2 <= 1.0)
    return img


def render_sequence(spec: PhantomSpec, grid: tuple[int, int], rotation: float = 0.0) -> np.ndarray:
    return np.stack([render_frame(spec, t, grid, rotation) for t in range(spec.n_phases)], axis=-1)


def _jinc(q: np.ndarray) -> np.ndarray:
    out = np.full(q.shape, math.pi)
    nz = q > 0
    out[nz] = j1(2 * math.pi * q[nz]) / q[nz]
    return out


def analytic_kspace(spec: PhantomSpec, t: int, rotation: float, points) -> np.ndarray:
    """Exact continuous Fourier transform ``F(k) = int x(r) exp(-i 2 pi k.r) dr``.

    ``points`` is an array of shape (..., 2) in cycles per FOV unit.
    """
    _check_phase(spec, t)
    k = np.asarray(points, dtype=float)
    kx, ky = k[..., 0], k[..., 1]
    out = np.zeros(kx.shape, dtype=complex)
    cr, sr = math.cos(rotation), math.sin(rotation)
    for e in spec.ellipses_at(t):
        ang = e.tilt + rotation
        ca, sa = math.cos(ang), math.sin(ang)
        kpx = ca * kx + sa * ky
        kpy = -sa * kx + ca * ky
        q = np.hypot(e.a * kpx, e.b * kpy)
        # rotated center
        cx = cr * e.cx - sr * e.cy
        cy = sr * e.cx + cr * e.cy
        out += e.intensity * e.a * e.b * _jinc(q) * np.exp(-2j * math.pi * (kx * cx + ky * cy))
    return out


def random_cardiac_phantom(seed: int, n_phases: int = 30, fov: float = 1.0) -> PhantomSpec:
    """Draw a torso-like phantom with a pulsating two-chamber heart.

    Layout: body ellipse, two lungs, static spine and liver, a myocardium
    ring made of a dark-subtracting blood pool inside a muscle ellipse, and a
    small bright right ventricle. Heart structures pulsate in phase.
    """
    rng = np.random.default_rng(seed)
    u = lambda lo, hi: float(rng.uniform(lo, hi))
    h = fov / 2
    body = Ellipse(0.0, 0.0, u(0.40, 0.44) * fov, u(0.32, 0.38) * fov, u(-0.1, 0.1), u(0.25, 0.35))
    lung_i = -u(0.18, 0.24)
    lungs = [
        Ellipse(-0.20 * fov, 0.02 * fov, u(0.10, 0.13) * fov, u(0.18, 0.22) * fov, u(-0.2, 0.2), lung_i),
        Ellipse(0.21 * fov, 0.01 * fov, u(0.10, 0.13) * fov, u(0.18, 0.22) * fov, u(-0.2, 0.2), lung_i),
    ]
    spine = Ellipse(u(-0.02, 0.02) * fov, -0.26 * fov, 0.045 * fov, 0.04 * fov, 0.0, u(0.3, 0.5))
    liver = Ellipse(u(-0.25, -0.20) * fov, 0.24 * fov, u(0.08, 0.12) * fov, 0.05 * fov, u(-0.3, 0.3), u(0.1, 0.2))
    hx, hy = u(-0.04, 0.04) * fov, u(-0.06, 0.0) * fov
    tilt = u(-0.6, 0.6)
    amp = u(0.12, 0.22)
    ph = u(0, 2 * math.pi)
    myo_a, myo_b = u(0.09, 0.11) * fov, u(0.08, 0.10) * fov
    dynamic = [
        DynamicEllipse(Ellipse(hx, hy, myo_a, myo_b, tilt, u(0.30, 0.40)), amp * 0.5, ph),
        DynamicEllipse(Ellipse(hx, hy, myo_a * 0.68, myo_b * 0.68, tilt, u(0.35, 0.50)), amp, ph),
        DynamicEllipse(
            Ellipse(hx + 0.10 * fov, hy + 0.05 * fov, u(0.035, 0.05) * fov, u(0.05, 0.065) * fov,
                    tilt + 0.4, u(0.4, 0.6)),
            amp * 0.8, ph + u(-0.3, 0.3)),
        DynamicEllipse(Ellipse(u(-0.05, 0.05) * fov, 0.16 * fov, 0.03 * fov, 0.03 * fov, 0.0, u(0.3, 0.5)),
                       u(0.0, 0.1), ph),
    ]
    spec = PhantomSpec(tuple([body] + lungs + [spine, liver]), tuple(dynamic), fov, n_phases)
    assert all(abs(e.cx) + e.a <= h for e in spec.background)
    return spec


# -- flat key-value persistence ---------------------------------------------

_ELLIPSE_KEYS = ("cx", "cy", "a", "b", "tilt", "intensity")


def spec_to_dict(spec: PhantomSpec) -> dict[str, str]:
    out = {"fov": repr(spec.fov), "n_phases": str(spec.n_phases),
           "n_background": str(len(spec.background)), "n_dynamic": str(len(spec.dynamic))}
    for i, e in enumerate(spec.background):
        for key in _ELLIPSE_KEYS:
            out[f"background.{i}.{key}"] = repr(getattr(e, key))
    for i, d in enumerate(spec.dynamic):
        for key in _ELLIPSE_KEYS:
            out[f"dynamic.{i}.{key}"] = repr(getattr(d.ellipse, key))
        out[f"dynamic.{i}.amplitude"] = repr(d.amplitude)
        out[f"dynamic.{i}.phase"] = repr(d.phase)
    return out


def spec_from_dict(values: dict[str, str]) -> PhantomSpec:
    def ellipse(prefix):
        return Ellipse(**{k: float(values[f"{prefix}.{k}"]) for k in _ELLIPSE_KEYS})

    background = [ellipse(f"background.{i}") for i in range(int(values.get("n_background", 0)))]
    dynamic = [
        DynamicEllipse(ellipse(f"dynamic.{i}"), float(values[f"dynamic.{i}.amplitude"]),
                       float(values[f"dynamic.{i}.phase"]))
        for i in range(int(values.get("n_dynamic", 0)))
    ]
    return PhantomSpec(tuple(background), tuple(dynamic), float(values.get("fov", 1.0)),
                       int(values.get("n_phases", 30)))


def save_spec(spec: PhantomSpec, path):
    from .io import write_kv
    write_kv(path, spec_to_dict(spec))


def load_spec(path) -> PhantomSpec:
    from .io import read_kv
    return spec_from_dict(read_kv(path))
