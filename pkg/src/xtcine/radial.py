"""Golden-angle radial sampling, Kaiser-Bessel NUFFT and gridding.

k-space positions are in cycles per unit length; an image of ``N`` pixels
over ``fov`` has its Nyquist radius at ``N / (2 fov)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.special import i0

from . import io
from .phantom import PhantomSpec, analytic_kspace

# 180 degrees over the golden ratio (about 111.246 degrees)
GOLDEN_ANGLE = math.pi * (math.sqrt(5) - 1) / 2
KB_WIDTH = 4
OVERSAMPLING = 2


@dataclass(frozen=True)
class Trajectory:
    spoke_angles: np.ndarray
    samples_per_spoke: int
    k_max: float
    phase_assignment: np.ndarray
    n_phases: int
    fov: float = 1.0

    @property
    def n_spokes(self) -> int:
        return len(self.spoke_angles)

    @property
    def radii(self) -> np.ndarray:
        """Signed sample radii along a spoke, uniform with the DC sample at index S/2."""
        s = self.samples_per_spoke
        return (np.arange(s) - s // 2) * (2 * self.k_max / s)

    @property
    def dk(self) -> float:
        return 2 * self.k_max / self.samples_per_spoke

    def points(self, spokes=None) -> np.ndarray:
        ang = self.spoke_angles if spokes is None else self.spoke_angles[spokes]
        r = self.radii
        return np.stack([np.cos(ang)[:, None] * r, np.sin(ang)[:, None] * r], axis=-1)

    def spokes_of_phase(self, t: int) -> np.ndarray:
        return np.flatnonzero(self.phase_assignment == t)


@dataclass(frozen=True)
class KSpaceData:
    values: np.ndarray
    trajectory: Trajectory

    def __post_init__(self):
        expected = (self.trajectory.n_spokes, self.trajectory.samples_per_spoke)
        if self.values.shape != expected:
            raise ValueError(f"k-space shape {self.values.shape} does not match trajectory {expected}")


def golden_angle_trajectory(n_spokes: int, samples_per_spoke: int, n_phases: int,
                            k_max: float, fov: float = 1.0) -> Trajectory:
    if n_phases < 1 or n_spokes < n_phases:
        raise ValueError(f"need n_spokes >= n_phases >= 1, got {n_spokes}, {n_phases}")
    if samples_per_spoke < 2:
        raise ValueError("samples_per_spoke must be >= 2")
    j = np.arange(n_spokes)
    angles = np.mod(j * GOLDEN_ANGLE, math.pi)
    return Trajectory(angles, samples_per_spoke, float(k_max), j % n_phases, n_phases, fov)


def default_trajectory(grid: tuple[int, int], n_spokes: int, n_phases: int, fov: float = 1.0) -> Trajectory:
    """Nyquist-radius trajectory with 2x radial oversampling.

    The readout has an odd sample count, symmetric about DC, so spokes at
    theta and theta + pi sample the same points.
    """
    n = max(grid)
    dk = 1 / (2 * fov)
    return golden_angle_trajectory(n_spokes, 2 * n + 1, n_phases, (2 * n + 1) * dk / 2, fov)


def rotate_trajectory(traj: Trajectory, theta: float) -> Trajectory:
    return replace(traj, spoke_angles=traj.spoke_angles + theta)


def sample_kspace_analytic(spec: PhantomSpec, traj: Trajectory, rotation: float = 0.0) -> KSpaceData:
    if traj.n_phases > spec.n_phases:
        raise ValueError("trajectory has more phases than the phantom")
    values = np.zeros((traj.n_spokes, traj.samples_per_spoke), dtype=complex)
    for t in range(traj.n_phases):
        spokes = traj.spokes_of_phase(t)
        values[spokes] = analytic_kspace(spec, t, rotation, traj.points(spokes))
    return KSpaceData(values, traj)


# -- Kaiser-Bessel NUFFT ------------------------------------------------------

def kb_beta(width: int = KB_WIDTH, osf: float = OVERSAMPLING) -> float:
    """Beatty et al. shape parameter for a given kernel width and oversampling."""
    return math.pi * math.sqrt((width / osf) ** 2 * (osf - 0.5) ** 2 - 0.8)


def kb_kernel(u: np.ndarray, width: int = KB_WIDTH, beta: float | None = None) -> np.ndarray:
    beta = kb_beta(width) if beta is None else beta
    u = np.asarray(u, dtype=float)
    arg = 1 - (2 * u / width) ** 2
    # shifted down by I0(0) = 1 so the kernel vanishes continuously at the
    # support edge; otherwise a point a rounding error off the grid picks up
    # a different neighbour with weight 1
    return np.where(arg > 0, i0(beta * np.sqrt(np.clip(arg, 0, None))) - 1.0, 0.0)


def kb_transform(f: np.ndarray, width: int = KB_WIDTH, beta: float | None = None) -> np.ndarray:
    """Continuous Fourier transform of :func:`kb_kernel` at frequency ``f``
    (cycles per grid cell)."""
    beta = kb_beta(width) if beta is None else beta
    f = np.asarray(f, dtype=float)
    z2 = beta ** 2 - (math.pi * width * f) ** 2
    z = np.sqrt(np.abs(z2))
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(z2 > 0, np.sinh(z) / z, np.sin(z) / z)
    # the second term removes the transform of the unit box subtracted in kb_kernel
    return width * (np.where(z == 0, 1.0, out) - np.sinc(width * f))


@lru_cache(maxsize=8)
def _deapodization(n: int) -> np.ndarray:
    g = OVERSAMPLING * n
    return kb_transform((np.arange(n) - n // 2) / g)


def _interpolation_matrix(points: np.ndarray, grid: tuple[int, int], fov: float) -> sp.csr_matrix:
    """Sparse (M x Gx*Gy) Kaiser-Bessel interpolation from the oversampled grid."""
    gx, gy = OVERSAMPLING * grid[0], OVERSAMPLING * grid[1]
    pts = points.reshape(-1, 2)
    m = len(pts)
    kappa_x = pts[:, 0] * fov * OVERSAMPLING
    kappa_y = pts[:, 1] * fov * OVERSAMPLING
    offs = np.arange(KB_WIDTH)
    jx = np.ceil(kappa_x - KB_WIDTH / 2)[:, None] + offs
    jy = np.ceil(kappa_y - KB_WIDTH / 2)[:, None] + offs
    wx = kb_kernel(kappa_x[:, None] - jx)
    wy = kb_kernel(kappa_y[:, None] - jy)
    ix = np.mod(jx.astype(int), gx)
    iy = np.mod(jy.astype(int), gy)
    cols = (ix[:, :, None] * gy + iy[:, None, :]).reshape(m, -1)
    vals = (wx[:, :, None] * wy[:, None, :]).reshape(m, -1)
    rows = np.repeat(np.arange(m), KB_WIDTH * KB_WIDTH)
    return sp.csr_matrix((vals.ravel(), (rows, cols.ravel())), shape=(m, gx * gy))


def _grid_indices(grid):
    gx, gy = OVERSAMPLING * grid[0], OVERSAMPLING * grid[1]
    ix = np.mod(np.arange(grid[0]) - grid[0] // 2, gx)
    iy = np.mod(np.arange(grid[1]) - grid[1] // 2, gy)
    return np.ix_(ix, iy), (gx, gy)


def _pixel_area(grid, fov):
    return (fov / grid[0]) * (fov / grid[1])


def nufft_frame(image: np.ndarray, points: np.ndarray, fov: float = 1.0) -> np.ndarray:
    """Approximate ``sum_n x_n exp(-i 2 pi k.r_n) * pixel_area`` at ``points``."""
    grid = image.shape
    idx, gshape = _grid_indices(grid)
    z = np.zeros(gshape, dtype=complex)
    z[idx] = image / np.outer(_deapodization(grid[0]), _deapodization(grid[1]))
    spectrum = np.fft.fft2(z)
    mat = _interpolation_matrix(points, grid, fov)
    return _pixel_area(grid, fov) * (mat @ spectrum.ravel()).reshape(points.shape[:-1])


def nufft_adjoint_frame(values: np.ndarray, points: np.ndarray, grid: tuple[int, int],
                        fov: float = 1.0) -> np.ndarray:
    """Exact adjoint of :func:`nufft_frame`."""
    idx, gshape = _grid_indices(grid)
    mat = _interpolation_matrix(points, grid, fov)
    spread = (mat.conj().T @ np.asarray(values, dtype=complex).ravel()).reshape(gshape)
    z = np.fft.ifft2(spread) * (gshape[0] * gshape[1])
    return _pixel_area(grid, fov) * z[idx] / np.outer(_deapodization(grid[0]), _deapodization(grid[1]))


def _check_phases(traj: Trajectory, n_t: int):
    if traj.n_phases != n_t:
        raise ValueError(f"trajectory has {traj.n_phases} phases, image sequence has {n_t}")


def sample_kspace_nufft(images: np.ndarray, traj: Trajectory) -> KSpaceData:
    if not np.all(np.isfinite(images)):
        raise ValueError("image sequence contains non-finite values")
    _check_phases(traj, images.shape[-1])
    values = np.zeros((traj.n_spokes, traj.samples_per_spoke), dtype=complex)
    for t in range(traj.n_phases):
        spokes = traj.spokes_of_phase(t)
        values[spokes] = nufft_frame(images[..., t], traj.points(spokes), traj.fov)
    return KSpaceData(values, traj)


def gridding_adjoint(k: KSpaceData, grid: tuple[int, int]) -> np.ndarray:
    traj = k.trajectory
    out = np.zeros(tuple(grid) + (traj.n_phases,), dtype=complex)
    for t in range(traj.n_phases):
        spokes = traj.spokes_of_phase(t)
        if len(spokes) == 0:
            raise ValueError(f"phase {t} has no spokes")
        out[..., t] = nufft_adjoint_frame(k.values[spokes], traj.points(spokes), grid, traj.fov)
    return out


def angular_weights(angles: np.ndarray) -> np.ndarray:
    """Angular extent owned by each diametric spoke: half the gaps to its
    neighbours on the circle of directions modulo pi."""
    a = np.mod(angles, math.pi)
    if len(a) == 1:
        return np.array([math.pi])
    order = np.argsort(a, kind="stable")
    s = a[order]
    gaps = np.diff(np.concatenate([s, [s[0] + math.pi]]))
    owned = 0.5 * (gaps + np.roll(gaps, 1))
    out = np.empty_like(owned)
    out[order] = owned
    return out


def density_weights(traj: Trajectory, spokes: np.ndarray) -> np.ndarray:
    """Ramp weights |k| dk dtheta for the given spokes, shape (n_spokes, S).

    dtheta is the angular extent each spoke owns. The DC sample is shared by
    every spoke and gets the ramp value dk/4, so the spokes together cover
    the disk of radius dk/2 exactly once.
    """
    r = np.abs(traj.radii)
    ramp = np.where(r == 0, traj.dk / 4, r)
    return angular_weights(traj.spoke_angles[spokes])[:, None] * ramp * traj.dk


def gridding_reconstruct(k: KSpaceData, grid: tuple[int, int]) -> np.ndarray:
    """Density-compensated gridding reconstruction, one frame per phase."""
    traj = k.trajectory
    out = np.zeros(tuple(grid) + (traj.n_phases,), dtype=complex)
    area = _pixel_area(grid, traj.fov)
    for t in range(traj.n_phases):
        spokes = traj.spokes_of_phase(t)
        if len(spokes) == 0:
            raise ValueError(f"phase {t} has no spokes")
        w = density_weights(traj, spokes)
        out[..., t] = nufft_adjoint_frame(k.values[spokes] * w, traj.points(spokes), grid, traj.fov) / area
    return out


def magnitude(seq: np.ndarray) -> np.ndarray:
    return np.abs(seq)


# -- persistence --------------------------------------------------------------

def _traj_meta(traj: Trajectory) -> dict:
    return {"samples_per_spoke": traj.samples_per_spoke, "k_max": traj.k_max,
            "n_phases": traj.n_phases, "fov": traj.fov}


def save_trajectory(traj: Trajectory, path):
    io.write_array(path, np.stack([traj.spoke_angles, traj.phase_assignment.astype(float)]),
                   _traj_meta(traj))


def load_trajectory(path) -> Trajectory:
    arr, meta = io.read_array(path, with_meta=True)
    return Trajectory(arr[0].copy(), int(meta["samples_per_spoke"]), meta["k_max"],
                      arr[1].astype(int), int(meta["n_phases"]), meta["fov"])


def save_kspace(k: KSpaceData, path):
    io.write_array(path, k.values, _traj_meta(k.trajectory))


def load_kspace(path, traj: Trajectory) -> KSpaceData:
    return KSpaceData(io.read_array(path), traj)


def kspace_to_csv(k: KSpaceData, path):
    traj = k.trajectory
    pts = traj.points()
    rows = []
    for s in range(traj.n_spokes):
        for j in range(traj.samples_per_spoke):
            v = k.values[s, j]
            rows.append((s, j, int(traj.phase_assignment[s]), pts[s, j, 0], pts[s, j, 1], v.real, v.imag))
    io.write_csv(path, ("spoke", "sample", "phase", "kx", "ky", "real", "imag"), rows)
