"""Geometry profiles and the simulated acquisition pipeline shared by the
CLI and the experiment drivers."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .phantom import PhantomSpec, random_cardiac_phantom, render_sequence
from .radial import (default_trajectory, gridding_reconstruct, magnitude, rotate_trajectory,
                     sample_kspace_analytic, KSpaceData)


@dataclass(frozen=True)
class Profile:
    name: str
    grid: int
    n_phases: int
    n_spokes: int
    crop: int
    stride: int
    roi: int
    patch_count: int
    patch_size: int

    @property
    def window(self) -> int:
        return self.grid - 2 * self.crop


PROFILES = {
    "desk": Profile("desk", 64, 16, 128, 10, 10, 32, 400, 12),
    "full": Profile("full", 320, 30, 1130, 50, 50, 160, 1400, 18),
}


def get_profile(name: str) -> Profile:
    try:
        return PROFILES[name]
    except KeyError:
        raise ValueError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}") from None


@dataclass
class Acquisition:
    spec: PhantomSpec
    x: np.ndarray
    kspace: KSpaceData
    x_in: np.ndarray

    @property
    def residual(self) -> np.ndarray:
        return self.x_in - self.x


def subject_seed(seed: int, subject: int, slice_: int) -> int:
    return int(np.random.SeedSequence([seed, subject, slice_]).generate_state(1)[0])


def acquire(spec: PhantomSpec, profile: Profile, rotation: float = 0.0) -> Acquisition:
    """Render ground truth, sample golden-angle k-space analytically and grid it.

    A rotation turns both the scene and the trajectory, which is what
    rotating the measured k-space amounts to for an analytic object.
    """
    grid = (profile.grid, profile.grid)
    x = render_sequence(spec, grid, rotation)
    traj = rotate_trajectory(default_trajectory(grid, profile.n_spokes, profile.n_phases, spec.fov), rotation)
    k = sample_kspace_analytic(spec, traj, rotation)
    x_in = magnitude(gridding_reconstruct(k, grid))
    return Acquisition(spec, x, k, x_in)


def make_subject(seed: int, subject: int, slice_: int, profile: Profile, rotation: float = 0.0) -> Acquisition:
    spec = random_cardiac_phantom(subject_seed(seed, subject, slice_), profile.n_phases)
    return acquire(spec, profile, rotation)
