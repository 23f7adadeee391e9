"""Zeroth persistent homology of point clouds built from image patches.

For the Rips graph G_r (edges between points at distance <= r) the
component merges happen exactly at the edge lengths of a Euclidean minimum
spanning tree, so the barcode is the sorted MST weights.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist, squareform

MANIFOLDS = ("M_xy_img", "M_xy_res", "M_xtyt_img", "M_xtyt_res")


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    tag: str = ""

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if len(pts) < 1:
            raise ValueError("a point cloud needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class Barcode:
    deaths: np.ndarray
    diameter: float = 1.0

    @property
    def n_points(self) -> int:
        return len(self.deaths) + 1


def _points(cloud):
    return cloud.points if isinstance(cloud, PointCloud) else np.atleast_2d(np.asarray(cloud, float))


def pairwise_distances(cloud) -> np.ndarray:
    return squareform(pdist(_points(cloud)))


def normalize_by_diameter(cloud):
    pts = _points(cloud)
    if len(pts) < 2:
        raise ValueError("normalising needs at least two points")
    diam = float(pdist(pts).max())
    if diam == 0:
        raise ValueError("all points coincide; diameter is zero")
    out = pts / diam
    return PointCloud(out, cloud.tag) if isinstance(cloud, PointCloud) else out


def h0_barcode(cloud, diameter: float = 1.0) -> Barcode:
    """Death radii of H0 classes (all born at 0) via Prim's algorithm on the
    dense distance matrix."""
    d = pairwise_distances(cloud)
    n = len(d)
    if n == 1:
        return Barcode(np.zeros(0), diameter)
    in_tree = np.zeros(n, dtype=bool)
    in_tree[0] = True
    best = d[0].copy()
    best[0] = np.inf
    deaths = np.empty(n - 1)
    for i in range(n - 1):
        j = int(np.argmin(np.where(in_tree, np.inf, best)))
        deaths[i] = best[j]
        in_tree[j] = True
        best = np.minimum(best, d[j])
    return Barcode(np.sort(deaths), diameter)


def betti0(barcode: Barcode, r) -> np.ndarray | int:
    """Connected components of G_r: points minus merges with death <= r."""
    counts = barcode.n_points - np.searchsorted(barcode.deaths, r, side="right")
    return int(counts) if np.ndim(counts) == 0 else counts


def sample_patches(images, count: int, patch_size: int, seed: int = 0, tag: str = "") -> PointCloud:
    """Uniform random (image, top-left corner) draws with replacement,
    flattened row-major."""
    images = [np.asarray(im, float) for im in images]
    for im in images:
        if im.shape[0] < patch_size or im.shape[1] < patch_size:
            raise ValueError(f"image {im.shape} smaller than patch {patch_size}")
    rng = np.random.default_rng(seed)
    out = np.empty((count, patch_size * patch_size))
    for i in range(count):
        im = images[rng.integers(len(images))]
        r0 = rng.integers(im.shape[0] - patch_size + 1)
        c0 = rng.integers(im.shape[1] - patch_size + 1)
        out[i] = im[r0:r0 + patch_size, c0:c0 + patch_size].ravel()
    return PointCloud(out, tag)


def r_grid(n: int = 200) -> np.ndarray:
    return np.linspace(0.0, 1.0, n)


def averaged_betti_curve(images, repeats: int, count: int, patch_size: int, radii, seed: int = 0) -> np.ndarray:
    """Mean beta_0 over ``repeats`` independent patch samplings, each
    normalised to unit diameter."""
    seeds = np.random.SeedSequence(seed).spawn(repeats)
    total = np.zeros(len(radii))
    for ss in seeds:
        cloud = sample_patches(images, count, patch_size, int(ss.generate_state(1)[0]))
        total += betti0(h0_barcode(normalize_by_diameter(cloud)), radii)
    return total / repeats


def betti_from_graph(cloud, r: float) -> int:
    """Components of G_r by breadth-first search over the explicit graph."""
    d = pairwise_distances(cloud)
    n = len(d)
    seen = np.zeros(n, dtype=bool)
    components = 0
    for start in range(n):
        if seen[start]:
            continue
        components += 1
        seen[start] = True
        queue = deque([start])
        while queue:
            v = queue.popleft()
            nbrs = np.flatnonzero((d[v] <= r) & ~seen)
            seen[nbrs] = True
            queue.extend(nbrs.tolist())
    return components
