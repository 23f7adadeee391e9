import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import special_ortho_group

from xtcine.homology import (MANIFOLDS, Barcode, PointCloud, averaged_betti_curve, betti0, betti_from_graph,
                             h0_barcode, normalize_by_diameter, pairwise_distances, r_grid, sample_patches)


def test_pairwise_distances_examples():
    assert pairwise_distances(PointCloud([[1.0, 2.0]])).shape == (1, 1)
    d = pairwise_distances(PointCloud([[1.0, 2.0], [1.0, 2.0]]))
    assert d[0, 1] == 0.0
    pts = np.random.default_rng(0).normal(size=(5, 7))
    d = pairwise_distances(pts)
    for i in range(5):
        for j in range(5):
            assert abs(d[i, j] - sum((a - b) ** 2 for a, b in zip(pts[i], pts[j])) ** 0.5) < 1e-12


def test_point_cloud_validation():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        PointCloud([[0.0, np.nan]])


def test_normalize_by_diameter_examples():
    out = normalize_by_diameter(np.array([[0.0, 0.0], [3.0, 4.0]]))
    assert pairwise_distances(out)[0, 1] == pytest.approx(1.0)
    unit = np.array([[0.0], [0.25], [1.0]])
    assert np.array_equal(normalize_by_diameter(unit), unit)
    pts = np.random.default_rng(1).normal(size=(12, 4))
    assert np.allclose(normalize_by_diameter(pts), normalize_by_diameter(7.5 * pts), atol=1e-15)
    with pytest.raises(ValueError):
        normalize_by_diameter(np.ones((4, 3)))
    with pytest.raises(ValueError):
        normalize_by_diameter(np.ones((1, 3)))
    assert isinstance(normalize_by_diameter(PointCloud(pts, "M_xy_img")), PointCloud)


def test_barcode_examples():
    bc = h0_barcode(np.array([[0.0], [1.0]]))
    assert bc.deaths.tolist() == [1.0]
    assert betti0(bc, 0.5) == 2 and betti0(bc, 1.0) == 1
    bc = h0_barcode(np.array([[0.0], [1.0], [3.0]]))
    assert bc.deaths.tolist() == [1.0, 2.0]
    assert h0_barcode(np.zeros((1, 2))).n_points == 1
    assert betti0(h0_barcode(np.zeros((1, 2))), 0.3) == 1


def test_betti_steps_sit_at_deaths():
    pts = np.random.default_rng(2).normal(size=(15, 3))
    bc = h0_barcode(pts)
    assert betti0(bc, 0.0) == 15
    assert betti0(bc, bc.deaths[-1]) == 1
    for i, d in enumerate(bc.deaths):
        assert betti0(bc, np.nextafter(d, 0)) - betti0(bc, d) >= 1
        assert betti0(bc, d) == 15 - np.searchsorted(bc.deaths, d, side="right")


def test_barcode_matches_graph_search():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        pts = normalize_by_diameter(rng.normal(size=(40, 5)))
        bc = h0_barcode(pts)
        assert len(bc.deaths) == 39 and np.all(np.diff(bc.deaths) >= 0)
        radii = np.concatenate([np.linspace(0, 1, 45), bc.deaths[::8]])
        assert [betti0(bc, r) for r in radii] == [betti_from_graph(pts, r) for r in radii]


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(2, 30))
def test_betti_curve_is_monotone(seed, n):
    pts = np.random.default_rng(seed).normal(size=(n, 3))
    curve = betti0(h0_barcode(pts), np.linspace(0, 10, 100))
    assert curve[0] == n and np.all(np.diff(curve) <= 0)
    assert betti0(h0_barcode(pts), np.inf) == 1


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_barcode_isometry_invariance(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(20, 4))
    rot = special_ortho_group.rvs(4, random_state=seed)
    moved = pts[rng.permutation(20)] @ rot.T + rng.normal(size=4)
    assert np.allclose(h0_barcode(pts).deaths, h0_barcode(moved).deaths, atol=1e-12)


@pytest.mark.parametrize("k", [2, 3, 5])
def test_separated_clusters(k):
    rng = np.random.default_rng(k)
    centers = 10.0 * np.eye(k, 6)
    pts = np.concatenate([c + rng.uniform(-0.1, 0.1, (15, 6)) for c in centers])
    d = pairwise_distances(pts)
    labels = np.repeat(np.arange(k), 15)
    same = labels[:, None] == labels[None, :]
    d1, d2 = d[same].max(), d[~same].min()
    assert d1 < d2
    bc = h0_barcode(pts)
    assert all(betti0(bc, r) == k for r in np.linspace(d1, d2, 50, endpoint=False))


def test_sample_patches_examples():
    img = np.arange(36.0).reshape(6, 6)
    cloud = sample_patches([img], 3, 6, seed=0, tag="M_xy_img")
    assert cloud.points.shape == (3, 36) and np.all(cloud.points == img.ravel())
    assert len(sample_patches([img], 1, 2)) == 1
    p = sample_patches([img], 50, 3, seed=1).points
    # every patch is a row-major window of the image
    for row in p:
        r0, c0 = divmod(int(row[0]), 6)
        assert np.array_equal(row, img[r0:r0 + 3, c0:c0 + 3].ravel())
    with pytest.raises(ValueError):
        sample_patches([img], 3, 7)
    with pytest.raises(ValueError):
        normalize_by_diameter(sample_patches([np.ones((8, 8))], 10, 4))


def test_averaged_curve_examples():
    rng = np.random.default_rng(3)
    images = [rng.normal(size=(16, 16)) for _ in range(3)]
    radii = r_grid(50)
    a = averaged_betti_curve(images, 4, 30, 4, radii, seed=5)
    b = averaged_betti_curve(images, 4, 30, 4, radii, seed=5)
    assert np.array_equal(a, b)
    # draws are with replacement, so repeated patches may merge already at r = 0
    assert 25 <= a[0] <= 30 and a[-1] == 1 and np.all(np.diff(a) <= 0)
    one = averaged_betti_curve(images, 1, 30, 4, radii, seed=5)
    seed0 = int(np.random.SeedSequence(5).spawn(1)[0].generate_state(1)[0])
    cloud = normalize_by_diameter(sample_patches(images, 30, 4, seed0))
    assert np.array_equal(one, betti0(h0_barcode(cloud), radii))


def test_cluster_patches_plateau_in_mean_curve():
    # three flat images of distinct levels: every patch sits on one of three points
    images = [np.full((8, 8), v) for v in (0.0, 1.0, 3.0)]
    radii = np.array([0.0, 0.2, 0.5])
    curve = averaged_betti_curve(images, 5, 60, 3, radii, seed=0)
    assert curve[0] == curve[1] == 3.0 and curve[2] == 2.0


def test_grid_and_tags():
    g = r_grid()
    assert len(g) == 200 and g[0] == 0 and g[-1] == 1
    assert MANIFOLDS == ("M_xy_img", "M_xy_res", "M_xtyt_img", "M_xtyt_res")
    assert Barcode(np.array([0.1, 0.2])).n_points == 3
