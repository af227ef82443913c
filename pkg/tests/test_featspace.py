import numpy as np
import pytest

from midre import featspace
from midre.erasing import ErasePolicy, FillKind, FillStrategy
from midre.errors import DegenerateError, MissingIdentityError
from midre.featspace import HullPolygon, convex_hull, hull_iou, intersection_area, pca_project

SQUARE = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)


def test_pca_x_axis_points():
    pts = np.column_stack([np.arange(10.0), np.zeros(10)])
    proj = pca_project({"a": pts})
    assert proj.explained[0] == pytest.approx(1.0)
    assert proj.explained[1] == pytest.approx(0.0, abs=1e-12)


def test_pca_basis_and_sign_convention(rng):
    sets = {"priv": rng.normal(size=(40, 12)), "recon": rng.normal(size=(20, 12)) * 2}
    proj = pca_project(sets)
    np.testing.assert_allclose(proj.basis.T @ proj.basis, np.eye(2), atol=1e-6)
    assert proj.explained[0] >= proj.explained[1] >= 0
    for j in range(2):
        col = proj.basis[:, j]
        assert col[np.argmax(np.abs(col))] > 0
    assert (proj.groups == "recon").sum() == 20


def test_pca_preserves_distances_for_planar_data(rng):
    plane = rng.normal(size=(30, 2)) @ rng.normal(size=(2, 6))
    proj = pca_project({"a": plane})
    d_in = np.linalg.norm(plane[:, None] - plane[None], axis=-1)
    d_out = np.linalg.norm(proj.points[:, None] - proj.points[None], axis=-1)
    np.testing.assert_allclose(d_in, d_out, atol=1e-9)


def test_pca_duplication_invariance(rng):
    x = rng.normal(size=(25, 5))
    a, b = pca_project({"a": x}), pca_project({"a": np.concatenate([x, x])})
    np.testing.assert_allclose(a.basis, b.basis, atol=1e-10)
    np.testing.assert_allclose(a.points, b.points[:25], atol=1e-10)


def test_pca_degenerate():
    with pytest.raises(DegenerateError):
        pca_project({"a": np.ones((5, 3))})
    with pytest.raises(DegenerateError):
        pca_project({"a": np.zeros((2, 3))})


def test_hull_square_with_center():
    hull = convex_hull(np.vstack([SQUARE, [[0.5, 0.5]]]))
    assert len(hull.vertices) == 4 and hull.area == pytest.approx(1.0)


def test_hull_collinear_is_degenerate():
    assert convex_hull(np.array([[0, 0], [1, 1], [2, 2]])).area == 0.0


def _inside(poly: np.ndarray, p, eps=1e-9) -> bool:
    n = len(poly)
    return all(featspace._cross(poly[i], poly[(i + 1) % n], p) >= -eps for i in range(n))


def test_hull_contains_every_point(rng):
    pts = rng.normal(size=(1000, 2))
    hull = convex_hull(pts)
    v = hull.vertices
    assert all(featspace._cross(v[i], v[(i + 1) % len(v)], v[(i + 2) % len(v)]) > 0 for i in range(len(v)))
    assert all(_inside(v, p) for p in pts)


def test_iou_closed_forms():
    sq = convex_hull(SQUARE)
    tri = convex_hull(np.array([[0, 0], [2, 0], [0, 1]]))
    assert hull_iou(tri, tri) == 1.0
    assert hull_iou(sq, convex_hull(SQUARE + 3)) == 0.0
    assert hull_iou(sq, convex_hull(SQUARE + [0.5, 0])) == pytest.approx(1 / 3, abs=1e-12)


def test_iou_zero_area_cases():
    seg = convex_hull(np.array([[0, 0], [1, 1]]))
    other = convex_hull(np.array([[0, 0], [1, 2]]))
    assert hull_iou(seg, seg) == 1.0
    assert hull_iou(seg, other) == 0.0


def test_clipping_matches_monte_carlo():
    rng = np.random.default_rng(8)
    for _ in range(10):
        a = convex_hull(rng.normal(size=(8, 2)))
        b = convex_hull(rng.normal(size=(8, 2)) + rng.normal(scale=0.5, size=2))
        lo = np.minimum(a.vertices.min(0), b.vertices.min(0))
        hi = np.maximum(a.vertices.max(0), b.vertices.max(0))
        n = 20_000
        pts = rng.uniform(lo, hi, size=(n, 2))
        hits = np.array([_inside(a.vertices, p) and _inside(b.vertices, p) for p in pts])
        box = float(np.prod(hi - lo))
        est, p = box * hits.mean(), hits.mean()
        sigma = box * np.sqrt(p * (1 - p) / n)
        assert abs(intersection_area(a, b) - est) <= 3 * sigma + 1e-9


def test_overlap_report_with_privates_as_recon(tiny_classifier, tiny_bundle):
    priv = tiny_bundle.private
    pol = ErasePolicy.random_erase(0.4, fill=FillStrategy(FillKind.CONSTANT, 0.5))
    rep = featspace.overlap_report(tiny_classifier, priv, pol, priv, identities=[0, 2])
    assert set(rep["per_identity"]) == {0, 2}
    for row in rep["per_identity"].values():
        assert row["recon_priv"] == pytest.approx(1.0)
        assert 0.0 <= row["recon_re_priv"] <= 1.0
    assert rep["pooled"]["recon_priv"] == pytest.approx(1.0)
    with pytest.raises(MissingIdentityError):
        featspace.overlap_report(tiny_classifier, priv, pol, priv.subset(priv.labels == 0), identities=[1])
