"""Penultimate-feature geometry: joint 2-D PCA, convex hulls, hull overlap."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from . import erasing
from .erasing import ErasePolicy
from .errors import DegenerateError, MissingIdentityError
from .nn import TrainedModel, extract_features
from .synthdata import ImageBatch

GROUPS = ("priv", "re_priv", "recon")
PAIRS = (("recon", "priv"), ("recon", "re_priv"), ("re_priv", "priv"))


@dataclass
class Projection2D:
    points: np.ndarray  # [N, 2]
    basis: np.ndarray  # [D, 2], orthonormal columns
    mean: np.ndarray  # [D]
    explained: np.ndarray  # [2] explained-variance fractions
    groups: np.ndarray  # [N] group tag per point

    def group(self, tag: str) -> np.ndarray:
        return self.points[self.groups == tag]


def pca_project(feature_sets: Mapping[str, np.ndarray], k: int = 2) -> Projection2D:
    """Fit PCA on the union of all tagged sets and project each with it.

    Component signs are fixed so the largest-magnitude loading is positive.
    """
    tags, rows = [], []
    for tag, feats in feature_sets.items():
        feats = np.asarray(feats, dtype=np.float64)
        rows.append(feats)
        tags += [tag] * len(feats)
    x = np.concatenate(rows)
    if len(x) < 3:
        raise DegenerateError(f"need at least 3 points for PCA, got {len(x)}")
    if not np.isfinite(x).all():
        raise DegenerateError("non-finite features")
    mean = x.mean(0)
    xc = x - mean
    # eigh on the covariance keeps results identical under row duplication
    cov = xc.T @ xc / len(x)
    total = float(np.trace(cov))
    if total <= 0.0:
        raise DegenerateError("all points identical")
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:k]
    basis = evecs[:, order]
    evals = np.clip(evals[order], 0.0, None)
    for j in range(basis.shape[1]):
        if basis[np.argmax(np.abs(basis[:, j])), j] < 0:
            basis[:, j] = -basis[:, j]
    if basis.shape[1] < k:
        basis = np.pad(basis, ((0, 0), (0, k - basis.shape[1])))
        evals = np.pad(evals, (0, k - len(evals)))
    return Projection2D(xc @ basis, basis, mean, evals / total, np.array(tags))


@dataclass
class HullPolygon:
    vertices: np.ndarray  # [M, 2], counter-clockwise

    @property
    def area(self) -> float:
        return polygon_area(self.vertices)


def polygon_area(v: np.ndarray) -> float:
    if len(v) < 3:
        return 0.0
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull(points: np.ndarray) -> HullPolygon:
    """Andrew's monotone chain; collinear boundary points are dropped."""
    pts = sorted({(float(p[0]), float(p[1])) for p in np.asarray(points, dtype=np.float64)})
    if len(pts) <= 2:
        return HullPolygon(np.array(pts, dtype=np.float64).reshape(-1, 2))
    lower: list = []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(pts):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    hull = lower[:-1] + upper[:-1]
    return HullPolygon(np.array(hull, dtype=np.float64))


def _clip(subject: list, a, b) -> list:
    """Keep the part of ``subject`` left of the directed edge a->b."""
    out = []
    n = len(subject)
    for i in range(n):
        p, q = subject[i], subject[(i + 1) % n]
        p_in, q_in = _cross(a, b, p) >= 0, _cross(a, b, q) >= 0
        if p_in:
            out.append(p)
        if p_in != q_in:
            dp, dq = _cross(a, b, p), _cross(a, b, q)
            t = dp / (dp - dq)
            out.append((p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])))
    return out


def intersection_area(a: HullPolygon, b: HullPolygon) -> float:
    """Area of the intersection of two convex polygons (Sutherland-Hodgman)."""
    if len(a.vertices) < 3 or len(b.vertices) < 3:
        return 0.0
    poly = [tuple(p) for p in a.vertices]
    clip = [tuple(p) for p in b.vertices]
    for i in range(len(clip)):
        poly = _clip(poly, clip[i], clip[(i + 1) % len(clip)])
        if not poly:
            return 0.0
    return max(polygon_area(np.array(poly)), 0.0)


def hull_iou(a: HullPolygon, b: HullPolygon) -> float:
    area_a, area_b = a.area, b.area
    if area_a == 0.0 and area_b == 0.0:
        same = a.vertices.shape == b.vertices.shape and np.array_equal(
            np.unique(a.vertices, axis=0), np.unique(b.vertices, axis=0))
        return 1.0 if same else 0.0
    inter = intersection_area(a, b)
    union = area_a + area_b - inter
    return float(min(max(inter / union, 0.0), 1.0)) if union > 0 else 0.0


def erase_private(private: ImageBatch, policy: ErasePolicy, seed: int) -> ImageBatch:
    """One erased copy of every private image, as the target would see in training."""
    return erasing.augment_batch(private, policy, epoch=0, rng_seed=seed)


def overlap_report(target: TrainedModel, private: ImageBatch, policy: ErasePolicy, reconstructions: ImageBatch,
                   identities: Optional[Sequence[int]] = None, seed: int = 0,
                   keep_projection: bool = False) -> dict:
    """Hull IoU of the three feature groups per identity, plus their mean over identities.

    All three groups go through the same ``target``; each identity gets its
    own joint PCA over its private, erased-private and reconstructed
    features.
    """
    if identities is None:
        identities = sorted(set(int(l) for l in reconstructions.labels))
    re_priv = erase_private(private, policy, seed)
    feats = {
        "priv": extract_features(target, private),
        "re_priv": extract_features(target, re_priv),
        "recon": extract_features(target, reconstructions),
    }
    per_identity = {}
    projections = {}
    for ident in identities:
        sets = {}
        for g in GROUPS:
            rows = feats[g].features[feats[g].labels == ident]
            if len(rows) == 0:
                raise MissingIdentityError(f"no {g} samples for identity {ident}")
            sets[g] = rows
        proj = pca_project(sets)
        hulls = {g: convex_hull(proj.group(g)) for g in GROUPS}
        per_identity[int(ident)] = {
            f"{p}_{q}": hull_iou(hulls[p], hulls[q]) for p, q in PAIRS
        }
        per_identity[int(ident)]["explained_variance"] = proj.explained.tolist()
        if keep_projection:
            projections[int(ident)] = proj
    pooled = {f"{p}_{q}": float(np.mean([v[f"{p}_{q}"] for v in per_identity.values()])) for p, q in PAIRS}
    report = {"per_identity": per_identity, "pooled": pooled}
    if keep_projection:
        report["projections"] = projections
    return report
