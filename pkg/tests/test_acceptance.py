"""Acceptance suite: nine criteria, one PASS/FAIL line each.

The desk-scale experiments (criteria 5-9) train real models and take about
half an hour on one CPU core. Trained models are shared between criteria
through one cache directory per session; set MIDRE_ACCEPT_CACHE to keep it
across sessions. Run with ``pytest tests/test_acceptance.py -v``; the verdict
lines appear in the terminal summary.
"""
from __future__ import annotations

import os
import statistics
import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from midre import erasing, featspace, metrics
from midre.erasing import ErasePolicy, Scheme
from midre.pipeline import DEFAULT_CONFIG, ExperimentConfig, compare_schemes, run_pipeline, sweep_ae

from conftest import record_criterion

SEEDS = (0, 1, 2)
MIDRE = {"scheme": "RandomErase", "a_lo": 0.1, "a_hi": 0.5}


def verdict(number: int, ok: bool, detail: str) -> None:
    record_criterion(number, ok, detail)
    assert ok, f"criterion {number}: {detail}"


@pytest.fixture(scope="session")
def cache_dir(tmp_path_factory) -> Path:
    env = os.environ.get("MIDRE_ACCEPT_CACHE")
    if env:
        Path(env).mkdir(parents=True, exist_ok=True)
        return Path(env)
    return tmp_path_factory.mktemp("accept-cache")


@pytest.fixture(scope="session")
def out_root(tmp_path_factory) -> Path:
    return tmp_path_factory.mktemp("accept-runs")


def desk_config(out: Path, cache: Path, seed: int = 0, **changes) -> ExperimentConfig:
    raw = {**DEFAULT_CONFIG, "seed": seed, "output": str(out), "cache": str(cache)}
    cfg = ExperimentConfig.from_dict(raw)
    return cfg.with_overrides(**changes) if changes else cfg


# --- 1. mask geometry ------------------------------------------------------

def test_criterion_1_mask_geometry():
    W = H = 64
    policy = ErasePolicy(Scheme.RANDOM_ERASE, a_lo=0.1, a_hi=0.8)
    draw_rng, region_rng = np.random.default_rng(2024), np.random.default_rng(2025)
    t0 = time.perf_counter()
    bad = []
    for i in range(10_000):
        # drawn through the policy: containment and minimum coverage
        r = erasing.sample_erase_region(W, H, policy, region_rng)
        slack = (r.w_r + r.h_r + 1) / (W * H)
        inside = 0 <= r.x_e and 0 <= r.y_e and r.x_e + r.w_r <= W and r.y_e + r.h_r <= H
        frac = r.area / (W * H)
        if not inside or r.w_r < 1 or r.h_r < 1 or not 0.1 - slack <= frac <= 0.8 + slack:
            bad.append(("policy", i, r))
        # explicit a_e: realized area within rounding slack of the drawn fraction
        a_e = draw_rng.uniform(0.1, 0.8)
        q = erasing.sample_erase_region(W, H, policy, region_rng, area_fraction=a_e)
        if abs(q.area / (W * H) - a_e) > (q.w_r + q.h_r + 1) / (W * H):
            bad.append(("area", i, q))
    elapsed = time.perf_counter() - t0

    @settings(max_examples=300, deadline=None)
    @given(w=st.integers(4, 96), h=st.integers(4, 96), a=st.floats(0.01, 1.0), seed=st.integers(0, 2**31))
    def prop(w, h, a, seed):
        pol = ErasePolicy(Scheme.RANDOM_ERASE, a_lo=a / 2, a_hi=a)
        r = erasing.sample_erase_region(w, h, pol, np.random.default_rng(seed))
        r.check(w, h)
        assert r.w_r >= 1 and r.h_r >= 1

    prop()
    ok = not bad and elapsed < 10.0
    verdict(1, ok, f"{10_000 - len(bad)}/10000 draws valid (containment, area law, coverage), {elapsed:.2f}s")


# --- 2. trade-off ratio ----------------------------------------------------

def test_criterion_2_delta_table():
    from test_metrics import DELTA_ROWS

    rows = DELTA_ROWS
    errs = []
    for acc_n, att_n, acc_d, att_d, want in rows:
        got = metrics.tradeoff_delta(acc_n, att_n, acc_d, att_d)
        if got is None or abs(got - want) > 0.01:
            errs.append((acc_n, att_n, acc_d, att_d, got, want))
    verdict(2, not errs, f"{len(rows) - len(errs)}/{len(rows)} rows within 0.01" + (f"; off: {errs}" if errs else ""))


# --- 3. geometry / statistics oracles -------------------------------------

def test_criterion_3_geometry_oracles():
    sq = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)
    hull = featspace.convex_hull
    checks = {
        "iou identical": abs(featspace.hull_iou(hull(sq), hull(sq)) - 1.0) <= 1e-9,
        "iou disjoint": abs(featspace.hull_iou(hull(sq), hull(sq + 5)) - 0.0) <= 1e-9,
        "iou half shift": abs(featspace.hull_iou(hull(sq), hull(sq + [0.5, 0])) - 1 / 3) <= 1e-9,
    }
    rng = np.random.default_rng(0)
    x = rng.normal(size=(500, 4))
    checks["ffd identical"] = abs(metrics.frechet_feature_distance(x, x)) <= 1e-6
    d = np.array([1.0, -2.0, 0.5, 3.0])
    checks["ffd mean shift"] = abs(metrics.frechet_feature_distance(x, x + d) - d @ d) <= 1e-6
    checks["ffd 1-d"] = abs(metrics.frechet_from_stats([0.0], [[4.0]], [0.0], [[1.0]]) - 1.0) <= 1e-6
    proj = featspace.pca_project({"a": rng.normal(size=(50, 8)), "b": rng.normal(size=(30, 8)) + 1})
    checks["pca orthonormal"] = np.allclose(proj.basis.T @ proj.basis, np.eye(2), atol=1e-6)
    failed = [k for k, v in checks.items() if not v]
    verdict(3, not failed, f"{len(checks) - len(failed)}/{len(checks)} oracle checks" + (f"; failed {failed}" if failed else ""))


# --- 4. gradient check -----------------------------------------------------

def test_criterion_4_gradient_check():
    from test_attacks import finite_difference_errors

    errs = finite_difference_errors(points=100)
    worst = float(np.max(errs))
    verdict(4, worst <= 1e-3, f"max relative error {worst:.2e} over {len(errs)} points")


# --- desk-scale experiments -----------------------------------------------

def test_criterion_5_erased_fraction_sweep(cache_dir, out_root):
    cfg = desk_config(out_root / "sweep", cache_dir)
    t0 = time.perf_counter()
    s = sweep_ae(cfg, [0.0, 0.2, 0.5], repeats=len(SEEDS), mode="point")
    minutes = (time.perf_counter() - t0) / 60
    att, acc = s["median_att_acc"], s["median_acc"]
    v = s["verdict"]
    ok = (v["att_acc_strictly_decreasing"] and v["att_acc_total_drop_points"] >= 30
          and v["acc_total_drop_points"] <= 15 and minutes <= 45)
    verdict(5, ok, f"median AttAcc {[round(a, 3) for a in att]}, median Acc {[round(a, 3) for a in acc]}, "
                   f"AttAcc drop {v['att_acc_total_drop_points']:.1f} pts, Acc drop {v['acc_total_drop_points']:.1f} pts, "
                   f"{minutes:.1f} min")


def test_criterion_6_scheme_comparison(cache_dir, out_root):
    cfg = desk_config(out_root / "schemes", cache_dir)
    s = compare_schemes(cfg, [0.4], repeats=len(SEEDS))
    t = {row["scheme"]: row for row in s["table"]}
    ok = t["RE"]["median_att_acc"] < t["EE"]["median_att_acc"] and t["RE"]["median_acc"] >= t["FE"]["median_acc"]
    detail = ", ".join(f"{k} Acc {v['median_acc']:.3f} AttAcc {v['median_att_acc']:.3f}" for k, v in t.items())
    verdict(6, ok, detail)


def _pooled(cache_dir, out_root, policy, seed, tag):
    cfg = desk_config(out_root / f"fs-{tag}-{seed}", cache_dir, seed=seed)
    cfg = ExperimentConfig.from_dict({**cfg.raw, "policy": policy})
    return run_pipeline(cfg)


def test_criterion_7_feature_overlap(cache_dir, out_root):
    nodef = [_pooled(cache_dir, out_root, {"scheme": "NoDefense"}, s, "nodef") for s in SEEDS]
    midre = [_pooled(cache_dir, out_root, MIDRE, s, "midre") for s in SEEDS]
    med = lambda runs, k: statistics.median(r[k] for r in runs)  # noqa: E731
    n_rp, m_rp, m_rr = med(nodef, "hull_iou_recon_priv"), med(midre, "hull_iou_recon_priv"), med(midre, "hull_iou_recon_re")
    ok = m_rp < n_rp and m_rr >= m_rp
    verdict(7, ok, f"IoU(recon, priv) NoDef {n_rp:.3f} vs MIDRE {m_rp:.3f}; MIDRE IoU(recon, RE) {m_rr:.3f}")


def test_criterion_8_adaptive_attack(cache_dir, out_root):
    std, ada = [], []
    for seed in SEEDS:
        base = desk_config(out_root / f"adaptive-{seed}", cache_dir, seed=seed)
        raw = {**base.raw, "policy": MIDRE}
        raw["attack"] = {**raw["attack"], "samples_per_identity": 3}
        std_cfg = ExperimentConfig.from_dict({**raw, "output": str(out_root / f"std-{seed}")})
        ada_raw = {**raw, "output": str(out_root / f"ada-{seed}")}
        ada_raw["attack"] = {**raw["attack"], "adaptive": True, "adaptive_policy": MIDRE}
        ada_cfg = ExperimentConfig.from_dict(ada_raw)
        std.append(run_pipeline(std_cfg)["att_acc"])
        ada.append(run_pipeline(ada_cfg)["att_acc"])
    m_std, m_ada = statistics.median(std), statistics.median(ada)
    verdict(8, m_ada <= m_std + 0.05,
            f"median AttAcc standard {m_std:.3f} vs adaptive {m_ada:.3f} ({100 * (m_ada - m_std):+.1f} pts); "
            f"per seed standard {[round(v, 3) for v in std]} adaptive {[round(v, 3) for v in ada]}")


def test_criterion_9_determinism(tmp_path):
    outputs = []
    for run in ("first", "second"):
        cfg = desk_config(tmp_path / run, tmp_path / f"cache-{run}", seed=5)
        run_pipeline(cfg)
        outputs.append(((tmp_path / run / "metrics.json").read_bytes(),
                        (tmp_path / run / "reconstructions" / "images.bin").read_bytes()))
    same_metrics = outputs[0][0] == outputs[1][0]
    same_recon = outputs[0][1] == outputs[1][1]
    verdict(9, same_metrics and same_recon,
            f"metrics.json identical: {same_metrics}, reconstruction bytes identical: {same_recon}")
