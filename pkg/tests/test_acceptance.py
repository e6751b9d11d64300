"""Acceptance suite: one test per release criterion, each printing PASS/FAIL.

Criteria cover density-formula exactness, clustering monotonicity and
optimality against exhaustive enumeration, geometric IoU against dense
rasterization and Monte-Carlo integration, AP against a first-principles
PR-envelope computation, the coverage-vs-cluster-count trend, the dense
anchor count band, closed-form recall semantics, and a timed deterministic
end-to-end pipeline run.
"""

import hashlib
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from cap3d.anchors import AnchorConfig, generate_anchors
from cap3d.bev import density_encode
from cap3d.cli import main
from cap3d.clustering import (
    anchor_sizes_from_model,
    collect_dimensions,
    gmm_fit,
    kmeans_fit,
    write_model_json,
)
from cap3d.evaluation import (
    DetectionSet,
    Difficulty,
    EvalBox,
    ProposalSet,
    average_precision,
    box3d_from_label,
    coverage_histogram,
    recall_at_n,
)
from cap3d.geometry import Box3D, OrientedBox2D, box_corners, iou_bev, polygon_intersection_area
from cap3d.kitti_io import ObjectLabel

from oracles import (
    R11_GRID,
    R40_GRID,
    brute_force_ap,
    exhaustive_kmeans_objective,
    monte_carlo_intersection_area,
    raster_iou_bev,
)


def report(num: int, name: str, ok: bool, detail: str) -> None:
    line = f"[criterion {num}] {name}: {'PASS' if ok else 'FAIL'} ({detail})"
    print(line)
    assert ok, line


def make_label(x, z, bbox_height=50.0, dims=(1.8, 0.6, 0.9), yaw=0.0):
    return ObjectLabel(
        class_name="Pedestrian",
        truncation=0.0,
        occlusion=0,
        alpha=0.0,
        bbox2d=(100.0, 100.0, 160.0, 100.0 + bbox_height),
        dims=dims,
        location=(x, 1.65, z),
        rotation_y=yaw,
    )


def make_box(x, z, dims=(1.8, 0.6, 0.9), yaw=0.0):
    h, w, l = dims
    return Box3D(OrientedBox2D((x, z), (l / 2.0, w / 2.0), yaw), y_bottom=-1.65, height=h)


def test_criterion_1_density_formula_bit_exact():
    values = density_encode(np.array([0.0, 3.0, 15.0]))
    expected = np.array([0.0, 0.5, 1.0])
    err = float(np.abs(values - expected).max())
    report(1, "density formula bit-exactness", err < 1e-12, f"max |err| {err:.1e}")


def test_criterion_2_clustering_monotonicity():
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    kmeans_rises = 0
    gmm_drops = 0
    for _ in range(50):
        m = int(rng.integers(10, 501))
        n = int(rng.integers(1, 6))
        centers = rng.uniform(0.5, 4.0, (n, 3))
        sigma = rng.uniform(0.05, 0.25)
        x = centers[rng.integers(0, n, m)] + rng.normal(0.0, sigma, (m, 3))
        km = kmeans_fit(x, n)
        kmeans_rises += sum(
            b > a for a, b in zip(km.objective_history, km.objective_history[1:])
        )
        gm = gmm_fit(x, n)
        gmm_drops += sum(
            b < a - 1e-9 * max(1.0, abs(a))
            for a, b in zip(gm.loglik_history, gm.loglik_history[1:])
        )
    elapsed = time.perf_counter() - start
    ok = kmeans_rises == 0 and gmm_drops == 0 and elapsed < 5.0
    report(
        2,
        "clustering monotonicity on 50 random sets",
        ok,
        f"objective rises {kmeans_rises}, loglik drops {gmm_drops}, {elapsed:.2f}s < 5s",
    )


def test_criterion_3_kmeans_exhaustive_oracle():
    rng = np.random.default_rng(6)
    start = time.perf_counter()
    optimal = 0
    worst_gap = 0.0
    for idx in range(20):
        m = int(rng.integers(6, 13))
        n = int(rng.integers(1, 4))
        centers = rng.uniform(0.5, 3.0, (n, 3))
        while n > 1 and min(
            float(np.linalg.norm(centers[a] - centers[b]))
            for a in range(n)
            for b in range(a + 1, n)
        ) < 1.0:
            centers = rng.uniform(0.5, 3.0, (n, 3))
        sigma = rng.uniform(0.04, 0.20)
        x = centers[rng.integers(0, n, m)] + rng.normal(0.0, sigma, (m, 3))
        model = kmeans_fit(x, n)
        optimum = exhaustive_kmeans_objective(x, n)
        gap = 0.0 if optimum == 0.0 else (model.objective - optimum) / optimum
        worst_gap = max(worst_gap, gap)
        if gap <= 1e-9:
            optimal += 1
        else:
            print(
                f"[criterion 3] instance {idx} (m={m}, n={n}) not optimal: "
                f"objective {model.objective:.6g} vs optimum {optimum:.6g} "
                f"(gap {100 * gap:.2f}%)"
            )
    elapsed = time.perf_counter() - start
    ok = optimal >= 18 and worst_gap <= 0.05 and elapsed < 60.0
    report(
        3,
        "k-means equals exhaustive optimum",
        ok,
        f"{optimal}/20 optimal, worst gap {100 * worst_gap:.2f}% <= 5%, {elapsed:.2f}s < 60s",
    )


def test_criterion_4_geometry_oracles():
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        a = OrientedBox2D(
            (float(rng.uniform(-1, 1)), float(rng.uniform(-1, 1))),
            (float(rng.uniform(0.2, 1.2)), float(rng.uniform(0.2, 1.2))),
            float(rng.uniform(-math.pi, math.pi)),
        )
        b = OrientedBox2D(
            (float(rng.uniform(-1, 1)), float(rng.uniform(-1, 1))),
            (float(rng.uniform(0.2, 1.2)), float(rng.uniform(0.2, 1.2))),
            float(rng.uniform(-math.pi, math.pi)),
        )
        worst = max(worst, abs(iou_bev(a, b) - raster_iou_bev(a, b)))

    square = box_corners(OrientedBox2D((0.0, 0.0), (0.5, 0.5), 0.0))
    rotated = box_corners(OrientedBox2D((0.0, 0.0), (0.5, 0.5), math.pi / 4.0))
    area = polygon_intersection_area(square, rotated)
    mc = monte_carlo_intersection_area(
        np.asarray(square), np.asarray(rotated), num_samples=1_000_000, seed=0
    )
    exact = 2.0 * (math.sqrt(2.0) - 1.0)
    mc_err = abs(area - mc)
    elapsed = time.perf_counter() - start
    ok = worst < 5e-3 and mc_err < 2e-3 and abs(area - exact) < 1e-12 and elapsed < 30.0
    report(
        4,
        "IoU vs 1mm raster and Monte-Carlo oracles",
        ok,
        f"worst raster diff {worst:.1e} < 5e-3, MC diff {mc_err:.1e} < 2e-3, {elapsed:.2f}s < 30s",
    )


def random_ap_instance(rng):
    """<= 10 GT and <= 20 detections spread over one to three frames."""
    gts, frames = {}, {}
    gt_budget, det_budget = 10, 20
    for f in range(int(rng.integers(1, 4))):
        fid = f"{f:06d}"
        labs = []
        for _ in range(min(int(rng.integers(0, 5)), gt_budget)):
            labs.append(
                make_label(
                    x=float(rng.uniform(-30.0, 30.0)),
                    z=float(rng.uniform(5.0, 70.0)),
                    yaw=float(rng.uniform(-math.pi, math.pi)),
                    bbox_height=float(rng.choice((50.0, 30.0, 10.0))),
                )
            )
        gt_budget -= len(labs)
        gts[fid] = labs
        entries = []
        for _ in range(min(int(rng.integers(0, 8)), det_budget)):
            score = float(rng.integers(0, 11)) / 10.0
            if labs and rng.random() < 0.7:
                target = labs[int(rng.integers(0, len(labs)))]
                x, _, z = target.location
                dx, dz = rng.uniform(-0.4, 0.4, 2)
                box = make_box(x + float(dx), z + float(dz), yaw=target.rotation_y)
            else:
                box = make_box(
                    float(rng.uniform(-30.0, 30.0)), float(rng.uniform(5.0, 70.0))
                )
            entries.append(EvalBox(fid, "Pedestrian", box, score=score))
        det_budget -= len(entries)
        frames[fid] = tuple(entries)
    return gts, DetectionSet(frames=frames)


def test_criterion_5_ap_oracle_equivalence():
    rng = np.random.default_rng(17)
    start = time.perf_counter()
    worst = 0.0
    compared = 0
    for _ in range(100):
        gts, dset = random_ap_instance(rng)
        dets_by_frame = {
            fid: [(e.score, e.box) for e in entries]
            for fid, entries in dset.frames.items()
        }
        gt_by_frame = {
            fid: [
                (box3d_from_label(lab), True)
                if lab.bbox_height_px >= 25.0
                else (box3d_from_label(lab), False)
                for lab in labs
            ]
            for fid, labs in gts.items()
        }
        for interp, grid in (("R11", R11_GRID), ("R40", R40_GRID)):
            result = average_precision(
                dset, gts, "Pedestrian", Difficulty.MODERATE, interpolation=interp
            )
            expected = brute_force_ap(dets_by_frame, gt_by_frame, 0.5, grid)
            assert (result.ap is None) == (expected is None)
            if expected is not None:
                worst = max(worst, abs(result.ap - expected))
                compared += 1
    elapsed = time.perf_counter() - start
    ok = worst < 1e-9 and elapsed < 10.0
    report(
        5,
        "AP equals brute-force envelope on 100 instances",
        ok,
        f"{compared} R11/R40 values, worst |diff| {worst:.1e} < 1e-9, {elapsed:.2f}s < 10s",
    )


def test_criterion_6_coverage_trend(dataset, gts_by_frame):
    start = time.perf_counter()
    samples = collect_dimensions(dataset, "Pedestrian")
    outcomes = {}
    for method, fit in (("kmeans", kmeans_fit), ("gmm", gmm_fit)):
        series = []
        for n in range(1, 6):
            sizes = anchor_sizes_from_model(fit(samples, n))
            aset = generate_anchors(sizes, AnchorConfig(), "Pedestrian")
            hist = coverage_histogram(gts_by_frame, aset, "Pedestrian", n_clusters=n)
            series.append(hist.frac_above[0.85])
        outcomes[method] = series
    elapsed = time.perf_counter() - start
    ok = elapsed < 60.0
    for method, series in outcomes.items():
        ok = ok and series[1] > series[0]
        ok = ok and all(b >= a for a, b in zip(series[1:], series[2:]))
    shown = "; ".join(
        f"{m} " + "->".join(f"{v:.3f}" for v in s) for m, s in outcomes.items()
    )
    report(6, "frac_above(0.85) rises with cluster count", ok, f"{shown}, {elapsed:.2f}s < 60s")


def test_criterion_7_anchor_count_band(dataset, tmp_path):
    counts = {}
    for n in range(1, 6):
        sizes = [(1.0 + 0.1 * i, 1.6, 0.8 + 0.05 * i) for i in range(n)]
        counts[n] = len(generate_anchors(sizes, AnchorConfig(), "Pedestrian"))
    in_band = all(51_200 <= c <= 256_000 for c in counts.values())

    samples = collect_dimensions(dataset, "Pedestrian")
    model_path = tmp_path / "Pedestrian_kmeans_n2.json"
    write_model_json(kmeans_fit(samples, 2), 0, model_path)
    code = main(
        ["anchors", "--out", str(tmp_path), "--models", str(model_path)]
    )
    meta = json.loads((tmp_path / "anchors_Pedestrian_kmeans_n2.meta.json").read_text())
    ok = (
        counts[2] == 102_400
        and in_band
        and code == 0
        and meta["count"] == 102_400
        and meta["locations"] * meta["orientations"] * 2 == 102_400
    )
    report(
        7,
        "dense anchor counts land in the documented band",
        ok,
        f"n=2 count {counts[2]}, n=1..5 {sorted(counts.values())} within [51200, 256000], "
        f"metadata count {meta['count']}",
    )


def test_criterion_8_recall_semantics():
    gts = {"000000": [make_label(x=-16.0 + 8.0 * i, z=20.0) for i in range(5)]}
    entries = []
    for pos in range(1, 11):
        if pos % 2 == 0:
            x, _, z = gts["000000"][pos // 2 - 1].location
            entries.append(EvalBox("000000", "Pedestrian", make_box(x, z), rank=pos))
        else:
            entries.append(
                EvalBox("000000", "Pedestrian", make_box(-30.0 + 2.0 * pos, 60.0), rank=pos)
            )
    curve = recall_at_n(
        ProposalSet(frames={"000000": tuple(entries)}), gts, "Pedestrian", ns=range(1, 11)
    )
    expected = ((1, 0.0), (2, 0.2), (3, 0.2), (4, 0.4), (5, 0.4),
                (6, 0.6), (7, 0.6), (8, 0.8), (9, 0.8), (10, 1.0))
    step_ok = curve.points == expected

    rng = np.random.default_rng(23)
    monotone_ok = True
    for _ in range(50):
        rand_gts, frames = {}, {}
        for f in range(2):
            fid = f"{f:06d}"
            labs = [
                make_label(
                    x=float(rng.uniform(-30.0, 30.0)), z=float(rng.uniform(5.0, 70.0))
                )
                for _ in range(int(rng.integers(1, 5)))
            ]
            rand_gts[fid] = labs
            props = []
            for rank in range(1, int(rng.integers(2, 9))):
                target = labs[int(rng.integers(0, len(labs)))]
                x, _, z = target.location
                dx, dz = rng.uniform(-0.4, 0.4, 2)
                props.append(
                    EvalBox(
                        fid, "Pedestrian", make_box(x + float(dx), z + float(dz)), rank=rank
                    )
                )
            frames[fid] = tuple(props)
        values = [
            r
            for _, r in recall_at_n(
                ProposalSet(frames=frames), rand_gts, "Pedestrian", ns=[1, 2, 4, 8, 16]
            ).points
        ]
        monotone_ok = monotone_ok and values == sorted(values)
    ok = step_ok and monotone_ok
    report(
        8,
        "recall step fixture exact and monotone in N",
        ok,
        f"step curve {'exact' if step_ok else 'WRONG'}, 50 random curves monotone: {monotone_ok}",
    )


def tree_digest(root: Path) -> dict:
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


def test_criterion_9_end_to_end_determinism(tmp_path):
    def run(out: Path) -> float:
        base = [
            "--data", str(out), "--out", str(out), "--classes", "Pedestrian",
            "--method", "kmeans", "--n", "1,2", "--jobs", "1", "--seed", "0",
        ]
        start = time.perf_counter()
        assert main(["fixture", "--out", str(out), "--seed", "0", "--frames", "20"]) == 0
        assert main(["cluster", *base]) == 0
        assert main(["coverage", *base]) == 0
        assert main(["ap", *base, "--detections", str(out / "detections.csv")]) == 0
        return time.perf_counter() - start

    first = run(tmp_path / "a")
    second = run(tmp_path / "b")
    identical = tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
    ok = identical and first < 10.0 and second < 10.0
    report(
        9,
        "20-frame pipeline is fast and deterministic",
        ok,
        f"runs {first:.2f}s/{second:.2f}s < 10s, byte-identical: {identical}",
    )
