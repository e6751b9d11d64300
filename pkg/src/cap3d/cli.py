"""Command-line pipeline: cluster -> anchors -> coverage / recall / AP.

Subcommands:
  fixture     write a synthetic KITTI-format mini-dataset
  cluster     fit per-class size models and write model JSON files
  anchors     generate (optionally point-filtered) anchor CSVs from models
  coverage    per-class overlap-fraction histograms against dense anchors
  recall      recall versus proposal count from an ingested proposals CSV
  ap          difficulty-bucketed 3D AP from an ingested detections CSV
  bev-render  rasterize one frame's cloud and write a density PNG

Every command is deterministic for fixed inputs and seed: output files
carry no timestamps, JSON keys are sorted, and numeric results are written
with 6 significant digits. Exit status is 0 iff no error was reported.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import anchors as anchors_mod
from . import clustering, evaluation, fixture
from .bev import bev_to_bytes, crop_points, rasterize_bev, render_bev
from .config import METHODS, RunConfig, apply_overrides, load_config
from .errors import Cap3dError
from .kitti_io import FrameDataset

_MODEL_SUBDIR = "models"


def _fmt6(value) -> str:
    return f"{value:.6g}"


def _round6(value):
    """Round every float in a JSON-ready structure to 6 significant digits."""
    if isinstance(value, float):
        return float(_fmt6(value))
    if isinstance(value, dict):
        return {k: _round6(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_round6(v) for v in value]
    return value


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_round6(payload), sort_keys=True, indent=2) + "\n")


def _dataset(cfg: RunConfig) -> FrameDataset:
    if cfg.dataset_root is None:
        raise ValueError("no dataset root configured (use --data or the config file)")
    if cfg.split_file is not None:
        return FrameDataset.from_split_file(cfg.dataset_root, cfg.split_file)
    return FrameDataset.from_directory(cfg.dataset_root)


def _read_ground_truth(ds: FrameDataset) -> dict:
    return {frame_id: ds.read_labels(frame_id) for frame_id in ds.frame_ids}


def _model_path(out_dir: Path, class_name: str, method: str, n: int) -> Path:
    return out_dir / _MODEL_SUBDIR / f"{class_name}_{method}_n{n}.json"


def cmd_fixture(cfg: RunConfig, args) -> int:
    spec = fixture.FixtureSpec(
        num_frames=args.frames,
        objects_per_frame=args.objects,
        seed=cfg.seed,
    )
    root = fixture.generate_fixture(Path(cfg.out_dir), spec)
    print(f"fixture: {spec.num_frames} frames, {spec.objects_per_frame} objects/frame -> {root}")
    return 0


def _fit_model(samples, n, cfg: RunConfig):
    if cfg.method == "kmeans":
        return clustering.kmeans_fit(samples, n, cfg.cluster)
    return clustering.gmm_fit(samples, n, cfg.cluster)


def cmd_cluster(cfg: RunConfig, args) -> int:
    ds = _dataset(cfg)
    out_dir = Path(cfg.out_dir)
    wrote = 0
    for class_name in cfg.classes:
        samples = clustering.collect_dimensions(ds, class_name)
        if not samples:
            print(f"cluster: {class_name}: no samples, skipped")
            continue
        for n in cfg.n_list:
            model = _fit_model(samples, n, cfg)
            path = _model_path(out_dir, class_name, cfg.method, n)
            path.parent.mkdir(parents=True, exist_ok=True)
            clustering.write_model_json(model, cfg.cluster.seed, path)
            wrote += 1
            sizes = clustering.anchor_sizes_from_model(model)
            rendered = "  ".join(
                f"({_fmt6(l)}, {_fmt6(h)}, {_fmt6(w)})" for l, h, w in sizes
            )
            print(f"cluster: {class_name} {cfg.method} n={n} ({len(samples)} samples): {rendered}")
    print(f"cluster: wrote {wrote} model files under {out_dir / _MODEL_SUBDIR}")
    return 0


def _load_models(cfg: RunConfig, args) -> list[clustering.LoadedModel]:
    if getattr(args, "models", None):
        paths = [Path(p) for p in args.models]
    else:
        model_dir = Path(cfg.out_dir) / _MODEL_SUBDIR
        paths = sorted(model_dir.glob("*.json"))
        if not paths:
            raise ValueError(f"no model files under {model_dir} (run `cluster` first)")
    models = [clustering.read_model_json(p) for p in paths]
    if not getattr(args, "models", None):
        models = [
            m
            for m in models
            if m.class_name in cfg.classes and m.method == cfg.method and m.n in cfg.n_list
        ]
        if not models:
            raise ValueError("no model files match the configured classes/method/n")
    return models


def cmd_anchors(cfg: RunConfig, args) -> int:
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    acfg = cfg.anchor
    nx, nz = acfg.grid_counts
    for model in _load_models(cfg, args):
        aset = anchors_mod.generate_anchors(model.sizes, acfg, model.class_name)
        unfiltered = len(aset)
        filtered = acfg.filter_empty or args.filter_empty
        if filtered:
            if args.frame is None:
                raise ValueError("--frame is required to filter empty anchors")
            ds = _dataset(cfg)
            pc = crop_points(ds.read_points_rect(args.frame), cfg.bev)
            aset = anchors_mod.filter_empty_anchors(aset, pc, cfg.bev.resolution)
        stem = f"anchors_{model.class_name}_{model.method}_n{model.n}"
        if args.frame is not None:
            stem += f"_{args.frame}"
        anchors_mod.write_anchor_csv(aset, out_dir / f"{stem}.csv")
        meta = {
            "class": model.class_name,
            "method": model.method,
            "n": model.n,
            "stride": acfg.stride,
            "locations": nx * nz,
            "orientations": len(acfg.orientations),
            "count": len(aset),
            "unfiltered_count": unfiltered,
            "filtered": bool(filtered),
            "counts_by_cluster": {str(k): v for k, v in aset.counts_by_cluster.items()},
        }
        _write_json(out_dir / f"{stem}.meta.json", meta)
        print(f"anchors: {stem}: {len(aset)} anchors ({unfiltered} unfiltered)")
    return 0


_COVERAGE_CTX: dict = {}


def _init_coverage_worker(aset, class_name, bev_cfg):
    _COVERAGE_CTX["args"] = (aset, class_name, bev_cfg)


def _coverage_frame_worker(item):
    frame_id, labels = item
    aset, class_name, bev_cfg = _COVERAGE_CTX["args"]
    per_frame, excluded = evaluation.overlap_fractions_by_frame(
        {frame_id: labels}, aset, class_name, bev_cfg
    )
    return per_frame[frame_id], excluded


def _coverage_fractions(cfg: RunConfig, gts, aset, class_name):
    """Per-GT overlap fractions over all frames, in frame order."""
    items = [(frame_id, gts[frame_id]) for frame_id in sorted(gts)]
    jobs = cfg.jobs
    if jobs == 1 or len(items) <= 1:
        per_frame, excluded = evaluation.overlap_fractions_by_frame(
            gts, aset, class_name, cfg.bev
        )
        return [f for fid in sorted(per_frame) for f in per_frame[fid]], excluded
    workers = jobs if jobs > 0 else None  # None -> one per CPU
    with ProcessPoolExecutor(
        max_workers=workers,
        initializer=_init_coverage_worker,
        initargs=(aset, class_name, cfg.bev),
    ) as pool:
        results = list(pool.map(_coverage_frame_worker, items))
    fractions = [f for frame_fractions, _ in results for f in frame_fractions]
    excluded = sum(e for _, e in results)
    return fractions, excluded


def cmd_coverage(cfg: RunConfig, args) -> int:
    ds = _dataset(cfg)
    gts = _read_ground_truth(ds)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary_rows = []
    for model in _load_models(cfg, args):
        dense = anchors_mod.generate_anchors(model.sizes, cfg.anchor, model.class_name)
        if cfg.anchor.filter_empty:
            source = {
                fid: anchors_mod.filter_empty_anchors(
                    dense, crop_points(ds.read_points_rect(fid), cfg.bev), cfg.bev.resolution
                )
                for fid in ds.frame_ids
            }
            per_frame, excluded = evaluation.overlap_fractions_by_frame(
                gts, source, model.class_name, cfg.bev
            )
            fractions = [f for fid in sorted(per_frame) for f in per_frame[fid]]
        else:
            fractions, excluded = _coverage_fractions(cfg, gts, dense, model.class_name)
        hist = evaluation.histogram_from_fractions(
            fractions, model.class_name, model.n, num_excluded=excluded
        )
        path = out_dir / f"coverage_{model.class_name}_{model.method}_n{model.n}.json"
        _write_json(path, hist.to_dict())
        frac85 = hist.frac_above.get(0.85)
        summary_rows.append(
            [
                model.class_name,
                model.method,
                str(model.n),
                str(hist.num_gt),
                str(hist.num_excluded),
                "" if hist.mean_overlap is None else _fmt6(hist.mean_overlap),
                "" if frac85 is None else _fmt6(frac85),
            ]
        )
        shown = "empty" if hist.empty else f"mean={_fmt6(hist.mean_overlap)} frac>=0.85={_fmt6(frac85)}"
        print(f"coverage: {model.class_name} {model.method} n={model.n}: {shown}")
    header = "class,method,n,num_gt,num_excluded,mean_overlap,frac_above_0.85\n"
    (out_dir / "coverage_summary.csv").write_text(
        header + "".join(",".join(row) + "\n" for row in summary_rows)
    )
    return 0


def cmd_recall(cfg: RunConfig, args) -> int:
    ds = _dataset(cfg)
    gts = _read_ground_truth(ds)
    proposals = evaluation.ingest_proposals(args.proposals)
    ns = [int(v) for v in args.ns.split(",")] if args.ns else list(evaluation.DEFAULT_RECALL_NS)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["class,n_proposals,recall\n"]
    for class_name in cfg.classes:
        curve = evaluation.recall_at_n(
            proposals, gts, class_name, args.iou, ns, bev_cfg=cfg.bev
        )
        _write_json(out_dir / f"recall_{class_name}.json", curve.to_dict())
        for n, r in curve.points:
            lines.append(f"{class_name},{n},{_fmt6(r)}\n")
        shown = " ".join(f"{n}:{_fmt6(r)}" for n, r in curve.points)
        print(f"recall: {class_name} ({curve.num_gt} gt): {shown}")
    (out_dir / "recall.csv").write_text("".join(lines))
    return 0


def cmd_ap(cfg: RunConfig, args) -> int:
    ds = _dataset(cfg)
    gts = _read_ground_truth(ds)
    detections = evaluation.ingest_detections(args.detections)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    buckets = (
        evaluation.Difficulty.EASY,
        evaluation.Difficulty.MODERATE,
        evaluation.Difficulty.HARD,
    )
    results = []
    for class_name in cfg.classes:
        for difficulty in buckets:
            res = evaluation.average_precision(
                detections, gts, class_name, difficulty, args.iou, args.interp, cfg.bev
            )
            results.append(res)
            shown = "n/a" if res.ap is None else _fmt6(res.ap)
            print(
                f"ap: {class_name} {difficulty.name.lower()} ({res.num_gt} gt, "
                f"{res.num_detections} det): {shown}"
            )
    _write_json(out_dir / "ap_results.json", [r.to_dict() for r in results])
    source = Path(args.detections).stem
    header = ["source"] + [
        f"{r.class_name}_{r.difficulty.name.lower()}" for r in results
    ]
    row = [source] + ["" if r.ap is None else _fmt6(r.ap) for r in results]
    (out_dir / "ap_table.csv").write_text(
        ",".join(header) + "\n" + ",".join(row) + "\n"
    )
    return 0


def cmd_bev_render(cfg: RunConfig, args) -> int:
    ds = _dataset(cfg)
    pc = crop_points(ds.read_points_rect(args.frame), cfg.bev)
    bev = rasterize_bev(pc, cfg.bev)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    png_path = out_dir / f"bev_{args.frame}.png"
    png_path.write_bytes(render_bev(bev))
    print(f"bev-render: {args.frame}: {int(bev.counts.sum())} points -> {png_path}")
    if args.export_bin:
        bin_path = out_dir / f"bev_{args.frame}.bin"
        bin_path.write_bytes(bev_to_bytes(bev))
        print(f"bev-render: wrote {bin_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration file")
    common.add_argument("--data", help="dataset root (KITTI layout)")
    common.add_argument("--split", help="split file of frame ids")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("--jobs", type=int, help="worker count (0 = one per CPU)")
    common.add_argument("--classes", help="comma-separated class names")
    common.add_argument("--method", choices=METHODS, help="clustering method")
    common.add_argument("--n", help="comma-separated cluster counts")

    parser = argparse.ArgumentParser(
        prog="cap3d",
        description="Class-specific anchor sizing and 3D proposal evaluation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fixture", parents=[common], help="write a synthetic dataset")
    p.add_argument("--frames", type=int, default=20)
    p.add_argument("--objects", type=int, default=3, help="objects per frame")

    sub.add_parser("cluster", parents=[common], help="fit size models")

    p = sub.add_parser("anchors", parents=[common], help="export anchor CSVs")
    p.add_argument("--models", nargs="*", help="model JSON files (default: all fitted)")
    p.add_argument("--frame", help="frame id for point-based filtering")
    p.add_argument("--filter-empty", action="store_true", dest="filter_empty")

    p = sub.add_parser("coverage", parents=[common], help="overlap-fraction histograms")
    p.add_argument("--models", nargs="*", help="model JSON files (default: all fitted)")

    p = sub.add_parser("recall", parents=[common], help="recall vs proposal count")
    p.add_argument("--proposals", required=True, help="proposals CSV")
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--ns", help="comma-separated proposal counts")

    p = sub.add_parser("ap", parents=[common], help="difficulty-bucketed 3D AP")
    p.add_argument("--detections", required=True, help="detections CSV")
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--interp", choices=("R11", "R40"), default="R11")

    p = sub.add_parser("bev-render", parents=[common], help="render a BEV density PNG")
    p.add_argument("--frame", required=True, help="frame id")
    p.add_argument("--export-bin", action="store_true", dest="export_bin")

    return parser


_COMMANDS = {
    "fixture": cmd_fixture,
    "cluster": cmd_cluster,
    "anchors": cmd_anchors,
    "coverage": cmd_coverage,
    "recall": cmd_recall,
    "ap": cmd_ap,
    "bev-render": cmd_bev_render,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        cfg = apply_overrides(
            cfg,
            data=args.data,
            split=args.split,
            out=args.out,
            seed=args.seed,
            jobs=args.jobs,
            classes=args.classes,
            method=args.method,
            n=args.n,
        )
        return _COMMANDS[args.command](cfg, args)
    except (Cap3dError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
