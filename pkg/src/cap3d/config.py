"""Declarative run configuration: one YAML file plus flag overrides.

Defaults reproduce the documented pipeline constants (0.1 m BEV cells over
[-40, 40] x [0, 80] m, density saturation at 16 points, 0.5 m anchor
stride, IoU threshold 0.5 downstream). Unknown keys are rejected so typos
fail loudly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import yaml

from .anchors import AnchorConfig
from .bev import BevConfig
from .clustering import ClusterConfig, InitScheme

METHODS = ("kmeans", "gmm")

_TOP_KEYS = {
    "dataset_root", "split_file", "classes", "method", "n", "out_dir",
    "seed", "jobs", "bev", "anchor", "cluster",
}
_BEV_KEYS = {"x_range", "z_range", "resolution", "num_slices", "height_range", "density_norm"}
_ANCHOR_KEYS = {"stride", "x_range", "z_range", "ground_plane_y", "filter_empty"}
_CLUSTER_KEYS = {"max_iterations", "tolerance", "seed", "covariance_floor", "init"}


@dataclass(frozen=True)
class RunConfig:
    dataset_root: Optional[str] = None
    split_file: Optional[str] = None
    classes: tuple[str, ...] = ("Car", "Pedestrian", "Cyclist")
    method: str = "kmeans"
    n_list: tuple[int, ...] = (1, 2, 3, 4, 5)
    out_dir: str = "out"
    seed: int = 0
    jobs: int = 0  # 0 = one worker per CPU
    bev: BevConfig = field(default_factory=BevConfig)
    anchor: AnchorConfig = field(default_factory=AnchorConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)

    def __post_init__(self):
        if not self.classes:
            raise ValueError("classes must be non-empty")
        if self.method not in METHODS:
            raise ValueError(f"method {self.method!r} not in {METHODS}")
        if not self.n_list or any(n < 1 for n in self.n_list):
            raise ValueError(f"cluster counts {self.n_list} must all be >= 1")
        if self.jobs < 0:
            raise ValueError(f"jobs {self.jobs} must be >= 0")
        if self.dataset_root is not None and not Path(self.dataset_root).exists():
            raise ValueError(f"dataset root {self.dataset_root} does not exist")
        if self.split_file is not None and not Path(self.split_file).exists():
            raise ValueError(f"split file {self.split_file} does not exist")


def _check_keys(section: dict, allowed: set, where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ValueError(f"unknown {where} config keys: {sorted(unknown)}")


def _pair(value) -> tuple[float, float]:
    lo, hi = value
    return (float(lo), float(hi))


def load_config(path: Optional[str | Path] = None) -> RunConfig:
    """Build a RunConfig from a YAML file (or pure defaults)."""
    if path is None:
        return RunConfig()
    raw = yaml.safe_load(Path(path).read_text())
    if raw is None:
        return RunConfig()
    if not isinstance(raw, dict):
        raise ValueError(f"config root must be a mapping, got {type(raw).__name__}")
    _check_keys(raw, _TOP_KEYS, "top-level")

    bev_raw = dict(raw.get("bev") or {})
    _check_keys(bev_raw, _BEV_KEYS, "bev")
    for key in ("x_range", "z_range", "height_range"):
        if key in bev_raw:
            bev_raw[key] = _pair(bev_raw[key])
    bev = BevConfig(**bev_raw)

    anchor_raw = dict(raw.get("anchor") or {})
    _check_keys(anchor_raw, _ANCHOR_KEYS, "anchor")
    for key in ("x_range", "z_range"):
        # Anchors cover the BEV crop unless explicitly overridden.
        anchor_raw[key] = _pair(anchor_raw[key]) if key in anchor_raw else getattr(bev, key)
    anchor = AnchorConfig(**anchor_raw)

    cluster_raw = dict(raw.get("cluster") or {})
    _check_keys(cluster_raw, _CLUSTER_KEYS, "cluster")
    if "init" in cluster_raw:
        cluster_raw["init"] = InitScheme(cluster_raw["init"])
    if "seed" not in cluster_raw:
        cluster_raw["seed"] = int(raw.get("seed", 0))
    cluster = ClusterConfig(**cluster_raw)

    classes = raw.get("classes")
    n_list = raw.get("n")
    return RunConfig(
        dataset_root=raw.get("dataset_root"),
        split_file=raw.get("split_file"),
        classes=tuple(classes) if classes else RunConfig.classes,
        method=raw.get("method", RunConfig.method),
        n_list=tuple(int(n) for n in n_list) if n_list else RunConfig.n_list,
        out_dir=str(raw.get("out_dir", RunConfig.out_dir)),
        seed=int(raw.get("seed", RunConfig.seed)),
        jobs=int(raw.get("jobs", RunConfig.jobs)),
        bev=bev,
        anchor=anchor,
        cluster=cluster,
    )


def apply_overrides(
    cfg: RunConfig,
    data: Optional[str] = None,
    split: Optional[str] = None,
    out: Optional[str] = None,
    seed: Optional[int] = None,
    jobs: Optional[int] = None,
    classes: Optional[str] = None,
    method: Optional[str] = None,
    n: Optional[str] = None,
) -> RunConfig:
    """Apply command-line flag overrides on top of a loaded config.

    ``classes`` and ``n`` are comma-separated strings as typed on the
    command line. ``seed`` also reseeds clustering unless the config file
    pinned cluster.seed separately (flags are the outermost layer).
    """
    updates = {}
    if data is not None:
        updates["dataset_root"] = data
    if split is not None:
        updates["split_file"] = split
    if out is not None:
        updates["out_dir"] = out
    if jobs is not None:
        updates["jobs"] = jobs
    if classes is not None:
        updates["classes"] = tuple(c for c in (s.strip() for s in classes.split(",")) if c)
    if method is not None:
        updates["method"] = method
    if n is not None:
        updates["n_list"] = tuple(int(v) for v in n.split(","))
    if seed is not None:
        updates["seed"] = seed
        updates["cluster"] = replace(cfg.cluster, seed=seed)
    return replace(cfg, **updates) if updates else cfg
