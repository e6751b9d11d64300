"""Per-class clustering of object dimensions into anchor sizes.

Each ground-truth object of a class contributes a sample x = (L, H, W) in
meters. K-means (Lloyd) or a full-covariance Gaussian mixture fitted by EM
groups the samples; the cluster means become the class's anchor sizes.

Fits are deterministic functions of (samples, n, config). K-means uses
farthest-point seeding from the lexicographically smallest (l, h, w)
sample, so results are independent of sample order; the seeded-random
scheme trades that for classic random restarts.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .errors import DegenerateComponentError, NumericalError
from .kitti_io import DONT_CARE, FrameDataset

_LOG_2PI = math.log(2.0 * math.pi)


class InitScheme(enum.Enum):
    FARTHEST_POINT = "farthest_point"
    SEEDED_RANDOM = "seeded_random"


@dataclass(frozen=True)
class ClusterConfig:
    max_iterations: int = 300
    tolerance: float = 1e-6  # relative objective / log-likelihood change
    seed: int = 0
    covariance_floor: float = 1e-6  # eigenvalue floor for GMM covariances
    init: InitScheme = InitScheme.FARTHEST_POINT

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError(f"max_iterations {self.max_iterations} must be >= 1")
        if not self.tolerance > 0:
            raise ValueError(f"tolerance {self.tolerance} must be positive")
        if not self.covariance_floor > 0:
            raise ValueError(f"covariance_floor {self.covariance_floor} must be positive")


@dataclass(frozen=True)
class DimensionSample:
    """Object dimensions in (length, height, width) order, meters."""

    l: float
    h: float
    w: float
    class_name: str

    def __post_init__(self):
        if not (self.l > 0 and self.h > 0 and self.w > 0):
            raise ValueError(f"non-positive dimensions {(self.l, self.h, self.w)}")

    @property
    def vector(self) -> np.ndarray:
        return np.array([self.l, self.h, self.w], dtype=np.float64)


@dataclass(frozen=True)
class KMeansModel:
    class_name: str
    n: int
    centroids: np.ndarray  # (n, 3); each is the mean of its assigned samples
    assignments: np.ndarray  # (m,) cluster index per input sample
    objective: float  # final within-cluster sum of squares
    iterations_run: int
    objective_history: tuple[float, ...]  # objective after each iteration

    def __post_init__(self):
        for arr in (self.centroids, self.assignments):
            arr.setflags(write=False)
        if self.objective < 0:
            raise ValueError(f"negative objective {self.objective}")


@dataclass(frozen=True)
class GmmModel:
    class_name: str
    n: int
    weights: np.ndarray  # (n,), sums to 1
    means: np.ndarray  # (n, 3)
    covariances: np.ndarray  # (n, 3, 3) symmetric, eigenvalues >= floor
    log_likelihood: float
    iterations_run: int
    loglik_history: tuple[float, ...]  # includes the initial value

    def __post_init__(self):
        for arr in (self.weights, self.means, self.covariances):
            arr.setflags(write=False)
        if abs(float(self.weights.sum()) - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {self.weights.sum()}, want 1")
        if np.abs(self.covariances - np.transpose(self.covariances, (0, 2, 1))).max() > 1e-9:
            raise ValueError("covariances are not symmetric")


def collect_dimensions(ds: FrameDataset, class_name: str) -> list[DimensionSample]:
    """One (L, H, W) sample per ground-truth object of ``class_name``.

    Frame order (then in-file order) is preserved; DontCare entries never
    match. Unreadable frames raise an error naming the frame.
    """
    samples = []
    for frame_id in ds.frame_ids:
        for label in ds.read_labels(frame_id):
            if label.class_name != class_name or label.class_name == DONT_CARE:
                continue
            h, w, l = label.dims
            samples.append(DimensionSample(l=l, h=h, w=w, class_name=class_name))
    return samples


def _as_matrix(samples: Sequence[DimensionSample]) -> tuple[np.ndarray, str]:
    if len(samples) == 0:
        raise ValueError("no samples to cluster")
    if isinstance(samples, np.ndarray):
        x = np.asarray(samples, dtype=np.float64)
        return x, ""
    names = {s.class_name for s in samples}
    if len(names) > 1:
        raise ValueError(f"samples mix classes {sorted(names)}")
    x = np.array([[s.l, s.h, s.w] for s in samples], dtype=np.float64)
    return x, names.pop()


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - centers[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _lex_order(x: np.ndarray) -> np.ndarray:
    # Ascending by (l, h, w); np.lexsort sorts by the *last* key first.
    return np.lexsort((x[:, 2], x[:, 1], x[:, 0]))


def _pick_lex_smallest(candidates: np.ndarray, x: np.ndarray) -> int:
    """Among candidate row indices, the one with smallest (l, h, w) value.

    Value-based tie-breaking keeps seeding invariant under permutations of
    the sample order.
    """
    sub = x[candidates]
    return int(candidates[_lex_order(sub)[0]])


def _init_centroids(x: np.ndarray, n: int, cfg: ClusterConfig) -> np.ndarray:
    m = x.shape[0]
    if cfg.init is InitScheme.SEEDED_RANDOM:
        rng = np.random.default_rng(cfg.seed)
        idx = rng.choice(m, size=n, replace=False)
        return x[idx].copy()
    # Farthest-point: start at the lexicographically smallest sample (which
    # has the smallest L), then greedily add the sample farthest from the
    # chosen set, breaking distance ties by smallest (l, h, w).
    first = int(_lex_order(x)[0])
    chosen = [first]
    dmin = _sq_dists(x, x[first][None, :])[:, 0]
    while len(chosen) < n:
        far = dmin.max()
        candidates = np.flatnonzero(dmin == far)
        nxt = _pick_lex_smallest(candidates, x)
        chosen.append(nxt)
        dmin = np.minimum(dmin, _sq_dists(x, x[nxt][None, :])[:, 0])
    return x[chosen].copy()


def _fill_empty_clusters(
    x: np.ndarray, centroids: np.ndarray, labels: np.ndarray, n: int
) -> np.ndarray:
    """Reassign one sample to each emptied cluster.

    The reseed sample is the one farthest from the empty cluster's previous
    centroid, excluding samples already reseeded this round and sole members
    of other clusters (so no new cluster is emptied); distance ties break by
    smallest (l, h, w).
    """
    counts = np.bincount(labels, minlength=n)
    if not np.any(counts == 0):
        return labels
    labels = labels.copy()
    locked = np.zeros(x.shape[0], dtype=bool)
    for _ in range(n):
        counts = np.bincount(labels, minlength=n)
        empty = np.flatnonzero(counts == 0)
        if empty.size == 0:
            break
        j = int(empty[0])
        d = _sq_dists(x, centroids[j][None, :])[:, 0]
        movable = ~locked & (counts[labels] > 1)
        if not np.any(movable):
            movable = ~locked  # degenerate duplicates; allow singleton moves
        d = np.where(movable, d, -np.inf)
        far = d.max()
        nxt = _pick_lex_smallest(np.flatnonzero(d == far), x)
        labels[nxt] = j
        locked[nxt] = True
    return labels


def kmeans_fit(
    samples: Sequence[DimensionSample],
    n: int,
    cfg: ClusterConfig = ClusterConfig(),
    class_name: Optional[str] = None,
) -> KMeansModel:
    """Lloyd's algorithm on (L, H, W) samples.

    Runs until the relative objective change drops below ``cfg.tolerance``
    or ``cfg.max_iterations``. The reported objective is the within-cluster
    sum of squares of the final assignment, whose centroids are exactly the
    per-cluster means; the per-iteration objective sequence never increases
    (a floating-point regression reverts to the previous state and stops).
    """
    x, inferred = _as_matrix(samples)
    m = x.shape[0]
    if n < 1:
        raise ValueError(f"cluster count {n} must be >= 1")
    if n > m:
        raise ValueError(f"cluster count {n} exceeds sample count {m}")
    name = class_name if class_name is not None else inferred

    centroids = _init_centroids(x, n, cfg)
    prev: Optional[tuple[np.ndarray, np.ndarray, float]] = None
    history: list[float] = []
    for _ in range(cfg.max_iterations):
        labels = np.argmin(_sq_dists(x, centroids), axis=1)  # ties: lowest index
        labels = _fill_empty_clusters(x, centroids, labels, n)
        means = np.empty((n, 3), dtype=np.float64)
        for j in range(n):
            means[j] = x[labels == j].mean(axis=0)
        objective = float(np.sum((x - means[labels]) ** 2))
        if prev is not None and objective > prev[2]:
            break  # floating-point regression; keep the previous state
        state = (means, labels, objective)
        history.append(objective)
        if prev is not None:
            rel = abs(prev[2] - objective) / max(abs(prev[2]), 1e-300)
            if rel < cfg.tolerance:
                prev = state
                break
        prev = state
        centroids = means
    means, labels, objective = prev
    return KMeansModel(
        class_name=name,
        n=n,
        centroids=means,
        assignments=labels,
        objective=objective,
        iterations_run=len(history),
        objective_history=tuple(history),
    )


def kmeans_assign(model: KMeansModel, sample: DimensionSample) -> int:
    """Nearest-centroid index for one sample (ties -> lowest index)."""
    d = _sq_dists(sample.vector[None, :], model.centroids)[0]
    return int(np.argmin(d))


def _mvn_logpdf(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    chol = np.linalg.cholesky(cov)
    diff = x - mean
    sol = np.linalg.solve(chol, diff.T)
    maha = np.einsum("ij,ij->j", sol, sol)
    logdet = 2.0 * float(np.log(np.diag(chol)).sum())
    return -0.5 * (x.shape[1] * _LOG_2PI + logdet + maha)


def _e_step(
    x: np.ndarray, weights: np.ndarray, means: np.ndarray, covs: np.ndarray
) -> tuple[np.ndarray, float]:
    """Responsibilities (log-sum-exp stabilized) and total log-likelihood."""
    m, n = x.shape[0], weights.shape[0]
    logw = np.empty((m, n), dtype=np.float64)
    for j in range(n):
        logw[:, j] = math.log(weights[j]) + _mvn_logpdf(x, means[j], covs[j])
    top = logw.max(axis=1)
    if not np.all(np.isfinite(top)):
        bad = int(np.flatnonzero(~np.isfinite(top))[0])
        raise NumericalError(f"all mixture densities underflowed for sample {bad}")
    lse = top + np.log(np.exp(logw - top[:, None]).sum(axis=1))
    gamma = np.exp(logw - lse[:, None])
    return gamma, float(lse.sum())


def _floor_covariance(cov: np.ndarray, floor: float) -> np.ndarray:
    sym = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(sym)
    vals = np.maximum(vals, floor)
    out = (vecs * vals) @ vecs.T
    return 0.5 * (out + out.T)


def gmm_responsibilities(model: GmmModel, sample: DimensionSample) -> np.ndarray:
    """Posterior cluster probabilities for one sample; sums to 1."""
    gamma, _ = _e_step(
        sample.vector[None, :], model.weights, model.means, model.covariances
    )
    return gamma[0]


def gmm_m_step(
    samples: Union[Sequence[DimensionSample], np.ndarray],
    responsibilities: np.ndarray,
    covariance_floor: float = 1e-6,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Weighted-moment updates (weights, means, covariances).

    Covariances are the responsibility-weighted outer products, floored to
    ``covariance_floor`` on eigenvalues. A component whose total
    responsibility falls below 1e-12 raises a degenerate-component error.
    """
    x, _ = _as_matrix(samples)
    resp = np.asarray(responsibilities, dtype=np.float64)
    m, n = resp.shape
    totals = resp.sum(axis=0)
    for j in range(n):
        if totals[j] < 1e-12:
            raise DegenerateComponentError(j)
    weights = totals / m
    means = (resp.T @ x) / totals[:, None]
    covs = np.empty((n, 3, 3), dtype=np.float64)
    for j in range(n):
        diff = x - means[j]
        covs[j] = _floor_covariance(
            (resp[:, j, None] * diff).T @ diff / totals[j], covariance_floor
        )
    return weights, means, covs


def gmm_fit(
    samples: Sequence[DimensionSample],
    n: int,
    cfg: ClusterConfig = ClusterConfig(),
    class_name: Optional[str] = None,
) -> GmmModel:
    """EM for a full-covariance Gaussian mixture over (L, H, W).

    Initialized from the K-means solution (weights = cluster fractions,
    covariances = per-cluster biased covariance). Iterates M- then E-steps
    until the relative log-likelihood change drops below the tolerance; the
    log-likelihood history is non-decreasing up to the tiny slack the
    covariance floor can introduce.
    """
    x, inferred = _as_matrix(samples)
    m = x.shape[0]
    if n < 1:
        raise ValueError(f"cluster count {n} must be >= 1")
    if n > m:
        raise ValueError(f"cluster count {n} exceeds sample count {m}")
    name = class_name if class_name is not None else inferred

    km = kmeans_fit(samples, n, cfg, class_name=name)
    means = km.centroids.copy()
    weights = np.bincount(km.assignments, minlength=n) / m
    covs = np.empty((n, 3, 3), dtype=np.float64)
    for j in range(n):
        diff = x[km.assignments == j] - means[j]
        covs[j] = _floor_covariance(diff.T @ diff / diff.shape[0], cfg.covariance_floor)

    gamma, loglik = _e_step(x, weights, means, covs)
    history = [loglik]
    iterations = 0
    for it in range(1, cfg.max_iterations + 1):
        try:
            weights, means, covs = gmm_m_step(x, gamma, cfg.covariance_floor)
        except DegenerateComponentError as exc:
            raise DegenerateComponentError(exc.component, iteration=it) from None
        gamma, new_loglik = _e_step(x, weights, means, covs)
        history.append(new_loglik)
        iterations = it
        rel = abs(new_loglik - loglik) / max(abs(loglik), 1e-300)
        loglik = new_loglik
        if rel < cfg.tolerance:
            break
    return GmmModel(
        class_name=name,
        n=n,
        weights=weights,
        means=means,
        covariances=covs,
        log_likelihood=loglik,
        iterations_run=iterations,
        loglik_history=tuple(history),
    )


def anchor_sizes_from_model(model: Union[KMeansModel, GmmModel]) -> list[tuple[float, float, float]]:
    """The n cluster means as (L, H, W) sizes, sorted by descending L, H, W."""
    means = model.centroids if isinstance(model, KMeansModel) else model.means
    sizes = [tuple(float(v) for v in row) for row in means]
    return sorted(sizes, reverse=True)


@dataclass(frozen=True)
class LoadedModel:
    """A clustering model file read back from JSON."""

    class_name: str
    method: str  # "kmeans" | "gmm"
    n: int
    sizes: np.ndarray  # (n, 3) sorted by descending L, H, W
    weights: Optional[np.ndarray]
    covariances: Optional[np.ndarray]
    objective_or_loglik: float
    seed: int
    iterations: int

    def __post_init__(self):
        sizes = np.asarray(self.sizes, dtype=np.float64).reshape(self.n, 3)
        sizes.setflags(write=False)
        object.__setattr__(self, "sizes", sizes)


def model_to_dict(model: Union[KMeansModel, GmmModel], seed: int) -> dict:
    """JSON-ready record of a fitted model.

    ``sizes`` (and, for mixtures, ``weights``/``covariances``) are reported
    in descending (L, H, W) size order so files are stable across runs.
    """
    record = {
        "class": model.class_name,
        "n": model.n,
        "seed": int(seed),
        "iterations": model.iterations_run,
    }
    if isinstance(model, KMeansModel):
        record["method"] = "kmeans"
        record["objective_or_loglik"] = model.objective
        record["sizes"] = [list(s) for s in anchor_sizes_from_model(model)]
    else:
        record["method"] = "gmm"
        record["objective_or_loglik"] = model.log_likelihood
        order = sorted(range(model.n), key=lambda j: tuple(model.means[j]), reverse=True)
        record["sizes"] = [[float(v) for v in model.means[j]] for j in order]
        record["weights"] = [float(model.weights[j]) for j in order]
        record["covariances"] = [
            [[float(v) for v in row] for row in model.covariances[j]] for j in order
        ]
    return record


def write_model_json(model: Union[KMeansModel, GmmModel], seed: int, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model, seed), sort_keys=True, indent=2) + "\n")


def read_model_json(path: str | Path) -> LoadedModel:
    record = json.loads(Path(path).read_text())
    weights = record.get("weights")
    covs = record.get("covariances")
    return LoadedModel(
        class_name=record["class"],
        method=record["method"],
        n=int(record["n"]),
        sizes=np.asarray(record["sizes"], dtype=np.float64),
        weights=None if weights is None else np.asarray(weights, dtype=np.float64),
        covariances=None if covs is None else np.asarray(covs, dtype=np.float64),
        objective_or_loglik=float(record["objective_or_loglik"]),
        seed=int(record["seed"]),
        iterations=int(record["iterations"]),
    )
