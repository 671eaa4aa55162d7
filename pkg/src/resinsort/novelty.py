"""Flagging images of unseen categories.

Embeddings are projected with PCA or LDA fitted on the known classes'
training embeddings. A projected point is an outlier when fewer than ``Y``
reference points lie within distance ``X`` of it.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .linalg import jacobi_eigh, sign_normalize

LDA_RIDGE = 1e-6
LDA_SHRINKAGE = 0.01


@dataclass
class ProjectionModel:
    kind: str  # "pca" | "lda"
    mean: np.ndarray
    directions: np.ndarray  # (dims, features), orthonormal rows
    eigenvalues: np.ndarray  # all eigenvalues of the fitted problem, descending

    @property
    def dims(self):
        return self.directions.shape[0]

    def truncate(self, dims):
        """The same fit restricted to its first ``dims`` directions."""
        if not 1 <= dims <= self.dims:
            raise ValueError(f"dims must be in 1..{self.dims}, got {dims}")
        return ProjectionModel(self.kind, self.mean, self.directions[:dims], self.eigenvalues)


def _as_matrix(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected a 2-D (samples, features) array, got shape {x.shape}")
    return x


def fit_pca(train_embeddings, dims):
    """Top-``dims`` eigenvectors of the sample covariance (n - 1 normalization)."""
    x = _as_matrix(train_embeddings)
    n, f = x.shape
    if n < 2:
        raise ValueError("PCA needs at least two samples")
    if not 1 <= dims <= min(n, f):
        raise ValueError(f"dims must be in 1..{min(n, f)} (min of features and samples), got {dims}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (n - 1)
    values, vectors = jacobi_eigh(cov)
    assert np.all(np.diff(values) <= 0), "eigenvalues must be non-increasing"
    return ProjectionModel("pca", mean, vectors[:, :dims].T.copy(), values)


def scatter_matrices(x, labels):
    """Within-class and between-class scatter."""
    x = _as_matrix(x)
    labels = np.asarray(labels)
    mean = x.mean(axis=0)
    f = x.shape[1]
    sw = np.zeros((f, f))
    sb = np.zeros((f, f))
    for c in np.unique(labels):
        xc = x[labels == c]
        mc = xc.mean(axis=0)
        d = xc - mc
        sw += d.T @ d
        diff = (mc - mean)[:, None]
        sb += len(xc) * (diff @ diff.T)
    return sw, sb


def gram_schmidt(rows):
    """Orthonormalize rows in order (modified Gram-Schmidt)."""
    out = []
    for r in np.asarray(rows, dtype=np.float64):
        v = r.copy()
        for u in out:
            v -= (u @ v) * u
        norm = np.linalg.norm(v)
        if norm == 0.0:
            raise np.linalg.LinAlgError("directions are linearly dependent")
        out.append(v / norm)
    return np.array(out)


def fit_lda(train_embeddings, labels, dims, ridge=LDA_RIDGE, shrinkage=LDA_SHRINKAGE):
    """Fisher discriminant directions, orthonormalized in eigenvalue order.

    Solves S_b w = lambda S w with S = S_w + (ridge + shrinkage * tr(S_w) / d) I,
    through the Cholesky factor of S so the inner problem is symmetric.
    ``shrinkage`` is relative to the mean within-class variance per feature;
    with few samples per feature an unshrunk S_w overfits the training
    clusters.
    """
    x = _as_matrix(train_embeddings)
    labels = np.asarray(labels)
    if len(labels) != len(x):
        raise ValueError("labels and embeddings must align")
    classes, counts = np.unique(labels, return_counts=True)
    c = len(classes)
    if dims > c - 1:
        raise ValueError(f"LDA yields at most C - 1 = {c - 1} directions for C = {c} classes; "
                         f"requested {dims}")
    if dims < 1:
        raise ValueError("dims must be at least 1")
    if counts.min() < 2:
        raise ValueError("every class needs at least two samples")
    sw, sb = scatter_matrices(x, labels)
    f = x.shape[1]
    reg = ridge + shrinkage * np.trace(sw) / f
    chol = np.linalg.cholesky(sw + reg * np.eye(f))
    inner = np.linalg.solve(chol, np.linalg.solve(chol, sb).T).T
    inner = 0.5 * (inner + inner.T)
    values, vectors = jacobi_eigh(inner)
    w = np.linalg.solve(chol.T, vectors[:, :dims])
    directions = sign_normalize(gram_schmidt(w.T).T).T
    return ProjectionModel("lda", x.mean(axis=0), directions, values)


def fisher_ratio(x, labels, direction):
    """Between-class over within-class scatter of the 1-D projection."""
    sw, sb = scatter_matrices(x, labels)
    w = np.asarray(direction, dtype=np.float64)
    return float(w @ sb @ w) / float(w @ sw @ w)


def project(model: ProjectionModel, embeddings):
    x = np.asarray(embeddings, dtype=np.float64)
    if x.shape[-1] != model.mean.shape[0]:
        raise ValueError(f"embedding width {x.shape[-1]} != model width {model.mean.shape[0]}")
    return (x - model.mean) @ model.directions.T


# --------------------------------------------------------------------------
# Radius / count outlier rule
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class OutlierParams:
    radius: float  # X
    min_neighbors: int  # Y

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        if self.min_neighbors < 1:
            raise ValueError("min_neighbors must be at least 1")


def pairwise_distances(a, b):
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    return np.sqrt(np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1))


def neighbor_counts(points, reference, radius, exclude_self=False):
    """Number of reference points within ``radius`` (inclusive) of each point.

    With ``exclude_self`` the points are their own reference and each point
    does not count itself.
    """
    if exclude_self:
        reference = points
    counts = np.sum(pairwise_distances(points, reference) <= radius, axis=1)
    return counts - 1 if exclude_self else counts


def detect_outliers(projected, reference, params: OutlierParams, exclude_self=False):
    """True where fewer than ``min_neighbors`` reference points lie within ``radius``.

    ``exclude_self`` counts neighbours among the other projected points
    instead of a separate reference set.
    """
    if not exclude_self and len(reference) == 0:
        raise ValueError("reference set is empty")
    counts = neighbor_counts(projected, reference, params.radius, exclude_self)
    return counts < params.min_neighbors


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def tp_rate(self):
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else math.nan

    @property
    def fp_rate(self):
        return self.fp / (self.fp + self.tn) if self.fp + self.tn else math.nan

    @property
    def youden(self):
        return self.tp_rate - self.fp_rate


def confusion(flags, truth):
    """Counts for outlier ``flags`` against ``truth`` (True = new category)."""
    flags = np.asarray(flags, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if flags.shape != truth.shape:
        raise ValueError(f"length mismatch: {flags.shape} vs {truth.shape}")
    return ConfusionCounts(
        tp=int(np.sum(flags & truth)),
        fp=int(np.sum(flags & ~truth)),
        tn=int(np.sum(~flags & ~truth)),
        fn=int(np.sum(~flags & truth)),
    )


def default_grids(points, reference, n_radius=60, max_neighbors=50):
    """Radius grid spanning the observed point-to-reference distances; Y = 1..max_neighbors."""
    d = pairwise_distances(points, reference)
    positive = d[d > 0]
    if positive.size == 0:
        raise ValueError("all points coincide with the reference; no radius scale")
    lo = float(positive.min())
    hi = float(np.median(positive))
    if hi <= lo:
        hi = lo * 2
    radii = np.geomspace(lo, hi, n_radius)
    return radii, np.arange(1, min(max_neighbors, len(reference)) + 1)


def tune_params(val_known, val_new, reference, radius_grid, neighbor_grid):
    """Grid point maximizing TP rate - FP rate on validation data.

    Ties go to the smaller radius, then the smaller count threshold.
    ``reference=None`` counts neighbours among the validation points
    themselves (self excluded). Returns ``(OutlierParams, best_j)``.
    """
    radius_grid = np.sort(np.asarray(radius_grid, dtype=np.float64))
    neighbor_grid = np.sort(np.asarray(neighbor_grid, dtype=np.int64))
    if radius_grid.size == 0 or neighbor_grid.size == 0:
        raise ValueError("grids must be non-empty")
    if len(val_known) == 0 or len(val_new) == 0:
        raise ValueError("tuning needs both known and new validation points")
    if reference is None:
        both = np.concatenate([val_known, val_new])
        d = pairwise_distances(both, both)
        np.fill_diagonal(d, np.inf)
        d_known, d_new = d[:len(val_known)], d[len(val_known):]
    else:
        d_known = pairwise_distances(val_known, reference)
        d_new = pairwise_distances(val_new, reference)
    # sorted rows let one searchsorted give the count for each radius
    d_known = np.sort(d_known, axis=1)
    d_new = np.sort(d_new, axis=1)
    best, best_j = None, -np.inf
    for x in radius_grid:
        c_known = np.array([np.searchsorted(row, x, side="right") for row in d_known])
        c_new = np.array([np.searchsorted(row, x, side="right") for row in d_new])
        for y in neighbor_grid:
            j = np.mean(c_new < y) - np.mean(c_known < y)
            if j > best_j:
                best, best_j = (float(x), int(y)), j
    return OutlierParams(*best), float(best_j)


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------

def export_projection_csv(path, ids, labels, is_new, projected):
    projected = np.atleast_2d(np.asarray(projected, dtype=np.float64))
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["id", "label", "is_new"] + [f"c{k + 1}" for k in range(projected.shape[1])])
        for i, lab, new, row in zip(ids, labels, is_new, projected):
            w.writerow([i, lab, int(bool(new))] + [repr(float(v)) for v in row])


def read_projection_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    header, body = rows[0], rows[1:]
    ids = [r[0] for r in body]
    labels = [r[1] for r in body]
    is_new = [bool(int(r[2])) for r in body]
    coords = np.array([[float(v) for v in r[3:]] for r in body]).reshape(len(body), len(header) - 3)
    return ids, labels, is_new, coords


CONFUSION_COLUMNS = ["dimension", "TP", "FP", "TN", "FN", "tp_rate", "fp_rate", "radius", "min_neighbors"]


def confusion_rows(results):
    """``results``: iterable of (dims, ConfusionCounts, OutlierParams)."""
    return [[d, c.tp, c.fp, c.tn, c.fn, round(100 * c.tp_rate, 2), round(100 * c.fp_rate, 2),
             p.radius, p.min_neighbors] for d, c, p in results]


# --------------------------------------------------------------------------
# Experiment
# --------------------------------------------------------------------------

@dataclass
class NoveltyResult:
    dims: int
    counts: ConfusionCounts
    params: OutlierParams
    val_j: float
    projected_pool: np.ndarray


@dataclass
class NoveltyRun:
    method: str
    pool: list  # manifest record indices of the evaluation pool
    is_new: np.ndarray
    results: list

    def rows(self):
        return confusion_rows((r.dims, r.counts, r.params) for r in self.results)


def novelty_partition(manifest, holdout, tune_new="pool"):
    """Record index groups for the held-out-category experiment.

    ``tune_new="pool"`` tunes on every held-out image, all of which are also
    in the evaluation pool. ``"split"`` tunes on the held-out images outside
    its test split and evaluates only on its test split, keeping tuning and
    evaluation disjoint.
    """
    holdout_all = [i for i, r in enumerate(manifest.records) if r.class_id == holdout]
    if not holdout_all:
        raise ValueError(f"held-out class {holdout} has no images")
    groups = {
        "train": manifest.indices("train", exclude_class=holdout),
        "val_known": manifest.indices("val", exclude_class=holdout),
        "test_known": manifest.indices("test", exclude_class=holdout),
    }
    if tune_new == "pool":
        groups["val_new"] = holdout_all
        groups["pool_new"] = holdout_all
    elif tune_new == "split":
        groups["val_new"] = [i for i in holdout_all if manifest.records[i].split != "test"]
        groups["pool_new"] = [i for i in holdout_all if manifest.records[i].split == "test"]
    else:
        raise ValueError("tune_new must be 'pool' or 'split'")
    groups["pool"] = groups["test_known"] + groups["pool_new"]
    return groups


def run_novelty(embeddings, manifest, holdout, method, dims_list, tune_new="pool",
                reference="train", n_radius=60, max_neighbors=50, shrinkage=LDA_SHRINKAGE):
    """Fit, tune and evaluate the outlier rule for each projection size."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    g = novelty_partition(manifest, holdout, tune_new)
    if reference not in ("train", "pool"):
        raise ValueError("reference must be 'train' or 'pool'")
    dims_list = sorted(set(int(d) for d in dims_list))
    train_x = embeddings[g["train"]]
    if method == "pca":
        full = fit_pca(train_x, max(dims_list))
    elif method == "lda":
        full = fit_lda(train_x, manifest.labels(g["train"]), max(dims_list), shrinkage=shrinkage)
    else:
        raise ValueError(f"method must be 'pca' or 'lda', got {method!r}")
    is_new = np.array([manifest.records[i].class_id == holdout for i in g["pool"]])
    results = []
    for d in dims_list:
        model = full.truncate(d)
        ref = project(model, train_x)
        vk = project(model, embeddings[g["val_known"]])
        vn = project(model, embeddings[g["val_new"]])
        pool = project(model, embeddings[g["pool"]])
        if reference == "train":
            radii, ys = default_grids(np.concatenate([vk, vn]), ref, n_radius, max_neighbors)
            params, j = tune_params(vk, vn, ref, radii, ys)
            flags = detect_outliers(pool, ref, params)
        else:
            both = np.concatenate([vk, vn])
            radii, ys = default_grids(both, both, n_radius, max_neighbors)
            params, j = tune_params(vk, vn, None, radii, ys)
            flags = detect_outliers(pool, None, params, exclude_self=True)
        results.append(NoveltyResult(d, confusion(flags, is_new), params, j, pool))
    return NoveltyRun(method, g["pool"], is_new, results)
