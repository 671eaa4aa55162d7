"""Accuracy protocols: N-way one-shot episodes and K-nearest-neighbour voting
over embeddings."""
from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .nets import SiameseModel, sigmoid
from .tensor import fc_forward, l1_distance

POLARITIES = ("least", "greatest")


@dataclass
class EvalConfig:
    n_way: int = 5
    k_shot: int = 1
    episodes: int | None = None  # None -> one episode per test image
    knn_ks: tuple = (3, 5, 7)
    seed: int = 0
    polarity: str = "least"

    def __post_init__(self):
        if self.n_way < 1 or self.k_shot < 1:
            raise ValueError("n_way and k_shot must be positive")
        for k in self.knn_ks:
            if k < 1 or k % 2 == 0:
                raise ValueError(f"KNN k must be odd and positive, got {k}")
        if self.polarity not in POLARITIES:
            raise ValueError(f"polarity must be one of {POLARITIES}")


@dataclass
class EmbeddingIndex:
    embeddings: np.ndarray
    labels: np.ndarray
    ids: list

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if not len(self.embeddings) == len(self.labels) == len(self.ids):
            raise ValueError("embeddings, labels and ids must have the same length")

    def __len__(self):
        return len(self.ids)

    def row(self, query):
        if isinstance(query, (int, np.integer)):
            return int(query)
        try:
            return self.ids.index(query)
        except ValueError:
            raise KeyError(f"query {query!r} not in index") from None

    def subset(self, rows):
        rows = list(rows)
        return EmbeddingIndex(self.embeddings[rows], self.labels[rows], [self.ids[r] for r in rows])


def embed_images(model, images, chunk=100):
    """Embeddings for a stack of preprocessed images, computed in fixed-size chunks."""
    out = [model.embed(images[s:s + chunk]) for s in range(0, len(images), chunk)]
    width = model.config.embedding_width
    return np.concatenate(out) if out else np.empty((0, width))


def build_index(model, manifest, images, rows=None):
    """Index over ``rows`` of the manifest (all records by default)."""
    rows = range(len(manifest.records)) if rows is None else rows
    rows = list(rows)
    emb = embed_images(model, images[rows])
    return EmbeddingIndex(emb, manifest.labels(rows), [manifest.records[r].id for r in rows])


# --------------------------------------------------------------------------
# One-shot episodes
# --------------------------------------------------------------------------

def siamese_dissimilarity(model: SiameseModel, query_emb, support_embs):
    """1 - p(same) for the query against each support embedding.

    This is the head's output on the pair-label scale (0 = same class), so
    the most similar support has the least value.
    """
    q = np.broadcast_to(query_emb, np.shape(support_embs))
    z = fc_forward(l1_distance(q, support_embs), model.head, batched=True)[:, 0]
    return 1.0 - sigmoid(z)


def episode_scores(model, kind, query_emb, support_embs):
    if kind == "siamese":
        return siamese_dissimilarity(model, query_emb, support_embs)
    if kind == "triplet":
        return np.sqrt(np.sum((np.asarray(support_embs) - query_emb) ** 2, axis=1))
    raise ValueError(f"unknown network kind {kind!r}")


def pick(scores, polarity="least"):
    scores = np.asarray(scores)
    return int(np.argmin(scores) if polarity == "least" else np.argmax(scores))


def one_shot_episode(model, test_image, support, kind=None, polarity="least"):
    """Predict the class of ``test_image`` from one support image per class.

    ``support`` maps class id -> image. Triplet networks pick the nearest
    embedding; Siamese networks pick the pair with the least dissimilarity
    output (``polarity="greatest"`` flips the choice).
    """
    kind = kind or model.kind
    if not support:
        raise ValueError("support set is empty")
    classes = list(support)
    images = np.stack([np.asarray(test_image)] + [np.asarray(support[c]) for c in classes])
    emb = model.embed(images)
    return classes[pick(episode_scores(model, kind, emb[0], emb[1:]), polarity)]


def one_shot_accuracy(model, index: EmbeddingIndex, test_rows, config: EvalConfig,
                      support_rows=None, kind=None):
    """Fraction of episodes whose query is assigned its own class.

    Each episode draws ``n_way`` classes (always including the query's),
    then one support per class from ``support_rows`` (default: all rows)
    excluding the query itself.
    """
    kind = kind or model.kind
    if config.k_shot != 1:
        raise NotImplementedError("only one-shot (k_shot=1) episodes are supported")
    rng = np.random.default_rng(config.seed)
    test_rows = list(test_rows)
    support_rows = np.arange(len(index)) if support_rows is None else np.asarray(list(support_rows))
    all_classes = np.unique(index.labels)
    if config.n_way > len(all_classes):
        raise ValueError(f"n_way={config.n_way} exceeds the {len(all_classes)} available classes")
    by_class = {int(c): support_rows[index.labels[support_rows] == c] for c in all_classes}
    n_episodes = config.episodes or len(test_rows)
    correct = 0
    for e in range(n_episodes):
        q = test_rows[e % len(test_rows)]
        truth = int(index.labels[q])
        others = [int(c) for c in all_classes if c != truth]
        chosen = [truth] + list(rng.choice(others, size=config.n_way - 1, replace=False)) \
            if config.n_way > 1 else [truth]
        chosen = sorted(int(c) for c in chosen)
        support = []
        for c in chosen:
            pool = by_class[c][by_class[c] != q]
            if len(pool) == 0:
                raise ValueError(f"no support image available for class {c}")
            support.append(int(pool[rng.integers(len(pool))]))
        scores = episode_scores(model, kind, index.embeddings[q], index.embeddings[support])
        correct += chosen[pick(scores, config.polarity)] == truth
    return correct / n_episodes


# --------------------------------------------------------------------------
# KNN
# --------------------------------------------------------------------------

def _vote(neighbor_labels):
    """Majority label; ties go to the tied class whose member ranks nearest."""
    counts = Counter(neighbor_labels)
    top = max(counts.values())
    tied = {c for c, n in counts.items() if n == top}
    for lab in neighbor_labels:
        if lab in tied:
            return lab
    raise AssertionError("unreachable")


def knn_classify(index: EmbeddingIndex, query, k, distances=None):
    """Majority class among the ``k`` nearest other rows (Euclidean)."""
    row = index.row(query)
    if k >= len(index):
        raise ValueError(f"k={k} must be smaller than the index size {len(index)}")
    if k < 1:
        raise ValueError("k must be positive")
    if distances is None:
        distances = np.sqrt(np.sum((index.embeddings - index.embeddings[row]) ** 2, axis=1))
    distances = np.array(distances, dtype=np.float64)
    distances[row] = np.inf
    nearest = np.argsort(distances, kind="stable")[:k]
    return _vote([int(index.labels[i]) for i in nearest])


def distance_matrix(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.sqrt(np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1))


@dataclass
class KnnReport:
    class_names: list
    ks: list
    per_class: list  # per k: list of accuracies (fraction) per class, nan if class absent
    average: list  # per k: unweighted mean over classes present
    overall: list  # per k: fraction of all queries correct
    class_counts: list

    def table_rows(self):
        rows = []
        for k, pc, avg, ov in zip(self.ks, self.per_class, self.average, self.overall):
            rows.append([k] + [_pct(a) for a in pc] + [_pct(avg), _pct(ov)])
        return rows

    @property
    def header(self):
        return ["K"] + list(self.class_names) + ["Average", "Overall"]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header)
        w.writerows(self.table_rows())
        return buf.getvalue()

    def to_text(self):
        return format_table(self.header, self.table_rows())


def _pct(x):
    return "" if np.isnan(x) else f"{100 * x:.2f}"


def knn_report(index: EmbeddingIndex, query_rows, ks=(3, 5, 7), class_names=None,
               candidate_rows=None):
    """Per-class and average KNN accuracy for each k (rows k, columns classes).

    ``candidate_rows`` restricts the neighbours to a subset of the index
    (e.g. training images only); by default every other row is a candidate.
    """
    query_rows = [index.row(q) for q in query_rows]
    classes = np.unique(index.labels)
    n_classes = int(classes.max()) + 1 if len(classes) else 0
    names = list(class_names) if class_names is not None else [str(c) for c in range(n_classes)]
    truth = index.labels[query_rows].astype(int)
    counts = np.bincount(truth, minlength=len(names))
    dist = distance_matrix(index.embeddings[query_rows], index.embeddings)
    if candidate_rows is not None:
        allowed = np.zeros(len(index), dtype=bool)
        allowed[list(candidate_rows)] = True
        dist[:, ~allowed] = np.inf
        usable = int(allowed.sum()) - int(np.min(allowed[query_rows], initial=0))
        if max(ks, default=0) > usable:
            raise ValueError(f"k={max(ks)} exceeds the {usable} candidate neighbours")
    per_class, average, overall = [], [], []
    for k in ks:
        pred = np.array([knn_classify(index, q, k, dist[i]) for i, q in enumerate(query_rows)])
        hit = pred == truth
        acc = [float(np.mean(hit[truth == c])) if counts[c] else float("nan")
               for c in range(len(names))]
        per_class.append(acc)
        present = [a for a in acc if not np.isnan(a)]
        average.append(float(np.mean(present)) if present else float("nan"))
        overall.append(float(np.mean(hit)) if len(hit) else float("nan"))
    return KnnReport(names, list(ks), per_class, average, overall, counts.tolist())


def format_table(header, rows):
    cells = [[str(h) for h in header]] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
