"""Graph representation, file I/O, splits, synthetic generation, random triggers.

Graphs are immutable value objects: node features, integer labels (-1 means
unlabeled), and a canonical undirected edge list (smaller endpoint first,
lexicographically sorted, no duplicates, no self-loops).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import sparse as sp

UNLABELED = -1


class GraphFormatError(ValueError):
    """Raised when a graph file or in-memory graph violates the format contract."""


def canonical_edges(edges, n: int) -> np.ndarray:
    """Return edges as a (m, 2) int64 array, smaller id first, sorted, deduplicated.

    Rejects self-loops and out-of-range endpoints.
    """
    arr = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if arr.size == 0:
        return arr.reshape(0, 2)
    if arr.min() < 0 or arr.max() >= n:
        bad = arr.flat[np.argmax((arr < 0) | (arr >= n))]
        raise GraphFormatError(f"endpoint {bad} out of range for n={n}")
    if np.any(arr[:, 0] == arr[:, 1]):
        raise GraphFormatError("self-loops are not allowed")
    lo = arr.min(axis=1)
    hi = arr.max(axis=1)
    arr = np.stack([lo, hi], axis=1)
    order = np.lexsort((arr[:, 1], arr[:, 0]))
    arr = arr[order]
    keep = np.ones(len(arr), dtype=bool)
    keep[1:] = np.any(arr[1:] != arr[:-1], axis=1)
    return arr[keep]


@dataclass(eq=False)
class Graph:
    """Undirected attributed graph with per-node class labels."""

    features: np.ndarray
    labels: np.ndarray
    edges: np.ndarray
    n_classes: int
    _adj: list | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise GraphFormatError("features must be a 2-D matrix")
        n = self.features.shape[0]
        if self.labels.shape != (n,):
            raise GraphFormatError("labels must have one entry per node")
        if not np.all(np.isfinite(self.features)):
            raise GraphFormatError("non-finite feature entry")
        if self.n_classes < 1:
            raise GraphFormatError("n_classes must be >= 1")
        if np.any(self.labels >= self.n_classes) or np.any(self.labels < UNLABELED):
            raise GraphFormatError("label out of range")
        self.edges = canonical_edges(self.edges, n)
        for a in (self.features, self.labels, self.edges):
            a.setflags(write=False)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def n_edges(self) -> int:
        return self.edges.shape[0]

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n, dtype=np.int64)
        if self.n_edges:
            np.add.at(deg, self.edges[:, 0], 1)
            np.add.at(deg, self.edges[:, 1], 1)
        return deg

    def adjacency_lists(self) -> list:
        """Sorted neighbor array per node (cached; the graph is immutable)."""
        if self._adj is None:
            nbrs: list = [[] for _ in range(self.n)]
            for u, v in self.edges:
                nbrs[u].append(v)
                nbrs[v].append(u)
            self._adj = [np.array(sorted(x), dtype=np.int64) for x in nbrs]
        return self._adj

    def __eq__(self, other) -> bool:
        if not isinstance(other, Graph):
            return NotImplemented
        return (
            self.n_classes == other.n_classes
            and self.features.shape == other.features.shape
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.edges, other.edges)
        )


@dataclass(frozen=True)
class SplitMask:
    """Inductive split: labeled training nodes and two masked test pools."""

    train_labeled: np.ndarray
    test_target: np.ndarray
    test_clean: np.ndarray

    def __post_init__(self):
        for name in ("train_labeled", "test_target", "test_clean"):
            arr = np.unique(np.asarray(getattr(self, name), dtype=np.int64))
            object.__setattr__(self, name, arr)
            arr.setflags(write=False)
        sets = [set(self.train_labeled), set(self.test_target), set(self.test_clean)]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise ValueError("split sets must be pairwise disjoint")


@dataclass(eq=False)
class SparseOperator:
    """Symmetric sparse aggregation operator stored in COO form.

    Entries appear in both (i, j) and (j, i) orientation; the diagonal is
    present only when built with self-loops.
    """

    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray
    n: int
    self_loops: bool
    _csr: sp.csr_matrix | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.int64)
        self.cols = np.asarray(self.cols, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if not (self.rows.shape == self.cols.shape == self.values.shape):
            raise ValueError("rows, cols, values must have equal length")
        if self.values.size and self.values.min() <= 0:
            raise ValueError("aggregation weights must be positive")
        fwd = {(int(r), int(c)): float(v) for r, c, v in zip(self.rows, self.cols, self.values)}
        for (r, c), v in fwd.items():
            if fwd.get((c, r)) != v:
                raise ValueError("operator must be symmetric")
        for a in (self.rows, self.cols, self.values):
            a.setflags(write=False)

    def csr(self) -> sp.csr_matrix:
        if self._csr is None:
            self._csr = sp.csr_matrix(
                (self.values, (self.rows, self.cols)), shape=(self.n, self.n)
            )
        return self._csr

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.csr() @ x

    def to_dense(self) -> np.ndarray:
        return self.csr().toarray()


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a label-conditioned synthetic graph with target edge homophily."""

    n: int
    n_classes: int
    d: int
    h: float
    class_means: np.ndarray
    noise_scale: float
    feature_bound: float
    avg_degree: float
    seed: int

    def __post_init__(self):
        means = np.asarray(self.class_means, dtype=np.float64)
        object.__setattr__(self, "class_means", means)
        if not 0.0 <= self.h <= 1.0:
            raise ValueError("h must lie in [0, 1]")
        if self.feature_bound <= 0:
            raise ValueError("feature_bound must be positive")
        if self.avg_degree < 1:
            raise ValueError("avg_degree must be >= 1")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")
        if means.shape != (self.n_classes, self.d):
            raise ValueError("class_means must be (n_classes, d)")


@dataclass(eq=False)
class Trigger:
    """Small generated subgraph: per-node features plus binary internal adjacency."""

    trig_features: np.ndarray
    trig_adj: np.ndarray
    attach_index: int = 0

    def __post_init__(self):
        self.trig_features = np.asarray(self.trig_features, dtype=np.float64)
        self.trig_adj = np.asarray(self.trig_adj, dtype=np.float64)
        s = self.trig_features.shape[0]
        if s < 1:
            raise ValueError("trigger needs at least one node")
        if self.trig_adj.shape != (s, s):
            raise ValueError("trigger adjacency must be s x s")
        if not np.array_equal(self.trig_adj, self.trig_adj.T):
            raise ValueError("trigger adjacency must be symmetric")
        if np.any(np.diag(self.trig_adj) != 0):
            raise ValueError("trigger adjacency must have a zero diagonal")
        if not np.all(np.isin(self.trig_adj, (0.0, 1.0))):
            raise ValueError("trigger adjacency must be binary")
        if not (0 <= self.attach_index < s):
            raise ValueError("attach_index out of range")
        self.trig_features.setflags(write=False)
        self.trig_adj.setflags(write=False)

    @property
    def s(self) -> int:
        return self.trig_features.shape[0]

    @property
    def d(self) -> int:
        return self.trig_features.shape[1]

    def internal_edges(self) -> np.ndarray:
        """Present internal edges as local (i, j) pairs with i < j."""
        iu, ju = np.triu_indices(self.s, k=1)
        on = self.trig_adj[iu, ju] == 1.0
        return np.stack([iu[on], ju[on]], axis=1).astype(np.int64)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trigger):
            return NotImplemented
        return (
            self.attach_index == other.attach_index
            and self.trig_features.shape == other.trig_features.shape
            and np.array_equal(self.trig_features, other.trig_features)
            and np.array_equal(self.trig_adj, other.trig_adj)
        )


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    # repr gives the shortest decimal that parses back to the same float,
    # so save -> load is bit-exact.
    return repr(float(x))


def save_graph(graph: Graph, nodes_path, edges_path) -> None:
    """Write the node and edge files; a reload yields a bit-identical Graph."""
    nodes_path, edges_path = Path(nodes_path), Path(edges_path)
    lines = [f"{graph.n} {graph.d} {graph.n_classes}"]
    for i in range(graph.n):
        feats = " ".join(_fmt(v) for v in graph.features[i])
        row = f"{i} {graph.labels[i]}"
        lines.append(f"{row} {feats}" if graph.d else row)
    nodes_path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    edge_lines = [f"{u} {v}" for u, v in graph.edges]
    edges_path.write_text(
        ("\n".join(edge_lines) + "\n") if edge_lines else "", encoding="utf-8", newline="\n"
    )


def load_graph(nodes_path, edges_path) -> Graph:
    """Load a graph from the node/edge text formats."""
    nodes_path, edges_path = Path(nodes_path), Path(edges_path)
    text = nodes_path.read_text(encoding="utf-8")
    rows = [ln for ln in text.splitlines() if ln.strip()]
    if not rows:
        raise GraphFormatError(f"{nodes_path}: empty node file")
    try:
        n, d, c = (int(t) for t in rows[0].split())
    except ValueError as exc:
        raise GraphFormatError(f"{nodes_path}: bad header line: {rows[0]!r}") from exc
    if len(rows) - 1 != n:
        raise GraphFormatError(f"{nodes_path}: expected {n} node lines, found {len(rows) - 1}")
    features = np.zeros((n, d), dtype=np.float64)
    labels = np.zeros(n, dtype=np.int64)
    for lineno, ln in enumerate(rows[1:], start=2):
        parts = ln.split()
        if len(parts) != 2 + d:
            raise GraphFormatError(f"{nodes_path}:{lineno}: expected {2 + d} fields")
        idx = int(parts[0])
        if idx != lineno - 2:
            raise GraphFormatError(f"{nodes_path}:{lineno}: node ids must appear in order")
        labels[idx] = int(parts[1])
        if d:
            vals = np.array([float(t) for t in parts[2:]], dtype=np.float64)
            if not np.all(np.isfinite(vals)):
                raise GraphFormatError(f"{nodes_path}:{lineno}: non-finite feature")
            features[idx] = vals

    edges = []
    if edges_path.exists():
        for lineno, ln in enumerate(edges_path.read_text(encoding="utf-8").splitlines(), start=1):
            if not ln.strip():
                continue
            parts = ln.split()
            if len(parts) != 2:
                raise GraphFormatError(f"{edges_path}:{lineno}: expected 'src dst'")
            u, v = int(parts[0]), int(parts[1])
            for e in (u, v):
                if not 0 <= e < n:
                    raise GraphFormatError(
                        f"{edges_path}:{lineno}: endpoint {e} out of range for n={n}"
                    )
            edges.append((u, v))
    else:
        raise GraphFormatError(f"edge file not found: {edges_path}")
    return Graph(features=features, labels=labels, edges=np.array(edges).reshape(-1, 2), n_classes=c)


def save_split(split: SplitMask, path) -> None:
    lines = [
        "train: " + " ".join(str(i) for i in split.train_labeled),
        "target: " + " ".join(str(i) for i in split.test_target),
        "clean: " + " ".join(str(i) for i in split.test_clean),
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def load_split(path) -> SplitMask:
    rows = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if len(rows) != 3:
        raise GraphFormatError(f"{path}: split file must have exactly three lines")
    parts = {}
    for ln in rows:
        key, _, rest = ln.partition(":")
        parts[key.strip()] = np.array([int(t) for t in rest.split()], dtype=np.int64)
    try:
        return SplitMask(parts["train"], parts["target"], parts["clean"])
    except KeyError as exc:
        raise GraphFormatError(f"{path}: missing section {exc}") from exc


# ---------------------------------------------------------------------------
# Generation and structural helpers
# ---------------------------------------------------------------------------


def generate_synthetic(spec: SyntheticSpec) -> Graph:
    """Sample a graph with label-conditioned bounded features and target homophily.

    Labels are uniform over the classes.  Each node's feature row is its class
    mean plus independent uniform noise on [-noise_scale, noise_scale], clamped
    to +/- feature_bound.  Edges are placed by rejection: candidate pairs are
    accepted with probability h when the endpoints share a label and
    (1 - h) / (C - 1) otherwise, until n * avg_degree / 2 edges exist.
    """
    if spec.n_classes == 1 and spec.h < 1.0:
        raise ValueError("homophily below 1 is unreachable with a single class")
    rng = np.random.default_rng(spec.seed)
    labels = rng.integers(0, spec.n_classes, size=spec.n).astype(np.int64)
    noise = rng.uniform(-spec.noise_scale, spec.noise_scale, size=(spec.n, spec.d))
    features = np.clip(
        spec.class_means[labels] + noise, -spec.feature_bound, spec.feature_bound
    )

    target = int(round(spec.n * spec.avg_degree / 2))
    cross_p = 0.0 if spec.n_classes == 1 else (1.0 - spec.h) / (spec.n_classes - 1)
    chosen: dict = {}
    batch = max(1024, 4 * target)
    attempts = 0
    max_attempts = 400 * max(target, 1) * spec.n_classes
    while len(chosen) < target:
        if attempts > max_attempts:
            raise RuntimeError("edge placement failed to reach the target count")
        u = rng.integers(0, spec.n, size=batch)
        v = rng.integers(0, spec.n, size=batch)
        accept_p = np.where(labels[u] == labels[v], spec.h, cross_p)
        keep = (u != v) & (rng.uniform(size=batch) < accept_p)
        attempts += batch
        for a, b in zip(u[keep], v[keep]):
            key = (int(min(a, b)), int(max(a, b)))
            if key not in chosen:
                chosen[key] = None
                if len(chosen) == target:
                    break
    edges = np.array(list(chosen.keys()), dtype=np.int64).reshape(-1, 2)
    return Graph(features=features, labels=labels, edges=edges, n_classes=spec.n_classes)


def edge_homophily(graph: Graph) -> float:
    """Fraction of edges whose endpoints carry the same label."""
    if graph.n_edges == 0:
        raise ValueError("edge homophily is undefined on an empty edge set")
    lu = graph.labels[graph.edges[:, 0]]
    lv = graph.labels[graph.edges[:, 1]]
    if np.any(lu == UNLABELED) or np.any(lv == UNLABELED):
        raise ValueError("edge homophily requires labeled endpoints")
    return float(np.mean(lu == lv))


def inductive_split(graph: Graph, mask_fraction: float, seed: int) -> SplitMask:
    """Mask a node fraction for testing; half becomes attack targets, half clean."""
    if not 0.0 < mask_fraction < 1.0:
        raise ValueError("mask_fraction must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(graph.n)
    k = int(round(graph.n * mask_fraction))
    masked, train = perm[:k], perm[k:]
    target, clean = masked[: k // 2], masked[k // 2 :]
    if min(len(train), len(target), len(clean)) == 0:
        raise ValueError("mask_fraction produces an empty partition")
    return SplitMask(train_labeled=train, test_target=target, test_clean=clean)


def normalized_adjacency(graph: Graph, add_self_loops: bool) -> SparseOperator:
    """Symmetric degree-normalized operator with weights 1/sqrt(deg_i * deg_j)."""
    deg = graph.degrees().astype(np.float64)
    if add_self_loops:
        deg = deg + 1.0
    rows, cols, vals = [], [], []
    if graph.n_edges:
        u, v = graph.edges[:, 0], graph.edges[:, 1]
        w = 1.0 / np.sqrt(deg[u] * deg[v])
        rows.extend([u, v])
        cols.extend([v, u])
        vals.extend([w, w])
    if add_self_loops:
        idx = np.arange(graph.n, dtype=np.int64)
        rows.append(idx)
        cols.append(idx)
        vals.append(1.0 / deg)
    if rows:
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        vals = np.concatenate(vals)
    else:
        rows = cols = np.zeros(0, dtype=np.int64)
        vals = np.zeros(0, dtype=np.float64)
    return SparseOperator(rows=rows, cols=cols, values=vals, n=graph.n, self_loops=add_self_loops)


def sum_aggregation(graph: Graph) -> SparseOperator:
    """Unnormalized neighbor-sum operator (no self-loops, unit weights)."""
    if graph.n_edges:
        u, v = graph.edges[:, 0], graph.edges[:, 1]
        rows = np.concatenate([u, v])
        cols = np.concatenate([v, u])
        vals = np.ones(rows.shape[0], dtype=np.float64)
    else:
        rows = cols = np.zeros(0, dtype=np.int64)
        vals = np.zeros(0, dtype=np.float64)
    return SparseOperator(rows=rows, cols=cols, values=vals, n=graph.n, self_loops=False)


def induced_subgraph(graph: Graph, nodes) -> tuple[Graph, np.ndarray]:
    """Subgraph on `nodes` with relabeled ids.  Returns (subgraph, new-to-old map)."""
    keep = np.unique(np.asarray(nodes, dtype=np.int64))
    old_to_new = np.full(graph.n, -1, dtype=np.int64)
    old_to_new[keep] = np.arange(len(keep))
    if graph.n_edges:
        m = (old_to_new[graph.edges[:, 0]] >= 0) & (old_to_new[graph.edges[:, 1]] >= 0)
        edges = old_to_new[graph.edges[m]]
    else:
        edges = np.zeros((0, 2), dtype=np.int64)
    sub = Graph(
        features=graph.features[keep].copy(),
        labels=graph.labels[keep].copy(),
        edges=edges,
        n_classes=graph.n_classes,
    )
    return sub, keep


def erdos_renyi_trigger(
    s: int = 3,
    p: float = 0.5,
    feature_source: Callable[[np.random.Generator, int], np.ndarray] | None = None,
    seed: int = 0,
    d: int | None = None,
) -> Trigger:
    """Random trigger: each internal pair is an edge independently with probability p.

    `feature_source(rng, count)` supplies the trigger features; without one,
    `d` must be given and features are standard normal draws.
    """
    if s < 1:
        raise ValueError("trigger size must be >= 1")
    if not 0.0 <= p <= 1.0:
        raise ValueError("edge probability must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    adj = np.zeros((s, s), dtype=np.float64)
    iu, ju = np.triu_indices(s, k=1)
    on = rng.uniform(size=len(iu)) < p
    adj[iu[on], ju[on]] = 1.0
    adj = adj + adj.T
    if feature_source is not None:
        feats = np.asarray(feature_source(rng, s), dtype=np.float64)
    else:
        if d is None:
            raise ValueError("either feature_source or d is required")
        feats = rng.standard_normal((s, d))
    return Trigger(trig_features=feats, trig_adj=adj, attach_index=0)


def class_feature_sampler(graph: Graph, cls: int) -> Callable[[np.random.Generator, int], np.ndarray]:
    """Sampler drawing feature rows uniformly from nodes labeled `cls`."""
    pool = np.flatnonzero(graph.labels == cls)
    if len(pool) == 0:
        raise ValueError(f"no nodes labeled {cls}")
    feats = graph.features[pool]

    def sample(rng: np.random.Generator, count: int) -> np.ndarray:
        return feats[rng.integers(0, len(pool), size=count)].copy()

    return sample
