"""Uncertainty-driven poisoned-node selection, trigger attachment, the attack
losses, saliency-based importance scores, and the alternating bi-level
optimization that trains the trigger generator against a frozen-then-updated
surrogate classifier.

All gradient work runs on local receptive-field patches: a two-layer model's
prediction for a node depends only on its two-hop neighborhood, and patch
operators carry full-graph degree mass so local evaluations match full-graph
evaluations exactly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gradcore as gc
from . import models as md
from .graphdata import Graph, SparseOperator, SplitMask, Trigger, UNLABELED, normalized_adjacency


@dataclass(frozen=True)
class AttackConfig:
    """All attack knobs: budgets, margins, loss weight, rates, and seeds."""

    y_t: int = 0
    delta_p: int = 100
    trigger_size: int = 3
    margin_T: float = 0.1
    beta: float = 1.0
    inner_steps: int = 1
    outer_epochs: int = 200
    lr_surrogate: float = 1e-2
    lr_generator: float = 1e-2
    outer_batch: int = 32
    seed: int = 3407
    surrogate_hidden: int = 32
    surrogate_activation: str = "softplus"
    surrogate_weight_decay: float = 5e-3
    gen_hidden: int = 64
    gen_activation: str = "relu"
    gen_weight_decay: float = 0.0
    trig_feature_bound: float | None = None
    fd_eps: float = 1e-4
    plain_descent: bool = False
    clean_hops: int = 1

    def __post_init__(self):
        if self.delta_p < 1 or self.trigger_size < 1:
            raise ValueError("delta_p and trigger_size must be >= 1")
        if self.margin_T < 0 or self.beta < 0:
            raise ValueError("margin_T and beta must be >= 0")
        if self.inner_steps < 1 or self.outer_batch < 1:
            raise ValueError("inner_steps and outer_batch must be >= 1")
        if self.outer_epochs < 0:
            raise ValueError("outer_epochs must be >= 0")
        if self.clean_hops not in (1, 2):
            raise ValueError("clean_hops must be 1 or 2")


@dataclass(frozen=True)
class PoisonPlan:
    """Selected poisoned nodes with their uncertainty scores, highest first."""

    poisoned: np.ndarray
    scores: np.ndarray
    shortfall: bool = False

    def __post_init__(self):
        object.__setattr__(self, "poisoned", np.asarray(self.poisoned, dtype=np.int64))
        object.__setattr__(self, "scores", np.asarray(self.scores, dtype=np.float64))
        if self.poisoned.shape != self.scores.shape:
            raise ValueError("poisoned and scores must align")
        if np.any(np.diff(self.scores) > 1e-12):
            raise ValueError("scores must be non-increasing")


@dataclass(frozen=True)
class AttachedView:
    """One host node with a trigger wired in, described against the base graph."""

    base: Graph
    host: int
    trigger: Trigger
    injected_ids: np.ndarray
    attach_edges: np.ndarray
    clean_neighbors: np.ndarray

    @property
    def attach_node(self) -> int:
        return int(self.injected_ids[self.trigger.attach_index])


@dataclass(frozen=True)
class SaliencyRow:
    """Per-node importance of one prediction: L2 norms of input gradients."""

    center: int
    cls: int
    scores: dict

    def total(self, nodes) -> float:
        return float(sum(self.scores.get(int(v), 0.0) for v in np.asarray(nodes).ravel()))


@dataclass(frozen=True)
class LossBreakdown:
    attack_ce: float
    l_u: float
    l_a: float
    l_f: float

    def __post_init__(self):
        for name in ("attack_ce", "l_u", "l_a", "l_f"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative")


@dataclass(frozen=True)
class TriggerRecord:
    host: int
    injected: tuple
    attach_edge: tuple
    internal_edges: tuple


@dataclass(frozen=True)
class BackdoorProvenance:
    records: tuple

    def hosts(self) -> np.ndarray:
        return np.array([r.host for r in self.records], dtype=np.int64)

    def trigger_nodes(self) -> set:
        out: set = set()
        for r in self.records:
            out.update(r.injected)
        return out

    def trigger_edges(self) -> list:
        """Attach plus internal edges as canonical (u, v) pairs, u < v."""
        out = []
        for r in self.records:
            for e in (r.attach_edge, *r.internal_edges):
                out.append((min(e), max(e)))
        return out


@dataclass(frozen=True)
class BackdooredGraph:
    graph: Graph
    provenance: BackdoorProvenance


# ---------------------------------------------------------------------------
# Poisoned-node selection
# ---------------------------------------------------------------------------


def uncertainty_score(prob_row: np.ndarray, y_t: int) -> float:
    """(1 - p(target)) plus the natural-log entropy of the class distribution."""
    p = np.asarray(prob_row, dtype=np.float64)
    if p.ndim != 1 or not 0 <= y_t < p.size:
        raise ValueError("prob_row must be a class distribution containing y_t")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
        raise ValueError("prob_row must be non-negative and sum to 1")
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(p), 0.0)
    return float((1.0 - p[y_t]) - plogp.sum())


def select_poisoned(
    selector: md.ClassifierParams,
    graph: Graph,
    split: SplitMask,
    y_t: int,
    delta_p: int,
    adj: SparseOperator | None = None,
) -> PoisonPlan:
    """Top-budget most-uncertain labeled target-class nodes under the selector."""
    if delta_p < 1:
        raise ValueError("delta_p must be >= 1")
    candidates = np.array(
        sorted(v for v in split.train_labeled if graph.labels[v] == y_t), dtype=np.int64
    )
    if candidates.size == 0:
        raise ValueError("no labeled candidates of the target class")
    logits = md.classifier_logits(selector, graph, adj=adj)
    probs = gc.softmax_rows(logits[candidates])
    scores = np.array([uncertainty_score(row, y_t) for row in probs])
    order = np.argsort(-scores, kind="stable")  # ties keep ascending-id order
    keep = order[:delta_p]
    return PoisonPlan(
        poisoned=candidates[keep],
        scores=scores[keep],
        shortfall=candidates.size < delta_p,
    )


# ---------------------------------------------------------------------------
# Trigger attachment
# ---------------------------------------------------------------------------


def attach_trigger(graph: Graph, host: int, trigger: Trigger, clean_hops: int = 1) -> AttachedView:
    """Describe the augmented graph obtained by wiring a trigger to `host`."""
    if not 0 <= host < graph.n:
        raise ValueError("host out of range")
    if trigger.d != graph.d:
        raise ValueError(f"trigger dimension {trigger.d} != graph dimension {graph.d}")
    injected = np.arange(graph.n, graph.n + trigger.s, dtype=np.int64)
    internal = trigger.internal_edges()
    edges = [(int(injected[i]), int(injected[j])) for i, j in internal]
    edges.append((host, int(injected[trigger.attach_index])))
    nbrs = graph.adjacency_lists()[host]
    if clean_hops == 2:
        ext = set(nbrs.tolist())
        for v in nbrs:
            ext.update(graph.adjacency_lists()[v].tolist())
        ext.discard(host)
        nbrs = np.array(sorted(ext), dtype=np.int64)
    return AttachedView(
        base=graph,
        host=host,
        trigger=trigger,
        injected_ids=injected,
        attach_edges=np.array(edges, dtype=np.int64).reshape(-1, 2),
        clean_neighbors=nbrs,
    )


def view_to_graph(view: AttachedView) -> Graph:
    """Materialize the augmented graph; the base is never mutated."""
    g = view.base
    features = np.vstack([g.features, view.trigger.trig_features])
    labels = np.concatenate([g.labels, np.full(view.trigger.s, UNLABELED, dtype=np.int64)])
    edges = np.vstack([g.edges, view.attach_edges]) if g.n_edges else view.attach_edges
    return Graph(features=features, labels=labels, edges=edges, n_classes=g.n_classes)


# ---------------------------------------------------------------------------
# Receptive-field patches
# ---------------------------------------------------------------------------


class _Patch:
    """Two-hop neighborhood of a host plus trigger slots, in local ids.

    `base_deg` carries each clean node's self-loop plus its degree mass outside
    the patch, so normalized aggregation weights match the full graph exactly.
    """

    __slots__ = (
        "nodes", "center", "n_clean", "s", "edges", "base_weights", "base_deg",
        "base_features", "trig_locals", "internal_idx", "internal_pairs",
        "attach_idx", "clean_1hop", "host",
    )

    def weights_with(self, internal_w: np.ndarray) -> np.ndarray:
        w = self.base_weights.copy()
        if self.s > 1:
            w[self.internal_idx] = internal_w
        return w

    def features_with(self, trig_features: np.ndarray) -> np.ndarray:
        x = self.base_features.copy()
        if self.s:
            x[self.trig_locals] = trig_features
        return x


def build_patch(graph: Graph, host: int, s: int, full_deg: np.ndarray | None = None) -> _Patch:
    """Patch for `host` with `s` trigger slots appended after the clean nodes."""
    adj = graph.adjacency_lists()
    one_hop = adj[host]
    nodes = {host}
    nodes.update(one_hop.tolist())
    for v in one_hop:
        nodes.update(adj[v].tolist())
    order = np.array(sorted(nodes), dtype=np.int64)
    local = {int(o): i for i, o in enumerate(order)}
    n_clean = len(order)

    edges = []
    for u in order:
        for v in adj[u]:
            iv = local.get(int(v))
            if iv is not None and local[int(u)] < iv:
                edges.append((local[int(u)], iv))
    in_view = np.zeros(n_clean, dtype=np.float64)
    for a, b in edges:
        in_view[a] += 1.0
        in_view[b] += 1.0

    if full_deg is None:
        full_deg = graph.degrees()
    base_deg = np.ones(n_clean + s, dtype=np.float64)
    base_deg[:n_clean] += full_deg[order] - in_view

    p = _Patch()
    p.host = host
    p.nodes = order
    p.center = local[host]
    p.n_clean = n_clean
    p.s = s
    p.trig_locals = np.arange(n_clean, n_clean + s, dtype=np.int64)
    pairs = []
    if s:
        edges.append((p.center, n_clean))  # host to trigger attach node
        for i in range(s):
            for j in range(i + 1, s):
                pairs.append((n_clean + i, n_clean + j))
        edges.extend(pairs)
    p.edges = np.array(edges, dtype=np.int64).reshape(-1, 2)
    p.internal_pairs = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    n_adj = len(pairs)
    p.base_weights = np.ones(len(edges), dtype=np.float64)
    if n_adj:
        p.base_weights[-n_adj:] = 0.0
    p.internal_idx = np.arange(len(edges) - n_adj, len(edges), dtype=np.int64)
    p.attach_idx = len(edges) - n_adj - 1 if s else -1
    p.base_deg = base_deg
    feats = np.zeros((n_clean + s, graph.d))
    feats[:n_clean] = graph.features[order]
    p.base_features = feats
    p.clean_1hop = np.array([local[int(v)] for v in one_hop], dtype=np.int64)
    return p


def dense_patch_matrix(patch: _Patch, internal_w: np.ndarray) -> np.ndarray:
    """Dense normalized aggregation matrix of the patch at given trigger weights."""
    w = patch.weights_with(internal_w)
    n = patch.n_clean + patch.s
    deg = patch.base_deg.copy()
    e0, e1 = patch.edges[:, 0], patch.edges[:, 1]
    np.add.at(deg, e0, w)
    np.add.at(deg, e1, w)
    dinv = 1.0 / np.sqrt(deg)
    mat = np.zeros((n, n))
    wn = w * dinv[e0] * dinv[e1]
    np.add.at(mat, (e0, e1), wn)
    np.add.at(mat, (e1, e0), wn)
    idx = np.arange(n)
    mat[idx, idx] += 1.0 / deg
    return mat


def patch_norm_operator(patch: _Patch, internal_w: np.ndarray) -> SparseOperator:
    """The patch aggregation as a SparseOperator (zero-weight edges dropped)."""
    w = patch.weights_with(internal_w)
    n = patch.n_clean + patch.s
    deg = patch.base_deg.copy()
    e0, e1 = patch.edges[:, 0], patch.edges[:, 1]
    np.add.at(deg, e0, w)
    np.add.at(deg, e1, w)
    dinv = 1.0 / np.sqrt(deg)
    on = w > 0
    a, b = e0[on], e1[on]
    vals = w[on] * dinv[a] * dinv[b]
    idx = np.arange(n)
    rows = np.concatenate([a, b, idx])
    cols = np.concatenate([b, a, idx])
    values = np.concatenate([vals, vals, 1.0 / deg])
    return SparseOperator(rows=rows, cols=cols, values=values, n=n, self_loops=True)


def patch_sum_operator(patch: _Patch, internal_w: np.ndarray) -> SparseOperator:
    """Unnormalized neighbor-sum operator of the patch (for the gin architecture)."""
    w = patch.weights_with(internal_w)
    on = w > 0
    a, b = patch.edges[on, 0], patch.edges[on, 1]
    rows = np.concatenate([a, b])
    cols = np.concatenate([b, a])
    n = patch.n_clean + patch.s
    return SparseOperator(
        rows=rows, cols=cols, values=np.ones(rows.shape[0]), n=n, self_loops=False
    )


def _patch_for_view(view: AttachedView, full_deg: np.ndarray | None = None) -> _Patch:
    return build_patch(view.base, view.host, view.trigger.s, full_deg=full_deg)


def _view_internal_weights(view: AttachedView) -> np.ndarray:
    t = view.trigger
    iu, ju = np.triu_indices(t.s, k=1)
    return t.trig_adj[iu, ju].astype(np.float64)


def predict_with_trigger(
    params: md.ClassifierParams, graph: Graph, host: int, trigger: Trigger | None
) -> int:
    """Predicted class of `host` after (optionally) wiring in a trigger.

    Evaluates only the two-hop receptive field; equal to a full-graph forward.
    """
    s = trigger.s if trigger is not None else 0
    patch = build_patch(graph, host, s)
    internal_w = _view_internal_weights(attach_trigger(graph, host, trigger)) if trigger else np.zeros(0)
    feats = patch.features_with(trigger.trig_features) if trigger else patch.base_features
    if params.arch == "gcn":
        op = patch_norm_operator(patch, internal_w)
        logits = md.gcn_forward(params, op, feats)
    else:
        op = patch_sum_operator(patch, internal_w)
        e = 1.0 + params.gin_eps
        h = md._act_np(params.activation, (e * feats + op.apply(feats)) @ params.w1)
        logits = (e * h + op.apply(h)) @ params.w2
    return int(np.argmax(logits[patch.center]))


# ---------------------------------------------------------------------------
# Saliency and the attack losses
# ---------------------------------------------------------------------------


def sa_importance(
    surrogate: md.ClassifierParams,
    view: AttachedView,
    cls: int,
    on_probability: bool = False,
) -> SaliencyRow:
    """L2 norm of the class-score gradient w.r.t. each node's input features.

    Scores cover the host's receptive field keyed by augmented-graph id;
    nodes outside it are absent (their gradient rows are exactly zero).
    With `on_probability` the target is the post-softmax probability instead
    of the raw class score.
    """
    patch = _patch_for_view(view)
    internal_w = _view_internal_weights(view)
    feats = patch.features_with(view.trigger.trig_features)
    if surrogate.arch == "gcn":
        op = patch_norm_operator(patch, internal_w)
    else:
        op = patch_sum_operator(patch, internal_w)
    if on_probability:
        wt = {"w1": gc.Tensor(surrogate.w1), "w2": gc.Tensor(surrogate.w2)}
        if surrogate.arch == "gcn":
            builder = lambda x: gc.row_softmax(
                md.gcn_logits_tape(wt, op, x, surrogate.activation)
            )
        else:
            builder = lambda x: gc.row_softmax(
                md.gin_logits_tape(wt, op, x, surrogate.activation, surrogate.gin_eps)
            )
        grad = gc.input_gradient_fn(builder, feats, patch.center, cls)
    else:
        grad = md.input_gradient(surrogate, op, feats, patch.center, cls)
    norms = np.linalg.norm(grad, axis=1)
    scores = {int(o): float(norms[i]) for i, o in enumerate(patch.nodes)}
    for i, inj in enumerate(view.injected_ids):
        scores[int(inj)] = float(norms[patch.n_clean + i])
    return SaliencyRow(center=view.host, cls=cls, scores=scores)


def hinge_margin_total(trig_sums, clean_sums, margin_T: float) -> float:
    """Sum over views of max(0, T - (trigger saliency - clean-neighbor saliency))."""
    total = 0.0
    for st, sc in zip(np.atleast_1d(trig_sums), np.atleast_1d(clean_sums)):
        total += max(0.0, margin_T - (float(st) - float(sc)))
    return total


def logic_poison_loss(
    surrogate: md.ClassifierParams, views, cls: int, margin_T: float
) -> float:
    """Margin hinge on trigger-versus-clean saliency, summed over views."""
    views = list(views)
    if not views:
        raise ValueError("logic_poison_loss needs at least one view")
    trig_sums, clean_sums = [], []
    for view in views:
        sal = sa_importance(surrogate, view, cls)
        trig_sums.append(sal.total(view.injected_ids))
        clean_sums.append(sal.total(view.base.adjacency_lists()[view.host]))
    return hinge_margin_total(trig_sums, clean_sums, margin_T)


def _cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        warnings.warn("zero-norm feature vector in cosine; using similarity 0")
        return 0.0
    return float(u @ v / (nu * nv))


def unnoticeable_loss(views) -> float:
    """Sum of exp(-cosine) over every trigger edge of every view."""
    total = 0.0
    for view in views:
        feats = {int(i): view.trigger.trig_features[k] for k, i in enumerate(view.injected_ids)}
        for u, v in view.attach_edges:
            xu = feats.get(int(u), None)
            xu = view.base.features[int(u)] if xu is None else xu
            xv = feats.get(int(v), None)
            xv = view.base.features[int(v)] if xv is None else xv
            total += float(np.exp(-_cosine(xu, xv)))
    return total


def surrogate_loss(
    surrogate: md.ClassifierParams,
    backdoored_graph: Graph,
    split: SplitMask,
    plan: PoisonPlan,
) -> float:
    """Mean cross-entropy over labeled training nodes of the backdoored graph.

    Labels are never altered: poisoned nodes contribute loss against their
    original class with their triggers in place.
    """
    if not set(plan.poisoned.tolist()) <= set(split.train_labeled.tolist()):
        raise ValueError("plan nodes must lie inside the labeled training set")
    return md.training_loss(surrogate, backdoored_graph, split.train_labeled)


# ---------------------------------------------------------------------------
# Fast patch-level saliency (used by the finite-difference path)
# ---------------------------------------------------------------------------


def _act_prime(name: str, x: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (x > 0).astype(np.float64)
    return gc._sigmoid(x)


def _saliency_sums(
    surrogate: md.ClassifierParams,
    patch: _Patch,
    mat: np.ndarray,
    feats: np.ndarray,
    cls: int,
) -> tuple[float, float]:
    """Trigger and clean-1-hop saliency sums for the patch center, closed form."""
    w1, w2 = surrogate.w1, surrogate.w2
    h1 = mat @ (feats @ w1)
    pc = mat[patch.center]
    k_idx = np.flatnonzero(pc)
    q = np.concatenate([patch.trig_locals, patch.clean_1hop])
    m = _act_prime(surrogate.activation, h1[k_idx]) * w2[:, cls][None, :] * pc[k_idx][:, None]
    gq = (mat[np.ix_(k_idx, q)].T @ m) @ w1.T
    s = np.linalg.norm(gq, axis=1)
    return float(s[: patch.s].sum()), float(s[patch.s :].sum())


def _la_fd_vector(
    surrogate: md.ClassifierParams,
    patch: _Patch,
    trig_features: np.ndarray,
    internal_w: np.ndarray,
    y_t: int,
    margin_T: float,
    eps: float,
) -> tuple[np.ndarray, float]:
    """Central-difference gradient of one view's hinge term w.r.t. the trigger
    outputs (features first, then the binarized adjacency entries), plus the
    hinge value itself."""
    s, d = trig_features.shape
    out = np.zeros(s * d + len(internal_w))
    feats = patch.features_with(trig_features)
    mat = dense_patch_matrix(patch, internal_w)
    st, sc = _saliency_sums(surrogate, patch, mat, feats, y_t)
    margin = margin_T - (st - sc)
    base = max(0.0, margin)
    if margin < -1e-3:
        # hinge strictly inactive: the gradient is zero almost everywhere
        return out, base

    w1, w2 = surrogate.w1, surrogate.w2
    pc = mat[patch.center]
    k_idx = np.flatnonzero(pc)
    q = np.concatenate([patch.trig_locals, patch.clean_1hop])
    h1k = (mat @ (feats @ w1))[k_idx]
    p_ktrig = mat[np.ix_(k_idx, patch.trig_locals)]
    p_kq = mat[np.ix_(k_idx, q)]
    w2col = w2[:, y_t]
    pck = pc[k_idx]

    # all feature perturbations share the aggregation matrix: a change at
    # trigger coordinate (t, f) shifts h1 rows by eps * outer(P[:, t], w1[f])
    pert = np.einsum("kt,fh->tfkh", p_ktrig, w1)
    sums = []
    for sign in (1.0, -1.0):
        h1b = h1k[None, None] + sign * eps * pert
        mb = _act_prime(surrogate.activation, h1b) * w2col[None, None, None, :] * pck[None, None, :, None]
        gq = np.einsum("kq,tfkh->tfqh", p_kq, mb) @ w1.T
        sb = np.linalg.norm(gq, axis=3)
        sums.append(sb)
    for t in range(s):
        for f in range(d):
            hp = max(0.0, margin_T - (sums[0][t, f, :s].sum() - sums[0][t, f, s:].sum()))
            hm = max(0.0, margin_T - (sums[1][t, f, :s].sum() - sums[1][t, f, s:].sum()))
            out[t * d + f] = (hp - hm) / (2.0 * eps)

    # adjacency entries are binary: the only meaningful derivative is the
    # difference between the two states (holding the other entries fixed);
    # infinitesimal slopes are non-monotone artifacts of the degree
    # normalization and routinely point away from the better state
    for a in range(len(internal_w)):
        vals = {}
        for state in (1.0, 0.0):
            if internal_w[a] == state:
                vals[state] = base
                continue
            w_pert = internal_w.astype(np.float64).copy()
            w_pert[a] = state
            mat_p = dense_patch_matrix(patch, w_pert)
            st_p, sc_p = _saliency_sums(surrogate, patch, mat_p, feats, y_t)
            vals[state] = max(0.0, margin_T - (st_p - sc_p))
        out[s * d + a] = vals[1.0] - vals[0.0]
    return out, base


# ---------------------------------------------------------------------------
# Outer objective gradient and the bi-level loop
# ---------------------------------------------------------------------------


def _gen_leaves(gen: md.GeneratorParams) -> dict:
    return {
        "g1": gc.Tensor(gen.g1),
        "b1": gc.Tensor(gen.b1.reshape(1, -1)),
        "g2": gc.Tensor(gen.g2),
        "b2": gc.Tensor(gen.b2.reshape(1, -1)),
    }


def outer_objective_gradient(
    gen: md.GeneratorParams,
    surrogate: md.ClassifierParams,
    graph: Graph,
    sampled_nodes,
    config: AttackConfig,
    patch_cache: dict | None = None,
) -> tuple[dict, LossBreakdown]:
    """Gradient of [sum of attack cross-entropy + unnoticeability + beta * logic
    hinge] over the sampled hosts with respect to the generator parameters.

    The cross-entropy and unnoticeability paths are fully analytic (the
    binarized adjacency passes gradients straight through); the logic-hinge
    path uses central finite differences over the trigger outputs chained
    through the generator's analytic backward pass.
    """
    if surrogate.arch != "gcn":
        raise ValueError("the surrogate must be the two-layer convolution model")
    hosts = np.asarray(sampled_nodes, dtype=np.int64)
    if hosts.size == 0:
        raise ValueError("need at least one sampled node")
    if patch_cache is None:
        patch_cache = {}
    full_deg = graph.degrees()
    s, d = gen.s, gen.d
    host_feats = graph.features[hosts]
    raw = md.generator_raw_outputs(gen, host_feats)

    def patch_for(host: int) -> _Patch:
        p = patch_cache.get(host)
        if p is None:
            p = build_patch(graph, host, s, full_deg=full_deg)
            patch_cache[host] = p
        return p

    fd_v = np.zeros_like(raw)
    la_total = 0.0
    if config.beta > 0:
        for b, host in enumerate(hosts):
            feats_b, logits_b = md.split_trigger_outputs(gen, raw[b])
            w_bin = (logits_b > 0).astype(np.float64)
            vec, base = _la_fd_vector(
                surrogate, patch_for(int(host)), feats_b, w_bin,
                config.y_t, config.margin_T, config.fd_eps,
            )
            fd_v[b] = vec
            la_total += base

    leaves = _gen_leaves(gen)
    w1c, w2c = gc.Tensor(surrogate.w1), gc.Tensor(surrogate.w2)
    act = gc.ACTIVATIONS[surrogate.activation]
    outputs_t = md.generator_outputs_tape(leaves, gc.Tensor(host_feats), gen.activation)

    total = None
    ce_total = 0.0
    lu_total = 0.0
    for b, host in enumerate(hosts):
        patch = patch_for(int(host))
        row = gc.gather_rows(outputs_t, [b])
        feat_raw = gc.reshape(gc.slice_cols(row, 0, s * d), (s, d))
        if gen.feature_bound is not None:
            bnd = gen.feature_bound
            trig_feat = gc.scale(gc.tanh(gc.scale(feat_raw, 1.0 / bnd)), bnd)
        else:
            trig_feat = feat_raw
        adj_logits = gc.reshape(gc.slice_cols(row, s * d, gen.out_width), (gen.n_adj,))
        # the discrete trigger topology is held fixed inside the analytic
        # paths; the adjacency head is steered by the logic hinge, whose
        # finite differences compare the two states of each edge
        members = (adj_logits.value > 0).astype(np.float64)
        x_v = gc.embed_rows(patch.base_features, patch.trig_locals, trig_feat)
        w_full = gc.Tensor(patch.weights_with(members))
        h = act(gc.norm_adj_spmm(w_full, gc.matmul(x_v, w1c), patch.edges, patch.base_deg))
        logits = gc.norm_adj_spmm(w_full, gc.matmul(h, w2c), patch.edges, patch.base_deg)
        ce = gc.cross_entropy(logits, [patch.center], [config.y_t], reduction="sum")

        attach_pair = [(patch.center, int(patch.trig_locals[0]))]
        lu = gc.sum_all(gc.exp(gc.scale(gc.cos_pairs(x_v, attach_pair), -1.0)))
        if gen.n_adj:
            cos_int = gc.cos_pairs(x_v, patch.internal_pairs)
            lu = gc.add(
                lu, gc.sum_all(gc.mul(gc.Tensor(members), gc.exp(gc.scale(cos_int, -1.0))))
            )
        ce_total += float(ce.value)
        lu_total += float(lu.value)
        term = gc.add(ce, lu)
        if config.beta > 0:
            v_feat = (config.beta * fd_v[b, : s * d]).reshape(s, d)
            v_adj = config.beta * fd_v[b, s * d :]
            term = gc.add(term, gc.sum_all(gc.mul(trig_feat, gc.Tensor(v_feat))))
            if gen.n_adj:
                term = gc.add(term, gc.sum_all(gc.mul(adj_logits, gc.Tensor(v_adj))))
        total = term if total is None else gc.add(total, term)

    total.backward()

    grads = {
        "g1": leaves["g1"].grad,
        "b1": leaves["b1"].grad.reshape(-1),
        "g2": leaves["g2"].grad,
        "b2": leaves["b2"].grad.reshape(-1),
    }
    for k, v in grads.items():
        if v is None:
            grads[k] = np.zeros_like(getattr(gen, k))
    breakdown = LossBreakdown(attack_ce=ce_total, l_u=lu_total, l_a=la_total, l_f=0.0)
    return grads, breakdown


def build_backdoored_graph(graph: Graph, hosts, triggers) -> BackdooredGraph:
    """Attach one trigger per host; trigger nodes are appended unlabeled."""
    hosts = np.asarray(hosts, dtype=np.int64)
    feats = [graph.features]
    labels = [graph.labels]
    edges = [graph.edges]
    records = []
    next_id = graph.n
    for host, trig in zip(hosts, triggers):
        if trig.d != graph.d:
            raise ValueError("trigger dimension mismatch")
        injected = np.arange(next_id, next_id + trig.s, dtype=np.int64)
        next_id += trig.s
        feats.append(trig.trig_features)
        labels.append(np.full(trig.s, UNLABELED, dtype=np.int64))
        internal = [
            (int(injected[i]), int(injected[j])) for i, j in trig.internal_edges()
        ]
        attach = (int(host), int(injected[trig.attach_index]))
        new_edges = internal + [attach]
        edges.append(np.array(new_edges, dtype=np.int64).reshape(-1, 2))
        records.append(
            TriggerRecord(
                host=int(host),
                injected=tuple(int(i) for i in injected),
                attach_edge=attach,
                internal_edges=tuple(internal),
            )
        )
    out = Graph(
        features=np.vstack(feats),
        labels=np.concatenate(labels),
        edges=np.vstack(edges),
        n_classes=graph.n_classes,
    )
    return BackdooredGraph(graph=out, provenance=BackdoorProvenance(records=tuple(records)))


def save_provenance(prov: BackdoorProvenance, path) -> None:
    lines = []
    for r in prov.records:
        nodes = " ".join(str(i) for i in r.injected)
        internal = ";".join(f"{a},{b}" for a, b in r.internal_edges)
        lines.append(
            f"host {r.host} nodes {nodes} attach {r.attach_edge[0]},{r.attach_edge[1]}"
            f" internal {internal if internal else '-'}"
        )
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8", newline="\n")


def load_provenance(path) -> BackdoorProvenance:
    records = []
    for ln in Path(path).read_text(encoding="utf-8").splitlines():
        if not ln.strip():
            continue
        toks = ln.split()
        host = int(toks[1])
        attach_at = toks.index("attach")
        internal_at = toks.index("internal")
        injected = tuple(int(t) for t in toks[3:attach_at])
        a, b = toks[attach_at + 1].split(",")
        internal_tok = toks[internal_at + 1]
        internal = tuple(
            tuple(int(x) for x in pair.split(","))
            for pair in internal_tok.split(";")
        ) if internal_tok != "-" else ()
        records.append(
            TriggerRecord(host=host, injected=injected, attach_edge=(int(a), int(b)),
                          internal_edges=internal)
        )
    return BackdoorProvenance(records=tuple(records))


def run_bilevel(
    graph: Graph,
    split: SplitMask,
    plan: PoisonPlan,
    config: AttackConfig,
) -> tuple[md.GeneratorParams, md.ClassifierParams, BackdooredGraph]:
    """Alternating optimization of the surrogate and the trigger generator.

    Each outer epoch rebuilds the backdoored graph from the current generator,
    runs `inner_steps` optimizer steps on the surrogate's poisoned training
    loss, then takes one generator step on the outer objective estimated over
    a fresh sample of hosts.  Deterministic under the config seed.
    """
    labeled = np.array(
        [v for v in split.train_labeled if graph.labels[v] != UNLABELED], dtype=np.int64
    )
    if labeled.size == 0:
        raise ValueError("no labeled training nodes")
    hosts = plan.poisoned
    rng = np.random.default_rng(config.seed)
    surrogate = md.init_classifier(
        "gcn", graph.d, config.surrogate_hidden, graph.n_classes,
        seed=config.seed + 1, activation=config.surrogate_activation,
    )
    gen = md.init_generator(
        graph.d, config.trigger_size, config.gen_hidden,
        seed=config.seed + 2, activation=config.gen_activation,
        feature_bound=config.trig_feature_bound,
    )
    sur_params = {"w1": surrogate.w1.copy(), "w2": surrogate.w2.copy()}
    sur_state = gc.init_optim_state(
        sur_params, lr=config.lr_surrogate, weight_decay=config.surrogate_weight_decay
    )
    gen_params = {"g1": gen.g1.copy(), "b1": gen.b1.copy(), "g2": gen.g2.copy(), "b2": gen.b2.copy()}
    gen_state = gc.init_optim_state(
        gen_params, lr=config.lr_generator, weight_decay=config.gen_weight_decay
    )
    pool = np.arange(graph.n)
    patch_cache: dict = {}
    labels = graph.labels[labeled]

    def current_gen() -> md.GeneratorParams:
        return md.GeneratorParams(
            g1=gen_params["g1"], b1=gen_params["b1"], g2=gen_params["g2"], b2=gen_params["b2"],
            s=config.trigger_size, activation=config.gen_activation,
            feature_bound=config.trig_feature_bound,
        )

    def current_surrogate() -> md.ClassifierParams:
        return md.ClassifierParams(
            arch="gcn", w1=sur_params["w1"], w2=sur_params["w2"],
            activation=config.surrogate_activation,
        )

    def build_bd() -> BackdooredGraph:
        g = current_gen()
        triggers = [md.generate_trigger(g, graph.features[h]) for h in hosts]
        return build_backdoored_graph(graph, hosts, triggers)

    for _ in range(config.outer_epochs):
        bd = build_bd()
        adj = normalized_adjacency(bd.graph, add_self_loops=True)

        def loss_fn(params_t, x_t):
            logits = md.gcn_logits_tape(params_t, adj, x_t, config.surrogate_activation)
            return gc.cross_entropy(logits, labeled, labels, reduction="mean")

        diverged = False
        for _ in range(config.inner_steps):
            loss, grads, _ = gc.forward_backward(loss_fn, sur_params, bd.graph.features)
            if loss > 1e6:
                diverged = True
                break
            sur_params, sur_state = gc.adam_step(
                sur_params, grads, sur_state, plain_descent=config.plain_descent
            )
        if diverged:
            warnings.warn("surrogate loss diverged; returning last finite state")
            break

        batch = min(config.outer_batch, pool.size)
        sampled = rng.choice(pool, size=batch, replace=False)
        gen_grads, breakdown = outer_objective_gradient(
            current_gen(), current_surrogate(), graph, sampled, config, patch_cache
        )
        if max(breakdown.attack_ce, breakdown.l_u, breakdown.l_a) > 1e6:
            warnings.warn("outer objective diverged; returning last finite state")
            break
        gen_grads = {"g1": gen_grads["g1"], "b1": gen_grads["b1"],
                     "g2": gen_grads["g2"], "b2": gen_grads["b2"]}
        gen_params, gen_state = gc.adam_step(
            gen_params, gen_grads, gen_state, plain_descent=config.plain_descent
        )

    return current_gen(), current_surrogate(), build_bd()
