"""Fixed small architectures and their training loops.

Two-layer graph convolution (selector, surrogate, target), two-layer sum
aggregation with epsilon self-weighting as an alternate target, and the
trigger generator MLP whose adjacency head is binarized with a
straight-through backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import gradcore as gc
from .graphdata import Graph, SparseOperator, Trigger, normalized_adjacency, sum_aggregation


@dataclass(frozen=True)
class ClassifierParams:
    """Two-layer node classifier weights (no biases)."""

    arch: str  # "gcn" | "gin"
    w1: np.ndarray  # (d, H)
    w2: np.ndarray  # (H, C)
    activation: str = "relu"
    gin_eps: float = 0.0

    def __post_init__(self):
        if self.arch not in ("gcn", "gin"):
            raise ValueError(f"unknown architecture {self.arch!r}")
        if self.activation not in gc.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        for w in (self.w1, self.w2):
            if not np.all(np.isfinite(w)):
                raise ValueError("non-finite classifier weight")
        if self.w1.shape[1] != self.w2.shape[0]:
            raise ValueError("hidden dimensions of w1 and w2 disagree")

    @property
    def d(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    @property
    def n_classes(self) -> int:
        return self.w2.shape[1]


@dataclass(frozen=True)
class GeneratorParams:
    """Two-layer trigger generator: host feature -> trigger features + adjacency logits.

    With a `feature_bound`, the feature head is squashed to
    bound * tanh(raw / bound), keeping generated features on the scale of the
    data; unbounded (None) emits the raw affine outputs.
    """

    g1: np.ndarray  # (d, Hg)
    b1: np.ndarray  # (Hg,)
    g2: np.ndarray  # (Hg, s*d + s*(s-1)//2)
    b2: np.ndarray  # (out,)
    s: int
    activation: str = "relu"
    feature_bound: float | None = None

    def __post_init__(self):
        if self.feature_bound is not None and self.feature_bound <= 0:
            raise ValueError("feature_bound must be positive when set")
        d = self.g1.shape[0]
        out = self.s * d + self.s * (self.s - 1) // 2
        if self.g2.shape != (self.g1.shape[1], out):
            raise ValueError(f"generator output width must be {out}")
        if self.b1.shape != (self.g1.shape[1],) or self.b2.shape != (out,):
            raise ValueError("generator bias shapes inconsistent")
        for w in (self.g1, self.b1, self.g2, self.b2):
            if not np.all(np.isfinite(w)):
                raise ValueError("non-finite generator weight")

    @property
    def d(self) -> int:
        return self.g1.shape[0]

    @property
    def hidden(self) -> int:
        return self.g1.shape[1]

    @property
    def out_width(self) -> int:
        return self.g2.shape[1]

    @property
    def n_adj(self) -> int:
        return self.s * (self.s - 1) // 2


def init_classifier(
    arch: str, d: int, hidden: int, n_classes: int, seed: int, activation: str = "relu"
) -> ClassifierParams:
    rng = np.random.default_rng(seed)
    return ClassifierParams(
        arch=arch,
        w1=gc.glorot_uniform(rng, d, hidden),
        w2=gc.glorot_uniform(rng, hidden, n_classes),
        activation=activation,
    )


def init_generator(
    d: int,
    s: int,
    hidden: int,
    seed: int,
    activation: str = "relu",
    feature_bound: float | None = None,
) -> GeneratorParams:
    rng = np.random.default_rng(seed)
    out = s * d + s * (s - 1) // 2
    return GeneratorParams(
        g1=gc.glorot_uniform(rng, d, hidden),
        b1=np.zeros(hidden),
        g2=gc.glorot_uniform(rng, hidden, out),
        b2=np.zeros(out),
        s=s,
        activation=activation,
        feature_bound=feature_bound,
    )


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


def _act_np(name: str, x: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.where(x > 0, x, 0.0)
    return np.logaddexp(0.0, x)


def gcn_forward(params: ClassifierParams, adj: SparseOperator, features: np.ndarray) -> np.ndarray:
    """Logits of the two-layer convolution: P act(P X W1) W2, sparse throughout."""
    if params.arch != "gcn":
        raise ValueError("gcn_forward requires gcn parameters")
    if features.shape[1] != params.d:
        raise ValueError("feature dimension mismatch")
    h = _act_np(params.activation, adj.apply(features @ params.w1))
    return adj.apply(h @ params.w2)


def gin_forward(params: ClassifierParams, graph: Graph, features: np.ndarray) -> np.ndarray:
    """Logits of the two-layer sum-aggregation model with (1 + eps) self-weighting."""
    if params.arch != "gin":
        raise ValueError("gin_forward requires gin parameters")
    if features.shape[1] != params.d:
        raise ValueError("feature dimension mismatch")
    agg = sum_aggregation(graph)
    e = 1.0 + params.gin_eps
    h = _act_np(params.activation, (e * features + agg.apply(features)) @ params.w1)
    return (e * h + agg.apply(h)) @ params.w2


def gcn_logits_tape(params_t: dict, adj: SparseOperator, x_t: gc.Tensor, activation: str) -> gc.Tensor:
    act = gc.ACTIVATIONS[activation]
    h = act(gc.spmm(adj, gc.matmul(x_t, params_t["w1"])))
    return gc.spmm(adj, gc.matmul(h, params_t["w2"]))


def gin_logits_tape(
    params_t: dict, agg: SparseOperator, x_t: gc.Tensor, activation: str, eps: float
) -> gc.Tensor:
    act = gc.ACTIVATIONS[activation]
    e = 1.0 + eps
    h = act(gc.matmul(gc.add(gc.scale(x_t, e), gc.spmm(agg, x_t)), params_t["w1"]))
    return gc.matmul(gc.add(gc.scale(h, e), gc.spmm(agg, h)), params_t["w2"])


def classifier_logits(params: ClassifierParams, graph: Graph, features: np.ndarray | None = None,
                      adj: SparseOperator | None = None) -> np.ndarray:
    """Dispatch on architecture; builds the aggregation operator when not given."""
    feats = graph.features if features is None else features
    if params.arch == "gcn":
        adj = adj if adj is not None else normalized_adjacency(graph, add_self_loops=True)
        return gcn_forward(params, adj, feats)
    return gin_forward(params, graph, feats)


def predict_labels(params: ClassifierParams, graph: Graph, nodes,
                   features: np.ndarray | None = None,
                   adj: SparseOperator | None = None) -> np.ndarray:
    """Argmax class per requested node; ties resolve to the lowest class id."""
    nodes = np.asarray(nodes, dtype=np.int64)
    logits = classifier_logits(params, graph, features=features, adj=adj)
    return np.argmax(logits[nodes], axis=1).astype(np.int64)


def input_gradient(
    params: ClassifierParams,
    graph_or_adj,
    features: np.ndarray,
    center: int,
    cls: int,
) -> np.ndarray:
    """Gradient of the center node's class logit w.r.t. every feature entry."""
    if params.arch == "gcn":
        adj = (
            graph_or_adj
            if isinstance(graph_or_adj, SparseOperator)
            else normalized_adjacency(graph_or_adj, add_self_loops=True)
        )
        builder = lambda x: gcn_logits_tape(
            {"w1": gc.Tensor(params.w1), "w2": gc.Tensor(params.w2)}, adj, x, params.activation
        )
    else:
        agg = (
            graph_or_adj
            if isinstance(graph_or_adj, SparseOperator)
            else sum_aggregation(graph_or_adj)
        )
        builder = lambda x: gin_logits_tape(
            {"w1": gc.Tensor(params.w1), "w2": gc.Tensor(params.w2)},
            agg, x, params.activation, params.gin_eps,
        )
    return gc.input_gradient_fn(builder, features, center, cls)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def train_classifier(
    graph: Graph,
    adj: SparseOperator | None,
    labeled,
    hyper: gc.TrainHyper,
    arch: str = "gcn",
    plain_descent: bool = False,
) -> ClassifierParams:
    """Full-batch training of the masked cross-entropy, deterministic under seed."""
    labeled = np.asarray(sorted(set(int(i) for i in np.asarray(labeled).ravel())), dtype=np.int64)
    if labeled.size == 0:
        raise ValueError("no labeled nodes to train on")
    labels = graph.labels[labeled]
    if np.any(labels < 0):
        raise ValueError("labeled set contains an unlabeled node")
    init = init_classifier(arch, graph.d, hyper.hidden_dim, graph.n_classes,
                           seed=hyper.seed, activation=hyper.activation)
    if arch == "gcn" and adj is None:
        adj = normalized_adjacency(graph, add_self_loops=True)
    agg = sum_aggregation(graph) if arch == "gin" else None

    params = {"w1": init.w1.copy(), "w2": init.w2.copy()}
    state = gc.init_optim_state(params, lr=hyper.learning_rate, weight_decay=hyper.weight_decay)

    def loss_fn(params_t, x_t):
        if arch == "gcn":
            logits = gcn_logits_tape(params_t, adj, x_t, hyper.activation)
        else:
            logits = gin_logits_tape(params_t, agg, x_t, hyper.activation, init.gin_eps)
        return gc.cross_entropy(logits, labeled, labels, reduction="mean")

    for _ in range(hyper.epochs):
        _, grads, _ = gc.forward_backward(loss_fn, params, graph.features)
        params, state = gc.adam_step(params, grads, state, plain_descent=plain_descent)

    return replace(init, w1=params["w1"], w2=params["w2"])


def training_loss(params: ClassifierParams, graph: Graph, labeled,
                  adj: SparseOperator | None = None) -> float:
    """Mean masked cross-entropy of the classifier on the labeled set."""
    labeled = np.asarray(labeled, dtype=np.int64)
    logits = classifier_logits(params, graph, adj=adj)
    sel = logits[labeled]
    zmax = sel.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.sum(np.exp(sel - zmax), axis=1))
    return float(np.mean(lse - sel[np.arange(len(labeled)), graph.labels[labeled]]))


# ---------------------------------------------------------------------------
# Trigger generation
# ---------------------------------------------------------------------------


def generator_raw_outputs(gen: GeneratorParams, host_features: np.ndarray) -> np.ndarray:
    """Generator MLP outputs for a batch of host features, pre-binarization."""
    host_features = np.atleast_2d(host_features)
    h = _act_np(gen.activation, host_features @ gen.g1 + gen.b1)
    return h @ gen.g2 + gen.b2


def generator_outputs_tape(gen_t: dict, host_t: gc.Tensor, activation: str) -> gc.Tensor:
    """Tape version of the generator forward for a batch of hosts."""
    n = host_t.value.shape[0]
    act = gc.ACTIVATIONS[activation]
    b1 = gc.matmul(gc.Tensor(np.ones((n, 1))), gen_t["b1"])
    b2 = gc.matmul(gc.Tensor(np.ones((n, 1))), gen_t["b2"])
    h = act(gc.add(gc.matmul(host_t, gen_t["g1"]), b1))
    return gc.add(gc.matmul(h, gen_t["g2"]), b2)


def realize_features(gen: GeneratorParams, raw_feats: np.ndarray) -> np.ndarray:
    """Apply the generator's feature bound (identity when unbounded)."""
    if gen.feature_bound is None:
        return raw_feats
    b = gen.feature_bound
    return b * np.tanh(raw_feats / b)


def split_trigger_outputs(gen: GeneratorParams, raw_row: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split one raw output row into realized (s, d) features and adjacency logits."""
    d = gen.d
    feats = realize_features(gen, raw_row[: gen.s * d].reshape(gen.s, d))
    return feats, raw_row[gen.s * d :]


def adjacency_from_logits(s: int, logits: np.ndarray) -> np.ndarray:
    """Binarize upper-triangle logits at zero and mirror into a symmetric matrix."""
    adj = np.zeros((s, s))
    iu, ju = np.triu_indices(s, k=1)
    bits = (logits > 0).astype(np.float64)
    adj[iu, ju] = bits
    adj[ju, iu] = bits
    return adj


def generate_trigger(gen: GeneratorParams, host_feature: np.ndarray) -> Trigger:
    """Trigger for one host: generated features plus binarized internal adjacency."""
    raw = generator_raw_outputs(gen, host_feature)[0]
    feats, logits = split_trigger_outputs(gen, raw)
    return Trigger(
        trig_features=feats.copy(),
        trig_adj=adjacency_from_logits(gen.s, logits),
        attach_index=0,
    )


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_CKPT_ORDER = {
    "gcn": ("w1", "w2"),
    "gin": ("w1", "w2", "gin_eps"),
    "gen": ("g1", "b1", "g2", "b2"),
}


def save_params(obj: ClassifierParams | GeneratorParams, path) -> None:
    """Write `arch d H C s` then the flat weights in the fixed documented order."""
    if isinstance(obj, ClassifierParams):
        arch, d, h, c, s = obj.arch, obj.d, obj.hidden, obj.n_classes, 0
        blocks = [obj.w1.ravel(), obj.w2.ravel()]
        if arch == "gin":
            blocks.append(np.array([obj.gin_eps]))
        extra = obj.activation
    else:
        arch, d, h, c, s = "gen", obj.d, obj.hidden, obj.out_width, obj.s
        blocks = [obj.g1.ravel(), obj.b1.ravel(), obj.g2.ravel(), obj.b2.ravel()]
        bound = "-" if obj.feature_bound is None else repr(float(obj.feature_bound))
        extra = f"{obj.activation} {bound}"
    flat = np.concatenate(blocks) if blocks else np.zeros(0)
    body = " ".join(repr(float(v)) for v in flat)
    Path(path).write_text(
        f"{arch} {d} {h} {c} {s} {extra}\n{body}\n", encoding="utf-8", newline="\n"
    )


def load_params(path) -> ClassifierParams | GeneratorParams:
    text = Path(path).read_text(encoding="utf-8").split("\n")
    head = text[0].split()
    arch, d, h, c, s = head[0], int(head[1]), int(head[2]), int(head[3]), int(head[4])
    activation = head[5] if len(head) > 5 else "relu"
    flat = np.array([float(t) for t in text[1].split()], dtype=np.float64)
    pos = 0

    def take(count):
        nonlocal pos
        out = flat[pos : pos + count]
        pos += count
        return out

    if arch in ("gcn", "gin"):
        w1 = take(d * h).reshape(d, h)
        w2 = take(h * c).reshape(h, c)
        eps = float(take(1)[0]) if arch == "gin" else 0.0
        return ClassifierParams(arch=arch, w1=w1, w2=w2, activation=activation, gin_eps=eps)
    if arch == "gen":
        g1 = take(d * h).reshape(d, h)
        b1 = take(h)
        g2 = take(h * c).reshape(h, c)
        b2 = take(c)
        bound = None if len(head) < 7 or head[6] == "-" else float(head[6])
        return GeneratorParams(g1=g1, b1=b1, g2=g2, b2=b2, s=s, activation=activation,
                               feature_bound=bound)
    raise ValueError(f"unknown checkpoint architecture {arch!r}")
