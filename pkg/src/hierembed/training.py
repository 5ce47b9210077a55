"""Max-margin training of order-violation embeddings.

One epoch engine serves both trainers: the label-only trainer feeds it
label-label edges, the joint trainer additionally registers instance
nodes whose embeddings are computed from feature rows through a linear
map (plus the exponential map at zero on the ball). With no instances the
joint path reduces to label-only training exactly, batch for batch.

The loss over a batch is ``sum_pos E + sum_neg max(0, margin - E)``.
Negatives come from pick-per-level corruption by default: for each
positive, one corrupted edge per level and per side (corrupt-u,
corrupt-v), skipping corruptions that are true pairs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import geometry
from .geometry import ConeParams
from .hierarchy import EdgeSet, Hierarchy, SplitResult

RETRY_CAP = 100


class TrainingError(RuntimeError):
    """Divergence or non-finite numbers during optimization."""


@dataclass
class TrainConfig:
    """Knobs for embedding trainers; defaults follow the label-only recipe."""

    kind: str = "ec"  # oe | ec | hc
    dim: int = 2
    margin: float = 1.0
    lr: float = 0.01
    epochs: int = 500
    batch_size: int = 10
    optimizer: str = "adam"  # adam | rsgd (labels only)
    aperture_k: float = 0.1
    oe_squared: bool = False
    pick_per_level: bool = True
    neg_passes: int = 1
    seed: int = 0
    # upper bound for initialization norms; None means 0.9 * domain cap.
    # Compact inits (e.g. 0.3) help low-dimensional order embeddings grow
    # outward instead of untangling.
    init_norm_hi: float | None = None
    # joint-only knobs; lr applies to labels, lr_instances to the linear map
    lr_instances: float = 1e-3
    rebalance_images: bool = False

    def __post_init__(self) -> None:
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        # zero freezes that parameter group; negative rates are invalid
        if self.lr < 0 or self.lr_instances < 0:
            raise ValueError("learning rates must be nonnegative")
        if self.optimizer not in ("adam", "rsgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.optimizer == "rsgd" and self.kind != "hc":
            raise ValueError("rsgd only applies to points on the ball")

    def cone_params(self) -> ConeParams:
        return ConeParams(kind=self.kind, k=self.aperture_k, oe_squared=self.oe_squared)


@dataclass
class EmbeddingTable:
    """One point per label, rows in sorted node-id order."""

    node_ids: tuple[str, ...]
    coords: np.ndarray
    params: ConeParams
    _row: dict = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        if len(self.node_ids) != self.coords.shape[0]:
            raise ValueError("node id count does not match coordinate rows")
        self._row = {nid: i for i, nid in enumerate(self.node_ids)}

    def row(self, node_id: str) -> int:
        return self._row[node_id]

    def point(self, node_id: str) -> np.ndarray:
        return self.coords[self._row[node_id]]

    @property
    def dim(self) -> int:
        return int(self.coords.shape[1])


def random_coords(
    n: int,
    dim: int,
    params: ConeParams,
    rng: np.random.Generator,
    norm_hi: float | None = None,
) -> np.ndarray:
    """Random directions at norms uniform in ``[eps + pad, norm_hi]``.

    ``norm_hi`` defaults to 0.9 of the domain cap (unit ball for order
    embeddings, which have no domain floor). Order-embedding directions
    are drawn in the positive orthant, where the reversed product order
    actually nests (signed directions leave low-dimensional inits
    tangled).
    """
    cap = 1.0 if params.norm_max == np.inf else params.norm_max
    lo = params.epsilon + geometry.DOMAIN_PAD
    hi = 0.9 * cap if norm_hi is None else norm_hi
    if hi <= lo:
        raise ValueError(f"init norm bound {hi} must exceed the domain floor {lo}")
    dirs = rng.standard_normal((n, dim))
    if params.kind == "oe":
        dirs = np.abs(dirs)
    dirs /= np.maximum(np.linalg.norm(dirs, axis=1, keepdims=True), 1e-15)
    norms = rng.uniform(lo, hi, size=n)
    return dirs * norms[:, None]


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def like(cls, x: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(x), np.zeros_like(x), 0)


def adam_step(
    param: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> np.ndarray:
    state.t += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grad
    state.v = beta2 * state.v + (1.0 - beta2) * grad * grad
    mhat = state.m / (1.0 - beta1**state.t)
    vhat = state.v / (1.0 - beta2**state.t)
    return param - lr * mhat / (np.sqrt(vhat) + eps)


def rsgd_step(points: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    """Riemannian SGD on the ball: rescale, then exponential-map the step."""
    nu2 = np.einsum("ij,ij->i", points, points)
    riem = grad * (((1.0 - nu2) / 2.0) ** 2)[:, None]
    return geometry.exp_map_rows(points, -lr * riem)


def optimizer_step(
    params: np.ndarray,
    grads: np.ndarray,
    state: AdamState | None,
    config: TrainConfig,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """One update of an embedding table, projected back into the domain."""
    if not np.all(np.isfinite(grads)):
        bad = int(np.count_nonzero(~np.isfinite(grads)))
        raise TrainingError(f"non-finite gradient ({bad} entries); aborting")
    if config.optimizer == "rsgd":
        updated = rsgd_step(params, grads, config.lr)
    else:
        if state is None:
            raise TrainingError("adam requires moment state")
        updated = adam_step(params, grads, state, config.lr)
    return geometry.project_rows(updated, config.cone_params(), rng)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def max_margin_loss(
    positives: Sequence[tuple[str, str]],
    negatives: Sequence[tuple[str, str]],
    emb: EmbeddingTable,
    margin: float,
) -> tuple[float, np.ndarray]:
    """Hinge loss over edge sets with gradients accumulated per node row."""
    grad = np.zeros_like(emb.coords)
    loss = 0.0
    if len(positives):
        iu = np.array([emb.row(u) for u, _ in positives])
        iv = np.array([emb.row(v) for _, v in positives])
        e, gx, gy = geometry.energies_and_gradients(
            emb.coords[iu], emb.coords[iv], emb.params
        )
        loss += float(e.sum())
        np.add.at(grad, iu, gx)
        np.add.at(grad, iv, gy)
    if len(negatives):
        iu = np.array([emb.row(u) for u, _ in negatives])
        iv = np.array([emb.row(v) for _, v in negatives])
        e, gx, gy = geometry.energies_and_gradients(
            emb.coords[iu], emb.coords[iv], emb.params
        )
        hinge = np.maximum(0.0, margin - e)
        loss += float(hinge.sum())
        active = (e < margin)[:, None]
        np.add.at(grad, iu, np.where(active, -gx, 0.0))
        np.add.at(grad, iv, np.where(active, -gy, 0.0))
    return loss, grad


# ---------------------------------------------------------------------------
# Epoch engine
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InstanceNodes:
    """Feature-mapped nodes appended below the deepest label level."""

    instance_ids: tuple[str, ...]
    features: np.ndarray  # (n, D)


class _Graph:
    """Integer-encoded training graph: labels first, then instances."""

    def __init__(
        self,
        h: Hierarchy,
        positives: Sequence[tuple[str, str]],
        instances: InstanceNodes | None,
        forbidden_extra: set[tuple[str, str]] | None = None,
    ):
        self.label_ids = tuple(sorted(n.node_id for n in h.nodes))
        self.n_labels = len(self.label_ids)
        index = {nid: i for i, nid in enumerate(self.label_ids)}
        if instances is not None:
            for k, iid in enumerate(instances.instance_ids):
                if iid in index:
                    raise ValueError(f"instance id {iid!r} collides with a label id")
                index[iid] = self.n_labels + k
        self.index = index
        self.n_total = len(index)
        self.positives = np.array(
            [(index[u], index[v]) for u, v in positives], dtype=np.int64
        ).reshape(-1, 2)
        # Levels available to the corruption sampler: label levels, then the
        # instance level (lowest) when present.
        self.levels = [
            np.array([index[m] for m in h.level_members(l)], dtype=np.int64)
            for l in range(1, h.level_count + 1)
        ]
        if instances is not None and len(instances.instance_ids):
            self.levels.append(
                np.arange(self.n_labels, self.n_total, dtype=np.int64)
            )
        forbidden = {(index[u], index[v]) for u, v in h.closure_set()}
        if forbidden_extra:
            forbidden |= {(index[u], index[v]) for u, v in forbidden_extra}
        forbidden |= {(int(u), int(v)) for u, v in self.positives}
        self.forbidden = forbidden

    def is_instance(self, node: int) -> bool:
        return node >= self.n_labels


def _sample_negatives_for(
    graph: _Graph,
    u: int,
    v: int,
    rng: np.random.Generator,
    config: TrainConfig,
) -> list[tuple[int, int]]:
    out: list[tuple[int, int]] = []
    seen: set[tuple[int, int]] = set()
    if config.pick_per_level:
        pools = graph.levels
    else:
        pools = [np.concatenate(graph.levels)] * len(graph.levels)
    for _ in range(config.neg_passes):
        for corrupt_u in (True, False):
            for pool in pools:
                for _ in range(RETRY_CAP):
                    cand = int(pool[int(rng.integers(len(pool)))])
                    pair = (cand, v) if corrupt_u else (u, cand)
                    if pair[0] == pair[1] or pair in graph.forbidden or pair in seen:
                        continue
                    if graph.is_instance(pair[0]) and graph.is_instance(pair[1]):
                        continue
                    out.append(pair)
                    seen.add(pair)
                    break
    return out


def _sample_negatives_rebalanced(
    graph: _Graph,
    u: int,
    v: int,
    rng: np.random.Generator,
    config: TrainConfig,
) -> list[tuple[int, int]]:
    """Corruptions drawn 50/50 from the instance pool vs a random label level."""
    label_levels = [l for l in graph.levels[: -1]] or graph.levels
    inst_pool = graph.levels[-1]
    out: list[tuple[int, int]] = []
    seen: set[tuple[int, int]] = set()
    draws = 2 * len(graph.levels) * config.neg_passes
    for k in range(draws):
        corrupt_u = k % 2 == 0
        for _ in range(RETRY_CAP):
            if rng.random() < 0.5:
                pool = inst_pool
            else:
                pool = label_levels[int(rng.integers(len(label_levels)))]
            cand = int(pool[int(rng.integers(len(pool)))])
            pair = (cand, v) if corrupt_u else (u, cand)
            if pair[0] == pair[1] or pair in graph.forbidden or pair in seen:
                continue
            if graph.is_instance(pair[0]) and graph.is_instance(pair[1]):
                continue
            out.append(pair)
            seen.add(pair)
            break
    return out


def train_graph_embedding(
    h: Hierarchy,
    positives: Sequence[tuple[str, str]],
    config: TrainConfig,
    *,
    instances: InstanceNodes | None = None,
    forbidden_extra: set[tuple[str, str]] | None = None,
    init_coords: np.ndarray | None = None,
    init_w: np.ndarray | None = None,
    epoch_hook: Callable[[np.ndarray, np.ndarray | None], dict] | None = None,
) -> tuple[np.ndarray, np.ndarray | None, list[dict]]:
    """Shared epoch engine; returns (label coords, linear map or None, log).

    The graph holds one point per label plus, optionally, one node per
    instance embedded as ``feat @ W`` (wrapped in ``exp_0`` on the ball).
    Labels are optimized directly (Adam or RSGD + projection); ``W`` is
    always optimized with Adam at ``config.lr_instances``.
    """
    params = config.cone_params()
    rng = np.random.default_rng(config.seed)
    if instances is not None and not len(instances.instance_ids):
        instances = None  # keep the rng stream identical to label-only runs
    graph = _Graph(h, positives, instances, forbidden_extra)

    if init_coords is not None:
        coords = np.array(init_coords, dtype=float)
        if coords.shape != (graph.n_labels, config.dim):
            raise ValueError(
                f"init coords shape {coords.shape} != {(graph.n_labels, config.dim)}"
            )
        coords = geometry.project_rows(coords, params, rng)
    else:
        coords = geometry.project_rows(
            random_coords(graph.n_labels, config.dim, params, rng, config.init_norm_hi),
            params,
            rng,
        )

    w: np.ndarray | None = None
    feats: np.ndarray | None = None
    if instances is not None:
        feats = np.asarray(instances.features, dtype=float)
        if init_w is not None:
            w = np.array(init_w, dtype=float)
            if w.shape != (feats.shape[1], config.dim):
                raise ValueError(
                    f"init W shape {w.shape} != {(feats.shape[1], config.dim)}"
                )
        else:
            w = rng.standard_normal((feats.shape[1], config.dim)) * 0.01

    adam_labels = AdamState.like(coords) if config.optimizer == "adam" else None
    adam_w = AdamState.like(w) if w is not None else None

    sampler = (
        _sample_negatives_rebalanced
        if (config.rebalance_images and instances is not None and len(instances.instance_ids))
        else _sample_negatives_for
    )

    def embed(nodes: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
        out = np.empty((len(nodes), config.dim))
        lab = nodes < graph.n_labels
        out[lab] = coords[nodes[lab]]
        z = None
        if np.any(~lab):
            z = feats[nodes[~lab] - graph.n_labels] @ w
            out[~lab] = geometry.exp_map_zero(z) if config.kind == "hc" else z
        return out, z

    def accumulate(
        nodes: np.ndarray,
        grads: np.ndarray,
        z: np.ndarray | None,
        coords_grad: np.ndarray,
        w_grad: np.ndarray | None,
    ) -> None:
        lab = nodes < graph.n_labels
        np.add.at(coords_grad, nodes[lab], grads[lab])
        if np.any(~lab):
            g = grads[~lab]
            dz = geometry.exp_map_zero_backprop(z, g) if config.kind == "hc" else g
            w_grad += feats[nodes[~lab] - graph.n_labels].T @ dz

    history: list[dict] = []
    n_pos = len(graph.positives)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n_pos) if n_pos else np.array([], dtype=np.int64)
        epoch_loss = 0.0
        for start in range(0, n_pos, config.batch_size):
            batch = graph.positives[order[start : start + config.batch_size]]
            negs: list[tuple[int, int]] = []
            for u, v in batch:
                negs.extend(sampler(graph, int(u), int(v), rng, config))
            coords_grad = np.zeros_like(coords)
            w_grad = np.zeros_like(w) if w is not None else None

            pu, pv = batch[:, 0], batch[:, 1]
            xs, zx = embed(pu)
            ys, zy = embed(pv)
            e, gx, gy = geometry.energies_and_gradients(xs, ys, params)
            epoch_loss += float(e.sum())
            accumulate(pu, gx, zx, coords_grad, w_grad)
            accumulate(pv, gy, zy, coords_grad, w_grad)

            if negs:
                na = np.array(negs, dtype=np.int64)
                nu, nv = na[:, 0], na[:, 1]
                xs, zx = embed(nu)
                ys, zy = embed(nv)
                e, gx, gy = geometry.energies_and_gradients(xs, ys, params)
                epoch_loss += float(np.maximum(0.0, config.margin - e).sum())
                active = (e < config.margin)[:, None]
                accumulate(nu, np.where(active, -gx, 0.0), zx, coords_grad, w_grad)
                accumulate(nv, np.where(active, -gy, 0.0), zy, coords_grad, w_grad)

            coords = optimizer_step(coords, coords_grad, adam_labels, config, rng)
            if w is not None:
                if not np.all(np.isfinite(w_grad)):
                    raise TrainingError("non-finite gradient for the linear map")
                w = adam_step(w, w_grad, adam_w, config.lr_instances)
        if not np.isfinite(epoch_loss):
            raise TrainingError(f"loss diverged at epoch {epoch}")
        row = {"epoch": epoch, "loss": epoch_loss}
        if epoch_hook is not None:
            row.update(epoch_hook(coords, w))
        history.append(row)
    return coords, w, history


# ---------------------------------------------------------------------------
# Label-only training and edge prediction
# ---------------------------------------------------------------------------

def train_label_embeddings(
    h: Hierarchy,
    split: SplitResult,
    config: TrainConfig,
    init_coords: np.ndarray | None = None,
) -> tuple[EmbeddingTable, list[dict]]:
    """Fit the label hierarchy alone from the split's train edges.

    ``init_coords`` (rows in sorted node-id order) overrides the seeded
    random initialization.
    """
    params = config.cone_params()
    can_eval = len(split.val) > 0 and len(split.val_negatives) > 0

    def hook(coords: np.ndarray, _w) -> dict:
        if not can_eval:
            return {"val_f1": "", "threshold": ""}
        table = EmbeddingTable(label_ids, coords, params)
        res = evaluate_edge_prediction(table, split.val, split.val_negatives)
        return {"val_f1": res.f1, "threshold": res.threshold}

    label_ids = tuple(sorted(n.node_id for n in h.nodes))
    coords, _, history = train_graph_embedding(
        h, tuple(split.train), config, init_coords=init_coords, epoch_hook=hook
    )
    return EmbeddingTable(label_ids, coords, params), history


def pair_energies(emb: EmbeddingTable, pairs: Sequence[tuple[str, str]]) -> np.ndarray:
    if not len(pairs):
        return np.zeros(0)
    iu = np.array([emb.row(u) for u, _ in pairs])
    iv = np.array([emb.row(v) for _, v in pairs])
    return geometry.energies(emb.coords[iu], emb.coords[iv], emb.params)


@dataclass(frozen=True)
class EdgePredictionResult:
    threshold: float
    precision: float
    recall: float
    f1: float
    accuracy: float


def _best_threshold(pos_e: np.ndarray, neg_e: np.ndarray) -> EdgePredictionResult:
    energies = np.concatenate([pos_e, neg_e])
    labels = np.concatenate([np.ones(len(pos_e), bool), np.zeros(len(neg_e), bool)])
    uniq = np.unique(energies)
    candidates = [uniq[0] - 1.0]
    candidates.extend(0.5 * (uniq[:-1] + uniq[1:]))
    candidates.append(uniq[-1])
    best: EdgePredictionResult | None = None
    for t in candidates:
        res = _metrics_at(energies, labels, float(t))
        if best is None or res.f1 > best.f1:
            best = res
    return best


def _metrics_at(energies: np.ndarray, labels: np.ndarray, t: float) -> EdgePredictionResult:
    pred = energies <= t
    tp = int(np.sum(pred & labels))
    fp = int(np.sum(pred & ~labels))
    fn = int(np.sum(~pred & labels))
    tn = int(np.sum(~pred & ~labels))
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    acc = (tp + tn) / len(labels) if len(labels) else 0.0
    return EdgePredictionResult(t, p, r, f1, acc)


def evaluate_edge_prediction(
    emb: EmbeddingTable, positives: EdgeSet, negatives: EdgeSet
) -> EdgePredictionResult:
    """Best-F1 threshold over the pooled energy multiset (classify E <= t)."""
    if not len(positives) or not len(negatives):
        raise ValueError("edge prediction needs non-empty positive and negative sets")
    return _best_threshold(
        pair_energies(emb, tuple(positives)), pair_energies(emb, tuple(negatives))
    )


def edge_prediction_at_threshold(
    emb: EmbeddingTable, positives: EdgeSet, negatives: EdgeSet, threshold: float
) -> EdgePredictionResult:
    """Metrics of a fixed, externally chosen threshold (e.g. from val)."""
    if not len(positives) or not len(negatives):
        raise ValueError("edge prediction needs non-empty positive and negative sets")
    pos_e = pair_energies(emb, tuple(positives))
    neg_e = pair_energies(emb, tuple(negatives))
    energies = np.concatenate([pos_e, neg_e])
    labels = np.concatenate([np.ones(len(pos_e), bool), np.zeros(len(neg_e), bool)])
    return _metrics_at(energies, labels, threshold)
