"""Label hierarchies: leveled trees/forests, closures, splits, sampling.

A hierarchy is a forest of labels arranged in levels ``1..L``; edges only
connect a level-``i`` parent to a level-``i+1`` child and every non-root
node has exactly one parent. Multi-root datasets (several top-level
families) are plain forests here; no virtual root node is materialized.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

RETRY_CAP = 100


class HierarchyError(ValueError):
    """Structural problem: bad levels, duplicate ids, missing parents."""


class SamplingError(RuntimeError):
    """Negative sampling exhausted its retry budget."""


@dataclass(frozen=True)
class Node:
    node_id: str
    level: int
    name: str


@dataclass(frozen=True)
class EdgeSet:
    """Ordered ``(u, v)`` pairs meaning ``v`` is a sub-concept of ``u``."""

    pairs: tuple[tuple[str, str], ...]
    polarity: str = "positive"

    def __post_init__(self) -> None:
        seen = set()
        for u, v in self.pairs:
            if u == v:
                raise HierarchyError(f"self-loop edge ({u!r}, {v!r})")
            if (u, v) in seen:
                raise HierarchyError(f"duplicate edge ({u!r}, {v!r})")
            seen.add((u, v))

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self) -> Iterator[tuple[str, str]]:
        return iter(self.pairs)

    def __contains__(self, pair) -> bool:
        return tuple(pair) in set(self.pairs)

    def to_set(self) -> frozenset[tuple[str, str]]:
        return frozenset(self.pairs)


@dataclass(frozen=True)
class SplitResult:
    """Positive edge splits plus the fixed evaluation negatives.

    ``val_negative_refs[i]`` is the row of the val positive that negative
    ``i`` corrupts (same for test).
    """

    train: EdgeSet
    val: EdgeSet
    test: EdgeSet
    val_negatives: EdgeSet
    test_negatives: EdgeSet
    val_negative_refs: tuple[int, ...]
    test_negative_refs: tuple[int, ...]
    seed: int


class Hierarchy:
    """Immutable leveled label forest with cached closure and level maps."""

    def __init__(self, nodes: Sequence[Node], edges: Sequence[tuple[str, str]]):
        self._nodes = tuple(nodes)
        self._edges = tuple((str(u), str(v)) for u, v in edges)
        self._by_id = {}
        for n in self._nodes:
            if n.node_id in self._by_id:
                raise HierarchyError(f"duplicate node id {n.node_id!r}")
            if n.level < 1:
                raise HierarchyError(f"node {n.node_id!r} has level {n.level} < 1")
            self._by_id[n.node_id] = n
        levels = sorted({n.level for n in self._nodes})
        if not levels:
            raise HierarchyError("hierarchy has no nodes")
        if levels != list(range(1, len(levels) + 1)):
            raise HierarchyError(f"levels must be contiguous from 1, got {levels}")
        self._level_count = levels[-1]
        self._level_members = {
            lvl: tuple(sorted(n.node_id for n in self._nodes if n.level == lvl))
            for lvl in levels
        }
        self._children: dict[str, list[str]] = {n.node_id: [] for n in self._nodes}
        self._parent: dict[str, str] = {}
        for u, v in self._edges:
            if u not in self._by_id or v not in self._by_id:
                raise HierarchyError(f"edge ({u!r}, {v!r}) references unknown node")
            if self._by_id[v].level != self._by_id[u].level + 1:
                raise HierarchyError(
                    f"edge ({u!r}, {v!r}) must go from level i to level i+1"
                )
            if v in self._parent:
                raise HierarchyError(f"node {v!r} has more than one parent")
            self._parent[v] = u
            self._children[u].append(v)
        for node_id, kids in self._children.items():
            kids.sort()
        for n in self._nodes:
            if n.level > 1 and n.node_id not in self._parent:
                raise HierarchyError(f"non-root node {n.node_id!r} has no parent")
        self._closure: EdgeSet | None = None
        self._closure_set: frozenset[tuple[str, str]] | None = None

    # -- accessors ---------------------------------------------------------

    @property
    def nodes(self) -> tuple[Node, ...]:
        return self._nodes

    @property
    def edges(self) -> tuple[tuple[str, str], ...]:
        return self._edges

    @property
    def level_count(self) -> int:
        return self._level_count

    @property
    def level_sizes(self) -> tuple[int, ...]:
        return tuple(len(self._level_members[l]) for l in range(1, self._level_count + 1))

    @property
    def total_labels(self) -> int:
        return len(self._nodes)

    def node(self, node_id: str) -> Node:
        return self._by_id[node_id]

    def level_members(self, level: int) -> tuple[str, ...]:
        """Node ids at ``level``, sorted: the canonical within-level order."""
        return self._level_members[level]

    def children(self, node_id: str) -> tuple[str, ...]:
        return tuple(self._children[node_id])

    def parent(self, node_id: str) -> str | None:
        return self._parent.get(node_id)

    def roots(self) -> tuple[str, ...]:
        return self._level_members[1]

    def ancestors(self, node_id: str) -> tuple[str, ...]:
        """Strict ancestors ordered parent first, root last."""
        out = []
        cur = self._parent.get(node_id)
        while cur is not None:
            out.append(cur)
            cur = self._parent.get(cur)
        return tuple(out)

    def leaf_descendants(self, node_id: str) -> tuple[str, ...]:
        """Deepest-level descendants of ``node_id`` (itself if at level L)."""
        if self._by_id[node_id].level == self._level_count:
            return (node_id,)
        out: list[str] = []
        stack = list(self._children[node_id])
        while stack:
            cur = stack.pop()
            if self._by_id[cur].level == self._level_count:
                out.append(cur)
            else:
                stack.extend(self._children[cur])
        return tuple(sorted(out))

    def closure(self) -> EdgeSet:
        if self._closure is None:
            self._closure = transitive_closure(self)
        return self._closure

    def closure_set(self) -> frozenset[tuple[str, str]]:
        if self._closure_set is None:
            self._closure_set = self.closure().to_set()
        return self._closure_set


def transitive_closure(h: Hierarchy) -> EdgeSet:
    """All (ancestor, descendant) pairs, basic edges included."""
    pairs: list[tuple[str, str]] = []
    for n in sorted(h.nodes, key=lambda x: x.node_id):
        stack = list(h.children(n.node_id))
        seen = set()
        while stack:
            cur = stack.pop()
            if cur in seen:
                raise HierarchyError(f"cycle detected at node {cur!r}")
            seen.add(cur)
            stack.extend(h.children(cur))
        pairs.extend((n.node_id, d) for d in sorted(seen))
    return EdgeSet(tuple(pairs))


def split_edges(h: Hierarchy, nonbasic_train_fraction: float, seed: int) -> SplitResult:
    """Partition the closure: basic edges train, 5%/5% of the rest val/test.

    After carving out val and test, ``nonbasic_train_fraction`` of the
    remaining non-basic closure edges joins the train set; the rest are
    dropped. Deterministic under ``seed``.
    """
    if not 0.0 <= nonbasic_train_fraction <= 1.0:
        raise ValueError("nonbasic_train_fraction must lie in [0, 1]")
    closure = h.closure()
    basic = set(h.edges)
    nonbasic = [e for e in closure if e not in basic]
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(nonbasic))
    n_eval = int(len(nonbasic) * 0.05)
    val_pairs = sorted(nonbasic[i] for i in order[:n_eval])
    test_pairs = sorted(nonbasic[i] for i in order[n_eval : 2 * n_eval])
    rest = order[2 * n_eval :]
    n_extra = int(len(rest) * nonbasic_train_fraction)
    extra = sorted(nonbasic[i] for i in rest[:n_extra])
    train_pairs = sorted(set(h.edges) | set(extra))
    empty = EdgeSet((), polarity="negative")
    return SplitResult(
        train=EdgeSet(tuple(train_pairs)),
        val=EdgeSet(tuple(val_pairs)),
        test=EdgeSet(tuple(test_pairs)),
        val_negatives=empty,
        test_negatives=empty,
        val_negative_refs=(),
        test_negative_refs=(),
        seed=seed,
    )


def _corrupt_eval_side(
    pos: tuple[str, str],
    corrupt_u: bool,
    pool: Sequence[str],
    closure: frozenset[tuple[str, str]],
    taken: set[tuple[str, str]],
    rng: np.random.Generator,
    count: int,
) -> list[tuple[str, str]]:
    out: list[tuple[str, str]] = []
    u, v = pos
    for _ in range(count):
        for _ in range(RETRY_CAP):
            cand = pool[int(rng.integers(len(pool)))]
            pair = (cand, v) if corrupt_u else (u, cand)
            if pair[0] == pair[1] or pair in closure or pair in taken:
                continue
            taken.add(pair)
            out.append(pair)
            break
        else:
            break  # side exhausted; the caller tops up from the other side
    return out


def augment_eval_negatives(split: SplitResult, closure: EdgeSet, seed: int) -> SplitResult:
    """Attach 10 negatives per val/test positive: 5 corrupt-u, 5 corrupt-v.

    Every emitted pair is absent from the full closure; within each split
    the negative set is duplicate-free. When one side has no valid
    corruption left (e.g. the sole root entails everything, so ``(root,
    y')`` is always a closure member), the missing draws come from the
    other side so that each positive still gets 10 negatives.
    """
    closure_set = closure.to_set()
    nodes = sorted({n for pair in closure_set for n in pair})
    rng = np.random.default_rng(seed)

    def build(positives: EdgeSet) -> tuple[tuple[tuple[str, str], ...], tuple[int, ...]]:
        taken: set[tuple[str, str]] = set()
        pairs: list[tuple[str, str]] = []
        refs: list[int] = []
        for idx, pos in enumerate(positives):
            got: list[tuple[str, str]] = []
            for corrupt_u in (True, False):
                got.extend(
                    _corrupt_eval_side(pos, corrupt_u, nodes, closure_set, taken, rng, 5)
                )
            for corrupt_u in (True, False):
                if len(got) >= 10:
                    break
                got.extend(
                    _corrupt_eval_side(
                        pos, corrupt_u, nodes, closure_set, taken, rng, 10 - len(got)
                    )
                )
            if len(got) < 10:
                raise SamplingError(
                    f"no non-closure corruption for {pos} after {RETRY_CAP} retries"
                )
            pairs.extend(got)
            refs.extend([idx] * len(got))
        return tuple(pairs), tuple(refs)

    val_pairs, val_refs = build(split.val)
    test_pairs, test_refs = build(split.test)
    return SplitResult(
        train=split.train,
        val=split.val,
        test=split.test,
        val_negatives=EdgeSet(val_pairs, polarity="negative"),
        test_negatives=EdgeSet(test_pairs, polarity="negative"),
        val_negative_refs=val_refs,
        test_negative_refs=test_refs,
        seed=split.seed,
    )


def sample_negative_pick_per_level(
    edge: tuple[str, str],
    side: str,
    h: Hierarchy,
    rng: np.random.Generator,
) -> EdgeSet:
    """One corrupted edge per hierarchy level, never a closure member.

    ``side`` is ``"corrupt-u"`` or ``"corrupt-v"``. The corrupting node is
    drawn uniformly from its level; levels with no valid candidate after
    the retry budget are skipped.
    """
    if side not in ("corrupt-u", "corrupt-v"):
        raise ValueError(f"side must be corrupt-u or corrupt-v, got {side!r}")
    closure = h.closure_set()
    u, v = edge
    pairs: list[tuple[str, str]] = []
    seen: set[tuple[str, str]] = set()
    for level in range(1, h.level_count + 1):
        members = h.level_members(level)
        for _ in range(RETRY_CAP):
            cand = members[int(rng.integers(len(members)))]
            pair = (cand, v) if side == "corrupt-u" else (u, cand)
            if pair[0] == pair[1] or pair in closure or pair in seen:
                continue
            pairs.append(pair)
            seen.add(pair)
            break
    return EdgeSet(tuple(pairs), polarity="negative")


def generate_synthetic_tree(levels: int, branching: int) -> Hierarchy:
    """Complete tree: one root at level 1, ``branching`` children per node."""
    if levels < 1 or branching < 1:
        raise ValueError("levels and branching must be >= 1")
    total = sum(branching**i for i in range(levels))
    if total > 10_000_000:
        raise HierarchyError(f"tree would have {total} nodes; refusing")
    width = len(str(branching - 1)) if branching > 1 else 1
    nodes = [Node("r", 1, "r")]
    edges: list[tuple[str, str]] = []
    frontier = ["r"]
    for level in range(2, levels + 1):
        nxt = []
        for parent in frontier:
            for i in range(branching):
                child = f"{parent}.{i:0{width}d}"
                nodes.append(Node(child, level, child))
                edges.append((parent, child))
                nxt.append(child)
        frontier = nxt
    return Hierarchy(nodes, edges)


# ---------------------------------------------------------------------------
# TSV interchange
# ---------------------------------------------------------------------------

def save_hierarchy(h: Hierarchy, nodes_path, edges_path) -> None:
    with open(nodes_path, "w", encoding="utf-8", newline="\n") as f:
        for n in h.nodes:
            f.write(f"{n.node_id}\t{n.level}\t{n.name}\n")
    with open(edges_path, "w", encoding="utf-8", newline="\n") as f:
        for u, v in h.edges:
            f.write(f"{u}\t{v}\n")


def load_hierarchy(nodes_path, edges_path) -> Hierarchy:
    nodes = []
    for line in Path(nodes_path).read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        node_id, level, name = line.split("\t")
        nodes.append(Node(node_id, int(level), name))
    edges = []
    for line in Path(edges_path).read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        u, v = line.split("\t")
        edges.append((u, v))
    return Hierarchy(nodes, edges)


def save_edge_tsv(edges: Iterable[tuple[str, str]], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for u, v in edges:
            f.write(f"{u}\t{v}\n")


def load_edge_tsv(path, polarity: str = "positive") -> EdgeSet:
    pairs = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        u, v = line.split("\t")
        pairs.append((u, v))
    return EdgeSet(tuple(pairs), polarity=polarity)


def save_split(split: SplitResult, out_dir) -> None:
    """Write train/val/test edge TSVs plus one negatives TSV with pos_ref."""
    out = Path(out_dir)
    save_edge_tsv(split.train, out / "train_edges.tsv")
    save_edge_tsv(split.val, out / "val_edges.tsv")
    save_edge_tsv(split.test, out / "test_edges.tsv")
    with open(out / "eval_negatives.tsv", "w", encoding="utf-8", newline="\n") as f:
        f.write("split\tparent_id\tchild_id\tpos_ref\n")
        for (u, v), ref in zip(split.val_negatives, split.val_negative_refs):
            f.write(f"val\t{u}\t{v}\t{ref}\n")
        for (u, v), ref in zip(split.test_negatives, split.test_negative_refs):
            f.write(f"test\t{u}\t{v}\t{ref}\n")


def load_split(split_dir, seed: int = 0) -> SplitResult:
    out = Path(split_dir)
    train = load_edge_tsv(out / "train_edges.tsv")
    val = load_edge_tsv(out / "val_edges.tsv")
    test = load_edge_tsv(out / "test_edges.tsv")
    val_pairs: list[tuple[str, str]] = []
    val_refs: list[int] = []
    test_pairs: list[tuple[str, str]] = []
    test_refs: list[int] = []
    lines = Path(out / "eval_negatives.tsv").read_text(encoding="utf-8").splitlines()
    for line in lines[1:]:
        if not line:
            continue
        which, u, v, ref = line.split("\t")
        if which == "val":
            val_pairs.append((u, v))
            val_refs.append(int(ref))
        else:
            test_pairs.append((u, v))
            test_refs.append(int(ref))
    return SplitResult(
        train=train,
        val=val,
        test=test,
        val_negatives=EdgeSet(tuple(val_pairs), polarity="negative"),
        test_negatives=EdgeSet(tuple(test_pairs), polarity="negative"),
        val_negative_refs=tuple(val_refs),
        test_negative_refs=tuple(test_refs),
        seed=seed,
    )
