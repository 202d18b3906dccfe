"""Dynamic draft trees: value-ranked expansion, global reranking, flattening.

Node 0 of every :class:`DraftTree` is the root, standing for the last
accepted token; it has value 1 and depth 0.  A drafted node's value is the
product of draft confidences along its root path, so values never increase
going down the tree.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .models import InvalidInputError

ROOT = -1


class InvalidStateError(RuntimeError):
    pass


@dataclass
class DraftNode:
    token: int
    confidence: float
    value: float
    parent: int
    depth: int
    draft_dist: np.ndarray | None = None
    children: list[int] = field(default_factory=list)


@dataclass
class DraftTree:
    root_context: tuple[int, ...]
    nodes: list[DraftNode]
    layers: list[list[int]]
    # nodes picked as expansion inputs, one entry per expansion step
    expanded: list[list[int]] = field(default_factory=list)

    @classmethod
    def start(cls, ctx: Sequence[int]) -> "DraftTree":
        ctx = tuple(int(t) for t in ctx)
        root = DraftNode(token=ctx[-1] if ctx else ROOT, confidence=1.0, value=1.0, parent=ROOT, depth=0)
        return cls(ctx, [root], [[0]])

    def path(self, i: int) -> list[int]:
        toks = []
        while i > 0:
            node = self.nodes[i]
            toks.append(node.token)
            i = node.parent
        return toks[::-1]

    def context_of(self, i: int) -> tuple[int, ...]:
        return self.root_context + tuple(self.path(i))

    def __len__(self):
        return len(self.nodes) - 1


def top_tokens(dist: np.ndarray, n: int) -> list[int]:
    """The ``n`` most probable tokens with positive mass, ties to the lowest id."""
    order = np.argsort(-dist, kind="stable")
    return [int(t) for t in order[:n] if dist[t] > 0]


def _rank_key(tree: DraftTree, by: str):
    if by == "value":
        return lambda i: (-tree.nodes[i].value, i)
    if by == "confidence":
        return lambda i: (-tree.nodes[i].confidence, i)
    raise InvalidInputError(f"unknown ranking {by!r}")


def top_of_layer(tree: DraftTree, layer: int, k: int, by: str = "value") -> list[int]:
    return sorted(tree.layers[layer], key=_rank_key(tree, by))[:k]


def expand_layer(tree: DraftTree, draft_model, k: int, branch: int, by: str = "value") -> DraftTree:
    """Grow one layer from the ``k`` best nodes of the current deepest layer.

    ``by="confidence"`` ranks expansion inputs by their own draft probability
    instead of by path value.
    """
    if not tree.layers or not tree.nodes:
        raise InvalidStateError("tree has no root layer")
    if k < 1 or branch < 1:
        raise InvalidInputError("k and branch must be at least 1")
    chosen = top_of_layer(tree, len(tree.layers) - 1, k, by)
    new_layer = []
    for i in chosen:
        parent = tree.nodes[i]
        q = draft_model.next_distribution(tree.context_of(i))
        for t in top_tokens(q, branch):
            c = float(q[t])
            tree.nodes.append(DraftNode(t, c, c * parent.value, i, parent.depth + 1, q))
            parent.children.append(len(tree.nodes) - 1)
            new_layer.append(len(tree.nodes) - 1)
    tree.expanded.append(chosen)
    tree.layers.append(new_layer)
    return tree


def build_tree(ctx: Sequence[int], draft_model, depth: int, k: int, branch: int, by: str = "value") -> DraftTree:
    if depth < 1:
        raise InvalidInputError("depth must be at least 1")
    tree = DraftTree.start(ctx)
    for _ in range(depth):
        expand_layer(tree, draft_model, k, branch, by)
    return tree


@dataclass
class FlatDraft:
    """A draft laid out for one verification pass.

    ``parents[i]`` is the position of token i's parent or ``ROOT``.  When
    ``sampled`` is true every token was drawn at random from its
    ``draft_dists`` entry (siblings without replacement, in position order);
    otherwise tokens were picked deterministically and each one's proposal is
    a point mass on itself.
    """

    tokens: list[int]
    parents: list[int]
    draft_dists: list[np.ndarray]
    confidences: list[float]
    values: list[float]
    depths: list[int]
    ranks: list[int]
    mask: np.ndarray
    sampled: bool = False

    def __len__(self):
        return len(self.tokens)

    def children(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {ROOT: []}
        for i, par in enumerate(self.parents):
            out.setdefault(par, []).append(i)
            out.setdefault(i, [])
        return out

    def path_tokens(self, i: int) -> list[int]:
        toks = []
        while i != ROOT:
            toks.append(self.tokens[i])
            i = self.parents[i]
        return toks[::-1]

    def is_chain(self) -> bool:
        return all(par == i - 1 for i, par in enumerate(self.parents))

    def to_dict(self) -> dict:
        return {
            "tokens": list(self.tokens),
            "parents": list(self.parents),
            "values": [float(v) for v in self.values],
            "mask": ["".join("1" if b else "0" for b in row) for row in self.mask],
        }


def ancestor_mask(parents: Sequence[int]) -> np.ndarray:
    m = len(parents)
    mask = np.zeros((m, m), dtype=bool)
    for i in range(m):
        j = i
        while j != ROOT:
            mask[i, j] = True
            j = parents[j]
    return mask


def empty_draft() -> FlatDraft:
    return FlatDraft([], [], [], [], [], [], [], np.zeros((0, 0), dtype=bool))


def flatten(tree: DraftTree, selected, sampled: bool = False) -> FlatDraft:
    """Lay out a parent-closed node set breadth-first."""
    sel = sorted(set(selected), key=lambda i: (tree.nodes[i].depth, i))
    pos = {0: ROOT}
    for p, i in enumerate(sel):
        pos[i] = p
    parents = []
    for i in sel:
        par = tree.nodes[i].parent
        if par not in pos:
            raise InvalidStateError(f"selection is not connected: node {i} lacks parent {par}")
        parents.append(pos[par])
    # value rank within each depth among the selected nodes, 1-based
    ranks = [0] * len(sel)
    by_depth: dict[int, list[int]] = {}
    for p, i in enumerate(sel):
        by_depth.setdefault(tree.nodes[i].depth, []).append(p)
    for members in by_depth.values():
        members.sort(key=lambda p: (-tree.nodes[sel[p]].value, p))
        for r, p in enumerate(members, 1):
            ranks[p] = r
    nodes = [tree.nodes[i] for i in sel]
    return FlatDraft(
        tokens=[n.token for n in nodes],
        parents=parents,
        draft_dists=[n.draft_dist for n in nodes],
        confidences=[n.confidence for n in nodes],
        values=[n.value for n in nodes],
        depths=[n.depth for n in nodes],
        ranks=ranks,
        mask=ancestor_mask(parents),
        sampled=sampled,
    )


def rerank(tree: DraftTree, m: int) -> list[int]:
    """Global top-``m`` node ids by value; equal values prefer shallower nodes."""
    if m < 1:
        raise InvalidInputError("m must be at least 1")
    nodes = tree.nodes
    ids = sorted(range(1, len(nodes)), key=lambda i: (-nodes[i].value, nodes[i].depth, i))
    chosen = ids[:m]
    picked = set(chosen)
    for i in chosen:
        par = nodes[i].parent
        assert par == 0 or par in picked, "reranked selection lost a parent"
    return chosen


def rerank_and_flatten(tree: DraftTree, m: int) -> FlatDraft:
    return flatten(tree, rerank(tree, m))


def expansion_selection(tree: DraftTree, m: int, k: int) -> list[int]:
    """Nodes chosen as expansion inputs plus the top-``k`` of the final layer.

    Capped at ``m`` by dropping the deepest nodes first, which keeps the set
    closed under parents.
    """
    picked = [i for chosen in tree.expanded[1:] for i in chosen]
    picked += top_of_layer(tree, len(tree.layers) - 1, k)
    picked.sort(key=lambda i: (tree.nodes[i].depth, -tree.nodes[i].value, i))
    return picked[:m]


def static_tree(ctx: Sequence[int], draft_model, shape: Sequence[int], branch: int = 10,
                budget: int | None = None) -> FlatDraft:
    """Fixed-shape draft: layer ``d+1`` holds the first ``shape[d]`` candidates.

    Candidates are enumerated parent by parent in layer order, each parent
    offering its ``branch`` most probable tokens, so the shape never looks at
    path values.  ``budget`` caps the total node count.
    """
    if not shape:
        raise InvalidInputError("shape must be non-empty")
    if any(w < 1 for w in shape):
        raise InvalidInputError("layer widths must be positive")
    tree = DraftTree.start(ctx)
    total = 0
    for width in shape:
        if budget is not None:
            width = min(width, budget - total)
        if width <= 0:
            break
        layer = []
        for i in tree.layers[-1]:
            if len(layer) >= width:
                break
            parent = tree.nodes[i]
            q = draft_model.next_distribution(tree.context_of(i))
            for t in top_tokens(q, branch):
                if len(layer) >= width:
                    break
                c = float(q[t])
                tree.nodes.append(DraftNode(t, c, c * parent.value, i, parent.depth + 1, q))
                parent.children.append(len(tree.nodes) - 1)
                layer.append(len(tree.nodes) - 1)
        if not layer:
            break
        tree.layers.append(layer)
        total += len(layer)
    return flatten(tree, range(1, len(tree.nodes)))


def chain_draft(ctx: Sequence[int], draft_model, depth: int, sample=None) -> FlatDraft:
    """Linear draft of ``depth`` tokens.

    With ``sample`` (a callable mapping a distribution to a token) tokens are
    drawn from the draft model; without it each step takes the draft argmax.
    """
    if depth < 1:
        raise InvalidInputError("depth must be at least 1")
    tree = DraftTree.start(ctx)
    i = 0
    for _ in range(depth):
        q = draft_model.next_distribution(tree.context_of(i))
        t = sample(q) if sample is not None else top_tokens(q, 1)[0]
        parent = tree.nodes[i]
        c = float(q[t])
        tree.nodes.append(DraftNode(t, c, c * parent.value, i, parent.depth + 1, q))
        parent.children.append(len(tree.nodes) - 1)
        tree.layers.append([len(tree.nodes) - 1])
        i = len(tree.nodes) - 1
    return flatten(tree, range(1, len(tree.nodes)), sampled=sample is not None)
