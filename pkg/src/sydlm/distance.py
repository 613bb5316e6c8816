"""Tree <-> syntactic-distance conversion.

An N-token sentence has N-1 slots between consecutive words; each slot
carries a scalar distance.  Converting a binary tree to distances assigns
every internal node's height to the slot where its left and right subtrees
meet.  Recovery splits spans top-down at the largest distance (unbiased) or
greedily attaches the pivot word to the right span (biased, which collapses
flat regions into right-branching chains).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .trees import Tree, fill_heights, leaf

PROVENANCES = ("gold", "model-lm", "model-syd")


@dataclass
class DistanceSeq:
    """N-1 slot distances for an N-token sentence plus a supervision mask."""

    values: np.ndarray
    mask: np.ndarray
    n_tokens: int
    provenance: str = "gold"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.shape != (self.n_tokens - 1,) or self.mask.shape != self.values.shape:
            raise ValueError(
                "distance sequence for %d tokens needs %d values/mask bits, got %d/%d"
                % (self.n_tokens, self.n_tokens - 1, self.values.size, self.mask.size)
            )
        if self.provenance not in PROVENANCES:
            raise ValueError("unknown provenance %r" % self.provenance)

    def to_line(self) -> str:
        parts = [str(self.n_tokens)]
        parts += [repr(float(v)) for v in self.values]
        parts += ["1" if m else "0" for m in self.mask]
        return " ".join(parts)

    @classmethod
    def from_line(cls, line: str, provenance: str = "gold") -> "DistanceSeq":
        fields = line.split()
        n = int(fields[0])
        vals = [float(x) for x in fields[1:n]]
        bits = [x == "1" for x in fields[n : 2 * n - 1]]
        return cls(np.array(vals), np.array(bits, dtype=bool), n, provenance)


def tree_to_distances(tree: Tree) -> DistanceSeq:
    """Distances from a binarized tree with heights: slot t gets the height
    of the internal node whose subtrees meet between leaves t and t+1."""
    n = tree.n_leaves()
    values = np.zeros(n - 1, dtype=np.float64)

    def walk(node: Tree, offset: int) -> int:
        # returns leaf count of the subtree rooted here
        if node.is_leaf:
            return 1
        if len(node.children) != 2:
            raise ValueError("tree_to_distances needs a binary tree")
        if node.height is None:
            raise ValueError("tree_to_distances needs heights (run binarize_right)")
        left = walk(node.children[0], offset)
        right = walk(node.children[1], offset + left)
        values[offset + left - 1] = node.height
        return left + right

    walk(tree, 0)
    return DistanceSeq(values, np.ones(n - 1, dtype=bool), n, provenance="gold")


def distances_to_tree_unbiased(d, leaves: list[str], label: str = "X") -> Tree:
    """Top-down recovery: split each span at its maximal distance slot,
    recurse on both sides.  Ties take the rightmost maximal slot, so flat
    distances lean left rather than silently right-branching; heights are
    recomputed."""
    values = d.values if isinstance(d, DistanceSeq) else np.asarray(d, dtype=np.float64)
    if len(values) != len(leaves) - 1:
        raise ValueError("need %d distances for %d leaves, got %d" % (len(leaves) - 1, len(leaves), len(values)))

    def build(lo: int, hi: int) -> Tree:
        if hi - lo == 1:
            return leaf(label, leaves[lo])
        # slot t sits between leaves t and t+1; rightmost argmax
        span = values[lo : hi - 1]
        slot = lo + (span.size - 1 - int(np.argmax(span[::-1])))
        return Tree(label=label, children=[build(lo, slot + 1), build(slot + 1, hi)])

    tree = build(0, len(leaves))
    fill_heights(tree)
    return tree


def distances_to_tree_biased(d, leaves: list[str], per_word: bool = False, label: str = "X") -> Tree:
    """Greedy build with a right-branching bias: the maximal-distance word
    becomes the left sibling of the recursively built right span, so flat or
    tied regions collapse into right-branching chains.

    Slot-convention input (the default) is shifted to the per-word convention
    by giving the first word of the span -inf, i.e. word i carries the
    distance of the slot before it.
    """
    values = d.values if isinstance(d, DistanceSeq) else np.asarray(d, dtype=np.float64)
    if per_word:
        if len(values) != len(leaves):
            raise ValueError("per-word input needs one distance per word")
        word_d = np.asarray(values, dtype=np.float64)
    else:
        if len(values) != len(leaves) - 1:
            raise ValueError("need %d distances for %d leaves, got %d" % (len(leaves) - 1, len(leaves), len(values)))
        word_d = np.concatenate([[-math.inf], values])

    def build(lo: int, hi: int) -> Tree:
        if hi - lo == 1:
            return leaf(label, leaves[lo])
        if hi - lo == 2:
            return Tree(label=label, children=[leaf(label, leaves[lo]), leaf(label, leaves[lo + 1])])
        pivot = lo + int(np.argmax(word_d[lo:hi]))
        right = Tree(label=label, children=[leaf(label, leaves[pivot]), build(pivot + 1, hi)]) \
            if pivot + 1 < hi else leaf(label, leaves[pivot])
        if pivot == lo:
            return right
        return Tree(label=label, children=[build(lo, pivot), right])

    tree = build(0, len(leaves))
    fill_heights(tree)
    return tree


def validate_heights(tree: Tree) -> bool:
    """True iff heights satisfy the ultrametric contract: leaves are 1 and
    every parent equals max(children) + 1 (hence strictly dominates both)."""
    for node in tree.iter_nodes():
        if node.height is None:
            return False
        if node.is_leaf:
            if node.height != 1:
                return False
            continue
        child_heights = [ch.height for ch in node.children]
        if any(h is None for h in child_heights):
            return False
        if node.height != max(child_heights) + 1:
            return False
        if not all(node.height > h for h in child_heights):
            return False
    return True
