"""Structure and language-model evaluation: perplexity, unlabeled span F1,
per-tag constituent accuracy, tree depth, left/right word ratio, and
accuracy bucketed by predicted-constituent height.

F1 follows the induced-tree convention: whole-sentence and single-word
spans are dropped.  Per-tag accuracy keeps whole-sentence spans on both
sides since gold roots carry tags.  The gold reference is the pruned n-ary
treebank, not its binarization.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .corpus import Corpus, Vocab
from .distance import distances_to_tree_biased, distances_to_tree_unbiased
from .trees import Tree, fill_heights

DEFAULT_TAGS = ("ADJP", "NP", "VP", "PP")


# ---------------------------------------------------------------------------
# Perplexity
# ---------------------------------------------------------------------------

def perplexity(model, corpus: Corpus, batch_size: int = 1, bptt_length: int = 70) -> float:
    """exp(mean NLL per predicted token), dropout disabled.  Concatenated
    corpora are scored as a stream (eos predicted like any token);
    separate-sentence corpora per sentence with an eos frame."""
    from .training import bptt_batches

    total, count = 0.0, 0.0
    state = None
    for batch in bptt_batches(corpus, batch_size, bptt_length, tree_source="none"):
        if not batch.carry_state:
            state = None
        out = model.forward(batch.inputs, state)
        state = out.state
        ce = ad.cross_entropy_logits(out.logits, batch.targets.reshape(-1)).data
        w = batch.target_weight.reshape(-1)
        total += float(ce @ w)
        count += float(w.sum())
    if count == 0:
        raise ValueError("perplexity: corpus has no targets")
    return float(np.exp(total / count))


# ---------------------------------------------------------------------------
# Distance extraction and tree induction
# ---------------------------------------------------------------------------

def sentence_distances(
    model,
    corpus: Corpus,
    stream: str = "syd",
    layer: Optional[int] = None,
    batch_size: int = 64,
) -> list:
    """Per-sentence distance arrays (N-1 slots) from a chosen model stream.

    Each sentence is framed as [eos] + words with fresh state, so the model
    step reading word k+1 yields the slot between words k and k+1.
    """
    if stream not in ("syd", "lm"):
        raise ValueError("stream must be 'syd' or 'lm'")
    out: list = [None] * corpus.n_sentences
    order = sorted(range(corpus.n_sentences),
                   key=lambda i: (corpus.sentence_spans[i][1] - corpus.sentence_spans[i][0], i))
    for lo in range(0, len(order), batch_size):
        group = order[lo : lo + batch_size]
        lens = [corpus.sentence_spans[i][1] - corpus.sentence_spans[i][0] for i in group]
        t_len = max(lens) + 1
        inputs = np.full((t_len, len(group)), Vocab.eos_id, dtype=np.int64)
        for j, (i, n) in enumerate(zip(group, lens)):
            s, e = corpus.sentence_spans[i]
            inputs[1 : n + 1, j] = corpus.tokens[s:e]
        fwd = model.forward(inputs, None)
        if stream == "syd":
            if fwd.d_syd is None:
                raise ValueError("model has no supervised distance stream (supervision_mode none)")
            vals = fwd.d_syd.data.reshape(t_len, len(group))
        else:
            idx = (layer or getattr(model.config, "supervision_layer", 1)) - 1
            idx = min(max(idx, 0), len(fwd.d_lm) - 1)
            vals = fwd.d_lm[idx].data.reshape(t_len, len(group))
        for j, (i, n) in enumerate(zip(group, lens)):
            out[i] = vals[2 : n + 1, j].copy() if n >= 2 else np.zeros(0)
    return out


def induce_trees(
    model,
    corpus: Corpus,
    stream: str = "syd",
    algo: str = "unbiased",
    layer: Optional[int] = None,
) -> list[Tree]:
    if algo not in ("unbiased", "biased"):
        raise ValueError("algo must be 'unbiased' or 'biased'")
    dists = sentence_distances(model, corpus, stream=stream, layer=layer)
    trees = []
    for i in range(corpus.n_sentences):
        words = corpus.sentence_words(i)
        if algo == "unbiased":
            trees.append(distances_to_tree_unbiased(dists[i], words))
        else:
            trees.append(distances_to_tree_biased(dists[i], words))
    return trees


# ---------------------------------------------------------------------------
# Span machinery
# ---------------------------------------------------------------------------

def spans_of(tree: Tree, include_root: bool = False) -> set:
    """(start, end) half-open spans of internal nodes, single-word spans
    dropped; the whole-sentence span only with include_root."""
    spans = set()
    n_total = tree.n_leaves()

    def walk(node: Tree, offset: int) -> int:
        if node.is_leaf:
            return 1
        width = 0
        for ch in node.children:
            width += walk(ch, offset + width)
        if width >= 2 and (include_root or not (offset == 0 and width == n_total)):
            spans.add((offset, offset + width))
        return width

    walk(tree, 0)
    return spans


def labeled_spans(tree: Tree) -> list:
    """(label, start, end) for internal nodes of width >= 2, root included."""
    out = []

    def walk(node: Tree, offset: int) -> int:
        if node.is_leaf:
            return 1
        width = 0
        for ch in node.children:
            width += walk(ch, offset + width)
        if width >= 2:
            out.append((node.label, offset, offset + width))
        return width

    walk(tree, 0)
    return out


def unlabeled_f1(pred_trees: Sequence[Tree], gold_trees: Sequence[Tree]):
    """(micro, macro) unlabeled span F1 on a 0-100 scale.

    Per sentence both-empty span sets count as F1 100; micro pools the
    match/pred/gold counts over the corpus."""
    if len(pred_trees) != len(gold_trees):
        raise ValueError("pred and gold lists differ in length")
    match_sum = pred_sum = gold_sum = 0
    sent_f1 = []
    for i, (pred, gold) in enumerate(zip(pred_trees, gold_trees)):
        if pred.n_leaves() != gold.n_leaves():
            raise ValueError("sentence %d: pred has %d leaves, gold %d"
                             % (i, pred.n_leaves(), gold.n_leaves()))
        sp, sg = spans_of(pred), spans_of(gold)
        match = len(sp & sg)
        match_sum += match
        pred_sum += len(sp)
        gold_sum += len(sg)
        if not sp and not sg:
            sent_f1.append(100.0)
            continue
        p = match / len(sp) if sp else 0.0
        r = match / len(sg) if sg else 0.0
        sent_f1.append(200.0 * p * r / (p + r) if p + r > 0 else 0.0)
    if pred_sum == 0 and gold_sum == 0:
        micro = 100.0
    else:
        p = match_sum / pred_sum if pred_sum else 0.0
        r = match_sum / gold_sum if gold_sum else 0.0
        micro = 200.0 * p * r / (p + r) if p + r > 0 else 0.0
    macro = float(np.mean(sent_f1)) if sent_f1 else 100.0
    return micro, macro


def per_tag_accuracy(pred_trees, gold_nary_trees, tags: Sequence[str] = DEFAULT_TAGS) -> dict:
    """Fraction (0-100) of gold constituents of each tag whose span occurs
    in the prediction; whole-sentence spans kept on both sides."""
    found = {t: 0 for t in tags}
    total = {t: 0 for t in tags}
    for pred, gold in zip(pred_trees, gold_nary_trees):
        if gold is None:
            continue
        pspans = spans_of(pred, include_root=True)
        for label, s, e in labeled_spans(gold):
            if label in total:
                total[label] += 1
                if (s, e) in pspans:
                    found[label] += 1
    return {t: (100.0 * found[t] / total[t] if total[t] else None) for t in tags}


def depth_and_ratio(trees: Sequence[Tree]):
    """(mean max root-to-leaf depth, pooled left/right attachment ratio):
    leaf words that are non-rightmost children of their parent over those
    that are rightmost."""
    depths = []
    left = right = 0
    for tree in trees:
        depths.append(tree.depth())
        for node in tree.iter_nodes():
            if node.is_leaf:
                continue
            last = len(node.children) - 1
            for pos, ch in enumerate(node.children):
                if ch.is_leaf:
                    if pos == last:
                        right += 1
                    else:
                        left += 1
    mean_depth = float(np.mean(depths)) if depths else 0.0
    ratio = left / right if right else float("nan")
    return mean_depth, ratio


def accuracy_by_height(pred_trees, gold_trees) -> dict:
    """height -> (correct, total) over predicted internal nodes, the
    whole-sentence node excluded; a node is correct when its span is a gold
    constituent."""
    buckets: dict[int, list] = {}
    for pred, gold in zip(pred_trees, gold_trees):
        if gold is None:
            continue
        if pred.height is None:
            fill_heights(pred)
        gspans = spans_of(gold, include_root=True)

        def walk(node: Tree, offset: int, is_root: bool) -> int:
            if node.is_leaf:
                return 1
            width = 0
            for ch in node.children:
                width += walk(ch, offset + width, False)
            if not is_root:
                correct, total = buckets.get(node.height, (0, 0))
                buckets[node.height] = (correct + ((offset, offset + width) in gspans), total + 1)
            return width

        walk(pred, 0, True)
    return {h: tuple(v) for h, v in sorted(buckets.items())}


def length_filter(corpus: Corpus, max_len: int) -> Corpus:
    """Sub-corpus of sentences with at most max_len tokens."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    keep = [i for i, (s, e) in enumerate(corpus.sentence_spans) if e - s <= max_len]
    tokens: list[int] = []
    spans = []
    for i in keep:
        s, e = corpus.sentence_spans[i]
        start = len(tokens)
        tokens.extend(corpus.tokens[s:e])
        spans.append((start, len(tokens)))
        if corpus.mode == "concat":
            tokens.append(Vocab.eos_id)
    return Corpus(
        tokens=np.array(tokens, dtype=np.int64),
        sentence_spans=spans,
        gold_trees=[corpus.gold_trees[i] for i in keep],
        gold_trees_nary=[corpus.gold_trees_nary[i] for i in keep],
        vocab=corpus.vocab,
        mode=corpus.mode,
        manifest=corpus.manifest,
    )


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class StructureReport:
    f1_micro: float
    f1_macro: float
    per_tag: dict
    mean_depth: float
    left_right_ratio: float
    height_accuracy: dict  # height -> {"correct", "total", "accuracy"}
    n_sentences: int

    def to_json_dict(self) -> dict:
        return {
            "f1_micro": self.f1_micro,
            "f1_macro": self.f1_macro,
            "per_tag": self.per_tag,
            "mean_depth": self.mean_depth,
            "left_right_ratio": self.left_right_ratio,
            "height_accuracy": {str(h): v for h, v in self.height_accuracy.items()},
            "n_sentences": self.n_sentences,
        }

    def height_csv_rows(self) -> list:
        rows = [("height", "accuracy", "count")]
        for h, cell in self.height_accuracy.items():
            rows.append((h, cell["accuracy"], cell["total"]))
        return rows


def structure_report(pred_trees, gold_nary_trees, tags: Sequence[str] = DEFAULT_TAGS) -> StructureReport:
    pairs = [(p, g) for p, g in zip(pred_trees, gold_nary_trees) if g is not None]
    preds = [p for p, _ in pairs]
    golds = [g for _, g in pairs]
    micro, macro = unlabeled_f1(preds, golds)
    mean_depth, ratio = depth_and_ratio(preds)
    heights = accuracy_by_height(preds, golds)
    height_cells = {
        h: {"correct": c, "total": t, "accuracy": 100.0 * c / t if t else None}
        for h, (c, t) in heights.items()
    }
    return StructureReport(
        f1_micro=micro,
        f1_macro=macro,
        per_tag=per_tag_accuracy(preds, golds, tags),
        mean_depth=mean_depth,
        left_right_ratio=ratio,
        height_accuracy=height_cells,
        n_sentences=len(preds),
    )


def bracket_words(tree: Tree) -> str:
    """Label-free bracketing over tokens, for side-by-side inspection."""
    if tree.is_leaf:
        return tree.token or ""
    return "(%s)" % " ".join(bracket_words(ch) for ch in tree.children)


def render_parallel(words: list, named_trees: list) -> str:
    """Stacked rendering of several trees over one sentence."""
    lines = ["sentence: %s" % " ".join(words)]
    for name, tree in named_trees:
        lines.append("%8s: %s" % (name, bracket_words(tree)))
    return "\n".join(lines)


def report_to_json(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"
