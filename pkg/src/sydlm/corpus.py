"""Treebank preprocessing: cleaned token streams aligned with gold trees.

The pipeline mirrors the usual LM treebank preparation: drop punctuation
leaves, lowercase, map number tokens to a placeholder, truncate the
vocabulary by frequency, and either concatenate sentences with an
end-of-sentence marker between them or keep them separate.  Gold trees are
pruned in lockstep so leaf i always lines up with token i of its sentence.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .distance import DistanceSeq, tree_to_distances
from .trees import Tree, binarize_right, map_leaf_tokens, parse_bracketed, prune_leaves, render_bracketed

UNK = "<unk>"
EOS = "<eos>"

CORPUS_MAGIC = "sydlm-corpus"
CORPUS_VERSION = 1

DEFAULT_DROP_TAGS = frozenset({".", ",", ":", "``", "''", "-LRB-", "-RRB-", "#", "$"})
DEFAULT_NUMBER_PATTERN = r"[0-9][0-9.,/:\-]*"

MODES = ("concat", "sepsent")


class ConfigError(ValueError):
    pass


class Vocab:
    """Dense id<->word map; id 0 is <unk>, id 1 is <eos>."""

    def __init__(self, words: list[str]):
        if words[:2] != [UNK, EOS]:
            raise ConfigError("vocab must start with %s and %s" % (UNK, EOS))
        self.words = list(words)
        self.index = {w: i for i, w in enumerate(self.words)}
        if len(self.index) != len(self.words):
            raise ConfigError("vocab contains duplicate words")

    unk_id = 0
    eos_id = 1

    def __len__(self) -> int:
        return len(self.words)

    def id(self, word: str) -> int:
        return self.index.get(word, self.unk_id)

    def word(self, idx: int) -> str:
        return self.words[idx]

    @classmethod
    def build(cls, counts: Counter, max_size: int) -> "Vocab":
        # most frequent first, ties broken lexicographically; specials always kept
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        keep = max(max_size - 2, 0)
        words = [UNK, EOS] + [w for w, _ in ranked[:keep] if w not in (UNK, EOS)]
        return cls(words)

    def to_jsonable(self) -> list[str]:
        return list(self.words)


@dataclass
class PreprocessRules:
    lowercase: bool = True
    drop_tags: frozenset = DEFAULT_DROP_TAGS
    number_pattern: str = DEFAULT_NUMBER_PATTERN
    number_symbol: str = "N"
    vocab_max_size: int = 10000
    mode: str = "concat"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError("mode must be one of %s, got %r" % (MODES, self.mode))
        self.drop_tags = frozenset(self.drop_tags)

    def clean_token(self, token: str) -> str:
        if self.lowercase:
            token = token.lower()
        if self.number_pattern and re.fullmatch(self.number_pattern, token):
            token = self.number_symbol
        return token


@dataclass
class Corpus:
    """Token-id stream with sentence spans and per-sentence gold trees.

    Spans cover sentence words only; in concat mode the single <eos> after
    each sentence sits between spans and belongs to no gold tree.  The
    binarized trees drive distance supervision; the pruned n-ary originals
    keep their labels for structure evaluation.
    """

    tokens: np.ndarray
    sentence_spans: list[tuple[int, int]]
    gold_trees: list[Optional[Tree]]
    gold_trees_nary: list[Optional[Tree]]
    vocab: Vocab
    mode: str
    manifest: Optional[dict] = None

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.validate()

    @property
    def n_sentences(self) -> int:
        return len(self.sentence_spans)

    def sentence_ids(self, i: int) -> np.ndarray:
        s, e = self.sentence_spans[i]
        return self.tokens[s:e]

    def sentence_words(self, i: int) -> list[str]:
        return [self.vocab.word(t) for t in self.sentence_ids(i)]

    def gold_distances(self, i: int) -> Optional[DistanceSeq]:
        tree = self.gold_trees[i]
        if tree is None:
            return None
        return tree_to_distances(tree)

    def validate(self) -> None:
        sep = 1 if self.mode == "concat" else 0
        pos = 0
        for i, (s, e) in enumerate(self.sentence_spans):
            if s != pos or e <= s:
                raise ValueError("sentence span %d (%d,%d) does not tile the stream" % (i, s, e))
            pos = e + sep
            tree = self.gold_trees[i]
            if tree is not None and tree.n_leaves() != e - s:
                raise ValueError("gold tree %d has %d leaves for a %d-token span" % (i, tree.n_leaves(), e - s))
            if sep and e < len(self.tokens) and self.tokens[e] != Vocab.eos_id:
                raise ValueError("missing eos separator after sentence %d" % i)
        if self.sentence_spans and pos != len(self.tokens):
            raise ValueError("spans+separators cover %d of %d tokens" % (pos, len(self.tokens)))

    # -- serialization ------------------------------------------------------

    def save(self, path: str) -> None:
        payload = {
            "magic": CORPUS_MAGIC,
            "version": CORPUS_VERSION,
            "mode": self.mode,
            "vocab": self.vocab.to_jsonable(),
            "tokens": [int(t) for t in self.tokens],
            "sentence_spans": [[int(s), int(e)] for s, e in self.sentence_spans],
            "gold_trees": [None if t is None else render_bracketed(t) for t in self.gold_trees],
            "gold_trees_nary": [None if t is None else render_bracketed(t) for t in self.gold_trees_nary],
            "manifest": self.manifest,
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: str) -> "Corpus":
        with open(path) as fh:
            payload = json.load(fh)
        if payload.get("magic") != CORPUS_MAGIC:
            raise ConfigError("%s is not a corpus dump (bad magic)" % path)
        if payload.get("version") != CORPUS_VERSION:
            raise ConfigError("unsupported corpus version %r" % payload.get("version"))

        def load_tree(text: Optional[str], binary: bool) -> Optional[Tree]:
            if text is None:
                return None
            tree = parse_bracketed(text, clean=False)[0]
            if binary:
                return binarize_right(tree)
            return tree

        return cls(
            tokens=np.array(payload["tokens"], dtype=np.int64),
            sentence_spans=[tuple(se) for se in payload["sentence_spans"]],
            gold_trees=[load_tree(t, binary=True) for t in payload["gold_trees"]],
            gold_trees_nary=[load_tree(t, binary=False) for t in payload["gold_trees_nary"]],
            vocab=Vocab(payload["vocab"]),
            mode=payload["mode"],
            manifest=payload.get("manifest"),
        )


def preprocess_corpus(
    trees: list[Tree],
    rules: PreprocessRules,
    vocab: Optional[Vocab] = None,
) -> Corpus:
    """Clean trees, build/apply a vocabulary, and assemble the token stream.

    Sentences whose leaves are all dropped disappear entirely.  When a vocab
    is supplied (e.g. valid/test reusing the training vocab) it must carry
    the special ids.
    """
    if vocab is not None and (vocab.word(Vocab.unk_id) != UNK or vocab.word(Vocab.eos_id) != EOS):
        raise ConfigError("supplied vocab is missing the special ids")

    drop = lambda tag, token: tag in rules.drop_tags
    cleaned: list[Tree] = []
    for tree in trees:
        pruned = prune_leaves(tree, drop)
        if pruned is None:
            continue
        cleaned.append(map_leaf_tokens(pruned, rules.clean_token))

    if vocab is None:
        counts = Counter()
        for tree in cleaned:
            counts.update(tree.tokens())
        vocab = Vocab.build(counts, rules.vocab_max_size)

    tokens: list[int] = []
    spans: list[tuple[int, int]] = []
    gold_binary: list[Optional[Tree]] = []
    for tree in cleaned:
        words = tree.tokens()
        start = len(tokens)
        tokens.extend(vocab.id(w) for w in words)
        spans.append((start, len(tokens)))
        if rules.mode == "concat":
            tokens.append(Vocab.eos_id)
        gold_binary.append(binarize_right(tree))

    return Corpus(
        tokens=np.array(tokens, dtype=np.int64),
        sentence_spans=spans,
        gold_trees=gold_binary,
        gold_trees_nary=cleaned,
        vocab=vocab,
        mode=rules.mode,
    )
