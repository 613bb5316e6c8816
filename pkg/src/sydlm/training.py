"""Losses, truncated-BPTT batching with gold-distance alignment, and the
SGD training loop with its ablation switches.

Supervision slots: the distance a model emits at step t describes the
boundary between inputs t-1 and t, so window row 0 and any slot not covered
by a single sentence's tree are masked out.  Ranking pairs are drawn only
within one sentence.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import TrainConfig
from .corpus import Corpus, Vocab
from .distance import tree_to_distances
from .trees import random_binary_tree


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def lm_loss(logits: Tensor, targets: np.ndarray, weights: Optional[np.ndarray] = None) -> Tensor:
    """Mean cross entropy per predicted token, in nats."""
    ce = ad.cross_entropy_logits(logits, targets)
    if weights is None:
        return ad.tmean(ce)
    w = np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        raise ValueError("lm_loss: no weighted targets")
    return ad.tsum(ce * Tensor(w)) * (1.0 / total)


def pair_indices(d_g: np.ndarray, mask: np.ndarray, groups: Optional[np.ndarray] = None):
    """Index pairs (i, j), i < j, with both slots masked-in and in the same
    group (sentence)."""
    d_g = np.asarray(d_g)
    mask = np.asarray(mask, dtype=bool)
    if groups is None:
        groups = np.zeros(d_g.shape, dtype=np.int64)
    groups = np.asarray(groups)
    valid = mask & (groups >= 0)
    ii_parts, jj_parts = [], []
    for g in np.unique(groups[valid]):
        idx = np.flatnonzero(valid & (groups == g))
        if idx.size < 2:
            continue
        iu, ju = np.triu_indices(idx.size, k=1)
        ii_parts.append(idx[iu])
        jj_parts.append(idx[ju])
    if not ii_parts:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty
    return np.concatenate(ii_parts), np.concatenate(jj_parts)


def ranking_loss(
    d_w,
    d_g: np.ndarray,
    mask: np.ndarray,
    pair_mode: str = "symmetric",
    groups: Optional[np.ndarray] = None,
    reduction: str = "mean",
) -> Tensor:
    """Pairwise hinge on predicted distances vs the gold ranking:
    sum over pairs of max(0, (1 - sign(g_i - g_j)) (w_i - w_j)); the
    symmetric mode adds the mirrored pairs.  Mean is over unordered pairs."""
    if pair_mode not in ("as-written", "symmetric"):
        raise ValueError("pair_mode must be as-written or symmetric")
    d_w = ad.as_tensor(d_w)
    d_g = np.asarray(d_g, dtype=np.float64)
    ii, jj = pair_indices(d_g, mask, groups)
    if ii.size == 0:
        return Tensor(0.0)
    sign = np.sign(d_g[ii] - d_g[jj])
    w_i = ad.take(d_w, ii)
    w_j = ad.take(d_w, jj)
    loss = ad.tsum(Tensor(1.0 - sign) * ad.relu(w_i - w_j))
    if pair_mode == "symmetric":
        loss = loss + ad.tsum(Tensor(1.0 + sign) * ad.relu(w_j - w_i))
    if reduction == "mean":
        loss = loss * (1.0 / ii.size)
    elif reduction != "sum":
        raise ValueError("reduction must be mean or sum")
    return loss


def ranking_accuracy(
    d_w: np.ndarray,
    d_g: np.ndarray,
    mask: np.ndarray,
    groups: Optional[np.ndarray] = None,
) -> Optional[float]:
    """Percent of strictly gold-ordered pairs whose predicted order agrees
    (strictly); None when there are no strict pairs."""
    d_w = np.asarray(d_w, dtype=np.float64)
    ii, jj = pair_indices(d_g, mask, groups)
    if ii.size == 0:
        return None
    sign_g = np.sign(np.asarray(d_g)[ii] - np.asarray(d_g)[jj])
    strict = sign_g != 0
    if not strict.any():
        return None
    agree = np.sign(d_w[ii] - d_w[jj])[strict] == sign_g[strict]
    return 100.0 * float(agree.mean())


def joint_loss(l_lm: Tensor, l_syd: Optional[Tensor], alpha: float) -> Tensor:
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if l_syd is None:
        return l_lm
    return l_lm + alpha * l_syd


def supervised_pair_accuracy(model, corpus, batch_size: int, bptt_length: int) -> Optional[float]:
    """Gold-pair ranking accuracy (percent) of the supervised distance stream
    over exactly the pair set the ranking loss trains: within-sentence,
    within-window slots, dropout off."""
    correct = 0
    total = 0
    state = None
    for batch in bptt_batches(corpus, batch_size, bptt_length, tree_source="gold"):
        if not batch.carry_state:
            state = None
        out = model.forward(batch.inputs, state)
        state = out.state
        if out.d_syd is None:
            return None
        d_w = out.d_syd.data
        d_g = batch.gold_d.reshape(-1)
        ii, jj = pair_indices(d_g, batch.gold_mask.reshape(-1), batch.sent_id.reshape(-1))
        if ii.size == 0:
            continue
        sign_g = np.sign(d_g[ii] - d_g[jj])
        strict = sign_g != 0
        correct += int((np.sign(d_w[ii] - d_w[jj])[strict] == sign_g[strict]).sum())
        total += int(strict.sum())
    return 100.0 * correct / total if total else None


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    inputs: np.ndarray        # (T, B) input token ids
    targets: np.ndarray       # (T, B) next-token ids
    target_weight: np.ndarray  # (T, B) 1.0 where the target is scored
    gold_d: np.ndarray        # (T, B) gold distance of the slot before input t
    gold_mask: np.ndarray     # (T, B) True on supervisable slots
    sent_id: np.ndarray       # (T, B) sentence index, -1 off-sentence
    carry_state: bool         # False when hidden state must reset first


def _mixed_seed(seed: int, index: int) -> int:
    return (seed * 1000003 + index) % (2**31 - 1)


def _gold_slot_streams(corpus: Corpus, tree_source: str, seed: int):
    """Per-slot gold distance/mask/sentence-id arrays over the token stream."""
    m = len(corpus.tokens)
    d = np.zeros(max(m - 1, 0))
    mask = np.zeros(max(m - 1, 0), dtype=bool)
    sent = np.full(max(m - 1, 0), -1, dtype=np.int64)
    if tree_source == "none":
        return d, mask, sent
    for i, (s, e) in enumerate(corpus.sentence_spans):
        n = e - s
        if n < 2:
            continue
        if tree_source == "gold":
            tree = corpus.gold_trees[i]
            if tree is None:
                continue
            seq = tree_to_distances(tree)
        elif tree_source == "random":
            seq = tree_to_distances(random_binary_tree(n, _mixed_seed(seed, i)))
        else:
            raise ValueError("unknown tree_source %r" % tree_source)
        d[s : e - 1] = seq.values
        mask[s : e - 1] = seq.mask
        sent[s : e - 1] = i
    return d, mask, sent


def bptt_batches(
    corpus: Corpus,
    batch_size: int,
    bptt_length: int,
    tree_source: str = "gold",
    seed: int = 0,
) -> Iterator[Batch]:
    """Concatenated mode folds the stream into batch_size columns and slices
    bptt windows (state carried across windows); separate-sentence mode
    yields length-bucketed sentence batches framed as
    input [eos]+words -> target words+[eos], state reset per batch."""
    if corpus.mode == "concat":
        yield from _concat_batches(corpus, batch_size, bptt_length, tree_source, seed)
    else:
        yield from _sepsent_batches(corpus, batch_size, tree_source, seed)


def _concat_batches(corpus, batch_size, bptt_length, tree_source, seed):
    stream = corpus.tokens
    m = len(stream)
    if batch_size > m:
        raise ValueError("batch_size %d exceeds token count %d" % (batch_size, m))
    seg = m // batch_size
    if seg < 2:
        raise ValueError("stream too short for batch_size %d" % batch_size)
    cols = stream[: seg * batch_size].reshape(batch_size, seg).T  # (seg, B)
    d_stream, mask_stream, sent_stream = _gold_slot_streams(corpus, tree_source, seed)
    col_base = np.arange(batch_size) * seg
    first = True
    for start in range(0, seg - 1, bptt_length):
        t_len = min(bptt_length, seg - 1 - start)
        inputs = cols[start : start + t_len]
        targets = cols[start + 1 : start + 1 + t_len]
        rows = np.arange(t_len)[:, None]
        slot = col_base[None, :] + start + rows - 1      # slot before input row
        valid = rows >= 1
        slot_safe = np.where(valid, slot, 0)
        gold_d = np.where(valid, d_stream[slot_safe], 0.0)
        gold_mask = valid & mask_stream[slot_safe]
        sent_id = np.where(gold_mask, sent_stream[slot_safe], -1)
        yield Batch(
            inputs=inputs.copy(),
            targets=targets.copy(),
            target_weight=np.ones_like(inputs, dtype=np.float64),
            gold_d=gold_d,
            gold_mask=gold_mask,
            sent_id=sent_id,
            carry_state=not first,
        )
        first = False


def _sepsent_batches(corpus, batch_size, tree_source, seed):
    order = sorted(range(corpus.n_sentences),
                   key=lambda i: (corpus.sentence_spans[i][1] - corpus.sentence_spans[i][0], i))
    d_stream, mask_stream, sent_stream = _gold_slot_streams(corpus, tree_source, seed)
    eos = Vocab.eos_id
    for lo in range(0, len(order), batch_size):
        group = order[lo : lo + batch_size]
        lens = [corpus.sentence_spans[i][1] - corpus.sentence_spans[i][0] for i in group]
        t_len = max(lens) + 1
        b = len(group)
        inputs = np.full((t_len, b), eos, dtype=np.int64)
        targets = np.full((t_len, b), eos, dtype=np.int64)
        weight = np.zeros((t_len, b))
        gold_d = np.zeros((t_len, b))
        gold_mask = np.zeros((t_len, b), dtype=bool)
        sent_id = np.full((t_len, b), -1, dtype=np.int64)
        for j, (i, n) in enumerate(zip(group, lens)):
            s, e = corpus.sentence_spans[i]
            ids = corpus.tokens[s:e]
            inputs[1 : n + 1, j] = ids
            targets[0:n, j] = ids
            targets[n, j] = eos
            weight[: n + 1, j] = 1.0
            if n >= 2:
                # slot k of the sentence sits before input row k+2
                gold_d[2 : n + 1, j] = d_stream[s : e - 1]
                gold_mask[2 : n + 1, j] = mask_stream[s : e - 1]
                sent_id[2 : n + 1, j] = sent_stream[s : e - 1]
        yield Batch(inputs, targets, weight, gold_d, gold_mask, sent_id, carry_state=False)


# ---------------------------------------------------------------------------
# Trainer
# ---------------------------------------------------------------------------

def _global_clip(params, clip_norm: float) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = np.sqrt(total)
    if clip_norm <= 0 or norm <= clip_norm:
        return 1.0
    return clip_norm / (norm + 1e-12)


def train(model, corpus: Corpus, config: TrainConfig, valid_corpus: Optional[Corpus] = None):
    """SGD with gradient clipping, LR decay on validation plateau, and
    optional tail iterate averaging.  Returns (per-epoch log, best params).

    Fully deterministic for a fixed config: one RNG owned by the trainer
    drives every dropout mask, and the data order is fixed.
    """
    from .evaluation import perplexity

    config.validate()
    if valid_corpus is None:
        valid_corpus = corpus
    rng = np.random.default_rng(config.seed)
    params = list(model.params.values())
    lr = config.lr
    best_val = float("inf")
    best_params = {name: p.data.copy() for name, p in model.params.items()}
    patience_left = config.lr_patience
    avg_from = config.average_from_epoch
    if config.averaging and avg_from is None:
        avg_from = max(1, (2 * config.epochs) // 3)
    avg_store = None
    avg_count = 0
    log: list[dict] = []
    supervised = config.alpha > 0 and model.config.supervision_mode != "none"

    for epoch in range(1, config.epochs + 1):
        t0 = time.time()
        state = None
        lm_sum, lm_n = 0.0, 0
        syd_sum, syd_n = 0.0, 0
        for step, batch in enumerate(
            bptt_batches(corpus, config.batch_size, config.bptt_length,
                         config.tree_source, config.seed)
        ):
            if not batch.carry_state:
                state = None
            with ad.Tape():
                try:
                    out = model.forward(batch.inputs, state, rng=rng, train_cfg=config)
                except ad.NumericError as exc:
                    raise TrainingDiverged("epoch %d step %d: %s" % (epoch, step, exc))
                l_lm = lm_loss(out.logits, batch.targets.reshape(-1),
                               batch.target_weight.reshape(-1))
                l_syd = None
                if supervised and batch.gold_mask.any():
                    l_syd = ranking_loss(out.d_syd, batch.gold_d.reshape(-1),
                                         batch.gold_mask.reshape(-1), config.pair_mode,
                                         groups=batch.sent_id.reshape(-1))
                loss = joint_loss(l_lm, l_syd, config.alpha)
                if not np.isfinite(loss.data):
                    raise TrainingDiverged("non-finite loss at epoch %d step %d" % (epoch, step))
                ad.backward(loss)
            coef = _global_clip(params, config.clip_norm)
            scale = lr * coef
            for p in params:
                if p.grad is not None:
                    p.data -= scale * p.grad
            model.zero_grad()
            state = out.state
            lm_sum += float(l_lm.data)
            lm_n += 1
            if l_syd is not None:
                syd_sum += float(l_syd.data)
                syd_n += 1

        if config.averaging and epoch >= avg_from:
            if avg_store is None:
                avg_store = {name: p.data.copy() for name, p in model.params.items()}
                avg_count = 1
            else:
                avg_count += 1
                for name, p in model.params.items():
                    avg_store[name] += (p.data - avg_store[name]) / avg_count

        val_ppl = perplexity(model, valid_corpus, batch_size=config.batch_size,
                             bptt_length=config.bptt_length)
        rank_acc = None
        if model.config.supervision_mode != "none":
            rank_acc = supervised_pair_accuracy(model, valid_corpus,
                                                config.batch_size, config.bptt_length)
        val_loss = float(np.log(val_ppl))
        if val_loss < best_val - 1e-5:
            best_val = val_loss
            best_params = {name: p.data.copy() for name, p in model.params.items()}
            patience_left = config.lr_patience
        else:
            patience_left -= 1
            if patience_left < 0:
                lr *= config.lr_decay
                patience_left = config.lr_patience
        log.append({
            "epoch": epoch,
            "lm_loss": lm_sum / max(lm_n, 1),
            "syd_loss": (syd_sum / syd_n) if syd_n else None,
            "valid_ppl": val_ppl,
            "ranking_accuracy": rank_acc,
            "lr": lr,
            "seconds": time.time() - t0,
        })

    if config.averaging and avg_store is not None:
        for name, p in model.params.items():
            p.data = avg_store[name]
        best_params = {name: data.copy() for name, data in avg_store.items()}
    return log, best_params
