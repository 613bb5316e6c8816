"""Parsing/reading/predict language model driven by syntactic distances.

The parsing side produces one distance scalar per position; pairwise
distance differences become relatedness values through a scaled hardtanh,
products of those values become parsing gates, and the gates softly
truncate the reading network's attention over past states.  Two parsing
sources are available: a causal two-layer convolution over embeddings
("prpn") and a redesigned recurrent encoder emitting separate distance sets
for language modeling and supervision ("prpn-syd").
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig, TrainConfig
from .onlstm import ForwardOut


def relatedness_alpha(d_t, d_j, tau: float):
    """Degree in [0, 1] that two positions are related: 0.5 at equal
    distances, saturating once the gap exceeds 1/tau."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    return (ad.hardtanh((ad.as_tensor(d_t) - d_j) * tau) + 1.0) * 0.5


def parsing_gates(alphas) -> Tensor:
    """Suffix products over relatedness values.

    alphas (..., m) covers positions 1..m of a length-(m+1) memory; gate i is
    the product of alphas i+1..m, so the newest position's gate is the empty
    product 1 and any zero alpha cuts off everything older.
    """
    alphas = ad.as_tensor(alphas)
    m = alphas.shape[-1]
    ones = Tensor(np.ones(alphas.shape[:-1] + (1,)))
    gates = [ones]
    suffix = ones
    for k in range(m - 1, -1, -1):
        suffix = alphas[..., k : k + 1] * suffix
        gates.append(suffix)
    gates.reverse()
    return ad.concat(gates, axis=-1)


def gated_attention(gates, z) -> Tensor:
    """Attention weights softly truncated by parsing gates:
    s_i = g_i z_i / sum_i g_i.

    Rows whose gates are all zero fall back to a one-hot on the most recent
    position.  As written the outputs sum to (sum g z)/(sum g), not 1.
    """
    gates, z = ad.as_tensor(gates), ad.as_tensor(z)
    if gates.shape != z.shape:
        raise ad.ShapeError("gated_attention: gates %s vs z %s" % (gates.shape, z.shape))
    row_sum = gates.data.sum(axis=-1, keepdims=True)
    dead = row_sum == 0.0
    if not dead.any():
        return gates * z / ad.tsum(gates, axis=-1, keepdims=True)
    keep = Tensor((~dead).astype(np.float64))
    onehot = np.zeros(gates.shape)
    onehot[..., -1] = 1.0
    denom = ad.tsum(gates, axis=-1, keepdims=True) * keep + Tensor(dead.astype(np.float64))
    normal = gates * z / denom
    return normal * keep + Tensor(onehot * dead)


def prpn_distances(embeddings, pad_emb, w_c, b_c, w_d, b_d, lookback: int) -> Tensor:
    """Convolutional parsing network: embeddings (T, B, E) padded on the
    left with `lookback` learned boundary vectors, two ReLU layers, one
    nonnegative distance per position."""
    embeddings = ad.as_tensor(embeddings)
    t_len, batch, e_dim = embeddings.shape
    pad = ad.broadcast_to(ad.reshape(pad_emb, (lookback, 1, e_dim)), (lookback, batch, e_dim))
    padded = ad.concat([pad, embeddings], axis=0)
    hidden = ad.relu(ad.causal_conv1d(padded, w_c, b_c, lookback + 1))
    d = ad.relu(ad.matmul(hidden, w_d) + b_d)
    return ad.reshape(d, (t_len, batch))


def lstm_sequence(x_all, state, weight, bias, hidden: int):
    """Plain LSTM over (T, B, E); returns per-step hidden list and state."""
    t_len = x_all.shape[0]
    h, c = state
    hs = []
    for t in range(t_len):
        xh = ad.concat([x_all[t], h], axis=1)
        pre = ad.matmul(xh, weight) + bias
        f = ad.sigmoid(pre[:, 0:hidden])
        i = ad.sigmoid(pre[:, hidden : 2 * hidden])
        o = ad.sigmoid(pre[:, 2 * hidden : 3 * hidden])
        g = ad.tanh(pre[:, 3 * hidden : 4 * hidden])
        c = f * c + i * g
        h = o * ad.tanh(c)
        hs.append(h)
    return hs, (h, c)


def _feed_forward(x, w1, b1, w2, b2) -> Tensor:
    return ad.matmul(ad.relu(ad.matmul(x, w1) + b1), w2) + b2


class PrpnLM:
    """PRPN language model; parsing source per config.model."""

    def __init__(self, config: ModelConfig, seed: int):
        config.validate()
        if config.model not in ("prpn", "prpn-syd"):
            raise ValueError("PrpnLM requires model prpn or prpn-syd, got %r" % config.model)
        self.config = config
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)

        def param(name, shape, scale=None, zero=False):
            data = np.zeros(shape) if zero else rng.uniform(-scale, scale, size=shape)
            t = Tensor(data, requires_grad=True, name=name)
            self.params[name] = t
            return t

        cfg = config
        e_dim = cfg.embedding_size
        h = cfg.hidden_size
        self.read_hidden = e_dim if cfg.tie_embeddings else h
        rh = self.read_hidden
        self.embedding = param("embedding", (cfg.vocab_size, e_dim), scale=0.1)

        if cfg.model == "prpn":
            look = cfg.prpn_lookback
            self.pad_emb = param("pad_emb", (look, e_dim), scale=0.1)
            self.w_c = param("W_c", ((look + 1) * e_dim, h), scale=1.0 / math.sqrt(h))
            self.b_c = param("b_c", (h,), zero=True)
            self.w_d = param("W_d", (h, 1), scale=1.0 / math.sqrt(h))
            self.b_d = param("b_d", (1,), zero=True)
        else:
            scale = 1.0 / math.sqrt(h)
            self.w_lstm_w = param("enc.W_word", (e_dim + h, 4 * h), scale)
            self.b_lstm_w = param("enc.b_word", (4 * h,), zero=True)
            self.w_conv = param("enc.W_conv", (cfg.prpn_conv_window * h, h), scale)
            self.b_conv = param("enc.b_conv", (h,), zero=True)
            self.w_lstm_d = param("enc.W_dist", (h + h, 4 * h), scale)
            self.b_lstm_d = param("enc.b_dist", (4 * h,), zero=True)
            fh = cfg.prpn_ff_hidden
            self.w_lm1 = param("enc.W_lm1", (h, fh), scale)
            self.b_lm1 = param("enc.b_lm1", (fh,), zero=True)
            self.w_lm2 = param("enc.W_lm2", (fh, 1), scale=1.0 / math.sqrt(fh))
            self.b_lm2 = param("enc.b_lm2", (1,), zero=True)

        scale = 1.0 / math.sqrt(rh)
        self.w_q = param("read.W_q", (e_dim, rh), scale)
        self.b_q = param("read.b_q", (rh,), zero=True)
        self.w_r = param("read.W_r", (e_dim + rh, 4 * rh), scale)
        self.b_r = param("read.b_r", (4 * rh,), zero=True)
        if cfg.tie_embeddings:
            self.w_out = None
        else:
            self.w_out = param("W_out", (rh, cfg.vocab_size), scale)
        self.b_out = param("b_out", (cfg.vocab_size,), zero=True)

        # the supervised head comes last so the LM parameter draws are
        # identical with and without it
        if cfg.model == "prpn-syd" and cfg.supervision_mode == "split-head":
            fh = cfg.prpn_ff_hidden
            self.w_syd1 = param("enc.W_syd1", (h, fh), scale=1.0 / math.sqrt(h))
            self.b_syd1 = param("enc.b_syd1", (fh,), zero=True)
            self.w_syd2 = param("enc.W_syd2", (fh, 1), scale=1.0 / math.sqrt(fh))
            self.b_syd2 = param("enc.b_syd2", (1,), zero=True)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def init_state(self, batch_size: int):
        if self.config.model == "prpn":
            return None
        h = self.config.hidden_size
        return (
            (np.zeros((batch_size, h)), np.zeros((batch_size, h))),
            (np.zeros((batch_size, h)), np.zeros((batch_size, h))),
        )

    # -- parsing sources ------------------------------------------------------

    def conv_distances(self, x_all) -> Tensor:
        return prpn_distances(x_all, self.pad_emb, self.w_c, self.b_c,
                              self.w_d, self.b_d, self.config.prpn_lookback)

    def encoder_distances(self, x_all, state=None):
        """Recurrent encoder: word LSTM, causal convolution, distance LSTM,
        then one feed-forward head per distance set (the supervised head only
        when configured).  Returns (d_lm, d_syd, new_state)."""
        cfg = self.config
        x_all = ad.as_tensor(x_all)
        t_len, batch, _ = x_all.shape
        h = cfg.hidden_size
        if state is None:
            state = self.init_state(batch)
        (word_state, dist_state) = state
        hs, word_state = lstm_sequence(x_all, (Tensor(word_state[0]), Tensor(word_state[1])),
                                       self.w_lstm_w, self.b_lstm_w, h)
        h_seq = ad.concat([ad.reshape(x, (1, batch, h)) for x in hs], axis=0)
        window = cfg.prpn_conv_window
        pad = Tensor(np.zeros((window - 1, batch, h)))
        g_seq = ad.relu(ad.causal_conv1d(ad.concat([pad, h_seq], axis=0),
                                         self.w_conv, self.b_conv, window))
        gs, dist_state = lstm_sequence(g_seq, (Tensor(dist_state[0]), Tensor(dist_state[1])),
                                       self.w_lstm_d, self.b_lstm_d, h)
        hhat = ad.concat([ad.reshape(x, (1, batch, h)) for x in gs], axis=0)
        d_lm = ad.reshape(_feed_forward(hhat, self.w_lm1, self.b_lm1, self.w_lm2, self.b_lm2),
                          (t_len, batch))
        d_syd = None
        if cfg.model == "prpn-syd" and cfg.supervision_mode == "split-head":
            d_syd = ad.reshape(_feed_forward(hhat, self.w_syd1, self.b_syd1, self.w_syd2, self.b_syd2),
                               (t_len, batch))
        new_state = (
            (word_state[0].data.copy(), word_state[1].data.copy()),
            (dist_state[0].data.copy(), dist_state[1].data.copy()),
        )
        return d_lm, d_syd, new_state

    # -- forward ----------------------------------------------------------------

    def forward(
        self,
        inputs: np.ndarray,
        state=None,
        rng: Optional[np.random.Generator] = None,
        train_cfg: Optional[TrainConfig] = None,
    ) -> ForwardOut:
        cfg = self.config
        inputs = np.asarray(inputs, dtype=np.int64)
        t_len, batch = inputs.shape
        rh = self.read_hidden

        emb_matrix = self.embedding
        if rng is not None and train_cfg is not None and train_cfg.dropout_embedding > 0:
            mask = Tensor((rng.random((cfg.vocab_size, 1)) >= train_cfg.dropout_embedding)
                          / (1.0 - train_cfg.dropout_embedding))
            emb_matrix = emb_matrix * mask
        x_all = ad.embedding(emb_matrix, inputs)
        if rng is not None and train_cfg is not None and train_cfg.dropout_words > 0:
            mask = Tensor((rng.random((1, batch, cfg.embedding_size)) >= train_cfg.dropout_words)
                          / (1.0 - train_cfg.dropout_words))
            x_all = x_all * mask

        if cfg.model == "prpn":
            d_all = self.conv_distances(x_all)
            d_syd_all = None
            new_state = None
        else:
            d_all, d_syd_all, new_state = self.encoder_distances(x_all, state)

        tau = cfg.prpn_temperature
        d_cols = [ad.reshape(d_all[t], (batch, 1)) for t in range(t_len)]
        mem_h: list[Tensor] = []
        mem_c: list[Tensor] = []
        top_states = []
        out_mask = None
        if rng is not None and train_cfg is not None and train_cfg.dropout_output > 0:
            out_mask = Tensor((rng.random((batch, rh)) >= train_cfg.dropout_output)
                              / (1.0 - train_cfg.dropout_output))

        for t in range(t_len):
            x_t = x_all[t]
            if t == 0:
                h_tilde = Tensor(np.zeros((batch, rh)))
                c_tilde = Tensor(np.zeros((batch, rh)))
            else:
                if t == 1:
                    gates = Tensor(np.ones((batch, 1)))
                else:
                    d_past = ad.concat(d_cols[1:t], axis=1)  # positions 1..t-1
                    alphas = relatedness_alpha(d_cols[t], d_past, tau)
                    gates = parsing_gates(alphas)
                h_past = ad.concat(mem_h, axis=1)  # (B, t, rh)
                c_past = ad.concat(mem_c, axis=1)
                q = ad.matmul(x_t, self.w_q) + self.b_q
                scores = ad.tsum(h_past * ad.reshape(q, (batch, 1, rh)), axis=-1) / math.sqrt(rh)
                z = ad.softmax(scores)
                s = gated_attention(gates, z)
                s3 = ad.reshape(s, (batch, t, 1))
                h_tilde = ad.tsum(h_past * s3, axis=1)
                c_tilde = ad.tsum(c_past * s3, axis=1)
            xh = ad.concat([x_t, h_tilde], axis=1)
            pre = ad.matmul(xh, self.w_r) + self.b_r
            f = ad.sigmoid(pre[:, 0:rh])
            i = ad.sigmoid(pre[:, rh : 2 * rh])
            o = ad.sigmoid(pre[:, 2 * rh : 3 * rh])
            g = ad.tanh(pre[:, 3 * rh : 4 * rh])
            c = f * c_tilde + i * g
            h = o * ad.tanh(c)
            if not np.isfinite(h.data).all():
                raise ad.NumericError("non-finite hidden state at step %d" % t)
            mem_h.append(ad.reshape(h, (batch, 1, rh)))
            mem_c.append(ad.reshape(c, (batch, 1, rh)))
            top_states.append(h * out_mask if out_mask is not None else h)

        flat = ad.concat(top_states, axis=0)
        if self.w_out is None:
            logits = ad.matmul(flat, self.embedding, transpose_b=True) + self.b_out
        else:
            logits = ad.matmul(flat, self.w_out) + self.b_out

        d_lm_flat = ad.reshape(d_all, (t_len * batch,))
        d_syd_flat = ad.reshape(d_syd_all, (t_len * batch,)) if d_syd_all is not None else None
        return ForwardOut(logits=logits, d_lm=[d_lm_flat], d_syd=d_syd_flat, state=new_state)
