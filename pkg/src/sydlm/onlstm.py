"""Ordered-neurons LSTM language model with an optional supervised
distance head.

Master gates are cumax-constrained, so forget units switch on monotonically
and input units switch off monotonically along the vector; the distance a
step emits is the master dimension minus the master forget gate's mass.
The split head derives a second master forget gate from the same
preactivation and its distances are the ones trained against gold trees,
leaving the language-model gates untouched.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig, TrainConfig

GATE_NAMES = ("W_f", "W_i", "W_o", "W_c", "W_mf", "W_mi")
BIAS_NAMES = ("b_f", "b_i", "b_o", "b_c", "b_mf", "b_mi")


@dataclass
class StepOutput:
    h: Tensor
    c: Tensor
    master_forget: Tensor
    master_input: Tensor
    d_lm: Tensor
    d_syd: Optional[Tensor]
    hf_pre: Tensor


@dataclass
class ForwardOut:
    logits: Tensor                 # (T*B, V), time-major rows
    d_lm: list                     # per layer, each (T*B,)
    d_syd: Optional[Tensor]        # (T*B,) or None
    state: list                    # detached (h, c) numpy pairs per layer


def extract_distance(master_forget: Tensor) -> Tensor:
    """Distance from a master forget gate: D_m minus the gate's sum."""
    d_m = master_forget.shape[-1]
    return float(d_m) - ad.tsum(master_forget, axis=-1)


def syd_head(hf_pre: Tensor, w_s: Tensor, b_s: Tensor):
    """Split head: both master forget gates from one preactivation.

    Returns (lm master forget gate, supervised master forget gate, and the
    supervised distance).
    """
    f_lm = ad.cumax(hf_pre)
    f_w = ad.cumax(ad.matmul(hf_pre, w_s) + b_s)
    return f_lm, f_w, extract_distance(f_w)


def onlstm_step(
    x: Tensor,
    h_prev: Tensor,
    c_prev: Tensor,
    weight: Tensor,
    bias: Tensor,
    hidden: int,
    chunk: int,
    syd: Optional[tuple] = None,
) -> StepOutput:
    """One ON-LSTM cell step.

    weight is the fused (in+hidden, 4*hidden + 2*Dm) gate matrix in the order
    forget, input, output, candidate, master-forget, master-input; syd is an
    optional (W_s, b_s) pair activating the split head.
    """
    d_m = hidden // chunk
    xh = ad.concat([x, h_prev], axis=1)
    pre = ad.matmul(xh, weight) + bias
    f = ad.sigmoid(pre[:, 0:hidden])
    i = ad.sigmoid(pre[:, hidden : 2 * hidden])
    o = ad.sigmoid(pre[:, 2 * hidden : 3 * hidden])
    c_hat = ad.tanh(pre[:, 3 * hidden : 4 * hidden])
    hf_pre = pre[:, 4 * hidden : 4 * hidden + d_m]
    hi_pre = pre[:, 4 * hidden + d_m : 4 * hidden + 2 * d_m]

    d_syd = None
    if syd is not None:
        f_m, _f_w, d_syd = syd_head(hf_pre, syd[0], syd[1])
    else:
        f_m = ad.cumax(hf_pre)
    i_m = 1.0 - ad.cumax(hi_pre)
    d_lm = extract_distance(f_m)

    if chunk > 1:
        f_mx = ad.repeat_last(f_m, chunk)
        i_mx = ad.repeat_last(i_m, chunk)
    else:
        f_mx, i_mx = f_m, i_m

    omega = f_mx * i_mx
    f_hat = f * omega + (f_mx - omega)
    i_hat = i * omega + (i_mx - omega)
    c = f_hat * c_prev + i_hat * c_hat
    h = o * ad.tanh(c)
    return StepOutput(h=h, c=c, master_forget=f_m, master_input=i_m,
                      d_lm=d_lm, d_syd=d_syd, hf_pre=hf_pre)


class OnLstmLM:
    """Stacked ON-LSTM language model (optionally with the split head)."""

    def __init__(self, config: ModelConfig, seed: int):
        config.validate()
        if config.model != "onlstm-syd":
            raise ValueError("OnLstmLM requires model 'onlstm-syd', got %r" % config.model)
        self.config = config
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)

        def param(name, shape, scale=None, zero=False):
            if zero:
                data = np.zeros(shape)
            else:
                data = rng.uniform(-scale, scale, size=shape)
            t = Tensor(data, requires_grad=True, name=name)
            self.params[name] = t
            return t

        cfg = config
        self.embedding = param("embedding", (cfg.vocab_size, cfg.embedding_size), scale=0.1)
        self.layers = []
        for layer in range(cfg.n_layers):
            i_dim, hidden = cfg.layer_input(layer), cfg.layer_hidden(layer)
            d_m = hidden // cfg.chunk_factor
            scale = 1.0 / np.sqrt(hidden)
            widths = (hidden, hidden, hidden, hidden, d_m, d_m)
            gates = {}
            for gname, bname, width in zip(GATE_NAMES, BIAS_NAMES, widths):
                gates[gname] = param("layer%d.%s" % (layer, gname), (i_dim + hidden, width), scale)
                gates[bname] = param("layer%d.%s" % (layer, bname), (width,), zero=True)
            self.layers.append(gates)
        last_hidden = cfg.layer_hidden(cfg.n_layers - 1)
        if cfg.tie_embeddings:
            self.w_out = None
        else:
            self.w_out = param("W_out", (last_hidden, cfg.vocab_size), scale=1.0 / np.sqrt(last_hidden))
        self.b_out = param("b_out", (cfg.vocab_size,), zero=True)

        # supervision head parameters come last so the language-model
        # parameter draws are identical across supervision modes
        sup_hidden = cfg.layer_hidden(cfg.supervision_layer - 1)
        sup_dm = sup_hidden // cfg.chunk_factor
        if cfg.supervision_mode == "split-head":
            self.w_s = param("W_s", (sup_dm, sup_dm), scale=1.0 / np.sqrt(sup_dm))
            self.b_s = param("b_s", (sup_dm,), zero=True)
        elif cfg.supervision_mode == "vanilla-multitask":
            scale = 1.0 / np.sqrt(sup_hidden)
            self.w_v1 = param("W_v1", (sup_hidden, sup_hidden), scale)
            self.b_v1 = param("b_v1", (sup_hidden,), zero=True)
            self.w_v2 = param("W_v2", (sup_hidden, 1), scale)
            self.b_v2 = param("b_v2", (1,), zero=True)

    # -- state --------------------------------------------------------------

    def init_state(self, batch_size: int) -> list:
        return [
            (np.zeros((batch_size, self.config.layer_hidden(l))),
             np.zeros((batch_size, self.config.layer_hidden(l))))
            for l in range(self.config.n_layers)
        ]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def set_identity_split_head(self) -> None:
        """W_s = I, b_s = 0: the supervised distances equal the LM ones."""
        if self.config.supervision_mode != "split-head":
            raise ValueError("identity split head needs supervision_mode split-head")
        self.w_s.data = np.eye(self.w_s.data.shape[0])
        self.b_s.data = np.zeros_like(self.b_s.data)

    # -- forward ------------------------------------------------------------

    def forward(
        self,
        inputs: np.ndarray,
        state: Optional[list] = None,
        rng: Optional[np.random.Generator] = None,
        train_cfg: Optional[TrainConfig] = None,
    ) -> ForwardOut:
        cfg = self.config
        inputs = np.asarray(inputs, dtype=np.int64)
        t_len, batch = inputs.shape
        if state is None:
            state = self.init_state(batch)

        def locked_mask(shape, p):
            # one mask reused across all timesteps of the window
            if rng is None or train_cfg is None or p == 0.0:
                return None
            return Tensor((rng.random(shape) >= p) / (1.0 - p))

        emb_matrix = self.embedding
        if rng is not None and train_cfg is not None and train_cfg.dropout_embedding > 0:
            rows = locked_mask((cfg.vocab_size, 1), train_cfg.dropout_embedding)
            emb_matrix = emb_matrix * rows
        x_all = ad.embedding(emb_matrix, inputs)  # (T, B, E)
        word_mask = locked_mask((1, batch, cfg.embedding_size),
                                train_cfg.dropout_words if train_cfg else 0.0)
        if word_mask is not None:
            x_all = x_all * word_mask

        rec_masks = [locked_mask((batch, cfg.layer_hidden(l)),
                                 train_cfg.dropout_recurrent if train_cfg else 0.0)
                     for l in range(cfg.n_layers)]
        mid_masks = [locked_mask((batch, cfg.layer_hidden(l)),
                                 train_cfg.dropout_layers if train_cfg else 0.0)
                     for l in range(cfg.n_layers - 1)]
        out_mask = locked_mask((batch, cfg.layer_hidden(cfg.n_layers - 1)),
                               train_cfg.dropout_output if train_cfg else 0.0)

        fused = []
        for layer in range(cfg.n_layers):
            gates = self.layers[layer]
            fused.append((
                ad.concat([gates[g] for g in GATE_NAMES], axis=1),
                ad.concat([gates[b] for b in BIAS_NAMES], axis=0),
            ))

        hs = [Tensor(h) for h, _ in state]
        cs = [Tensor(c) for _, c in state]
        top_states = []
        d_lm_steps: list[list[Tensor]] = [[] for _ in range(cfg.n_layers)]
        d_syd_steps: list[Tensor] = []
        sup_idx = cfg.supervision_layer - 1

        for t in range(t_len):
            x = x_all[t]
            for layer in range(cfg.n_layers):
                hidden = cfg.layer_hidden(layer)
                h_in = hs[layer]
                if rec_masks[layer] is not None:
                    h_in = h_in * rec_masks[layer]
                syd = None
                if cfg.supervision_mode == "split-head" and layer == sup_idx:
                    syd = (self.w_s, self.b_s)
                out = onlstm_step(x, h_in, cs[layer], fused[layer][0], fused[layer][1],
                                  hidden, cfg.chunk_factor, syd=syd)
                if not np.isfinite(out.h.data).all() or not np.isfinite(out.c.data).all():
                    raise ad.NumericError("non-finite hidden state at step %d, layer %d" % (t, layer + 1))
                hs[layer], cs[layer] = out.h, out.c
                d_lm_steps[layer].append(out.d_lm)
                if layer == sup_idx:
                    if cfg.supervision_mode == "split-head":
                        d_syd_steps.append(out.d_syd)
                    elif cfg.supervision_mode == "one-set-of-trees":
                        d_syd_steps.append(out.d_lm)
                    elif cfg.supervision_mode == "vanilla-multitask":
                        hid = ad.relu(ad.matmul(out.h, self.w_v1) + self.b_v1)
                        d_syd_steps.append(ad.reshape(ad.matmul(hid, self.w_v2) + self.b_v2, (batch,)))
                x = out.h
                if layer < cfg.n_layers - 1 and mid_masks[layer] is not None:
                    x = x * mid_masks[layer]
            top = x
            if out_mask is not None:
                top = top * out_mask
            top_states.append(top)

        flat = ad.concat(top_states, axis=0)  # (T*B, H_last)
        if self.w_out is None:
            logits = ad.matmul(flat, self.embedding, transpose_b=True) + self.b_out
        else:
            logits = ad.matmul(flat, self.w_out) + self.b_out

        d_lm = [ad.concat(steps, axis=0) for steps in d_lm_steps]
        d_syd = ad.concat(d_syd_steps, axis=0) if d_syd_steps else None
        new_state = [(h.data.copy(), c.data.copy()) for h, c in zip(hs, cs)]
        return ForwardOut(logits=logits, d_lm=d_lm, d_syd=d_syd, state=new_state)
