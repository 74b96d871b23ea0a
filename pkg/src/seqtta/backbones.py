"""Toy sequential recommenders: a recurrent (GRU) and a single-block causal
self-attention encoder, trained with full-softmax next-item cross-entropy.

Both expose the same three-stage surface:

    embed(seq)        item-index sequence -> representation matrix (k, d)
    encode_from(E)    representation matrix -> hidden states H (k, d)
    score(h_last)     final hidden state -> score per catalog entry

encode(seq) is literally encode_from(embed(seq)), so operators that perturb
the representation matrix compose bit-exactly with the sequence path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .data import PAD_IDX
from .rng import stream

KINDS = ("recurrent", "attentive")


@dataclass
class BackboneConfig:
    kind: str = "attentive"
    embed_dim: int = 64
    max_len: int = 50
    lr: float = 0.001
    batch_size: int = 256
    epochs: int = 10
    rng_seed: int = 0
    grad_clip: float = 1.0

    def validate(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown backbone kind {self.kind!r}")
        if self.embed_dim < 1 or self.max_len < 2:
            raise ValueError("need embed_dim >= 1 and max_len >= 2")
        return self


class Backbone:
    def __init__(self, cfg, num_items):
        cfg.validate()
        self.cfg = cfg
        self.kind = cfg.kind
        self.num_items = num_items
        self.train_log = []
        d = cfg.embed_dim
        rng = stream(cfg.rng_seed, "backbone-init", cfg.kind)
        self.store = nn.ParamStore()
        E = nn.init_uniform(rng, (num_items + 2, d), d)
        E[PAD_IDX] = 0.0  # padding row stays zero and is masked at ranking time
        self.store.add("E", E)
        if self.kind == "recurrent":
            for name, arr in nn.gru_init(rng, d, d).items():
                self.store.add(name, arr)
        else:
            self.store.add("P", nn.init_uniform(rng, (cfg.max_len, d), d))
            for name in ("Wq", "Wk", "Wv"):
                self.store.add(name, nn.init_uniform(rng, (d, d), d))
            self.store.add("ln_g", np.ones(d))
            self.store.add("ln_b", np.zeros(d))

    @property
    def mask_idx(self):
        return self.num_items + 1

    @property
    def embed_dim(self):
        return self.cfg.embed_dim

    def truncate(self, seq):
        """Keep the most recent max_len items."""
        return list(seq[-self.cfg.max_len:])

    def embed(self, seq):
        seq = self.truncate(seq)
        if not seq:
            raise ValueError("cannot embed an empty sequence")
        idx = np.asarray(seq, dtype=np.int64)
        if idx.min() < 1 or idx.max() > self.mask_idx:
            raise IndexError(f"item index outside [1, {self.mask_idx}]")
        return self.store["E"][idx].copy()

    # -- encoders -------------------------------------------------------------

    def encode_from(self, E_rows, cache=None):
        """Run the encoder on a given representation matrix."""
        E_rows = np.asarray(E_rows, dtype=np.float64)
        if E_rows.ndim != 2 or E_rows.shape[1] != self.embed_dim:
            raise nn.DimensionError(
                f"expected (k, {self.embed_dim}) representation, got {E_rows.shape}")
        if E_rows.shape[0] > self.cfg.max_len:
            E_rows = E_rows[-self.cfg.max_len:]
        if self.kind == "recurrent":
            return self._gru_states(E_rows, cache)
        return self._attn_states(E_rows, cache)

    def encode(self, seq):
        return self.encode_from(self.embed(seq))

    def _gru_states(self, E_rows, cache):
        p = self.store.params
        k, d = E_rows.shape
        h = np.zeros((1, d))
        states = np.empty((k, d))
        for t in range(k):
            h, step_cache = nn.gru_cell_forward(E_rows[t:t + 1], h, p)
            states[t] = h[0]
            if cache is not None:
                cache.append(step_cache)
        return states

    def _attn_states(self, E_rows, cache):
        p = self.store.params
        k = E_rows.shape[0]
        H0 = E_rows + p["P"][:k]
        out1, att_cache = nn.causal_attention_forward(H0, p["Wq"], p["Wk"], p["Wv"])
        H, ln_cache = nn.layer_norm_forward(out1, p["ln_g"], p["ln_b"])
        if cache is not None:
            cache.extend([att_cache, ln_cache])
        return H

    def _encoder_backward(self, dH, cache, E_rows, grads):
        """Backprop dH through the encoder; returns gradient w.r.t. E_rows."""
        if self.kind == "recurrent":
            k = len(cache)
            dE = np.zeros_like(E_rows)
            dh_carry = np.zeros((1, E_rows.shape[1]))
            for t in range(k - 1, -1, -1):
                dh = dH[t:t + 1] + dh_carry
                dx, dh_carry, g = nn.gru_cell_backward(dh, cache[t])
                dE[t] = dx[0]
                for name, val in g.items():
                    grads[name] = grads.get(name, 0.0) + val
            return dE
        att_cache, ln_cache = cache
        dout1, dg, db = nn.layer_norm_backward(dH, ln_cache)
        grads["ln_g"] = grads.get("ln_g", 0.0) + dg
        grads["ln_b"] = grads.get("ln_b", 0.0) + db
        dH0, dWq, dWk, dWv = nn.causal_attention_backward(dout1, att_cache)
        grads["Wq"] = grads.get("Wq", 0.0) + dWq
        grads["Wk"] = grads.get("Wk", 0.0) + dWk
        grads["Wv"] = grads.get("Wv", 0.0) + dWv
        k = dH0.shape[0]
        dP = np.zeros_like(self.store["P"])
        dP[:k] = dH0
        grads["P"] = grads.get("P", 0.0) + dP
        return dH0

    # -- scoring ---------------------------------------------------------------

    def score(self, h_last):
        """Dot-product scores over the catalog; padding and mask get -inf."""
        h_last = np.asarray(h_last, dtype=np.float64).reshape(-1)
        if h_last.shape[0] != self.embed_dim:
            raise nn.DimensionError("score expects a d-dimensional hidden state")
        scores = self.store["E"] @ h_last
        scores[PAD_IDX] = -np.inf
        scores[self.mask_idx] = -np.inf
        return scores

    def score_sequence(self, seq):
        return self.score(self.encode(seq)[-1])

    def score_view(self, view):
        """Score an AugmentedView produced by the augmentation module."""
        if view.matrix is not None:
            return self.score(self.encode_from(view.matrix)[-1])
        return self.score(self.encode(view.sequence)[-1])

    # -- persistence -----------------------------------------------------------

    def save(self, path):
        meta = {
            "kind": self.kind,
            "embed_dim": self.cfg.embed_dim,
            "max_len": self.cfg.max_len,
            "num_items": self.num_items,
            "rng_seed": self.cfg.rng_seed,
        }
        self.store.save(path, meta=meta)

    @classmethod
    def load(cls, path):
        store, meta = nn.ParamStore.load(path)
        cfg = BackboneConfig(kind=meta["kind"], embed_dim=meta["embed_dim"],
                             max_len=meta["max_len"], rng_seed=meta["rng_seed"])
        bb = cls(cfg, meta["num_items"])
        for name in bb.store.names():
            bb.store.params[name][...] = store.params[name]
        return bb

    # -- training --------------------------------------------------------------

    def _loss_and_grads(self, x_idx, targets):
        """Forward + backward for one training sequence.

        Recurrent models predict the single next item from the last hidden
        state; attentive models predict the successor at every position.
        Softmax spans real items only (padding and mask are never targets).
        """
        E = self.store["E"]
        E_items = E[1:self.num_items + 1]
        E_rows = E[np.asarray(x_idx, dtype=np.int64)]
        cache = []
        H = self.encode_from(E_rows, cache)
        grads = {}
        if self.kind == "recurrent":
            logits = E_items @ H[-1]
            loss, dlogits = nn.softmax_xent(logits, targets[0] - 1)
            dh_last = E_items.T @ dlogits
            dE_score = np.outer(dlogits, H[-1])
            dH = np.zeros_like(H)
            dH[-1] = dh_last
        else:
            logits = H @ E_items.T
            loss, dlogits = nn.softmax_xent_rows(
                logits, np.asarray(targets, dtype=np.int64) - 1)
            dH = dlogits @ E_items
            dE_score = dlogits.T @ H
        dE_rows = self._encoder_backward(dH, cache, E_rows, grads)
        dE = np.zeros_like(E)
        dE[1:self.num_items + 1] += dE_score
        np.add.at(dE, np.asarray(x_idx, dtype=np.int64), dE_rows)
        grads["E"] = dE
        return loss, grads

    def _training_sample(self, prefix):
        """Build (inputs, targets) from one training prefix, or None."""
        if len(prefix) < 2:
            return None
        window = prefix[-(self.cfg.max_len + 1):]
        x_idx = window[:-1]
        if self.kind == "recurrent":
            return x_idx, [window[-1]]
        return x_idx, window[1:]


def train_backbone(ds, split, cfg):
    """Train a backbone on the leave-one-out training prefixes.

    Deterministic for a fixed config: sample order comes from keyed streams
    and every numeric step is float64.  Returns the model with a per-epoch
    mean-loss log attached.
    """
    bb = Backbone(cfg, ds.num_items)
    samples = []
    for u in split.users():
        made = bb._training_sample(split.per_user[u].prefix)
        if made is not None:
            samples.append(made)
    if not samples and cfg.epochs > 0:
        raise ValueError("no training prefixes with >= 2 items")

    for epoch in range(cfg.epochs):
        order = stream(cfg.rng_seed, "epoch-shuffle", epoch).permutation(len(samples))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            bb.store.zero_grads()
            for i in batch:
                x_idx, targets = samples[i]
                loss, grads = bb._loss_and_grads(x_idx, targets)
                bb.store.accumulate(grads, scale=1.0 / len(batch))
                losses.append(loss)
            bb.store.clip_global_norm(cfg.grad_clip)
            bb.store.adam_step(cfg.lr)
        bb.train_log.append(float(np.mean(losses)))
    return bb
