"""Sequence encoders over linearised fact graphs.

Every fact becomes a subject-predicate-object token triple and the query
becomes a subject-object pair.  One encoder embeds both sequences and a linear
layer classifies their concatenation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from relchain.autodiff import Module, Parameter, Tensor, ops
from relchain.autodiff.tensor import ShapeError
from relchain.kb import ALL_RELATIONS, NUM_TARGETS, RELATION_INDEX, Relation
from relchain.story import StoryInstance

VARIANTS = ("rnn", "lstm", "gru", "bi-rnn", "bi-lstm", "bi-gru", "cnn", "cnnh", "mha", "boe")
RECURRENT = ("rnn", "lstm", "gru")
NUM_SLOTS = 30
PAD = 0
MAX_LEN = 96
CNN_WIDTHS = (2, 3)
NEG = -1e9


def slot_token(slot: int) -> int:
    if not 0 <= slot < NUM_SLOTS:
        raise ShapeError(f"entity slot {slot} outside the {NUM_SLOTS} vocabulary slots")
    return 1 + slot


def relation_token(r: Relation) -> int:
    return 1 + NUM_SLOTS + RELATION_INDEX[r]


VOCAB_SIZE = 1 + NUM_SLOTS + len(ALL_RELATIONS)


def token_names() -> list[str]:
    return ["<pad>"] + [f"E{i}" for i in range(NUM_SLOTS)] + [r.label for r in ALL_RELATIONS]


def linearize(instance: StoryInstance, order: Sequence[int] | None = None) -> tuple[list[int], list[int]]:
    """SPO tokens of the facts (in stored order, or ``order``) and the SO query pair."""
    facts = instance.facts if order is None else [instance.facts[i] for i in order]
    tokens = []
    for x, r, y in facts:
        tokens += [slot_token(x), relation_token(r), slot_token(y)]
    head, tail = instance.query
    return tokens, [slot_token(head), slot_token(tail)]


@dataclass
class TokenBatch:
    fact_tokens: np.ndarray   # [B, L]
    fact_lengths: np.ndarray  # [B]
    query_tokens: np.ndarray  # [B, 2]
    labels: np.ndarray | None = None

    @property
    def query_lengths(self) -> np.ndarray:
        return np.full(len(self.query_tokens), 2, dtype=np.int64)


def build_tokens(instances: Sequence[StoryInstance], orders: Sequence[Sequence[int]] | None = None,
                 pad_to: int | None = None) -> TokenBatch:
    rows, queries = [], []
    for i, inst in enumerate(instances):
        facts, query = linearize(inst, None if orders is None else orders[i])
        rows.append(facts)
        queries.append(query)
    width = max(len(r) for r in rows)
    if pad_to is not None:
        width = max(width, pad_to)
    tokens = np.full((len(rows), width), PAD, dtype=np.int64)
    for i, r in enumerate(rows):
        tokens[i, :len(r)] = r
    labels = np.array([RELATION_INDEX[inst.target] for inst in instances], dtype=np.int64)
    return TokenBatch(tokens, np.array([len(r) for r in rows], dtype=np.int64),
                      np.array(queries, dtype=np.int64), labels)


def remap_slots(batch: TokenBatch, perms: np.ndarray) -> TokenBatch:
    """Send entity slot ``s`` of row ``b`` to slot ``perms[b, s]``; relations and padding stay."""
    def apply(tokens):
        ent = (tokens >= 1) & (tokens <= NUM_SLOTS)
        rows = np.broadcast_to(np.arange(len(tokens))[:, None], tokens.shape)
        return np.where(ent, 1 + perms[rows, np.clip(tokens - 1, 0, NUM_SLOTS - 1)], tokens)

    return TokenBatch(apply(batch.fact_tokens), batch.fact_lengths, apply(batch.query_tokens), batch.labels)


def _reverse_within_length(tokens: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    t = np.arange(tokens.shape[1])[None, :]
    idx = np.where(t < lengths[:, None], lengths[:, None] - 1 - t, t)
    return np.take_along_axis(tokens, idx, axis=1)


class SeqModel(Module):
    family = "lgraph"

    def __init__(self, variant: str = "gru", emb_dim: int = 100, hidden: int | None = None, heads: int = 2,
                 rng: np.random.Generator | None = None, seed: int = 0):
        if variant not in VARIANTS:
            raise ValueError(f"unknown lgraph variant {variant!r}; expected one of {VARIANTS}")
        super().__init__(rng if rng is not None else np.random.default_rng(seed))
        self.variant = variant
        self.emb_dim = emb_dim
        self.hidden = hidden or emb_dim
        self.heads = heads
        d, h = emb_dim, self.hidden
        self.embedding = self.param("embedding", (VOCAB_SIZE, d))
        self.embedding.data[PAD] = 0.0
        cell = variant.removeprefix("bi-")
        if cell in RECURRENT:
            gates = {"rnn": 1, "gru": 3, "lstm": 4}[cell]
            self.cells = [self._cell_params(f"{tag}.", gates)
                          for tag in (("fwd", "bwd") if variant.startswith("bi-") else ("fwd",))]
        elif variant in ("cnn", "cnnh"):
            split = [h // len(CNN_WIDTHS)] * len(CNN_WIDTHS)
            split[-1] += h - sum(split)
            self.convs = [(w, self.param(f"conv{w}.w", (w * d, f)), self.param(f"conv{w}.b", (f,), init="zeros"))
                          for w, f in zip(CNN_WIDTHS, split)]
            if variant == "cnnh":
                self.hw = {name: self.param(f"highway.{name}", shape, init="zeros" if name.startswith("b") else "uniform")
                           for name, shape in [("wt", (h, h)), ("bt", (h,)), ("wh", (h, h)), ("bh", (h,))]}
                self.hw["bt"].data[:] = -1.0  # start close to the carry path
        elif variant == "mha":
            if d % heads:
                raise ValueError("emb_dim must be divisible by the number of heads")
            self.pos = self.param("pos", (MAX_LEN, d))
            self.att = {name: self.param(f"mha.{name}", (d, d)) for name in ("wq", "wk", "wv", "wo")}
            self.ffn = [self.param("ffn.w1", (d, d)), self.param("ffn.b1", (d,), init="zeros"),
                        self.param("ffn.w2", (d, d)), self.param("ffn.b2", (d,), init="zeros")]
            self.proj = self.param("mha.out", (d, h)) if h != d else None
        self.classifier_w = self.param("classifier.w", (2 * self.output_dim, NUM_TARGETS))
        self.classifier_b = self.param("classifier.b", (NUM_TARGETS,), init="zeros")

    def _cell_params(self, pre: str, gates: int) -> dict[str, Parameter]:
        d, h = self.emb_dim, self.hidden
        return {"wx": self.param(pre + "wx", (d, gates * h)),
                "wh": self.param(pre + "wh", (h, gates * h)),
                "b": self.param(pre + "b", (gates * h,), init="zeros")}

    @property
    def output_dim(self) -> int:
        if self.variant.startswith("bi-"):
            return 2 * self.hidden
        if self.variant == "boe":
            return self.emb_dim
        return self.hidden

    def config(self) -> dict:
        return {"family": self.family, "variant": self.variant, "emb_dim": self.emb_dim,
                "hidden": self.hidden, "heads": self.heads}

    def batch(self, instances: Sequence[StoryInstance]) -> TokenBatch:
        return build_tokens(instances)

    def remap_slots(self, batch: TokenBatch, perms: np.ndarray) -> TokenBatch:
        return remap_slots(batch, perms)

    # -- encoders ---------------------------------------------------------------
    def embed(self, tokens: np.ndarray) -> Tensor:
        if tokens.size and (tokens.min() < 0 or tokens.max() >= VOCAB_SIZE):
            raise ShapeError(f"token id outside vocabulary of size {VOCAB_SIZE}")
        b, length = tokens.shape
        # padding always embeds to zero and never receives gradient
        flat = ops.gather_rows(self.embedding, tokens.reshape(-1))
        flat = ops.mul(flat, (tokens.reshape(-1, 1) != PAD).astype(float))
        return ops.reshape(flat, (b, length, self.emb_dim))

    def _recur(self, p: dict, x: Tensor, lengths: np.ndarray) -> Tensor:
        cell = self.variant.removeprefix("bi-")
        b, length, _ = x.shape
        h_dim = self.hidden
        xs = ops.add(ops.matmul(x, p["wx"]), p["b"])  # input projections for all steps at once
        h = Tensor(np.zeros((b, h_dim)))
        c = Tensor(np.zeros((b, h_dim)))
        for t in range(length):
            m = (t < lengths).astype(float)[:, None]
            if not m.any():
                break
            xt = ops.getitem(xs, (slice(None), t))
            hh = ops.matmul(h, p["wh"])
            if cell == "rnn":
                h_new = ops.tanh(ops.add(xt, hh))
            elif cell == "gru":
                xr, xz, xn = (ops.getitem(xt, (slice(None), slice(i * h_dim, (i + 1) * h_dim))) for i in range(3))
                hr, hz, hn = (ops.getitem(hh, (slice(None), slice(i * h_dim, (i + 1) * h_dim))) for i in range(3))
                r = ops.sigmoid(ops.add(xr, hr))
                z = ops.sigmoid(ops.add(xz, hz))
                n = ops.tanh(ops.add(xn, ops.mul(r, hn)))
                h_new = ops.add(n, ops.mul(z, ops.sub(h, n)))
            else:
                g = ops.add(xt, hh)
                i_, f_, o_, u_ = (ops.getitem(g, (slice(None), slice(k * h_dim, (k + 1) * h_dim))) for k in range(4))
                c_new = ops.add(ops.mul(ops.sigmoid(f_), c), ops.mul(ops.sigmoid(i_), ops.tanh(u_)))
                h_new = ops.mul(ops.sigmoid(o_), ops.tanh(c_new))
                c = ops.add(c, ops.mul(ops.sub(c_new, c), m))
            h = ops.add(h, ops.mul(ops.sub(h_new, h), m))
        return h

    def _masked_mean(self, x: Tensor, lengths: np.ndarray) -> Tensor:
        mask = (np.arange(x.shape[1])[None, :] < lengths[:, None]).astype(float)
        total = ops.reduce_sum(ops.mul(x, mask[:, :, None]), axis=1)
        return ops.mul(total, (1.0 / np.maximum(lengths, 1))[:, None])

    def _conv(self, x: Tensor, lengths: np.ndarray) -> Tensor:
        b, length, d = x.shape
        x = ops.mul(x, (np.arange(length)[None, :] < lengths[:, None]).astype(float)[:, :, None])
        pooled = []
        for w, weight, bias in self.convs:
            if length < w:
                x_w = ops.concat([x, Tensor(np.zeros((b, w - length, d)))], axis=1)
            else:
                x_w = x
            n_win = x_w.shape[1] - w + 1
            windows = ops.concat([ops.getitem(x_w, (slice(None), slice(s, s + n_win))) for s in range(w)], axis=-1)
            feats = ops.relu(ops.add(ops.matmul(windows, weight), bias))
            # windows must start inside the sequence; short rows keep their first window
            valid = np.arange(n_win)[None, :] < np.maximum(lengths - w + 1, 1)[:, None]
            shifted = ops.add(feats, np.where(valid, 0.0, NEG)[:, :, None])
            pooled.append(ops.reduce_max(shifted, axis=1))
        y = ops.concat(pooled, axis=-1)
        if self.variant == "cnnh":
            gate = ops.sigmoid(ops.add(ops.matmul(y, self.hw["wt"]), self.hw["bt"]))
            transform = ops.relu(ops.add(ops.matmul(y, self.hw["wh"]), self.hw["bh"]))
            y = ops.add(y, ops.mul(gate, ops.sub(transform, y)))
        return y

    def _attend(self, x: Tensor, lengths: np.ndarray) -> Tensor:
        b, length, d = x.shape
        if length > MAX_LEN:
            raise ShapeError(f"sequence of {length} tokens exceeds the {MAX_LEN} position embeddings")
        x = ops.add(x, ops.getitem(self.pos, slice(0, length)))
        hd = d // self.heads

        def split(t):
            return ops.transpose(ops.reshape(t, (b, length, self.heads, hd)), (0, 2, 1, 3))

        q = split(ops.matmul(x, self.att["wq"]))
        k = split(ops.matmul(x, self.att["wk"]))
        v = split(ops.matmul(x, self.att["wv"]))
        scores = ops.mul(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
        key_mask = np.where(np.arange(length)[None, :] < lengths[:, None], 0.0, NEG)
        weights = ops.softmax(ops.add(scores, key_mask[:, None, None, :]), axis=-1)
        ctx = ops.reshape(ops.transpose(ops.matmul(weights, v), (0, 2, 1, 3)), (b, length, d))
        y = ops.add(x, ops.matmul(ctx, self.att["wo"]))
        w1, b1, w2, b2 = self.ffn
        y = ops.add(y, ops.add(ops.matmul(ops.relu(ops.add(ops.matmul(y, w1), b1)), w2), b2))
        pooled = self._masked_mean(y, lengths)
        return pooled if self.proj is None else ops.matmul(pooled, self.proj)

    def encode_seq(self, tokens: np.ndarray, lengths: np.ndarray) -> Tensor:
        tokens = np.asarray(tokens, dtype=np.int64)
        lengths = np.asarray(lengths, dtype=np.int64)
        if tokens.ndim != 2 or lengths.shape != (tokens.shape[0],):
            raise ShapeError(f"tokens {tokens.shape} and lengths {lengths.shape} do not match")
        if self.variant == "boe":
            # a bag has no order; sorting makes the float sum bit-identical under permutation
            valid = np.arange(tokens.shape[1])[None, :] < lengths[:, None]
            tokens = np.where(valid, np.sort(np.where(valid, tokens, VOCAB_SIZE), axis=1), PAD)
            return self._masked_mean(self.embed(tokens), lengths)
        x = self.embed(tokens)
        if self.variant in ("cnn", "cnnh"):
            return self._conv(x, lengths)
        if self.variant == "mha":
            return self._attend(x, lengths)
        outs = [self._recur(self.cells[0], x, lengths)]
        if len(self.cells) == 2:
            rev = self.embed(_reverse_within_length(tokens, lengths))
            outs.append(self._recur(self.cells[1], rev, lengths))
        return outs[0] if len(outs) == 1 else ops.concat(outs, axis=-1)

    def classify(self, fact_emb: Tensor, query_emb: Tensor) -> Tensor:
        width = 2 * self.output_dim
        if fact_emb.shape[-1] + query_emb.shape[-1] != width:
            raise ShapeError(f"classifier expects total width {width}, got {fact_emb.shape} and {query_emb.shape}")
        feats = ops.concat([fact_emb, query_emb], axis=-1)
        return ops.add(ops.matmul(feats, self.classifier_w), self.classifier_b)

    def logits(self, batch: TokenBatch) -> Tensor:
        fact = self.encode_seq(batch.fact_tokens, batch.fact_lengths)
        query = self.encode_seq(batch.query_tokens, batch.query_lengths)
        return self.classify(fact, query)


def encode_seq(model: SeqModel, tokens, lengths) -> Tensor:
    return model.encode_seq(tokens, lengths)


def classify(model: SeqModel, fact_emb: Tensor, query_emb: Tensor) -> Tensor:
    return model.classify(fact_emb, query_emb)
