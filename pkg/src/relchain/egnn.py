"""Edge-aware graph encoders over story fact graphs.

Messages carry the neighbour's projected state concatenated with a one-hot
edge label, ``(Θ x_j) ∥ e_ij``; the update projects the aggregate back to the
embedding width with an edge-update matrix.  Graphs in a batch are padded to
a common node count and processed as one flat node array of ``B * N`` rows.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from relchain.autodiff import Module, Tensor, ops
from relchain.autodiff.tensor import ShapeError
from relchain.kb import NUM_EDGE_TYPES, NUM_TARGETS, RELATION_INDEX
from relchain.story import StoryInstance

VARIANTS = ("gcn", "gat", "sgcn", "agnn", "rgcn")
AGGREGATIONS = ("sum", "mean", "max")
NUM_SLOTS = 30


@dataclass
class GraphBatch:
    slots: np.ndarray        # [B, N] canonical entity slot per node, 0 on padding
    node_mask: np.ndarray    # [B, N] bool
    src: np.ndarray          # [E] flat node index b * N + j
    dst: np.ndarray          # [E]
    edge_type: np.ndarray    # [E] index into the full relation vocabulary
    query_index: np.ndarray  # [B, 2] (head, tail) within each graph
    labels: np.ndarray | None = None

    @property
    def num_graphs(self) -> int:
        return self.slots.shape[0]

    @property
    def max_nodes(self) -> int:
        return self.slots.shape[1]

    @property
    def num_nodes(self) -> int:
        return self.slots.size

    @property
    def edge_attr(self) -> np.ndarray:
        return np.eye(NUM_EDGE_TYPES)[self.edge_type]

    @property
    def flat_query(self) -> np.ndarray:
        return self.query_index + self.max_nodes * np.arange(self.num_graphs)[:, None]

    def check(self) -> None:
        flat_mask = self.node_mask.reshape(-1)
        if len(self.src) and not (flat_mask[self.src].all() and flat_mask[self.dst].all()):
            raise ShapeError("edge endpoint on a padding node")
        rows = np.arange(self.num_graphs)[:, None]
        if (self.query_index < 0).any() or (self.query_index >= self.max_nodes).any() \
                or not self.node_mask[rows, self.query_index].all():
            raise ShapeError("query index outside the valid nodes")


def build_batch(instances: Sequence[StoryInstance], pad_to: int | None = None) -> GraphBatch:
    """Pack instances into a padded batch with edges in both directions.

    For a fact ``(x, r, y)`` node ``x`` receives from ``y`` over ``r`` and
    ``y`` receives from ``x`` over ``inv-r``.
    """
    sizes = [inst.num_entities for inst in instances]
    n = max(sizes) if pad_to is None else pad_to
    if max(sizes) > n or n > NUM_SLOTS:
        raise ShapeError(f"graphs need {max(sizes)} nodes; padding to {n} with {NUM_SLOTS} slots")
    b = len(instances)
    slots = np.zeros((b, n), dtype=np.int64)
    mask = np.zeros((b, n), dtype=bool)
    src, dst, etype = [], [], []
    for g, inst in enumerate(instances):
        slots[g, :sizes[g]] = np.arange(sizes[g])
        mask[g, :sizes[g]] = True
        base = g * n
        for x, r, y in inst.facts:
            src += [base + y, base + x]
            dst += [base + x, base + y]
            etype += [RELATION_INDEX[r], RELATION_INDEX[r.invert()]]
    labels = None
    if all(inst.target is not None for inst in instances):
        labels = np.array([RELATION_INDEX[inst.target] for inst in instances], dtype=np.int64)
    batch = GraphBatch(
        slots=slots,
        node_mask=mask,
        src=np.array(src, dtype=np.int64),
        dst=np.array(dst, dtype=np.int64),
        edge_type=np.array(etype, dtype=np.int64),
        query_index=np.array([inst.query for inst in instances], dtype=np.int64),
        labels=labels,
    )
    batch.check()
    return batch


def remap_slots(batch: GraphBatch, perms: np.ndarray) -> GraphBatch:
    """Send entity slot ``s`` of graph ``b`` to slot ``perms[b, s]``; the graph itself is unchanged."""
    slots = np.where(batch.node_mask, np.take_along_axis(perms, batch.slots, axis=1), 0)
    return dataclasses.replace(batch, slots=slots)


# -- the three message-passing functions --------------------------------------

def message(x_j, e_ij, theta) -> Tensor:
    """``(Θ x_j) ∥ e_ij`` for a batch of edges (rows)."""
    return ops.concat([ops.matmul(x_j, theta), e_ij], axis=-1)


def aggregate(messages, dst, num_nodes: int, mode: str = "sum") -> Tensor:
    """Permutation-invariant combine per destination node; empty gives zeros."""
    messages = ops.as_tensor(messages)
    dst = np.asarray(dst, dtype=np.int64)
    if mode in ("sum", "mean") and len(dst) > 1:
        # add in a canonical order so the result is bit-identical for any input order
        order = np.lexsort(tuple(messages.data.reshape(len(dst), -1).T[::-1]) + (dst,))
        messages, dst = ops.gather_rows(messages, order), dst[order]
    if mode == "sum":
        return ops.segment_sum(messages, dst, num_nodes)
    if mode == "mean":
        deg = np.bincount(dst, minlength=num_nodes).astype(float)
        scale = 1.0 / np.maximum(deg, 1.0)
        return ops.mul(ops.segment_sum(messages, dst, num_nodes), scale[:, None])
    if mode == "max":
        return _segment_max(messages, dst, num_nodes)
    raise ValueError(f"unknown aggregation {mode!r}; expected one of {AGGREGATIONS}")


def _segment_max(messages: Tensor, dst: np.ndarray, num_nodes: int) -> Tensor:
    # pick, per node and column, the first edge that attains the maximum
    width = messages.shape[1]
    if len(dst) == 0:
        return Tensor(np.zeros((num_nodes, width)))
    best = np.full((num_nodes, width), -np.inf)
    np.maximum.at(best, dst, messages.data)
    winner = np.full((num_nodes, width), -1, dtype=np.int64)
    hit = messages.data == best[dst]
    for e in range(len(dst) - 1, -1, -1):
        row = hit[e]
        winner[dst[e], row] = e
    cols = np.broadcast_to(np.arange(width), winner.shape)
    has = winner >= 0
    picked = ops.getitem(messages, (np.where(has, winner, 0), cols))
    return ops.mul(picked, has.astype(float))


def update(x_i, aggregated, u, root=None, bias=None, activation: str = "relu") -> Tensor:
    """Project the aggregate back to the embedding width and add the self term."""
    out = ops.matmul(aggregated, u)
    if root is not None:
        out = ops.add(out, ops.matmul(x_i, root))
    if bias is not None:
        out = ops.add(out, bias)
    return _activate(out, activation)


def _activate(x, activation: str) -> Tensor:
    if activation == "relu":
        return ops.relu(x)
    if activation == "tanh":
        return ops.tanh(x)
    if activation in ("none", "linear"):
        return x
    raise ValueError(f"unknown activation {activation!r}")


def _sym_norm(batch: GraphBatch) -> np.ndarray:
    deg = np.bincount(batch.dst, minlength=batch.num_nodes).astype(float)
    deg = np.maximum(deg, 1.0)
    return 1.0 / np.sqrt(deg[batch.src] * deg[batch.dst])


# -- model -------------------------------------------------------------------

class EgnnModel(Module):
    family = "egnn"

    def __init__(self, variant: str = "gcn", emb_dim: int = 100, layers: int = 3, heads: int = 1,
                 aggregation: str | None = None, activation: str = "relu",
                 rng: np.random.Generator | None = None, seed: int = 0):
        if variant not in VARIANTS:
            raise ValueError(f"unknown egnn variant {variant!r}; expected one of {VARIANTS}")
        if layers < 1 or heads < 1:
            raise ValueError("layers and heads must be positive")
        super().__init__(rng if rng is not None else np.random.default_rng(seed))
        self.variant = variant
        self.emb_dim = emb_dim
        self.layers = layers
        self.heads = heads if variant == "gat" else 1
        self.aggregation = aggregation or "sum"
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        self.activation = activation
        d, r = emb_dim, NUM_EDGE_TYPES
        self.slot_emb = self.param("slot_emb", (NUM_SLOTS, d))
        shared = variant == "sgcn"
        self.layer_params = []
        for i in range(1 if shared else layers):
            p = {}
            pre = f"layer{i}."
            if variant == "rgcn":
                p["rel"] = [self.param(f"{pre}rel.{t}", (d, d)) for t in range(r)]
            else:
                p["theta"] = [self.param(f"{pre}theta.{h}", (d, d)) for h in range(self.heads)]
                p["u"] = self.param(f"{pre}u", (self.heads * (d + r), d))
            if variant == "gat":
                p["att"] = [self.param(f"{pre}att.{h}", (2 * d + r, 1)) for h in range(self.heads)]
            if variant == "agnn":
                p["beta"] = self.param(f"{pre}beta", (1,), init="constant", value=1.0)
            p["root"] = self.param(f"{pre}root", (d, d))
            p["bias"] = self.param(f"{pre}bias", (d,), init="zeros")
            self.layer_params.append(p)
        self.readout_w = self.param("readout.w", (3 * d, NUM_TARGETS))
        self.readout_b = self.param("readout.b", (NUM_TARGETS,), init="zeros")

    def config(self) -> dict:
        return {"family": self.family, "variant": self.variant, "emb_dim": self.emb_dim,
                "layers": self.layers, "heads": self.heads, "aggregation": self.aggregation,
                "activation": self.activation}

    def batch(self, instances: Sequence[StoryInstance]) -> GraphBatch:
        return build_batch(instances)

    def remap_slots(self, batch: GraphBatch, perms: np.ndarray) -> GraphBatch:
        return remap_slots(batch, perms)

    # forward pieces
    def node_init(self, batch: GraphBatch) -> Tensor:
        mask = batch.node_mask.reshape(-1, 1).astype(float)
        return ops.mul(ops.gather_rows(self.slot_emb, batch.slots.reshape(-1)), mask)

    def _layer(self, p: dict, x: Tensor, batch: GraphBatch, e: np.ndarray, activation: str) -> Tensor:
        n = batch.num_nodes
        src, dst = batch.src, batch.dst
        if self.variant == "rgcn":
            norm = _sym_norm(batch)
            parts, order = [], []
            for t in np.unique(batch.edge_type):
                sel = np.flatnonzero(batch.edge_type == t)
                msg = ops.matmul(ops.gather_rows(x, src[sel]), p["rel"][t])
                parts.append(ops.mul(msg, norm[sel, None]))
                order.append(sel)
            if parts:
                agg = ops.segment_sum(ops.concat(parts, axis=0), dst[np.concatenate(order)], n)
            else:
                agg = Tensor(np.zeros((n, self.emb_dim)))
            out = ops.add(ops.add(agg, ops.matmul(x, p["root"])), p["bias"])
            return _activate(out, activation)

        heads = []
        for h in range(self.heads):
            theta = p["theta"][h]
            msg = message(ops.gather_rows(x, src), e, theta)
            if self.variant in ("gcn", "sgcn"):
                heads.append(aggregate(ops.mul(msg, _sym_norm(batch)[:, None]), dst, n, self.aggregation))
                continue
            if self.variant == "gat":
                tx = ops.matmul(x, theta)
                feats = ops.concat([ops.gather_rows(tx, dst), ops.gather_rows(tx, src), e], axis=-1)
                logits = ops.leaky_relu(ops.reshape(ops.matmul(feats, p["att"][h]), (-1,)))
            else:  # agnn
                unit = ops.div(x, ops.sqrt(ops.add(ops.reduce_sum(ops.mul(x, x), axis=1, keepdims=True), 1e-12)))
                cos = ops.reduce_sum(ops.mul(ops.gather_rows(unit, dst), ops.gather_rows(unit, src)), axis=1)
                logits = ops.mul(cos, p["beta"])
            alpha = ops.segment_softmax(logits, dst, n)
            heads.append(ops.segment_sum(ops.mul(msg, ops.reshape(alpha, (-1, 1))), dst, n))
        agg = heads[0] if len(heads) == 1 else ops.concat(heads, axis=-1)
        return update(x, agg, p["u"], p["root"], p["bias"], activation)

    def encode_graph(self, batch: GraphBatch) -> Tensor:
        """Node embeddings after all rounds, as a flat ``[B*N, emb_dim]`` tensor."""
        mask = batch.node_mask.reshape(-1, 1).astype(float)
        x = self.node_init(batch)
        e = batch.edge_attr
        if self.variant == "sgcn":
            p = self.layer_params[0]
            for step in range(self.layers):
                last = step == self.layers - 1
                x = ops.mul(self._layer(p, x, batch, e, self.activation if last else "none"), mask)
            return x
        for p in self.layer_params:
            x = ops.mul(self._layer(p, x, batch, e, self.activation), mask)
        return x

    def readout_features(self, nodes: Tensor, batch: GraphBatch) -> Tensor:
        """``emb(F) ∥ emb(Q|F)``: masked node mean, then head and tail states."""
        b, n, d = batch.num_graphs, batch.max_nodes, self.emb_dim
        mask = batch.node_mask.astype(float)
        pooled = ops.reduce_sum(ops.reshape(nodes, (b, n, d)), axis=1)
        mean = ops.mul(pooled, (1.0 / mask.sum(axis=1))[:, None])
        q = batch.flat_query
        return ops.concat([mean, ops.gather_rows(nodes, q[:, 0]), ops.gather_rows(nodes, q[:, 1])], axis=-1)

    def readout(self, nodes: Tensor, batch: GraphBatch) -> Tensor:
        batch.check()
        feats = self.readout_features(nodes, batch)
        return ops.add(ops.matmul(feats, self.readout_w), self.readout_b)

    def logits(self, batch: GraphBatch) -> Tensor:
        return self.readout(self.encode_graph(batch), batch)


def encode_graph(model: EgnnModel, batch: GraphBatch) -> Tensor:
    return model.encode_graph(batch)


def readout(model: EgnnModel, nodes: Tensor, batch: GraphBatch) -> Tensor:
    return model.readout(nodes, batch)
