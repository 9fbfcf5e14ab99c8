"""Finite-difference checks for every op and every model variant."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from relchain.autodiff import Tensor, backward, no_grad, ops
from relchain.kb import Relation, default_kb
from relchain.story import StoryInstance

TOLERANCE = 1e-4
STEP = 1e-5
FLOOR = 1e-6


def rel_error(analytic, numeric, floor: float = FLOOR) -> float:
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def numeric_grad(f: Callable[[], float], x: np.ndarray, index=None, h: float = STEP) -> np.ndarray:
    """Central differences of ``f`` with respect to entries of ``x`` (all, or ``index``)."""
    flat = x.reshape(-1)
    idx = range(flat.size) if index is None else index
    out = np.zeros(len(idx))
    for i, j in enumerate(idx):
        old = flat[j]
        flat[j] = old + h
        up = f()
        flat[j] = old - h
        down = f()
        flat[j] = old
        out[i] = (up - down) / (2 * h)
    return out if index is not None else out.reshape(x.shape)


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    checked: int
    seconds: float

    @property
    def ok(self) -> bool:
        return self.max_rel_err <= TOLERANCE

    def line(self) -> str:
        status = "ok" if self.ok else "FAIL"
        return f"{self.name:<22} {self.max_rel_err:.3e}  ({self.checked} entries, {self.seconds:.2f}s)  {status}"


def check_function(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], rng: np.random.Generator) -> tuple[float, int]:
    """Compare analytic and numeric gradients of ``sum(fn(*inputs) * R)`` for random ``R``."""
    with no_grad():
        shape = fn(*[Tensor(x) for x in inputs]).shape
    proj = rng.normal(size=shape)

    def loss_value():
        with no_grad():
            return float(np.sum(fn(*[Tensor(x) for x in inputs]).data * proj))

    leaves = [Tensor(x.copy(), requires_grad=True) for x in inputs]
    out = fn(*leaves)
    backward(ops.reduce_sum(ops.mul(out, proj)))
    worst, count = 0.0, 0
    for leaf, x in zip(leaves, inputs):
        analytic = np.zeros_like(x) if leaf.grad is None else leaf.grad
        worst = max(worst, rel_error(analytic, numeric_grad(loss_value, x)))
        count += x.size
    return worst, count


# -- op suite --------------------------------------------------------------------

def _away_from(x: np.ndarray, points=(0.0,), margin: float = 1e-3) -> np.ndarray:
    for p in points:
        near = np.abs(x - p) < margin
        x = np.where(near, p + np.where(x >= p, margin, -margin) * 10, x)
    return x


def _distinct(x: np.ndarray, gap: float = 1e-3) -> np.ndarray:
    # spread values so that no two lie within ``gap`` (keeps max/argmax stable under h)
    flat = x.reshape(-1)
    order = np.argsort(flat)
    flat[order] = np.sort(flat) + gap * 10 * np.arange(flat.size)
    return flat.reshape(x.shape)


def _shape(rng, ndim=2, lo=1, hi=5):
    return tuple(int(s) for s in rng.integers(lo, hi, size=ndim))


def op_cases(rng: np.random.Generator) -> dict[str, Callable[[], tuple[Callable, list[np.ndarray]]]]:
    """Named generators of ``(function, inputs)`` with random shapes and values."""
    n = rng.normal

    def binary(op):
        def make():
            s = _shape(rng, int(rng.integers(1, 4)))
            other = s[-1:] if rng.random() < 0.3 else s
            return op, [n(size=s), n(size=other)]
        return make

    def unary(op, transform=lambda x: x):
        def make():
            return op, [transform(n(size=_shape(rng, int(rng.integers(1, 4)))))]
        return make

    def make_div():
        s = _shape(rng)
        return ops.div, [n(size=s), _away_from(n(size=s), margin=0.2)]

    def make_matmul():
        a, b, c = (int(v) for v in rng.integers(1, 5, size=3))
        if rng.random() < 0.5:
            return ops.matmul, [n(size=(a, b)), n(size=(b, c))]
        return ops.matmul, [n(size=(2, a, b)), n(size=(b, c))]

    def make_matmul_batched():
        a, b, c = (int(v) for v in rng.integers(1, 4, size=3))
        return ops.matmul, [n(size=(2, 2, a, b)), n(size=(2, 2, b, c))]

    def make_reshape():
        s = _shape(rng, 3)
        return (lambda x: ops.reshape(x, (s[0], -1))), [n(size=s)]

    def make_transpose():
        s = _shape(rng, 3)
        axes = tuple(rng.permutation(3))
        return (lambda x: ops.transpose(x, axes)), [n(size=s)]

    def make_getitem():
        s = _shape(rng, 2, 2, 6)
        rows = rng.integers(0, s[0], size=4)
        return (lambda x: ops.getitem(x, (rows, slice(0, s[1] - 1 or 1)))), [n(size=s)]

    def make_concat():
        s = _shape(rng, 2)
        axis = int(rng.integers(0, 2))
        other = list(s)
        other[axis] = int(rng.integers(1, 4))
        return (lambda a, b: ops.concat([a, b], axis=axis)), [n(size=s), n(size=tuple(other))]

    def make_stack():
        s = _shape(rng, 2)
        return (lambda a, b: ops.stack([a, b], axis=1)), [n(size=s), n(size=s)]

    def make_gather():
        s = _shape(rng, 2, 2, 5)
        idx = rng.integers(0, s[0], size=(3, 2))
        return (lambda x: ops.gather_rows(x, idx)), [n(size=s)]

    def make_segment_sum():
        rows, width, segs = int(rng.integers(1, 7)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        ids = rng.integers(0, segs, size=rows)
        return (lambda x: ops.segment_sum(x, ids, segs)), [n(size=(rows, width))]

    def make_segment_softmax():
        rows, segs = int(rng.integers(2, 8)), int(rng.integers(1, 4))
        ids = rng.integers(0, segs, size=rows)
        return (lambda x: ops.segment_softmax(x, ids, segs)), [n(size=rows)]

    def make_reduce(op):
        def make():
            s = _shape(rng, 3)
            axis = None if rng.random() < 0.3 else int(rng.integers(0, 3))
            keep = bool(rng.random() < 0.5)
            return (lambda x: op(x, axis=axis, keepdims=keep)), [_distinct(n(size=s))]
        return make

    def make_softmax(op):
        def make():
            return (lambda x: op(x, axis=-1)), [n(size=_shape(rng, int(rng.integers(1, 4))))]
        return make

    def make_xent():
        b, c = int(rng.integers(1, 6)), int(rng.integers(2, 6))
        labels = rng.integers(0, c, size=b)
        return (lambda x: ops.cross_entropy(x, labels)), [n(size=(b, c))]

    return {
        "add": binary(ops.add),
        "sub": binary(ops.sub),
        "mul": binary(ops.mul),
        "div": make_div,
        "neg": unary(ops.neg),
        "matmul": make_matmul,
        "matmul_batched": make_matmul_batched,
        "relu": unary(ops.relu, _away_from),
        "leaky_relu": unary(ops.leaky_relu, _away_from),
        "tanh": unary(ops.tanh),
        "sigmoid": unary(ops.sigmoid),
        "exp": unary(ops.exp),
        "log": unary(ops.log, lambda x: np.abs(x) + 0.2),
        "sqrt": unary(ops.sqrt, lambda x: np.abs(x) + 0.2),
        "reshape": make_reshape,
        "transpose": make_transpose,
        "getitem": make_getitem,
        "concat": make_concat,
        "stack": make_stack,
        "gather_rows": make_gather,
        "segment_sum": make_segment_sum,
        "segment_softmax": make_segment_softmax,
        "reduce_sum": make_reduce(ops.reduce_sum),
        "reduce_mean": make_reduce(ops.reduce_mean),
        "reduce_max": make_reduce(ops.reduce_max),
        "softmax": make_softmax(ops.softmax),
        "log_softmax": make_softmax(ops.log_softmax),
        "cross_entropy": make_xent,
    }


def check_ops(trials: int = 5, seed: int = 0, names: Sequence[str] | None = None) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    cases = op_cases(rng)
    results = []
    for name in names or list(cases):
        t0 = time.perf_counter()
        worst, count = 0.0, 0
        for _ in range(trials):
            fn, inputs = cases[name]()
            err, c = check_function(fn, inputs, rng)
            worst, count = max(worst, err), count + c
        results.append(CheckResult(name, worst, count, time.perf_counter() - t0))
    return results


# -- model suite -----------------------------------------------------------------

def fixture_instances() -> list[StoryInstance]:
    """Two small hand-built stories: a 4-node k=3 chain and a k=2 chain with one extra fact."""
    kb = default_kb()
    r = Relation
    specs = [
        ([(0, r("father"), 1), (1, r("wife"), 2), (2, r("brother"), 3)], (0, 3), 3),
        ([(0, r("sister"), 1), (1, r("son"), 2), (0, r("mother"), 3)], (0, 2), 2),
    ]
    out = []
    for facts, query, k in specs:
        target = kb.resolve_chain([rel for _, rel, _ in facts[:k]])
        out.append(StoryInstance(tuple(facts), query, target, k))
    return out


def check_model(model, instances: Sequence[StoryInstance], seed: int = 0, per_param: int = 12) -> tuple[float, int]:
    """Check a subset of every parameter's entries: the largest gradients plus random ones."""
    rng = np.random.default_rng(seed)
    batch = model.batch(instances)

    def loss_value():
        with no_grad():
            return float(ops.cross_entropy(model.logits(batch), batch.labels).data)

    model.zero_grad()
    backward(ops.cross_entropy(model.logits(batch), batch.labels))
    worst, count = 0.0, 0
    for p in model.parameters():
        g = p.grad.reshape(-1)
        top = np.argsort(-np.abs(g))[:per_param // 2]
        extra = rng.choice(g.size, size=min(g.size, per_param - len(top)), replace=False)
        idx = sorted(set(top.tolist()) | set(extra.tolist()))
        worst = max(worst, rel_error(g[idx], numeric_grad(loss_value, p.data, idx)))
        count += len(idx)
    return worst, count


def model_specs() -> list[tuple[str, Callable]]:
    from relchain.egnn import VARIANTS as EGNN_VARIANTS, EgnnModel
    from relchain.lgraph import VARIANTS as LGRAPH_VARIANTS, SeqModel

    specs = [(f"egnn_{v}", lambda v=v: EgnnModel(v, emb_dim=6, layers=2, heads=2 if v == "gat" else 1, seed=1))
             for v in EGNN_VARIANTS]
    specs += [(f"lgraph_{v}", lambda v=v: SeqModel(v, emb_dim=6, hidden=5 if v != "mha" else None, seed=1))
              for v in LGRAPH_VARIANTS]
    return specs


def check_models(seed: int = 0, names: Sequence[str] | None = None) -> list[CheckResult]:
    instances = fixture_instances()
    results = []
    for name, make in model_specs():
        if names and name not in names:
            continue
        t0 = time.perf_counter()
        err, count = check_model(make(), instances, seed)
        results.append(CheckResult(name, err, count, time.perf_counter() - t0))
    return results


def run_suite(trials: int = 5, seed: int = 0) -> list[CheckResult]:
    return check_ops(trials, seed) + check_models(seed)
