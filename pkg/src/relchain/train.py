"""Training, model selection, per-k evaluation and sweeps."""

from __future__ import annotations

import concurrent.futures
import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from relchain import config as cfgio
from relchain.autodiff import backward, checkpoint, clip_grad_norm, make_optimizer, no_grad, ops
from relchain.egnn import NUM_SLOTS, EgnnModel
from relchain.egnn import VARIANTS as EGNN_VARIANTS
from relchain.kb import RELATION_INDEX
from relchain.lgraph import SeqModel
from relchain.lgraph import VARIANTS as LGRAPH_VARIANTS
from relchain.story import DatasetSplit, StoryInstance, load_dataset

log = logging.getLogger(__name__)

SELECTION_METRICS = ("max-val-acc", "min-val-loss")
FAMILIES = {"egnn": EGNN_VARIANTS, "lgraph": LGRAPH_VARIANTS}


class TrainingDiverged(RuntimeError):
    pass


class EmptySplitError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    family: str = "lgraph"
    variant: str = "gru"
    emb_dim: int = 100
    hidden: int = 0           # 0 means same as emb_dim
    layers: int = 3
    heads: int = 0            # 0 means the family default (1 for gat, 2 for mha)
    aggregation: str = "sum"
    lr: float = 1e-3
    optimizer: str = "adam"
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 10
    selection: str = "max-val-acc"
    clip_norm: float = 5.0    # 0 disables clipping
    slot_shuffle: bool | None = None  # None means the family default (on for lgraph, off for egnn)
    seed: int = 0
    dataset: str = ""

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {sorted(FAMILIES)}")
        if self.variant not in FAMILIES[self.family]:
            raise ValueError(f"{self.family} variant must be one of {FAMILIES[self.family]}")
        if self.selection not in SELECTION_METRICS:
            raise ValueError(f"selection must be one of {SELECTION_METRICS}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 0:
            raise ValueError("batch_size and max_epochs must be positive, patience non-negative")

    @property
    def shuffles_slots(self) -> bool:
        """Whether training maps each instance's entities to random distinct slots."""
        return self.family == "lgraph" if self.slot_shuffle is None else self.slot_shuffle

    @property
    def name(self) -> str:
        return f"{self.family}_{self.variant}"

    def fingerprint(self) -> str:
        # the dataset path is where data lives, not what the experiment is
        items = {k: v for k, v in cfgio.to_mapping(self).items() if k != "dataset"}
        return hashlib.sha256(json.dumps(items, sort_keys=True).encode()).hexdigest()[:12]

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def load_config(path, section: str = "train") -> TrainConfig:
    return cfgio.read_section(path, section, TrainConfig)


def build_model(config: TrainConfig):
    rng = np.random.default_rng(config.seed)
    if config.family == "egnn":
        return EgnnModel(config.variant, emb_dim=config.emb_dim, layers=config.layers,
                         heads=config.heads or 1, aggregation=config.aggregation, rng=rng)
    return SeqModel(config.variant, emb_dim=config.emb_dim, hidden=config.hidden or None,
                    heads=config.heads or 2, rng=rng)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float

    def line(self) -> str:
        return f"{self.epoch}\t{self.train_loss:.6f}\t{self.val_loss:.6f}\t{self.val_acc:.6f}"


@dataclass
class TrainResult:
    model: object
    config: TrainConfig
    history: list[EpochRecord]
    best_epoch: int
    seconds: float

    @property
    def best(self) -> EpochRecord:
        return self.history[self.best_epoch - 1]


def _better(selection: str, rec: EpochRecord, best: EpochRecord | None) -> bool:
    if best is None:
        return True
    if selection == "max-val-acc":
        return rec.val_acc > best.val_acc
    return rec.val_loss < best.val_loss


def select_epoch(history: Sequence[EpochRecord], selection: str) -> int:
    """Epoch (1-based) the selection rule retains; earliest wins ties."""
    best = None
    for rec in history:
        if _better(selection, rec, best):
            best = rec
    return best.epoch


def _param_norms(model) -> str:
    return ", ".join(f"{p.name}={np.linalg.norm(p.data):.3g}" for p in model.parameters())


def loss_and_accuracy(model, instances: Sequence[StoryInstance], batch_size: int = 256) -> tuple[float, float]:
    if not instances:
        raise EmptySplitError("cannot score an empty split")
    total_loss, correct = 0.0, 0
    with no_grad():
        for start in range(0, len(instances), batch_size):
            chunk = instances[start:start + batch_size]
            batch = model.batch(chunk)
            logits = model.logits(batch)
            total_loss += float(ops.cross_entropy(logits, batch.labels).data) * len(chunk)
            correct += int((np.argmax(logits.data, axis=1) == batch.labels).sum())
    return total_loss / len(instances), correct / len(instances)


def predict(model, instances: Sequence[StoryInstance], batch_size: int = 256) -> np.ndarray:
    """Argmax relation indices; ties go to the lowest index."""
    if not instances:
        raise EmptySplitError("cannot predict on an empty split")
    out = []
    with no_grad():
        for start in range(0, len(instances), batch_size):
            out.append(np.argmax(model.logits(model.batch(instances[start:start + batch_size])).data, axis=1))
    return np.concatenate(out)


def train(config: TrainConfig, split: DatasetSplit | None = None, out_dir=None,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Minibatch training with per-epoch validation and early stopping.

    The returned model holds the parameters of the epoch retained by the
    selection metric.  With ``out_dir`` the checkpoint and the per-epoch log
    are written there.
    """
    if split is None:
        if not config.dataset:
            raise ValueError("no dataset given")
        split = load_dataset(config.dataset)
    if not split.train or not split.valid:
        raise EmptySplitError("training needs non-empty train and valid splits")
    t0 = time.perf_counter()
    model = build_model(config)
    params = model.parameters()
    opt = make_optimizer(config.optimizer, params, config.lr)
    order_rng = np.random.default_rng([config.seed, 1])
    slot_rng = np.random.default_rng([config.seed, 2])
    train_set = list(split.train)
    history: list[EpochRecord] = []
    best, best_state, since_best = None, None, 0
    for epoch in range(1, config.max_epochs + 1):
        order = order_rng.permutation(len(train_set))
        losses = []
        for bi, start in enumerate(range(0, len(order), config.batch_size)):
            chunk = [train_set[i] for i in order[start:start + config.batch_size]]
            batch = model.batch(chunk)
            if config.shuffles_slots:
                perms = np.argsort(slot_rng.random((len(chunk), NUM_SLOTS)), axis=1)
                batch = model.remap_slots(batch, perms)
            opt.zero_grad()
            loss = ops.cross_entropy(model.logits(batch), batch.labels)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch}, batch {bi}; "
                                       f"parameter norms: {_param_norms(model)}")
            backward(loss)
            if config.clip_norm > 0:
                clip_grad_norm(params, config.clip_norm)
            opt.step()
            losses.append(value * len(chunk))
        val_loss, val_acc = loss_and_accuracy(model, split.valid)
        rec = EpochRecord(epoch, sum(losses) / len(train_set), val_loss, val_acc)
        history.append(rec)
        log.info("%s epoch %s", config.name, rec.line())
        if on_epoch is not None:
            on_epoch(rec)
        if _better(config.selection, rec, best):
            best, best_state, since_best = rec, model.state_dict(), 0
        else:
            since_best += 1
        if since_best >= config.patience:
            break
    model.load_state_dict(best_state)
    result = TrainResult(model, config, history, best.epoch, time.perf_counter() - t0)
    if out_dir is not None:
        save_run(result, out_dir)
    return result


def checkpoint_meta(config: TrainConfig, model, epoch: int) -> dict:
    return {"train": cfgio.to_mapping(config), "model": model.config(), "epoch": epoch}


def save_run(result: TrainResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint.save(out / "model.ckpt", result.model.state_dict(),
                    checkpoint_meta(result.config, result.model, result.best_epoch))
    with open(out / "train_log.tsv", "w", encoding="utf-8") as fh:
        fh.write("epoch\ttrain_loss\tval_loss\tval_acc\n")
        for rec in result.history:
            fh.write(rec.line() + "\n")
    cfgio.write_sections(out / "config.ini", {"train": result.config})


def read_log(path) -> list[EpochRecord]:
    rows = Path(path).read_text(encoding="utf-8").splitlines()[1:]
    out = []
    for row in rows:
        e, a, b, c = row.split("\t")
        out.append(EpochRecord(int(e), float(a), float(b), float(c)))
    return out


def load_model(path):
    """Rebuild a model from a checkpoint; returns ``(model, TrainConfig)``."""
    state, meta = checkpoint.load(path)
    config = cfgio.from_mapping(TrainConfig, meta["train"], str(path))
    model = build_model(config)
    model.load_state_dict(state)
    return model, config


@dataclass
class EvalReport:
    per_k_accuracy: dict[int, float]
    fingerprint: str = ""
    seconds: float = 0.0
    counts: dict[int, int] = field(default_factory=dict)

    @property
    def mean_test_accuracy(self) -> float:
        vals = list(self.per_k_accuracy.values())
        return sum(vals) / len(vals)

    def to_dict(self) -> dict:
        return {"per_k_accuracy": {str(k): v for k, v in self.per_k_accuracy.items()},
                "mean_test_accuracy": self.mean_test_accuracy, "fingerprint": self.fingerprint,
                "seconds": self.seconds, "counts": {str(k): v for k, v in self.counts.items()}}

    def lines(self) -> list[str]:
        out = [f"k={k}\t{acc:.4f}" for k, acc in sorted(self.per_k_accuracy.items())]
        out.append(f"mean\t{self.mean_test_accuracy:.4f}")
        return out


def evaluate(model, test: dict[int, Sequence[StoryInstance]], fingerprint: str = "") -> EvalReport:
    if not test:
        raise EmptySplitError("no test splits")
    t0 = time.perf_counter()
    per_k, counts = {}, {}
    for k in sorted(test):
        instances = list(test[k])
        if not instances:
            raise EmptySplitError(f"test split for k={k} is empty")
        pred = predict(model, instances)
        gold = np.array([RELATION_INDEX[inst.target] for inst in instances])
        per_k[k] = float(np.mean(pred == gold))
        counts[k] = len(instances)
    return EvalReport(per_k, fingerprint, time.perf_counter() - t0, counts)


def permuted_instances(instances: Sequence[StoryInstance], seed: int) -> list[StoryInstance]:
    """Copies with the fact list shuffled; entity slots are left untouched.

    The copies are for scoring only: their fact order no longer starts with
    the query path.
    """
    rng = np.random.default_rng(seed)
    out = []
    for inst in instances:
        perm = rng.permutation(len(inst.facts))
        if len(perm) > 1 and (perm == np.arange(len(perm))).all():
            perm = np.roll(perm, 1)
        out.append(dataclasses.replace(inst, facts=tuple(inst.facts[i] for i in perm)))
    return out


def order_sensitivity(model, instances: Sequence[StoryInstance], seed: int = 0, permutations: int = 1) -> float:
    """Fraction of instances whose prediction changes under some fact-order shuffle."""
    base = predict(model, instances)
    changed = np.zeros(len(instances), dtype=bool)
    for p in range(permutations):
        changed |= predict(model, permuted_instances(instances, seed + p)) != base
    return float(changed.mean())


# -- sweeps --------------------------------------------------------------------

@dataclass
class SweepRow:
    name: str
    fingerprint: str
    report: EvalReport | None
    status: str = "ok"
    best_epoch: int = 0
    seconds: float = 0.0


def run_one(config: TrainConfig, split: DatasetSplit | None = None, out_dir=None) -> SweepRow:
    try:
        if split is None:
            split = load_dataset(config.dataset)
        run_dir = None if out_dir is None else Path(out_dir) / "runs" / f"{config.name}-{config.fingerprint()}"
        result = train(config, split, run_dir)
        report = evaluate(result.model, split.test, config.fingerprint())
        if run_dir is not None:
            (run_dir / "eval.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
        return SweepRow(config.name, config.fingerprint(), report, "ok", result.best_epoch, result.seconds)
    except Exception as exc:  # recorded per config; the sweep carries on
        log.exception("config %s failed", config.name)
        return SweepRow(config.name, config.fingerprint(), None, f"error: {exc}".replace("\t", " ").replace("\n", " "))


def sweep(configs: Sequence[TrainConfig], split: DatasetSplit | None = None, out_dir=None,
          jobs: int = 1) -> list[SweepRow]:
    if not configs:
        raise ValueError("sweep needs at least one config")
    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(run_one, configs, [split] * len(configs), [out_dir] * len(configs)))
    else:
        rows = [run_one(c, split, out_dir) for c in configs]
    rows.sort(key=lambda r: (r.name, r.fingerprint))
    if out_dir is not None:
        write_results(rows, out_dir)
    return rows


def results_table(rows: Sequence[SweepRow]) -> str:
    ks = sorted({k for r in rows if r.report for k in r.report.per_k_accuracy})
    lines = ["\t".join(["name", "fingerprint", *[f"k{k}" for k in ks], "mean", "best_epoch", "status"])]
    for r in rows:
        accs = [f"{r.report.per_k_accuracy[k]:.4f}" if r.report and k in r.report.per_k_accuracy else ""
                for k in ks]
        mean = f"{r.report.mean_test_accuracy:.4f}" if r.report else ""
        lines.append("\t".join([r.name, r.fingerprint, *accs, mean, str(r.best_epoch), r.status]))
    return "\n".join(lines) + "\n"


def write_results(rows: Sequence[SweepRow], out_dir) -> None:
    out = Path(out_dir)
    (out / "curves").mkdir(parents=True, exist_ok=True)
    (out / "results.tsv").write_text(results_table(rows), encoding="utf-8")
    for r in rows:
        if r.report is None:
            continue
        body = "k\taccuracy\n" + "".join(f"{k}\t{a:.6f}\n" for k, a in sorted(r.report.per_k_accuracy.items()))
        (out / "curves" / f"{r.name}-{r.fingerprint}.tsv").write_text(body, encoding="utf-8")
