"""Story graphs: family sampling, k-chain extraction, noise, dataset files."""

from __future__ import annotations

import json
import math
import random
from dataclasses import asdict, dataclass, field
from typing import Sequence

from relchain.family import FamilyTree, KinshipConflict
from relchain.kb import FEMALE, MALE, KnowledgeBase, Relation, default_kb

NOISE_REGIMES = ("clean", "supporting", "irrelevant", "disconnected")


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class GraphParams:
    max_entities: int = 30
    generations: int = 4
    max_children: int = 5
    marry_prob: float = 0.85
    inlaw_prob: float = 0.6
    max_k: int = 10

    def __post_init__(self):
        if self.max_entities < self.max_k + 1:
            raise GenerationError(
                f"max_entities={self.max_entities} cannot hold a path of length k={self.max_k}")
        if self.generations < 2:
            raise GenerationError("need at least two generations")


@dataclass
class FamilyGraph:
    entities: list[tuple[int, str]]
    edges: list[tuple[int, Relation, int]]

    def __post_init__(self):
        self.gender = dict(self.entities)
        self.adj: dict[int, dict[int, Relation]] = {e: {} for e, _ in self.entities}
        for x, r, y in self.edges:
            self.adj[x][y] = r

    def __eq__(self, other):
        return isinstance(other, FamilyGraph) and self.entities == other.entities and self.edges == other.edges

    def relation(self, x: int, y: int) -> Relation | None:
        return self.adj[x].get(y)


def sample_tree(seed: int, params: GraphParams = GraphParams()) -> FamilyTree:
    rng = random.Random(seed)
    tree = FamilyTree()
    budget = params.max_entities

    def room(n=1):
        return len(tree) + n <= budget

    def person(gender=None):
        return tree.add_person(gender or rng.choice((MALE, FEMALE)))

    root = person(MALE), person(FEMALE)
    tree.marry(*root)
    frontier = [root]
    for _ in range(params.generations - 1):
        nxt = []
        for couple in frontier:
            for _ in range(rng.randint(1, params.max_children)):
                if not room():
                    break
                child = tree.add_child(*couple, rng.choice((MALE, FEMALE)))
                if rng.random() >= params.marry_prob or not room():
                    continue
                partner_gender = FEMALE if tree.gender[child] == MALE else MALE
                if rng.random() < params.inlaw_prob and room(3):
                    # the partner comes with parents (and maybe a sibling)
                    inlaws = person(MALE), person(FEMALE)
                    tree.marry(*inlaws)
                    partner = tree.add_child(*inlaws, partner_gender)
                    if rng.random() < 0.5 and room():
                        tree.add_child(*inlaws, rng.choice((MALE, FEMALE)))
                else:
                    partner = person(partner_gender)
                tree.marry(child, partner)
                nxt.append((child, partner))
        frontier = nxt
        if not frontier:
            break
    tree.check()
    return tree


def sample_family_graph(seed: int, params: GraphParams = GraphParams()) -> FamilyGraph:
    """Random consistent family with every labelled kinship pair as an edge."""
    tree = sample_tree(seed, params)
    if len(tree) < params.max_k + 1:
        # tiny families (a childless root couple, say) are padded out by resampling
        for bump in range(1, 50):
            tree = sample_tree(seed * 7919 + bump, params)
            if len(tree) >= params.max_k + 1:
                break
        else:
            raise GenerationError("could not sample a family large enough for the longest chain")
    return FamilyGraph(entities=[(p, tree.gender[p]) for p in tree.people], edges=tree.edges())


def check_graph(graph: FamilyGraph, kb: KnowledgeBase | None = None) -> list[str]:
    """Contradictions between a graph's edges and the rule table (empty if none).

    Checks object genders, that every edge has its reverse, and that every
    two-step walk covered by a rule is matched by the direct edge.
    """
    kb = kb or default_kb()
    problems = []
    for x, r, y in graph.edges:
        if r.gender != graph.gender[y]:
            problems.append(f"{x} -{r}-> {y}: {y} is {graph.gender[y]}")
        if graph.relation(y, x) is None:
            problems.append(f"{x} -{r}-> {y} has no reverse edge")
    for x, nbrs in graph.adj.items():
        for y, r1 in nbrs.items():
            for z, r2 in graph.adj[y].items():
                c = kb.compose(r1, r2)
                if c is not None and (z == x or graph.relation(x, z) != c):
                    problems.append(f"{x} -{r1}-> {y} -{r2}-> {z}: rule says {c}, graph says {graph.relation(x, z)}")
    return problems


Fact = tuple[int, Relation, int]


@dataclass(frozen=True)
class StoryInstance:
    facts: tuple[Fact, ...]
    query: tuple[int, int]
    target: Relation
    k: int
    noise: str = "clean"
    seed: int = 0
    # provenance for add_noise: source graph and canonical id -> graph id
    source: FamilyGraph | None = field(default=None, compare=False, repr=False)
    entity_map: tuple[int, ...] | None = field(default=None, compare=False, repr=False)

    @property
    def path(self) -> tuple[Fact, ...]:
        return self.facts[:self.k]

    @property
    def num_entities(self) -> int:
        return 1 + max(max(x, y) for x, _, y in self.facts)

    def path_nodes(self) -> list[int]:
        return [self.facts[0][0]] + [y for _, _, y in self.path]

    def to_record(self) -> dict:
        return {
            "facts": [[x, r.label, y] for x, r, y in self.facts],
            "query": list(self.query),
            "target": self.target.label,
            "k": self.k,
            "noise": self.noise,
            "seed": self.seed,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "StoryInstance":
        facts = tuple((int(x), Relation.parse(r), int(y)) for x, r, y in rec["facts"])
        head, tail = rec["query"]
        inst = cls(facts=facts, query=(int(head), int(tail)), target=Relation.parse(rec["target"]),
                   k=int(rec["k"]), noise=str(rec["noise"]), seed=int(rec["seed"]))
        if inst.noise not in NOISE_REGIMES:
            raise ValueError(f"unknown noise regime {inst.noise!r}")
        if not 1 <= inst.k <= len(facts):
            raise ValueError(f"k={inst.k} inconsistent with {len(facts)} facts")
        return inst


def canonicalize(facts: Sequence[Fact], query: tuple[int, int]) -> tuple[list[Fact], tuple[int, int], list[int]]:
    """Relabel entities 0..n-1 by first appearance in ``facts``.

    Returns the relabelled facts and query plus the old id of each new id.
    """
    order: dict[int, int] = {}
    for x, _, y in facts:
        order.setdefault(x, len(order))
        order.setdefault(y, len(order))
    for q in query:
        order.setdefault(q, len(order))
    new_facts = [(order[x], r, order[y]) for x, r, y in facts]
    inverse = sorted(order, key=order.get)
    return new_facts, (order[query[0]], order[query[1]]), inverse


def _find_paths(graph: FamilyGraph, k: int, rng: random.Random, kb: KnowledgeBase,
                heads: list[int], budget: int, want: int) -> list[tuple[list[int], Relation]]:
    """Randomised depth-first search for resolvable simple k-paths.

    Every prefix of an accepted path resolves, so the search prunes as soon
    as a composition is undefined.
    """
    found: list[tuple[list[int], Relation]] = []

    def candidates(path, composed):
        out = []
        for nxt, r in graph.adj[path[-1]].items():
            if nxt in path:
                continue
            c = r if composed is None else kb.compose(composed, r)
            if c is not None:
                out.append((nxt, c))
        rng.shuffle(out)
        return out

    for head in heads:
        expansions = 0
        stack = [([head], None, candidates([head], None))]
        while stack and expansions < budget:
            path, composed, cands = stack[-1]
            if len(path) == k + 1:
                found.append((path, composed))
                stack.pop()
                if len(found) >= want:
                    return found
                continue
            if not cands:
                stack.pop()
                continue
            nxt, c = cands.pop()
            expansions += 1
            new_path = path + [nxt]
            stack.append((new_path, c, candidates(new_path, c) if len(new_path) < k + 1 else []))
    return found


def sample_chain(graph: FamilyGraph, k: int, seed: int, kb: KnowledgeBase | None = None,
                 max_heads: int = 12, budget: int = 4000, pool: int = 24) -> StoryInstance:
    """A clean instance whose facts are one resolvable simple k-path.

    Up to ``pool`` candidate paths are collected; the target is drawn
    uniformly among the targets they reach, then a path for that target.
    """
    if not 2 <= k <= 10:
        raise ValueError(f"clause length must be in 2..10, got {k}")
    kb = kb or default_kb()
    rng = random.Random(seed)
    heads = [e for e, _ in graph.entities]
    rng.shuffle(heads)
    found = _find_paths(graph, k, rng, kb, heads[:max_heads], budget, pool)
    if not found:
        raise GenerationError(f"no resolvable simple path of length {k} found")
    by_target: dict[Relation, list[list[int]]] = {}
    for path, target in found:
        by_target.setdefault(target, []).append(path)
    target = rng.choice(sorted(by_target))
    path = rng.choice(by_target[target])
    facts = [(a, graph.relation(a, b), b) for a, b in zip(path, path[1:])]
    # the fold must agree with the graph itself
    assert kb.resolve_chain([r for _, r, _ in facts]) == target == graph.relation(path[0], path[-1])
    new_facts, query, inverse = canonicalize(facts, (path[0], path[-1]))
    return StoryInstance(tuple(new_facts), query, target, k, "clean", seed,
                         source=graph, entity_map=tuple(inverse))


def default_noise_count(k: int) -> int:
    return math.ceil(k / 2)


def add_noise(instance: StoryInstance, regime: str, seed: int, count: int | None = None) -> StoryInstance:
    """Append noise facts drawn from the instance's source family graph.

    supporting: facts between path entities (reversed path facts or shortcuts,
    never the query pair itself); irrelevant: facts touching exactly one path
    entity; disconnected: facts among entities off the path.
    """
    if regime not in NOISE_REGIMES[1:]:
        raise ValueError(f"unknown noise regime {regime!r}; expected one of {NOISE_REGIMES[1:]}")
    if instance.noise != "clean":
        raise ValueError("noise can only be added to a clean instance")
    if instance.source is None or instance.entity_map is None:
        raise ValueError("instance has no source graph (was it loaded from disk?)")
    graph, emap = instance.source, instance.entity_map
    n = default_noise_count(instance.k) if count is None else count
    rng = random.Random(seed)

    on_path = {emap[e] for e in instance.path_nodes()}
    head, tail = emap[instance.query[0]], emap[instance.query[1]]
    present = {(emap[x], emap[y]) for x, _, y in instance.facts}
    pool = []
    for x, r, y in graph.edges:
        if (x, y) in present:
            continue
        inside = (x in on_path) + (y in on_path)
        if regime == "supporting":
            ok = inside == 2 and {x, y} != {head, tail}
        elif regime == "irrelevant":
            ok = inside == 1
        else:
            ok = inside == 0
        if ok:
            pool.append((x, r, y))
    if len(pool) < n:
        raise GenerationError(f"only {len(pool)} candidate {regime} facts, need {n}")
    noise_facts = rng.sample(pool, n)
    old_facts = [(emap[x], r, emap[y]) for x, r, y in instance.facts]
    new_facts, query, inverse = canonicalize(old_facts + noise_facts, (head, tail))
    return StoryInstance(tuple(new_facts), query, instance.target, instance.k, regime, instance.seed,
                         source=graph, entity_map=tuple(inverse))


def check_instance(inst: StoryInstance, kb: KnowledgeBase | None = None) -> list[str]:
    """Structural invariants of an emitted instance (empty list when valid)."""
    kb = kb or default_kb()
    problems = []
    nodes = inst.path_nodes()
    if len(set(nodes)) != inst.k + 1:
        problems.append("path is not simple")
    if any(a[2] != b[0] for a, b in zip(inst.path, inst.path[1:])):
        problems.append("path facts are not chained")
    if (nodes[0], nodes[-1]) != tuple(inst.query):
        problems.append("query does not join the path endpoints")
    if kb.resolve_chain([r for _, r, _ in inst.path]) != inst.target:
        problems.append("target differs from the resolved chain")
    seen: list[int] = []
    for x, _, y in inst.facts:
        for e in (x, y):
            if e not in seen:
                seen.append(e)
    if seen != list(range(len(seen))):
        problems.append("entity ids are not canonical")
    return problems


# -- datasets -------------------------------------------------------------

FORMAT_VERSION = 1


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    train_ks: tuple[int, ...] = (2, 3, 4)
    test_ks: tuple[int, ...] = tuple(range(2, 11))
    n_train: int = 5000
    n_valid: int = 500
    n_test_per_k: int = 200
    noise: str = "clean"
    test_noise: str | None = None
    noise_count: int | None = None
    master_seed: int = 0
    max_entities: int = 30
    max_children: int = 5

    def __post_init__(self):
        for regime in (self.noise, self.test_noise or self.noise):
            if regime not in NOISE_REGIMES:
                raise ValueError(f"unknown noise regime {regime!r}")
        if not self.train_ks or not self.test_ks:
            raise ValueError("train_ks and test_ks must be non-empty")
        if any(not 2 <= k <= 10 for k in self.train_ks + self.test_ks):
            raise ValueError("clause lengths must lie in 2..10")

    @property
    def graph_params(self) -> GraphParams:
        return GraphParams(max_entities=self.max_entities, max_children=self.max_children,
                           max_k=max(self.train_ks + self.test_ks))


# Train/test regimes: generalisation trains on short chains and tests on
# k = 2..10; robustness trains and tests on k = 2, 3 under one noise type.
PRESETS: dict[str, DatasetConfig] = {
    "gen-23": DatasetConfig(train_ks=(2, 3)),
    "gen-234": DatasetConfig(train_ks=(2, 3, 4)),
    **{f"robust-{regime}": DatasetConfig(train_ks=(2, 3), test_ks=(2, 3), noise=regime)
       for regime in NOISE_REGIMES},
}


@dataclass
class DatasetSplit:
    train: list[StoryInstance]
    valid: list[StoryInstance]
    test: dict[int, list[StoryInstance]]
    config: DatasetConfig = field(default_factory=DatasetConfig)

    def __eq__(self, other):
        return (isinstance(other, DatasetSplit) and self.train == other.train
                and self.valid == other.valid and self.test == other.test and self.config == other.config)


_SPLIT_CODES = {"train": 0, "valid": 1, "test": 2}


def instance_seed(master_seed: int, split: str, k: int, index: int) -> int:
    import numpy as np

    ss = np.random.SeedSequence([master_seed, _SPLIT_CODES[split], k, index])
    return int(ss.generate_state(1)[0])


def make_instance(config: DatasetConfig, split: str, k: int, index: int, max_attempts: int = 200) -> StoryInstance:
    """The ``index``-th instance of a split; depends only on its coordinates."""
    seed = instance_seed(config.master_seed, split, k, index)
    rng = random.Random(seed)
    regime = config.noise if split != "test" else (config.test_noise or config.noise)
    params = config.graph_params
    for _ in range(max_attempts):
        g_seed, c_seed, n_seed = (rng.getrandbits(32) for _ in range(3))
        try:
            graph = sample_family_graph(g_seed, params)
            inst = sample_chain(graph, k, c_seed)
            if regime != "clean":
                inst = add_noise(inst, regime, n_seed, config.noise_count)
        except (GenerationError, KinshipConflict):
            continue
        return StoryInstance(inst.facts, inst.query, inst.target, inst.k, inst.noise, seed,
                             source=inst.source, entity_map=inst.entity_map)
    raise GenerationError(f"gave up on {split} k={k} #{index} after {max_attempts} attempts")


def _spread(total: int, ks: Sequence[int]) -> list[tuple[int, int]]:
    base, extra = divmod(total, len(ks))
    return [(k, base + (i < extra)) for i, k in enumerate(sorted(ks))]


def _tasks(config: DatasetConfig) -> list[tuple[str, int, int]]:
    tasks = []
    for split, total in (("train", config.n_train), ("valid", config.n_valid)):
        for k, n in _spread(total, config.train_ks):
            tasks.extend((split, k, i) for i in range(n))
    for k in sorted(config.test_ks):
        tasks.extend(("test", k, i) for i in range(config.n_test_per_k))
    return tasks


def _run_task(args) -> dict:
    config, split, k, index = args
    return make_instance(config, split, k, index).to_record()


def generate_dataset(config: DatasetConfig = DatasetConfig(), jobs: int = 1) -> DatasetSplit:
    """Generate every split; parallel and serial runs give identical output."""
    tasks = _tasks(config)
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_run_task, [(config, *t) for t in tasks], chunksize=32))
        instances = [StoryInstance.from_record(r) for r in records]
    else:
        instances = [make_instance(config, *t) for t in tasks]
    split = DatasetSplit([], [], {k: [] for k in sorted(config.test_ks)}, config)
    rng = random.Random(config.master_seed)
    for (name, k, _), inst in zip(tasks, instances):
        if name == "test":
            split.test[k].append(inst)
        else:
            getattr(split, name).append(inst)
    # interleave clause lengths so minibatches are mixed
    rng.shuffle(split.train)
    rng.shuffle(split.valid)
    return split


def _dump_lines(instances: Sequence[StoryInstance]) -> str:
    return "".join(json.dumps(inst.to_record()) + "\n" for inst in instances)


def test_file(k: int) -> str:
    return f"test_k{k:02d}.jsonl"


def save_dataset(split: DatasetSplit, out_dir) -> None:
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {"train.jsonl": split.train, "valid.jsonl": split.valid}
    files.update({test_file(k): v for k, v in split.test.items()})
    for name, instances in files.items():
        (out / name).write_text(_dump_lines(instances), encoding="utf-8")
    manifest = {
        "format": "relchain-dataset",
        "version": FORMAT_VERSION,
        "master_seed": split.config.master_seed,
        "config": asdict(split.config),
        "files": {name: len(v) for name, v in files.items()},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_instances(path) -> list[StoryInstance]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(StoryInstance.from_record(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetFormatError(f"{path}:{lineno}: malformed record ({exc})") from None
    return out


def load_dataset(in_dir) -> DatasetSplit:
    from pathlib import Path

    root = Path(in_dir)
    try:
        manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise DatasetFormatError(f"{root / 'manifest.json'}: {exc}") from None
    if manifest.get("format") != "relchain-dataset" or manifest.get("version") != FORMAT_VERSION:
        raise DatasetFormatError(f"{root}: unsupported dataset format")
    cfg = dict(manifest["config"])
    for key in ("train_ks", "test_ks"):
        cfg[key] = tuple(cfg[key])
    config = DatasetConfig(**cfg)
    test = {k: read_instances(root / test_file(k)) for k in sorted(config.test_ks)}
    return DatasetSplit(read_instances(root / "train.jsonl"), read_instances(root / "valid.jsonl"), test, config)
