"""Kinship vocabulary and the composition knowledge base.

A fact ``(x, r, y)`` reads "y is x's r": ``(ann, father, bob)`` says Bob is
Ann's father.  Base relations are stored child-to-parent style and every base
relation has an ``inv-`` dual used for reversed edges.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Sequence

MALE = "male"
FEMALE = "female"

# (name, gender of the named person, gender-swapped counterpart)
_BASE = (
    ("father", MALE, "mother"),
    ("mother", FEMALE, "father"),
    ("son", MALE, "daughter"),
    ("daughter", FEMALE, "son"),
    ("brother", MALE, "sister"),
    ("sister", FEMALE, "brother"),
    ("grandfather", MALE, "grandmother"),
    ("grandmother", FEMALE, "grandfather"),
    ("grandson", MALE, "granddaughter"),
    ("granddaughter", FEMALE, "grandson"),
    ("husband", MALE, "wife"),
    ("wife", FEMALE, "husband"),
    ("uncle", MALE, "aunt"),
    ("aunt", FEMALE, "uncle"),
    ("nephew", MALE, "niece"),
    ("niece", FEMALE, "nephew"),
    ("father-in-law", MALE, "mother-in-law"),
    ("mother-in-law", FEMALE, "father-in-law"),
    ("son-in-law", MALE, "daughter-in-law"),
    ("daughter-in-law", FEMALE, "son-in-law"),
)

BASE_NAMES: tuple[str, ...] = tuple(name for name, _, _ in _BASE)
_GENDER = {name: gender for name, gender, _ in _BASE}
_SWAP = {name: other for name, _, other in _BASE}
INV_PREFIX = "inv-"


class UnknownRelationError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class Relation:
    """A kinship label, either a base relation or its ``inv-`` dual."""

    name: str
    inverse: bool = False

    def __post_init__(self):
        if self.name not in _GENDER:
            raise UnknownRelationError(f"unknown relation {self.name!r}")

    @classmethod
    def parse(cls, label: str) -> "Relation":
        label = label.strip().lower()
        if label.startswith(INV_PREFIX):
            return cls(label[len(INV_PREFIX):], True)
        return cls(label)

    @property
    def label(self) -> str:
        return INV_PREFIX + self.name if self.inverse else self.name

    @property
    def gender(self) -> str:
        """Gender of the person the base relation names (the fact's object)."""
        return _GENDER[self.name]

    @property
    def direction(self) -> str:
        return "inv" if self.inverse else "base"

    def invert(self) -> "Relation":
        return Relation(self.name, not self.inverse)

    def gender_swap(self) -> "Relation":
        return Relation(_SWAP[self.name], self.inverse)

    def __str__(self):
        return self.label

    def __repr__(self):
        return f"Relation({self.label!r})"


BASE_RELATIONS: tuple[Relation, ...] = tuple(Relation(n) for n in BASE_NAMES)
INV_RELATIONS: tuple[Relation, ...] = tuple(r.invert() for r in BASE_RELATIONS)
# Edge vocabulary: base labels first, then their duals.
ALL_RELATIONS: tuple[Relation, ...] = BASE_RELATIONS + INV_RELATIONS
RELATION_INDEX = {r: i for i, r in enumerate(ALL_RELATIONS)}
NUM_TARGETS = len(BASE_RELATIONS)
NUM_EDGE_TYPES = len(ALL_RELATIONS)


def invert(r: Relation) -> Relation:
    return r.invert()


def relation(label: str | Relation) -> Relation:
    return label if isinstance(label, Relation) else Relation.parse(label)


def converse(r: Relation, subject_gender: str) -> Relation:
    """Base label for the reversed fact, given the gender of the old subject.

    If ``y`` is ``x``'s father then ``x`` is ``y``'s son or daughter.
    """
    if r.inverse:
        raise ValueError("converse is defined on base relations")
    male = subject_gender == MALE
    table = {
        "father": "son", "mother": "son",
        "son": "father", "daughter": "father",
        "brother": "brother", "sister": "brother",
        "grandfather": "grandson", "grandmother": "grandson",
        "grandson": "grandfather", "granddaughter": "grandfather",
        "husband": "husband", "wife": "husband",
        "uncle": "nephew", "aunt": "nephew",
        "nephew": "uncle", "niece": "uncle",
        "father-in-law": "son-in-law", "mother-in-law": "son-in-law",
        "son-in-law": "father-in-law", "daughter-in-law": "father-in-law",
    }
    out = Relation(table[r.name])
    return out if male else out.gender_swap()


@dataclass(frozen=True, order=True)
class Rule:
    lhs1: Relation
    lhs2: Relation
    rhs: Relation

    def gender_swap(self) -> "Rule":
        return Rule(self.lhs1.gender_swap(), self.lhs2.gender_swap(), self.rhs.gender_swap())

    def __str__(self):
        return f"{self.lhs1}\t{self.lhs2}\t{self.rhs}"


class RuleFileError(ValueError):
    pass


@dataclass
class ValidationReport:
    functional: list[str] = field(default_factory=list)
    closure: list[str] = field(default_factory=list)
    oracle: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not (self.functional or self.closure or self.oracle)

    def __len__(self):
        return len(self.functional) + len(self.closure) + len(self.oracle)

    def lines(self) -> list[str]:
        return ([f"functional: {m}" for m in self.functional]
                + [f"closure: {m}" for m in self.closure]
                + [f"oracle: {m}" for m in self.oracle])


class KnowledgeBase:
    """Immutable set of binary composition rules over the kinship vocabulary.

    Duplicate left-hand sides are kept (so that ``validate_kb`` can report
    them); lookups for a conflicting pair resolve to nothing.
    """

    def __init__(self, rules: Iterable[Rule], relations: Iterable[Relation] = ALL_RELATIONS):
        self.rules: frozenset[Rule] = frozenset(rules)
        self.relations: frozenset[Relation] = frozenset(relations)
        table: dict[tuple[Relation, Relation], set[Relation]] = {}
        for rule in self.rules:
            table.setdefault((rule.lhs1, rule.lhs2), set()).add(rule.rhs)
        self._table = {lhs: next(iter(rhs)) for lhs, rhs in table.items() if len(rhs) == 1}
        self._conflicts = {lhs: rhs for lhs, rhs in table.items() if len(rhs) > 1}

    def __len__(self):
        return len(self.rules)

    def __contains__(self, rule):
        return rule in self.rules

    def compose(self, r1: Relation, r2: Relation) -> Relation | None:
        return self._table.get((r1, r2))

    def resolve_chain(self, chain: Sequence[Relation]) -> Relation | None:
        if not chain:
            raise ValueError("cannot resolve an empty chain")
        current = chain[0]
        for r in chain[1:]:
            current = self.compose(current, r)
            if current is None:
                return None
        return current

    def successors(self, r: Relation) -> dict[Relation, Relation]:
        """All ``r2 -> compose(r, r2)`` pairs defined for ``r``."""
        return {b: c for (a, b), c in self._table.items() if a == r}

    def targets(self) -> set[Relation]:
        return {rule.rhs for rule in self.rules}

    def dumps(self) -> str:
        return "".join(f"{rule}\n" for rule in sorted(self.rules))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "KnowledgeBase":
        rules = []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise RuleFileError(f"line {lineno}: expected 3 tab-separated fields, got {len(parts)}")
            try:
                rules.append(Rule(*(Relation.parse(p) for p in parts)))
            except UnknownRelationError as exc:
                raise RuleFileError(f"line {lineno}: {exc}") from None
        return cls(rules)

    @classmethod
    def load(cls, path) -> "KnowledgeBase":
        with open(path, encoding="utf-8") as fh:
            return cls.loads(fh.read())


@functools.lru_cache(maxsize=None)
def default_kb() -> KnowledgeBase:
    text = resources.files("relchain").joinpath("data/kinship_rules.tsv").read_text(encoding="utf-8")
    return KnowledgeBase.loads(text)


def compose(kb: KnowledgeBase, r1: Relation, r2: Relation) -> Relation | None:
    return kb.compose(r1, r2)


def resolve_chain(kb: KnowledgeBase, chain: Sequence[Relation]) -> Relation | None:
    return kb.resolve_chain(chain)


def validate_kb(kb: KnowledgeBase, tree=None) -> ValidationReport:
    """Check functionality, gender-swap closure and agreement with a family tree.

    ``tree`` defaults to the hand-built reference tree in ``relchain.family``.
    """
    from relchain.family import reference_tree

    report = ValidationReport()
    for (a, b), rhs in sorted(kb._conflicts.items()):
        report.functional.append(f"({a}, {b}) -> {', '.join(sorted(map(str, rhs)))}")
    for rule in sorted(kb.rules):
        swapped = rule.gender_swap()
        if swapped not in kb.rules:
            report.closure.append(f"{rule.lhs1} {rule.lhs2} -> {rule.rhs} lacks {swapped.lhs1} {swapped.lhs2} -> {swapped.rhs}")
    tree = reference_tree() if tree is None else tree
    for rule in sorted(kb.rules):
        for x, y, z, found in tree.embeddings(rule.lhs1, rule.lhs2):
            if found != rule.rhs:
                got = "self" if z == x else (found or "no relation")
                report.oracle.append(f"{rule.lhs1} {rule.lhs2} -> {rule.rhs}: {tree.name(x)}/{tree.name(y)}/{tree.name(z)} gives {got}")
                break
    return report
