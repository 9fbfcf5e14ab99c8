"""Ground-truth family trees and kinship read directly off them.

The tree model is monogamous: every child belongs to one married couple,
people who marry into the family may have no recorded parents, and nobody
marries a blood relative.  Under that model each ordered pair of people has
at most one label from the vocabulary, which makes the tree a brute-force
oracle for the rule table.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator

from relchain.kb import FEMALE, MALE, Relation, Rule

_BY_GENDER = {
    (kind, gender): Relation(name)
    for kind, m, f in [
        ("parent", "father", "mother"),
        ("child", "son", "daughter"),
        ("sibling", "brother", "sister"),
        ("grandparent", "grandfather", "grandmother"),
        ("grandchild", "grandson", "granddaughter"),
        ("spouse", "husband", "wife"),
        ("parent_sibling", "uncle", "aunt"),
        ("sibling_child", "nephew", "niece"),
        ("spouse_parent", "father-in-law", "mother-in-law"),
        ("child_spouse", "son-in-law", "daughter-in-law"),
    ]
    for gender, name in ((MALE, m), (FEMALE, f))
}


class KinshipConflict(ValueError):
    """Two people stand in more than one vocabulary relation."""


@dataclass
class FamilyTree:
    gender: dict[int, str] = field(default_factory=dict)
    parents: dict[int, tuple[int, int]] = field(default_factory=dict)
    spouse: dict[int, int] = field(default_factory=dict)
    names: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        self._cache: dict[int, dict[int, Relation]] = {}

    # -- construction ---------------------------------------------------
    def add_person(self, gender: str, name: str | None = None) -> int:
        pid = len(self.gender)
        self.gender[pid] = gender
        if name is not None:
            self.names[pid] = name
        self._cache.clear()
        return pid

    def marry(self, a: int, b: int) -> None:
        if a in self.spouse or b in self.spouse:
            raise ValueError("monogamous tree: person already married")
        if self.gender[a] == self.gender[b]:
            raise ValueError("spouses must have opposite genders")
        self.spouse[a] = b
        self.spouse[b] = a
        self._cache.clear()

    def add_child(self, a: int, b: int, gender: str, name: str | None = None) -> int:
        if self.spouse.get(a) != b:
            raise ValueError("children belong to a married couple")
        father, mother = (a, b) if self.gender[a] == MALE else (b, a)
        child = self.add_person(gender, name)
        self.parents[child] = (father, mother)
        return child

    # -- basic kinship ---------------------------------------------------
    def __len__(self):
        return len(self.gender)

    @property
    def people(self) -> list[int]:
        return sorted(self.gender)

    def name(self, pid: int) -> str:
        return self.names.get(pid, f"#{pid}")

    def children(self, x: int) -> set[int]:
        return {c for c, ps in self.parents.items() if x in ps}

    def parents_of(self, x: int) -> set[int]:
        return set(self.parents.get(x, ()))

    def siblings(self, x: int) -> set[int]:
        if x not in self.parents:
            return set()
        return {c for c, ps in self.parents.items() if ps == self.parents[x] and c != x}

    def _groups(self, x: int) -> dict[str, set[int]]:
        parents = self.parents_of(x)
        children = self.children(x)
        siblings = self.siblings(x)
        spouse = {self.spouse[x]} if x in self.spouse else set()
        return {
            "parent": parents,
            "child": children,
            "sibling": siblings,
            "spouse": spouse,
            "grandparent": set().union(*(self.parents_of(p) for p in parents)),
            "grandchild": set().union(*(self.children(c) for c in children)),
            "parent_sibling": set().union(*(self.siblings(p) for p in parents)),
            "sibling_child": set().union(*(self.children(s) for s in siblings)),
            "spouse_parent": set().union(*(self.parents_of(s) for s in spouse)),
            "child_spouse": {self.spouse[c] for c in children if c in self.spouse},
        }

    def labels(self, x: int, y: int) -> set[Relation]:
        """Every vocabulary label under which ``y`` is ``x``'s relative."""
        return {
            _BY_GENDER[kind, self.gender[y]]
            for kind, members in self._groups(x).items()
            if y in members and y != x
        }

    def relatives(self, x: int) -> dict[int, Relation]:
        """Map each labelled relative ``y`` of ``x`` to the label ``y`` holds."""
        if x not in self._cache:
            out: dict[int, Relation] = {}
            for kind, members in self._groups(x).items():
                for y in members:
                    if y == x:
                        continue
                    rel = _BY_GENDER[kind, self.gender[y]]
                    if out.get(y, rel) != rel:
                        raise KinshipConflict(f"{self.name(y)} is both {out[y]} and {rel} of {self.name(x)}")
                    out[y] = rel
            self._cache[x] = out
        return self._cache[x]

    def relation(self, x: int, y: int) -> Relation | None:
        return self.relatives(x).get(y)

    def edges(self) -> list[tuple[int, Relation, int]]:
        return [(x, r, y) for x in self.people for y, r in sorted(self.relatives(x).items())]

    def check(self) -> None:
        """Raise ``KinshipConflict`` if some pair carries two labels."""
        for x in self.people:
            self.relatives(x)

    # -- oracle queries --------------------------------------------------
    def embeddings(self, r1: Relation, r2: Relation) -> Iterator[tuple[int, int, int, Relation | None]]:
        """Yield ``(x, y, z, rel(x, z))`` for every walk ``x -r1-> y -r2-> z``.

        ``z`` may equal ``x``; the reported relation is then ``None``.
        """
        for x in self.people:
            for y, ra in self.relatives(x).items():
                if ra != r1:
                    continue
                for z, rb in self.relatives(y).items():
                    if rb == r2:
                        yield x, y, z, (None if z == x else self.relation(x, z))

    def simple_paths(self, max_len: int) -> Iterator[list[int]]:
        """All simple paths (as node lists) with 1..max_len edges."""
        def extend(path):
            yield path
            if len(path) - 1 >= max_len:
                return
            for nxt in self.relatives(path[-1]):
                if nxt not in path:
                    yield from extend(path + [nxt])

        for x in self.people:
            for path in extend([x]):
                if len(path) > 1:
                    yield path

    def path_relations(self, path: list[int]) -> list[Relation]:
        return [self.relation(a, b) for a, b in zip(path, path[1:])]


def composition_outcomes(trees: Iterable[FamilyTree]) -> dict[tuple[Relation, Relation], set]:
    """For each realised pair ``(r1, r2)`` collect every outcome seen.

    Outcomes are relations, ``None`` (no vocabulary label) or ``"self"``.
    """
    outcomes: dict[tuple[Relation, Relation], set] = {}
    for tree in trees:
        for x in tree.people:
            for y, r1 in tree.relatives(x).items():
                for z, r2 in tree.relatives(y).items():
                    seen = "self" if z == x else tree.relation(x, z)
                    outcomes.setdefault((r1, r2), set()).add(seen)
    return outcomes


def derive_rules(trees: Iterable[FamilyTree]) -> set[Rule]:
    """Rules whose outcome is a single relation across all given trees."""
    rules = set()
    for (a, b), seen in composition_outcomes(trees).items():
        if len(seen) == 1:
            (c,) = seen
            if isinstance(c, Relation):
                rules.add(Rule(a, b, c))
    return rules


def reference_tree() -> FamilyTree:
    """Hand-built four-generation tree with two intermarrying families.

    Generation 0 holds two founding couples; their children intermarry so that
    every in-law label is realised, and both genders appear in every
    generation.
    """
    t = FamilyTree()
    M, F = MALE, FEMALE
    # generation 0
    george = t.add_person(M, "George")
    mary = t.add_person(F, "Mary")
    henry = t.add_person(M, "Henry")
    alice = t.add_person(F, "Alice")
    t.marry(george, mary)
    t.marry(henry, alice)
    # generation 1
    john = t.add_child(george, mary, M, "John")
    kate = t.add_child(george, mary, F, "Kate")
    paul = t.add_child(george, mary, M, "Paul")
    t.add_child(george, mary, F, "Ruth")
    linda = t.add_child(henry, alice, F, "Linda")
    mark = t.add_child(henry, alice, M, "Mark")
    t.add_child(henry, alice, F, "Susan")
    tom = t.add_person(M, "Tom")
    nora = t.add_person(F, "Nora")
    eve = t.add_person(F, "Eve")
    t.marry(john, linda)
    t.marry(kate, tom)
    t.marry(paul, nora)
    t.marry(mark, eve)
    # generation 2
    adam = t.add_child(john, linda, M, "Adam")
    beth = t.add_child(john, linda, F, "Beth")
    t.add_child(john, linda, M, "Carl")
    t.add_child(kate, tom, F, "Dana")
    t.add_child(kate, tom, M, "Ed")
    t.add_child(kate, tom, F, "Hana")
    t.add_child(mark, eve, F, "Fay")
    t.add_child(paul, nora, M, "Gus")
    iris = t.add_person(F, "Iris")
    jack = t.add_person(M, "Jack")
    t.marry(adam, iris)
    t.marry(beth, jack)
    # generation 3
    t.add_child(adam, iris, M, "Leo")
    t.add_child(adam, iris, F, "Mia")
    t.add_child(beth, jack, M, "Ned")
    t.add_child(beth, jack, F, "Olga")
    t.add_child(beth, jack, F, "Pia")
    t.check()
    return t
