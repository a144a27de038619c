"""Frames, recipe deduction and static equivalence.

A frame binds aliases (the attacker's handles on observed messages) to
messages, under a set of private names.  A *recipe* is a term built over
aliases and public names; applying it to a frame yields the message the
attacker computes.

Two routes decide static equivalence up to a recipe depth bound:

* :func:`static_equiv` first normalizes both frames (decrypting what can
  be decrypted, splitting pairs, recovering signed messages) and then
  looks for a test among the resulting recipes and the ways each known
  message can be rebuilt from the others.  A bounded constructor closure
  over the normalized recipes finishes the search when it fits in the
  work budget.
* :func:`brute_static_equiv` enumerates every recipe up to the bound with
  every function symbol, directly on the raw aliases.  It is slow and is
  kept as an independent oracle.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Iterator

from .terms import (
    AUTH, BINARY, G, UNARY, V, Term, Theory, build, check, dec, free_vars,
    fst, normalize, parse_term, pk, snd, substitute, to_sexpr, var,
)

PUBLIC_CONSTANTS = (G, V, AUTH)
ATTACKER_PREFIX = "atk_"


class PrivateNameUse(ValueError):
    """A recipe mentions a name the attacker does not know."""


class DomainMismatch(ValueError):
    """Two frames compared for equivalence bind different aliases."""


@dataclass(frozen=True)
class Frame:
    private: frozenset[str] = frozenset()
    entries: tuple[tuple[str, Term], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "private", frozenset(self.private))
        object.__setattr__(self, "entries", tuple(self.entries))
        aliases = [a for a, _ in self.entries]
        if len(set(aliases)) != len(aliases):
            raise ValueError(f"duplicate alias in frame: {aliases}")

    @property
    def domain(self) -> tuple[str, ...]:
        return tuple(a for a, _ in self.entries)

    def as_dict(self) -> dict[str, Term]:
        return dict(self.entries)

    def __getitem__(self, alias: str) -> Term:
        for a, t in self.entries:
            if a == alias:
                return t
        raise KeyError(alias)

    def __contains__(self, alias: str) -> bool:
        return any(a == alias for a, _ in self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def extend(self, alias: str, term: Term) -> "Frame":
        if alias in self:
            raise ValueError(f"alias {alias} already bound")
        return Frame(self.private, self.entries + ((alias, term),))

    def with_private(self, names: Iterable[str]) -> "Frame":
        return Frame(self.private | frozenset(names), self.entries)

    def public_names(self) -> frozenset[str]:
        names: set[str] = set()
        for _, t in self.entries:
            names |= free_vars(t)
        return frozenset(names - self.private)

    def map_terms(self, fn) -> "Frame":
        return Frame(self.private, tuple((a, fn(t)) for a, t in self.entries))

    def to_json(self) -> dict:
        return {
            "private": sorted(self.private),
            "entries": [{"alias": a, "term": to_sexpr(t)} for a, t in self.entries],
        }

    @classmethod
    def from_json(cls, data: dict) -> "Frame":
        try:
            private = data.get("private", [])
            entries = [(e["alias"], parse_term(e["term"])) for e in data["entries"]]
        except (KeyError, TypeError, AttributeError) as exc:
            raise ValueError(f"malformed frame object: {exc}") from None
        return cls(frozenset(private), tuple(entries))


def dumps_frame(f: Frame) -> str:
    return json.dumps(f.to_json(), sort_keys=True)


def apply(recipe: Term, f: Frame, th: Theory = Theory.E) -> Term:
    """Normal form of ``recipe`` with aliases replaced by frame entries."""
    leaked = free_vars(recipe) & f.private
    if leaked:
        raise PrivateNameUse(f"recipe {to_sexpr(recipe)} mentions private names {sorted(leaked)}")
    return normalize(substitute(recipe, f.as_dict()), th)


# ---------------------------------------------------------------------------
# Deduction


def _factors(t: Term) -> list[Term]:
    out = []
    while t.op == "mul":
        out.extend(_factors(t.args[0]))
        t = t.args[1]
    out.append(t)
    return out


def _balanced_product(parts: list[Term]) -> Term:
    if len(parts) == 1:
        return parts[0]
    mid = len(parts) // 2
    return Term("mul", (_balanced_product(parts[:mid]), _balanced_product(parts[mid:])))


def _sub_multiset(small: Counter, big: Counter) -> bool:
    return all(big[k] >= n for k, n in small.items())


class Knowledge:
    """Recipes known to evaluate to given messages, with goal directed
    search for recipes of further messages.

    ``depth`` in the search counts constructor applications above known
    recipes and public atoms.
    """

    COVER_LIMIT = 400

    def __init__(self, private: Iterable[str], th: Theory, pairs: Iterable[tuple[Term, Term]] = ()):
        self.private = frozenset(private)
        self.th = th
        self.pairs: list[tuple[Term, Term]] = []
        self.by_value: dict[Term, Term] = {}
        self._products_known: list[tuple[Counter, int, Term, Term]] = []
        self._by_base: dict[Term, list[tuple[Counter, Term]]] = {}
        self._leaves: set[Term] = set()
        self._memo: dict[tuple[Term, int], Term | None] = {}
        for r, t in pairs:
            self.add(r, t)

    def add(self, recipe: Term, value: Term) -> None:
        self.pairs.append((recipe, value))
        self._leaves.add(recipe)
        if value not in self.by_value:
            self.by_value[value] = recipe
            self._memo.clear()
            fs = Counter(_factors(value))
            self._products_known.append((fs, sum(fs.values()), value, recipe))
            if value.op == "smul":
                self._by_base.setdefault(value.args[1], []).append((Counter(_factors(value.args[0])), recipe))

    def is_public(self, t: Term) -> bool:
        if t.op == "var":
            return t.name not in self.private
        return t in PUBLIC_CONSTANTS

    def level(self, recipe: Term) -> int:
        """Constructor levels of ``recipe`` above known recipes."""
        if recipe in self._leaves or not recipe.args:
            return 0
        return 1 + max(self.level(a) for a in recipe.args)

    def deduce(self, target: Term, depth: int) -> Term | None:
        known = self.by_value.get(target)
        if known is not None:
            return known
        if self.is_public(target):
            return target
        if depth <= 0 or not target.args:
            return None
        key = (target, depth)
        if key in self._memo:
            return self._memo[key]
        self._memo[key] = None
        found = next(iter(self.constructions(target, depth, limit=1)), None)
        self._memo[key] = found
        return found

    def constructions(self, target: Term, depth: int, limit: int = 8) -> list[Term]:
        """Recipes for ``target`` whose top symbol is a constructor applied
        to deducible arguments (known recipes of ``target`` are not listed)."""
        if depth <= 0 or not target.args:
            return []
        op = target.op
        if op == "mul":
            found = self._products(_factors(target), depth, limit)
        elif op == "smul":
            found = self._points(target, depth, limit)
        else:
            kids = [self.deduce(a, depth - 1) for a in target.args]
            found = [Term(op, tuple(kids))] if all(k is not None for k in kids) else []
        return found[:limit]

    def _scalar(self, factors: list[Term], depth: int) -> Term | None:
        if len(factors) == 1:
            return self.deduce(factors[0], depth)
        return self.deduce(_sorted(factors), depth)

    def _products(self, factors: list[Term], depth: int, limit: int) -> list[Term]:
        need = Counter(factors)
        size = len(factors)
        parts: list[tuple[Counter, Term]] = []
        seen = set()
        for fs, n, value, recipe in self._products_known:
            if n < size and _sub_multiset(fs, need):
                parts.append((fs, recipe))
                seen.add(value)
        for f in need:
            if f in seen:
                continue
            r = self.deduce(f, depth - 1)
            if r is not None:
                parts.append((Counter([f]), r))
        parts.sort(key=lambda p: -sum(p[0].values()))
        out: list[Term] = []
        budget = [self.COVER_LIMIT]

        def cover(rest: Counter, chosen: list[Term], start: int):
            if len(out) >= limit or budget[0] <= 0:
                return
            budget[0] -= 1
            if not rest:
                recipe = _balanced_product(chosen)
                if self.level(recipe) <= depth and len(chosen) > 1:
                    out.append(recipe)
                return
            pivot = min(rest, key=Term.sort_key)
            for i in range(start, len(parts)):
                fs, r = parts[i]
                if fs[pivot] and _sub_multiset(fs, rest):
                    cover(rest - fs, chosen + [r], 0)

        cover(need, [], 0)
        return out

    def _points(self, target: Term, depth: int, limit: int) -> list[Term]:
        scalar, base = target.args
        need = Counter(_factors(scalar))
        out: list[Term] = []
        # scale a known multiple of the same base by the missing scalars
        for have, recipe in self._by_base.get(base, ()):
            if have != need and _sub_multiset(have, need):
                rest = need - have
                rs = self._scalar(list(rest.elements()), depth - 1)
                if rs is not None:
                    out.append(Term("smul", (rs, recipe)))
        # build the base and the whole scalar
        rb = self.deduce(base, depth - 1)
        if rb is not None:
            rs = self._scalar(_factors(scalar), depth - 1)
            if rs is not None:
                out.append(Term("smul", (rs, rb)))
        # sign an already scaled message
        if self.th is Theory.E and base.op == "sig":
            rk = self.deduce(base.args[0], depth - 1)
            if rk is not None:
                rm = self.deduce(build("smul", (scalar, base.args[1]), self.th), depth - 1)
                if rm is not None:
                    out.append(Term("sig", (rk, rm)))
        out.sort(key=lambda r: (self.level(r), r.size()))
        return out[:limit]


def _sorted(factors: list[Term]) -> Term:
    items = sorted(factors, key=Term.sort_key)
    out = items[-1]
    for f in reversed(items[:-1]):
        out = Term("mul", (f, out))
    return out


# ---------------------------------------------------------------------------
# Normalization


@dataclass
class NormalizedFrame:
    """Recipes with their values after saturation.

    ``entries`` is the normalized frame in order.  ``history`` holds every
    recipe that was an entry at some point, including those later
    replaced by a decomposition.
    """

    private: frozenset[str]
    entries: list[tuple[Term, Term]]
    history: list[tuple[Term, Term]] = field(default_factory=list)

    def knowledge(self, th: Theory) -> Knowledge:
        return Knowledge(self.private, th, self.entries + self.history)


def _signature_view(t: Term, th: Theory) -> tuple[Term, Term] | None:
    """(signing key, recovered message) if ``t`` is a signature."""
    if t.op == "sig":
        return t.args[0], t.args[1]
    if th is Theory.E and t.op == "smul" and t.args[1].op == "sig":
        inner = t.args[1]
        return inner.args[0], build("smul", (t.args[0], inner.args[1]), th)
    return None


@lru_cache(maxsize=50_000)
def normalize_frame(f: Frame, th: Theory = Theory.E, depth: int = 3) -> NormalizedFrame:
    """Saturate a frame into its normal form (cached; treat the result as
    read-only).

    Entries are repeatedly rewritten: pairs are split, ciphertexts whose
    key is deducible are decrypted, signatures whose signing key is
    deducible are opened, signatures whose public key is deducible gain
    a recovered-message entry, and deducible factors of products are
    added.  Added entries are placed before the entry they came from.
    """
    entries = [(var(a), normalize(t, th)) for a, t in f.entries]
    history = list(entries)
    opened: set[Term] = set()
    factored: set[Term] = set()
    changed = True
    while changed:
        changed = False
        kb = Knowledge(f.private, th, entries)
        out: list[tuple[Term, Term]] = []
        for recipe, value in entries:
            if value.op == "pair":
                new = [(fst(recipe), value.args[0]), (snd(recipe), value.args[1])]
                out.extend(new)
                history.extend(new)
                changed = True
                continue
            if value.op == "enc":
                rk = kb.deduce(value.args[1], depth)
                if rk is not None:
                    new = (dec(rk, recipe), value.args[0])
                    out.append(new)
                    history.append(new)
                    changed = True
                    continue
            view = _signature_view(value, th)
            if view is not None:
                key, msg = view
                rk = kb.deduce(key, depth)
                if rk is not None:
                    new = (check(pk(rk), recipe), msg)
                    out.append(new)
                    history.append(new)
                    changed = True
                    continue
                if recipe not in opened:
                    opened.add(recipe)
                    rpk = kb.deduce(build("pk", (key,), th), depth)
                    if rpk is not None:
                        new = (check(rpk, recipe), msg)
                        out.append(new)
                        history.append(new)
                        changed = True
            if value.op == "mul":
                for factor in dict.fromkeys(_factors(value)):
                    if factor in factored or factor in kb.by_value or kb.is_public(factor):
                        continue
                    rf = kb.deduce(factor, depth)
                    if rf is not None and free_vars(rf) & set(f.domain):
                        factored.add(factor)
                        new = (rf, factor)
                        out.append(new)
                        history.append(new)
                        kb.add(*new)
                        changed = True
            out.append((recipe, value))
        entries = out
    return NormalizedFrame(f.private, entries, _dedupe(history))


def _dedupe(pairs: list[tuple[Term, Term]]) -> list[tuple[Term, Term]]:
    seen, out = set(), []
    for r, t in pairs:
        if r not in seen:
            seen.add(r)
            out.append((r, t))
    return out


def find_recipe(target: Term, f: Frame, th: Theory = Theory.E, depth: int = 2) -> Term | None:
    """A recipe evaluating to ``target`` in ``f``, or None.

    The search builds at most ``depth`` constructor levels above the
    recipes of the normalized frame and public atoms.
    """
    nf = normalize_frame(f, th, max(depth, 1))
    return nf.knowledge(th).deduce(normalize(target, th), depth)


# ---------------------------------------------------------------------------
# Static equivalence


@dataclass(frozen=True)
class Equivalent:
    bound: int
    exhaustive: bool = True

    kind = "equivalent"


@dataclass(frozen=True)
class Distinguished:
    left: Term
    right: Term

    kind = "distinguished"

    def replay(self, a: Frame, b: Frame, th: Theory = Theory.E) -> tuple[bool, bool]:
        """Whether the test holds in each frame."""
        return (apply(self.left, a, th) == apply(self.right, a, th),
                apply(self.left, b, th) == apply(self.right, b, th))


def _check_domains(a: Frame, b: Frame) -> None:
    if set(a.domain) != set(b.domain):
        raise DomainMismatch(f"frames bind different aliases: {sorted(a.domain)} vs {sorted(b.domain)}")


def public_atoms(a: Frame, b: Frame, attacker: str = ATTACKER_PREFIX + "0") -> list[Term]:
    hidden = a.private | b.private
    names = sorted((a.public_names() | b.public_names()) - hidden)
    atoms = list(PUBLIC_CONSTANTS) + [var(n) for n in names]
    if attacker not in hidden and attacker not in names:
        atoms.append(var(attacker))
    return atoms


class _PairIndex:
    """Value pairs seen so far; reports the first asymmetric collision."""

    def __init__(self):
        self.left: dict[Term, tuple[Term, Term]] = {}
        self.right: dict[Term, tuple[Term, Term]] = {}
        self.seen: set[tuple[Term, Term]] = set()

    def add(self, recipe: Term, va: Term, vb: Term) -> tuple[bool, Distinguished | None]:
        if (va, vb) in self.seen:
            return False, None
        other = self.left.get(va)
        if other is not None and other[1] != vb:
            return False, Distinguished(other[0], recipe)
        other = self.right.get(vb)
        if other is not None and other[1] != va:
            return False, Distinguished(other[0], recipe)
        self.seen.add((va, vb))
        self.left[va] = (recipe, vb)
        self.right[vb] = (recipe, va)
        return True, None


def static_equiv(a: Frame, b: Frame, th: Theory = Theory.E, depth: int = 2,
                 budget: int = 60_000):
    """Decide whether no recipe test of depth at most ``depth`` separates
    the two frames.

    Returns :class:`Distinguished` with a test ``(M, N)`` that holds in
    exactly one frame, or :class:`Equivalent`.  ``Equivalent.exhaustive``
    is False when the closure phase ran out of ``budget`` and the verdict
    rests on the normalization based checks alone.
    """
    _check_domains(a, b)
    norm_a = normalize_frame(a, th, depth)
    norm_b = normalize_frame(b, th, depth)
    atoms: list[Term] = []
    seen: set[Term] = set()
    for r, _ in norm_a.history + norm_b.history:
        if r not in seen and r.depth <= depth:
            seen.add(r)
            atoms.append(r)
    for t in public_atoms(a, b):
        if t not in seen:
            seen.add(t)
            atoms.append(t)
    values = [(r, apply(r, a, th), apply(r, b, th)) for r in atoms]

    tests: list[Distinguished] = []
    index = _PairIndex()
    for r, va, vb in values:
        _, found = index.add(r, va, vb)
        if found is not None:
            tests.append(found)

    kb_a = Knowledge(a.private, th, [(r, va) for r, va, _ in values])
    kb_b = Knowledge(b.private, th, [(r, vb) for r, _, vb in values])
    for r, va, vb in values:
        for kb, mine, frame, theirs in ((kb_a, va, b, vb), (kb_b, vb, a, va)):
            for alt in kb.constructions(mine, depth):
                if alt.depth > depth:
                    continue
                if apply(alt, frame, th) != theirs:
                    tests.append(Distinguished(alt, r))
    tests = [t for t in tests if max(t.left.depth, t.right.depth) <= depth]
    if tests:
        return min(tests, key=lambda t: (max(t.left.depth, t.right.depth),
                                          t.left.size() + t.right.size()))
    return _closure(values, index, th, depth, budget)


def _candidates(pool, newest):
    for x in newest:
        yield "h", (x,)
    for x in newest:
        for y in pool:
            for op in ("mul", "smul", "pair", "sig", "enc"):
                yield op, (x, y)
                if y is not x and op != "mul":
                    yield op, (y, x)


def _closure(values, index: _PairIndex, th: Theory, depth: int, budget: int):
    """Constructor closure over the normalized recipes, by increasing depth."""
    layers: dict[int, list[tuple[Term, Term, Term]]] = {}
    for item in values:
        layers.setdefault(item[0].depth, []).append(item)
    work = 0
    for level in range(1, depth + 1):
        older = [x for d in range(level - 1) for x in layers.get(d, [])]
        newest = layers.get(level - 1, [])
        fresh = layers.setdefault(level, [])
        for op, args in _candidates(older + newest, newest):
            work += 1
            if work > budget:
                return Equivalent(depth, exhaustive=False)
            recipe = Term(op, tuple(x[0] for x in args))
            va = build(op, tuple(x[1] for x in args), th)
            vb = build(op, tuple(x[2] for x in args), th)
            added, found = index.add(recipe, va, vb)
            if found is not None:
                return found
            if added:
                fresh.append((recipe, va, vb))
    return Equivalent(depth, exhaustive=True)


def brute_static_equiv(a: Frame, b: Frame, th: Theory = Theory.E, depth: int = 2,
                       max_recipes: int = 3_000_000):
    """Exhaustive oracle: every recipe of depth at most ``depth`` over the
    raw aliases and public atoms, with every function symbol.

    Recipes with the same pair of values are interchangeable inside any
    larger recipe, so only one representative per value pair is kept.
    """
    _check_domains(a, b)
    da, db = a.as_dict(), b.as_dict()
    atoms = [var(x) for x in sorted(a.domain)] + public_atoms(a, b)
    index = _PairIndex()
    layer: list[tuple[Term, Term, Term]] = []
    for r in atoms:
        va = normalize(da[r.name], th) if r.op == "var" and r.name in da else r
        vb = normalize(db[r.name], th) if r.op == "var" and r.name in db else r
        added, found = index.add(r, va, vb)
        if found is not None:
            return found
        if added:
            layer.append((r, va, vb))
    everything = list(layer)
    count = len(everything)
    for _ in range(depth):
        fresh: list[tuple[Term, Term, Term]] = []

        def emit(op, args):
            recipe = Term(op, tuple(x[0] for x in args))
            va = build(op, tuple(x[1] for x in args), th)
            vb = build(op, tuple(x[2] for x in args), th)
            added, found = index.add(recipe, va, vb)
            if added:
                fresh.append((recipe, va, vb))
            return found

        older = everything[:len(everything) - len(layer)]
        for op in UNARY:
            for x in layer:
                found = emit(op, (x,))
                if found is not None:
                    return found
        for op in BINARY:
            for x in layer:
                for y in everything:
                    found = emit(op, (x, y))
                    if found is not None:
                        return found
                for y in older:
                    found = emit(op, (y, x))
                    if found is not None:
                        return found
            count += len(layer) * (len(everything) + len(older))
            if count > max_recipes:
                raise RuntimeError(f"brute force search exceeded {max_recipes} recipes")
        everything.extend(fresh)
        layer = fresh
    return Equivalent(depth, exhaustive=True)
