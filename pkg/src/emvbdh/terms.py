"""Symbolic messages and their canonical normal forms.

Messages are immutable trees.  Two equational theories are supported:
``Theory.E0`` (commutative products, scalar multiplication, pairing,
symmetric encryption, signatures with message recovery) and ``Theory.E``
which additionally lets a scalar pass through a signature, so that a
blinded certificate can be checked under a blinded public key.

Equality modulo a theory is decided by comparing canonical forms computed
bottom-up by :func:`normalize`:

* products are flattened, sorted and rebuilt as a right-nested chain;
* nested scalar multiplications are folded into one product of scalars;
* ``pk(k)`` is the point ``smul(k, g)``;
* under ``E`` a scalar inside a signed message is hoisted outside the
  signature, so that the signed message is never a scalar multiple;
* destructors reduce when their argument matches, and are kept verbatim
  otherwise.
"""

from __future__ import annotations

import enum
import re
from typing import Iterable, Iterator


class Theory(enum.Enum):
    E0 = "E0"
    E = "E"

    @classmethod
    def parse(cls, text: str) -> "Theory":
        try:
            return cls(text.strip())
        except ValueError:
            raise ValueError(f"unknown equational theory {text!r}") from None


CONSTANTS = ("g", "v", "auth")
UNARY = ("h", "pk", "fst", "snd")
BINARY = ("mul", "smul", "pair", "sig", "enc", "dec", "check")
DESTRUCTORS = ("dec", "check", "fst", "snd")
OPERATORS = UNARY + BINARY

# Ordering of head symbols used by the canonical term order.
_RANK = {op: i for i, op in enumerate(CONSTANTS + ("var",) + OPERATORS)}
_ARITY = {**{c: 0 for c in CONSTANTS}, **{u: 1 for u in UNARY}, **{b: 2 for b in BINARY}}
_IDENT = re.compile(r"^[A-Za-z_][A-Za-z0-9_'.@-]*$")


class Term:
    """An immutable message tree with structural equality and a total order."""

    __slots__ = ("op", "args", "name", "_hash", "_key", "_depth", "_fv")

    def __init__(self, op: str, args: tuple["Term", ...] = (), name: str | None = None):
        self.op = op
        self.args = args
        self.name = name
        self._hash = hash((op, name, args))
        self._key = None
        self._depth = None
        self._fv = None

    def __hash__(self) -> int:
        return self._hash

    def __eq__(self, other: object) -> bool:
        if self is other:
            return True
        if not isinstance(other, Term) or self._hash != other._hash:
            return False
        return self.op == other.op and self.name == other.name and self.args == other.args

    def __ne__(self, other: object) -> bool:
        return not self.__eq__(other)

    def sort_key(self) -> tuple:
        if self._key is None:
            self._key = (_RANK[self.op], self.name or "", tuple(a.sort_key() for a in self.args))
        return self._key

    def __lt__(self, other: "Term") -> bool:
        return self.sort_key() < other.sort_key()

    def __le__(self, other: "Term") -> bool:
        return self.sort_key() <= other.sort_key()

    def __gt__(self, other: "Term") -> bool:
        return self.sort_key() > other.sort_key()

    def __ge__(self, other: "Term") -> bool:
        return self.sort_key() >= other.sort_key()

    def __repr__(self) -> str:
        return to_sexpr(self)

    __str__ = __repr__

    @property
    def depth(self) -> int:
        """Height of the tree; atoms have depth 0."""
        if self._depth is None:
            self._depth = 1 + max(a.depth for a in self.args) if self.args else 0
        return self._depth

    def size(self) -> int:
        return 1 + sum(a.size() for a in self.args)

    def subterms(self) -> Iterator["Term"]:
        yield self
        for a in self.args:
            yield from a.subterms()


G = Term("g")
V = Term("v")
AUTH = Term("auth")


def var(name: str) -> Term:
    return Term("var", (), name)


def mul(left: Term, right: Term) -> Term:
    return Term("mul", (left, right))


def smul(scalar: Term, point: Term) -> Term:
    return Term("smul", (scalar, point))


def pair(left: Term, right: Term) -> Term:
    return Term("pair", (left, right))


def h(arg: Term) -> Term:
    return Term("h", (arg,))


def pk(key: Term) -> Term:
    return Term("pk", (key,))


def sig(key: Term, msg: Term) -> Term:
    return Term("sig", (key, msg))


def enc(msg: Term, key: Term) -> Term:
    return Term("enc", (msg, key))


def dec(key: Term, cipher: Term) -> Term:
    return Term("dec", (key, cipher))


def check(pubkey: Term, signed: Term) -> Term:
    return Term("check", (pubkey, signed))


def fst(arg: Term) -> Term:
    return Term("fst", (arg,))


def snd(arg: Term) -> Term:
    return Term("snd", (arg,))


def product(factors: Iterable[Term]) -> Term:
    """Right-nested product of the given factors in the order given."""
    items = list(factors)
    if not items:
        raise ValueError("empty product")
    out = items[-1]
    for f in reversed(items[:-1]):
        out = Term("mul", (f, out))
    return out


def make(op: str, args: tuple[Term, ...] = (), name: str | None = None) -> Term:
    """Build a term from a head symbol, checking its arity."""
    if op == "var":
        if not name:
            raise ValueError("a variable needs a name")
        return var(name)
    if op not in _ARITY:
        raise ValueError(f"unknown function symbol {op!r}")
    if len(args) != _ARITY[op]:
        raise ValueError(f"{op} expects {_ARITY[op]} arguments, got {len(args)}")
    if op in CONSTANTS:
        return {"g": G, "v": V, "auth": AUTH}[op]
    return Term(op, tuple(args))


# ---------------------------------------------------------------------------
# Normal forms


def _factors(t: Term) -> list[Term]:
    out = []
    while t.op == "mul":
        out.extend(_factors(t.args[0]))
        t = t.args[1]
    out.append(t)
    return out


def _sorted_product(factors: list[Term]) -> Term:
    factors.sort(key=Term.sort_key)
    return product(factors)


def build(op: str, args: tuple[Term, ...], th: Theory) -> Term:
    """Apply ``op`` to arguments that are already in normal form and
    return the normal form of the result."""
    if op == "mul":
        return _sorted_product(_factors(args[0]) + _factors(args[1]))
    if op == "smul":
        scalar, point = args
        if point.op == "smul":
            return Term("smul", (_sorted_product(_factors(scalar) + _factors(point.args[0])), point.args[1]))
        return Term("smul", (scalar, point))
    if op == "pk":
        return build("smul", (args[0], G), th)
    if op == "sig":
        key, msg = args
        if th is Theory.E and msg.op == "smul":
            return Term("smul", (msg.args[0], Term("sig", (key, msg.args[1]))))
        return Term("sig", args)
    if op == "dec":
        key, cipher = args
        if cipher.op == "enc" and cipher.args[1] == key:
            return cipher.args[0]
        return Term("dec", args)
    if op == "check":
        pub, signed = args
        if pub.op == "smul" and pub.args[1] == G:
            secret = pub.args[0]
            if signed.op == "sig" and signed.args[0] == secret:
                return signed.args[1]
            if th is Theory.E and signed.op == "smul":
                inner = signed.args[1]
                if inner.op == "sig" and inner.args[0] == secret:
                    return build("smul", (signed.args[0], inner.args[1]), th)
        return Term("check", args)
    if op == "fst":
        return args[0].args[0] if args[0].op == "pair" else Term("fst", args)
    if op == "snd":
        return args[0].args[1] if args[0].op == "pair" else Term("snd", args)
    return Term(op, args)


_CACHE: dict[Theory, dict[Term, Term]] = {Theory.E0: {}, Theory.E: {}}
_CACHE_LIMIT = 400_000


def normalize(m: Term, th: Theory = Theory.E) -> Term:
    """Canonical representative of ``m`` modulo ``th``.  Idempotent."""
    cache = _CACHE[th]
    hit = cache.get(m)
    if hit is not None:
        return hit
    if not m.args:
        out = m
    else:
        out = build(m.op, tuple(normalize(a, th) for a in m.args), th)
    if len(cache) > _CACHE_LIMIT:
        cache.clear()
    cache[m] = out
    cache[out] = out
    return out


def eq_mod(m: Term, n: Term, th: Theory = Theory.E) -> bool:
    return normalize(m, th) == normalize(n, th)


def classify_irreducible(m: Term, th: Theory = Theory.E) -> tuple[bool, bool]:
    """Return ``(m_irreducible, phi_irreducible)`` for the normal form of m.

    A term is m-irreducible when it is not a product and phi-irreducible
    when it is not a scalar multiple of some point.
    """
    nf = normalize(m, th)
    return nf.op != "mul", nf.op != "smul"


def m_factors(m: Term, th: Theory = Theory.E) -> tuple[Term, ...]:
    """Multiset of m-irreducible factors of the normal form, sorted."""
    return tuple(sorted(_factors(normalize(m, th)), key=Term.sort_key))


def free_vars(m: Term) -> frozenset[str]:
    if m._fv is None:
        if m.op == "var":
            m._fv = frozenset((m.name,))
        elif not m.args:
            m._fv = frozenset()
        else:
            m._fv = frozenset().union(*(free_vars(a) for a in m.args))
    return m._fv


def substitute(m: Term, mapping: dict[str, Term]) -> Term:
    """Replace variables by terms (no normalization)."""
    if not mapping:
        return m
    if m.op == "var":
        return mapping.get(m.name, m)
    if not m.args or free_vars(m).isdisjoint(mapping):
        return m
    new_args = tuple(substitute(a, mapping) for a in m.args)
    if all(x is y for x, y in zip(new_args, m.args)):
        return m
    return Term(m.op, new_args)


# ---------------------------------------------------------------------------
# Textual forms


def to_sexpr(t: Term) -> str:
    if t.op == "var":
        return t.name
    if not t.args:
        return t.op
    return "(" + t.op + " " + " ".join(to_sexpr(a) for a in t.args) + ")"


def pretty(t: Term) -> str:
    """Human oriented rendering: ``phi(a, pk(c))``, ``<a, b>``, ``a*b``."""
    if t.op == "var":
        return t.name
    if not t.args:
        return t.op
    if t.op == "pair":
        return f"<{pretty(t.args[0])}, {pretty(t.args[1])}>"
    if t.op == "mul":
        return "*".join(pretty(f) if f.op != "smul" else f"({pretty(f)})" for f in _factors(t))
    name = "phi" if t.op == "smul" else t.op
    return f"{name}(" + ", ".join(pretty(a) for a in t.args) + ")"


_TOKEN = re.compile(r"\s*(\(|\)|[^\s()]+)")


def _tokens(text: str) -> list[str]:
    pos, out = 0, []
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            raise ValueError(f"cannot tokenize term near {text[pos:pos + 20]!r}")
        out.append(m.group(1))
        pos = m.end()
    return out


def parse_term(text: str) -> Term:
    """Parse the s-expression syntax produced by :func:`to_sexpr`."""
    toks = _tokens(text)
    if not toks:
        raise ValueError("empty term")
    term, pos = _parse(toks, 0)
    if pos != len(toks):
        raise ValueError(f"trailing input after term: {' '.join(toks[pos:])!r}")
    return term


def _parse(toks: list[str], pos: int) -> tuple[Term, int]:
    tok = toks[pos]
    if tok == ")":
        raise ValueError("unexpected ')'")
    if tok != "(":
        if tok in CONSTANTS:
            return make(tok), pos + 1
        if tok in OPERATORS or not _IDENT.match(tok):
            raise ValueError(f"bad atom {tok!r}")
        return var(tok), pos + 1
    if pos + 1 >= len(toks):
        raise ValueError("unterminated term")
    op = toks[pos + 1]
    if op not in OPERATORS:
        raise ValueError(f"unknown function symbol {op!r}")
    pos += 2
    args = []
    while True:
        if pos >= len(toks):
            raise ValueError("unterminated term")
        if toks[pos] == ")":
            break
        arg, pos = _parse(toks, pos)
        args.append(arg)
    return make(op, tuple(args)), pos + 1
