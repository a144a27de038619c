"""Applied pi-calculus processes and their labelled transitions.

An :class:`ExtendedProcess` is a running system: the frame of messages
the attacker has seen, the names it does not know, and a multiset of
parallel components.  :func:`transitions` lists what the system can do
next.  Every step is visible to the attacker: an output on a channel the
attacker can name adds a fresh alias to the frame, and an input consumes
a message the attacker computes with a recipe over that frame.

Fresh names follow a fixed scheme so that states reached along different
interleavings coincide: binders named ``c`` and ``ch`` are numbered in
creation order (``c_1``, ``ch_2``), and creating a session channel
``ch_l`` suffixes every binder and alias tag inside that session with
``_l``.  Output aliases take the tag of the output (``pk_s``, ``u_l``,
``v_l``, ``w_l``) and fall back to ``o_1``, ``o_2`` ... otherwise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Iterable, Iterator, Union

from .frames import Frame, PrivateNameUse, apply
from .terms import G, Term, Theory, eq_mod, free_vars, normalize, smul, substitute, to_sexpr, var

NUMBERED_BINDERS = ("c", "ch")
SESSION_BINDER = "ch"


class NonFreshInput(PrivateNameUse):
    """An input recipe mentions a private name."""


# ---------------------------------------------------------------------------
# Process syntax


class _Node:
    """Structural hash computed once; processes are compared very often
    while exploring."""

    def __hash__(self):
        try:
            return object.__getattribute__(self, "_hash")
        except AttributeError:
            value = hash((type(self).__name__,) + tuple(getattr(self, f) for f in self.__dataclass_fields__))
            object.__setattr__(self, "_hash", value)
            return value

    def __eq__(self, other):
        if self is other:
            return True
        if type(self) is not type(other) or hash(self) != hash(other):
            return False
        return all(getattr(self, f) == getattr(other, f) for f in self.__dataclass_fields__)


@dataclass(frozen=True, eq=False)
class Nil(_Node):
    def __str__(self):
        return "0"


@dataclass(frozen=True, eq=False)
class Send(_Node):
    chan: Term
    msg: Term
    cont: "Process" = Nil()
    tag: str | None = None

    def __str__(self):
        return f"out({self.chan}, {self.msg}).{self.cont}"


@dataclass(frozen=True, eq=False)
class Recv(_Node):
    chan: Term
    binder: str
    cont: "Process" = Nil()

    def __str__(self):
        return f"in({self.chan}, {self.binder}).{self.cont}"


@dataclass(frozen=True, eq=False)
class New(_Node):
    binder: str
    cont: "Process"

    def __str__(self):
        return f"new {self.binder}.{self.cont}"


@dataclass(frozen=True, eq=False)
class Par(_Node):
    left: "Process"
    right: "Process"

    def __str__(self):
        return f"({self.left} | {self.right})"


@dataclass(frozen=True, eq=False)
class Bang(_Node):
    body: "Process"

    def __str__(self):
        return f"!{self.body}"


@dataclass(frozen=True, eq=False)
class Match(_Node):
    lhs: Term
    rhs: Term
    cont: "Process"

    def __str__(self):
        return f"if {self.lhs} = {self.rhs} then {self.cont}"


Process = Union[Nil, Send, Recv, New, Par, Bang, Match]


def par(*procs: Process) -> Process:
    items = [p for p in procs if not isinstance(p, Nil)]
    if not items:
        return Nil()
    out = items[-1]
    for p in reversed(items[:-1]):
        out = Par(p, out)
    return out


def news(names: Iterable[str], proc: Process) -> Process:
    for n in reversed(list(names)):
        proc = New(n, proc)
    return proc


def subst(p: Process, mapping: dict[str, Term]) -> Process:
    """Capture-avoiding substitution of free variables (binders shadow)."""
    if not mapping or isinstance(p, Nil) or free_names(p).isdisjoint(mapping):
        return p
    if isinstance(p, Send):
        return Send(substitute(p.chan, mapping), substitute(p.msg, mapping), subst(p.cont, mapping), p.tag)
    if isinstance(p, Recv):
        inner = {k: v for k, v in mapping.items() if k != p.binder}
        return Recv(substitute(p.chan, mapping), p.binder, subst(p.cont, inner))
    if isinstance(p, New):
        inner = {k: v for k, v in mapping.items() if k != p.binder}
        return New(p.binder, subst(p.cont, inner))
    if isinstance(p, Par):
        return Par(subst(p.left, mapping), subst(p.right, mapping))
    if isinstance(p, Bang):
        return Bang(subst(p.body, mapping))
    if isinstance(p, Match):
        return Match(substitute(p.lhs, mapping), substitute(p.rhs, mapping), subst(p.cont, mapping))
    raise TypeError(f"not a process: {p!r}")


@lru_cache(maxsize=65_536)
def suffix_binders(p: Process, suffix: str) -> Process:
    """Rename every binder and alias tag inside ``p`` by appending ``suffix``."""
    if isinstance(p, Nil):
        return p
    if isinstance(p, Send):
        tag = p.tag + suffix if p.tag else None
        return Send(p.chan, p.msg, suffix_binders(p.cont, suffix), tag)
    if isinstance(p, (Recv, New)):
        fresh = p.binder + suffix
        body = suffix_binders(subst(p.cont, {p.binder: var(fresh)}), suffix)
        return Recv(p.chan, fresh, body) if isinstance(p, Recv) else New(fresh, body)
    if isinstance(p, Par):
        return Par(suffix_binders(p.left, suffix), suffix_binders(p.right, suffix))
    if isinstance(p, Bang):
        return Bang(suffix_binders(p.body, suffix))
    if isinstance(p, Match):
        return Match(p.lhs, p.rhs, suffix_binders(p.cont, suffix))
    raise TypeError(f"not a process: {p!r}")


def free_names(p: Process) -> frozenset[str]:
    try:
        return object.__getattribute__(p, "_free")
    except AttributeError:
        pass
    names = _free_names(p)
    object.__setattr__(p, "_free", names)
    return names


def _free_names(p: Process) -> frozenset[str]:
    if isinstance(p, Nil):
        return frozenset()
    if isinstance(p, Send):
        return free_vars(p.chan) | free_vars(p.msg) | free_names(p.cont)
    if isinstance(p, Recv):
        return free_vars(p.chan) | (free_names(p.cont) - {p.binder})
    if isinstance(p, New):
        return free_names(p.cont) - {p.binder}
    if isinstance(p, Par):
        return free_names(p.left) | free_names(p.right)
    if isinstance(p, Bang):
        return free_names(p.body)
    if isinstance(p, Match):
        return free_vars(p.lhs) | free_vars(p.rhs) | free_names(p.cont)
    raise TypeError(f"not a process: {p!r}")


def components(p: Process) -> list[Process]:
    if isinstance(p, Nil):
        return []
    if isinstance(p, Par):
        return components(p.left) + components(p.right)
    return [p]


def visible_actions(p: Process) -> int:
    """Number of input and output prefixes in ``p``."""
    if isinstance(p, (Send, Recv)):
        return 1 + visible_actions(p.cont)
    if isinstance(p, (New, Match)):
        return visible_actions(p.cont)
    if isinstance(p, Par):
        return visible_actions(p.left) + visible_actions(p.right)
    if isinstance(p, Bang):
        return visible_actions(p.body)
    return 0


def alpha_key(p: Process, th: Theory = Theory.E) -> str:
    """Text of ``p`` with binders renamed canonically and terms normalized,
    so that alpha-equivalent processes share the same key."""
    counter = [0]

    def go(q: Process, env: dict[str, Term]) -> str:
        def t(m: Term) -> str:
            return to_sexpr(normalize(substitute(m, env), th))

        def bind(name: str) -> dict[str, Term]:
            counter[0] += 1
            return {**env, name: var(f"#{counter[0]}")}

        if isinstance(q, Nil):
            return "0"
        if isinstance(q, Send):
            return f"out({t(q.chan)},{t(q.msg)}).{go(q.cont, env)}"
        if isinstance(q, Recv):
            inner = bind(q.binder)
            return f"in({t(q.chan)},{inner[q.binder]}).{go(q.cont, inner)}"
        if isinstance(q, New):
            inner = bind(q.binder)
            return f"new {inner[q.binder]}.{go(q.cont, inner)}"
        if isinstance(q, Par):
            return "(" + " | ".join(sorted(go(c, env) for c in components(q))) + ")"
        if isinstance(q, Bang):
            return f"!{go(q.body, env)}"
        if isinstance(q, Match):
            return f"[{t(q.lhs)}={t(q.rhs)}].{go(q.cont, env)}"
        raise TypeError(f"not a process: {q!r}")

    return go(p, {})


# ---------------------------------------------------------------------------
# Labels and states


@dataclass(frozen=True)
class Out:
    chan: Term
    alias: str

    def to_json(self) -> dict:
        return {"kind": "out", "chan": to_sexpr(self.chan), "alias": self.alias}

    def __str__(self):
        return f"out {self.chan} ({self.alias})"


@dataclass(frozen=True)
class In:
    chan: Term
    payload: Term

    def to_json(self) -> dict:
        return {"kind": "in", "chan": to_sexpr(self.chan), "payload": to_sexpr(self.payload)}

    def __str__(self):
        return f"in {self.chan} {self.payload}"


@dataclass(frozen=True)
class Tau:
    def to_json(self) -> dict:
        return {"kind": "tau"}


Label = Union[Out, In, Tau]


def label_from_json(data: dict) -> Label:
    from .terms import parse_term
    kind = data.get("kind")
    if kind == "out":
        return Out(parse_term(data["chan"]), data["alias"])
    if kind == "in":
        return In(parse_term(data["chan"]), parse_term(data["payload"]))
    if kind == "tau":
        return Tau()
    raise ValueError(f"unknown label kind {kind!r}")


@dataclass(frozen=True, eq=False)
class ExtendedProcess(_Node):
    """Private names and frame (together in ``frame``) plus the body."""

    frame: Frame
    parts: tuple[Process, ...]
    counters: tuple[tuple[str, int], ...] = ()

    @property
    def private(self) -> frozenset[str]:
        return self.frame.private

    @property
    def body(self) -> Process:
        return par(*self.parts)

    def counter(self, base: str) -> int:
        return dict(self.counters).get(base, 0)

    def key(self) -> tuple:
        """Hashable identity insensitive to the order of parallel parts."""
        entries = tuple(sorted(self.frame.entries, key=lambda e: e[0]))
        return (self.frame.private, entries, tuple(sorted(map(hash, self.parts))),
                frozenset(_multiset(self.parts).items()), self.counters)

    def __str__(self):
        names = ",".join(sorted(self.private))
        fr = ", ".join(f"{a}->{t}" for a, t in self.frame.entries)
        return f"new {names}.({{{fr}}} | {self.body})"


def _multiset(items) -> dict:
    out: dict = {}
    for x in items:
        out[x] = out.get(x, 0) + 1
    return out


def initial_state(p: Process, frame: Frame | None = None) -> ExtendedProcess:
    return ExtendedProcess(frame or Frame(), tuple(components(p)))


# ---------------------------------------------------------------------------
# Transitions


@dataclass
class _Site:
    kind: str
    chan: Term
    msg: Term | None
    binder: str | None
    cont: Process
    rest: list[Process]
    names: list[str]
    counters: dict[str, int] | None  # None: the state's counters are unchanged
    tag: str | None = None


class _Namer:
    def __init__(self, state: ExtendedProcess):
        self.used = set(state.private) | set(state.frame.domain)
        for _, t in state.frame.entries:
            self.used |= free_vars(t)
        for p in state.parts:
            self.used |= free_names(p)
        self.base = dict(state.counters)


def _sites(p: Process, namer: _Namer, counters: dict[str, int], th: Theory,
           names: list[str]) -> Iterator[_Site]:
    if isinstance(p, Send):
        yield _Site("out", normalize(p.chan, th), p.msg, None, p.cont, [], list(names), dict(counters), p.tag)
    elif isinstance(p, Recv):
        yield _Site("in", normalize(p.chan, th), None, p.binder, p.cont, [], list(names), dict(counters))
    elif isinstance(p, Match):
        if eq_mod(p.lhs, p.rhs, th):
            yield from _sites(p.cont, namer, counters, th, names)
    elif isinstance(p, New):
        counters = dict(counters)
        taken = namer.used | set(names)
        if p.binder in NUMBERED_BINDERS:
            n = counters.get(p.binder, 0) + 1
            while f"{p.binder}_{n}" in taken:
                n += 1
            counters[p.binder] = n
            fresh = f"{p.binder}_{n}"
        else:
            fresh, n = p.binder, 1
            while fresh in taken:
                n += 1
                fresh = f"{p.binder}_{n}"
        body = subst(p.cont, {p.binder: var(fresh)})
        if p.binder == SESSION_BINDER:
            body = suffix_binders(body, fresh[len(SESSION_BINDER):])
        yield from _sites(body, namer, counters, th, names + [fresh])
    elif isinstance(p, Par):
        for site in _sites(p.left, namer, counters, th, names):
            site.rest.append(p.right)
            yield site
        for site in _sites(p.right, namer, counters, th, names):
            site.rest.insert(0, p.left)
            yield site
    elif isinstance(p, Bang):
        for site in _sites(p.body, namer, counters, th, names):
            site.rest.insert(0, p)
            yield site


def channel_recipe(chan: Term, frame: Frame, th: Theory = Theory.E) -> Term | None:
    """The recipe the attacker uses to name a channel, if any."""
    if chan.op == "var" and chan.name not in frame.private:
        return chan
    if not chan.args and chan.op != "var":
        return chan
    for alias, value in frame.entries:
        if normalize(value, th) == chan:
            return var(alias)
    return None


def _fresh_alias(tag: str | None, frame: Frame) -> str:
    if tag and tag not in frame:
        return tag
    n = 1
    while f"o_{n}" in frame:
        n += 1
    return f"o_{n}"


def _after(state: ExtendedProcess, index: int, site: _Site, cont: Process,
           frame: Frame) -> ExtendedProcess:
    parts = list(state.parts[:index]) + [q for r in site.rest for q in components(r)]
    parts += components(cont) + list(state.parts[index + 1:])
    counters = state.counters if site.counters is None else tuple(sorted(site.counters.items()))
    return ExtendedProcess(frame, tuple(parts), counters)


def _bump(counters: tuple[tuple[str, int], ...], base: str) -> tuple[tuple[str, int], ...]:
    d = dict(counters)
    d[base] = d.get(base, 0) + 1
    return tuple(sorted(d.items()))


_SITE_CACHE: dict[tuple, list[tuple[int, _Site]]] = {}
_PART_CACHE: dict[tuple, list[_Site]] = {}


def _binder_free(p: Process) -> bool:
    # No restriction or replication before the first action: the sites do
    # not depend on the surrounding state.
    while isinstance(p, Match):
        p = p.cont
    return isinstance(p, (Send, Recv, Nil))


def _part_sites(part: Process, state: ExtendedProcess, namer_box: list, th: Theory) -> list[_Site]:
    if _binder_free(part):
        key = (part, th)
        hit = _PART_CACHE.get(key)
        if hit is None:
            hit = list(_sites(part, None, {}, th, []))
            for site in hit:
                site.counters = None
            if len(_PART_CACHE) > 200_000:
                _PART_CACHE.clear()
            _PART_CACHE[key] = hit
        return hit
    if not namer_box:
        namer_box.append(_Namer(state))
    namer = namer_box[0]
    # Unfolding a replication is costly and its fresh names depend only on
    # the counters, unless they happen to clash with names in use.
    key = (part, th, state.counters)
    hit = _PART_CACHE.get(key)
    if hit is None or any(not namer.used.isdisjoint(site.names) for site in hit):
        hit = list(_sites(part, namer, dict(state.counters), th, []))
        _PART_CACHE[key] = hit
    return hit


def _all_sites(state: ExtendedProcess, th: Theory) -> list[tuple[int, _Site]]:
    key = (state, th)
    hit = _SITE_CACHE.get(key)
    if hit is None:
        namer_box: list = []
        hit = [(i, site) for i, part in enumerate(state.parts)
               for site in _part_sites(part, state, namer_box, th)]
        if len(_SITE_CACHE) > 200_000:
            _SITE_CACHE.clear()
        _SITE_CACHE[key] = hit
    return hit


def _fire_out(state, i, site, alias, th):
    frame = Frame(state.private | set(site.names), state.frame.entries + ((alias, normalize(site.msg, th)),))
    return _after(state, i, site, site.cont, frame)


def _fire_in(state, i, site, payload, th):
    leaked = free_vars(payload) & (state.private | set(site.names))
    if leaked:
        raise NonFreshInput(f"input recipe {to_sexpr(payload)} mentions private names {sorted(leaked)}")
    value = apply(payload, state.frame, th)
    frame = Frame(state.private | set(site.names), state.frame.entries)
    nxt = _after(state, i, site, subst(site.cont, {site.binder: value}), frame)
    return replace(nxt, counters=_bump(nxt.counters, "atk"))


def transitions(a: ExtendedProcess, inputs: Iterable[Term] = (), th: Theory = Theory.E,
                out_alias: str | None = None) -> list[tuple[Label, ExtendedProcess]]:
    """Every labelled successor of ``a``.

    Inputs are instantiated with each recipe in ``inputs``.  Only actions on
    channels the attacker can name produce labels.
    """
    inputs = list(inputs)
    out: list[tuple[Label, ExtendedProcess]] = []
    for i, site in _all_sites(a, th):
        chan = channel_recipe(site.chan, a.frame, th)
        if chan is None:
            continue
        if site.kind == "out":
            alias = out_alias or _fresh_alias(site.tag, a.frame)
            out.append((Out(chan, alias), _fire_out(a, i, site, alias, th)))
        else:
            fresh, counters = _fresh_input_name(a, chan)
            for recipe in inputs:
                payload = substitute(recipe, {FRESH_INPUT: fresh})
                nxt = _fire_in(a, i, site, payload, th)
                out.append((In(chan, payload), replace(nxt, counters=counters(nxt))))
    return out


def _fresh_input_name(a: ExtendedProcess, chan: Term):
    # Named after the channel so that the same input sent in a different
    # interleaving yields the same state.
    if chan.op != "var":
        return var(f"atk_{a.counter('atk') + 1}"), lambda s: s.counters
    base = f"atk@{chan.name}"
    k = a.counter(base) + 1
    return var(f"atk_{chan.name}_{k}"), lambda s: _bump(s.counters, base)


def successors(a: ExtendedProcess, label: Label, th: Theory = Theory.E) -> list[ExtendedProcess]:
    """States reachable from ``a`` by exactly the given label."""
    if isinstance(label, Tau):
        return []
    target = apply(label.chan, a.frame, th)
    out = []
    for i, site in _all_sites(a, th):
        if site.chan != target:
            continue
        if isinstance(label, Out) and site.kind == "out":
            if label.alias in a.frame:
                raise ValueError(f"alias {label.alias} is already bound")
            out.append(_fire_out(a, i, site, label.alias, th))
        elif isinstance(label, In) and site.kind == "in":
            out.append(_fire_in(a, i, site, label.payload, th))
    return out


def enabled(a: ExtendedProcess, th: Theory = Theory.E) -> frozenset[tuple[str, Term]]:
    """Kinds of action available, as (direction, channel recipe) pairs."""
    found = set()
    for _, site in _all_sites(a, th):
        chan = channel_recipe(site.chan, a.frame, th)
        if chan is not None:
            found.add((site.kind, chan))
    return frozenset(found)


# ---------------------------------------------------------------------------
# Modal formulas


@dataclass(frozen=True)
class Eq:
    lhs: Term
    rhs: Term

    def __str__(self):
        return f"{self.lhs} = {self.rhs}"


@dataclass(frozen=True)
class Top:
    def __str__(self):
        return "true"


@dataclass(frozen=True)
class Diamond:
    label: Label
    inner: "Formula"

    def __str__(self):
        return f"<{self.label}>{self.inner}"


Formula = Union[Eq, Top, Diamond]


def diamonds(labels: Iterable[Label], inner: Formula) -> Formula:
    for lab in reversed(list(labels)):
        inner = Diamond(lab, inner)
    return inner


def check_formula(a: ExtendedProcess, f: Formula, th: Theory = Theory.E) -> bool:
    """Whether ``a`` satisfies the formula: some run along the labels
    reaches a state where the final equality holds."""
    if isinstance(f, Top):
        return True
    if isinstance(f, Eq):
        return apply(f.lhs, a.frame, th) == apply(f.rhs, a.frame, th)
    return any(check_formula(b, f.inner, th) for b in successors(a, f.label, th))


def formula_to_json(f: Formula) -> dict:
    path = []
    while isinstance(f, Diamond):
        path.append(f.label.to_json())
        f = f.inner
    test = None if isinstance(f, Top) else [to_sexpr(f.lhs), to_sexpr(f.rhs)]
    return {"path": path, "test": test}


def formula_from_json(data: dict) -> Formula:
    from .terms import parse_term
    test = data.get("test")
    inner: Formula = Top() if test is None else Eq(parse_term(test[0]), parse_term(test[1]))
    return diamonds([label_from_json(x) for x in data["path"]], inner)


# ---------------------------------------------------------------------------
# Exploration


def point_aliases(frame: Frame) -> list[str]:
    return [a for a, t in frame.entries if t.op == "smul"]


FRESH_INPUT = "atk_fresh"


def input_recipes(state: ExtendedProcess, depth: int, th: Theory = Theory.E) -> list[Term]:
    """A small family of input recipes, deduplicated by value.

    ``atk_fresh`` stands for a fresh attacker name; :func:`transitions`
    replaces it by a name unique to the receiving channel.

    Depth 0 offers a fresh attacker name and the generator.  Depth 1 adds
    a fresh multiple of the generator and the points already observed.
    Depth 2 adds fresh multiples of observed points and the observed
    ciphertexts.
    """
    atk = var(FRESH_INPUT)
    cands = [atk, G]
    if depth >= 1:
        cands.append(smul(atk, G))
        cands += [var(a) for a in point_aliases(state.frame)]
    if depth >= 2:
        cands += [smul(atk, var(a)) for a in point_aliases(state.frame)]
        cands += [var(a) for a, t in state.frame.entries if t.op == "enc"]
    seen, out = set(), []
    for r in cands:
        v = apply(r, state.frame, th)
        if v not in seen:
            seen.add(v)
            out.append(r)
    return out


@dataclass
class ExplorationNode:
    state: ExtendedProcess
    path: tuple[Label, ...] = ()
    children: list["ExplorationNode"] = field(default_factory=list)

    def walk(self) -> Iterator["ExplorationNode"]:
        yield self
        for c in self.children:
            yield from c.walk()

    def to_json(self) -> dict:
        return {"path": [lab.to_json() for lab in self.path], "frame": self.state.frame.to_json()}


def explore(a: ExtendedProcess, depth: int, input_depth: int = 1, th: Theory = Theory.E) -> ExplorationNode:
    """Tree of all runs of at most ``depth`` labelled steps."""
    if depth < 0 or input_depth < 0:
        raise ValueError("exploration bounds must be non-negative")
    root = ExplorationNode(a)
    frontier = [root]
    for _ in range(depth):
        nxt = []
        for node in frontier:
            for label, b in transitions(node.state, input_recipes(node.state, input_depth, th), th):
                child = ExplorationNode(b, node.path + (label,))
                node.children.append(child)
                nxt.append(child)
        frontier = nxt
    return root


def export_trace(root: ExplorationNode, path: str) -> int:
    """Write one JSON line per explored state; return the line count."""
    n = 0
    with open(path, "w") as fh:
        for node in root.walk():
            fh.write(json.dumps(node.to_json(), sort_keys=True) + "\n")
            n += 1
    return n
