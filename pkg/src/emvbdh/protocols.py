"""Symbolic models of the blinded Diffie-Hellman card protocol.

Two variants are modelled.  In ``RFC`` the card reveals its blinding
factor and its static certificate inside the encrypted reply; in ``FIX``
it sends a blinded public key with a matching blinded certificate.

Two systems are compared for unlinkability: ``SPEC``, where every session
uses a brand new card, and ``IMPL``, where a card may run many sessions.
:func:`check_unlinkability_bounded` plays the bisimulation game between
them up to a number of sessions and cards.
"""

from __future__ import annotations

import enum
import random
from dataclasses import dataclass, field

from .calculus import (
    Bang, Diamond, Eq, ExtendedProcess, Formula, In, Match, New, Nil, Out, Process,
    Recv, Send, Top, alpha_key, check_formula, diamonds, enabled, initial_state,
    input_recipes, subst, successors, transitions,
)
from .frames import ATTACKER_PREFIX, Distinguished, Frame, apply, static_equiv
from .terms import (
    AUTH, G, Term, Theory, check, dec, enc, eq_mod, fst, h, mul, normalize, pair, pk,
    sig, smul, snd, substitute, var,
)

OUT = var("out")
CARD = var("card")


class Variant(enum.Enum):
    RFC = "RFC"
    FIX = "FIX"


class SystemKind(enum.Enum):
    SPEC = "spec"
    IMPL = "impl"


def parse_variant(text: str) -> Variant:
    try:
        return Variant(text.upper())
    except ValueError:
        raise ValueError(f"unknown protocol variant {text!r} (expected RFC or FIX)") from None


def parse_system(text: str) -> SystemKind:
    try:
        return SystemKind(text.lower())
    except ValueError:
        raise ValueError(f"unknown system {text!r} (expected spec or impl)") from None


# ---------------------------------------------------------------------------
# Role scripts


def card_reply(v: Variant, s: Term, c: Term, a: Term, y: Term) -> Term:
    """The encrypted third message of a card with blinding factor ``a``
    after receiving the terminal share ``y``."""
    key = h(smul(mul(a, c), y))
    cert = sig(s, pk(c))
    if v is Variant.RFC:
        return enc(pair(pair(a, pk(c)), pair(pk(c), cert)), key)
    return enc(pair(smul(a, pk(c)), smul(a, cert)), key)


def card_process(v: Variant, s: Term, c: Term, ch: Term) -> Process:
    a, y = var("a"), var("y")
    reply = Send(ch, card_reply(v, s, c, a, y), Nil(), "w")
    return New("a", Send(ch, smul(a, pk(c)), Recv(ch, "y", reply), "v"))


def terminal_process(v: Variant, s: Term, ch: Term) -> Process:
    t, z1, z2 = var("t"), var("z1"), var("z2")
    plain = dec(h(smul(t, z1)), z2)
    m1, m2 = fst(plain), snd(plain)
    accept = Send(ch, AUTH)
    if v is Variant.RFC:
        checks = Match(snd(m1), check(pk(s), snd(m2)), Match(smul(fst(m1), snd(m1)), z1, accept))
    else:
        checks = Match(m1, check(pk(s), m2), Match(m1, z1, accept))
    return New("t", Recv(ch, "z1", Send(ch, pk(t), Recv(ch, "z2", checks))))


def build_role(v: Variant, role: str) -> Process:
    """One session of a role, with free names ``s`` (authority key),
    ``c`` (card key, card only) and ``ch`` (session channel)."""
    if role == "card":
        return card_process(v, var("s"), var("c"), var("ch"))
    if role == "terminal":
        return terminal_process(v, var("s"), var("ch"))
    raise ValueError(f"unknown role {role!r} (expected card or terminal)")


def build_system(v: Variant, kind: SystemKind) -> ExtendedProcess:
    """Authority key published on ``out``, then cards announcing fresh
    session channels on ``card``.  In the spec system each session has its
    own card; in the impl system a card may run any number of sessions."""
    s, c, ch = var("s"), var("c"), var("ch")
    session = New("ch", Send(CARD, ch, card_process(v, s, c, ch), "u"))
    cards = Bang(New("c", session)) if kind is SystemKind.SPEC else Bang(New("c", Bang(session)))
    return initial_state(New("s", Send(OUT, pk(s), cards, "pk_s")))


def attack_formula() -> Formula:
    """Two sessions whose decrypted certificates coincide."""
    y1, y2 = var("y1"), var("y2")
    u1, u2 = var("u_1"), var("u_2")
    path = [
        Out(OUT, "pk_s"),
        Out(CARD, "u_1"), Out(u1, "v_1"), In(u1, smul(y1, G)), Out(u1, "w_1"),
        Out(CARD, "u_2"), Out(u2, "v_2"), In(u2, smul(y2, G)), Out(u2, "w_2"),
    ]
    cert1 = snd(dec(h(smul(y1, var("v_1"))), var("w_1")))
    cert2 = snd(dec(h(smul(y2, var("v_2"))), var("w_2")))
    return diamonds(path, Eq(cert1, cert2))


# ---------------------------------------------------------------------------
# Bookkeeping for the bisimulation game

STAGES = ("E", "F", "G", "H")  # started, key sent, share received, reply sent


@dataclass(frozen=True)
class GameState:
    """Progress of each session, the card serving it in the impl system,
    and the attacker's input recipe for it."""

    published: bool = False
    stages: tuple[str, ...] = ()
    cards: tuple[int, ...] = ()
    inputs: tuple[Term | None, ...] = ()

    @property
    def sessions(self) -> int:
        return len(self.stages)

    @property
    def card_count(self) -> int:
        return max(self.cards, default=0)

    def partition(self, stage: str) -> list[int]:
        return [i + 1 for i, st in enumerate(self.stages) if st == stage]

    def advance(self, label, card: int | None = None) -> "GameState":
        if isinstance(label, Out) and label.alias == "pk_s":
            return GameState(True, self.stages, self.cards, self.inputs)
        if isinstance(label, Out) and label.chan == CARD:
            return GameState(self.published, self.stages + ("E",), self.cards + (card,),
                             self.inputs + (None,))
        sess = int(label.chan.name.split("_")[-1]) - 1
        stages, inputs = list(self.stages), list(self.inputs)
        stages[sess] = STAGES[STAGES.index(stages[sess]) + 1]
        if isinstance(label, In):
            inputs[sess] = label.payload
        return GameState(self.published, tuple(stages), self.cards, tuple(inputs))


def _session_card(state: ExtendedProcess, session: int) -> int:
    """Card number serving a session, read from its announced channel."""
    ch = f"ch_{session}"
    for part in state.parts:
        from .calculus import free_names
        names = free_names(part)
        if ch in names:
            cards = [n for n in names if n.startswith("c_")]
            if cards:
                return int(cards[0].split("_")[1])
    raise ValueError(f"no live process for session {session}")


def relation_membership(pair_: tuple[ExtendedProcess, ExtendedProcess], g: GameState,
                        v: Variant = Variant.FIX, th: Theory = Theory.E) -> bool:
    """Whether a spec/impl state pair has exactly the shape prescribed by
    the game state: same private names, frames matching the expected
    messages up to the theory, and the expected parallel components."""
    spec_state, impl_state = pair_
    return (_matches(spec_state, _expected(g, v, SystemKind.SPEC, th), th)
            and _matches(impl_state, _expected(g, v, SystemKind.IMPL, th), th))


@dataclass
class _Shape:
    private: set[str]
    frame: dict[str, Term]
    parts: list[Process] = field(default_factory=list)


def _expected(g: GameState, v: Variant, kind: SystemKind, th: Theory) -> _Shape:
    s = var("s")
    if not g.published:
        proto = build_system(v, kind)
        return _Shape(set(), {}, list(proto.parts))

    def card_of(l: int) -> Term:
        return var(f"c_{l}") if kind is SystemKind.SPEC else var(f"c_{g.cards[l - 1]}")

    def reply(l: int, y: Term) -> Term:
        a, c = var(f"a_{l}"), card_of(l)
        key = h(smul(mul(a, c), y))
        if v is Variant.FIX:
            body = pair(smul(a, pk(c)), smul(a, sig(s, pk(c))))
        else:
            body = pair(pair(a, pk(c)), pair(pk(c), sig(s, pk(c))))
        return enc(body, key)

    private = {"s"}
    frame: dict[str, Term] = {"pk_s": pk(s)}
    parts: list[Process] = []
    for l in range(1, g.sessions + 1):
        stage = g.stages[l - 1]
        ch, a, c = var(f"ch_{l}"), var(f"a_{l}"), card_of(l)
        private |= {ch.name, c.name}
        frame[f"u_{l}"] = ch
        if stage != "E":
            private.add(a.name)
            frame[f"v_{l}"] = smul(a, pk(c))
        if stage == "E":
            y = var("y")
            parts.append(New(a.name, Send(ch, smul(a, pk(c)), Recv(ch, "y", Send(ch, reply(l, y))))))
        elif stage == "F":
            parts.append(Recv(ch, "y", Send(ch, reply(l, var("y")))))
    for l in range(1, g.sessions + 1):
        if g.stages[l - 1] in ("G", "H"):
            y_value = apply(g.inputs[l - 1], Frame(frozenset(private), tuple(frame.items())), th)
            if g.stages[l - 1] == "G":
                parts.append(Send(var(f"ch_{l}"), reply(l, y_value)))
            else:
                frame[f"w_{l}"] = reply(l, y_value)
    c, ch = var("c"), var("ch")
    session = New("ch", Send(CARD, ch, _card_template(v, s, c, ch)))
    if kind is SystemKind.SPEC:
        parts.append(Bang(New("c", session)))
    else:
        parts.append(Bang(New("c", Bang(session))))
        for d in range(1, g.card_count + 1):
            cd = var(f"c_{d}")
            parts.append(Bang(New("ch", Send(CARD, ch, _card_template(v, s, cd, ch)))))
    return _Shape(private, frame, parts)


def _card_template(v: Variant, s: Term, c: Term, ch: Term) -> Process:
    a, y = var("a"), var("y")
    key = h(smul(mul(a, c), y))
    if v is Variant.FIX:
        body = pair(smul(a, pk(c)), smul(a, sig(s, pk(c))))
    else:
        body = pair(pair(a, pk(c)), pair(pk(c), sig(s, pk(c))))
    return New("a", Send(ch, smul(a, pk(c)), Recv(ch, "y", Send(ch, enc(body, key)))))


def _matches(state: ExtendedProcess, shape: _Shape, th: Theory) -> bool:
    if set(state.private) != shape.private:
        return False
    actual = state.frame.as_dict()
    if set(actual) != set(shape.frame):
        return False
    if any(not eq_mod(actual[k], shape.frame[k], th) for k in actual):
        return False
    have = sorted(alpha_key(p, th) for p in state.parts)
    want = sorted(alpha_key(p, th) for p in shape.parts)
    return have == want


# ---------------------------------------------------------------------------
# Bounded unlinkability


@dataclass(frozen=True)
class NoAttackFound:
    sessions: int
    cards: int
    input_depth: int
    test_depth: int
    states_explored: int

    result = "no-attack"


@dataclass(frozen=True)
class Attack:
    formula: Formula
    satisfied_by: str | None
    states_explored: int
    reason: str = ""

    result = "attack"


class BudgetExceeded(RuntimeError):
    def __init__(self, states_explored: int, depth_reached: int):
        super().__init__(f"exploration budget exhausted after {states_explored} state pairs "
                         f"(complete up to {depth_reached} steps)")
        self.states_explored = states_explored
        self.depth_reached = depth_reached


def _is_new_session(label) -> bool:
    return isinstance(label, Out) and label.chan == CARD


def _sample_renaming(a: ExtendedProcess, b: ExtendedProcess, rng: random.Random) -> dict[str, Term]:
    """A substitution of attacker-chosen input names by public terms."""
    names = sorted(n for n in a.frame.public_names() | b.frame.public_names()
                   if n.startswith(ATTACKER_PREFIX))
    rho: dict[str, Term] = {}
    for n in names:
        if rng.random() < 0.6:
            choice = rng.randrange(4)
            if choice == 0:
                rho[n] = G
            elif choice == 1:
                rho[n] = h(var(f"{n}_r"))
            elif choice == 2:
                rho[n] = smul(var(f"{n}_r"), G)
            else:
                rho[n] = var(rng.choice(names))
    return rho


def _rename_path(path, rho: dict[str, Term]):
    return tuple(In(lab.chan, substitute(lab.payload, rho)) if isinstance(lab, In) else lab
                 for lab in path)


def _rename_state(a: ExtendedProcess, rho: dict[str, Term], th: Theory) -> ExtendedProcess:
    frame = a.frame.map_terms(lambda t: normalize(substitute(t, rho), th))
    return ExtendedProcess(frame, tuple(subst(p, rho) for p in a.parts), a.counters)


def _frame_key(f) -> tuple:
    return f.private, tuple(sorted(f.entries, key=lambda e: e[0]))


def check_unlinkability_bounded(v: Variant, sessions: int, cards: int, input_depth: int = 2,
                                test_depth: int = 4, rho_samples: int = 1, th: Theory = Theory.E,
                                seed: int = 0, max_pairs: int = 2_000_000,
                                equiv_budget: int = 0, track_relation: bool = False):
    """Play the bisimulation game between the spec and impl systems.

    The spec system is deterministic, so every impl state reached by a
    label path is paired with the unique spec state on that path.  Each
    pair must be statically equivalent up to ``test_depth`` and enable the
    same actions, also after sampled renamings of public names.  Paths are
    explored up to ``sessions`` sessions served by at most ``cards``
    cards, with attacker inputs drawn from :func:`input_recipes`.
    """
    if sessions < 1 or cards < 1:
        raise ValueError("need at least one session and one card")
    rng = random.Random(seed)
    spec0, impl0 = build_system(v, SystemKind.SPEC), build_system(v, SystemKind.IMPL)
    frontier = {spec0.key(): (spec0, (), {impl0.key(): (impl0, GameState())})}
    cache: dict[tuple, object] = {}
    explored = 0
    steps = 0
    relation_failures = 0

    def equivalent(x: ExtendedProcess, y: ExtendedProcess):
        key = (_frame_key(x.frame), _frame_key(y.frame))
        if key not in cache:
            cache[key] = static_equiv(x.frame, y.frame, th, test_depth, equiv_budget)
        return cache[key]

    def attack(path, inner, reason):
        formula = diamonds(path, inner)
        in_spec = check_formula(spec0, formula, th)
        in_impl = check_formula(impl0, formula, th)
        side = None if in_spec == in_impl else ("spec" if in_spec else "impl")
        return Attack(formula, side, explored, reason)

    while frontier:
        pairs = [(spec_state, path, impl_state, game)
                 for spec_state, path, impl_states in frontier.values()
                 for impl_state, game in impl_states.values()]
        for spec_state, path, impl_state, game in pairs:
            explored += 1
            if explored > max_pairs:
                raise BudgetExceeded(explored, steps)
            if track_relation and not relation_membership((spec_state, impl_state), game, v, th):
                relation_failures += 1
            verdict = equivalent(spec_state, impl_state)
            if isinstance(verdict, Distinguished):
                return attack(path, Eq(verdict.left, verdict.right), "frames distinguished")
            diff = enabled(impl_state, th) ^ enabled(spec_state, th)
            if diff:
                return attack(path, Top(), f"enabled actions differ: {sorted(map(str, diff))}")
        for spec_state, path, impl_state, game in pairs:
            for _ in range(rho_samples):
                rho = _sample_renaming(spec_state, impl_state, rng)
                if not rho:
                    continue
                sa, ia = _rename_state(spec_state, rho, th), _rename_state(impl_state, rho, th)
                verdict = static_equiv(sa.frame, ia.frame, th, test_depth, equiv_budget)
                if isinstance(verdict, Distinguished):
                    return attack(_rename_path(path, rho), Eq(verdict.left, verdict.right),
                                  "distinguished after renaming attacker inputs")
                if enabled(sa, th) != enabled(ia, th):
                    return attack(_rename_path(path, rho), Top(),
                                  "enabled actions differ after renaming attacker inputs")
        nxt: dict = {}
        for spec_state, path, impl_states in frontier.values():
            inputs = input_recipes(spec_state, input_depth, th)
            for label, spec_next in transitions(spec_state, inputs, th):
                if _is_new_session(label) and spec_state.counter("ch") >= sessions:
                    continue
                matched: dict = {}
                any_successor = False
                for impl_state, game in impl_states.values():
                    for impl_next in successors(impl_state, label, th):
                        any_successor = True
                        if impl_next.counter("c") > cards:
                            continue
                        card = None
                        if _is_new_session(label):
                            card = _session_card(impl_next, impl_next.counter("ch"))
                        matched[impl_next.key()] = (impl_next, game.advance(label, card))
                if not any_successor:
                    return attack(path + (label,), Top(), f"impl cannot follow {label}")
                key = spec_next.key()
                if key in nxt:
                    nxt[key][2].update(matched)
                else:
                    nxt[key] = (spec_next, path + (label,), matched)
        frontier = nxt
        steps += 1
    result = NoAttackFound(sessions, cards, input_depth, test_depth, explored)
    if track_relation:
        object.__setattr__(result, "relation_failures", relation_failures)
    return result
