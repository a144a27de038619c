"""Concrete card and terminal sessions over a pairing group.

The card holds a static key ``c`` and a certificate on ``c*g``.  A session
runs in three messages:

1. card -> terminal: blinded key ``a*pk_c``
2. terminal -> card: ephemeral share ``t*g``
3. card -> terminal: authenticated encryption under ``kdf(a*c*t*g)`` of
   the card's credentials.

In the RFC variant the credentials are the blinding factor, the static
key and the static certificate.  In the FIX variant they are the blinded
key and the blinded certificate only.
"""

from __future__ import annotations

import random
from functools import lru_cache
from dataclasses import dataclass, field
from typing import Sequence

from .frames import Distinguished, Frame, static_equiv
from .pairing import (
    Certificate, GroupParams, InvalidPoint, aead_decrypt, aead_encrypt, authority_key,
    blind, card_public_key, kdf, sign, verify,
)
from .protocols import Variant, card_reply
from .terms import G, Term, Theory, pk, smul, to_sexpr, var

TAMPER_MODES = ("sig", "key", "replay")


# ---------------------------------------------------------------------------
# Plaintext values with a self-delimiting encoding


@dataclass(frozen=True)
class Scalar:
    value: int


@dataclass(frozen=True)
class Point:
    value: object


@dataclass(frozen=True)
class Pair:
    left: object
    right: object


def encode_value(x, params: GroupParams) -> bytes:
    if isinstance(x, Scalar):
        body, tag = x.value.to_bytes(params.point_bytes, "big"), b"S"
    elif isinstance(x, Point):
        body, tag = params.encode(x.value), b"P"
    elif isinstance(x, Pair):
        body, tag = encode_value(x.left, params) + encode_value(x.right, params), b"T"
    else:
        raise TypeError(f"cannot encode {x!r}")
    return tag + len(body).to_bytes(2, "big") + body


def decode_value(data: bytes, params: GroupParams):
    value, rest = _decode(data, params)
    if rest:
        raise ValueError("trailing bytes after value")
    return value


def _decode(data: bytes, params: GroupParams):
    if len(data) < 3:
        raise ValueError("truncated value")
    tag, size = data[:1], int.from_bytes(data[1:3], "big")
    body, rest = data[3:3 + size], data[3 + size:]
    if len(body) != size:
        raise ValueError("truncated value")
    if tag == b"S":
        return Scalar(int.from_bytes(body, "big")), rest
    if tag == b"P":
        return Point(params.decode(body)), rest
    if tag == b"T":
        left, tail = _decode(body, params)
        right, tail = _decode(tail, params)
        if tail:
            raise ValueError("trailing bytes inside pair")
        return Pair(left, right), rest
    raise ValueError(f"unknown tag {tag!r}")


# ---------------------------------------------------------------------------
# Transcript events and outcomes


@dataclass(frozen=True)
class ChannelAdvert:
    role: str
    channel: str

    def to_json(self):
        return {"type": "advert", "role": self.role, "channel": self.channel}


@dataclass(frozen=True)
class Msg:
    direction: str  # "out" when the owner of the channel sends, "in" when it receives
    channel: str
    payload: bytes

    def to_json(self):
        return {"type": "msg", "direction": self.direction, "channel": self.channel,
                "payload": self.payload.hex()}


@dataclass(frozen=True)
class AuthEvent:
    channel: str

    def to_json(self):
        return {"type": "auth", "channel": self.channel}


def event_from_json(data: dict):
    kind = data.get("type")
    if kind == "advert":
        return ChannelAdvert(data["role"], data["channel"])
    if kind == "msg":
        return Msg(data["direction"], data["channel"], bytes.fromhex(data["payload"]))
    if kind == "auth":
        return AuthEvent(data["channel"])
    raise ValueError(f"unknown event type {kind!r}")


@dataclass(frozen=True)
class AuthOk:
    session_key: bytes


@dataclass(frozen=True)
class Abort:
    step: str


@dataclass
class Transcript:
    events: list = field(default_factory=list)
    outcome: object = None
    card_key: bytes | None = None
    terminal_key: bytes | None = None

    def to_json(self) -> list[dict]:
        return [e.to_json() for e in self.events]


# ---------------------------------------------------------------------------
# Parties


@dataclass
class Authority:
    params: GroupParams
    secret: int

    @property
    def public(self):
        return authority_key(self.secret, self.params)

    def issue(self, c: int) -> Certificate:
        return sign(self.secret, card_public_key(c, self.params), self.params)


class CardSession:
    def __init__(self, card: "Card", rng: random.Random):
        self.card = card
        self.rng = rng
        # A blinding factor is never reused by the same card; in a small
        # test group random draws would otherwise collide noticeably often.
        self.a = card.params.random_scalar(rng)
        while self.a in card.used_blinding:
            self.a = card.params.random_scalar(rng)
        card.used_blinding.add(self.a)
        self.key: bytes | None = None

    def first_message(self) -> bytes:
        p = self.card.params
        return p.encode(p.mul(self.a, self.card.cert.pk))

    def reply(self, share: bytes) -> bytes:
        p = self.card.params
        y = p.decode(share)
        self.key = kdf(p.mul(self.a * self.card.secret, y), p)
        cert = self.card.cert
        if self.card.variant is Variant.RFC:
            body = Pair(Pair(Scalar(self.a), Point(cert.pk)), Pair(Point(cert.pk), Point(cert.sig)))
        else:
            blinded = blind(cert, self.a, p)
            body = Pair(Point(blinded.pk), Point(blinded.sig))
        nonce = self.rng.getrandbits(96).to_bytes(12, "big")
        return aead_encrypt(self.key, encode_value(body, p), nonce)


@dataclass
class Card:
    params: GroupParams
    secret: int
    cert: Certificate
    variant: Variant
    used_blinding: set = field(default_factory=set)

    def session(self, rng: random.Random) -> CardSession:
        return CardSession(self, rng)


class TerminalSession:
    """Honest terminal; ``skip_checks`` models a faulty terminal that
    accepts whatever it decrypts (used to build counter-examples)."""

    def __init__(self, params: GroupParams, pk_s, variant: Variant, rng: random.Random,
                 skip_checks: bool = False, ephemeral: int | None = None):
        self.params = params
        self.pk_s = pk_s
        self.variant = variant
        self.t = ephemeral if ephemeral is not None else params.random_scalar(rng)
        self.skip_checks = skip_checks
        self.z1 = None
        self.key: bytes | None = None

    def receive_blinded_key(self, msg: bytes) -> bytes:
        p = self.params
        self.z1 = p.decode(msg)
        self.key = kdf(p.mul(self.t, self.z1), p)
        return p.encode(p.mul(self.t, p.g))

    def finish(self, blob: bytes):
        p = self.params
        plain = aead_decrypt(self.key, blob)
        if plain is None:
            return AuthOk(self.key) if self.skip_checks else Abort("decrypt")
        try:
            body = decode_value(plain, p)
            if self.variant is Variant.RFC:
                (a, pk_c), (_, sig_c) = (body.left.left, body.left.right), (body.right.left, body.right.right)
                cert = Certificate(pk_c.value, sig_c.value)
                blinded = p.mul(a.value, pk_c.value)
            else:
                cert = Certificate(body.left.value, body.right.value)
                blinded = body.left.value
        except (AttributeError, ValueError, InvalidPoint):
            return AuthOk(self.key) if self.skip_checks else Abort("decrypt")
        if self.skip_checks:
            return AuthOk(self.key)
        if not verify(cert, self.pk_s, p):
            return Abort("signature-check")
        if blinded != self.z1:
            return Abort("blinding-check")
        return AuthOk(self.key)


def _flip_bit(x: int, params: GroupParams, rng: random.Random) -> int:
    bits = list(range(params.order.bit_length()))
    rng.shuffle(bits)
    for b in bits:
        y = x ^ (1 << b)
        if y < params.order:
            return y
    raise ValueError("no in-range bit flip")


def _setup(params: GroupParams, variant: Variant, rng: random.Random, cards: int = 1):
    authority = Authority(params, params.random_scalar(rng))
    secrets: list[int] = []
    while len(secrets) < cards:
        c = params.random_scalar(rng)
        if c not in secrets:
            secrets.append(c)
    return authority, [Card(params, c, authority.issue(c), variant) for c in secrets]


# ---------------------------------------------------------------------------
# Handshakes


def _session_events(card_s: CardSession, term: TerminalSession, idx: int, tamper: str | None = None,
                    replay_blob: bytes | None = None, rng: random.Random | None = None):
    """Run one relayed session and return (events, outcome)."""
    ch_c, ch_t = f"card-{idx}", f"term-{idx}"
    p = term.params
    ev = [ChannelAdvert("card", ch_c), ChannelAdvert("terminal", ch_t)]
    m1 = card_s.first_message()
    ev.append(Msg("out", ch_c, m1))
    delivered = m1
    if tamper == "key":
        delivered = p.encode(p.mul(p.random_scalar(rng), p.g))
    ev.append(Msg("in", ch_t, delivered))
    m2 = term.receive_blinded_key(delivered)
    ev.append(Msg("out", ch_t, m2))
    ev.append(Msg("in", ch_c, m2))
    m3 = card_s.reply(m2)
    ev.append(Msg("out", ch_c, m3))
    delivered3 = m3
    if tamper == "replay" and replay_blob is not None:
        delivered3 = replay_blob
    elif tamper == "transit":
        flip = rng.randrange(len(m3) * 8)
        delivered3 = bytes(b ^ (1 << (flip % 8)) if i == flip // 8 else b for i, b in enumerate(m3))
    ev.append(Msg("in", ch_t, delivered3))
    outcome = term.finish(delivered3)
    if isinstance(outcome, AuthOk):
        ev.append(AuthEvent(ch_t))
    return ev, outcome


def run_handshake(variant: Variant, params: GroupParams, tamper: str | None = None,
                  seed: int = 0) -> Transcript:
    """One honest terminal talking to one card through a relay.

    ``tamper``: ``sig`` gives the card a certificate with one flipped bit,
    ``key`` makes the relay substitute its own share for the card's
    blinded key, ``replay`` delivers the third message of an earlier
    session of the same card instead of the fresh one.
    """
    if tamper not in (None, "none") + TAMPER_MODES:
        raise ValueError(f"unknown tamper mode {tamper!r}")
    tamper = None if tamper == "none" else tamper
    rng = random.Random(seed)
    authority, (card,) = _setup(params, variant, rng)
    replay_blob = None
    if tamper == "sig":
        card.cert = Certificate(card.cert.pk, _flip_bit(card.cert.sig, params, rng))
    if tamper == "replay":
        earlier = card.session(rng)
        probe = TerminalSession(params, authority.public, variant, rng)
        earlier.first_message()
        replay_blob = earlier.reply(probe.receive_blinded_key(earlier.first_message()))
    card_s = card.session(rng)
    term = TerminalSession(params, authority.public, variant, rng)
    events, outcome = _session_events(card_s, term, 1, tamper if tamper != "sig" else None,
                                      replay_blob, rng)
    return Transcript(events, outcome, card_s.key, term.key)


def honest_trace(variant: Variant, params: GroupParams, sessions: int = 3, cards: int = 2,
                 seed: int = 0) -> Transcript:
    """Several relayed sessions between random cards and fresh terminals,
    with their events interleaved at random."""
    rng = random.Random(seed)
    authority, deck = _setup(params, variant, rng, cards)
    queues = []
    for i in range(1, sessions + 1):
        card = rng.choice(deck)
        term = TerminalSession(params, authority.public, variant, rng)
        events, _ = _session_events(card.session(rng), term, i)
        queues.append(events)
    return Transcript(_interleave(queues, rng))


def _interleave(queues: list[list], rng: random.Random) -> list:
    queues = [list(q) for q in queues]
    out = []
    while any(queues):
        q = rng.choice([q for q in queues if q])
        out.append(q.pop(0))
    return out


def counter_trace(kind: str, variant: Variant, params: GroupParams, seed: int = 0) -> Transcript:
    """A trace in which a terminal accepts although authentication failed.

    ``sig``: the third message is corrupted in transit and a faulty
    terminal accepts it anyway.  ``key``: the relay substitutes the first
    message and a faulty terminal accepts.  ``replay``: a second terminal
    session reuses the first session's ephemeral, so the replayed card
    messages are accepted a second time.
    """
    rng = random.Random(seed)
    authority, (card,) = _setup(params, variant, rng)
    if kind in ("sig", "key"):
        term = TerminalSession(params, authority.public, variant, rng, skip_checks=True)
        tamper = "transit" if kind == "sig" else "key"
        events, _ = _session_events(card.session(rng), term, 1, tamper, None, rng)
        return Transcript(events)
    if kind == "replay":
        card_s = card.session(rng)
        first = TerminalSession(params, authority.public, variant, rng)
        events, _ = _session_events(card_s, first, 1)
        msgs = [e for e in events if isinstance(e, Msg) and e.channel == "card-1" and e.direction == "out"]
        second = TerminalSession(params, authority.public, variant, rng, ephemeral=first.t)
        ch_t = "term-2"
        events.append(ChannelAdvert("terminal", ch_t))
        events.append(Msg("in", ch_t, msgs[0].payload))
        events.append(Msg("out", ch_t, second.receive_blinded_key(msgs[0].payload)))
        events.append(Msg("in", ch_t, msgs[1].payload))
        if isinstance(second.finish(msgs[1].payload), AuthOk):
            events.append(AuthEvent(ch_t))
        return Transcript(events)
    raise ValueError(f"unknown counter-example kind {kind!r}")


# ---------------------------------------------------------------------------
# Injective agreement


@dataclass(frozen=True)
class Agreement:
    matching: tuple[tuple[int, tuple[int, int]], ...]  # (auth event index, (trace, advert index))


@dataclass(frozen=True)
class Violation:
    reason: str
    trace: int
    event: int


def _run_messages(events: Sequence, start: int, channel: str, pattern: tuple[str, ...], stop: int):
    """Indices and payloads of the first messages on ``channel`` after
    ``start`` (and before ``stop``) matching the direction pattern."""
    found = []
    for i in range(start + 1, stop):
        e = events[i]
        if isinstance(e, Msg) and e.channel == channel:
            if e.direction != pattern[len(found)]:
                return None
            found.append((i, e.payload))
            if len(found) == len(pattern):
                return found
    return None


def check_injective_agreement(traces: Sequence[Transcript | Sequence]):
    """Every terminal acceptance must be explained by its own card run.

    For an acceptance on terminal channel ``ch_t`` the terminal must have
    received ``M1``, sent ``u2`` and received ``M3`` on ``ch_t``, and some
    card run announced earlier must have sent ``M1``, received ``u2`` and
    sent ``M3`` in that order before the acceptance.  Distinct acceptances
    must be explained by distinct card runs.
    """
    matching = []
    for ti, trace in enumerate(traces):
        events = trace.events if isinstance(trace, Transcript) else list(trace)
        card_runs = [(i, e.channel) for i, e in enumerate(events)
                     if isinstance(e, ChannelAdvert) and e.role == "card"]
        adverts = {e.channel: i for i, e in enumerate(events)
                   if isinstance(e, ChannelAdvert) and e.role == "terminal"}
        options: dict[int, list[int]] = {}
        for x, e in enumerate(events):
            if not isinstance(e, AuthEvent):
                continue
            start = adverts.get(e.channel, -1)
            term = _run_messages(events, start, e.channel, ("in", "out", "in"), x)
            if term is None:
                return Violation("terminal accepted without a complete run", ti, x)
            (i, m1), (j, u2), (k, m3) = term
            options[x] = []
            for ci, (f, ch_c) in enumerate(card_runs):
                run = _run_messages(events, f, ch_c, ("out", "in", "out"), x)
                if run is None:
                    continue
                (i2, u1), (j2, m2), (k2, u3) = run
                if (u1, m2, u3) == (m1, u2, m3) and f < i2 < j2 < k2 < x:
                    options[x].append(ci)
            if not options[x]:
                return Violation("no matching card run", ti, x)
        assignment = _bipartite_match(options)
        for x in options:
            if x not in assignment:
                return Violation("injectivity: two acceptances map to one card run", ti, x)
        matching += [(x, (ti, card_runs[c][0])) for x, c in sorted(assignment.items())]
    return Agreement(tuple(matching))


def _bipartite_match(options: dict[int, list[int]]) -> dict[int, int]:
    owner: dict[int, int] = {}

    def augment(x: int, seen: set[int]) -> bool:
        for c in options[x]:
            if c in seen:
                continue
            seen.add(c)
            if c not in owner or augment(owner[c], seen):
                owner[c] = x
                return True
        return False

    for x in options:
        augment(x, set())
    return {x: c for c, x in owner.items()}


# ---------------------------------------------------------------------------
# Re-linking a card across sessions


@dataclass(frozen=True)
class Linked:
    evidence: dict


@dataclass(frozen=True)
class NotLinked:
    evidence: dict


class _Failure:
    """Result of an attacker computation that does not succeed."""


def evaluate_recipe(recipe: Term, env: dict, params: GroupParams):
    """Run a symbolic recipe on concrete observed values."""
    op = recipe.op
    if op == "var":
        return env[recipe.name]
    if op == "g":
        return Point(params.g)
    args = [evaluate_recipe(a, env, params) for a in recipe.args]
    if any(isinstance(a, _Failure) for a in args):
        return _Failure()
    if op == "smul" and isinstance(args[1], Point):
        k = args[0]
        if isinstance(k, (Scalar, Point)) and isinstance(k.value, int):
            return Point(params.mul(k.value, args[1].value))
    if op == "h" and isinstance(args[0], Point):
        return kdf(args[0].value, params)
    if op == "dec" and isinstance(args[0], bytes) and isinstance(args[1], bytes):
        plain = aead_decrypt(args[0], args[1])
        if plain is None:
            return _Failure()
        try:
            return decode_value(plain, params)
        except (ValueError, InvalidPoint):
            return _Failure()
    if op in ("fst", "snd") and isinstance(args[0], Pair):
        return args[0].left if op == "fst" else args[0].right
    return _Failure()


def symbolic_images(variant: Variant, sessions: int) -> tuple[Frame, Frame]:
    """Frames of a terminal that ran ``sessions`` sessions with one card,
    and of one that met a different card each time."""
    s = var("s")

    def frame(cards):
        entries = [("pk_s", pk(s))]
        private = {"s"}
        for l in range(1, sessions + 1):
            a, c = var(f"a_{l}"), var(cards[l - 1])
            private |= {a.name, c.name}
            entries.append((f"v_{l}", smul(a, pk(c))))
            entries.append((f"w_{l}", card_reply(variant, s, c, a, smul(var(f"y_{l}"), G))))
        return Frame(frozenset(private), tuple(entries))

    return frame(["c"] * sessions), frame([f"c_{l}" for l in range(1, sessions + 1)])


@lru_cache(maxsize=None)
def _symbolic_verdict(variant: Variant, sessions: int, test_depth: int):
    same, different = symbolic_images(variant, sessions)
    return static_equiv(same, different, Theory.E, test_depth)


def _leaves(x, path=()):
    if isinstance(x, Pair):
        yield from _leaves(x.left, path + ("fst",))
        yield from _leaves(x.right, path + ("snd",))
    else:
        yield path, x


def relink_attack(variant: Variant, params: GroupParams, sessions: int = 2, seed: int = 0,
                  test_depth: int = 4, same_card: bool = True):
    """A malicious terminal runs several sessions and tries to tell that
    the same card answered each time.

    Two routes are tried.  The terminal decrypts every third message with
    its own session key and compares the plaintext fields position by
    position.  Then a distinguishing test is searched for on the symbolic
    images of the observations and evaluated on the concrete transcript.
    """
    if sessions < 2:
        raise ValueError("linking needs at least two sessions")
    rng = random.Random(seed)
    authority, deck = _setup(params, variant, rng, 1 if same_card else sessions)
    env: dict[str, object] = {"pk_s": Point(authority.public)}
    plaintexts = []
    for l in range(1, sessions + 1):
        card = deck[0] if same_card else deck[l - 1]
        card_s = card.session(rng)
        term = TerminalSession(params, authority.public, variant, rng)
        m1 = card_s.first_message()
        m3 = card_s.reply(term.receive_blinded_key(m1))
        env[f"v_{l}"] = Point(params.decode(m1))
        env[f"w_{l}"] = m3
        env[f"y_{l}"] = Scalar(term.t)
        plain = aead_decrypt(term.key, m3)
        plaintexts.append(dict(_leaves(decode_value(plain, params))) if plain else {})

    for field_path, value in plaintexts[0].items():
        if isinstance(value, Point) and all(p.get(field_path) == value for p in plaintexts[1:]):
            return Linked({"route": "plaintext", "field": ".".join(field_path) or "body",
                           "value": encode_value(value, params).hex()})

    verdict = _symbolic_verdict(variant, sessions, test_depth)
    if not isinstance(verdict, Distinguished):
        return NotLinked({"route": "symbolic", "result": "equivalent", "bound": test_depth})
    left = evaluate_recipe(verdict.left, env, params)
    right = evaluate_recipe(verdict.right, env, params)
    evidence = {"route": "symbolic", "test": [to_sexpr(verdict.left), to_sexpr(verdict.right)]}
    if not isinstance(left, _Failure) and left == right:
        evidence["value"] = left.hex() if isinstance(left, bytes) else encode_value(left, params).hex()
        return Linked(evidence)
    evidence["result"] = "test does not hold on the transcript"
    return NotLinked(evidence)
