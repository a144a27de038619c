"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v`` or directly with
``python3 tests/test_acceptance.py``; each test prints its verdict line
even when output capturing is on.
"""

import random
import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from emvbdh.calculus import In, Out, check_formula, successors, transitions  # noqa: E402
from emvbdh.frames import Frame, brute_static_equiv, normalize_frame, static_equiv  # noqa: E402
from emvbdh.pairing import (  # noqa: E402
    MERSENNE_61, Certificate, authority_key, blind, card_public_key, kdf, mock_group, sign,
    verify, verify_bytes,
)
from emvbdh.protocols import (  # noqa: E402
    CARD, OUT, Attack, NoAttackFound, SystemKind, Variant, attack_formula, build_system,
    check_unlinkability_bounded,
)
from emvbdh.runtime import (  # noqa: E402
    Agreement, Linked, NotLinked, Violation, check_injective_agreement, counter_trace,
    honest_trace, relink_attack,
)
from emvbdh.terms import (  # noqa: E402
    G, Theory, check, dec, enc, eq_mod, fst, h, mul, normalize, pair, pk, sig, smul, snd, var,
)
from oracles import canon, random_frame_pair, random_full_term  # noqa: E402

GROUPS = [mock_group(101), mock_group(MERSENNE_61)]


@pytest.fixture
def report(capsys):
    def emit(name: str, ok: bool, detail: str = ""):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'}: {name}" + (f" ({detail})" if detail else ""))
        assert ok, f"{name}: {detail}"
    return emit


def test_attack_reproduction(report):
    start = time.perf_counter()
    psi = attack_formula()
    in_impl = check_formula(build_system(Variant.RFC, SystemKind.IMPL), psi, Theory.E0)
    in_spec = check_formula(build_system(Variant.RFC, SystemKind.SPEC), psi, Theory.E0)
    elapsed = time.perf_counter() - start
    report("attack formula holds on RFC impl, fails on RFC spec, under 10 s",
           in_impl and not in_spec and elapsed < 10,
           f"impl={in_impl} spec={in_spec} {elapsed:.2f}s")


def test_fix_verification_and_rfc_attack(report):
    start = time.perf_counter()
    fix = check_unlinkability_bounded(Variant.FIX, 3, 2, 2, 4)
    rfc = check_unlinkability_bounded(Variant.RFC, 3, 2, 2, 4)
    elapsed = time.perf_counter() - start
    replays = isinstance(rfc, Attack) and (
        check_formula(build_system(Variant.RFC, SystemKind.IMPL), rfc.formula)
        != check_formula(build_system(Variant.RFC, SystemKind.SPEC), rfc.formula))
    report("bounded unlinkability: FIX L=3 D=2 no attack, RFC attack replays, under 5 min",
           isinstance(fix, NoAttackFound) and replays and elapsed < 300,
           f"fix={fix.result} ({fix.states_explored} pairs) rfc={rfc.result} replays={replays} "
           f"{elapsed:.1f}s")


def _worked_normalization_ok():
    s, a, b, x = var("s"), var("a"), var("b"), var("x")
    f = Frame({"s", "a", "b"}, (
        ("pk_s", pk(s)), ("u1", enc(h(a), b)), ("u2", b), ("u3", sig(s, pair(a, x))),
    ))
    u1, u2, u3, pk_s = var("u1"), var("u2"), var("u3"), var("pk_s")
    expected = [
        (pk_s, smul(s, G)), (dec(u2, u1), h(a)), (u2, b),
        (fst(check(pk_s, u3)), a), (snd(check(pk_s, u3)), x), (u3, sig(s, pair(a, x))),
    ]
    return normalize_frame(f, Theory.E).entries == expected


def test_static_equivalence_matches_brute_force(report):
    rng = random.Random(2024)
    total = mismatches = 0
    for bound, count, max_entries in ((1, 200, 5), (2, 10, 3)):
        for _ in range(count):
            fa, fb = random_frame_pair(rng, rng.randint(1, max_entries), rng.randint(1, 4))
            total += 1
            if static_equiv(fa, fb, depth=bound).kind != brute_static_equiv(fa, fb, depth=bound).kind:
                mismatches += 1
    worked = _worked_normalization_ok()
    report("static_equiv agrees with brute force; worked normalization reproduced",
           mismatches == 0 and total >= 200 and worked,
           f"{total} pairs, {mismatches} mismatches, worked example={worked}")


def _lts_fixtures():
    u1 = var("u_1")
    share = smul(var("t"), G)
    failures = []
    for kind in SystemKind:
        a = build_system(Variant.FIX, kind)
        moves = transitions(a)
        if [lab for lab, _ in moves] != [Out(OUT, "pk_s")]:
            failures.append(f"{kind.name} key publication")
            continue
        a = moves[0][1]
        nxt = successors(a, Out(CARD, "u_1"))
        if len(nxt) != 1:
            failures.append(f"{kind.name} first session start")
        a = nxt[0]
        second = successors(a, Out(CARD, "u_2"))
        if len(second) != (2 if kind is SystemKind.IMPL else 1):
            failures.append(f"{kind.name} second session start")
        nxt = successors(a, Out(u1, "v_1"))
        if len(nxt) != 1 or not eq_mod(nxt[0].frame["v_1"], smul(var("a_1"), pk(var("c_1")))):
            failures.append(f"{kind.name} blinded key")
            continue
        a = nxt[0]
        nxt = successors(a, In(u1, share))
        if len(nxt) != 1:
            failures.append(f"{kind.name} group input")
            continue
        a = nxt[0]
        nxt = successors(a, Out(u1, "w_1"))
        on_channel = [lab for lab, _ in transitions(a) if lab.chan == u1]
        if len(nxt) != 1 or on_channel != [Out(u1, "w_1")]:
            failures.append(f"{kind.name} encrypted reply")
    return failures


def test_lts_fixtures(report):
    failures = _lts_fixtures()
    report("LTS fixtures: publication, session start, blinded key, input, reply on spec and impl",
           not failures, ", ".join(failures) or "10 fixtures")


def _equations(M, N, K):
    return [
        (mul(M, N), mul(N, M), Theory.E0),
        (mul(mul(M, N), K), mul(M, mul(N, K)), Theory.E0),
        (smul(mul(M, N), K), smul(M, smul(N, K)), Theory.E0),
        (fst(pair(M, N)), M, Theory.E0),
        (snd(pair(M, N)), N, Theory.E0),
        (dec(K, enc(M, K)), M, Theory.E0),
        (check(pk(K), sig(K, M)), M, Theory.E0),
        (smul(M, sig(K, N)), sig(K, smul(M, N)), Theory.E),
    ]


def test_equational_theory(report):
    rng = random.Random(7)
    bad_eq = 0
    for _ in range(100):
        M, N, K = (random_full_term(rng, 3) for _ in range(3))
        for lhs, rhs, th in _equations(M, N, K):
            if not (eq_mod(lhs, rhs, th) and eq_mod(rhs, lhs, th) and eq_mod(lhs, rhs, Theory.E)):
                bad_eq += 1
    bad_nf = 0
    for _ in range(1000):
        t = random_full_term(rng, 6)
        for th in Theory:
            nf = normalize(t, th)
            if normalize(nf, th) != nf or not eq_mod(nf, t, th) or canon(nf, th) != canon(t, th):
                bad_nf += 1
    report("equations hold both ways on 100 instantiations; normalize idempotent and sound on 1000 terms",
           bad_eq == 0 and bad_nf == 0, f"equation failures={bad_eq}, normal-form failures={bad_nf}")


def test_concrete_relink_demo(report):
    start = time.perf_counter()
    wrong = []
    for params in GROUPS:
        for seed in range(50):
            if not isinstance(relink_attack(Variant.RFC, params, 2, seed), Linked):
                wrong.append(f"RFC {params.name} seed {seed}")
            if not isinstance(relink_attack(Variant.FIX, params, 2, seed), NotLinked):
                wrong.append(f"FIX {params.name} seed {seed}")
    elapsed = time.perf_counter() - start
    report("relink: RFC linked, FIX not linked, 50 seeds in two groups, under 30 s",
           not wrong and elapsed < 30, f"{len(wrong)} wrong verdicts, {elapsed:.1f}s")


def test_injective_agreement(report):
    rng = random.Random(11)
    honest_failures = 0
    for seed in range(100):
        v, params = rng.choice(list(Variant)), rng.choice(GROUPS)
        sets = [honest_trace(v, params, rng.randint(2, 4), rng.randint(1, 3), seed * 10 + i)
                for i in range(rng.randint(1, 3))]
        if not isinstance(check_injective_agreement(sets), Agreement):
            honest_failures += 1
    caught = [kind for kind in ("sig", "key", "replay")
              if isinstance(check_injective_agreement([counter_trace(kind, Variant.FIX, GROUPS[1])]),
                            Violation)]
    report("injective agreement: 100 honest trace sets pass, 3 tamper harnesses violate",
           honest_failures == 0 and len(caught) == 3,
           f"honest failures={honest_failures}, violations from {caught}")


def test_crypto_properties(report):
    rng = random.Random(13)
    fails = {"bilinearity": 0, "blinding": 0, "dh": 0, "fuzz": 0}
    for params in GROUPS:
        for _ in range(500):
            a, b, p, q = (params.random_scalar(rng) for _ in range(4))
            if params.pair(params.mul(a, p), params.mul(b, q)) != params.gt_pow(params.pair(p, q), a * b):
                fails["bilinearity"] += 1
            s, c, k = (params.random_scalar(rng) for _ in range(3))
            pk_s = authority_key(s, params)
            cert = sign(s, card_public_key(c, params), params)
            forged = Certificate(cert.pk, params.add(cert.sig, params.g))
            for x in (cert, forged):
                if verify(blind(x, k, params), pk_s, params) != verify(x, pk_s, params):
                    fails["blinding"] += 1
            t = params.random_scalar(rng)
            if kdf(params.mul(k * c, params.mul(t, params.g)), params) != \
                    kdf(params.mul(t, params.mul(k, card_public_key(c, params))), params):
                fails["dh"] += 1
    params = GROUPS[1]
    for _ in range(100):
        s, c = params.random_scalar(rng), params.random_scalar(rng)
        data = bytearray(sign(s, card_public_key(c, params), params).encode(params))
        bit = rng.randrange(len(data) * 8)
        data[bit // 8] ^= 1 << (bit % 8)
        if verify_bytes(bytes(data), authority_key(s, params), params):
            fails["fuzz"] += 1
    report("crypto: bilinearity, blinding invariance, DH agreement on 1000 samples; 100-case bit fuzz",
           not any(fails.values()), ", ".join(f"{k}={v}" for k, v in fails.items()))


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
