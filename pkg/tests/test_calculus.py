import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emvbdh.calculus import (
    Diamond, Eq, ExtendedProcess, In, Nil, NonFreshInput, Out, Recv, Send, Top, check_formula,
    explore, export_trace, formula_from_json, formula_to_json, initial_state, input_recipes,
    label_from_json, successors, transitions,
)
from emvbdh.frames import Frame
from emvbdh.protocols import CARD, OUT, SystemKind, Variant, build_system
from emvbdh.terms import G, h, mul, pk, sig, smul, var

T = var("t")
SHARE = smul(T, G)


def step(state, label, pick=0):
    nxt = successors(state, label)
    assert nxt, f"no successor under {label}"
    return nxt[pick]


def published(kind, v=Variant.FIX):
    return step(build_system(v, kind), Out(OUT, "pk_s"))


@pytest.mark.parametrize("kind", list(SystemKind))
def test_key_publication_is_the_only_first_move(kind):
    start = build_system(Variant.FIX, kind)
    moves = transitions(start)
    assert [lab for lab, _ in moves] == [Out(OUT, "pk_s")]
    after = moves[0][1]
    assert after.frame.as_dict() == {"pk_s": smul(var("s"), G)}
    assert after.private == {"s"}


def test_spec_session_start():
    a = published(SystemKind.SPEC)
    nxt = successors(a, Out(CARD, "u_1"))
    assert len(nxt) == 1
    b = nxt[0]
    assert b.frame["u_1"] == var("ch_1")
    assert {"c_1", "ch_1"} <= b.private


def test_impl_session_start_on_existing_or_new_card():
    a = step(published(SystemKind.IMPL), Out(CARD, "u_1"))
    nxt = successors(a, Out(CARD, "u_2"))
    assert len(nxt) == 2
    cards = sorted(len([n for n in b.private if n.startswith("c_")]) for b in nxt)
    # one successor reuses card 1, the other creates card 2
    assert cards == [1, 2]
    spec = step(published(SystemKind.SPEC), Out(CARD, "u_1"))
    assert len(successors(spec, Out(CARD, "u_2"))) == 1


@pytest.mark.parametrize("kind", list(SystemKind))
def test_session_emits_blinded_key(kind):
    a = step(published(kind), Out(CARD, "u_1"))
    u1 = var("u_1")
    nxt = successors(a, Out(u1, "v_1"))
    assert len(nxt) == 1
    assert nxt[0].frame["v_1"] == smul(mul(var("a_1"), var("c_1")), G)
    assert "a_1" in nxt[0].private


@pytest.mark.parametrize("kind", list(SystemKind))
def test_session_accepts_group_input(kind):
    u1 = var("u_1")
    a = step(step(published(kind), Out(CARD, "u_1")), Out(u1, "v_1"))
    nxt = successors(a, In(u1, SHARE))
    assert len(nxt) == 1
    b = nxt[0]
    assert b.frame == a.frame
    # the only move left on the session channel is the encrypted reply
    assert [lab for lab, _ in transitions(b) if lab.chan == u1] == [Out(u1, "w_1")]


@pytest.mark.parametrize("kind", list(SystemKind))
def test_session_sends_encrypted_reply(kind):
    u1 = var("u_1")
    a = step(step(step(published(kind), Out(CARD, "u_1")), Out(u1, "v_1")), In(u1, SHARE))
    nxt = successors(a, Out(u1, "w_1"))
    assert len(nxt) == 1
    ac = mul(var("a_1"), var("c_1"))
    w = nxt[0].frame["w_1"]
    assert w.op == "enc"
    assert w.args[0].args == (smul(ac, G), smul(ac, sig(var("s"), G)))
    assert w.args[1] == h(smul(mul(var("a_1"), mul(var("c_1"), T)), G))
    assert not [lab for lab, _ in transitions(nxt[0]) if lab.chan == u1]


def test_spec_and_impl_share_first_two_labels():
    for v in Variant:
        for kind in SystemKind:
            a = build_system(v, kind)
            (l1, a), = transitions(a)
            (l2, _), = transitions(a)
            assert (l1, l2) == (Out(OUT, "pk_s"), Out(CARD, "u_1"))


def test_nil_deadlocks():
    assert transitions(initial_state(Nil()), [G]) == []


def test_input_on_public_channel_binds_payload():
    c = var("c")
    a = initial_state(Recv(c, "x", Send(c, h(var("x")))))
    (lab, b), = transitions(a, [G])
    assert lab == In(c, G)
    (lab2, b2), = transitions(b)
    assert b2.frame[lab2.alias] == h(G)


def test_private_channel_is_silent():
    k = var("k")
    a = ExtendedProcess(Frame({"k"}), (Send(k, G),))
    assert transitions(a) == []


def test_non_fresh_input_rejected():
    c = var("c")
    a = ExtendedProcess(Frame({"k"}), (Recv(c, "x", Nil()),))
    with pytest.raises(NonFreshInput):
        transitions(a, [var("k")])


def test_check_formula_basics():
    a = published(SystemKind.SPEC)
    assert check_formula(a, Eq(G, G))
    assert check_formula(a, Top())
    assert check_formula(a, Eq(var("pk_s"), smul(var("pk_s"), var("x")))) is False
    assert check_formula(a, Diamond(Out(CARD, "u_1"), Top()))
    assert not check_formula(a, Diamond(Out(OUT, "pk_2"), Top()))


def test_formula_json_round_trip():
    f = Diamond(Out(OUT, "pk_s"), Diamond(In(var("u_1"), SHARE), Eq(var("x"), G)))
    assert formula_from_json(json.loads(json.dumps(formula_to_json(f)))) == f
    with pytest.raises(ValueError):
        label_from_json({"kind": "bogus"})


def test_explore_depth_zero_is_root_only():
    root = explore(build_system(Variant.RFC, SystemKind.IMPL), 0)
    assert list(root.walk()) == [root]
    with pytest.raises(ValueError):
        explore(root.state, -1)


def test_spec_exploration_follows_stage_order():
    root = explore(build_system(Variant.FIX, SystemKind.SPEC), 5, 2)
    for node in root.walk():
        per_session: dict[str, list[str]] = {}
        for lab in node.path:
            if lab.chan.op == "var" and lab.chan.name.startswith("u_"):
                kind = "in" if isinstance(lab, In) else lab.alias[0]
                per_session.setdefault(lab.chan.name, []).append(kind)
        for seq in per_session.values():
            assert seq == ["v", "in", "w"][:len(seq)]


def test_attack_witness_is_reachable_in_impl():
    root = explore(build_system(Variant.RFC, SystemKind.IMPL), 9, 1)
    wanted = [Out(OUT, "pk_s"), Out(CARD, "u_1"), Out(var("u_1"), "v_1"), In(var("u_1"), "share"),
              Out(var("u_1"), "w_1"), Out(CARD, "u_2"), Out(var("u_2"), "v_2"), In(var("u_2"), "share"),
              Out(var("u_2"), "w_2")]

    def shape(lab):
        return In(lab.chan, "share") if isinstance(lab, In) and lab.payload.op == "smul" else lab

    hits = [n for n in root.walk() if [shape(lab) for lab in n.path] == wanted]
    assert any(len([p for p in n.state.private if p.startswith("c_")]) == 1 for n in hits)


def test_export_trace_writes_jsonl(tmp_path):
    root = explore(build_system(Variant.FIX, SystemKind.SPEC), 3, 1)
    out = tmp_path / "trace.jsonl"
    n = export_trace(root, str(out))
    lines = out.read_text().splitlines()
    assert n == len(lines) == len(list(root.walk()))
    rec = json.loads(lines[-1])
    assert set(rec) == {"path", "frame"}
    assert rec["path"][0] == {"kind": "out", "chan": "out", "alias": "pk_s"}


def _random_run(seed, steps=7):
    rng = random.Random(seed)
    a = build_system(rng.choice(list(Variant)), rng.choice(list(SystemKind)))
    run = [a]
    for _ in range(steps):
        moves = transitions(a, input_recipes(a, 1))
        if not moves:
            break
        _, a = rng.choice(moves)
        run.append(a)
    return run


@settings(max_examples=40)
@given(st.integers(0, 10_000))
def test_frames_grow_one_alias_per_output(seed):
    run = _random_run(seed)
    for before, after in zip(run, run[1:]):
        grown = len(after.frame.entries) - len(before.frame.entries)
        assert grown in (0, 1)
        assert before.frame.as_dict().items() <= after.frame.as_dict().items()
        # aliases stay clear of private names and process variables
        assert not set(after.frame.domain) & set(after.private)


@settings(max_examples=40)
@given(st.integers(0, 10_000))
def test_diamond_true_iff_label_enabled(seed):
    run = _random_run(seed, 5)
    a = run[-1]
    moves = transitions(a, [SHARE])
    for lab, _ in moves:
        assert check_formula(a, Diamond(lab, Top()))
    assert not check_formula(a, Diamond(Out(var("nowhere"), "z"), Top()))
    assert check_formula(a, Diamond(In(var("u_9"), G), Top())) == any(
        isinstance(lab, In) and lab.chan == var("u_9") for lab, _ in transitions(a, [G]))


def test_impl_keys_are_blinded_public_keys():
    a = step(step(published(SystemKind.IMPL), Out(CARD, "u_1")), Out(var("u_1"), "v_1"))
    assert a.frame["v_1"] == smul(mul(var("a_1"), var("c_1")), G)
    assert pk(var("c_1")) != a.frame["v_1"]
