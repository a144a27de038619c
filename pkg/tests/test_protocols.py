from dataclasses import replace

import pytest

from emvbdh.calculus import (
    Bang, Eq, In, Match, New, Out, Send, check_formula, free_names, successors, visible_actions,
)
from emvbdh.frames import Frame
from emvbdh.protocols import (
    CARD, OUT, Attack, BudgetExceeded, GameState, NoAttackFound, SystemKind, Variant,
    attack_formula, build_role, build_system, check_unlinkability_bounded, parse_system,
    parse_variant, relation_membership,
)
from emvbdh.terms import AUTH, G, Theory, check, eq_mod, pk, smul, var


def test_parsers():
    assert parse_variant("RFC") is Variant.RFC and parse_variant("fix") is Variant.FIX
    assert parse_system("impl") is SystemKind.IMPL
    with pytest.raises(ValueError):
        parse_variant("tls")
    with pytest.raises(ValueError):
        build_role(Variant.RFC, "reader")


def test_rfc_card_has_three_visible_actions():
    assert visible_actions(build_role(Variant.RFC, "card")) == 3
    assert visible_actions(build_role(Variant.FIX, "card")) == 3


def _matches(p):
    while True:
        if isinstance(p, Match):
            yield p
            p = p.cont
        elif hasattr(p, "cont"):
            p = p.cont
        else:
            return


def _last(p):
    while hasattr(p, "cont"):
        if isinstance(p, Send) and p.msg == AUTH:
            return p
        p = p.cont
    return p


def test_fix_terminal_checks():
    tests = list(_matches(build_role(Variant.FIX, "terminal")))
    assert len(tests) == 2
    m1 = tests[0].lhs
    assert tests[0].rhs == check(pk(var("s")), tests[0].rhs.args[1])
    assert tests[1].lhs == m1 and tests[1].rhs == var("z1")


@pytest.mark.parametrize("v", list(Variant))
def test_terminals_end_by_sending_auth(v):
    end = _last(build_role(v, "terminal"))
    assert isinstance(end, Send) and end.msg == AUTH and end.chan == var("ch")


def test_role_free_names():
    assert free_names(build_role(Variant.FIX, "card")) == {"s", "c", "ch"}
    assert free_names(build_role(Variant.RFC, "terminal")) == {"s", "ch"}


def test_system_shapes():
    for v in Variant:
        spec, impl = build_system(v, SystemKind.SPEC), build_system(v, SystemKind.IMPL)
        assert spec.frame == Frame() == impl.frame
        assert free_names(spec.body) == free_names(impl.body) == {"out", "card"}
    body = build_system(Variant.FIX, SystemKind.IMPL).body
    assert isinstance(body, New) and isinstance(body.cont, Send)
    inner = body.cont.cont
    assert isinstance(inner, Bang) and isinstance(inner.body.cont, Bang)


def _publish_and_start(kind, v=Variant.FIX):
    a = successors(build_system(v, kind), Out(OUT, "pk_s"))[0]
    return successors(a, Out(CARD, "u_1"))[0]


def test_fix_spec_emits_blinded_key():
    a = _publish_and_start(SystemKind.SPEC)
    (b,) = successors(a, Out(var("u_1"), "v_1"))
    assert eq_mod(b.frame["v_1"], smul(var("a_1"), pk(var("c_1"))))


def test_attack_formula_shape():
    f = attack_formula()
    labels = []
    while not isinstance(f, Eq):
        labels.append(f.label)
        f = f.inner
    assert len(labels) == 9
    assert labels[0] == Out(OUT, "pk_s")
    assert [lab.alias for lab in labels if isinstance(lab, Out)] == [
        "pk_s", "u_1", "v_1", "w_1", "u_2", "v_2", "w_2"]
    assert labels[3] == In(var("u_1"), smul(var("y1"), G))


@pytest.mark.parametrize("th", list(Theory))
def test_attack_formula_separates_rfc_systems(th):
    psi = attack_formula()
    assert check_formula(build_system(Variant.RFC, SystemKind.IMPL), psi, th)
    assert not check_formula(build_system(Variant.RFC, SystemKind.SPEC), psi, th)


def test_attack_formula_fails_on_fixed_protocol():
    psi = attack_formula()
    assert not check_formula(build_system(Variant.FIX, SystemKind.IMPL), psi, Theory.E)
    assert not check_formula(build_system(Variant.FIX, SystemKind.SPEC), psi, Theory.E)


def test_relation_membership_templates():
    spec0, impl0 = build_system(Variant.FIX, SystemKind.SPEC), build_system(Variant.FIX, SystemKind.IMPL)
    g = GameState()
    assert relation_membership((spec0, impl0), g)
    lab = Out(OUT, "pk_s")
    spec1, impl1 = successors(spec0, lab)[0], successors(impl0, lab)[0]
    g1 = g.advance(lab)
    assert relation_membership((spec1, impl1), g1)
    assert g1.partition("E") == []

    lab = Out(CARD, "u_1")
    spec2, impl2 = successors(spec1, lab)[0], successors(impl1, lab)[0]
    g2 = g1.advance(lab, 1)
    assert relation_membership((spec2, impl2), g2)
    lab = Out(var("u_1"), "v_1")
    spec3, impl3 = successors(spec2, lab)[0], successors(impl2, lab)[0]
    g3 = g2.advance(lab)
    assert g3.partition("F") == [1]
    assert relation_membership((spec3, impl3), g3)
    # the stage bookkeeping must agree with the frames
    assert not relation_membership((spec3, impl3), g2)
    broken = Frame(spec3.frame.private, tuple((a, G if a == "v_1" else t) for a, t in spec3.frame.entries))
    assert not relation_membership((replace(spec3, frame=broken), impl3), g3)


def test_rfc_unlinkability_attack_replays():
    r = check_unlinkability_bounded(Variant.RFC, 2, 1, 2, 4)
    assert isinstance(r, Attack)
    assert r.satisfied_by == "impl"
    assert check_formula(build_system(Variant.RFC, SystemKind.IMPL), r.formula)
    assert not check_formula(build_system(Variant.RFC, SystemKind.SPEC), r.formula)


def test_fix_small_bound_has_no_attack_and_stays_in_relation():
    r = check_unlinkability_bounded(Variant.FIX, 2, 2, 1, 4, rho_samples=2, track_relation=True)
    assert isinstance(r, NoAttackFound)
    assert (r.sessions, r.cards) == (2, 2)
    assert r.relation_failures == 0


def test_single_session_is_unlinkable_for_both_variants():
    for v in Variant:
        assert isinstance(check_unlinkability_bounded(v, 1, 1, 2, 4), NoAttackFound)


def test_bounds_are_validated():
    with pytest.raises(ValueError):
        check_unlinkability_bounded(Variant.FIX, 0, 1)
    with pytest.raises(ValueError):
        check_unlinkability_bounded(Variant.FIX, 1, 0)


def test_budget_exceeded_reports_coverage():
    with pytest.raises(BudgetExceeded) as info:
        check_unlinkability_bounded(Variant.FIX, 2, 2, 1, 4, max_pairs=20)
    assert info.value.states_explored == 21
