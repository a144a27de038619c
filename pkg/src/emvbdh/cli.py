"""Command-line entry point ``emvbdh``.

Exit codes: 0 when the property holds or the handshake succeeds, 1 when an
attack or violation is found, 2 on usage or input errors.
"""

from __future__ import annotations

import argparse
import json
import sys

from .calculus import explore, export_trace, formula_to_json
from .frames import Distinguished, Frame, static_equiv
from .pairing import mock_group
from .protocols import (
    Attack, BudgetExceeded, build_system, check_unlinkability_bounded, parse_system, parse_variant,
)
from .runtime import (
    AuthOk, Linked, Transcript, Violation, check_injective_agreement, event_from_json,
    relink_attack, run_handshake,
)
from .terms import Theory, to_sexpr

OK, FOUND, USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _emit(args, summary: str, payload: dict) -> None:
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    else:
        print(summary)


def _params(args):
    try:
        return mock_group(args.group_order)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _load_json(path: str):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        try:
            return [json.loads(line) for line in text.splitlines() if line.strip()]
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path} is not JSON or JSON lines: {exc}") from None


def cmd_handshake(args) -> int:
    t = run_handshake(parse_variant(args.variant), _params(args), args.tamper, args.seed)
    ok = isinstance(t.outcome, AuthOk)
    if args.save:
        with open(args.save, "w") as fh:
            json.dump(t.to_json(), fh, indent=1)
    payload = {
        "outcome": "auth-ok" if ok else "abort",
        "step": None if ok else t.outcome.step,
        "keys_match": t.card_key is not None and t.card_key == t.terminal_key,
        "transcript": t.to_json(),
    }
    summary = "handshake ok, keys match" if ok and payload["keys_match"] else \
        ("handshake ok" if ok else f"handshake aborted at {t.outcome.step}")
    _emit(args, summary, payload)
    return OK if ok else FOUND


def cmd_demo_attack(args) -> int:
    if args.sessions < 2:
        raise UsageError("--sessions must be at least 2")
    verdict = relink_attack(parse_variant(args.variant), _params(args), args.sessions, args.seed,
                            args.test_depth)
    linked = isinstance(verdict, Linked)
    _emit(args, ("card linked across sessions: " if linked else "sessions not linked: ")
          + json.dumps(verdict.evidence, sort_keys=True),
          {"result": "linked" if linked else "not-linked", "evidence": verdict.evidence})
    return FOUND if linked else OK


def _transcripts(data) -> list[Transcript]:
    try:
        if data and isinstance(data[0], dict):
            data = [data]
        return [Transcript([event_from_json(e) for e in trace]) for trace in data]
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"malformed trace: {exc}") from None


def cmd_agreement(args) -> int:
    verdict = check_injective_agreement(_transcripts(_load_json(args.trace)))
    if isinstance(verdict, Violation):
        _emit(args, f"violation in trace {verdict.trace} at event {verdict.event}: {verdict.reason}",
              {"result": "violation", "trace": verdict.trace, "event": verdict.event,
               "reason": verdict.reason})
        return FOUND
    _emit(args, f"injective agreement holds ({len(verdict.matching)} acceptances matched)",
          {"result": "agreement", "matching": [[x, list(c)] for x, c in verdict.matching]})
    return OK


def _frames(paths: list[str]) -> tuple[Frame, Frame, Theory]:
    try:
        if len(paths) == 2:
            a, b = (_load_json(p) for p in paths)
            return Frame.from_json(a), Frame.from_json(b), Theory.E
        if len(paths) == 1:
            data = _load_json(paths[0])
            return (Frame.from_json(data["left"]), Frame.from_json(data["right"]),
                    Theory.parse(data.get("theory", "E")))
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"malformed frames: {exc}") from None
    raise UsageError("--frames takes one file with left/right frames or two frame files")


def cmd_static_equiv(args) -> int:
    a, b, th = _frames(args.frames)
    if set(a.domain) != set(b.domain):
        raise UsageError("frames have different domains")
    verdict = static_equiv(a, b, th, args.bound)
    if isinstance(verdict, Distinguished):
        test = [to_sexpr(verdict.left), to_sexpr(verdict.right)]
        _emit(args, f"distinguished by {test[0]} = {test[1]}", {"result": "distinguished", "test": test})
        return FOUND
    _emit(args, f"equivalent up to recipe depth {verdict.bound}"
          + ("" if verdict.exhaustive else " (search budget reached)"),
          {"result": "equivalent", "bound": verdict.bound, "exhaustive": verdict.exhaustive})
    return OK


def cmd_explore(args) -> int:
    system = build_system(parse_variant(args.variant), parse_system(args.system))
    root = explore(system, args.depth, args.input_depth)
    n = export_trace(root, args.out)
    _emit(args, f"wrote {n} states to {args.out}", {"states": n, "out": args.out})
    return OK


def cmd_check_unlink(args) -> int:
    try:
        r = check_unlinkability_bounded(parse_variant(args.variant), args.sessions, args.cards,
                                        args.recipe_depth, args.test_depth, seed=args.seed)
    except BudgetExceeded as exc:
        _emit(args, str(exc), {"result": "budget-exceeded", "states_explored": exc.states_explored})
        return USAGE
    payload = {"result": r.result, "states_explored": r.states_explored}
    if isinstance(r, Attack):
        payload["formula"] = formula_to_json(r.formula)
        payload["satisfied_by"] = r.satisfied_by
        payload["reason"] = r.reason
        test = payload["formula"]["test"]
        _emit(args, f"attack after {len(payload['formula']['path'])} steps ({r.reason})"
              + (f": {test[0]} = {test[1]}" if test else ""), payload)
        return FOUND
    _emit(args, f"no attack found ({r.states_explored} state pairs)", payload)
    return OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="machine-readable output")
    common.add_argument("--seed", type=int, default=0)
    group = argparse.ArgumentParser(add_help=False)
    group.add_argument("--group-order", type=int, default=101, help="prime order of the mock group")

    p = argparse.ArgumentParser(prog="emvbdh", description="Blinded Diffie-Hellman key establishment: "
                                "symbolic models, checks and a concrete runtime.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("handshake", parents=[common, group], help="run one concrete handshake")
    s.add_argument("--variant", choices=["rfc", "fix"], required=True)
    s.add_argument("--tamper", choices=["none", "sig", "key", "replay"], default="none")
    s.add_argument("--save", metavar="FILE", help="write the transcript as JSON")
    s.set_defaults(func=cmd_handshake)

    s = sub.add_parser("demo-attack", parents=[common, group], help="malicious terminal re-links a card")
    s.add_argument("--variant", choices=["rfc", "fix"], required=True)
    s.add_argument("--sessions", type=int, default=2)
    s.add_argument("--test-depth", type=int, default=4)
    s.set_defaults(func=cmd_demo_attack)

    s = sub.add_parser("agreement", parents=[common], help="check injective agreement on traces")
    s.add_argument("--trace", required=True, metavar="FILE")
    s.set_defaults(func=cmd_agreement)

    s = sub.add_parser("static-equiv", parents=[common], help="decide static equivalence of two frames")
    s.add_argument("--frames", nargs="+", required=True, metavar="FILE")
    s.add_argument("--bound", type=int, default=2)
    s.set_defaults(func=cmd_static_equiv)

    s = sub.add_parser("explore", parents=[common], help="export the labelled transitions of a system")
    s.add_argument("--system", choices=["spec", "impl"], required=True)
    s.add_argument("--variant", choices=["rfc", "fix"], required=True)
    s.add_argument("--depth", type=int, default=4)
    s.add_argument("--input-depth", type=int, default=1)
    s.add_argument("--out", required=True, metavar="FILE")
    s.set_defaults(func=cmd_explore)

    s = sub.add_parser("check-unlink", parents=[common], help="bounded unlinkability check")
    s.add_argument("--variant", choices=["rfc", "fix"], required=True)
    s.add_argument("--sessions", type=int, default=2)
    s.add_argument("--cards", type=int, default=2)
    s.add_argument("--recipe-depth", type=int, default=1)
    s.add_argument("--test-depth", type=int, default=4)
    s.set_defaults(func=cmd_check_unlink)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return USAGE if exc.code else OK
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"emvbdh: error: {exc}", file=sys.stderr)
        return USAGE
    except ValueError as exc:
        print(f"emvbdh: error: {exc}", file=sys.stderr)
        return USAGE


if __name__ == "__main__":
    sys.exit(main())
