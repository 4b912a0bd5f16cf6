"""Constructive machine-to-machine transformations.

Every transform carries a testable semantic-preservation contract: the
output machine reproduces the input's run statistics (or its decision
under the appropriate criterion) on all inputs, exactly up to numerical
tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EngineError, SpecError
from .machines import (
    LEFT_END,
    RIGHT_END,
    MachineSpec,
    TransitionRule,
    make_spec,
    tape_of,
)


def _ceil_log2(k: int) -> int:
    return max(1, math.ceil(math.log2(max(2, k))))


def reduce_garbage_alphabet(spec: MachineSpec) -> MachineSpec:
    """Rewrite a machine with k garbage symbols over the binary alphabet.

    Each write of symbol number g becomes a run of r = ceil(log2 k) bit
    writes threaded through fresh states (target, g, 1..r); transitions that
    write nothing pass through a matching run of silent states so that all
    branches stay time-aligned and interference is preserved.  Cumulative
    statistics match the input's; per-step indices stretch by the factor
    r + 1.  Machines already on a binary (or smaller) garbage alphabet are
    returned unchanged.
    """
    if spec.kind != "qfa":
        raise SpecError("reduce_garbage_alphabet requires a qfa spec")
    k = len(spec.garbage_alphabet)
    if k <= 2:
        return spec
    r = _ceil_log2(k)
    bits_of = {
        sym: format(i, f"0{r}b") for i, sym in enumerate(spec.garbage_alphabet)
    }

    def carrier(state, tag, i):
        return f"{state}|{tag}|{i}"

    states: list[str] = list(spec.states)
    seen = set(states)
    rules: list[TransitionRule] = []

    def add_state(name):
        if name not in seen:
            seen.add(name)
            states.append(name)

    head_mode = spec.head_mode if spec.head_mode != "oneWay" else "oneFiveWay"
    for rule in spec.transitions:
        if rule.garbage is None:
            chain_tag = "~"
            first_bit = None
        else:
            chain_tag = rule.garbage
            first_bit = bits_of[rule.garbage][0]
        first = carrier(rule.target, chain_tag, 1) if r > 1 else None
        if r == 1:
            rules.append(rule)
            continue
        # step 1: move the head, write the first bit (or nothing)
        add_state(carrier(rule.target, chain_tag, 1))
        rules.append(TransitionRule(rule.source, rule.read, first,
                                    rule.direction, first_bit, rule.weight))
        # steps 2..r: stationary, write remaining bits (or nothing)
        for i in range(2, r + 1):
            add_state(carrier(rule.target, chain_tag, i))
            bit = bits_of[chain_tag][i - 1] if rule.garbage is not None else None
            rules.append(TransitionRule(carrier(rule.target, chain_tag, i - 1),
                                        rule.read, carrier(rule.target, chain_tag, i),
                                        0, bit, 1.0))
        # final stationary hop back to the plain target state
        rules.append(TransitionRule(carrier(rule.target, chain_tag, r),
                                    rule.read, rule.target, 0, None, 1.0))

    # carrier states inherit halting behavior from their base state so the
    # measurement fires at the first sub-step of the expanded transition
    accepting = set(spec.accepting)
    rejecting = set(spec.rejecting)
    for name in states:
        base = name.split("|", 1)[0]
        if base in spec.accepting:
            accepting.add(name)
        elif base in spec.rejecting:
            rejecting.add(name)

    # the stationary chain above reads whatever the head sees, so every
    # chain state needs its rules for all readable symbols
    expanded: list[TransitionRule] = []
    for rule in rules:
        if rule.source in spec.states or rule.read != spec.readable_symbols[0]:
            expanded.append(rule)
    by_key = {}
    for rule in rules:
        by_key.setdefault((rule.source, rule.read), []).append(rule)
    final_rules: list[TransitionRule] = []
    for rule in rules:
        if rule.source in spec.states:
            final_rules.append(rule)
        else:
            # chain rules were emitted with the original read symbol; replay
            # them for every readable symbol since the head is stationary
            pass
    chain_rules = {}
    for rule in rules:
        if rule.source not in spec.states:
            chain_rules.setdefault(rule.source, rule)
    for src, proto in chain_rules.items():
        for sym in spec.readable_symbols:
            final_rules.append(TransitionRule(src, sym, proto.target, proto.direction,
                                              proto.garbage, proto.weight))
    return make_spec(
        "qfa", head_mode, states, spec.input_alphabet, spec.initial,
        accepting, rejecting, final_rules,
        garbage_alphabet=("0", "1"), garbage_mode="flexible",
        name=f"{spec.name}|bingarbage",
    )


def collapse_stationary(spec: MachineSpec) -> MachineSpec:
    """Compress the stationary chains of a deterministic 1.5-way machine.

    The result is strictly one-way, on the same state set, and accepts
    exactly the same strings.  A stationary cycle on some (state, symbol)
    means the machine diverges there, which the transform rejects.
    """
    if spec.kind != "dfa" or spec.head_mode != "oneFiveWay":
        raise SpecError("collapse_stationary requires a 1.5-way dfa")
    rule_map = {(r.source, r.read): r for r in spec.transitions}
    out_rules = []
    for (src, sym), rule in rule_map.items():
        seen = {src}
        cur = rule
        while cur.direction == 0 and cur.target not in spec.halting:
            if cur.target in seen:
                raise EngineError(f"diverging stationary loop at ({src!r}, {sym!r})")
            seen.add(cur.target)
            nxt = rule_map.get((cur.target, sym))
            if nxt is None:
                cur = None
                break
            cur = nxt
        if cur is None:
            continue  # the chain gets stuck; the machine is undefined here anyway
        target = cur.target
        out_rules.append(TransitionRule(src, sym, target, 1, None, 1.0))
    return spec.with_(head_mode="oneWay", transitions=tuple(out_rules),
                      name=f"{spec.name}|oneway")


def lift_pfa_to_qfa(spec: MachineSpec) -> MachineSpec:
    """Quantum machine reproducing a probabilistic one exactly.

    Each probabilistic branch takes amplitude sqrt(p) and discards a record
    of (source state, branch index) onto the garbage tape, so distinct
    branches can never interfere; the run statistics equal the input's.
    """
    if spec.kind not in ("pfa", "dfa"):
        raise SpecError("lift_pfa_to_qfa requires a pfa spec")
    by_key: dict[tuple[str, str], list[TransitionRule]] = {}
    for rule in spec.transitions:
        by_key.setdefault((rule.source, rule.read), []).append(rule)
    garbage = []
    rules = []
    for (src, sym), branch in by_key.items():
        for i, rule in enumerate(branch):
            tag = f"g{spec.state_index(src)}_{i}"
            if tag not in garbage:
                garbage.append(tag)
            rules.append(TransitionRule(src, sym, rule.target, rule.direction,
                                        tag, math.sqrt(rule.weight.real)))
    one_way = spec.head_mode == "oneWay"
    return make_spec(
        "qfa", spec.head_mode, spec.states, spec.input_alphabet, spec.initial,
        spec.accepting, spec.rejecting, rules,
        garbage_alphabet=tuple(garbage),
        garbage_mode="rigid" if one_way else "flexible",
        name=f"{spec.name}|quantum",
    )


def lift_nfa_to_pfa(spec: MachineSpec) -> MachineSpec:
    """Unbounded-error probabilistic machine deciding an nfa's language.

    Nondeterministic choices become uniform coin tosses; every path that
    would reject splits evenly into accept/reject at the right endmarker,
    so acceptance probability exceeds 1/2 exactly when some nfa path
    accepts.
    """
    if spec.kind != "nfa" or spec.head_mode != "oneWay":
        raise SpecError("lift_nfa_to_pfa requires a one-way nfa")
    doomed = "~doomed"
    acc_sink, rej_sink = "~acc", "~rej"
    states = list(spec.states) + [doomed, acc_sink, rej_sink]
    accepting = set(spec.accepting) | {acc_sink}
    rejecting = set(spec.rejecting) | {rej_sink}
    by_key: dict[tuple[str, str], list[TransitionRule]] = {}
    for rule in spec.transitions:
        by_key.setdefault((rule.source, rule.read), []).append(rule)
    rules = []
    symbols = spec.readable_symbols
    for src in spec.states:
        if src in spec.accepting | spec.rejecting:
            continue
        for sym in symbols:
            branch = by_key.get((src, sym), [])
            n = len(branch)
            if sym == RIGHT_END:
                # last step: non-accepting continuations resolve by a coin
                if n == 0:
                    rules.append(TransitionRule(src, sym, acc_sink, 1, None, 0.5))
                    rules.append(TransitionRule(src, sym, rej_sink, 1, None, 0.5))
                    continue
                for rule in branch:
                    if rule.target in spec.accepting:
                        rules.append(TransitionRule(src, sym, rule.target, 1, None, 1.0 / n))
                    else:
                        rules.append(TransitionRule(src, sym, acc_sink, 1, None, 0.5 / n))
                        rules.append(TransitionRule(src, sym, rej_sink, 1, None, 0.5 / n))
                continue
            if n == 0:
                rules.append(TransitionRule(src, sym, doomed, 1, None, 1.0))
                continue
            for rule in branch:
                rules.append(TransitionRule(src, sym, rule.target, 1, None, 1.0 / n))
    for sym in symbols:
        if sym == RIGHT_END:
            rules.append(TransitionRule(doomed, sym, acc_sink, 1, None, 0.5))
            rules.append(TransitionRule(doomed, sym, rej_sink, 1, None, 0.5))
        else:
            rules.append(TransitionRule(doomed, sym, doomed, 1, None, 1.0))
    return make_spec("pfa", "oneWay", states, spec.input_alphabet, spec.initial,
                     accepting, rejecting, rules, name=f"{spec.name}|prob")


# ---------------------------------------------------------------------------
# rigid machines: sign decomposition and the pair-product machine
# ---------------------------------------------------------------------------

_PATH_GUARD = 10_000_000


@dataclass(frozen=True)
class SignSplit:
    """Exact path-sum decomposition of a rigid real-amplitude run."""

    p_plus: float
    p_minus: float
    p_acc: float
    p_rej: float


def _require_rigid_real(spec: MachineSpec):
    if spec.kind != "qfa" or spec.head_mode != "oneWay":
        raise SpecError("rigid real-amplitude machine required")
    for rule in spec.transitions:
        if abs(rule.weight.imag) > 1e-12:
            raise SpecError("rigid real-amplitude machine required")
        if rule.garbage is None:
            raise SpecError("rigid real-amplitude machine required")


def compute_sign_decomposition(spec: MachineSpec, x: str) -> SignSplit:
    """Enumerate all computation paths grouped by final surface configuration
    and amplitude sign.

    For a final configuration z (halting state, halt step, garbage string),
    f+(z) and f-(z) collect the positive/negative path amplitudes; then
    p_acc = sum over accepting z of (f+ - f-)^2 and the comparator pair is

        p_plus  = 1/2 sum_acc (f+^2 + f-^2) + sum_rej f+ f-
        p_minus = 1/2 sum_rej (f+^2 + f-^2) + sum_acc f+ f-

    whose ordering matches the sign of p_acc - p_rej.
    """
    _require_rigid_real(spec)
    rules = spec.rule_map()
    tape = tape_of(x)
    length = len(tape)
    branching = max((len(v) for v in rules.values()), default=1)
    if branching ** length > _PATH_GUARD:
        raise EngineError("path enumeration too large")
    # (state, step, garbage) -> [positive sum, negative sum], halting only
    table: dict[tuple, list[float]] = {}
    stack = [(spec.initial, 0, (), 1.0)]
    while stack:
        state, step, garbage, amp = stack.pop()
        if state in spec.halting:
            entry = table.setdefault((state, step, garbage), [0.0, 0.0])
            if amp > 0:
                entry[0] += amp
            elif amp < 0:
                entry[1] += -amp
            continue
        if step == length:
            continue  # ran out of tape without halting
        for rule in rules.get((state, tape[step]), ()):
            w = rule.weight.real
            if w == 0.0:
                continue
            stack.append((rule.target, step + 1, garbage + (rule.garbage,), amp * w))
    sum_acc_sq = sum_rej_sq = cross_acc = cross_rej = 0.0
    p_acc = p_rej = 0.0
    for (state, _, _), (fp, fm) in table.items():
        if state in spec.accepting:
            sum_acc_sq += fp * fp + fm * fm
            cross_acc += fp * fm
            p_acc += (fp - fm) ** 2
        else:
            sum_rej_sq += fp * fp + fm * fm
            cross_rej += fp * fm
            p_rej += (fp - fm) ** 2
    return SignSplit(
        p_plus=0.5 * sum_acc_sq + cross_rej,
        p_minus=0.5 * sum_rej_sq + cross_acc,
        p_acc=p_acc,
        p_rej=p_rej,
    )


def rigid_qfa_to_pfa(spec: MachineSpec, eps: float = 0.25) -> MachineSpec:
    """Probabilistic pair-path machine deciding like a rigid 1qfa.

    The machine samples two computation paths in lockstep (their garbage
    outputs must agree symbol by symbol), classifies completed same-outcome
    pairs by amplitude-sign parity, and resolves everything else by a fair
    coin at the right endmarker.  Acceptance probability lands at
    1/2 + z (p_acc - p_rej) / 2 for a positive scale z, so the
    unbounded-error decision equals the source machine's bounded-error
    decision on its promise.
    """
    _require_rigid_real(spec)
    if not (0.0 <= eps < 0.5):
        raise SpecError("error bound must lie in [0, 1/2)")
    rules = spec.rule_map()
    branching = max((len(v) for v in rules.values()), default=1)

    def pair_state(a, b, sign):
        return f"({a},{b},{'+' if sign > 0 else '-'})"

    dead = "~dead"
    acc_sink, rej_sink = "~acc", "~rej"
    live = [(a, b, s) for a in spec.states if a not in spec.halting
            for b in spec.states if b not in spec.halting for s in (1, -1)]
    states = [pair_state(*t) for t in live] + [dead, acc_sink, rej_sink]
    out: list[TransitionRule] = []
    symbols = spec.readable_symbols
    b2 = branching * branching
    for (a, b, sign) in live:
        src = pair_state(a, b, sign)
        for sym in symbols:
            ra = rules.get((a, sym), ())
            rb = rules.get((b, sym), ())
            used = 0.0
            for r1 in ra:
                for r2 in rb:
                    w = abs(r1.weight.real) * abs(r2.weight.real) / b2
                    if w == 0.0:
                        continue
                    if r1.garbage != r2.garbage:
                        continue  # pair paths must share the garbage record
                    used += w
                    s2 = sign * (1 if r1.weight.real > 0 else -1) * (1 if r2.weight.real > 0 else -1)
                    t1, t2 = r1.target, r2.target
                    h1, h2 = t1 in spec.halting, t2 in spec.halting
                    if h1 and h2 and t1 == t2:
                        t_acc = t1 in spec.accepting
                        plus_event = (t_acc and s2 > 0) or (not t_acc and s2 < 0)
                        out.append(TransitionRule(src, sym, acc_sink if plus_event else rej_sink,
                                                  1, None, w))
                    elif h1 or h2:
                        out.append(TransitionRule(src, sym, dead, 1, None, w))
                    else:
                        out.append(TransitionRule(src, sym, pair_state(t1, t2, s2), 1, None, w))
            leftover = 1.0 - used
            if sym == RIGHT_END:
                # unresolved mass flips the fair coin at the end of the tape
                if leftover > 1e-15:
                    out.append(TransitionRule(src, sym, acc_sink, 1, None, leftover / 2))
                    out.append(TransitionRule(src, sym, rej_sink, 1, None, leftover / 2))
            elif leftover > 1e-15:
                out.append(TransitionRule(src, sym, dead, 1, None, leftover))
    for sym in symbols:
        if sym == RIGHT_END:
            out.append(TransitionRule(dead, sym, acc_sink, 1, None, 0.5))
            out.append(TransitionRule(dead, sym, rej_sink, 1, None, 0.5))
        else:
            out.append(TransitionRule(dead, sym, dead, 1, None, 1.0))
    initial = pair_state(spec.initial, spec.initial, 1)
    return make_spec("pfa", "oneWay", states, spec.input_alphabet, initial,
                     {acc_sink}, {rej_sink}, out, name=f"{spec.name}|pairprob")
