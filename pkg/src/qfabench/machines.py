"""Unified machine descriptions and classical (dfa/nfa/pfa) engines.

A single :class:`MachineSpec` describes deterministic, nondeterministic,
probabilistic, and quantum finite automata, one-way or two-way, optionally
writing to a flexible or rigid garbage tape.  Input tapes carry the two
endmarkers and are circular: the cell to the right of the right endmarker
is the left endmarker again.
"""

from __future__ import annotations

import cmath
import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import EngineError, SpecError

LEFT_END = "¢"
RIGHT_END = "$"

#: default tolerance for probability/amplitude comparisons
TOL = 1e-9

KINDS = ("dfa", "nfa", "pfa", "qfa")
HEAD_MODES = ("oneWay", "oneFiveWay", "twoWay")
GARBAGE_MODES = ("none", "flexible", "rigid")

_DIRS_BY_MODE = {
    "oneWay": (1,),
    "oneFiveWay": (0, 1),
    "twoWay": (-1, 0, 1),
}


def directions_for(head_mode: str) -> tuple[int, ...]:
    return _DIRS_BY_MODE[head_mode]


@dataclass(frozen=True)
class TransitionRule:
    """One weighted transition.  ``garbage is None`` means no symbol written."""

    source: str
    read: str
    target: str
    direction: int = 1
    garbage: str | None = None
    weight: complex = 1.0 + 0.0j

    def __post_init__(self):
        object.__setattr__(self, "weight", complex(self.weight))


@dataclass(frozen=True)
class MachineSpec:
    kind: str
    head_mode: str
    garbage_mode: str
    states: tuple[str, ...]
    input_alphabet: tuple[str, ...]
    garbage_alphabet: tuple[str, ...]
    initial: str
    accepting: frozenset[str]
    rejecting: frozenset[str]
    transitions: tuple[TransitionRule, ...]
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(self.states))
        object.__setattr__(self, "input_alphabet", tuple(self.input_alphabet))
        object.__setattr__(self, "garbage_alphabet", tuple(self.garbage_alphabet))
        object.__setattr__(self, "accepting", frozenset(self.accepting))
        object.__setattr__(self, "rejecting", frozenset(self.rejecting))
        object.__setattr__(self, "transitions", tuple(self.transitions))

    # -- structural helpers -------------------------------------------------

    @property
    def halting(self) -> frozenset[str]:
        return self.accepting | self.rejecting

    @property
    def readable_symbols(self) -> tuple[str, ...]:
        """Symbols a rule may read: left endmarker, input symbols, right endmarker."""
        return (LEFT_END,) + self.input_alphabet + (RIGHT_END,)

    def state_index(self, state: str) -> int:
        return self.states.index(state)

    def rule_map(self) -> dict[tuple[str, str], tuple[TransitionRule, ...]]:
        out: dict[tuple[str, str], list[TransitionRule]] = {}
        for rule in self.transitions:
            out.setdefault((rule.source, rule.read), []).append(rule)
        return {k: tuple(v) for k, v in out.items()}

    def with_(self, **kwargs) -> "MachineSpec":
        return replace(self, **kwargs)


def tape_of(x: str | tuple) -> tuple[str, ...]:
    """The circular tape content for input ``x``: endmarkers around the symbols."""
    return (LEFT_END,) + tuple(x) + (RIGHT_END,)


# ---------------------------------------------------------------------------
# decision criteria
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DecisionCriterion:
    mode: str  # boundedError | unboundedError | nondetQuantum
    eps: float = 0.0

    def __post_init__(self):
        if self.mode not in ("boundedError", "unboundedError", "nondetQuantum"):
            raise SpecError(f"unknown criterion mode {self.mode!r}")
        if self.mode == "boundedError" and not (0.0 <= self.eps < 0.5):
            raise SpecError("bounded-error constant must lie in [0, 1/2)")


def bounded(eps: float) -> DecisionCriterion:
    return DecisionCriterion("boundedError", eps)


def unbounded() -> DecisionCriterion:
    return DecisionCriterion("unboundedError")


def nondet_quantum() -> DecisionCriterion:
    return DecisionCriterion("nondetQuantum")


# ---------------------------------------------------------------------------
# run statistics
# ---------------------------------------------------------------------------


@dataclass
class RunStats:
    """Per-step and cumulative halting probabilities of one run."""

    per_step: list[tuple[float, float]] = field(default_factory=list)
    p_acc: float = 0.0
    p_rej: float = 0.0
    residual: float = 1.0
    expected_runtime_lower: float = 0.0
    residual_bound_note: str = ""
    steps_executed: int = 0
    truncated: bool = False

    @classmethod
    def from_steps(cls, steps, residual=None, note="", truncated=False):
        p_acc = float(sum(a for a, _ in steps))
        p_rej = float(sum(r for _, r in steps))
        if residual is None:
            residual = 1.0 - p_acc - p_rej
        ert = float(sum((i + 1) * (a + r) for i, (a, r) in enumerate(steps)))
        return cls(
            per_step=[(float(a), float(r)) for a, r in steps],
            p_acc=p_acc,
            p_rej=p_rej,
            residual=float(residual),
            expected_runtime_lower=ert,
            residual_bound_note=note,
            steps_executed=len(steps),
            truncated=truncated,
        )

    def cumulative(self) -> list[tuple[float, float]]:
        acc = rej = 0.0
        out = []
        for a, r in self.per_step:
            acc += a
            rej += r
            out.append((acc, rej))
        return out


def decide(stats: RunStats, criterion: DecisionCriterion) -> str:
    """Map halting probabilities to accept/reject/fail under a criterion."""
    if criterion.mode == "boundedError":
        if stats.p_acc >= 1.0 - criterion.eps:
            return "accept"
        if stats.p_rej >= 1.0 - criterion.eps:
            return "reject"
        return "fail"
    if criterion.mode == "unboundedError":
        if stats.p_acc > 0.5:
            return "accept"
        if stats.p_rej >= 0.5:
            return "reject"
        return "fail"
    # nondeterministic-quantum: any acceptance amplitude at all
    return "accept" if stats.p_acc > 1e-12 else "reject"


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    code: str
    message: str


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, code: str, message: str):
        self.violations.append(Violation(code, message))

    def __iter__(self):
        return iter(self.violations)

    def raise_if_invalid(self):
        if not self.ok:
            lines = "; ".join(v.message for v in self.violations)
            raise SpecError(f"invalid machine spec: {lines}")


def validate_spec(spec: MachineSpec) -> ValidationReport:
    """Report every structural violation; an empty report means valid."""
    rep = ValidationReport()
    if spec.kind not in KINDS:
        rep.add("kind", f"unknown machine kind {spec.kind!r}")
    if spec.head_mode not in HEAD_MODES:
        rep.add("headMode", f"unknown head mode {spec.head_mode!r}")
        return rep
    if spec.garbage_mode not in GARBAGE_MODES:
        rep.add("garbageMode", f"unknown garbage mode {spec.garbage_mode!r}")

    state_set = set(spec.states)
    if len(state_set) != len(spec.states):
        rep.add("states", "duplicate state identifiers")
    if spec.initial not in state_set:
        rep.add("initial", f"initial state {spec.initial!r} not in state set")
    if not spec.accepting <= state_set:
        rep.add("accepting", "accepting states not all in state set")
    if not spec.rejecting <= state_set:
        rep.add("rejecting", "rejecting states not all in state set")
    if spec.accepting & spec.rejecting:
        rep.add("halting", "accepting and rejecting state sets intersect")

    for mark in (LEFT_END, RIGHT_END):
        if mark in spec.input_alphabet:
            rep.add("endmarker", f"endmarker {mark!r} may not appear in the input alphabet")
    if spec.garbage_mode == "none" and spec.garbage_alphabet:
        rep.add("garbage", "garbage alphabet declared but garbage mode is 'none'")

    allowed_dirs = set(directions_for(spec.head_mode))
    readable = set(spec.readable_symbols)
    garbage_set = set(spec.garbage_alphabet)
    for rule in spec.transitions:
        where = f"rule {rule.source!r} --{rule.read!r}--> {rule.target!r}"
        if rule.source not in state_set or rule.target not in state_set:
            rep.add("rule-states", f"{where}: unknown state")
        if rule.read not in readable:
            rep.add("rule-read", f"{where}: unreadable symbol")
        if rule.direction not in allowed_dirs:
            if rule.direction == 0 and spec.head_mode == "oneWay":
                rep.add("rule-dir", f"{where}: stationary move in oneWay machine")
            else:
                rep.add("rule-dir", f"{where}: direction {rule.direction} not allowed in {spec.head_mode}")
        if rule.garbage is not None and rule.garbage not in garbage_set:
            rep.add("rule-garbage", f"{where}: garbage symbol {rule.garbage!r} not in garbage alphabet")
        if rule.weight == 0:
            rep.add("rule-weight", f"{where}: zero-weight rules must be omitted")
        if spec.garbage_mode == "rigid":
            writes = rule.garbage is not None
            if writes != (rule.direction == 1):
                rep.add("rigid-sync", f"{where}: rigid garbage desynchronized (write iff head moves right)")
        if spec.kind in ("dfa", "nfa"):
            if rule.weight not in (1, 1.0, 1 + 0j):
                rep.add("rule-weight", f"{where}: dfa/nfa weights must be 1")
        elif spec.kind == "pfa":
            w = rule.weight
            if abs(w.imag) > TOL or not (-TOL <= w.real <= 1.0 + TOL):
                rep.add("rule-weight", f"{where}: pfa weight must be a real in [0,1]")

    by_key = spec.rule_map()
    if spec.kind == "dfa":
        for key, rules in by_key.items():
            if len(rules) > 1:
                rep.add("dfa-det", f"state {key[0]!r} has multiple rules on {key[1]!r}")
    if spec.kind == "pfa":
        for (src, sym), rules in by_key.items():
            total = sum(r.weight.real for r in rules)
            if abs(total - 1.0) > TOL:
                rep.add("pfa-row", f"probabilities out of ({src!r}, {sym!r}) sum to {total:.12g}, not 1")
    return rep


# ---------------------------------------------------------------------------
# deterministic / nondeterministic engines
# ---------------------------------------------------------------------------


def _step_cap(spec: MachineSpec, tape_len: int) -> int:
    # pigeonhole: a deterministic machine revisiting a (state, cell) pair loops
    return len(spec.states) * tape_len + 1


def run_dfa(spec: MachineSpec, x: str) -> str:
    """Walk the deterministic machine over ¢x$; 'undefined' marks stuck or looping runs."""
    if spec.kind != "dfa":
        raise EngineError("run_dfa requires a dfa spec")
    validate_spec(spec).raise_if_invalid()
    tape = tape_of(x)
    length = len(tape)
    rules = spec.rule_map()
    state, pos = spec.initial, 0
    limit = length if spec.head_mode == "oneWay" else _step_cap(spec, length)
    for _ in range(limit):
        matches = rules.get((state, tape[pos]))
        if not matches:
            return "undefined"
        rule = matches[0]
        state = rule.target
        pos = (pos + rule.direction) % length
        if state in spec.accepting:
            return "accept"
        if state in spec.rejecting:
            return "reject"
    return "undefined"


def run_nfa(spec: MachineSpec, x: str) -> str:
    """Accept iff some computation path reaches an accepting state.

    Two-way machines are explored by reachability over the (state, head
    position) configuration graph, which terminates regardless of loops.
    """
    if spec.kind != "nfa":
        raise EngineError("run_nfa requires an nfa spec")
    tape = tape_of(x)
    length = len(tape)
    rules = spec.rule_map()
    start = (spec.initial, 0)
    if spec.head_mode == "oneWay":
        # breadth-first over exactly |x|+2 layers
        frontier = {start}
        for _ in range(length):
            nxt = set()
            for state, pos in frontier:
                for rule in rules.get((state, tape[pos]), ()):
                    target = (rule.target, (pos + 1) % length)
                    if rule.target in spec.accepting:
                        return "accept"
                    if rule.target not in spec.halting:
                        nxt.add(target)
            frontier = nxt
        return "reject"
    seen = {start}
    stack = [start]
    while stack:
        state, pos = stack.pop()
        if state in spec.halting:
            continue
        for rule in rules.get((state, tape[pos]), ()):
            target = (rule.target, (pos + rule.direction) % length)
            if rule.target in spec.accepting:
                return "accept"
            if target not in seen:
                seen.add(target)
                stack.append(target)
    return "reject"


# ---------------------------------------------------------------------------
# probabilistic engine
# ---------------------------------------------------------------------------


def _pfa_forward(spec: MachineSpec, x: str, max_steps: int) -> RunStats:
    """Exact forward probability propagation over configurations."""
    tape = tape_of(x)
    length = len(tape)
    rules = spec.rule_map()
    dist: dict[tuple[str, int], float] = {(spec.initial, 0): 1.0}
    steps: list[tuple[float, float]] = []
    stuck = 0.0
    for _ in range(max_steps):
        if not dist:
            break
        nxt: dict[tuple[str, int], float] = {}
        acc = rej = 0.0
        for (state, pos), mass in dist.items():
            matches = rules.get((state, tape[pos]))
            if not matches:
                stuck += mass
                continue
            for rule in matches:
                m = mass * rule.weight.real
                if m == 0.0:
                    continue
                tgt = rule.target
                if tgt in spec.accepting:
                    acc += m
                elif tgt in spec.rejecting:
                    rej += m
                else:
                    key = (tgt, (pos + rule.direction) % length)
                    nxt[key] = nxt.get(key, 0.0) + m
        steps.append((acc, rej))
        dist = nxt
    live = sum(dist.values())
    note = ""
    if stuck > TOL:
        note = f"{stuck:.3g} probability stuck on ruleless configurations"
    stats = RunStats.from_steps(steps, residual=live + stuck, note=note, truncated=bool(dist))
    return stats


def _pfa_absorbing_solve(spec: MachineSpec, x: str) -> RunStats:
    """Halting probabilities and expected runtime via the fundamental matrix."""
    tape = tape_of(x)
    length = len(tape)
    rules = spec.rule_map()

    # reachable transient configurations
    start = (spec.initial, 0)
    if spec.initial in spec.halting:
        raise EngineError("invalid probabilistic spec: initial state is halting")
    order = [start]
    index = {start: 0}
    edges: list[list[tuple[int, float]]] = []
    absorb: list[tuple[float, float]] = []
    i = 0
    while i < len(order):
        state, pos = order[i]
        row: list[tuple[int, float]] = []
        acc = rej = 0.0
        for rule in rules.get((state, tape[pos]), ()):
            w = rule.weight.real
            if w == 0.0:
                continue
            if rule.target in spec.accepting:
                acc += w
            elif rule.target in spec.rejecting:
                rej += w
            else:
                key = (rule.target, (pos + rule.direction) % length)
                if key not in index:
                    index[key] = len(order)
                    order.append(key)
                row.append((index[key], w))
        edges.append(row)
        absorb.append((acc, rej))
        i += 1

    n = len(order)
    q = np.zeros((n, n))
    for src, row in enumerate(edges):
        total = absorb[src][0] + absorb[src][1]
        for tgt, w in row:
            q[src, tgt] += w
            total += w
        if abs(total - 1.0) > 1e-7:
            raise EngineError("invalid probabilistic spec: non-stochastic row encountered")
    r = np.array(absorb)  # (n, 2): acceptance / rejection mass per step
    eye = np.eye(n)
    try:
        b = np.linalg.solve(eye - q, r)
        t = np.linalg.solve(eye - q, np.ones(n))
    except np.linalg.LinAlgError as exc:
        raise EngineError("invalid probabilistic spec: singular absorbing system") from exc
    if not np.all(np.isfinite(b)) or np.linalg.norm((eye - q) @ b - r) > 1e-6:
        raise EngineError("invalid probabilistic spec: singular absorbing system")
    p_acc, p_rej = float(b[0, 0]), float(b[0, 1])
    stats = RunStats(
        per_step=[],
        p_acc=p_acc,
        p_rej=p_rej,
        residual=1.0 - p_acc - p_rej,
        expected_runtime_lower=float(t[0]),
        residual_bound_note="closed-form absorbing solve; per-step trace omitted",
        steps_executed=0,
        truncated=False,
    )
    return stats


def run_pfa(spec: MachineSpec, x: str, opts: dict | None = None) -> RunStats:
    """Exact halting statistics of a probabilistic machine.

    One-way machines run the forward propagation for exactly |x|+2 steps.
    Two-way machines solve the absorbing Markov chain over (state, position)
    configurations; pass ``opts={"method": "power", "max_steps": N}`` to force
    the iterative engine with a residual report instead.
    """
    if spec.kind not in ("pfa", "dfa"):
        raise EngineError("run_pfa requires a pfa spec")
    report = validate_spec(spec)
    if any(v.code in ("pfa-row", "rule-weight") for v in report):
        raise EngineError("invalid probabilistic spec")
    opts = dict(opts or {})
    if spec.head_mode == "oneWay":
        return _pfa_forward(spec, x, len(x) + 2)
    if opts.get("method") == "power":
        return _pfa_forward(spec, x, int(opts.get("max_steps", 10_000)))
    return _pfa_absorbing_solve(spec, x)


# ---------------------------------------------------------------------------
# small constructors used across the package
# ---------------------------------------------------------------------------


def make_spec(kind, head_mode, states, input_alphabet, initial, accepting,
              rejecting, transitions, garbage_alphabet=(), garbage_mode=None,
              name="") -> MachineSpec:
    if garbage_mode is None:
        garbage_mode = "flexible" if garbage_alphabet else "none"
    spec = MachineSpec(
        kind=kind,
        head_mode=head_mode,
        garbage_mode=garbage_mode,
        states=tuple(states),
        input_alphabet=tuple(input_alphabet),
        garbage_alphabet=tuple(garbage_alphabet),
        initial=initial,
        accepting=frozenset(accepting),
        rejecting=frozenset(rejecting),
        transitions=tuple(transitions),
        name=name,
    )
    return spec


def all_inputs(alphabet, max_len):
    """Every string over ``alphabet`` up to length ``max_len``, shortest first."""
    for n in range(max_len + 1):
        for tup in itertools.product(alphabet, repeat=n):
            yield "".join(tup)


def phase_scaled(spec: MachineSpec, theta: float) -> MachineSpec:
    """Multiply every transition weight by exp(i*theta) (used by phase tests)."""
    factor = cmath.exp(1j * theta)
    rules = tuple(replace(r, weight=r.weight * factor) for r in spec.transitions)
    return spec.with_(transitions=rules)
