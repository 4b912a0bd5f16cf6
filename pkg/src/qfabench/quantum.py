"""Quantum finite-automaton engines.

Two interchangeable engines are provided: an exact one tracking surface
configurations (state, head position, garbage string) with complex
amplitudes, and a garbage-traced one evolving a density operator over
(state, head position) where every garbage emission decoheres the branch.
After each evolution step both engines measure for halting, record the
accept/reject mass, and drop it without renormalizing the survivors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EngineError, SpecError
from .machines import (
    LEFT_END,
    RIGHT_END,
    TOL,
    MachineSpec,
    RunStats,
    TransitionRule,
    directions_for,
    make_spec,
    tape_of,
)

DEFAULT_MAX_STEPS = 1000
DEFAULT_RESIDUAL_TARGET = 1e-12
_PRUNE = 1e-16


def _edge_map(spec: MachineSpec):
    out: dict[tuple[str, str], list[TransitionRule]] = {}
    for rule in spec.transitions:
        out.setdefault((rule.source, rule.read), []).append(rule)
    return out


def _measure_exact(spec, amps):
    """Split a configuration->amplitude map into (acc, rej, survivors)."""
    acc = rej = 0.0
    live = {}
    for key, amp in amps.items():
        p = (amp.real * amp.real) + (amp.imag * amp.imag)
        if p < _PRUNE * _PRUNE:
            continue
        state = key[0]
        if state in spec.accepting:
            acc += p
        elif state in spec.rejecting:
            rej += p
        else:
            live[key] = amp
    return acc, rej, live


def _evolve_exact(spec, tape, amps, rules):
    length = len(tape)
    nxt: dict[tuple, complex] = {}
    for (state, pos, garbage), amp in amps.items():
        for rule in rules.get((state, tape[pos]), ()):
            key = (
                rule.target,
                (pos + rule.direction) % length,
                garbage if rule.garbage is None else garbage + (rule.garbage,),
            )
            nxt[key] = nxt.get(key, 0j) + amp * rule.weight
    return nxt


def simulate_1qfa(spec: MachineSpec, x: str) -> RunStats:
    """Measure-many run of a one-way machine: exactly |x|+2 steps."""
    if spec.kind != "qfa":
        raise EngineError("simulate_1qfa requires a qfa spec")
    if spec.head_mode != "oneWay":
        raise EngineError("simulate_1qfa requires a oneWay machine")
    stats = simulate_2qfa(spec, x, {"max_steps": len(x) + 2, "residual_target": -1.0})
    # the run is complete by definition; leftover mass means "no answer"
    stats.truncated = False
    if stats.residual > TOL:
        stats.residual_bound_note = f"{stats.residual:.3g} mass neither accepted nor rejected"
    return stats


def simulate_2qfa(spec: MachineSpec, x: str, opts: dict | None = None) -> RunStats:
    """Exact configuration-tracked run of a 1.5/2-way machine with garbage.

    Runs until the surviving mass drops to ``residual_target`` or
    ``max_steps`` is exhausted; in the latter case the returned stats carry
    ``truncated=True`` and the leftover mass in ``residual``.
    """
    if spec.kind != "qfa":
        raise EngineError("simulate_2qfa requires a qfa spec")
    opts = dict(opts or {})
    max_steps = int(opts.get("max_steps", DEFAULT_MAX_STEPS))
    residual_target = float(opts.get("residual_target", DEFAULT_RESIDUAL_TARGET))
    tape = tape_of(x)
    rules = _edge_map(spec)
    amps: dict[tuple, complex] = {(spec.initial, 0, ()): 1.0 + 0j}
    steps: list[tuple[float, float]] = []
    residual = 1.0
    for _ in range(max_steps):
        amps = _evolve_exact(spec, tape, amps, rules)
        acc, rej, amps = _measure_exact(spec, amps)
        steps.append((acc, rej))
        residual = sum(a.real * a.real + a.imag * a.imag for a in amps.values())
        if residual <= residual_target or not amps:
            break
    truncated = residual > max(residual_target, 0.0) and bool(amps)
    note = f"unaccounted surviving mass {residual:.3g}" if truncated else ""
    stats = RunStats.from_steps(steps, residual=residual, note=note, truncated=truncated)
    return stats


def simulate_2qfa_traced(spec: MachineSpec, x: str, opts: dict | None = None) -> RunStats:
    """Garbage-traced engine: density operator over (state, position).

    Each garbage emission acts as a decohering branch keyed by the emitted
    symbol, so the garbage register never has to be materialized.
    """
    if spec.kind != "qfa":
        raise EngineError("simulate_2qfa_traced requires a qfa spec")
    opts = dict(opts or {})
    max_steps = int(opts.get("max_steps", DEFAULT_MAX_STEPS))
    residual_target = float(opts.get("residual_target", DEFAULT_RESIDUAL_TARGET))
    tape = tape_of(x)
    length = len(tape)
    nq = len(spec.states)
    dim = nq * length
    sidx = {s: i for i, s in enumerate(spec.states)}

    def cfg(state, pos):
        return sidx[state] * length + pos

    # one Kraus operator per garbage tag (None = no write)
    tags = [None] + list(spec.garbage_alphabet)
    kraus = {t: np.zeros((dim, dim), dtype=complex) for t in tags}
    for rule in spec.transitions:
        for pos in range(length):
            if tape[pos] != rule.read:
                continue
            tgt = cfg(rule.target, (pos + rule.direction) % length)
            kraus[rule.garbage][tgt, cfg(rule.source, pos)] += rule.weight
    mats = [m for m in kraus.values()]

    acc_idx = [cfg(s, p) for s in spec.accepting for p in range(length)]
    rej_idx = [cfg(s, p) for s in spec.rejecting for p in range(length)]
    live_mask = np.ones(dim, dtype=bool)
    live_mask[acc_idx] = False
    live_mask[rej_idx] = False

    rho = np.zeros((dim, dim), dtype=complex)
    rho[cfg(spec.initial, 0), cfg(spec.initial, 0)] = 1.0
    steps: list[tuple[float, float]] = []
    residual = 1.0
    for _ in range(max_steps):
        rho = sum(m @ rho @ m.conj().T for m in mats)
        diag = np.real(np.diag(rho))
        acc = float(diag[acc_idx].sum()) if acc_idx else 0.0
        rej = float(diag[rej_idx].sum()) if rej_idx else 0.0
        rho = rho * np.outer(live_mask, live_mask)
        steps.append((acc, rej))
        residual = float(np.real(np.trace(rho)))
        if residual <= residual_target:
            break
    truncated = residual > max(residual_target, 0.0)
    note = f"unaccounted surviving mass {residual:.3g}" if truncated else ""
    return RunStats.from_steps(steps, residual=residual, note=note, truncated=truncated)


# ---------------------------------------------------------------------------
# well-formedness
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WellFormedWitness:
    state_a: str
    state_b: str
    symbol_a: str
    symbol_b: str
    input_length: int
    positions: tuple[int, int]
    deviation: float

    def __str__(self):
        return (
            f"one-step images of ({self.state_a!r}@{self.positions[0]}) and "
            f"({self.state_b!r}@{self.positions[1]}) on symbols "
            f"({self.symbol_a!r}, {self.symbol_b!r}), |x|={self.input_length}: "
            f"orthonormality off by {self.deviation:.3g}"
        )


def check_well_formed(spec: MachineSpec, max_len: int, tol: float = TOL):
    """Verify norm preservation of the one-step evolution on every input.

    Images of basis surface configurations must be pairwise orthonormal,
    with a freshly emitted garbage symbol acting as an orthogonal tag.
    Inner products only involve pairs of positions at cyclic distance at
    most two, and depend only on the two symbols there and the pattern of
    matching direction pairs, so each input length reduces to a handful of
    checks that are memoized across lengths.

    Returns ``None`` when every length up to ``max_len`` passes, else the
    first :class:`WellFormedWitness`.
    """
    if spec.kind != "qfa":
        raise EngineError("check_well_formed requires a qfa spec")
    rules = _edge_map(spec)
    dirs = directions_for(spec.head_mode)
    states = spec.states
    nq = len(states)
    tags = {g: i for i, g in enumerate([None, *spec.garbage_alphabet])}

    def image_blocks(symbol):
        # per source state: {(direction, tag) -> weight vector over targets}
        out = []
        for q in states:
            vec: dict[tuple[int, int], np.ndarray] = {}
            for rule in rules.get((q, symbol), ()):
                key = (rule.direction, tags[rule.garbage])
                if key not in vec:
                    vec[key] = np.zeros(nq, dtype=complex)
                vec[key][states.index(rule.target)] += rule.weight
            out.append(vec)
        return out

    blocks = {sym: image_blocks(sym) for sym in spec.readable_symbols}
    checked: set[tuple] = set()

    for n in range(max_len + 1):
        length = n + 2
        symbol_choices = {}
        for pos in range(length):
            if pos == 0:
                symbol_choices[pos] = (LEFT_END,)
            elif pos == length - 1:
                symbol_choices[pos] = (RIGHT_END,)
            else:
                symbol_choices[pos] = spec.input_alphabet
        for i in range(length):
            for j in range(length):
                match = tuple(
                    (d1, d2)
                    for d1 in dirs
                    for d2 in dirs
                    if (i + d1) % length == (j + d2) % length
                )
                if not match:
                    continue
                same = i == j
                for a in symbol_choices[i]:
                    for b in (symbol_choices[j] if not same else (a,)):
                        key = (a, b, match, same)
                        if key in checked:
                            continue
                        checked.add(key)
                        blk_a, blk_b = blocks[a], blocks[b]
                        expected = np.eye(nq) if same else np.zeros((nq, nq))
                        gram = np.zeros((nq, nq), dtype=complex)
                        for qi in range(nq):
                            for qj in range(nq):
                                s = 0j
                                for d1, d2 in match:
                                    for (dd, tag), va in blk_a[qi].items():
                                        if dd != d1:
                                            continue
                                        vb = blk_b[qj].get((d2, tag))
                                        if vb is None:
                                            continue
                                        s += np.vdot(va, vb)
                                gram[qi, qj] = s
                        dev = np.abs(gram - expected)
                        if dev.max() > tol:
                            qi, qj = np.unravel_index(int(dev.argmax()), dev.shape)
                            return WellFormedWitness(
                                states[qi], states[qj], a, b, n, (i, j), float(dev.max())
                            )
    return None


# ---------------------------------------------------------------------------
# super machines: superpositions of transition tables
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuantumTransitionTable:
    """Normalized superposition of transition tables (machines or encodings)."""

    entries: tuple[tuple[complex, object], ...]

    def __post_init__(self):
        entries = tuple((complex(a), t) for a, t in self.entries)
        object.__setattr__(self, "entries", entries)
        total = sum(abs(a) ** 2 for a, _ in entries)
        if abs(total - 1.0) > TOL:
            raise SpecError(f"table amplitudes have squared mass {total:.12g}, not 1")

    @property
    def encoded_length(self) -> int:
        return max((len(t) for _, t in self.entries if isinstance(t, str)), default=0)


def _combine_weighted(stats_list, weights):
    depth = max((s.steps_executed for s in stats_list), default=0)
    steps = []
    for i in range(depth):
        a = sum(w * s.per_step[i][0] for w, s in zip(weights, stats_list) if i < len(s.per_step))
        r = sum(w * s.per_step[i][1] for w, s in zip(weights, stats_list) if i < len(s.per_step))
        steps.append((a, r))
    residual = sum(w * s.residual for w, s in zip(weights, stats_list))
    truncated = any(s.truncated for s in stats_list)
    note = "; ".join(sorted({s.residual_bound_note for s in stats_list if s.residual_bound_note}))
    return RunStats.from_steps(steps, residual=residual, note=note, truncated=truncated)


def simulate_2sqfa(table: QuantumTransitionTable, skeleton: MachineSpec, x: str,
                   opts: dict | None = None) -> RunStats:
    """Run a super machine: decoherent mixture over its transition tables.

    The table register is part of the configuration and is never erased, so
    branches driven by distinct tables cannot interfere; the run statistics
    are the |amplitude|^2-weighted sums of the per-table runs.
    """
    from .qcompile import table_to_spec  # deferred: avoids an import cycle

    stats_list = []
    weights = []
    for amp, entry in table.entries:
        if isinstance(entry, MachineSpec):
            spec = entry
        elif isinstance(entry, str):
            try:
                spec = table_to_spec(entry, skeleton)
            except Exception as exc:
                raise EngineError(f"bad table entry: {exc}") from exc
        else:
            raise EngineError(f"bad table entry: unsupported type {type(entry).__name__}")
        if tuple(spec.states) != tuple(skeleton.states) or spec.input_alphabet != skeleton.input_alphabet:
            raise EngineError("bad table entry: decoded machine incompatible with skeleton")
        stats_list.append(simulate_2qfa(spec, x, opts))
        weights.append(abs(amp) ** 2)
    return _combine_weighted(stats_list, weights)


# ---------------------------------------------------------------------------
# random well-formed machines ("simple form")
# ---------------------------------------------------------------------------


def _haar_unitary(n, rng):
    z = (rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))) / math.sqrt(2)
    q, r = np.linalg.qr(z)
    return q @ np.diag(np.diag(r) / np.abs(np.diag(r)))


def _sparse_unitary(n, rng):
    perm = rng.permutation(n)
    u = np.zeros((n, n), dtype=complex)
    u[perm, np.arange(n)] = 1.0
    if n >= 2:
        i, j = rng.choice(n, size=2, replace=False)
        theta = rng.uniform(0, 2 * math.pi)
        phi = rng.uniform(0, 2 * math.pi)
        g = np.eye(n, dtype=complex)
        g[i, i] = math.cos(theta)
        g[i, j] = -math.sin(theta) * np.exp(1j * phi)
        g[j, i] = math.sin(theta) * np.exp(-1j * phi)
        g[j, j] = math.cos(theta)
        u = g @ u
    return u


def random_simple_qfa(n_states: int, alphabet=("a",), seed: int = 0,
                      head_mode: str = "twoWay", garbage_symbols: int = 0,
                      sparse: bool = False, name: str = "") -> MachineSpec:
    """Draw a well-formed machine in simple form.

    The head direction is a function of the target state and the garbage
    symbol (when any) a function of the target state as well, so any choice
    of per-symbol unitary blocks yields orthonormal one-step images; every
    transition then writes, which keeps garbage strings aligned across
    branches.  ``sparse=True`` swaps Haar blocks for permutation-plus-one-
    rotation blocks, capping the branching degree at two for path oracles.
    """
    if n_states < 3:
        raise SpecError("need at least one live state plus accept/reject")
    rng = np.random.default_rng(seed)
    states = tuple(f"q{i}" for i in range(n_states))
    accepting = {states[-2]}
    rejecting = {states[-1]}
    dirs = directions_for(head_mode)
    dir_of = {s: dirs[rng.integers(len(dirs))] for s in states}
    garbage = tuple(f"g{i}" for i in range(garbage_symbols))
    tag_of = {s: (garbage[rng.integers(garbage_symbols)] if garbage_symbols else None)
              for s in states}
    symbols = (LEFT_END,) + tuple(alphabet) + (RIGHT_END,)
    rules = []
    for sym in symbols:
        u = _sparse_unitary(n_states, rng) if sparse else _haar_unitary(n_states, rng)
        for col, src in enumerate(states):
            for row, tgt in enumerate(states):
                w = u[row, col]
                if abs(w) < 1e-12:
                    continue
                rules.append(TransitionRule(src, sym, tgt, dir_of[tgt], tag_of[tgt], w))
    return make_spec(
        "qfa", head_mode, states, tuple(alphabet), states[0], accepting, rejecting,
        rules, garbage_alphabet=garbage,
        garbage_mode="flexible" if garbage_symbols else "none",
        name=name or f"simple-{n_states}-{seed}",
    )
