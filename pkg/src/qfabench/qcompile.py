"""Gate-level compilation: decomposing transition unitaries into {CNOT, H, T}
circuits and encoding whole transition tables as strings.

Circuits are flat series of placements ``(offset k, gate G)`` meaning
``I^{k} (x) G (x) I^{rest}``; a CNOT placement acts on the adjacent wire pair
(k, k+1) with wire k as control.  Wire 0 carries the most significant bit of
a basis index.  A circuit string has the shape ``1^k # <G>`` per placement,
``##`` between placements, and ``###`` between table rows, with gate codes
<I>=1, <CNOT>=2, <H>=3, <T>=4.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import CompileError, SpecError, TableParseError
from .machines import MachineSpec, TransitionRule

SQ2 = 1.0 / math.sqrt(2.0)


@dataclass(frozen=True)
class GateDef:
    tag: str
    code: str
    qubits: int
    matrix: np.ndarray

    def __repr__(self):
        return f"<gate {self.tag}>"


GATE_I = GateDef("I", "1", 1, np.eye(2, dtype=complex))
GATE_CNOT = GateDef(
    "CNOT", "2", 2,
    np.array([[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]], dtype=complex),
)
GATE_H = GateDef("H", "3", 1, np.array([[SQ2, SQ2], [SQ2, -SQ2]], dtype=complex))
GATE_T = GateDef("T", "4", 1, np.array([[1, 0], [0, np.exp(1j * math.pi / 4)]], dtype=complex))

GATES = {g.tag: g for g in (GATE_I, GATE_CNOT, GATE_H, GATE_T)}
GATE_BY_CODE = {g.code: g for g in GATES.values()}


@dataclass(frozen=True)
class Circuit:
    qubit_count: int
    placements: tuple[tuple[int, GateDef], ...]

    def __post_init__(self):
        object.__setattr__(self, "placements", tuple(self.placements))
        for k, gate in self.placements:
            if k < 0 or k + gate.qubits > self.qubit_count:
                raise SpecError(f"placement ({k}, {gate.tag}) does not fit on {self.qubit_count} wires")

    def __len__(self):
        return len(self.placements)

    def apply(self, vec: np.ndarray) -> np.ndarray:
        out = np.asarray(vec, dtype=complex)
        dim = 1 << self.qubit_count
        if out.shape != (dim,):
            raise SpecError("state vector has the wrong dimension")
        for k, gate in self.placements:
            s = gate.qubits
            left = 1 << k
            mid = 1 << s
            right = dim // (left * mid)
            out = out.reshape(left, mid, right)
            out = np.einsum("ij,ajb->aib", gate.matrix, out)
            out = out.reshape(dim)
        return out

    def state(self) -> np.ndarray:
        start = np.zeros(1 << self.qubit_count, dtype=complex)
        start[0] = 1.0
        return self.apply(start)

    def unitary(self) -> np.ndarray:
        dim = 1 << self.qubit_count
        cols = [self.apply(np.eye(dim, dtype=complex)[:, j]) for j in range(dim)]
        return np.stack(cols, axis=1)


# ---------------------------------------------------------------------------
# circuit / table string codec
# ---------------------------------------------------------------------------

_CODES = "1234"


def encode_circuit(circuit: Circuit | list) -> str:
    placements = circuit.placements if isinstance(circuit, Circuit) else circuit
    parts = []
    for k, gate in placements:
        gate = gate if isinstance(gate, GateDef) else GATES[gate]
        parts.append("1" * k + "#" + gate.code)
    return "##".join(parts)


def encode_rows(rows: list[list]) -> str:
    return "###".join(encode_circuit(r) if not isinstance(r, str) else r for r in rows)


def _decode_rows(text: str) -> list[list[tuple[int, GateDef]]]:
    """Scanner for the placement/row grammar.

    A k=0 placement starts with '#', which visually merges with a preceding
    separator run; the scanner resolves such runs by preferring the reading
    whose separator length is legal, trying the "1-run belongs to the next
    placement" reading first.
    """
    rows: list[list[tuple[int, GateDef]]] = [[]]
    pos = 0
    n_chars = len(text)
    first = True

    def run(ch, start):
        i = start
        while i < n_chars and text[i] == ch:
            i += 1
        return i - start

    def sep_ok(n):
        return n == 2 or (n >= 3 and n % 3 == 0)

    def commit_separator(n, at):
        nonlocal first
        if first:
            if n == 0:
                first = False
                return
            if n % 3 != 0:
                raise TableParseError("dangling separator", at)
            for _ in range(n // 3):
                rows.append([])
            first = False
            return
        if n == 2:
            return
        if n >= 3 and n % 3 == 0:
            for _ in range(n // 3):
                rows.append([])
            return
        raise TableParseError("dangling separator", at)

    while pos < n_chars:
        sep_at = pos
        n_sep = run("#", pos)
        pos += n_sep
        ones_at = pos
        n_ones = run("1", pos)
        pos += n_ones
        if pos >= n_chars:
            if n_ones == 0:
                # trailing separators close empty rows
                if n_sep == 0:
                    break
                if first or n_sep % 3 != 0:
                    raise TableParseError("dangling separator", sep_at)
                for _ in range(n_sep // 3):
                    rows.append([])
                break
            # the final 1 must be a gate code of a k=0 placement
            if n_ones == 1 and n_sep >= 1 and (sep_ok(n_sep - 1) or (first and (n_sep - 1) % 3 == 0)):
                commit_separator(n_sep - 1, sep_at)
                rows[-1].append((0, GATE_I))
                break
            raise TableParseError("unterminated placement", ones_at)
        ch = text[pos]
        if ch == "#" and n_ones > 0:
            code_at = pos + 1
            code_ch = text[code_at] if code_at < n_chars else ""
            plain_sep_ok = sep_ok(n_sep) or (first and (n_sep == 0 or n_sep % 3 == 0))
            if code_ch in _CODES and plain_sep_ok:
                commit_separator(n_sep, sep_at)
                rows[-1].append((n_ones, GATE_BY_CODE[code_ch]))
                pos = code_at + 1
                continue
            # reinterpret the single 1 as the code of a k=0 placement
            if n_ones == 1 and n_sep >= 1 and (sep_ok(n_sep - 1) or (first and (n_sep - 1) % 3 == 0)):
                commit_separator(n_sep - 1, sep_at)
                rows[-1].append((0, GATE_I))
                continue
            if code_ch not in _CODES:
                raise TableParseError("unknown gate code", code_at)
            raise TableParseError("dangling separator", sep_at)
        if n_ones > 0:
            raise TableParseError("unknown gate code", pos)
        # k = 0 placement: its '#' is the last one of the separator run
        if n_sep < 1:
            raise TableParseError("unexpected character", pos)
        if ch not in _CODES:
            raise TableParseError("unknown gate code", pos)
        if not (sep_ok(n_sep - 1) or (first and (n_sep - 1) % 3 == 0) or (first and n_sep - 1 == 0)):
            raise TableParseError("dangling separator", sep_at)
        commit_separator(n_sep - 1, sep_at)
        rows[-1].append((0, GATE_BY_CODE[ch]))
        pos += 1
    return rows


def decode_circuit(text: str, qubit_count: int) -> Circuit:
    rows = _decode_rows(text)
    if len(rows) != 1:
        raise TableParseError("row separator inside a single circuit", text.find("###"))
    return Circuit(qubit_count, tuple(rows[0]))


# ---------------------------------------------------------------------------
# two-level decomposition
# ---------------------------------------------------------------------------


def _two_level(dim, i, j, block):
    m = np.eye(dim, dtype=complex)
    m[i, i] = block[0, 0]
    m[i, j] = block[0, 1]
    m[j, i] = block[1, 0]
    m[j, j] = block[1, 1]
    return m


def two_level_decompose(u: np.ndarray, tol: float = 1e-9) -> list[np.ndarray]:
    """Factor a unitary into two-level unitaries.

    The product of the returned factors, in list order, reconstructs the
    input.  At most d(d-1)/2 factors are produced for a d-dimensional input;
    the identity yields an empty list.
    """
    u = np.asarray(u, dtype=complex)
    dim = u.shape[0]
    if u.ndim != 2 or u.shape != (dim, dim) or \
            np.linalg.norm(u @ u.conj().T - np.eye(dim)) > max(tol, 1e-9):
        raise CompileError("two_level_decompose requires a unitary matrix")
    work = u.copy()
    elims: list[tuple[int, int, np.ndarray]] = []
    for col in range(dim - 1):
        for row in range(col + 1, dim):
            b = work[row, col]
            if abs(b) <= 1e-13:
                work[row, col] = 0.0
                continue
            a = work[col, col]
            norm = math.hypot(abs(a), abs(b))
            # maps (a, b) -> (norm, 0) and leaves the diagonal real positive
            g = np.array([[np.conj(a) / norm, np.conj(b) / norm],
                          [-b / norm, a / norm]], dtype=complex)
            work = _two_level(dim, col, row, g) @ work
            elims.append((col, row, g))
    # G_m ... G_1 u = D, hence u = G_1^+ G_2^+ ... G_m^+ D
    diag = np.diag(work).copy()
    blocks = [(i, j, g.conj().T) for (i, j, g) in elims]
    off = [k for k in range(dim) if abs(diag[k] - 1.0) > 1e-13]
    if len(off) == 1 and blocks and off[0] in blocks[-1][:2]:
        # absorb a lone leftover phase into the trailing factor on its pair
        i, j, blk = blocks[-1]
        phase = np.diag([diag[i], diag[j]])
        blocks[-1] = (i, j, blk @ phase)
    elif off:
        k = 0
        while k < len(off):
            if k + 1 < len(off):
                i, j = off[k], off[k + 1]
                blk = np.diag([diag[i], diag[j]])
            else:
                i = off[k]
                j = i + 1 if i + 1 < dim else i - 1
                lo, hi = min(i, j), max(i, j)
                blk = np.diag([diag[lo] if lo == i else 1.0,
                               diag[hi] if hi == i else 1.0])
                i, j = lo, hi
            blocks.append((i, j, blk))
            k += 2
    factors = [_two_level(dim, i, j, blk) for (i, j, blk) in blocks]
    return [f for f in factors if np.abs(f - np.eye(dim)).max() > 1e-13]


# ---------------------------------------------------------------------------
# word arithmetic over the {H, T} generators
# ---------------------------------------------------------------------------

_H2 = GATE_H.matrix
_T2 = GATE_T.matrix
_WORD_GATE = {"H": _H2, "T": _T2}


def word_to_matrix(word: str) -> np.ndarray:
    """Matrix of a gate word; the first letter acts first on the state."""
    m = np.eye(2, dtype=complex)
    for ch in word:
        m = _WORD_GATE[ch] @ m
    return m


def _word_tokens(word: str):
    """Runs of T (mod 8) interleaved with H's."""
    tokens = []
    run = 0
    for ch in word:
        if ch == "T":
            run += 1
        else:
            if run % 8:
                tokens.append(("T", run % 8))
            run = 0
            tokens.append(("H", 1))
    if run % 8:
        tokens.append(("T", run % 8))
    return tokens


def simplify_word(word: str) -> str:
    """Cancel HH and T^8 exactly; the word matrix is unchanged."""
    stack: list[list] = []  # [char, count]
    for ch in word:
        if stack and stack[-1][0] == ch:
            stack[-1][1] += 1
            if ch == "H" and stack[-1][1] == 2:
                stack.pop()
            elif ch == "T" and stack[-1][1] == 8:
                stack.pop()
        else:
            stack.append([ch, 1])
    # cancellations may cascade across the removed block
    out = "".join(c * n for c, n in stack)
    return out if out == word else simplify_word(out)


def invert_word(word: str) -> str:
    """Wordwise inverse: H is self-inverse, a T-run of k inverts to 8-k."""
    parts = []
    for ch, n in reversed(_word_tokens(word)):
        if ch == "H":
            parts.append("H")
        else:
            parts.append("T" * ((8 - n) % 8))
    return "".join(parts)


def projective_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Operator-norm distance minimized over a global phase (2x2 unitaries)."""
    t = abs(np.trace(a.conj().T @ b))
    return math.sqrt(max(0.0, 2.0 - t))


def operator_distance(a: np.ndarray, b: np.ndarray) -> float:
    """True operator-norm distance between two 2x2 unitaries."""
    m = a.conj().T @ b
    tr = np.trace(m)
    det = np.linalg.det(m)
    disc = np.sqrt(tr * tr - 4.0 * det + 0j)
    eigs = ((tr + disc) / 2.0, (tr - disc) / 2.0)
    return float(max(abs(1.0 - e) for e in eigs))


# ---------------------------------------------------------------------------
# epsilon-net over {H, T} words
# ---------------------------------------------------------------------------

_BASE_NET_LENGTH = 16
_DEEP_NET_LENGTH = 30
_SU2_SEED_LENGTH = 14
_SU2_SEED_CAP = 1200
_NET_CACHE: dict[str, tuple] = {}


def _cache_dir():
    root = os.environ.get("QFABENCH_CACHE_DIR") or os.path.join(
        os.path.expanduser("~"), ".cache", "qfabench")
    return root


def _canonical_key(m: np.ndarray) -> bytes:
    # phase-normalize on the largest entry, then round
    flat = m.reshape(4)
    idx = int(np.argmax(np.abs(flat)))
    phase = flat[idx] / abs(flat[idx])
    mc = np.round(m / phase, 4) + 0.0
    return mc.tobytes()


def _enumerate_words(max_len: int):
    """Breadth-first walk of the {H,T} Cayley graph, deduplicated projectively.

    Only newly seen group elements are extended; a word that collapses onto a
    shorter one contributes nothing new since projective equality is a
    congruence for right multiplication.
    """
    words = [""]
    mats = [np.eye(2, dtype=complex)]
    seen = {_canonical_key(mats[0])}
    frontier = [("", mats[0])]
    for _ in range(max_len):
        nxt = []
        for word, mat in frontier:
            for ch, g in (("H", _H2), ("T", _T2)):
                m2 = g @ mat
                key = _canonical_key(m2)
                if key not in seen:
                    seen.add(key)
                    words.append(word + ch)
                    mats.append(m2)
                    nxt.append((word + ch, m2))
        frontier = nxt
    return words, np.stack(mats)


def _load_cached(tag, builder):
    if tag in _NET_CACHE:
        return _NET_CACHE[tag]
    path = os.path.join(_cache_dir(), f"{tag}.npz")
    try:
        data = np.load(path, allow_pickle=False)
        words = [str(w) for w in data["words"]]
        mats = data["mats"]
        _NET_CACHE[tag] = (words, mats)
        return _NET_CACHE[tag]
    except Exception:
        pass
    words, mats = builder()
    _NET_CACHE[tag] = (words, mats)
    try:
        os.makedirs(_cache_dir(), exist_ok=True)
        np.savez_compressed(os.path.join(_cache_dir(), f"{tag}.npz"),
                            words=np.array(words), mats=mats)
    except Exception:
        pass
    return _NET_CACHE[tag]


def basic_net():
    """Projective lookup net seeded by words up to length 16 and extended by
    the Cayley walk to length 30 (the walk only keeps new group elements, so
    deeper enumeration stays cheap)."""
    return _load_cached(f"net{_DEEP_NET_LENGTH}", lambda: _enumerate_words(_DEEP_NET_LENGTH))


def _build_su2_net():
    words, mats = basic_net()
    out_words = []
    out_mats = []
    # words that land in SU(2) exactly (determinant one)
    dets = mats[:, 0, 0] * mats[:, 1, 1] - mats[:, 0, 1] * mats[:, 1, 0]
    for i in np.nonzero(np.abs(dets - 1.0) < 1e-9)[0]:
        out_words.append(words[i])
        out_mats.append(mats[i])
    # group commutators are exactly phase-free: [a, b] = a b a^-1 b^-1
    seed_idx = [i for i, w in enumerate(words) if 0 < len(w) <= _SU2_SEED_LENGTH]
    seed_idx = seed_idx[:_SU2_SEED_CAP]
    seen: set[bytes] = {np.round(m, 4).tobytes() for m in out_mats}
    seed_mats = mats[seed_idx]
    seed_words = [words[i] for i in seed_idx]
    inv_words = [invert_word(w) for w in seed_words]
    n = len(seed_idx)
    for i in range(n):
        mi = seed_mats[i]
        mi_inv = mi.conj().T
        # vectorized over j: c_j = mi @ mj @ mi^-1 @ mj^-1
        a = np.einsum("ab,nbc->nac", mi, seed_mats)
        b = np.einsum("nab,bc->nac", a, mi_inv)
        cs = np.einsum("nab,ncb->nac", b, np.conj(seed_mats))
        for j in range(n):
            if i == j:
                continue
            c = cs[j]
            key = np.round(c, 4).tobytes()
            if key in seen:
                continue
            seen.add(key)
            # first letter acts first: concatenate in reverse product order
            out_words.append(inv_words[j] + inv_words[i] + seed_words[j] + seed_words[i])
            out_mats.append(c)
    return out_words, np.stack(out_mats)


def su2_net():
    """Phase-exact lookup net: words whose matrices lie in SU(2)."""
    return _load_cached(f"su2net{_BASE_NET_LENGTH}_{_SU2_SEED_LENGTH}", _build_su2_net)


def _quaternions(su2_mats: np.ndarray) -> np.ndarray:
    """Unit 4-vectors of SU(2) matrices; the Euclidean distance between two
    of them equals the operator-norm distance of the matrices."""
    return np.stack([
        np.real(su2_mats[:, 0, 0]),
        np.imag(su2_mats[:, 0, 0]),
        np.real(su2_mats[:, 0, 1]),
        np.imag(su2_mats[:, 0, 1]),
    ], axis=1)


class _Net:
    """Nearest-word lookup over the net via a KD-tree on quaternions.

    In projective mode both signs of each SU(2) representative are indexed,
    which makes the Euclidean query metric exactly the phase-free operator
    distance; in phase-exact mode a single sign is indexed and the metric is
    the true operator distance.
    """

    def __init__(self, phase_exact: bool):
        from scipy.spatial import cKDTree

        self.phase_exact = phase_exact
        self.words, self.mats = su2_net() if phase_exact else basic_net()
        dets = (self.mats[:, 0, 0] * self.mats[:, 1, 1]
                - self.mats[:, 0, 1] * self.mats[:, 1, 0])
        su2 = self.mats / np.sqrt(dets)[:, None, None]
        pts = _quaternions(su2)
        if phase_exact:
            self.tree = cKDTree(pts)
            self.index_map = np.arange(len(self.words))
        else:
            self.tree = cKDTree(np.concatenate([pts, -pts]))
            self.index_map = np.concatenate([np.arange(len(self.words))] * 2)

    def lookup(self, target):
        t = _to_su2(np.asarray(target, dtype=complex))
        q = np.array([t[0, 0].real, t[0, 0].imag, t[0, 1].real, t[0, 1].imag])
        dist, i = self.tree.query(q)
        idx = int(self.index_map[int(i)])
        return self.words[idx], self.mats[idx], float(dist)


@lru_cache(maxsize=2)
def _net(phase_exact: bool) -> _Net:
    return _Net(phase_exact)


# ---------------------------------------------------------------------------
# group-commutator decomposition and the Solovay-Kitaev recursion
# ---------------------------------------------------------------------------

_PAULI = (
    np.array([[0, 1], [1, 0]], dtype=complex),
    np.array([[0, -1j], [1j, 0]], dtype=complex),
    np.array([[1, 0], [0, -1]], dtype=complex),
)


def _su2_axis_angle(m: np.ndarray):
    ct = float(np.real(np.trace(m))) / 2.0
    ct = max(-1.0, min(1.0, ct))
    theta = 2.0 * math.acos(ct)
    s = math.sin(theta / 2.0)
    if s < 1e-12:
        return np.array([0.0, 0.0, 1.0]), theta
    n = np.array([
        -float(np.imag(m[0, 1])),
        -float(np.real(m[0, 1])),
        -float(np.imag(m[0, 0])),
    ]) / s
    norm = np.linalg.norm(n)
    return (n / norm if norm > 0 else np.array([0.0, 0.0, 1.0])), theta


def _su2_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    sigma = axis[0] * _PAULI[0] + axis[1] * _PAULI[1] + axis[2] * _PAULI[2]
    return math.cos(angle / 2.0) * np.eye(2, dtype=complex) - 1j * math.sin(angle / 2.0) * sigma


def _rotation_between(a, b):
    """SU(2) element whose adjoint action takes axis a to axis b."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    dot = float(np.dot(a, b))
    cross = np.cross(a, b)
    nc = np.linalg.norm(cross)
    if nc < 1e-12:
        if dot > 0:
            return np.eye(2, dtype=complex)
        # antipodal: rotate by pi about any perpendicular axis
        perp = np.cross(a, [1.0, 0.0, 0.0])
        if np.linalg.norm(perp) < 1e-6:
            perp = np.cross(a, [0.0, 1.0, 0.0])
        return _su2_from_axis_angle(perp, math.pi)
    angle = math.atan2(nc, dot)
    return _su2_from_axis_angle(cross / nc, angle)


def _gc_decompose(delta: np.ndarray):
    """Balanced group-commutator factors of an SU(2) matrix near identity."""
    axis, theta = _su2_axis_angle(delta)
    st = math.sin(theta / 2.0)
    if st < 1e-14:
        eye = np.eye(2, dtype=complex)
        return eye, eye
    # solve sin(theta/2) = 2 a sqrt(1-a^2) with a = sin^2(phi/2)
    y = (1.0 - math.sqrt(max(0.0, 1.0 - st * st))) / 2.0
    a = math.sqrt(y)
    phi = 2.0 * math.asin(math.sqrt(a))
    v0 = _su2_from_axis_angle([1.0, 0.0, 0.0], phi)
    w0 = _su2_from_axis_angle([0.0, 1.0, 0.0], phi)
    k = v0 @ w0 @ v0.conj().T @ w0.conj().T
    k_axis, _ = _su2_axis_angle(k)
    s = _rotation_between(k_axis, axis)
    v = s @ v0 @ s.conj().T
    w = s @ w0 @ s.conj().T
    return v, w


def _to_su2(u: np.ndarray) -> np.ndarray:
    det = np.linalg.det(u)
    return u / np.sqrt(det)


_SK_MAX_DEPTH = 7


def _sk_depth(target: np.ndarray, depth: int, net: _Net):
    """Classic fixed-depth Solovay-Kitaev recursion.

    Commutator words are exactly phase-free, so in phase-exact mode the
    accumulated matrix never leaves SU(2) once the base word is chosen there.
    """
    if depth == 0:
        word, mat, _ = net.lookup(target)
        return word, mat
    w_prev, m_prev = _sk_depth(target, depth - 1, net)
    delta = _to_su2(target @ m_prev.conj().T)
    if float(np.real(np.trace(delta))) < 0.0:
        delta = -delta  # pick the rotation of angle <= pi
    v, w = _gc_decompose(delta)
    wv, mv = _sk_depth(v, depth - 1, net)
    ww, mw = _sk_depth(w, depth - 1, net)
    # first letter acts first, so concatenation composes in reverse
    word = w_prev + invert_word(ww) + invert_word(wv) + ww + wv
    mat = mv @ mw @ mv.conj().T @ mw.conj().T @ m_prev
    return word, mat


def _sk_synthesize(target: np.ndarray, eps: float, phase_exact: bool):
    net = _net(phase_exact)
    dist = operator_distance if phase_exact else projective_distance
    best = None
    for depth in range(_SK_MAX_DEPTH + 1):
        word, mat = _sk_depth(target, depth, net)
        d = dist(mat, target)
        if best is None or d < best[2]:
            best = (word, mat, d)
        if best[2] <= eps:
            return best[0], best[1]
    raise CompileError(
        f"gate synthesis stalled at distance {best[2]:.3g} > {eps:.3g}; "
        "the base net is too coarse for this accuracy")


def sk_approx(target: np.ndarray, eps: float) -> str:
    """Gate word over {H, T} within projective distance eps of the target.

    The distance ignores a global phase: dist(A, B) = min over phases of
    the operator norm of A - e^{i phase} B.  Word lengths follow the usual
    Solovay-Kitaev log^c(1/eps) growth; the measured exponent of this
    implementation is recorded in the package README.
    """
    if not (0.0 < eps <= 0.5):
        raise CompileError("sk_approx requires eps in (0, 0.5]")
    target = np.asarray(target, dtype=complex)
    if target.shape != (2, 2) or np.linalg.norm(
            target @ target.conj().T - np.eye(2)) > 1e-8:
        raise CompileError("sk_approx requires a single-qubit unitary")
    word, _ = _sk_synthesize(target, eps, phase_exact=False)
    return simplify_word(word) if len(word) < 400_000 else word


def sk_approx_exact_phase(target: np.ndarray, eps: float) -> str:
    """Like sk_approx, but the word matrix tracks the SU(2) target including
    its global phase (needed when circuit outputs must interfere)."""
    target = _to_su2(np.asarray(target, dtype=complex))
    word, _ = _sk_synthesize(target, eps, phase_exact=True)
    return word


# ---------------------------------------------------------------------------
# state preparation: multiplexed-rotation lowering
# ---------------------------------------------------------------------------

_ANGLE_TOL = 1e-13


def _zyz_angles(g: np.ndarray):
    """Angles with g = Rz(phi) Ry(theta) Rz(psi), exact for SU(2) input."""
    theta = 2.0 * math.atan2(abs(g[1, 0]), abs(g[0, 0]))
    if abs(g[1, 0]) < 1e-13:
        return -2.0 * float(np.angle(g[0, 0])), theta, 0.0
    if abs(g[0, 0]) < 1e-13:
        return 2.0 * float(np.angle(g[1, 0])), theta, 0.0
    s = -2.0 * float(np.angle(g[0, 0]))
    d = 2.0 * float(np.angle(g[1, 0]))
    return (s + d) / 2.0, theta, (s - d) / 2.0


def _rot_matrix(axis: str, angle: float) -> np.ndarray:
    c, s = math.cos(angle / 2.0), math.sin(angle / 2.0)
    if axis == "y":
        return np.array([[c, -s], [s, c]], dtype=complex)
    return np.array([[c - 1j * s, 0], [0, c + 1j * s]], dtype=complex)


def _merge_gate(al: complex, be: complex):
    """SU(2) matrix sending (al, be) to (hypot, 0) with a real result."""
    r = math.hypot(abs(al), abs(be))
    g = np.array([[np.conj(al) / r, np.conj(be) / r],
                  [-be / r, al / r]], dtype=complex)
    return g, r


def _dense_prep_reversed(v: np.ndarray, m: int):
    """Multiplexed-rotation disentangling, one wire at a time (dense path)."""
    w = np.array(v, dtype=complex)
    ops = []
    for j in range(m - 1, -1, -1):
        stride = 1 << (m - j - 1)
        block = stride * 2
        n_pref = 1 << j
        phis = np.zeros(n_pref)
        thetas = np.zeros(n_pref)
        psis = np.zeros(n_pref)
        for b in range(n_pref):
            i0 = b * block
            i1 = i0 + stride
            al, be = w[i0], w[i1]
            if math.hypot(abs(al), abs(be)) < 1e-15:
                continue
            g, r = _merge_gate(al, be)
            phis[b], thetas[b], psis[b] = _zyz_angles(g)
            w[i0] = r
            w[i1] = 0.0
        controls = tuple(range(j))
        for axis, angles in (("z", psis), ("y", thetas), ("z", phis)):
            if np.max(np.abs(angles)) > _ANGLE_TOL:
                ops.append(("mrot", axis, j, controls, tuple(angles)))
    return ops


def _separating_controls(anchor: int, pivot: int, others, m: int):
    """Greedy minimal bit set distinguishing the pivot pair-block from every
    other live index (control values are the anchor's bits)."""
    need = []
    for j in others:
        diff = (j ^ anchor) & ~(1 << pivot)
        if diff == 0:
            raise CompileError("support collision while separating controls")
        need.append(diff)
    controls: list[int] = []
    while need:
        counts = {}
        for diff in need:
            bits = diff
            while bits:
                b = bits & -bits
                counts[b] = counts.get(b, 0) + 1
                bits ^= b
        best = max(counts, key=lambda b: (counts[b], -b))
        controls.append(best.bit_length() - 1)
        need = [d for d in need if not d & best]
    return controls


def _sparse_prep_reversed(v: np.ndarray, m: int):
    """Support-based disentangling: align an index pair with CNOTs, then
    merge it with a rotation controlled on just enough bits to protect the
    rest of the support.  Cheap whenever the target is sparse."""
    ops = []
    support = {int(i): complex(v[i]) for i in np.nonzero(np.abs(v) > 1e-15)[0]}

    def apply_cnot(control_bit, target_bit):
        # wire w holds bit (m-1-w); op wires derived from bit positions
        ops.append(("cnot", m - 1 - control_bit, m - 1 - target_bit))
        nonlocal support
        support = {
            (i ^ (1 << target_bit)) if i & (1 << control_bit) else i: a
            for i, a in support.items()
        }

    while len(support) > 1:
        idx = sorted(support)
        best = None
        for a in range(len(idx)):
            for b in range(a + 1, len(idx)):
                cost = bin(idx[a] ^ idx[b]).count("1")
                if best is None or cost < best[0]:
                    best = (cost, idx[a], idx[b])
        _, i0, i1 = best
        delta = i0 ^ i1
        pivot = (delta & -delta).bit_length() - 1
        if not i1 & (1 << pivot):
            i0, i1 = i1, i0
        rest = delta & ~(1 << pivot)
        while rest:
            b = (rest & -rest).bit_length() - 1
            apply_cnot(pivot, b)
            i1 ^= 1 << b
            rest &= rest - 1
        others = [j for j in support if j not in (i0, i1)]
        controls = _separating_controls(i0, pivot, others, m)
        ctrl_spec = tuple(sorted(
            ((m - 1 - b), 1 if i0 & (1 << b) else 0) for b in controls))
        g, r = _merge_gate(support[i0], support[i1])
        phi, theta, psi = _zyz_angles(g)
        pre = [("x", wire) for wire, val in ctrl_spec if val == 0]
        ops.extend(pre)
        wires = tuple(wire for wire, _ in ctrl_spec)
        n_pat = 1 << len(wires)
        target_wire = m - 1 - pivot
        for axis, ang in (("z", psi), ("y", theta), ("z", phi)):
            if abs(ang) > _ANGLE_TOL:
                angles = [0.0] * n_pat
                angles[n_pat - 1] = ang  # fire only on the all-ones pattern
                ops.append(("mrot", axis, target_wire, wires, tuple(angles)))
        ops.extend(reversed(pre))
        del support[i1]
        support[i0] = r
    (only_idx,) = support
    amp = support[only_idx]
    if abs(np.angle(amp)) > 1e-15:
        # lone component with a phase (no merge happened to absorb it)
        gamma = float(np.angle(amp))
        angle = 2.0 * gamma if not only_idx & 1 else -2.0 * gamma
        ops.append(("r1", "z", m - 1, angle))
    bits = only_idx
    while bits:
        b = (bits & -bits).bit_length() - 1
        ops.append(("x", m - 1 - b))
        bits &= bits - 1
    return ops


def _expand_multiplex(axis, target, controls, angles):
    angles = np.asarray(angles, dtype=float)
    if np.max(np.abs(angles)) <= _ANGLE_TOL:
        return []
    if not controls:
        return [("r1", axis, target, float(angles[0]))]
    half = len(angles) // 2
    mean = (angles[:half] + angles[half:]) / 2.0
    diff = (angles[:half] - angles[half:]) / 2.0
    out = list(_expand_multiplex(axis, target, controls[1:], mean))
    if np.max(np.abs(diff)) > _ANGLE_TOL:
        out.append(("cnot", controls[0], target))
        out.extend(_expand_multiplex(axis, target, controls[1:], diff))
        out.append(("cnot", controls[0], target))
    return out


def _cancel_cnot_pairs(prims):
    out = []
    for op in prims:
        if out and op[0] == "cnot" and out[-1] == op:
            out.pop()
        else:
            out.append(op)
    return out


def _adjacent_cnot(k):
    return [(k, GATE_CNOT)]


def _adjacent_cnot_up(k):
    # control k+1, target k: conjugate by Hadamards on both wires
    return [(k, GATE_H), (k + 1, GATE_H), (k, GATE_CNOT), (k, GATE_H), (k + 1, GATE_H)]


def _swap_placements(k):
    return _adjacent_cnot(k) + _adjacent_cnot_up(k) + _adjacent_cnot(k)


def _route_cnot(control, target):
    if control == target:
        raise CompileError("cnot needs two distinct wires")
    if target == control + 1:
        return _adjacent_cnot(control)
    if control == target + 1:
        return _adjacent_cnot_up(target)
    if control < target:
        chain = []
        for a in range(control, target - 1):
            chain.extend(_swap_placements(a))
        return chain + _adjacent_cnot(target - 1) + list(reversed(chain))
    chain = []
    for a in range(control, target + 1, -1):
        chain.extend(_swap_placements(a - 1))
    return chain + _adjacent_cnot_up(target) + list(reversed(chain))


def _word_placements(word: str, wire: int):
    return [(wire, GATES[ch]) for ch in word]


_X_WORD = "HTTTTH"  # exact: H T^4 H = H Z H = X


def _lower_to_circuit(forward_ops, m: int, eps: float) -> Circuit:
    prims = []
    for op in forward_ops:
        if op[0] == "mrot":
            _, axis, target, controls, angles = op
            prims.extend(_expand_multiplex(axis, target, controls, angles))
        else:
            prims.append(op)
    prims = _cancel_cnot_pairs(prims)
    n_rot = sum(1 for p in prims if p[0] == "r1")
    eps_rot = eps / max(1, n_rot)
    placements = []
    for op in prims:
        if op[0] == "cnot":
            placements.extend(_route_cnot(op[1], op[2]))
        elif op[0] == "x":
            placements.extend(_word_placements(_X_WORD, op[1]))
        else:
            _, axis, wire, angle = op
            word = sk_approx_exact_phase(_rot_matrix(axis, angle), eps_rot)
            placements.extend(_word_placements(word, wire))
    return Circuit(m, tuple(placements))


def _invert_ops(ops):
    out = []
    for op in reversed(ops):
        if op[0] == "mrot":
            kind, axis, target, controls, angles = op
            out.append((kind, axis, target, controls, tuple(-a for a in angles)))
        elif op[0] == "r1":
            kind, axis, wire, angle = op
            out.append((kind, axis, wire, -angle))
        else:
            out.append(op)  # x and cnot are self-inverse
    return out


def synthesize_state_prep(v: np.ndarray, eps: float) -> Circuit:
    """Circuit over {CNOT,H,T} carrying |0...0> to v within eps (true norm,
    global phase included).  Sparse targets take the support-merging route;
    dense ones the multiplexed-rotation route."""
    v = np.asarray(v, dtype=complex)
    m = int(round(math.log2(v.shape[0])))
    if 1 << m != v.shape[0]:
        raise CompileError("state dimension must be a power of two")
    nv = float(np.linalg.norm(v))
    if abs(nv - 1.0) > 1e-9:
        raise CompileError("state preparation needs a unit vector")
    support = int(np.count_nonzero(np.abs(v) > 1e-15))
    if support <= max(2, (1 << m) // 4):
        rev = _sparse_prep_reversed(v, m)
    else:
        rev = _dense_prep_reversed(v, m)
    forward = _invert_ops(rev)
    attempt_eps = eps
    err = math.inf
    for _ in range(4):
        circ = _lower_to_circuit(forward, m, attempt_eps)
        err = float(np.linalg.norm(circ.state() - v))
        if err <= eps:
            return circ
        attempt_eps /= 4.0
    raise CompileError(f"state preparation stalled at error {err:.3g} > {eps:.3g}")


# ---------------------------------------------------------------------------
# transition columns, tables, and the approximate machine
# ---------------------------------------------------------------------------

_DIR_CODE = {-1: 2, 0: 3, 1: 1}  # head moves {-1,0,+1} encoded as {10,11,01}
_CODE_DIR = {2: -1, 3: 0, 1: 1}


def encode_dims(spec: MachineSpec) -> tuple[int, int, int]:
    """(state bits, garbage bits, total wires) of the per-pair unitaries."""
    r1 = max(1, math.ceil(math.log2(max(2, len(spec.states)))))
    n_tags = len(spec.garbage_alphabet) + 1
    r2 = 0 if n_tags <= 1 else math.ceil(math.log2(n_tags))
    return r1, r2, r1 + 2 + r2


def _basis_index(spec, r2, target, direction, garbage):
    p_idx = spec.states.index(target)
    g_idx = 0 if garbage is None else spec.garbage_alphabet.index(garbage) + 1
    return (((p_idx << 2) | _DIR_CODE[direction]) << r2) | g_idx


def transition_column(spec: MachineSpec, state: str, symbol: str) -> np.ndarray:
    """The quantum state a per-pair unitary must produce from |0...0>."""
    r1, r2, m = encode_dims(spec)
    v = np.zeros(1 << m, dtype=complex)
    for rule in spec.transitions:
        if rule.source == state and rule.read == symbol:
            v[_basis_index(spec, r2, rule.target, rule.direction, rule.garbage)] += rule.weight
    return v


def synthesize_transition_circuit(spec: MachineSpec, state: str, symbol: str,
                                  eps: float) -> Circuit:
    """Circuit preparing the (state, symbol) transition image from |0...0>.

    Only the action on the all-zero input is contracted, so the circuit is a
    state preparation; offsets and gates follow the placement grammar.  An
    empty transition row stands for the identity block and yields the empty
    circuit.
    """
    r1, r2, m = encode_dims(spec)
    v = transition_column(spec, state, symbol)
    nv = float(np.linalg.norm(v))
    if nv < 1e-12:
        return Circuit(m, ())
    if nv > 1.0 + 1e-6:
        raise CompileError(
            f"not isometric: transition block ({state!r}, {symbol!r}) has norm {nv:.6g}")
    return synthesize_state_prep(v / nv, eps)


def row_keys(spec: MachineSpec) -> tuple[tuple[str, str], ...]:
    """Canonical table row order: state-major, then left endmarker,
    input symbols in declared order, right endmarker."""
    return tuple((q, sym) for q in spec.states for sym in spec.readable_symbols)


@dataclass(frozen=True)
class EncodedTable:
    text: str
    keys: tuple[tuple[str, str], ...]
    qubit_count: int

    def __len__(self):
        return len(self.text)


def encode_table(spec: MachineSpec, eps: float,
                 circuits: dict | None = None) -> EncodedTable:
    """Encode every transition row of a quantum machine as one string.

    ``circuits`` may supply pre-built circuits per (state, symbol); missing
    rows are synthesized at inaccuracy ``eps``.
    """
    if spec.kind != "qfa":
        raise CompileError("encode_table requires a qfa spec")
    _, _, m = encode_dims(spec)
    keys = row_keys(spec)
    rows = []
    for key in keys:
        if circuits and key in circuits:
            circ = circuits[key]
        else:
            circ = synthesize_transition_circuit(spec, key[0], key[1], eps)
        rows.append(encode_circuit(circ))
    return EncodedTable("###".join(rows), keys, m)


def decode_table_rows(text: str) -> list[list[tuple[int, GateDef]]]:
    """Rows of placements from an encoded table (parse errors carry offsets)."""
    return _decode_rows(text)


def decode_table(text: str, skeleton: MachineSpec):
    """Pair each decoded row circuit with its canonical (state, symbol) key."""
    keys = row_keys(skeleton)
    _, _, m = encode_dims(skeleton)
    rows = _decode_rows(text)
    if len(rows) != len(keys):
        raise TableParseError(
            f"table has {len(rows)} rows, machine needs {len(keys)}", len(text))
    return [(key, Circuit(m, tuple(row))) for key, row in zip(keys, rows)]


def column_to_rules(spec: MachineSpec, state: str, symbol: str,
                    column: np.ndarray, amp_tol: float = 1e-11):
    """Transition rules read off a synthesized column; components that do not
    decode to a legal (state, direction, garbage) triple are dropped."""
    r1, r2, _ = encode_dims(spec)
    n = len(spec.states)
    k = len(spec.garbage_alphabet)
    rules = []
    for idx in np.nonzero(np.abs(column) > amp_tol)[0]:
        g_idx = int(idx) & ((1 << r2) - 1)
        dcode = (int(idx) >> r2) & 3
        p_idx = int(idx) >> (r2 + 2)
        if dcode not in _CODE_DIR or p_idx >= n or g_idx > k:
            continue
        garbage = None if g_idx == 0 else spec.garbage_alphabet[g_idx - 1]
        rules.append(TransitionRule(state, symbol, spec.states[p_idx],
                                    _CODE_DIR[dcode], garbage, complex(column[idx])))
    return rules


def table_to_spec(text: str, skeleton: MachineSpec) -> MachineSpec:
    """Rebuild a machine whose transitions are the decoded circuit outputs."""
    rules = []
    for (state, symbol), circ in decode_table(text, skeleton):
        if not circ.placements:
            continue  # identity block: no decodable transitions
        rules.extend(column_to_rules(skeleton, state, symbol, circ.state()))
    return skeleton.with_(transitions=tuple(rules))


def build_approx_machine(spec: MachineSpec, eps_bound: float | None = None,
                         step_budget: int = 16, alpha: float | None = None,
                         gate_eps: float | None = None) -> MachineSpec:
    """Replace every transition block by its synthesized-circuit statevector.

    The per-circuit inaccuracy follows the error budget
    ``alpha * 2^-(wires) / step_budget`` with ``alpha = (1/2 - eps)/2``
    unless ``gate_eps`` overrides it.  Raises when the budget is infeasible
    (alpha <= 0).
    """
    if spec.kind != "qfa":
        raise CompileError("build_approx_machine requires a qfa spec")
    if alpha is None:
        if eps_bound is None:
            raise CompileError("either eps_bound or alpha is required")
        alpha = 0.5 * (0.5 - eps_bound)
    if alpha <= 0:
        raise CompileError("approximation budget infeasible: alpha <= 0")
    _, _, m = encode_dims(spec)
    if gate_eps is None:
        gate_eps = alpha * (2.0 ** -m) / max(1, step_budget)
    rules = []
    for state in spec.states:
        for symbol in spec.readable_symbols:
            circ = synthesize_transition_circuit(spec, state, symbol, gate_eps)
            if not circ.placements:
                continue
            rules.extend(column_to_rules(spec, state, symbol, circ.state()))
    return spec.with_(transitions=tuple(rules), name=f"{spec.name}~approx")
