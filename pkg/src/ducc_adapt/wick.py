"""Particle-hole normal-ordered operators and numeric Wick contraction.

A rank-``k`` component is stored as a dense tensor ``X[p1..pk, q1..qk]``,
antisymmetric within the creation and within the annihilation indices, and
represents ``(1/k!^2) sum X[P; Q] {a+_p1 .. a+_pk a_qk .. a_q1}`` where the
braces denote normal ordering relative to the reference determinant.

Contracting a creator of the left factor with an annihilator of the right one
runs over occupied (hole) orbitals; an annihilator on the left with a creator
on the right runs over virtual (particle) orbitals. Patterns are enumerated by
how many lines of each kind connect the two factors; all patterns with the
same counts are equal after antisymmetrization, which leaves an overall
``1 / (c_hole! c_particle!)`` weight.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from itertools import combinations
from math import factorial
from typing import Sequence

import numpy as np

from .chem_io import ActiveSpace, SpinOrbitalHamiltonian, reference_energy
from .errors import ConsistencyError, PreconditionError, UnsupportedRankError

logger = logging.getLogger(__name__)

MAX_RANK = 4
HERMITIAN = "hermitian"
ANTIHERMITIAN = "antihermitian"


@dataclass(eq=False)
class NormalOrderedOperator:
    """Scalar plus rank-1..4 normal-ordered components over ``n`` spin orbitals."""

    n: int
    reference_occupation: tuple[int, ...]
    scalar: float = 0.0
    tensors: dict[int, np.ndarray] = field(default_factory=dict)
    symmetry: str | None = None

    def __post_init__(self):
        for k, t in self.tensors.items():
            if not 1 <= k <= MAX_RANK:
                raise UnsupportedRankError(f"rank {k} outside 1..{MAX_RANK}")
            if t.shape != (self.n,) * (2 * k):
                raise ValueError(f"rank-{k} tensor has shape {t.shape}, expected {(self.n,) * (2 * k)}")

    @property
    def occupied(self) -> np.ndarray:
        return np.array(self.reference_occupation, dtype=np.int64)

    @property
    def virtual(self) -> np.ndarray:
        occ = set(self.reference_occupation)
        return np.array([p for p in range(self.n) if p not in occ], dtype=np.int64)

    @property
    def max_rank(self) -> int:
        return max(self.tensors, default=0)

    def ranks(self) -> list[int]:
        return sorted(self.tensors)

    def copy(self) -> "NormalOrderedOperator":
        return NormalOrderedOperator(
            self.n, self.reference_occupation, self.scalar,
            {k: t.copy() for k, t in self.tensors.items()}, self.symmetry,
        )

    def block(self, rank: int, signature: str) -> np.ndarray:
        """View of one hole/particle block, e.g. ``block(2, "vvoo")``.

        The signature lists ``o``/``v`` for every creation index, then every
        annihilation index.
        """
        if len(signature) != 2 * rank:
            raise ValueError(f"signature {signature!r} does not match rank {rank}")
        t = self.tensors.get(rank)
        spaces = {"o": self.occupied, "v": self.virtual}
        if t is None:
            return np.zeros(tuple(len(spaces[c]) for c in signature))
        return t[np.ix_(*(spaces[c] for c in signature))]

    def truncated(self, max_rank: int) -> "NormalOrderedOperator":
        return NormalOrderedOperator(
            self.n, self.reference_occupation, self.scalar,
            {k: t for k, t in self.tensors.items() if k <= max_rank}, self.symmetry,
        )

    def rank_part(self, rank: int) -> "NormalOrderedOperator":
        tensors = {rank: self.tensors[rank]} if rank in self.tensors else {}
        scalar = self.scalar if rank == 0 else 0.0
        return NormalOrderedOperator(self.n, self.reference_occupation, scalar, tensors, self.symmetry)

    def adjoint(self) -> "NormalOrderedOperator":
        tensors = {}
        for k, t in self.tensors.items():
            axes = tuple(range(k, 2 * k)) + tuple(range(k))
            tensors[k] = np.conj(t.transpose(axes))
        flip = {HERMITIAN: HERMITIAN, ANTIHERMITIAN: ANTIHERMITIAN}.get(self.symmetry)
        return NormalOrderedOperator(self.n, self.reference_occupation, np.conj(self.scalar), tensors, flip)

    def scaled(self, factor: float) -> "NormalOrderedOperator":
        return NormalOrderedOperator(
            self.n, self.reference_occupation, self.scalar * factor,
            {k: t * factor for k, t in self.tensors.items()}, self.symmetry,
        )

    def shifted(self, constant: float) -> "NormalOrderedOperator":
        out = self.copy()
        out.scalar = self.scalar + constant
        return out

    def _check_compatible(self, other):
        if self.n != other.n or self.reference_occupation != other.reference_occupation:
            raise ValueError("operators live on different orbital spaces or references")

    def __add__(self, other: "NormalOrderedOperator") -> "NormalOrderedOperator":
        self._check_compatible(other)
        tensors = {k: t.copy() for k, t in self.tensors.items()}
        for k, t in other.tensors.items():
            tensors[k] = tensors[k] + t if k in tensors else t.copy()
        sym = self.symmetry if self.symmetry == other.symmetry else None
        return NormalOrderedOperator(self.n, self.reference_occupation, self.scalar + other.scalar, tensors, sym)

    def __sub__(self, other):
        return self + other.scaled(-1.0)

    def __mul__(self, factor: float):
        return self.scaled(factor)

    __rmul__ = __mul__

    def max_abs(self) -> float:
        return max([abs(self.scalar)] + [float(np.max(np.abs(t), initial=0.0)) for t in self.tensors.values()])

    def is_zero(self, tol: float = 0.0) -> bool:
        return self.max_abs() <= tol

    def allclose(self, other, atol: float = 1e-12) -> bool:
        return (self - other).max_abs() <= atol

    def unique_elements(self, rank: int, tol: float = 0.0):
        """Yield ``(P, Q, value)`` for sorted index tuples with nonzero value."""
        t = self.tensors.get(rank)
        if t is None:
            return
        for P in combinations(range(self.n), rank):
            sub = t[P]
            for Q in combinations(range(self.n), rank):
                v = sub[Q]
                if v != 0 and abs(v) > tol:
                    yield P, Q, v

    def symmetry_violation(self) -> float:
        """Largest departure from the tagged (anti-)Hermiticity."""
        if self.symmetry is None:
            return 0.0
        sign = 1.0 if self.symmetry == HERMITIAN else -1.0
        return (self - self.adjoint().scaled(sign)).max_abs()


def zero_operator(n: int, reference_occupation: Sequence[int], symmetry=None) -> NormalOrderedOperator:
    return NormalOrderedOperator(n, tuple(reference_occupation), 0.0, {}, symmetry)


def antisymmetrize(t: np.ndarray, rank: int) -> np.ndarray:
    """Project onto tensors antisymmetric in the first and in the last ``rank`` axes."""
    out = np.zeros_like(t)
    for perm_up, s_up in _perms_with_sign(rank):
        for perm_lo, s_lo in _perms_with_sign(rank):
            axes = tuple(perm_up) + tuple(rank + p for p in perm_lo)
            out += s_up * s_lo * t.transpose(axes)
    return out / factorial(rank) ** 2


@lru_cache(maxsize=None)
def _perms_with_sign(k: int) -> tuple[tuple[tuple[int, ...], int], ...]:
    from itertools import permutations

    return tuple((p, _parity(p)) for p in permutations(range(k)))


def _parity(perm: Sequence[int]) -> int:
    perm = list(perm)
    sign = 1
    for i in range(len(perm)):
        while perm[i] != i:
            j = perm[i]
            perm[i], perm[j] = perm[j], perm[i]
            sign = -sign
    return sign


@lru_cache(maxsize=None)
def _shuffles(n_left: int, n_right: int) -> tuple[tuple[tuple[int, ...], int], ...]:
    """Order-preserving merges of two axis groups with their permutation signs."""
    total = n_left + n_right
    out = []
    for slots in combinations(range(total), n_left):
        axes = [0] * total
        left = iter(range(n_left))
        right = iter(range(n_left, total))
        chosen = set(slots)
        for pos in range(total):
            axes[pos] = next(left) if pos in chosen else next(right)
        out.append((tuple(axes), _parity(axes)))
    return tuple(out)


# --------------------------------------------------------------------------- #
# Contraction patterns
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class ContractionPattern:
    """One canonical way of joining a rank-``ka`` and a rank-``kb`` string.

    ``hole`` pairs the last ``c_hole`` creators of the left factor with the
    last ``c_hole`` annihilators of the right factor; ``particle`` pairs the
    last ``c_particle`` annihilators on the left with the last creators on the
    right.
    """

    ka: int
    kb: int
    c_hole: int
    c_particle: int
    sign: int

    @property
    def out_rank(self) -> int:
        return self.ka + self.kb - self.c_hole - self.c_particle

    @property
    def weight(self) -> float:
        return self.sign / (factorial(self.c_hole) * factorial(self.c_particle))


def _operator_string(ka: int, kb: int):
    """Labels of the elementary operators in ``{A}{B}`` from left to right."""
    a = [("A", "c", i) for i in range(ka)] + [("A", "a", i) for i in reversed(range(ka))]
    b = [("B", "c", i) for i in range(kb)] + [("B", "a", i) for i in reversed(range(kb))]
    return a + b


@lru_cache(maxsize=None)
def contraction_patterns(ka: int, kb: int) -> tuple[ContractionPattern, ...]:
    """All connected patterns between a rank-``ka`` and a rank-``kb`` string."""
    string = _operator_string(ka, kb)
    position = {label: i for i, label in enumerate(string)}
    patterns = []
    for ch in range(min(ka, kb) + 1):
        for cp in range(min(ka, kb) + 1):
            if ch == 0 and cp == 0:
                continue
            target = []
            for t in range(ch):
                target += [("A", "c", ka - ch + t), ("B", "a", kb - ch + t)]
            for t in range(cp):
                target += [("A", "a", ka - cp + t), ("B", "c", kb - cp + t)]
            creators = [("A", "c", i) for i in range(ka - ch)] + [("B", "c", i) for i in range(kb - cp)]
            annihilators = [("A", "a", i) for i in range(ka - cp)] + [("B", "a", i) for i in range(kb - ch)]
            target += creators + list(reversed(annihilators))
            sign = _parity([position[label] for label in target])
            patterns.append(ContractionPattern(ka, kb, ch, cp, sign))
    return tuple(patterns)


def _contract(x: np.ndarray, y: np.ndarray, pat: ContractionPattern, occ, vir, out_idx) -> np.ndarray:
    """Raw (not yet antisymmetrized) tensor of one pattern, output axes (P_out, Q_out)."""
    ka, kb, ch, cp = pat.ka, pat.kb, pat.c_hole, pat.c_particle
    ua, la = ka - ch, ka - cp  # free creators / annihilators of the left factor
    ub, lb = kb - cp, kb - ch
    x_axes_c = [ka - ch + t for t in range(ch)] + [ka + ka - cp + t for t in range(cp)]
    y_axes_c = [kb + kb - ch + t for t in range(ch)] + [kb - cp + t for t in range(cp)]
    x_ranges = [occ] * ch + [vir] * cp
    for axis, rng in zip(x_axes_c, x_ranges):
        x = np.take(x, rng, axis=axis)
    for axis, rng in zip(y_axes_c, x_ranges):
        y = np.take(y, rng, axis=axis)
    if out_idx is not None:
        for axis in set(range(2 * ka)) - set(x_axes_c):
            x = np.take(x, out_idx, axis=axis)
        for axis in set(range(2 * kb)) - set(y_axes_c):
            y = np.take(y, out_idx, axis=axis)
    w = np.tensordot(x, y, axes=(x_axes_c, y_axes_c))
    # tensordot leaves: x free (P_a, Q_a), then y free (P_b, Q_b)
    order = (
        list(range(ua))
        + list(range(ua + la, ua + la + ub))
        + list(range(ua, ua + la))
        + list(range(ua + la + ub, ua + la + ub + lb))
    )
    return w.transpose(order)


def _antisymmetrize_product(w: np.ndarray, ua: int, ub: int, la: int, lb: int) -> np.ndarray:
    """Sum over order-preserving shuffles; exact for inputs antisymmetric within groups."""
    k = ua + ub
    out = None
    for up_axes, s_up in _shuffles(ua, ub):
        for lo_axes, s_lo in _shuffles(la, lb):
            axes = up_axes + tuple(k + a for a in lo_axes)
            term = w.transpose(axes)
            if out is None:
                out = term.copy() if s_up * s_lo > 0 else -term
            elif s_up * s_lo > 0:
                out += term
            else:
                out -= term
    return out


def wick_product(
    a: NormalOrderedOperator,
    b: NormalOrderedOperator,
    max_rank: int = MAX_RANK,
    out_idx: np.ndarray | None = None,
) -> NormalOrderedOperator:
    """Connected part of ``a b`` (at least one contraction) in normal order.

    With ``out_idx`` the uncontracted indices are restricted to those orbitals
    and the result is expressed over ``len(out_idx)`` orbitals.
    """
    if max_rank > MAX_RANK:
        raise UnsupportedRankError(f"max_rank {max_rank} exceeds {MAX_RANK}")
    a._check_compatible(b)
    occ, vir = a.occupied, a.virtual
    n_out = a.n if out_idx is None else len(out_idx)
    ref_out = a.reference_occupation
    if out_idx is not None:
        pos = {int(p): i for i, p in enumerate(out_idx)}
        ref_out = tuple(pos[p] for p in a.reference_occupation if p in pos)
    scalar = 0.0
    tensors: dict[int, np.ndarray] = {}
    for ka, x in a.tensors.items():
        for kb, y in b.tensors.items():
            for pat in contraction_patterns(ka, kb):
                k = pat.out_rank
                if k > max_rank:
                    continue
                w = _contract(x, y, pat, occ, vir, out_idx)
                if k == 0:
                    scalar += pat.weight * float(w)
                    continue
                z = _antisymmetrize_product(w, ka - pat.c_hole, kb - pat.c_particle,
                                            ka - pat.c_particle, kb - pat.c_hole)
                z *= pat.weight
                if k in tensors:
                    tensors[k] += z
                else:
                    tensors[k] = z
    return NormalOrderedOperator(n_out, ref_out, scalar, tensors)


def wick_commutator(
    a: NormalOrderedOperator,
    b: NormalOrderedOperator,
    max_rank: int = MAX_RANK,
    out_idx: np.ndarray | None = None,
) -> NormalOrderedOperator:
    """``[a, b]`` in normal order, dropping components above ``max_rank``.

    Disconnected terms cancel and are never formed. When ``a`` is tagged
    Hermitian and ``b`` anti-Hermitian, ``b a = -(a b)^+`` halves the work.
    """
    if max_rank > MAX_RANK:
        raise UnsupportedRankError(f"max_rank {max_rank} exceeds {MAX_RANK}")
    ab = wick_product(a, b, max_rank, out_idx)
    if a.symmetry == HERMITIAN and b.symmetry == ANTIHERMITIAN:
        out = ab + ab.adjoint()
        out.symmetry = HERMITIAN
        return out
    if a.symmetry == ANTIHERMITIAN and b.symmetry == HERMITIAN:
        out = ab + ab.adjoint()
        out.symmetry = HERMITIAN
        return out
    ba = wick_product(b, a, max_rank, out_idx)
    out = ab - ba
    if a.symmetry and b.symmetry:
        out.symmetry = ANTIHERMITIAN if a.symmetry == b.symmetry else HERMITIAN
    return out


# --------------------------------------------------------------------------- #
# Hamiltonians and BCH schemes
# --------------------------------------------------------------------------- #


def normal_order_hamiltonian(h: SpinOrbitalHamiltonian) -> tuple[float, NormalOrderedOperator]:
    """Return ``E_ref`` and ``H_N = F_N + V_N`` relative to the reference."""
    e_ref = reference_energy(h)
    op = NormalOrderedOperator(
        h.n_spin_orbitals,
        tuple(h.reference_occupation),
        0.0,
        {1: h.fock().copy(), 2: h.v_antisym.copy()},
        HERMITIAN,
    )
    return e_ref, op


@dataclass(frozen=True)
class CommutatorTerm:
    prefactor: float
    inner: str  # "H" for H_N, "F" for F_N
    depth: int  # number of nested commutators with sigma


_A4 = (CommutatorTerm(1.0, "H", 0), CommutatorTerm(1.0, "H", 1), CommutatorTerm(0.5, "F", 2))
_A7 = (
    CommutatorTerm(1.0, "H", 0),
    CommutatorTerm(1.0, "H", 1),
    CommutatorTerm(0.5, "H", 2),
    CommutatorTerm(1.0 / 6.0, "F", 3),
)


@dataclass(frozen=True)
class BchScheme:
    """Truncated similarity transform: term list plus final body rank."""

    name: str
    commutator_terms: tuple[CommutatorTerm, ...]
    final_body_rank: int

    _TABLE = {
        "BARE": ((CommutatorTerm(1.0, "H", 0),), 2),
        "A4": (_A4, 2),
        "A4_3": (_A4, 3),
        "A7": (_A7, 2),
        "A7_3": (_A7, 3),
        "A7_34": (_A7, 4),
    }

    @classmethod
    def from_name(cls, name: str) -> "BchScheme":
        key = name.upper().replace("(", "_").replace(")", "")
        if key not in cls._TABLE:
            raise ValueError(f"unknown scheme {name!r}; choose from {sorted(cls._TABLE)}")
        terms, rank = cls._TABLE[key]
        return cls(key, terms, rank)

    @classmethod
    def names(cls) -> list[str]:
        return list(cls._TABLE)


def _nested(inner: NormalOrderedOperator, sigma: NormalOrderedOperator, depth: int, cache: dict, key: str,
            final: bool, final_rank: int, out_idx):
    """``[..[inner, sigma], .., sigma]`` with ``depth`` commutators, memoized by depth."""
    if depth == 0:
        return inner
    if (key, depth) in cache:
        return cache[(key, depth)]
    prev = _nested(inner, sigma, depth - 1, cache, key, False, final_rank, out_idx)
    if final:
        return wick_commutator(prev, sigma, final_rank, out_idx)
    out = wick_commutator(prev, sigma, MAX_RANK)
    cache[(key, depth)] = out
    return out


def build_effective_hamiltonian(
    hN: NormalOrderedOperator,
    sigma_ext: NormalOrderedOperator,
    scheme: BchScheme | str,
    space: ActiveSpace | None = None,
) -> NormalOrderedOperator:
    """Sum the scheme's nested commutators, truncate, and Hermitize.

    Intermediates keep every rank up to four; only the final sum is truncated
    to ``scheme.final_body_rank``. With ``space`` the outermost commutators are
    evaluated directly on active indices, which equals
    ``project_active(build_effective_hamiltonian(hN, sigma_ext, scheme), space)``.
    """
    if isinstance(scheme, str):
        scheme = BchScheme.from_name(scheme)
    out_idx = None
    if space is not None:
        _check_space(hN, space)
        out_idx = np.array(space.active_spin_orbitals, dtype=np.int64)
    f_n = hN.rank_part(1)
    f_n.symmetry = HERMITIAN
    sigma = sigma_ext
    if sigma.symmetry is None:
        sigma = sigma.copy()
        sigma.symmetry = ANTIHERMITIAN
    rank = scheme.final_body_rank
    skip = sigma.is_zero() or scheme.name == "BARE"

    # A term needed both as a summand and as an intermediate is built at full rank.
    depths = {"H": set(), "F": set()}
    for term in scheme.commutator_terms:
        depths[term.inner].add(term.depth)
    cache: dict = {}
    total = hN.truncated(rank) if out_idx is None else project_active(hN, space).truncated(rank)
    total = total.copy()
    if not skip:
        for term in scheme.commutator_terms:
            if term.depth == 0:
                continue
            inner = hN if term.inner == "H" else f_n
            reused = any(d > term.depth for d in depths[term.inner])
            if reused:
                full = _nested(inner, sigma, term.depth, cache, term.inner, False, rank, None)
                piece = full if out_idx is None else project_active(full, space)
                piece = piece.truncated(rank)
            else:
                piece = _nested(inner, sigma, term.depth, cache, term.inner, True, rank, out_idx)
            total = total + piece.scaled(term.prefactor)
    herm = (total + total.adjoint()).scaled(0.5)
    residue = (total - total.adjoint()).scaled(0.5).max_abs()
    logger.debug("anti-Hermitian residue of %s effective Hamiltonian: %.3e", scheme.name, residue)
    if residue > 1e-10:
        raise ConsistencyError(f"effective Hamiltonian anti-Hermitian residue {residue:.3e} exceeds 1e-10")
    herm.symmetry = HERMITIAN
    return herm


def _check_space(op: NormalOrderedOperator, space: ActiveSpace):
    if space.n_spin_orbitals != op.n:
        raise PreconditionError(f"active space covers {space.n_spin_orbitals} spin orbitals, operator has {op.n}")
    if not space.contains_occupied(op.reference_occupation):
        raise PreconditionError("active space must contain every occupied orbital of the reference")


def project_active(op: NormalOrderedOperator, space: ActiveSpace) -> NormalOrderedOperator:
    """Keep blocks whose indices are all active; re-index to active-local numbering."""
    _check_space(op, space)
    act = np.array(space.active_spin_orbitals, dtype=np.int64)
    pos = {int(p): i for i, p in enumerate(act)}
    tensors = {k: t[np.ix_(*([act] * (2 * k)))] for k, t in op.tensors.items()}
    ref = tuple(pos[p] for p in op.reference_occupation)
    return NormalOrderedOperator(len(act), ref, op.scalar, tensors, op.symmetry)


# --------------------------------------------------------------------------- #
# Text export
# --------------------------------------------------------------------------- #


def dump_operator(op: NormalOrderedOperator, stream, tol: float = 0.0) -> None:
    """Scalar line, then ``k p.. q.. value`` records for sorted unique indices."""
    occ = " ".join(str(p) for p in op.reference_occupation)
    stream.write(f"# n_spin_orbitals={op.n} occupied={occ}\n")
    stream.write(f"{op.scalar:.16e}\n")
    for k in op.ranks():
        for P, Q, v in op.unique_elements(k, tol):
            idx = " ".join(str(i) for i in P + Q)
            stream.write(f"{k} {idx} {v:.16e}\n")


def load_operator(stream) -> NormalOrderedOperator:
    n = None
    occ: tuple[int, ...] = ()
    scalar = None
    elements: dict[int, list] = {}
    for line in stream:
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            for tok in line[1:].split():
                if tok.startswith("n_spin_orbitals="):
                    n = int(tok.split("=")[1])
            if "occupied=" in line:
                occ = tuple(int(t) for t in line.split("occupied=")[1].split())
            continue
        if scalar is None:
            scalar = float(line)
            continue
        toks = line.split()
        k = int(toks[0])
        idx = tuple(int(t) for t in toks[1 : 1 + 2 * k])
        elements.setdefault(k, []).append((idx, float(toks[1 + 2 * k])))
    if n is None:
        raise ValueError("operator dump lacks the n_spin_orbitals header")
    tensors = {}
    for k, items in elements.items():
        t = np.zeros((n,) * (2 * k))
        for idx, v in items:
            t[idx] = v
        tensors[k] = antisymmetrize(t, k) * factorial(k) ** 2
    return NormalOrderedOperator(n, occ, scalar or 0.0, tensors, HERMITIAN)
