"""Brute-force Fock-space matrices used as ground truth for the operator algebra.

Determinants are 64-bit occupation masks (bit ``p`` set when spin orbital
``p`` is occupied). Ladder operators act with the sign ``(-1)^(number of
occupied orbitals below p)``. Nothing here shares contraction code with the
tensor engine: normal-ordered strings are evaluated by reordering them into
elementary strings, and nested commutators are explicit matrix products.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations, permutations
from typing import Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .chem_io import ActiveSpace, SpinOrbitalHamiltonian
from .errors import (
    BoundsError,
    ConvergenceError,
    FeasibilityError,
    PreconditionError,
    UnsupportedRankError,
)
from .wick import BchScheme, NormalOrderedOperator

MAX_ORACLE_SPIN_ORBITALS = 16
DENSE_LIMIT = 2000


@dataclass(frozen=True, eq=False)
class DeterminantBasis:
    """Sorted, duplicate-free occupation bitstrings.

    ``n_electrons`` and ``sz2`` are ``None`` for a basis spanning several
    sectors (e.g. the whole Fock space).
    """

    n_spin_orbitals: int
    determinants: np.ndarray
    n_electrons: int | None = None
    sz2: int | None = None

    def __post_init__(self):
        if self.n_spin_orbitals > 64:
            raise FeasibilityError("determinant bitstrings are limited to 64 spin orbitals")
        d = np.asarray(self.determinants, dtype=np.uint64)
        if d.size > 1 and np.any(d[1:] <= d[:-1]):
            raise ValueError("determinants must be strictly increasing")
        object.__setattr__(self, "determinants", d)

    def __len__(self) -> int:
        return len(self.determinants)

    @classmethod
    def sector(cls, n_spin_orbitals: int, n_electrons: int, sz2: int | None = 0,
               orbitals: Sequence[int] | None = None) -> "DeterminantBasis":
        """All determinants with ``n_electrons`` electrons (and ``2 Sz = sz2``).

        ``orbitals`` restricts occupations to a subset of spin orbitals.
        """
        orbs = list(range(n_spin_orbitals)) if orbitals is None else sorted(orbitals)
        dets = []
        for occ in combinations(orbs, n_electrons):
            if sz2 is not None and sum(1 if p % 2 == 0 else -1 for p in occ) != sz2:
                continue
            dets.append(sum(1 << p for p in occ))
        return cls(n_spin_orbitals, np.array(sorted(dets), dtype=np.uint64), n_electrons, sz2)

    @classmethod
    def full(cls, n_spin_orbitals: int) -> "DeterminantBasis":
        if n_spin_orbitals > 24:
            raise FeasibilityError(f"full Fock space of {n_spin_orbitals} spin orbitals is too large")
        return cls(n_spin_orbitals, np.arange(2**n_spin_orbitals, dtype=np.uint64))

    def index(self, dets: np.ndarray) -> np.ndarray:
        """Positions of ``dets`` in the basis, ``-1`` where absent."""
        dets = np.asarray(dets, dtype=np.uint64)
        pos = np.searchsorted(self.determinants, dets)
        pos = np.minimum(pos, len(self.determinants) - 1)
        found = self.determinants[pos] == dets
        return np.where(found, pos, -1)


@dataclass(frozen=True, eq=False)
class SparseOperatorMatrix:
    basis: DeterminantBasis
    matrix: sp.csr_matrix

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()

    @property
    def shape(self):
        return self.matrix.shape

    def dump(self, stream) -> None:
        """Coordinate text dump: ``row col value`` per stored element."""
        coo = self.matrix.tocoo()
        for r, c, v in sorted(zip(coo.row, coo.col, coo.data)):
            stream.write(f"{r} {c} {v:.16e}\n")


# --------------------------------------------------------------------------- #
# Elementary strings
# --------------------------------------------------------------------------- #


def _below_mask(p: int) -> np.uint64:
    return np.uint64((1 << p) - 1)


def apply_string(dets: np.ndarray, ops: Sequence[tuple[int, bool]]):
    """Apply a product of ladder operators to every determinant.

    ``ops`` lists ``(orbital, is_creator)`` from left to right; the rightmost
    acts first. Returns ``(new_dets, signs, valid)``.
    """
    d = np.array(dets, dtype=np.uint64, copy=True)
    sign = np.ones(d.shape, dtype=np.int8)
    valid = np.ones(d.shape, dtype=bool)
    for p, creator in reversed(ops):
        bit = np.uint64(1 << p)
        occupied = (d & bit) != 0
        valid &= ~occupied if creator else occupied
        parity = np.bitwise_count(d & _below_mask(p)) & 1
        sign = np.where(parity == 1, -sign, sign)
        d = d ^ bit
    return d, sign, valid


def _apply_string_single(det: int, ops: Sequence[tuple[int, bool]]):
    sign = 1
    for p, creator in reversed(ops):
        bit = 1 << p
        if bool(det & bit) == creator:
            return None, 0
        if bin(det & (bit - 1)).count("1") % 2:
            sign = -sign
        det ^= bit
    return det, sign


def _permutation_sign(order: Sequence[int]) -> int:
    seen = [False] * len(order)
    sign = 1
    for i in range(len(order)):
        if seen[i]:
            continue
        j, length = i, 0
        while not seen[j]:
            seen[j] = True
            j = order[j]
            length += 1
        if length % 2 == 0:
            sign = -sign
    return sign


def normal_ordered_string(P: Sequence[int], Q: Sequence[int], occupied: set[int]):
    """Elementary string equal to ``{a+_P1..a+_Pk a_Qk..a_Q1}`` and its sign.

    Quasi-particle annihilators (creators on occupied orbitals, annihilators
    on virtual ones) are moved to the right keeping relative order. The
    reordered string is already normal ordered, so no contractions arise.
    """
    string = [(p, True) for p in P] + [(q, False) for q in reversed(Q)]

    def kills_vacuum(op):
        p, creator = op
        return (p in occupied) == creator

    left = [i for i, op in enumerate(string) if not kills_vacuum(op)]
    right = [i for i, op in enumerate(string) if kills_vacuum(op)]
    order = left + right
    return [string[i] for i in order], _permutation_sign(order)


def _accumulate(basis: DeterminantBasis, ops, coeff, rows, cols, vals):
    new, sign, valid = apply_string(basis.determinants, ops)
    if not valid.any():
        return
    src = np.nonzero(valid)[0]
    dst = basis.index(new[valid])
    keep = dst >= 0
    rows.append(dst[keep])
    cols.append(src[keep])
    vals.append(coeff * sign[valid][keep])


def _finish(basis: DeterminantBasis, rows, cols, vals, dtype) -> SparseOperatorMatrix:
    n = len(basis)
    if rows:
        r = np.concatenate(rows)
        c = np.concatenate(cols)
        v = np.concatenate(vals).astype(dtype)
    else:
        r = c = np.zeros(0, dtype=np.int64)
        v = np.zeros(0, dtype=dtype)
    m = sp.coo_matrix((v, (r, c)), shape=(n, n)).tocsr()
    m.sum_duplicates()
    m.eliminate_zeros()
    return SparseOperatorMatrix(basis, m)


def _sorted_unique(t: np.ndarray, k: int):
    """Nonzero ``(P, Q, value)`` of an antisymmetric tensor with increasing P and Q."""
    n = t.shape[0]
    combos = np.array(list(combinations(range(n), k)), dtype=np.int64).reshape(-1, k)
    if len(combos) == 0:
        return []
    sub = t[tuple(combos[:, j] for j in range(k))]
    sub = sub[(slice(None),) + tuple(combos[:, j] for j in range(k))]
    return [(tuple(combos[a]), tuple(combos[b]), sub[a, b]) for a, b in zip(*np.nonzero(sub))]


def operator_to_matrix(op, basis: DeterminantBasis) -> SparseOperatorMatrix:
    """Matrix of a normal-ordered operator or a plain spin-orbital Hamiltonian."""
    if isinstance(op, SpinOrbitalHamiltonian):
        return _hamiltonian_matrix(op, basis)
    if op.n > basis.n_spin_orbitals:
        raise BoundsError(f"operator acts on {op.n} spin orbitals, basis has {basis.n_spin_orbitals}")
    occupied = set(op.reference_occupation)
    rows, cols, vals = [], [], []
    dtype = np.result_type(float, op.scalar, *op.tensors.values())
    if op.scalar != 0:
        ar = np.arange(len(basis))
        rows.append(ar)
        cols.append(ar)
        vals.append(np.full(len(basis), op.scalar, dtype=dtype))
    for k in sorted(op.tensors):
        for P, Q, v in _sorted_unique(op.tensors[k], k):
            ops, sign = normal_ordered_string(P, Q, occupied)
            _accumulate(basis, ops, sign * v, rows, cols, vals)
    return _finish(basis, rows, cols, vals, dtype)


def _hamiltonian_matrix(h: SpinOrbitalHamiltonian, basis: DeterminantBasis) -> SparseOperatorMatrix:
    n = h.n_spin_orbitals
    if n > basis.n_spin_orbitals:
        raise BoundsError(f"Hamiltonian acts on {n} spin orbitals, basis has {basis.n_spin_orbitals}")
    rows, cols, vals = [], [], []
    ar = np.arange(len(basis))
    rows.append(ar)
    cols.append(ar)
    vals.append(np.full(len(basis), h.e_nuclear))
    for p, q in zip(*np.nonzero(h.h)):
        _accumulate(basis, [(p, True), (q, False)], h.h[p, q], rows, cols, vals)
    pairs = list(combinations(range(n), 2))
    for p, q in pairs:
        for r, s in pairs:
            v = h.v_antisym[p, q, r, s]
            if v != 0:
                # sum_{p<q, r<s} <pq||rs> a+_p a+_q a_s a_r
                _accumulate(basis, [(p, True), (q, True), (s, False), (r, False)], v, rows, cols, vals)
    return _finish(basis, rows, cols, vals, float)


def number_operator_matrix(basis: DeterminantBasis, p: int) -> SparseOperatorMatrix:
    occ = ((basis.determinants >> np.uint64(p)) & np.uint64(1)).astype(float)
    return SparseOperatorMatrix(basis, sp.diags(occ).tocsr())


def particle_number_matrix(basis: DeterminantBasis) -> sp.csr_matrix:
    return sp.diags(np.bitwise_count(basis.determinants).astype(float)).tocsr()


def sz2_matrix(basis: DeterminantBasis) -> sp.csr_matrix:
    alpha = np.uint64(sum(1 << p for p in range(0, basis.n_spin_orbitals, 2)))
    na = np.bitwise_count(basis.determinants & alpha).astype(float)
    nb = np.bitwise_count(basis.determinants & ~alpha).astype(float)
    return sp.diags(na - nb).tocsr()


# --------------------------------------------------------------------------- #
# Diagonalization
# --------------------------------------------------------------------------- #


def _fix_sign(v: np.ndarray) -> np.ndarray:
    k = int(np.argmax(np.abs(v)))
    return -v if v[k].real < 0 else v


def exact_ground_state(m, tol: float = 1e-9, seed: int = 7) -> tuple[float, np.ndarray]:
    """Lowest eigenpair of a Hermitian matrix.

    Dense diagonalization up to 2000 rows, Lanczos with full
    reorthogonalization beyond. The eigenvector's largest component is made
    positive.
    """
    a = m.matrix if isinstance(m, SparseOperatorMatrix) else m
    dim = a.shape[0]
    if dim == 0:
        raise PreconditionError("empty matrix")
    asym = a - a.conj().T
    err = abs(asym).max() if sp.issparse(asym) else np.max(np.abs(asym))
    if err > 1e-10:
        raise PreconditionError(f"matrix is not Hermitian (max deviation {err:.3e})")
    if dim <= DENSE_LIMIT:
        dense = a.toarray() if sp.issparse(a) else np.asarray(a)
        w, v = scipy.linalg.eigh(dense)
        return float(w[0]), _fix_sign(v[:, 0])
    return lanczos_ground_state(a, tol=tol, seed=seed)


def lanczos_ground_state(a, tol: float = 1e-9, seed: int = 7, max_steps: int = 400,
                         max_restarts: int = 20) -> tuple[float, np.ndarray]:
    """Restarted Lanczos with full reorthogonalization and a fixed-seed start."""
    dim = a.shape[0]
    rng = np.random.default_rng(seed)
    dtype = np.result_type(a.dtype, float)
    x = rng.standard_normal(dim).astype(dtype)
    steps = min(max_steps, dim)
    best = None
    for _ in range(max_restarts):
        basis = np.zeros((steps + 1, dim), dtype=dtype)
        alpha, beta = [], []
        basis[0] = x / np.linalg.norm(x)
        k_used = 0
        for k in range(steps):
            w = a @ basis[k]
            alpha.append(np.vdot(basis[k], w).real)
            w -= basis[: k + 1].T @ (basis[: k + 1].conj() @ w)
            w -= basis[: k + 1].T @ (basis[: k + 1].conj() @ w)
            b = np.linalg.norm(w)
            k_used = k + 1
            if b < 1e-14:
                break
            beta.append(b)
            basis[k + 1] = w / b
        off = beta[: k_used - 1]
        theta, s = scipy.linalg.eigh_tridiagonal(np.array(alpha), np.array(off))
        x = basis[:k_used].T @ s[:, 0]
        x /= np.linalg.norm(x)
        e = float(theta[0])
        res = np.linalg.norm(a @ x - e * x)
        best = (e, x, res)
        if res <= tol:
            return e, _fix_sign(x)
    raise ConvergenceError(f"Lanczos stagnated with residual {best[2]:.3e}", residual=best[2],
                           state=(best[0], best[1]))


def fci_ground_state(h: SpinOrbitalHamiltonian, sz2: int = 0) -> tuple[float, np.ndarray]:
    basis = DeterminantBasis.sector(h.n_spin_orbitals, len(h.reference_occupation), sz2)
    return exact_ground_state(operator_to_matrix(h, basis))


# --------------------------------------------------------------------------- #
# Body-rank extraction and matrix BCH
# --------------------------------------------------------------------------- #


def _expand_unique(n: int, k: int, entries) -> np.ndarray:
    """Antisymmetric tensor from its values at increasing ``(P, Q)``."""
    t = np.zeros((n,) * (2 * k), dtype=np.result_type(float, *[v for _, _, v in entries]) if entries else float)
    if not entries:
        return t
    P = np.array([e[0] for e in entries], dtype=np.int64)
    Q = np.array([e[1] for e in entries], dtype=np.int64)
    v = np.array([e[2] for e in entries])
    perms = [(p, _permutation_sign(p)) for p in permutations(range(k))]
    for pu, su in perms:
        for pl, sl in perms:
            idx = tuple(P[:, j] for j in pu) + tuple(Q[:, j] for j in pl)
            t[idx] = su * sl * v
    return t


def extract_body_rank(m: SparseOperatorMatrix, max_rank: int,
                      reference_occupation: Sequence[int]) -> NormalOrderedOperator:
    """Recover normal-ordered coefficients of a matrix, rank by rank.

    The coefficient of ``{a+_P a_Q}`` is the matrix element between the
    determinants carrying exactly its quasi-particle creations and
    annihilations, after subtracting everything the lower ranks already
    explain. Requires a basis containing those determinants (the full Fock
    space always does).
    """
    if max_rank > 4:
        raise UnsupportedRankError(f"max_rank {max_rank} exceeds 4")
    basis = m.basis
    n = basis.n_spin_orbitals
    occ = set(int(i) for i in reference_occupation)
    ref = sum(1 << i for i in occ)
    (ref_pos,) = basis.index(np.array([ref], dtype=np.uint64))
    if ref_pos < 0:
        raise PreconditionError("basis lacks the reference determinant")
    dense = m.matrix.toarray() if len(basis) <= 4096 else None
    mat = m.matrix.tocsr()

    def element(rows, cols):
        if dense is not None:
            return dense[rows, cols]
        return np.asarray(mat[rows, cols]).ravel()

    scalar = element([ref_pos], [ref_pos])[0]
    scalar = complex(scalar) if np.iscomplexobj(mat.data) else float(scalar)
    op = NormalOrderedOperator(n, tuple(sorted(occ)), scalar)
    for k in range(1, max_rank + 1):
        lower = operator_to_matrix(op, basis).matrix
        residual = (mat - lower).tocsr()
        res_dense = residual.toarray() if dense is not None else None
        entries = []
        for P in combinations(range(n), k):
            for Q in combinations(range(n), k):
                ops, sign = normal_ordered_string(P, Q, occ)
                # ket: reference with every quasi-particle the string annihilates already present
                ket = ref
                for p, creator in ops:
                    if (p in occ) == creator:
                        ket ^= 1 << p
                bra, s = _apply_string_single(ket, ops)
                if bra is None:
                    continue  # e.g. the same index twice; the coefficient vanishes by antisymmetry
                r, c = basis.index(np.array([bra, ket], dtype=np.uint64))
                if r < 0 or c < 0:
                    raise PreconditionError(f"basis lacks determinants needed for rank-{k} extraction")
                val = res_dense[r, c] if res_dense is not None else residual[r, c]
                if val != 0:
                    entries.append((P, Q, val * sign * s))
        if entries:
            op.tensors[k] = _expand_unique(n, k, entries)
    return op


def fock_space_hamiltonian_pieces(h: SpinOrbitalHamiltonian, basis: DeterminantBasis):
    """Matrices of ``H_N``, ``F_N`` and the reference energy over ``basis``."""
    occ = list(h.reference_occupation)
    ref = sum(1 << i for i in occ)
    m_h = operator_to_matrix(h, basis).matrix
    (ref_pos,) = basis.index(np.array([ref], dtype=np.uint64))
    e_ref = float(m_h[ref_pos, ref_pos])
    ident = sp.identity(len(basis), format="csr")
    m_hn = (m_h - e_ref * ident).tocsr()
    f = h.h + np.einsum("piqi->pq", h.v_antisym[:, occ, :, :][:, :, :, occ]) if occ else h.h.copy()
    rows, cols, vals = [], [], []
    for p, q in zip(*np.nonzero(f)):
        _accumulate(basis, [(p, True), (q, False)], f[p, q], rows, cols, vals)
    m_f = _finish(basis, rows, cols, vals, float).matrix
    m_fn = (m_f - sum(f[i, i] for i in occ) * ident).tocsr()
    return e_ref, m_hn, m_fn


def bch_matrix(h: SpinOrbitalHamiltonian, sigma: NormalOrderedOperator, scheme: BchScheme | str,
               basis: DeterminantBasis | None = None) -> SparseOperatorMatrix:
    """Full Fock-space matrix of the truncated similarity transform (before projection)."""
    if isinstance(scheme, str):
        scheme = BchScheme.from_name(scheme)
    n = h.n_spin_orbitals
    if n > MAX_ORACLE_SPIN_ORBITALS:
        raise FeasibilityError(f"oracle limited to {MAX_ORACLE_SPIN_ORBITALS} spin orbitals, got {n}")
    basis = basis or DeterminantBasis.full(n)
    _, m_hn, m_fn = fock_space_hamiltonian_pieces(h, basis)
    m_s = operator_to_matrix(sigma, basis).matrix
    total = m_hn.copy()
    if scheme.name != "BARE":
        nested = {}
        for term in scheme.commutator_terms:
            if term.depth == 0:
                continue
            x = m_hn if term.inner == "H" else m_fn
            for d in range(1, term.depth + 1):
                key = (term.inner, d)
                if key not in nested:
                    nested[key] = (x @ m_s - m_s @ x).tocsr()
                x = nested[key]
            total = total + term.prefactor * x
    total = total.tocsr()
    if scheme.final_body_rank < 4:
        extracted = extract_body_rank(SparseOperatorMatrix(basis, total), scheme.final_body_rank,
                                      h.reference_occupation)
        return operator_to_matrix(extracted, basis)
    total.eliminate_zeros()
    return SparseOperatorMatrix(basis, total)


def active_basis(space: ActiveSpace, n_electrons: int, sz2: int = 0, local: bool = False) -> DeterminantBasis:
    """N-electron determinants with every external orbital empty.

    With ``local`` the bits are renumbered to active-local indices.
    """
    act = list(space.active_spin_orbitals)
    if local:
        return DeterminantBasis.sector(len(act), n_electrons, sz2)
    return DeterminantBasis.sector(space.n_spin_orbitals, n_electrons, sz2, orbitals=act)


def project_matrix(m: SparseOperatorMatrix, target: DeterminantBasis) -> np.ndarray:
    idx = m.basis.index(target.determinants)
    if np.any(idx < 0):
        raise PreconditionError("target determinants missing from the source basis")
    return m.matrix[idx][:, idx].toarray()


def bch_matrix_oracle(h: SpinOrbitalHamiltonian, sigma: NormalOrderedOperator, scheme: BchScheme | str,
                      space: ActiveSpace) -> np.ndarray:
    """Dense active-space matrix of the scheme, evaluated with explicit matrices.

    Rows and columns follow ``active_basis(space, n_electrons)``.
    """
    full = bch_matrix(h, sigma, scheme)
    return project_matrix(full, active_basis(space, len(h.reference_occupation)))
