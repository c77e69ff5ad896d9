"""Jordan-Wigner mapping and an exact statevector backend.

Qubit ``q`` is spin orbital ``q`` of the active space; basis index bit ``q``
is the occupation of qubit ``q``. Pauli labels list qubit 0 first.

Internally a Pauli product is kept as ``X^x Z^z`` with bit masks ``x`` and
``z``; ``Y = i X Z`` converts between the two forms.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Sequence, TextIO

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import expm_multiply

from .chem_io import ActiveSpace
from .errors import PreconditionError
from .wick import HERMITIAN, NormalOrderedOperator, project_active

PRUNE_TOL = 1e-14
MAX_QUBITS = 24

FermionString = Sequence[tuple[int, bool]]  # (orbital, is_creator), leftmost first


@dataclass
class PauliSum:
    """``sum_i h_i P_i`` keyed by Pauli label (one of I/X/Y/Z per qubit)."""

    n_qubits: int
    terms: dict[str, complex] = field(default_factory=dict)
    hermitian: bool = False

    def __post_init__(self):
        pruned = {}
        for label, c in self.terms.items():
            if len(label) != self.n_qubits or set(label) - set("IXYZ"):
                raise ValueError(f"bad Pauli label {label!r} for {self.n_qubits} qubits")
            c = complex(c)
            if abs(c) >= PRUNE_TOL:
                pruned[label] = c
        if self.hermitian:
            worst = max((abs(c.imag) for c in pruned.values()), default=0.0)
            if worst > 1e-10:
                raise PreconditionError(f"Hermitian Pauli sum has imaginary coefficient {worst:.3e}")
            pruned = {k: complex(c.real) for k, c in pruned.items() if abs(c.real) >= PRUNE_TOL}
        self.terms = pruned

    @classmethod
    def identity(cls, n_qubits: int, c: complex = 1.0) -> "PauliSum":
        return cls(n_qubits, {"I" * n_qubits: c}, hermitian=np.isreal(c))

    def __len__(self) -> int:
        return len(self.terms)

    def __add__(self, other: "PauliSum") -> "PauliSum":
        if other.n_qubits != self.n_qubits:
            raise ValueError("qubit counts differ")
        out = dict(self.terms)
        for k, c in other.terms.items():
            out[k] = out.get(k, 0) + c
        return PauliSum(self.n_qubits, out, self.hermitian and other.hermitian)

    def scaled(self, factor: complex) -> "PauliSum":
        herm = self.hermitian and np.isreal(factor)
        return PauliSum(self.n_qubits, {k: c * factor for k, c in self.terms.items()}, herm)

    def adjoint(self) -> "PauliSum":
        return PauliSum(self.n_qubits, {k: np.conj(c) for k, c in self.terms.items()}, self.hermitian)

    def is_hermitian(self, tol: float = 1e-12) -> bool:
        return all(abs(c.imag) <= tol for c in self.terms.values())

    def is_antihermitian(self, tol: float = 1e-12) -> bool:
        return all(abs(c.real) <= tol for c in self.terms.values())

    def _masks(self):
        labels = sorted(self.terms)
        n = len(labels)
        x = np.zeros(n, dtype=np.int64)
        z = np.zeros(n, dtype=np.int64)
        c = np.zeros(n, dtype=complex)
        for t, label in enumerate(labels):
            xm = zm = ny = 0
            for q, ch in enumerate(label):
                if ch in "XY":
                    xm |= 1 << q
                if ch in "ZY":
                    zm |= 1 << q
                ny += ch == "Y"
            x[t], z[t] = xm, zm
            c[t] = self.terms[label] * 1j**ny
        return x, z, c

    def to_sparse(self) -> sp.csr_matrix:
        """Sparse matrix in the computational basis."""
        if self.n_qubits > MAX_QUBITS:
            raise PreconditionError(f"{self.n_qubits} qubits exceed the statevector cap of {MAX_QUBITS}")
        dim = 1 << self.n_qubits
        b = np.arange(dim, dtype=np.int64)
        x, z, c = self._masks()
        rows, cols, vals = [], [], []
        for xm in np.unique(x):
            sel = x == xm
            diag = np.zeros(dim, dtype=complex)
            for zm, cm in zip(z[sel], c[sel]):
                parity = np.bitwise_count(b & zm) & 1
                diag += np.where(parity == 1, -cm, cm)
            nz = diag != 0
            rows.append(b[nz] ^ xm)
            cols.append(b[nz])
            vals.append(diag[nz])
        if not rows:
            return sp.csr_matrix((dim, dim), dtype=complex)
        m = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(dim, dim)).tocsr()
        m.sum_duplicates()
        m.eliminate_zeros()
        return m

    def to_dense(self) -> np.ndarray:
        return self.to_sparse().toarray()

    def apply(self, vec: np.ndarray) -> np.ndarray:
        """Term-by-term action on a state vector (no matrix assembly)."""
        dim = 1 << self.n_qubits
        b = np.arange(dim, dtype=np.int64)
        out = np.zeros(dim, dtype=complex)
        x, z, c = self._masks()
        for xm, zm, cm in zip(x, z, c):
            parity = np.bitwise_count(b & zm) & 1
            out[b ^ xm] += np.where(parity == 1, -cm, cm) * vec
        return out

    def dump(self, stream: TextIO) -> None:
        """One ``coefficient label`` line per term, labels in lexicographic order."""
        for label in sorted(self.terms):
            c = self.terms[label]
            text = f"{c.real:.16e}" if c.imag == 0 else f"({c.real:.16e}{c.imag:+.16e}j)"
            stream.write(f"{text} {label}\n")

    @classmethod
    def load(cls, stream: TextIO, hermitian: bool = False) -> "PauliSum":
        terms: dict[str, complex] = {}
        n = None
        for line in stream:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            coeff, label = line.split()
            n = len(label) if n is None else n
            terms[label] = terms.get(label, 0) + complex(coeff)
        return cls(n or 0, terms, hermitian)


# --------------------------------------------------------------------------- #
# Jordan-Wigner
# --------------------------------------------------------------------------- #


def _string_products(ops: FermionString):
    """Expand a ladder-operator product into ``X^x Z^z`` masks with coefficients."""
    x = np.zeros(1, dtype=np.int64)
    z = np.zeros(1, dtype=np.int64)
    c = np.ones(1, dtype=complex)
    for p, creator in ops:
        below = (1 << p) - 1
        # a+_p = Z_<p (X_p + X_p Z_p)/2,  a_p = Z_<p (X_p - X_p Z_p)/2
        fx = np.array([1 << p, 1 << p], dtype=np.int64)
        fz = np.array([below, below | (1 << p)], dtype=np.int64)
        fc = np.array([0.5, 0.5 if creator else -0.5])
        # (X^x1 Z^z1)(X^x2 Z^z2) = (-1)^{|z1 & x2|} X^{x1^x2} Z^{z1^z2}
        sign = np.where(np.bitwise_count(z[:, None] & fx[None, :]) & 1, -1.0, 1.0)
        c = (c[:, None] * fc[None, :] * sign).ravel()
        x = (x[:, None] ^ fx[None, :]).ravel()
        z = (z[:, None] ^ fz[None, :]).ravel()
    return x, z, c


def _collect_masks(x: np.ndarray, z: np.ndarray, c: np.ndarray, n_qubits: int, hermitian: bool) -> PauliSum:
    if len(c) == 0:
        return PauliSum(n_qubits, {}, hermitian)
    key = (x << n_qubits) | z
    uniq, inv = np.unique(key, return_inverse=True)
    total = np.zeros(len(uniq), dtype=complex)
    np.add.at(total, inv, c)
    terms = {}
    for k, coeff in zip(uniq, total):
        if abs(coeff) < PRUNE_TOL:
            continue
        xm, zm = int(k) >> n_qubits, int(k) & ((1 << n_qubits) - 1)
        chars = []
        ny = 0
        for q in range(n_qubits):
            bx, bz = (xm >> q) & 1, (zm >> q) & 1
            chars.append("IZXY"[2 * bx + bz])
            ny += bx & bz
        # X Z = -i Y on every qubit carrying both masks
        terms["".join(chars)] = coeff * (-1j) ** ny
    return PauliSum(n_qubits, terms, hermitian)


def fermion_to_pauli(terms: Iterable[tuple[complex, FermionString]], n_qubits: int,
                     hermitian: bool = False) -> PauliSum:
    """Jordan-Wigner image of a sum of coefficient-weighted ladder strings."""
    xs, zs, cs = [], [], []
    for coeff, ops in terms:
        for p, _ in ops:
            if not 0 <= p < n_qubits:
                raise PreconditionError(f"orbital {p} outside {n_qubits} qubits")
        x, z, c = _string_products(ops)
        xs.append(x)
        zs.append(z)
        cs.append(c * coeff)
    if not xs:
        return PauliSum(n_qubits, {}, hermitian)
    return _collect_masks(np.concatenate(xs), np.concatenate(zs), np.concatenate(cs), n_qubits, hermitian)


def _elementary_form(P, Q, occupied: set[int]):
    """Sign and ladder string equal to the normal-ordered product ``{a+_P a_Q}``.

    Moving every operator that annihilates the reference (creators on
    occupied orbitals, annihilators on virtual ones) to the right yields a
    string with no remaining contractions.
    """
    ops = [(p, True) for p in P] + [(q, False) for q in reversed(Q)]
    front = [k for k, (p, cr) in enumerate(ops) if (p in occupied) != cr]
    back = [k for k, (p, cr) in enumerate(ops) if (p in occupied) == cr]
    order = front + back
    inversions = sum(1 for a, b in combinations(order, 2) if a > b)
    return (-1) ** inversions, [ops[k] for k in order]


def normal_ordered_terms(op: NormalOrderedOperator):
    """``(coefficient, ladder string)`` pairs for every nonzero unique element."""
    occ = set(op.reference_occupation)
    for k in op.ranks():
        for P, Q, v in op.unique_elements(k):
            sign, ops = _elementary_form(P, Q, occ)
            yield sign * v, ops


def jordan_wigner(op: NormalOrderedOperator, space: ActiveSpace | None = None) -> PauliSum:
    """Qubit operator of ``op``; with ``space`` the operator is first reduced to active indices.

    The scalar sits on the identity string.
    """
    if space is not None and op.n != space.n_active_spin_orbitals:
        if op.n != space.n_spin_orbitals:
            raise PreconditionError(f"operator on {op.n} spin orbitals does not fit the active space")
        ext = np.array(space.external_spin_orbitals, dtype=np.int64)
        for k, t in op.tensors.items():
            for axis in range(2 * k):
                if np.any(np.take(t, ext, axis=axis)):
                    raise PreconditionError("operator has components on external orbitals")
        op = project_active(op, space)
    n = op.n
    if n > MAX_QUBITS:
        raise PreconditionError(f"{n} qubits exceed the statevector cap of {MAX_QUBITS}")
    herm = op.symmetry == HERMITIAN
    terms = list(normal_ordered_terms(op))
    if op.scalar != 0:
        terms.append((op.scalar, []))
    if herm:
        # guard against roundoff leaving tiny imaginary parts
        ps = fermion_to_pauli(terms, n, hermitian=False)
        return PauliSum(n, {k: complex(c.real) for k, c in ps.terms.items()}, hermitian=True)
    return fermion_to_pauli(terms, n)


# --------------------------------------------------------------------------- #
# Statevectors
# --------------------------------------------------------------------------- #


@dataclass
class Statevector:
    amplitudes: np.ndarray

    def __post_init__(self):
        self.amplitudes = np.asarray(self.amplitudes, dtype=complex)
        n = self.amplitudes.size.bit_length() - 1
        if self.amplitudes.ndim != 1 or 1 << n != self.amplitudes.size:
            raise ValueError("statevector length must be a power of two")

    @property
    def n_qubits(self) -> int:
        return self.amplitudes.size.bit_length() - 1

    @classmethod
    def basis_state(cls, n_qubits: int, occupied: Iterable[int]) -> "Statevector":
        if n_qubits > MAX_QUBITS:
            raise PreconditionError(f"{n_qubits} qubits exceed the statevector cap of {MAX_QUBITS}")
        v = np.zeros(1 << n_qubits, dtype=complex)
        v[sum(1 << p for p in occupied)] = 1.0
        return cls(v)

    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def copy(self) -> "Statevector":
        return Statevector(self.amplitudes.copy())


def _matrix_of(h) -> sp.spmatrix:
    return h.to_sparse() if isinstance(h, PauliSum) else h


def expectation(psi: Statevector, h: PauliSum, backend: str = "matrix") -> float | complex:
    """``<psi|h|psi>``; real for Hermitian sums."""
    if h.n_qubits != psi.n_qubits:
        raise ValueError(f"state has {psi.n_qubits} qubits, operator {h.n_qubits}")
    v = psi.amplitudes
    if backend == "matrix":
        hv = h.to_sparse() @ v
    elif backend == "terms":
        hv = h.apply(v)
    else:
        raise ValueError(f"unknown backend {backend!r}")
    e = np.vdot(v, hv)
    return float(e.real) if h.is_hermitian() else complex(e)


def apply_exp_generator(psi: Statevector, gen: PauliSum, theta: float) -> Statevector:
    """``exp(theta * gen) |psi>`` for an anti-Hermitian generator."""
    if gen.n_qubits != psi.n_qubits:
        raise ValueError(f"state has {psi.n_qubits} qubits, generator {gen.n_qubits}")
    if not gen.is_antihermitian():
        raise PreconditionError("generator is not anti-Hermitian")
    if theta == 0 or not gen.terms:
        return psi.copy()
    out = expm_multiply(theta * gen.to_sparse(), psi.amplitudes)
    return Statevector(out)
