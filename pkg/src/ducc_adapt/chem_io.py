"""Molecular integrals: FCIDUMP I/O, spin-orbital Hamiltonians, natural virtuals.

Spin orbitals are interleaved: spatial orbital ``p`` maps to ``2p`` (alpha) and
``2p + 1`` (beta). Every other module inherits this ordering.
"""

from __future__ import annotations

import io
import logging
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence, TextIO

import numpy as np

from .errors import (
    BoundsError,
    ConsistencyError,
    InvalidStateError,
    ParseError,
    PreconditionError,
)

logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-12
DUPLICATE_TOL = 1e-10
CANONICAL_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class IntegralSet:
    """Spatial-orbital integrals in chemists' notation."""

    n_spatial: int
    n_electrons: int
    ms2: int
    e_nuclear: float
    h_one: np.ndarray
    eri_chem: np.ndarray
    orbital_energies: np.ndarray | None = None
    orbital_symmetry_labels: tuple[int, ...] | None = None

    def __post_init__(self):
        n = self.n_spatial
        if self.h_one.shape != (n, n) or self.eri_chem.shape != (n,) * 4:
            raise InvalidStateError("integral tensor shapes do not match n_spatial")
        if self.n_electrons > 2 * n or self.n_electrons < 0:
            raise InvalidStateError(
                f"{self.n_electrons} electrons do not fit in {n} spatial orbitals"
            )

    def check_symmetry(self, tol: float = SYMMETRY_TOL) -> None:
        h, g = self.h_one, self.eri_chem
        if np.max(np.abs(h - h.T), initial=0.0) > tol:
            raise ConsistencyError("one-electron integrals are not symmetric")
        for perm in ((1, 0, 2, 3), (0, 1, 3, 2), (2, 3, 0, 1)):
            if np.max(np.abs(g - g.transpose(perm)), initial=0.0) > tol:
                raise ConsistencyError(f"two-electron integrals break symmetry {perm}")


# --------------------------------------------------------------------------- #
# FCIDUMP
# --------------------------------------------------------------------------- #

_HEADER_START = re.compile(r"^\s*[&$]FCI\b", re.IGNORECASE)
_HEADER_END = re.compile(r"(&END|\$END|^\s*/\s*$)", re.IGNORECASE)
_KEY = re.compile(r"([A-Za-z_][A-Za-z0-9_]*)\s*=")


def _parse_header(lines: list[tuple[int, str]]) -> dict[str, list[int]]:
    text = " ".join(line for _, line in lines)
    text = _HEADER_START.sub("", text)
    text = re.sub(r"(&END|\$END)", "", text, flags=re.IGNORECASE).replace("/", " ")
    values: dict[str, list[int]] = {}
    parts = _KEY.split(text)
    if parts[0].strip(" ,"):
        raise ParseError(f"line {lines[0][0]}: unexpected header text {parts[0].strip()!r}")
    for key, raw in zip(parts[1::2], parts[2::2]):
        items = [tok for tok in re.split(r"[,\s]+", raw.strip()) if tok]
        try:
            values[key.upper()] = [int(tok) for tok in items]
        except ValueError:
            lineno = _find_line(lines, key)
            raise ParseError(f"line {lineno}: non-integer value for {key}: {raw.strip()!r}") from None
    for required in ("NORB", "NELEC"):
        if required not in values or len(values[required]) != 1:
            raise ParseError(f"line {lines[0][0]}: header lacks a valid {required} entry")
    return values


def _find_line(lines, key):
    for lineno, line in lines:
        if key.upper() in line.upper():
            return lineno
    return lines[0][0]


def parse_fcidump(stream: TextIO | str | Path) -> IntegralSet:
    """Read an FCIDUMP file (1-based indices, chemists' notation).

    ``stream`` may be an open text stream or a filesystem path. Records with
    ``i > 0, j = k = l = 0`` are read as orbital energies (Molpro convention).
    """
    if isinstance(stream, (str, Path)):
        with open(stream) as handle:
            return parse_fcidump(handle)

    header: list[tuple[int, str]] = []
    body: list[tuple[int, str]] = []
    in_header = False
    header_done = False
    for lineno, line in enumerate(stream, start=1):
        if not header_done:
            if not in_header:
                if not line.strip():
                    continue
                if not _HEADER_START.search(line):
                    raise ParseError(f"line {lineno}: expected '&FCI' header, got {line.strip()!r}")
                in_header = True
            header.append((lineno, line.strip()))
            if _HEADER_END.search(line):
                header_done = True
            continue
        if line.strip():
            body.append((lineno, line))
    if not header_done:
        raise ParseError(f"line {header[-1][0] if header else 1}: header is not terminated by &END")

    meta = _parse_header(header)
    norb = meta["NORB"][0]
    nelec = meta["NELEC"][0]
    ms2 = meta.get("MS2", [0])[0]
    orbsym = tuple(meta["ORBSYM"]) if "ORBSYM" in meta else None
    if norb < 0:
        raise ParseError(f"line {header[0][0]}: NORB must be non-negative")
    if orbsym is not None and len(orbsym) != norb:
        raise ParseError(f"line {_find_line(header, 'ORBSYM')}: ORBSYM has {len(orbsym)} entries, NORB={norb}")

    n_rec = len(body)
    vals = np.empty(n_rec)
    idx = np.empty((n_rec, 4), dtype=np.int64)
    linenos = np.array([ln for ln, _ in body], dtype=np.int64)
    for row, (lineno, line) in enumerate(body):
        toks = line.split()
        if len(toks) != 5:
            raise ParseError(f"line {lineno}: expected 'value i j k l', got {line.strip()!r}")
        try:
            vals[row] = float(toks[0].replace("D", "E").replace("d", "e"))
            idx[row] = [int(t) for t in toks[1:]]
        except ValueError:
            raise ParseError(f"line {lineno}: malformed record {line.strip()!r}") from None

    bad = np.any((idx < 0) | (idx > norb), axis=1)
    if bad.any():
        row = int(np.argmax(bad))
        raise BoundsError(f"line {linenos[row]}: index out of range [1, {norb}]: {idx[row].tolist()}")

    zero = idx == 0
    is_nuc = zero.all(axis=1)
    is_eps = (~zero[:, 0]) & zero[:, 1:].all(axis=1)
    is_one = (~zero[:, :2]).all(axis=1) & zero[:, 2:].all(axis=1)
    is_two = (~zero).all(axis=1)
    odd = ~(is_nuc | is_eps | is_one | is_two)
    if odd.any():
        row = int(np.argmax(odd))
        raise ParseError(f"line {linenos[row]}: unrecognised index pattern {idx[row].tolist()}")

    e_nuc = _collect(np.zeros(int(is_nuc.sum()), dtype=np.int64), vals[is_nuc], linenos[is_nuc], 1)
    e_nuclear = float(e_nuc[0])

    orbital_energies = None
    if is_eps.any():
        eps_idx = idx[is_eps, 0] - 1
        orbital_energies = _collect(eps_idx, vals[is_eps], linenos[is_eps], norb)

    o = idx[is_one] - 1
    flat1, v1, l1 = [], [], []
    for a, b in ((0, 1), (1, 0)):
        flat1.append(o[:, a] * norb + o[:, b])
        v1.append(vals[is_one])
        l1.append(linenos[is_one])
    h_one = _collect(np.concatenate(flat1), np.concatenate(v1), np.concatenate(l1), norb * norb)
    h_one = h_one.reshape(norb, norb)

    t = idx[is_two] - 1
    flat2, v2, l2 = [], [], []
    # the 8 index permutations preserving (pq|rs)
    for perm in ((0, 1, 2, 3), (1, 0, 2, 3), (0, 1, 3, 2), (1, 0, 3, 2),
                 (2, 3, 0, 1), (3, 2, 0, 1), (2, 3, 1, 0), (3, 2, 1, 0)):
        p, q, r, s = (t[:, k] for k in perm)
        flat2.append(((p * norb + q) * norb + r) * norb + s)
        v2.append(vals[is_two])
        l2.append(linenos[is_two])
    eri = _collect(np.concatenate(flat2), np.concatenate(v2), np.concatenate(l2), norb**4)
    eri = eri.reshape((norb,) * 4)

    return IntegralSet(
        n_spatial=norb,
        n_electrons=nelec,
        ms2=ms2,
        e_nuclear=e_nuclear,
        h_one=h_one,
        eri_chem=eri,
        orbital_energies=orbital_energies,
        orbital_symmetry_labels=orbsym,
    )


def _collect(flat: np.ndarray, values: np.ndarray, linenos: np.ndarray, size: int) -> np.ndarray:
    """Scatter values into a flat array, rejecting contradictory duplicates."""
    out = np.zeros(size)
    if flat.size == 0:
        return out
    order = np.argsort(flat, kind="stable")
    flat, values, linenos = flat[order], values[order], linenos[order]
    same = flat[1:] == flat[:-1]
    clash = same & (np.abs(values[1:] - values[:-1]) > DUPLICATE_TOL)
    if clash.any():
        k = int(np.argmax(clash))
        raise ConsistencyError(
            f"line {linenos[k + 1]}: value {values[k + 1]!r} contradicts line "
            f"{linenos[k]} ({values[k]!r}) for the same integral"
        )
    out[flat] = values
    return out


def write_fcidump(integrals: IntegralSet, stream: TextIO | str | Path, tol: float = 0.0) -> None:
    """Write unique integrals with 17 significant digits (exact float round trip)."""
    if isinstance(stream, (str, Path)):
        with open(stream, "w") as handle:
            return write_fcidump(integrals, handle, tol)
    n = integrals.n_spatial
    orbsym = integrals.orbital_symmetry_labels or (1,) * n
    stream.write(f" &FCI NORB={n:4d},NELEC={integrals.n_electrons:3d},MS2={integrals.ms2},\n")
    stream.write("  ORBSYM=" + "".join(f"{s}," for s in orbsym) + "\n")
    stream.write("  ISYM=1,\n &END\n")
    g = integrals.eri_chem
    for p in range(n):
        for q in range(p + 1):
            pq = p * (p + 1) // 2 + q
            for r in range(n):
                for s in range(r + 1):
                    if r * (r + 1) // 2 + s > pq:
                        continue
                    v = g[p, q, r, s]
                    if v != 0.0 and abs(v) > tol:
                        stream.write(f"{v: .16e} {p + 1:4d} {q + 1:4d} {r + 1:4d} {s + 1:4d}\n")
    h = integrals.h_one
    for p in range(n):
        for q in range(p + 1):
            if h[p, q] != 0.0 and abs(h[p, q]) > tol:
                stream.write(f"{h[p, q]: .16e} {p + 1:4d} {q + 1:4d}    0    0\n")
    if integrals.orbital_energies is not None:
        for p, e in enumerate(integrals.orbital_energies):
            stream.write(f"{e: .16e} {p + 1:4d}    0    0    0\n")
    stream.write(f"{integrals.e_nuclear: .16e}    0    0    0    0\n")


def fcidump_text(integrals: IntegralSet) -> str:
    buf = io.StringIO()
    write_fcidump(integrals, buf)
    return buf.getvalue()


def freeze_core(integrals: IntegralSet, core: Sequence[int]) -> IntegralSet:
    """Fold doubly occupied core orbitals into the constant and one-body terms."""
    core = sorted(set(int(c) for c in core))
    if not core:
        return integrals
    n = integrals.n_spatial
    if core[-1] >= n or core[0] < 0:
        raise BoundsError(f"frozen-core index out of range: {core}")
    if 2 * len(core) > integrals.n_electrons:
        raise PreconditionError("more frozen-core electrons than electrons")
    keep = [p for p in range(n) if p not in core]
    h, g = integrals.h_one, integrals.eri_chem
    c = np.array(core)
    e_core = (
        integrals.e_nuclear
        + 2.0 * np.trace(h[np.ix_(c, c)])
        + 2.0 * np.einsum("iijj->", g[np.ix_(c, c, c, c)])
        - np.einsum("ijji->", g[np.ix_(c, c, c, c)])
    )
    k = np.array(keep)
    h_eff = h + 2.0 * np.einsum("pqcc->pq", g[:, :, c][:, :, :, c]) - np.einsum(
        "pccq->pq", g[:, c][:, :, c]
    )
    eps = integrals.orbital_energies
    syms = integrals.orbital_symmetry_labels
    return IntegralSet(
        n_spatial=len(keep),
        n_electrons=integrals.n_electrons - 2 * len(core),
        ms2=integrals.ms2,
        e_nuclear=float(e_core),
        h_one=h_eff[np.ix_(k, k)],
        eri_chem=g[np.ix_(k, k, k, k)],
        orbital_energies=None if eps is None else eps[k],
        orbital_symmetry_labels=None if syms is None else tuple(syms[i] for i in keep),
    )


# --------------------------------------------------------------------------- #
# Spin-orbital Hamiltonian
# --------------------------------------------------------------------------- #


@dataclass(frozen=True, eq=False)
class SpinOrbitalHamiltonian:
    """Hamiltonian ``E_nuc + h_pq a+_p a_q + 1/4 <pq||rs> a+_p a+_q a_s a_r``."""

    n_spin_orbitals: int
    h: np.ndarray
    v_antisym: np.ndarray
    e_nuclear: float
    reference_occupation: tuple[int, ...]
    orbital_energies: np.ndarray | None = None

    @property
    def n_occupied(self) -> int:
        return len(self.reference_occupation)

    @property
    def occupied(self) -> np.ndarray:
        return np.array(self.reference_occupation, dtype=np.int64)

    @property
    def virtual(self) -> np.ndarray:
        occ = set(self.reference_occupation)
        return np.array([p for p in range(self.n_spin_orbitals) if p not in occ], dtype=np.int64)

    def fock(self) -> np.ndarray:
        """Fock matrix ``f_pq = h_pq + sum_i <pi||qi>`` over the reference."""
        o = self.occupied
        return self.h + np.einsum("piqi->pq", self.v_antisym[:, o][:, :, :, o])


def _spin_blocks(n_spatial: int):
    spatial = np.arange(2 * n_spatial) // 2
    spin = np.arange(2 * n_spatial) % 2
    return spatial, spin


def to_spin_orbitals(integrals: IntegralSet) -> SpinOrbitalHamiltonian:
    """Expand spatial integrals into antisymmetrized spin-orbital tensors."""
    if (integrals.n_electrons - integrals.ms2) % 2:
        raise InvalidStateError(
            f"MS2={integrals.ms2} has the wrong parity for {integrals.n_electrons} electrons"
        )
    if integrals.ms2 != 0:
        raise PreconditionError("only closed-shell references (MS2=0) are supported")
    n = integrals.n_spatial
    spatial, spin = _spin_blocks(n)
    same = spin[:, None] == spin[None, :]
    h = integrals.h_one[np.ix_(spatial, spatial)] * same
    # <pq|rs> = (pr|qs) with spin deltas on (p,r) and (q,s)
    phys = integrals.eri_chem.transpose(0, 2, 1, 3)[np.ix_(spatial, spatial, spatial, spatial)]
    g = phys * same[:, None, :, None] * same[None, :, None, :]
    v = g - g.transpose(0, 1, 3, 2)
    nocc = integrals.n_electrons
    eps = None
    if integrals.orbital_energies is not None:
        eps = np.asarray(integrals.orbital_energies)[spatial]
    ham = SpinOrbitalHamiltonian(
        n_spin_orbitals=2 * n,
        h=h,
        v_antisym=v,
        e_nuclear=float(integrals.e_nuclear),
        reference_occupation=tuple(range(nocc)),
        orbital_energies=eps,
    )
    if eps is None:
        f = ham.fock()
        off = f - np.diag(np.diag(f))
        if np.max(np.abs(off), initial=0.0) < CANONICAL_TOL:
            ham = replace(ham, orbital_energies=np.diag(f).copy())
    return ham


def reference_energy(h: SpinOrbitalHamiltonian) -> float:
    o = h.occupied
    one = np.trace(h.h[np.ix_(o, o)])
    two = 0.5 * np.einsum("ijij->", h.v_antisym[np.ix_(o, o, o, o)])
    return float(h.e_nuclear + one + two)


def rotate_orbitals(h: SpinOrbitalHamiltonian, u: np.ndarray) -> SpinOrbitalHamiltonian:
    """Transform every index by ``u`` (columns are new orbitals in the old basis)."""
    h1 = u.T @ h.h @ u
    v = np.einsum("pqrs,pa,qb,rc,sd->abcd", h.v_antisym, u, u, u, u, optimize=True)
    return replace(h, h=h1, v_antisym=v, orbital_energies=None)


def _sorted_eigh(d: np.ndarray, tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Eigenpairs sorted by descending eigenvalue with deterministic ties and signs."""
    if np.max(np.abs(d - np.diag(np.diag(d))), initial=0.0) == 0.0:
        w, vecs = np.diag(d).copy(), np.eye(len(d))
    else:
        w, vecs = np.linalg.eigh(d)
    lead = np.argmax(np.abs(vecs) - 1e-12 * np.arange(len(d))[:, None], axis=0)
    signs = np.sign(vecs[lead, np.arange(len(d))])
    signs[signs == 0] = 1.0
    vecs = vecs * signs
    # group near-equal eigenvalues, then order ties by leading original index
    order = sorted(range(len(w)), key=lambda k: (-np.round(w[k] / tol), lead[k]))
    return w[order], vecs[:, order]


def mp2_virtual_density(h: SpinOrbitalHamiltonian) -> np.ndarray:
    """Virtual-virtual block of the MP2 one-particle density (spin orbitals)."""
    from .amplitudes import solve_mp2

    t2 = solve_mp2(h).t2
    return 0.5 * np.einsum("ijac,ijbc->ab", t2, t2)


def natural_virtual_rotation(h: SpinOrbitalHamiltonian) -> SpinOrbitalHamiltonian:
    """Rotate virtual orbitals into MP2 natural virtuals, most occupied first."""
    if h.orbital_energies is None:
        raise PreconditionError("natural virtual orbitals need canonical orbital energies")
    nocc = h.n_occupied
    if nocc % 2 or h.reference_occupation != tuple(range(nocc)):
        raise PreconditionError("natural virtual orbitals need a closed-shell reference")
    d = mp2_virtual_density(h)
    # alpha and beta blocks are identical for a restricted reference
    w, u_virt = _sorted_eigh(d[0::2, 0::2])
    logger.debug("natural virtual occupations: %s", w)
    n_spatial = h.n_spin_orbitals // 2
    u_spatial = np.eye(n_spatial)
    u_spatial[nocc // 2 :, nocc // 2 :] = u_virt
    u = np.kron(u_spatial, np.eye(2))
    return rotate_orbitals(h, u)


# --------------------------------------------------------------------------- #
# Active spaces
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class ActiveSpace:
    """Ordered spatial orbitals kept on the register, plus their complement."""

    active_spatial: tuple[int, ...]
    n_spatial: int
    active_spin_orbitals: tuple[int, ...] = field(init=False)
    external_spin_orbitals: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        act = tuple(int(p) for p in self.active_spatial)
        if len(set(act)) != len(act):
            raise InvalidStateError(f"duplicate active orbitals: {act}")
        if any(p < 0 or p >= self.n_spatial for p in act):
            raise BoundsError(f"active orbital outside [0, {self.n_spatial})")
        act = tuple(sorted(act))
        object.__setattr__(self, "active_spatial", act)
        spin = tuple(s for p in act for s in (2 * p, 2 * p + 1))
        object.__setattr__(self, "active_spin_orbitals", spin)
        rest = tuple(s for s in range(2 * self.n_spatial) if s not in set(spin))
        object.__setattr__(self, "external_spin_orbitals", rest)

    @classmethod
    def lowest(cls, n_active: int, n_spatial: int) -> "ActiveSpace":
        return cls(tuple(range(n_active)), n_spatial)

    @classmethod
    def full(cls, n_spatial: int) -> "ActiveSpace":
        return cls.lowest(n_spatial, n_spatial)

    @property
    def n_spin_orbitals(self) -> int:
        return 2 * self.n_spatial

    @property
    def n_active_spin_orbitals(self) -> int:
        return len(self.active_spin_orbitals)

    def is_full(self) -> bool:
        return len(self.active_spatial) == self.n_spatial

    def contains_occupied(self, occupied: Iterable[int]) -> bool:
        return set(occupied) <= set(self.active_spin_orbitals)
