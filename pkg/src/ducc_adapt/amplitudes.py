"""MP2, CCD and CCSD amplitudes in the spin-orbital basis, their external part and diagnostics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import TextIO

import numpy as np

from .chem_io import ActiveSpace, SpinOrbitalHamiltonian
from .errors import ConvergenceError, DegeneracyError, DivergenceError, PreconditionError
from .wick import ANTIHERMITIAN, NormalOrderedOperator

logger = logging.getLogger(__name__)

DENOMINATOR_TOL = 1e-8
DIVERGENCE_THRESHOLD = 1e3


class Method(str, Enum):
    MP2 = "MP2"
    CCD = "CCD"
    CCSD = "CCSD"
    CCSD_T1_ZERO = "CCSD_T1_ZERO"

    @classmethod
    def parse(cls, name: str) -> "Method":
        key = name.upper().replace("(", "_").replace(")", "").replace("=", "").replace("-", "_")
        aliases = {"CCSD_T10": cls.CCSD_T1_ZERO, "CCSD_T1ZERO": cls.CCSD_T1_ZERO}
        if key in aliases:
            return aliases[key]
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown amplitude method {name!r}") from None


@dataclass(frozen=True, eq=False)
class ClusterAmplitudes:
    """Spin-orbital amplitudes ``t1[i, a]`` and antisymmetric ``t2[i, j, a, b]``.

    Occupied and virtual positions map to spin orbitals through ``occupied``
    and ``virtual``. ``f_ov`` and ``v_oovv`` are kept so the energy can be
    re-evaluated from the stored tensors.
    """

    t1: np.ndarray
    t2: np.ndarray
    method: Method
    correlation_energy: float
    occupied: tuple[int, ...]
    virtual: tuple[int, ...]
    f_ov: np.ndarray
    v_oovv: np.ndarray
    iterations: int = 0
    residual_norm: float = 0.0

    @property
    def n_spin_orbitals(self) -> int:
        return len(self.occupied) + len(self.virtual)


@dataclass(frozen=True)
class CCOptions:
    max_iterations: int = 200
    tolerance: float = 1e-9
    diis_size: int = 8


def correlation_energy(f_ov: np.ndarray, v_oovv: np.ndarray, t1: np.ndarray, t2: np.ndarray) -> float:
    e = np.sum(f_ov * t1) + 0.25 * np.sum(v_oovv * t2)
    e += 0.5 * np.einsum("ijab,ia,jb->", v_oovv, t1, t1)
    return float(e)


def _mp2_energy(v_oovv: np.ndarray, t2: np.ndarray) -> float:
    return float(0.25 * np.sum(v_oovv * t2))


class _Blocks:
    """Occupied/virtual slices of the Fock matrix and antisymmetrized integrals."""

    def __init__(self, h: SpinOrbitalHamiltonian):
        self.o = np.asarray(h.occupied)
        self.v = np.asarray(h.virtual)
        f = h.fock()
        self.f = f
        self.foo = f[np.ix_(self.o, self.o)]
        self.fvv = f[np.ix_(self.v, self.v)]
        self.fov = f[np.ix_(self.o, self.v)]
        self._g = h.v_antisym
        self._cache: dict[str, np.ndarray] = {}

    def __getitem__(self, key: str) -> np.ndarray:
        if key not in self._cache:
            idx = [self.o if c == "o" else self.v for c in key]
            self._cache[key] = self._g[np.ix_(*idx)]
        return self._cache[key]


def _denominators(foo_diag, fvv_diag):
    d1 = foo_diag[:, None] - fvv_diag[None, :]
    d2 = foo_diag[:, None, None, None] + foo_diag[None, :, None, None] - fvv_diag[None, None, :, None] - fvv_diag[None, None, None, :]
    return d1, d2


def _check_denominators(d2: np.ndarray, occupied, virtual):
    bad = np.argwhere(np.abs(d2) < DENOMINATOR_TOL)
    if len(bad):
        i, j, a, b = bad[0]
        quad = (occupied[i], occupied[j], virtual[a], virtual[b])
        raise DegeneracyError(f"vanishing denominator {d2[tuple(bad[0])]:.3e} for (i, j, a, b) = {quad}")


def _is_diagonal(m: np.ndarray, tol: float = 1e-12) -> bool:
    return bool(np.all(np.abs(m - np.diag(np.diag(m))) <= tol))


def solve_mp2(h: SpinOrbitalHamiltonian) -> ClusterAmplitudes:
    """First-order doubles amplitudes and the second-order energy.

    Canonical orbital energies are used directly. Without them the occupied
    and virtual Fock blocks are diagonalized separately (semicanonical
    orbitals) and the amplitudes are rotated back.
    """
    blk = _Blocks(h)
    occ, vir = tuple(int(i) for i in blk.o), tuple(int(a) for a in blk.v)
    v_oovv = blk["oovv"]
    if h.orbital_energies is not None:
        eps = np.asarray(h.orbital_energies)
        eo, ev = eps[blk.o], eps[blk.v]
        _, d2 = _denominators(eo, ev)
        _check_denominators(d2, occ, vir)
        t2 = v_oovv / d2
    elif _is_diagonal(blk.foo) and _is_diagonal(blk.fvv):
        _, d2 = _denominators(np.diag(blk.foo), np.diag(blk.fvv))
        _check_denominators(d2, occ, vir)
        t2 = v_oovv / d2
    else:
        eo, uo = np.linalg.eigh(blk.foo)
        ev, uv = np.linalg.eigh(blk.fvv)
        v_semi = np.einsum("ijab,iI,jJ,aA,bB->IJAB", v_oovv, uo, uo, uv, uv, optimize=True)
        _, d2 = _denominators(eo, ev)
        _check_denominators(d2, occ, vir)
        t2 = np.einsum("IJAB,iI,jJ,aA,bB->ijab", v_semi / d2, uo, uo, uv, uv, optimize=True)
    t1 = np.zeros((len(occ), len(vir)))
    return ClusterAmplitudes(t1, t2, Method.MP2, _mp2_energy(v_oovv, t2), occ, vir, blk.fov.copy(), v_oovv.copy())


# --------------------------------------------------------------------------- #
# Coupled cluster
# --------------------------------------------------------------------------- #


def _swap_ij(x):
    return x.swapaxes(0, 1)


def _swap_ab(x):
    return x.swapaxes(2, 3)


def cc_residuals(blk: _Blocks, t1: np.ndarray, t2: np.ndarray, singles: bool = True):
    """Right-hand sides of the spin-orbital CC equations with the diagonal Fock part removed.

    Returns ``(r1, r2)`` such that the projected equations read
    ``r1 - D1 t1 = 0`` and ``r2 - D2 t2 = 0``.
    """
    foo = blk.foo - np.diag(np.diag(blk.foo))
    fvv = blk.fvv - np.diag(np.diag(blk.fvv))
    fov = blk.fov
    oovv, ooov, ovvv = blk["oovv"], blk["ooov"], blk["ovvv"]

    tau_t = t2 + 0.5 * (np.einsum("ia,jb->ijab", t1, t1) - np.einsum("ib,ja->ijab", t1, t1))
    tau = t2 + np.einsum("ia,jb->ijab", t1, t1) - np.einsum("ib,ja->ijab", t1, t1)

    f_ae = fvv - 0.5 * np.einsum("me,ma->ae", fov, t1)
    f_ae += np.einsum("mf,mafe->ae", t1, ovvv)
    f_ae -= 0.5 * np.einsum("mnaf,mnef->ae", tau_t, oovv)

    f_mi = foo + 0.5 * np.einsum("ie,me->mi", t1, fov)
    f_mi += np.einsum("ne,mnie->mi", t1, ooov)
    f_mi += 0.5 * np.einsum("inef,mnef->mi", tau_t, oovv)

    f_me = fov + np.einsum("nf,mnef->me", t1, oovv)

    w_mnij = blk["oooo"].copy()
    tmp = np.einsum("je,mnie->mnij", t1, ooov)
    w_mnij += tmp - tmp.swapaxes(2, 3)
    w_mnij += 0.25 * np.einsum("ijef,mnef->mnij", tau, oovv)

    w_abef = blk["vvvv"].copy()
    tmp = np.einsum("mb,amef->abef", t1, blk["vovv"])
    w_abef -= tmp - tmp.swapaxes(0, 1)
    w_abef += 0.25 * np.einsum("mnab,mnef->abef", tau, oovv)

    w_mbej = blk["ovvo"].copy()
    w_mbej += np.einsum("jf,mbef->mbej", t1, ovvv)
    w_mbej -= np.einsum("nb,mnej->mbej", t1, blk["oovo"])
    w_mbej -= np.einsum("jnfb,mnef->mbej", 0.5 * t2 + np.einsum("jf,nb->jnfb", t1, t1), oovv)

    r1 = None
    if singles:
        r1 = fov.copy()
        r1 += np.einsum("ie,ae->ia", t1, f_ae)
        r1 -= np.einsum("ma,mi->ia", t1, f_mi)
        r1 += np.einsum("imae,me->ia", t2, f_me)
        r1 -= np.einsum("nf,naif->ia", t1, blk["ovov"])
        r1 -= 0.5 * np.einsum("imef,maef->ia", t2, ovvv)
        r1 -= 0.5 * np.einsum("mnae,nmei->ia", t2, blk["oovo"])

    r2 = oovv.copy()
    f_tmp = f_ae - 0.5 * np.einsum("mb,me->be", t1, f_me)
    tmp = np.einsum("ijae,be->ijab", t2, f_tmp)
    r2 += tmp - _swap_ab(tmp)
    f_tmp = f_mi + 0.5 * np.einsum("je,me->mj", t1, f_me)
    tmp = np.einsum("imab,mj->ijab", t2, f_tmp)
    r2 -= tmp - _swap_ij(tmp)
    r2 += 0.5 * np.einsum("mnab,mnij->ijab", tau, w_mnij)
    r2 += 0.5 * np.einsum("ijef,abef->ijab", tau, w_abef)
    tmp = np.einsum("imae,mbej->ijab", t2, w_mbej)
    tmp -= np.einsum("ie,ma,mbej->ijab", t1, t1, blk["ovvo"])
    r2 += tmp - _swap_ij(tmp) - _swap_ab(tmp) + _swap_ij(_swap_ab(tmp))
    tmp = np.einsum("ie,abej->ijab", t1, blk["vvvo"])
    r2 += tmp - _swap_ij(tmp)
    tmp = np.einsum("ma,mbij->ijab", t1, blk["ovoo"])
    r2 -= tmp - _swap_ab(tmp)
    return r1, r2


class _Diis:
    def __init__(self, size: int):
        self.size = size
        self.vectors: list[np.ndarray] = []
        self.errors: list[np.ndarray] = []

    def extrapolate(self, vec: np.ndarray, err: np.ndarray) -> np.ndarray:
        if self.size < 2:
            return vec
        self.vectors.append(vec.copy())
        self.errors.append(err.copy())
        if len(self.vectors) > self.size:
            self.vectors.pop(0)
            self.errors.pop(0)
        m = len(self.vectors)
        if m < 2:
            return vec
        b = -np.ones((m + 1, m + 1))
        b[m, m] = 0.0
        for i in range(m):
            for j in range(i, m):
                b[i, j] = b[j, i] = np.dot(self.errors[i], self.errors[j])
        rhs = np.zeros(m + 1)
        rhs[m] = -1.0
        try:
            c = np.linalg.solve(b, rhs)[:m]
        except np.linalg.LinAlgError:
            return vec
        return sum(ci * v for ci, v in zip(c, self.vectors))


def _solve_cc(h: SpinOrbitalHamiltonian, options: CCOptions, singles: bool) -> ClusterAmplitudes:
    blk = _Blocks(h)
    occ, vir = tuple(int(i) for i in blk.o), tuple(int(a) for a in blk.v)
    no, nv = len(occ), len(vir)
    d1, d2 = _denominators(np.diag(blk.foo), np.diag(blk.fvv))
    _check_denominators(d2, occ, vir)
    if singles:
        bad = np.argwhere(np.abs(d1) < DENOMINATOR_TOL)
        if len(bad):
            i, a = bad[0]
            raise DegeneracyError(f"vanishing denominator for (i, a) = {(occ[i], vir[a])}")
    oovv = blk["oovv"]
    t1 = blk.fov / d1 if singles else np.zeros((no, nv))
    t2 = oovv / d2
    diis = _Diis(options.diis_size)
    n1 = t1.size
    res_norm = np.inf
    for it in range(1, options.max_iterations + 1):
        r1, r2 = cc_residuals(blk, t1, t2, singles)
        res2 = r2 - d2 * t2
        res_norm = float(np.max(np.abs(res2), initial=0.0))
        if singles:
            res1 = r1 - d1 * t1
            res_norm = max(res_norm, float(np.max(np.abs(res1), initial=0.0)))
        logger.debug("CC iteration %d residual %.3e", it, res_norm)
        if not np.isfinite(res_norm) or res_norm > DIVERGENCE_THRESHOLD:
            raise DivergenceError(f"CC iterations diverged (residual {res_norm:.3e})", residual=res_norm)
        if res_norm < options.tolerance:
            method = Method.CCSD if singles else Method.CCD
            energy = correlation_energy(blk.fov, oovv, t1, t2)
            return ClusterAmplitudes(t1, t2, method, energy, occ, vir, blk.fov.copy(), oovv.copy(), it, res_norm)
        new1 = r1 / d1 if singles else t1
        new2 = r2 / d2
        vec = np.concatenate([new1.ravel(), new2.ravel()])
        err = vec - np.concatenate([t1.ravel(), t2.ravel()])
        vec = diis.extrapolate(vec, err)
        if singles:
            t1 = vec[:n1].reshape(no, nv)
        t2 = vec[n1:].reshape(no, no, nv, nv)
        t2 = 0.25 * (t2 - _swap_ij(t2) - _swap_ab(t2) + _swap_ij(_swap_ab(t2)))
    raise ConvergenceError(
        f"CC equations not converged in {options.max_iterations} iterations (residual {res_norm:.3e})",
        residual=res_norm,
        state=(t1, t2),
    )


def solve_ccsd(h: SpinOrbitalHamiltonian, options: CCOptions | None = None) -> ClusterAmplitudes:
    """Iterate the spin-orbital CCSD equations with DIIS from the MP2 guess."""
    return _solve_cc(h, options or CCOptions(), singles=True)


def solve_ccd(h: SpinOrbitalHamiltonian, options: CCOptions | None = None) -> ClusterAmplitudes:
    """CCSD iterations with the singles held at zero."""
    return _solve_cc(h, options or CCOptions(), singles=False)


def cc_projection_residual(h: SpinOrbitalHamiltonian, amps: ClusterAmplitudes) -> float:
    """Max-norm of the CC projection equations at ``amps``."""
    blk = _Blocks(h)
    d1, d2 = _denominators(np.diag(blk.foo), np.diag(blk.fvv))
    singles = amps.method in (Method.CCSD,)
    r1, r2 = cc_residuals(blk, amps.t1, amps.t2, singles)
    res = float(np.max(np.abs(r2 - d2 * amps.t2), initial=0.0))
    if singles:
        res = max(res, float(np.max(np.abs(r1 - d1 * amps.t1), initial=0.0)))
    return res


def ccsd_t1_zeroed(amps: ClusterAmplitudes) -> ClusterAmplitudes:
    """Drop the singles of a CCSD solution, keeping its doubles untouched."""
    if amps.method is not Method.CCSD:
        raise PreconditionError(f"expected CCSD amplitudes, got {amps.method.value}")
    t1 = np.zeros_like(amps.t1)
    energy = correlation_energy(amps.f_ov, amps.v_oovv, t1, amps.t2)
    return replace(amps, t1=t1, method=Method.CCSD_T1_ZERO, correlation_energy=energy)


def solve_amplitudes(h: SpinOrbitalHamiltonian, method: Method | str,
                     options: CCOptions | None = None) -> ClusterAmplitudes:
    method = Method.parse(method) if isinstance(method, str) else method
    if method is Method.MP2:
        return solve_mp2(h)
    if method is Method.CCD:
        return solve_ccd(h, options)
    amps = solve_ccsd(h, options)
    return ccsd_t1_zeroed(amps) if method is Method.CCSD_T1_ZERO else amps


# --------------------------------------------------------------------------- #
# External part, sigma and diagnostics
# --------------------------------------------------------------------------- #


@dataclass(frozen=True, eq=False)
class ExternalPartition:
    t1_ext: np.ndarray
    t2_ext: np.ndarray
    t1_int: np.ndarray
    t2_int: np.ndarray
    occupied: tuple[int, ...]
    virtual: tuple[int, ...]

    @property
    def n_spin_orbitals(self) -> int:
        return len(self.occupied) + len(self.virtual)


def partition_external(amps: ClusterAmplitudes, space: ActiveSpace) -> ExternalPartition:
    """Split amplitudes into those touching an external orbital and the rest."""
    if space.n_spin_orbitals != amps.n_spin_orbitals:
        raise PreconditionError(
            f"active space covers {space.n_spin_orbitals} spin orbitals, amplitudes {amps.n_spin_orbitals}")
    ext = set(space.external_spin_orbitals)
    eo = np.array([i in ext for i in amps.occupied])
    ev = np.array([a in ext for a in amps.virtual])
    m1 = eo[:, None] | ev[None, :]
    m2 = (eo[:, None, None, None] | eo[None, :, None, None]
          | ev[None, None, :, None] | ev[None, None, None, :])
    zero = 0.0
    return ExternalPartition(
        np.where(m1, amps.t1, zero), np.where(m2, amps.t2, zero),
        np.where(m1, zero, amps.t1), np.where(m2, zero, amps.t2),
        amps.occupied, amps.virtual,
    )


def build_sigma_ext(part: ExternalPartition) -> NormalOrderedOperator:
    """Anti-Hermitian ``T_ext - T_ext^+`` as a normal-ordered operator."""
    n = part.n_spin_orbitals
    o = np.array(part.occupied, dtype=np.int64)
    v = np.array(part.virtual, dtype=np.int64)
    x1 = np.zeros((n, n))
    x1[np.ix_(v, o)] = part.t1_ext.T
    x1[np.ix_(o, v)] = -part.t1_ext
    x2 = np.zeros((n,) * 4)
    x2[np.ix_(v, v, o, o)] = part.t2_ext.transpose(2, 3, 0, 1)
    x2[np.ix_(o, o, v, v)] = -part.t2_ext
    tensors = {}
    if np.any(x1):
        tensors[1] = x1
    if np.any(x2):
        tensors[2] = x2
    return NormalOrderedOperator(n, part.occupied, 0.0, tensors, ANTIHERMITIAN)


@dataclass(frozen=True)
class DiagnosticReport:
    """Amplitude diagnostics.

    ``t1`` and ``t1_ext`` use ``||t1||_F / sqrt(N)`` over spin-orbital
    amplitudes. The ``*_closed_shell`` variants divide by ``sqrt(2N)``, which
    equals the customary closed-shell value computed from spatial amplitudes.
    The T2 analogues use the same normalization.
    """

    n_electrons: int
    t1: float
    t1_ext: float
    t1_closed_shell: float
    t1_ext_closed_shell: float
    t2: float
    t2_ext: float
    max_abs_t1_ext: float
    max_abs_t2_ext: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def diagnostics(part: ExternalPartition, n_electrons: int) -> DiagnosticReport:
    t1 = part.t1_ext + part.t1_int
    t2 = part.t2_ext + part.t2_int
    root = np.sqrt(n_electrons) if n_electrons > 0 else np.inf
    root2 = np.sqrt(2 * n_electrons) if n_electrons > 0 else np.inf
    return DiagnosticReport(
        n_electrons=n_electrons,
        t1=float(np.linalg.norm(t1) / root),
        t1_ext=float(np.linalg.norm(part.t1_ext) / root),
        t1_closed_shell=float(np.linalg.norm(t1) / root2),
        t1_ext_closed_shell=float(np.linalg.norm(part.t1_ext) / root2),
        t2=float(np.linalg.norm(t2) / root),
        t2_ext=float(np.linalg.norm(part.t2_ext) / root),
        max_abs_t1_ext=float(np.max(np.abs(part.t1_ext), initial=0.0)),
        max_abs_t2_ext=float(np.max(np.abs(part.t2_ext), initial=0.0)),
    )


# --------------------------------------------------------------------------- #
# Text format
# --------------------------------------------------------------------------- #


def write_amplitudes(amps: ClusterAmplitudes, stream: TextIO) -> None:
    """``T1 i a value`` and ``T2 i j a b value`` records (i<j, a<b) with spin-orbital indices."""
    occ = " ".join(str(i) for i in amps.occupied)
    stream.write(f"# method={amps.method.value} n_spin_orbitals={amps.n_spin_orbitals} occupied={occ}\n")
    stream.write(f"# correlation_energy={amps.correlation_energy:.16e}\n")
    for i, a in zip(*np.nonzero(amps.t1)):
        stream.write(f"T1 {amps.occupied[i]} {amps.virtual[a]} {amps.t1[i, a]:.16e}\n")
    o, v = amps.occupied, amps.virtual
    for i, j, a, b in zip(*np.nonzero(amps.t2)):
        if i < j and a < b:
            stream.write(f"T2 {o[i]} {o[j]} {v[a]} {v[b]} {amps.t2[i, j, a, b]:.16e}\n")


def read_amplitudes(stream: TextIO, h: SpinOrbitalHamiltonian, method: Method | str | None = None) -> ClusterAmplitudes:
    """Parse the text format; the energy is recomputed from ``h``."""
    blk = _Blocks(h)
    occ, vir = tuple(int(i) for i in blk.o), tuple(int(a) for a in blk.v)
    opos = {p: k for k, p in enumerate(occ)}
    vpos = {p: k for k, p in enumerate(vir)}
    t1 = np.zeros((len(occ), len(vir)))
    t2 = np.zeros((len(occ), len(occ), len(vir), len(vir)))
    tag = None
    for lineno, line in enumerate(stream, 1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            for tok in line[1:].split():
                if tok.startswith("method="):
                    tag = tok.split("=", 1)[1]
            continue
        tok = line.split()
        try:
            if tok[0] == "T1":
                i, a = opos[int(tok[1])], vpos[int(tok[2])]
                t1[i, a] = float(tok[3])
            elif tok[0] == "T2":
                i, j = opos[int(tok[1])], opos[int(tok[2])]
                a, b = vpos[int(tok[3])], vpos[int(tok[4])]
                x = float(tok[5])
                t2[i, j, a, b] = t2[j, i, b, a] = x
                t2[j, i, a, b] = t2[i, j, b, a] = -x
            else:
                raise ValueError(f"unknown record type {tok[0]!r}")
        except (KeyError, IndexError, ValueError) as exc:
            raise ValueError(f"line {lineno}: cannot parse amplitude record {line!r} ({exc})") from None
    method = method or tag or "CCSD"
    method = Method.parse(method) if isinstance(method, str) else method
    energy = correlation_energy(blk.fov, blk["oovv"], t1, t2)
    return ClusterAmplitudes(t1, t2, method, energy, occ, vir, blk.fov.copy(), blk["oovv"].copy())
