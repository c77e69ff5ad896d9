"""ADAPT-VQE on an exact statevector with a spin-complemented GSD pool."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from itertools import combinations
from typing import Sequence, TextIO

import numpy as np
import scipy.linalg
import scipy.optimize
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .chem_io import ActiveSpace
from .errors import ConvergenceError, OptimizerError
from .qubit import PauliSum, Statevector, fermion_to_pauli

logger = logging.getLogger(__name__)


# --------------------------------------------------------------------------- #
# Pool
# --------------------------------------------------------------------------- #


def _flip(p: int) -> int:
    return p ^ 1


def _canonical_double(p, q, r, s):
    """Sorted pair representation of ``a+_p a+_q a_s a_r`` with its sign."""
    sign = 1
    if p > q:
        p, q, sign = q, p, -sign
    if r > s:
        r, s, sign = s, r, -sign
    return (p, q, r, s), sign


class _BlockExp:
    """Exact ``exp(theta G)`` for a sparse real anti-Hermitian ``G``.

    The connected components of ``G``'s sparsity graph are diagonalized once.
    With ``K = iG = sum_mu mu P_mu``, pairing ``+mu`` and ``-mu`` gives
    ``exp(theta G) = P_0 + sum_{mu>0} cos(theta mu) 2Re(P_mu) + sin(theta mu) 2Im(P_mu)``,
    so every exponential is one stacked sparse product.
    """

    def __init__(self, g: sp.csr_matrix, tol: float = 1e-9):
        dim = g.shape[0]
        g = g.tocsr()
        pattern = (abs(g) + abs(g).T).tocsr()
        n_comp, labels = connected_components(pattern, directed=False)
        sizes = np.bincount(labels, minlength=n_comp)
        order = np.argsort(labels, kind="stable")
        starts = np.concatenate([[0], np.cumsum(sizes)])
        by_size: dict[int, list[np.ndarray]] = {}
        isolated = []
        for c in range(n_comp):
            members = order[starts[c] : starts[c + 1]]
            if sizes[c] < 2:
                isolated.extend(members)
            else:
                by_size.setdefault(int(sizes[c]), []).append(members)
        groups = []
        for comps in by_size.values():
            idx = np.array(comps)
            blocks = np.stack([g[i][:, i].toarray() for i in idx])
            lam, vec = np.linalg.eigh(1j * blocks)
            groups.append((idx, lam, vec))
        mus = np.unique(np.round(np.abs(np.concatenate([l.ravel() for _, l, _ in groups] or [np.zeros(0)])), 8))
        mus = [m for m in mus if m > tol]
        pieces = {0.0: ([np.array(isolated, dtype=np.int64)], [np.array(isolated, dtype=np.int64)],
                        [np.ones(len(isolated))])}

        def add(key, rows, cols, vals):
            entry = pieces.setdefault(key, ([], [], []))
            entry[0].append(rows)
            entry[1].append(cols)
            entry[2].append(vals)

        for idx, lam, vec in groups:
            m = idx.shape[1]
            rows = np.repeat(idx[:, :, None], m, axis=2).ravel()
            cols = np.repeat(idx[:, None, :], m, axis=1).ravel()
            sel0 = np.abs(lam) <= tol
            p0 = np.einsum("kij,kj,klj->kil", vec, sel0, vec.conj())
            add(0.0, rows, cols, p0.real.ravel())
            for mu in mus:
                sel = np.abs(lam - mu) <= 1e-7
                if not sel.any():
                    continue
                pm = np.einsum("kij,kj,klj->kil", vec, sel, vec.conj())
                add(("c", mu), rows, cols, 2 * pm.real.ravel())
                add(("s", mu), rows, cols, 2 * pm.imag.ravel())
        self.keys = list(pieces)
        mats = []
        for key in self.keys:
            r, c, v = (np.concatenate(x) for x in pieces[key])
            mats.append(sp.coo_matrix((v, (r, c)), shape=(dim, dim)).tocsr())
        self.stack = sp.vstack(mats).tocsr()
        self.dim = dim
        self._mu = np.array([0.0 if k == 0.0 else k[1] for k in self.keys])
        self._is_sin = np.array([k != 0.0 and k[0] == "s" for k in self.keys])

    def weights(self, theta: float) -> np.ndarray:
        # the identity-like P_0 entry has mu = 0 and cos(0) = 1
        return np.where(self._is_sin, np.sin(theta * self._mu), np.cos(theta * self._mu))

    def apply(self, theta: float, v: np.ndarray) -> np.ndarray:
        w = (self.stack @ v).reshape(len(self.keys), self.dim)
        return self.weights(theta) @ w


@dataclass(eq=False)
class PoolOperator:
    """One anti-Hermitian generator and its fermionic origin.

    ``terms`` lists ``(coefficient, ladder string)``; the Hermitian conjugate
    part is included.
    """

    kind: str
    key: tuple
    terms: list
    generator: PauliSum
    _matrix: sp.csr_matrix | None = field(default=None, repr=False)
    _exp: _BlockExp | None = field(default=None, repr=False)

    @property
    def matrix(self) -> sp.csr_matrix:
        if self._matrix is None:
            m = self.generator.to_sparse()
            if np.all(m.data.imag == 0):
                m = m.real.tocsr()
            self._matrix = m
        return self._matrix

    def exp_apply(self, theta: float, v: np.ndarray) -> np.ndarray:
        if self._exp is None:
            self._exp = _BlockExp(self.matrix)
        return self._exp.apply(theta, v)


@dataclass(eq=False)
class OperatorPool:
    operators: list[PoolOperator]
    n_qubits: int
    flavor: str = "GSD"
    _stack: sp.csr_matrix | None = field(default=None, repr=False)
    _sector_cache: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.operators)

    def __getitem__(self, k: int) -> PoolOperator:
        return self.operators[k]

    @property
    def stacked(self) -> sp.csr_matrix:
        if self._stack is None:
            self._stack = sp.vstack([op.matrix for op in self.operators]).tocsr()
        return self._stack


def _double_terms(p, q, r, s, coeff=1.0):
    """``coeff (a+_p a+_q a_s a_r - h.c.)`` as ladder strings."""
    return [
        (coeff, [(p, True), (q, True), (s, False), (r, False)]),
        (-coeff, [(r, True), (s, True), (q, False), (p, False)]),
    ]


def _single_terms(p, q, coeff=1.0):
    return [(coeff, [(p, True), (q, False)]), (-coeff, [(q, True), (p, False)])]


def build_gsd_pool(space: ActiveSpace | int) -> OperatorPool:
    """Generalized singles and doubles, each summed with its spin-flipped image.

    Orbitals are active-local (``2k`` alpha, ``2k + 1`` beta). Doubles are
    labelled by sorted pairs ``(p < q)`` and ``(r < s)`` with ``(p, q) > (r, s)``
    so a generator and its negative are never both listed.
    """
    n_spatial = space if isinstance(space, int) else len(space.active_spatial)
    n = 2 * n_spatial
    ops: list[PoolOperator] = []

    for pa, qa in combinations(range(n_spatial), 2):
        p, q = 2 * qa, 2 * pa  # higher orbital created
        terms = _single_terms(p, q) + _single_terms(p + 1, q + 1)
        ops.append(PoolOperator("single", (qa, pa), terms, fermion_to_pauli(terms, n)))

    def spin(p):
        return 1 if p % 2 == 0 else -1

    seen: set = set()
    pairs = list(combinations(range(n), 2))
    for (r, s), (p, q) in combinations(pairs, 2):
        if spin(p) + spin(q) != spin(r) + spin(s):
            continue
        key, _ = _canonical_double(p, q, r, s)
        fkey, fsign = _canonical_double(_flip(p), _flip(q), _flip(r), _flip(s))
        # orient the flipped generator so its created pair is the larger one
        if (fkey[0], fkey[1]) < (fkey[2], fkey[3]):
            fkey = (fkey[2], fkey[3], fkey[0], fkey[1])
            fsign = -fsign
        combo = {key: 1.0}
        combo[fkey] = combo.get(fkey, 0.0) + fsign
        combo = {k: c for k, c in combo.items() if c != 0}
        if not combo:
            continue  # the flipped image cancels the generator
        # identical combos arise from either member; keep the first
        ident = tuple(sorted(combo))
        if ident in seen:
            continue
        seen.add(ident)
        first = min(combo)
        scale = combo[first]
        terms = []
        for k, c in sorted(combo.items()):
            terms += _double_terms(*k, coeff=c / abs(scale) * (1 if scale > 0 else -1))
        ops.append(PoolOperator("double", tuple(sorted(combo)), terms, fermion_to_pauli(terms, n)))

    singles = [o for o in ops if o.kind == "single"]
    doubles = sorted((o for o in ops if o.kind == "double"), key=lambda o: o.key)
    return OperatorPool(singles + doubles, n)


# --------------------------------------------------------------------------- #
# Gradients and selection
# --------------------------------------------------------------------------- #


def _hmat(h) -> sp.csr_matrix:
    if isinstance(h, PauliSum):
        m = h.to_sparse()
        if np.all(m.data.imag == 0):
            m = m.real.tocsr()
        return m
    return h


def pool_gradients(psi: Statevector, h, pool: OperatorPool) -> np.ndarray:
    """``g_k = <psi|[H, A_k]|psi> = 2 Re <H psi|A_k psi>`` for every pool element."""
    v = psi.amplitudes
    hv = _hmat(h) @ v
    av = (pool.stacked @ v).reshape(len(pool), -1)
    return 2.0 * np.real(av @ np.conj(hv))


def _reference_sector(v: np.ndarray) -> np.ndarray | None:
    """Indices of the particle-number/Sz sector holding ``v``, or None if ``v`` mixes sectors."""
    support = np.nonzero(v)[0]
    if support.size == 0:
        return None
    n_qubits = v.size.bit_length() - 1
    alpha = sum(1 << q for q in range(0, n_qubits, 2))
    na = np.bitwise_count(support & alpha).astype(np.int64)
    nb = np.bitwise_count(support & ~alpha).astype(np.int64)
    if np.any(na != na[0]) or np.any(nb != nb[0]):
        return None
    return sector_indices(n_qubits, int(na[0] + nb[0]), int(na[0] - nb[0]))


class _Workspace:
    """Hamiltonian, pool and reference restricted to the reference's symmetry sector.

    Pool generators conserve particle number and Sz, so the ansatz never
    leaves that sector and the restriction is exact.
    """

    def __init__(self, h, pool: OperatorPool, reference: Statevector):
        hmat = _hmat(h)
        v = reference.amplitudes
        idx = _reference_sector(v)
        self.full_dim = v.size
        self.idx = np.arange(v.size) if idx is None else idx
        self.h = hmat[self.idx][:, self.idx].tocsr()
        self.ref = v[self.idx].copy()
        key = self.idx.tobytes()
        cache = pool._sector_cache.setdefault(key, {})
        self._cache = cache
        self.pool = pool

    def matrix(self, k: int) -> sp.csr_matrix:
        entry = self._cache.get(k)
        if entry is None:
            m = self.pool[k].matrix[self.idx][:, self.idx].tocsr()
            entry = self._cache[k] = [m, None]
        return entry[0]

    def exp_apply(self, k: int, theta: float, v: np.ndarray) -> np.ndarray:
        m = self.matrix(k)
        entry = self._cache[k]
        if entry[1] is None:
            entry[1] = _BlockExp(m)
        return entry[1].apply(theta, v)

    def stacked(self) -> sp.csr_matrix:
        if "stack" not in self._cache:
            self._cache["stack"] = sp.vstack([self.matrix(k) for k in range(len(self.pool))]).tocsr()
        return self._cache["stack"]

    def prepare(self, op_indices: Sequence[int], theta: np.ndarray) -> np.ndarray:
        v = self.ref.astype(complex)
        for k, t in zip(op_indices, theta):
            v = self.exp_apply(k, t, v)
        return v

    def gradients(self, v: np.ndarray) -> np.ndarray:
        if len(self.pool) == 0:
            return np.zeros(0)
        hv = self.h @ v
        av = (self.stacked() @ v).reshape(len(self.pool), -1)
        return 2.0 * np.real(av @ np.conj(hv))

    def energy(self, v: np.ndarray) -> float:
        return float(np.vdot(v, self.h @ v).real)

    def energy_and_gradient(self, op_indices: Sequence[int], theta: np.ndarray):
        phi = self.prepare(op_indices, theta)
        lam = self.h @ phi
        energy = float(np.vdot(phi, lam).real)
        grad = np.zeros(len(theta))
        for pos in range(len(theta) - 1, -1, -1):
            k = op_indices[pos]
            grad[pos] = 2.0 * np.real(np.vdot(lam, self.matrix(k) @ phi))
            phi = self.exp_apply(k, -theta[pos], phi)
            lam = self.exp_apply(k, -theta[pos], lam)
        return energy, grad

    def embed(self, v: np.ndarray) -> Statevector:
        out = np.zeros(self.full_dim, dtype=complex)
        out[self.idx] = v
        return Statevector(out)


def select_operator(gradients: Sequence[float]) -> tuple[int, bool]:
    """Index of the largest ``|g|`` (first on ties) and whether all gradients vanish."""
    g = np.abs(np.asarray(gradients, dtype=float))
    if g.size == 0:
        raise ValueError("empty gradient vector")
    return int(np.argmax(g)), bool(np.all(g == 0))


# --------------------------------------------------------------------------- #
# Ansatz and inner optimization
# --------------------------------------------------------------------------- #


@dataclass
class AnsatzState:
    op_indices: list[int]
    parameters: np.ndarray
    reference: Statevector

    def __post_init__(self):
        self.parameters = np.asarray(self.parameters, dtype=float)
        if len(self.op_indices) != len(self.parameters):
            raise ValueError("one parameter per ansatz operator is required")

    def prepare(self, pool: OperatorPool, parameters: np.ndarray | None = None) -> Statevector:
        theta = self.parameters if parameters is None else parameters
        v = self.reference.amplitudes.copy()
        for k, t in zip(self.op_indices, theta):
            v = pool[k].exp_apply(t, v)
        return Statevector(v)

    def grown(self, op_index: int) -> "AnsatzState":
        return AnsatzState(self.op_indices + [op_index], np.append(self.parameters, 0.0), self.reference)


def energy_and_gradient(ansatz: AnsatzState, h, pool: OperatorPool, theta: np.ndarray):
    """Energy and its parameter gradient by a reverse sweep through the ansatz."""
    ws = _Workspace(h, pool, ansatz.reference)
    return ws.energy_and_gradient(ansatz.op_indices, np.asarray(theta, dtype=float))


@dataclass(frozen=True)
class VqeOptions:
    gtol: float = 1e-7
    max_iterations: int = 500


def vqe_minimize(ansatz: AnsatzState, h, pool: OperatorPool, options: VqeOptions | None = None,
                 workspace: _Workspace | None = None):
    """BFGS over the ansatz parameters; returns ``(energy, optimized ansatz, iterations)``.

    Raises :class:`OptimizerError` when the line search fails and
    :class:`ConvergenceError` at the iteration cap; both carry the best point.
    """
    options = options or VqeOptions()
    ws = workspace or _Workspace(h, pool, ansatz.reference)
    if not ansatz.op_indices:
        return ws.energy(ws.ref.astype(complex)), ansatz, 0
    ops = list(ansatz.op_indices)
    best = {"e": np.inf, "x": ansatz.parameters.copy()}

    def fun(x):
        e, g = ws.energy_and_gradient(ops, x)
        if e < best["e"]:
            best["e"], best["x"] = e, x.copy()
        return e, g

    res = scipy.optimize.minimize(
        fun, ansatz.parameters.copy(), jac=True, method="BFGS",
        options={"gtol": options.gtol, "norm": np.inf, "maxiter": options.max_iterations},
    )
    x = res.x if res.fun <= best["e"] else best["x"]
    out = AnsatzState(ops, x, ansatz.reference)
    energy = min(float(res.fun), best["e"])
    if res.status == 1:
        raise ConvergenceError(f"VQE hit {options.max_iterations} iterations", residual=float(np.max(np.abs(res.jac))),
                               state=(energy, out, int(res.nit)))
    if not res.success:
        raise OptimizerError(f"VQE optimizer stopped: {res.message}", residual=float(np.max(np.abs(res.jac))),
                             state=(energy, out, int(res.nit)))
    return energy, out, int(res.nit)


# --------------------------------------------------------------------------- #
# Outer loop
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class AdaptOptions:
    grad_norm_tol: float = 1e-4
    max_adapt_iterations: int = 200
    vqe: VqeOptions = VqeOptions()


@dataclass
class AdaptRecord:
    iteration: int
    energy: float
    grad_norm2: float
    grad_norm_inf: float
    op_index: int
    vqe_iters: int
    wall_time: float
    optimizer_ok: bool = True

    @property
    def max_abs_gradient(self) -> float:
        return self.grad_norm_inf


@dataclass
class AdaptTrace:
    records: list[AdaptRecord] = field(default_factory=list)
    reference_energy: float = 0.0
    final_grad_norm2: float = float("nan")
    final_grad_norm_inf: float = float("nan")
    monotonic: bool = True

    @property
    def energies(self) -> np.ndarray:
        return np.array([r.energy for r in self.records])

    def write_jsonl(self, stream: TextIO) -> None:
        for r in self.records:
            rec = {
                "iteration": r.iteration,
                "energy": r.energy,
                "grad_norm2": r.grad_norm2,
                "grad_norm_inf": r.grad_norm_inf,
                "op_index": r.op_index,
                "vqe_iters": r.vqe_iters,
                "optimizer_ok": r.optimizer_ok,
            }
            stream.write(json.dumps(rec, sort_keys=True) + "\n")


@dataclass
class AdaptResult:
    energy: float
    ansatz: AnsatzState
    trace: AdaptTrace
    converged: bool

    @property
    def iterations(self) -> int:
        return len(self.trace.records)


def adapt_run(h, pool: OperatorPool, reference: Statevector, options: AdaptOptions | None = None) -> AdaptResult:
    """Grow the ansatz one pool element at a time until the pool gradient is small.

    Reaching ``max_adapt_iterations`` returns ``converged=False`` rather than
    raising.
    """
    options = options or AdaptOptions()
    ws = _Workspace(h, pool, reference)
    ansatz = AnsatzState([], np.zeros(0), reference)
    energy = ws.energy(ws.ref.astype(complex))
    trace = AdaptTrace(reference_energy=energy)
    converged = False
    for it in range(1, options.max_adapt_iterations + 2):
        v = ws.prepare(ansatz.op_indices, ansatz.parameters)
        grads = ws.gradients(v)
        norm2 = float(np.linalg.norm(grads))
        norm_inf = float(np.max(np.abs(grads), initial=0.0))
        trace.final_grad_norm2, trace.final_grad_norm_inf = norm2, norm_inf
        if norm2 < options.grad_norm_tol:
            converged = True
            break
        if it > options.max_adapt_iterations:
            break
        k, _ = select_operator(grads)
        start = time.perf_counter()
        ok = True
        try:
            new_energy, ansatz, n_vqe = vqe_minimize(ansatz.grown(k), None, pool, options.vqe, ws)
        except ConvergenceError as exc:
            new_energy, ansatz, n_vqe = exc.state
            ok = False
            logger.warning("ADAPT iteration %d: %s", it, exc)
        if new_energy > energy + 1e-10:
            trace.monotonic = False
            logger.warning("ADAPT iteration %d raised the energy by %.3e", it, new_energy - energy)
        energy = new_energy
        trace.records.append(AdaptRecord(it, energy, norm2, norm_inf, k, n_vqe,
                                         time.perf_counter() - start, ok))
        logger.info("ADAPT %3d  E=%.10f  |g|=%.3e  op=%d", it, energy, norm2, k)
    return AdaptResult(energy, ansatz, trace, converged)


def hartree_fock_state(n_qubits: int, n_electrons: int) -> Statevector:
    return Statevector.basis_state(n_qubits, range(n_electrons))


def sector_indices(n_qubits: int, n_electrons: int, sz2: int = 0) -> np.ndarray:
    """Computational-basis indices with the given particle number and ``2 Sz``."""
    b = np.arange(1 << n_qubits, dtype=np.int64)
    alpha = sum(1 << q for q in range(0, n_qubits, 2))
    na = np.bitwise_count(b & alpha).astype(np.int64)
    nb = np.bitwise_count(b & ~alpha).astype(np.int64)
    return b[(na + nb == n_electrons) & (na - nb == sz2)]


def sector_ground_energy(h, n_electrons: int, sz2: int = 0) -> float:
    """Lowest eigenvalue of the qubit operator within one particle-number and Sz sector."""
    m = _hmat(h)
    n_qubits = m.shape[0].bit_length() - 1
    idx = sector_indices(n_qubits, n_electrons, sz2)
    sub = m[idx][:, idx].toarray()
    return float(scipy.linalg.eigh(sub, eigvals_only=True, subset_by_index=[0, 0])[0])
