import io
from dataclasses import replace

import numpy as np
import pytest
import scipy.sparse as sp

from ducc_adapt.amplitudes import build_sigma_ext, partition_external, solve_ccsd
from ducc_adapt.chem_io import ActiveSpace
from ducc_adapt.errors import BoundsError, ConvergenceError, FeasibilityError, PreconditionError, UnsupportedRankError
from ducc_adapt.fock import (
    DeterminantBasis,
    SparseOperatorMatrix,
    active_basis,
    apply_string,
    bch_matrix_oracle,
    exact_ground_state,
    extract_body_rank,
    fci_ground_state,
    lanczos_ground_state,
    number_operator_matrix,
    operator_to_matrix,
    project_matrix,
)
from ducc_adapt.wick import ANTIHERMITIAN, HERMITIAN, NormalOrderedOperator, antisymmetrize, normal_order_hamiltonian

from conftest import fixture_meta, load_spin


def random_op(rng, ranks, n=6, occ=(0, 1, 2), hermitian=False):
    tensors = {k: antisymmetrize(rng.standard_normal((n,) * (2 * k)), k) for k in ranks}
    op = NormalOrderedOperator(n, occ, float(rng.standard_normal()), tensors)
    if hermitian:
        op = (op + op.adjoint()).scaled(0.5)
        op.symmetry = HERMITIAN
    return op


def test_sector_basis_invariants():
    b = DeterminantBasis.sector(8, 4, 0)
    assert len(b) == 36
    d = b.determinants.astype(np.int64)
    assert np.all(np.diff(d) > 0)
    alpha = sum(1 << q for q in range(0, 8, 2))
    assert np.all(np.bitwise_count(d) == 4)
    assert np.all(np.bitwise_count(d & alpha) == 2)
    pos = b.index(np.array([0b1111, 0b11], dtype=np.uint64))
    assert pos[0] >= 0 and int(b.determinants[pos[0]]) == 0b1111
    assert pos[1] == -1


def test_apply_string_signs():
    dets = np.array([0b0101, 0b0011], dtype=np.uint64)
    # a+_1 on |0,2> passes one occupied orbital below it
    out, sign, ok = apply_string(dets, [(1, True)])
    assert ok.tolist() == [True, False]
    assert int(out[0]) == 0b0111 and sign[0] == -1


def test_number_operator_diagonal():
    basis = DeterminantBasis.full(3)
    m = number_operator_matrix(basis, 0).toarray()
    assert np.array_equal(m, np.diag([d & 1 for d in range(8)]).astype(float))


def test_h2_fci_matches_fixture():
    h = load_spin("h2_sto3g_0.7414")
    e, v = fci_ground_state(h)
    assert e == pytest.approx(fixture_meta("h2_sto3g_0.7414")["e_fci"], abs=1e-9)
    assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-12)


def test_h6_fci_matches_fixture():
    h = load_spin("h6_sto3g_1.00")
    e, _ = fci_ground_state(h)
    assert e == pytest.approx(fixture_meta("h6_sto3g_1.00")["e_fci"], abs=1e-8)


def test_antihermitian_operator_matrix():
    h = load_spin("h4_sto3g_1.00")
    sigma = build_sigma_ext(partition_external(solve_ccsd(h), ActiveSpace.lowest(3, 4)))
    assert sigma.symmetry == ANTIHERMITIAN
    m = operator_to_matrix(sigma, DeterminantBasis.sector(8, 4, 0)).matrix
    assert abs(m + m.T).max() < 1e-12


def test_operator_to_matrix_linear(rng):
    basis = DeterminantBasis.full(6)
    a, b = random_op(rng, (1, 2, 3)), random_op(rng, (1, 2, 4))
    x, y = rng.standard_normal(2)
    lhs = operator_to_matrix(a.scaled(x) + b.scaled(y), basis).toarray()
    rhs = x * operator_to_matrix(a, basis).toarray() + y * operator_to_matrix(b, basis).toarray()
    assert np.max(np.abs(lhs - rhs)) < 1e-12


def test_operator_index_out_of_range_rejected(rng):
    op = random_op(rng, (1,), n=6)
    with pytest.raises(BoundsError):
        operator_to_matrix(op, DeterminantBasis.full(4))


def test_exact_ground_state_small():
    e, v = exact_ground_state(np.diag([3.0, 1.0, 2.0]))
    assert e == 1.0 and np.array_equal(v, [0.0, 1.0, 0.0])
    e, v = exact_ground_state(np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert e == pytest.approx(-1.0)
    assert np.allclose(v, np.array([1.0, -1.0]) / np.sqrt(2)) or np.allclose(v, np.array([-1.0, 1.0]) / np.sqrt(2))
    with pytest.raises(PreconditionError):
        exact_ground_state(np.array([[0.0, 1.0], [0.0, 0.0]]))


def test_lanczos_matches_dense(rng):
    n = 2500
    diag = np.sort(rng.standard_normal(n)) * 3
    off = rng.standard_normal(n - 1) * 0.2
    a = sp.diags([off, diag, off], [-1, 0, 1], format="csr")
    e, v = exact_ground_state(a)
    ref = np.linalg.eigvalsh(a.toarray())[0]
    assert e == pytest.approx(ref, abs=1e-9)
    assert np.linalg.norm(a @ v - e * v) <= 1e-9


def test_lanczos_stagnation_raises(rng):
    n = 400
    a = sp.diags(np.linspace(0, 1e-3, n), format="csr")
    with pytest.raises(ConvergenceError):
        lanczos_ground_state(a, tol=1e-14, max_steps=3, max_restarts=2)


def test_ground_energy_basis_permutation_invariant(rng):
    h = load_spin("h4_sto3g_1.60")
    m = operator_to_matrix(h, DeterminantBasis.sector(8, 4, 0)).toarray()
    perm = rng.permutation(len(m))
    e1, _ = exact_ground_state(m)
    e2, _ = exact_ground_state(m[np.ix_(perm, perm)])
    assert e1 == pytest.approx(e2, abs=1e-10)


def test_extract_round_trip_hamiltonian():
    h = load_spin("h4_sto3g_1.00")
    e_ref, h_n = normal_order_hamiltonian(h)
    basis = DeterminantBasis.full(8)
    back = extract_body_rank(operator_to_matrix(h_n, basis), 2, h.reference_occupation)
    assert (back - h_n).max_abs() < 1e-12


def test_extract_drops_higher_ranks(rng):
    basis = DeterminantBasis.full(6)
    op = random_op(rng, (3,))
    op.scalar = 0.0
    back = extract_body_rank(operator_to_matrix(op, basis), 2, op.reference_occupation)
    assert back.max_abs() < 1e-12


@pytest.mark.parametrize("seed", range(3))
def test_extract_rebuild_identity(seed):
    rng = np.random.default_rng(seed)
    basis = DeterminantBasis.full(6)
    op = random_op(rng, (1, 2, 3, 4), hermitian=True)
    m = operator_to_matrix(op, basis)
    back = extract_body_rank(m, 4, op.reference_occupation)
    assert np.max(np.abs(operator_to_matrix(back, basis).toarray() - m.toarray())) < 1e-10
    assert (back - op).max_abs() < 1e-10


def test_extract_preconditions(rng):
    op = random_op(rng, (1,))
    m = operator_to_matrix(op, DeterminantBasis.sector(6, 2, 0))
    with pytest.raises(PreconditionError):
        extract_body_rank(m, 2, op.reference_occupation)
    with pytest.raises(UnsupportedRankError):
        extract_body_rank(operator_to_matrix(op, DeterminantBasis.full(6)), 5, op.reference_occupation)


def test_oracle_bare_and_zero_sigma():
    h = load_spin("h4_sto3g_1.00")
    space = ActiveSpace.lowest(3, 4)
    e_ref, h_n = normal_order_hamiltonian(h)
    sigma = build_sigma_ext(partition_external(solve_ccsd(h), space))
    zero = NormalOrderedOperator(8, h.reference_occupation, 0.0, {}, ANTIHERMITIAN)
    bare = project_matrix(operator_to_matrix(h_n, DeterminantBasis.full(8)), active_basis(space, 4))
    assert np.max(np.abs(bch_matrix_oracle(h, zero, "A7", space) - bare)) < 1e-12
    assert np.max(np.abs(bch_matrix_oracle(h, sigma, "BARE", space) - bare)) < 1e-12


def test_bare_full_space_ground_state_is_fci():
    h = load_spin("h4_sto3g_0.80")
    e_ref, h_n = normal_order_hamiltonian(h)
    basis = DeterminantBasis.sector(8, 4, 0)
    e_n, _ = exact_ground_state(operator_to_matrix(h_n, basis))
    e_fci, _ = fci_ground_state(h)
    assert e_n + e_ref == pytest.approx(e_fci, abs=1e-10)


def test_oracle_feasibility_limit():
    h = load_spin("h4_631g_1.00")  # 16 spin orbitals is still feasible, 18 is not
    big = replace(h, n_spin_orbitals=18, h=np.zeros((18, 18)), v_antisym=np.zeros((18,) * 4))
    zero = NormalOrderedOperator(18, h.reference_occupation, 0.0, {}, ANTIHERMITIAN)
    with pytest.raises(FeasibilityError):
        bch_matrix_oracle(big, zero, "A4", ActiveSpace.lowest(3, 9))


def test_matrix_dump_format():
    m = SparseOperatorMatrix(DeterminantBasis.full(1), sp.csr_matrix(np.array([[0.0, 0.5], [0.5, 1.0]])))
    buf = io.StringIO()
    m.dump(buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "0 1 5.0000000000000000e-01"
    assert len(lines) == 3
