import io

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from ducc_adapt.amplitudes import build_sigma_ext, partition_external, solve_ccsd
from ducc_adapt.chem_io import ActiveSpace, SpinOrbitalHamiltonian, reference_energy
from ducc_adapt.errors import PreconditionError, UnsupportedRankError
from ducc_adapt.fock import (
    DeterminantBasis,
    SparseOperatorMatrix,
    active_basis,
    bch_matrix_oracle,
    extract_body_rank,
    operator_to_matrix,
    particle_number_matrix,
    project_matrix,
    sz2_matrix,
)
from ducc_adapt.wick import (
    ANTIHERMITIAN,
    HERMITIAN,
    BchScheme,
    NormalOrderedOperator,
    antisymmetrize,
    build_effective_hamiltonian,
    contraction_patterns,
    dump_operator,
    load_operator,
    normal_order_hamiltonian,
    project_active,
    wick_commutator,
    wick_product,
)

from conftest import load_spin

N6 = 6
OCC3 = (0, 1, 2)


def random_op(rng, rank, n=N6, occ=OCC3, symmetry=None):
    t = antisymmetrize(rng.standard_normal((n,) * (2 * rank)), rank)
    op = NormalOrderedOperator(n, occ, 0.0, {rank: t})
    if symmetry == HERMITIAN:
        op = (op + op.adjoint()).scaled(0.5)
        op.symmetry = HERMITIAN
    elif symmetry == ANTIHERMITIAN:
        op = (op - op.adjoint()).scaled(0.5)
        op.symmetry = ANTIHERMITIAN
    return op


def matrix(op, basis):
    return operator_to_matrix(op, basis).toarray()


@pytest.fixture(scope="module")
def full6():
    return DeterminantBasis.full(N6)


@pytest.fixture(scope="module")
def h4():
    h = load_spin("h4_sto3g_1.00")
    amps = solve_ccsd(h)
    space = ActiveSpace.lowest(3, 4)
    sigma = build_sigma_ext(partition_external(amps, space))
    e_ref, h_n = normal_order_hamiltonian(h)
    return h, space, sigma, e_ref, h_n


def test_self_commutator_vanishes(rng):
    a = random_op(rng, 2)
    assert wick_commutator(a, a).max_abs() < 1e-14


@pytest.mark.parametrize("ka, kb", [(1, 1), (1, 2), (2, 1), (2, 2), (1, 3), (3, 1), (2, 3), (3, 2), (1, 4), (4, 1)])
def test_commutator_matches_oracle(rng, full6, ka, kb):
    a, b = random_op(rng, ka), random_op(rng, kb)
    c = wick_commutator(a, b, 4)
    ma, mb = matrix(a, full6), matrix(b, full6)
    assert np.max(np.abs(matrix(c, full6) - (ma @ mb - mb @ ma))) < 1e-11


@pytest.mark.parametrize("ka, kb", [(1, 1), (2, 1), (2, 2), (1, 3)])
def test_connected_product_matches_oracle(rng, full6, ka, kb):
    """Full product minus the disconnected (uncontracted) part."""
    a, b = random_op(rng, ka), random_op(rng, kb)
    ma, mb = matrix(a, full6), matrix(b, full6)
    conn = matrix(wick_product(a, b, 4), full6)
    # the disconnected part {ab} equals {ba}: each factor has an even number of fermion operators
    disc_ab = ma @ mb - conn
    disc_ba = mb @ ma - matrix(wick_product(b, a, 4), full6)
    assert np.max(np.abs(disc_ab - disc_ba)) < 1e-11


def test_fock_single_excitation_two_orbitals():
    n, occ = 4, (0, 1)
    f = np.diag([-0.6, -0.6, 0.4, 0.4])
    f[0, 2] = f[2, 0] = 0.05
    fn = NormalOrderedOperator(n, occ, 0.0, {1: f}, HERMITIAN)
    x = np.zeros((n, n))
    x[2, 0], x[0, 2] = 0.3, -0.3
    sigma = NormalOrderedOperator(n, occ, 0.0, {1: x}, ANTIHERMITIAN)
    basis = DeterminantBasis.full(n)
    mf, ms = matrix(fn, basis), matrix(sigma, basis)
    got = matrix(wick_commutator(fn, sigma, 2), basis)
    assert np.max(np.abs(got - (mf @ ms - ms @ mf))) < 1e-12


def test_truncated_commutator_matches_oracle_extraction(h4):
    h, space, sigma, e_ref, h_n = h4
    v_n = h_n.rank_part(2)
    basis = DeterminantBasis.full(8)
    mv, ms = matrix(v_n, basis), matrix(sigma, basis)
    full = mv @ ms - ms @ mv
    ref = extract_body_rank(SparseOperatorMatrix(basis, sp.csr_matrix(full)), 3, h.reference_occupation)
    got = wick_commutator(v_n, sigma, 3)
    assert (got - ref).max_abs() < 1e-10
    assert got.max_rank <= 3


def test_max_rank_above_four_rejected(rng):
    a = random_op(rng, 1)
    with pytest.raises(UnsupportedRankError):
        wick_commutator(a, a, 5)


def test_contraction_patterns_cover_all_pairings():
    # one creation/annihilation pair each: no contraction, hole, particle, both
    pats = contraction_patterns(1, 1)
    assert sorted((p.c_hole, p.c_particle) for p in pats) == [(0, 1), (1, 0), (1, 1)]
    # connected terms only: at least one contraction, so ranks 2 and 2 give at most 3
    pats = contraction_patterns(2, 2)
    assert all(p.c_hole + p.c_particle >= 1 for p in pats)
    assert max(p.out_rank for p in pats) == 3


def test_normal_ordered_vacuum_expectation_zero():
    h = load_spin("h4_sto3g_1.00")
    e_ref, h_n = normal_order_hamiltonian(h)
    assert e_ref == pytest.approx(reference_energy(h), abs=1e-14)
    assert h_n.scalar == 0.0
    basis = DeterminantBasis.sector(8, 4, 0)
    m = operator_to_matrix(h_n, basis)
    ref = basis.index(np.array([0b1111], dtype=np.uint64))[0]
    assert abs(m.toarray()[ref, ref]) < 1e-14


def test_zero_electron_normal_ordering():
    h1 = np.diag([-0.5, -0.5, 0.3, 0.3])
    v = np.zeros((4,) * 4)
    v[0, 1, 0, 1] = v[1, 0, 1, 0] = 0.2
    v[0, 1, 1, 0] = v[1, 0, 0, 1] = -0.2
    h = SpinOrbitalHamiltonian(4, h1, v, 0.7, ())
    e_ref, h_n = normal_order_hamiltonian(h)
    assert e_ref == 0.7
    assert np.array_equal(h_n.tensors[1], h1)
    assert np.array_equal(h_n.tensors[2], v)


def test_h2_normal_ordered_matrix_matches_hamiltonian():
    h = load_spin("h2_sto3g_0.7414")
    e_ref, h_n = normal_order_hamiltonian(h)
    basis = DeterminantBasis.full(4)
    a = matrix(h_n.shifted(e_ref), basis)
    b = operator_to_matrix(h, basis).toarray()
    assert np.max(np.abs(a - b)) < 1e-12


def test_scheme_table():
    assert BchScheme.names() == ["BARE", "A4", "A4_3", "A7", "A7_3", "A7_34"]
    ranks = {n: BchScheme.from_name(n).final_body_rank for n in BchScheme.names()}
    assert ranks == {"BARE": 2, "A4": 2, "A4_3": 3, "A7": 2, "A7_3": 3, "A7_34": 4}
    a4 = BchScheme.from_name("a4").commutator_terms
    assert [(t.prefactor, t.inner, t.depth) for t in a4] == [(1.0, "H", 0), (1.0, "H", 1), (0.5, "F", 2)]
    a7 = BchScheme.from_name("A7(34)").commutator_terms
    assert [(t.prefactor, t.inner, t.depth) for t in a7] == [
        (1.0, "H", 0), (1.0, "H", 1), (0.5, "H", 2), (1.0 / 6.0, "F", 3)]
    with pytest.raises(ValueError):
        BchScheme.from_name("a5")


@pytest.mark.parametrize("scheme", BchScheme.names())
def test_zero_sigma_and_bare_give_hn(h4, scheme):
    h, space, sigma, e_ref, h_n = h4
    zero = NormalOrderedOperator(8, h.reference_occupation, 0.0, {}, ANTIHERMITIAN)
    out = build_effective_hamiltonian(h_n, zero, scheme)
    assert out.allclose(h_n, atol=0.0)
    bare = build_effective_hamiltonian(h_n, sigma, "bare")
    assert bare.allclose(h_n, atol=0.0)


def test_a7_34_matches_matrix_bch(h4):
    h, space, sigma, e_ref, h_n = h4
    heff = build_effective_hamiltonian(h_n, sigma, "A7_34", space)
    got = matrix(heff, active_basis(space, 4, local=True))
    ref = bch_matrix_oracle(h, sigma, "A7_34", space)
    assert np.max(np.abs(got - ref)) < 1e-10


@pytest.mark.parametrize("scheme", ["A4", "A7_3", "A7_34"])
def test_effective_hamiltonian_hermitian_and_symmetric(h4, scheme):
    h, space, sigma, e_ref, h_n = h4
    heff = build_effective_hamiltonian(h_n, sigma, scheme)
    assert heff.symmetry == HERMITIAN
    basis = DeterminantBasis.full(8)
    m = operator_to_matrix(heff, basis).matrix
    assert abs(m - m.getH()).max() < 1e-12
    for sym in (particle_number_matrix(basis), sz2_matrix(basis)):
        assert abs(m @ sym - sym @ m).max() < 1e-12


def test_effective_hamiltonian_linear_in_hn(h4, rng):
    h, space, sigma, e_ref, h_n = h4
    other = random_op(rng, 2, n=8, occ=h.reference_occupation, symmetry=HERMITIAN)
    a, b = rng.standard_normal(2)
    mix = h_n.scaled(a) + other.scaled(b)
    mix.symmetry = HERMITIAN
    # F_N inside the double commutator is taken from the rank-1 part of the input
    lhs = build_effective_hamiltonian(mix, sigma, "A7_3")
    rhs = build_effective_hamiltonian(h_n, sigma, "A7_3").scaled(a) + build_effective_hamiltonian(
        other, sigma, "A7_3").scaled(b)
    assert (lhs - rhs).max_abs() < 1e-10


def test_project_active(h4):
    h, space, sigma, e_ref, h_n = h4
    full = project_active(h_n, ActiveSpace.full(4))
    assert full.allclose(h_n, atol=0.0)
    proj = project_active(h_n, space)
    assert proj.n == 6
    got = matrix(proj, active_basis(space, 4, local=True))
    whole = operator_to_matrix(h_n, DeterminantBasis.sector(8, 4, 0))
    ref = project_matrix(whole, active_basis(space, 4))
    assert np.max(np.abs(got - ref)) < 1e-12
    t = np.zeros((8,) * 4)
    t[6, 4, 0, 1] = 1.0
    one = NormalOrderedOperator(8, h.reference_occupation, 0.0, {2: antisymmetrize(t, 2)})
    assert project_active(one, space).is_zero()
    with pytest.raises(PreconditionError):
        project_active(h_n, ActiveSpace.lowest(1, 4))


def test_restricted_output_equals_projection_of_full(h4):
    h, space, sigma, e_ref, h_n = h4
    a = build_effective_hamiltonian(h_n, sigma, "A7", space)
    b = project_active(build_effective_hamiltonian(h_n, sigma, "A7"), space)
    assert (a - b).max_abs() < 1e-12


def test_operator_symmetries_after_commutator(rng):
    a = random_op(rng, 2, symmetry=HERMITIAN)
    s = random_op(rng, 2, symmetry=ANTIHERMITIAN)
    c = wick_commutator(a, s, 4)
    for k, t in c.tensors.items():
        assert np.allclose(t, antisymmetrize(t, k), atol=1e-12)
    # [H, S] with H Hermitian and S anti-Hermitian is Hermitian
    assert (c - c.adjoint()).max_abs() < 1e-12


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), scalar=st.floats(-2, 2))
def test_dump_load_round_trip(seed, scalar):
    rng = np.random.default_rng(seed)
    op = random_op(rng, 1, symmetry=HERMITIAN) + random_op(rng, 2, symmetry=HERMITIAN)
    op = op.shifted(scalar)
    buf = io.StringIO()
    dump_operator(op, buf)
    buf.seek(0)
    back = load_operator(buf)
    assert back.scalar == op.scalar
    assert back.reference_occupation == op.reference_occupation
    assert (back - op).max_abs() < 1e-15
