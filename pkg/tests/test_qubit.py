import io

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from ducc_adapt.chem_io import ActiveSpace
from ducc_adapt.errors import PreconditionError
from ducc_adapt.fock import DeterminantBasis, operator_to_matrix
from ducc_adapt.qubit import (
    PauliSum,
    Statevector,
    apply_exp_generator,
    expectation,
    fermion_to_pauli,
    jordan_wigner,
)
from ducc_adapt.wick import HERMITIAN, NormalOrderedOperator, antisymmetrize, normal_order_hamiltonian, project_active

from conftest import fixture_meta, load_spin

PAULI = {
    "I": np.eye(2),
    "X": np.array([[0, 1], [1, 0]], dtype=complex),
    "Y": np.array([[0, -1j], [1j, 0]]),
    "Z": np.diag([1.0, -1.0]).astype(complex),
}


def dense_label(label: str) -> np.ndarray:
    """Kronecker product with character q acting on bit q of the basis index."""
    out = np.eye(1)
    for ch in label:
        out = np.kron(PAULI[ch], out)
    return out


def dense_sum(ps: PauliSum) -> np.ndarray:
    return sum(c * dense_label(k) for k, c in ps.terms.items())


def random_state(rng, n):
    v = rng.standard_normal(1 << n) + 1j * rng.standard_normal(1 << n)
    return Statevector(v / np.linalg.norm(v))


def test_number_operator():
    ps = fermion_to_pauli([(1.0, [(0, True), (0, False)])], 1)
    assert ps.terms == {"I": 0.5, "Z": -0.5}


def test_hopping():
    ps = fermion_to_pauli([(1.0, [(0, True), (1, False)]), (1.0, [(1, True), (0, False)])], 2)
    assert ps.terms == pytest.approx({"XX": 0.5, "YY": 0.5})


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_pauli_matrix_matches_kronecker(seed):
    rng = np.random.default_rng(seed)
    labels = ["".join(rng.choice(list("IXYZ"), 3)) for _ in range(5)]
    ps = PauliSum(3, {k: complex(*rng.standard_normal(2)) for k in labels})
    assert np.max(np.abs(ps.to_dense() - dense_sum(ps))) < 1e-12


def test_h2_bare_hamiltonian_matches_oracle():
    h = load_spin("h2_sto3g_0.7414")
    e_ref, h_n = normal_order_hamiltonian(h)
    ps = jordan_wigner(h_n.shifted(e_ref))
    assert ps.hermitian
    assert all(c.imag == 0 for c in ps.terms.values())
    oracle = operator_to_matrix(h_n.shifted(e_ref), DeterminantBasis.full(4)).toarray()
    dense = ps.to_dense()
    assert np.max(np.abs(dense - oracle)) < 1e-12
    assert np.linalg.eigvalsh(dense[np.ix_([3, 6, 9, 12], [3, 6, 9, 12])])[0] == pytest.approx(
        fixture_meta("h2_sto3g_0.7414")["e_fci"], abs=1e-9)


def test_rank3_operator_matches_oracle(rng):
    n, occ = 6, (0, 1)
    t = antisymmetrize(rng.standard_normal((n,) * 6), 3)
    op = NormalOrderedOperator(n, occ, 0.3, {3: t})
    op = (op + op.adjoint()).scaled(0.5)
    op.symmetry = HERMITIAN
    ps = jordan_wigner(op)
    assert np.max(np.abs(ps.to_dense() - operator_to_matrix(op, DeterminantBasis.full(n)).toarray())) < 1e-12


def test_jordan_wigner_projection_and_errors():
    h = load_spin("h4_sto3g_1.00")
    e_ref, h_n = normal_order_hamiltonian(h)
    space = ActiveSpace.lowest(3, 4)
    with pytest.raises(PreconditionError):
        jordan_wigner(h_n, space)
    local = project_active(h_n, space)
    assert jordan_wigner(local, space).terms == jordan_wigner(local).terms


def test_expectation_basics(rng):
    zero = Statevector.basis_state(3, [])
    assert expectation(zero, PauliSum(3, {"ZII": 1.0}, hermitian=True)) == 1.0
    psi = random_state(rng, 3)
    assert expectation(psi, PauliSum.identity(3, 0.7)) == pytest.approx(0.7, abs=1e-14)
    with pytest.raises(ValueError):
        expectation(psi, PauliSum.identity(2))


@pytest.mark.parametrize("seed", range(5))
def test_expectation_matches_dense_quadratic_form(seed):
    rng = np.random.default_rng(seed)
    labels = {"".join(rng.choice(list("IXYZ"), 3)) for _ in range(8)}
    ps = PauliSum(3, {k: float(rng.standard_normal()) for k in labels}, hermitian=True)
    psi = random_state(rng, 3)
    ref = np.vdot(psi.amplitudes, dense_sum(ps) @ psi.amplitudes)
    for backend in ("matrix", "terms"):
        e = expectation(psi, ps, backend)
        assert isinstance(e, float)
        assert e == pytest.approx(ref.real, abs=1e-12)
    assert abs(ref.imag) < 1e-12


def test_expectation_backends_agree_on_molecule(rng):
    h = load_spin("h4_sto3g_1.00")
    e_ref, h_n = normal_order_hamiltonian(h)
    ps = jordan_wigner(h_n.shifted(e_ref))
    psi = random_state(rng, 8)
    assert expectation(psi, ps, "matrix") == pytest.approx(expectation(psi, ps, "terms"), abs=1e-12)


def test_exp_generator_identity_and_rotation(rng):
    psi = random_state(rng, 1)
    gen = PauliSum(1, {"X": -1j})
    assert np.array_equal(apply_exp_generator(psi, gen, 0.0).amplitudes, psi.amplitudes)
    theta = 0.37
    rot = np.array([[np.cos(theta), -1j * np.sin(theta)], [-1j * np.sin(theta), np.cos(theta)]])
    out = apply_exp_generator(psi, gen, theta)
    assert np.max(np.abs(out.amplitudes - rot @ psi.amplitudes)) < 1e-12
    with pytest.raises(PreconditionError):
        apply_exp_generator(psi, PauliSum(1, {"X": 1.0}), 0.1)


def test_exp_double_excitation_matches_dense(rng):
    gen = fermion_to_pauli(
        [(1.0, [(4, True), (5, True), (1, False), (0, False)]), (-1.0, [(0, True), (1, True), (5, False), (4, False)])], 8)
    assert gen.is_antihermitian()
    psi = random_state(rng, 8)
    out = apply_exp_generator(psi, gen, 0.3)
    ref = scipy.linalg.expm(0.3 * gen.to_dense()) @ psi.amplitudes
    assert np.max(np.abs(out.amplitudes - ref)) < 1e-10
    assert out.norm() == pytest.approx(1.0, abs=1e-12)
    back = apply_exp_generator(out, gen, -0.3)
    assert np.max(np.abs(back.amplitudes - psi.amplitudes)) < 1e-10


def test_pauli_sum_pruning_and_hermitian_tag():
    ps = PauliSum(2, {"XX": 1e-15, "ZZ": 0.5})
    assert list(ps.terms) == ["ZZ"]
    with pytest.raises(PreconditionError):
        PauliSum(1, {"X": 1j}, hermitian=True)
    with pytest.raises(ValueError):
        PauliSum(2, {"XQ": 1.0})


def test_pauli_text_round_trip():
    ps = PauliSum(3, {"ZII": 0.25, "XXI": -0.5, "IYZ": 1e-3j})
    buf = io.StringIO()
    ps.dump(buf)
    lines = buf.getvalue().splitlines()
    assert [ln.split()[1] for ln in lines] == sorted(ps.terms)
    buf.seek(0)
    assert PauliSum.load(buf).terms == ps.terms
