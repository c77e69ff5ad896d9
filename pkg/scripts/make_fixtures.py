"""Regenerate the FCIDUMP fixtures and their reference energies with PySCF.

Run offline; PySCF is not a runtime dependency of the package.

    python scripts/make_fixtures.py [outdir]
"""

import json
import sys
from pathlib import Path

import numpy as np
import pyscf
from pyscf import ao2mo, cc, fci, gto, mp, scf
from pyscf.tools import fcidump

SYSTEMS = [
    ("h2_sto3g_0.7414", "sto-3g", 2, 0.7414),
    ("h2_631g_0.7414", "6-31g", 2, 0.7414),
    ("h4_sto3g_0.80", "sto-3g", 4, 0.80),
    ("h4_sto3g_1.00", "sto-3g", 4, 1.00),
    ("h4_sto3g_1.60", "sto-3g", 4, 1.60),
    ("h4_631g_0.80", "6-31g", 4, 0.80),
    ("h4_631g_1.00", "6-31g", 4, 1.00),
    ("h4_631g_1.60", "6-31g", 4, 1.60),
    ("h6_sto3g_0.80", "sto-3g", 6, 0.80),
    ("h6_sto3g_1.00", "sto-3g", 6, 1.00),
    ("h6_sto3g_2.00", "sto-3g", 6, 2.00),
]


class _CCD(cc.ccsd.CCSD):
    def update_amps(self, t1, t2, eris):
        t1, t2 = super().update_amps(np.zeros_like(t1), t2, eris)
        return np.zeros_like(t1), t2


def hydrogen_chain(n_atoms, spacing):
    return [("H", (0.0, 0.0, i * spacing)) for i in range(n_atoms)]


def build(name, basis, n_atoms, spacing, outdir):
    atoms = hydrogen_chain(n_atoms, spacing)
    mol = gto.M(atom=atoms, basis=basis, unit="Angstrom", verbose=0)
    mf = scf.RHF(mol)
    mf.conv_tol = 1e-13
    mf.kernel()
    nmo = mf.mo_coeff.shape[1]
    h1 = mf.mo_coeff.T @ mf.get_hcore() @ mf.mo_coeff
    eri = ao2mo.restore(1, ao2mo.kernel(mol, mf.mo_coeff), nmo)
    fcidump.from_integrals(
        str(outdir / f"{name}.FCIDUMP"), h1, eri, nmo, mol.nelectron,
        nuc=mol.energy_nuc(), float_format=" %.17e",
    )

    emp2 = mp.MP2(mf).run().e_corr
    mycc = cc.CCSD(mf)
    mycc.conv_tol = 1e-12
    mycc.conv_tol_normt = 1e-10
    mycc.kernel()
    myccd = _CCD(mf)
    myccd.conv_tol = 1e-12
    myccd.conv_tol_normt = 1e-10
    myccd.kernel()
    solver = fci.FCI(mf)
    solver.conv_tol = 1e-13
    efci = solver.kernel(h1e=h1, eri=eri, norb=nmo, nelec=mol.nelectron,
                              ecore=mol.energy_nuc())[0]

    meta = {
        "system": name,
        "geometry_angstrom": [[a, list(xyz)] for a, xyz in atoms],
        "basis": basis,
        "generator": f"PySCF {pyscf.__version__}",
        "n_orbitals": int(nmo),
        "n_electrons": int(mol.nelectron),
        "e_nuclear": float(mol.energy_nuc()),
        "e_scf": float(mf.e_tot),
        "e_mp2_corr": float(emp2),
        "e_ccd_corr": float(myccd.e_corr),
        "e_ccsd_corr": float(mycc.e_corr),
        "e_fci": float(efci),
        "orbital_energies": [float(e) for e in mf.mo_energy],
    }
    (outdir / f"{name}.json").write_text(json.dumps(meta, indent=2) + "\n")
    print(f"{name}: nmo={nmo} scf={mf.e_tot:.10f} fci={efci:.10f}")


def main():
    outdir = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).parents[1] / "fixtures"
    outdir.mkdir(parents=True, exist_ok=True)
    for name, basis, n_atoms, spacing in SYSTEMS:
        build(name, basis, n_atoms, spacing, outdir)


if __name__ == "__main__":
    main()
