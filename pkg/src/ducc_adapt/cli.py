"""Command-line driver: downfold, solve, scan and report.

Configuration is a flat TOML file whose keys mirror :class:`RunConfig`;
``--set key=value`` overrides single keys.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import adapt as adapt_mod
from .amplitudes import CCOptions, Method, build_sigma_ext, diagnostics, partition_external, solve_amplitudes
from .chem_io import (
    ActiveSpace,
    SpinOrbitalHamiltonian,
    freeze_core,
    natural_virtual_rotation,
    parse_fcidump,
    to_spin_orbitals,
)
from .errors import DuccError, StageError
from .fock import exact_ground_state, fci_ground_state
from .qubit import PauliSum, jordan_wigner
from .wick import BchScheme, NormalOrderedOperator, build_effective_hamiltonian, dump_operator, normal_order_hamiltonian

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger(__name__)

CHEMICAL_ACCURACY_MHA = 1.59
CSV_HEADER = ["label", "scheme", "method", "solver", "energy_hartree", "error_mha", "iterations", "converged"]
SCHEMES = ("bare", "a4", "a4_3", "a7", "a7_3", "a7_34")
METHODS = ("mp2", "ccd", "ccsd", "ccsd_t1_zero")
SOLVERS = ("ed", "adapt")
# active spatial orbital counts used for LiH, H6 and H2O at cc-pVTZ
ACTIVE_PRESETS = {"lih": 8, "h6": 6, "h2o": 9}
ORACLE_FCI_LIMIT = 200_000

EXIT_OK, EXIT_ERROR, EXIT_UNCONVERGED = 0, 1, 2


@dataclass(frozen=True)
class RunConfig:
    fcidump_path: str = ""
    label: str = ""
    frozen_core: tuple[int, ...] = ()
    use_natural_virtuals: bool = False
    active_spatial_count: int | str | None = None
    amplitude_method: str = "ccsd"
    scheme: str = "a7"
    solver: str = "ed"
    grad_norm_tol: float = 1e-4
    max_adapt_iterations: int = 200
    reference_energy: float | None = None
    reference_label: str = ""
    cc_tolerance: float = 1e-9
    cc_max_iterations: int = 200
    diis_size: int = 8
    output_dir: str = ""
    workers: int = 1

    def validated(self) -> "RunConfig":
        cfg = replace(
            self,
            amplitude_method=self.amplitude_method.lower(),
            scheme=self.scheme.lower(),
            solver=self.solver.lower(),
            frozen_core=tuple(int(c) for c in self.frozen_core),
        )
        if cfg.amplitude_method not in METHODS:
            raise ValueError(f"amplitude_method must be one of {METHODS}, got {self.amplitude_method!r}")
        if cfg.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if cfg.solver not in SOLVERS:
            raise ValueError(f"solver must be one of {SOLVERS}, got {self.solver!r}")
        if isinstance(cfg.active_spatial_count, str):
            key = cfg.active_spatial_count.lower()
            if key not in ACTIVE_PRESETS:
                raise ValueError(f"unknown active-space preset {cfg.active_spatial_count!r}")
            cfg = replace(cfg, active_spatial_count=ACTIVE_PRESETS[key])
        if not cfg.label and cfg.fcidump_path:
            cfg = replace(cfg, label=Path(cfg.fcidump_path).name.removesuffix(".FCIDUMP"))
        return cfg


_FIELD_TYPES = {f.name: f for f in fields(RunConfig)}


def config_from_mapping(data: dict, base: Path | None = None) -> RunConfig:
    unknown = set(data) - set(_FIELD_TYPES)
    if unknown:
        raise ValueError(f"unknown configuration keys: {sorted(unknown)}")
    data = dict(data)
    if "frozen_core" in data:
        data["frozen_core"] = tuple(data["frozen_core"])
    if base is not None and data.get("fcidump_path"):
        p = Path(data["fcidump_path"])
        data["fcidump_path"] = str(p if p.is_absolute() else base / p)
    return RunConfig(**data).validated()


def load_config(path: str | Path | None, overrides: Sequence[str] = ()) -> RunConfig:
    data: dict = {}
    base = None
    if path is not None:
        path = Path(path)
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
        base = path.parent
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        key = key.strip()
        try:
            value = tomllib.loads(f"v = {raw}")["v"]
        except tomllib.TOMLDecodeError:
            value = raw
        data[key] = value
    return config_from_mapping(data, base)


# --------------------------------------------------------------------------- #
# Pipeline
# --------------------------------------------------------------------------- #


@dataclass
class ResultRow:
    label: str
    scheme: str
    method: str
    solver: str
    energy: float
    error_mha: float | None
    iterations: int
    converged: bool
    reference_energy: float | None = None
    reference_label: str = ""
    message: str = ""

    def csv_fields(self) -> list[str]:
        energy = "" if not math.isfinite(self.energy) else f"{self.energy:.8f}"
        error = "" if self.error_mha is None else f"{self.error_mha:.2f}"
        return [self.label, self.scheme, self.method, self.solver, energy, error,
                str(self.iterations), "true" if self.converged else "false"]


@dataclass
class Downfolded:
    """Intermediate products of the pipeline up to the qubit Hamiltonian."""

    config: RunConfig
    hamiltonian: SpinOrbitalHamiltonian
    space: ActiveSpace
    e_ref: float
    effective: NormalOrderedOperator  # active-local, scalar includes E_ref
    pauli: PauliSum
    diagnostics: dict | None = None


@dataclass
class PipelineResult:
    row: ResultRow
    downfolded: Downfolded | None = None
    trace: adapt_mod.AdaptTrace | None = None
    ed_energy: float | None = None
    artifacts: dict = field(default_factory=dict)


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - every failure is reported with its stage
        raise StageError(name, exc) from exc


def load_hamiltonian(config: RunConfig) -> SpinOrbitalHamiltonian:
    ints = _stage("parse", parse_fcidump, config.fcidump_path)
    if config.frozen_core:
        ints = _stage("freeze_core", freeze_core, ints, config.frozen_core)
    h = _stage("spin_orbitals", to_spin_orbitals, ints)
    if config.use_natural_virtuals:
        h = _stage("natural_virtuals", natural_virtual_rotation, h)
    return h


def active_space_for(config: RunConfig, h: SpinOrbitalHamiltonian) -> ActiveSpace:
    n_spatial = h.n_spin_orbitals // 2
    count = n_spatial if config.active_spatial_count is None else int(config.active_spatial_count)
    n_occ_spatial = (h.n_occupied + 1) // 2
    if count < n_occ_spatial:
        raise ValueError(f"active space of {count} orbitals cannot hold {n_occ_spatial} occupied orbitals")
    if count > n_spatial:
        raise ValueError(f"active space of {count} orbitals exceeds the {n_spatial} available")
    return ActiveSpace.lowest(count, n_spatial)


def downfold(config: RunConfig, h: SpinOrbitalHamiltonian | None = None) -> Downfolded:
    config = config.validated()
    h = h if h is not None else load_hamiltonian(config)
    space = _stage("active_space", active_space_for, config, h)
    e_ref, h_n = _stage("normal_order", normal_order_hamiltonian, h)
    scheme = BchScheme.from_name(config.scheme)
    diag = None
    if scheme.name == "BARE":
        sigma = NormalOrderedOperator(h.n_spin_orbitals, tuple(h.reference_occupation))
    else:
        options = CCOptions(config.cc_max_iterations, config.cc_tolerance, config.diis_size)
        amps = _stage("amplitudes", solve_amplitudes, h, config.amplitude_method, options)
        part = _stage("partition", partition_external, amps, space)
        diag = diagnostics(part, h.n_occupied).as_dict()
        sigma = _stage("sigma", build_sigma_ext, part)
    heff = _stage("downfold", build_effective_hamiltonian, h_n, sigma, scheme, space)
    heff = heff.shifted(e_ref)
    pauli = _stage("jordan_wigner", jordan_wigner, heff)
    return Downfolded(config, h, space, e_ref, heff, pauli, diag)


def reference_for(config: RunConfig, h: SpinOrbitalHamiltonian) -> tuple[float | None, str]:
    if config.reference_energy is not None:
        return float(config.reference_energy), config.reference_label or "config"
    n = h.n_spin_orbitals
    ne = h.n_occupied
    dim = math.comb(n // 2, ne // 2) ** 2
    if n <= 64 and dim <= ORACLE_FCI_LIMIT:
        e, _ = fci_ground_state(h)
        return e, "oracle FCI"
    return None, ""


def solve_ed(d: Downfolded) -> float:
    n_el = d.hamiltonian.n_occupied
    m = d.pauli.to_sparse()
    idx = adapt_mod.sector_indices(d.pauli.n_qubits, n_el, 0)
    sub = m[idx][:, idx]
    if np.all(sub.data.imag == 0):
        sub = sub.real
    e, _ = exact_ground_state(sub.tocsr())
    return e


def solve_adapt(d: Downfolded):
    cfg = d.config
    pool = adapt_mod.build_gsd_pool(len(d.space.active_spatial))
    ref = adapt_mod.hartree_fock_state(d.pauli.n_qubits, d.hamiltonian.n_occupied)
    opts = adapt_mod.AdaptOptions(cfg.grad_norm_tol, cfg.max_adapt_iterations)
    return adapt_mod.adapt_run(d.pauli, pool, ref, opts)


def _artifact_stem(cfg: RunConfig) -> str:
    return f"{cfg.label}_{cfg.scheme}_{cfg.amplitude_method}_{cfg.solver}"


def run_pipeline(config: RunConfig, write_artifacts: bool = True) -> PipelineResult:
    """Downfold, map to qubits, solve, and compare with the reference energy."""
    config = config.validated()
    h = load_hamiltonian(config)
    d = downfold(config, h)
    ed_energy = _stage("ed", solve_ed, d)
    trace = None
    if config.solver == "ed":
        energy, iterations, converged = ed_energy, 0, True
    else:
        res = _stage("adapt", solve_adapt, d)
        energy, iterations, converged, trace = res.energy, res.iterations, res.converged, res.trace
    ref, ref_label = _stage("reference", reference_for, config, h)
    error = None if ref is None else (energy - ref) * 1000.0
    row = ResultRow(config.label, config.scheme, config.amplitude_method, config.solver, energy, error,
                    iterations, converged, ref, ref_label)
    result = PipelineResult(row, d, trace, ed_energy)
    if write_artifacts and config.output_dir:
        result.artifacts = _write_artifacts(result)
    return result


def _write_artifacts(result: PipelineResult) -> dict:
    d = result.downfolded
    out = Path(d.config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = _artifact_stem(d.config)
    paths = {}
    p = out / f"{stem}_heff.txt"
    with open(p, "w") as fh:
        dump_operator(d.effective, fh)
    paths["effective_hamiltonian"] = str(p)
    if d.diagnostics is not None:
        p = out / f"{stem}_diagnostics.json"
        p.write_text(json.dumps(d.diagnostics, indent=2, sort_keys=True) + "\n")
        paths["diagnostics"] = str(p)
    if result.trace is not None:
        p = out / f"{stem}_trace.jsonl"
        with open(p, "w") as fh:
            result.trace.write_jsonl(fh)
        paths["trace"] = str(p)
    return paths


# --------------------------------------------------------------------------- #
# Scans and reports
# --------------------------------------------------------------------------- #


def _scan_job(config: RunConfig) -> PipelineResult:
    try:
        return run_pipeline(config)
    except (DuccError, ValueError, OSError) as exc:
        logger.error("%s/%s failed: %s", config.label, config.scheme, exc)
        row = ResultRow(config.label, config.scheme, config.amplitude_method, config.solver, float("nan"),
                        None, 0, False, message=str(exc))
        return PipelineResult(row)


def run_scan(template: RunConfig, fcidumps: Sequence[str], schemes: Sequence[str] | None = None,
             references: Sequence[float | None] | None = None) -> list[PipelineResult]:
    """One pipeline run per (geometry, scheme), rows in input order."""
    schemes = list(schemes) if schemes else [template.scheme]
    jobs = []
    for g, path in enumerate(fcidumps):
        label = Path(path).name.removesuffix(".FCIDUMP")
        ref = references[g] if references is not None else template.reference_energy
        for scheme in schemes:
            jobs.append(replace(template, fcidump_path=str(path), label=label, scheme=scheme,
                                reference_energy=ref).validated())
    if template.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=template.workers) as pool:
            return list(pool.map(_scan_job, jobs))
    return [_scan_job(j) for j in jobs]


def write_csv(rows: Sequence[ResultRow], stream) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in rows:
        writer.writerow(r.csv_fields())


def csv_text(rows: Sequence[ResultRow]) -> str:
    buf = io.StringIO()
    write_csv(rows, buf)
    return buf.getvalue()


@dataclass(frozen=True)
class ScanSummary:
    scheme: str
    method: str
    solver: str
    n_points: int
    mean_error_mha: float
    mean_abs_error_mha: float
    npe_mha: float


def summarize(rows: Sequence[ResultRow]) -> list[ScanSummary]:
    """Mean error and non-parallelity error (max minus min) per scheme/method/solver."""
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        key = (r.scheme, r.method, r.solver)
        groups.setdefault(key, [])
        if r.error_mha is not None:
            groups[key].append(r.error_mha)
    out = []
    for (scheme, method, solver), errs in groups.items():
        e = np.array(errs, dtype=float)
        if e.size == 0:
            out.append(ScanSummary(scheme, method, solver, 0, math.nan, math.nan, math.nan))
            continue
        out.append(ScanSummary(scheme, method, solver, int(e.size), float(e.mean()),
                               float(np.abs(e).mean()), float(e.max() - e.min())))
    return out


def write_summary(summary: Sequence[ScanSummary], stream) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["scheme", "method", "solver", "n_points", "mean_error_mha", "mean_abs_error_mha", "npe_mha"])
    for s in summary:
        writer.writerow([s.scheme, s.method, s.solver, s.n_points, f"{s.mean_error_mha:.2f}",
                         f"{s.mean_abs_error_mha:.2f}", f"{s.npe_mha:.2f}"])


def split_label(label: str) -> tuple[str, str]:
    """``h4_sto3g_1.00`` -> (``h4_sto3g``, ``1.00``); labels without a numeric tail stay whole."""
    head, _, tail = label.rpartition("_")
    try:
        float(tail)
    except ValueError:
        return label, ""
    return (head, tail) if head else (label, "")


def emit_plot_data(results: Sequence[PipelineResult], out_dir: str | Path) -> list[Path]:
    """PES error curves per scheme and ADAPT convergence curves per run, plus metadata."""
    out = Path(out_dir)
    written: list[Path] = []
    meta: dict = {"chemical_accuracy_mha": CHEMICAL_ACCURACY_MHA, "pes": {}, "iterations": {}}
    curves: dict[str, list[ResultRow]] = {}
    for res in results:
        r = res.row
        system, _ = split_label(r.label)
        curves.setdefault(f"{system}_{r.scheme}_{r.solver}", []).append(r)
    try:
        (out / "pes").mkdir(parents=True, exist_ok=True)
        for name, rows in curves.items():
            p = out / "pes" / f"{name}.csv"
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["label", "geometry", "method", "energy_hartree", "error_mha"])
                for r in rows:
                    _, geom = split_label(r.label)
                    f = r.csv_fields()
                    w.writerow([r.label, geom, r.method, f[4], f[5]])
            written.append(p)
            meta["pes"][p.name] = {"points": len(rows)}
        for res in results:
            if res.trace is None:
                continue
            r = res.row
            (out / "iterations").mkdir(parents=True, exist_ok=True)
            p = out / "iterations" / f"{r.label}_{r.scheme}_{r.solver}.csv"
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["iteration", "energy_hartree", "error_mha", "grad_norm2", "grad_norm_inf", "op_index"])
                for rec in res.trace.records:
                    err = "" if r.reference_energy is None else f"{(rec.energy - r.reference_energy) * 1000:.2f}"
                    w.writerow([rec.iteration, f"{rec.energy:.8f}", err, f"{rec.grad_norm2:.3e}",
                                f"{rec.grad_norm_inf:.3e}", rec.op_index])
            written.append(p)
            meta["iterations"][p.name] = {
                "ed_energy_hartree": res.ed_energy,
                "reference_energy_hartree": r.reference_energy,
                "converged": r.converged,
            }
        p = out / "metadata.json"
        p.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        written.append(p)
    except OSError as exc:
        raise OSError(f"cannot write plot data under {out}: {exc}") from exc
    return written


# --------------------------------------------------------------------------- #
# Entry point
# --------------------------------------------------------------------------- #


def _format_row(r: ResultRow) -> str:
    err = "n/a" if r.error_mha is None else f"{r.error_mha:.2f} mHa"
    ref = "" if r.reference_energy is None else f"  reference {r.reference_energy:.8f} ({r.reference_label})"
    status = "" if r.converged else "  UNCONVERGED"
    return f"{r.label} {r.scheme} {r.method} {r.solver}: E = {r.energy:.8f} Ha, error {err}{ref}{status}"


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ducc-adapt", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="TOML file with RunConfig keys")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one key")
        p.add_argument("--fcidump", help="shortcut for --set fcidump_path=...")

    p = sub.add_parser("downfold", help="write the effective Hamiltonian")
    common(p)
    p.add_argument("-o", "--output", help="operator dump path (default stdout)")
    p.add_argument("--pauli", help="also write the qubit Hamiltonian here")

    for name, text in (("ed", "exact diagonalization of the effective Hamiltonian"),
                       ("adapt", "ADAPT-VQE on the effective Hamiltonian")):
        p = sub.add_parser(name, help=text)
        common(p)
        p.add_argument("--csv", help="write the result row as CSV")
        p.add_argument("--plot-dir", help="write plot-ready data here")

    p = sub.add_parser("scan", help="run a list of geometries and schemes")
    common(p)
    p.add_argument("fcidumps", nargs="+", help="FCIDUMP files, one per geometry")
    p.add_argument("--schemes", help="comma-separated schemes (default: the config scheme)")
    p.add_argument("--references", help="comma-separated reference energies, one per geometry")
    p.add_argument("--csv", help="result CSV path (default stdout)")
    p.add_argument("--summary", help="summary CSV path")
    p.add_argument("--plot-dir", help="write plot-ready data here")

    p = sub.add_parser("diagnostics", help="amplitude diagnostics for the active-space split")
    common(p)
    return ap


def _config_from_args(args) -> RunConfig:
    overrides = list(args.set)
    if args.fcidump:
        overrides.append(f"fcidump_path={json.dumps(args.fcidump)}")
    return load_config(args.config, overrides)


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "scan":
            template = load_config(args.config, args.set)
            refs = None
            if args.references:
                refs = [float(x) if x.strip() else None for x in args.references.split(",")]
                if len(refs) != len(args.fcidumps):
                    raise ValueError("need one reference energy per FCIDUMP")
            schemes = args.schemes.split(",") if args.schemes else None
            results = run_scan(template, args.fcidumps, schemes, refs)
            rows = [r.row for r in results]
            if args.csv:
                with open(args.csv, "w", newline="") as fh:
                    write_csv(rows, fh)
            else:
                write_csv(rows, sys.stdout)
            summary = summarize(rows)
            if args.summary:
                with open(args.summary, "w", newline="") as fh:
                    write_summary(summary, fh)
            else:
                write_summary(summary, sys.stderr)
            if args.plot_dir:
                emit_plot_data(results, args.plot_dir)
            if any(r.message for r in rows):
                return EXIT_ERROR
            return EXIT_OK if all(r.converged for r in rows) else EXIT_UNCONVERGED

        config = _config_from_args(args)
        if not config.fcidump_path:
            raise ValueError("no FCIDUMP given (fcidump_path or --fcidump)")

        if args.command == "downfold":
            d = downfold(config)
            if args.output:
                with open(args.output, "w") as fh:
                    dump_operator(d.effective, fh)
            else:
                dump_operator(d.effective, sys.stdout)
            if args.pauli:
                with open(args.pauli, "w") as fh:
                    d.pauli.dump(fh)
            return EXIT_OK

        if args.command == "diagnostics":
            h = load_hamiltonian(config)
            space = active_space_for(config, h)
            options = CCOptions(config.cc_max_iterations, config.cc_tolerance, config.diis_size)
            amps = _stage("amplitudes", solve_amplitudes, h, config.amplitude_method, options)
            rep = diagnostics(partition_external(amps, space), h.n_occupied).as_dict()
            rep["method"] = Method.parse(config.amplitude_method).value
            rep["correlation_energy"] = amps.correlation_energy
            print(json.dumps(rep, indent=2, sort_keys=True))
            return EXIT_OK

        config = replace(config, solver=args.command)
        result = run_pipeline(config)
        print(_format_row(result.row))
        if args.csv:
            with open(args.csv, "w", newline="") as fh:
                write_csv([result.row], fh)
        if args.plot_dir:
            emit_plot_data([result], args.plot_dir)
        return EXIT_OK if result.row.converged else EXIT_UNCONVERGED
    except (DuccError, ValueError, OSError, tomllib.TOMLDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
