"""Configuration-driven experiment runner: parameter sweeps to CSV, slopes, spectra."""
from __future__ import annotations

import csv
import io
import json
import logging
import os
import tempfile
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import fem, poly, problems, slgfem, slod
from .mesh import CoarseMesh, FineMesh

log = logging.getLogger(__name__)

EXPERIMENTS = ("localization", "convergence", "sigma_decay", "high_contrast", "spectrum")
METHODS = ("slgfem", "slod", "both")
CSV_HEADER = (
    "method", "d", "H", "r", "ell", "n", "p", "kappa", "seed",
    "e_rel", "sigma", "riesz_lo", "riesz_hi", "wall_ms", "patch_solves",
)
DESK_H = 2.0**-7
DESK_EPS = 2.0**-5
FULL_H = 2.0**-10
FULL_EPS = 2.0**-8


class ConfigError(ValueError):
    pass


def _cells(size, what):
    """Number of cells per axis for a mesh size given as 1/N (or N itself)."""
    size = float(size)
    n = size if size >= 1 else 1.0 / size
    if abs(n - round(n)) > 1e-9 * n or round(n) < 1:
        raise ConfigError(f"{what}={size} is not the reciprocal of an integer")
    return int(round(n))


def _as_list(x):
    return list(x) if isinstance(x, (list, tuple)) else [x]


@dataclass
class ExperimentConfig:
    experiment: str
    method: str = "slgfem"
    d: int = 2
    H: list = field(default_factory=lambda: [2.0**-4])
    h: float = None  # fine mesh size, fixed over H (default DESK_H)
    r: int = None  # alternatively a fixed refinement factor
    ell: list = field(default_factory=lambda: [1, 2, 3])
    n: list = field(default_factory=lambda: [40])
    p: list = field(default_factory=lambda: [0])
    coefficient: dict = field(default_factory=dict)
    source: dict = field(default_factory=dict)
    seed: int = 0
    threads: int = 1
    output: str = None
    slod_selection: str = "stabilized"

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "experiment" not in raw:
            raise ConfigError("config needs an 'experiment' entry")
        cfg = cls(**raw)
        for name in ("H", "ell", "n", "p"):
            setattr(cfg, name, _as_list(getattr(cfg, name)))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(raw)

    # derived quantities ---------------------------------------------------

    @property
    def coarse_cells(self) -> list:
        return [_cells(H, "H") for H in self.H]

    def fine_cells(self, nH: int) -> int:
        if self.r is not None:
            return nH * int(self.r)
        return _cells(self.h if self.h is not None else DESK_H, "h")

    def kappas(self) -> list:
        return _as_list(self.coefficient.get("kappa", 1e4))

    def coefficient_spec(self, kappa=None) -> problems.CoefficientSpec:
        raw = dict(self.coefficient)
        eps = raw.pop("eps", None)
        if eps is not None:
            if "eps_cells" in raw:
                raise ConfigError("give either eps or eps_cells, not both")
            raw["eps_cells"] = _cells(eps, "eps")
        raw.setdefault("eps_cells", _cells(DESK_EPS, "eps"))
        raw["seed"] = self.seed
        if raw.get("kind") == "channeled":
            raw["kappa"] = float(self.kappas()[0] if kappa is None else kappa)
        else:
            raw.pop("kappa", None)
        try:
            return problems.CoefficientSpec(**raw)
        except TypeError as exc:
            raise ConfigError(f"bad coefficient spec: {exc}") from exc

    def source_spec(self) -> problems.SourceSpec:
        try:
            return problems.SourceSpec(**self.source)
        except TypeError as exc:
            raise ConfigError(f"bad source spec: {exc}") from exc

    @property
    def channeled(self) -> bool:
        return self.coefficient.get("kind") == "channeled"

    def methods(self) -> list:
        return ["slgfem", "slod"] if self.method == "both" else [self.method]

    def validate(self):
        try:
            self._validate()
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    def _validate(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"experiment must be one of {EXPERIMENTS}")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}")
        if self.d != 2:
            raise ConfigError("only d=2 is implemented")
        if self.h is not None and self.r is not None:
            raise ConfigError("give either h or r, not both")
        if self.slod_selection not in slod.SELECTIONS:
            raise ConfigError(f"slod_selection must be one of {slod.SELECTIONS}")
        if int(self.threads) < 1:
            raise ConfigError("threads must be >= 1")
        if not self.H:
            raise ConfigError("H list is empty")
        for k in self.ell:
            if int(k) != k or k < 0:
                raise ConfigError(f"ell={k} must be a non-negative integer")
        for k in self.n:
            if int(k) != k or k < 1:
                raise ConfigError(f"n={k} must be a positive integer")
        for k in self.p:
            if int(k) != k or not 0 <= k <= poly.MAX_DEGREE:
                raise ConfigError(f"p={k} must be an integer in [0, {poly.MAX_DEGREE}]")
        self.source_spec()
        for kappa in self.kappas():
            spec = self.coefficient_spec(kappa)
        for nH in self.coarse_cells:
            nf = self.fine_cells(nH)
            if nH < 2:
                raise ConfigError("H must be at most 1/2")
            if nf % nH or not _power_of_two(nf // nH) or nf // nH < 2:
                raise ConfigError(f"fine mesh 1/{nf} is not a power-of-two refinement of H=1/{nH}")
            if nf % spec.eps_cells:
                raise ConfigError(f"eps-mesh 1/{spec.eps_cells} does not divide the fine mesh 1/{nf}")
            if "slod" in self.methods():
                for k in self.ell:
                    if not k < nH / 2:
                        raise ConfigError(f"SLOD needs ell < nH/2 (patch smaller than the domain); got ell={k}, H=1/{nH}")

    def with_full_scale(self) -> "ExperimentConfig":
        """The long-running profile: h = 2^-10 and eps = 2^-8."""
        coef = {k: v for k, v in self.coefficient.items() if k not in ("eps", "eps_cells")}
        if coef.get("kind", "random_checkerboard") != "constant":
            coef["eps"] = FULL_EPS
        raw = {f.name: getattr(self, f.name) for f in fields(self)}
        raw.update(h=FULL_H, r=None, coefficient=coef)
        return ExperimentConfig.from_dict(raw)


def _power_of_two(k: int) -> bool:
    return k >= 1 and k & (k - 1) == 0


@dataclass
class ResultRow:
    method: str
    d: int
    H: float
    r: int
    ell: int
    n: int  # None for SLOD
    p: int
    kappa: float  # None unless channeled
    seed: int
    e_rel: float
    sigma: float = None
    riesz_lo: float = None
    riesz_hi: float = None
    wall_ms: float = None
    patch_solves: int = 0
    orthogonality: float = None  # max normalized Galerkin residual (not written to CSV)

    @property
    def key(self) -> tuple:
        return (self.method, self.H, self.ell, self.n, self.p, self.kappa, self.seed)

    def csv_fields(self, record_timing: bool = False) -> list:
        out = []
        for name in CSV_HEADER:
            v = getattr(self, name)
            if name == "wall_ms" and not record_timing:
                v = None
            out.append("" if v is None else repr(float(v)) if isinstance(v, (float, np.floating)) else str(v))
        return out


def _solve_rows(cfg, fine, A, K, load, u_ref, kappa, record):
    """All rows of one (H, kappa) problem instance."""
    rows = []
    nH = fine.coarse.nH
    H = 1.0 / nH
    base = dict(d=cfg.d, H=H, r=fine.r, kappa=kappa, seed=cfg.seed)
    for p in cfg.p:
        for ell in cfg.ell:
            if "slgfem" in cfg.methods():
                t0 = time.perf_counter()
                bases = slgfem.build_bases(fine, A, ell, p, cfg.threads)
                t_build = time.perf_counter() - t0
                for b in bases:
                    record(f"slgfem H=1/{nH} ell={ell} p={p} node={b.node} seconds={b.seconds:.4f} "
                           f"solves={b.patch_solves} snapshots={b.n_snapshots} rank={b.rank}")
                solves = sum(b.patch_solves for b in bases)
                for n in cfg.n:
                    t1 = time.perf_counter()
                    g = slgfem.assemble_and_solve(fine, K, load, bases, n)
                    rows.append(_row("slgfem", base, ell, n, p, K, load, u_ref, g.solution,
                                     (t_build + time.perf_counter() - t1) * 1e3, solves))
                    record(f"slgfem H=1/{nH} ell={ell} n={n} p={p} e_rel={rows[-1].e_rel:.6e} "
                           f"dim={g.dim} method={g.solution.method} orthogonality={rows[-1].orthogonality:.2e}")
            if "slod" in cfg.methods():
                t0 = time.perf_counter()
                datas = slod.build_slod(fine, A, ell, p, cfg.threads, cfg.slod_selection)
                for dd in datas:
                    record(f"slod H=1/{nH} ell={ell} p={p} element={dd.element} seconds={dd.seconds:.4f} "
                           f"solves={dd.patch_solves} sigma={dd.sigma_T:.6e}")
                sol = slod.slod_solve(fine, K, load, datas)
                lo, hi = slod.riesz_bounds(poly.PolySpace(fine.coarse, p), datas)
                row = _row("slod", base, ell, None, p, K, load, u_ref, sol,
                           (time.perf_counter() - t0) * 1e3, sum(dd.patch_solves for dd in datas))
                row.sigma, row.riesz_lo, row.riesz_hi = slod.sigma_global(datas), lo, hi
                rows.append(row)
                record(f"slod H=1/{nH} ell={ell} p={p} e_rel={row.e_rel:.6e} sigma={row.sigma:.6e} "
                       f"riesz=[{lo:.3e}, {hi:.3e}] orthogonality={row.orthogonality:.2e}")
    return rows


def _row(method, base, ell, n, p, K, load, u_ref, sol, wall_ms, solves):
    e = fem.rel_energy_error(u_ref, sol.u, K)
    orth = fem.galerkin_residual(K, sol.basis, u_ref, sol.u_parts, load=load)
    if orth > 1e-8:
        log.warning("%s ell=%d n=%s p=%d: Galerkin orthogonality residual %.2e", method, ell, n, p, orth)
    return ResultRow(method=method, ell=int(ell), n=None if n is None else int(n), p=int(p), e_rel=e,
                     wall_ms=wall_ms, patch_solves=int(solves), orthogonality=orth, **base)


def problem_instance(cfg: ExperimentConfig, nH: int, kappa=None):
    """Fine mesh, coefficient, stiffness, load and reference solution for one H."""
    coarse = CoarseMesh(cfg.d, nH)
    fine = FineMesh(coarse, cfg.fine_cells(nH) // nH)
    A = problems.realize_coefficient(cfg.coefficient_spec(kappa), fine)
    load = problems.realize_source(cfg.source_spec(), fine)
    K = fem.stiffness(fine, A)
    return fine, A, K, load, fem.reference_solution(fine, A, load, K)


def run(cfg: ExperimentConfig, out_dir=None, record_timing: bool = False, write: bool = True) -> list:
    """Run every parameter combination; write CSV and log atomically.

    Rows are ordered by (kappa, H, p, ell, method, n), independent of threads.
    """
    log_lines = []

    def record(line):
        log_lines.append(line)
        log.debug(line)

    rows = []
    kappas = cfg.kappas() if cfg.channeled else [None]
    for kappa in kappas:
        for nH in cfg.coarse_cells:
            t0 = time.perf_counter()
            fine, A, K, load, u_ref = problem_instance(cfg, nH, kappa)
            record(f"instance H=1/{nH} h=1/{fine.nf} kappa={kappa} contrast={A.contrast:.6e} "
                   f"dofs={fine.n_dofs} reference_seconds={time.perf_counter() - t0:.3f}")
            rows.extend(_solve_rows(cfg, fine, A, K, load, u_ref, kappa, record))
            log.info("finished H=1/%d kappa=%s (%d rows)", nH, kappa, len(rows))
    keys = [r.key for r in rows]
    if len(set(keys)) != len(keys):
        raise RuntimeError("duplicate result rows")
    if write:
        path = output_path(cfg, out_dir)
        write_csv(path, rows, record_timing)
        _atomic_write(path.with_suffix(".log"), "\n".join(log_lines) + "\n")
    return rows


def output_path(cfg: ExperimentConfig, out_dir=None, suffix=".csv") -> Path:
    name = Path(cfg.output) if cfg.output else Path(cfg.experiment + suffix)
    if out_dir is not None:
        name = Path(out_dir) / name.name
    return name.with_suffix(suffix)


def _atomic_write(path: Path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(rows, record_timing: bool = False) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for row in rows:
        w.writerow(row.csv_fields(record_timing))
    return buf.getvalue()


def write_csv(path, rows, record_timing: bool = False):
    _atomic_write(Path(path), csv_text(rows, record_timing))


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def fit_slope(H, errors) -> float:
    """Convergence order: least-squares slope of log(error) against log(H).

    Positive means converging (e = c H^k gives k).
    """
    H = np.asarray(H, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if H.size < 2 or np.unique(H).size < 2:
        raise ValueError("slope fit needs at least two distinct H values")
    if np.any(errors <= 0) or np.any(H <= 0):
        raise ValueError("slope fit needs positive H and errors")
    return poly.fit_rate(H, errors)


# spectra ---------------------------------------------------------------------

def central_element(coarse: CoarseMesh) -> int:
    c = coarse.nH // 2
    return c + coarse.nH * c


def central_node(coarse: CoarseMesh) -> int:
    c = coarse.nH // 2
    return c + (coarse.nH + 1) * c


@dataclass
class SpectrumEntry:
    method: str
    H: float
    ell: int
    p: int
    where: int  # element (SLOD) or node (SL-GFEM)
    values: np.ndarray  # descending
    marker: int = None  # 1-based index of the first selected singular value (SLOD)


SPECTRUM_HEADER = ("method", "H", "ell", "p", "where", "k", "value", "marker")


def spectrum(cfg: ExperimentConfig, out_dir=None, write: bool = True) -> list:
    """SLOD singular values of the central element and SL-GFEM eigenvalues of the central node.

    For each (H, ell, p); with method 'both' both are produced. The SLOD
    marker is K - J + 1, the first of the J selected (smallest) values.
    """
    entries = []
    for nH in cfg.coarse_cells:
        coarse = CoarseMesh(cfg.d, nH)
        fine = FineMesh(coarse, cfg.fine_cells(nH) // nH)
        A = problems.realize_coefficient(cfg.coefficient_spec(), fine)
        T, z = central_element(coarse), central_node(coarse)
        for p in cfg.p:
            J = (p + 1) ** cfg.d
            for ell in cfg.ell:
                if "slod" in cfg.methods():
                    hs = slod.harmonic_space(fine, A, T, ell, p)
                    sig, _, _ = slod.svd_sources(hs, J)
                    entries.append(SpectrumEntry("slod", 1.0 / nH, ell, p, T, sig, sig.size - J + 1))
                if "slgfem" in cfg.methods():
                    b = slgfem.node_basis(fine, A, z, ell, p)
                    entries.append(SpectrumEntry("slgfem", 1.0 / nH, ell, p, z, b.eigenvalues))
    if write:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SPECTRUM_HEADER)
        for e in entries:
            for k, v in enumerate(e.values, start=1):
                w.writerow([e.method, repr(e.H), e.ell, e.p, e.where, k, repr(float(v)),
                            "" if e.marker is None else e.marker])
        path = output_path(cfg, out_dir)
        _atomic_write(path.with_name(path.stem + "_spectrum.csv"), buf.getvalue())
    return entries

