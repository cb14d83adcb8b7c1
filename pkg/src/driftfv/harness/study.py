"""Reference solutions, L1 errors, parameter sweeps and order fits."""
from concurrent.futures import ProcessPoolExecutor
import csv
from dataclasses import dataclass, field
import logging
import math
import os
from pathlib import Path
import tempfile
import time

import numpy as np

from ..mesh import nesting_map
from ..scheme import SchemeParams, run
from .cases import builtin_case
from .io import fmt_float

logger = logging.getLogger(__name__)

PAPER_REF_CELLS, PAPER_REF_DT = 10240, 1e-6
DESK_REF_CELLS, DESK_REF_DT = 1280, 1e-5
# stand-in for lambda = 0 when the case is doped (the lambda = 0 scheme needs C = 0)
DOPED_LAMBDA0 = 1e-12
_CACHE_VERSION = 2


def cache_dir():
    d = os.environ.get("DRIFTFV_CACHE_DIR")
    return Path(d) if d else Path.home() / ".cache" / "driftfv"


def effective_lambda2(case, lambda2, data=None):
    """Lambda^2 actually run: doped cases replace 0 by DOPED_LAMBDA0."""
    if lambda2 == 0:
        if data is None:
            data = case.problem(case.mesh(4))
        if not data.zero_doping:
            return DOPED_LAMBDA0
    return lambda2


def make_params(case, lambda2, dt, t_final=None, **kw):
    m, M = case.bounds
    return SchemeParams(lambda_sq=lambda2, dt=dt, t_final=case.t_final if t_final is None else t_final,
                        m_bound=m, M_bound=M, **kw)


@dataclass
class ReferenceSolution:
    case: str
    cells: int
    dt: float
    lambda2: float
    t: float
    N: np.ndarray
    P: np.ndarray
    Psi: np.ndarray
    fp_iters_avg: float = 0.0

    def mesh(self):
        return builtin_case(self.case).mesh(self.cells)


def _cache_path(case, cells, dt, lambda2, directory):
    return Path(directory) / f"ref_v{_CACHE_VERSION}_{case}_c{int(cells)}_dt{float(dt)!r}_l{float(lambda2)!r}.npz"


def compute_reference(case, ref_cells=DESK_REF_CELLS, ref_dt=DESK_REF_DT, lambda2=1.0,
                      paper_scale=False, use_cache=True, directory=None):
    """Final-time state on a fine mesh, cached on disk by (case, cells, dt, lambda^2)."""
    if isinstance(case, str):
        case = builtin_case(case)
    if paper_scale:
        ref_cells, ref_dt = PAPER_REF_CELLS, PAPER_REF_DT
    directory = Path(directory) if directory is not None else cache_dir()
    path = _cache_path(case.name, ref_cells, ref_dt, lambda2, directory)
    if use_cache and path.exists():
        with np.load(path) as z:
            return ReferenceSolution(case.name, int(z["cells"]), float(z["dt"]), float(z["lambda2"]),
                                     float(z["t"]), z["N"].copy(), z["P"].copy(), z["Psi"].copy(),
                                     float(z["fp_iters_avg"]))
    mesh = case.mesh(ref_cells)
    data = case.problem(mesh)
    params = make_params(case, lambda2, ref_dt)
    t0 = time.perf_counter()
    res = run(mesh, data, params)
    logger.info("reference %s cells=%d dt=%g lambda2=%g: %.1fs", case.name, ref_cells, ref_dt,
                lambda2, time.perf_counter() - t0)
    ref = ReferenceSolution(case.name, ref_cells, ref_dt, lambda2, res.state.t,
                            res.state.N, res.state.P, res.state.Psi, res.fp_iters_avg)
    if use_cache:
        directory.mkdir(parents=True, exist_ok=True)
        # write-then-rename so concurrent readers never see a partial file
        fd, tmp = tempfile.mkstemp(dir=directory, suffix=".npz.tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                np.savez(fh, cells=ref.cells, dt=ref.dt, lambda2=ref.lambda2, t=ref.t,
                         N=ref.N, P=ref.P, Psi=ref.Psi, fp_iters_avg=ref.fp_iters_avg)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    return ref


def l1_error(coarse_state, coarse_mesh, ref, ref_mesh=None, t_tol=1e-9):
    """Spatial L1 errors (N, P, Psi) on the reference mesh at the common final time."""
    ref_mesh = ref.mesh() if ref_mesh is None else ref_mesh
    if abs(coarse_state.t - ref.t) > t_tol * max(1.0, abs(ref.t)):
        raise ValueError(f"final times differ: {coarse_state.t!r} vs reference {ref.t!r}")
    owner = nesting_map(coarse_mesh, ref_mesh)
    w = ref_mesh.cell_measure
    return tuple(float(np.sum(w * np.abs(np.asarray(c)[owner] - r)))
                 for c, r in ((coarse_state.N, ref.N), (coarse_state.P, ref.P), (coarse_state.Psi, ref.Psi)))


@dataclass
class ErrorRow:
    lambda2: float
    dt: float
    dx: float
    err_N: float
    err_P: float
    err_Psi: float
    fp_iters_avg: float
    wallclock_s: float
    failure: str = ""

    @property
    def failed(self):
        return bool(self.failure)

    def key(self):
        return (self.lambda2, self.dt, self.dx)


COLUMNS = ("lambda2", "dt", "dx", "err_N", "err_P", "err_Psi", "fp_iters_avg", "wallclock_s")


@dataclass
class ErrorTable:
    rows: list = field(default_factory=list)

    def add(self, row):
        if any(r.key() == row.key() for r in self.rows):
            raise ValueError(f"duplicate error-table row {row.key()}")
        self.rows.append(row)

    def select(self, lambda2=None, dt=None, dx=None, ok_only=True):
        out = []
        for r in self.rows:
            if ok_only and r.failed:
                continue
            if lambda2 is not None and not math.isclose(r.lambda2, lambda2, rel_tol=1e-12, abs_tol=0):
                continue
            if dt is not None and not math.isclose(r.dt, dt, rel_tol=1e-12):
                continue
            if dx is not None and not math.isclose(r.dx, dx, rel_tol=1e-12):
                continue
            out.append(r)
        return out

    def to_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(COLUMNS)
            for r in self.rows:
                errs = ["FAIL"] * 3 if r.failed else [fmt_float(r.err_N), fmt_float(r.err_P), fmt_float(r.err_Psi)]
                w.writerow([fmt_float(r.lambda2), fmt_float(r.dt), fmt_float(r.dx), *errs,
                            fmt_float(r.fp_iters_avg), fmt_float(r.wallclock_s)])

    @classmethod
    def from_csv(cls, path):
        table = cls()
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                failed = rec["err_N"] == "FAIL"
                val = lambda k: math.nan if rec[k] == "FAIL" else float(rec[k])
                table.add(ErrorRow(float(rec["lambda2"]), float(rec["dt"]), float(rec["dx"]),
                                   val("err_N"), val("err_P"), val("err_Psi"),
                                   float(rec["fp_iters_avg"]), float(rec["wallclock_s"]),
                                   "failed" if failed else ""))
        return table


def _run_row(case_name, lambda2, dt, cells, ref):
    case = builtin_case(case_name)
    t0 = time.perf_counter()
    mesh = case.mesh(cells)
    dx = case.length / cells
    try:
        data = case.problem(mesh)
        lam = effective_lambda2(case, lambda2, data)
        res = run(mesh, data, make_params(case, lam, dt))
        eN, eP, ePsi = l1_error(res.state, mesh, ref)
        return ErrorRow(lam, dt, dx, eN, eP, ePsi, res.fp_iters_avg, time.perf_counter() - t0)
    except Exception as exc:          # recorded per row, the sweep goes on
        logger.warning("sweep row lambda2=%g dt=%g cells=%d failed: %s", lambda2, dt, cells, exc)
        return ErrorRow(effective_lambda2(case, lambda2), dt, dx, math.nan, math.nan, math.nan,
                        math.nan, time.perf_counter() - t0, failure=str(exc))


def _check_divides(t_final, dt):
    k = t_final / dt
    if abs(k - round(k)) > 1e-9 * max(1.0, k):
        raise ValueError(f"dt={dt!r} does not divide T={t_final!r}")


def sweep(case, lambda2_list, dt_list, cells_list, ref_cells=DESK_REF_CELLS, ref_dt=DESK_REF_DT,
          paper_scale=False, workers=1, refs=None):
    """One row per (lambda^2, dt, cells) combination, errors against a per-lambda reference."""
    if isinstance(case, str):
        case = builtin_case(case)
    if not lambda2_list or not dt_list or not cells_list:
        raise ValueError("lambda^2, dt and cells lists must be nonempty")
    if case.dimension != 1:
        raise ValueError("convergence sweeps are defined for the 1D cases")
    for dt in dt_list:
        _check_divides(case.t_final, dt)
    refs = dict(refs or {})
    for lam in lambda2_list:
        eff = effective_lambda2(case, lam)
        if eff not in refs:
            refs[eff] = compute_reference(case, ref_cells, ref_dt, eff, paper_scale=paper_scale)
    jobs = [(case.name, lam, dt, cells, refs[effective_lambda2(case, lam)])
            for lam in lambda2_list for dt in dt_list for cells in cells_list]
    table = ErrorTable()
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_run_row, *zip(*jobs)))
    else:
        rows = [_run_row(*job) for job in jobs]
    for row in rows:
        table.add(row)
    return table


def fit_order(table, along="dt", fixed=None, lambda2=None):
    """Least-squares slopes of log(err) against log(dt or dx).

    ``fixed`` pins the other axis; by default the finest value present is
    used.  Returns ``{lambda2: {"N": s, "P": s, "Psi": s}}``.
    """
    if along not in ("dt", "dx"):
        raise ValueError("along must be 'dt' or 'dx'")
    other = "dx" if along == "dt" else "dt"
    lams = sorted({r.lambda2 for r in table.rows}) if lambda2 is None else [lambda2]
    out = {}
    for lam in lams:
        rows = table.select(lambda2=lam)
        if fixed is None:
            vals = [getattr(r, other) for r in rows]
            if not vals:
                raise ValueError(f"no usable rows for lambda2={lam}")
            pin = min(vals)
        else:
            pin = fixed
        rows = [r for r in rows if math.isclose(getattr(r, other), pin, rel_tol=1e-12)]
        out[lam] = {}
        for var in ("N", "P", "Psi"):
            pts = [(getattr(r, along), getattr(r, "err_" + var)) for r in rows]
            pts = [(a, e) for a, e in pts if e > 0 and math.isfinite(e)]
            if len({a for a, _ in pts}) < 3:
                raise ValueError(f"need at least 3 usable rows along {along} (lambda2={lam}, {var})")
            x = np.log([a for a, _ in pts])
            y = np.log([e for _, e in pts])
            out[lam][var] = float(np.polyfit(x, y, 1)[0])
    return out
