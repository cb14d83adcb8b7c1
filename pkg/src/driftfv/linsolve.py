"""Assembly and solution of the per-iteration linear systems.

Every system here comes from a two-point flux: for each non-Neumann edge with
owner ``K`` and other index ``o`` the outgoing flux is ``alpha*u_K - beta*u_o``.
Cell ``K`` gets ``alpha`` on the diagonal and ``-beta`` at column ``o``; for an
interior edge cell ``o`` gets ``beta`` on its diagonal and ``-alpha`` at
column ``K``; for a Dirichlet edge ``beta*u_D`` moves to the right-hand side.
"""
from dataclasses import dataclass
import logging
import warnings

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import kernels

logger = logging.getLogger(__name__)

DENSE_FALLBACK_MAX = 4096


class LinearSolveError(RuntimeError):
    def __init__(self, message, residual=float("nan")):
        super().__init__(f"{message} (relative residual {residual:.3e})")
        self.residual = residual


class SparseSystem:
    """Square system A x = rhs stored as deduplicated coordinates.

    Systems assembled on a 1D chain mesh also keep the three bands so they can
    be solved by elimination without building a sparse matrix.
    """

    def __init__(self, n, rows, cols, vals, rhs, bands=None, band=None, _dedup=True):
        self.n = int(n)
        self.band = band
        rhs = np.asarray(rhs, dtype=float)
        if rhs.shape != (self.n,):
            raise ValueError("rhs length does not match system size")
        self.rhs = rhs
        self.bands = bands
        if rows is None:
            self._coo = None
        else:
            rows = np.asarray(rows, dtype=np.int64)
            cols = np.asarray(cols, dtype=np.int64)
            vals = np.asarray(vals, dtype=float)
            if rows.size and (rows.min() < 0 or cols.min() < 0 or rows.max() >= n or cols.max() >= n):
                raise ValueError("entry index out of range")
            self._raw = (rows, cols, vals)
            self._coo = _dedup_coo(self.n, rows, cols, vals) if _dedup else None
        self._csr = None
        self._ab = None

    @classmethod
    def from_dense(cls, a, rhs):
        a = np.asarray(a, dtype=float)
        r, c = np.nonzero(a)
        return cls(a.shape[0], r, c, a[r, c], rhs)

    @property
    def entries(self):
        """(rows, cols, vals) with one entry per (row, col)."""
        if self._coo is None and self.bands is None:
            self._coo = _dedup_coo(self.n, *self._raw)
        if self._coo is None:
            lower, diag, upper = self.bands
            n = self.n
            idx = np.arange(n)
            rows = np.concatenate([idx, idx[1:], idx[:-1]])
            cols = np.concatenate([idx, idx[:-1], idx[1:]])
            vals = np.concatenate([diag, lower[1:], upper[:-1]])
            self._coo = _dedup_coo(n, rows, cols, vals)
        return self._coo

    def matrix(self):
        if self._csr is None:
            rows, cols, vals = self.entries
            self._csr = sp.csr_matrix((vals, (rows, cols)), shape=(self.n, self.n))
        return self._csr

    def banded(self):
        """LAPACK band storage for the (l, u) hint, summing duplicate entries."""
        lo, up = self.band
        rows, cols, vals = self._raw if self._coo is None else self._coo
        if self._ab is None:
            ab = np.zeros((lo + up + 1, self.n))
            kernels.band_scatter(ab, up, rows, cols, vals)
            self._ab = ab
        return self._ab

    def diagonal(self):
        if self.bands is not None:
            return self.bands[1]
        return self.matrix().diagonal()

    def matvec(self, x):
        if self.bands is not None:
            lower, diag, upper = self.bands
            y = diag * x
            y[1:] += lower[1:] * x[:-1]
            y[:-1] += upper[:-1] * x[1:]
            return y
        if self.band is not None:
            return kernels.band_matvec(self.banded(), self.band[0], self.band[1], x)
        return self.matrix() @ x

    def dump(self, path):
        """Write the matrix as ``row col value`` lines followed by ``rhs`` lines."""
        rows, cols, vals = self.entries
        with open(path, "w") as fh:
            fh.write(f"# n={self.n}\n")
            for r, c, v in zip(rows, cols, vals):
                fh.write(f"{int(r)} {int(c)} {float(v)!r}\n")
            fh.write("# rhs\n")
            for i, v in enumerate(self.rhs):
                fh.write(f"rhs {i} {float(v)!r}\n")


def _dedup_coo(n, rows, cols, vals):
    m = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    m.sum_duplicates()
    m = m.tocoo()
    return m.row.astype(np.int64), m.col.astype(np.int64), m.data.copy()


@dataclass
class SolveReport:
    iterations: int
    residual: float
    method: str            # "direct" | "iterative"


# --------------------------------------------------------------------------
# assembly
# --------------------------------------------------------------------------

def _two_point_system(mesh, alpha, beta, diag0, rhs0, u_aug):
    """Assemble from per-active-edge coefficients (see module docstring)."""
    n = mesh.n_cells
    diag = np.array(diag0, dtype=float, copy=True)
    rhs = np.array(rhs0, dtype=float, copy=True)
    kernels.scatter_two_point(n, mesh.ek, mesh.eo, alpha, beta, beta, u_aug, diag, rhs)
    inner = mesh.eo < n
    k, o = mesh.ek[inner], mesh.eo[inner]
    if mesh.is_chain:
        # active edges are ordered interior-first, edge i joining i and i+1
        lower = np.zeros(n)
        upper = np.zeros(n)
        upper[k] = -beta[inner]
        lower[o] = -alpha[inner]
        return SparseSystem(n, None, None, None, rhs, bands=(lower, diag, upper))
    rows = np.concatenate([np.arange(n), k, o])
    cols = np.concatenate([np.arange(n), o, k])
    vals = np.concatenate([diag, -beta[inner], -alpha[inner]])
    return SparseSystem(n, rows, cols, vals, rhs)


def _dirichlet_aug(mesh, cell_values, dirichlet_values):
    full = np.empty(mesh.n_cells + mesh.n_dirichlet)
    full[:mesh.n_cells] = cell_values
    full[mesh.n_cells:] = dirichlet_values
    return full


def assemble_diffusion(mesh, weights, source, uD):
    """-sum_sigma w_sigma D u = source, with Dirichlet traces ``uD``.

    ``weights`` is given per active (non-Neumann) edge.
    """
    w = np.ascontiguousarray(weights, dtype=float)
    aug = _dirichlet_aug(mesh, 0.0, uD)
    return _two_point_system(mesh, w, w, np.zeros(mesh.n_cells), source, aug)


def assemble_poisson(mesh, lambda_sq, N, P, C, psiD):
    """Poisson system -lam^2 sum tau D psi = m(K) (P - N + C)."""
    if not lambda_sq > 0:
        raise ValueError("assemble_poisson needs lambda^2 > 0; use assemble_qn_potential at lambda = 0")
    if mesh.n_dirichlet == 0:
        raise ValueError("empty Dirichlet set")
    source = mesh.cell_measure * (np.asarray(P) - np.asarray(N) + np.asarray(C))
    return assemble_diffusion(mesh, lambda_sq * mesh.etau, source, psiD)


def assemble_qn_potential(mesh, N, ND, psiD, source=None):
    """Quasi-neutral potential system -sum tau (N_K + N_Ks) D psi = source (default 0)."""
    N = np.asarray(N, dtype=float)
    if np.any(N <= 0) or np.any(np.asarray(ND) <= 0):
        raise ValueError("quasi-neutral potential needs positive densities")
    if mesh.n_dirichlet == 0:
        raise ValueError("empty Dirichlet set")
    Naug = _dirichlet_aug(mesh, N, ND)
    w = mesh.etau * (Naug[mesh.ek] + Naug[mesh.eo])
    if source is None:
        source = np.zeros(mesh.n_cells)
    return assemble_diffusion(mesh, w, source, psiD)


def assemble_charge_potential(mesh, lambda_sq, dt, N, P, Nn, Pn, C, psi_aug, ND, PD, psiD,
                              linearize_e=True):
    """Coupled linear system for the potential and the charge q = N - P.

    Unknowns are interleaved: index 2K is psi_K, index 2K+1 is q_K.  Rows are

        -lam^2 sum tau D psi + m(K) q_K = m(K) C_K
        m(K) q_K + dt sum tau (S D psi - E D q) = m(K) q^n_K

    The second row is the difference of the two density equations, using
    F - G = tau (S D psi - E(D psi) D(N - P)) with
    S = (N_K + N_Ks + P_K + P_Ks)/2 and E(x) = (B(x) + B(-x))/2, where S is
    frozen at the current densities.  E is frozen at the previous potential,
    or with ``linearize_e`` replaced by its tangent
    E(x) Dq ~ E(x_k) Dq + E'(x_k) Dq_k (x - x_k), which leaves the fixed
    points unchanged and speeds up convergence across steep layers.  Solving
    both rows together keeps the iteration contractive as lambda -> 0; at
    lambda = 0 the first row forces q = C and the second becomes the
    quasi-neutral potential equation.
    """
    n = mesh.n_cells
    if lambda_sq < 0 or not dt > 0:
        raise ValueError("need lambda^2 >= 0 and dt > 0")
    Naug = _dirichlet_aug(mesh, N, ND)
    Paug = _dirichlet_aug(mesh, P, PD)
    ek, eo, tau = mesh.ek, mesh.eo, mesh.etau
    S = 0.5 * (Naug[ek] + Naug[eo] + Paug[ek] + Paug[eo])
    x = np.ascontiguousarray(psi_aug[eo] - psi_aug[ek])
    E = kernels.effective_diffusion_array(x)
    qD = np.asarray(ND, dtype=float) - np.asarray(PD, dtype=float)
    psiD = np.asarray(psiD, dtype=float)
    m = mesh.cell_measure
    idx = np.arange(n)
    inner = eo < n
    bnd = ~inner
    ki, oi = ek[inner], eo[inner]
    kb, db = ek[bnd], eo[bnd] - n
    rows, cols, vals = [2 * idx, 2 * idx + 1], [2 * idx + 1, 2 * idx + 1], [m, m]
    rhs = np.empty(2 * n)
    rhs[0::2] = m * np.asarray(C, dtype=float)
    rhs[1::2] = m * (np.asarray(Nn, dtype=float) - np.asarray(Pn, dtype=float))

    def couple(row_off, col_off, w):
        # adds -w * (u_o - u_K) to row K and its negative to row o
        wi = w[inner]
        rK, rO = 2 * ki + row_off, 2 * oi + row_off
        cK, cO = 2 * ki + col_off, 2 * oi + col_off
        rows.extend([rK, rK, rO, rO])
        cols.extend([cK, cO, cO, cK])
        vals.extend([wi, -wi, wi, -wi])
        rows.append(2 * kb + row_off)
        cols.append(2 * kb + col_off)
        vals.append(w[bnd])

    wpsi = lambda_sq * tau
    couple(0, 0, wpsi)
    wS = -dt * tau * S
    if linearize_e:
        qaug = Naug - Paug
        slope = dt * tau * kernels.effective_diffusion_deriv_numpy(x) * (qaug[eo] - qaug[ek])
        wS = wS + slope
        c = slope * x
        rhs[1::2] -= np.bincount(ek, weights=c, minlength=n)
        rhs[1::2] += np.bincount(oi, weights=c[inner], minlength=n)
    couple(1, 0, wS)
    wE = dt * tau * E
    couple(1, 1, wE)
    rhs[0::2] += np.bincount(kb, weights=wpsi[bnd] * psiD[db], minlength=n)
    rhs[1::2] += np.bincount(kb, weights=wS[bnd] * psiD[db] + wE[bnd] * qD[db], minlength=n)
    band = (3, 3) if mesh.is_chain else None
    return SparseSystem(2 * n, np.concatenate(rows), np.concatenate(cols), np.concatenate(vals),
                        rhs, band=band, _dedup=False)


def density_coefficients(mesh, species, psi_aug, effective=False):
    """(alpha, beta) per active edge for the electron or hole SG flux."""
    dpsi = np.ascontiguousarray(psi_aug[mesh.eo] - psi_aug[mesh.ek])
    if effective:
        w = mesh.etau * kernels.effective_diffusion_array(dpsi)
        return w, w
    if species == "hole":
        dpsi = -dpsi
    elif species != "electron":
        raise ValueError(f"unknown species {species!r}")
    return kernels.sg_coefficients(mesh.etau, dpsi)


def assemble_linearized_density(mesh, species, psi_aug, dt, previous, uD,
                                stabilization=None, relaxation_source=None,
                                effective=False):
    """Implicit SG density system for one species.

    ``stabilization`` is ``None``/``"none"`` or a pair ``(mu, lambda_sq)``; it
    adds ``(mu/lam^2)(u_hat - u)`` to the time derivative, ``u`` being
    ``relaxation_source``.  ``effective=True`` assembles the symmetric
    quasi-neutral form with coefficient (B(x) + B(-x))/2.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    s = 0.0
    if stabilization is not None and not (isinstance(stabilization, str) and stabilization == "none"):
        mu, lam2 = stabilization
        if not (mu > 0 and lam2 > 0):
            raise ValueError("stabilization needs mu > 0 and lambda^2 > 0")
        if relaxation_source is None:
            raise ValueError("stabilization needs a relaxation source")
        s = mu / lam2
    m_dt = mesh.cell_measure / dt
    alpha, beta = density_coefficients(mesh, species, psi_aug, effective)
    rhs = m_dt * np.asarray(previous, dtype=float)
    if s:
        rhs = rhs + m_dt * s * np.asarray(relaxation_source, dtype=float)
    aug = _dirichlet_aug(mesh, 0.0, uD)
    return _two_point_system(mesh, alpha, beta, m_dt * (1.0 + s), rhs, aug)


# --------------------------------------------------------------------------
# solving
# --------------------------------------------------------------------------

def _rel_residual(sys, x):
    r = sys.matvec(x) - sys.rhs
    nb = np.linalg.norm(sys.rhs)
    nr = np.linalg.norm(r)
    return nr / nb if nb > 0 else nr


def solve(sys, tol=1e-12, symmetric_hint=False, method="auto"):
    """Solve ``sys``; returns (x, SolveReport) or raises LinearSolveError.

    Chain (1D) systems use tridiagonal elimination.  Others use ILU-
    preconditioned CG (symmetric) or BiCGSTAB, falling back to a sparse
    direct factorization and, for n <= 4096, a dense solve.
    """
    if sys.bands is not None and method in ("auto", "banded"):
        lower, diag, upper = sys.bands
        x = kernels.thomas(lower, diag, upper, sys.rhs)
        res = _rel_residual(sys, x)
        it = 0
        while res > tol and it < 3:
            x = x + kernels.thomas(lower, diag, upper, sys.rhs - sys.matvec(x))
            res = _rel_residual(sys, x)
            it += 1
        if not np.all(np.isfinite(x)) or res > tol:
            raise LinearSolveError("banded elimination failed", res)
        return x, SolveReport(it, res, "direct")

    if sys.band is not None and method in ("auto", "banded"):
        x = scipy.linalg.solve_banded(sys.band, sys.banded(), sys.rhs, check_finite=False)
        res = _rel_residual(sys, x)
        if not np.all(np.isfinite(x)) or res > tol:
            raise LinearSolveError("banded elimination failed", res)
        return x, SolveReport(0, res, "direct")

    A = sys.matrix()
    if method in ("auto", "iterative"):
        x, rep = _krylov(A, sys, tol, symmetric_hint)
        if rep is not None:
            return x, rep
        if method == "iterative":
            raise LinearSolveError("Krylov iteration did not converge", _rel_residual(sys, x))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", spla.MatrixRankWarning)
        x = spla.spsolve(A.tocsc(), sys.rhs)
    res = _rel_residual(sys, x)
    if res <= tol and np.all(np.isfinite(x)):
        return x, SolveReport(1, res, "direct")
    if sys.n <= DENSE_FALLBACK_MAX:
        try:
            x = scipy.linalg.solve(A.toarray(), sys.rhs)
        except (np.linalg.LinAlgError, ValueError):
            raise LinearSolveError("matrix is singular", res) from None
        res = _rel_residual(sys, x)
        if res <= tol:
            return x, SolveReport(1, res, "direct")
    raise LinearSolveError("direct solve failed", res)


def _krylov(A, sys, tol, symmetric):
    n = sys.n
    try:
        ilu = spla.spilu(A.tocsc(), drop_tol=1e-6, fill_factor=20)
        M = spla.LinearOperator((n, n), ilu.solve)
    except RuntimeError:
        M = None
    count = [0]

    def cb(_):
        count[0] += 1

    x0 = np.zeros(n)
    solver = spla.cg if symmetric else spla.bicgstab
    # ask for a little more than tol: the Krylov estimate is preconditioned
    x, info = solver(A, sys.rhs, x0=x0, rtol=0.1 * tol, atol=0.0, maxiter=max(200, n), M=M, callback=cb)
    res = _rel_residual(sys, x)
    if info == 0 and res <= tol and np.all(np.isfinite(x)):
        return x, SolveReport(count[0], res, "iterative")
    logger.debug("Krylov solve stopped with info=%s residual=%.3e", info, res)
    return x, None


# --------------------------------------------------------------------------
# structure checks
# --------------------------------------------------------------------------

@dataclass
class MMatrixReport:
    positive_diagonal: bool
    nonpositive_offdiagonal: bool
    column_dominant: bool            # weak dominance in every column
    strict_columns: np.ndarray
    weak_columns: np.ndarray         # equality columns (dominant but not strictly)
    violations: list                 # (row, col, value, reason)

    @property
    def ok(self):
        return self.positive_diagonal and self.nonpositive_offdiagonal and self.column_dominant

    @property
    def strictly_dominant(self):
        return self.ok and self.weak_columns.size == 0


def check_m_matrix(sys, rtol=1e-13):
    """Sign pattern and column diagonal dominance of ``sys``.

    A column is strict when a_jj > sum_{i != j} |a_ij| beyond round-off, weak
    when equality holds to ``rtol``.
    """
    rows, cols, vals = sys.entries
    viol = []
    on = rows == cols
    diag = np.zeros(sys.n)
    diag[rows[on]] = vals[on]
    missing = np.setdiff1d(np.arange(sys.n), rows[on])
    pos_diag = bool(np.all(diag > 0))
    for j in np.flatnonzero(diag <= 0):
        viol.append((int(j), int(j), float(diag[j]), "non-positive diagonal"))
    off = ~on
    bad = off & (vals > 0)
    for r, c, v in zip(rows[bad], cols[bad], vals[bad]):
        viol.append((int(r), int(c), float(v), "positive off-diagonal"))
    colsum = np.bincount(cols[off], weights=np.abs(vals[off]), minlength=sys.n)
    margin = diag - colsum
    scale = np.maximum(np.abs(diag), colsum)
    strict = margin > rtol * scale
    weak = ~strict & (margin >= -rtol * scale)
    failing = ~(strict | weak)
    for j in np.flatnonzero(failing):
        viol.append((int(j), int(j), float(margin[j]), "column not diagonally dominant"))
    for j in missing:
        viol.append((int(j), int(j), 0.0, "missing diagonal"))
    return MMatrixReport(pos_diag and missing.size == 0, not bool(bad.any()), not bool(failing.any()),
                         np.flatnonzero(strict), np.flatnonzero(weak), viol)
