"""Implicit Euler / Scharfetter-Gummel time stepping.

Each step solves the nonlinear implicit scheme by a fixed-point iteration of
linear solves.  For lambda > 0 two maps are available:

``solver="gummel"`` (default)
    potential and charge from one coupled linear system (Poisson plus the
    difference of the density equations with frozen coefficients, see
    :func:`driftfv.linsolve.assemble_charge_potential`), then the two exact SG
    density systems.  Convergence does not degrade as lambda -> 0.

``solver="relaxation"``
    the Poisson / relaxed-density map with stabilisation mu/lambda^2.  Its
    contraction factor tends to 1 as lambda -> 0, so it is only practical for
    moderate lambda.

For lambda = 0 the quasi-neutral map (potential from the degenerate
N-weighted elliptic equation, then the symmetric density system) is used.
"""
from dataclasses import dataclass, field
import logging
import math
from typing import Optional, Union

import numpy as np

from . import linsolve
from .linsolve import (assemble_charge_potential, assemble_linearized_density, assemble_poisson,
                       assemble_qn_potential, solve, LinearSolveError)
from . import kernels

logger = logging.getLogger(__name__)


class FixedPointError(RuntimeError):
    def __init__(self, message, increment=float("nan"), iterate=None, step=None):
        super().__init__(message)
        self.increment = increment
        self.iterate = iterate
        self.step = step


class StepError(RuntimeError):
    def __init__(self, step, cause):
        super().__init__(f"step {step} failed: {cause}")
        self.step = step
        self.cause = cause


@dataclass
class SchemeParams:
    lambda_sq: float
    dt: float
    t_final: float
    m_bound: float = 0.1
    M_bound: float = 0.9
    mu: Union[float, str] = "auto"
    fp_tol: float = 1e-11
    fp_max_iter: int = 500
    lin_tol: float = 1e-12
    solver: str = "gummel"
    damping: bool = True
    debug: bool = False

    def __post_init__(self):
        if not self.lambda_sq >= 0:
            raise ValueError("lambda_sq must be >= 0")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.t_final >= self.dt * (1 - 1e-12):
            raise ValueError("t_final must be at least dt")
        if not 0 < self.m_bound <= self.M_bound:
            raise ValueError("need 0 < m_bound <= M_bound")
        if self.mu != "auto" and not float(self.mu) > 0:
            raise ValueError("mu must be positive or 'auto'")
        if self.solver not in ("gummel", "relaxation"):
            raise ValueError(f"unknown solver {self.solver!r}")
        if self.fp_max_iter < 1 or not self.fp_tol > 0:
            raise ValueError("invalid fixed-point controls")

    @property
    def mu_eff(self):
        return self.M_bound * self.dt if self.mu == "auto" else float(self.mu)

    @property
    def n_steps(self):
        # floor(T/dt), guarded against 0.1/1e-3 = 99.99999...
        return int(math.floor(self.t_final / self.dt + 1e-9))


@dataclass
class ProblemData:
    """Discrete data: initial cell means, Dirichlet traces, extension means, doping."""
    N0: np.ndarray
    P0: np.ndarray
    ND: np.ndarray
    PD: np.ndarray
    PsiD: np.ndarray
    ND_cells: np.ndarray
    PD_cells: np.ndarray
    PsiD_cells: np.ndarray
    C: np.ndarray
    bounds: Optional[tuple] = None

    def __post_init__(self):
        for name in ("N0", "P0", "ND", "PD", "PsiD", "ND_cells", "PD_cells", "PsiD_cells", "C"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite values")
            setattr(self, name, arr)
        n = self.N0.shape[0]
        for name in ("P0", "ND_cells", "PD_cells", "PsiD_cells", "C"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} must have one value per cell")
        if not (self.ND.shape == self.PD.shape == self.PsiD.shape):
            raise ValueError("Dirichlet traces must have equal length")
        if self.bounds is not None:
            self.check_bounds(*self.bounds)

    def check_bounds(self, m, M, tol=1e-14):
        for name in ("N0", "P0", "ND", "PD"):
            arr = getattr(self, name)
            if arr.size and (arr.min() < m - tol or arr.max() > M + tol):
                raise ValueError(f"{name} violates m <= {name} <= M with m={m}, M={M}")

    @property
    def zero_doping(self):
        return not np.any(self.C)

    def check_quasi_neutral(self):
        if not self.zero_doping:
            raise ValueError("lambda = 0 is only defined for zero doping; use a small lambda^2 > 0")
        if np.any(self.P0 != self.N0) or np.any(self.PD != self.ND):
            raise ValueError("lambda = 0 requires quasi-neutral data: P0 = N0 and PD = ND")

    def check_mesh(self, mesh):
        if self.N0.shape[0] != mesh.n_cells:
            raise ValueError("problem data and mesh have different cell counts")
        if self.ND.shape[0] != mesh.n_dirichlet:
            raise ValueError("problem data and mesh have different Dirichlet edge counts")


@dataclass
class State:
    n: int
    t: float
    N: np.ndarray
    P: np.ndarray
    Psi: np.ndarray

    def copy(self):
        return State(self.n, self.t, self.N.copy(), self.P.copy(), self.Psi.copy())


@dataclass
class FixedPointReport:
    iterations: int
    increment: float
    psi_increment: float
    damping: float = 1.0
    residual: Optional[float] = None


@dataclass
class RunResult:
    state: State
    reports: list = field(default_factory=list)

    @property
    def n_steps(self):
        return len(self.reports)

    @property
    def fp_iters_avg(self):
        return float(np.mean([r.iterations for r in self.reports])) if self.reports else 0.0


def _aug(mesh, cells, dirichlet):
    out = np.empty(mesh.n_cells + mesh.n_dirichlet)
    out[:mesh.n_cells] = cells
    out[mesh.n_cells:] = dirichlet
    return out


def _solve(sys, params, symmetric):
    x, _ = solve(sys, tol=params.lin_tol, symmetric_hint=symmetric)
    return x


def _validate(mesh, data, params):
    data.check_mesh(mesh)
    data.check_bounds(params.m_bound, params.M_bound)
    if params.lambda_sq == 0:
        data.check_quasi_neutral()


def init_state(mesh, data, params):
    """Initial densities and the potential they induce."""
    _validate(mesh, data, params)
    if params.lambda_sq > 0:
        sys = assemble_poisson(mesh, params.lambda_sq, data.N0, data.P0, data.C, data.PsiD)
    else:
        sys = assemble_qn_potential(mesh, data.N0, data.ND, data.PsiD)
    psi = _solve(sys, params, True)
    return State(0, 0.0, data.N0.copy(), data.P0.copy(), psi)


class _Damper:
    """Halve the relaxation factor after 3 consecutive increment increases."""

    def __init__(self, enabled):
        self.enabled = enabled
        self.omega = 1.0
        self.last = math.inf
        self.rises = 0

    def update(self, inc):
        if not self.enabled:
            return 1.0
        if inc > self.last:
            self.rises += 1
            if self.rises >= 3:
                self.omega = max(self.omega * 0.5, 1.0 / 64)
                self.rises = 0
        else:
            self.rises = 0
        self.last = inc
        return self.omega


def step_lambda_positive(state, mesh, data, params):
    """One implicit step for lambda > 0; returns (new_state, report)."""
    lam2, dt = params.lambda_sq, params.dt
    if not lam2 > 0:
        raise ValueError("step_lambda_positive needs lambda^2 > 0")
    Nn, Pn = state.N, state.P
    N, P = Nn.copy(), Pn.copy()
    psi = state.Psi.copy()
    damper = _Damper(params.damping)
    relax = params.solver == "relaxation"
    stab = (params.mu_eff, lam2) if relax else None
    inc = math.inf
    dpsi_max = 0.0
    for it in range(1, params.fp_max_iter + 1):
        psi_aug = _aug(mesh, psi, data.PsiD)
        if relax:
            sys = assemble_poisson(mesh, lam2, N, P, data.C, data.PsiD)
        else:
            sys = assemble_charge_potential(mesh, lam2, dt, N, P, Nn, Pn, data.C, psi_aug,
                                            data.ND, data.PD, data.PsiD)
        psi_new = _solve(sys, params, relax)
        if not relax:
            psi_new = psi_new[0::2]
        dpsi_max = float(np.max(np.abs(psi_new - psi)))
        psi = psi_new
        psi_aug = _aug(mesh, psi, data.PsiD)
        N_hat = _solve(assemble_linearized_density(mesh, "electron", psi_aug, dt, Nn, data.ND,
                                                   stab, N), params, False)
        P_hat = _solve(assemble_linearized_density(mesh, "hole", psi_aug, dt, Pn, data.PD,
                                                   stab, P), params, False)
        dN, dP = N_hat - N, P_hat - P
        inc = max(float(np.max(np.abs(dN))), float(np.max(np.abs(dP))))
        if not math.isfinite(inc):
            raise FixedPointError("non-finite iterate", inc, (N, P, psi))
        omega = damper.update(inc)
        if omega == 1.0 or inc <= params.fp_tol:
            N, P = N_hat, P_hat
        else:
            N, P = N + omega * dN, P + omega * dP
        if inc <= params.fp_tol:
            break
    else:
        raise FixedPointError(
            f"fixed point not reached in {params.fp_max_iter} iterations (last increment {inc:.3e})",
            inc, (N, P, psi))
    if relax:
        psi = _solve(assemble_poisson(mesh, lam2, N, P, data.C, data.PsiD), params, True)
    new = State(state.n + 1, (state.n + 1) * dt, N, P, psi)
    rep = FixedPointReport(it, inc, dpsi_max, damper.omega)
    if params.debug:
        _debug_checks(state, new, mesh, data, params, rep)
    return new, rep


def step_quasi_neutral(state, mesh, data, params):
    """One implicit step of the lambda = 0 scheme (P = N)."""
    if params.lambda_sq != 0:
        raise ValueError("step_quasi_neutral needs lambda^2 = 0")
    dt = params.dt
    Nn = state.N
    N = Nn.copy()
    psi = state.Psi.copy()
    damper = _Damper(params.damping)
    inc = math.inf
    dpsi_max = 0.0
    for it in range(1, params.fp_max_iter + 1):
        if np.any(N <= 0):
            raise FixedPointError("non-positive density in the quasi-neutral iteration",
                                  inc, (N, N, psi))
        psi_new = _solve(assemble_qn_potential(mesh, N, data.ND, data.PsiD), params, True)
        dpsi_max = float(np.max(np.abs(psi_new - psi)))
        psi = psi_new
        psi_aug = _aug(mesh, psi, data.PsiD)
        N_hat = _solve(assemble_linearized_density(mesh, "electron", psi_aug, dt, Nn, data.ND,
                                                   effective=True), params, True)
        dN = N_hat - N
        inc = float(np.max(np.abs(dN)))
        if not math.isfinite(inc):
            raise FixedPointError("non-finite iterate", inc, (N, N, psi))
        omega = damper.update(inc)
        N = N_hat if (omega == 1.0 or inc <= params.fp_tol) else N + omega * dN
        if inc <= params.fp_tol:
            break
    else:
        raise FixedPointError(
            f"fixed point not reached in {params.fp_max_iter} iterations (last increment {inc:.3e})",
            inc, (N, N, psi))
    new = State(state.n + 1, (state.n + 1) * dt, N, N.copy(), psi)
    rep = FixedPointReport(it, inc, dpsi_max, damper.omega)
    if params.debug:
        _debug_checks(state, new, mesh, data, params, rep)
    return new, rep


def step(state, mesh, data, params):
    if params.lambda_sq > 0:
        return step_lambda_positive(state, mesh, data, params)
    return step_quasi_neutral(state, mesh, data, params)


def run(mesh, data, params, observers=(), state=None):
    """Advance N_T = floor(T/dt) steps.

    Each observer is called as ``obs(state, prev, report)``: once with the
    initial state (``prev`` and ``report`` None), then after every step.
    """
    if state is None:
        state = init_state(mesh, data, params)
    else:
        _validate(mesh, data, params)
    for obs in observers:
        obs(state, None, None)
    result = RunResult(state)
    for _ in range(params.n_steps):
        try:
            new, rep = step(state, mesh, data, params)
        except (FixedPointError, LinearSolveError, ValueError) as exc:
            raise StepError(state.n + 1, exc) from exc
        for obs in observers:
            obs(new, state, rep)
        result.reports.append(rep)
        state = new
    result.state = state
    return result


# --------------------------------------------------------------------------
# residuals and balances
# --------------------------------------------------------------------------

def edge_fluxes(mesh, psi_aug, u_aug, species):
    """SG flux out of the owner cell on each active edge."""
    dpsi = np.ascontiguousarray(psi_aug[mesh.eo] - psi_aug[mesh.ek])
    if species == "hole":
        dpsi = -dpsi
    a, b = kernels.sg_coefficients(mesh.etau, dpsi)
    return a * u_aug[mesh.ek] - b * u_aug[mesh.eo]


def cell_divergence(mesh, edge_values):
    """Sum over the edges of each cell of the outward edge quantity."""
    n = mesh.n_cells
    out = np.bincount(mesh.ek, weights=edge_values, minlength=n)
    inner = mesh.eo < n
    out -= np.bincount(mesh.eo[inner], weights=edge_values[inner], minlength=n)
    return out


def scheme_residuals(prev, new, mesh, data, params):
    """Scaled per-cell residuals of the nonlinear scheme.

    Density equations are multiplied by dt/m(K) (units of a density); the
    Poisson equation is divided by m(K) for lambda > 0, and the lambda = 0
    potential equation is multiplied by dt/m(K).
    """
    dt, lam2 = params.dt, params.lambda_sq
    m = mesh.cell_measure
    psi_aug = _aug(mesh, new.Psi, data.PsiD)
    N_aug = _aug(mesh, new.N, data.ND)
    P_aug = _aug(mesh, new.P, data.PD)
    rN = new.N - prev.N + dt / m * cell_divergence(mesh, edge_fluxes(mesh, psi_aug, N_aug, "electron"))
    rP = new.P - prev.P + dt / m * cell_divergence(mesh, edge_fluxes(mesh, psi_aug, P_aug, "hole"))
    dpsi = psi_aug[mesh.eo] - psi_aug[mesh.ek]
    if lam2 > 0:
        rPsi = (-lam2 * cell_divergence(mesh, mesh.etau * dpsi)) / m - (new.P - new.N + data.C)
    else:
        w = mesh.etau * (N_aug[mesh.ek] + N_aug[mesh.eo])
        rPsi = -dt / m * cell_divergence(mesh, w * dpsi)
        rP = new.P - new.N
    return {"N": rN, "P": rP, "Psi": rPsi}


def max_residual(prev, new, mesh, data, params):
    res = scheme_residuals(prev, new, mesh, data, params)
    return max(float(np.max(np.abs(v))) for v in res.values())


def boundary_outflow(mesh, state, data, species):
    """Sum of SG fluxes leaving through Dirichlet edges."""
    psi_aug = _aug(mesh, state.Psi, data.PsiD)
    if species == "electron":
        u_aug = _aug(mesh, state.N, data.ND)
    else:
        u_aug = _aug(mesh, state.P, data.PD)
    f = edge_fluxes(mesh, psi_aug, u_aug, species)
    return float(f[mesh.eo >= mesh.n_cells].sum())


def _debug_checks(prev, new, mesh, data, params, rep):
    rep.residual = max_residual(prev, new, mesh, data, params)
    if rep.residual > 10 * params.fp_tol * max(1.0, 1.0 / params.dt):
        logger.warning("step %d: scheme residual %.3e", new.n, rep.residual)
    if params.lambda_sq > 0:
        psi_aug = _aug(mesh, new.Psi, data.PsiD)
        for sp_name, prev_u, ud in (("electron", prev.N, data.ND), ("hole", prev.P, data.PD)):
            sys = assemble_linearized_density(mesh, sp_name, psi_aug, params.dt, prev_u, ud)
            chk = linsolve.check_m_matrix(sys)
            if not chk.strictly_dominant:
                logger.warning("step %d: %s matrix fails the M-matrix check: %s",
                               new.n, sp_name, chk.violations[:3])
