"""Discrete entropy, entropy production and a priori sums.

All functions read immutable states; the :class:`DiagnosticsRecorder`
observer accumulates one :class:`DiagnosticsRecord` per time level.
"""
from dataclasses import dataclass, field
import math

import numpy as np


def entropy_H(x):
    """H(x) = x log x - x + 1 (x > 0)."""
    arr = np.asarray(x, dtype=float)
    if np.any(arr <= 0) or not np.all(np.isfinite(arr)):
        raise ValueError("entropy_H needs positive finite arguments")
    out = arr * np.log(arr) - arr + 1.0
    return float(out) if np.ndim(x) == 0 else out


def _aug(mesh, cells, dirichlet):
    return np.concatenate([np.asarray(cells, dtype=float), np.asarray(dirichlet, dtype=float)])


def _edge_diff(mesh, full):
    return full[mesh.eo] - full[mesh.ek]


def discrete_entropy(state, data, lambda_sq, mesh):
    """Relative entropy of (N, P) against the extension state plus the field energy."""
    N, P = np.asarray(state.N), np.asarray(state.P)
    if np.any(N <= 0) or np.any(P <= 0):
        raise ValueError("discrete entropy needs positive densities")
    Nd, Pd = data.ND_cells, data.PD_cells
    m = mesh.cell_measure
    e = np.sum(m * (entropy_H(N) - entropy_H(Nd) - np.log(Nd) * (N - Nd)))
    e += np.sum(m * (entropy_H(P) - entropy_H(Pd) - np.log(Pd) * (P - Pd)))
    if lambda_sq > 0:
        # traces of Psi - Psi^D vanish on the Dirichlet boundary
        diff = _aug(mesh, np.asarray(state.Psi) - data.PsiD_cells, np.zeros(mesh.n_dirichlet))
        d = _edge_diff(mesh, diff)
        e += 0.5 * lambda_sq * float(np.dot(mesh.etau, d * d))
    return float(e)


def _production_terms(state, mesh, data):
    N, P, psi = (np.asarray(v, dtype=float) for v in (state.N, state.P, state.Psi))
    if np.any(N <= 0) or np.any(P <= 0):
        raise ValueError("entropy production needs positive densities")
    if data is None:
        sel = mesh.eo < mesh.n_cells            # interior edges only
        Na, Pa, Sa = (_aug(mesh, v, np.ones(mesh.n_dirichlet)) for v in (N, P, psi))
    else:
        sel = slice(None)
        Na = _aug(mesh, N, data.ND)
        Pa = _aug(mesh, P, data.PD)
        Sa = _aug(mesh, psi, data.PsiD)
    ek, eo, tau = mesh.ek[sel], mesh.eo[sel], mesh.etau[sel]
    gN = (np.log(Na[eo]) - Sa[eo]) - (np.log(Na[ek]) - Sa[ek])
    gP = (np.log(Pa[eo]) + Sa[eo]) - (np.log(Pa[ek]) + Sa[ek])
    return tau, np.minimum(Na[ek], Na[eo]), gN, np.minimum(Pa[ek], Pa[eo]), gP


def discrete_production(state, mesh, data=None):
    """Sum over edges of tau [min N (D(log N - Psi))^2 + min P (D(log P + Psi))^2].

    Without ``data`` only interior edges contribute (no Dirichlet traces).
    """
    tau, mN, gN, mP, gP = _production_terms(state, mesh, data)
    return float(np.sum(tau * (mN * gN * gN + mP * gP * gP)))


def entropy_rhs_constant(data, mesh, m_bound, M_bound):
    """(M^2/2m)(|log N^D - Psi^D|^2_1 + |log P^D + Psi^D|^2_1) on the extension fields."""
    if np.any(data.ND_cells <= 0) or np.any(data.PD_cells <= 0) or np.any(data.ND <= 0) or np.any(data.PD <= 0):
        raise ValueError("boundary densities must be positive")
    a = _aug(mesh, np.log(data.ND_cells) - data.PsiD_cells, np.log(data.ND) - data.PsiD)
    b = _aug(mesh, np.log(data.PD_cells) + data.PsiD_cells, np.log(data.PD) + data.PsiD)
    da, db = _edge_diff(mesh, a), _edge_diff(mesh, b)
    semi = float(np.dot(mesh.etau, da * da) + np.dot(mesh.etau, db * db))
    return M_bound ** 2 / (2.0 * m_bound) * semi


@dataclass
class DiagnosticsRecord:
    n: int
    t: float
    entropy: float
    production: float
    min_N: float
    max_N: float
    min_P: float
    max_P: float
    h1_N: float
    h1_P: float
    h1_Psi: float
    weak_bv_increment: float
    entropy_rhs_bound: float
    fp_iters: int = 0


def edge_seminorms(state, mesh, data):
    """(|N|^2_1, |P|^2_1, |Psi|^2_1, weak-BV term) with Dirichlet traces."""
    dN = _edge_diff(mesh, _aug(mesh, state.N, data.ND))
    dP = _edge_diff(mesh, _aug(mesh, state.P, data.PD))
    dS = _edge_diff(mesh, _aug(mesh, state.Psi, data.PsiD))
    t = mesh.etau
    return (float(np.dot(t, dN * dN)), float(np.dot(t, dP * dP)), float(np.dot(t, dS * dS)),
            float(np.dot(t, np.abs(dS) * (dN * dN + dP * dP))))


def make_record(state, mesh, data, params, k_e, fp_iters=0):
    h1N, h1P, h1S, bv = edge_seminorms(state, mesh, data)
    return DiagnosticsRecord(
        n=state.n, t=state.t,
        entropy=discrete_entropy(state, data, params.lambda_sq, mesh),
        production=discrete_production(state, mesh, data),
        min_N=float(state.N.min()), max_N=float(state.N.max()),
        min_P=float(state.P.min()), max_P=float(state.P.max()),
        h1_N=h1N, h1_P=h1P, h1_Psi=h1S, weak_bv_increment=bv,
        entropy_rhs_bound=k_e, fp_iters=fp_iters)


class DiagnosticsRecorder:
    """Run observer collecting a record per time level (including n = 0)."""

    def __init__(self, mesh, data, params):
        self.mesh, self.data, self.params = mesh, data, params
        self.k_e = entropy_rhs_constant(data, mesh, params.m_bound, params.M_bound)
        self.records = []

    def __call__(self, state, prev, report):
        iters = report.iterations if report is not None else 0
        self.records.append(make_record(state, self.mesh, self.data, self.params, self.k_e, iters))


@dataclass
class EntropyReport:
    ok: bool
    worst_margin: float            # max over steps of LHS - K_E (<= slack when ok)
    failing_steps: list = field(default_factory=list)
    nonnegative: bool = True
    summed_production: float = 0.0
    production_constant: float = 0.0   # summed production / (1 + lambda^2), reported only


def check_entropy_inequality(records, dt, lambda_sq=0.0, slack=1e-9):
    """Per-step (E^{n+1} - E^n)/dt + I^{n+1}/2 <= K_E + slack."""
    fails, worst = [], -math.inf
    nonneg = all(r.entropy >= -slack and r.production >= -slack for r in records)
    for a, b in zip(records[:-1], records[1:]):
        lhs = (b.entropy - a.entropy) / dt + 0.5 * b.production
        margin = lhs - b.entropy_rhs_bound
        worst = max(worst, margin)
        if margin > slack:
            fails.append(b.n)
    total = float(sum(dt * r.production for r in records[1:]))
    return EntropyReport(not fails and nonneg, worst if records[1:] else 0.0, fails, nonneg,
                         total, total / (1.0 + lambda_sq))


@dataclass
class AprioriSums:
    weak_bv: float
    l2h1_N: float
    l2h1_P: float
    l2h1_Psi: float

    def as_tuple(self):
        return (self.weak_bv, self.l2h1_N, self.l2h1_P, self.l2h1_Psi)


def apriori_sums(records, dt):
    """Time sums over n = 1..N_T of the weak-BV and L2(H1) quantities."""
    rs = [r for r in records if r.n > 0]
    return AprioriSums(
        weak_bv=dt * sum(r.weak_bv_increment for r in rs),
        l2h1_N=dt * sum(r.h1_N for r in rs),
        l2h1_P=dt * sum(r.h1_P for r in rs),
        l2h1_Psi=dt * sum(r.h1_Psi for r in rs))
