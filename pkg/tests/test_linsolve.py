import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from driftfv.linsolve import (LinearSolveError, SparseSystem, assemble_charge_potential,
                              assemble_linearized_density, assemble_poisson, assemble_qn_potential,
                              check_m_matrix, solve)
from driftfv.mesh import build_1d_uniform, build_2d_rect, project_cell_averages


def _dense(sys):
    return sys.matrix().toarray()


def _aug(mesh, cells, dirichlet):
    return np.concatenate([np.broadcast_to(cells, mesh.n_cells), np.broadcast_to(dirichlet, mesh.n_dirichlet)])


def test_poisson_two_cell_matrix():
    mesh = build_1d_uniform(2)
    sys = assemble_poisson(mesh, 1.0, np.zeros(2), np.ones(2), np.zeros(2), [0.0, 0.0])
    # tau_int = 2, tau_bnd = 4
    assert np.allclose(_dense(sys), [[6.0, -2.0], [-2.0, 6.0]])
    assert np.allclose(sys.rhs, [0.5, 0.5])


def test_poisson_constant_solution():
    mesh = build_2d_rect(5, 4)
    n = mesh.n_cells
    sys = assemble_poisson(mesh, 0.3, np.full(n, 0.4), np.full(n, 0.4), np.zeros(n), np.full(mesh.n_dirichlet, 2.5))
    x, rep = solve(sys, symmetric_hint=True)
    assert np.allclose(x, 2.5, atol=1e-12)
    assert rep.residual <= 1e-12


def _poisson_unit_charge(cells):
    mesh = build_1d_uniform(cells)
    sys = assemble_poisson(mesh, 1.0, np.zeros(cells), np.ones(cells), np.zeros(cells), [0.0, 0.0])
    return mesh, solve(sys)[0]


def test_poisson_refinement_oracle():
    # -psi'' = 1 with zero traces: nested means of the 2- and 6-cell solutions agree to O(dx^2)
    coarse_mesh, coarse = _poisson_unit_charge(2)
    fine_mesh, fine = _poisson_unit_charge(6)
    fine_means = project_cell_averages(coarse_mesh, fine, fine_mesh=fine_mesh)
    assert np.max(np.abs(coarse - fine_means)) <= 0.25 ** 2
    # TPFA with cell-centre unknowns is exact at the centres for a quadratic
    exact = lambda x: 0.5 * x * (1 - x)
    assert np.allclose(fine, exact(fine_mesh.cell_center[:, 0]), atol=1e-2)


def test_poisson_quasi_neutral_zero_charge():
    mesh = build_1d_uniform(8)
    c = np.where(mesh.cell_center[:, 0] <= 0.5, -0.8, 0.8)
    sys = assemble_poisson(mesh, 1.0, (1 + c) / 2, (1 - c) / 2, c, [0.0, 0.0])
    assert np.all(sys.rhs == 0.0)


def test_poisson_errors():
    mesh = build_1d_uniform(4)
    z = np.zeros(4)
    with pytest.raises(ValueError):
        assemble_poisson(mesh, 0.0, z, z, z, [0, 0])
    # an all-Neumann boundary is refused when the mesh is built
    with pytest.raises(ValueError, match="Dirichlet"):
        build_2d_rect(3, 3, boundary_spec={s: "N" for s in ("bottom", "top", "left", "right")})


def test_qn_potential_linear_profile():
    mesh = build_1d_uniform(16)
    sys = assemble_qn_potential(mesh, np.full(16, 0.5), [0.5, 0.5], [0.0, 4.0])
    x, _ = solve(sys, symmetric_hint=True)
    assert np.allclose(x, 4.0 * mesh.cell_center[:, 0], atol=1e-12)


def test_qn_potential_constant():
    mesh = build_1d_uniform(5)
    x, _ = solve(assemble_qn_potential(mesh, np.full(5, 0.3), [0.3, 0.3], [1.5, 1.5]))
    assert np.allclose(x, 1.5, atol=1e-14)


def test_qn_potential_rejects_nonpositive():
    mesh = build_1d_uniform(3)
    with pytest.raises(ValueError):
        assemble_qn_potential(mesh, [0.5, 0.0, 0.5], [0.5, 0.5], [0.0, 1.0])


@pytest.mark.parametrize("mesh", [build_1d_uniform(9), build_2d_rect(4, 3, 2.0, 1.0)])
def test_symmetric_systems(mesh):
    rng = np.random.default_rng(0)
    n = mesh.n_cells
    for sys in (assemble_poisson(mesh, 0.7, rng.random(n), rng.random(n), rng.random(n), rng.random(mesh.n_dirichlet)),
                assemble_qn_potential(mesh, 0.1 + rng.random(n), 0.1 + rng.random(mesh.n_dirichlet), rng.random(mesh.n_dirichlet))):
        a = _dense(sys)
        assert np.allclose(a, a.T, rtol=1e-14, atol=0)


def test_density_constant_psi_is_heat_matrix():
    mesh = build_1d_uniform(4)
    psi = _aug(mesh, 0.7, 0.7)
    prev = np.full(4, 0.5)
    a = _dense(assemble_linearized_density(mesh, "electron", psi, 0.1, prev, [0.1, 0.9]))
    heat = _dense(assemble_linearized_density(mesh, "hole", psi, 0.1, prev, [0.1, 0.9]))
    eff = _dense(assemble_linearized_density(mesh, "electron", psi, 0.1, prev, [0.1, 0.9], effective=True))
    expect = np.diag(np.full(4, 0.25 / 0.1)) + np.diag([12.0, 8.0, 8.0, 12.0]) \
        - 4.0 * (np.eye(4, k=1) + np.eye(4, k=-1))
    assert np.allclose(a, expect) and np.allclose(heat, expect) and np.allclose(eff, expect)


def test_density_hole_flips_field():
    mesh = build_1d_uniform(5)
    rng = np.random.default_rng(1)
    psi = rng.normal(size=mesh.n_cells + 2)
    prev = np.full(5, 0.5)
    e = _dense(assemble_linearized_density(mesh, "electron", -psi, 0.01, prev, [0.1, 0.9]))
    h = _dense(assemble_linearized_density(mesh, "hole", psi, 0.01, prev, [0.1, 0.9]))
    assert np.allclose(e, h)


def test_density_m_matrix_sweep():
    rng = np.random.default_rng(2)
    for mesh in (build_1d_uniform(30), build_2d_rect(6, 5)):
        nd = mesh.n_dirichlet
        for _ in range(100):
            psi = rng.normal(0, 5, mesh.n_cells + nd)
            dt = 10 ** rng.uniform(-5, -1)
            ratio = 0.0 if rng.random() < 0.3 else 10 ** rng.uniform(-3, 9)
            stab = None if ratio == 0 else (ratio, 1.0)
            src = rng.uniform(0.1, 0.9, mesh.n_cells)
            for species in ("electron", "hole"):
                sys = assemble_linearized_density(mesh, species, psi, dt, src, rng.uniform(0.1, 0.9, nd),
                                                  stabilization=stab, relaxation_source=src)
                rep = check_m_matrix(sys)
                assert rep.strictly_dominant, rep.violations[:3]
                # column sums are the cell measures over dt (times 1 + mu/lam^2) plus boundary terms
                assert np.all(np.asarray(sys.matrix().sum(axis=0)).ravel() > 0)


def test_density_stabilization_scaling():
    mesh = build_1d_uniform(3)
    psi = _aug(mesh, 0.0, 0.0)
    prev, src = np.full(3, 0.5), np.full(3, 0.2)
    base = assemble_linearized_density(mesh, "electron", psi, 0.1, prev, [0.5, 0.5])
    stab = assemble_linearized_density(mesh, "electron", psi, 0.1, prev, [0.5, 0.5],
                                       stabilization=(2.0, 0.5), relaxation_source=src)
    m_dt = mesh.cell_measure / 0.1
    assert np.allclose(np.diag(_dense(stab)) - np.diag(_dense(base)), 4.0 * m_dt)
    assert np.allclose(stab.rhs - base.rhs, 4.0 * m_dt * src)


@pytest.mark.parametrize("stab,src", [((0.0, 1.0), [0.5] * 3), ((1.0, 0.0), [0.5] * 3), ((1.0, 1.0), None)])
def test_density_invalid_stabilization(stab, src):
    mesh = build_1d_uniform(3)
    with pytest.raises(ValueError):
        assemble_linearized_density(mesh, "electron", np.zeros(5), 0.1, np.ones(3), [1, 1],
                                    stabilization=stab, relaxation_source=src)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_density_solution_nonnegative(seed):
    rng = np.random.default_rng(seed)
    mesh = build_1d_uniform(12)
    psi = rng.normal(0, 8, mesh.n_cells + 2)
    sys = assemble_linearized_density(mesh, "electron", psi, 10 ** rng.uniform(-4, -1),
                                      rng.uniform(0, 1, 12), rng.uniform(0, 1, 2))
    x, _ = solve(sys)
    assert np.all(x >= -1e-14)


def test_solve_identity():
    b = np.arange(1.0, 6.0)
    x, rep = solve(SparseSystem.from_dense(np.eye(5), b))
    assert np.allclose(x, b) and rep.residual <= 1e-12


def test_solve_graph_laplacian_against_dense():
    rng = np.random.default_rng(3)
    n = 50
    w = np.triu(rng.random((n, n)) * (rng.random((n, n)) < 0.1), 1)
    w = w + w.T
    a = np.diag(w.sum(axis=1)) - w + np.diag(rng.uniform(0.1, 1.0, n))
    b = rng.normal(size=n)
    x, _ = solve(SparseSystem.from_dense(a, b), symmetric_hint=True)
    assert np.allclose(x, np.linalg.solve(a, b), atol=1e-10)
    x2, _ = solve(SparseSystem.from_dense(a, b), method="direct")
    assert np.allclose(x2, x, atol=1e-10)


def test_solve_tridiagonal_poisson_residual():
    mesh = build_1d_uniform(2000)
    rng = np.random.default_rng(5)
    sys = assemble_poisson(mesh, 1e-9, rng.random(2000), rng.random(2000), np.zeros(2000), [0.0, 4.0])
    assert sys.bands is not None
    x, rep = solve(sys)
    assert rep.method == "direct" and rep.residual <= 1e-12


def test_solve_singular_raises_with_residual():
    a = np.array([[1.0, 1.0], [1.0, 1.0]])
    with pytest.raises(LinearSolveError) as info:
        solve(SparseSystem.from_dense(a, np.array([1.0, 0.0])))
    assert "residual" in str(info.value)


def test_sparse_system_validation(tmp_path):
    with pytest.raises(ValueError):
        SparseSystem(2, [0, 2], [0, 1], [1.0, 1.0], np.zeros(2))
    with pytest.raises(ValueError):
        SparseSystem(2, [0], [0], [1.0], np.zeros(3))
    sys = SparseSystem(2, [0, 0, 1], [0, 0, 1], [1.0, 2.0, 4.0], np.array([3.0, 4.0]))
    assert np.allclose(_dense(sys), [[3.0, 0.0], [0.0, 4.0]])
    path = tmp_path / "sys.txt"
    sys.dump(path)
    text = path.read_text()
    assert "0 0 3.0" in text and "rhs 1 4.0" in text


def test_m_matrix_flags_positive_offdiagonal():
    a = np.array([[2.0, 0.5], [-0.5, 2.0]])
    rep = check_m_matrix(SparseSystem.from_dense(a, np.zeros(2)))
    assert not rep.ok and not rep.nonpositive_offdiagonal
    assert any(v[0] == 0 and v[1] == 1 for v in rep.violations)


def test_m_matrix_poisson_weak_interior_columns():
    mesh = build_1d_uniform(6)
    z = np.zeros(6)
    rep = check_m_matrix(assemble_poisson(mesh, 1.0, z, z, z, [0.0, 0.0]))
    assert rep.ok and not rep.strictly_dominant
    # only the two columns touching a Dirichlet edge are strict
    assert sorted(rep.strict_columns.tolist()) == [0, 5]
    assert sorted(rep.weak_columns.tolist()) == [1, 2, 3, 4]


def _charge_system(mesh, lam2, dt, rng):
    n, nd = mesh.n_cells, mesh.n_dirichlet
    N, P = rng.uniform(0.1, 0.9, n), rng.uniform(0.1, 0.9, n)
    psi = rng.normal(size=n + nd)
    ND, PD, psiD = rng.uniform(0.1, 0.9, nd), rng.uniform(0.1, 0.9, nd), psi[n:]
    C = rng.normal(size=n) * 0.1
    return assemble_charge_potential(mesh, lam2, dt, N, P, N, P, C, psi, ND, PD, psiD), (N, P, psi, ND, PD, C)


@pytest.mark.parametrize("mesh", [build_1d_uniform(7), build_2d_rect(3, 4)])
def test_charge_potential_banded_matches_sparse(mesh):
    rng = np.random.default_rng(7)
    sys, _ = _charge_system(mesh, 1e-3, 1e-2, rng)
    x, rep = solve(sys)
    assert rep.residual <= 1e-12
    assert np.allclose(sys.matvec(x), sys.rhs, atol=1e-12)
    assert np.allclose(_dense(sys) @ x, sys.rhs, atol=1e-12)


def test_charge_potential_lambda_zero_forces_charge():
    mesh = build_1d_uniform(9)
    rng = np.random.default_rng(8)
    sys, (N, P, psi, ND, PD, C) = _charge_system(mesh, 0.0, 1e-2, rng)
    x, _ = solve(sys)
    assert np.allclose(x[1::2], C, atol=1e-12)


def test_charge_potential_rows_match_definition():
    mesh = build_1d_uniform(3)
    rng = np.random.default_rng(9)
    lam2, dt = 0.5, 0.1
    sys, (N, P, psi, ND, PD, C) = _charge_system(mesh, lam2, dt, rng)
    a = _dense(sys)
    m = mesh.cell_measure
    # Poisson row of cell 1 (interior): lam^2 tau (2 psi_1 - psi_0 - psi_2) + m q_1
    tau = 3.0
    assert a[2, 2] == pytest.approx(2 * lam2 * tau)
    assert a[2, 0] == pytest.approx(-lam2 * tau) and a[2, 4] == pytest.approx(-lam2 * tau)
    assert a[2, 3] == pytest.approx(m[1])
    assert sys.rhs[2] == pytest.approx(m[1] * C[1])


@pytest.mark.parametrize("mesh", [build_1d_uniform(6), build_2d_rect(3, 3)])
def test_charge_potential_tangent_is_second_order(mesh):
    # the linearised charge row matches the nonlinear one (E evaluated at the
    # new potential) up to O(eps^2); freezing E only gives O(eps)
    rng = np.random.default_rng(10)
    n, nd = mesh.n_cells, mesh.n_dirichlet
    N, P = rng.uniform(0.2, 0.8, n), rng.uniform(0.2, 0.8, n)
    ND, PD = rng.uniform(0.1, 0.9, nd), rng.uniform(0.1, 0.9, nd)
    psi = rng.normal(size=n + nd)
    C = 0.1 * rng.normal(size=n)
    args = (mesh, 1e-2, 0.1, N, P, N, P, C)
    d_psi, d_q = rng.normal(size=n), rng.normal(size=n)

    def charge_rows(sys, x):
        return (sys.matvec(x) - sys.rhs)[1::2]

    def gaps(eps):
        psi_e = psi.copy()
        psi_e[:n] += eps * d_psi
        x = np.empty(2 * n)
        x[0::2], x[1::2] = psi_e[:n], N - P + eps * d_q
        exact = charge_rows(assemble_charge_potential(*args, psi_e, ND, PD, psi[n:], linearize_e=False), x)
        out = []
        for flag in (True, False):
            sys = assemble_charge_potential(*args, psi, ND, PD, psi[n:], linearize_e=flag)
            out.append(np.abs(charge_rows(sys, x) - exact).max())
        return out

    lin1, frz1 = gaps(1e-3)
    lin2, frz2 = gaps(5e-4)
    assert lin2 / lin1 == pytest.approx(0.25, rel=0.05)
    assert frz2 / frz1 == pytest.approx(0.5, rel=0.05)
