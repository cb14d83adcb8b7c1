"""Built-in test cases and their discretisation on a mesh."""
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ..mesh import (build_1d_uniform, build_2d_rect, edge_averages, load_triangle_mesh,
                    piecewise, project_cell_averages)
from ..scheme import ProblemData


@dataclass
class TestCase:
    __test__ = False     # not a pytest class

    name: str
    dimension: int
    N0: Callable
    P0: Callable
    C: Callable
    ND: Callable          # extension functions of the boundary data
    PD: Callable
    PsiD: Callable
    t_final: float
    bounds: tuple = (0.1, 0.9)
    boundary_spec: dict = field(default_factory=dict)
    length: float = 1.0

    def mesh(self, cells=None, mesh_file=None):
        """1D: ``cells`` intervals; 2D: ``cells`` x ``cells`` rectangles or a triangle file."""
        if mesh_file is not None:
            return load_triangle_mesh(mesh_file)
        if self.dimension == 1:
            return build_1d_uniform(cells, self.length)
        return build_2d_rect(cells, cells, 1.0, 1.0, self.boundary_spec)

    def problem(self, mesh):
        return discretize(self, mesh)


def discretize(case, mesh):
    """Cell means of the initial data/doping and boundary traces on ``mesh``."""
    cells = lambda f: project_cell_averages(mesh, f)
    edges = lambda f: edge_averages(mesh, f)
    return ProblemData(
        N0=cells(case.N0), P0=cells(case.P0),
        ND=edges(case.ND), PD=edges(case.PD), PsiD=edges(case.PsiD),
        ND_cells=cells(case.ND), PD_cells=cells(case.PD), PsiD_cells=cells(case.PsiD),
        C=cells(case.C), bounds=case.bounds)


def _affine(a, b):
    return lambda x: a + (b - a) * np.asarray(x, dtype=float)


def _const(c):
    return lambda *xs: np.full(np.shape(xs[0]), float(c))


def _case1():
    return TestCase(
        name="case1", dimension=1,
        N0=_const(0.5), P0=_const(0.5), C=_const(0.0),
        ND=_affine(0.1, 0.9), PD=_affine(0.1, 0.9), PsiD=_affine(0.0, 4.0),
        t_final=0.1)


def _case2():
    doping = piecewise([0.5], lambda x: np.where(np.asarray(x) <= 0.5, -0.8, 0.8))
    n0 = piecewise([0.5], lambda x: (1.0 + doping(x)) / 2.0)
    p0 = piecewise([0.5], lambda x: (1.0 - doping(x)) / 2.0)
    return TestCase(
        name="case2", dimension=1,
        N0=n0, P0=p0, C=doping,
        ND=_affine(0.1, 0.9), PD=_affine(0.9, 0.1), PsiD=_affine(0.0, 4.0),
        t_final=0.1)


def _case3():
    # P-region {x < 0.5, y > 0.5} carries C = -0.8, the rest C = +0.8
    def doping_fn(x, y):
        x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
        return np.where((x < 0.5) & (y > 0.5), -0.8, 0.8)
    doping = piecewise(([0.5], [0.5]), doping_fn)
    n0 = piecewise(([0.5], [0.5]), lambda x, y: (1.0 + doping_fn(x, y)) / 2.0)
    p0 = piecewise(([0.5], [0.5]), lambda x, y: (1.0 - doping_fn(x, y)) / 2.0)
    # blend linearly in y between the contact values at y = 0 and y = 1
    blend = lambda a, b: (lambda x, y: a + (b - a) * np.asarray(y, dtype=float) + 0.0 * np.asarray(x))
    return TestCase(
        name="case3", dimension=2,
        N0=n0, P0=p0, C=doping,
        ND=blend(0.9, 0.1), PD=blend(0.1, 0.9), PsiD=blend(1.1, -1.1),
        t_final=1.0,
        boundary_spec={"bottom": "D", "top": [(0.0, 0.25)], "left": "N", "right": "N"})


_CASES = {"case1": _case1, "case2": _case2, "case3": _case3}


def builtin_case(name):
    try:
        return _CASES[name]()
    except KeyError:
        raise ValueError(f"unknown case {name!r}; choose from {sorted(_CASES)}") from None


def case_names():
    return sorted(_CASES)


def constant_case(value=0.5, psi=1.0, dimension=1, t_final=1.0):
    """Quasi-neutral constant data: an exact steady state of the scheme."""
    return TestCase(
        name="constant", dimension=dimension,
        N0=_const(value), P0=_const(value), C=_const(0.0),
        ND=_const(value), PD=_const(value), PsiD=_const(psi),
        t_final=t_final, bounds=(value, value))
