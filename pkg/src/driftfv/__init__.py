"""Finite-volume Scharfetter-Gummel solver for drift-diffusion/Poisson, uniform in the Debye length."""
from ._accel import USE_NUMBA
from .mesh import (AugmentedField, Mesh, MeshError, build_1d_uniform, build_2d_rect,
                   load_triangle_mesh, project_cell_averages)
from .flux import (bernoulli, bernoulli_tilde, effective_diffusion, sg_flux_electron,
                   sg_flux_hole, check_flux_inequalities, FluxInputs)

__version__ = "0.1.0"
