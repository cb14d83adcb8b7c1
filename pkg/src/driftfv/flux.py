"""Bernoulli function and Scharfetter-Gummel fluxes.

Scalar functions accept floats (or numpy arrays) and reject non-finite input.
The array kernels they delegate to live in :mod:`driftfv.kernels`.
"""
import math
from typing import NamedTuple

import numpy as np

from . import kernels


class FluxInputs(NamedTuple):
    tau: float
    dpsi: float
    u_K: float
    u_Ks: float


def _as_array(x):
    arr = np.ascontiguousarray(np.atleast_1d(np.asarray(x, dtype=float)).ravel())
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite argument")
    return arr


def _apply(kernel, x):
    arr = _as_array(x)
    out = kernel(arr)
    if np.ndim(x) == 0:
        return float(out[0])
    return out.reshape(np.shape(x))


def bernoulli(x):
    """B(x) = x / (e^x - 1), B(0) = 1."""
    return _apply(kernels.bernoulli_array, x)


def bernoulli_tilde(x):
    """B(x) - 1, without cancellation near 0."""
    return _apply(kernels.bernoulli_tilde_array, x)


def effective_diffusion(x):
    """(B(x) + B(-x)) / 2 = (x/2) coth(x/2)."""
    return _apply(kernels.effective_diffusion_array, x)


def _check_inputs(tau, dpsi, a, b):
    vals = (tau, dpsi, a, b)
    if not all(np.all(np.isfinite(v)) for v in vals):
        raise ValueError("non-finite flux input")
    if np.any(np.asarray(tau) <= 0):
        raise ValueError("tau must be positive")


def sg_flux_electron(tau, dpsi=None, u_K=None, u_Ks=None):
    """F = tau (B(-dpsi) u_K - B(dpsi) u_Ks).

    Accepts either a :class:`FluxInputs` or the four values; arrays broadcast.
    """
    if isinstance(tau, FluxInputs):
        tau, dpsi, u_K, u_Ks = tau
    _check_inputs(tau, dpsi, u_K, u_Ks)
    return tau * (bernoulli(-np.asarray(dpsi) if np.ndim(dpsi) else -dpsi) * u_K
                  - bernoulli(dpsi) * u_Ks)


def sg_flux_hole(tau, dpsi=None, u_K=None, u_Ks=None):
    """G = tau (B(dpsi) u_K - B(-dpsi) u_Ks)."""
    if isinstance(tau, FluxInputs):
        tau, dpsi, u_K, u_Ks = tau
    return sg_flux_electron(tau, -np.asarray(dpsi) if np.ndim(dpsi) else -dpsi, u_K, u_Ks)


class FluxCheck(NamedTuple):
    bracket: bool
    dissipation: bool
    magnitude: bool

    @property
    def ok(self):
        return self.bracket and self.dissipation and self.magnitude


def check_flux_inequalities(inp, species="electron", tol=1e-12):
    """Check the min/max bracket, dissipation and magnitude bounds of a flux.

    With g = D(log u - psi) for electrons (D(log u + psi) for holes), lo/hi
    the min/max of the two densities, the flux F satisfies
    ``-hi*g <= F/tau <= -lo*g`` (g >= 0, reversed otherwise),
    ``F*g <= -tau*lo*g^2`` and ``|F| <= tau*hi*|g|``.
    Works elementwise on arrays; each field of the report is the "all" over
    the inputs.
    """
    tau, dpsi, a, b = (np.asarray(v, dtype=float) for v in inp)
    if not (np.all(np.isfinite(tau)) and np.all(np.isfinite(dpsi))
            and np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("non-finite flux input")
    if np.any(a <= 0) or np.any(b <= 0):
        raise ValueError("densities must be positive")
    if species == "electron":
        flux = sg_flux_electron(tau, dpsi, a, b)
        g = np.log(b) - np.log(a) - dpsi
    elif species == "hole":
        flux = sg_flux_hole(tau, dpsi, a, b)
        g = np.log(b) - np.log(a) + dpsi
    else:
        raise ValueError(f"unknown species {species!r}")
    lo, hi = np.minimum(a, b), np.maximum(a, b)

    def le(x, y):
        return x <= y + tol * (1.0 + np.maximum(np.abs(x), np.abs(y)))

    f = flux / tau
    upper = np.where(g >= 0, -lo * g, -hi * g)
    lower = np.where(g >= 0, -hi * g, -lo * g)
    bracket = bool(np.all(le(lower, f) & le(f, upper)))
    dissipation = bool(np.all(le(flux * g, -tau * lo * g * g)))
    magnitude = bool(np.all(le(np.abs(flux), tau * hi * np.abs(g))))
    return FluxCheck(bracket, dissipation, magnitude)


def bernoulli_exact(x):
    """Reference B(x) via math.expm1 (scalar, for tests and benchmarks)."""
    if x == 0.0:
        return 1.0
    if x > 0.0:
        return x * math.exp(-x) / -math.expm1(-x)
    return x / math.expm1(x)
