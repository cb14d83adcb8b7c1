"""Hot inner loops.

Every kernel exists twice: an explicit loop compiled by numba and a
vectorised numpy/scipy version.  The public names at the bottom of the module
point at one or the other depending on :data:`driftfv._accel.USE_NUMBA`; both
families stay importable (``*_loop`` / ``*_numpy``) so tests and the benchmark
can compare them directly.

Two kernels always dispatch to numpy: ``effective_diffusion`` (numpy's SIMD
tanh beats a scalar libm loop) and ``band_matvec`` (strided band access is
slower as a loop than seven shifted vector products).
"""
import numpy as np
import scipy.linalg

from ._accel import USE_NUMBA, njit

# |x| below this uses the Taylor series of B.
SERIES_CUT = 1e-4
# |x| below this uses the Taylor series of B - 1 (avoids cancellation).
TILDE_CUT = 0.5


# --------------------------------------------------------------------------
# loop versions (numba-compiled when enabled)
# --------------------------------------------------------------------------

@njit
def _bern_scalar(x):
    ax = abs(x)
    if ax < SERIES_CUT:
        x2 = x * x
        return 1.0 - 0.5 * x + x2 / 12.0 - x2 * x2 / 720.0
    if x > 0.0:
        # x e^{-x} / (1 - e^{-x}); no overflow for large positive x
        return x * np.exp(-x) / (-np.expm1(-x))
    return x / np.expm1(x)


@njit
def bernoulli_loop(x):
    out = np.empty(x.shape[0])
    for i in range(x.shape[0]):
        out[i] = _bern_scalar(x[i])
    return out


@njit
def _bern_tilde_scalar(x):
    if abs(x) < TILDE_CUT:
        x2 = x * x
        # B(x) - 1 = -x/2 + sum_k B_2k x^2k / (2k)!
        return -0.5 * x + x2 * (1.0 / 12.0 + x2 * (-1.0 / 720.0 + x2 * (
            1.0 / 30240.0 + x2 * (-1.0 / 1209600.0 + x2 * (
                1.0 / 47900160.0 + x2 * (-691.0 / 1307674368000.0))))))
    return _bern_scalar(x) - 1.0


@njit
def bernoulli_tilde_loop(x):
    out = np.empty(x.shape[0])
    for i in range(x.shape[0]):
        out[i] = _bern_tilde_scalar(x[i])
    return out


@njit
def _coth_scalar(x):
    if abs(x) < SERIES_CUT:
        x2 = x * x
        return 1.0 + x2 / 12.0 - x2 * x2 / 720.0
    h = 0.5 * x
    return h / np.tanh(h)


@njit
def effective_diffusion_loop(x):
    out = np.empty(x.shape[0])
    for i in range(x.shape[0]):
        out[i] = _coth_scalar(x[i])
    return out


@njit
def sg_coefficients_loop(tau, dpsi):
    """Return (tau*B(-dpsi), tau*B(dpsi)) edgewise."""
    m = tau.shape[0]
    bm = np.empty(m)
    bp = np.empty(m)
    for e in range(m):
        x = dpsi[e]
        bx = _bern_scalar(x)
        bp[e] = tau[e] * bx
        # B(-x) = B(x) + x
        if abs(x) < SERIES_CUT:
            bm[e] = tau[e] * _bern_scalar(-x)
        else:
            bm[e] = tau[e] * (bx + x)
    return bm, bp


@njit
def scatter_two_point_loop(n, ek, eo, a, b, a2, u_aug, diag, rhs):
    """Accumulate two-point edge coefficients into ``diag`` and ``rhs``.

    Row ``K = ek[e]`` gets ``a[e]`` on the diagonal.  When ``eo[e] < n`` the
    edge is interior and row ``eo[e]`` gets ``a2[e]``; otherwise the edge is a
    Dirichlet edge and ``b[e] * u_aug[eo[e]]`` moves to the right-hand side.
    Both arrays are modified in place.
    """
    for e in range(ek.shape[0]):
        k = ek[e]
        o = eo[e]
        diag[k] += a[e]
        if o < n:
            diag[o] += a2[e]
        else:
            rhs[k] += b[e] * u_aug[o]


@njit
def thomas_loop(lower, diag, upper, rhs):
    """Solve a tridiagonal system without pivoting.

    ``lower[i]`` multiplies x[i-1] in row i (``lower[0]`` unused) and
    ``upper[i]`` multiplies x[i+1] in row i (``upper[-1]`` unused).  Safe for
    the diagonally dominant / M-matrix systems assembled here.
    """
    n = diag.shape[0]
    c = np.empty(n)
    d = np.empty(n)
    beta = diag[0]
    c[0] = upper[0] / beta
    d[0] = rhs[0] / beta
    for i in range(1, n):
        beta = diag[i] - lower[i] * c[i - 1]
        c[i] = upper[i] / beta
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / beta
    x = np.empty(n)
    x[n - 1] = d[n - 1]
    for i in range(n - 2, -1, -1):
        x[i] = d[i] - c[i] * x[i + 1]
    return x


@njit
def band_scatter_loop(ab, up, rows, cols, vals):
    """Add coordinate entries into LAPACK band storage (duplicates summed)."""
    for i in range(rows.shape[0]):
        ab[up + rows[i] - cols[i], cols[i]] += vals[i]


@njit
def band_matvec_loop(ab, lo, up, x):
    n = x.shape[0]
    y = np.zeros(n)
    for j in range(n):
        xj = x[j]
        for i in range(max(0, j - up), min(n, j + lo + 1)):
            y[i] += ab[up + i - j, j] * xj
    return y


# --------------------------------------------------------------------------
# numpy versions
# --------------------------------------------------------------------------

def bernoulli_numpy(x):
    x = np.asarray(x, dtype=float)
    ax = np.abs(x)
    small = ax < SERIES_CUT
    pos = (x > 0) & ~small
    neg = ~(small | pos)
    out = np.empty_like(x)
    xs = x[small]
    x2 = xs * xs
    out[small] = 1.0 - 0.5 * xs + x2 / 12.0 - x2 * x2 / 720.0
    xp = x[pos]
    out[pos] = xp * np.exp(-xp) / (-np.expm1(-xp))
    xn = x[neg]
    out[neg] = xn / np.expm1(xn)
    return out


def bernoulli_tilde_numpy(x):
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < TILDE_CUT
    out = np.empty_like(x)
    xs = x[small]
    x2 = xs * xs
    out[small] = -0.5 * xs + x2 * (1.0 / 12.0 + x2 * (-1.0 / 720.0 + x2 * (
        1.0 / 30240.0 + x2 * (-1.0 / 1209600.0 + x2 * (
            1.0 / 47900160.0 + x2 * (-691.0 / 1307674368000.0))))))
    out[~small] = bernoulli_numpy(x[~small]) - 1.0
    return out


def effective_diffusion_numpy(x):
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < SERIES_CUT
    out = np.empty_like(x)
    x2 = x[small] ** 2
    out[small] = 1.0 + x2 / 12.0 - x2 * x2 / 720.0
    h = 0.5 * x[~small]
    out[~small] = h / np.tanh(h)
    return out


def effective_diffusion_deriv_numpy(x):
    """d/dx of (x/2) coth(x/2) = (coth h - h / sinh^2 h) / 2 with h = x/2."""
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < 0.1
    out = np.empty_like(x)
    xs = x[small]
    x2 = xs * xs
    # sum_k 2k B_2k x^(2k-1) / (2k)!; the closed form cancels badly near 0
    out[small] = xs * (1.0 / 6.0 + x2 * (-1.0 / 180.0 + x2 * (1.0 / 5040.0 + x2 * (
        -1.0 / 151200.0 + x2 / 4790016.0))))
    h = 0.5 * x[~small]
    with np.errstate(over="ignore"):
        out[~small] = 0.5 * (1.0 / np.tanh(h) - h / np.sinh(h) ** 2)
    return out


def sg_coefficients_numpy(tau, dpsi):
    bx = bernoulli_numpy(dpsi)
    small = np.abs(dpsi) < SERIES_CUT
    bmx = np.where(small, bernoulli_numpy(-dpsi), bx + dpsi)
    return tau * bmx, tau * bx


def scatter_two_point_numpy(n, ek, eo, a, b, a2, u_aug, diag, rhs):
    diag += np.bincount(ek, weights=a, minlength=n)
    inner = eo < n
    diag += np.bincount(eo[inner], weights=a2[inner], minlength=n)
    bnd = ~inner
    if bnd.any():
        rhs += np.bincount(ek[bnd], weights=b[bnd] * u_aug[eo[bnd]], minlength=n)


def thomas_numpy(lower, diag, upper, rhs):
    n = diag.shape[0]
    ab = np.zeros((3, n))
    ab[0, 1:] = upper[:-1]
    ab[1] = diag
    ab[2, :-1] = lower[1:]
    return scipy.linalg.solve_banded((1, 1), ab, rhs, check_finite=False)


def band_scatter_numpy(ab, up, rows, cols, vals):
    np.add.at(ab, (up + rows - cols, cols), vals)


def band_matvec_numpy(ab, lo, up, x):
    n = x.shape[0]
    y = np.zeros(n)
    for k in range(-lo, up + 1):
        # ab[up - k, j] holds A[j - k, j]
        if k >= 0:
            y[:n - k] += ab[up - k, k:] * x[k:]
        else:
            y[-k:] += ab[up - k, :n + k] * x[:n + k]
    return y


# --------------------------------------------------------------------------
# dispatch
# --------------------------------------------------------------------------

# Callers pass contiguous 1-d float64 arrays (int64 for indices).
if USE_NUMBA:
    bernoulli_array = bernoulli_loop
    bernoulli_tilde_array = bernoulli_tilde_loop
    sg_coefficients = sg_coefficients_loop
    scatter_two_point = scatter_two_point_loop
    thomas = thomas_loop
    band_scatter = band_scatter_loop
else:
    bernoulli_array = bernoulli_numpy
    bernoulli_tilde_array = bernoulli_tilde_numpy
    sg_coefficients = sg_coefficients_numpy
    scatter_two_point = scatter_two_point_numpy
    thomas = thomas_numpy
    band_scatter = band_scatter_numpy

# measured faster than their loop versions at every size (benchmarks/bench_kernels.py)
effective_diffusion_array = effective_diffusion_numpy
band_matvec = band_matvec_numpy
