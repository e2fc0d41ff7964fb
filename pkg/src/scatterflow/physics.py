"""2D TM_z scattering on a pixel grid.

Pulse-basis, point-matching method of moments under the exp(+i w t) time
convention: outgoing waves use H0^(2) and plane waves are exp(-i k.r).
The domain operator G_d is translation invariant, so it is stored as its
(2n-1) x (2n-1) table of offsets and applied with zero-padded FFTs; a dense
copy is assembled only for the direct solver (n <= 32).

Shapes used throughout:

* contrast ``chi``: (n, n) real, ``chi = eps_r - 1 >= 0``
* domain fields: (n*n, n_inc) complex, row-major cell order
* scattered fields ``y``: (n_rec, n_inc) complex
"""
from __future__ import annotations

import dataclasses
import functools
import logging
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.fft
import scipy.linalg
import scipy.sparse.linalg as spla
from scipy import special

logger = logging.getLogger(__name__)

C0 = 299_792_458.0
DENSE_MAX_N = 32
NEAR_OFFSETS = 2
_QUAD_ORDER = 16


class ResolutionError(ValueError):
    """Grid too coarse for the working wavelength."""


class SolverError(RuntimeError):
    """A total-field solve failed (no convergence or singular system)."""

    def __init__(self, message, residual=float("nan")):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class SensingConfig:
    n: int = 32
    d_len: float = 0.2
    freq: float = 3e9
    n_inc: int = 12
    n_rec: int = 12
    radius: float = 0.2
    snr_db: float | None = 30.0

    def __post_init__(self):
        if self.n < 4:
            raise ValueError(f"n must be >= 4, got {self.n}")
        if not self.d_len > 0:
            raise ValueError("d_len must be positive")
        if self.n_inc < 1 or self.n_rec < 1:
            raise ValueError("need at least one incidence and one receiver")
        if not self.freq > 0:
            raise ValueError("freq must be positive")
        if not self.radius > self.d_len * math.sqrt(2) / 2:
            raise ValueError(
                f"receiver radius {self.radius} m lies inside the domain "
                f"(needs > {self.d_len * math.sqrt(2) / 2:.4f} m)"
            )

    @property
    def k0(self) -> float:
        return 2 * math.pi * self.freq / C0

    @property
    def wavelength(self) -> float:
        return C0 / self.freq

    @property
    def cell(self) -> float:
        return self.d_len / self.n

    def cell_centers(self):
        """(x, y) coordinates of cell centers, each (n, n); row index runs along y."""
        c = -self.d_len / 2 + (np.arange(self.n) + 0.5) * self.cell
        y, x = np.meshgrid(c, c, indexing="ij")
        return x, y

    def receiver_positions(self):
        phi = 2 * np.pi * np.arange(self.n_rec) / self.n_rec
        return self.radius * np.cos(phi), self.radius * np.sin(phi)

    def incidence_angles(self):
        return 2 * np.pi * np.arange(self.n_inc) / self.n_inc

    def to_dict(self):
        return dataclasses.asdict(self)


def _circle_far(k, a, rho):
    # field of a uniform unit current on a disc of radius a, observed at rho > a
    return -0.5j * np.pi * k * a * special.j1(k * a) * special.hankel2(0, k * rho)


def _circle_self(k, a):
    return -0.5j * (np.pi * k * a * special.hankel2(1, k * a) - 2j)


def _square_cell(k, h, dx, dy):
    """Gauss-Legendre integral of k^2 (-i/4) H0^(2) over a square cell of side h
    centered at offset (dx, dy) from the observation point."""
    t, w = np.polynomial.legendre.leggauss(_QUAD_ORDER)
    u, v = np.meshgrid(t * h / 2, t * h / 2, indexing="ij")
    wt = np.outer(w, w) * (h / 2) ** 2
    r = np.hypot(u + dx, v + dy)
    return np.sum(wt * (-0.25j) * k * k * special.hankel2(0, k * r))


@dataclass(frozen=True, eq=False)
class GreenOperators:
    """Discretized Green's operators for one sensing configuration.

    ``kernel[p + n - 1, q + n - 1]`` is the coupling between cells offset by
    (p, q) in (row, col). ``g_s[m, j]`` couples cell ``j`` to receiver ``m``.
    Immutable after construction; safe to share between threads.
    """

    n: int
    kernel: np.ndarray
    g_s: np.ndarray
    cell_radius: float

    @cached_property
    def _kernel_fft(self):
        shape = (3 * self.n - 2, 3 * self.n - 2)
        return scipy.fft.fft2(self.kernel, s=shape)

    @cached_property
    def dense_gd(self) -> np.ndarray:
        n = self.n
        if n > DENSE_MAX_N:
            raise ValueError(f"dense G_d only assembled for n <= {DENSE_MAX_N}")
        i, j = np.divmod(np.arange(n * n), n)
        di = i[:, None] - i[None, :] + n - 1
        dj = j[:, None] - j[None, :] + n - 1
        return self.kernel[di, dj]

    def apply_gd(self, v: np.ndarray) -> np.ndarray:
        """G_d @ v for v of shape (n*n,) or (n*n, k)."""
        n = self.n
        flat = v.ndim == 1
        cols = v.reshape(n, n, -1)
        shape = (3 * n - 2, 3 * n - 2)
        vf = scipy.fft.fft2(cols, s=shape, axes=(0, 1))
        full = scipy.fft.ifft2(vf * self._kernel_fft[:, :, None], axes=(0, 1))
        out = full[n - 1: 2 * n - 1, n - 1: 2 * n - 1].reshape(n * n, -1)
        return out[:, 0] if flat else out

    def apply_gd_adjoint(self, v: np.ndarray) -> np.ndarray:
        # G_d is complex symmetric, so G_d^H v = conj(G_d conj(v))
        return np.conj(self.apply_gd(np.conj(v)))


def build_greens(config: SensingConfig) -> GreenOperators:
    """Assemble the BTTB kernel of G_d and the dense receiver operator G_s.

    Offsets within Chebyshev distance 2 are integrated over the square cell
    with a 16x16 Gauss-Legendre rule; farther offsets and the self term use
    the equivalent-circle closed forms.
    """
    n, h, k = config.n, config.cell, config.k0
    if h >= config.wavelength / 2:
        raise ResolutionError(
            f"cell size {h:.4g} m is not below half a wavelength "
            f"({config.wavelength / 2:.4g} m); increase n"
        )
    a = h / math.sqrt(math.pi)
    p = np.arange(-(n - 1), n)
    pp, qq = np.meshgrid(p, p, indexing="ij")
    rho = h * np.hypot(pp, qq)
    kernel = np.empty(pp.shape, dtype=complex)
    off = rho > 0
    kernel[off] = _circle_far(k, a, rho[off])
    kernel[n - 1, n - 1] = _circle_self(k, a)
    m = min(NEAR_OFFSETS, n - 1)
    for dp in range(0, m + 1):
        for dq in range(dp, m + 1):
            if dp == 0 and dq == 0:
                continue
            val = _square_cell(k, h, dq * h, dp * h)
            for sp in (dp, -dp):
                for sq in (dq, -dq):
                    kernel[sp + n - 1, sq + n - 1] = val
                    kernel[sq + n - 1, sp + n - 1] = val

    x, y = config.cell_centers()
    rx, ry = config.receiver_positions()
    dist = np.hypot(rx[:, None] - x.ravel()[None, :], ry[:, None] - y.ravel()[None, :])
    g_s = _circle_far(k, a, dist)
    return GreenOperators(n=n, kernel=kernel, g_s=g_s, cell_radius=a)


@functools.lru_cache(maxsize=8)
def cached_greens(config: SensingConfig) -> GreenOperators:
    return build_greens(config)


def incident_fields(config: SensingConfig) -> np.ndarray:
    """Unit-amplitude plane waves exp(-i k0 khat_t . r), shape (n*n, n_inc)."""
    x, y = config.cell_centers()
    phi = config.incidence_angles()
    phase = np.outer(x.ravel(), np.cos(phi)) + np.outer(y.ravel(), np.sin(phi))
    return np.exp(-1j * config.k0 * phase)


@functools.lru_cache(maxsize=8)
def _cached_incident(config):
    return incident_fields(config)


def as_contrast(chi, n=None, allow_negative=False) -> np.ndarray:
    chi = np.asarray(chi, dtype=float)
    if chi.ndim != 2 or chi.shape[0] != chi.shape[1]:
        raise ValueError(f"contrast must be a square 2D grid, got shape {chi.shape}")
    if n is not None and chi.shape[0] != n:
        raise ValueError(f"contrast grid is {chi.shape[0]}x{chi.shape[0]}, expected {n}x{n}")
    if not np.all(np.isfinite(chi)):
        raise ValueError("contrast contains non-finite values")
    if not allow_negative and np.any(chi < 0):
        raise ValueError("contrast must be non-negative (eps_r >= 1)")
    return chi


class TotalFieldSolver:
    """Factorized state operator (I - G_d X) for one contrast.

    ``solve`` gives E^t for given incident columns; ``solve_adjoint`` solves
    with (I - G_d X)^H, which the misfit gradient needs.
    """

    def __init__(self, greens: GreenOperators, chi, method="auto", tol=1e-8, maxiter=2000,
                 allow_negative=False):
        n = greens.n
        self.greens = greens
        self.x = as_contrast(chi, n, allow_negative).ravel()
        if method == "auto":
            method = "direct" if n <= DENSE_MAX_N else "iterative"
        if method not in ("direct", "iterative"):
            raise ValueError(f"unknown solve method {method!r}")
        if method == "direct" and n > DENSE_MAX_N:
            raise ValueError(f"direct solve only offered for n <= {DENSE_MAX_N}")
        self.method = method
        self.tol = tol
        self.maxiter = maxiter
        self._lu = None
        if method == "direct" and np.any(self.x):
            mat = -greens.dense_gd * self.x[None, :]
            mat[np.diag_indices_from(mat)] += 1.0
            with np.errstate(all="ignore"):
                lu, piv = scipy.linalg.lu_factor(mat, check_finite=False)
            d = np.abs(np.diag(lu))
            if not np.all(np.isfinite(lu)) or d.min() <= 1e-14 * d.max():
                raise SolverError("state operator (I - G_d X) is singular")
            self._lu = (lu, piv)

    def _iterate(self, matvec, rhs):
        nn = rhs.shape[0]
        op = spla.LinearOperator((nn, nn), matvec=matvec, dtype=complex)
        out = np.empty_like(rhs)
        for t in range(rhs.shape[1]):
            b = rhs[:, t]
            sol, info = spla.bicgstab(op, b, x0=b.copy(), rtol=self.tol, atol=0.0, maxiter=self.maxiter)
            res = np.linalg.norm(matvec(sol) - b) / max(np.linalg.norm(b), 1e-300)
            if info != 0 and res > self.tol:
                raise SolverError(
                    f"BiCGStab did not converge for incidence {t} "
                    f"(relative residual {res:.3e} after {self.maxiter} iterations)",
                    residual=res,
                )
            out[:, t] = sol
        return out

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        if not np.any(self.x):
            return rhs.copy()
        if self.method == "direct":
            return scipy.linalg.lu_solve(self._lu, rhs, check_finite=False)
        x = self.x
        return self._iterate(lambda v: v - self.greens.apply_gd(x * v), rhs)

    def solve_adjoint(self, rhs: np.ndarray) -> np.ndarray:
        if not np.any(self.x):
            return rhs.copy()
        if self.method == "direct":
            return scipy.linalg.lu_solve(self._lu, rhs, trans=2, check_finite=False)
        x = self.x
        return self._iterate(lambda v: v - x * self.greens.apply_gd_adjoint(v), rhs)


def solve_total_field(greens, chi, e_inc, method="auto", tol=1e-8, maxiter=2000):
    """Solve the state equation E^t = E^i + G_d X E^t for every incidence."""
    return TotalFieldSolver(greens, chi, method, tol, maxiter).solve(e_inc)


def forward(chi, config: SensingConfig, method="auto", greens=None, allow_negative=False) -> np.ndarray:
    """Nonlinear forward operator A(chi) = G_s X (I - G_d X)^-1 E^i."""
    greens = greens or cached_greens(config)
    e_inc = _cached_incident(config)
    chi = as_contrast(chi, config.n, allow_negative)
    e_tot = TotalFieldSolver(greens, chi, method, allow_negative=allow_negative).solve(e_inc)
    return greens.g_s @ (chi.ravel()[:, None] * e_tot)


def add_noise(fields, snr_db, seed) -> np.ndarray:
    """Complex white Gaussian noise with expected power ||E^s||^2 10^(-snr/10)."""
    fields = np.asarray(fields, dtype=complex)
    if snr_db is None or np.isinf(snr_db):
        return fields.copy()
    if not np.isfinite(snr_db):
        raise ValueError("snr_db must be finite or +inf")
    rng = np.random.default_rng(seed)
    power = np.sum(np.abs(fields) ** 2) * 10 ** (-snr_db / 10)
    sigma = math.sqrt(power / fields.size / 2)
    noise = sigma * (rng.standard_normal(fields.shape) + 1j * rng.standard_normal(fields.shape))
    return fields + noise


def misfit_gradient(chi, y, config: SensingConfig, method="auto", greens=None, allow_negative=False):
    """Data misfit 0.5 ||y - A(chi)||^2 and its gradient w.r.t. chi (adjoint state).

    One forward and one adjoint solve per incidence; returns ``(loss, grad)``
    with ``grad`` shaped like ``chi``. ``allow_negative`` lets optimizers
    evaluate the model slightly outside the physical range (eps_r < 1).
    """
    greens = greens or cached_greens(config)
    e_inc = _cached_incident(config)
    chi = as_contrast(chi, config.n, allow_negative)
    x = chi.ravel()
    solver = TotalFieldSolver(greens, chi, method, allow_negative=allow_negative)
    e_tot = solver.solve(e_inc)
    r = greens.g_s @ (x[:, None] * e_tot) - y
    loss = 0.5 * float(np.sum(np.abs(r) ** 2))
    gs_r = greens.g_s.conj().T @ r
    w = solver.solve_adjoint(x[:, None] * gs_r)
    if greens.n <= DENSE_MAX_N:
        mh_r = gs_r + greens.dense_gd.conj().T @ w
    else:
        mh_r = gs_r + greens.apply_gd_adjoint(w)
    grad = np.real(np.sum(np.conj(e_tot) * mh_r, axis=1))
    return loss, grad.reshape(chi.shape)


def back_projection(y, config: SensingConfig, greens=None) -> np.ndarray:
    """Back-propagation estimate of the contrast (clamped to >= 0)."""
    greens = greens or cached_greens(config)
    e_inc = _cached_incident(config)
    y = np.asarray(y, dtype=complex)
    n = config.n
    if not np.any(y):
        return np.zeros((n, n))
    gh_y = greens.g_s.conj().T @ y
    v = greens.g_s @ gh_y
    num = np.sum(np.conj(v) * y, axis=0)
    den = np.sum(np.abs(v) ** 2, axis=0)
    gamma = np.where(den > 0, num / np.where(den > 0, den, 1), 0)
    cur = gh_y * gamma[None, :]
    e_est = e_inc + greens.apply_gd(cur)
    num = np.sum(cur * np.conj(e_est), axis=1)
    den = np.sum(np.abs(e_est) ** 2, axis=1)
    chi = np.real(num) / np.maximum(den, 1e-300)
    return np.maximum(chi, 0.0).reshape(n, n)


def born_matrix(config: SensingConfig, greens=None) -> np.ndarray:
    """Stacked linearized operator, shape (n_inc*n_rec, n*n); block t is G_s diag(E^i_t)."""
    greens = greens or cached_greens(config)
    e_inc = _cached_incident(config)
    return np.concatenate([greens.g_s * e_inc[:, t][None, :] for t in range(config.n_inc)])


def born_inversion(y, config: SensingConfig, tik: float, greens=None) -> np.ndarray:
    """Tikhonov-regularized Born inversion with a real contrast, clamped to >= 0."""
    if tik < 0:
        raise ValueError("tik must be >= 0")
    b = born_matrix(config, greens)
    rhs = np.real(b.conj().T @ np.asarray(y, dtype=complex).T.ravel())
    normal = np.real(b.conj().T @ b)
    if tik == 0:
        rank = np.linalg.matrix_rank(normal)
        if rank < normal.shape[0]:
            raise np.linalg.LinAlgError(
                f"Born normal equations are rank deficient ({rank} < {normal.shape[0]}); use tik > 0"
            )
    normal[np.diag_indices_from(normal)] += tik
    chi = scipy.linalg.solve(normal, rhs, assume_a="sym")
    return np.maximum(chi, 0.0).reshape(config.n, config.n)


def cylinder(config: SensingConfig, eps_r, diameter, center=(0.0, 0.0), supersample=8):
    """Homogeneous circular cylinder; edge cells get their covered area fraction."""
    h = config.cell
    x, y = config.cell_centers()
    off = (np.arange(supersample) + 0.5) / supersample - 0.5
    ox, oy = np.meshgrid(off * h, off * h)
    px = x[:, :, None, None] + ox
    py = y[:, :, None, None] + oy
    inside = (px - center[0]) ** 2 + (py - center[1]) ** 2 <= (diameter / 2) ** 2
    return (eps_r - 1.0) * inside.mean(axis=(2, 3))
