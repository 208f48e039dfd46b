"""Hermitian bundles ``E = L_{k_1} + ... + L_{k_r}`` over the grid torus.

Each summand is a twisted line bundle (see :mod:`donaldson_lab.grid`) with the
standard background metric ``H0`` and constant-curvature background connection
``D_bg``.  The holomorphic structure is ``dbar_E = dbar_bg + a`` with ``a`` an
End(E)-valued (0,1)-form, and the metric is ``H = H0 h``.

Array layout: an End-valued k-form has shape ``grid4 + (r, r, C_k)``; entry
``(i, j)`` is a section of ``L_{k_i - k_j}``, so every derivative carries the
twist matrix ``K_ij = k_i - k_j``.  Connection forms are full 1-forms with
components ``(dz1, dz2, dzbar1, dzbar2)``, measured relative to ``D_bg``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from . import forms
from .grid import (
    Grid, MetricField, N_COMPLEX, TWO_PI, band_limited_field, dbar, dee, dee_dbar, ncomp,
)

log = logging.getLogger(__name__)

COND_GUARD = 1e6
HOL = slice(0, N_COMPLEX)
ANTI = slice(N_COMPLEX, 2 * N_COMPLEX)


class BundleError(ValueError):
    pass


# ---------------------------------------------------------------------------
# End-valued form algebra
# ---------------------------------------------------------------------------

def twist_matrix(degrees) -> np.ndarray:
    k = np.asarray(degrees, dtype=float)
    return k[:, None] - k[None, :]


@lru_cache(maxsize=None)
def _wedge_sparse(ka: int, kb: int):
    """Nonzero structure of the wedge tensor: input index lists and signed scatter matrix."""
    T = forms.wedge_tensor(N_COMPLEX, ka, kb)
    o, ia, ib = np.nonzero(T)
    S = np.zeros((T.shape[0], len(o)))
    S[o, np.arange(len(o))] = T[o, ia, ib]
    return ia, ib, S


def end_wedge(a: np.ndarray, ka: int, b: np.ndarray, kb: int) -> np.ndarray:
    """Matrix product combined with wedge of the form parts."""
    ia, ib, S = _wedge_sparse(ka, kb)
    if len(ia) == 0:
        shape = np.broadcast_shapes(a.shape[:-1], b.shape[:-1]) + (S.shape[0],)
        return np.zeros(shape, dtype=complex)
    prod = np.matmul(np.moveaxis(a[..., ia], -1, -3), np.moveaxis(b[..., ib], -1, -3))
    return np.tensordot(prod, S, axes=([-3], [1]))


def graded_bracket(A: np.ndarray, phi: np.ndarray, k: int) -> np.ndarray:
    """``[A, phi] = A ^ phi - (-1)^k phi ^ A`` for an End-valued 1-form ``A``."""
    return end_wedge(A, 1, phi, k) - (-1) ** k * end_wedge(phi, k, A, 1)


@lru_cache(maxsize=None)
def _conj_index(k: int):
    P = forms._conj_perm(N_COMPLEX, k)
    idx = np.argmax(np.abs(P), axis=1)
    return idx, P[np.arange(P.shape[0]), idx]


def dagger(phi: np.ndarray, k: int) -> np.ndarray:
    """Pointwise adjoint: conjugate transpose on End, complex conjugation on forms."""
    idx, sign = _conj_index(k)
    return np.conj(np.swapaxes(phi, -2, -3))[..., idx] * sign


def mat_mul(x: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Left-multiply a form-valued End field by a 0-form End field."""
    return np.moveaxis(np.matmul(x[..., None, :, :], np.moveaxis(phi, -1, -3)), -3, -1)


def mul_mat(phi: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.moveaxis(np.matmul(np.moveaxis(phi, -1, -3), x[..., None, :, :]), -3, -1)


def d_bg(phi: np.ndarray, k: int, grid: Grid, K, part: str = "full") -> np.ndarray:
    """Background covariant exterior derivative of an End-valued form."""
    if part == "dee":
        return dee(phi, k, grid, K, extra_ndim=2)
    if part == "dbar":
        return dbar(phi, k, grid, K, extra_ndim=2)
    a, b = dee_dbar(phi, k, grid, K, extra_ndim=2)
    return a + b


def split_types(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(1,0) and (0,1) parts of an End-valued 1-form, as full 1-forms."""
    hol = np.zeros_like(A)
    anti = np.zeros_like(A)
    hol[..., HOL] = A[..., HOL]
    anti[..., ANTI] = A[..., ANTI]
    return hol, anti


def hermitian_eig(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = 0.5 * (x + np.conj(np.swapaxes(x, -1, -2)))
    return np.linalg.eigh(x)


def hermitian_function(x: np.ndarray, fn) -> np.ndarray:
    """Apply a scalar function to a Hermitian matrix field by eigen-decomposition."""
    lam, U = hermitian_eig(x)
    return (U * fn(lam)[..., None, :]) @ np.conj(np.swapaxes(U, -1, -2))


def sqrtm_pd(h: np.ndarray) -> np.ndarray:
    return hermitian_function(h, np.sqrt)


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConnectionField:
    """Connection ``D = D_bg + A`` with ``A`` an End-valued 1-form."""

    A: np.ndarray
    degrees: tuple
    unitary: bool = True
    integrable: bool = True

    @property
    def rank(self) -> int:
        return len(self.degrees)

    @property
    def K(self) -> np.ndarray:
        return twist_matrix(self.degrees)

    @property
    def hol(self) -> np.ndarray:
        return split_types(self.A)[0]

    @property
    def anti(self) -> np.ndarray:
        return split_types(self.A)[1]

    def unitarity_residual(self) -> float:
        """Max nodewise ``|A'' + (A')^dagger|``."""
        hol, anti = split_types(self.A)
        return float(np.max(np.abs(anti + dagger(hol, 1)), initial=0.0))


@dataclass(frozen=True)
class CurvatureField:
    F: np.ndarray
    LambdaF: np.ndarray

    def type_residual(self, m: MetricField) -> float:
        """``||F^{2,0}|| + ||F^{0,2}||`` in L^2."""
        bd = forms.basis(N_COMPLEX).bidegrees(2)
        out = 0.0
        for target in ((2, 0), (0, 2)):
            mask = np.array([tuple(b) == target for b in bd])
            part = np.where(mask, self.F, 0)
            out += m.l2_norm(part, 2, extra_ndim=2)
        return out


@dataclass(frozen=True)
class BundleState:
    """Holomorphic bundle ``(E, dbar_bg + a)`` with metric ``H0 h``.

    ``a`` is an End-valued 1-form whose (1,0) components vanish; ``h`` is a
    Hermitian positive definite End field.
    """

    degrees: tuple
    a: np.ndarray
    h: np.ndarray
    integrable: bool = True
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        r = len(self.degrees)
        if not 1 <= r <= 3:
            raise BundleError(f"rank must be 1..3, got {r}")
        if self.a.shape[-3:] != (r, r, ncomp(1)):
            raise BundleError(f"a must have trailing shape {(r, r, ncomp(1))}, got {self.a.shape[-3:]}")
        if self.h.shape[-2:] != (r, r):
            raise BundleError(f"h must have trailing shape {(r, r)}, got {self.h.shape[-2:]}")
        if np.any(self.a[..., HOL] != 0):
            raise BundleError("a must be a (0,1)-form")
        herm = np.max(np.abs(self.h - np.conj(np.swapaxes(self.h, -1, -2))))
        if herm > 1e-10 * (1 + np.max(np.abs(self.h))):
            raise BundleError(f"h is not self-adjoint (residual {herm:.2e})")

    @property
    def rank(self) -> int:
        return len(self.degrees)

    @property
    def K(self) -> np.ndarray:
        return twist_matrix(self.degrees)

    def with_h(self, h: np.ndarray) -> BundleState:
        return replace(self, h=h)

    def check_positive(self) -> None:
        lam = np.linalg.eigvalsh(0.5 * (self.h + np.conj(np.swapaxes(self.h, -1, -2))))
        if not np.all(np.isfinite(lam)) or np.min(lam) <= 0:
            raise BundleError(f"h is not positive definite (min eigenvalue {np.min(lam):.3e})")


# ---------------------------------------------------------------------------
# connections and curvature
# ---------------------------------------------------------------------------

def background_connection(b: BundleState) -> ConnectionField:
    """Chern connection ``D0`` of ``(dbar_bg + a, H0)``."""
    return ConnectionField(b.a - dagger(b.a, 1), tuple(b.degrees), True, b.integrable)


def chern_connection(b: BundleState, grid: Grid) -> ConnectionField:
    """Chern connection of ``(dbar_bg + a, H0 h)`` via ``D' = h^{-1} D0' h``.

    ``A' = h^{-1} (del_bg h - a^dagger h)``, obtained by a nodewise linear solve.
    Not H0-unitary unless ``h`` is constant scalar.
    """
    b.check_positive()
    K = b.K
    dh = dee(b.h[..., None], 0, grid, K, extra_ndim=2)
    rhs = dh - mul_mat(dagger(b.a, 1), b.h)
    shape = np.broadcast_shapes(rhs.shape[:-3], b.h.shape[:-2])
    rhs = np.broadcast_to(rhs, shape + rhs.shape[-3:])
    hb = np.broadcast_to(b.h, shape + b.h.shape[-2:])
    hol = np.linalg.solve(hb[..., None, :, :], np.moveaxis(rhs, -1, -3))
    hol = np.moveaxis(hol, -3, -1)
    hol[..., ANTI] = 0
    return ConnectionField(hol + np.broadcast_to(b.a, hol.shape), tuple(b.degrees), False, b.integrable)


def chern_connection_via_gauge(b: BundleState, grid: Grid) -> ConnectionField:
    """Same connection as :func:`chern_connection`, built as ``w^{-1} (w(D0)) w``."""
    w = sqrtm_pd(b.h)
    Dw = complex_gauge_apply(w, background_connection(b), grid)
    winv = np.linalg.inv(w)
    K = b.K
    A = mul_mat(mat_mul(winv, Dw.A), w) + mat_mul(winv, d_bg(w[..., None], 0, grid, K))
    return ConnectionField(A, tuple(b.degrees), False, b.integrable)


def unitary_frame(h: np.ndarray, frame: str = "cholesky") -> np.ndarray:
    """Frame change ``w`` with ``h = w^dagger w``.

    ``"cholesky"`` gives the upper-triangular factor; it is exactly
    equivariant under constant lower-triangular gauge changes.  ``"sqrt"``
    gives the Hermitian ``h^{1/2}``.
    """
    lam = np.linalg.eigvalsh(0.5 * (h + np.conj(np.swapaxes(h, -1, -2))))
    if not np.all(lam > 0):
        raise BundleError(f"h is not positive definite (min eigenvalue {np.min(lam):.3e})")
    cond = np.max(lam[..., -1] / lam[..., 0]) ** 0.5
    if cond > COND_GUARD:
        raise BundleError(f"frame of h too ill-conditioned (cond {cond:.3e} > {COND_GUARD:.0e})")
    if frame == "sqrt":
        return sqrtm_pd(h)
    if frame != "cholesky":
        raise BundleError(f"unknown frame {frame!r}")
    L = np.linalg.cholesky(0.5 * (h + np.conj(np.swapaxes(h, -1, -2))))
    return np.conj(np.swapaxes(L, -1, -2))


def unitary_frame_connection(b: BundleState, grid: Grid, frame: str = "cholesky") -> tuple[ConnectionField, np.ndarray]:
    """``(w(D0), w)`` with ``h = w^dagger w``; curvatures satisfy ``F_w = w F_H w^{-1}``."""
    w = unitary_frame(b.h, frame)
    return complex_gauge_apply(w, background_connection(b), grid, guard=None), w


def complex_gauge_apply(w: np.ndarray, D: ConnectionField, grid: Grid, guard: float | None = COND_GUARD) -> ConnectionField:
    """``w(D) = (w^*)^{-1} D' w^* + w D'' w^{-1}``."""
    cond = np.linalg.cond(w) if guard is not None else 0.0
    if guard is not None and (not np.all(np.isfinite(cond)) or np.max(cond) > guard):
        raise BundleError(f"gauge transformation too ill-conditioned (cond {np.max(cond):.3e} > {guard:.0e})")
    K = D.K
    winv = np.linalg.inv(w)
    ws = np.conj(np.swapaxes(w, -1, -2))
    hermitian = bool(np.array_equal(ws, w))
    wsinv = np.conj(np.swapaxes(winv, -1, -2))
    hol, anti = split_types(D.A)
    if hermitian:
        dw, dbw = dee_dbar(w[..., None], 0, grid, K, extra_ndim=2)
    else:
        dw = dee(ws[..., None], 0, grid, K, extra_ndim=2)
        dbw = dbar(w[..., None], 0, grid, K, extra_ndim=2)
    new_hol = mul_mat(mat_mul(wsinv, hol), ws) + mat_mul(wsinv, dw)
    new_anti = mul_mat(mat_mul(w, anti), winv) - mul_mat(dbw, winv)
    new_hol, new_anti = np.broadcast_arrays(new_hol, new_anti)
    A = np.where(np.arange(ncomp(1)) < N_COMPLEX, new_hol, new_anti)
    return ConnectionField(A, D.degrees, D.unitary, D.integrable)


def background_curvature(degrees, shape_prefix=(1, 1, 1, 1)) -> np.ndarray:
    """Constant End-valued 2-form ``diag(pi k_i) dz1 ^ dzbar1``."""
    r = len(degrees)
    F = np.zeros(tuple(shape_prefix) + (r, r, ncomp(2)), dtype=complex)
    deg, idx, sign = forms.basis(N_COMPLEX).locate((1,), (1,))
    for i, k in enumerate(degrees):
        F[..., i, i, idx] = sign * np.pi * k
    return F


def curvature(D: ConnectionField, grid: Grid, m: MetricField | None = None) -> CurvatureField:
    """``F = F_bg + D_bg A + A ^ A`` and, given a metric, ``Lambda F``."""
    A = D.A
    F = background_curvature(D.degrees) + d_bg(A, 1, grid, D.K) + end_wedge(A, 1, A, 1)
    lam = m.Lambda(F, 2, extra_ndim=2)[..., 0] if m is not None else None
    return CurvatureField(F, lam)


def covariant_d(D: ConnectionField, phi: np.ndarray, k: int, grid: Grid, part: str = "full") -> np.ndarray:
    """``D phi`` (or its ``D'``/``D''`` part) for an End-valued k-form."""
    if phi.shape[-1] != ncomp(k) or phi.ndim < 7:
        raise BundleError("phi must be an End-valued form field")
    hol, anti = split_types(D.A)
    A = {"full": D.A, "dee": hol, "dbar": anti}[part]
    return d_bg(phi, k, grid, D.K, part) + graded_bracket(A, phi, k)


def integrability_residual(b: BundleState, grid: Grid, m: MetricField) -> float:
    """``||dbar_bg a + a ^ a||_{L^2}``."""
    res = dbar(b.a, 1, grid, b.K, extra_ndim=2) + end_wedge(b.a, 1, b.a, 1)
    return m.l2_norm(res, 2, extra_ndim=2)


def connection_integrability_residual(D: ConnectionField, grid: Grid, m: MetricField) -> float:
    """L^2 norm of ``(D'')^2``."""
    anti = D.anti
    return m.l2_norm(dbar(anti, 1, grid, D.K, extra_ndim=2) + end_wedge(anti, 1, anti, 1), 2, extra_ndim=2)


def bianchi_residual(D: ConnectionField, F: np.ndarray, grid: Grid, m: MetricField) -> float:
    return m.l2_norm(covariant_d(D, F, 2, grid), 3, extra_ndim=2)


def lambda_times_form(x: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """End 0-form times scalar form field."""
    return x[..., None] * alpha[..., None, None, :]


def curvature_relation_residual(D: ConnectionField, grid: Grid, m: MetricField) -> float:
    """L^2 norm of ``D^* F - i D' Lambda F + i D'' Lambda F - Lambda F (d^* omega)``.

    ``D^* = -* D *``; the identity holds for unitary integrable ``D`` over
    any Hermitian surface.
    """
    cf = curvature(D, grid, m)
    lamF = cf.LambdaF[..., None]
    starF = m.hodge(cf.F, 2, extra_ndim=2)
    dstarF = -m.hodge(covariant_d(D, starF, 2, grid), 3, extra_ndim=2)
    res = (dstarF - 1j * covariant_d(D, lamF, 0, grid, "dee") + 1j * covariant_d(D, lamF, 0, grid, "dbar")
           - lambda_times_form(cf.LambdaF, m.dstar_omega()))
    return m.l2_norm(res, 1, extra_ndim=2)


# ---------------------------------------------------------------------------
# degree and slope
# ---------------------------------------------------------------------------

def degree_from_curvature(F: np.ndarray, m: MetricField) -> float:
    """``int (i / 2 pi) tr F ^ omega``."""
    trF = np.trace(F, axis1=-3, axis2=-2)
    top = forms.wedge_tensor(N_COMPLEX, 2, 2)
    integrand = np.einsum("oab,...a,...b->...o", top, trF, m.omega)
    val = (1j / TWO_PI) * m.integrate_top(integrand)
    return float(val.real)


def degree(b: BundleState, grid: Grid, m: MetricField) -> float:
    D = chern_connection(b, grid)
    return degree_from_curvature(curvature(D, grid).F, m)


def slope(b: BundleState, grid: Grid, m: MetricField) -> float:
    m.require_normalized()
    return degree(b, grid, m) / b.rank


def degree_unit(m: MetricField) -> float:
    """Degree of ``L_1``; all twisted bundle degrees are integer multiples of it."""
    m.require_normalized()
    return degree_from_curvature(background_curvature((1,)), m)


def summand_slopes(degrees, m: MetricField) -> np.ndarray:
    return degree_unit(m) * np.asarray(degrees, dtype=float)


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

def _grid_shape(grid: Grid, axes) -> tuple:
    return tuple(grid.shape[a] if a in axes else 1 for a in range(4))


def theta_section(grid: Grid, K: int, rho: int = 0) -> np.ndarray:
    """Holomorphic section of ``L_K`` (K > 0) depending on ``(x1, y1)``.

    ``s = sum_m c_m exp(-pi K x1^2 + 2 pi m x1 + 2 pi i m y1)`` over
    ``m = rho mod K`` with ``c_m = c_{m-K} exp(pi K - 2 pi m)``, i.e.
    ``c_m = exp(-pi m^2 / K)``, so each term is a Gaussian centred at ``m / K``.
    Normalised to unit sup norm.
    """
    if K <= 0:
        raise BundleError("theta sections exist only for positive twist")
    if not 0 <= rho < K:
        raise BundleError(f"rho must lie in 0..{K - 1}")
    x1 = grid.coord(0)
    y1 = grid.coord(1)
    out = np.zeros(np.broadcast_shapes(x1.shape, y1.shape), dtype=complex)
    for j in range(-8, 9 + 1):
        m = rho + j * K
        out = out + np.exp(-np.pi * K * (x1 - m / K) ** 2) * np.exp(1j * TWO_PI * m * y1)
    return out / np.max(np.abs(out))


def twisted_random_section(grid: Grid, K: float, rng, width: float = 0.3, band: int = 2,
                           axes=(0, 1), images: int = 6) -> np.ndarray:
    """Smooth random section of ``L_K``.

    For ``K = 0`` this is a random trigonometric polynomial of the given band.
    Otherwise ``s = sum_j exp(2 pi i K j y1) f(x1 - j, .)`` sums magnetic
    translates of ``f``, Gaussian in x1 and a random trigonometric polynomial
    in the remaining coordinates of ``axes``.
    """
    if K == 0:
        return band_limited_field(grid, rng, band, axes=axes)
    shape = _grid_shape(grid, axes)
    other = tuple(a for a in axes if a != 0)
    prof = band_limited_field(grid, rng, band, axes=other) if other else np.ones((1, 1, 1, 1))
    x0 = rng.uniform(0, 1)
    x1 = grid.coord(0)
    y1 = grid.coord(1)
    out = np.zeros(shape, dtype=complex)
    for j in range(-images, images + 1):
        bump = np.exp(-((x1 - j - x0) ** 2) / (2 * width ** 2))
        out = out + np.exp(1j * TWO_PI * K * j * y1) * bump * prof
    return out


def random_hermitian_twisted(grid: Grid, degrees, rng, amplitude: float = 0.3, axes=(0, 1), **kw) -> np.ndarray:
    """Random Hermitian End field respecting the twist structure."""
    r = len(degrees)
    K = twist_matrix(degrees)
    shape = _grid_shape(grid, axes)
    X = np.zeros(shape + (r, r), dtype=complex)
    for i in range(r):
        for j in range(i, r):
            s = twisted_random_section(grid, K[i, j], rng, axes=axes, **kw)
            s = s / np.max(np.abs(s))
            if i == j:
                s = s.real
            X[..., i, j] = amplitude * s
            X[..., j, i] = amplitude * np.conj(s)
    return X


def random_metric(grid: Grid, degrees, rng, amplitude: float = 0.3, axes=(0, 1), **kw) -> np.ndarray:
    """Random ``h = exp(X)`` with ``X`` twisted Hermitian."""
    return hermitian_function(random_hermitian_twisted(grid, degrees, rng, amplitude, axes, **kw), np.exp)


def random_gauge(grid: Grid, degrees, rng, amplitude: float = 0.3, axes=(0, 1), **kw) -> np.ndarray:
    """Random invertible twisted End field ``exp(X + iY)``-like: ``I + amplitude * Z``."""
    r = len(degrees)
    K = twist_matrix(degrees)
    shape = _grid_shape(grid, axes)
    Z = np.zeros(shape + (r, r), dtype=complex)
    for i in range(r):
        for j in range(r):
            s = twisted_random_section(grid, K[i, j], rng, axes=axes, **kw)
            Z[..., i, j] = s / np.max(np.abs(s))
    return np.eye(r) + amplitude * Z


def split_bundle(grid: Grid, degrees, h: np.ndarray | None = None) -> BundleState:
    r = len(degrees)
    a = np.zeros((1, 1, 1, 1, r, r, ncomp(1)), dtype=complex)
    h = np.eye(r, dtype=complex).reshape(1, 1, 1, 1, r, r) if h is None else h
    return BundleState(tuple(degrees), a, h, True, {"recipe": "split"})


def extension_bundle(grid: Grid, d: int, strength: float, rho: int = 0) -> BundleState:
    """Extension ``0 -> L_d -> E -> L_{-d} -> 0`` with class ``strength * s dzbar2``.

    ``s`` is a theta section of ``L_{2d}``.  The class is nonzero in
    ``H^{0,1}(L_{2d})`` because ``dzbar2`` is harmonic on the second factor.
    """
    if d <= 0:
        raise BundleError("extension needs d > 0")
    s = theta_section(grid, 2 * d, rho)
    a = np.zeros(s.shape + (2, 2, ncomp(1)), dtype=complex)
    _, idx, sign = forms.basis(N_COMPLEX).locate((), (2,))
    a[..., 0, 1, idx] = sign * strength * s
    h = np.eye(2, dtype=complex).reshape(1, 1, 1, 1, 2, 2)
    return BundleState((d, -d), a, h, True, {"recipe": "extension", "strength": strength})


def gauge_integrable_bundle(grid: Grid, degrees, w: np.ndarray, h: np.ndarray | None = None) -> BundleState:
    """``dbar_E = w dbar_bg w^{-1}``: integrable by construction."""
    r = len(degrees)
    K = twist_matrix(degrees)
    a = -mul_mat(dbar(w[..., None], 0, grid, K, extra_ndim=2), np.linalg.inv(w))
    h = np.eye(r, dtype=complex).reshape(1, 1, 1, 1, r, r) if h is None else h
    return BundleState(tuple(degrees), a, h, True, {"recipe": "gauge"})
