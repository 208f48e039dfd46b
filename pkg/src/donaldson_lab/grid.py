"""Pseudo-spectral Dolbeault calculus on the complex 2-torus C^2 / (Z^2 + iZ^2).

Real coordinates are ``(x1, y1, x2, y2)`` on ``[0, 1)^4`` with
``z_k = x_k + i y_k``.  Field arrays carry four leading grid axes which may
have length 1 when the field is constant along that direction; numpy
broadcasting does the rest.  After the grid axes come optional "extra" axes
(matrix indices for endomorphism fields) and, last, the form-component axis
over the degree-k basis of :mod:`donaldson_lab.forms` with n = 2.

Sections of the degree-K line bundle ``L_K`` obey
``s(x1 + 1, y1) = exp(2 pi i K y1) s(x1, y1)`` and are periodic in the other
directions.  Their x1-derivative is taken spectrally after removing the Bloch
phase ``exp(2 pi i K y1 x1)`` line by line, and the background connection
``-2 pi i K x1 dy1`` is added to the y1-derivative.  Its curvature is the
constant ``-2 pi i K dx1 ^ dy1 = pi K dz1 ^ dzbar1``.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np

from . import forms

log = logging.getLogger(__name__)

N_COMPLEX = 2
TOP = 2 * N_COMPLEX
#: ``dz1 ^ dz2 ^ dzbar1 ^ dzbar2 = TOP_TO_REAL * dx1 ^ dy1 ^ dx2 ^ dy2``
TOP_TO_REAL = 4.0
TWO_PI = 2.0 * np.pi


class GridError(ValueError):
    pass


class MetricError(ValueError):
    pass


def ncomp(k: int) -> int:
    return forms.basis(N_COMPLEX).sizes[k]


@dataclass(frozen=True)
class Grid:
    """Uniform periodic sampling of the fundamental domain ``[0, 1)^4``."""

    shape: tuple[int, int, int, int]

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        if len(shape) != 4:
            raise GridError("grid needs four resolutions (x1, y1, x2, y2)")
        for s in shape:
            if s < 8 or s % 2:
                raise GridError(f"each resolution must be even and >= 8, got {shape}")
        object.__setattr__(self, "shape", shape)

    @classmethod
    def uniform(cls, n: int) -> Grid:
        return cls((n, n, n, n))

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(1.0 / s for s in self.shape)

    @property
    def h_min(self) -> float:
        return min(self.spacing)

    def coord(self, axis: int) -> np.ndarray:
        """Coordinate along ``axis`` shaped to broadcast against grid fields."""
        n = self.shape[axis]
        shp = [1, 1, 1, 1]
        shp[axis] = n
        return (np.arange(n) / n).reshape(shp)

    def wavenumbers(self, axis: int) -> np.ndarray:
        n = self.shape[axis]
        k = TWO_PI * np.fft.fftfreq(n, d=1.0 / n)
        k[n // 2] = 0.0  # odd derivatives drop the Nyquist mode
        return k

    def full(self, data: np.ndarray, axes=(0, 1, 2, 3)) -> np.ndarray:
        """Broadcast the given grid axes of ``data`` to full resolution."""
        shape = list(data.shape)
        for ax in axes:
            shape[ax] = self.shape[ax]
        return np.broadcast_to(data, tuple(shape))


# ---------------------------------------------------------------------------
# spectral derivatives
# ---------------------------------------------------------------------------

def _fft_deriv(data: np.ndarray, grid: Grid, axis: int) -> np.ndarray:
    n = data.shape[axis]
    if n == 1:
        return np.zeros_like(data, dtype=complex)
    if n != grid.shape[axis]:
        raise GridError(f"axis {axis} has length {n}, grid expects {grid.shape[axis]}")
    k = grid.wavenumbers(axis)
    shp = [1] * data.ndim
    shp[axis] = n
    fh = np.fft.fft(data, axis=axis)
    fh *= 1j * k.reshape(shp)
    return np.fft.ifft(fh, axis=axis)


@lru_cache(maxsize=64)
def _bloch_tables(shape: tuple, twist_key: tuple, twist_shape: tuple, pad: int):
    """Bloch angle ``2 pi K y1``, phase ``exp(i theta x1)`` and ``2 pi K x1`` for a twist pattern."""
    n1, n2 = shape[0], shape[1]
    K = np.asarray(twist_key, dtype=float).reshape((1, 1, 1, 1) + twist_shape + (1,) * pad)
    tail = (1,) * (len(twist_shape) + pad)
    x1 = (np.arange(n1) / n1).reshape((n1, 1, 1, 1) + tail)
    y1 = (np.arange(n2) / n2).reshape((1, n2, 1, 1) + tail)
    theta = TWO_PI * K * y1
    return theta, np.exp(1j * theta * x1), TWO_PI * K * x1


def partial(data: np.ndarray, grid: Grid, axis: int, twist=None, extra_ndim: int = 0) -> np.ndarray:
    """Covariant real derivative along ``axis`` (0: x1, 1: y1, 2: x2, 3: y2).

    ``twist`` gives the line-bundle degree of each entry of the extra axes;
    ``extra_ndim`` is the number of extra axes (any remaining trailing axes,
    such as the form-component axis, are untwisted).
    """
    if twist is None or axis > 1 or not np.any(np.asarray(twist)):
        return _fft_deriv(data, grid, axis)
    tw = np.asarray(twist, dtype=float)
    trailing = data.ndim - 4 - extra_ndim
    theta, phase, kx = _bloch_tables(grid.shape, tuple(tw.ravel()), tw.shape, trailing)
    data = grid.full(data, (0, 1))
    if axis == 0:
        return phase * _fft_deriv(data * np.conj(phase), grid, 0) + 1j * theta * data
    return _fft_deriv(data, grid, 1) - 1j * kx * data


def d_z(data, grid, j, twist=None, extra_ndim=0):
    """Holomorphic derivative ``d/dz_j`` (j = 0, 1)."""
    return 0.5 * (partial(data, grid, 2 * j, twist, extra_ndim) - 1j * partial(data, grid, 2 * j + 1, twist, extra_ndim))


def d_zbar(data, grid, j, twist=None, extra_ndim=0):
    return 0.5 * (partial(data, grid, 2 * j, twist, extra_ndim) + 1j * partial(data, grid, 2 * j + 1, twist, extra_ndim))


def _exterior_parts(data: np.ndarray, k: int, grid: Grid, twist, extra_ndim: int, want=("dee", "dbar")):
    """``del`` and ``dbar`` of a degree-k field sharing the real partial derivatives."""
    if data.shape[-1] != ncomp(k):
        raise GridError(f"degree-{k} field must have {ncomp(k)} components, got {data.shape[-1]}")
    T = forms.wedge_tensor(N_COMPLEX, 1, k)
    twisted = twist is not None and bool(np.any(np.asarray(twist)))
    cache = {}

    def real(axis):
        if axis not in cache:
            trivial = data.shape[axis] == 1 and not (twisted and axis in (0, 1))
            cache[axis] = None if trivial else partial(data, grid, axis, twist, extra_ndim)
        return cache[axis]

    out = {}
    for which in want:
        acc = None
        for j in range(N_COMPLEX):
            px, py = real(2 * j), real(2 * j + 1)
            if px is None and py is None:
                continue
            sgn = -1j if which == "dee" else 1j
            if px is None:
                deriv = 0.5 * sgn * py
            elif py is None:
                deriv = 0.5 * px
            else:
                deriv = 0.5 * (px + sgn * py)
            c = j if which == "dee" else N_COMPLEX + j
            term = np.tensordot(deriv, T[:, c, :], axes=([-1], [1]))
            acc = term if acc is None else acc + term
        if acc is None:
            acc = np.zeros(data.shape[:-1] + (ncomp(k + 1),), dtype=complex)
        out[which] = acc
    return out


def dee(data: np.ndarray, k: int, grid: Grid, twist=None, extra_ndim: int = 0) -> np.ndarray:
    """``del`` of a degree-k field (component axis last)."""
    return _exterior_parts(data, k, grid, twist, extra_ndim, ("dee",))["dee"]


def dbar(data: np.ndarray, k: int, grid: Grid, twist=None, extra_ndim: int = 0) -> np.ndarray:
    """``delbar`` of a degree-k field (component axis last)."""
    return _exterior_parts(data, k, grid, twist, extra_ndim, ("dbar",))["dbar"]


def dee_dbar(data: np.ndarray, k: int, grid: Grid, twist=None, extra_ndim: int = 0):
    parts = _exterior_parts(data, k, grid, twist, extra_ndim)
    return parts["dee"], parts["dbar"]


def d(data: np.ndarray, k: int, grid: Grid, twist=None, extra_ndim: int = 0) -> np.ndarray:
    a, b = dee_dbar(data, k, grid, twist, extra_ndim)
    return a + b


def apply_pointwise(mat: np.ndarray, data: np.ndarray, extra_ndim: int = 0) -> np.ndarray:
    """Apply nodewise matrices ``mat`` (grid4 + (Co, Ci)) to a field."""
    mat = mat.reshape(mat.shape[:4] + (1,) * extra_ndim + mat.shape[-2:])
    return np.matmul(mat, data[..., None])[..., 0]


def wedge_fields(a: np.ndarray, ka: int, b: np.ndarray, kb: int) -> np.ndarray:
    """Nodewise wedge of scalar-valued form fields."""
    T = forms.wedge_tensor(N_COMPLEX, ka, kb)
    return np.einsum("oab,...a,...b->...o", T, a, b)


def conj_field(data: np.ndarray, k: int) -> np.ndarray:
    """Complex conjugate of a scalar-valued degree-k form field."""
    return np.einsum("oi,...i->...o", forms._conj_perm(N_COMPLEX, k), np.conj(data))


def band_limited_field(grid: Grid, rng, band: int, extra_shape=(), axes=(0, 1, 2, 3), amplitude=1.0) -> np.ndarray:
    """Random complex trigonometric polynomial with modes ``|m| <= band`` per axis.

    Only the ``(2 band + 1)^len(axes)`` coefficients are drawn, so a given
    seed yields the same function at every resolution.  Scaled to RMS
    ``amplitude``.
    """
    axes = tuple(sorted(axes))
    for a in axes:
        if 2 * band >= grid.shape[a]:
            log.warning("band %d is not resolved on axis %d with %d points; modes will alias", band, a, grid.shape[a])
    nm = 2 * band + 1
    draw_shape = (nm,) * len(axes) + tuple(extra_shape)
    coeffs = rng.normal(size=draw_shape) + 1j * rng.normal(size=draw_shape)
    vals = coeffs
    modes = np.arange(-band, band + 1)
    for pos, a in enumerate(axes):
        x = grid.coord(a).ravel()
        basis_mat = np.exp(1j * TWO_PI * np.outer(x, modes))
        vals = np.moveaxis(np.tensordot(basis_mat, vals, axes=([1], [pos])), 0, pos)
    shape = tuple(grid.shape[a] if a in axes else 1 for a in range(4))
    vals = vals.reshape(shape + tuple(extra_shape))
    scale = np.sqrt(np.sum(np.abs(coeffs) ** 2) / np.prod(draw_shape[len(axes):], dtype=float)) or 1.0
    return amplitude * vals / scale


# ---------------------------------------------------------------------------
# metric fields
# ---------------------------------------------------------------------------

def fourier_profile(modes: dict, x1: np.ndarray) -> np.ndarray:
    """Evaluate ``sum_m c_m exp(2 pi i m x1)``."""
    out = np.zeros_like(x1, dtype=complex)
    for m, c in modes.items():
        out = out + complex(c) * np.exp(1j * TWO_PI * int(m) * x1)
    return out


SINE_PROFILE = {1: -0.5j, -1: 0.5j}


def poisson_profile(rho: float, cutoff: float = 1e-18) -> dict:
    """Odd profile ``sum_m rho^|m| sin(2 pi m x1)``; its Fourier tail is infinite.

    Metrics built from it are not band-limited, so grid identities show
    genuine spectral convergence instead of holding to rounding at any N.
    """
    if not 0 < rho < 1:
        raise ValueError("rho must lie in (0, 1)")
    mmax = int(np.ceil(np.log(cutoff) / np.log(rho)))
    modes = {}
    for m in range(1, mmax + 1):
        modes[m] = -0.5j * rho ** m
        modes[-m] = 0.5j * rho ** m
    return modes


class MetricField:
    """Hermitian metric on the grid, normalised so that ``int omega^2/2 = 2 pi``.

    ``g`` has shape ``grid4 + (2, 2)`` (grid axes may be broadcast).  All
    nodewise operator matrices are cached on first use.
    """

    def __init__(self, grid: Grid, g: np.ndarray, kind: str = "generic", normalize: bool = True,
                 gauduchon_tol: float = 1e-11):
        g = np.asarray(g, dtype=complex)
        if g.ndim != 6 or g.shape[-2:] != (2, 2):
            raise MetricError(f"metric array must have shape grid4 + (2, 2), got {g.shape}")
        herm = np.max(np.abs(g - np.conj(np.swapaxes(g, -1, -2))))
        if herm > 1e-13:
            raise MetricError(f"metric is not Hermitian (residual {herm:.2e})")
        eig = np.linalg.eigvalsh(g)
        if np.min(eig) <= 0:
            node = np.unravel_index(np.argmin(eig[..., 0]), eig.shape[:-1])
            raise MetricError(f"metric is not positive definite at node {tuple(int(i) for i in node)}")
        self.grid = grid
        self.kind = kind
        self.gauduchon_tol = gauduchon_tol
        if normalize:
            vol = TOP_TO_REAL * np.mean(np.broadcast_to(forms.volume_coefficient(g).real, g.shape[:4]))
            g = g * np.sqrt(TWO_PI / vol)
        self.g = g

    # cached pointwise data --------------------------------------------------
    @cached_property
    def grams(self) -> list[np.ndarray]:
        return forms.gram_matrices(self.g)

    @cached_property
    def volume(self) -> np.ndarray:
        """Coefficient of ``omega^2/2`` on ``dz1 dz2 dzbar1 dzbar2`` (grid4)."""
        return forms.volume_coefficient(self.g)

    @cached_property
    def omega(self) -> np.ndarray:
        return forms.omega_vector(self.g)

    def lefschetz(self, k: int) -> np.ndarray:
        return self._cached(("L", k), lambda: forms.lefschetz_matrix(self.g, k))

    def contraction(self, k: int) -> np.ndarray:
        return self._cached(("Lambda", k), lambda: forms.contraction_matrix(self.g, k, self.grams))

    def star(self, k: int) -> np.ndarray:
        return self._cached(("star", k), lambda: forms.star_matrix(self.g, k, self.grams))

    def _cached(self, key, fn):
        cache = self.__dict__.setdefault("_mat_cache", {})
        if key not in cache:
            cache[key] = fn()
        return cache[key]

    @cached_property
    def d_omega(self) -> np.ndarray:
        return d(self.omega, 2, self.grid)

    @cached_property
    def dee_omega(self) -> np.ndarray:
        return dee(self.omega, 2, self.grid)

    @cached_property
    def dbar_omega(self) -> np.ndarray:
        return dbar(self.omega, 2, self.grid)

    @property
    def is_kahler(self) -> bool:
        return float(np.max(np.abs(self.d_omega))) < 1e-12

    # nodewise operators on fields --------------------------------------------
    def L(self, data, k, extra_ndim=0):
        return apply_pointwise(self.lefschetz(k), data, extra_ndim)

    def Lambda(self, data, k, extra_ndim=0):
        return apply_pointwise(self.contraction(k), data, extra_ndim)

    def hodge(self, data, k, extra_ndim=0):
        return apply_pointwise(self.star(k), data, extra_ndim)

    def dee_adjoint(self, data, k, twist=None, extra_ndim=0):
        """``del^* = -* dbar *`` on degree-k fields."""
        s = self.hodge(data, k, extra_ndim)
        return -self.hodge(dbar(s, TOP - k, self.grid, twist, extra_ndim), TOP - k + 1, extra_ndim)

    def dbar_adjoint(self, data, k, twist=None, extra_ndim=0):
        """``dbar^* = -* del *`` on degree-k fields."""
        s = self.hodge(data, k, extra_ndim)
        return -self.hodge(dee(s, TOP - k, self.grid, twist, extra_ndim), TOP - k + 1, extra_ndim)

    def d_adjoint(self, data, k, twist=None, extra_ndim=0):
        return self.dee_adjoint(data, k, twist, extra_ndim) + self.dbar_adjoint(data, k, twist, extra_ndim)

    def d_adjoint_discrete(self, data, k):
        """Adjoint of the spectral ``d`` under the quadrature inner product (scalar fields)."""
        T = forms.wedge_tensor(N_COMPLEX, 1, k - 1)
        weighted = apply_pointwise(self.grams[k] * self.volume[..., None, None], data)
        acc = None
        for c in range(TOP):
            j = c % N_COMPLEX
            piece = np.einsum("ob,...o->...b", T[:, c, :], weighted)
            # adjoint of d/dz is -d/dzbar and vice versa
            term = -(d_zbar(piece, self.grid, j) if c < N_COMPLEX else d_z(piece, self.grid, j))
            acc = term if acc is None else acc + term
        mass = self.grams[k - 1] * self.volume[..., None, None]
        return np.linalg.solve(mass, acc[..., None])[..., 0]

    def torsion_matrix(self, k: int) -> np.ndarray:
        """Nodewise matrix of ``tau = [Lambda, del omega ^ .]`` from degree k to k+1."""
        def build():
            dw = self.dee_omega
            shape = np.broadcast_shapes(dw.shape[:4], self.g.shape[:4])
            out = np.zeros(shape + (ncomp(k + 1), ncomp(k)), dtype=complex)
            if k + 3 <= TOP:
                out = out + self.contraction(k + 3) @ forms.left_wedge_matrix(dw, N_COMPLEX, 3, k)
            if k >= 2:
                out = out - forms.left_wedge_matrix(dw, N_COMPLEX, 3, k - 2) @ self.contraction(k)
            return out
        return self._cached(("tau", k), build)

    def torsion_adjoint_matrix(self, k: int) -> np.ndarray:
        """``tau^*`` from degree k to k-1."""
        return self._cached(("tau*", k), lambda: forms.adjoint_matrix(self.torsion_matrix(k - 1), self.grams[k - 1], self.grams[k]))

    # integration --------------------------------------------------------------
    def integrate(self, f: np.ndarray) -> complex:
        """``int_X f omega^2/2`` for a scalar field ``f`` (grid4 shaped)."""
        f = np.asarray(f)
        return complex(TOP_TO_REAL * np.mean(np.broadcast_to(f * self.volume, np.broadcast_shapes(f.shape[:4], self.volume.shape))))

    def integrate_top(self, top: np.ndarray) -> complex:
        """Integral of a top-degree form field (last axis of length 1)."""
        return complex(TOP_TO_REAL * np.mean(top[..., 0]))

    def pointwise_sq(self, data: np.ndarray, k: int, extra_ndim: int = 0) -> np.ndarray:
        """Pointwise squared norm of a (matrix-valued) degree-k field, Frobenius on extra axes."""
        Md = apply_pointwise(self.grams[k], data, extra_ndim)
        val = np.sum(np.conj(data) * Md, axis=-1).real
        for _ in range(extra_ndim):
            val = val.sum(axis=-1)
        return val

    def l2_inner(self, a: np.ndarray, b: np.ndarray, k: int, extra_ndim: int = 0) -> complex:
        """``int <a, b> vol`` (linear in a)."""
        Ma = apply_pointwise(self.grams[k], a, extra_ndim)
        val = np.sum(np.conj(b) * Ma, axis=-1)
        for _ in range(extra_ndim):
            val = val.sum(axis=-1)
        return self.integrate(val)

    def lp_norm(self, data: np.ndarray, p: float, k: int = 0, extra_ndim: int = 0, pointwise=None) -> float:
        """L^p norm of a field; ``p = inf`` gives the nodewise maximum.

        ``pointwise`` may supply the nodewise norm directly.
        """
        if p < 1:
            raise ValueError(f"p must be >= 1, got {p}")
        mag = np.sqrt(np.maximum(self.pointwise_sq(data, k, extra_ndim), 0.0)) if pointwise is None else pointwise
        if np.isinf(p):
            return float(np.max(mag))
        return float(self.integrate(mag ** p).real ** (1.0 / p))

    def l2_norm(self, data, k=0, extra_ndim=0) -> float:
        return self.lp_norm(data, 2, k, extra_ndim)

    def total_volume(self) -> float:
        return self.integrate(np.ones((1, 1, 1, 1))).real

    def require_normalized(self, tol: float = 1e-10) -> None:
        """Raise unless the volume is ``2 pi``; slopes equal the HE constant only then."""
        vol = self.total_volume()
        if abs(vol - TWO_PI) > tol:
            raise MetricError(f"metric volume is {vol:.12g}, expected 2 pi; build it with normalize=True")

    # geometric operators -----------------------------------------------------
    def p_operator(self, f: np.ndarray) -> np.ndarray:
        """``P f = i Lambda dbar del f`` for a scalar field (grid4 shaped)."""
        dd = dbar(dee(f[..., None], 0, self.grid), 1, self.grid)
        return 1j * self.Lambda(dd, 2)[..., 0]

    def gauduchon_residual(self) -> float:
        """L^2 norm of ``del dbar omega``."""
        ddb = dee(self.dbar_omega, 3, self.grid)
        return self.l2_norm(ddb, 4)

    def dstar_omega(self) -> np.ndarray:
        """``d^* omega = -* d * omega``."""
        return self.d_adjoint(self.omega, 2)

    def gauduchon_ibp_check(self, f: np.ndarray) -> float:
        """``|int <del^* omega, dbar f>|``; vanishes for every f iff the metric is Gauduchon."""
        ds = self.dee_adjoint(self.omega, 2)
        df = dbar(np.asarray(f)[..., None], 0, self.grid)
        return abs(self.l2_inner(ds, df, 1))

    def demailly_residual(self, a: np.ndarray, k: int) -> float:
        """L^2 norm of ``[Lambda, dbar] a + i (del^* + tau^*) a`` for a degree-k field."""
        lhs = self.Lambda(dbar(a, k, self.grid), k + 1)
        if k >= 2:
            lhs = lhs - dbar(self.Lambda(a, k), k - 2, self.grid)
        rhs = -1j * (self.dee_adjoint(a, k) + apply_pointwise(self.torsion_adjoint_matrix(k), a))
        return self.l2_norm(lhs - rhs, k - 1)

    @property
    def is_gauduchon(self) -> bool:
        return self.gauduchon_residual() <= self.gauduchon_tol

    def describe(self) -> dict:
        return {"kind": self.kind, "shape": list(self.g.shape[:4]), "volume": self.total_volume()}


def flat_metric(grid: Grid) -> MetricField:
    return MetricField(grid, np.eye(2).reshape(1, 1, 1, 1, 2, 2), kind="flat")


def gauduchon_family(eps: float, grid: Grid, profile: dict | None = None) -> MetricField:
    """Non-Kahler Gauduchon metrics ``omega_flat + i eps (p dz1 dzbar2 + conj(p) dz2 dzbar1)``.

    ``p`` depends on ``x1`` only (``profile`` maps Fourier modes to coefficients,
    default ``sin(2 pi x1)``), so ``del dbar omega = 0`` identically.
    """
    profile = SINE_PROFILE if profile is None else profile
    x1 = grid.coord(0)
    p = fourier_profile(profile, x1)
    sup = float(np.max(np.abs(p))) if profile else 0.0
    if abs(eps) * sup >= 1.0:
        node = int(np.argmax(np.abs(p)))
        raise MetricError(f"eps * sup|profile| = {abs(eps) * sup:.3f} >= 1: degenerate metric at x1 node {node}")
    g = np.zeros(p.shape + (2, 2), dtype=complex)
    g[..., 0, 0] = 1.0
    g[..., 1, 1] = 1.0
    g[..., 0, 1] = eps * p
    g[..., 1, 0] = eps * np.conj(p)
    return MetricField(grid, g, kind="flat" if eps == 0 else "gauduchon")


def negative_control_metric(eps: float, grid: Grid, delta: float = 0.3, profile: dict | None = None) -> MetricField:
    """Family metric with ``dz2 ^ dzbar2`` coefficient ``1 + delta cos(2 pi x1)``.

    ``del dbar`` of that coefficient does not vanish, so the metric is not Gauduchon.
    """
    profile = SINE_PROFILE if profile is None else profile
    x1 = grid.coord(0)
    p = fourier_profile(profile, x1)
    g = np.zeros(p.shape + (2, 2), dtype=complex)
    g[..., 0, 0] = 1.0
    g[..., 1, 1] = 1.0 + delta * np.cos(TWO_PI * x1)
    g[..., 0, 1] = eps * p
    g[..., 1, 0] = eps * np.conj(p)
    return MetricField(grid, g, kind="negative-control")


# ---------------------------------------------------------------------------
# field checkpoints
# ---------------------------------------------------------------------------

_HEADER_ALIGN = 64


def save_field(path, array: np.ndarray, meta: dict | None = None) -> None:
    """Write a JSON header line followed by raw little-endian complex128 data.

    The header records ``shape``, ``dtype`` and the byte ``offset`` of the
    data; it is padded with spaces so the data start is 64-byte aligned.
    """
    arr = np.ascontiguousarray(array, dtype="<c16")
    header = {"shape": list(arr.shape), "dtype": "complex128-le", "offset": 0, "meta": meta or {}}
    text = json.dumps(header)
    offset = -(-(len(text) + 32) // _HEADER_ALIGN) * _HEADER_ALIGN
    header["offset"] = offset
    text = json.dumps(header)
    raw = text.encode().ljust(offset - 1) + b"\n"
    with open(path, "wb") as fh:
        fh.write(raw)
        fh.write(arr.tobytes())


def load_field(path) -> tuple[np.ndarray, dict]:
    with open(path, "rb") as fh:
        line = fh.readline()
        header = json.loads(line.decode())
        if header.get("dtype") != "complex128-le":
            raise ValueError(f"unsupported dtype {header.get('dtype')!r}")
        fh.seek(header["offset"])
        data = np.frombuffer(fh.read(), dtype="<c16")
    return data.reshape(header["shape"]).copy(), header.get("meta", {})
