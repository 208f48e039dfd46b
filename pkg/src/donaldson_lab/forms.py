"""Pointwise linear algebra of complex differential forms on C^n.

Forms are expanded in the coframe ``dz^1..dz^n, dzbar^1..dzbar^n``.  A basis
element of degree k is a strictly increasing tuple of coframe indices in
``range(2n)``; indices below ``n`` are holomorphic.  Within a degree the basis
is ordered lexicographically, so every basis element reads
``dz^I ^ dzbar^J`` with I, J increasing.

Conventions
-----------
* ``omega = i g_{jk} dz^j ^ dzbar^k`` and the volume form is ``omega^n/n!``.
* The Hermitian product is linear in the first slot: ``<x, y> = y^H M x``.
* The Hodge star is complex linear with ``<a, b> vol = a ^ *conj(b)``.

Every metric-dependent operator is available twice: as a batched matrix
builder (``*_matrix``), which accepts metrics of shape ``(..., n, n)`` and is
what the grid code uses, and as a method-level operation on :class:`PointForm`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from itertools import combinations
from math import factorial

import numpy as np

__all__ = [
    "FormError",
    "ExteriorBasis",
    "basis",
    "PointForm",
    "PointMetric",
    "TorsionData",
    "wedge",
    "conj",
    "inner",
    "norm",
    "lefschetz_L",
    "contract_Lambda",
    "hodge_star",
    "weil_I",
    "lefschetz_decompose",
    "torsion_adjoint",
    "general_torsion_formula",
    "star_primitive_identity_check",
    "gram_matrices",
    "wedge_tensor",
    "left_wedge_matrix",
    "omega_vector",
    "volume_coefficient",
    "lefschetz_matrix",
    "contraction_matrix",
    "star_matrix",
    "adjoint_matrix",
    "primitive_projection",
]


class FormError(ValueError):
    """Raised on dimension mismatches and out-of-range degrees."""


def _perm_sign(seq) -> int:
    seq = list(seq)
    sign = 1
    for i in range(len(seq)):
        for j in range(i + 1, len(seq)):
            if seq[i] > seq[j]:
                sign = -sign
    return sign


class ExteriorBasis:
    """Index bookkeeping for the exterior algebra of C^n (real dimension 2n)."""

    def __init__(self, n: int):
        if n < 1 or n > 4:
            raise FormError(f"complex dimension must be in 1..4, got {n}")
        self.n = n
        self.dim = 2 * n
        self.subsets = [list(combinations(range(self.dim), k)) for k in range(self.dim + 1)]
        self.index = [{s: i for i, s in enumerate(subs)} for subs in self.subsets]
        self.sizes = [len(s) for s in self.subsets]
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)]).astype(int)
        self.total = int(self.offsets[-1])

    def bidegree(self, k: int, i: int) -> tuple[int, int]:
        s = self.subsets[k][i]
        p = sum(1 for c in s if c < self.n)
        return p, len(s) - p

    def bidegrees(self, k: int) -> np.ndarray:
        return np.array([self.bidegree(k, i) for i in range(self.sizes[k])], dtype=int).reshape(-1, 2)

    def split(self, k: int, i: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
        """Holomorphic and antiholomorphic 1-based multi-indices of a basis element."""
        s = self.subsets[k][i]
        hol = tuple(c + 1 for c in s if c < self.n)
        anti = tuple(c - self.n + 1 for c in s if c >= self.n)
        return hol, anti

    def locate(self, hol, anti) -> tuple[int, int, int]:
        """Return ``(degree, index, sign)`` of ``dz^hol ^ dzbar^anti`` (1-based indices)."""
        seq = [h - 1 for h in hol] + [a - 1 + self.n for a in anti]
        if len(set(seq)) != len(seq):
            return len(seq), -1, 0
        if any(c < 0 or c >= self.dim for c in seq):
            raise FormError("multi-index out of range")
        sign = _perm_sign(seq)
        key = tuple(sorted(seq))
        return len(key), self.index[len(key)][key], sign

    @property
    def top(self) -> int:
        return self.dim


@lru_cache(maxsize=None)
def basis(n: int) -> ExteriorBasis:
    return ExteriorBasis(n)


@lru_cache(maxsize=None)
def wedge_tensor(n: int, d: int, k: int) -> np.ndarray:
    """Structure constants ``T[out, a, b]`` with ``e_a ^ e_b = sum T[out,a,b] e_out``.

    ``a`` runs over degree ``d`` and ``b`` over degree ``k`` basis elements.
    """
    B = basis(n)
    if d + k > B.dim:
        return np.zeros((0, B.sizes[d], B.sizes[k]))
    T = np.zeros((B.sizes[d + k], B.sizes[d], B.sizes[k]))
    for ia, sa in enumerate(B.subsets[d]):
        for ib, sb in enumerate(B.subsets[k]):
            if set(sa) & set(sb):
                continue
            seq = sa + sb
            T[B.index[d + k][tuple(sorted(seq))], ia, ib] = _perm_sign(seq)
    T.setflags(write=False)
    return T


@lru_cache(maxsize=None)
def _conj_perm(n: int, k: int) -> np.ndarray:
    """Signed permutation ``Pi`` with ``coeffs(conj(a)) = Pi @ conj(coeffs(a))``."""
    B = basis(n)
    P = np.zeros((B.sizes[k], B.sizes[k]))
    for i, s in enumerate(B.subsets[k]):
        mapped = [c + n if c < n else c - n for c in s]
        P[B.index[k][tuple(sorted(mapped))], i] = _perm_sign(mapped)
    P.setflags(write=False)
    return P


@lru_cache(maxsize=None)
def _complement_pairing(n: int, k: int) -> np.ndarray:
    """``S[I, K]`` with ``e_I ^ e_K = S[I, K] e_top`` for degrees k and 2n-k."""
    return wedge_tensor(n, k, 2 * n - k)[0]


@lru_cache(maxsize=None)
def _minor_index(n: int, k: int):
    B = basis(n)
    subs = np.array(B.subsets[k], dtype=int).reshape(B.sizes[k], k)
    return subs


# ---------------------------------------------------------------------------
# batched metric-dependent matrices
# ---------------------------------------------------------------------------

def _check_metric_array(g: np.ndarray) -> np.ndarray:
    g = np.asarray(g, dtype=complex)
    if g.ndim < 2 or g.shape[-1] != g.shape[-2]:
        raise FormError(f"metric must have shape (..., n, n), got {g.shape}")
    return g


def gram_matrices(g: np.ndarray) -> list[np.ndarray]:
    """Gram matrices ``M_k`` of the induced Hermitian product on k-forms.

    ``<x, y> = y^H M_k x`` for coefficient vectors x, y of degree k.
    """
    g = _check_metric_array(g)
    n = g.shape[-1]
    B = basis(n)
    ginv = np.linalg.inv(g)
    batch = g.shape[:-2]
    M1 = np.zeros(batch + (2 * n, 2 * n), dtype=complex)
    M1[..., :n, :n] = ginv
    M1[..., n:, n:] = np.swapaxes(ginv, -1, -2)
    mats = [np.ones(batch + (1, 1), dtype=complex), M1]
    for k in range(2, B.dim + 1):
        subs = _minor_index(n, k)
        # M_k[J, I] = det(M1[J, I])
        rows = subs[:, None, :, None]
        cols = subs[None, :, None, :]
        blocks = M1[..., rows, cols]
        mats.append(np.linalg.det(blocks))
    return mats


def omega_vector(g: np.ndarray) -> np.ndarray:
    """Coefficients of the fundamental form ``i g_{jk} dz^j ^ dzbar^k``."""
    g = _check_metric_array(g)
    n = g.shape[-1]
    B = basis(n)
    out = np.zeros(g.shape[:-2] + (B.sizes[2],), dtype=complex)
    for j in range(n):
        for k in range(n):
            idx = B.index[2][(j, n + k)]
            out[..., idx] = 1j * g[..., j, k]
    return out


def left_wedge_matrix(alpha: np.ndarray, n: int, d: int, k: int) -> np.ndarray:
    """Matrix of ``x -> alpha ^ x`` from degree k to degree d+k (batched over alpha)."""
    T = wedge_tensor(n, d, k)
    return np.einsum("oab,...a->...ob", T, alpha)


def _power_vector(alpha: np.ndarray, n: int, d: int, m: int) -> np.ndarray:
    """Coefficient vector of ``alpha^m`` (degree ``m d``); ``alpha^0 = 1``."""
    out = np.ones(alpha.shape[:-1] + (1,), dtype=complex)
    deg = 0
    for _ in range(m):
        if deg + d > 2 * n:
            return np.zeros(alpha.shape[:-1] + (0,), dtype=complex)
        out = np.einsum("oab,...a,...b->...o", wedge_tensor(n, d, deg), alpha, out)
        deg += d
    return out


def volume_coefficient(g: np.ndarray) -> np.ndarray:
    """Coefficient ``v`` of ``omega^n/n!`` on ``dz^1..dz^n ^ dzbar^1..dzbar^n``."""
    g = _check_metric_array(g)
    n = g.shape[-1]
    return _power_vector(omega_vector(g), n, 2, n)[..., 0] / factorial(n)


def lefschetz_matrix(g: np.ndarray, k: int) -> np.ndarray:
    g = _check_metric_array(g)
    n = g.shape[-1]
    if k + 2 > 2 * n or k < 0:
        raise FormError(f"L is undefined on degree {k} for n={n}")
    return left_wedge_matrix(omega_vector(g), n, 2, k)


def adjoint_matrix(T: np.ndarray, M_in: np.ndarray, M_out: np.ndarray) -> np.ndarray:
    """Metric adjoint ``T^* = M_in^{-1} T^H M_out`` of a map between form degrees."""
    return np.linalg.solve(M_in, np.conj(np.swapaxes(T, -1, -2)) @ M_out)


def contraction_matrix(g: np.ndarray, k: int, grams=None) -> np.ndarray:
    """Matrix of Lambda (adjoint of L) from degree k to degree k-2."""
    g = _check_metric_array(g)
    n = g.shape[-1]
    if k < 2 or k > 2 * n:
        raise FormError(f"Lambda is undefined on degree {k} for n={n}")
    grams = gram_matrices(g) if grams is None else grams
    return adjoint_matrix(lefschetz_matrix(g, k - 2), grams[k - 2], grams[k])


def star_matrix(g: np.ndarray, k: int, grams=None) -> np.ndarray:
    """Matrix of the Hodge star from degree k to degree 2n-k."""
    g = _check_metric_array(g)
    n = g.shape[-1]
    grams = gram_matrices(g) if grams is None else grams
    S = _complement_pairing(n, k)
    v = volume_coefficient(g)
    Mt = np.swapaxes(grams[k], -1, -2)
    # S c = v M^T Pi beta ; S is a signed permutation so S^{-1} = S^T
    return v[..., None, None] * (S.T @ (Mt @ _conj_perm(n, k)))


# ---------------------------------------------------------------------------
# point objects
# ---------------------------------------------------------------------------

class PointForm:
    """A complex differential form at a single point of C^n.

    Coefficients are held in one vector over the whole exterior algebra,
    degree blocks in increasing order.
    """

    __slots__ = ("n", "coeffs")

    def __init__(self, n: int, coeffs=None):
        B = basis(n)
        self.n = n
        if coeffs is None:
            coeffs = np.zeros(B.total, dtype=complex)
        coeffs = np.asarray(coeffs, dtype=complex)
        if coeffs.shape != (B.total,):
            raise FormError(f"expected {B.total} coefficients, got shape {coeffs.shape}")
        self.coeffs = coeffs

    # construction -------------------------------------------------------
    @classmethod
    def zero(cls, n: int) -> PointForm:
        return cls(n)

    @classmethod
    def scalar(cls, n: int, c: complex) -> PointForm:
        f = cls(n)
        f.coeffs[0] = c
        return f

    @classmethod
    def from_degree(cls, n: int, k: int, vec) -> PointForm:
        B = basis(n)
        f = cls(n)
        f.coeffs[B.offsets[k]:B.offsets[k + 1]] = np.asarray(vec, dtype=complex)
        return f

    @classmethod
    def from_components(cls, n: int, components: dict) -> PointForm:
        """Build from ``{(hol, anti): coeff}`` with 1-based multi-indices.

        Non-increasing multi-indices are reordered with the appropriate sign.
        """
        B = basis(n)
        f = cls(n)
        for (hol, anti), c in components.items():
            k, idx, sign = B.locate(tuple(hol), tuple(anti))
            if sign:
                f.coeffs[B.offsets[k] + idx] += sign * c
        return f

    @classmethod
    def dz(cls, n: int, j: int) -> PointForm:
        return cls.from_components(n, {((j,), ()): 1.0})

    @classmethod
    def dzbar(cls, n: int, j: int) -> PointForm:
        return cls.from_components(n, {((), (j,)): 1.0})

    @classmethod
    def random(cls, n: int, rng, degrees=None, real: bool = False) -> PointForm:
        B = basis(n)
        f = cls(n)
        degrees = range(B.dim + 1) if degrees is None else degrees
        for k in degrees:
            sl = slice(B.offsets[k], B.offsets[k + 1])
            f.coeffs[sl] = rng.normal(size=B.sizes[k]) + 1j * rng.normal(size=B.sizes[k])
        if real:
            f = (f + conj(f)) * 0.5
        return f

    # access ---------------------------------------------------------------
    def degree_part(self, k: int) -> np.ndarray:
        B = basis(self.n)
        return self.coeffs[B.offsets[k]:B.offsets[k + 1]]

    def bidegree_part(self, p: int, q: int) -> PointForm:
        B = basis(self.n)
        k = p + q
        mask = np.all(B.bidegrees(k) == (p, q), axis=1)
        out = PointForm(self.n)
        sl = slice(B.offsets[k], B.offsets[k + 1])
        out.coeffs[sl] = np.where(mask, self.coeffs[sl], 0)
        return out

    @property
    def components(self) -> dict:
        """``{(p, q): {(hol, anti): coeff}}`` for the nonzero coefficients."""
        B = basis(self.n)
        out: dict = {}
        for k in range(B.dim + 1):
            for i, c in enumerate(self.degree_part(k)):
                if c != 0:
                    hol, anti = B.split(k, i)
                    out.setdefault((len(hol), len(anti)), {})[(hol, anti)] = c
        return out

    def degrees(self) -> list[int]:
        B = basis(self.n)
        return [k for k in range(B.dim + 1) if np.any(self.degree_part(k) != 0)]

    def homogeneous_degree(self) -> int:
        degs = self.degrees()
        if len(degs) > 1:
            raise FormError(f"form is not homogeneous (degrees {degs})")
        return degs[0] if degs else 0

    # arithmetic -------------------------------------------------------------
    def _check(self, other: PointForm):
        if not isinstance(other, PointForm):
            return NotImplemented
        if other.n != self.n:
            raise FormError(f"dimension mismatch: n={self.n} vs n={other.n}")
        return None

    def __add__(self, other):
        if self._check(other) is NotImplemented:
            return NotImplemented
        return PointForm(self.n, self.coeffs + other.coeffs)

    def __sub__(self, other):
        if self._check(other) is NotImplemented:
            return NotImplemented
        return PointForm(self.n, self.coeffs - other.coeffs)

    def __neg__(self):
        return PointForm(self.n, -self.coeffs)

    def __mul__(self, c):
        if isinstance(c, PointForm):
            return NotImplemented
        return PointForm(self.n, self.coeffs * c)

    __rmul__ = __mul__

    def __truediv__(self, c):
        return PointForm(self.n, self.coeffs / c)

    def __xor__(self, other):
        return wedge(self, other)

    def __repr__(self) -> str:
        terms = []
        for (p, q), comp in sorted(self.components.items()):
            for (hol, anti), c in comp.items():
                name = "^".join([f"dz{h}" for h in hol] + [f"dzb{a}" for a in anti]) or "1"
                terms.append(f"({c:.6g}){name}")
        return f"PointForm(n={self.n}: " + (" + ".join(terms) or "0") + ")"

    def coefficient_norm(self) -> float:
        return float(np.linalg.norm(self.coeffs))


@dataclass(frozen=True)
class PointMetric:
    """Hermitian metric ``g_{jk}`` at a point; see module conventions."""

    g: np.ndarray
    _grams: list = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        g = np.asarray(self.g, dtype=complex)
        if g.ndim != 2 or g.shape[0] != g.shape[1] or not 1 <= g.shape[0] <= 4:
            raise FormError(f"metric must be n x n with n <= 4, got {g.shape}")
        if np.max(np.abs(g - g.conj().T)) > 1e-14 * max(1.0, np.max(np.abs(g))):
            raise FormError("metric is not Hermitian")
        if np.min(np.linalg.eigvalsh(g)) <= 0:
            raise FormError("metric is not positive definite")
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "_grams", gram_matrices(g))

    @classmethod
    def standard(cls, n: int) -> PointMetric:
        return cls(np.eye(n))

    @classmethod
    def random(cls, n: int, rng, spread: float = 0.5) -> PointMetric:
        a = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
        return cls(np.eye(n) + spread * (a @ a.conj().T) / n)

    @property
    def n(self) -> int:
        return self.g.shape[0]

    @property
    def omega(self) -> PointForm:
        return PointForm.from_degree(self.n, 2, omega_vector(self.g))

    @property
    def volume_density(self) -> float:
        return float(np.linalg.det(self.g).real)

    @property
    def volume_form(self) -> PointForm:
        return PointForm.from_degree(self.n, 2 * self.n, [volume_coefficient(self.g)])

    def gram(self, k: int) -> np.ndarray:
        return self._grams[k]


@dataclass(frozen=True)
class TorsionData:
    """Pointwise torsion input: ``d omega`` and optionally ``d(omega^m)``.

    ``powers`` maps m to the (2m+1)-form ``d(omega^m)``.
    """

    d_omega: PointForm
    powers: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.d_omega is None:
            raise FormError("torsion data requires d omega")
        if self.d_omega.degrees() not in ([], [3]):
            raise FormError("d omega must be a 3-form")

    @classmethod
    def from_d_omega(cls, d_omega: PointForm, metric: PointMetric) -> TorsionData:
        """Fill in ``d(omega^m) = m d omega ^ omega^(m-1)`` for every m."""
        n = metric.n
        om = metric.omega
        powers = {0: PointForm.zero(n)}
        om_pow = PointForm.scalar(n, 1.0)
        for m in range(1, n):
            powers[m] = m * wedge(d_omega, om_pow) if 2 * m + 1 <= 2 * n else PointForm.zero(n)
            om_pow = wedge(om_pow, om)
        return cls(d_omega, powers)

    def power(self, m: int, n: int) -> PointForm:
        if m == 0:
            return PointForm.zero(n)
        if m not in self.powers:
            raise FormError(f"torsion data carries no d(omega^{m})")
        return self.powers[m]


# ---------------------------------------------------------------------------
# operations on point forms
# ---------------------------------------------------------------------------

def _same_n(*forms) -> int:
    ns = {f.n for f in forms if isinstance(f, PointForm)}
    if len(ns) != 1:
        raise FormError(f"dimension mismatch: {sorted(ns)}")
    return ns.pop()


def wedge(a: PointForm, b: PointForm) -> PointForm:
    n = _same_n(a, b)
    B = basis(n)
    out = PointForm(n)
    da, db = a.degrees(), b.degrees()
    if da and db and max(da) + max(db) > B.dim and min(da) + min(db) > B.dim:
        raise FormError("degree overflow in wedge product")
    for d in da:
        for k in db:
            if d + k > B.dim:
                continue
            vec = np.einsum("oab,a,b->o", wedge_tensor(n, d, k), a.degree_part(d), b.degree_part(k))
            out.coeffs[B.offsets[d + k]:B.offsets[d + k + 1]] += vec
    return out


def conj(a: PointForm) -> PointForm:
    B = basis(a.n)
    out = PointForm(a.n)
    for k in range(B.dim + 1):
        out.coeffs[B.offsets[k]:B.offsets[k + 1]] = _conj_perm(a.n, k) @ np.conj(a.degree_part(k))
    return out


def _metric_check(a: PointForm, m: PointMetric) -> int:
    if a.n != m.n:
        raise FormError(f"dimension mismatch: form n={a.n}, metric n={m.n}")
    return a.n


def inner(a: PointForm, b: PointForm, m: PointMetric) -> complex:
    """Hermitian product, linear in ``a``; distinct degrees are orthogonal."""
    n = _same_n(a, b)
    _metric_check(a, m)
    B = basis(n)
    return complex(sum(np.conj(b.degree_part(k)) @ m.gram(k) @ a.degree_part(k) for k in range(B.dim + 1)))


def norm(a: PointForm, m: PointMetric) -> float:
    return float(np.sqrt(max(inner(a, a, m).real, 0.0)))


def _apply_by_degree(a: PointForm, m: PointMetric, builder, shift: int, lo: int, hi: int) -> PointForm:
    n = _metric_check(a, m)
    B = basis(n)
    out = PointForm(n)
    for k in a.degrees():
        if not lo <= k <= hi:
            raise FormError(f"operator undefined on degree {k}")
        mat = builder(k)
        out.coeffs[B.offsets[k + shift]:B.offsets[k + shift + 1]] += mat @ a.degree_part(k)
    return out


def lefschetz_L(a: PointForm, m: PointMetric) -> PointForm:
    n = m.n
    return _apply_by_degree(a, m, lambda k: lefschetz_matrix(m.g, k), 2, 0, 2 * n - 2)


def contract_Lambda(a: PointForm, m: PointMetric) -> PointForm:
    n = _metric_check(a, m)
    B = basis(n)
    out = PointForm(n)
    for k in a.degrees():
        if k < 2:
            continue
        mat = contraction_matrix(m.g, k, m._grams)
        out.coeffs[B.offsets[k - 2]:B.offsets[k - 1]] += mat @ a.degree_part(k)
    return out


def hodge_star(a: PointForm, m: PointMetric) -> PointForm:
    n = _metric_check(a, m)
    B = basis(n)
    out = PointForm(n)
    for k in a.degrees():
        kk = B.dim - k
        out.coeffs[B.offsets[kk]:B.offsets[kk + 1]] += star_matrix(m.g, k, m._grams) @ a.degree_part(k)
    return out


def weil_I(a: PointForm) -> PointForm:
    """Multiply each (p, q) component by ``i^(p-q)``."""
    B = basis(a.n)
    out = PointForm(a.n)
    for k in range(B.dim + 1):
        bd = B.bidegrees(k)
        phase = 1j ** ((bd[:, 0] - bd[:, 1]) % 4) if len(bd) else np.ones(0)
        out.coeffs[B.offsets[k]:B.offsets[k + 1]] = phase * a.degree_part(k)
    return out


def lefschetz_decompose(a: PointForm, m: PointMetric) -> tuple[PointForm, complex]:
    """Split a 2-form as ``a = primitive + scalar * omega`` with ``Lambda(primitive) = 0``."""
    n = _metric_check(a, m)
    if a.degrees() not in ([], [2]):
        raise FormError("Lefschetz decomposition is implemented for 2-forms")
    scalar = complex(contract_Lambda(a, m).coeffs[0]) / n
    return a - scalar * m.omega, scalar


def torsion_adjoint(a: PointForm, m: PointMetric, t: TorsionData) -> PointForm:
    """Pointwise ``*(d omega ^ *L a)`` for a 2-form ``a``."""
    if t is None or t.d_omega is None:
        raise FormError("torsion data with d omega is required")
    if a.degrees() not in ([], [2]):
        raise FormError("torsion_adjoint expects a 2-form")
    return hodge_star(wedge(t.d_omega, hodge_star(lefschetz_L(a, m), m)), m)


def general_torsion_formula(a: PointForm, m: PointMetric, t: TorsionData) -> PointForm:
    """Closed form of the torsion adjoint through the Lefschetz decomposition.

    ``-*(d(omega^(n-2)) ^ I(a_2))/(n-2)! + 2 *(d(omega^(n-1)) a_0)/(n-1)!``; the
    first term is zero for n = 2.
    """
    n = _metric_check(a, m)
    if n < 2:
        raise FormError("needs n >= 2")
    if a.degrees() not in ([], [2]):
        raise FormError("general_torsion_formula expects a 2-form")
    prim, scal = lefschetz_decompose(a, m)
    second = (2.0 * scal / factorial(n - 1)) * hodge_star(t.power(n - 1, n), m)
    if n == 2:
        return second
    first = hodge_star(wedge(t.power(n - 2, n), weil_I(prim)), m) / factorial(n - 2)
    return second - first


def star_primitive_identity_check(a: PointForm, j: int, m: PointMetric, tol: float = 1e-10) -> float:
    """Residual of ``*L^j a = (-1)^(k(k+1)/2) j!/(n-k-j)! L^(n-k-j) I(a)`` for primitive ``a``."""
    n = _metric_check(a, m)
    k = a.homogeneous_degree()
    if np.linalg.norm(contract_Lambda(a, m).coeffs) > tol * (1 + a.coefficient_norm()):
        raise FormError("form is not primitive")
    if j < 0 or j > n - k:
        raise FormError(f"j must lie in 0..{n - k}")
    lhs = a
    for _ in range(j):
        lhs = lefschetz_L(lhs, m)
    lhs = hodge_star(lhs, m)
    rhs = weil_I(a)
    for _ in range(n - k - j):
        rhs = lefschetz_L(rhs, m)
    rhs = ((-1) ** (k * (k + 1) // 2) * factorial(j) / factorial(n - k - j)) * rhs
    return (lhs - rhs).coefficient_norm()


def primitive_projection(a: PointForm, m: PointMetric) -> PointForm:
    """Orthogonal projection of a homogeneous k-form (k <= n) onto ker Lambda."""
    n = _metric_check(a, m)
    k = a.homogeneous_degree()
    if k < 2:
        return a
    lam = contraction_matrix(m.g, k, m._grams)
    # kernel projector in the metric inner product: P = 1 - Lam^* (Lam Lam^*)^+ Lam
    lam_adj = adjoint_matrix(lam, m.gram(k), m.gram(k - 2))
    core = np.linalg.pinv(lam @ lam_adj)
    proj = np.eye(lam.shape[1]) - lam_adj @ core @ lam
    return PointForm.from_degree(n, k, proj @ a.degree_part(k))

