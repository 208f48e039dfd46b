"""Slope bookkeeping: HN types, HYM lower bounds and the Harder-Narasimhan projection.

Filtrations are declared, not searched for.  A :class:`FiltrationSpec` lists
``(rank, slope)`` blocks, ordered by strictly decreasing slope, for a flag of
subbundles.  The projections are either given explicitly or derived from the
coordinate flag ``span(e_1..e_k)`` and the current metric.  Everything is
expressed in the unitary frame ``w`` (``h = w^dagger w``) used by :mod:`donaldson_lab.flow`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .grid import MetricField, dbar


class StabilityError(ValueError):
    pass


@dataclass(frozen=True)
class HNType:
    """Non-increasing tuple of quotient slopes, with multiplicity."""

    mu: tuple

    def __post_init__(self):
        if any(a < b for a, b in zip(self.mu, self.mu[1:])):
            raise StabilityError(f"HN type must be non-increasing, got {self.mu}")

    @property
    def rank(self) -> int:
        return len(self.mu)

    def __iter__(self):
        return iter(self.mu)


def hn_type(blocks) -> HNType:
    """Expand ``[(rank, slope), ...]`` (strictly decreasing slopes) to an r-tuple."""
    blocks = [(int(r), float(s)) for r, s in blocks]
    if not blocks:
        raise StabilityError("at least one block is required")
    for r, _ in blocks:
        if r < 1:
            raise StabilityError("block ranks must be >= 1")
    for (_, a), (_, b) in zip(blocks, blocks[1:]):
        if not a > b:
            raise StabilityError(f"slopes must strictly decrease across blocks, got {a} then {b}")
    return HNType(tuple(s for r, s in blocks for _ in range(r)))


def hym_of_type(mu, alpha: float = 2.0, N: float = 0.0) -> float:
    """``2 pi sum_i |mu_i - N|^alpha``."""
    if alpha < 1:
        raise StabilityError(f"alpha must be >= 1, got {alpha}")
    mu = np.asarray(tuple(mu), dtype=float)
    return float(2 * np.pi * np.sum(np.abs(mu - N) ** alpha))


def hym_gap(sample, mu0) -> float:
    """``HYM_{2,0}`` of a monitored sample minus the lower bound of the type ``mu0``."""
    return sample.hym_value(2.0, 0.0) - hym_of_type(mu0, 2.0, 0.0)


def _herm(x):
    return np.conj(np.swapaxes(x, -1, -2))


def coordinate_projections(w: np.ndarray, ranks) -> list[np.ndarray]:
    """Unitary-frame orthogonal projections onto ``w span(e_1..e_k)`` for cumulative ranks."""
    out = []
    k = 0
    for r in ranks[:-1]:
        k += r
        q, _ = np.linalg.qr(w[..., :, :k])
        out.append(q @ _herm(q))
    return out


@dataclass
class FiltrationSpec:
    """Declared filtration ``0 < E_1 < ... < E_s = E`` with quotient ranks and slopes.

    ``projections`` (optional) holds the proper subbundle projections
    ``pi_1..pi_{s-1}`` as End fields in the unitary frame; without it the
    coordinate flag is used.
    """

    blocks: list
    projections: list | None = None

    def __post_init__(self):
        self.type = hn_type(self.blocks)
        self.blocks = [(int(r), float(s)) for r, s in self.blocks]

    @property
    def ranks(self) -> list[int]:
        return [r for r, _ in self.blocks]

    @property
    def slopes(self) -> list[float]:
        return [s for _, s in self.blocks]

    def resolve(self, w: np.ndarray | None = None) -> list[np.ndarray]:
        if self.projections is not None:
            return list(self.projections)
        if w is None:
            raise StabilityError("coordinate filtrations need the unitary frame w")
        return coordinate_projections(w, self.ranks)

    def validate(self, w: np.ndarray | None = None, tol: float = 1e-10) -> dict:
        """Check idempotence, self-adjointness, nesting and ranks; return residuals."""
        pis = self.resolve(w)
        if len(pis) != len(self.blocks) - 1:
            raise StabilityError("need one projection per proper subbundle")
        res = {"idempotent": 0.0, "selfadjoint": 0.0, "nested": 0.0, "rank": 0.0}
        cum = 0
        for i, p in enumerate(pis):
            cum += self.ranks[i]
            res["idempotent"] = max(res["idempotent"], float(np.max(np.abs(p @ p - p))))
            res["selfadjoint"] = max(res["selfadjoint"], float(np.max(np.abs(p - _herm(p)))))
            res["rank"] = max(res["rank"], float(np.max(np.abs(np.trace(p, axis1=-2, axis2=-1) - cum))))
            if i + 1 < len(pis):
                q = pis[i + 1]
                res["nested"] = max(res["nested"], float(np.max(np.abs(p @ q - p))))
        bad = {k: v for k, v in res.items() if v > (1e-8 if k == "rank" else tol)}
        if bad:
            raise StabilityError(f"malformed filtration: {bad}")
        return res


def psi_hn(f: FiltrationSpec, w: np.ndarray | None = None) -> np.ndarray:
    """``Psi = sum_i mu_i (pi_i - pi_{i-1})`` with ``pi_0 = 0`` and ``pi_s = 1``."""
    pis = f.resolve(w)
    if pis:
        r = pis[0].shape[-1]
        ident = np.broadcast_to(np.eye(r), pis[0].shape)
    else:
        r = f.ranks[0]
        ident = np.eye(r)
    full = pis + [ident]
    prev = np.zeros_like(full[0])
    out = np.zeros_like(full[0], dtype=complex)
    for mu, p in zip(f.slopes, full):
        out = out + mu * (p - prev)
        prev = p
    return out


def holomorphy_residual(pi: np.ndarray, a: np.ndarray, grid, K, m: MetricField) -> float:
    """``||(1 - pi) dbar_E(pi)||_{L^2}`` for a projection in the holomorphic frame."""
    from .bundle import end_wedge, mat_mul
    r = pi.shape[-1]
    dp = dbar(pi[..., None], 0, grid, K, extra_ndim=2)
    comm = end_wedge(a, 1, pi[..., None], 0) - end_wedge(pi[..., None], 0, a, 1)
    res = mat_mul(np.eye(r) - pi, dp + comm)
    return m.l2_norm(res, 1, extra_ndim=2)


def _pointwise_norm(x: np.ndarray, p: float) -> np.ndarray:
    if math.isinf(p):
        return np.linalg.norm(x, ord=2, axis=(-2, -1))
    return np.sqrt(np.sum(np.abs(x) ** 2, axis=(-2, -1)))


def approx_critical_residual_field(iLF: np.ndarray, psi: np.ndarray | FiltrationSpec, m: MetricField, p: float,
                                   w: np.ndarray | None = None) -> float:
    """``||i Lambda F - Psi||_{L^p}``; Frobenius nodewise for finite p, operator norm for p = inf."""
    if p < 1:
        raise StabilityError("p must be >= 1")
    if isinstance(psi, FiltrationSpec):
        psi = psi_hn(psi, w)
    diff = iLF - psi
    return m.lp_norm(None, p, pointwise=_pointwise_norm(diff, p))


def approx_critical_residual(state, psi, p: float) -> float:
    """Residual for a :class:`~donaldson_lab.flow.FlowState` and a Psi field or filtration."""
    from .flow import evaluate
    ev = evaluate(state.bundle, state.grid, state.metric)
    return approx_critical_residual_field(ev.iLF, psi, state.metric, p, ev.w)
