"""HN types, HYM lower bounds, filtrations and the approximate-critical residual."""
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from donaldson_lab import bundle as bd
from donaldson_lab import flow as fl
from donaldson_lab import stability as sb
from donaldson_lab.grid import Grid, flat_metric, gauduchon_family


def test_hn_type_expansion():
    assert sb.hn_type([(2, 1.5), (1, -3.0)]).mu == (1.5, 1.5, -3.0)


@pytest.mark.parametrize("blocks", [[], [(1, 1.0), (1, 1.0)], [(1, -1.0), (1, 1.0)], [(0, 1.0)]])
def test_hn_type_rejects(blocks):
    with pytest.raises(sb.StabilityError):
        sb.hn_type(blocks)


def test_hn_type_must_be_non_increasing():
    with pytest.raises(sb.StabilityError):
        sb.HNType((0.0, 1.0))


def test_hym_of_type_values():
    assert sb.hym_of_type((1, -1)) == pytest.approx(4 * math.pi)
    assert sb.hym_of_type((2, 0, -1), 1.0) == pytest.approx(6 * math.pi)
    assert sb.hym_of_type((1, -1), 2.0, 1.0) == pytest.approx(8 * math.pi)
    with pytest.raises(sb.StabilityError):
        sb.hym_of_type((1,), 0.5)


@settings(max_examples=30, deadline=None)
@given(mu=st.lists(st.floats(-5, 5), min_size=1, max_size=3), alpha=st.floats(1, 4), N=st.floats(-2, 2))
def test_hym_of_type_is_convex_lower_bound_of_constant_spectrum(mu, alpha, N):
    # for a constant iLambdaF with eigenvalues mu, HYM_{alpha,N} = 2 pi sum |mu - N|^alpha
    g = Grid.uniform(8)
    m = flat_metric(g)
    lam = np.array(mu)
    val = m.integrate(np.full((1, 1, 1, 1), np.sum(np.abs(lam - N) ** alpha))).real
    assert val == pytest.approx(sb.hym_of_type(mu, alpha, N), rel=1e-12, abs=1e-12)


def test_coordinate_projections_are_valid(rng):
    g = Grid((16, 16, 8, 8))
    h = bd.random_metric(g, (1, 0, -1), rng, 0.3)
    w = bd.unitary_frame(h)
    f = sb.FiltrationSpec([(1, 2.0), (1, 0.0), (1, -2.0)])
    res = f.validate(w)
    assert max(res.values()) < 1e-10


def test_filtration_validate_rejects_bad_projection():
    p = np.array([[1.0, 1.0], [0.0, 0.0]], dtype=complex).reshape(1, 1, 1, 1, 2, 2)
    f = sb.FiltrationSpec([(1, 1.0), (1, -1.0)], projections=[p])
    with pytest.raises(sb.StabilityError, match="selfadjoint"):
        f.validate()


def test_filtration_needs_frame():
    with pytest.raises(sb.StabilityError):
        sb.FiltrationSpec([(1, 1.0), (1, -1.0)]).resolve(None)


def test_psi_is_diagonal_for_coordinate_frame():
    w = np.eye(2, dtype=complex).reshape(1, 1, 1, 1, 2, 2)
    psi = sb.psi_hn(sb.FiltrationSpec([(1, 3.0), (1, -1.0)]), w)
    assert np.allclose(psi[0, 0, 0, 0], np.diag([3.0, -1.0]))


def test_split_bundle_is_exactly_critical_on_flat_metric():
    g = Grid.uniform(8)
    m = flat_metric(g)
    deg = (1, -1)
    s = fl.FlowState.initial(bd.split_bundle(g, deg), g, m)
    mu = bd.summand_slopes(deg, m)
    f = sb.FiltrationSpec([(1, mu[0]), (1, mu[1])])
    for p in (1.0, 2.0, math.inf):
        assert sb.approx_critical_residual(s, f, p) < 1e-12
    wrong = sb.FiltrationSpec([(1, -mu[1] + 1e-3), (1, mu[1])])
    assert sb.approx_critical_residual(s, wrong, math.inf) > 1e-4


def test_swapped_labels_give_known_residual():
    # psi with the two blocks exchanged differs by 2 mu on each diagonal entry
    g = Grid.uniform(8)
    m = flat_metric(g)
    deg = (1, -1)
    s = fl.FlowState.initial(bd.split_bundle(g, deg), g, m)
    mu = bd.summand_slopes(deg, m)[0]
    ev = fl.evaluate(s.bundle, g, m)
    psi = np.diag([-mu, mu]).astype(complex).reshape(1, 1, 1, 1, 2, 2)
    assert sb.approx_critical_residual_field(ev.iLF, psi, m, math.inf) == pytest.approx(2 * mu, rel=1e-12)
    assert sb.approx_critical_residual_field(ev.iLF, psi, m, 2.0) == pytest.approx(
        2 * mu * math.sqrt(2) * math.sqrt(2 * math.pi), rel=1e-12)


def test_holomorphy_residual_of_split_and_extension():
    g = Grid((16, 16, 8, 8))
    m = gauduchon_family(0.2, g)
    pi = np.diag([1.0, 0.0]).astype(complex).reshape(1, 1, 1, 1, 2, 2)
    ext = bd.extension_bundle(g, 1, 0.1)
    K = ext.K
    # span(e1) is holomorphic for the extension (a is strictly upper triangular)
    assert sb.holomorphy_residual(pi, ext.a, g, K, m) < 1e-12
    pi2 = np.diag([0.0, 1.0]).astype(complex).reshape(1, 1, 1, 1, 2, 2)
    assert sb.holomorphy_residual(pi2, ext.a, g, K, m) > 1e-3


def test_residual_rejects_small_p():
    with pytest.raises(sb.StabilityError):
        sb.approx_critical_residual_field(np.zeros((1, 1, 1, 1, 1, 1)), np.zeros((1, 1, 1, 1, 1, 1)),
                                          flat_metric(Grid.uniform(8)), 0.5)
