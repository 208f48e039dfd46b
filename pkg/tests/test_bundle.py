"""Twisted bundles: Chern connections, curvature, gauge action and degree."""
import math

import numpy as np
import pytest

from donaldson_lab import bundle as bd
from donaldson_lab.grid import Grid, dbar, flat_metric, gauduchon_family, ncomp, poisson_profile


@pytest.fixture(scope="module")
def grid():
    return Grid((16, 16, 8, 8))


@pytest.fixture(scope="module")
def metric(grid):
    return gauduchon_family(0.2, grid)


def test_twist_matrix():
    assert np.array_equal(bd.twist_matrix((1, -1)), [[0, 2], [-2, 0]])


@pytest.mark.parametrize("K,rho", [(1, 0), (2, 0), (2, 1), (3, 2)])
def test_theta_sections_are_holomorphic(grid, K, rho):
    s = bd.theta_section(grid, K, rho)[..., None]
    assert np.max(np.abs(dbar(s, 0, grid, K))) < 1e-9
    assert np.isclose(np.max(np.abs(s)), 1.0)


def test_theta_section_rejects_bad_input(grid):
    with pytest.raises(bd.BundleError):
        bd.theta_section(grid, 0)
    with pytest.raises(bd.BundleError):
        bd.theta_section(grid, 2, 2)


def test_twisted_random_section_automorphy():
    # s(x1 + 1) = exp(2 pi i K y1) s(x1): check on the Bloch-periodic part
    g = Grid((16, 16, 8, 8))
    K = 2
    s = bd.twisted_random_section(g, K, np.random.default_rng(0))
    x1 = np.arange(16) / 16
    y1 = np.arange(16) / 16
    # evaluate the defining sum directly at x1 + 1 for one node
    i, j = 3, 5
    rng = np.random.default_rng(0)
    prof = bd.band_limited_field(g, rng, 2, axes=(1,))
    x0 = rng.uniform(0, 1)

    def direct(x, y):
        return sum(np.exp(2j * np.pi * K * n * y) * np.exp(-((x - n - x0) ** 2) / (2 * 0.3 ** 2))
                   for n in range(-6, 7)) * prof[0, j, 0, 0]
    assert abs(direct(x1[i], y1[j]) - s[i, j, 0, 0]) < 1e-12
    assert abs(direct(x1[i] + 1, y1[j]) - np.exp(2j * np.pi * K * y1[j]) * s[i, j, 0, 0]) < 1e-7


def test_background_curvature_of_line_bundle(grid, metric):
    b = bd.split_bundle(grid, (3,))
    F = bd.curvature(bd.background_connection(b), grid).F
    assert np.max(np.abs(F - bd.background_curvature((3,)))) == 0
    _, idx, sign = bd.forms.basis(2).locate((1,), (1,))
    assert F[0, 0, 0, 0, 0, 0, idx] * sign == pytest.approx(3 * math.pi)


def test_degree_unit_on_flat_metric():
    # deg L_1 = int (i/2pi) pi dz1^dzb1 ^ omega = 2 c with omega = i c (dz1^dzb1 + dz2^dzb2), c = sqrt(pi/2)
    m = flat_metric(Grid.uniform(8))
    assert bd.degree_unit(m) == pytest.approx(2 * math.sqrt(math.pi / 2), rel=1e-13)
    assert bd.degree_unit(m) == pytest.approx(math.sqrt(2 * math.pi), rel=1e-13)


def test_line_bundle_on_flat_metric_is_hermitian_einstein():
    g = Grid.uniform(8)
    m = flat_metric(g)
    b = bd.split_bundle(g, (2,))
    cf = bd.curvature(bd.chern_connection(b, g), g, m)
    ilf = (1j * cf.LambdaF).real
    assert np.max(np.abs(ilf - bd.slope(b, g, m))) < 1e-12


@pytest.mark.parametrize("degrees", [(1,), (1, -1), (2, 0, -1)])
def test_degree_is_integer_multiple_of_unit(grid, metric, degrees):
    b = bd.split_bundle(grid, degrees)
    ratio = bd.degree(b, grid, metric) / bd.degree_unit(metric)
    assert abs(ratio - sum(degrees)) < 1e-12
    assert np.allclose(bd.summand_slopes(degrees, metric), bd.degree_unit(metric) * np.array(degrees))


def test_degree_invariant_under_metric_change():
    g = Grid.uniform(16)
    m = gauduchon_family(0.2, g)
    rng = np.random.default_rng(0)
    for degrees in [(1, -1), (2, 0, -1)]:
        b = bd.split_bundle(g, degrees)
        d0 = bd.degree(b, g, m)
        for _ in range(2):
            h = bd.random_metric(g, degrees, rng, 0.3, axes=(0, 1, 2, 3))
            assert abs(bd.degree(b.with_h(h), g, m) - d0) < 1e-9


def test_bundle_state_validation(grid):
    a = np.zeros((1, 1, 1, 1, 2, 2, ncomp(1)), dtype=complex)
    h = np.eye(2, dtype=complex).reshape(1, 1, 1, 1, 2, 2)
    bad = a.copy()
    bad[..., 0, 1, 0] = 1.0
    with pytest.raises(bd.BundleError, match="0,1"):
        bd.BundleState((1, -1), bad, h)
    hb = h.copy()
    hb[..., 0, 1] = 1.0
    with pytest.raises(bd.BundleError, match="self-adjoint"):
        bd.BundleState((1, -1), a, hb)
    with pytest.raises(bd.BundleError):
        bd.BundleState((1, -1, 0, 0), a, h)
    with pytest.raises(bd.BundleError):
        bd.BundleState((1, -1), a, -h).check_positive()


def test_sqrtm_pd(grid):
    h = bd.random_metric(grid, (1, -1), np.random.default_rng(1))
    w = bd.sqrtm_pd(h)
    assert np.max(np.abs(w @ w - h)) < 1e-12


def test_dagger_is_involution(grid):
    rng = np.random.default_rng(2)
    phi = rng.normal(size=(2, 2, 2, 2, 2, 2, ncomp(2))) + 1j * rng.normal(size=(2, 2, 2, 2, 2, 2, ncomp(2)))
    assert np.array_equal(bd.dagger(bd.dagger(phi, 2), 2), phi)


@pytest.fixture(scope="module")
def smooth_bundle():
    g = Grid((32, 32, 8, 8))
    rng = np.random.default_rng(5)
    deg = (1, -1)
    w = bd.random_gauge(g, deg, rng, 0.05, band=1)
    h = bd.random_metric(g, deg, rng, 0.05, band=1)
    return g, bd.gauge_integrable_bundle(g, deg, w, h), w


def test_chern_connection_routes_agree(smooth_bundle):
    g, b, _ = smooth_bundle
    A1 = bd.chern_connection(b, g).A
    A2 = bd.chern_connection_via_gauge(b, g).A
    assert np.max(np.abs(A1 - A2)) < 1e-10


@pytest.mark.parametrize("frame", ["cholesky", "sqrt"])
def test_unitary_frame_connection_is_unitary(smooth_bundle, frame):
    g, b, _ = smooth_bundle
    D, w = bd.unitary_frame_connection(b, g, frame)
    assert D.unitarity_residual() < 1e-12
    assert np.max(np.abs(np.conj(np.swapaxes(w, -1, -2)) @ w - b.h)) < 1e-12
    if frame == "cholesky":
        assert np.max(np.abs(w[..., 1, 0])) == 0


def test_frames_give_same_curvature_spectrum(smooth_bundle):
    g, b, _ = smooth_bundle
    m = gauduchon_family(0.2, g)
    spectra = []
    for frame in ("cholesky", "sqrt"):
        D, _ = bd.unitary_frame_connection(b, g, frame)
        spectra.append(np.linalg.eigvalsh(1j * bd.curvature(D, g, m).LambdaF))
    assert np.max(np.abs(spectra[0] - spectra[1])) < 1e-9


def test_unitary_frame_rejects_unknown_name(smooth_bundle):
    with pytest.raises(bd.BundleError):
        bd.unitary_frame(smooth_bundle[1].h, "polar")


def test_chern_of_gauged_bundle_equals_gauge_of_background(smooth_bundle):
    g, b, w = smooth_bundle
    flat_h = b.with_h(np.eye(2, dtype=complex).reshape(1, 1, 1, 1, 2, 2))
    D = bd.chern_connection(flat_h, g)
    Dw = bd.complex_gauge_apply(w, bd.background_connection(bd.split_bundle(g, (1, -1))), g)
    assert np.max(np.abs(D.A - Dw.A)) < 1e-10


def test_curvature_conjugates_under_frame_change(smooth_bundle):
    g, b, _ = smooth_bundle
    m = gauduchon_family(0.2, g)
    FH = bd.curvature(bd.chern_connection(b, g), g, m)
    Dw, w = bd.unitary_frame_connection(b, g)
    Fw = bd.curvature(Dw, g, m)
    conj = np.linalg.inv(w) @ Fw.LambdaF @ w
    assert np.max(np.abs(conj - FH.LambdaF)) < 1e-9


def test_gauge_apply_guard(grid):
    w = np.diag([1.0, 1e-8]).astype(complex).reshape(1, 1, 1, 1, 2, 2)
    D = bd.background_connection(bd.split_bundle(grid, (0, 0)))
    with pytest.raises(bd.BundleError, match="ill-conditioned"):
        bd.complex_gauge_apply(w, D, grid)


def test_integrable_bundles_have_type_11_curvature(smooth_bundle):
    g, b, _ = smooth_bundle
    m = gauduchon_family(0.2, g)
    assert bd.integrability_residual(b, g, m) < 1e-10
    D, _ = bd.unitary_frame_connection(b, g)
    cf = bd.curvature(D, g, m)
    assert cf.type_residual(m) < 1e-9
    assert bd.bianchi_residual(D, cf.F, g, m) < 1e-9


def test_non_integrable_a_detected(grid, metric):
    a = np.zeros((16, 1, 1, 1, 2, 2, ncomp(1)), dtype=complex)
    x1 = grid.coord(0)
    a[..., 0, 0, 2] = 1.0
    a[..., 0, 0, 3] = np.exp(2j * np.pi * x1).reshape(16, 1, 1, 1)
    b = bd.BundleState((0, 0), a, np.eye(2, dtype=complex).reshape(1, 1, 1, 1, 2, 2), integrable=False)
    assert bd.integrability_residual(b, grid, metric) > 1e-2


def test_extension_bundle(grid, metric):
    b = bd.extension_bundle(grid, 1, 0.1)
    assert bd.integrability_residual(b, grid, metric) < 1e-12
    assert abs(bd.degree(b, grid, metric)) < 1e-12
    with pytest.raises(bd.BundleError):
        bd.extension_bundle(grid, 0, 0.1)


def test_curvature_relation_converges_spectrally():
    res = []
    for N in (16, 32):
        g = Grid.uniform(N)
        m = gauduchon_family(0.3, g, poisson_profile(0.1))
        rng = np.random.default_rng(9)
        w = bd.random_gauge(g, (1, -1), rng, 0.05, axes=(0, 1, 2), band=1)
        h = bd.random_metric(g, (1, -1), np.random.default_rng(10), 0.05, axes=(0, 1, 2), band=1)
        Du, _ = bd.unitary_frame_connection(bd.gauge_integrable_bundle(g, (1, -1), w, h), g)
        res.append(bd.curvature_relation_residual(Du, g, m))
    assert res[1] < 1e-8 and res[0] / res[1] > 100


def test_covariant_d_rejects_scalar_field(grid):
    D = bd.background_connection(bd.split_bundle(grid, (1,)))
    with pytest.raises(bd.BundleError):
        bd.covariant_d(D, np.zeros((1, 1, 1, 1, 1)), 0, grid)


def test_unnormalized_metric_is_rejected_for_slopes():
    from donaldson_lab.grid import MetricError, MetricField
    g = Grid.uniform(8)
    raw = MetricField(g, np.eye(2).reshape(1, 1, 1, 1, 2, 2), normalize=False)
    with pytest.raises(MetricError, match="2 pi"):
        bd.degree_unit(raw)
    with pytest.raises(MetricError):
        bd.slope(bd.split_bundle(g, (1,)), g, raw)
