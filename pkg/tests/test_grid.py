"""Torus grid: spectral derivatives, twisted sections, metrics and checkpoints."""
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from donaldson_lab import grid as G
from donaldson_lab.grid import Grid, MetricField, ncomp

TWO_PI = 2 * np.pi


@pytest.mark.parametrize("shape", [(16, 16, 8), (16, 16, 7, 8), (16, 16, 6, 8)])
def test_grid_validation(shape):
    with pytest.raises(G.GridError):
        Grid(shape)


def test_spacing_and_coords():
    g = Grid((16, 8, 8, 8))
    assert g.h_min == 1 / 16
    assert g.coord(1).shape == (1, 8, 1, 1)


def test_fft_derivative_of_sine_is_exact():
    g = Grid.uniform(16)
    x = g.coord(0)
    d = G.partial(np.sin(TWO_PI * 3 * x), g, 0)
    assert np.max(np.abs(d - TWO_PI * 3 * np.cos(TWO_PI * 3 * x))) < 1e-12


def test_nyquist_mode_dropped_for_first_derivative():
    g = Grid.uniform(8)
    x = g.coord(2)
    assert np.max(np.abs(G.partial(np.cos(np.pi * 8 * x), g, 2))) < 1e-12


def test_length_one_axis_derivative_is_zero():
    g = Grid.uniform(8)
    f = np.ones((8, 1, 1, 1))
    assert np.all(G.partial(f, g, 1) == 0)


def test_twisted_x1_derivative_uses_bloch_phase():
    # s = exp(i theta x1) u with theta = 2 pi K y1 satisfies s(x1+1) = exp(2 pi i K y1) s
    g = Grid((16, 16, 8, 8))
    K = 2
    x1, y1 = g.coord(0), g.coord(1)
    theta = TWO_PI * K * y1
    u = np.cos(TWO_PI * x1) + 0.3 * np.sin(TWO_PI * 2 * x1) * np.cos(TWO_PI * y1)
    du = -TWO_PI * np.sin(TWO_PI * x1) + 0.6 * TWO_PI * np.cos(TWO_PI * 2 * x1) * np.cos(TWO_PI * y1)
    s = np.exp(1j * theta * x1) * u
    d = G.partial(s, g, 0, twist=K)
    expected = np.exp(1j * theta * x1) * (1j * theta * u + du)
    assert np.max(np.abs(d - expected)) < 1e-11


def test_twisted_derivatives_commute_to_background_curvature():
    # [d_x1, d_y1 - 2 pi i K x1] = -2 pi i K on a smooth section
    from donaldson_lab.bundle import theta_section
    g = Grid((32, 32, 8, 8))
    K = 1
    s = theta_section(g, K)
    xy = G.partial(G.partial(s, g, 1, twist=K), g, 0, twist=K)
    yx = G.partial(G.partial(s, g, 0, twist=K), g, 1, twist=K)
    assert np.max(np.abs(xy - yx - (-2j * np.pi * K) * s)) < 1e-9


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2 ** 31), k=st.integers(0, 2))
def test_d_squared_vanishes(seed, k):
    rng = np.random.default_rng(seed)
    g = Grid.uniform(8)
    a = G.band_limited_field(g, rng, 2, extra_shape=(ncomp(k),))
    assert np.max(np.abs(G.d(G.d(a, k, g), k + 1, g))) < 1e-10
    assert np.max(np.abs(G.dbar(G.dbar(a, k, g), k + 1, g))) < 1e-10
    dd = G.dee(G.dbar(a, k, g), k + 1, g) + G.dbar(G.dee(a, k, g), k + 1, g)
    assert np.max(np.abs(dd)) < 1e-10


def test_dbar_squared_vanishes_on_twisted_sections():
    from donaldson_lab.bundle import twisted_random_section
    g = Grid((16, 16, 8, 8))
    rng = np.random.default_rng(3)
    s = twisted_random_section(g, 1, rng)[..., None]
    ddb = G.dbar(G.dbar(s, 0, g, twist=1), 1, g, twist=1)
    assert np.max(np.abs(ddb)) < 1e-9


def test_band_limited_field_is_resolution_independent():
    f16 = G.band_limited_field(Grid.uniform(16), np.random.default_rng(7), 3, axes=(0, 1))
    f32 = G.band_limited_field(Grid.uniform(32), np.random.default_rng(7), 3, axes=(0, 1))
    assert np.max(np.abs(f16 - f32[::2, ::2])) < 1e-12


def test_band_limited_field_warns_on_unresolved_band(caplog):
    f = G.band_limited_field(Grid.uniform(8), np.random.default_rng(0), 4)
    assert "not resolved" in caplog.text
    assert np.all(np.isfinite(f))


def test_poisson_profile_modes():
    prof = G.poisson_profile(0.5)
    assert prof[1] == -0.5j * 0.5 and prof[-3] == 0.5j * 0.125
    x = np.linspace(0, 1, 7)
    # closed form of sum rho^m sin(2 pi m x)
    r = 0.5
    closed = r * np.sin(TWO_PI * x) / (1 - 2 * r * np.cos(TWO_PI * x) + r * r)
    assert np.max(np.abs(G.fourier_profile(prof, x) - closed)) < 1e-12


def test_metric_validation_names_node():
    g = Grid.uniform(8)
    arr = np.broadcast_to(np.eye(2, dtype=complex), (8, 1, 1, 1, 2, 2)).copy()
    arr[5, 0, 0, 0] = -np.eye(2)
    with pytest.raises(G.MetricError, match=r"\(5, 0, 0, 0\)"):
        MetricField(g, arr)
    arr = np.broadcast_to(np.eye(2, dtype=complex), (1, 1, 1, 1, 2, 2)).copy()
    arr[..., 0, 1] = 0.5
    with pytest.raises(G.MetricError):
        MetricField(g, arr)


def test_flat_metric_normalisation():
    m = G.flat_metric(Grid.uniform(8))
    assert abs(m.total_volume() - TWO_PI) < 1e-12
    assert abs(m.g[0, 0, 0, 0, 0, 0] - math.sqrt(math.pi / 2)) < 1e-14


def test_p_operator_plane_wave_on_unit_metric():
    # on g = I: P exp(2 pi i x1) = pi^2 exp(2 pi i x1)
    g = Grid.uniform(8)
    m = MetricField(g, np.eye(2).reshape(1, 1, 1, 1, 2, 2), normalize=False)
    f = np.broadcast_to(np.exp(1j * TWO_PI * g.coord(0)), (8, 8, 8, 8))
    assert np.max(np.abs(m.p_operator(f) - math.pi ** 2 * f)) < 1e-11


@pytest.mark.parametrize("eps", [0.1, 0.2, 0.5])
def test_gauduchon_family(eps):
    g = Grid.uniform(16)
    m = G.gauduchon_family(eps, g)
    assert m.is_gauduchon and not m.is_kahler
    assert m.gauduchon_residual() <= 1e-11
    assert abs(m.total_volume() - TWO_PI) <= 1e-10
    assert m.l2_norm(m.d_omega, 3) >= 0.05 * eps
    rng = np.random.default_rng(1)
    for _ in range(5):
        assert m.gauduchon_ibp_check(G.band_limited_field(g, rng, 3)) <= 1e-10


def test_gauduchon_family_rejects_degenerate_eps():
    with pytest.raises(G.MetricError, match="x1 node"):
        G.gauduchon_family(1.2, Grid.uniform(8))


def test_eps_zero_is_flat():
    m = G.gauduchon_family(0.0, Grid.uniform(8))
    assert m.kind == "flat" and m.is_kahler


def test_negative_control_is_not_gauduchon():
    g = Grid.uniform(16)
    m = G.negative_control_metric(0.2, g)
    assert not m.is_gauduchon
    assert m.gauduchon_residual() > 1e-3
    f = np.broadcast_to(np.cos(TWO_PI * g.coord(0)), (16,) * 4)
    assert m.gauduchon_ibp_check(f) > 1e-3


def test_d_adjoint_matches_discrete_adjoint():
    g = Grid.uniform(8)
    m = G.gauduchon_family(0.3, g)
    a = G.band_limited_field(g, np.random.default_rng(2), 2, extra_shape=(ncomp(2),))
    assert np.max(np.abs(m.d_adjoint(a, 2) - m.d_adjoint_discrete(a, 2))) < 1e-10


@settings(max_examples=8, deadline=None)
@given(seed=st.integers(0, 2 ** 31), k=st.integers(1, 3))
def test_d_adjoint_is_l2_adjoint(seed, k):
    rng = np.random.default_rng(seed)
    g = Grid.uniform(8)
    m = G.gauduchon_family(0.3, g, G.poisson_profile(0.2))
    a = G.band_limited_field(g, rng, 2, extra_shape=(ncomp(k - 1),))
    b = G.band_limited_field(g, rng, 2, extra_shape=(ncomp(k),))
    lhs = m.l2_inner(G.d(a, k - 1, g), b, k)
    rhs = m.l2_inner(a, m.d_adjoint_discrete(b, k), k - 1)
    assert abs(lhs - rhs) < 1e-10 * (1 + abs(lhs))


def test_demailly_relation_converges_spectrally():
    res = []
    for N in (16, 32):
        g = Grid.uniform(N)
        m = G.gauduchon_family(0.3, g, G.poisson_profile(0.1))
        a = G.band_limited_field(g, np.random.default_rng(4), 3, extra_shape=(ncomp(1),))
        res.append(m.demailly_residual(a, 1))
    assert res[1] < 1e-8 and res[0] / res[1] > 100


def test_demailly_relation_on_kahler_metric_is_exact():
    g = Grid.uniform(8)
    m = G.flat_metric(g)
    a = G.band_limited_field(g, np.random.default_rng(5), 2, extra_shape=(ncomp(2),))
    assert m.demailly_residual(a, 2) < 1e-11


def test_lp_norms_of_constant():
    m = G.gauduchon_family(0.2, Grid.uniform(8))
    one = np.ones((1, 1, 1, 1, 1))
    for p in (1.0, 2.0, 3.0):
        assert math.isclose(m.lp_norm(one, p), TWO_PI ** (1 / p), rel_tol=1e-12)
    assert m.lp_norm(one, math.inf) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        m.lp_norm(one, 0.5)


def test_save_load_roundtrip(tmp_path):
    a = (np.arange(24).reshape(2, 3, 4) * (1 - 0.5j)).astype(complex)
    p = tmp_path / "f.bin"
    G.save_field(p, a, {"t": 0.5})
    b, meta = G.load_field(p)
    assert np.array_equal(a, b) and meta == {"t": 0.5}
    header = json.loads(p.read_bytes().split(b"\n", 1)[0])
    assert header["dtype"] == "complex128-le" and header["offset"] % 64 == 0
    assert p.stat().st_size == header["offset"] + a.size * 16


def test_load_rejects_unknown_dtype(tmp_path):
    p = tmp_path / "f.bin"
    p.write_bytes(json.dumps({"shape": [1], "dtype": "float32", "offset": 64}).encode() + b"\n")
    with pytest.raises(ValueError):
        G.load_field(p)
