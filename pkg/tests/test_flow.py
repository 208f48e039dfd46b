"""Heat flow: stepping, monitors, identities, transport and the scalar oracle."""
import math

import numpy as np
import pytest

from donaldson_lab import bundle as bd
from donaldson_lab import flow as fl
from donaldson_lab.grid import Grid, flat_metric, gauduchon_family


@pytest.fixture(scope="module")
def setup():
    g = Grid((16, 16, 8, 8))
    m = gauduchon_family(0.2, g)
    h = bd.random_metric(g, (1, -1), np.random.default_rng(0), 0.3)
    s = fl.FlowState.initial(bd.split_bundle(g, (1, -1), h), g, m)
    return g, m, s


def test_flow_config_validation():
    with pytest.raises(ValueError):
        fl.FlowConfig(dt=0)
    with pytest.raises(ValueError):
        fl.FlowConfig(scheme="leapfrog")
    with pytest.raises(ValueError):
        fl.FlowConfig(hym_pairs=((0.5, 0.0),))
    assert fl.FlowConfig(dt=1e-3, T=0.02).n_steps == 20


def test_hermitian_einstein_state_is_stationary():
    g = Grid.uniform(8)
    m = flat_metric(g)
    s = fl.FlowState.initial(bd.split_bundle(g, (1,)), g, m)
    vmax, he = fl.stationarity(s.bundle, g, m, s.mu)
    assert vmax < 1e-12 and he < 1e-12
    s1 = fl.flow_step(s, 1e-3)
    assert np.max(np.abs(s1.h - s.h)) < 1e-14


def test_initial_mu_is_slope(setup):
    g, m, s = setup
    assert s.mu == pytest.approx(0.0, abs=1e-12)
    assert fl.monitor(s).he_residual > 1.0


def test_velocity_is_hermitian(setup):
    g, m, s = setup
    v = fl.velocity(s.bundle, g, m, s.mu)
    assert np.max(np.abs(v - np.conj(np.swapaxes(v, -1, -2)))) == 0


def test_monitor_is_gauge_invariant_under_rebase(setup):
    g, m, s = setup
    # force a rebase by scaling h
    s2 = fl.FlowState.initial(s.bundle.with_h(9.0 * s.h), g, m)
    r = fl.rebase(s2, threshold=4.0)
    assert not np.allclose(r.gauge, np.eye(2))
    a, b = fl.monitor(s2), fl.monitor(r)
    for f in ("lf_l1", "lf_l2", "lf_linf", "f_l2_sq", "dlf_l2_sq", "trlogh"):
        assert getattr(a, f) == pytest.approx(getattr(b, f), rel=1e-12, abs=1e-12)


def test_rebase_noop_when_well_conditioned(setup):
    g, m, s = setup
    assert fl.rebase(s) is s


def test_short_run_is_monotone(setup):
    g, m, s = setup
    cfg = fl.FlowConfig(dt=1e-3, T=0.05, sample_every=5)
    run = fl.run_flow(s, cfg)
    assert run.violations == []
    assert len(run.history) == 11
    assert run.history[-1].lf_l2 < run.history[0].lf_l2
    assert run.extra["trlogh_drift"] < 1e-8


def test_energy_identity_residual_is_second_order(setup):
    g, m, s = setup
    res = []
    for dt in (4e-3, 2e-3):
        s1 = fl.flow_step(s, dt)
        res.append(fl.energy_identity_residual(fl.point_data(s), fl.point_data(s1)))
    assert 3.0 < res[0] / res[1] < 5.0


def test_identity_residuals_require_time_order(setup):
    g, m, s = setup
    p = fl.point_data(s)
    with pytest.raises(ValueError):
        fl.energy_identity_residual(p, p)
    with pytest.raises(ValueError):
        fl.bochner_residual(p, p, m)


def test_step_halving_then_abort(setup, caplog):
    g, m, s = setup
    with pytest.raises(fl.FlowAbort, match="halvings"):
        fl.flow_step(s, 0.5, max_halvings=1)
    assert "retrying" in caplog.text


def test_monotonicity_violation_detection():
    def sample(t, v):
        return fl.FunctionalSample(t, v, v, v, v, 0.0, {(2.0, 0.0): v}, 0.0, 0.0)
    hist = [sample(0.0, 2.0), sample(0.1, 1.0), sample(0.2, 1.0 + 1e-12), sample(0.3, 1.5)]
    viol = fl.monotonicity_violations(hist)
    assert {v[0] for v in viol} == {0.3}
    assert {v[1] for v in viol} == {"lf_l1", "lf_l2", "lf_linf", "f_l2_sq", "hym_a2_n0"}


def test_sample_columns_match_row(setup):
    g, m, s = setup
    smp = fl.monitor(s)
    smp.extra["x"] = 1.0
    assert len(smp.columns()) == len(smp.row())
    assert smp.columns()[0] == "t" and smp.columns()[-1] == "x"


def test_dft_derivative_matrix():
    n = 16
    x = np.arange(n) / n
    D = fl._dft_derivative_matrix(n)
    assert np.max(np.abs(D @ np.sin(2 * np.pi * 2 * x) - 4 * np.pi * np.cos(2 * np.pi * 2 * x))) < 1e-11


def test_scalar_oracle_pure_forcing():
    u0 = np.zeros((8, 8))
    out = fl.scalar_oracle(np.ones(8), np.full(8, 0.5), u0, 2.0)
    assert np.max(np.abs(out - 1.0)) < 1e-12


def _rank_one_oracle_error(T, dt):
    g = Grid((16, 16, 8, 8))
    m = gauduchon_family(0.2, g)
    rng = np.random.default_rng(3)
    u0 = bd.band_limited_field(g, rng, 2, axes=(0, 1), amplitude=0.3).real
    b = bd.split_bundle(g, (1,), np.exp(u0)[..., None, None].astype(complex))
    s = fl.FlowState.initial(b, g, m)
    cf = bd.curvature(bd.background_connection(b), g, m)
    ilf0 = (1j * cf.LambdaF[..., 0, 0]).real
    forcing = s.mu - np.broadcast_to(ilf0, (16, 1, 1, 1))[:, 0, 0, 0]
    ginv11 = np.linalg.inv(m.g)[:, 0, 0, 0, 0, 0].real
    exact = fl.scalar_oracle(ginv11, forcing, u0[:, :, 0, 0], T).real
    run = fl.run_flow(s, fl.FlowConfig(dt=dt, T=T, sample_every=1000, rebase=False))
    u = np.log(run.state.h[..., 0, 0].real)[:, :, 0, 0]
    return np.max(np.abs(u - exact))


def test_rank_one_flow_matches_scalar_oracle():
    assert _rank_one_oracle_error(0.1, 1e-3) < 1e-8


def test_gauge_transport_stays_unitary(setup):
    g, m, s = setup
    s_end, tr, out = fl.transport_run(s, 1e-3, 3)
    assert tr.unitarity_residual() < 1e-12
    assert all(o[2] < 1e-9 for o in out)
    assert s_end.t == pytest.approx(3e-3)


def test_rebase_exact_with_equal_degree_blocks():
    g = Grid((16, 16, 8, 8))
    m = gauduchon_family(0.2, g)
    deg = (1, 1, -1)
    h = bd.random_metric(g, deg, np.random.default_rng(4), 0.3)
    big = np.diag([30.0, 0.1, 5.0]).astype(complex)
    big[0, 1] = big[1, 0] = 1.0
    s = fl.FlowState.initial(bd.split_bundle(g, deg, big @ h @ big), g, m)
    r = fl.rebase(s)
    assert not np.allclose(r.gauge, np.eye(3))
    avg = np.mean(r.h, axis=(0, 1, 2, 3))
    assert abs(avg[0, 1] - 0) < 1e-12 and abs(avg[0, 0] - 1) < 1e-12
    a, b = fl.monitor(s), fl.monitor(r)
    for f in ("lf_l1", "lf_l2", "lf_linf", "f_l2_sq", "trlogh"):
        assert getattr(a, f) == pytest.approx(getattr(b, f), rel=1e-11)


def test_monitor_records_peak_curvature_location():
    g = Grid((16, 16, 8, 8))
    m = gauduchon_family(0.2, g)
    s = fl.FlowState.initial(bd.split_bundle(g, (1, -1)), g, m)
    ev = fl.evaluate(s.bundle, g, m)
    dens = np.broadcast_to(m.pointwise_sq(ev.F, 2, extra_ndim=2).real, g.shape)
    smp = fl.monitor(s)
    i = int(round(smp.extra["f_peak_x1"] * 16))
    assert smp.extra["f_peak"] == pytest.approx(dens.max(), rel=1e-14)
    assert dens[i].max() == pytest.approx(dens.max(), rel=1e-14)
    assert {"f_peak", "f_peak_x1", "f_peak_y1", "f_peak_x2", "f_peak_y2"} <= set(smp.columns())
