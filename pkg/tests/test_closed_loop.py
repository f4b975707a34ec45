import dataclasses

import numpy as np
import pytest

from offsetmpc import closed_loop as cl
from offsetmpc import estimator as est_mod
from offsetmpc import grnn


def scenario(duration, schedule, mode, **kw):
    return cl.ScenarioConfig(duration=duration, schedule=tuple(schedule),
                             mode=mode, **kw)


def zrec(time=0.0, r=None, y_p=None, z_p=None, u=None, steady=False):
    z2, z3 = np.zeros(2), np.zeros(3)
    return cl.StepRecord(
        time=time, r=z2 if r is None else r, y_p=z3 if y_p is None else y_p,
        z_p=z2 if z_p is None else z_p, u=z2 if u is None else u,
        x_hat=z3, d_learned=z2, d_supp=z2, d_total=z2,
        x_bar=z3, u_bar=z2, qp_objective=0.0, active_set_size=0,
        steady=steady, harvested=False)


def test_schedule_validation():
    with pytest.raises(ValueError):
        scenario(10.0, [(5.0, np.zeros(2))], cl.ControllerMode.NOMINAL)
    with pytest.raises(ValueError):
        scenario(10.0, [(0.0, np.zeros(2)), (0.0, np.ones(2))],
                 cl.ControllerMode.NOMINAL)
    sc = scenario(10.0, [(0.0, np.zeros(2)), (4.0, np.ones(2))],
                  cl.ControllerMode.NOMINAL)
    assert np.array_equal(sc.setpoint_at(3.9), np.zeros(2))
    assert np.array_equal(sc.setpoint_at(4.0), np.ones(2))


def test_origin_is_closed_loop_equilibrium(committed):
    m, dist, gains, cfg = committed
    sc = scenario(30.0, [(0.0, np.zeros(2))], cl.ControllerMode.NOMINAL)
    log = cl.run_scenario(sc, m, dist, gains, cfg,
                          cl.LinearPlant(m, dist, d_star=np.zeros(2)))
    assert len(log.records) == 30
    for rec in log.records:
        assert np.abs(rec.u).max() < 1e-12
        assert np.abs(rec.z_p).max() < 1e-12
        assert np.abs(rec.x_hat).max() < 1e-12


def test_modeled_disturbance_is_rejected_without_offset(committed):
    """On the linear plant the disturbance lies in the modeled subspace, so
    tracking must become exact and the estimate must find d_star."""
    m, dist, gains, cfg = committed
    d_star = np.array([0.01, -0.5])
    r = np.array([0.002, 0.3])
    sc = scenario(200.0, [(0.0, r)], cl.ControllerMode.NOMINAL)
    log = cl.run_scenario(sc, m, dist, gains, cfg,
                          cl.LinearPlant(m, dist, d_star=d_star))
    tail = log.records[-1]
    assert np.abs(tail.z_p - r).max() < 1e-6
    assert np.allclose(tail.d_total, d_star, atol=1e-6)
    assert tail.steady


def test_detect_steady_window():
    recs = [zrec(time=float(k)) for k in range(6)]
    assert cl.detect_steady(recs, M=5)
    assert not cl.detect_steady(recs[:5], M=5)  # needs M+1 records
    moved = recs[:-1] + [zrec(time=5.0, y_p=np.array([1e-3, 0.0, 0.0]))]
    assert not cl.detect_steady(moved, M=5)
    wiggly_u = recs[:-1] + [zrec(time=5.0, u=np.array([1e-3, 0.0]))]
    assert not cl.detect_steady(wiggly_u, M=5)
    # setpoint change inside the window disqualifies it
    switched = recs[:-1] + [zrec(time=5.0, r=np.array([0.01, 0.0]))]
    assert not cl.detect_steady(switched, M=5)
    with pytest.raises(ValueError):
        cl.detect_steady(recs, M=1)


def test_harvest_matches_true_disturbance(committed):
    m, dist, gains, cfg = committed
    d_star = np.array([0.015, 0.8])
    sc = scenario(150.0, [(0.0, np.array([0.001, -0.2]))],
                  cl.ControllerMode.NOMINAL)
    log = cl.run_scenario(sc, m, dist, gains, cfg,
                          cl.LinearPlant(m, dist, d_star=d_star))
    rec = log.records[-1]
    assert rec.steady
    est = est_mod.DisturbanceEstimator(m, dist, gains)
    sample = cl.harvest_sample(est, rec)
    assert sample.residual <= 1e-4
    assert np.allclose(sample.d_ss, d_star, atol=1e-6)
    assert np.array_equal(sample.r, rec.r)


def test_run_scenario_harvests_on_steady(committed):
    m, dist, gains, cfg = committed
    sc = scenario(80.0, [(0.0, np.array([0.001, 0.1]))],
                  cl.ControllerMode.NOMINAL, harvest=True)
    log = cl.run_scenario(sc, m, dist, gains, cfg,
                          cl.LinearPlant(m, dist, d_star=np.array([0.005, -0.1])))
    assert len(log.harvested) >= 1
    flagged = [rec for rec in log.records if rec.harvested]
    assert len(flagged) == len(log.harvested)


def recs_to_log(recs):
    return cl.ClosedLoopLog(records=recs)


def test_metrics_closed_forms():
    offset = np.array([0.1, 0.0])
    recs = [zrec(time=float(k), z_p=offset) for k in range(50)]
    m = cl.metrics(recs_to_log(recs), dt=1.0)
    seg = m["segments"][0]
    assert len(m["segments"]) == 1
    assert seg.ise == pytest.approx(50 * 0.01)
    assert seg.peak == pytest.approx(0.1)
    assert seg.settling is None
    assert np.allclose(seg.terminal_e, [0.1, 0.0])


def test_metrics_settling_time():
    big = np.array([0.05, 0.0])
    recs = [zrec(time=float(k), z_p=big if k < 10 else np.zeros(2))
            for k in range(30)]
    m = cl.metrics(recs_to_log(recs), dt=1.0, settle_tol=1e-3)
    assert m["segments"][0].settling == pytest.approx(10.0)


def test_segment_bounds_split_on_setpoint():
    recs = ([zrec(time=float(k)) for k in range(5)]
            + [zrec(time=float(5 + k), r=np.array([0.01, 0.0]))
               for k in range(5)])
    bounds = cl.segment_bounds(recs)
    assert bounds == [(0, 5), (5, 10)]


def test_bookkeeping_identity_is_enforced():
    with pytest.raises(ValueError):
        cl.StepRecord(
            time=0.0, r=np.zeros(2), y_p=np.zeros(3), z_p=np.zeros(2),
            u=np.zeros(2), x_hat=np.zeros(3),
            d_learned=np.array([0.1, 0.0]), d_supp=np.zeros(2),
            d_total=np.zeros(2), x_bar=np.zeros(3), u_bar=np.zeros(2),
            qp_objective=0.0, active_set_size=0, steady=False, harvested=False)


def test_csv_round_trip(committed, tmp_path):
    m, dist, gains, cfg = committed
    sc = scenario(25.0, [(0.0, np.zeros(2)), (10.0, np.array([0.002, 0.1]))],
                  cl.ControllerMode.NOMINAL, harvest=True)
    log = cl.run_scenario(sc, m, dist, gains, cfg,
                          cl.LinearPlant(m, dist, d_star=np.array([0.01, 0.2])))
    path = tmp_path / "log.csv"
    cl.write_log_csv(log, str(path))
    back = cl.read_log_csv(str(path))
    assert len(back.records) == len(log.records)
    for a, b in zip(log.records, back.records):
        assert a.time == b.time
        for field in ("r", "y_p", "z_p", "u", "x_hat", "d_learned",
                      "d_supp", "d_total", "x_bar", "u_bar"):
            assert np.array_equal(getattr(a, field), getattr(b, field)), field
        assert a.qp_objective == b.qp_objective
        assert a.active_set_size == b.active_set_size
        assert a.steady == b.steady
        assert a.harvested == b.harvested


def test_runs_are_deterministic(committed, tmp_path):
    m, dist, gains, cfg = committed
    sc = scenario(40.0, [(0.0, np.array([0.001, -0.1]))],
                  cl.ControllerMode.NOMINAL, harvest=True)

    def run_once(tag):
        log = cl.run_scenario(sc, m, dist, gains, cfg,
                              cl.LinearPlant(m, dist,
                                             d_star=np.array([0.01, -0.3])))
        p = tmp_path / f"{tag}.csv"
        cl.write_log_csv(log, str(p))
        return p.read_text()

    assert run_once("a") == run_once("b")


def test_warm_start_does_not_change_trajectory(committed, monkeypatch):
    m, dist, gains, cfg = committed
    sc = scenario(30.0, [(0.0, np.array([0.002, 0.2]))],
                  cl.ControllerMode.NOMINAL)
    d_star = np.array([0.01, -0.4])
    warm = cl.run_scenario(sc, m, dist, gains, cfg,
                           cl.LinearPlant(m, dist, d_star=d_star))
    monkeypatch.setattr(cl.ControlLoop, "_shifted_warm",
                        lambda self, tgt: (None, None))
    cold = cl.run_scenario(sc, m, dist, gains, cfg,
                           cl.LinearPlant(m, dist, d_star=d_star))
    for a, b in zip(warm.records, cold.records):
        assert np.allclose(a.u, b.u, atol=1e-9)
        assert a.qp_objective == pytest.approx(b.qp_objective,
                                               rel=1e-9, abs=1e-12)


def test_zero_duration_yields_empty_log(committed):
    m, dist, gains, cfg = committed
    sc = scenario(0.0, [(0.0, np.zeros(2))], cl.ControllerMode.NOMINAL)
    log = cl.run_scenario(sc, m, dist, gains, cfg,
                          cl.LinearPlant(m, dist, d_star=np.zeros(2)))
    assert log.records == []
    assert log.aborted is None


def test_sweep_insufficient_cap_raises(committed):
    m, dist, gains, cfg = committed
    with pytest.raises(cl.SteadyNotReached):
        cl.sweep_harvest(m, dist, gains, cfg,
                         cl.LinearPlant(m, dist, d_star=np.zeros(2)),
                         [np.array([0.001, 0.1])], cap=4, steady_M=5)


def test_sweep_collects_one_sample_per_setpoint(committed):
    m, dist, gains, cfg = committed
    setpoints = [np.array([0.0, 0.0]), np.array([0.001, 0.1]),
                 np.array([-0.001, -0.1])]
    samples, log = cl.sweep_harvest(
        m, dist, gains, cfg,
        cl.LinearPlant(m, dist, d_star=np.array([0.01, 0.3])),
        setpoints, cap=150)
    assert len(samples) == 3
    for sp, s in zip(setpoints, samples):
        assert np.array_equal(s.r, sp)
        assert s.residual <= 1e-4
        assert np.allclose(s.d_ss, [0.01, 0.3], atol=1e-5)


def test_learned_mode_with_exact_map_tracks_immediately(committed):
    """A single-sample map that already stores d_star makes the learned loop
    a perfect feedforward: the supplementary estimate stays at zero."""
    m, dist, gains, cfg = committed
    d_star = np.array([0.01, -0.5])
    g = grnn.make_model(capacity=5, n_out=2)
    g = grnn.add_sample(g, np.zeros(2), d_star)
    sc = scenario(60.0, [(0.0, np.array([0.002, 0.3]))],
                  cl.ControllerMode.LEARNED)
    log = cl.run_scenario(sc, m, dist, gains, cfg,
                          cl.LinearPlant(m, dist, d_star=d_star, x0=None),
                          grnn=g)
    for rec in log.records:
        assert np.array_equal(rec.d_learned, d_star)
        assert np.abs(rec.d_supp).max() < 1e-10
    assert np.abs(log.records[-1].z_p - log.records[-1].r).max() < 1e-8
