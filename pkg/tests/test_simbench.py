import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats
from scipy.special import expit

import tsbart.simbench as sb
from tsbart.data import TimeGrid
from tsbart.exceptions import ConfigError, NumericalError
from tsbart.sampler import PosteriorDraws
from tsbart.simbench import (
    RHO,
    SIM2_GRID,
    Budget,
    Sim1Config,
    Sim2Config,
    coverage_and_mse,
    f1,
    f2,
    log_loss,
    rescale_factor,
    run_benchmark,
    sim1_f,
    sim1_generate,
    sim2_generate,
    sim2_hazard,
    sim2_hazard_table,
    sim2_weight,
    simulate_events,
    survival_probability,
    wilcoxon,
    write_replicates,
    write_summary,
)

# --- sim1 ---


def test_sim1_f_examples():
    t = np.arange(1.0, 9.0)
    np.testing.assert_array_equal(sim1_f(t, np.zeros((8, 4))), 0.0)
    np.testing.assert_allclose(sim1_f(t, np.tile([1.0, 1.0, 0.0, 0.0], (8, 1))),
                               2 * np.cos(t), atol=1e-15)
    # h = 1 is a full period shift
    np.testing.assert_allclose(sim1_f(t, np.tile([0.5, 0.0, 0.5, 0.5], (8, 1))),
                               0.5 * np.cos(t), atol=1e-14)
    x8 = np.tile([1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.25, 0.0], (8, 1))
    np.testing.assert_allclose(sim1_f(t, x8), np.cos(t) + 2 * np.sin(t + np.pi / 2),
                               atol=1e-14)
    # a trailing pair is pure noise
    x6 = np.tile([1.0, 0.0, 0.0, 0.0, 5.0, 7.0], (8, 1))
    np.testing.assert_allclose(sim1_f(t, x6), np.cos(t), atol=1e-15)


def test_sim1_generate_shape_and_determinism():
    cfg = Sim1Config(n=300, p=6, seed=4)
    a, b = sim1_generate(cfg), sim1_generate(cfg)
    np.testing.assert_array_equal(a.train.X, b.train.X)
    np.testing.assert_array_equal(a.test.response, b.test.response)
    assert a.train.X.shape == (300, 6) and a.test.n == 300
    assert set(np.unique(a.train.t)) <= set(range(1, 9))
    np.testing.assert_allclose(a.f_train, sim1_f(a.train.t, a.train.X))
    c = sim1_generate(Sim1Config(n=300, p=6, seed=5))
    assert not np.array_equal(a.train.X, c.train.X)


def test_sim1_pair_correlation_and_noise():
    d = sim1_generate(Sim1Config(n=20_000, p=4, pair_correlation=0.5, seed=1))
    X = d.train.X
    r01 = np.corrcoef(X[:, 0], X[:, 1])[0, 1]
    r02 = np.corrcoef(X[:, 0], X[:, 2])[0, 1]
    # sd of a sample correlation near 0.5 with n = 2e4 is about 0.005
    assert abs(r01 - 0.5) < 0.02
    assert abs(r02) < 0.03
    resid = d.train.response - d.f_train
    assert np.var(resid) == pytest.approx(1.0, abs=0.05)


@pytest.mark.parametrize("kw", [dict(p=5), dict(p=2), dict(n=0), dict(pair_correlation=1.0)])
def test_sim1_config_validation(kw):
    with pytest.raises(ConfigError):
        Sim1Config(**kw)


# --- sim2 ---


def test_rho_and_continuity():
    assert RHO == pytest.approx(1 + math.log(0.1) / math.log(0.75), abs=1e-15)
    assert RHO == pytest.approx(9.0039228, abs=1e-7)
    assert f1(0.75) == pytest.approx(0.05625, abs=1e-15)
    assert f2(0.75) == pytest.approx(0.05625, abs=1e-15)
    assert f2(1.0) == pytest.approx(0.75)
    np.testing.assert_array_equal(f2([0.0, 0.3, 0.75]), f2(0.75))


def test_weights():
    sym = np.array([[0.3, 0.3, 0.8, 0.8, 0.0]])
    assert sim2_weight("linear", sym)[0] == pytest.approx(0.5)
    x = np.array([[1.0, 0.0, 1.0, 0.0, 0.0]])
    assert sim2_weight("linear", x)[0] == pytest.approx(0.9999546, abs=1e-7)
    assert sim2_weight("linear", x)[0] == pytest.approx(expit(10.0))
    assert sim2_weight("nonlinear_interaction", [[0.9, 0.2, 0.1, 0.9, 0.0]])[0] == 0.5
    assert sim2_weight("linear_interaction", [[0.5] * 5])[0] == 0.5
    with pytest.raises(ConfigError):
        sim2_weight("cubic", x)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=5, max_size=5))
def test_nonlinear_swap_symmetry(v):
    x = np.array([v])
    swapped = x[:, [2, 3, 0, 1, 4]]
    w = sim2_weight("nonlinear_interaction", x)[0]
    assert w + sim2_weight("nonlinear_interaction", swapped)[0] == pytest.approx(1.0)


def test_hazard_worked_example():
    # weight exp(-10) / (1 + exp(-10)) on the late-rise curve
    x = np.array([[0.0, 1.0, 0.0, 1.0, 0.0]])
    h = sim2_hazard("linear", 0.4, x)[0]
    w = expit(-10.0)
    assert h == pytest.approx((1 - w) * 0.03 + w * 0.05625, abs=1e-15)
    assert h == pytest.approx(0.03, abs=2e-6)
    x5 = np.array([[0.5, 0.5, 0.5, 0.5, 1.0]])
    assert sim2_hazard("linear", 0.4, x5, scale=0.5)[0] == pytest.approx(
        0.5 * (0.25 + 0.5 * 0.05625 + 0.5 * 0.03))


def test_hazard_shapes_ordered():
    t = SIM2_GRID
    hi = np.array([[1.0, 0.0, 1.0, 0.0, 0.0]])
    lo = np.array([[0.0, 1.0, 0.0, 1.0, 0.0]])
    a = sim2_hazard_table("linear", t, hi)[0]
    b = sim2_hazard_table("linear", t, lo)[0]
    late = t > 0.75
    assert np.all(a[late] > b[late])
    # both curves coincide at the kink
    assert a[t == 0.8][0] > b[t == 0.8][0]
    assert np.all(np.diff(a) >= 0) and np.all(np.diff(b) >= 0)
    plus = sim2_hazard_table("linear", t, np.array([[1.0, 0.0, 1.0, 0.0, 1.0]]))[0]
    np.testing.assert_allclose(plus - a, 0.25, atol=1e-15)


def test_table_matches_pointwise():
    rng = np.random.default_rng(0)
    X = rng.random((7, 10))
    tab = sim2_hazard_table("nonlinear_interaction", SIM2_GRID, X, 0.3)
    for j, t in enumerate(SIM2_GRID):
        np.testing.assert_allclose(tab[:, j], sim2_hazard("nonlinear_interaction", t, X, 0.3))


def test_clamp_warns():
    x = np.array([[0.0, 0.0, 0.0, 0.0, 1.0]])
    with pytest.warns(RuntimeWarning, match="clamp"):
        h = sim2_hazard("linear", 1.0, x, scale=10.0)
    assert h[0] == sb.HAZARD_CAP


def test_rescale_factor():
    raw = np.full((3, 4), 0.1)
    c = rescale_factor(raw, 0.5)
    assert survival_probability(c * raw).mean() == pytest.approx(0.5, abs=1e-10)
    assert c * 0.1 == pytest.approx(1 - 0.5**0.25, abs=1e-10)
    with pytest.raises(ConfigError):
        rescale_factor(np.zeros((2, 3)), 0.5)


GRID3 = TimeGrid(np.array([0.0, 0.5, 1.0]))


def test_simulate_events_extremes():
    rng = np.random.default_rng(0)
    X = np.zeros((50, 1))
    none = simulate_events(np.zeros((50, 3)), GRID3, X, rng)
    assert none.response.sum() == 0
    np.testing.assert_array_equal(none.t, 1.0)
    cap = np.zeros((50, 3))
    cap[:, 0] = sb.HAZARD_CAP
    first = simulate_events(cap, GRID3, X, rng)
    np.testing.assert_array_equal(first.response, 1.0)
    np.testing.assert_array_equal(first.t, 0.0)
    assert first.response_name == "event"
    with pytest.raises(ConfigError):
        simulate_events(np.ones((2, 3)), GRID3, np.zeros((2, 1)), rng)


def test_simulate_events_geometric():
    n, h = 100_000, 0.2
    rng = np.random.default_rng(7)
    ds = simulate_events(np.full((n, 3), h), GRID3, np.zeros((n, 1)), rng)
    k = GRID3.index_of(ds.t)
    for s in range(3):
        p = (1 - h) ** s * h
        got = np.mean((k == s) & (ds.response == 1))
        assert abs(got - p) <= 3 * math.sqrt(p * (1 - p) / n)
    surv = np.mean(ds.response == 0)
    p = (1 - h) ** 3
    assert abs(surv - p) <= 3 * math.sqrt(p * (1 - p) / n)


@pytest.mark.parametrize("scenario", sb.SCENARIOS)
def test_sim2_generate_calibrated(scenario):
    d = sim2_generate(Sim2Config(scenario=scenario, n=10_000, seed=3, n_test=50))
    assert np.all((d.h_train > 0) & (d.h_train < 1))
    assert np.all((d.h_test > 0) & (d.h_test < 1))
    assert survival_probability(d.h_train).mean() == pytest.approx(0.5, abs=1e-9)
    assert abs(np.mean(d.train.response == 0) - 0.5) <= 0.03
    assert d.h_test.shape == (50, SIM2_GRID.size)
    again = sim2_generate(Sim2Config(scenario=scenario, n=10_000, seed=3, n_test=50))
    np.testing.assert_array_equal(d.train.t, again.train.t)


def test_sim2_config_validation():
    with pytest.raises(ConfigError):
        Sim2Config(scenario="quadratic")
    with pytest.raises(ConfigError):
        Sim2Config(target_survival=1.0)
    with pytest.raises(ConfigError):
        Sim2Config(p=4)


# --- metrics ---


def _draws(pred, sigma2=None, probit=False):
    S, P = pred.shape
    one = np.ones(S)
    return PosteriorDraws(
        kind="binary" if probit else "continuous", mode="tsbart",
        grid=TimeGrid(np.array([0.0, 1.0])), alpha=np.zeros(2),
        sigma2=one if sigma2 is None else sigma2, eta=one, gamma2=one,
        loglik_total=np.zeros(S), loglik=None, pred_t=np.zeros(P), pred_X=np.zeros((P, 1)),
        pred_latent=pred, seed=0, length_scale=1.0, acceptance={})


def test_log_loss_examples():
    assert log_loss(np.zeros((3, 4))) == 0.0
    assert log_loss(np.full((2, 5), math.log(0.2))) == pytest.approx(math.log(0.2))
    rng = np.random.default_rng(0)
    L = rng.normal(-1, 0.3, (10, 6))
    assert log_loss(np.hstack([L, L])) == pytest.approx(log_loss(L), abs=1e-14)


def test_predictive_loglik():
    pred = np.array([[0.0, 1.0], [0.5, -1.0]])
    d = _draws(pred, sigma2=np.array([1.0, 4.0]))
    L = sb.predictive_loglik(d, [0.0, 0.0])
    expect = np.array([[stats.norm.logpdf(0, 0, 1), stats.norm.logpdf(0, 1, 1)],
                       [stats.norm.logpdf(0, 0.5, 2), stats.norm.logpdf(0, -1, 2)]])
    np.testing.assert_allclose(L, expect, atol=1e-14)
    b = sb.predictive_loglik(_draws(pred, probit=True), [1.0, 0.0])
    np.testing.assert_allclose(b, [[math.log(0.5), stats.norm.logsf(1.0)],
                                   [stats.norm.logcdf(0.5), stats.norm.logsf(-1.0)]],
                               atol=1e-14)


def test_coverage_examples():
    truth = np.linspace(-1, 1, 20)
    c, e = coverage_and_mse(np.tile(truth, (100, 1)), truth)
    assert c == 1.0 and e < 1e-30
    rng = np.random.default_rng(2)
    n = 4000
    values = rng.random((2000, n))
    c, _ = coverage_and_mse(values, rng.random(n))
    assert abs(c - 0.95) <= 3 * math.sqrt(0.95 * 0.05 / n) + 0.005
    c, e = coverage_and_mse(values + 10.0, rng.random(n))
    assert c == 0.0 and e > 90


# --- Wilcoxon ---


def test_wilcoxon_exact_enumeration():
    d = np.array([1.0, 2.0, 3.0, -1.0])
    res = wilcoxon(d)
    ranks = stats.rankdata(np.abs(d))
    assert res.statistic == 8.5 and res.n == 4
    sums = [sum(r for r, s in zip(ranks, signs) if s) for signs in
            itertools.product([0, 1], repeat=4)]
    lo = np.mean(np.array(sums) <= 8.5)
    hi = np.mean(np.array(sums) >= 8.5)
    assert res.p_value == pytest.approx(min(1.0, 2 * min(lo, hi)), abs=1e-15)


def test_wilcoxon_identical_and_zeros():
    x = np.arange(5.0)
    r = wilcoxon(x, x)
    assert r.p_value == 1.0 and r.n == 0
    assert wilcoxon([0.0, 1.0, -2.0, 3.0]).n == 3


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(5, 20))
def test_wilcoxon_exact_matches_scipy(seed, n):
    rng = np.random.default_rng(seed)
    d = rng.normal(0.3, 1.0, n)
    ours = wilcoxon(d)
    ref = stats.wilcoxon(d, zero_method="wilcox", method="exact")
    assert ours.p_value == pytest.approx(ref.pvalue, abs=1e-12)


def test_wilcoxon_approx_matches_scipy():
    rng = np.random.default_rng(1)
    d = np.round(rng.normal(0.2, 1.0, 60), 1)
    d = d[d != 0]
    ours = wilcoxon(d)
    ref = stats.wilcoxon(d, zero_method="wilcox", correction=False, method="approx")
    assert ours.p_value == pytest.approx(ref.pvalue, abs=1e-12)


def test_wilcoxon_pairs_all_positive():
    r = wilcoxon(np.arange(1.0, 11.0), np.zeros(10))
    assert r.statistic == 55.0
    assert r.p_value == pytest.approx(2 / 2**10, abs=1e-15)


# --- benchmark harness ---

TINY = Budget(m=5, n_draws=40, n_burn=10)


def test_benchmark_single_replicate(tmp_path):
    res = run_benchmark("sim1", Sim1Config(n=60, p=4), 1, TINY, seed=3)
    assert [r.method for r in res.reports] == ["tsbart", "vanilla_bart"]
    for row, rep in zip(res.summary, res.reports):
        assert row["replicates"] == 1 and row["failed"] == 0
        assert row["logloss_out"] == rep.logloss_out
        assert row["mse"] == rep.mse
        assert len(rep.per_time_coverage) == 8
    write_summary(res, tmp_path / "s.csv")
    write_replicates(res, tmp_path / "r.csv")
    head = (tmp_path / "s.csv").read_text().splitlines()[0]
    assert head == "p,n,method,replicates,failed,logloss_in,logloss_out,coverage,mse,p_value"
    assert len((tmp_path / "r.csv").read_text().splitlines()) == 3


def test_benchmark_sim2_runs():
    cfg = Sim2Config(scenario="linear", n=60, n_test=5)
    res = run_benchmark("sim2", cfg, 2, TINY, seed=1)
    assert all(r.ok for r in res.reports)
    for r in res.reports:
        assert 0.0 <= r.coverage <= 1.0
        assert r.logloss_out < 0
    assert 0.0 <= res.p_value <= 1.0


def test_benchmark_failure_recorded(monkeypatch):
    real = sb.run_chain

    def flaky(dataset, cfg, predict_at=None):
        if cfg.mode == "vanilla_bart":
            raise NumericalError("singular")
        return real(dataset, cfg, predict_at=predict_at)

    monkeypatch.setattr(sb, "run_chain", flaky)
    res = run_benchmark("sim1", Sim1Config(n=40, p=4), 2, TINY)
    bad = [r for r in res.reports if not r.ok]
    assert len(bad) == 2 and "singular" in bad[0].error
    van = res.summary[1]
    assert van["replicates"] == 0 and van["failed"] == 2 and math.isnan(van["mse"])
    assert math.isnan(res.p_value)
    assert res.summary[0]["replicates"] == 2


def test_benchmark_validation():
    with pytest.raises(ConfigError):
        run_benchmark("sim3", Sim1Config(), 1, TINY)
    with pytest.raises(ConfigError):
        run_benchmark("sim1", Sim1Config(), 0, TINY)
