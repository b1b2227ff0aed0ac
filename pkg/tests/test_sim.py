import numpy as np
import pytest
from scipy import stats

from strataflows.hsgp import SeKernelParams, se_gram
from strataflows.sim import (
    GP_FLOW_PARAMS,
    EventBudgetExceeded,
    SitModel,
    events_from_counts,
    exact_gp_draw,
    frozen_waiting_times,
    gp_strata_space,
    simulate_gp_flows,
    simulate_multinomial,
    simulate_sit_gillespie,
    simulate_sit_ode,
    reference_sit_model,
    thin_events,
    thin_observations,
)
from strataflows.strata import FlowCounts, FlowProportions, StrataSpace, Stratum


def no_transmission(model):
    return SitModel(model.strata, np.zeros_like(model.beta), model.gamma, model.mu,
                    model.S0, model.I0, model.T0)


def small_model(N=2000):
    return reference_sit_model(N=N)


# ---------------------------------------------------------------------------
# deterministic SIT


def test_reference_sit_model_layout():
    m = reference_sit_model()
    assert m.ids == ["M:a", "M:b", "F:a", "F:b"]
    np.testing.assert_array_equal(m.N, [6000, 9000, 6000, 9000])
    assert m.beta[0, 2] == 0.1019 and m.beta[2, 0] == 0.0713 and m.beta[0, 1] == 0.0
    sp = m.space()
    assert sp.L == 8 and sp.is_masked("M:a", "M:b")


def test_ode_no_transmission():
    m = no_transmission(reference_sit_model())
    out = simulate_sit_ode(m, (0, 50), t_eval=np.array([0.0, 10.0, 50.0]))
    assert np.all(out.z.values == 0) and out.pi is None
    decay = np.exp(-(m.gamma + m.mu) * np.array([10.0, 50.0]))
    np.testing.assert_allclose(out.trajectory["I"][1:], np.outer(decay, m.I0), rtol=1e-6)


def test_ode_population_conservation_and_monotone_z():
    m = reference_sit_model()
    out = simulate_sit_ode(m, (0, 400))
    tot = sum(out.trajectory[k].sum(axis=1) for k in ("S", "I", "T"))
    assert np.all(np.abs(tot - m.N.sum()) < 1e-6 * m.N.sum())
    Z = out.trajectory["Z"]
    assert np.all(np.diff(Z, axis=0) >= -1e-9)
    assert abs(out.pi.values.sum() - 1) < 1e-12


def test_ode_self_convergence():
    m = reference_sit_model()
    a = simulate_sit_ode(m, (0, 200), window=(190, 200))
    b = simulate_sit_ode(m, (0, 200), window=(190, 200), rtol=0.5e-8, atol=0.5e-10)
    np.testing.assert_allclose(a.z.values, b.z.values, rtol=1e-6)


@pytest.mark.parametrize("norm", ["source", "recipient", "source_total", "total"])
def test_normalization_denominators(norm):
    m = reference_sit_model(normalization=norm)
    D = m.denominators()
    if norm == "source":
        assert D[0, 2] == 6000 and D[1, 2] == 9000
    elif norm == "recipient":
        assert D[0, 2] == 6000 and D[0, 3] == 9000
    elif norm == "source_total":
        assert D[0, 2] == 15000
    else:
        assert np.all(D == 30000)


def test_model_validation():
    m = reference_sit_model()
    with pytest.raises(ValueError):
        SitModel(m.strata, m.beta, -1.0, m.mu, m.S0, m.I0, m.T0)
    with pytest.raises(ValueError):
        SitModel(m.strata, m.beta[:3], m.gamma, m.mu, m.S0, m.I0, m.T0)
    with pytest.raises(ValueError):
        simulate_sit_ode(m, (0, 10), window=(5, 20))


# ---------------------------------------------------------------------------
# Gillespie


def test_gillespie_no_transmission():
    m = no_transmission(small_model())
    out = simulate_sit_gillespie(m, (0, 50), seed=1)
    assert out.z.total == 0


def test_gillespie_reproducible():
    m = small_model()
    a = simulate_sit_gillespie(m, (0, 100), seed=3, window=(90, 100), track_individuals=True)
    b = simulate_sit_gillespie(m, (0, 100), seed=3, window=(90, 100), track_individuals=True)
    c = simulate_sit_gillespie(m, (0, 100), seed=4, window=(90, 100), track_individuals=True)
    np.testing.assert_array_equal(a.events.time, b.events.time)
    np.testing.assert_array_equal(a.events.source_id, b.events.source_id)
    assert not np.array_equal(a.z.values, c.z.values)
    assert a.meta["n_events"] == b.meta["n_events"]


def test_gillespie_population_and_events():
    m = small_model()
    out = simulate_sit_gillespie(m, (0, 100), seed=5, window=(90, 100), track_individuals=True)
    tot = out.trajectory["S"] + out.trajectory["I"] + out.trajectory["T"]
    assert np.all(tot == m.N)
    np.testing.assert_array_equal(out.events.counts(out.space).values, out.z.values)
    # every window recipient is among that stratum's window-infected ids
    for a in range(m.A):
        rec = out.events.recipient_id[out.events.recipient_stratum == a]
        assert np.all(np.isin(rec, out.meta["window_infected"][a]))


def test_gillespie_event_budget():
    with pytest.raises(EventBudgetExceeded):
        simulate_sit_gillespie(small_model(), (0, 100), seed=1, max_events=100)


def test_frozen_state_waiting_times():
    m = small_model()
    dts, ev, rates = frozen_waiting_times(m, 10_000, seed=6)
    total = rates.sum()
    assert stats.kstest(dts, stats.expon(scale=1 / total).cdf).pvalue > 0.01
    # event types follow the rate proportions
    obs = np.bincount(ev, minlength=rates.size)
    live = rates > 0
    assert np.all(obs[~live] == 0)
    exp = 10_000 * rates[live] / total
    assert stats.chisquare(obs[live], exp).pvalue > 0.01


def test_gillespie_tracks_ode_mean():
    m = reference_sit_model(N=3000)
    times = np.array([0.0, 25.0, 50.0])
    det = simulate_sit_ode(m, (0, 50), t_eval=times).prevalence()
    prev = []
    for r in range(40):
        out = simulate_sit_gillespie(m, (0, 50), seed=7, replicate=r, sample_times=times)
        prev.append(out.prevalence())
    prev = np.array(prev)
    se = prev.std(axis=0, ddof=1) / np.sqrt(len(prev))
    assert np.all(np.abs(prev.mean(axis=0)[1:] - det[1:]) < 3 * se[1:])


# ---------------------------------------------------------------------------
# thinning


def plain_counts(values):
    sp = StrataSpace([Stratum("a"), Stratum("b")])
    return FlowCounts(sp, values)


def test_thinning_extremes():
    z = plain_counts([5, 7, 0, 3])
    rng = np.random.default_rng(8)
    for mode in ("pair", "individual"):
        np.testing.assert_array_equal(thin_observations(z, 1.0, mode=mode, rng=rng).values, z.values)
        assert thin_observations(z, 0.0, mode=mode, rng=rng).total == 0


def test_pair_thinning_mean():
    z = plain_counts([40, 25, 10, 60])
    xi = np.array([0.6, 0.35])
    rng = np.random.default_rng(9)
    n = np.array([thin_observations(z, xi, rng=rng).values for _ in range(10_000)])
    w = xi[z.space.pairs[:, 0]] * xi[z.space.pairs[:, 1]]
    se = n.std(axis=0, ddof=1) / np.sqrt(len(n))
    assert np.all(np.abs(n.mean(axis=0) - z.values * w) < 3 * se)


def test_individual_and_pair_modes_agree_for_singletons():
    z = plain_counts([30, 20, 10, 40])
    xi = np.array([0.6, 0.35])
    rng = np.random.default_rng(10)
    ev = events_from_counts(z)
    a = np.array([thin_events(ev, z.space, xi, rng=rng).counts.values for _ in range(2000)])
    b = np.array([thin_observations(z, xi, rng=rng).values for _ in range(2000)])
    for k in range(z.space.L):
        assert stats.mannwhitneyu(a[:, k], b[:, k]).pvalue > 0.001
        assert stats.ks_2samp(a[:, k], b[:, k]).pvalue > 0.001


def test_individual_thinning_shares_status():
    # one source with many recipients: either all its events survive or none
    sp = StrataSpace([Stratum("a"), Stratum("b")])
    from strataflows.sim import EventList

    ev = EventList(np.zeros(5, dtype=np.int64), np.arange(1, 6), np.zeros(5, dtype=np.int64), np.ones(5, dtype=np.int64))
    rng = np.random.default_rng(11)
    for _ in range(50):
        res = thin_events(ev, sp, 0.5, rng=rng)
        src = res.status_source[0]
        if not src:
            assert res.counts.total == 0


def test_thinning_sampled_totals_from_infected():
    sp = StrataSpace([Stratum("a"), Stratum("b")])
    from strataflows.sim import EventList

    ev = EventList(np.array([0, 1]), np.array([10, 11]), np.array([0, 0]), np.array([1, 1]))
    U = np.linspace(0, 1, 20, endpoint=False)
    res = thin_events(ev, sp, {"a": 0.5, "b": 0.5}, uniforms=lambda ids: U[ids],
                      infected=[np.array([0, 1, 2, 3]), np.array([10, 11, 12])])
    assert res.sampled == {"a": (4, 4), "b": (0, 3)}
    assert res.counts.total == 0


# ---------------------------------------------------------------------------
# multinomial


def test_multinomial_thinning_oracle():
    sp = StrataSpace([Stratum("a"), Stratum("b")])
    pi0 = FlowProportions(sp, [0.1, 0.2, 0.3, 0.4])
    xi = np.array([0.6, 0.35])
    rng = np.random.default_rng(12)
    reps = [simulate_multinomial(pi0, xi, 200, rng=rng) for _ in range(10_000)]
    n = np.array([r.n.values for r in reps])
    zp = np.array([r.meta["z_plus"] for r in reps])
    w = xi[sp.pairs[:, 0]] * xi[sp.pairs[:, 1]]
    target = zp.mean() * pi0.values * w
    se = n.std(axis=0, ddof=1) / np.sqrt(len(n))
    assert np.all(np.abs(n.mean(axis=0) - target) < 3 * se)
    assert zp.mean() == pytest.approx(200 / xi.mean(), rel=0.01)


def test_multinomial_full_sampling_and_degenerate():
    sp = StrataSpace([Stratum("a"), Stratum("b")])
    rng = np.random.default_rng(13)
    pi0 = FlowProportions(sp, [0.25] * 4)
    tot = np.array([simulate_multinomial(pi0, 1.0, 50, rng=rng).n.total for _ in range(4000)])
    assert abs(tot.mean() - 50) < 3 * tot.std() / np.sqrt(tot.size)
    one = simulate_multinomial(FlowProportions(sp, [0, 0, 1, 0]), 1.0, 50, rng=rng)
    assert one.z.values[2] == one.z.total


def test_multinomial_exchangeable_cells():
    sp = StrataSpace([Stratum("a"), Stratum("b")])
    pi0 = FlowProportions(sp, [0.3, 0.3, 0.1, 0.3])
    rng = np.random.default_rng(14)
    z = np.array([simulate_multinomial(pi0, 1.0, 100, rng=rng).z.values for _ in range(3000)])
    assert stats.ks_2samp(z[:, 0], z[:, 1]).pvalue > 0.001
    assert stats.ks_2samp(z[:, 1], z[:, 3]).pvalue > 0.001


# ---------------------------------------------------------------------------
# GP flow surfaces


def test_gp_zero_sigma_intercepts():
    params = {**GP_FLOW_PARAMS, "sigma": {"FM": 0.0, "MF": 0.0}}
    out = simulate_gp_flows(params, rng=np.random.default_rng(15))
    sp = out.space
    assert sp.A == 40 and sp.L == 800
    lam = out.lam
    ll = lam[("M:l:20", "F:l:18")]
    hl = lam[("M:h:20", "F:l:18")]
    assert ll / hl == pytest.approx(np.exp(8.0), rel=1e-12)
    assert ll == pytest.approx(np.exp(-1.0), rel=1e-12)


def test_gp_draws_match_exact_gram():
    x = np.array([(a, b) for a in range(15, 25) for b in range(15, 25)], dtype=float)
    l1, l2 = GP_FLOW_PARAMS["lengthscales"]["FM"]
    th = SeKernelParams(GP_FLOW_PARAMS["sigma"]["FM"] ** 2, l1, l2)
    rng = np.random.default_rng(16)
    G = se_gram(x, x, th)
    F = np.array([exact_gp_draw(x, th, rng) for _ in range(4000)])
    # sample covariance of n zero-mean Gaussian draws has
    # E|C - G|_F^2 = (|G|_F^2 + tr(G)^2) / n
    for n in (1000, 4000):
        C = F[:n].T @ F[:n] / n
        rel = np.linalg.norm(C - G) / np.linalg.norm(G)
        expected = np.sqrt((np.linalg.norm(G) ** 2 + np.trace(G) ** 2) / n) / np.linalg.norm(G)
        assert rel == pytest.approx(expected, rel=0.25)
    assert rel < 0.05


def test_gp_flows_thinning_consistent():
    out = simulate_gp_flows(rng=np.random.default_rng(17), xi_source=0.5)
    assert np.all(out.n.values <= out.z.values)
    assert abs(out.pi.values.sum() - 1) < 1e-12
    assert gp_strata_space().L == 800
