import json

import numpy as np
import pytest

from strataflows.strata import (
    EstimatorUndefinedError,
    FlowCounts,
    FlowIntensities,
    FlowProportions,
    MaskedPairError,
    ScoreMatrix,
    StrataError,
    StrataSpace,
    Stratum,
    UndefinedFunctionalError,
    aggregate,
    coarse_space,
    counts_from_scores,
    expected_total,
    flow_ratio,
    mle_estimate,
    naive_estimate,
    recipients,
    sources,
    summary_functionals,
)


def two_by_two():
    strata = [Stratum("M:a", "M", None, "a"), Stratum("M:b", "M", None, "b"),
              Stratum("F:a", "F", None, "a"), Stratum("F:b", "F", None, "b")]
    return StrataSpace(strata, gender_semantics=True)


def plain(n):
    return StrataSpace([Stratum(f"s{i}") for i in range(n)])


# ---------------------------------------------------------------------------
# types


def test_space_masks_same_gender_pairs():
    sp = two_by_two()
    assert sp.A == 4 and sp.L == 8
    assert sp.is_masked("M:a", "M:b") and not sp.is_masked("M:a", "F:b")


def test_space_rejects_duplicates_and_full_mask():
    with pytest.raises(StrataError):
        StrataSpace([Stratum("x"), Stratum("x")])
    with pytest.raises(StrataError):
        StrataSpace([Stratum("x")], zero_mask=[[True]])
    with pytest.raises(StrataError):
        StrataSpace([])


def test_stratum_validation():
    with pytest.raises(StrataError):
        Stratum("a->b")
    with pytest.raises(StrataError):
        Stratum("a", gender="X")


def test_pair_count_bounds():
    sp = plain(3)
    assert 1 <= sp.L <= sp.A**2 == 9


def test_counts_invariants():
    sp = plain(2)
    with pytest.raises(ValueError):
        FlowCounts(sp, [1, -1, 0, 0])
    c = FlowCounts(sp, [1, 2, 3, 4])
    assert c.total == 10
    assert c[("s0", "s1")] == 2


def test_proportions_must_sum_to_one():
    sp = plain(2)
    with pytest.raises(ValueError):
        FlowProportions(sp, [0.5, 0.5, 0.1, 0.0])
    p = FlowProportions(sp, [0.25] * 4)
    out = json.loads(p.to_json())
    assert out["kind"] == "proportions" and len(out["cells"]) == 4


def test_score_matrix_invariants():
    inds = [(1, "s0", True), (2, "s1", True), (3, "s1", False)]
    with pytest.raises(ValueError):
        ScoreMatrix(inds, {(1, 1): 0.9})
    with pytest.raises(ValueError):
        ScoreMatrix(inds, {(1, 2): 1.5})
    with pytest.raises(ValueError):
        ScoreMatrix(inds, {(1, 3): 0.9})


# ---------------------------------------------------------------------------
# counts from scores


def test_counts_from_scores_threshold():
    sp = StrataSpace([Stratum("a"), Stratum("b")])
    inds = [(1, "a", True), (2, "b", True), (3, "a", True), (4, "b", True)]
    c = counts_from_scores(ScoreMatrix(inds, {(1, 2): 0.9, (3, 4): 0.4}), sp, 0.6)
    assert c[("a", "b")] == 1 and c.total == 1


def test_counts_from_scores_all_zero():
    sp = StrataSpace([Stratum("a"), Stratum("b")])
    inds = [(1, "a", True), (2, "b", True)]
    c = counts_from_scores(ScoreMatrix(inds, {(1, 2): 0.0, (2, 1): 0.0}), sp)
    assert c.total == 0


def test_counts_from_scores_errors():
    sp = two_by_two()
    inds = [(1, "M:a", True), (2, "M:b", True), (3, "Q", True)]
    with pytest.raises(MaskedPairError, match="1"):
        counts_from_scores(ScoreMatrix(inds[:2], {(1, 2): 0.9}), sp)
    with pytest.raises(StrataError):
        counts_from_scores(ScoreMatrix(inds, {}), sp)


# ---------------------------------------------------------------------------
# estimators


def test_naive_examples():
    sp = plain(2)
    np.testing.assert_allclose(naive_estimate(FlowCounts(sp, [10, 10, 10, 10])).values, 0.25)
    sp1 = StrataSpace([Stratum("a"), Stratum("b")], zero_mask=[[True, False], [False, True]])
    np.testing.assert_allclose(naive_estimate(FlowCounts(sp1, [3, 1])).values, [0.75, 0.25])
    with pytest.raises(EstimatorUndefinedError):
        naive_estimate(FlowCounts(sp1, [0, 0]))


def _pair_space():
    # two cells: a->b and a->c, so per-pair weights can be set via xi
    sp = StrataSpace([Stratum("a"), Stratum("b"), Stratum("c")],
                     zero_mask=[[True, False, False], [True, True, True], [True, True, True]])
    return sp


def test_mle_hand_evaluation():
    sp = _pair_space()
    counts = FlowCounts(sp, [6, 6])
    # xi_a = 0.6, xi_b = 0.6, xi_c = 0.3 gives pair weights 0.36 and 0.18
    sampled = {"a": (60, 100), "b": (60, 100), "c": (30, 100)}
    np.testing.assert_allclose(mle_estimate(counts, sampled).values, [1 / 3, 2 / 3], rtol=1e-12)


def test_mle_reduces_to_naive():
    sp = _pair_space()
    counts = FlowCounts(sp, [3, 1])
    ones = {s: (10, 10) for s in sp.ids}
    np.testing.assert_allclose(mle_estimate(counts, ones).values, [0.75, 0.25])
    rng = np.random.default_rng(1)
    sp4 = two_by_two()
    for _ in range(20):
        c = FlowCounts(sp4, rng.integers(0, 20, sp4.L) + 1)
        const = {s: (7, 13) for s in sp4.ids}
        assert np.array_equal(mle_estimate(c, const).values, naive_estimate(c).values)


def test_mle_scale_invariance_and_simplex():
    rng = np.random.default_rng(2)
    sp = two_by_two()
    for _ in range(20):
        c = FlowCounts(sp, rng.integers(0, 30, sp.L))
        if c.total == 0:
            continue
        ns = rng.integers(1, 50, sp.A)
        a = mle_estimate(c, {s: (int(k), 100) for s, k in zip(sp.ids, ns)})
        b = mle_estimate(c, {s: (int(k), 200) for s, k in zip(sp.ids, ns)})
        np.testing.assert_allclose(a.values, b.values, rtol=1e-12)
        assert abs(a.values.sum() - 1) < 1e-12 and np.all(a.values >= 0)


def test_mle_zero_sampling_with_counts_raises():
    sp = _pair_space()
    with pytest.raises(EstimatorUndefinedError):
        mle_estimate(FlowCounts(sp, [1, 1]), {"a": (5, 10), "b": (5, 10), "c": (0, 10)})


# ---------------------------------------------------------------------------
# functionals


def test_functionals_symmetric_and_partition():
    sp = plain(2)
    pi = FlowProportions(sp, [0.25] * 4)
    np.testing.assert_allclose(sources(pi, "s1"), [0.5, 0.5])
    assert flow_ratio(pi, "s0", "s1") == 1.0
    rng = np.random.default_rng(3)
    sp4 = two_by_two()
    for _ in range(50):
        v = rng.dirichlet(np.ones(sp4.L))
        p = FlowProportions(sp4, v / v.sum())
        sf = summary_functionals(p)
        for vec in list(sf.sources.values()) + list(sf.recipients.values()):
            assert abs(vec.sum() - 1) < 1e-12
        for (a, b), g in sf.ratios.items():
            assert g * sf.ratios[(b, a)] == pytest.approx(1.0, rel=1e-12)


def test_functionals_undefined_are_errors():
    sp = plain(2)
    pi = FlowProportions(sp, [0.0, 1.0, 0.0, 0.0])
    with pytest.raises(UndefinedFunctionalError):
        sources(pi, "s0")
    with pytest.raises(UndefinedFunctionalError):
        recipients(pi, "s1")
    with pytest.raises(UndefinedFunctionalError):
        flow_ratio(pi, "s0", "s1")


# ---------------------------------------------------------------------------
# aggregation and expected totals


def _age_space():
    return StrataSpace([Stratum(f"{g}:{a}", g, a) for g in "MF" for a in (15, 16, 17)], gender_semantics=True)


def test_aggregate_identity_and_bands():
    sp = _age_space()
    rng = np.random.default_rng(4)
    v = rng.dirichlet(np.ones(sp.L))
    pi = FlowProportions(sp, v / v.sum())
    ident = aggregate(pi, {s: s for s in sp.ids})
    np.testing.assert_allclose(ident.values, pi.values)
    band = {s: s.split(":")[0] + (":15-16" if s.endswith(("15", "16")) else ":17") for s in sp.ids}
    co = aggregate(pi, band)
    want = pi[("M:15", "F:15")] + pi[("M:15", "F:16")] + pi[("M:16", "F:15")] + pi[("M:16", "F:16")]
    assert co[("M:15-16", "F:15-16")] == pytest.approx(want, rel=1e-12)
    assert abs(co.values.sum() - 1) < 1e-12
    with pytest.raises(StrataError):
        aggregate(pi, {"M:15": "x"})


def test_aggregate_commutes_with_normalization():
    sp = _age_space()
    band = {s: s.split(":")[0] + (":young" if not s.endswith("17") else ":old") for s in sp.ids}
    rng = np.random.default_rng(5)
    for _ in range(100):
        lam = FlowIntensities(sp, rng.gamma(1.0, size=sp.L))
        a = aggregate(FlowProportions.normalize(sp, lam.values), band)
        agg = aggregate(lam, band)
        b = FlowProportions.normalize(agg.space, agg.values)
        np.testing.assert_allclose(a.values, b.values, rtol=1e-12, atol=1e-15)


def test_aggregate_linear():
    sp = _age_space()
    band = {s: s[0] for s in sp.ids}
    rng = np.random.default_rng(6)
    x = FlowIntensities(sp, rng.random(sp.L))
    y = FlowIntensities(sp, rng.random(sp.L))
    np.testing.assert_allclose(aggregate(x + y, band).values, (aggregate(x, band) + aggregate(y, band)).values)
    assert coarse_space(sp, band).L == 2


def test_expected_total_examples():
    sp = StrataSpace([Stratum("a"), Stratum("b")], zero_mask=[[True, False], [True, True]])
    # xi_a * xi_b = 0.5
    assert expected_total(FlowCounts(sp, [5]), [1.0, 0.5]) == pytest.approx(10.0)
    assert expected_total(FlowCounts(sp, [0]), [1.0, 0.5]) == pytest.approx(1.0)
    sp2 = plain(2)
    assert expected_total(FlowCounts(sp2, [1, 2, 3, 4]), 1.0) == pytest.approx(10.0)
    with pytest.raises(ValueError):
        expected_total(FlowCounts(sp2, [1, 2, 3, 4]), [0.0, 1.0])


def test_naive_bias_formula_small():
    # modest-size version of the Monte Carlo bias oracle (full size runs in the acceptance suite)
    sp = _pair_space()
    z = np.array([1_000_000, 1_000_000])
    xi = np.array([1.0, 0.6, 0.35])
    w = xi[sp.pairs[:, 0]] * xi[sp.pairs[:, 1]]
    rng = np.random.default_rng(7)
    n = rng.binomial(z, w, size=(20000, 2))
    est = n[:, 0] / n.sum(axis=1)
    want = z[0] * w[0] / (z * w).sum()
    se = est.std(ddof=1) / np.sqrt(len(est))
    assert abs(est.mean() - want) < 3 * se
