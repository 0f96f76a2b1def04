"""Statistics against oracle values computed beforehand with mpmath at 50 digits."""

import math

import pytest

from efficient_ser.stats import (
    StatsError,
    anova_oneway,
    betainc_reg,
    bonferroni,
    compare_approaches,
    f_sf,
    mean_std,
    paired_t,
    ttest_pairwise_bonferroni,
    welch_t,
)

HIGH = [0.62, 0.63, 0.64, 0.62, 0.63]
LOW = [0.55, 0.56, 0.57, 0.55, 0.56]
THREE = [[0.61, 0.64, 0.60, 0.66, 0.63], [0.58, 0.60, 0.57, 0.61, 0.59], [0.52, 0.55, 0.50, 0.56, 0.53]]

# mpmath.betainc(a, b, 0, x, regularized=True) with mp.dps = 50
IBETA_ORACLE = [
    (2, 3, 0.4, 0.5248000000000000383693077310454096820533030997634),
    (0.5, 0.5, 0.9, 0.79516723530086657191046645958664263887587124270551),
    (10, 2, 0.95, 0.89810540885756820543717069481138303381310777882669),
    (2.5, 1.5, 0.01, 0.000020298934117464028622986301140416617915213925814272),
]


@pytest.mark.parametrize("a, b, x, expected", IBETA_ORACLE)
def test_incomplete_beta_oracle(a, b, x, expected):
    assert betainc_reg(a, b, x) == pytest.approx(expected, abs=1e-12)


def test_incomplete_beta_bounds_and_errors():
    assert betainc_reg(2, 3, 0.0) == 0.0
    assert betainc_reg(2, 3, 1.0) == 1.0
    with pytest.raises(StatsError):
        betainc_reg(0, 1, 0.5)
    with pytest.raises(StatsError):
        betainc_reg(1, 1, 1.5)


def test_anova_hand_fixture():
    f, p = anova_oneway([[1, 2, 3], [2, 3, 4]])
    assert f == 1.5
    assert p == pytest.approx(0.2878641347266906620019903138571575225346779597541987, abs=1e-8)
    assert f_sf(1.5, 1, 4) == pytest.approx(p, abs=1e-15)


def test_anova_three_groups_oracle():
    f, p = anova_oneway(THREE)
    assert f == pytest.approx(25.223021582733751448077053138909312950150698391000489, rel=1e-12)
    assert p == pytest.approx(0.000050356777081964324036287368273751031550240734194915483, abs=1e-8)


def test_anova_identical_groups():
    assert anova_oneway([[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]) == (0.0, 1.0)
    assert anova_oneway([[3.0, 3.0], [3.0, 3.0]]) == (0.0, 1.0)


def test_anova_zero_within_variance_different_means():
    assert anova_oneway([[1.0, 1.0], [2.0, 2.0]]) == (math.inf, 0.0)


def test_anova_errors():
    with pytest.raises(StatsError):
        anova_oneway([[1.0, 2.0]])
    with pytest.raises(StatsError):
        anova_oneway([[1.0], [2.0, 3.0]])


def test_welch_fixture_oracle():
    t, dof, p = welch_t(HIGH, LOW)
    assert t == pytest.approx(13.228756555322967639378193648654971395287571602106327, abs=1e-8)
    assert dof == pytest.approx(8.0, abs=1e-8)
    assert p == pytest.approx(0.0000010166061079204849222918939776968318154202954168087641, abs=1e-8)


def test_welch_unequal_sizes_oracle():
    t, dof, p = welch_t([1.1, 2.3, 0.7, 1.9], [3.2, 2.8, 4.1, 3.9, 3.5, 2.9])
    assert t == pytest.approx(-4.4783429475148014249780012478878175673234713240779171, abs=1e-8)
    assert dof == pytest.approx(5.0931532370749882941974719801496547951840583442956596, abs=1e-8)
    assert p == pytest.approx(0.0062467670544133357651785874922230558453292852575706784, abs=1e-8)


def test_welch_identical_and_degenerate():
    assert welch_t(HIGH, HIGH)[0] == 0.0 and welch_t(HIGH, HIGH)[2] == 1.0
    assert welch_t([1.0, 1.0], [1.0, 1.0]) == (0.0, 2.0, 1.0)
    t, _, p = welch_t([2.0, 2.0], [1.0, 1.0])
    assert t == math.inf and p == 0.0


def test_paired_mode():
    t, dof, p = paired_t([1.0, 2.0, 3.0], [0.5, 1.0, 2.5])
    # differences 0.5, 1.0, 0.5: mean 2/3, sd sqrt(1/12)
    assert t == pytest.approx((2 / 3) / math.sqrt(1 / 12 / 3), rel=1e-12)
    assert dof == 2.0 and 0 < p < 1
    with pytest.raises(StatsError):
        paired_t([1.0, 2.0], [1.0])


def test_bonferroni_exact():
    assert bonferroni(0.01, 5) == 0.05
    assert bonferroni(0.3, 4) == 1.0
    assert bonferroni(0.0125, 4) == 0.05


def test_pairwise_report_fields():
    groups = {"full": HIGH, "p3": LOW, "same": HIGH}
    report = ttest_pairwise_bonferroni(groups, [("full", "p3"), ("full", "same")])
    assert report.n_comparisons == 2
    first, second = report.comparisons
    assert first.p_adjusted == min(1.0, first.p_raw * 2)
    assert first.significant
    assert (second.t, second.p_raw, second.significant) == (0.0, 1.0, False)
    single = ttest_pairwise_bonferroni(groups, [("full", "p3")], comparisons=1)
    assert single.comparisons[0].p_adjusted == single.comparisons[0].p_raw


def test_pairwise_unknown_group():
    with pytest.raises(StatsError):
        ttest_pairwise_bonferroni({"a": HIGH}, [("a", "b")])


def test_compare_approaches_runs_followups_only_when_significant():
    rep = compare_approaches({"a": THREE[0], "b": THREE[1], "c": THREE[2]}, "a")
    assert rep.anova_p < 0.05 and len(rep.comparisons) == 2
    flat = compare_approaches({"a": [1.0, 2.0], "b": [1.0, 2.0]}, "a")
    assert flat.anova_p == 1.0 and flat.comparisons == []


def test_mean_std():
    assert mean_std([0.6, 0.7])[0] == pytest.approx(0.65, abs=1e-15)
    assert mean_std([0.5, 0.5, 0.5]) == (0.5, 0.0)
    with pytest.raises(StatsError):
        mean_std([1.0])


def test_statistics_are_pure():
    assert welch_t(HIGH, LOW) == welch_t(list(HIGH), list(LOW))
    assert anova_oneway(THREE) == anova_oneway([list(g) for g in THREE])
