"""
Tests for stats.py:
confusion(), metrics(), clopper_pearson(), metric_cis(),
mcnemar_exact(), mcnemar_chi2(), paired_from_assessments(), ppv_at_prevalence().
"""

from fractions import Fraction
from math import comb

import pytest
from scipy.stats import beta

from dermatriage.modules import stats
from dermatriage.modules.stats import (
    ConfusionMatrix,
    DegenerateDenominator,
    InvalidCounts,
    NoDiscordantPairs,
    PairedAgreement,
)


### FIXTURES ###

@pytest.fixture
def validation_matrix():
    return ConfusionMatrix(tp=5, fp=20, fn=0, tn=151)


def binomial_pmf(k, n, p):
    return comb(n, k) * p ** k * (1 - p) ** (n - k)


# Test confusion
def test_confusion_tallies_pairs():
    pairs = [("malignant", "malignant")] * 5 + [("malignant", "benign")] * 20 + [("benign", "benign")] * 151
    assert stats.confusion(pairs) == ConfusionMatrix(5, 20, 0, 151)


def test_confusion_empty_and_single():
    assert stats.confusion([]) == ConfusionMatrix(0, 0, 0, 0)
    assert stats.confusion([("malignant", "benign")]) == ConfusionMatrix(fp=1)


def test_confusion_rejects_unknown_label():
    with pytest.raises(ValueError):
        stats.confusion([("malignant", "unsure")])


def test_confusion_matrix_rejects_negative_counts():
    with pytest.raises(InvalidCounts):
        ConfusionMatrix(tp=-1)


# Test metrics
def test_metrics_on_validation_matrix(validation_matrix):
    result = stats.metrics(validation_matrix)
    assert result.sensitivity == 1
    assert result.specificity == Fraction(151, 171)
    assert result.ppv == Fraction(1, 5)
    assert result.npv == 1
    assert result.accuracy == Fraction(156, 176)
    assert float(result.specificity) == pytest.approx(0.8830, abs=5e-5)
    assert float(result.accuracy) == pytest.approx(0.8864, abs=5e-5)


def test_metrics_zero_denominator_is_absent():
    result = stats.metrics(ConfusionMatrix(tn=10))
    assert result.sensitivity is None
    assert result.ppv is None
    assert result.specificity == 1


def test_metrics_symmetric_matrix():
    assert set(stats.metrics(ConfusionMatrix(1, 1, 1, 1)).as_dict().values()) == {Fraction(1, 2)}


def test_accuracy_is_weighted_sensitivity_and_specificity():
    for cm in (ConfusionMatrix(5, 20, 0, 151), ConfusionMatrix(7, 3, 2, 40), ConfusionMatrix(1, 0, 4, 9)):
        result = stats.metrics(cm)
        weighted = (result.sensitivity * cm.positives + result.specificity * cm.negatives) / cm.total
        assert result.accuracy == weighted


# Test clopper_pearson
@pytest.mark.parametrize("x, n, lower", [(3, 3, 0.2924), (5, 5, 0.4782), (2, 2, 0.1581)])
def test_clopper_pearson_all_successes(x, n, lower):
    ci = stats.clopper_pearson(x, n, 0.95)
    assert ci.lower == pytest.approx(lower, abs=5e-5)
    assert ci.lower == pytest.approx(0.025 ** (1 / n), abs=1e-6)
    assert ci.upper == 1.0


def test_clopper_pearson_zero_successes():
    ci = stats.clopper_pearson(0, 10, 0.95)
    assert ci.lower == 0.0
    assert ci.upper == pytest.approx(1 - 0.025 ** (1 / 10), abs=1e-6)


@pytest.mark.parametrize("x, n", [(1, 10), (5, 25), (151, 171), (20, 25), (7, 9)])
def test_clopper_pearson_matches_beta_quantiles(x, n):
    ci = stats.clopper_pearson(x, n, 0.95)
    assert ci.lower == pytest.approx(beta.ppf(0.025, x, n - x + 1), abs=1e-8)
    assert ci.upper == pytest.approx(beta.ppf(0.975, x + 1, n - x), abs=1e-8)


def test_clopper_pearson_contains_point_estimate():
    for n in range(1, 15):
        for x in range(n + 1):
            ci = stats.clopper_pearson(x, n)
            assert 0.0 <= ci.lower <= x / n <= ci.upper <= 1.0


def test_clopper_pearson_symmetry():
    for n in (1, 4, 11, 30):
        for x in range(n + 1):
            ci = stats.clopper_pearson(x, n)
            mirror = stats.clopper_pearson(n - x, n)
            assert ci.lower == pytest.approx(1 - mirror.upper, abs=1e-9)
            assert ci.upper == pytest.approx(1 - mirror.lower, abs=1e-9)


def test_clopper_pearson_widens_with_confidence():
    narrow = stats.clopper_pearson(4, 12, 0.90)
    wide = stats.clopper_pearson(4, 12, 0.99)
    assert wide.lower < narrow.lower
    assert wide.upper > narrow.upper


def test_clopper_pearson_never_undercovers():
    """Exact coverage by enumeration for n <= 10 over a grid of true proportions."""
    for n in range(1, 11):
        intervals = [stats.clopper_pearson(x, n, 0.95) for x in range(n + 1)]
        for p in [i / 40 for i in range(1, 40)]:
            coverage = sum(binomial_pmf(x, n, p) for x, ci in enumerate(intervals) if ci.lower <= p <= ci.upper)
            assert coverage >= 0.95 - 1e-9


@pytest.mark.parametrize("x, n, confidence", [(4, 3, 0.95), (1, 0, 0.95), (-1, 5, 0.95), (1, 5, 1.0), (1, 5, 0.0)])
def test_clopper_pearson_rejects_invalid_input(x, n, confidence):
    with pytest.raises(InvalidCounts):
        stats.clopper_pearson(x, n, confidence)


def test_metric_cis_skip_empty_denominators():
    cis = stats.metric_cis(ConfusionMatrix(tn=10))
    assert cis["sensitivity"] is None
    assert cis["specificity"].lower == pytest.approx(0.025 ** (1 / 10), abs=1e-6)


# Test McNemar
def test_mcnemar_exact_one_sided_discordance():
    assert stats.mcnemar_exact(PairedAgreement(20, 0)) == pytest.approx(2 * 0.5 ** 20, abs=1e-12)


def test_mcnemar_exact_caps_at_one():
    assert stats.mcnemar_exact(PairedAgreement(1, 1)) == 1.0


def test_mcnemar_exact_matches_binomial_sum():
    expected = 2 * sum(comb(16, k) for k in range(14, 17)) / 2 ** 16
    assert stats.mcnemar_exact(PairedAgreement(14, 2)) == pytest.approx(expected, abs=1e-12)
    assert stats.mcnemar_exact(PairedAgreement(14, 2)) == pytest.approx(0.00418, abs=1e-5)


def test_mcnemar_exact_symmetric_and_bounded():
    for b in range(0, 12):
        for c in range(0, 12):
            if b + c == 0:
                continue
            p = stats.mcnemar_exact(PairedAgreement(b, c))
            assert p == stats.mcnemar_exact(PairedAgreement(c, b))
            assert 0.0 < p <= 1.0


def test_mcnemar_requires_discordant_pairs():
    with pytest.raises(NoDiscordantPairs):
        stats.mcnemar_exact(PairedAgreement(0, 0, 50))
    with pytest.raises(NoDiscordantPairs):
        stats.mcnemar_chi2(PairedAgreement(0, 0, 50))


def test_mcnemar_chi2_continuity_corrected():
    statistic, p = stats.mcnemar_chi2(PairedAgreement(22, 2, 152))
    assert statistic == pytest.approx(361 / 24)
    assert 0.0 < p < 0.001


def test_paired_from_assessments():
    rows = [(True, True)] * 123 + [(False, True)] * 22 + [(True, False)] * 2 + [(False, False)] * 29
    assert stats.paired_from_assessments(rows) == PairedAgreement(22, 2, 152)


# Test ppv_at_prevalence
def test_ppv_at_prevalence_matches_observed_ppv():
    assert stats.ppv_at_prevalence(1.0, 0.883, 0.0284) == pytest.approx(0.199, abs=1e-3)


def test_ppv_at_prevalence_exact_fractions():
    result = stats.ppv_at_prevalence(Fraction(1), Fraction(151, 171), Fraction(5, 176))
    assert result == Fraction(1, 5)


def test_ppv_at_prevalence_edges():
    assert stats.ppv_at_prevalence(0.9, 0.8, 0.0) == 0
    assert stats.ppv_at_prevalence(0.7, 1.0, 0.01) == 1


def test_ppv_at_prevalence_degenerate():
    with pytest.raises(DegenerateDenominator):
        stats.ppv_at_prevalence(0.9, 1.0, 0.0)


def test_ppv_at_prevalence_rejects_out_of_range():
    with pytest.raises(ValueError):
        stats.ppv_at_prevalence(1.2, 0.5, 0.1)
