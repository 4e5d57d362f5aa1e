"""
stats.py

Diagnostic accuracy statistics for the screening validation: confusion
matrix, derived metrics held as exact fractions, Clopper-Pearson intervals,
the exact McNemar test and PPV at a given prevalence.

All functions are pure.
"""

from dataclasses import dataclass
from fractions import Fraction

from scipy.optimize import bisect
from scipy.stats import binom, chi2

from dermatriage.utils.data_checks import REFERENCE_LABELS

POSITIVE = "malignant"
CI_TOLERANCE = 1e-12
METRIC_NAMES = ("sensitivity", "specificity", "ppv", "npv", "accuracy")


class InvalidCounts(Exception):
    """Raised for negative counts, x > n, n < 1 or a confidence level outside (0, 1)."""
    pass


class NoDiscordantPairs(Exception):
    """Raised when McNemar's test is asked for with b = c = 0."""
    pass


class DegenerateDenominator(Exception):
    """Raised when the Bayes PPV denominator is zero."""
    pass


def _check_counts(**counts):
    for name, value in counts.items():
        if isinstance(value, bool) or not isinstance(value, int) or value < 0:
            raise InvalidCounts(f"{name} must be a non-negative integer, got {value!r}")


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        _check_counts(tp=self.tp, fp=self.fp, fn=self.fn, tn=self.tn)

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn

    @property
    def positives(self):
        """Reference-positive cases (tp + fn)."""
        return self.tp + self.fn

    @property
    def negatives(self):
        return self.tn + self.fp


@dataclass(frozen=True)
class BinomialCI:
    successes: int
    trials: int
    confidence: float
    lower: float
    upper: float

    @property
    def proportion(self):
        return Fraction(self.successes, self.trials)


@dataclass(frozen=True)
class PairedAgreement:
    """Discordant counts: b correct only with the system, c correct only without it."""
    b: int
    c: int
    n_concordant: int = 0

    def __post_init__(self):
        _check_counts(b=self.b, c=self.c, n_concordant=self.n_concordant)

    @property
    def total(self):
        return self.b + self.c + self.n_concordant


@dataclass(frozen=True)
class DiagnosticMetrics:
    """Metric values as exact fractions; None where the denominator is zero."""
    sensitivity: Fraction | None
    specificity: Fraction | None
    ppv: Fraction | None
    npv: Fraction | None
    accuracy: Fraction | None

    def as_dict(self):
        return {name: getattr(self, name) for name in METRIC_NAMES}


def confusion(cases):
    """
    Tally (predicted, reference) label pairs; malignant is the positive class.

    Parameters:
    cases: iterable of (predicted, reference), each 'malignant' or 'benign'.

    Returns:
    ConfusionMatrix
    """
    tp = fp = fn = tn = 0
    for predicted, reference in cases:
        for label in (predicted, reference):
            if label not in REFERENCE_LABELS:
                raise ValueError(f"label must be one of {REFERENCE_LABELS}, got {label!r}")
        if predicted == POSITIVE:
            if reference == POSITIVE:
                tp += 1
            else:
                fp += 1
        elif reference == POSITIVE:
            fn += 1
        else:
            tn += 1
    return ConfusionMatrix(tp, fp, fn, tn)


def metric_counts(cm):
    """(numerator, denominator) behind each metric, in reporting order."""
    return {
        "sensitivity": (cm.tp, cm.tp + cm.fn),
        "specificity": (cm.tn, cm.tn + cm.fp),
        "ppv": (cm.tp, cm.tp + cm.fp),
        "npv": (cm.tn, cm.tn + cm.fn),
        "accuracy": (cm.tp + cm.tn, cm.total),
    }


def metrics(cm):
    values = {
        name: (Fraction(num, den) if den else None)
        for name, (num, den) in metric_counts(cm).items()
    }
    return DiagnosticMetrics(**values)


def clopper_pearson(x, n, confidence=0.95):
    """
    Exact binomial confidence interval by inverting the binomial tails.

    lower solves P(Bin(n, p) >= x) = alpha/2 (0 when x = 0);
    upper solves P(Bin(n, p) <= x) = alpha/2 (1 when x = n).
    Both roots are found by bisection on [0, 1].

    Returns:
    BinomialCI
    """
    _check_counts(x=x, n=n)
    if n < 1 or x > n:
        raise InvalidCounts(f"need 0 <= x <= n and n >= 1, got x={x}, n={n}")
    if not 0.0 < confidence < 1.0:
        raise InvalidCounts(f"confidence {confidence} outside (0, 1)")

    half_alpha = (1.0 - confidence) / 2.0

    if x == 0:
        lower = 0.0
    else:
        lower = bisect(lambda p: binom.sf(x - 1, n, p) - half_alpha, 0.0, 1.0, xtol=CI_TOLERANCE)

    if x == n:
        upper = 1.0
    else:
        upper = bisect(lambda p: binom.cdf(x, n, p) - half_alpha, 0.0, 1.0, xtol=CI_TOLERANCE)

    return BinomialCI(x, n, confidence, lower, upper)


def metric_cis(cm, confidence=0.95):
    """Clopper-Pearson interval for every metric; None where the denominator is zero."""
    return {
        name: (clopper_pearson(num, den, confidence) if den else None)
        for name, (num, den) in metric_counts(cm).items()
    }


def mcnemar_exact(pa):
    """Two-sided exact McNemar p-value: 2 * P(Bin(b+c, 1/2) >= max(b, c)), capped at 1."""
    discordant = pa.b + pa.c
    if discordant == 0:
        raise NoDiscordantPairs("b = c = 0; McNemar's test is undefined")
    tail = binom.sf(max(pa.b, pa.c) - 1, discordant, 0.5)
    return min(1.0, 2.0 * float(tail))


def mcnemar_chi2(pa):
    """
    Chi-square McNemar test with continuity correction.

    Returns:
    tuple: (statistic, p-value) with one degree of freedom.
    """
    discordant = pa.b + pa.c
    if discordant == 0:
        raise NoDiscordantPairs("b = c = 0; McNemar's test is undefined")
    statistic = (abs(pa.b - pa.c) - 1) ** 2 / discordant
    return statistic, float(chi2.sf(statistic, 1))


def paired_from_assessments(rows):
    """
    Build a PairedAgreement from per-case correctness without and with the system.

    Parameters:
    rows: iterable of (correct_without, correct_with) booleans.

    Returns:
    PairedAgreement: n_concordant counts both-correct and both-wrong pairs.
    """
    b = c = concordant = 0
    for without, with_system in rows:
        if with_system and not without:
            b += 1
        elif without and not with_system:
            c += 1
        else:
            concordant += 1
    return PairedAgreement(b, c, concordant)


def ppv_at_prevalence(sensitivity, specificity, prevalence):
    """Bayes PPV: sens*prev / (sens*prev + (1 - spec) * (1 - prev))."""
    for name, value in (("sensitivity", sensitivity), ("specificity", specificity),
                        ("prevalence", prevalence)):
        if not 0 <= value <= 1:
            raise ValueError(f"{name} {value} outside [0, 1]")

    true_positive = sensitivity * prevalence
    denominator = true_positive + (1 - specificity) * (1 - prevalence)
    if denominator == 0:
        raise DegenerateDenominator(
            f"no positive calls at sensitivity={sensitivity}, specificity={specificity}, "
            f"prevalence={prevalence}"
        )
    return true_positive / denominator
