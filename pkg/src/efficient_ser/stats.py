"""One-way ANOVA and Welch t-tests with Bonferroni adjustment.

Tail probabilities come from the regularized incomplete beta function,
evaluated with the modified Lentz continued fraction.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

ALPHA = 0.05
_TINY = 1e-300


class StatsError(ValueError):
    pass


def _beta_cf(a: float, b: float, x: float, tol: float = 1e-15, max_iter: int = 10_000) -> float:
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > _TINY else _TINY)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _TINY else _TINY)
        c = 1.0 + aa / c
        c = c if abs(c) > _TINY else _TINY
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _TINY else _TINY)
        c = 1.0 + aa / c
        c = c if abs(c) > _TINY else _TINY
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise StatsError(f"incomplete beta continued fraction did not converge for a={a}, b={b}, x={x}")


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise StatsError(f"incomplete beta needs positive shape parameters, got a={a}, b={b}")
    if not 0.0 <= x <= 1.0:
        raise StatsError(f"incomplete beta argument must lie in [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return x
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_cf(a, b, x) / a
    return 1.0 - front * _beta_cf(b, a, 1.0 - x) / b


def f_sf(f: float, df1: float, df2: float) -> float:
    """Upper tail P(F > f) of the F distribution."""
    if f <= 0:
        return 1.0
    if math.isinf(f):
        return 0.0
    return betainc_reg(df2 / 2.0, df1 / 2.0, df2 / (df2 + df1 * f))


def t_sf_two_sided(t: float, df: float) -> float:
    if math.isinf(t):
        return 0.0
    return betainc_reg(df / 2.0, 0.5, df / (df + t * t))


def _mean(xs: Sequence[float]) -> float:
    return math.fsum(xs) / len(xs)


def _sample_var(xs: Sequence[float]) -> float:
    m = _mean(xs)
    return math.fsum((x - m) ** 2 for x in xs) / (len(xs) - 1)


def mean_std(xs: Sequence[float]) -> tuple[float, float]:
    """Mean and sample (n - 1) standard deviation."""
    if len(xs) < 2:
        raise StatsError(f"standard deviation needs at least 2 values, got {len(xs)}")
    return _mean(xs), math.sqrt(_sample_var(xs))


def anova_oneway(groups: Sequence[Sequence[float]]) -> tuple[float, float]:
    """One-way ANOVA F statistic and p-value."""
    if len(groups) < 2:
        raise StatsError(f"ANOVA needs at least 2 groups, got {len(groups)}")
    if any(len(g) < 2 for g in groups):
        raise StatsError("every ANOVA group needs at least 2 samples")
    k = len(groups)
    n = sum(len(g) for g in groups)
    grand = math.fsum(x for g in groups for x in g) / n
    means = [_mean(g) for g in groups]
    ssb = math.fsum(len(g) * (m - grand) ** 2 for g, m in zip(groups, means))
    ssw = math.fsum((x - m) ** 2 for g, m in zip(groups, means) for x in g)
    df1, df2 = k - 1, n - k
    if ssw == 0.0:
        if ssb == 0.0:
            return 0.0, 1.0
        return math.inf, 0.0
    f = (ssb / df1) / (ssw / df2)
    return f, f_sf(f, df1, df2)


def welch_t(a: Sequence[float], b: Sequence[float]) -> tuple[float, float, float]:
    """Welch two-sample t statistic, Welch-Satterthwaite dof and two-sided p."""
    if len(a) < 2 or len(b) < 2:
        raise StatsError("each t-test group needs at least 2 samples")
    ma, mb = _mean(a), _mean(b)
    va, vb = _sample_var(a) / len(a), _sample_var(b) / len(b)
    se2 = va + vb
    if se2 == 0.0:
        if ma == mb:
            return 0.0, float(len(a) + len(b) - 2), 1.0
        return math.copysign(math.inf, ma - mb), float(len(a) + len(b) - 2), 0.0
    t = (ma - mb) / math.sqrt(se2)
    dof = se2**2 / (va**2 / (len(a) - 1) + vb**2 / (len(b) - 1))
    return t, dof, t_sf_two_sided(t, dof)


def paired_t(a: Sequence[float], b: Sequence[float]) -> tuple[float, float, float]:
    if len(a) != len(b):
        raise StatsError("paired t-test needs equal group sizes")
    diffs = [x - y for x, y in zip(a, b)]
    if len(diffs) < 2:
        raise StatsError("paired t-test needs at least 2 pairs")
    m = _mean(diffs)
    var = _sample_var(diffs)
    dof = float(len(diffs) - 1)
    if var == 0.0:
        return (0.0, dof, 1.0) if m == 0.0 else (math.copysign(math.inf, m), dof, 0.0)
    t = m / math.sqrt(var / len(diffs))
    return t, dof, t_sf_two_sided(t, dof)


def bonferroni(p: float, comparisons: int) -> float:
    return min(1.0, p * comparisons)


@dataclass
class Comparison:
    a: str
    b: str
    t: float
    dof: float
    p_raw: float
    p_adjusted: float
    significant: bool


@dataclass
class StatReport:
    metric: str = ""
    anova_f: float | None = None
    anova_p: float | None = None
    comparisons: list[Comparison] = field(default_factory=list)
    n_comparisons: int = 1
    alpha: float = ALPHA

    def to_dict(self) -> dict:
        return asdict(self)


def ttest_pairwise_bonferroni(
    groups: Mapping[str, Sequence[float]],
    pairs: Sequence[tuple[str, str]],
    comparisons: int | None = None,
    paired: bool = False,
    alpha: float = ALPHA,
    metric: str = "",
) -> StatReport:
    """t-test each pair; ``comparisons`` = 1 disables correction (default: number of pairs)."""
    m = len(pairs) if comparisons is None else comparisons
    if m < 1:
        raise StatsError(f"number of comparisons must be >= 1, got {m}")
    report = StatReport(metric=metric, n_comparisons=m, alpha=alpha)
    test = paired_t if paired else welch_t
    for a, b in pairs:
        for name in (a, b):
            if name not in groups:
                raise StatsError(f"unknown group {name!r}")
        t, dof, p = test(groups[a], groups[b])
        adj = bonferroni(p, m)
        report.comparisons.append(Comparison(a, b, t, dof, p, adj, adj < alpha))
    return report


def compare_approaches(
    groups: Mapping[str, Sequence[float]],
    baseline: str,
    metric: str = "",
    alpha: float = ALPHA,
) -> StatReport:
    """ANOVA across all groups; Bonferroni-corrected baseline t-tests when it is significant."""
    names = list(groups)
    f, p = anova_oneway([groups[n] for n in names])
    pairs = [(baseline, n) for n in names if n != baseline]
    if p < alpha:
        report = ttest_pairwise_bonferroni(groups, pairs, alpha=alpha, metric=metric)
    else:
        report = StatReport(metric=metric, n_comparisons=len(pairs), alpha=alpha)
    report.anova_f, report.anova_p = f, p
    return report
