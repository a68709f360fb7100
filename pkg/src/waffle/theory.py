"""Monte-Carlo checks of the bias and variance of plain versus filtered averaging.

A scenario has B benign clients with parameters drawn around a common mean
and M malicious clients drawn around a different mean (or with a larger
spread). Averaging all K = B + M clients is compared with averaging the
benign ones only. Per-coordinate scalar parameters are enough: the claims
are coordinate-wise.

Closed forms used as the reference:

    E[avg]         = mb + (M / K) (mm - mb)
    Var[avg]       = (B sb^2 + M sm^2) / K^2
    Var[benign]    = sb^2 / B
    Var[avg] > Var[benign]  iff  sm^2 > (2 + M / B) sb^2
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

__all__ = [
    "LemmaScenario",
    "BiasReport",
    "VarianceReport",
    "PropositionReport",
    "sample_federations",
    "lemma_bias_mc",
    "lemma_variance_mc",
    "proposition_report",
    "variance_threshold",
]

_Z = 3.0
_GUARD = 0.10


@dataclass(frozen=True)
class LemmaScenario:
    B: int = 6
    M: int = 4
    theta_b: float = 0.0
    theta_m: float = 1.0
    sigma_b: float = 1.0
    sigma_m: float = 1.0
    trials: int = 100_000
    seed: int = 0
    distribution: str = "gaussian"

    def __post_init__(self):
        if self.B < 1 or self.M < 0:
            raise ValueError("need B >= 1 benign and M >= 0 malicious clients")
        if self.sigma_b <= 0 or self.sigma_m <= 0:
            raise ValueError("standard deviations must be positive")
        if self.trials < 2:
            raise ValueError("need at least 2 trials")
        if self.distribution not in ("gaussian", "uniform"):
            raise ValueError("distribution must be 'gaussian' or 'uniform'")

    @property
    def K(self) -> int:
        return self.B + self.M


def _draw(rng, mean, sd, size, distribution):
    if distribution == "gaussian":
        return rng.normal(mean, sd, size)
    half = sd * np.sqrt(3.0)  # uniform with the requested standard deviation
    return rng.uniform(mean - half, mean + half, size)


def sample_federations(s: LemmaScenario):
    """Per-trial estimates ``(avg_all, avg_benign)``, each of shape (trials,)."""
    rng = np.random.default_rng(s.seed)
    benign = _draw(rng, s.theta_b, s.sigma_b, (s.trials, s.B), s.distribution)
    bad = _draw(rng, s.theta_m, s.sigma_m, (s.trials, s.M), s.distribution)
    avg_benign = benign.mean(axis=1)
    avg_all = (benign.sum(axis=1) + bad.sum(axis=1)) / s.K
    return avg_all, avg_benign


def _var_stderr(x):
    """Sample variance and its standard error, sqrt((m4 - s^4) / n)."""
    n = len(x)
    c = x - x.mean()
    var = float(c @ c / (n - 1))
    m4 = float(np.mean(c**4))
    return var, float(np.sqrt(max(m4 - var * var, 0.0) / n))


@dataclass(frozen=True)
class BiasReport:
    empirical_bias: float
    predicted_bias: float
    stderr: float
    filtered_bias: float
    filtered_stderr: float
    passed: bool

    def to_dict(self):
        return asdict(self)


def lemma_bias_mc(s: LemmaScenario) -> BiasReport:
    """Bias of the all-client average; passes when within 3 stderr of the closed form."""
    avg_all, avg_benign = sample_federations(s)
    n = s.trials
    emp = float(avg_all.mean() - s.theta_b)
    pred = s.M / s.K * (s.theta_m - s.theta_b)
    se = float(avg_all.std(ddof=1) / np.sqrt(n))
    f_bias = float(avg_benign.mean() - s.theta_b)
    f_se = float(avg_benign.std(ddof=1) / np.sqrt(n))
    return BiasReport(emp, pred, se, f_bias, f_se, bool(abs(emp - pred) <= _Z * se))


def variance_threshold(s: LemmaScenario) -> float:
    """Malicious variance above which dropping the attackers lowers the variance."""
    return (2.0 + s.M / s.B) * s.sigma_b**2


@dataclass(frozen=True)
class VarianceReport:
    var_avg: float
    var_benign_only: float
    var_avg_expected: float
    var_benign_expected: float
    var_avg_stderr: float
    var_benign_stderr: float
    threshold: float
    filtering_predicted_better: bool
    in_guard_band: bool
    matches_closed_form: bool
    passed: bool

    def to_dict(self):
        return asdict(self)


def lemma_variance_mc(s: LemmaScenario) -> VarianceReport:
    """Compare empirical variances of both estimators with the threshold rule.

    Scenarios with sm^2 within 10% of the threshold are in the guard band:
    the ordering check is skipped there (``passed`` is True) because the two
    variances are too close to resolve reliably.
    """
    avg_all, avg_benign = sample_federations(s)
    v_all, se_all = _var_stderr(avg_all)
    v_ben, se_ben = _var_stderr(avg_benign)
    exp_all = (s.B * s.sigma_b**2 + s.M * s.sigma_m**2) / s.K**2
    exp_ben = s.sigma_b**2 / s.B
    thr = variance_threshold(s)
    predicted = s.M > 0 and s.sigma_m**2 > thr
    guard = s.M > 0 and abs(s.sigma_m**2 - thr) <= _GUARD * thr
    closed = abs(v_all - exp_all) <= _Z * se_all and abs(v_ben - exp_ben) <= _Z * se_ben
    if s.M == 0:
        ordered = True  # the two estimators coincide
    elif guard:
        ordered = True
    else:
        ordered = (v_all > v_ben) == predicted
    return VarianceReport(v_all, v_ben, exp_all, exp_ben, se_all, se_ben, thr, bool(predicted), bool(guard),
                          bool(closed), bool(ordered and (closed or guard)))


@dataclass(frozen=True)
class PropositionReport:
    outcome: str  # "pass", "fail" or "not_applicable"
    reason: str

    @property
    def passed(self) -> bool:
        return self.outcome != "fail"

    def to_dict(self):
        return asdict(self)


def proposition_report(bias: BiasReport, variance: VarianceReport, M: int | None = None) -> PropositionReport:
    """Filtering is better when the filtered estimator is unbiased and has lower variance.

    Only checked where the variance condition holds; otherwise the
    preconditions are not met and the outcome is ``not_applicable``.
    """
    if M == 0:
        return PropositionReport("pass", "no malicious clients: both estimators coincide")
    if variance.in_guard_band:
        return PropositionReport("not_applicable", "malicious variance within the guard band of the threshold")
    if not variance.filtering_predicted_better:
        return PropositionReport("not_applicable", "malicious variance below the threshold")
    unbiased = abs(bias.filtered_bias) <= _Z * bias.filtered_stderr
    lower = variance.var_benign_only < variance.var_avg
    if unbiased and lower and bias.passed:
        return PropositionReport("pass", "filtered average unbiased with lower variance")
    problems = []
    if not unbiased:
        problems.append(f"filtered bias {bias.filtered_bias:.3g} exceeds 3 stderr")
    if not lower:
        problems.append("filtered variance not lower")
    if not bias.passed:
        problems.append("all-client bias disagrees with the closed form")
    return PropositionReport("fail", "; ".join(problems))
