"""Significance machinery: one-sided Welch t-tests with Hochberg step-up.

The comparison protocol: within one task, the schedule with the best mean is
the reference; every other schedule is tested one-sided for being worse, the
pairwise p-values are Hochberg-corrected across that task, and the schedules
whose null is retained form the "parity set" (the bold entries of a results
table). Higher metric values are treated as better.

The Student-t CDF is evaluated through the regularized incomplete beta
function, computed here with a modified Lentz continued fraction to around
1e-14 relative error, so the module carries no statistics dependency.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field


@dataclass(frozen=True)
class SampleSet:
    schedule: str
    task: str
    values: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.values) < 2:
            raise ValueError("need at least 2 values per sample set")
        if not all(math.isfinite(v) for v in self.values):
            raise ValueError("sample values must be finite")

    @property
    def mean(self) -> float:
        return math.fsum(self.values) / len(self.values)

    @property
    def variance(self) -> float:
        m = self.mean
        return math.fsum((v - m) ** 2 for v in self.values) / (len(self.values) - 1)


_BETACF_MAX_ITER = 500
_BETACF_EPS = 1e-16
_BETACF_FPMIN = 1e-300


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _BETACF_FPMIN:
        d = _BETACF_FPMIN
    d = 1.0 / d
    h = d
    for m in range(1, _BETACF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _BETACF_FPMIN:
            d = _BETACF_FPMIN
        c = 1.0 + aa / c
        if abs(c) < _BETACF_FPMIN:
            c = _BETACF_FPMIN
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _BETACF_FPMIN:
            d = _BETACF_FPMIN
        c = 1.0 + aa / c
        if abs(c) < _BETACF_FPMIN:
            c = _BETACF_FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _BETACF_EPS:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) for a, b > 0 and x in [0, 1]."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_cdf(t: float, df: float) -> float:
    """P(T <= t) for Student's t with ``df`` degrees of freedom."""
    if df <= 0:
        raise ValueError("df must be positive")
    if t == 0.0:
        return 0.5
    x = df / (df + t * t)
    tail = 0.5 * regularized_incomplete_beta(df / 2.0, 0.5, x)
    return tail if t < 0 else 1.0 - tail


def welch_statistic(x: SampleSet | tuple, y: SampleSet | tuple) -> tuple[float, float]:
    """Welch's t statistic for mean(x) - mean(y), with Satterthwaite df."""
    xs = x.values if isinstance(x, SampleSet) else tuple(x)
    ys = y.values if isinstance(y, SampleSet) else tuple(y)
    if len(xs) < 2 or len(ys) < 2:
        raise ValueError("need at least 2 values per sample")
    nx, ny = len(xs), len(ys)
    mx = math.fsum(xs) / nx
    my = math.fsum(ys) / ny
    vx = math.fsum((v - mx) ** 2 for v in xs) / (nx - 1)
    vy = math.fsum((v - my) ** 2 for v in ys) / (ny - 1)
    se2 = vx / nx + vy / ny
    if se2 == 0.0:
        return math.copysign(math.inf, mx - my) if mx != my else 0.0, float("nan")
    t = (mx - my) / math.sqrt(se2)
    # Satterthwaite df from scale-free ratios (immune to variance underflow)
    ra = (vx / nx) / se2
    rb = (vy / ny) / se2
    df = 1.0 / (ra**2 / (nx - 1) + rb**2 / (ny - 1))
    return t, df


def one_sided_t(x: SampleSet | tuple, y: SampleSet | tuple) -> float:
    """p-value for the alternative "x is worse than y": P(T <= t_obs)."""
    t, df = welch_statistic(x, y)
    if math.isnan(df):
        if t == 0.0:
            warnings.warn(
                "zero variance in both samples with equal means; p = 0.5 by convention",
                stacklevel=2,
            )
            return 0.5
        return 0.0 if t < 0 else 1.0
    return t_cdf(t, df)


def hochberg(pvals: list[float], alpha: float = 0.05) -> set[int]:
    """Hochberg step-up: indices of rejected hypotheses.

    Sort p ascending as p_(1) <= ... <= p_(m) and find the largest k with
    p_(k) <= alpha / (m - k + 1); the k smallest p-values are rejected.
    """
    if not (0.0 < alpha < 1.0):
        raise ValueError("alpha must be in (0, 1)")
    if any(not (0.0 <= p <= 1.0) for p in pvals):
        raise ValueError("p-values must be in [0, 1]")
    m = len(pvals)
    if m == 0:
        return set()
    order = sorted(range(m), key=lambda i: (pvals[i], i))
    best_k = 0
    for k in range(1, m + 1):
        if pvals[order[k - 1]] <= alpha / (m - k + 1):
            best_k = k
    return {order[i] for i in range(best_k)}


@dataclass
class TaskComparison:
    best: str
    means: dict[str, float]
    p_values: dict[str, float]
    rejected: set[str]
    parity: list[str]


@dataclass
class SignificanceReport:
    alpha: float
    tasks: dict[str, TaskComparison] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "alpha": self.alpha,
            "tasks": {
                task: {
                    "best": cmp.best,
                    "means": {k: cmp.means[k] for k in sorted(cmp.means)},
                    "p_values": {k: cmp.p_values[k] for k in sorted(cmp.p_values)},
                    "rejected": sorted(cmp.rejected),
                    "parity": cmp.parity,
                }
                for task, cmp in sorted(self.tasks.items())
            },
        }


def parity_table(samples: list[SampleSet], alpha: float = 0.05) -> SignificanceReport:
    """Best-vs-rest one-sided tests per task, Hochberg-corrected per task."""
    by_task: dict[str, dict[str, SampleSet]] = {}
    for s in samples:
        if s.schedule in by_task.setdefault(s.task, {}):
            raise ValueError(f"duplicate schedule {s.schedule!r} for task {s.task!r}")
        by_task[s.task][s.schedule] = s
    report = SignificanceReport(alpha=alpha)
    for task, sets in by_task.items():
        if len(sets) < 2:
            raise ValueError(f"task {task!r} needs at least 2 schedules")
        means = {name: s.mean for name, s in sets.items()}
        best = min(means, key=lambda name: (-means[name], name))
        others = sorted(name for name in sets if name != best)
        pvals = [one_sided_t(sets[name], sets[best]) for name in others]
        rejected_idx = hochberg(pvals, alpha)
        rejected = {others[i] for i in rejected_idx}
        parity = [best] + [name for name in others if name not in rejected]
        report.tasks[task] = TaskComparison(
            best=best,
            means=means,
            p_values=dict(zip(others, pvals)),
            rejected=rejected,
            parity=sorted(parity),
        )
    return report


def format_parity_text(report: SignificanceReport) -> str:
    """Plain-text table; '*' marks parity with the task's best schedule."""
    tasks = sorted(report.tasks)
    schedules = sorted({name for t in tasks for name in report.tasks[t].means})
    name_width = max([len("task")] + [len(t) for t in tasks])
    col_width = max([12] + [len(s) + 1 for s in schedules])
    lines = [
        " | ".join(["task".ljust(name_width)] + [s.rjust(col_width) for s in schedules])
    ]
    lines.append("-+-".join(["-" * name_width] + ["-" * col_width for _ in schedules]))
    for task in tasks:
        cmp = report.tasks[task]
        cells = []
        for s in schedules:
            if s not in cmp.means:
                cells.append("-".rjust(col_width))
                continue
            mark = "*" if s in cmp.parity else " "
            cells.append(f"{mark}{cmp.means[s]:.4f}".rjust(col_width))
        lines.append(" | ".join([task.ljust(name_width)] + cells))
    lines.append("* = no significant difference from the task's best mean "
                 f"(one-sided Welch t, Hochberg-corrected, alpha={report.alpha:g})")
    return "\n".join(lines)


def samples_from_json(doc: dict) -> list[SampleSet]:
    """Parse {task: {schedule: [values]}} into SampleSets."""
    out = []
    for task, by_schedule in doc.items():
        for schedule, values in by_schedule.items():
            out.append(SampleSet(schedule=schedule, task=task, values=tuple(values)))
    return out


def report_json_text(report: SignificanceReport) -> str:
    return json.dumps(report.to_json(), indent=2, sort_keys=True)
