"""Cohort machinery: propensity matching, grouped splits, classification metrics.

Matching fits a logistic model of case membership on (age, sex) by IRLS and
pairs each case with the control of nearest logit. Splits are subject-grouped
random samplings that keep class balance. Metrics cover thresholded counts,
rank-based AUC with tie correction, and across-run aggregation with
percentile intervals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigError, DataError, NumericError

__all__ = [
    "SubjectRecord",
    "SplitPlan",
    "Metrics",
    "MatchResult",
    "logistic_irls",
    "propensity_match",
    "make_splits",
    "compute_metrics",
    "aggregate_runs",
    "format_metric_cell",
]


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    group: str  # "NC" | "AD"
    age: float
    sex: str  # "m" | "f"
    scan_ids: tuple[str, ...]

    def __post_init__(self):
        if self.group not in ("NC", "AD"):
            raise DataError(f"group must be NC or AD, got {self.group!r}")
        if self.sex not in ("m", "f"):
            raise DataError(f"sex must be m or f, got {self.sex!r}")
        if len(self.scan_ids) < 1:
            raise DataError(f"subject {self.subject_id} has no scans")
        object.__setattr__(self, "scan_ids", tuple(self.scan_ids))


@dataclass(frozen=True)
class SplitPlan:
    repeat_index: int
    seed: int
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]

    def __post_init__(self):
        parts = [set(self.train), set(self.val), set(self.test)]
        total = sum(len(p) for p in parts)
        if len(parts[0] | parts[1] | parts[2]) != total:
            raise DataError("split partitions overlap")


@dataclass(frozen=True)
class Metrics:
    tp: int
    fp: int
    tn: int
    fn: int
    auc: float

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / (self.tp + self.fp + self.tn + self.fn)

    @property
    def sensitivity(self) -> float:
        return self.tp / (self.tp + self.fn) if (self.tp + self.fn) else float("nan")

    @property
    def specificity(self) -> float:
        return self.tn / (self.tn + self.fp) if (self.tn + self.fp) else float("nan")

    def as_dict(self) -> dict[str, float]:
        return {
            "accuracy": self.accuracy,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "auc": self.auc,
            "tp": self.tp,
            "fp": self.fp,
            "tn": self.tn,
            "fn": self.fn,
        }


def _design_matrix(subjects: list[SubjectRecord]) -> np.ndarray:
    age = np.array([s.age for s in subjects], dtype=np.float64)
    sex = np.array([1.0 if s.sex == "m" else 0.0 for s in subjects])
    return np.column_stack([np.ones(len(subjects)), age, sex])


def _separation_covariate(X: np.ndarray, beta: np.ndarray,
                          names: list[str]) -> str:
    # the covariate driving the runaway fit: largest |coefficient| * spread,
    # skipping the intercept (constant column)
    spreads = X.max(axis=0) - X.min(axis=0)
    influence = np.abs(beta) * np.where(spreads > 0, spreads, 0.0)
    return names[int(np.argmax(influence))]


def logistic_irls(
    X: np.ndarray,
    y: np.ndarray,
    tol: float = 1e-8,
    max_iter: int = 100,
    covariate_names: list[str] | None = None,
) -> np.ndarray:
    """Maximum-likelihood logistic regression by iteratively reweighted LS.

    Converged when the max absolute coefficient change drops below tol.
    Collinear designs (e.g. constant covariates) use the minimum-norm
    solution, which leaves the fitted logits well-defined. Perfect
    separation makes the coefficients diverge; it raises NumericError
    naming the covariate that drives the separation.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, p = X.shape
    names = covariate_names or [f"x{j}" for j in range(p)]
    beta = np.zeros(p)
    for _ in range(max_iter):
        eta = X @ beta
        mu = 1.0 / (1.0 + np.exp(-eta))
        w = np.maximum(mu * (1.0 - mu), 1e-12)
        z = eta + (y - mu) / w
        sw = np.sqrt(w)
        beta_new, *_ = np.linalg.lstsq(X * sw[:, None], z * sw, rcond=None)
        step = np.abs(beta_new - beta)
        beta = beta_new
        if not np.all(np.isfinite(beta)):
            raise NumericError(
                "IRLS diverged (perfect separation on covariate "
                f"{_separation_covariate(X, np.nan_to_num(beta), names)!r})"
            )
        if step.max() < tol:
            return beta
    # no convergence: perfect separation iff every sample sits on the correct
    # side of the current decision boundary with positive margin
    margin = (2.0 * y - 1.0) * (X @ beta)
    if np.all(margin > 0):
        raise NumericError(
            "IRLS diverged (perfect separation on covariate "
            f"{_separation_covariate(X, beta, names)!r})"
        )
    return beta


@dataclass(frozen=True)
class MatchResult:
    matched_controls: tuple[SubjectRecord, ...]
    pair_distances: tuple[float, ...]
    case_logits: tuple[float, ...]
    control_logits: tuple[float, ...]


def propensity_match(
    cases: list[SubjectRecord],
    controls: list[SubjectRecord],
    with_replacement: bool = False,
) -> MatchResult:
    """Greedy nearest-logit matching of controls to cases on (age, sex)."""
    if not cases or not controls:
        raise DataError("both case and control sets must be non-empty")
    if not with_replacement and len(controls) < len(cases):
        raise DataError(
            f"{len(controls)} controls cannot match {len(cases)} cases without replacement"
        )
    subjects = list(cases) + list(controls)
    X = _design_matrix(subjects)
    y = np.array([1.0] * len(cases) + [0.0] * len(controls))
    beta = logistic_irls(X, y, covariate_names=["intercept", "age", "sex"])
    logits = X @ beta
    case_logits = logits[: len(cases)]
    control_logits = logits[len(cases) :]

    used: set[int] = set()
    matched: list[SubjectRecord] = []
    distances: list[float] = []
    for cl in case_logits:
        d = np.abs(control_logits - cl)
        if not with_replacement:
            d = d.copy()
            for u in used:
                d[u] = np.inf
        j = int(np.argmin(d))
        used.add(j)
        matched.append(controls[j])
        distances.append(float(d[j]))
    return MatchResult(
        matched_controls=tuple(matched),
        pair_distances=tuple(distances),
        case_logits=tuple(float(v) for v in case_logits),
        control_logits=tuple(float(v) for v in control_logits),
    )


def _allocate(n: int, ratios: tuple[int, int, int]) -> tuple[int, int, int]:
    # floor each partition, remainder to train; val/test never drop to zero
    # (hence the >= 3 subjects-per-class requirement)
    parts = [n * r // 100 for r in ratios]
    parts[0] += n - sum(parts)
    for p in (1, 2):
        if parts[p] == 0:
            parts[p] = 1
            parts[0] -= 1
    return tuple(parts)  # type: ignore[return-value]


def make_splits(
    subjects: list[SubjectRecord],
    ratios: tuple[int, int, int] = (70, 15, 15),
    n_repeats: int = 10,
    seed: int = 0,
) -> list[SplitPlan]:
    """Random-sampling splits: subjects (never scans) are partitioned per class.

    Every scan of a subject stays in that subject's partition; the per-class
    allocation keeps class balance in each partition.
    """
    if sum(ratios) != 100:
        raise ConfigError(f"ratios must sum to 100, got {ratios}")
    by_class: dict[str, list[SubjectRecord]] = {"NC": [], "AD": []}
    for s in subjects:
        by_class[s.group].append(s)
    for cls, members in by_class.items():
        if members and len(members) < 3:
            raise DataError(f"class {cls} has {len(members)} subjects, need >= 3")

    seeds = np.random.SeedSequence(seed).spawn(n_repeats)
    plans = []
    for r in range(n_repeats):
        rng = np.random.default_rng(seeds[r])
        parts: list[list[str]] = [[], [], []]
        for cls in ("NC", "AD"):
            members = sorted(by_class[cls], key=lambda s: s.subject_id)
            if not members:
                continue
            order = rng.permutation(len(members))
            counts = _allocate(len(members), ratios)
            bounds = np.cumsum((0,) + counts)
            for p in range(3):
                for idx in order[bounds[p] : bounds[p + 1]]:
                    parts[p].extend(members[idx].scan_ids)
        plans.append(
            SplitPlan(
                repeat_index=r,
                seed=seed,
                train=tuple(parts[0]),
                val=tuple(parts[1]),
                test=tuple(parts[2]),
            )
        )
    return plans


def auc_mann_whitney(scores: np.ndarray, labels: np.ndarray) -> float:
    """AUC as the Mann-Whitney concordance probability; ties count one half."""
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC undefined: both classes must be present")
    ranks = rankdata(scores)  # average ranks handle ties
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def compute_metrics(scores, labels, threshold: float = 0.5) -> Metrics:
    """Thresholded counts plus rank AUC. Scores are P(class = 1)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if s.shape != y.shape:
        raise DataError(f"scores shape {s.shape} != labels shape {y.shape}")
    pred = (s >= threshold).astype(np.int64)
    tp = int(np.sum((pred == 1) & (y == 1)))
    fp = int(np.sum((pred == 1) & (y == 0)))
    tn = int(np.sum((pred == 0) & (y == 0)))
    fn = int(np.sum((pred == 0) & (y == 1)))
    return Metrics(tp=tp, fp=fp, tn=tn, fn=fn, auc=auc_mann_whitney(s, y))


def aggregate_runs(per_run: list[Metrics]) -> dict[str, dict[str, float]]:
    """Mean, sample sd, and [2.5%, 97.5%] percentile interval per metric."""
    if len(per_run) < 2:
        raise DataError("aggregation needs at least 2 runs")
    out: dict[str, dict[str, float]] = {}
    for name in ("accuracy", "sensitivity", "specificity", "auc"):
        values = np.array([getattr(m, name) for m in per_run], dtype=np.float64)
        lo, hi = np.percentile(values, [2.5, 97.5])
        out[name] = {
            "mean": float(values.mean()),
            "sd": float(values.std(ddof=1)),
            "ci_low": float(lo),
            "ci_high": float(hi),
        }
    return out


def format_metric_cell(stats: dict[str, float], percent: bool = True) -> str:
    """Render one aggregate as e.g. '64.2±6.5% [53.5%, 76.9%]'."""
    if percent:
        return (
            f"{100 * stats['mean']:.1f}±{100 * stats['sd']:.1f}% "
            f"[{100 * stats['ci_low']:.1f}%, {100 * stats['ci_high']:.1f}%]"
        )
    return (
        f"{stats['mean']:.2f}±{stats['sd']:.2f} "
        f"[{stats['ci_low']:.2f}, {stats['ci_high']:.2f}]"
    )
