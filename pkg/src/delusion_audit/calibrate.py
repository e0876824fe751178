"""Rank normalization, belief thresholds and delusion classification.

Array-level logic lives in two scikit-learn style estimators:

* :class:`RankNormalizer` maps scores to ``average_rank / N`` within the pool
  it was fitted on;
* :class:`BeliefThresholdClassifier` fits the threshold as the mean score of
  correct answers and labels incorrect answers above it as delusions.

The record-level functions below them work a whole audit run, method by
method. They keep normalized scores, ensemble means and thresholds as exact
fractions in memory, so an error whose belief equals the threshold is never
pushed across it by rounding; serialization turns them into floats.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .core import (
    ENSEMBLE,
    METHODS,
    AuditRecord,
    BeliefVector,
    Classification,
    Outcome,
    Verdict,
)
from .errors import ContractError, ThresholdUndefinedError


def _as_scores(X) -> np.ndarray:
    arr = np.asarray(X, dtype=float)
    if arr.ndim == 2 and arr.shape[1] == 1:
        arr = arr[:, 0]
    if arr.ndim != 1:
        raise ContractError(f"expected one score per sample, got shape {arr.shape}")
    return arr


def _as_outcomes(y) -> np.ndarray:
    return np.array([Outcome(v).value for v in y], dtype=object)


def _fraction_mean(values: Sequence[float | Fraction]) -> Fraction:
    return sum(map(Fraction, values), Fraction(0)) / len(values)


def _rank_fractions(scores: Mapping[str, float]) -> dict[str, Fraction]:
    if not scores:
        raise ContractError("rank_normalize needs at least one score")
    ids = list(scores)
    # average ranks are whole or half integers, exact in a float
    ranks = rankdata([scores[i] for i in ids], method="average")
    n = len(ids)
    return {i: Fraction(float(r)) / n for i, r in zip(ids, ranks)}


def rank_normalize(scores: Mapping[str, float]) -> dict[str, float]:
    """``average_rank / N`` with rank 1 for the lowest score; ties share a rank."""
    return {i: float(v) for i, v in _rank_fractions(scores).items()}


class RankNormalizer(TransformerMixin, BaseEstimator):
    """Normalize belief scores by their rank within a reference pool.

    NaN marks a missing score: it is left out of the pool on ``fit`` and
    passes through ``transform`` unchanged. Values above the whole pool clip
    to 1.
    """

    def fit(self, X, y=None):
        X = _as_scores(X)
        pool = X[~np.isnan(X)]
        if pool.size == 0:
            raise ContractError("RankNormalizer needs at least one finite score")
        self.pool_ = np.sort(pool)
        self.n_pool_ = pool.size
        return self

    def transform(self, X):
        check_is_fitted(self, "pool_")
        X = _as_scores(X)
        out = np.full(X.shape, np.nan)
        ok = ~np.isnan(X)
        left = np.searchsorted(self.pool_, X[ok], side="left")
        right = np.searchsorted(self.pool_, X[ok], side="right")
        out[ok] = np.minimum((left + right + 1) / 2.0 / self.n_pool_, 1.0)
        return out


class BeliefThresholdClassifier(BaseEstimator):
    """Threshold = mean score over correct answers; errors above it are delusions.

    ``X`` holds one score per answer (NaN when the method failed to score it)
    and ``y`` the graded outcomes. The comparison is strict: an error whose
    score equals the threshold is an ordinary hallucination.
    """

    def fit(self, X, y):
        X, y = _as_scores(X), _as_outcomes(y)
        mask = (y == Outcome.CORRECT.value) & ~np.isnan(X)
        if not mask.any():
            raise ThresholdUndefinedError("no correct answer carries a score")
        self.threshold_exact_ = _fraction_mean(X[mask].tolist())
        self.threshold_ = float(self.threshold_exact_)
        self.n_correct_used_ = int(mask.sum())
        return self

    def predict(self, X) -> np.ndarray:
        """True where the score is high enough that an error would be a delusion."""
        check_is_fitted(self, "threshold_")
        X = _as_scores(X)
        t = self.threshold_exact_
        return np.array([not np.isnan(x) and Fraction(x) > t for x in X.tolist()], dtype=bool)

    def classify(self, X, y) -> np.ndarray:
        high = self.predict(X)
        y = _as_outcomes(y)
        labels = np.full(y.shape, Classification.NONE.value, dtype=object)
        wrong = y == Outcome.INCORRECT.value
        labels[wrong] = Classification.HALLUCINATION.value
        labels[wrong & high] = Classification.DELUSION.value
        return labels


# ---------------------------------------------------------------------------
# record-level API


@dataclass(frozen=True)
class ThresholdSpec:
    method: str
    threshold: float | Fraction
    n_correct_used: int
    normalized: bool

    def to_json(self) -> dict[str, Any]:
        return {
            "method": self.method,
            "threshold": float(self.threshold),
            "n_correct_used": self.n_correct_used,
            "normalized": self.normalized,
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> ThresholdSpec:
        return cls(obj["method"], obj["threshold"], obj["n_correct_used"], obj["normalized"])


def outcome_for(record: AuditRecord, method: str) -> Outcome:
    v = record.method_verdicts.get(method) or record.verdict
    if v is None:
        raise ContractError(f"record {record.item.id!r} has no graded outcome")
    return v.outcome


def normalize_run(records: Sequence[AuditRecord], methods: Iterable[str] = METHODS) -> list[AuditRecord]:
    """Fill ``belief.normalized`` by ranking each method over the whole run.

    Rejected answers carry no answer belief and stay out of the pool.
    """
    normalized: list[dict[str, Fraction | None]] = [dict() for _ in records]
    for method in methods:
        pool = {
            i: r.belief.raw[method]
            for i, r in enumerate(records)
            if r.belief.raw.get(method) is not None and outcome_for(r, method) is not Outcome.REJECTED
        }
        ranked = _rank_fractions(pool) if pool else {}
        for i, r in enumerate(records):
            if method in r.belief.raw or method in r.belief.parse_failed:
                normalized[i][method] = ranked.get(i)
    return [
        replace(r, belief=replace(r.belief, normalized=n)) for r, n in zip(records, normalized)
    ]


def belief_threshold(
    records: Sequence[AuditRecord], method: str, use_normalized: bool = True
) -> ThresholdSpec:
    """Exact mean score over correct answers that carry one."""
    used = [
        s
        for r in records
        if outcome_for(r, method) is Outcome.CORRECT
        and (s := r.belief.score(method, use_normalized)) is not None
    ]
    if not used:
        raise ThresholdUndefinedError(f"{method}: no correct answer carries a score")
    return ThresholdSpec(method, _fraction_mean(used), len(used), use_normalized)


def classify(records: Sequence[AuditRecord], spec: ThresholdSpec) -> list[AuditRecord]:
    """Set ``method_verdicts[spec.method]`` on every record."""
    out = []
    for r in records:
        outcome = outcome_for(r, spec.method)
        score = r.belief.score(spec.method, spec.normalized)
        label = Classification.NONE
        if outcome is Outcome.INCORRECT:
            label = (
                Classification.DELUSION
                if score is not None and Fraction(score) > Fraction(spec.threshold)
                else Classification.HALLUCINATION
            )
        verdict = Verdict(r.item.id, outcome, label, score, spec.threshold)
        out.append(replace(r, method_verdicts={**r.method_verdicts, spec.method: verdict}))
    return out


def ensemble(
    beliefs: Sequence[BeliefVector], methods: Sequence[str], normalized: bool = True
) -> list[BeliefVector]:
    """Average the requested methods' scores per item.

    Items missing some methods average the rest and are flagged partial;
    items missing all of them get no ensemble score.
    """
    if not methods or not set(methods) <= set(METHODS):
        raise ContractError(f"ensemble methods must be a non-empty subset of {METHODS}")
    out = []
    for b in beliefs:
        vals = [b.score(m, normalized) for m in methods]
        have = [v for v in vals if v is not None]
        if not have:
            out.append(
                replace(b, ensemble=None, ensemble_partial=False,
                        parse_failed=b.parse_failed | {ENSEMBLE})
            )
            continue
        out.append(
            replace(
                b,
                ensemble=_fraction_mean(have),
                ensemble_partial=len(have) < len(methods),
                parse_failed=b.parse_failed - {ENSEMBLE},
            )
        )
    return out
