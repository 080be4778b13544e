"""Per-group accuracy, PQD/DPM/EOM fairness ratios, AUC and rate curves.

Rates are computed from integer counts with exact rational arithmetic and
converted to float at the end, so results do not depend on record order.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.stats import rankdata

from .core import DataError, PredictionLog, Vocabulary


def _present_groups(log: PredictionLog) -> np.ndarray:
    if len(log) == 0:
        raise DataError("prediction log is empty")
    return np.unique(log.skin)


def _ratio(values: Sequence[Fraction]) -> Fraction:
    hi = max(values)
    return Fraction(1) if hi == 0 else min(values) / hi


def group_accuracy(log: PredictionLog) -> Tuple[Dict[str, float], float]:
    """Accuracy per skin type present in the log, and overall sample accuracy."""
    groups = _present_groups(log)
    correct = log.true == log.pred
    per_type = {}
    for g in groups:
        mask = log.skin == g
        per_type[log.skin_types.decode(int(g))] = float(Fraction(int(correct[mask].sum()), int(mask.sum())))
    return per_type, float(Fraction(int(correct.sum()), len(log)))


def pqd(accuracies: Union[Mapping[str, float], Sequence[float]]) -> float:
    """Lowest over highest group accuracy; 1.0 when every group scores 0."""
    values = list(accuracies.values()) if isinstance(accuracies, Mapping) else list(accuracies)
    if not values:
        raise ValueError("pqd needs at least one group accuracy")
    if any(not 0.0 <= v <= 1.0 for v in values):
        raise ValueError("accuracies must lie in [0, 1]")
    hi = max(values)
    return 1.0 if hi == 0 else min(values) / hi


def _group_counts(log: PredictionLog):
    groups = _present_groups(log)
    if len(groups) < 2:
        raise DataError("fairness ratios need at least two skin-type groups in the log")
    M = len(log.conditions)
    size = {int(g): int((log.skin == g).sum()) for g in groups}
    predicted = {int(g): np.bincount(log.pred[log.skin == g], minlength=M) for g in groups}
    return groups, size, predicted


def prediction_rates(log: PredictionLog) -> Dict[int, Dict[int, Fraction]]:
    """``p(pred = i | s = j)`` as {class: {group: rate}}."""
    groups, size, predicted = _group_counts(log)
    return {i: {int(g): Fraction(int(predicted[int(g)][i]), size[int(g)]) for g in groups}
            for i in range(len(log.conditions))}


def true_positive_rates(log: PredictionLog) -> Dict[int, Dict[int, Fraction]]:
    """``p(pred = i | y = i, s = j)``; groups without class-i samples are omitted."""
    groups, _, _ = _group_counts(log)
    rates: Dict[int, Dict[int, Fraction]] = {}
    for i in range(len(log.conditions)):
        rates[i] = {}
        for g in groups:
            mask = (log.skin == g) & (log.true == i)
            n = int(mask.sum())
            if n:
                rates[i][int(g)] = Fraction(int((log.pred[mask] == i).sum()), n)
    return rates


def dpm(log: PredictionLog) -> float:
    """Mean over classes of min/max per-group prediction rate."""
    rates = prediction_rates(log)
    terms = [_ratio(list(by_group.values())) for by_group in rates.values()]
    return float(sum(terms, Fraction(0)) / len(terms))


def eom(log: PredictionLog) -> float:
    """Mean over classes of min/max per-group true-positive rate.

    Classes with no ground-truth sample in any group drop out of the mean.
    """
    rates = true_positive_rates(log)
    terms = [_ratio(list(by_group.values())) for by_group in rates.values() if by_group]
    if not terms:
        raise DataError("no class has ground-truth samples; EOM undefined")
    return float(sum(terms, Fraction(0)) / len(terms))


def group_rate_curves(log: PredictionLog, class_index: int) -> Tuple[Dict[str, float], Dict[str, Optional[float]]]:
    """Per-skin-type prediction rate and true-positive rate for one class."""
    if not 0 <= class_index < len(log.conditions):
        raise DataError(f"class index {class_index} outside vocabulary")
    groups = _present_groups(log)
    pred_rate, tpr = {}, {}
    for g in groups:
        name = log.skin_types.decode(int(g))
        in_group = log.skin == g
        pred_rate[name] = float(Fraction(int((log.pred[in_group] == class_index).sum()), int(in_group.sum())))
        positives = in_group & (log.true == class_index)
        n = int(positives.sum())
        tpr[name] = float(Fraction(int((log.pred[positives] == class_index).sum()), n)) if n else None
    return pred_rate, tpr


def auc(log: PredictionLog, positive_class: int = 1) -> float:
    """Area under the ROC curve from the positive-class probability.

    Equals the Mann-Whitney U statistic over n_pos * n_neg, ties counted 1/2.
    """
    scores = log.probs[:, positive_class]
    is_pos = log.true == positive_class
    n_pos, n_neg = int(is_pos.sum()), int((~is_pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC needs both positive and negative samples")
    ranks = rankdata(scores)
    u = ranks[is_pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class FairnessReport:
    accuracy: float
    group_accuracy: Dict[str, float]
    pqd: float
    dpm: float
    eom: float
    auc: Optional[float] = None
    prediction_rates: Dict[str, Dict[str, float]] = field(default_factory=dict)
    true_positive_rates: Dict[str, Dict[str, Optional[float]]] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def to_markdown(self, name: str = "model") -> str:
        """One-row table in percentages with 2 decimals; AUC as a plain fraction."""
        types = list(self.group_accuracy)
        header = ["Model", "Avg", *types, "PQD", "DPM", "EOM"]
        row = [name, f"{100 * self.accuracy:.2f}", *(f"{100 * self.group_accuracy[t]:.2f}" for t in types),
               f"{100 * self.pqd:.2f}", f"{100 * self.dpm:.2f}", f"{100 * self.eom:.2f}"]
        if self.auc is not None:
            header.append("AUC")
            row.append(f"{self.auc:.2f}")
        return "\n".join(["| " + " | ".join(header) + " |", "|" + "---|" * len(header),
                          "| " + " | ".join(row) + " |"])


def fairness_report(log: PredictionLog) -> FairnessReport:
    per_type, overall = group_accuracy(log)
    report = FairnessReport(overall, per_type, pqd(per_type), dpm(log), eom(log))
    if len(log.conditions) == 2 and len(np.unique(log.true)) == 2:
        report.auc = auc(log, 1)
    for i, name in enumerate(log.conditions.names):
        report.prediction_rates[name], report.true_positive_rates[name] = group_rate_curves(log, i)
    return report


def rate_curves_csv(report: FairnessReport) -> str:
    lines = ["condition,skin_type,prediction_rate,true_positive_rate"]
    for cond, by_type in report.prediction_rates.items():
        for skin, rate in by_type.items():
            tpr = report.true_positive_rates[cond].get(skin)
            lines.append(f"{cond},{skin},{rate!r},{'' if tpr is None else repr(tpr)}")
    return "\n".join(lines) + "\n"


# -- PredictionLog CSV ----------------------------------------------------------

def write_prediction_log(log: PredictionLog, path) -> None:
    """CSV ``sample_id,true,pred,p_<condition>...,skin_type`` with label names."""
    prob_cols = [f"p_{name}" for name in log.conditions.names]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_id", "true", "pred", *prob_cols, "skin_type"])
        for i, sid in enumerate(log.sample_ids):
            writer.writerow([sid, log.conditions.decode(int(log.true[i])), log.conditions.decode(int(log.pred[i])),
                             *(repr(float(p)) for p in log.probs[i]), log.skin_types.decode(int(log.skin[i]))])


def read_prediction_log(path, skin_types: Optional[Vocabulary] = None) -> PredictionLog:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"prediction log {path} is empty") from None
        rows = list(reader)
    if header[:3] != ["sample_id", "true", "pred"] or header[-1] != "skin_type":
        raise DataError(f"unexpected prediction log header: {header}")
    prob_cols = header[3:-1]
    if not prob_cols or not all(c.startswith("p_") for c in prob_cols):
        raise DataError("prediction log has no p_<condition> columns")
    if not rows:
        raise DataError(f"prediction log {path} has no records")
    conditions = Vocabulary(tuple(c[2:] for c in prob_cols))
    skin_types = skin_types or Vocabulary.from_names(r[-1] for r in rows)
    try:
        return PredictionLog(
            [r[0] for r in rows],
            np.array([conditions.encode(r[1]) for r in rows]),
            np.array([conditions.encode(r[2]) for r in rows]),
            np.array([[float(v) for v in r[3:-1]] for r in rows]),
            np.array([skin_types.encode(r[-1]) for r in rows]),
            conditions,
            skin_types,
        )
    except (ValueError, IndexError) as exc:
        raise DataError(f"malformed prediction log {path}: {exc}") from exc
