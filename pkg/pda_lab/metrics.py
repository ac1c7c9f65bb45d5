"""
Error bookkeeping for corruption robustness (CE, mCE, relative mCE) and the mixed clean/adversarial/corrupted test.
"""
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from dataclasses import dataclass, field

import csv

import numpy as np

from pda_lab.config import rng_for
from pda_lab.corruptions import CATEGORIES, SEVERITIES, CorruptionSuite, category_of
from pda_lab.data.datasets import Dataset, concat
from pda_lab.nn import Model, predict

import logging
logger = logging.getLogger(__name__)


REPORT_COLUMNS = ("corruption", "severity", "err_model", "err_base", "CE", "RmCE")


def error_rate(predictions: Sequence[int], labels: Sequence[int]) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("error rate of an empty set")
    if predictions.shape != labels.shape:
        raise ValueError("shape mismatch: {} vs {}".format(predictions.shape, labels.shape))
    return float(np.mean(predictions != labels))


def corruption_error(model_errors: Sequence[float], base_errors: Sequence[float]) -> float:
    """CE_c = sum_s E^f_{s,c} / sum_s E^base_{s,c}."""
    denominator = float(np.sum(base_errors))
    if denominator <= 0.:
        raise ValueError("baseline error sum is zero, corruption error undefined")
    return float(np.sum(model_errors)) / denominator


def mce(corruption_errors: Sequence[float]) -> float:
    if len(corruption_errors) == 0:
        raise ValueError("mean corruption error of an empty list")
    return float(np.mean(corruption_errors))


def relative_corruption_error(model_errors: Sequence[float], model_clean: float, base_errors: Sequence[float],
                              base_clean: float) -> float:
    """
    (sum_s E^f_{s,c} - E^f_clean) / (sum_s E^base_{s,c} - E^base_clean); one clean error is subtracted from the
    five-severity sum.
    """
    denominator = float(np.sum(base_errors)) - base_clean
    if denominator == 0.:
        raise ValueError("baseline shows no decline under corruption, relative error undefined")
    return (float(np.sum(model_errors)) - model_clean) / denominator


def relative_mce(model_errors: Mapping[str, Sequence[float]], model_clean: float,
                 base_errors: Mapping[str, Sequence[float]], base_clean: float) -> Tuple[Dict[str, float], float]:
    """
    :return: relative corruption error per corruption and their mean
    """
    per_corruption = {c: relative_corruption_error(model_errors[c], model_clean, base_errors[c], base_clean)
                      for c in model_errors}
    return per_corruption, mce(list(per_corruption.values()))


@dataclass
class ErrorTable:
    """
    Top-1 errors of one model: clean and per corruption at severities 1..5.
    """
    model_id: str
    clean_error: float
    errors: Dict[str, List[float]] = field(default_factory=dict)

    def __post_init__(self):
        if not 0. <= self.clean_error <= 1.:
            raise ValueError("clean error {} outside [0, 1]".format(self.clean_error))
        for corruption, row in self.errors.items():
            if len(row) != len(SEVERITIES):
                raise ValueError("{}: expected {} severities, got {}".format(corruption, len(SEVERITIES), len(row)))
            if any(not 0. <= e <= 1. for e in row):
                raise ValueError("{}: error outside [0, 1]".format(corruption))

    @property
    def corruptions(self) -> List[str]:
        return list(self.errors)


@dataclass
class EvalReport:
    model: ErrorTable
    baseline: ErrorTable
    ce: Dict[str, float]
    mce: float
    rmce: Dict[str, float]
    relative_mce: float
    category_mce: Dict[str, float] = field(default_factory=dict)


def build_report(model: ErrorTable, baseline: ErrorTable) -> EvalReport:
    """Score `model` against `baseline` over the model's corruptions (the baseline must cover all of them)."""
    missing = [c for c in model.corruptions if c not in baseline.errors]
    if missing:
        raise ValueError("baseline has no errors for {}".format(", ".join(missing)))
    if not model.corruptions:
        raise ValueError("error table holds no corruptions")
    ce = {c: corruption_error(model.errors[c], baseline.errors[c]) for c in model.corruptions}
    rmce, rel = relative_mce(model.errors, model.clean_error, baseline.errors, baseline.clean_error)
    categories = dict()
    for category in ("noise", "blur", "weather", "digital"):
        members = [ce[c] for c in model.corruptions if category_of(c) == category]
        if members:
            categories[category] = mce(members)
    report = EvalReport(model, baseline, ce, mce(list(ce.values())), rmce, rel, categories)
    logger.info("{} vs {}: mCE {:.4f}, relative mCE {:.4f}".format(model.model_id, baseline.model_id, report.mce,
                                                                   report.relative_mce))
    return report


def report_rows(report: EvalReport) -> List[List[str]]:
    rows = []
    for c in report.model.corruptions:
        for s, (e_model, e_base) in enumerate(zip(report.model.errors[c], report.baseline.errors[c]), start=1):
            rows.append([c, str(s), "{:.6f}".format(e_model), "{:.6f}".format(e_base),
                         "{:.6f}".format(report.ce[c]), "{:.6f}".format(report.rmce[c])])
    rows.append(["clean_error", "", "{:.6f}".format(report.model.clean_error),
                 "{:.6f}".format(report.baseline.clean_error), "", ""])
    rows.append(["mCE", "", "", "", "{:.6f}".format(report.mce), ""])
    rows.append(["relative_mCE", "", "", "", "", "{:.6f}".format(report.relative_mce)])
    for category, value in report.category_mce.items():
        rows.append(["mCE_{}".format(category), "", "", "", "{:.6f}".format(value), ""])
    return rows


def write_report_csv(path: str, report: EvalReport):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(REPORT_COLUMNS)
        writer.writerows(report_rows(report))
    logger.info("wrote corruption report to {}".format(path))


def evaluate_error_table(model: Model, suite: CorruptionSuite, model_id: str, batch_size: int = 256) -> ErrorTable:
    clean = error_rate(predict(model, suite.clean.images, batch_size), suite.clean.labels)
    errors = dict()
    for kind in suite.kinds:
        row = []
        for severity in SEVERITIES:
            data = suite.get(kind, severity)
            row.append(error_rate(predict(model, data.images, batch_size), data.labels))
        errors[kind] = row
        logger.debug("{} on {}: {}".format(model_id, kind, ", ".join("{:.4f}".format(e) for e in row)))
    return ErrorTable(model_id, clean, errors)


# ---------------------------------------------------------------------------------------------------------------------
# Mixed test

def mixed_sample(clean: Dataset, adversarial: Dataset, corrupted: Dataset,
                 seed: int = 0) -> Tuple[np.ndarray, np.ndarray, int]:
    """
    Equal-proportion union: every component is shuffled with its own seeded stream and truncated to the smallest
    component size n.

    :return: images, labels and n
    """
    for name, part in (("clean", clean), ("adversarial", adversarial), ("corrupted", corrupted)):
        if part is None or len(part) == 0:
            raise ValueError("mixed test needs a non-empty {} set".format(name))
    n = min(len(clean), len(adversarial), len(corrupted))
    images, labels = [], []
    for name, part in (("clean", clean), ("adversarial", adversarial), ("corrupted", corrupted)):
        index = rng_for(seed, "mixed/{}".format(name)).permutation(len(part))[:n]
        images.append(part.images[index])
        labels.append(part.labels[index])
    return np.concatenate(images), np.concatenate(labels), n


def mixed_test(model: Model, clean: Dataset, adversarial: Dataset, corrupted: Dataset, seed: int = 0,
               batch_size: int = 256) -> float:
    """Top-1 accuracy on the equal-proportion union of the three sets."""
    images, labels, n = mixed_sample(clean, adversarial, corrupted, seed)
    accuracy = float(np.mean(predict(model, images, batch_size) == labels))
    logger.info("mixed test: {} examples per component, accuracy {:.4f}".format(n, accuracy))
    return accuracy


def category_set(suite: CorruptionSuite, category: Optional[str] = None) -> Dataset:
    """
    Union of a suite's sub-datasets restricted to a category ("noise", "blur", "weather", "digital", "other";
    None or "all" for every kind).
    """
    if category in (None, "all"):
        kinds = suite.kinds
    elif category in CATEGORIES:
        kinds = [k for k in suite.kinds if k in CATEGORIES[category]]
    else:
        raise ValueError("unknown category '{}'".format(category))
    if not kinds:
        raise ValueError("suite holds no corruptions of category '{}'".format(category))
    return concat([suite.get(k, s) for k in kinds for s in SEVERITIES], split="test")
