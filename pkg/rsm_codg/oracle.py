"""
Logistic-regression calibration oracle for the synthetic generator.

A multinomial logistic regression on time-averaged, source-standardised
features is evaluated leave-one-subject-out. Its accuracy tells how hard a
generated dataset is, and ``calibrate_shift`` picks the inter-subject shift
that puts the oracle inside a target accuracy band.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, Sequence, Tuple

import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import accuracy_score
from sklearn.model_selection import LeaveOneGroupOut
from sklearn.pipeline import Pipeline
from sklearn.preprocessing import StandardScaler

from .dataio import synthesize
from .models import Dataset, SynthSpec

logger = logging.getLogger(__name__)

DEFAULT_SHIFT_GRID = (0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0)
TARGET_BAND = (45.0, 70.0)


@dataclass
class OracleResult:
    per_subject: Dict[int, float] = field(default_factory=dict)

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(list(self.per_subject.values()))) if self.per_subject else float("nan")

    def to_dict(self) -> Dict:
        return {"per_subject": {str(k): v for k, v in self.per_subject.items()},
                "mean_accuracy": self.mean_accuracy}


def make_oracle(c: float = 1.0, max_iter: int = 1000) -> Pipeline:
    """Standardisation fitted on the training rows, then L2 multinomial logistic regression."""
    return Pipeline([
        ("scaler", StandardScaler()),
        ("logistic", LogisticRegression(C=c, max_iter=max_iter)),
    ])


def oracle_loso(dataset: Dataset, c: float = 1.0, max_iter: int = 1000) -> OracleResult:
    """LOSO accuracy (percent) of the logistic oracle per held-out subject."""
    averaged = dataset.samples.astype(np.float64).mean(axis=1)
    result = OracleResult()
    for train, test in LeaveOneGroupOut().split(averaged, dataset.labels, groups=dataset.subjects):
        subject = int(dataset.subjects[test[0]])
        oracle = make_oracle(c, max_iter).fit(averaged[train], dataset.labels[train])
        result.per_subject[subject] = 100.0 * float(accuracy_score(dataset.labels[test],
                                                                   oracle.predict(averaged[test])))
        logger.debug(f"Oracle fold {subject}: {result.per_subject[subject]:.2f}%")
    logger.info(f"Oracle LOSO mean accuracy {result.mean_accuracy:.2f}%")
    return result


def calibrate_shift(spec: SynthSpec, grid: Sequence[float] = DEFAULT_SHIFT_GRID,
                    band: Tuple[float, float] = TARGET_BAND) -> Tuple[float, OracleResult]:
    """
    Return the first shift in ``grid`` whose oracle LOSO accuracy lies in ``band``.

    Raises:
        ValueError: If no grid value lands inside the band
    """
    low, high = band
    tried: Dict[float, float] = {}
    for shift in grid:
        result = oracle_loso(synthesize(replace(spec, shift=float(shift))))
        tried[float(shift)] = result.mean_accuracy
        logger.info(f"Calibration: shift={shift} -> oracle {result.mean_accuracy:.2f}%")
        if low <= result.mean_accuracy <= high:
            return float(shift), result
    raise ValueError(f"No shift in {list(grid)} puts the oracle inside [{low}, {high}]%: {tried}")
