"""
Subject-specific linear input calibration.

Every source subject owns an F x F matrix applied on the right of each
time step's feature vector. Unseen subjects are calibrated with the mean of
the trained matrices.
"""

import logging
from typing import Dict, List, Optional, Sequence

import numpy as np

from .numcore import Tensor, concat, getitem, matmul, stack
from .param_store import ParamStore, identity

logger = logging.getLogger(__name__)

PREFIX = "align/W_s/"


class UnknownSubjectError(KeyError):
    """Raised when a batch carries a subject id without a matrix in the bank."""

    def __init__(self, subject: int, known: Sequence[int]):
        super().__init__(subject)
        self.subject = subject
        self.known = list(known)

    def __str__(self) -> str:
        return f"No alignment matrix for subject {self.subject}; bank holds {self.known}"


class EmptyBankError(RuntimeError):
    """Raised when the mean transform is requested from an empty bank."""


class AlignmentBank:
    """Per-subject calibration matrices stored under ``align/W_s/<subject>``."""

    def __init__(self, store: ParamStore, subjects: Sequence[int], feature_dim: int):
        self.store = store
        self.feature_dim = feature_dim
        self.subjects: List[int] = sorted(int(s) for s in subjects)
        for subject in self.subjects:
            store.add(self.path(subject), identity(feature_dim))
        self._mean: Optional[np.ndarray] = None
        self._mean_version = -1
        logger.debug(f"Alignment bank with {len(self.subjects)} subjects, F={feature_dim}")

    @staticmethod
    def path(subject: int) -> str:
        return f"{PREFIX}{int(subject)}"

    def matrix(self, subject: int) -> Tensor:
        if int(subject) not in self.subjects:
            raise UnknownSubjectError(int(subject), self.subjects)
        return self.store[self.path(subject)]

    def matrices(self) -> Dict[int, Tensor]:
        return {s: self.store[self.path(s)] for s in self.subjects}

    def mean_matrix(self) -> np.ndarray:
        """
        Elementwise mean of the bank.

        Cached against the store version, which the optimizer, restore and
        checkpoint loading bump; callers writing matrices directly must call
        ``store.bump()``.

        Raises:
            EmptyBankError: If no subject matrix is registered
        """
        if not self.subjects:
            raise EmptyBankError("Alignment bank is empty; no subject matrix to average")
        if self._mean is None or self._mean_version != self.store.version:
            self._mean = np.mean([self.store[self.path(s)].data for s in self.subjects], axis=0)
            self._mean_version = self.store.version
        return self._mean

    def calibrate_train(self, x: Tensor, subjects: np.ndarray) -> Tensor:
        """
        Right-multiply every sample by its own subject's matrix.

        Args:
            x: (B, T, F) raw features
            subjects: (B,) subject id per sample

        Returns:
            (B, T, F) calibrated features; gradients reach each W_s

        Raises:
            UnknownSubjectError: If a subject id has no matrix
        """
        subjects = np.asarray(subjects)
        if len(subjects) != x.shape[0]:
            raise ValueError(f"{len(subjects)} subject ids for a batch of {x.shape[0]}")
        present = [int(s) for s in np.unique(subjects)]
        for subject in present:
            if subject not in self.subjects:
                raise UnknownSubjectError(subject, self.subjects)

        if len(present) == 1:
            return matmul(x, self.matrix(present[0]))

        parts, order = [], []
        for subject in present:
            rows = np.nonzero(subjects == subject)[0]
            parts.append(matmul(getitem(x, rows), self.matrix(subject)))
            order.append(rows)
        inverse = np.argsort(np.concatenate(order), kind="stable")
        return getitem(concat(parts, axis=0), inverse)

    def identity_penalty(self) -> Tensor:
        """
        Mean over subjects of the squared Frobenius distance ||W_s - I||^2.

        Raises:
            EmptyBankError: If no subject matrix is registered
        """
        if not self.subjects:
            raise EmptyBankError("Alignment bank is empty; no subject matrix to penalise")
        eye = np.eye(self.feature_dim, dtype=self.store.dtype)
        distances = []
        for subject in self.subjects:
            deviation = self.matrix(subject) - eye
            distances.append((deviation * deviation).sum())
        return stack(distances).mean()

    def calibrate_test(self, x: Tensor) -> Tensor:
        """Apply the mean transform W-bar to every sample."""
        return matmul(x, Tensor(self.mean_matrix().astype(x.dtype)))
