"""Recover a secret byte from 256 counter readings, one per guess."""
from __future__ import annotations

import enum
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import TRACE_LEN, check_trace, check_trace_matrix


class DecodeMethod(enum.Enum):
    MIN_POINT = "min"
    MAX_POINT = "max"
    DROP_BOUNDARY = "drop"
    RISE_BOUNDARY = "rise"


# calibration preference order
METHOD_ORDER = (
    DecodeMethod.MIN_POINT,
    DecodeMethod.MAX_POINT,
    DecodeMethod.DROP_BOUNDARY,
    DecodeMethod.RISE_BOUNDARY,
)


class DecodeError(Exception):
    pass


class FlatTrace(DecodeError):
    """All readings are equal; the event carries no information."""


class NoWorkingMethod(DecodeError):
    pass


def decode(values, method: DecodeMethod) -> int:
    """Guess index singled out by ``method``; ties go to the lowest index.

    The boundary methods score ``t`` in 1..255 by the step from ``t-1`` to
    ``t`` (no wraparound at 0).
    """
    v = check_trace(values)
    if np.all(v == v[0]):
        raise FlatTrace("all 256 readings are equal")
    method = DecodeMethod(method)
    if method is DecodeMethod.MIN_POINT:
        return int(np.argmin(v))
    if method is DecodeMethod.MAX_POINT:
        return int(np.argmax(v))
    step = v[1:] - v[:-1]
    if method is DecodeMethod.DROP_BOUNDARY:
        return 1 + int(np.argmax(-step))
    return 1 + int(np.argmax(step))


class SecretDecoder(ClassifierMixin, BaseEstimator):
    """Estimator mapping measurement traces to secret bytes.

    ``fit`` takes traces measured over known planted bytes and keeps the
    method in ``order`` that recovers the largest share of them, earliest
    first on ties (or the fixed ``method``, which is then only validated for
    shape).  ``predict`` decodes new traces with that method.

    Parameters
    ----------
    method : {"auto"} or DecodeMethod
    order : sequence of DecodeMethod, tried in turn when ``method="auto"``
    min_accuracy : float
        Share of calibration traces the chosen method must recover.  The
        default demands all of them; noisy calibration can relax it.
    """

    def __init__(self, method="auto", order: Sequence[DecodeMethod] = METHOD_ORDER,
                 min_accuracy: float = 1.0):
        self.method = method
        self.order = order
        self.min_accuracy = min_accuracy

    def fit(self, X, y):
        X = check_trace_matrix(X)
        y = np.asarray(y, dtype=int).ravel()
        if len(y) != len(X):
            raise ValueError(f"{len(X)} traces but {len(y)} labels")
        if np.any((y < 0) | (y > 255)):
            raise ValueError("labels must be bytes")
        if not 0.0 < self.min_accuracy <= 1.0:
            raise ValueError("min_accuracy must be in (0, 1]")
        if self.method == "auto":
            scores = [(self._accuracy(X, y, DecodeMethod(m)), DecodeMethod(m))
                      for m in self.order]
            best, method = max(scores, key=lambda sm: sm[0]) if scores else (0.0, None)
            if best < self.min_accuracy:
                raise NoWorkingMethod("no decode method recovers the planted bytes")
            self.method_ = method
        else:
            self.method_ = DecodeMethod(self.method)
        self.classes_ = np.arange(TRACE_LEN)
        self.n_features_in_ = TRACE_LEN
        return self

    @staticmethod
    def _accuracy(X, y, method) -> float:
        try:
            return float(np.mean([decode(row, method) == label for row, label in zip(X, y)]))
        except FlatTrace:
            return 0.0

    def predict(self, X):
        check_is_fitted(self, "method_")
        X = check_trace_matrix(X)
        return np.array([decode(row, self.method_) for row in X], dtype=int)

    def _more_tags(self):
        return {"allow_nan": False}
