"""Input validation helpers shared by the estimator-facing code."""
import numpy as np
from sklearn.utils.validation import check_array

TRACE_LEN = 256


def check_trace(values) -> np.ndarray:
    """Return ``values`` as a finite float vector of length 256."""
    v = np.asarray(getattr(values, "values", values), dtype=float)
    if v.shape != (TRACE_LEN,):
        raise ValueError(f"a measurement trace has exactly {TRACE_LEN} values, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("trace contains NaN or inf")
    return v


def check_trace_matrix(X) -> np.ndarray:
    if not isinstance(X, np.ndarray) and X and hasattr(X[0], "values"):
        X = [x.values for x in X]
    X = check_array(X, dtype=float, ensure_2d=True)
    if X.shape[1] != TRACE_LEN:
        raise ValueError(f"expected {TRACE_LEN} columns, got {X.shape[1]}")
    return X

