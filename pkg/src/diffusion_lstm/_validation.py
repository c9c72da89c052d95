"""Input checks shared by the estimators."""
import numbers

import numpy as np
from sklearn.utils import check_array


def check_features(X, n_features=None, allow_nan=False):
    """Validate a 2-D float64 feature matrix (a 1-D vector becomes one row)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    X = check_array(X, dtype=np.float64,
                    ensure_all_finite="allow-nan" if allow_nan else True)
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError("expected {} features, got {}".format(n_features, X.shape[1]))
    return X


def check_random_state_seed(seed):
    """Accept an int seed (or None meaning 0) for numpy's default_rng."""
    if seed is None:
        return 0
    if isinstance(seed, numbers.Integral):
        return int(seed)
    raise TypeError("random_state must be an int seed, got {!r}".format(seed))


def check_probability(name, value, low_open=False):
    if not (0.0 < value < 1.0 if low_open else 0.0 <= value < 1.0):
        raise ValueError("{} must be in {}0, 1), got {}".format(
            name, "(" if low_open else "[", value))
    return float(value)
