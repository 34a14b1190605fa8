"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

Set LORAMPR_NO_NUMBA=1 to force the numpy path (useful for debugging and for
the backend benchmark under benchmarks/).  The two implementations compute
identical values; benchmarks/bench_scoring.py compares their speed.
"""

from __future__ import annotations

import os

import numpy as np

_ENV = os.environ.get("LORAMPR_NO_NUMBA", "").strip().lower()
NUMBA_DISABLED = _ENV not in ("", "0", "false", "no")

try:
    if NUMBA_DISABLED:
        raise ImportError("numba disabled via LORAMPR_NO_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - depends on environment
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def wrap(f):
            return f

        return wrap


def backend() -> str:
    return "numba" if HAVE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# assignment scoring
# ---------------------------------------------------------------------------
# Per demodulation window the candidate log-likelihood is
#   L = -(|Y|^2 - 2 Re<Y, sum_m T_[m,a_m]> + sum_{m,m'} <T_[m,a_m], T_[m',a_m']>)
# where T are the cached per-(node, peak) reconstruction spectra.  With the
# cross terms and the Gram matrix of the T vectors precomputed, every
# candidate costs O(M^2) scalars instead of O(N_F) vector work.


def _score_assignments_py(
    assign: np.ndarray, cross_re: np.ndarray, gram_re: np.ndarray, energy: float
) -> np.ndarray:
    w, m = assign.shape
    v = cross_re.shape[0] // m
    flat = assign + (np.arange(m) * v)[None, :]  # (W, M) indices into MV
    t1 = cross_re[flat].sum(axis=1)
    t2 = gram_re[flat[:, :, None], flat[:, None, :]].sum(axis=(1, 2))
    return -(energy - 2.0 * t1 + t2)


@njit(cache=True)
def _score_assignments_nb(assign, cross_re, gram_re, energy):  # pragma: no cover
    w, m = assign.shape
    v = cross_re.shape[0] // m
    out = np.empty(w, dtype=np.float64)
    for i in range(w):
        acc = energy
        for a in range(m):
            ja = assign[i, a] + a * v
            acc -= 2.0 * cross_re[ja]
            for b in range(m):
                acc += gram_re[ja, assign[i, b] + b * v]
        out[i] = -acc
    return out


def score_assignments(
    assign: np.ndarray, cross_re: np.ndarray, gram_re: np.ndarray, energy: float
) -> np.ndarray:
    """Log-likelihoods (up to the constant noise scale) of all assignments.

    assign: (W, M) int64 peak indices per node; cross_re: (M*V,) real parts of
    <Y, T>; gram_re: (M*V, M*V) real parts of the T Gram matrix; energy |Y|^2.
    """
    assign = np.ascontiguousarray(assign, dtype=np.int64)
    cross_re = np.ascontiguousarray(cross_re, dtype=np.float64)
    gram_re = np.ascontiguousarray(gram_re, dtype=np.float64)
    if HAVE_NUMBA:
        return _score_assignments_nb(assign, cross_re, gram_re, float(energy))
    return _score_assignments_py(assign, cross_re, gram_re, float(energy))


# ---------------------------------------------------------------------------
# co-location counting (symbol-level studies)
# ---------------------------------------------------------------------------


def _colocated_mask_py(bins: np.ndarray, n: int, radius: int) -> np.ndarray:
    m, ns = bins.shape
    hit = np.zeros(ns, dtype=np.bool_)
    for a in range(m):
        for b in range(a + 1, m):
            d = np.abs(bins[a] - bins[b])
            d = np.minimum(d, n - d)
            hit |= d <= radius
    return hit


@njit(cache=True)
def _colocated_mask_nb(bins, n, radius):  # pragma: no cover
    m, ns = bins.shape
    hit = np.zeros(ns, dtype=np.bool_)
    for i in range(ns):
        for a in range(m):
            for b in range(a + 1, m):
                d = abs(bins[a, i] - bins[b, i])
                if n - d < d:
                    d = n - d
                if d <= radius:
                    hit[i] = True
    return hit


def colocated_mask(bins: np.ndarray, n: int, radius: int) -> np.ndarray:
    """Per-window flag: any two users' peak bins within `radius` (cyclic)."""
    bins = np.ascontiguousarray(bins, dtype=np.int64)
    if HAVE_NUMBA:
        return _colocated_mask_nb(bins, n, radius)
    return _colocated_mask_py(bins, n, radius)
