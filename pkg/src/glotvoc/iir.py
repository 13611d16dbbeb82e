"""All-pole IIR filtering with closed-form reverse-mode adjoints.

The forward recursion s[n] = e[n] - sum_i a[i] * s[n-i] runs sequentially
(at C speed via scipy's direct-form filter) because low-order recursions
are faster computed directly than approximated in the frequency domain.
Both adjoints reuse the same primitive:

* the gradient with respect to the input is the same filter applied to the
  time-reversed output gradient, reversed back;
* the gradient with respect to the coefficients needs only one extra
  filter pass, because the sensitivity of the output to a[i] is the
  sensitivity to a[1] delayed by i - 1 samples, followed by M inner
  products.

Stability is not enforced here; it is guaranteed upstream by the cascade
parameterisation. Non-finite outputs (overflow from unstable coefficients)
raise immediately with the first offending index.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter

__all__ = [
    "FilterOverflowError",
    "FilterBatch",
    "lfilter_allpole",
    "vjp_input",
    "vjp_coeffs",
    "filter_batch",
]


class FilterOverflowError(FloatingPointError):
    """Filter output became non-finite."""

    def __init__(self, index: int):
        super().__init__(f"non-finite filter output, first at index {index}")
        self.index = index


def _check_finite(out: np.ndarray) -> np.ndarray:
    finite = np.isfinite(out)
    if not finite.all():
        raise FilterOverflowError(int(np.argmin(finite)))
    return out


def lfilter_allpole(e, a) -> np.ndarray:
    """Run s[n] = e[n] - sum_i a[i] s[n-i] with zero initial conditions.

    ``a`` holds a[1]..a[M]; the leading unit coefficient is implicit.
    Computed in double precision regardless of input dtype.
    """
    e = np.asarray(e, dtype=np.float64)
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    den = np.empty(a.size + 1)
    den[0] = 1.0
    den[1:] = a
    return _check_finite(lfilter([1.0], den, e))


def vjp_input(dl_ds, a) -> np.ndarray:
    """Gradient of a scalar loss w.r.t. the filter input.

    Same filter, run backwards in time: the adjoint recursion's initial
    conditions (beyond the signal end) are naturally zero.
    """
    dl_ds = np.asarray(dl_ds, dtype=np.float64)
    return lfilter_allpole(dl_ds[::-1], a)[::-1]


def vjp_coeffs(dl_ds, s, a) -> np.ndarray:
    """Gradient of a scalar loss w.r.t. the coefficients a[1]..a[M].

    ``s`` must be the forward output produced by ``a``. One filter pass
    yields the sensitivity to a[1]; the shift structure turns the rest
    into inner products. Out-of-range (pre-signal) terms are zero.
    """
    dl_ds = np.asarray(dl_ds, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    if dl_ds.shape != s.shape:
        raise ValueError("gradient and forward output must have equal length")
    n = s.shape[0]
    m = a.shape[0]

    shifted = np.empty_like(s)
    shifted[0] = 0.0
    shifted[1:] = -s[:-1]
    d = lfilter_allpole(shifted, a)

    grad = np.zeros(m)
    for i in range(min(m, n)):
        grad[i] = dl_ds[i:] @ d[: n - i]
    return grad


@dataclass
class FilterBatch:
    """B equal-length sequences with one coefficient vector each."""

    inputs: np.ndarray
    coeffs: np.ndarray

    def __post_init__(self) -> None:
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        if self.inputs.ndim != 2 or self.coeffs.ndim != 2:
            raise ValueError("inputs must be (B, N) and coeffs (B, M)")
        if self.inputs.shape[0] != self.coeffs.shape[0]:
            raise ValueError("inputs and coeffs must agree on the batch size")


def filter_batch(batch: FilterBatch, max_workers: int | None = None) -> np.ndarray:
    """Filter every sequence in the batch; outputs bitwise match the
    single-sequence op regardless of scheduling.

    At most one worker touches a sequence (the recursion itself cannot be
    split). The returned outputs are exactly the forward state the
    coefficient adjoint needs, so callers keep them for the backward pass.
    """
    b = batch.inputs.shape[0]
    if max_workers is None:
        max_workers = os.cpu_count() or 1
    workers = max(1, min(max_workers, b))
    if workers == 1 or b == 1:
        rows = [lfilter_allpole(batch.inputs[i], batch.coeffs[i]) for i in range(b)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(
                pool.map(
                    lambda i: lfilter_allpole(batch.inputs[i], batch.coeffs[i]),
                    range(b),
                )
            )
    return np.stack(rows)
