"""
Central finite-difference verification of hand-written backward passes.

The checked function is reduced to a scalar with a fixed random projection,
L = sum(w * forward(inputs)), so one backward call with grad_out = w yields
the analytic dL/d(input) for every input at once.
"""
from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional, Sequence

import numpy as np

from mamsr.tensor_ops import GRADCHECK_DTYPE

DEFAULT_STEP = 1e-4

Inputs = Dict[str, np.ndarray]
Forward = Callable[[Inputs], np.ndarray]
Backward = Callable[[Inputs, np.ndarray], Mapping[str, np.ndarray]]


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    tolerance: float
    errors: Dict[str, float] = field(default_factory=dict)
    message: str = ""


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest absolute disagreement, relative to the larger of the two gradients' magnitudes."""
    if analytic.size == 0:
        return 0.0
    scale = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))), 1e-12)
    return float(np.max(np.abs(analytic - numeric))) / scale


def numerical_gradient(loss: Callable[[], float], array: np.ndarray, h: float = DEFAULT_STEP,
                       indices: Optional[Sequence[tuple]] = None) -> np.ndarray:
    """Central differences of loss() w.r.t. array, perturbing array in place (restored afterwards).

    Entries not listed in indices are left at zero.
    """
    grad = np.zeros_like(array)
    for idx in (indices if indices is not None else np.ndindex(array.shape)):
        old = array[idx]
        array[idx] = old + h
        plus = loss()
        array[idx] = old - h
        minus = loss()
        array[idx] = old
        grad[idx] = (plus - minus) / (2 * h)
    return grad


def _sample_indices(shape, count: Optional[int], rng: np.random.Generator):
    total = int(np.prod(shape))
    if count is None or count >= total:
        return list(np.ndindex(shape))
    flat = rng.choice(total, size=count, replace=False)
    return [np.unravel_index(i, shape) for i in flat]


def grad_check(forward: Forward, backward: Backward, inputs: Mapping[str, np.ndarray],
               tol: float = 1e-5, h: float = DEFAULT_STEP, seed: int = 0,
               wrt: Optional[Sequence[str]] = None, max_entries: Optional[int] = None) -> GradCheckReport:
    """
    Compare analytic gradients against central differences in 64-bit.

    Args:
        forward: maps the inputs dict to an output array.
        backward: maps (inputs, grad_out) to a dict of gradients keyed like inputs.
        inputs: named arrays; copied and promoted to float64.
        tol: pass threshold on the maximum relative error.
        h: finite-difference step.
        wrt: names to check (default: all inputs).
        max_entries: check at most this many randomly chosen entries per input.
    """
    rng = np.random.default_rng(seed)
    values = {name: np.array(arr, dtype=GRADCHECK_DTYPE) for name, arr in inputs.items()}
    projection = rng.standard_normal(forward(values).shape)

    def loss() -> float:
        return float(np.sum(projection * forward(values)))

    analytic = backward(values, projection)
    errors: Dict[str, float] = {}
    for name in (wrt if wrt is not None else list(values)):
        grad = np.asarray(analytic[name], dtype=GRADCHECK_DTYPE)
        if grad.shape != values[name].shape:
            return GradCheckReport(False, float("inf"), tol, errors,
                                   f"gradient for {name} has shape {grad.shape}, expected {values[name].shape}")
        indices = _sample_indices(values[name].shape, max_entries, rng)
        numeric = numerical_gradient(loss, values[name], h, indices)
        if not (np.all(np.isfinite(grad)) and np.all(np.isfinite(numeric))):
            return GradCheckReport(False, float("inf"), tol, errors, f"non-finite gradient for {name}")
        picked = tuple(np.array(indices).T) if indices else ()
        errors[name] = relative_error(grad[picked], numeric[picked]) if indices else 0.0

    worst = max(errors.values(), default=0.0)
    passed = worst < tol
    message = "ok" if passed else f"max relative error {worst:.3e} >= {tol:.1e} ({max(errors, key=errors.get)})"
    return GradCheckReport(passed, worst, tol, errors, message)
