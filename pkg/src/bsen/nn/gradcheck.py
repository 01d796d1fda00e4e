"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Dict, Optional

import numpy as np


def numerical_gradient(loss_fn: Callable[[], float], array: np.ndarray, index, h: float = 1e-5) -> float:
    """d loss / d array[index] by central differences; ``array`` is perturbed in place and restored."""
    old = array[index]
    array[index] = old + h
    fp = loss_fn()
    array[index] = old - h
    fm = loss_fn()
    array[index] = old
    return (fp - fm) / (2 * h)


def relative_error(a: float, b: float, floor: float = 1e-10) -> float:
    denom = max(abs(a), abs(b))
    if denom < floor:
        return 0.0
    return abs(a - b) / denom


def gradient_check(loss_fn: Callable[[], float], params: Dict[str, np.ndarray],
                   grads: Dict[str, np.ndarray], n_checks: int = 10, h: float = 1e-5,
                   rng: Optional[np.random.Generator] = None) -> float:
    """Max relative error between ``grads`` and central differences of
    ``loss_fn`` over ``n_checks`` randomly sampled entries, visiting parameter blocks
    round-robin.

    ``loss_fn`` must read the arrays in ``params`` (which get perturbed in
    place). Use double precision; single precision cannot resolve h=1e-5.

    Entries where both gradients are below the central-difference roundoff
    level (~ 64 * eps * |loss| / h) count as agreeing: such a value, e.g. the
    exactly-zero gradient of a conv bias feeding a batchnorm, is
    indistinguishable from zero at step ``h``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    floor = max(1e-10, 64 * np.finfo(np.float64).eps * abs(loss_fn()) / h)
    names = sorted(grads)
    order = [names[i] for i in rng.permutation(len(names))]
    worst = 0.0
    for i in range(n_checks):
        # cycle through blocks so small ones (biases, gamma) get checked too
        name = order[i % len(order)]
        p = params[name]
        idx = np.unravel_index(rng.integers(p.size), p.shape)
        num = numerical_gradient(loss_fn, p, idx, h)
        worst = max(worst, relative_error(float(grads[name][idx]), num, floor))
    return worst
