"""Central finite-difference checks against the tape gradients."""
from __future__ import annotations

import numpy as np

from tide.numerics.nn import Parameter
from tide.numerics.tensor import no_grad


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def numerical_grad(loss_fn, param: Parameter, flat_index: int, h: float = 1e-4) -> float:
    base = param.data.copy()
    vals = []
    for step in (h, -h):
        bumped = base.copy()
        bumped.reshape(-1)[flat_index] += step
        param.assign(bumped)
        with no_grad():
            vals.append(loss_fn().item())
    param.assign(base)
    return (vals[0] - vals[1]) / (2 * h)


def check_parameters(loss_fn, params, rng: np.random.Generator, n_samples: int = 20, h: float = 1e-4):
    """Compare tape and finite-difference gradients on randomly drawn entries.

    `loss_fn` must rebuild the graph from the current parameter values on each
    call. Returns a list of (name, flat_index, analytic, numeric, rel_err).
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss_fn().backward()
    sizes = np.array([p.size for p in params], dtype=float)
    picks = rng.choice(len(params), size=n_samples, p=sizes / sizes.sum())
    out = []
    for pi in picks:
        p = params[pi]
        idx = int(rng.integers(p.size))
        analytic = 0.0 if p.grad is None else float(p.grad.reshape(-1)[idx])
        numeric = numerical_grad(loss_fn, p, idx, h)
        out.append((p.name, idx, analytic, numeric, relative_error(analytic, numeric)))
    return out


def check_inputs(fn, arrays, h: float = 1e-4):
    """Full finite-difference gradient check of `fn(*tensors) -> scalar Tensor`.

    Returns the max relative error over every entry of every input array.
    """
    from tide.numerics.tensor import Tensor

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    fn(*leaves).backward()
    worst = 0.0
    for i, a in enumerate(arrays):
        a = np.asarray(a, dtype=np.float64)
        analytic = np.zeros_like(a) if leaves[i].grad is None else leaves[i].grad
        for j in range(a.size):
            vals = []
            for step in (h, -h):
                bumped = a.copy()
                bumped.reshape(-1)[j] += step
                args = [Tensor(x) for x in arrays]
                args[i] = Tensor(bumped)
                with no_grad():
                    vals.append(fn(*args).item())
            numeric = (vals[0] - vals[1]) / (2 * h)
            worst = max(worst, relative_error(float(analytic.reshape(-1)[j]), numeric))
    return worst
