"""Gradient verification by central finite differences.

Every trainable model in this package must pass grad_check on a small
float64 configuration; the tolerance (1e-3 max relative error) is not
reachable in float32, so callers instantiate verification models in 64-bit.
"""

from __future__ import annotations

import numpy as np

from .core import Tensor, no_grad
from .nn import unpack_params


class NonFiniteEvaluation(RuntimeError):
    def __init__(self, coord, value):
        super().__init__(f"non-finite evaluation at coordinate {coord}: {value}")
        self.coord = coord
        self.value = value


def _relative_error(analytic, numeric):
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max())


def grad_check(fn, point, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    fn maps a Tensor to a scalar Tensor. The error at each coordinate is
    |analytic - numeric| / max(1, |analytic|); the max over coordinates is
    returned. Non-finite evaluations report the offending coordinate.
    """
    x = Tensor(np.asarray(point.data, dtype=np.float64).copy(), requires_grad=True)
    out = fn(x)
    if not np.isfinite(out.data):
        raise NonFiniteEvaluation(None, float(out.data))
    out.backward()
    analytic = x.grad.copy().ravel()

    flat = x.data.ravel()
    numeric = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(fn(x).data)
            flat[i] = orig - eps
            lo = float(fn(x).data)
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NonFiniteEvaluation(i, (hi, lo))
            numeric[i] = (hi - lo) / (2.0 * eps)

    return _relative_error(analytic, numeric)


def grad_check_model(loss_fn, params, eps=1e-5):
    """grad_check over the flattened parameter vector of a model.

    loss_fn() evaluates the scalar loss with the parameters as currently
    stored in `params`; the check perturbs each coordinate in turn and
    restores the original values before returning.
    """
    from .nn import pack_params

    vec0 = pack_params(params)

    unpack_params(vec0, params)
    loss = loss_fn()
    for p in params:
        p.grad = None
    loss.backward()
    analytic = np.concatenate(
        [
            (p.grad if p.grad is not None else np.zeros_like(p.data)).astype(np.float64).ravel()
            for p in params
        ]
    )

    numeric = np.zeros_like(vec0)
    flat = vec0.copy()
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            unpack_params(flat, params)
            hi = float(loss_fn().data)
            flat[i] = orig - eps
            unpack_params(flat, params)
            lo = float(loss_fn().data)
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NonFiniteEvaluation(i, (hi, lo))
            numeric[i] = (hi - lo) / (2.0 * eps)
    unpack_params(vec0, params)

    return _relative_error(analytic, numeric)
