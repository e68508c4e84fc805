"""Function-space MAP with the change-of-variables correction, tiny nets only.

The correction is ``-1/2 log det(J^T J)`` where ``J`` is the ``MK x P``
Jacobian of the logits at the evaluation points with respect to all
parameters. It needs ``MK >= P`` and is computed from the singular values of
``J``. Its gradient is taken by central differences, which is only sensible at
the scale this module is capped to.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Mapping
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .model import ModelParams, predict
from .training import cross_entropy_sum

logger = logging.getLogger(__name__)

MAX_PARAMS = 500
DEFAULT_JITTER = 1e-10


@dataclass(frozen=True)
class JacobianBlock:
    matrix: np.ndarray
    eval_points: np.ndarray
    param_count: int

    @property
    def n_outputs(self) -> int:
        return self.matrix.shape[0]


def _as_mapping(params) -> tuple[dict[str, np.ndarray], Callable]:
    if isinstance(params, ModelParams):
        config = params.config
        values = {k: np.asarray(getattr(v, "data", v), dtype=np.float64) for k, v in params.as_dict().items()}
        return values, lambda vals, x: predict(x, ModelParams.from_dict(config, vals))
    return {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}, None


def dense_jacobian(params: ModelParams | Mapping[str, np.ndarray], x_hat, forward: Callable | None = None) -> JacobianBlock:
    """Jacobian of the flattened ``M x K`` outputs (row-major) with respect to the
    flattened parameters (in the mapping's key order), one backward pass per row.

    ``forward(values, x)`` maps a dict of (possibly taped) tensors to outputs;
    it defaults to the MLP logits when ``params`` is a :class:`ModelParams`.
    """
    values, default_forward = _as_mapping(params)
    forward = forward or default_forward
    if forward is None:
        raise TypeError("forward is required for a plain parameter mapping")
    p = sum(v.size for v in values.values())
    if p > MAX_PARAMS:
        raise ValueError(f"{p} parameters exceeds the dense-Jacobian cap of {MAX_PARAMS}; use a smaller network")
    x_hat = np.asarray(x_hat, dtype=np.float64)
    n_out = ad.as_tensor(forward(values, x_hat)).data.size
    rows = np.empty((n_out, p))
    for r in range(n_out):
        tape = ad.Tape()
        live = {k: tape.leaf(k, v) for k, v in values.items()}
        out = ad.as_tensor(forward(live, x_hat))
        select = np.zeros(out.shape)
        select.flat[r] = 1.0
        grads = ad.backward(ad.sum_(ad.mul(out, select)))
        rows[r] = np.concatenate([grads[k].ravel() for k in values])
    return JacobianBlock(rows, x_hat, p)


def log_det_correction(jac: JacobianBlock | np.ndarray, jitter: float = DEFAULT_JITTER,
                       return_jitter: bool = False):
    """``-1/2 log det(J^T J) = -sum_i log s_i`` over the singular values of ``J``.

    When some ``s_i^2`` falls below ``jitter`` the determinant of
    ``J^T J + jitter I`` is used instead; ``return_jitter=True`` also returns
    whether that happened.
    """
    J = jac.matrix if isinstance(jac, JacobianBlock) else np.asarray(jac, dtype=np.float64)
    mk, p = J.shape
    if mk < p:
        raise ValueError(f"need MK >= P for the correction, got MK={mk}, P={p}")
    s = np.linalg.svd(J, compute_uv=False)
    used = bool(np.min(s) ** 2 < jitter) if s.size else False
    if used:
        logger.warning("rank-deficient Jacobian: adding jitter %g to J^T J", jitter)
        value = -0.5 * float(np.sum(np.log(s**2 + jitter)))
    else:
        value = -float(np.sum(np.log(s)))
    return (value, used) if return_jitter else value


def correction_grad(params, x_hat, forward: Callable | None = None, step: float = 1e-5,
                    jitter: float = DEFAULT_JITTER) -> dict[str, np.ndarray]:
    """Central-difference gradient of :func:`log_det_correction` over all parameters."""
    values, default_forward = _as_mapping(params)
    forward = forward or default_forward
    return ad.finite_difference_grad(
        lambda v: log_det_correction(dense_jacobian(v, x_hat, forward), jitter), values, step
    )


def _data_and_prior(batch, values, forward, tau_theta, n_train):
    x, y = batch
    scale = (n_train if n_train is not None else len(x)) / len(x)
    data = ad.scalar_mul(cross_entropy_sum(ad.as_tensor(forward(values, x)), y), scale)
    sq = None
    for v in values.values():
        term = ad.sum_(ad.square(v))
        sq = term if sq is None else ad.add(sq, term)
    return ad.add(data, ad.scalar_mul(sq, 0.5 * tau_theta))


def fs_map_loss(batch, params, x_hat, tau_theta: float, n_train: int | None = None,
                forward: Callable | None = None, correction: bool = True,
                jitter: float = DEFAULT_JITTER) -> float:
    """Negated FS-MAP objective: ``(N/B) sum CE + (tau_theta/2)||theta||^2 - correction``."""
    values, default_forward = _as_mapping(params)
    forward = forward or default_forward
    value = _data_and_prior(batch, values, forward, tau_theta, n_train).item()
    if correction:
        value -= log_det_correction(dense_jacobian(values, x_hat, forward), jitter)
    return value


def fs_map_loss_and_grad(batch, params, x_hat, tau_theta: float, n_train: int | None = None,
                         forward: Callable | None = None, correction: bool = True,
                         step: float = 1e-5, jitter: float = DEFAULT_JITTER):
    """Loss value and gradient; autodiff for the data and prior terms,
    finite differences for the correction."""
    values, default_forward = _as_mapping(params)
    forward = forward or default_forward
    tape = ad.Tape()
    live = {k: tape.leaf(k, v) for k, v in values.items()}
    base = _data_and_prior(batch, live, forward, tau_theta, n_train)
    value = base.item()
    grads = ad.backward(base)
    if correction:
        value -= log_det_correction(dense_jacobian(values, x_hat, forward), jitter)
        cg = correction_grad(values, x_hat, forward, step, jitter)
        grads = {k: grads[k] - cg[k] for k in grads}
    return value, grads

