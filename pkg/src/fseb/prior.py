"""Empirical-Bayes function-space prior.

The context kernel is ``K = H H^T + I`` with ``H = h(x_hat; phi0)`` the frozen
features at the context points. The regularizer is

    J(theta, x_hat) = -(tau_f / 2) sum_k f_k^T K^{-1} f_k - (tau_theta / 2) ||theta||^2

where ``f_k`` is column ``k`` of the logits ``f(x_hat; theta)``. ``K^{-1}`` is
never formed; penalties go through triangular solves on the Cholesky factor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cholesky

from . import autodiff as ad
from .data import ContextDistribution, sample_context
from .model import FeatureSnapshot, ModelParams, features, perturb_params, predict

MAX_JITTER_STEPS = 20
BASE_JITTER = 1e-10


class KernelError(LinAlgError):
    pass


@dataclass(frozen=True)
class ContextKernel:
    K_matrix: np.ndarray
    chol_L: np.ndarray
    jitter_added: float = 0.0

    @property
    def M(self) -> int:
        return self.K_matrix.shape[0]


@dataclass(frozen=True)
class PriorConfig:
    tau_f: float = 1.0
    tau_theta: float = 1e-4
    context_batch_size: int = 64
    mc_context_samples: int = 1
    mc_param_samples: int = 1
    sigma: float = 0.0

    def __post_init__(self):
        if not self.tau_f > 0:
            raise ValueError("tau_f must be positive")
        if self.tau_theta < 0 or self.sigma < 0:
            raise ValueError("tau_theta and sigma must be nonnegative")
        if self.context_batch_size < 1 or self.mc_context_samples < 1 or self.mc_param_samples < 1:
            raise ValueError("context_batch_size, mc_context_samples and mc_param_samples must be >= 1")


def build_kernel(H) -> ContextKernel:
    """``K = H H^T + I`` and its lower Cholesky factor.

    If factorization fails numerically, jitter ``1e-10 * 2**k`` is added to the
    diagonal for ``k = 0..20`` and recorded; failure after that raises.
    """
    H = np.asarray(H.data if isinstance(H, ad.Tensor) else H, dtype=np.float64)
    if H.ndim != 2:
        raise ad.ShapeError(f"feature matrix must be M x d, got {H.shape}")
    if not np.all(np.isfinite(H)):
        raise KernelError("feature matrix contains non-finite values")
    K = H @ H.T
    K[np.diag_indices_from(K)] += 1.0
    try:
        return ContextKernel(K, cholesky(K, lower=True))
    except LinAlgError:
        pass
    eye = np.eye(len(K))
    for k in range(MAX_JITTER_STEPS + 1):
        jitter = BASE_JITTER * 2.0**k
        try:
            return ContextKernel(K, cholesky(K + jitter * eye, lower=True), jitter)
        except LinAlgError:
            continue
    raise KernelError(f"Cholesky failed after jitter {BASE_JITTER * 2.0**MAX_JITTER_STEPS:g}")


def mahalanobis_sq(v, kernel: ContextKernel) -> ad.Tensor:
    """``v^T K^{-1} v``; for an ``M x K`` matrix the column-wise sum."""
    if np.shape(v.data if isinstance(v, ad.Tensor) else v)[0] != kernel.M:
        raise ad.ShapeError(f"vector of length {np.shape(v)[0]} against kernel of size {kernel.M}")
    return ad.quad_form(v, kernel.chol_L)


def sq_norm(params: ModelParams) -> ad.Tensor:
    """``||theta||^2`` over every tensor, hidden biases included."""
    total = None
    for value in params.as_dict().values():
        term = ad.sum_(ad.square(value))
        total = term if total is None else ad.add(total, term)
    return total


def penalty_terms(theta: ModelParams, x_hat, phi0: FeatureSnapshot, cfg: PriorConfig, kernel=None):
    """Function-space and parameter-space penalties, both >= 0, so that
    ``J = -(fs + param)``."""
    if kernel is None:
        kernel = build_kernel(features(x_hat, phi0).data)
    fs = ad.scalar_mul(mahalanobis_sq(predict(x_hat, theta), kernel), 0.5 * cfg.tau_f)
    param = ad.scalar_mul(sq_norm(theta), 0.5 * cfg.tau_theta)
    return fs, param


def eb_regularizer(theta: ModelParams, x_hat, phi0: FeatureSnapshot, cfg: PriorConfig) -> ad.Tensor:
    fs, param = penalty_terms(theta, x_hat, phi0, cfg)
    return ad.scalar_mul(ad.add(fs, param), -1.0)


def mc_kl_terms(theta, context_dist, phi0, cfg, seed):
    """Monte-Carlo averages of the two penalties over context batches and
    parameter perturbations; ``F = fs + param``."""
    if context_dist.kind == "fixed-batches" and not context_dist.batches:
        raise ValueError("empty context distribution")
    ss = np.random.SeedSequence([int(seed), 0xC0]).spawn(2)
    ctx_seeds = ss[0].generate_state(cfg.mc_context_samples, dtype=np.uint64)
    eps_seeds = ss[1].generate_state(cfg.mc_param_samples, dtype=np.uint64)
    thetas = [perturb_params(theta, cfg.sigma, int(s)) for s in eps_seeds]
    fs_sum = param_sum = None
    for cs in ctx_seeds:
        x_hat = sample_context(context_dist, cfg.context_batch_size, int(cs))
        kernel = build_kernel(features(x_hat, phi0).data)
        for th in thetas:
            fs, param = penalty_terms(th, x_hat, phi0, cfg, kernel)
            fs_sum = fs if fs_sum is None else ad.add(fs_sum, fs)
            param_sum = param if param_sum is None else ad.add(param_sum, param)
    scale = 1.0 / (cfg.mc_context_samples * cfg.mc_param_samples)
    return ad.scalar_mul(fs_sum, scale), ad.scalar_mul(param_sum, scale)


def mc_kl_estimate(theta: ModelParams, context_dist: ContextDistribution, phi0: FeatureSnapshot,
                   cfg: PriorConfig, seed: int) -> ad.Tensor:
    """``F(theta) = -(1/IJ) sum_i sum_j J(theta + sigma eps_j, X_i)``, additive constant dropped."""
    fs, param = mc_kl_terms(theta, context_dist, phi0, cfg, seed)
    return ad.add(fs, param)
