"""Objectives, momentum SGD with a cosine schedule, training loop, ensembles.

All losses are to be minimized. With a minibatch of size ``B`` drawn from
``N_train`` points the data term is ``(N_train / B) * sum_batch CE`` and the
regularizer enters once per step (``regularizer_scaling="per-step"``). The
``"per-datum"`` convention divides the whole step objective by ``N_train``.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import ContextDistribution, Dataset, minibatches, sample_context
from .model import (
    FeatureSnapshot,
    MlpConfig,
    ModelParams,
    init_params,
    perturb_params,
    predict,
    snapshot_feature_params,
    softmax,
)
from .prior import PriorConfig, mc_kl_terms, penalty_terms, sq_norm

logger = logging.getLogger(__name__)

OBJECTIVES = ("ps-map", "eb-map", "eb-vi")


class NumericalAbort(FloatingPointError):
    def __init__(self, step: int, components: dict[str, float]):
        self.step = step
        self.components = components
        super().__init__(f"non-finite loss at step {step}: {components}")


@dataclass(frozen=True)
class TrainConfig:
    objective: str = "eb-map"
    lr: float = 1e-3
    momentum: float = 0.9
    cosine_alpha: float = 0.0
    epochs: int = 100
    batch_size: int = 128
    likelihood_mc_samples: int = 1
    prior: PriorConfig = field(default_factory=PriorConfig)
    seed: int = 0
    n_train: int | None = None
    regularizer_scaling: str = "per-step"

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if not self.lr >= 0:
            raise ValueError("lr must be nonnegative")
        if not 0 <= self.cosine_alpha <= 1:
            raise ValueError("cosine_alpha must lie in [0, 1]")
        if self.likelihood_mc_samples < 1 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("likelihood_mc_samples and batch_size must be >= 1, epochs >= 0")
        if self.regularizer_scaling not in ("per-step", "per-datum"):
            raise ValueError(f"unknown regularizer_scaling {self.regularizer_scaling!r}")


@dataclass
class TrainHistory:
    nll: list[float] = field(default_factory=list)
    fs_penalty: list[float] = field(default_factory=list)
    param_penalty: list[float] = field(default_factory=list)
    total: list[float] = field(default_factory=list)
    step_seconds: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    epoch_metrics: list[dict] = field(default_factory=list)

    def summary(self) -> dict:
        n = len(self.total)
        return {
            "steps": n,
            "final_total": self.total[-1] if n else None,
            "final_nll": self.nll[-1] if n else None,
            "final_fs_penalty": self.fs_penalty[-1] if n else None,
            "final_param_penalty": self.param_penalty[-1] if n else None,
        }


def _labels(labels, n_classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim == 2:
        y = np.argmax(y, axis=1)
    y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    return y


def cross_entropy_sum(logits: ad.Tensor, labels) -> ad.Tensor:
    """Summed categorical negative log-likelihood."""
    n, k = logits.shape
    onehot = np.zeros((n, k))
    onehot[np.arange(n), _labels(labels, k)] = 1.0
    return ad.scalar_mul(ad.sum_(ad.mul(ad.log_softmax(logits), onehot)), -1.0)


def _data_term(batch, params, n_train):
    x, y = batch
    scale = (n_train if n_train is not None else len(x)) / len(x)
    return ad.scalar_mul(cross_entropy_sum(predict(x, params), y), scale)


def ps_map_loss(batch, params: ModelParams, tau_theta: float, n_train: int | None = None) -> ad.Tensor:
    return ps_map_terms(batch, params, tau_theta, n_train)["total"]


def ps_map_terms(batch, params, tau_theta, n_train=None):
    data = _data_term(batch, params, n_train)
    param = ad.scalar_mul(sq_norm(params), 0.5 * tau_theta)
    return {"nll": data, "fs": None, "param": param, "total": ad.add(data, param)}


def eb_map_loss(batch, params: ModelParams, x_hat, phi0: FeatureSnapshot, cfg: PriorConfig,
                n_train: int | None = None) -> ad.Tensor:
    """``(N/B) sum CE - J(theta, x_hat)``."""
    return eb_map_terms(batch, params, x_hat, phi0, cfg, n_train)["total"]


def eb_map_terms(batch, params, x_hat, phi0, cfg, n_train=None):
    data = _data_term(batch, params, n_train)
    fs, param = penalty_terms(params, x_hat, phi0, cfg)
    return {"nll": data, "fs": fs, "param": param, "total": ad.add(data, ad.add(fs, param))}


def eb_vi_loss(batch, params: ModelParams, context_dist: ContextDistribution, phi0: FeatureSnapshot,
               cfg: PriorConfig, n_train: int | None = None, seed: int = 0,
               likelihood_mc_samples: int = 1) -> ad.Tensor:
    """``(N/B)(1/S) sum_s CE(theta + sigma eps_s) + F(theta)``."""
    return eb_vi_terms(batch, params, context_dist, phi0, cfg, n_train, seed, likelihood_mc_samples)["total"]


def eb_vi_terms(batch, params, context_dist, phi0, cfg, n_train=None, seed=0, likelihood_mc_samples=1):
    if likelihood_mc_samples < 1:
        raise ValueError("likelihood_mc_samples must be >= 1")
    lik_seeds = np.random.SeedSequence([int(seed), 0x11]).generate_state(likelihood_mc_samples, dtype=np.uint64)
    data_sum = None
    for s in lik_seeds:
        term = _data_term(batch, perturb_params(params, cfg.sigma, int(s)), n_train)
        data_sum = term if data_sum is None else ad.add(data_sum, term)
    data = ad.scalar_mul(data_sum, 1.0 / likelihood_mc_samples)
    fs, param = mc_kl_terms(params, context_dist, phi0, cfg, seed)
    return {"nll": data, "fs": fs, "param": param, "total": ad.add(data, ad.add(fs, param))}


def sgd_momentum_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                      state: dict[str, np.ndarray] | None, lr: float, momentum: float = 0.9):
    """``v <- m v + g``; ``theta <- theta - lr v``. Returns new params and velocities."""
    state = state or {k: np.zeros_like(v) for k, v in params.items()}
    velocity = {k: momentum * state[k] + grads[k] for k in params}
    return {k: params[k] - lr * velocity[k] for k in params}, velocity


def cosine_lr(step: int, total_steps: int, eta: float, alpha: float) -> float:
    if total_steps <= 0:
        return eta
    t = min(max(step, 0), total_steps)
    return eta * (alpha + (1.0 - alpha) * 0.5 * (1.0 + math.cos(math.pi * t / total_steps)))


def _stream(seed: int, name: int, *counter: int) -> int:
    """Counter-based child seed for one randomness stream."""
    return int(np.random.SeedSequence([int(seed), name, *counter]).generate_state(1, dtype=np.uint64)[0])


STREAM_INIT, STREAM_BATCHES, STREAM_CONTEXT = 1, 2, 3


def train(config: TrainConfig, model: MlpConfig | ModelParams, dataset: Dataset,
          context_dist: ContextDistribution | None = None, phi0: FeatureSnapshot | None = None,
          eval_fn=None) -> tuple[ModelParams, TrainHistory]:
    """Train by momentum SGD; deterministic in ``config.seed``.

    ``model`` is either an architecture (initialized from the seed) or a
    starting point. For the empirical-Bayes objectives ``phi0`` defaults to a
    snapshot of the initial parameters. ``eval_fn(params, epoch)`` may return
    a dict of per-epoch metrics.
    """
    if isinstance(model, MlpConfig):
        params = init_params(MlpConfig(**{**model.__dict__, "seed": _stream(config.seed, STREAM_INIT) % 2**31}))
    else:
        params = model.copy()
    if params.config.input_dim != dataset.input_dim:
        raise ValueError(f"model input_dim {params.config.input_dim} != data dim {dataset.input_dim}")
    if config.objective != "ps-map":
        if context_dist is None:
            raise ValueError(f"{config.objective} needs a context distribution")
        if phi0 is None:
            phi0 = snapshot_feature_params(params, "random-init")
    n_train = config.n_train or len(dataset)
    norm = 1.0 / n_train if config.regularizer_scaling == "per-datum" else 1.0
    steps_per_epoch = math.ceil(len(dataset) / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    history = TrainHistory()
    values = {k: np.array(v) for k, v in params.as_dict().items()}
    velocity = None
    step = 0
    for epoch in range(config.epochs):
        for batch in minibatches(dataset, config.batch_size, _stream(config.seed, STREAM_BATCHES, epoch)):
            t0 = time.perf_counter()
            tape = ad.Tape()
            live = ModelParams.from_dict(params.config, values).on_tape(tape)
            ctx_seed = _stream(config.seed, STREAM_CONTEXT, step)
            if config.objective == "ps-map":
                terms = ps_map_terms(batch, live, config.prior.tau_theta, n_train)
            elif config.objective == "eb-map":
                x_hat = sample_context(context_dist, config.prior.context_batch_size, ctx_seed)
                terms = eb_map_terms(batch, live, x_hat, phi0, config.prior, n_train)
            else:
                terms = eb_vi_terms(batch, live, context_dist, phi0, config.prior, n_train, ctx_seed,
                                    config.likelihood_mc_samples)
            loss = terms["total"] if norm == 1.0 else ad.scalar_mul(terms["total"], norm)
            comps = {k: (v.item() if v is not None else 0.0) for k, v in terms.items()}
            if not np.isfinite(loss.item()):
                raise NumericalAbort(step, comps)
            grads = ad.backward(loss)
            lr = cosine_lr(step, total_steps, config.lr, config.cosine_alpha)
            values, velocity = sgd_momentum_step(values, grads, velocity, lr, config.momentum)
            history.nll.append(comps["nll"])
            history.fs_penalty.append(comps["fs"])
            history.param_penalty.append(comps["param"])
            history.total.append(comps["total"])
            history.lr.append(lr)
            history.step_seconds.append(time.perf_counter() - t0)
            step += 1
        if eval_fn is not None:
            metrics = eval_fn(ModelParams.from_dict(params.config, values), epoch)
            if metrics:
                history.epoch_metrics.append({"epoch": epoch, **metrics})
    return ModelParams.from_dict(params.config, values), history


def ensemble_predict(member_params: list[ModelParams], x) -> np.ndarray:
    """Average of the members' softmax outputs."""
    if not member_params:
        raise ValueError("ensemble needs at least one member")
    probs = np.stack([softmax(predict(x, p).data) for p in member_params])
    return probs.mean(axis=0)
