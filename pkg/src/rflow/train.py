"""Training loop: regress the velocity model onto analytic flow velocities.

Each batch draws (t, x0, x1) from uniform time, the prior, and the data
distribution, evaluates the conditional path point and its exact velocity,
and minimizes the mean squared residual with Adam under a staircase
learning-rate decay.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .flows import ConditionalFlow, DataDistribution, Prior
from .net import VelocityNet


class TrainingDiverged(RuntimeError):
    """Loss became non-finite or exceeded the divergence cap."""

    def __init__(self, iteration, loss):
        super().__init__(f"training diverged at iteration {iteration} (loss={loss})")
        self.iteration = iteration
        self.loss = loss


@dataclass
class TrainConfig:
    batch_size: int = 512
    total_iters: int = 200_000
    lr_init: float = 3e-4
    lr_decay: float = 0.75
    lr_decay_every: int = 10_000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    uncond_drop_prob: float = 0.1
    warmup_iters: int = 0
    warmup_floor: float = 1e-8
    divergence_cap: float = 1e6
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.total_iters < 0 or self.lr_decay_every < 1:
            raise ValueError("batch_size/total_iters/lr_decay_every out of range")
        if self.lr_init <= 0 or not (0 < self.lr_decay <= 1):
            raise ValueError("learning-rate settings out of range")
        if not (0.0 <= self.uncond_drop_prob <= 1.0):
            raise ValueError("uncond_drop_prob must be in [0, 1]")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, num_params):
        return cls(np.zeros(num_params), np.zeros(num_params))


def lr_at(iteration, cfg: TrainConfig):
    """Staircase decay; optional linear warmup from warmup_floor."""
    if cfg.warmup_iters > 0 and iteration < cfg.warmup_iters:
        frac = iteration / cfg.warmup_iters
        return cfg.warmup_floor + frac * (cfg.lr_init - cfg.warmup_floor)
    return cfg.lr_init * cfg.lr_decay ** (iteration // cfg.lr_decay_every)


def adam_step(params, grads, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Canonical Adam with bias correction; updates params/state in place."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError("parameter/gradient/state layouts do not match")
    state.step += 1
    state.m *= beta1
    state.m += (1.0 - beta1) * grads
    state.v *= beta2
    state.v += (1.0 - beta2) * grads * grads
    m_hat = state.m / (1.0 - beta1**state.step)
    v_hat = state.v / (1.0 - beta2**state.step)
    params -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, state


def crfm_batch_loss(
    net: VelocityNet,
    flow: ConditionalFlow,
    prior: Prior,
    data: DataDistribution,
    batch_size,
    rng,
    uncond_drop_prob=0.0,
    return_batch=False,
):
    """One batch of the matching objective: loss and exact parameter gradient.

    Draws t ~ U[0,1], x0 ~ prior, x1 ~ data per element; the loss is the
    batch mean of |v_theta(x_t, t) - u|^2 with u the analytic path velocity.
    When the net is class-conditioned, mixture component indices are used as
    labels and dropped to the empty token with probability uncond_drop_prob.
    """
    n = int(batch_size)
    t = rng.random(n)
    x0 = prior.sample(rng, n)
    labels = None
    if net.config.num_classes > 0:
        x1, labels = data.sample(rng, n, with_labels=True)
        if uncond_drop_prob > 0.0:
            drop = rng.random(n) < uncond_drop_prob
            labels = np.where(drop, net.empty_token, labels)
    else:
        x1 = data.sample(rng, n)
    xt = flow.flow_at(x0, x1, t)
    u = flow.target_velocity(x0, x1, t)
    out, cache = net._forward_cached(xt, t, labels)
    residual = out - u
    loss = float(np.mean(np.sum(residual * residual, axis=1)))
    grads = net._backward_from_cache(cache, 2.0 * residual / n)
    if return_batch:
        return loss, grads, {"t": t, "x0": x0, "x1": x1, "xt": xt, "u": u, "labels": labels}
    return loss, grads


def train(cfg: TrainConfig, net, flow, prior, data, callback=None):
    """Run the optimization loop; mutates net.params, returns the loss trace.

    The trace is a list of (iteration, loss, lr) rows.  ``callback(it, loss,
    lr, net)`` fires after every update when given.  Raises TrainingDiverged
    on non-finite or runaway loss.
    """
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1,)))
    state = AdamState.zeros(net.num_params)
    trace = []
    for it in range(cfg.total_iters):
        lr = lr_at(it, cfg)
        loss, grads = crfm_batch_loss(
            net, flow, prior, data, cfg.batch_size, rng,
            uncond_drop_prob=cfg.uncond_drop_prob,
        )
        if not np.isfinite(loss) or loss > cfg.divergence_cap:
            raise TrainingDiverged(it, loss)
        adam_step(net.params, grads, state, lr,
                  beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps)
        trace.append((it, loss, lr))
        if callback is not None:
            callback(it, loss, lr, net)
    return trace


def moving_average(values, window):
    """Trailing mean over up to ``window`` entries ending at each index."""
    values = np.asarray(values, dtype=float)
    out = np.empty_like(values)
    csum = np.cumsum(np.insert(values, 0, 0.0))
    for i in range(len(values)):
        lo = max(0, i + 1 - window)
        out[i] = (csum[i + 1] - csum[lo]) / (i + 1 - lo)
    return out
