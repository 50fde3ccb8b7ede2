"""Training objective: classification NLL plus a mask regularizer.

Three variants share one code path:

* ``infomask``     total = nll + alpha * kl(latent || standard normal)
* ``featuremask``  total = nll (alpha forced to zero, same graph)
* ``regl1``        total = nll + l1_weight * mean(mask)

The KL term is the closed form for a diagonal Gaussian against a standard
normal, summed over pixels and averaged over the batch. When alpha is zero
the KL term is left out of the graph entirely, which makes the
featuremask variant and an infomask run with alpha = 0 follow bitwise
identical parameter trajectories under a shared seed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import model
from .tensor import (
    Tensor,
    add,
    add_scalar,
    clamp,
    log,
    mean_all,
    mul,
    mul_scalar,
    pick_class,
    sub,
    sum_all,
)

__all__ = [
    "VARIANTS",
    "PROB_FLOOR",
    "LossConfig",
    "LossBreakdown",
    "kl_to_standard_normal",
    "nll_term",
    "l1_mask_penalty",
    "batch_loss",
    "prob_clamp_count",
    "reset_prob_clamp_count",
]

logger = logging.getLogger(__name__)

VARIANTS = ("infomask", "featuremask", "regl1")

# floor applied to the picked class probability before the log
PROB_FLOOR = 1e-12

# how many times the floor actually fired; exposed for tests and monitoring
_prob_clamp_count = 0


def prob_clamp_count() -> int:
    return _prob_clamp_count


def reset_prob_clamp_count() -> None:
    global _prob_clamp_count
    _prob_clamp_count = 0


@dataclass
class LossConfig:
    """Weights and variant switches for the objective."""

    alpha: float = 1e-3
    eps_samples: int = 1
    variant: str = "infomask"
    l1_weight: float = 1e-2

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant {self.variant!r} not in {VARIANTS}")
        if not (np.isfinite(self.alpha) and self.alpha >= 0.0):
            raise ValueError(f"alpha must be finite and >= 0, got {self.alpha}")
        if not (np.isfinite(self.l1_weight) and self.l1_weight >= 0.0):
            raise ValueError(f"l1_weight must be finite and >= 0, got {self.l1_weight}")
        if int(self.eps_samples) != self.eps_samples or self.eps_samples < 1:
            raise ValueError(f"eps_samples must be a positive integer, got {self.eps_samples}")
        self.eps_samples = int(self.eps_samples)
        if self.variant == "featuremask":
            self.alpha = 0.0


@dataclass
class LossBreakdown:
    """Scalar components of one batch loss; ``node`` is the differentiable total."""

    total: float
    nll: float
    kl: float
    l1: float
    node: Tensor | None = field(default=None, repr=False, compare=False)

    def log_line(self, step: int) -> str:
        return f"{step},{self.total!r},{self.nll!r},{self.kl!r},{self.l1!r}"


def kl_to_standard_normal(mu: Tensor, sigma: Tensor) -> Tensor:
    """Closed-form KL(N(mu, sigma^2) || N(0, 1)) summed over all elements.

    Per element: -(1 + log(sigma^2) - mu^2 - sigma^2) / 2, which is zero
    exactly at mu = 0, sigma = 1 and positive elsewhere.
    """
    if mu.shape != sigma.shape:
        raise ValueError(f"kl: mu shape {mu.shape} != sigma shape {sigma.shape}")
    if sigma.data.min() <= 0.0:
        raise ValueError("kl: sigma must be strictly positive")
    s2 = mul(sigma, sigma)
    inner = add_scalar(sub(log(s2), add(mul(mu, mu), s2)), 1.0)
    return mul_scalar(sum_all(inner), -0.5)


def nll_term(class_probs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log probability of the true class over the batch.

    Probabilities are floored at PROB_FLOOR before the log; a fired floor
    is counted (see prob_clamp_count) and logged once per call.
    """
    global _prob_clamp_count
    lab = np.asarray(labels)
    if class_probs.data.ndim != 2:
        raise ValueError(f"nll: probs must be 2-d, got shape {class_probs.shape}")
    n = class_probs.shape[0]
    hit = int((class_probs.data[np.arange(n), lab] < PROB_FLOOR).sum())
    if hit:
        _prob_clamp_count += hit
        logger.warning("nll: floored %d true-class probabilities at %g", hit, PROB_FLOOR)
    picked = pick_class(clamp(class_probs, lo=PROB_FLOOR), lab)
    return mul_scalar(sum_all(log(picked)), -1.0 / n)


def l1_mask_penalty(m: Tensor) -> Tensor:
    """Mean mask activation; the shrinkage term of the regl1 variant."""
    if m.data.min() < 0.0 or m.data.max() > 1.0:
        raise ValueError("l1: mask values outside [0, 1]")
    return mean_all(m)


def _stack_batch(batch, dtype) -> tuple[np.ndarray, np.ndarray]:
    if len(batch) == 0:
        raise ValueError("batch_loss: empty batch")
    images = np.stack([np.asarray(s.image, dtype=dtype) for s in batch])
    if images.ndim == 3:
        images = images[:, None, :, :]
    labels = np.array([s.label for s in batch], dtype=np.int64)
    return images, labels


def batch_loss(
    batch,
    params: model.ModelParams,
    cfg: LossConfig,
    *,
    eps=None,
    rng: np.random.Generator | None = None,
    tau: float = 0.5,
    classifier_input: str = "mask",
) -> LossBreakdown:
    """Objective over one batch of labeled samples.

    ``eps`` supplies the latent noise, shaped (eps_samples, N, 1, H, W);
    when omitted it is drawn from ``rng``. The classification term is
    averaged over the noise draws. ``classifier_input="attention"`` is the
    unmasked baseline classifier: plain NLL, no noise consumed.
    """
    images, labels = _stack_batch(batch, params.dtype)
    n, _, h, w = images.shape

    if classifier_input == "attention":
        probs, _ = model.baseline_forward(params, images)
        nll_node = nll_term(probs, labels)
        return LossBreakdown(
            total=nll_node.data.item(), nll=nll_node.data.item(), kl=0.0, l1=0.0, node=nll_node
        )

    s = cfg.eps_samples
    if eps is None:
        if rng is None:
            raise ValueError("batch_loss: need eps draws or an rng")
        eps = rng.standard_normal((s, n, 1, h, w))
    eps = np.asarray(eps, dtype=params.dtype)
    if eps.shape != (s, n, 1, h, w):
        raise ValueError(f"batch_loss: eps shape {eps.shape} != {(s, n, 1, h, w)}")

    x_t = Tensor(images)
    features = model.encode(params, x_t)
    a = model.attention_map(params, features, (h, w))
    mu, sigma = model.variational_params(params, a)

    nll_nodes = []
    l1_nodes = []
    for k in range(s):
        z = model.sample_latent(mu, sigma, eps[k])
        m = model.apply_mask(z, tau)
        if classifier_input == "mask":
            cls_in = m
        elif classifier_input == "masked_input":
            cls_in = mul(m, x_t)
        elif classifier_input == "masked_attention":
            cls_in = mul(m, a)
        else:
            raise ValueError(f"batch_loss: bad classifier_input {classifier_input!r}")
        probs = model.classify(params, cls_in)
        nll_nodes.append(nll_term(probs, labels))
        if cfg.variant == "regl1":
            l1_nodes.append(l1_mask_penalty(m))

    nll_node = _average(nll_nodes)
    total_node = nll_node
    kl_value = 0.0
    l1_value = 0.0

    if cfg.variant in ("infomask", "featuremask"):
        if cfg.variant == "infomask":
            kl_node = mul_scalar(kl_to_standard_normal(mu, sigma), 1.0 / n)
            kl_value = kl_node.data.item()
            if cfg.alpha > 0.0:
                total_node = add(nll_node, mul_scalar(kl_node, cfg.alpha))
    else:
        l1_node = _average(l1_nodes)
        l1_value = l1_node.data.item()
        if cfg.l1_weight > 0.0:
            total_node = add(nll_node, mul_scalar(l1_node, cfg.l1_weight))

    return LossBreakdown(
        total=total_node.data.item(),
        nll=nll_node.data.item(),
        kl=kl_value,
        l1=l1_value,
        node=total_node,
    )


def _average(nodes: list[Tensor]) -> Tensor:
    acc = nodes[0]
    for node in nodes[1:]:
        acc = add(acc, node)
    return mul_scalar(acc, 1.0 / len(nodes))
