"""Logit-stability penalties.

Three pairings of logits are supported, each measured with squared l2 or
KL divergence:

* ``lsiw``      f(x + delta; theta + v)  vs  f(x; theta)
* ``lsi``       f(x + delta; theta)      vs  f(x; theta)
* ``trade_awp`` f(x + delta; theta + v)  vs  f(x; theta + v)
"""
from __future__ import annotations

from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from . import autodiff as ad
from .autodiff import Tensor
from .awp import WeightPerturbation, apply
from .model import ModelParams, cross_entropy_graph, logits_graph, param_tensors
from .vulnerability import av, linear_weights

Variant = Literal["lsiw", "lsi", "trade_awp"]
Distance = Literal["sq_l2", "kl"]


class PenaltyConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)

    variant: Variant = "lsiw"
    distance: Distance = "sq_l2"
    lam: float = Field(0.1, ge=0, alias="lambda")
    weights: Literal["linear", "unweighted", "top10"] = "linear"


def logit_distance(adv: Tensor, clean: Tensor, distance: str) -> Tensor:
    """Per-row distance; for ``kl`` the clean distribution is the reference."""
    if distance == "sq_l2":
        diff = ad.sub(adv, clean)
        return ad.sum_(ad.square(diff), axis=-1)
    if distance == "kl":
        log_p = ad.log_softmax(clean)
        log_q = ad.log_softmax(adv)
        return ad.sum_(ad.mul(ad.exp(log_p), ad.sub(log_p, log_q)), axis=-1)
    raise ValueError(f"unknown distance {distance!r}")


def penalty_params(variant: str, theta: ModelParams, theta_prime: ModelParams) -> tuple[ModelParams, ModelParams]:
    """(params for the adversarial logits, params for the clean logits)."""
    if variant == "lsiw":
        return theta_prime, theta
    if variant == "lsi":
        return theta, theta
    if variant == "trade_awp":
        return theta_prime, theta_prime
    raise ValueError(f"unknown penalty variant {variant!r}")


def _logits(params: ModelParams, x) -> Tensor:
    return logits_graph(params.spec, param_tensors(params), Tensor(np.asarray(x, dtype=params.dtype)))


def penalty(params: ModelParams, v: WeightPerturbation | None, x, y, delta, cfg: PenaltyConfig) -> np.ndarray:
    """Per-instance penalty values (unweighted, without lambda)."""
    x = np.asarray(x, dtype=params.dtype)
    theta_prime = params if v is None or cfg.variant == "lsi" else apply(params, v)
    p_adv, p_clean = penalty_params(cfg.variant, params, theta_prime)
    return logit_distance(_logits(p_adv, x + delta), _logits(p_clean, x), cfg.distance).data


def topn_regularized_loss(params: ModelParams, x, y, delta, eta: float) -> float:
    """Batch mean of L(x+delta) + eta * |f(x+delta) - f(x)|^2 on the top 10% by AV."""
    if eta < 0:
        raise ValueError("eta must be non-negative")
    x = np.asarray(x, dtype=params.dtype)
    indicator = linear_weights(av(params, x, y, delta), "top10").weights
    adv_logits = _logits(params, x + delta)
    ce = cross_entropy_graph(adv_logits, y).data
    o = logit_distance(adv_logits, _logits(params, x), "sq_l2").data
    return float(np.mean(ce + eta * indicator * o))
