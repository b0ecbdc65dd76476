"""Adversarial weight perturbation with a layer-wise relative budget.

A layer block is one weight matrix together with its bias. Norms in the
budget ``|v_n| <= gamma * |theta_n|`` and in the normalised ascent direction
are both taken per block.
"""
from __future__ import annotations

import math

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .errors import NumericalError
from .model import LabeledBatch, ModelParams, check_aligned, param_gradient

WeightPerturbation = ModelParams


class WeightPerturbConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    gamma: float = Field(0.007, ge=0)
    rho: float | None = Field(None, ge=0, description="step size; defaults to gamma")
    steps: int = Field(1, ge=1)

    @property
    def step_size(self) -> float:
        return self.gamma if self.rho is None else self.rho


def _scale_block(w, b, factor):
    factor = float(factor)  # a numpy float64 scalar would promote f32 blocks
    return w * factor, b * factor


def project_layerwise(v: WeightPerturbation, theta: ModelParams, gamma: float) -> WeightPerturbation:
    check_aligned(v, theta)
    weights, biases = [], []
    for (vw, vb), nt, nv in zip(v.layers(), theta.block_norms(), v.block_norms()):
        bound = gamma * nt
        if nv > bound:
            if nt == 0:
                vw, vb = np.zeros_like(vw), np.zeros_like(vb)
            else:
                vw, vb = _scale_block(vw, vb, bound / nv)
        weights.append(vw.copy())
        biases.append(vb.copy())
    return ModelParams(v.spec, weights, biases)


def ascent_step(g: ModelParams, theta: ModelParams, size: float) -> WeightPerturbation:
    """Per block: size * g_n / |g_n| * |theta_n|; zero where g_n vanishes."""
    weights, biases = [], []
    for (gw, gb), ng, nt in zip(g.layers(), g.block_norms(), theta.block_norms()):
        if not math.isfinite(ng):
            raise NumericalError("non-finite weight gradient in perturbation search")
        if ng == 0:
            gw, gb = np.zeros_like(gw), np.zeros_like(gb)
        else:
            gw, gb = _scale_block(gw, gb, size * (nt / ng))
        weights.append(gw)
        biases.append(gb)
    return ModelParams(g.spec, weights, biases)


def awp_direction(params: ModelParams, adv_batch: LabeledBatch, cfg: WeightPerturbConfig) -> WeightPerturbation:
    """Weight perturbation that increases the mean loss on ``adv_batch``.

    ``adv_batch.inputs`` must already hold the adversarial inputs. With the
    default single step and ``rho == gamma`` this is the closed form
    ``gamma * g/|g| * |theta|`` per block.
    """
    v = params.zeros_like()
    for k in range(cfg.steps):
        probe = params if k == 0 else apply(params, v)
        g = param_gradient(probe, adv_batch)
        step = ascent_step(g, params, cfg.step_size)
        v = project_layerwise(v.map(np.add, step) if k else step, params, cfg.gamma)
    return v


def apply(theta: ModelParams, v: WeightPerturbation) -> ModelParams:
    """theta + v, remembering a copy of theta for :func:`revert`."""
    check_aligned(theta, v)
    out = theta.map(np.add, v)
    out.base = theta.copy()
    return out


def revert(theta_prime: ModelParams, v: WeightPerturbation) -> ModelParams:
    """Restore the parameters ``theta_prime`` was built from, bit for bit."""
    check_aligned(theta_prime, v)
    if theta_prime.base is None:
        raise ValueError("parameters were not produced by apply(); nothing to revert to")
    return theta_prime.base.copy()
