"""Adversarial training loops: AT, AT-AWP, ISEAT and the ablation variants.

All methods share one step skeleton:

1. craft delta with PGD on the current parameters theta;
2. (AWP methods) find the weight perturbation v on the adversarial batch;
3. (regularised methods) rank the batch by vulnerability and weight it;
4. evaluate the objective on the two models theta' = theta + v and theta,
   backpropagate through both and add the gradients, treating v and the
   instance weights as constants;
5. take an SGD-momentum step at theta' and remove v again.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from . import autodiff as ad
from .attacks import AttackConfig, pgd, robust_accuracy
from .awp import WeightPerturbConfig, WeightPerturbation, apply, awp_direction
from .data import Dataset, batch_indices
from .errors import NumericalError
from .model import (
    PRECISIONS,
    LabeledBatch,
    ModelParams,
    ModelSpec,
    cross_entropy_graph,
    init_params,
    logits_graph,
    loss,
    param_tensors,
)
from .smoothing import PenaltyConfig, logit_distance, penalty_params
from .vulnerability import AV_FIELDS, av, av_stats, linear_weights

log = logging.getLogger(__name__)

Method = Literal["at", "at_awp", "iseat", "lsi", "trade_awp", "topn_finetune"]
AWP_METHODS = frozenset({"at_awp", "iseat", "lsi", "trade_awp"})
REGULARISED_METHODS = frozenset({"iseat", "lsi", "trade_awp", "topn_finetune"})

# independent random streams per (seed, epoch, ...)
_ATTACK_STREAM, _EVAL_STREAM, _AV_STREAM = 1, 2, 3

METRIC_COLUMNS = (
    "epoch",
    "train_clean_loss",
    "train_adv_loss",
    "eval_clean_acc",
    "eval_robust_acc",
    *AV_FIELDS,
    "lr",
    "lambda_eff",
    "epsilon_eff",
)


class OptimizerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    lr: float = Field(0.1, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(5e-4, ge=0)
    decay_factor: float = Field(0.1, gt=0, le=1)
    decay_fractions: tuple[float, ...] = (0.5, 0.75)

    @field_validator("decay_fractions")
    @classmethod
    def _fractions(cls, v):
        if any(not 0 < f < 1 for f in v):
            raise ValueError("decay fractions must lie in (0, 1)")
        if any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("decay fractions must be strictly increasing")
        return v


class SWAConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    start_fraction: float = Field(0.5, ge=0, lt=1)
    period: int = Field(1, ge=1)


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    method: Method = "iseat"
    attack: AttackConfig = AttackConfig()
    eval_attack: AttackConfig = AttackConfig(steps=10)
    wp: WeightPerturbConfig = WeightPerturbConfig()
    penalty: PenaltyConfig = PenaltyConfig()
    epochs: int = Field(10, ge=1)
    batch_size: int = Field(128, ge=1)
    optimizer: OptimizerConfig = OptimizerConfig()
    lambda_warmup: bool = False
    eps_ramp_epochs: int = Field(0, ge=0)
    seed: int = Field(0, ge=0)
    precision: Literal["f64", "f32"] = "f64"
    swa: SWAConfig | None = None

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    @property
    def variant(self) -> str | None:
        if self.method == "iseat":
            return self.penalty.variant
        if self.method in ("lsi", "topn_finetune"):
            return "lsi"
        if self.method == "trade_awp":
            return "trade_awp"
        return None

    @property
    def weight_scheme(self) -> str:
        return "top10" if self.method == "topn_finetune" else self.penalty.weights


# -- schedules ----------------------------------------------------------------

def lr_at(cfg: RunConfig, epoch: int) -> float:
    """Learning rate for 0-based ``epoch``: one decay per passed fraction."""
    opt = cfg.optimizer
    n = sum(epoch >= f * cfg.epochs for f in opt.decay_fractions)
    lr = opt.lr
    for _ in range(n):
        lr *= opt.decay_factor
    return lr


def lambda_at(cfg: RunConfig, epoch: int) -> float:
    if not cfg.lambda_warmup or not cfg.optimizer.decay_fractions:
        return cfg.penalty.lam
    return cfg.penalty.lam if epoch >= cfg.optimizer.decay_fractions[0] * cfg.epochs else 0.0


def epsilon_at(cfg: RunConfig, epoch: int) -> float:
    """Linear ramp reaching the full budget at the end of the ramp's last epoch."""
    eps = cfg.attack.epsilon
    if cfg.eps_ramp_epochs == 0:
        return eps
    return eps * min(1.0, (epoch + 1) / cfg.eps_ramp_epochs)


def _attack_for(cfg: AttackConfig, eps: float) -> AttackConfig:
    if eps == cfg.epsilon:
        return cfg
    scale = eps / cfg.epsilon if cfg.epsilon > 0 else 0.0
    return cfg.model_copy(update={"epsilon": eps, "step_size": max(cfg.step_size * scale, 1e-12)})


# -- objective and its gradient ----------------------------------------------------

@dataclass
class Objective:
    value: float
    grad: ModelParams
    adv_loss: np.ndarray
    penalty: np.ndarray | None


def objective_gradient(
    params: ModelParams,
    x: np.ndarray,
    y: np.ndarray,
    delta: np.ndarray,
    v: WeightPerturbation | None,
    weights: np.ndarray | None,
    lam: float,
    variant: str | None,
    distance: str = "sq_l2",
) -> Objective:
    """Value and theta-gradient of mean(L(x+delta; theta') + lam * w * o).

    theta' = theta + v (or theta when ``v`` is None). The objective is built
    over two separate parameter sets and the gradient is the sum of the two
    backward passes; v and the weights are constants.
    """
    spec = params.spec
    x = np.asarray(x, dtype=params.dtype)
    x_adv = x + delta
    theta_prime = params if v is None else apply(params, v)
    t_prime = param_tensors(theta_prime)
    t_clean = t_prime if v is None else param_tensors(params)
    tensors = {id(theta_prime): t_prime, id(params): t_clean}

    adv_logits = logits_graph(spec, t_prime, ad.Tensor(x_adv))
    ce = cross_entropy_graph(adv_logits, y)
    per_sample = ce
    o = None
    if variant is not None:
        p_adv, p_clean = penalty_params(variant, params, theta_prime)
        a_logits = adv_logits if p_adv is theta_prime else logits_graph(spec, tensors[id(p_adv)], ad.Tensor(x_adv))
        c_logits = logits_graph(spec, tensors[id(p_clean)], ad.Tensor(x))
        o = logit_distance(a_logits, c_logits, distance)
        coef = lam * (np.ones(len(y)) if weights is None else np.asarray(weights, dtype=np.float64))
        per_sample = ad.add(ce, ad.mul(ad.Tensor(coef.astype(params.dtype)), o))
    total = ad.mean(per_sample)
    if not np.isfinite(total.data):
        raise NumericalError("training objective is not finite")

    if t_clean is t_prime:
        g = ad.grad(total, t_prime)
    else:
        # one reverse sweep yields both partials; d theta'/d theta is the identity
        both = ad.grad(total, t_prime + t_clean)
        n = len(t_prime)
        g = [a + b for a, b in zip(both[:n], both[n:])]
    return Objective(
        float(total.data),
        ModelParams.from_arrays(spec, g),
        ce.data,
        None if o is None else o.data,
    )


# -- one optimisation step ---------------------------------------------------------

@dataclass
class StepResult:
    params: ModelParams
    momentum: ModelParams
    adv_loss: float
    clean_loss: float
    delta: np.ndarray = field(repr=False)
    v: WeightPerturbation | None = field(repr=False)
    weights: np.ndarray | None = field(repr=False)
    grad: ModelParams = field(repr=False)


def sgd_update(
    params: ModelParams,
    grad: ModelParams,
    momentum: ModelParams | None,
    v: WeightPerturbation | None,
    opt: OptimizerConfig,
    lr: float,
) -> tuple[ModelParams, ModelParams]:
    """theta <- (theta + v) - lr * step - v, with momentum and decay on theta."""
    step = grad.map(lambda g, t: g + opt.weight_decay * t, params) if opt.weight_decay else grad
    if momentum is not None and opt.momentum:
        step = momentum.map(lambda b, d: opt.momentum * b + d, step)
    if v is None:
        new = params.map(lambda t, s: t - lr * s, step)
    else:
        new = params.map(lambda t, vv, s: (t + vv) - lr * s - vv, v, step)
    return new, step


def train_step(
    params: ModelParams,
    x,
    y,
    cfg: RunConfig,
    *,
    momentum: ModelParams | None = None,
    lr: float | None = None,
    lam: float | None = None,
    epsilon: float | None = None,
    rng: np.random.Generator | None = None,
) -> StepResult:
    lr = lr_at(cfg, 0) if lr is None else lr
    lam = cfg.penalty.lam if lam is None else lam
    eps = cfg.attack.epsilon if epsilon is None else epsilon
    x = np.asarray(x, dtype=params.dtype)
    y = np.asarray(y, dtype=np.int64)

    delta = pgd(params, x, y, _attack_for(cfg.attack, eps), rng)
    v = None
    if cfg.method in AWP_METHODS:
        v = awp_direction(params, LabeledBatch(x + delta, y), cfg.wp)

    clean = loss(params, x, y)
    variant = cfg.variant
    weights = None
    if variant is not None:
        adv_perturbed = loss(params if v is None else apply(params, v), x + delta, y)
        weights = linear_weights(adv_perturbed - clean, cfg.weight_scheme).weights

    obj = objective_gradient(params, x, y, delta, v, weights, lam, variant, cfg.penalty.distance)
    new, step = sgd_update(params, obj.grad, momentum, v, cfg.optimizer, lr)
    return StepResult(new, step, float(obj.adv_loss.mean()), float(clean.mean()), delta, v, weights, obj.grad)


def _require(cfg: RunConfig, allowed: set[str]) -> None:
    if cfg.method not in allowed:
        raise ValueError(f"method {cfg.method!r} not handled here; expected one of {sorted(allowed)}")


def at_step(params, batch: LabeledBatch, cfg: RunConfig, **kw) -> StepResult:
    _require(cfg, {"at"})
    return train_step(params, batch.inputs, batch.labels, cfg, **kw)


def awp_step(params, batch: LabeledBatch, cfg: RunConfig, **kw) -> StepResult:
    _require(cfg, {"at_awp"})
    return train_step(params, batch.inputs, batch.labels, cfg, **kw)


def iseat_step(params, batch: LabeledBatch, cfg: RunConfig, **kw) -> StepResult:
    _require(cfg, {"iseat"})
    return train_step(params, batch.inputs, batch.labels, cfg, **kw)


def variant_step(params, batch: LabeledBatch, cfg: RunConfig, **kw) -> StepResult:
    _require(cfg, {"lsi", "trade_awp", "topn_finetune"})
    return train_step(params, batch.inputs, batch.labels, cfg, **kw)


# -- SWA ------------------------------------------------------------------------------

@dataclass
class SWAState:
    total: ModelParams
    count: int

    @property
    def average(self) -> ModelParams:
        return self.total.map(lambda a: a / self.count)


def swa_start_epoch(cfg: RunConfig) -> int:
    assert cfg.swa is not None
    return int(cfg.swa.start_fraction * cfg.epochs)


def swa_update(running: SWAState | None, params: ModelParams, epoch: int, cfg: RunConfig) -> SWAState:
    """Equal-weight average of every included epoch's parameters."""
    if cfg.swa is None:
        raise ValueError("SWA is not configured")
    if epoch < swa_start_epoch(cfg):
        raise ValueError(f"epoch {epoch} precedes the SWA start epoch {swa_start_epoch(cfg)}")
    if running is None:
        return SWAState(params.copy(), 1)
    return SWAState(running.total.map(np.add, params), running.count + 1)


# -- full run -----------------------------------------------------------------------------

class TrainingDiverged(NumericalError):
    pass


@dataclass
class RunResult:
    final: ModelParams
    best: ModelParams
    best_epoch: int
    metrics: list[dict]
    swa: ModelParams | None = None


def measure_av_stats(params: ModelParams, data: Dataset, attack: AttackConfig, rng=None) -> dict[str, float]:
    x = data.inputs.astype(params.dtype)
    delta = pgd(params, x, data.labels, attack, rng)
    return av_stats(av(params, x, data.labels, delta)).as_row()


def run(
    cfg: RunConfig,
    spec: ModelSpec,
    train: Dataset,
    test: Dataset,
    init: ModelParams | None = None,
) -> RunResult:
    dtype = cfg.dtype
    params = init.astype(dtype) if init is not None else init_params(spec, dtype)
    momentum = None
    best, best_epoch, best_robust = params.copy(), 0, -1.0
    swa_state = None
    metrics: list[dict] = []
    x_train = train.inputs.astype(dtype)

    for epoch in range(cfg.epochs):
        lr, lam, eps = lr_at(cfg, epoch), lambda_at(cfg, epoch), epsilon_at(cfg, epoch)
        adv_sum = clean_sum = 0.0
        for b, idx in enumerate(batch_indices(len(train), cfg.batch_size, cfg.seed, epoch)):
            rng = np.random.default_rng([cfg.seed, epoch, b, _ATTACK_STREAM])
            try:
                res = train_step(
                    params, x_train[idx], train.labels[idx], cfg,
                    momentum=momentum, lr=lr, lam=lam, epsilon=eps, rng=rng,
                )
            except NumericalError as exc:
                raise TrainingDiverged(f"epoch {epoch + 1}, batch {b}: {exc}") from exc
            params, momentum = res.params, res.momentum
            adv_sum += res.adv_loss * len(idx)
            clean_sum += res.clean_loss * len(idx)

        clean_acc, robust_acc = robust_accuracy(
            params, test.inputs, test.labels, cfg.eval_attack,
            rng=np.random.default_rng([cfg.seed, epoch, _EVAL_STREAM]),
        )
        # vulnerability is always measured against the full training budget
        row = {
            "epoch": epoch + 1,
            "train_clean_loss": clean_sum / len(train),
            "train_adv_loss": adv_sum / len(train),
            "eval_clean_acc": clean_acc,
            "eval_robust_acc": robust_acc,
            **measure_av_stats(params, train, cfg.attack, np.random.default_rng([cfg.seed, epoch, _AV_STREAM])),
            "lr": lr,
            "lambda_eff": lam,
            "epsilon_eff": eps,
        }
        metrics.append(row)
        log.info("epoch %d: adv loss %.4f, clean acc %.4f, robust acc %.4f, AV SD %.4f",
                 epoch + 1, row["train_adv_loss"], clean_acc, robust_acc, row["av_sd"])
        if robust_acc > best_robust:
            best, best_epoch, best_robust = params.copy(), epoch + 1, robust_acc
        if cfg.swa is not None and epoch >= swa_start_epoch(cfg) and (epoch - swa_start_epoch(cfg)) % cfg.swa.period == 0:
            swa_state = swa_update(swa_state, params, epoch, cfg)

    return RunResult(params, best, best_epoch, metrics, None if swa_state is None else swa_state.average)


def format_value(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.9g}"


def write_metrics_csv(rows: list[dict], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in rows:
            w.writerow([format_value(row[c]) for c in METRIC_COLUMNS])
