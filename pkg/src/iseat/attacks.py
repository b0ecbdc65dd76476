"""l-infinity adversaries, margin search and loss-landscape grids.

Every perturbation returned here satisfies ``|delta| <= epsilon`` and
``0 <= x + delta <= 1`` exactly in the working precision: the projection
clips delta to ``[-eps, eps]`` and then to ``[-x, 1 - x]``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .model import ModelParams, input_gradient, loss, predict

MARGIN_MAX = math.inf


class AttackConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    epsilon: float = Field(0.1, ge=0)
    steps: int = Field(10, ge=1)
    step_size: float = Field(0.025, gt=0)
    random_start: bool = True
    seed: int = 0


def project(delta: np.ndarray, x: np.ndarray, epsilon: float) -> np.ndarray:
    delta = np.clip(delta, -epsilon, epsilon)
    return np.clip(delta, -x, 1.0 - x)


def fgsm(params: ModelParams, x, y, epsilon: float) -> np.ndarray:
    x = np.asarray(x, dtype=params.dtype)
    g = input_gradient(params, x, y)
    return project(epsilon * np.sign(g), x, epsilon)


def pgd(params: ModelParams, x, y, cfg: AttackConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Sign-gradient ascent with projection after every step.

    ``rng`` overrides the generator seeded from ``cfg.seed`` for the random
    start (the trainer passes one derived from seed, epoch and batch).
    """
    x = np.asarray(x, dtype=params.dtype)
    eps = cfg.epsilon
    if cfg.random_start:
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        delta = project(rng.uniform(-eps, eps, x.shape).astype(x.dtype), x, eps)
    else:
        delta = np.zeros_like(x)
    if eps == 0:
        return np.zeros_like(x)
    for _ in range(cfg.steps):
        g = input_gradient(params, x + delta, y)
        delta = project(delta + cfg.step_size * np.sign(g), x, eps)
    return delta


def robust_accuracy(
    params: ModelParams, x, y, cfg: AttackConfig, batch_size: int = 1000, rng: np.random.Generator | None = None
) -> tuple[float, float]:
    """(clean accuracy, accuracy under ``pgd``) over a dataset."""
    x = np.asarray(x, dtype=params.dtype)
    y = np.asarray(y)
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    clean = robust = 0
    for s in range(0, len(y), batch_size):
        xb, yb = x[s:s + batch_size], y[s:s + batch_size]
        clean += int(np.sum(predict(params, xb) == yb))
        d = pgd(params, xb, yb, cfg, rng)
        robust += int(np.sum(predict(params, xb + d) == yb))
    return clean / len(y), robust / len(y)


# -- margin along the adversarial direction ---------------------------------

@dataclass
class MarginResult:
    mu: float
    direction_norm: float

    @property
    def flipped(self) -> bool:
        return self.mu != MARGIN_MAX


def margin_lattice(step: float = 0.25, mu_max: float = 50.0) -> np.ndarray:
    return step * np.arange(int(math.floor(mu_max / step + 1e-9)) + 1)


def margin_search(params: ModelParams, x, delta, step: float = 0.25, mu_max: float = 50.0) -> MarginResult:
    """Smallest lattice mu with F(clip(x + mu * delta/|delta|_2)) != F(x)."""
    x = np.asarray(x, dtype=params.dtype)
    delta = np.asarray(delta, dtype=params.dtype)
    norm = float(np.linalg.norm(delta))
    if norm == 0:
        raise ValueError("margin search needs a non-zero perturbation direction")
    mus = margin_lattice(step, mu_max)
    direction = delta / norm
    probes = np.clip(x[None, :] + mus[:, None] * direction[None, :], 0.0, 1.0)
    preds = predict(params, probes)
    origin = predict(params, x)
    flips = np.nonzero(preds != origin)[0]
    return MarginResult(float(mus[flips[0]]) if flips.size else MARGIN_MAX, norm)


# -- loss landscape ---------------------------------------------------------

@dataclass
class LandscapeGrid:
    alphas: np.ndarray
    betas: np.ndarray
    losses: np.ndarray
    u: np.ndarray
    seed: int
    delta_norm: float

    def budget_alpha(self) -> float:
        """Grid alpha closest to the norm of the attack perturbation itself."""
        return float(self.alphas[np.argmin(np.abs(self.alphas - self.delta_norm))])


def loss_landscape(params: ModelParams, x, y, delta, alphas, betas, seed: int, epsilon: float = 1.0) -> LandscapeGrid:
    x = np.asarray(x, dtype=params.dtype)
    delta = np.asarray(delta, dtype=params.dtype)
    dn = float(np.linalg.norm(delta))
    if dn == 0:
        raise ValueError("loss landscape needs a non-zero adversarial direction")
    u = np.random.default_rng(seed).uniform(-epsilon, epsilon, x.shape).astype(x.dtype)
    un = float(np.linalg.norm(u))
    if un == 0:
        raise ValueError("random direction has zero norm (epsilon = 0?)")
    alphas = np.asarray(alphas, dtype=np.float64)
    betas = np.asarray(betas, dtype=np.float64)
    a_dir, b_dir = delta / dn, u / un
    pts = x[None, None, :] + alphas[:, None, None] * a_dir + betas[None, :, None] * b_dir
    pts = np.clip(pts, 0.0, 1.0).reshape(-1, x.size).astype(x.dtype)
    losses = loss(params, pts, np.full(pts.shape[0], int(y))).reshape(len(alphas), len(betas))
    return LandscapeGrid(alphas, betas, losses, u, seed, dn)


def write_landscape_csv(grid: LandscapeGrid, path) -> None:
    """``alpha,beta,loss`` rows plus a ``<path>.meta.json`` sidecar."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["alpha", "beta", "loss"])
        for i, a in enumerate(grid.alphas):
            for j, b in enumerate(grid.betas):
                w.writerow([f"{a:.9g}", f"{b:.9g}", f"{grid.losses[i, j]:.9g}"])
    meta = {
        "seed": grid.seed,
        "delta_l2_norm": float(f"{grid.delta_norm:.9g}"),
        "budget_equivalent_alpha": float(f"{grid.budget_alpha():.9g}"),
    }
    Path(str(path) + ".meta.json").write_text(json.dumps(meta, indent=1) + "\n")
