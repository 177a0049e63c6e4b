"""Gradient clipping, Gaussian noise and the fused DP-SGD update.

One noisy update works on a *lot* of examples:

    g_tilde = (sum_i clip(g_i, B) + N(0, sigma^2 B^2 I)) / L
    theta'  = theta - lr * g_tilde

``clip`` rescales the gradient of *all* parameters jointly (global l2 norm),
so B bounds the sensitivity of the whole update.  Noise is drawn once per
step per parameter tensor, never per example.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .tensor import ParamSet, PerExampleGrads


class DPWarning(UserWarning):
    pass


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator; sequences are reproducible across platforms."""
    return np.random.Generator(np.random.Philox(seed))


@dataclass(frozen=True)
class PrivacyParams:
    epsilon_target: float
    delta: float
    clip_bound: float
    lot_size: int
    dataset_size: int
    noise_multiplier: float
    total_steps: int
    learning_rate: float

    def __post_init__(self):
        if not self.epsilon_target > 0:
            raise ValueError("epsilon_target must be positive")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if not self.clip_bound > 0:
            raise ValueError("clip_bound must be positive")
        if self.lot_size < 1 or self.dataset_size < 1:
            raise ValueError("lot_size and dataset_size must be positive")
        if self.lot_size > self.dataset_size:
            raise ValueError(f"lot_size {self.lot_size} exceeds dataset_size {self.dataset_size}")
        if self.noise_multiplier < 0:
            raise ValueError("noise_multiplier must be non-negative")
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.delta >= 1.0 / self.dataset_size:
            warnings.warn(
                f"delta={self.delta} is not below 1/N={1.0 / self.dataset_size}; "
                "the guarantee allows leaking a whole record with that probability",
                DPWarning,
                stacklevel=3,
            )

    @property
    def sampling_ratio(self) -> float:
        return self.lot_size / self.dataset_size

    def to_dict(self) -> dict:
        return asdict(self)


def clip_grad(g, bound: float) -> np.ndarray:
    """Scale ``g`` by ``min(1, bound / ||g||_2)``."""
    g = np.asarray(g)
    if not bound > 0:
        raise ValueError("clip bound must be positive")
    if not np.all(np.isfinite(g)):
        raise ValueError("gradient contains non-finite values")
    norm = float(np.sqrt(np.sum(np.square(g, dtype=np.float64))))
    if norm <= bound:
        return g.copy()
    out = g / (norm / bound)
    # float rounding can land a hair above the bound
    n2 = float(np.sqrt(np.sum(np.square(out, dtype=np.float64))))
    if n2 > bound:
        out = out * (bound / n2)
    return out.astype(g.dtype, copy=False)


def gaussian_sigma_for(epsilon: float, delta: float, bound: float) -> float:
    """Noise standard deviation giving one (epsilon, delta)-DP release of a B-bounded query.

    ``B * sqrt(2 ln(1.25/delta)) / epsilon``.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    if not bound > 0:
        raise ValueError("bound must be positive")
    return bound * math.sqrt(2.0 * math.log(1.25 / delta)) / epsilon


def lot_sample(n: int, lot_size: int, rng: np.random.Generator, mode: str = "fixed") -> np.ndarray:
    """Indices of one lot: ``fixed`` draws exactly ``lot_size`` distinct indices,
    ``poisson`` keeps each index independently with probability ``lot_size / n``."""
    if not 1 <= lot_size <= n:
        raise ValueError(f"need 1 <= lot_size <= n, got lot_size={lot_size}, n={n}")
    if mode == "fixed":
        return np.sort(rng.choice(n, size=lot_size, replace=False))
    if mode == "poisson":
        return np.flatnonzero(rng.random(n) < lot_size / n)
    raise ValueError(f"unknown sampling mode {mode!r}")


class ClipSumAccumulator:
    """Running sum of globally clipped per-example gradients.

    Micro-batches may be fed in any partition; examples are always added one
    at a time in arrival order, so the sum is bitwise independent of how the
    lot was split.  Clipped copies are never materialised for the whole lot.
    """

    def __init__(self, params: ParamSet, clip_bound: float):
        self.names = params.names()
        self.clip_bound = clip_bound
        self.sums = {n: np.zeros_like(params[n]) for n in self.names}
        self.count = 0

    def add(self, peg: PerExampleGrads) -> None:
        grads = [peg[n] for n in self.names]
        m = peg.batch_size
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise ValueError("per-example gradients contain non-finite values")
        sq = np.zeros(m, dtype=np.float64)
        for g in grads:
            sq += np.square(g.reshape(m, -1), dtype=np.float64).sum(axis=1)
        norms = np.sqrt(sq)
        if math.isinf(self.clip_bound):
            scale = np.ones(m)
        else:
            with np.errstate(divide="ignore"):
                scale = np.minimum(1.0, self.clip_bound / norms)
        for n, g in zip(self.names, grads):
            acc = self.sums[n]
            s = scale.astype(acc.dtype)
            for i in range(m):
                acc += s[i] * g[i]
        self.count += m


def dp_sgd_step(
    params: ParamSet,
    peg: PerExampleGrads | Sequence[PerExampleGrads],
    pp: PrivacyParams,
    rng: np.random.Generator,
) -> ParamSet:
    """One fused clip / noise / sum update.

    ``peg`` may be a single batch of per-example gradients or a list of
    micro-batches making up the lot.  ``pp.noise_multiplier == 0`` skips
    nothing but the scaling: the standard normal draws still happen, so
    the generator advances identically whatever sigma is.
    """
    batches = [peg] if isinstance(peg, PerExampleGrads) else [p for p in peg if p is not None]
    acc = ClipSumAccumulator(params, pp.clip_bound)
    for b in batches:
        acc.add(b)
    return apply_noisy_update(params, acc, pp.noise_multiplier, pp.learning_rate, rng)


def apply_noisy_update(params: ParamSet, acc: ClipSumAccumulator, noise_multiplier: float, lr: float, rng) -> ParamSet:
    if acc.count == 0:
        warnings.warn("empty lot; DP-SGD step skipped", DPWarning, stacklevel=2)
        return params
    std = noise_multiplier * acc.clip_bound if noise_multiplier > 0 else 0.0
    updated = {}
    for n in acc.names:
        total = acc.sums[n]
        z = rng.standard_normal(size=total.shape)
        noisy = total + (std * z).astype(total.dtype) if std else total
        updated[n] = params[n] - total.dtype.type(lr) * (noisy / total.dtype.type(acc.count))
    return params.replace(updated)


def sgd_step(params: ParamSet, grads: dict, batch_size: int, lr: float) -> ParamSet:
    """Plain averaged SGD from a summed batch gradient."""
    return params.replace({n: params[n] - params[n].dtype.type(lr) * (grads[n] / batch_size) for n in params})
