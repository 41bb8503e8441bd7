"""Shared test utilities: finite-difference oracles and tiny model configs."""

from __future__ import annotations

import dataclasses

import numpy as np

from gfr.config import RunConfig
from gfr.tensor import Tensor

EPS = 1e-5


def rel_err(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)


def fd_grad(f, x: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Dense central finite differences of a scalar function of an array."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * eps)
    return g


def check_tensor_grad(build, tensors: list[Tensor], rng: np.random.Generator, samples: int = 12,
                      tol: float = 1e-4, eps: float = EPS, pick: str = "random") -> float:
    """Compare analytic grads of `build()` against sampled finite differences.

    `build` constructs a fresh graph from the current `.data` of the given
    tensors and returns a scalar Tensor.  For each tensor a handful of
    coordinates is probed (all of them for small tensors).  Returns the
    worst relative error seen.

    pick="largest" probes the largest-magnitude gradient entries instead
    of random ones; deep graphs need it because central differences lose
    |loss| * 1e-16 / eps of absolute precision, which swamps coordinates
    whose true gradient is far below that floor.
    """
    for t in tensors:
        t.grad = None
    loss = build()
    loss.backward()
    grads = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    worst = 0.0
    for t, g in zip(tensors, grads):
        flat = t.data.reshape(-1)
        n = flat.size
        if n <= samples:
            coords = np.arange(n)
        elif pick == "largest":
            coords = np.argsort(-np.abs(g.reshape(-1)))[:samples]
        else:
            coords = rng.choice(n, size=samples, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(build().data)
            flat[i] = orig - eps
            lo = float(build().data)
            flat[i] = orig
            numeric = (hi - lo) / (2 * eps)
            worst = max(worst, rel_err(float(g.reshape(-1)[i]), numeric))
    assert worst <= tol, f"gradient mismatch: worst rel err {worst:.3e} > {tol}"
    return worst


def tiny_config(**overrides) -> RunConfig:
    """A 32x32-input model small enough for dense finite differences."""
    base = dict(
        seed=0,
        input_size=32,
        num_classes=2,
        scale_sizes=(4, 2, 1),
        channels_per_scale=6,
        bottleneck_mid=4,
        backbone_channels=(4, 4, 5, 6, 6),
        batch_size=2,
        iterations=5,
    )
    base.update(overrides)
    return RunConfig(**base).validate()
