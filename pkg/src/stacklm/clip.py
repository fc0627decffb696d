"""Gradient norm clipping, global and per parameter group.

Global clipping rescales the whole gradient to norm mu when it is larger.
Layer-wise clipping applies the same rule independently to each named group
(embedding, each LSTM layer, softmax), which keeps a blow-up in one layer
from shrinking every other layer's update.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .netcore import GradientSet

__all__ = [
    "GlobalClip",
    "LayerwiseClip",
    "group_norms",
    "global_clip",
    "layerwise_clip",
    "equivalent_global_norm",
    "apply_policy",
]

# Norms within one ulp-scale factor of the threshold count as already clipped,
# so clipping is exactly idempotent despite float rounding in mu/n * g.
_SLACK = 1e-12


@dataclass(frozen=True)
class GlobalClip:
    """Single threshold over the concatenated gradient."""

    max_norm: float

    def __post_init__(self):
        if not (self.max_norm > 0) or not math.isfinite(self.max_norm):
            raise ValueError("max_norm must be positive and finite")


@dataclass(frozen=True)
class LayerwiseClip:
    """One threshold per gradient group; every group must be covered."""

    max_norms: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for name, mu in self.max_norms.items():
            if not (mu > 0) or not math.isfinite(mu):
                raise ValueError(f"max norm for group {name!r} must be positive and finite")


def _norm(arrays: list[np.ndarray]) -> float:
    return math.sqrt(math.fsum(float(np.vdot(a, a)) for a in arrays))


def group_norms(grads: GradientSet) -> dict[str, float]:
    """Euclidean norm of each named group's concatenated tensors."""
    return {name: _norm(grads.group_arrays(name)) for name in grads.group_names()}


def _scale_in_place(arrays: list[np.ndarray], n: float, mu: float) -> float:
    """Scale a group to norm mu if n exceeds it (modulo slack); return the factor."""
    if n <= mu * (1.0 + _SLACK):
        return 1.0
    s = mu / n
    for a in arrays:
        a *= s
    return s


def global_clip(grads: GradientSet, max_norm: float) -> tuple[GradientSet, float]:
    """Clip the whole gradient to max_norm in place; returns (grads, pre-norm)."""
    if not (max_norm > 0):
        raise ValueError("max_norm must be positive")
    arrays = [a for name in grads.group_names() for a in grads.group_arrays(name)]
    n = _norm(arrays)
    if not math.isfinite(n):
        raise ValueError("non-finite gradient norm")
    _scale_in_place(arrays, n, max_norm)
    return grads, n


def layerwise_clip(grads: GradientSet, max_norms: dict[str, float]) -> tuple[GradientSet, dict[str, float]]:
    """Clip each group to its own threshold in place; returns (grads, pre-norms).

    Every group in the gradient must have a threshold and vice versa, so a
    config written for a 2-layer model fails loudly on a 3-layer one.
    """
    names = grads.group_names()
    missing = [n for n in names if n not in max_norms]
    extra = [n for n in max_norms if n not in names]
    if missing or extra:
        raise ValueError(f"group/threshold mismatch: missing {missing}, extra {extra}")
    pre: dict[str, float] = {}
    for name in names:
        arrays = grads.group_arrays(name)
        n = _norm(arrays)
        if not math.isfinite(n):
            raise ValueError(f"non-finite gradient norm in group {name!r}")
        pre[name] = n
        _scale_in_place(arrays, n, max_norms[name])
    return grads, pre


def equivalent_global_norm(max_norms: dict[str, float]) -> float:
    """Global threshold whose clipped ball contains every layer-wise outcome.

    The layer-wise clipped gradient has norm at most sqrt(sum_i mu_i^2), so a
    global policy with that threshold never clips harder than the layer-wise
    one did.
    """
    if not max_norms:
        raise ValueError("no thresholds given")
    for name, mu in max_norms.items():
        if not (mu > 0) or not math.isfinite(mu):
            raise ValueError(f"max norm for group {name!r} must be positive and finite")
    return math.sqrt(math.fsum(mu * mu for mu in max_norms.values()))


def apply_policy(grads: GradientSet, policy: GlobalClip | LayerwiseClip) -> tuple[GradientSet, dict[str, float]]:
    """Dispatch on policy type; pre-clip norms come back under group names.

    For a global policy the single pre-norm is reported under "global".
    """
    if isinstance(policy, GlobalClip):
        grads, n = global_clip(grads, policy.max_norm)
        return grads, {"global": n}
    if isinstance(policy, LayerwiseClip):
        return layerwise_clip(grads, policy.max_norms)
    raise TypeError(f"unknown clip policy {type(policy).__name__}")
