"""Action and attention maps computed from a feature volume.

The action map is ``sigmoid(alpha * percent(norm(phi(F))))`` and the
attention map is ``softmax(beta * norm(psi(F)))`` over all voxels. The
final action map is their product and the context map is ``1 - action``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .tensor_core import DiffValue, TensorError

NORM_EPS = 1e-5


@dataclass(frozen=True)
class AttentionHyper:
    rho: float = 30.0
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 10.0
    xi: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.rho <= 100.0:
            raise ValueError(f"rho must be in [0, 100], got {self.rho}")
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative, got {getattr(self, name)}")
        if not 0.0 <= self.xi <= 1.0:
            raise ValueError(f"xi must be in [0, 1], got {self.xi}")


@dataclass
class ConvParams:
    """Kernel ``kt×kh×kw×C_in×C_out`` plus bias. ``bias=None`` means a fixed zero bias."""

    kernel: DiffValue
    bias: DiffValue | None = None

    def apply(self, x: DiffValue) -> DiffValue:
        bias = self.bias
        if bias is None:
            bias = tc.constant(np.zeros(self.kernel.shape[4]))
        return tc.conv3d(x, self.kernel, bias)

    def tensors(self) -> list[DiffValue]:
        return [self.kernel] if self.bias is None else [self.kernel, self.bias]


@dataclass
class AttentionBundle:
    s_act: DiffValue
    s_att: DiffValue
    s: DiffValue
    c: DiffValue

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name).value for name in ("s_act", "s_att", "s", "c")}


def att_norm(x: DiffValue, dims=None, eps: float = NORM_EPS) -> DiffValue:
    """Standardize ``x`` over ``dims`` using the population std plus ``eps``."""
    axes = tc.norm_dims(dims, x.ndim)
    count = int(np.prod([x.shape[d] for d in axes]))
    if count < 2:
        raise TensorError(f"att_norm needs at least 2 reduced elements, got {count}")
    mu = tc.broadcast_to(tc.reduce("mean", x, axes, keep_dims=True), x.shape)
    centered = x - mu
    sd = tc.reduce("std", x, axes, keep_dims=True) + eps
    return centered / tc.broadcast_to(sd, x.shape)


def percentile_pivot(values: np.ndarray, q: float) -> tuple[np.ndarray, np.ndarray]:
    """Flat indices and weights whose weighted sum is the ``q``-th percentile.

    Linear interpolation between closest ranks, as in ``numpy.percentile``.
    """
    flat = values.reshape(-1)
    order = np.argsort(flat, kind="stable")
    pos = q / 100.0 * (flat.size - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, flat.size - 1)
    frac = pos - lo
    if frac == 0.0 or hi == lo:
        return order[[lo]], np.array([1.0])
    return order[[lo, hi]], np.array([1.0 - frac, frac])


def att_percent(x: DiffValue, rho: float, detach_pivot: bool = False) -> DiffValue:
    """Shift ``x`` so that about ``rho`` percent of its entries are positive.

    The pivot is the ``(100 - rho)``-th percentile. By default the gradient
    also flows through the two order statistics the pivot interpolates;
    ``detach_pivot=True`` treats the pivot as a constant instead.
    """
    if not 0.0 <= rho <= 100.0:
        raise TensorError(f"rho must be in [0, 100], got {rho}")
    idx, w = percentile_pivot(x.value, 100.0 - rho)
    if detach_pivot:
        pivot = tc.constant(float(np.dot(x.value.reshape(-1)[idx], w)))
    else:
        picked = tc.take(tc.reshape(x, (x.size,)), idx)
        pivot = tc.reduce("sum", picked * tc.constant(w))
    return x - pivot


def confidence_map(F: DiffValue, conv: ConvParams) -> DiffValue:
    """Apply a D→1 conv and drop the channel axis: ``T×H×W``."""
    if conv.kernel.shape[4] != 1:
        raise TensorError(f"confidence conv must have one output channel, got {conv.kernel.shape}")
    out = conv.apply(F)
    return tc.reshape(out, out.shape[:3])


def build_action_map(F: DiffValue, phi: ConvParams, hyper: AttentionHyper) -> DiffValue:
    conf = att_norm(confidence_map(F, phi))
    return tc.sigmoid(att_percent(conf, hyper.rho) * hyper.alpha)


def build_attention_map(F: DiffValue, psi: ConvParams, hyper: AttentionHyper) -> DiffValue:
    conf = att_norm(confidence_map(F, psi))
    return tc.softmax_over(conf * hyper.beta)


def compose_bundle(s_act: DiffValue, s_att: DiffValue) -> AttentionBundle:
    if s_act.shape != s_att.shape:
        raise tc.ShapeMismatchError("compose_bundle", s_act.shape, s_att.shape)
    return AttentionBundle(s_act=s_act, s_att=s_att, s=s_act * s_att, c=1.0 - s_act)


def build_bundle(F: DiffValue, phi: ConvParams, psi: ConvParams, hyper: AttentionHyper) -> AttentionBundle:
    return compose_bundle(build_action_map(F, phi, hyper), build_attention_map(F, psi, hyper))
