"""Residual feature transform and attention-weighted pooling."""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor_core as tc
from .attention import AttentionBundle, ConvParams
from .tensor_core import DiffValue, TensorError


@dataclass
class PooledFeatures:
    f_s: DiffValue
    f_c: DiffValue


def theta_transform(F: DiffValue, theta: ConvParams) -> DiffValue:
    """``relu(F + conv3d(F))``; the conv must preserve the channel count."""
    k = theta.kernel.shape
    if k[3] != F.shape[3] or k[4] != F.shape[3]:
        raise tc.ShapeMismatchError("theta_transform", F.shape, k)
    return tc.relu(F + theta.apply(F))


def pool(theta_F: DiffValue, weights: DiffValue) -> DiffValue:
    """Weighted voxel average of a ``T×H×W×D`` volume; returns a D-vector."""
    if theta_F.shape[:3] != weights.shape:
        raise tc.ShapeMismatchError("weighted_pool", theta_F.shape, weights.shape)
    total = tc.sum_all(weights)
    if total.item() <= 0:
        raise TensorError("weighted_pool: attention weights sum to zero")
    T, H, W, D = theta_F.shape
    w = tc.broadcast_to(tc.reshape(weights, (T * H * W, 1)), (T * H * W, D))
    summed = tc.reduce("sum", tc.reshape(theta_F, (T * H * W, D)) * w, 0)
    return summed / total


def weighted_pool(theta_F: DiffValue, bundle: AttentionBundle) -> PooledFeatures:
    return PooledFeatures(f_s=pool(theta_F, bundle.s), f_c=pool(theta_F, bundle.c))
