"""Cross-video comparison of an action clip against its conjugate.

For each voxel ``x_i`` of the action clip, ``eta(x_i, Z)`` is a softmax
mixture of the columns of ``Z`` weighted by cosine similarity to ``x_i``.
The similarity loss compares ``eta(x_i, X)`` with ``eta(x_i, Z)`` on action
voxels; the difference loss does the same on context voxels.
"""

from __future__ import annotations

import numpy as np

from . import tensor_core as tc
from .attention import AttentionHyper
from .tensor_core import DiffValue, TensorError


def to_voxel_matrix(F: DiffValue) -> DiffValue:
    """``T×H×W×D`` -> ``D×N`` with voxels in t, h, w order."""
    if F.ndim != 4:
        raise TensorError(f"expected a T×H×W×D map, got {F.shape}")
    T, H, W, D = F.shape
    return tc.transpose(tc.reshape(F, (T * H * W, D)))


def from_voxel_matrix(X: DiffValue, thw: tuple[int, int, int]) -> DiffValue:
    D = X.shape[0]
    return tc.reshape(tc.transpose(X), (*thw, D))


def _column_norms(X: DiffValue, what: str) -> DiffValue:
    norms = tc.sqrt(tc.reduce("sum", X * X, 0, keep_dims=True))
    zero = np.flatnonzero(norms.value.reshape(-1) == 0)
    if zero.size:
        raise TensorError(f"{what}: voxel {int(zero[0])} has a zero feature vector")
    return norms


def unit_columns(X: DiffValue, what: str = "unit_columns") -> DiffValue:
    return X / tc.broadcast_to(_column_norms(X, what), X.shape)


def eta_matrix(X: DiffValue, Z: DiffValue, gamma: float) -> DiffValue:
    """Column ``i`` of the result is ``eta(x_i, Z)``; shape ``D×N``."""
    if X.shape[0] != Z.shape[0]:
        raise tc.ShapeMismatchError("eta", X.shape, Z.shape)
    if gamma < 0:
        raise TensorError(f"gamma must be nonnegative, got {gamma}")
    logits = tc.matmul(tc.transpose(unit_columns(Z, "eta Z")), unit_columns(X, "eta X"))
    return tc.matmul(Z, tc.softmax_over(logits * float(gamma), 0))


def eta(x: DiffValue, Z: DiffValue, gamma: float) -> DiffValue:
    """Amount of the D-vector ``x`` present in the ``D×M`` matrix ``Z``."""
    col = tc.reshape(x, (x.size, 1))
    return tc.reshape(eta_matrix(col, Z, gamma), (x.size,))


def column_cosines(U: DiffValue, V: DiffValue) -> DiffValue:
    """Cosine between matching columns of two ``D×N`` matrices."""
    if U.shape != V.shape:
        raise tc.ShapeMismatchError("cosine", U.shape, V.shape)
    dots = tc.reduce("sum", U * V, 0)
    nu = tc.reshape(_column_norms(U, "cosine"), (U.shape[1],))
    nv = tc.reshape(_column_norms(V, "cosine"), (V.shape[1],))
    return dots / (nu * nv)


def sim(x: DiffValue, z: DiffValue, xi: float) -> DiffValue:
    cos = column_cosines(tc.reshape(x, (x.size, 1)), tc.reshape(z, (z.size, 1)))
    return tc.relu(cos - xi)


def diff(x: DiffValue, z: DiffValue) -> DiffValue:
    cos = column_cosines(tc.reshape(x, (x.size, 1)), tc.reshape(z, (z.size, 1)))
    return 1.0 - cos


def _weighted_mean(values: DiffValue, weights: DiffValue, name: str) -> DiffValue:
    weights = tc.reshape(weights, (weights.size,))
    if weights.shape != values.shape:
        raise tc.ShapeMismatchError(name, values.shape, weights.shape)
    total = tc.sum_all(weights)
    if total.item() <= 0:
        raise TensorError(f"{name}: weights sum to zero")
    return tc.sum_all(values * weights) / total


def _pair_cosines(X: DiffValue, Z: DiffValue, gamma: float) -> DiffValue:
    return column_cosines(eta_matrix(X, X, gamma), eta_matrix(X, Z, gamma))


def loss_action_sim(X: DiffValue, Z: DiffValue, s_weights: DiffValue, hyper: AttentionHyper) -> DiffValue:
    """Weighted mean of ``sim(eta(x_i, X), eta(x_i, Z))`` over action voxels."""
    sims = tc.relu(_pair_cosines(X, Z, hyper.gamma) - hyper.xi)
    return _weighted_mean(sims, s_weights, "loss_action_sim")


def loss_context_diff(X: DiffValue, Z: DiffValue, c_weights: DiffValue, hyper: AttentionHyper) -> DiffValue:
    """Weighted mean of ``diff(eta(x_i, X), eta(x_i, Z))`` over context voxels."""
    diffs = 1.0 - _pair_cosines(X, Z, hyper.gamma)
    return _weighted_mean(diffs, c_weights, "loss_context_diff")


def pair_losses(X: DiffValue, Z: DiffValue, s_weights: DiffValue, c_weights: DiffValue,
                hyper: AttentionHyper) -> tuple[DiffValue, DiffValue]:
    """Both losses, sharing the eta computation."""
    cos = _pair_cosines(X, Z, hyper.gamma)
    l_sim = _weighted_mean(tc.relu(cos - hyper.xi), s_weights, "loss_action_sim")
    l_diff = _weighted_mean(1.0 - cos, c_weights, "loss_context_diff")
    return l_sim, l_diff
