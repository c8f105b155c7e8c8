"""Classifier, joint objective, and the training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensor_core as tc
from .attention import AttentionBundle, AttentionHyper, ConvParams, build_bundle
from .conjugate import pair_losses, to_voxel_matrix
from .pooling import PooledFeatures, theta_transform, weighted_pool
from .tensor_core import DiffValue, TensorError

logger = logging.getLogger(__name__)

LOSS_MODES = ("softmax-ce", "per-class-logistic")


@dataclass
class ModelParams:
    phi: ConvParams
    psi: ConvParams
    theta: ConvParams
    fc_weight: DiffValue
    fc_bias: DiffValue
    backbone: ConvParams | None = None

    @property
    def num_classes(self) -> int:
        return self.fc_weight.shape[0]

    @property
    def channels(self) -> int:
        return self.theta.kernel.shape[3]

    def named_tensors(self) -> dict[str, DiffValue]:
        out = {
            "phi.kernel": self.phi.kernel,
            "psi.kernel": self.psi.kernel,
            "theta.kernel": self.theta.kernel,
            "theta.bias": self.theta.bias,
            "fc.weight": self.fc_weight,
            "fc.bias": self.fc_bias,
        }
        if self.backbone is not None:
            out["backbone.kernel"] = self.backbone.kernel
            out["backbone.bias"] = self.backbone.bias
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self.named_tensors().items()}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "ModelParams":
        v = {k: tc.variable(a) for k, a in arrays.items()}
        backbone = None
        if "backbone.kernel" in v:
            backbone = ConvParams(v["backbone.kernel"], v["backbone.bias"])
        params = cls(
            phi=ConvParams(v["phi.kernel"]),
            psi=ConvParams(v["psi.kernel"]),
            theta=ConvParams(v["theta.kernel"], v["theta.bias"]),
            fc_weight=v["fc.weight"],
            fc_bias=v["fc.bias"],
            backbone=backbone,
        )
        params.validate()
        return params

    def validate(self) -> None:
        D, K = self.channels, self.num_classes
        if self.phi.kernel.shape[3:] != (D, 1) or self.psi.kernel.shape[3:] != (D, 1):
            raise TensorError("phi/psi kernels must map D channels to 1")
        if self.theta.kernel.shape[3:] != (D, D) or self.theta.bias.shape != (D,):
            raise TensorError("theta must map D channels to D")
        if self.fc_weight.shape != (K, 2 * D) or self.fc_bias.shape != (K,):
            raise TensorError(f"fc shapes {self.fc_weight.shape}, {self.fc_bias.shape} inconsistent with D={D}")
        if self.backbone is not None and self.backbone.kernel.shape[4] != D:
            raise TensorError("backbone must output D channels")
        for name, t in self.named_tensors().items():
            if not np.all(np.isfinite(t.value)):
                raise TensorError(f"parameter {name} is not finite")

    def zero_grad(self) -> None:
        tc.zero_grads(self.named_tensors().values())


def init_params(channels: int, num_classes: int, seed: int = 0, kernel: int = 3,
                backbone_in: int | None = None) -> ModelParams:
    """Small uniform phi/psi, zero theta, fc uniform in ±1/sqrt(2D)."""
    rng = np.random.default_rng(seed)
    D, K = channels, num_classes
    k3 = (kernel, kernel, kernel)
    bound = 1.0 / np.sqrt(2 * D)
    backbone = None
    if backbone_in is not None:
        fan_in = kernel ** 3 * backbone_in
        backbone = ConvParams(
            tc.variable(rng.uniform(-1, 1, (*k3, backbone_in, D)) / np.sqrt(fan_in)),
            tc.variable(np.zeros(D)),
        )
    return ModelParams(
        phi=ConvParams(tc.variable(rng.uniform(-0.05, 0.05, (*k3, D, 1)))),
        psi=ConvParams(tc.variable(rng.uniform(-0.05, 0.05, (*k3, D, 1)))),
        theta=ConvParams(tc.variable(np.zeros((*k3, D, D))), tc.variable(np.zeros(D))),
        fc_weight=tc.variable(rng.uniform(-bound, bound, (K, 2 * D))),
        fc_bias=tc.variable(np.zeros(K)),
        backbone=backbone,
    )


@dataclass
class ConjugateGroup:
    label: int
    action: np.ndarray
    conjugates: list[np.ndarray]
    truth_mask: np.ndarray | None = None

    def __post_init__(self):
        if not self.conjugates:
            raise ValueError("a conjugate group needs at least one conjugate")
        h, w, d = self.action.shape[1:]
        for c in self.conjugates:
            if c.ndim != 4 or c.shape[1:] != (h, w, d):
                raise ValueError(f"conjugate shape {c.shape} incompatible with action {self.action.shape}")
        if self.truth_mask is not None and self.truth_mask.shape != self.action.shape[:3]:
            raise ValueError("truth_mask must match the action map's T×H×W")


@dataclass
class TrainConfig:
    hyper: AttentionHyper = field(default_factory=AttentionHyper)
    lambda_sim: float = 1.0
    lambda_diff: float = 1.0
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 36
    crop_len: int = 10
    max_steps: int = 500
    seed: int = 0
    loss_mode: str = "softmax-ce"

    def __post_init__(self):
        if self.learning_rate < 0 or not 0 <= self.momentum < 1:
            raise ValueError("learning_rate must be >= 0 and momentum in [0, 1)")
        if self.batch_size < 1 or self.crop_len < 1 or self.max_steps < 0:
            raise ValueError("batch_size and crop_len must be >= 1, max_steps >= 0")
        if self.lambda_sim < 0 or self.lambda_diff < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def features(F, params: ModelParams) -> DiffValue:
    """Feature map seen by the attention heads: the input, or the toy backbone's output."""
    F = F if isinstance(F, DiffValue) else tc.constant(F)
    if F.ndim != 4:
        raise TensorError(f"feature map must be T×H×W×D, got {F.shape}")
    if params.backbone is not None:
        return tc.relu(params.backbone.apply(F))
    if F.shape[3] != params.channels:
        raise tc.ShapeMismatchError("forward_classify", F.shape, (F.shape[0], F.shape[1], F.shape[2], params.channels))
    return F


def _classify(F: DiffValue, params: ModelParams, hyper: AttentionHyper):
    bundle = build_bundle(F, params.phi, params.psi, hyper)
    pooled = weighted_pool(theta_transform(F, params.theta), bundle)
    joint = tc.reshape(tc.concat(pooled.f_s, pooled.f_c, 0), (2 * params.channels, 1))
    scores = tc.reshape(tc.matmul(params.fc_weight, joint), (params.num_classes,)) + params.fc_bias
    return scores, bundle, pooled


def forward_classify(F, params: ModelParams, hyper: AttentionHyper
                     ) -> tuple[DiffValue, AttentionBundle, PooledFeatures]:
    return _classify(features(F, params), params, hyper)


def classification_loss(scores: DiffValue, label: int, mode: str = "softmax-ce") -> DiffValue:
    K = scores.size
    if not 0 <= label < K:
        raise TensorError(f"label {label} out of range for {K} classes")
    onehot = np.zeros(K)
    onehot[label] = 1.0
    if mode == "softmax-ce":
        m = float(scores.value.max())
        lse = tc.log(tc.sum_all(tc.exp(scores - m))) + m
        return lse - tc.sum_all(scores * tc.constant(onehot))
    if mode == "per-class-logistic":
        # softplus(s) - t*s, written stably as relu(s) + log(1 + exp(-|s|)) - t*s
        soft = tc.relu(scores) + tc.log(1.0 + tc.exp(-tc.ewise("abs", scores)))
        return tc.sum_all(soft - scores * tc.constant(onehot))
    raise TensorError(f"unknown loss mode {mode!r}")


@dataclass
class LossTerms:
    total: DiffValue
    classification: float
    sim: float
    diff: float


def loss_terms(group: ConjugateGroup, params: ModelParams, config: TrainConfig) -> LossTerms:
    hyper = config.hyper
    F = features(group.action, params)
    scores, bundle, _ = _classify(F, params, hyper)
    l_class = classification_loss(scores, group.label, config.loss_mode)
    total = l_class
    sim_v = diff_v = 0.0
    if config.lambda_sim or config.lambda_diff:
        X = to_voxel_matrix(F)
        sims, diffs = [], []
        for conj in group.conjugates:
            Z = to_voxel_matrix(features(conj, params))
            l_sim, l_diff = pair_losses(X, Z, bundle.s, bundle.c, hyper)
            sims.append(l_sim)
            diffs.append(l_diff)
        n = float(len(group.conjugates))
        mean_sim = _sum(sims) / n
        mean_diff = _sum(diffs) / n
        total = total + mean_sim * config.lambda_sim + mean_diff * config.lambda_diff
        sim_v, diff_v = mean_sim.item(), mean_diff.item()
    return LossTerms(total=total, classification=l_class.item(), sim=sim_v, diff=diff_v)


def _sum(values: Sequence[DiffValue]) -> DiffValue:
    out = values[0]
    for v in values[1:]:
        out = out + v
    return out


def total_loss(group: ConjugateGroup, params: ModelParams, config: TrainConfig) -> DiffValue:
    return loss_terms(group, params, config).total


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def crop_window(T: int, crop_len: int, rng: np.random.Generator) -> slice:
    if crop_len < 1:
        raise ValueError("crop_len must be >= 1")
    if T <= crop_len:
        return slice(0, T)
    start = int(rng.integers(0, T - crop_len + 1))
    return slice(start, start + crop_len)


def temporal_crop(F: np.ndarray, crop_len: int, rng: np.random.Generator) -> np.ndarray:
    return F[crop_window(F.shape[0], crop_len, rng)]


def crop_group(group: ConjugateGroup, crop_len: int, rng: np.random.Generator) -> ConjugateGroup:
    win = crop_window(group.action.shape[0], crop_len, rng)
    mask = None if group.truth_mask is None else group.truth_mask[win]
    conjugates = [temporal_crop(c, crop_len, rng) for c in group.conjugates]
    return ConjugateGroup(group.label, group.action[win], conjugates, mask)


class NonFiniteLossError(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step


def train(dataset: Sequence[ConjugateGroup], config: TrainConfig, params: ModelParams | None = None,
          init_seed: int | None = None) -> tuple[ModelParams, list[dict]]:
    """SGD with momentum on the mean per-group objective.

    Batches are drawn by walking seeded permutations of the dataset; every
    group is temporally cropped with the same seeded generator.
    """
    if not dataset:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(config.seed)
    if params is None:
        first = dataset[0]
        params = init_params(first.action.shape[3], 1 + max(g.label for g in dataset),
                             seed=config.seed if init_seed is None else init_seed)
    tensors = list(params.named_tensors().values())
    velocity = [np.zeros_like(t.value) for t in tensors]
    order = rng.permutation(len(dataset))
    cursor = 0
    history = []
    batch = min(config.batch_size, len(dataset))
    for step in range(config.max_steps):
        idx = []
        while len(idx) < batch:
            if cursor == len(order):
                order = rng.permutation(len(dataset))
                cursor = 0
            idx.append(int(order[cursor]))
            cursor += 1
        params.zero_grad()
        try:
            terms = [loss_terms(crop_group(dataset[i], config.crop_len, rng), params, config) for i in idx]
            loss = _sum([t.total for t in terms]) / float(batch)
        except TensorError as exc:
            # an overflowing forward pass surfaces as a non-finite node
            if "non-finite" in str(exc):
                raise NonFiniteLossError(step) from exc
            raise
        value = loss.item()
        if not np.isfinite(value):
            raise NonFiniteLossError(step)
        tc.backward(loss)
        for t, v in zip(tensors, velocity):
            g = t.grad if t.grad is not None else 0.0
            v *= config.momentum
            v -= config.learning_rate * g
            t.value = t.value + v
            if not np.isfinite(t.value).all():
                raise NonFiniteLossError(step + 1)
        history.append({
            "step": step,
            "loss": value,
            "class": float(np.mean([t.classification for t in terms])),
            "sim": float(np.mean([t.sim for t in terms])),
            "diff": float(np.mean([t.diff for t in terms])),
        })
        if step % 50 == 0:
            logger.info("step %d loss %.5f", step, value)
    params.zero_grad()
    return params, history


def predict(F: np.ndarray, params: ModelParams, hyper: AttentionHyper):
    scores, bundle, pooled = forward_classify(F, params, hyper)
    return scores.value.copy(), {k: v.copy() for k, v in bundle.arrays().items()}


def with_lambdas(config: TrainConfig, lambda_sim: float, lambda_diff: float) -> TrainConfig:
    return replace(config, lambda_sim=lambda_sim, lambda_diff=lambda_diff)
