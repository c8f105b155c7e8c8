"""Finite-difference check of the full objective on tiny random models."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .attention import AttentionHyper
from .model import ConjugateGroup, ModelParams, TrainConfig, init_params, total_loss

TOLERANCE = 1e-4
STEP = 1e-5


@dataclass
class InstanceReport:
    index: int
    shape: tuple[int, int, int, int]
    num_classes: int
    num_conjugates: int
    backbone: bool
    errors: dict[str, float]

    @property
    def max_error(self) -> float:
        return max(self.errors.values())


def random_instance(rng: np.random.Generator, backbone: bool = False
                    ) -> tuple[ConjugateGroup, ModelParams, TrainConfig]:
    T = int(rng.integers(3, 5))
    D = int(rng.integers(4, 7))
    K = int(rng.integers(2, 4))
    n_conj = int(rng.integers(1, 4))
    H = W = 3
    C = D if not backbone else int(rng.integers(2, 4))
    action = rng.normal(size=(T, H, W, C))
    conjugates = [rng.normal(size=(int(rng.integers(2, 6)), H, W, C)) for _ in range(n_conj)]
    group = ConjugateGroup(int(rng.integers(K)), action, conjugates)

    params = init_params(D, K, seed=int(rng.integers(2**31)), backbone_in=C if backbone else None)
    # move every parameter off its structured initial value
    for t in params.named_tensors().values():
        t.value = t.value + 0.2 * rng.normal(size=t.shape)
    if params.backbone is not None:
        # positive bias keeps relu outputs away from all-zero voxels
        params.backbone.bias.value = rng.uniform(0.5, 1.5, size=D)
    hyper = AttentionHyper(rho=float(rng.choice([30.0, 50.0])), alpha=float(rng.uniform(0.5, 2.0)),
                           beta=float(rng.uniform(0.5, 2.0)), gamma=float(rng.uniform(1.0, 10.0)),
                           xi=float(rng.uniform(0.0, 0.3)))
    config = TrainConfig(hyper=hyper, lambda_sim=float(rng.uniform(0.5, 2.0)),
                         lambda_diff=float(rng.uniform(0.5, 2.0)),
                         loss_mode=str(rng.choice(["softmax-ce", "per-class-logistic"])))
    return group, params, config


REPLAY_KEY = "replay-vs-rebuild"


def check_instance(group: ConjugateGroup, params: ModelParams, config: TrainConfig,
                   h: float = STEP, spot_checks: int = 3) -> dict[str, float]:
    """Max relative error between backward() and central differences, per parameter.

    Differences are taken on a replay of the recorded graph. For
    ``spot_checks`` random coordinates per parameter the replayed difference
    is compared with one from fully rebuilt forward passes; the worst
    disagreement is reported under ``REPLAY_KEY``.
    """
    params.zero_grad()
    loss = total_loss(group, params, config)
    tc.backward(loss)
    graph = tc.GraphReplay(loss)
    rng = np.random.default_rng(0)
    errors = {}
    replay_err = 0.0
    for name, t in params.named_tensors().items():
        analytic = t.grad.copy()
        original = t.value
        numeric = tc.finite_diff_grad(lambda x, t=t: graph.evaluate(t, x), original, h)
        errors[name] = tc.max_rel_error(analytic, numeric)

        def rebuilt(x, t=t):
            t.value = x
            return total_loss(group, params, config).item()

        for i in rng.choice(original.size, size=min(spot_checks, original.size), replace=False):
            fresh = []
            for sign in (1.0, -1.0):
                x = original.copy()
                x.reshape(-1)[i] += sign * h
                fresh.append(rebuilt(x))
            t.value = original
            rebuilt_fd = (fresh[0] - fresh[1]) / (2.0 * h)
            replay_err = max(replay_err, tc.max_rel_error(numeric.reshape(-1)[i], rebuilt_fd))
    errors[REPLAY_KEY] = replay_err
    params.zero_grad()
    return errors


def run(seed: int = 0, instances: int = 5) -> list[InstanceReport]:
    rng = np.random.default_rng(seed)
    reports = []
    for i in range(instances):
        backbone = i in (2, 4)
        group, params, config = random_instance(rng, backbone=backbone)
        errors = check_instance(group, params, config)
        reports.append(InstanceReport(i, group.action.shape, params.num_classes,
                                      len(group.conjugates), backbone, errors))
    return reports


def format_report(reports: list[InstanceReport], tol: float = TOLERANCE) -> list[str]:
    lines = []
    for r in reports:
        lines.append(f"instance {r.index} shape={'x'.join(map(str, r.shape))} K={r.num_classes} "
                     f"conjugates={r.num_conjugates} backbone={'yes' if r.backbone else 'no'}")
        for name, err in r.errors.items():
            lines.append(f"  {name:<18} max_rel_err={err:.3e} {'ok' if err <= tol else 'FAIL'}")
    worst = max(r.max_error for r in reports)
    lines.append(f"overall max_rel_err={worst:.3e} tolerance={tol:.0e} {'PASS' if worst <= tol else 'FAIL'}")
    return lines


if __name__ == "__main__":
    t0 = time.time()
    print("\n".join(format_report(run())))
    print(f"{time.time() - t0:.1f}s")
