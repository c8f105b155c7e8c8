"""Procedural action/conjugate pairs with planted action blocks."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import ConjugateGroup


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 3
    samples_per_class: int = 20
    T: int = 8
    H: int = 6
    W: int = 6
    D: int = 8
    # inclusive (lo, hi) ranges for the planted block extents
    block_t: tuple[int, int] = (5, 6)
    block_h: tuple[int, int] = (4, 4)
    block_w: tuple[int, int] = (4, 4)
    num_scenes: int = 10
    noise: float = 0.3
    signal: float = 3.0
    conjugates: int = 1
    # nonzero plants a weakened signature into the conjugates too
    conjugate_leak: float = 0.0
    temporal_jitter: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.noise < 0 or self.signal < 0:
            raise ValueError("noise and signal must be nonnegative")
        if not 0.0 <= self.conjugate_leak <= 0.3:
            raise ValueError("conjugate_leak must be in [0, 0.3]")
        if self.num_classes > self.D:
            raise ValueError("orthogonal class signatures need D >= num_classes")
        for name, extent in (("block_t", self.T), ("block_h", self.H), ("block_w", self.W)):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ValueError(f"{name} must satisfy 1 <= lo <= hi, got {(lo, hi)}")
            if hi > extent:
                raise ValueError(f"{name} upper extent {hi} does not fit in volume extent {extent}")
        if self.conjugates < 1:
            raise ValueError("need at least one conjugate per group")


def class_signatures(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """``K×D`` rows, mutually orthogonal, each of norm ``spec.signal``."""
    q, _ = np.linalg.qr(rng.normal(size=(spec.D, spec.num_classes)))
    return spec.signal * q.T


def scene_vectors(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(0.5, 1.5, size=(spec.num_scenes, spec.D))


def _block(spec: SynthSpec, T: int, rng: np.random.Generator) -> tuple[slice, slice, slice]:
    extents = []
    for (lo, hi), size in ((spec.block_t, T), (spec.block_h, spec.H), (spec.block_w, spec.W)):
        ext = int(rng.integers(lo, min(hi, size) + 1))
        start = int(rng.integers(0, size - ext + 1))
        extents.append(slice(start, start + ext))
    return tuple(extents)


def _volume(scene: np.ndarray, T: int, spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    vol = np.broadcast_to(scene, (T, spec.H, spec.W, spec.D)).copy()
    return vol + spec.noise * rng.normal(size=vol.shape)


def generate(spec: SynthSpec) -> list[ConjugateGroup]:
    """Build ``num_classes * samples_per_class`` groups, classes interleaved."""
    rng = np.random.default_rng(spec.seed)
    signatures = class_signatures(spec, rng)
    scenes = scene_vectors(spec, rng)
    t_lo = max(1, math.ceil((1 - spec.temporal_jitter) * spec.T))
    t_hi = max(t_lo, math.floor((1 + spec.temporal_jitter) * spec.T))
    groups = []
    for _ in range(spec.samples_per_class):
        for label in range(spec.num_classes):
            scene = scenes[rng.integers(spec.num_scenes)]
            action = _volume(scene, spec.T, spec, rng)
            bt, bh, bw = _block(spec, spec.T, rng)
            action[bt, bh, bw] += signatures[label]
            mask = np.zeros((spec.T, spec.H, spec.W))
            mask[bt, bh, bw] = 1.0
            conjugates = []
            for _ in range(spec.conjugates):
                Tc = int(rng.integers(t_lo, t_hi + 1))
                conj = _volume(scene, Tc, spec, rng)
                if spec.conjugate_leak > 0:
                    ct, ch, cw = _block(spec, Tc, rng)
                    conj[ct, ch, cw] += spec.conjugate_leak * signatures[label]
                conjugates.append(conj)
            groups.append(ConjugateGroup(label, action, conjugates, mask))
    return groups
