"""l-inf bounded feature-space perturbations (FGSM, PGD) and additive Gaussian noise.

All gradients are taken through the eval-mode network so that crafting is
deterministic given the parameters. Inputs are assumed to already lie in the
admissible box ``[-clip, clip]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as M

KINDS = ("none", "fgsm", "pgd", "awgn", "mixed")
FAMILIES = ("fgsm", "pgd", "awgn")


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "none"
    epsilon: float = 0.02
    iterations: int = 10
    sigma: float = 0.03
    clip: float = 3.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"attack kind must be one of {KINDS}, got {self.kind!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.kind in ("pgd", "mixed") and self.iterations < 1:
            raise ValueError("PGD needs iterations >= 1")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")

    def as_kind(self, kind):
        return AttackSpec(kind, self.epsilon, self.iterations, self.sigma, self.clip)


def fgsm(arch, params, x, labels, spec):
    grad = M.grad_input(arch, params, x, labels)
    return np.clip(x + spec.epsilon * np.sign(grad), -spec.clip, spec.clip)


def pgd(arch, params, x, labels, spec, rng, random_start=True):
    eps = spec.epsilon
    adv = x + rng.uniform(-eps, eps, size=x.shape) if random_start else x
    adv = np.clip(np.clip(adv, x - eps, x + eps), -spec.clip, spec.clip)
    step = eps / spec.iterations
    for _ in range(spec.iterations):
        grad = M.grad_input(arch, params, adv, labels)
        adv = adv + step * np.sign(grad)
        # ball first, then the admissible box
        adv = np.clip(np.clip(adv, x - eps, x + eps), -spec.clip, spec.clip)
    return adv


def awgn(x, spec, rng):
    return np.clip(x + spec.sigma * rng.standard_normal(x.shape), -spec.clip, spec.clip)


def perturb(arch, params, x, labels, spec, rng):
    """Apply ``spec`` to a whole batch (kind must be a single family or none)."""
    if spec.kind == "none":
        return x.copy()
    if spec.kind == "fgsm":
        return fgsm(arch, params, x, labels, spec)
    if spec.kind == "pgd":
        return pgd(arch, params, x, labels, spec, rng)
    if spec.kind == "awgn":
        return awgn(x, spec, rng)
    raise ValueError(f"perturb() needs a single family, got {spec.kind!r}")


def assign_families(n, rng):
    """Uniform per-example choice among FGSM / PGD / AWGN."""
    return np.array(FAMILIES)[rng.integers(0, len(FAMILIES), size=n)]


def poison_batch(arch, params, x, labels, spec, rng):
    """Per-example perturbation against ``params``. Labels are never touched."""
    x = np.asarray(x, dtype=np.float64)
    if spec.kind != "mixed":
        return perturb(arch, params, x, labels, spec, rng)
    families = assign_families(len(x), rng)
    out = np.empty_like(x)
    for fam in FAMILIES:
        idx = np.flatnonzero(families == fam)
        if len(idx):
            out[idx] = perturb(arch, params, x[idx], labels[idx], spec.as_kind(fam), rng)
    return out
