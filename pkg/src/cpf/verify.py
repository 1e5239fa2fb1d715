"""Gradient verification harness: every loss path against central differences.

Random instances are generated directly (uniform features in [-1, 1]) so
the harness is independent of the synthetic dataset generator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import (
    CompositionSpace,
    CpfParams,
    FeatureBundle,
    TextEmbeddings,
    forward_losses,
)
from .tensor import grad_check

LOSS_PATHS = ("l_obj", "l_att", "l_com", "l_total")

DEFAULT_DIMS = dict(d=4, D=6, T=3, B=3, M=3, N=2)


@dataclass
class GradCheckResult:
    path: str
    seed: int
    max_error: float


def random_instance(
    seed: int,
    d: int = 4,
    D: int = 6,
    T: int = 3,
    B: int = 3,
    M: int = 3,
    N: int = 2,
    batch: int = 2,
    variant: str = "full",
):
    """A random (batch, text, params, space) tuple with inputs in [-1, 1]."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,)))
    space = CompositionSpace(
        attributes=[f"a{i}" for i in range(M)],
        objects=[f"o{j}" for j in range(N)],
        seen_train=[(i, j) for i in range(M) for j in range(N)],
    )
    text = TextEmbeddings(
        attr_names=list(space.attributes),
        obj_names=list(space.objects),
        attr_vecs=rng.uniform(-1, 1, size=(M, d)),
        obj_vecs=rng.uniform(-1, 1, size=(N, d)),
    ).validate()
    bundles = []
    for k in range(batch):
        bundles.append(
            FeatureBundle(
                image_id=f"gradcheck-{seed}-{k}",
                deep_class=rng.uniform(-1, 1, size=D),
                deep_patches=rng.uniform(-1, 1, size=(T, D)),
                shallow_blocks=[rng.uniform(-1, 1, size=(T, D)) for _ in range(B)],
                shallow_class=[rng.uniform(-1, 1, size=D) for _ in range(B)],
                attr_label=int(rng.integers(M)),
                obj_label=int(rng.integers(N)),
            ).validate()
        )
    params = CpfParams.initialize(visual_dim=D, text_dim=d, n_blocks=B, rng=rng)
    return bundles, text, params, space, variant


def check_all_paths(
    seed: int,
    eps: float = 1e-5,
    variant: str = "full",
    **dims,
) -> list[GradCheckResult]:
    """grad_check every parameter tensor under each loss path for one instance."""
    batch, text, params, space, variant = random_instance(seed, variant=variant, **dims)
    results = []
    for path in LOSS_PATHS:
        worst = 0.0
        for _, tensor in params.named_tensors():

            def loss_of(_x, _path=path):
                losses = forward_losses(batch, text, params, space, variant=variant)
                return getattr(losses, _path)

            worst = max(worst, grad_check(loss_of, tensor, eps))
        results.append(GradCheckResult(path=path, seed=seed, max_error=worst))
    return results


def run_gradcheck(
    seeds: int = 20, eps: float = 1e-5, tolerance: float = 1e-4, variant: str = "full", **dims
) -> tuple[bool, list[GradCheckResult]]:
    """The full harness; returns (all_passed, per-path-per-seed results)."""
    results = []
    for seed in range(seeds):
        results.extend(check_all_paths(seed, eps=eps, variant=variant, **dims))
    return all(r.max_error < tolerance for r in results), results
