"""Randomised gradient and oracle checks shared by ``selftest`` and the test-suite."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .joints import derive_joints, label_heatmaps, soft_joints
from .loss import GradCheckReport, LossConfig, grad_check, parsing_loss, structure_loss
from .raster_io import one_hot
from .taxonomy import PartTaxonomy, flat_taxonomy, lip_taxonomy

GRAD_CLASS_COUNTS = (3, 5, 20)


def taxonomy_for(num_classes: int) -> PartTaxonomy:
    """LIP for 20 classes, otherwise a flat taxonomy with consecutive left/right pairs."""
    if num_classes == 20:
        return lip_taxonomy()
    pairs = [(c, c + 1) for c in range(1, num_classes - 1, 2)]
    return flat_taxonomy(num_classes, pairs)


@dataclass
class CheckCase:
    kind: str
    num_classes: int
    report: GradCheckReport


def _instance(rng, num_classes, size=8):
    gt = rng.integers(0, num_classes, (size, size))
    gt[rng.random((size, size)) < 0.05] = 255
    if (gt == 255).all():
        gt[0, 0] = 0
    logits = rng.normal(0.0, 1.5, (size, size, num_classes))
    return gt, logits


def parsing_gradchecks(n: int = 100, seed: int = 0, tolerance: float = 1e-5) -> list[CheckCase]:
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        c = GRAD_CLASS_COUNTS[i % len(GRAD_CLASS_COUNTS)]
        gt, z = _instance(rng, c)
        rep = grad_check(
            lambda x: parsing_loss(x, gt),
            z,
            step=1e-3,
            tolerance=tolerance,
            value=lambda x: parsing_loss(x, gt, with_grad=False)[0],
        )
        out.append(CheckCase("parsing", c, rep))
    return out


def soft_structure_gradchecks(n: int = 100, seed: int = 1, tolerance: float = 1e-3) -> list[CheckCase]:
    rng = np.random.default_rng(seed)
    cfg = LossConfig(mode="soft")
    out = []
    for i in range(n):
        c = GRAD_CLASS_COUNTS[i % len(GRAD_CLASS_COUNTS)]
        t = taxonomy_for(c)
        gt, z = _instance(rng, c)
        hm = label_heatmaps(gt, t, cfg.sigma)

        def f(x):
            r = structure_loss(x, gt, t, cfg, gt_heatmaps=hm)
            return r.l_structure, r.grad_logits

        def value(x):
            return structure_loss(x, gt, t, cfg, with_grad=False, gt_heatmaps=hm).l_structure

        out.append(CheckCase("soft-structure", c, grad_check(f, z, step=1e-4, tolerance=tolerance, value=value)))
    return out


def one_hot_collapse_failures(n: int = 500, seed: int = 2, atol: float = 1e-9) -> list[str]:
    rng = np.random.default_rng(seed)
    failures = []
    for i in range(n):
        c = GRAD_CLASS_COUNTS[i % len(GRAD_CLASS_COUNTS)]
        t = taxonomy_for(c)
        h, w = rng.integers(4, 33, 2)
        labels = rng.integers(0, c, (h, w))
        # sparse maps exercise absent joints
        labels[rng.random((h, w)) < rng.random()] = 0
        hard = derive_joints(labels, t)
        soft = soft_joints(one_hot(labels, c), t)
        for a, b in zip(hard, soft):
            if a.present != b.present:
                failures.append(f"map {i}: joint {a.name} presence {a.present} vs {b.present}")
            elif a.present and max(abs(a.center[0] - b.center[0]), abs(a.center[1] - b.center[1])) > atol:
                failures.append(f"map {i}: joint {a.name} center {a.center} vs {b.center}")
    return failures
