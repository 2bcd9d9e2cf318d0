"""Pixel-wise parsing loss, the joint-weighted structure loss, and gradient checks."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Literal

import numpy as np

from .errors import ParsingError
from .joints import (
    DEFAULT_PRESENCE_THRESHOLD,
    derive_joints,
    heatmap_set,
    joint_loss,
    label_heatmaps,
    soft_joint_loss,
)
from .raster_io import softmax
from .taxonomy import IGNORE_ID, PartTaxonomy

Mode = Literal["weight", "soft"]


@dataclass(frozen=True)
class LossConfig:
    """How the joint loss enters the structure loss.

    ``weight`` treats the joint loss (from argmax labels) as a constant
    per-sample weight on the parsing loss; ``soft`` uses soft centroids and
    back-propagates through them. ``sigma=None`` means ``max(H, W) / 16``.
    """

    mode: Mode = "weight"
    sigma: float | None = None
    presence_threshold: float = DEFAULT_PRESENCE_THRESHOLD
    floor: float = 0.0
    ignore_id: int = IGNORE_ID

    def __post_init__(self):
        if self.mode not in ("weight", "soft"):
            raise ParsingError(f"unknown loss mode {self.mode!r}")
        if self.sigma is not None and self.sigma <= 0:
            raise ParsingError("sigma must be positive")
        if self.floor < 0:
            raise ParsingError("floor must be non-negative")


@dataclass
class LossResult:
    l_parsing: float
    l_joint: float
    l_structure: float
    grad_logits: np.ndarray | None = None


def parsing_loss(
    logits: np.ndarray, gt: np.ndarray, ignore_id: int = IGNORE_ID, with_grad: bool = True
) -> tuple[float, np.ndarray | None]:
    """Mean softmax cross-entropy over non-ignored pixels, with its logit gradient."""
    logits = np.asarray(logits, dtype=float)
    gt = np.asarray(gt)
    if logits.ndim != 3 or logits.shape[:2] != gt.shape:
        raise ParsingError(f"logits {logits.shape} do not match labels {gt.shape}")
    valid = gt != ignore_id
    count = int(valid.sum())
    if count == 0:
        raise ParsingError("all pixels are ignored")
    target = np.where(valid, gt, 0).astype(np.int64)
    if target.max() >= logits.shape[2]:
        raise ParsingError("label exceeds the number of logit channels")
    z = logits - logits.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1))
    picked = np.take_along_axis(z, target[..., None], axis=-1)[..., 0]
    nll = logsum - picked
    loss = float(nll[valid].sum() / count)
    if not with_grad:
        return loss, None

    grad = softmax(logits)
    rows, cols = np.nonzero(valid)
    grad[rows, cols, target[rows, cols]] -= 1.0
    grad *= valid[..., None] / count
    return loss, grad


def structure_loss(
    logits: np.ndarray,
    gt: np.ndarray,
    t: PartTaxonomy,
    cfg: LossConfig = LossConfig(),
    with_grad: bool = True,
    gt_heatmaps=None,
) -> LossResult:
    """Joint loss times parsing loss, floored at ``cfg.floor``.

    ``gt_heatmaps`` may carry precomputed ground-truth heatmaps for ``gt``.
    """
    logits = np.asarray(logits, dtype=float)
    if logits.shape[2] != t.num_classes:
        raise ParsingError(f"logits have {logits.shape[2]} channels, taxonomy has {t.num_classes}")
    l_parse, g_parse = parsing_loss(logits, gt, cfg.ignore_id, with_grad)
    sigma = cfg.sigma
    if gt_heatmaps is None:
        gt_heatmaps = label_heatmaps(gt, t, sigma)

    if cfg.mode == "weight":
        pred = logits.argmax(axis=-1)
        pred_set = heatmap_set(derive_joints(pred, t), pred.shape, gt_heatmaps.sigma)
        l_joint = joint_loss(pred_set, gt_heatmaps)
        weight = max(l_joint, cfg.floor)
        grad = weight * g_parse if with_grad else None
        return LossResult(l_parse, l_joint, weight * l_parse, grad)

    p = softmax(logits)
    l_joint, g_p = soft_joint_loss(p, gt_heatmaps, t, cfg.presence_threshold, with_grad)
    weight = max(l_joint, cfg.floor)
    grad = None
    if with_grad:
        grad = weight * g_parse
        if l_joint >= cfg.floor:
            g_joint = p * (g_p - (g_p * p).sum(axis=-1, keepdims=True))
            grad = grad + l_parse * g_joint
    return LossResult(l_parse, l_joint, weight * l_parse, grad)


def batch_structure_loss(results: list[LossResult]) -> float:
    return float(np.mean([r.l_structure for r in results]))


# -- gradient checking --------------------------------------------------------

@dataclass(frozen=True)
class GradCheckReport:
    passed: bool
    max_rel_error: float
    worst_index: tuple[int, ...]
    analytic: float
    numeric: float
    tolerance: float

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (
            f"{status}: max rel error {self.max_rel_error:.3e} at {self.worst_index} "
            f"(analytic {self.analytic:.6e}, numeric {self.numeric:.6e}, tol {self.tolerance:.1e})"
        )


def grad_check(
    f: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x: np.ndarray,
    step: float = 1e-4,
    tolerance: float = 1e-5,
    abs_floor: float = 1e-8,
    value: Callable[[np.ndarray], float] | None = None,
) -> GradCheckReport:
    """Compare ``f``'s analytic gradient with central differences, component by component.

    Relative error per component is ``|a - n| / max(|a|, |n|, abs_floor)``.
    ``value``, when given, is a cheaper scalar-only version of ``f`` used for
    the perturbed evaluations.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=float)
    fx, analytic = f(x)
    if value is None:
        value = lambda y: f(y)[0]
    analytic = np.asarray(analytic, dtype=float)
    if not np.isfinite(fx) or not np.all(np.isfinite(analytic)):
        raise ValueError("non-finite value or gradient at the check point")
    numeric = np.empty_like(x)
    flat = x.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = value(x)
        flat[i] = orig - step
        fm = value(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"non-finite value near component {np.unravel_index(i, x.shape)}")
        num_flat[i] = (fp - fm) / (2.0 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), abs_floor)
    rel = np.abs(analytic - numeric) / denom
    worst = np.unravel_index(int(np.argmax(rel)), x.shape)
    max_rel = float(rel[worst])
    return GradCheckReport(
        passed=max_rel < tolerance,
        max_rel_error=max_rel,
        worst_index=tuple(int(i) for i in worst),
        analytic=float(analytic[worst]),
        numeric=float(numeric[worst]),
        tolerance=tolerance,
    )
