"""Pseudo pose joints from part-label maps.

Each taxonomy joint group is merged into a region whose centroid becomes a
joint; joints are rendered as unnormalised Gaussian heatmaps and compared with
a halved mean squared heatmap distance. Hard joints come from label maps, soft
joints from per-pixel class probabilities (differentiable in the probabilities).
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import ParsingError
from .taxonomy import IGNORE_ID, PartTaxonomy, check_labels

DEFAULT_PRESENCE_THRESHOLD = 1e-4


@dataclass(frozen=True)
class Joint:
    name: str
    present: bool
    center: tuple[float, float] | None = None  # (row, col)


@dataclass(frozen=True)
class JointHeatmapSet:
    joints: tuple[Joint, ...]
    heatmaps: np.ndarray  # (N, H, W)
    sigma: float

    @property
    def n(self) -> int:
        return len(self.joints)


def default_sigma(shape: Sequence[int]) -> float:
    return max(shape[0], shape[1]) / 16.0


def group_matrix(t: PartTaxonomy) -> np.ndarray:
    """(C, N) 0/1 matrix; column k marks members of joint group k."""
    m = np.zeros((t.num_classes, t.num_joints))
    for k, (_, members) in enumerate(t.joint_groups):
        m[list(members), k] = 1.0
    return m


def derive_joints(labels: np.ndarray, t: PartTaxonomy) -> list[Joint]:
    labels = np.asarray(labels)
    check_labels(labels, t)
    joints = []
    for name, members in t.joint_groups:
        lut = np.zeros(256, dtype=bool)
        lut[list(members)] = True
        rows, cols = np.nonzero(lut[labels.astype(np.int64)])
        if rows.size == 0:
            joints.append(Joint(name, False))
        else:
            joints.append(Joint(name, True, (float(rows.mean()), float(cols.mean()))))
    return joints


def _coords(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    return np.arange(h, dtype=float)[:, None], np.arange(w, dtype=float)[None, :]


def soft_centroids(p: np.ndarray, t: PartTaxonomy, presence_threshold: float = DEFAULT_PRESENCE_THRESHOLD):
    """Group masses, soft centroids and presence flags of a (H, W, C) probability map."""
    h, w, _ = p.shape
    q = p @ group_matrix(t)  # (H, W, N)
    mass = q.sum(axis=(0, 1))
    rr, cc = _coords(h, w)
    present = mass >= presence_threshold * h * w
    safe = np.where(mass > 0, mass, 1.0)
    rbar = (q * rr[..., None]).sum(axis=(0, 1)) / safe
    cbar = (q * cc[..., None]).sum(axis=(0, 1)) / safe
    return q, mass, np.stack([rbar, cbar], axis=1), present


def soft_joints(
    p: np.ndarray, t: PartTaxonomy, presence_threshold: float = DEFAULT_PRESENCE_THRESHOLD
) -> list[Joint]:
    _, _, centers, present = soft_centroids(np.asarray(p, dtype=float), t, presence_threshold)
    return [
        Joint(name, bool(on), (float(centers[k, 0]), float(centers[k, 1])) if on else None)
        for k, (name, on) in enumerate(zip(t.joint_names, present))
    ]


def render_heatmap(joint: Joint, shape: Sequence[int], sigma: float) -> np.ndarray:
    if sigma <= 0:
        raise ParsingError(f"sigma must be positive, got {sigma}")
    h, w = shape
    if not joint.present:
        return np.zeros((h, w))
    rr, cc = _coords(h, w)
    r0, c0 = joint.center
    return np.exp(-((rr - r0) ** 2 + (cc - c0) ** 2) / (2.0 * sigma ** 2))


def heatmap_set(joints: Sequence[Joint], shape: Sequence[int], sigma: float | None = None) -> JointHeatmapSet:
    sigma = default_sigma(shape) if sigma is None else sigma
    maps = np.stack([render_heatmap(j, shape, sigma) for j in joints]) if joints else np.zeros((0, *shape))
    return JointHeatmapSet(tuple(joints), maps, sigma)


def label_heatmaps(labels: np.ndarray, t: PartTaxonomy, sigma: float | None = None) -> JointHeatmapSet:
    return heatmap_set(derive_joints(labels, t), np.asarray(labels).shape, sigma)


def joint_loss(pred: JointHeatmapSet, gt: JointHeatmapSet) -> float:
    if pred.heatmaps.shape != gt.heatmaps.shape:
        raise ParsingError(f"heatmap sets differ: {pred.heatmaps.shape} vs {gt.heatmaps.shape}")
    if pred.sigma != gt.sigma:
        raise ParsingError(f"heatmap sets use different sigma ({pred.sigma} vs {gt.sigma})")
    n = pred.heatmaps.shape[0]
    if n == 0:
        raise ParsingError("joint loss needs at least one joint")
    diff = pred.heatmaps - gt.heatmaps
    return float(np.sum(diff * diff) / (2.0 * n))


def soft_joint_loss(
    p: np.ndarray,
    gt: JointHeatmapSet,
    t: PartTaxonomy,
    presence_threshold: float = DEFAULT_PRESENCE_THRESHOLD,
    with_grad: bool = True,
) -> tuple[float, np.ndarray | None]:
    """Joint loss of soft joints from ``p`` against ``gt``, and its gradient w.r.t. ``p``.

    Presence is a hard switch and contributes no gradient.
    """
    h, w, _ = p.shape
    n = t.num_joints
    if gt.heatmaps.shape != (n, h, w):
        raise ParsingError(f"ground-truth heatmaps {gt.heatmaps.shape} do not match ({n}, {h}, {w})")
    sigma = gt.sigma
    q, mass, centers, present = soft_centroids(p, t, presence_threshold)
    rr, cc = _coords(h, w)
    dr = rr[None] - centers[:, 0, None, None]  # (N, H, W)
    dc = cc[None] - centers[:, 1, None, None]
    maps = np.exp(-(dr ** 2 + dc ** 2) / (2.0 * sigma ** 2)) * present[:, None, None]
    diff = maps - gt.heatmaps
    loss = float(np.sum(diff * diff) / (2.0 * n))
    if not with_grad:
        return loss, None

    dmaps = diff / n
    common = dmaps * maps / sigma ** 2
    g_r = (common * dr).sum(axis=(1, 2))
    g_c = (common * dc).sum(axis=(1, 2))
    safe = np.where(mass > 0, mass, 1.0)
    # d centroid / d q(x) = (coord(x) - centroid) / mass
    dq = (g_r[:, None, None] * dr + g_c[:, None, None] * dc) / safe[:, None, None]
    dq *= present[:, None, None]
    grad_p = np.transpose(dq, (1, 2, 0)) @ group_matrix(t).T
    return loss, grad_p


# -- dump format --------------------------------------------------------------

def format_joints(joints: Sequence[Joint]) -> str:
    lines = []
    for j in joints:
        if j.present:
            lines.append(f"{j.name} 1 {j.center[0]:.6f} {j.center[1]:.6f}")
        else:
            lines.append(f"{j.name} 0 - -")
    return "\n".join(lines) + "\n"


def parse_joints(text: str) -> list[Joint]:
    joints = []
    for line in text.splitlines():
        if not line.strip():
            continue
        name, present, r, c = line.split()
        if present == "1":
            joints.append(Joint(name, True, (float(r), float(c))))
        else:
            joints.append(Joint(name, False))
    return joints


def write_heatmap(heatmap: np.ndarray, path: str | Path) -> None:
    """16-bit raster, value = round(65535 * h)."""
    data = np.rint(np.clip(heatmap, 0.0, 1.0) * 65535).astype(np.uint16)
    Image.fromarray(data).save(path, format="PNG")


def read_heatmap(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im, dtype=np.float64) / 65535.0
