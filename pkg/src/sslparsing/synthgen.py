"""Procedural stick-figure people with part labels and challenge-factor metadata.

Figures are drawn from capsules and discs over a cluttered background. In a
front view the person's left side lies at smaller image columns; a back view
mirrors that. Left/right part colours sit close together so that a small
pixel classifier confuses the two sides now and then.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ParsingError
from .raster_io import Record, SampleMeta, format_manifest, write_image, write_label_map
from .taxonomy import LIP_CLASSES

_ID = {name: i for i, name in enumerate(LIP_CLASSES)}

DEFAULT_CLASSES = tuple(
    _ID[n]
    for n in (
        "background", "hair", "upper-clothes", "pants", "face",
        "left-arm", "right-arm", "left-leg", "right-leg", "left-shoe", "right-shoe",
    )
)

BASE_COLORS = {
    _ID["background"]: (95, 95, 95),
    _ID["hat"]: (120, 20, 120),
    _ID["hair"]: (60, 40, 20),
    _ID["face"]: (230, 190, 160),
    _ID["upper-clothes"]: (200, 45, 45),
    _ID["pants"]: (40, 60, 180),
    _ID["left-arm"]: (222, 168, 118),
    _ID["right-arm"]: (200, 186, 138),
    _ID["left-leg"]: (160, 118, 86),
    _ID["right-leg"]: (138, 136, 106),
    _ID["left-shoe"]: (30, 165, 60),
    _ID["right-shoe"]: (70, 150, 35),
}


@dataclass(frozen=True)
class FigureConfig:
    image_size: int = 64
    classes: tuple[int, ...] = DEFAULT_CLASSES
    arm_angle: tuple[float, float] = (15.0, 75.0)
    leg_angle: tuple[float, float] = (0.0, 22.0)
    occlusion_prob: float = 0.3
    back_view_prob: float = 0.3
    head_missed_prob: float = 0.1
    upper_body_prob: float = 0.15
    noise: float = 12.0
    color_jitter: float = 14.0
    clutter_blobs: int = 6
    part_clutter_prob: float = 0.15

    def __post_init__(self):
        for name in ("occlusion_prob", "back_view_prob", "head_missed_prob", "upper_body_prob", "part_clutter_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ParsingError(f"{name} must lie in [0, 1], got {v}")
        if self.head_missed_prob + self.upper_body_prob > 1.0:
            raise ParsingError("head_missed_prob + upper_body_prob must not exceed 1")
        if self.image_size < 32:
            raise ParsingError("image_size must be at least 32")
        if self.noise < 0:
            raise ParsingError("noise must be non-negative")

    def to_text(self) -> str:
        lines = ["[figure]"]
        for key, value in asdict(self).items():
            if isinstance(value, (tuple, list)):
                value = " ".join(str(v) for v in value)
            lines.append(f"{key} {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "FigureConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line or line.startswith("["):
                continue
            key, *vals = line.split()
            if key not in types:
                raise ParsingError(f"unknown figure config key {key!r}")
            if key == "classes":
                kw[key] = tuple(int(v) for v in vals)
            elif key.endswith("_angle"):
                kw[key] = tuple(float(v) for v in vals)
            elif key in ("image_size", "clutter_blobs"):
                kw[key] = int(vals[0])
            else:
                kw[key] = float(vals[0])
        return cls(**kw)


def sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _capsule(rr, cc, a, b, radius):
    (ar, ac), (br, bc) = a, b
    dr, dc = br - ar, bc - ac
    denom = dr * dr + dc * dc
    u = np.clip(((rr - ar) * dr + (cc - ac) * dc) / denom, 0.0, 1.0) if denom > 0 else 0.0
    pr, pc = ar + u * dr, ac + u * dc
    return (rr - pr) ** 2 + (cc - pc) ** 2 <= radius ** 2


def _disc(rr, cc, center, radius):
    return (rr - center[0]) ** 2 + (cc - center[1]) ** 2 <= radius ** 2


def generate_figure(seed: int, cfg: FigureConfig = FigureConfig()):
    """Return ``(image, labels, meta)`` for one figure; deterministic in ``(seed, cfg)``."""
    rng = np.random.default_rng(seed)
    n = cfg.image_size
    s = n / 64.0 * rng.uniform(0.85, 1.05)
    rr, cc = np.mgrid[0:n, 0:n].astype(float)
    emit = set(cfg.classes)

    u = rng.random()
    if u < cfg.head_missed_prob:
        extent = "head_missed"
    elif u < cfg.head_missed_prob + cfg.upper_body_prob:
        extent = "upper"
    else:
        extent = "full"
    back = bool(rng.random() < cfg.back_view_prob)
    occluded = bool(rng.random() < cfg.occlusion_prob)
    # side sign of the person's left half in image columns
    left = 1.0 if back else -1.0

    cx = n / 2 + rng.uniform(-6, 6) * n / 64
    top = rng.uniform(-2, 3) * n / 64
    head_c = (top + 10 * s, cx)
    shoulder_r = top + 19 * s
    hip_r = top + 34 * s

    labels = np.zeros((n, n), dtype=np.uint8)

    def paint(mask, name):
        cid = _ID[name]
        if cid in emit:
            labels[mask] = cid

    arm_len, leg_len = 14 * s, 19 * s
    limbs = {}
    for side_name, sign in (("left", left), ("right", -left)):
        ang = np.deg2rad(rng.uniform(*cfg.arm_angle))
        sh = (shoulder_r, cx + sign * 6.5 * s)
        limbs[f"{side_name}-arm"] = (sh, (sh[0] + arm_len * np.cos(ang), sh[1] + sign * arm_len * np.sin(ang)))
        ang = np.deg2rad(rng.uniform(*cfg.leg_angle))
        hp = (hip_r, cx + sign * 3.5 * s)
        foot = (hp[0] + leg_len * np.cos(ang), hp[1] + sign * leg_len * np.sin(ang))
        limbs[f"{side_name}-leg"] = (hp, foot)
        limbs[f"{side_name}-shoe"] = (foot, (foot[0] + 1.5 * s, foot[1] + sign * 2.0 * s))

    if extent != "upper":
        for side_name in ("left", "right"):
            paint(_capsule(rr, cc, *limbs[f"{side_name}-leg"], 2.6 * s), f"{side_name}-leg")
    paint(_capsule(rr, cc, (hip_r - 1 * s, cx - 3 * s), (hip_r + 1 * s, cx + 3 * s), 4.5 * s), "pants")
    paint(_capsule(rr, cc, (shoulder_r, cx), (hip_r - 3 * s, cx), 6.5 * s), "upper-clothes")
    for side_name in ("left", "right"):
        paint(_capsule(rr, cc, *limbs[f"{side_name}-arm"], 2.3 * s), f"{side_name}-arm")
    if extent != "upper":
        for side_name in ("left", "right"):
            paint(_capsule(rr, cc, *limbs[f"{side_name}-shoe"], 2.6 * s), f"{side_name}-shoe")
    if extent != "head_missed":
        paint(_disc(rr, cc, head_c, 5.8 * s), "hair")
        if not back:
            paint(_disc(rr, cc, (head_c[0] + 1.5 * s, head_c[1]), 4.2 * s), "face")

    # colour rendering: clutter background, then per-class colours with jitter
    image = np.empty((n, n, 3))
    image[:] = np.array(BASE_COLORS[0]) + rng.normal(0, 10, 3)
    part_ids = [c for c in BASE_COLORS if c != 0 and c in emit]
    for _ in range(cfg.clutter_blobs):
        if part_ids and rng.random() < cfg.part_clutter_prob:
            color = np.array(BASE_COLORS[part_ids[rng.integers(len(part_ids))]], dtype=float)
        else:
            color = rng.uniform(0, 255, 3)
        center = rng.uniform(0, n, 2)
        radii = rng.uniform(2, 8, 2) * n / 64
        blob = ((rr - center[0]) / radii[0]) ** 2 + ((cc - center[1]) / radii[1]) ** 2 <= 1.0
        image[blob] = color
    illum = rng.normal(0, cfg.color_jitter / 2, 3)
    for cid in np.unique(labels):
        if cid == 0:
            continue
        color = np.array(BASE_COLORS[int(cid)], dtype=float) + illum + rng.normal(0, cfg.color_jitter / 2, 3)
        image[labels == cid] = color

    if occluded:
        body = np.argwhere((labels != 0) & ~np.isin(labels, [_ID[h] for h in ("hat", "hair", "sunglasses", "face")]))
        if len(body):
            r0, c0 = body[rng.integers(len(body))]
            hh, ww = rng.integers(5, 11, 2) * n / 64
            rect = (np.abs(rr - r0) <= hh / 2) & (np.abs(cc - c0) <= ww / 2)
            head = np.isin(labels, [_ID[h] for h in ("hat", "hair", "sunglasses", "face")])
            rect &= ~head
            image[rect] = rng.uniform(0, 255, 3)
            labels[rect] = 0
        else:
            occluded = False

    image += rng.normal(0, cfg.noise, image.shape)
    image = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    return image, labels, SampleMeta(occlusion=occluded, view="back" if back else "front", body_extent=extent)


def generate_dataset(
    seed: int,
    n: int,
    cfg: FigureConfig = FigureConfig(),
    out_dir: str | Path = ".",
    prefix: str = "",
    split: str = "train",
) -> Path:
    """Write ``n`` figures and ``manifest.txt`` under ``out_dir``; returns the manifest path.

    For the test split a label-free ``manifest_public.txt`` is written as well.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(n):
        image, labels, meta = generate_figure(sample_seed(seed, i), cfg)
        name = f"{prefix}{i:05d}.png"
        write_image(image, out / "images" / name)
        write_label_map(labels, out / "labels" / name)
        records.append(Record(out / "images" / name, out / "labels" / name, meta))
    manifest = out / "manifest.txt"
    manifest.write_text(format_manifest(records, out), encoding="utf-8")
    if split == "test":
        public = [Record(r.image_path, None, r.meta) for r in records]
        (out / "manifest_public.txt").write_text(format_manifest(public, out), encoding="utf-8")
    (out / "figure.cfg").write_text(cfg.to_text(), encoding="utf-8")
    return manifest
