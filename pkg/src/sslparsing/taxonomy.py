"""Part-label vocabularies, left/right pairings and label-to-joint merge tables."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import TaxonomyError

IGNORE_ID = 255

LIP_CLASSES = (
    "background", "hat", "hair", "glove", "sunglasses",
    "upper-clothes", "dress", "coat", "socks", "pants",
    "jumpsuits", "scarf", "skirt", "face", "left-arm",
    "right-arm", "left-leg", "right-leg", "left-shoe", "right-shoe",
)

# Joint groups whose members must never overlap (one body side each).
SIDE_JOINTS = ("RA", "LA", "RL", "LL", "RS", "LS")


@dataclass(frozen=True)
class PartTaxonomy:
    classes: tuple[tuple[int, str], ...]
    background_id: int
    lr_pairs: tuple[tuple[int, int], ...]
    joint_groups: tuple[tuple[str, frozenset[int]], ...]

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def joint_names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.joint_groups)

    @property
    def num_joints(self) -> int:
        return len(self.joint_groups)

    def class_id(self, name: str) -> int:
        for cid, cname in self.classes:
            if cname == name:
                return cid
        raise KeyError(name)

    def class_name(self, cid: int) -> str:
        for i, cname in self.classes:
            if i == cid:
                return cname
        raise KeyError(cid)

    def group(self, joint_name: str) -> frozenset[int]:
        for name, members in self.joint_groups:
            if name == joint_name:
                return members
        raise TaxonomyError(f"unknown joint group {joint_name!r}")

    def mirror_table(self) -> np.ndarray:
        """Lookup table mapping every class id to its left/right mirror (identity if unpaired)."""
        table = np.arange(max(self.num_classes, 256), dtype=np.int64)
        for left, right in self.lr_pairs:
            table[left] = right
            table[right] = left
        return table

    def permuted(self, perm: Sequence[int]) -> "PartTaxonomy":
        """Relabel every class id ``c`` as ``perm[c]``."""
        p = list(perm)
        classes = tuple(sorted((p[c], n) for c, n in self.classes))
        return PartTaxonomy(
            classes=classes,
            background_id=p[self.background_id],
            lr_pairs=tuple((p[a], p[b]) for a, b in self.lr_pairs),
            joint_groups=tuple((n, frozenset(p[m] for m in g)) for n, g in self.joint_groups),
        )


def lip_taxonomy() -> PartTaxonomy:
    """The 20-class LIP vocabulary with the nine head/torso/limb joint groups."""
    ids = {name: i for i, name in enumerate(LIP_CLASSES)}

    def members(*names: str) -> frozenset[int]:
        return frozenset(ids[n] for n in names)

    groups = (
        ("H", members("hat", "hair", "sunglasses", "face")),
        ("U", members("upper-clothes", "coat", "scarf", "dress", "jumpsuits")),
        ("L", members("pants", "skirt", "dress", "jumpsuits")),
        ("RA", members("right-arm")),
        ("LA", members("left-arm")),
        ("RL", members("right-leg")),
        ("LL", members("left-leg")),
        ("RS", members("right-shoe")),
        ("LS", members("left-shoe")),
    )
    pairs = (
        (ids["left-arm"], ids["right-arm"]),
        (ids["left-leg"], ids["right-leg"]),
        (ids["left-shoe"], ids["right-shoe"]),
    )
    return PartTaxonomy(
        classes=tuple(enumerate(LIP_CLASSES)),
        background_id=0,
        lr_pairs=pairs,
        joint_groups=groups,
    )


def flat_taxonomy(num_classes: int, pairs: Iterable[tuple[int, int]] = ()) -> PartTaxonomy:
    """Background 0 plus one singleton joint group per foreground class.

    Handy for small synthetic problems where the LIP vocabulary is too big.
    """
    if num_classes < 2:
        raise TaxonomyError("need at least one foreground class")
    classes = tuple((i, "background" if i == 0 else f"part{i}") for i in range(num_classes))
    groups = tuple((f"J{i}", frozenset({i})) for i in range(1, num_classes))
    return PartTaxonomy(classes, 0, tuple(pairs), groups)


def validate_taxonomy(t: PartTaxonomy) -> list[str]:
    problems: list[str] = []
    ids = [cid for cid, _ in t.classes]
    seen: set[int] = set()
    for cid in ids:
        if cid in seen:
            problems.append(f"duplicate class id {cid}")
        seen.add(cid)
    if sorted(seen) != list(range(len(seen))):
        problems.append(f"class ids are not contiguous from 0: {sorted(seen)}")
    valid = seen
    if t.background_id not in valid:
        problems.append(f"background id {t.background_id} is not a class id")
    foreground = valid - {t.background_id}

    for left, right in t.lr_pairs:
        for cid in (left, right):
            if cid not in foreground:
                problems.append(f"pair ({left}, {right}) uses invalid or background id {cid}")
        if left == right:
            problems.append(f"pair ({left}, {right}) pairs a class with itself")

    names_seen: set[str] = set()
    for name, group in t.joint_groups:
        if name in names_seen:
            problems.append(f"duplicate joint group name {name!r}")
        names_seen.add(name)
        if not group:
            problems.append(f"joint group {name!r} is empty")
        bad = sorted(c for c in group if c not in foreground)
        if bad:
            problems.append(f"joint group {name!r} has invalid or background ids {bad}")

    side = [(n, g) for n, g in t.joint_groups if n in SIDE_JOINTS]
    for i, (na, ga) in enumerate(side):
        for nb, gb in side[i + 1:]:
            shared = sorted(ga & gb)
            if shared:
                problems.append(f"side joint groups {na!r} and {nb!r} share ids {shared}")
    return problems


def taxonomy_notes(t: PartTaxonomy) -> list[str]:
    """Informational notes about class-to-joint assignments (never violations).

    Reports classes feeding several groups and foreground classes feeding none.
    """
    notes = []
    for cid, name in t.classes:
        if cid == t.background_id:
            continue
        owners = [g for g, members in t.joint_groups if cid in members]
        if len(owners) > 1:
            notes.append(f"informational: class {cid} ({name}) feeds joints {owners}")
        elif not owners:
            notes.append(f"informational: class {cid} ({name}) feeds no joint")
    return notes


def merge_group_mask(labels: np.ndarray, t: PartTaxonomy, joint_name: str) -> np.ndarray:
    """Boolean mask of pixels whose label belongs to joint group ``joint_name``."""
    members = t.group(joint_name)
    labels = np.asarray(labels)
    check_labels(labels, t)
    lut = np.zeros(256, dtype=bool)
    lut[list(members)] = True
    return lut[labels.astype(np.int64)]


def check_labels(labels: np.ndarray, t: PartTaxonomy, ignore_id: int = IGNORE_ID) -> None:
    bad = (labels >= t.num_classes) & (labels != ignore_id)
    bad |= labels < 0
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise TaxonomyError(
            f"label {int(labels[r, c])} at pixel ({r}, {c}) is out of range for {t.num_classes} classes"
        )


# -- config files -------------------------------------------------------------

def parse_taxonomy(text: str) -> PartTaxonomy:
    """Parse the line-oriented taxonomy format.

    Sections are introduced by ``[classes]``, ``[pairs]`` and ``[groups]``.
    The class named ``background`` is the background id (id 0 if none is named so).
    """
    section = None
    classes: list[tuple[int, str]] = []
    pairs: list[tuple[int, int]] = []
    groups: list[tuple[str, frozenset[int]]] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip().lower()
            if section not in ("classes", "pairs", "groups"):
                raise TaxonomyError(f"line {lineno}: unknown section {section!r}")
            continue
        parts = line.split()
        try:
            if section == "classes":
                if len(parts) != 2:
                    raise ValueError
                classes.append((int(parts[0]), parts[1]))
            elif section == "pairs":
                if len(parts) != 2:
                    raise ValueError
                pairs.append((int(parts[0]), int(parts[1])))
            elif section == "groups":
                if len(parts) < 2:
                    raise ValueError
                groups.append((parts[0], frozenset(int(p) for p in parts[1:])))
            else:
                raise TaxonomyError(f"line {lineno}: entry outside any section")
        except ValueError:
            raise TaxonomyError(f"line {lineno}: malformed {section} entry {raw.strip()!r}") from None

    background = next((cid for cid, name in classes if name.lower() == "background"), 0)
    t = PartTaxonomy(tuple(sorted(classes)), background, tuple(pairs), tuple(groups))
    problems = validate_taxonomy(t)
    if problems:
        raise TaxonomyError("invalid taxonomy: " + "; ".join(problems))
    return t


def format_taxonomy(t: PartTaxonomy) -> str:
    lines = ["[classes]"]
    lines += [f"{cid} {name}" for cid, name in t.classes]
    lines.append("[pairs]")
    lines += [f"{a} {b}" for a, b in t.lr_pairs]
    lines.append("[groups]")
    lines += [f"{name} " + " ".join(str(c) for c in sorted(g)) for name, g in t.joint_groups]
    return "\n".join(lines) + "\n"


def load_taxonomy(path: str | Path | None) -> PartTaxonomy:
    if path is None:
        return lip_taxonomy()
    return parse_taxonomy(Path(path).read_text(encoding="utf-8"))
