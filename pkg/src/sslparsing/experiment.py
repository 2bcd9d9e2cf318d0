"""Desk-scale baseline vs joint-weighted fine-tuning comparison on synthetic figures."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

from .loss import LossConfig
from .raster_io import load_manifest
from .synthgen import FigureConfig, generate_dataset
from .taxonomy import PartTaxonomy, lip_taxonomy
from .toytrain import TrainConfig, evaluate_model, init_model, load_set, train


@dataclass
class SeedOutcome:
    seed: int
    baseline: dict
    ssl: dict
    control: dict | None = None

    @property
    def swap_improved(self) -> bool:
        return self.ssl["swap_rate"] < self.baseline["swap_rate"]

    def miou_kept(self, slack: float = 0.005) -> bool:
        return self.ssl["mean_iou"] >= self.baseline["mean_iou"] - slack


@dataclass
class ExperimentResult:
    outcomes: list[SeedOutcome] = field(default_factory=list)
    wall_time: float = 0.0
    config: dict = field(default_factory=dict)

    def accepted(self, slack: float = 0.005) -> bool:
        return bool(self.outcomes) and all(o.swap_improved and o.miou_kept(slack) for o in self.outcomes)

    def to_json(self) -> str:
        return json.dumps(
            {
                "config": self.config,
                "wall_time": round(self.wall_time, 2),
                "seeds": [
                    {"seed": o.seed, "baseline": o.baseline, "ssl": o.ssl, "control": o.control}
                    for o in self.outcomes
                ],
            },
            indent=2,
            sort_keys=True,
        )


def run_desk_experiment(
    workdir: str | Path,
    seeds: Sequence[int] = (0, 1, 2),
    n_train: int = 500,
    n_val: int = 100,
    data_seed: int = 2017,
    figure: FigureConfig = FigureConfig(image_size=64, occlusion_prob=0.3, back_view_prob=0.3),
    train_cfg: TrainConfig = TrainConfig(stage1_epochs=12, stage2_epochs=6, loss=LossConfig(mode="weight")),
    t: PartTaxonomy | None = None,
    control: bool = False,
    progress: Callable[[str], None] | None = None,
) -> ExperimentResult:
    """Train one stage-1 model per seed, then compare it against its stage-2 fine-tune.

    With ``control`` the stage-1 model is also fine-tuned for the same number of
    epochs on the plain parsing loss, separating the effect of extra epochs from
    the joint weighting.
    """
    t = t or lip_taxonomy()
    start = time.perf_counter()
    workdir = Path(workdir)
    train_manifest = generate_dataset(data_seed, n_train, figure, workdir / "train", prefix="train")
    val_manifest = generate_dataset(data_seed + 1, n_val, figure, workdir / "val", prefix="val", split="val")
    train_set = load_set(load_manifest(train_manifest), t)
    val_set = load_set(load_manifest(val_manifest, split="val"), t)

    result = ExperimentResult(config={"train": train_cfg.snapshot(), "n_train": n_train, "n_val": n_val,
                                      "data_seed": data_seed, "seeds": list(seeds)})
    for seed in seeds:
        cfg = replace(train_cfg, seed=seed)
        stage1_cfg = replace(cfg, stage2_epochs=0)
        model = init_model(seed, (3, 20, 20, 20, t.num_classes))
        base_model, _ = train(model, train_set, None, stage1_cfg, t)
        baseline = evaluate_model(base_model, val_set, t)
        ssl_cfg = replace(cfg, stage1_epochs=0, stage2_lr=cfg.fine_tune_lr)
        ssl_model, _ = train(base_model, train_set, None, ssl_cfg, t)
        ssl = evaluate_model(ssl_model, val_set, t)
        ctrl = None
        if control:
            ctrl_cfg = replace(cfg, learning_rate=cfg.fine_tune_lr, stage1_epochs=cfg.stage2_epochs, stage2_epochs=0)
            ctrl_model, _ = train(base_model, train_set, None, ctrl_cfg, t)
            ctrl = evaluate_model(ctrl_model, val_set, t)
        outcome = SeedOutcome(seed, baseline, ssl, ctrl)
        result.outcomes.append(outcome)
        if progress:
            progress(
                f"seed {seed}: baseline mIoU {baseline['mean_iou']:.4f} swap {baseline['swap_rate']:.4f} | "
                f"ssl mIoU {ssl['mean_iou']:.4f} swap {ssl['swap_rate']:.4f}"
                + (f" | control mIoU {ctrl['mean_iou']:.4f} swap {ctrl['swap_rate']:.4f}" if ctrl else "")
            )
    result.wall_time = time.perf_counter() - start
    return result
