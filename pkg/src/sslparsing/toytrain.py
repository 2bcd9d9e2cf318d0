"""A tiny numpy convolutional parser and the two-stage training protocol.

Stage 1 fits the pixel-wise parsing loss; stage 2 continues from the stage-1
weights on the structure loss. Both stages use SGD with momentum and L2
weight decay folded into the gradient.
"""
from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import ParsingError, TrainingDiverged
from .joints import label_heatmaps
from .loss import LossConfig, parsing_loss, structure_loss
from .metrics import ConfusionMatrix, accumulate_confusion, compute_metrics
from .raster_io import DatasetIndex, read_image, read_label_map
from .taxonomy import PartTaxonomy, lip_taxonomy

CHECKPOINT_MAGIC = b"SSLPCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class ToyModel:
    weights: list[np.ndarray]  # each (9 * c_in, c_out)
    biases: list[np.ndarray]
    dilations: tuple[int, ...]
    seed: int = 0

    @property
    def dtype(self):
        return self.weights[0].dtype

    @property
    def num_classes(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def param_count(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def params(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def copy(self) -> "ToyModel":
        return ToyModel([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.dilations, self.seed)


def init_model(
    seed: int,
    widths: Sequence[int] = (3, 20, 20, 20, 20),
    dilations: Sequence[int] | None = None,
    dtype=np.float32,
) -> ToyModel:
    """3x3 conv stack ``widths[0] -> ... -> widths[-1]`` (input channels first, classes last).

    Weights are uniform in ``+-sqrt(6 / fan_in)``, biases zero.
    """
    widths = list(widths)
    if len(widths) < 2:
        raise ParsingError("widths needs an input and an output width")
    n_layers = len(widths) - 1
    if dilations is None:
        dilations = (1, 2, 4, 8, 1, 1)[:n_layers] if n_layers <= 6 else (1,) * n_layers
    if len(dilations) != n_layers:
        raise ParsingError("one dilation per layer expected")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for c_in, c_out in zip(widths[:-1], widths[1:]):
        fan_in = 9 * c_in
        bound = math.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, (fan_in, c_out)).astype(dtype))
        biases.append(np.zeros(c_out, dtype=dtype))
    return ToyModel(weights, biases, tuple(int(d) for d in dilations), seed)


def _taps(d: int, h: int, w: int):
    return [(i * d, j * d) for i in range(3) for j in range(3)]


def _conv(x: np.ndarray, w: np.ndarray, b: np.ndarray, d: int):
    """3x3 'same' convolution with dilation ``d``; returns output and padded input."""
    n, h, wd, c = x.shape
    xp = np.pad(x, ((0, 0), (d, d), (d, d), (0, 0)))
    out = np.empty((n, h, wd, w.shape[1]), dtype=x.dtype)
    out[:] = b
    for k, (r, q) in enumerate(_taps(d, h, wd)):
        out += xp[:, r:r + h, q:q + wd, :] @ w[k * c:(k + 1) * c]
    return out, xp


def _conv_backward(xp: np.ndarray, w: np.ndarray, g: np.ndarray, d: int, need_input: bool):
    n, h, wd, c_out = g.shape
    c = w.shape[0] // 9
    g2 = g.reshape(-1, c_out)
    gw = np.empty_like(w)
    dxp = np.zeros_like(xp) if need_input else None
    for k, (r, q) in enumerate(_taps(d, h, wd)):
        view = xp[:, r:r + h, q:q + wd, :]
        gw[k * c:(k + 1) * c] = view.reshape(-1, c).T @ g2
        if need_input:
            dxp[:, r:r + h, q:q + wd, :] += g @ w[k * c:(k + 1) * c].T
    dx = dxp[:, d:d + h, d:d + wd, :] if need_input else None
    return gw, g2.sum(axis=0), dx


def preprocess(image: np.ndarray, dtype=np.float32) -> np.ndarray:
    return np.asarray(image, dtype=dtype) / 255.0


def _forward(model: ToyModel, x: np.ndarray, keep: bool = False):
    cache = []
    a = x.astype(model.dtype, copy=False)
    last = len(model.weights) - 1
    for k, (w, b, d) in enumerate(zip(model.weights, model.biases, model.dilations)):
        z, xp = _conv(a, w, b, d)
        if keep:
            cache.append((xp, z))
        a = z if k == last else np.maximum(z, 0.0)
    return a, cache


def forward(model: ToyModel, image: np.ndarray) -> np.ndarray:
    """Logits (H, W, C) for one RGB image (8-bit, or floats already scaled to [0, 1])."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] * 9 != model.weights[0].shape[0]:
        raise ParsingError(f"image shape {image.shape} does not fit the model input")
    x = preprocess(image, model.dtype) if image.dtype == np.uint8 else image
    return _forward(model, x[None])[0][0]


def forward_backward(model: ToyModel, batch: np.ndarray, grad_fn):
    """Run the batch, ask ``grad_fn(logits)`` for d(loss)/d(logits), back-propagate.

    Returns ``(aux, grads)`` where ``aux`` is whatever ``grad_fn`` returned alongside.
    """
    logits, cache = _forward(model, batch, keep=True)
    aux, g = grad_fn(logits)
    g = np.asarray(g, dtype=model.dtype)
    n_layers = len(model.weights)
    gw, gb = [None] * n_layers, [None] * n_layers
    for k in range(n_layers - 1, -1, -1):
        xp, _ = cache[k]
        gw[k], gb[k], dx = _conv_backward(xp, model.weights[k], g, model.dilations[k], k > 0)
        if k > 0:
            g = dx * (cache[k - 1][1] > 0)
    return aux, [*gw, *gb]


class SGD:
    """Momentum SGD: ``v = mu * v + (g + wd * w)``, ``w -= lr * v``."""

    def __init__(self, params: list[np.ndarray], lr: float, momentum: float, weight_decay: float):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p) for p in params]

    def step(self, grads: list[np.ndarray]) -> None:
        for p, v, g in zip(self.params, self.velocity, grads):
            v *= self.momentum
            v += g + self.weight_decay * p
            p -= self.lr * v


# -- diagnostics --------------------------------------------------------------

class LRSwap(NamedTuple):
    rate: float
    swapped: int
    paired: int


def evaluate_lr_swap(pred: np.ndarray, gt: np.ndarray, t: PartTaxonomy) -> LRSwap:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ParsingError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    mirror = t.mirror_table()
    paired_ids = [c for pair in t.lr_pairs for c in pair]
    on_pair = np.isin(gt, paired_ids)
    paired = int(on_pair.sum())
    if paired == 0:
        return LRSwap(0.0, 0, 0)
    swapped = int((pred[on_pair] == mirror[gt[on_pair].astype(np.int64)]).sum())
    return LRSwap(swapped / paired, swapped, paired)


# -- training -----------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    stage1_epochs: int = 8
    stage2_epochs: int = 4
    stage2_lr: float | None = None  # default 0.1 * learning_rate
    batch_size: int = 10
    momentum: float = 0.9
    weight_decay: float = 0.0005
    loss: LossConfig = LossConfig()
    seed: int = 0
    flip: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ParsingError("batch_size must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ParsingError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ParsingError("weight_decay must be non-negative")
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ParsingError("epoch counts must be non-negative")

    @property
    def fine_tune_lr(self) -> float:
        return 0.1 * self.learning_rate if self.stage2_lr is None else self.stage2_lr

    def snapshot(self) -> dict:
        d = asdict(self)
        d["stage2_lr"] = self.fine_tune_lr
        return d


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def to_jsonl(self) -> str:
        lines = [json.dumps({"type": "config", **self.config}, sort_keys=True)]
        lines += [json.dumps({"type": "epoch", **r}, sort_keys=True) for r in self.records]
        lines.append(json.dumps({"type": "summary", "wall_time": round(self.wall_time, 3)}))
        return "\n".join(lines) + "\n"


@dataclass
class LoadedSet:
    images: np.ndarray  # (n, H, W, 3) floats in [0, 1]
    labels: np.ndarray  # (n, H, W) uint8
    ids: list[str]


def load_set(index: DatasetIndex, t: PartTaxonomy) -> LoadedSet:
    images, labels, ids = [], [], []
    for r in index.records:
        if r.label_path is None:
            raise ParsingError(f"{r.image_id}: training/validation records need labels")
        images.append(preprocess(read_image(r.image_path)))
        labels.append(read_label_map(r.label_path, t.num_classes))
        ids.append(r.image_id)
    if not images:
        return LoadedSet(np.zeros((0, 1, 1, 3)), np.zeros((0, 1, 1), np.uint8), [])
    return LoadedSet(np.stack(images), np.stack(labels), ids)


def predict_labels(model: ToyModel, images: np.ndarray, batch_size: int = 25) -> np.ndarray:
    out = []
    for i in range(0, len(images), batch_size):
        logits, _ = _forward(model, images[i:i + batch_size])
        out.append(logits.argmax(axis=-1).astype(np.uint8))
    return np.concatenate(out) if out else np.zeros((0,) + images.shape[1:3], np.uint8)


def evaluate_model(model: ToyModel, data: LoadedSet, t: PartTaxonomy) -> dict:
    preds = predict_labels(model, data.images)
    cm = ConfusionMatrix.zeros(t.num_classes)
    swapped = paired = 0
    for p, g in zip(preds, data.labels):
        cm = cm + accumulate_confusion(g, p, t.num_classes)
        s = evaluate_lr_swap(p, g, t)
        swapped += s.swapped
        paired += s.paired
    report = compute_metrics(cm)
    return {
        "mean_iou": report.mean_iou,
        "overall_accuracy": report.overall_accuracy,
        "swap_rate": swapped / paired if paired else 0.0,
        "paired_pixels": paired,
    }


def _flip(images: np.ndarray, labels: np.ndarray, t: PartTaxonomy):
    mirror = t.mirror_table().astype(np.uint8)
    return images[:, :, ::-1].copy(), mirror[labels[:, :, ::-1]]


def _run_stage(model, data, t, cfg, stage, epochs, lr, rng, val, log, progress, first_epoch=1):
    opt = SGD(model.params(), lr, cfg.momentum, cfg.weight_decay)
    heatmaps = [label_heatmaps(lab, t, cfg.loss.sigma) for lab in data.labels]
    n = len(data.ids)
    for epoch in range(first_epoch, first_epoch + epochs):
        order = rng.permutation(n)
        parse_vals, joint_vals, struct_vals = [], [], []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            images, labels = data.images[idx], data.labels[idx]
            flipped = cfg.flip and rng.random() < 0.5
            if flipped:
                images, labels = _flip(images, labels, t)
            hm = [label_heatmaps(lab, t, cfg.loss.sigma) for lab in labels] if flipped else [heatmaps[i] for i in idx]

            def grad_fn(logits):
                grads = np.empty_like(logits)
                stats = []
                for k in range(len(idx)):
                    res = structure_loss(logits[k], labels[k], t, cfg.loss, gt_heatmaps=hm[k], with_grad=stage == 2)
                    if stage == 1:
                        _, grads[k] = parsing_loss(logits[k], labels[k], cfg.loss.ignore_id)
                    else:
                        grads[k] = res.grad_logits
                    stats.append(res)
                return stats, grads / len(idx)

            stats, grads = forward_backward(model, images, grad_fn)
            for res in stats:
                parse_vals.append(res.l_parsing)
                joint_vals.append(res.l_joint)
                struct_vals.append(res.l_structure)
            objective = struct_vals[-1] if stage == 2 else parse_vals[-1]
            if not np.isfinite(objective) or not all(np.isfinite(g).all() for g in grads):
                raise TrainingDiverged(stage, epoch, float(objective))
            opt.step(grads)
        record = {
            "stage": stage,
            "epoch": epoch,
            "lr": lr,
            "l_parsing": math.fsum(parse_vals) / n,
            "l_joint": math.fsum(joint_vals) / n,
            "l_structure": math.fsum(struct_vals) / n,
        }
        if not np.isfinite(record["l_parsing"] if stage == 1 else record["l_structure"]):
            raise TrainingDiverged(stage, epoch, record["l_structure"])
        if val is not None and len(val.ids):
            v = evaluate_model(model, val, t)
            record["val_mean_iou"] = v["mean_iou"]
            record["val_swap_rate"] = v["swap_rate"]
        log.records.append(record)
        if progress:
            progress(record)


def train(
    model: ToyModel,
    train_index: DatasetIndex | LoadedSet,
    val_index: DatasetIndex | LoadedSet | None,
    cfg: TrainConfig = TrainConfig(),
    t: PartTaxonomy | None = None,
    progress: Callable[[dict], None] | None = None,
) -> tuple[ToyModel, TrainLog]:
    """Two-stage training; returns a trained copy of ``model`` and the epoch log.

    Shuffling and flip decisions draw from a generator seeded by ``cfg.seed``,
    so a run is reproducible on a single thread.
    """
    t = t or lip_taxonomy()
    if model.num_classes != t.num_classes:
        raise ParsingError(f"model emits {model.num_classes} classes, taxonomy has {t.num_classes}")
    data = train_index if isinstance(train_index, LoadedSet) else load_set(train_index, t)
    if val_index is None or isinstance(val_index, LoadedSet):
        val = val_index
    else:
        val = load_set(val_index, t)
    if not data.ids:
        raise ParsingError("training set is empty")
    start = time.perf_counter()
    model = model.copy()
    log = TrainLog(config=cfg.snapshot())
    rng = np.random.default_rng(cfg.seed)
    _run_stage(model, data, t, cfg, 1, cfg.stage1_epochs, cfg.learning_rate, rng, val, log, progress)
    _run_stage(model, data, t, cfg, 2, cfg.stage2_epochs, cfg.fine_tune_lr, rng, val, log, progress)
    log.wall_time = time.perf_counter() - start
    return model, log


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(model: ToyModel, path: str | Path, config: dict | None = None) -> None:
    """Binary container: magic, version, JSON header, then float64 tensors in row-major order."""
    header = json.dumps(
        {
            "dilations": list(model.dilations),
            "dtype": np.dtype(model.dtype).name,
            "seed": model.seed,
            "config": config or {},
            "tensors": [list(p.shape) for p in model.params()],
        },
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for p in model.params():
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[ToyModel, dict]:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ParsingError(f"{path}: not a model checkpoint")
    off = len(CHECKPOINT_MAGIC)
    version, hlen = struct.unpack_from("<II", data, off)
    if version != CHECKPOINT_VERSION:
        raise ParsingError(f"{path}: unsupported checkpoint version {version}")
    off += 8
    header = json.loads(data[off:off + hlen])
    off += hlen
    tensors = []
    for shape in header["tensors"]:
        count = int(np.prod(shape))
        raw = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape)
        tensors.append(raw.astype(header.get("dtype", "float64")))
        off += 8 * count
    if off != len(data):
        raise ParsingError(f"{path}: trailing bytes in checkpoint")
    half = len(tensors) // 2
    model = ToyModel(tensors[:half], tensors[half:], tuple(header["dilations"]), header["seed"])
    return model, header["config"]
