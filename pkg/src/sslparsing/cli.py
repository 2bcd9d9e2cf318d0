"""Command-line entry point: ``sslparsing <subcommand> [flags]``.

Exit status: 0 success, 1 domain error, 2 usage error. Machine-readable
results go to files or stdout; diagnostics go to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import ParsingError
from .taxonomy import load_taxonomy

log = logging.getLogger("sslparsing")

DEFAULT_SEED = 0


def _common(p: argparse.ArgumentParser, seed: bool = False) -> None:
    p.add_argument("--taxonomy", help="taxonomy config file (default: built-in 20-class LIP)")
    if seed:
        p.add_argument("--seed", type=int, default=DEFAULT_SEED, help=f"random seed (default {DEFAULT_SEED})")


def _loss_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ssl-mode", "--mode", dest="ssl_mode", choices=("weight", "soft"), default="weight",
                   help="joint-loss gradient treatment (default weight)")
    p.add_argument("--sigma", type=float, default=None, help="heatmap sigma in pixels (default max(H,W)/16)")
    p.add_argument("--floor", type=float, default=0.0, help="lower bound on the joint-loss weight (default 0)")


def _loss_config(args):
    from .loss import LossConfig

    return LossConfig(mode=args.ssl_mode, sigma=args.sigma, floor=args.floor)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sslparsing", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("gen", help="generate a synthetic figure dataset")
    _common(p, seed=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, default=50, help="number of samples (default 50)")
    p.add_argument("--split", choices=("train", "val", "test"), default="train", help="split tag (default train)")
    p.add_argument("--prefix", default="", help="file-name prefix for sample ids")
    p.add_argument("--figure-config", help="figure config file overriding the defaults")
    p.add_argument("--size", type=int, default=None, help="image size in pixels (default 64)")
    p.add_argument("--occlusion-prob", type=float, default=None, help="probability of an occluder")
    p.add_argument("--back-view-prob", type=float, default=None, help="probability of a back view")
    p.add_argument("--head-missed-prob", type=float, default=None, help="probability of a missing head")
    p.add_argument("--upper-body-prob", type=float, default=None, help="probability of an upper-body crop")

    p = sub.add_parser("joints", help="derive joints (and heatmaps) from a label map")
    _common(p)
    p.add_argument("--label", required=True, help="label raster")
    p.add_argument("--out", help="joint record file (default stdout)")
    p.add_argument("--heatmap-dir", help="also write 16-bit heatmap rasters here")
    p.add_argument("--sigma", type=float, default=None, help="heatmap sigma in pixels (default max(H,W)/16)")

    p = sub.add_parser("loss", help="evaluate parsing/joint/structure losses for a prediction")
    _common(p)
    p.add_argument("--gt", required=True, help="ground-truth label raster")
    p.add_argument("--pred", required=True, help="prediction: label raster or .npy logits (H, W, C)")
    p.add_argument("--margin", type=float, default=5.0,
                   help="logit given to the predicted class when --pred is a label raster (default 5)")
    _loss_flags(p)

    p = sub.add_parser("train", help="two-stage training of the toy parser")
    _common(p, seed=True)
    p.add_argument("--train-manifest", required=True, help="training manifest")
    p.add_argument("--val-manifest", help="validation manifest, evaluated after every epoch")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="line-delimited JSON training log (default <out>.log.jsonl)")
    p.add_argument("--init", help="start from this checkpoint instead of a fresh model")
    p.add_argument("--epochs-stage1", type=int, default=8, help="parsing-loss epochs (default 8)")
    p.add_argument("--epochs-stage2", type=int, default=4, help="structure-loss epochs (default 4)")
    p.add_argument("--lr", type=float, default=0.05, help="stage-1 learning rate (default 0.05)")
    p.add_argument("--stage2-lr", type=float, default=None, help="stage-2 learning rate (default 0.1 * --lr)")
    p.add_argument("--batch-size", type=int, default=10, help="images per SGD step (default 10)")
    p.add_argument("--momentum", type=float, default=0.9, help="SGD momentum (default 0.9)")
    p.add_argument("--weight-decay", type=float, default=0.0005, help="L2 weight decay (default 0.0005)")
    p.add_argument("--widths", default="20,20,20", help="hidden channel widths (default 20,20,20)")
    p.add_argument("--flip", action="store_true", help="horizontal flips with left/right label swapping")
    _loss_flags(p)

    p = sub.add_parser("predict", help="write predicted label rasters for a manifest")
    _common(p)
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--manifest", required=True, help="manifest of images to label")
    p.add_argument("--pred-dir", required=True, help="output directory for <image_id>.png")

    p = sub.add_parser("eval", help="metrics and challenge-factor slices for predictions")
    _common(p)
    p.add_argument("--gt-manifest", required=True, help="manifest with ground-truth label paths")
    p.add_argument("--pred-dir", required=True, help="directory of <image_id>.png predictions")
    p.add_argument("--out", help="metrics report JSON (default stdout)")
    p.add_argument("--slices-out", help="also write per-slice reports here")
    p.add_argument("--jobs", type=int, default=1, help="parallel readers (default 1)")
    p.add_argument("--absent-rule", choices=("exclude", "zero"), default="exclude",
                   help="mean-IoU treatment of classes absent from gt and prediction (default exclude)")

    p = sub.add_parser("serve", help="run the evaluation server")
    _common(p)
    p.add_argument("--gt-manifest", required=True, help="secret test manifest with label paths")
    p.add_argument("--spool", required=True, help="spool directory for submissions")
    p.add_argument("--host", default="127.0.0.1", help="bind address (default 127.0.0.1)")
    p.add_argument("--port", type=int, default=8765, help="TCP port (default 8765)")

    p = sub.add_parser("selftest", help="gradient checks and oracle suites")
    _common(p, seed=True)
    p.add_argument("--instances", type=int, default=100, help="gradient-check instances per loss (default 100)")

    p = sub.add_parser("experiment", help="desk-scale baseline vs fine-tuning comparison")
    _common(p, seed=True)
    p.add_argument("--workdir", required=True, help="directory for generated data")
    p.add_argument("--out", help="result JSON (default stdout)")
    p.add_argument("--seeds", type=int, default=3, help="number of training seeds, starting at --seed (default 3)")
    p.add_argument("--epochs-stage1", type=int, default=12, help="parsing-loss epochs (default 12)")
    p.add_argument("--epochs-stage2", type=int, default=6, help="structure-loss epochs (default 6)")
    p.add_argument("--lr", type=float, default=0.05, help="stage-1 learning rate (default 0.05)")
    p.add_argument("--batch-size", type=int, default=10, help="images per SGD step (default 10)")
    p.add_argument("--control", action="store_true", help="also fine-tune on the plain parsing loss")
    _loss_flags(p)
    return parser


# -- subcommands --------------------------------------------------------------

def cmd_gen(args, t) -> int:
    from .synthgen import FigureConfig, generate_dataset

    cfg = FigureConfig.from_text(Path(args.figure_config).read_text()) if args.figure_config else FigureConfig()
    overrides = {
        "image_size": args.size,
        "occlusion_prob": args.occlusion_prob,
        "back_view_prob": args.back_view_prob,
        "head_missed_prob": args.head_missed_prob,
        "upper_body_prob": args.upper_body_prob,
    }
    cfg = replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    manifest = generate_dataset(args.seed, args.n, cfg, args.out, prefix=args.prefix, split=args.split)
    print(manifest)
    return 0


def cmd_joints(args, t) -> int:
    from .joints import derive_joints, format_joints, heatmap_set, write_heatmap
    from .raster_io import read_label_map

    labels = read_label_map(args.label, t.num_classes)
    joints = derive_joints(labels, t)
    text = format_joints(joints)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    if args.heatmap_dir:
        hs = heatmap_set(joints, labels.shape, args.sigma)
        out = Path(args.heatmap_dir)
        out.mkdir(parents=True, exist_ok=True)
        for j, hm in zip(hs.joints, hs.heatmaps):
            write_heatmap(hm, out / f"{Path(args.label).stem}_{j.name}.png")
        log.info("heatmaps rendered with sigma %.4f", hs.sigma)
    return 0


def cmd_loss(args, t) -> int:
    from .loss import structure_loss
    from .raster_io import one_hot, read_label_map

    gt = read_label_map(args.gt, t.num_classes)
    if args.pred.endswith(".npy"):
        logits = np.load(args.pred)
    else:
        logits = args.margin * one_hot(read_label_map(args.pred, t.num_classes), t.num_classes)
    res = structure_loss(logits, gt, t, _loss_config(args), with_grad=False)
    print(json.dumps({"mode": args.ssl_mode, "l_parsing": res.l_parsing, "l_joint": res.l_joint,
                      "l_structure": res.l_structure}))
    return 0


def cmd_train(args, t) -> int:
    from .raster_io import load_manifest
    from .toytrain import TrainConfig, init_model, load_checkpoint, save_checkpoint, train

    widths = [int(w) for w in args.widths.split(",") if w]
    cfg = TrainConfig(
        learning_rate=args.lr,
        stage1_epochs=args.epochs_stage1,
        stage2_epochs=args.epochs_stage2,
        stage2_lr=args.stage2_lr,
        batch_size=args.batch_size,
        momentum=args.momentum,
        weight_decay=args.weight_decay,
        loss=_loss_config(args),
        seed=args.seed,
        flip=args.flip,
    )
    model = load_checkpoint(args.init)[0] if args.init else init_model(args.seed, [3, *widths, t.num_classes])
    train_index = load_manifest(args.train_manifest)
    val_index = load_manifest(args.val_manifest, split="val") if args.val_manifest else None
    model, tlog = train(model, train_index, val_index, cfg, t,
                        progress=lambda r: log.info("%s", json.dumps(r, sort_keys=True)))
    save_checkpoint(model, args.out, cfg.snapshot())
    Path(args.log or f"{args.out}.log.jsonl").write_text(tlog.to_jsonl(), encoding="utf-8")
    print(json.dumps({"checkpoint": args.out, "param_count": model.param_count, "wall_time": tlog.wall_time}))
    return 0


def cmd_predict(args, t) -> int:
    from .raster_io import load_manifest, read_image, write_label_map
    from .toytrain import forward, load_checkpoint

    model, _ = load_checkpoint(args.checkpoint)
    index = load_manifest(args.manifest, split="test")
    out = Path(args.pred_dir)
    out.mkdir(parents=True, exist_ok=True)
    for r in index.records:
        logits = forward(model, read_image(r.image_path))
        write_label_map(logits.argmax(axis=-1).astype(np.uint8), out / f"{r.image_id}.png")
    print(out)
    return 0


def cmd_eval(args, t) -> int:
    from .metrics import report_to_json, sliced_evaluation, slices_to_json
    from .raster_io import load_manifest

    index = load_manifest(args.gt_manifest, split="val")
    res = sliced_evaluation(index, args.pred_dir, t, jobs=args.jobs, absent_class_rule=args.absent_rule)
    for err in res.errors:
        print(f"error: {err}", file=sys.stderr)
    for note in res.notes:
        print(f"note: {note}", file=sys.stderr)
    if "all" not in res.reports:
        print("error: no evaluated pixels", file=sys.stderr)
        return 1
    text = report_to_json(res.reports["all"])
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    if args.slices_out:
        Path(args.slices_out).write_text(slices_to_json(res.reports, res.notes), encoding="utf-8")
    return 0 if res.ok else 1


def cmd_serve(args, t) -> int:
    from .evalserver import EvalServer, make_http_server
    from .raster_io import load_manifest

    evaluator = EvalServer(load_manifest(args.gt_manifest, split="val"), args.spool, t)
    httpd = make_http_server(evaluator, args.host, args.port)
    print(f"serving on http://{args.host}:{httpd.server_address[1]}", file=sys.stderr, flush=True)
    try:
        httpd.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        httpd.server_close()
    return 0


def cmd_selftest(args, t) -> int:
    from .selfcheck import one_hot_collapse_failures, parsing_gradchecks, soft_structure_gradchecks

    ok = True
    summary = {}
    for name, cases in (
        ("parsing_gradcheck", parsing_gradchecks(args.instances, args.seed)),
        ("soft_structure_gradcheck", soft_structure_gradchecks(args.instances, args.seed + 1)),
    ):
        failed = [c for c in cases if not c.report.passed]
        for c in failed:
            print(f"{name} C={c.num_classes}: {c.report}", file=sys.stderr)
        worst = max(c.report.max_rel_error for c in cases) if cases else 0.0
        summary[name] = {"instances": len(cases), "failed": len(failed), "max_rel_error": worst}
        print(f"{name}: {len(cases) - len(failed)}/{len(cases)} passed, worst {worst:.2e}", file=sys.stderr)
        ok &= not failed
    collapse = one_hot_collapse_failures(seed=args.seed + 2)
    for msg in collapse[:10]:
        print(f"one_hot_collapse: {msg}", file=sys.stderr)
    summary["one_hot_collapse"] = {"failures": len(collapse)}
    ok &= not collapse
    summary["passed"] = ok
    print(json.dumps(summary, sort_keys=True))
    return 0 if ok else 1


def cmd_experiment(args, t) -> int:
    from .experiment import run_desk_experiment
    from .toytrain import TrainConfig

    cfg = TrainConfig(learning_rate=args.lr, stage1_epochs=args.epochs_stage1, stage2_epochs=args.epochs_stage2,
                      batch_size=args.batch_size, loss=_loss_config(args))
    seeds = range(args.seed, args.seed + args.seeds)
    res = run_desk_experiment(args.workdir, seeds=seeds, train_cfg=cfg, t=t, control=args.control,
                              progress=lambda m: print(m, file=sys.stderr, flush=True))
    text = res.to_json() + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    print(f"accepted: {res.accepted()}", file=sys.stderr)
    return 0 if res.accepted() else 1


COMMANDS = {
    "gen": cmd_gen,
    "joints": cmd_joints,
    "loss": cmd_loss,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "serve": cmd_serve,
    "selftest": cmd_selftest,
    "experiment": cmd_experiment,
}


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        t = load_taxonomy(args.taxonomy)
        return COMMANDS[args.command](args, t)
    except (ParsingError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
