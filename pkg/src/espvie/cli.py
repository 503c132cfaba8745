"""Command line entry point: ``esp <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import PROFILES, TrainConfig, build_config

log = logging.getLogger("espvie")


def _overrides(extra: list[str]) -> dict[str, str]:
    """Turn leftover ``--key value`` / ``--key=value`` tokens into a dict."""
    out, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise SystemExit(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
        else:
            if i + 1 >= len(extra):
                raise SystemExit(f"option --{key} needs a value")
            val = extra[i + 1]
            i += 1
        out[key] = val
        i += 1
    return out


def _train_config(args, extra) -> TrainConfig:
    ov = _overrides(extra)
    if args.seed is not None:
        ov["seed"] = str(args.seed)
    if args.deterministic:
        ov["deterministic"] = "true"
    ov["phase"] = args.command
    try:
        return build_config(args.profile, args.config, ov)
    except (KeyError, ValueError, TypeError) as exc:
        raise SystemExit(f"bad configuration: {exc}")


def cmd_synthgen(args, extra):
    from .synthdoc import SynthConfig, generate_corpus

    cfg = SynthConfig(seed=args.seed, num_docs=args.num_docs, image_size=(args.width, args.height),
                      overlap_prob=args.overlap_prob, rotation_jitter_deg=args.rotation_deg,
                      max_pairs_per_doc=args.max_pairs)
    docs = generate_corpus(cfg, args.out, workers=args.workers)
    print(f"wrote {len(docs)} documents to {args.out}")


def cmd_pseudolabel(args, extra):
    from .pseudolabel import pseudolabel_files, save_pseudo_labels

    lib, docs = pseudolabel_files(args.dumps, args.corpus_tag, args.threshold)
    save_pseudo_labels(docs, args.out)
    n_links = sum(len(d.doc.links) for d in docs)
    print(f"key library: {len(lib)} texts (threshold {lib.threshold}); "
          f"{len(docs)} documents, {n_links} key-value links -> {args.out}")


def _load_images(docs, annotation_file):
    from .doc_model import resolve_image_path
    from .preprocess import load_image

    return [load_image(resolve_image_path(d, annotation_file)) for d in docs]


def cmd_pretrain(args, extra):
    from .pseudolabel import load_pseudo_labels
    from .training import build_model, run_pretrain

    cfg = _train_config(args, extra)
    corpus = load_pseudo_labels(args.data)
    model = build_model(cfg)
    ckpt = run_pretrain(cfg, corpus, model, args.out, annotation_file=args.data, resume_from=args.resume)
    print(ckpt)


def cmd_finetune(args, extra):
    from .doc_model import load_annotations
    from .training import build_model, run_finetune

    cfg = _train_config(args, extra)
    docs = load_annotations(args.data)
    model = build_model(cfg)
    if args.init is not None:
        from .checkpoint import load_checkpoint, resolve_checkpoint

        load_checkpoint(resolve_checkpoint(args.init), model)
    ckpt = run_finetune(cfg, docs, model, args.out, annotation_file=args.data, resume_from=args.resume)
    print(ckpt)


def _predict(args):
    """Run the checkpoint over an annotation file; returns (graphs, docs)."""
    from .checkpoint import load_checkpoint, resolve_checkpoint
    from .decoder import DecodeConfig, decode_document
    from .doc_model import load_annotations

    if not args.checkpoint:
        raise SystemExit("--checkpoint is required")
    model, manifest = load_checkpoint(resolve_checkpoint(args.checkpoint))
    longer = args.longer_side or manifest.get("train_config", {}).get("resize_longer_side", 1024)
    docs = load_annotations(args.annotations)
    images = _load_images(docs, args.annotations)
    dcfg = DecodeConfig(heatmap_threshold=args.heatmap_threshold, link_threshold=args.link_threshold)
    graphs = [decode_document(im, model, dcfg, longer, gt_boxes=d if args.gt_boxes else None)
              for d, im in zip(docs, images)]
    return graphs, docs


def _image_list(paths):
    """Bare images for inference without annotations; returns (placeholder docs, arrays)."""
    from .doc_model import DocumentAnnotation
    from .preprocess import load_image

    docs, images = [], []
    for p in paths:
        im = load_image(p)
        docs.append(DocumentAnnotation(str(p), im.shape[1], im.shape[0], (), ()))
        images.append(im)
    return docs, images


def cmd_infer(args, extra):
    from .checkpoint import load_checkpoint, resolve_checkpoint
    from .decoder import DecodeConfig, decode_document, save_predictions

    if args.gt_boxes and not args.annotations:
        raise SystemExit("--gt-boxes needs --annotations")
    if args.annotations:
        graphs, docs = _predict(args)
    else:
        if not args.images:
            raise SystemExit("give --annotations FILE or one or more --images")
        if not args.checkpoint:
            raise SystemExit("--checkpoint is required")
        docs, images = _image_list(args.images)
        model, manifest = load_checkpoint(resolve_checkpoint(args.checkpoint))
        longer = args.longer_side or manifest.get("train_config", {}).get("resize_longer_side", 1024)
        dcfg = DecodeConfig(heatmap_threshold=args.heatmap_threshold, link_threshold=args.link_threshold)
        graphs = [decode_document(im, model, dcfg, longer) for im in images]
    save_predictions([(g, d.image_path, d.width, d.height) for g, d in zip(graphs, docs)], args.out,
                     args.link_threshold)
    print(f"wrote {len(graphs)} predictions to {args.out}")


def cmd_eval(args, extra):
    from .decoder import load_predictions
    from .doc_model import load_annotations
    from .evalkit import evaluate

    gts = load_annotations(args.annotations)
    if args.predictions:
        preds = [g for g, _ in load_predictions(args.predictions)]
    elif args.checkpoint:
        preds, _ = _predict(args)
    else:
        raise SystemExit("give --predictions FILE or --checkpoint CKPT")
    mode = args.mode or ("gt_input" if args.gt_boxes else "pred_boxes")
    report = evaluate(preds, gts, mode)
    print(report.to_json())
    print(report.table())


def cmd_visualize(args, extra):
    from .decoder import load_predictions
    from .doc_model import load_annotations
    from .visualize import render_overlay

    from PIL import Image

    gts = load_annotations(args.annotations)
    preds = load_predictions(args.predictions)
    if len(preds) != len(gts):
        raise SystemExit(f"{len(preds)} predictions for {len(gts)} annotated documents")
    images = _load_images(gts, args.annotations)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, ((graph, _), gt, im) in enumerate(zip(preds, gts, images)):
        path = out / f"{Path(gt.image_path).stem or f'doc_{k:05d}'}_overlay.png"
        Image.fromarray(render_overlay(im, graph, gt)).save(path)
        print(path)


def _add_train_args(p):
    p.add_argument("--data", required=True, help="annotation file (finetune) or pseudo-label file (pretrain)")
    p.add_argument("--out", required=True, help="run directory for checkpoints and loss_log.jsonl")
    p.add_argument("--profile", choices=PROFILES, default="desk")
    p.add_argument("--config", help="TOML file layered over the profile")
    p.add_argument("--seed", type=int)
    p.add_argument("--deterministic", action="store_true", help="single thread, deterministic kernels")
    p.add_argument("--resume", help="checkpoint to resume from")


def _add_decode_args(p):
    p.add_argument("--checkpoint")
    p.add_argument("--annotations")
    p.add_argument("--gt-boxes", action="store_true", help="use annotated boxes instead of detection")
    p.add_argument("--longer-side", type=int, help="defaults to the checkpoint's training value")
    p.add_argument("--heatmap-threshold", type=float, default=0.3)
    p.add_argument("--link-threshold", type=float, default=0.5)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="esp", description="Entity extraction and linking on document images.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthgen", help="generate a synthetic annotated corpus")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-docs", type=int, default=20)
    p.add_argument("--out", required=True)
    p.add_argument("--overlap-prob", type=float, default=0.0)
    p.add_argument("--rotation-deg", type=float, default=0.0)
    p.add_argument("--width", type=int, default=512)
    p.add_argument("--height", type=int, default=512)
    p.add_argument("--max-pairs", type=int, default=6)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_synthgen)

    p = sub.add_parser("pseudolabel", help="key library and key-value pairing over OCR dumps")
    p.add_argument("--dumps", required=True, help="glob of OCR dump JSON files")
    p.add_argument("--corpus-tag", required=True, choices=["docbank_like", "rvlcdip_like", "custom"])
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=int)
    p.set_defaults(func=cmd_pseudolabel)

    for name, fn, text in (("pretrain", cmd_pretrain, "pre-train on pseudo-labelled documents"),
                           ("finetune", cmd_finetune, "fine-tune on labelled documents")):
        p = sub.add_parser(name, help=text,
                           epilog="Any training option may be overridden with --key value, "
                                  "e.g. --epochs 3 --model.head_channels 16.")
        _add_train_args(p)
        if name == "finetune":
            p.add_argument("--init", help="checkpoint to initialise weights from, e.g. a pre-trained one")
        p.set_defaults(func=fn)

    p = sub.add_parser("eval", help="score predictions against annotations")
    _add_decode_args(p)
    p.add_argument("--predictions", help="prediction file written by infer")
    p.add_argument("--mode", choices=["gt_input", "pred_boxes", "pred_boxes_and_text"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="decode images with a checkpoint")
    _add_decode_args(p)
    p.add_argument("--images", nargs="*")
    p.add_argument("--out", required=True, help="prediction JSON file")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("visualize", help="draw predictions against ground truth")
    p.add_argument("--predictions", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--out", required=True, help="output directory for PNG overlays")
    p.set_defaults(func=cmd_visualize)
    return ap


TRAINING_COMMANDS = ("pretrain", "finetune")


def main(argv=None) -> int:
    ap = build_parser()
    args, extra = ap.parse_known_args(argv)
    if extra and args.command not in TRAINING_COMMANDS:
        ap.error(f"unrecognized arguments: {' '.join(extra)}")
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    from .training import TrainingAborted

    try:
        args.func(args, extra)
    except TrainingAborted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def synthgen_main(argv=None) -> int:
    return main(["synthgen", *(sys.argv[1:] if argv is None else argv)])


def pseudolabel_main(argv=None) -> int:
    return main(["pseudolabel", *(sys.argv[1:] if argv is None else argv)])


if __name__ == "__main__":
    sys.exit(main())
