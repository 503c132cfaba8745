"""Pre-training and fine-tuning loops with per-epoch checkpoints and a JSON-lines loss log."""

from __future__ import annotations

import json
import logging
import os
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig, lr_at
from .doc_model import DocumentAnnotation, LinkKind, resolve_image_path
from .net import STRIDE, ESPNet, encode_text, gather_bundles
from .objectives import (
    ALL,
    Phase,
    build_detection_targets,
    combined_loss,
    ctc_loss,
    detection_loss,
    ee_loss,
    eitm_loss,
    focal_loss,
    link_targets,
)
from .preprocess import load_image, resize_and_normalize, scale_document, segment_geometry
from .pseudolabel import PseudoLabeledDoc
from .text_encoder import make_embedder

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, last_good: Path | None):
        super().__init__(f"{message}; last good checkpoint: {last_good}")
        self.last_good = last_good


def seed_everything(seed: int, deterministic: bool = False) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


@dataclass
class Sample:
    """One document prepared for training at model-input resolution."""

    image: torch.Tensor  # (3, H, W)
    doc: DocumentAnnotation  # in input pixels, only segments with a target peak
    targets: object
    labels: list
    links: tuple[set, set]  # (intra pairs, inter pairs) as row indices
    mask: object  # ALL or set of row-index pairs
    geometry: np.ndarray
    texts: list[str]


def prepare_sample(doc: DocumentAnnotation, longer_side: int, image: np.ndarray | None = None,
                   annotation_file=None, link_mask=None) -> Sample:
    if image is None:
        image = load_image(resolve_image_path(doc, annotation_file))
    x, record = resize_and_normalize(image, longer_side)
    scaled = scale_document(doc, record)
    pw, ph = record.padded_size
    targets = build_detection_targets(scaled, (ph // STRIDE, pw // STRIDE))
    row = {sid: i for i, sid in enumerate(targets.segment_ids)}
    segs = [scaled.segment(sid) for sid in targets.segment_ids]
    intra, inter = set(), set()
    for lk in scaled.links:
        if lk.source in row and lk.target in row:
            (intra if lk.kind is LinkKind.INTRA else inter).add((row[lk.source], row[lk.target]))
    mask = ALL
    if link_mask is not None:
        mask = {(row[a], row[b]) for a, b in link_mask if a in row and b in row}
    kept = DocumentAnnotation(scaled.image_path, pw, ph, tuple(segs),
                              tuple(lk for lk in scaled.links if lk.source in row and lk.target in row))
    return Sample(x, kept, targets, [s.category for s in segs], (intra, inter), mask,
                  segment_geometry([s.box for s in segs], record.padded_size), [s.text for s in segs])


def _stack_images(images: Sequence[torch.Tensor]) -> torch.Tensor:
    h = max(im.shape[1] for im in images)
    w = max(im.shape[2] for im in images)
    return torch.stack([F.pad(im, (0, w - im.shape[2], 0, h - im.shape[1])) for im in images])


def _pad_targets(targets, h, w):
    from .objectives import DetectionTargets

    out = []
    for t in targets:
        th, tw = t.heatmap.shape
        pad2 = ((0, h - th), (0, w - tw))
        pad3 = ((0, 0),) + pad2
        out.append(DetectionTargets(np.pad(t.heatmap, pad2), np.pad(t.quad, pad3), np.pad(t.offset, pad3),
                                    np.pad(t.positive, pad2), t.centers, t.segment_ids))
    return out


def compute_losses(model: ESPNet, batch: Sequence[Sample], phase: Phase | str, gamma: float = 4.0,
                   embedder=None, recognizer: bool = False) -> dict[str, torch.Tensor | None]:
    """Loss components of one batch: ``det``, ``eitm``, ``ee``, ``el``, ``rec``."""
    phase = Phase(phase)
    dtype = next(model.parameters()).dtype
    images = _stack_images([s.image for s in batch]).to(dtype)
    p2, out = model(images)
    hm, wm = out.heatmap.shape[-2:]
    det = detection_loss(out, _pad_targets([s.targets for s in batch], hm, wm))["total"]
    ee_p, ee_y, el_p, el_t, vis, texts, rec_lp, rec_y = [], [], [], [], [], [], [], []
    channels = model.cfg.link_channels
    for b, s in enumerate(batch):
        n = len(s.labels)
        if n == 0:
            continue
        bundle = gather_bundles(out, s.targets.centers, s.geometry, b)
        ee_p.append(model.ee_head(bundle))
        ee_y.extend(s.labels)
        probs = model.el_head(bundle)
        intra, inter = s.links
        gt = [intra, inter] if channels == 2 else {*intra, *inter}
        tgt = link_targets(n, gt, channels).to(dtype)
        sel = ~torch.eye(n, dtype=torch.bool)
        if s.mask != ALL:
            allowed = torch.zeros((n, n), dtype=torch.bool)
            for i, j in s.mask:
                allowed[i, j] = True
            sel &= allowed
        el_p.append(probs[sel])
        el_t.append(tgt[sel])
        if phase is Phase.PRETRAIN:
            vis.append(model.eitm_embed(bundle))
            texts.extend(s.texts)
        if recognizer:
            labels = [encode_text(t, model.cfg.charset) for t in s.texts]
            keep = [i for i, lab in enumerate(labels) if lab]
            if keep:
                rec_lp.append(model.recognize(p2[b], [s.doc.segments[i].box for i in keep]))
                rec_y.extend(labels[i] for i in keep)
    zero = det.new_zeros(())
    comps: dict[str, torch.Tensor | None] = {
        "det": det,
        "ee": ee_loss(torch.cat(ee_p), ee_y, gamma) if ee_p else zero,
        "el": focal_loss(torch.cat(el_p), torch.cat(el_t), gamma) if el_p else zero,
        "eitm": None,
        "rec": None,
    }
    if phase is Phase.PRETRAIN:
        if embedder is None:
            raise ValueError("pre-training needs a text embedder for the alignment loss")
        if vis:
            t = torch.as_tensor(embedder(texts), dtype=dtype)
            comps["eitm"] = eitm_loss(torch.cat(vis), t, model.temperature())
        else:
            comps["eitm"] = zero
    elif recognizer:
        comps["rec"] = ctc_loss(torch.cat(rec_lp), rec_y) if rec_lp else zero
    return comps


def _log_line(step: int, comps: dict, total: torch.Tensor) -> str:
    f = lambda v: None if v is None else float(v.detach() if torch.is_tensor(v) else v)  # noqa: E731
    return json.dumps({"step": step, "l_det": f(comps["det"]), "l_eitm": f(comps["eitm"]),
                       "l_ee": f(comps["ee"]), "l_el": f(comps["el"]), "l_rec": f(comps["rec"]),
                       "total": f(total)})


def make_optimizer(model: ESPNet, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(model.parameters(), lr=cfg.base_lr, weight_decay=cfg.weight_decay)


def train(cfg: TrainConfig, samples: Sequence[Sample], model: ESPNet, out_dir: str | os.PathLike,
          resume_from: str | os.PathLike | None = None, embedder=None) -> Path:
    """Optimise the phase objective; returns the path of the final checkpoint."""
    phase = Phase(cfg.phase)
    out = Path(out_dir)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    if phase is Phase.PRETRAIN and embedder is None:
        embedder = make_embedder(cfg.text_encoder, dim=model.cfg.d1, seed=cfg.seed)
    recognizer = cfg.recognizer_enabled and phase is Phase.FINETUNE
    if recognizer and model.recognizer is None:
        raise ValueError("recognizer_enabled is set but the model has no recognition branch")
    opt = make_optimizer(model, cfg)
    step, start_epoch, last_good = 0, 0, None
    if resume_from is not None:
        _, manifest = load_checkpoint(resume_from, model, opt)
        step, start_epoch, last_good = manifest["step"], manifest["epoch"] + 1, Path(resume_from)
    log_path = out / "loss_log.jsonl"
    model.train()
    with open(log_path, "a" if resume_from else "w", encoding="utf-8") as log_fh:
        for epoch in range(start_epoch, cfg.epochs):
            lr = lr_at(epoch, cfg.base_lr, cfg.lr_decay_epochs, cfg.lr_decay_factor)
            for group in opt.param_groups:
                group["lr"] = lr
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(samples))
            for k in range(0, len(order), cfg.batch_size):
                batch = [samples[i] for i in order[k:k + cfg.batch_size]]
                comps = compute_losses(model, batch, phase, cfg.gamma, embedder, recognizer)
                total = combined_loss(phase, {k2: v for k2, v in comps.items() if v is not None}, cfg.weights)
                if not torch.isfinite(total):
                    raise TrainingAborted(f"non-finite loss at step {step}", last_good)
                opt.zero_grad(set_to_none=True)
                total.backward()
                if cfg.grad_clip:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                opt.step()
                step += 1
                log_fh.write(_log_line(step, comps, total) + "\n")
                log_fh.flush()
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    break
            done = (cfg.max_steps is not None and step >= cfg.max_steps) or epoch == cfg.epochs - 1
            if done or (epoch + 1) % cfg.checkpoint_every == 0:
                last_good = save_checkpoint(ckpt_dir / f"epoch_{epoch:04d}.ckpt", model, step=step,
                                            epoch=epoch, train_config=cfg.to_dict(), optimizer=opt)
                log.info("epoch %d step %d loss %.4f -> %s", epoch, step, total.item(), last_good)
            if done:
                break
    if last_good is None:
        last_good = save_checkpoint(ckpt_dir / "final.ckpt", model, step=step, epoch=cfg.epochs - 1,
                                    train_config=cfg.to_dict(), optimizer=opt)
    return last_good


def run_pretrain(cfg: TrainConfig, corpus: Sequence[PseudoLabeledDoc], model: ESPNet, out_dir,
                 annotation_file=None, images: Sequence[np.ndarray] | None = None, **kw) -> Path:
    """Pre-train on pseudo-labelled documents; link supervision is restricted to each link mask."""
    if Phase(cfg.phase) is not Phase.PRETRAIN:
        raise ValueError("run_pretrain needs phase = 'pretrain'")
    samples = [prepare_sample(p.doc, cfg.resize_longer_side, None if images is None else images[i],
                              annotation_file, link_mask=p.link_mask) for i, p in enumerate(corpus)]
    return train(cfg, samples, model, out_dir, **kw)


def run_finetune(cfg: TrainConfig, corpus: Sequence[DocumentAnnotation], model: ESPNet, out_dir,
                 annotation_file=None, images: Sequence[np.ndarray] | None = None, **kw) -> Path:
    """Fine-tune on fully labelled documents with all off-diagonal link pairs supervised."""
    if Phase(cfg.phase) is not Phase.FINETUNE:
        raise ValueError("run_finetune needs phase = 'finetune'")
    samples = [prepare_sample(d, cfg.resize_longer_side, None if images is None else images[i],
                              annotation_file) for i, d in enumerate(corpus)]
    return train(cfg, samples, model, out_dir, **kw)


def build_model(cfg: TrainConfig) -> ESPNet:
    """Seeded model construction so identical configs give identical initial weights."""
    seed_everything(cfg.seed, cfg.deterministic)
    return ESPNet(cfg.model)


def load_model(path) -> ESPNet:
    model, _ = load_checkpoint(path)
    return model


__all__ = ["Sample", "TrainingAborted", "build_model", "compute_losses", "load_model", "lr_at",
           "prepare_sample", "run_finetune", "run_pretrain", "seed_everything", "train"]
