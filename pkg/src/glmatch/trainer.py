"""End-to-end model, training loop with the per-epoch learning-rate decay, checkpoints and inference."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .backbone import Backbone, image_to_tensor
from .config import Config
from .datagen import ImagePairRecord
from .descriptor import append_dustbin, describe_lines, exclude_non_matches, init_dustbin
from .geometry import rotation_about_center, scaling, transform_pair
from .graphnet import GraphMatcher
from .losses import LossConfig, MatchGroundTruth, feature_learning_loss, matching_loss, total_loss
from .transport import MatchSet, dustbin_plan, extract_matches

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class NonFiniteLossError(RuntimeError):
    pass


class LineMatcher(nn.Module):
    def __init__(self, cfg: Config | None = None):
        super().__init__()
        cfg = cfg or Config()
        self.cfg = cfg
        b = cfg.backbone
        self.backbone = Backbone(b.in_channels, tuple(b.channels), tuple(b.taps), tap_norm=b.tap_norm)
        c3, c5 = self.backbone.out_channels
        g, t = cfg.graph, cfg.transport
        self.dustbin = nn.Parameter(init_dustbin(c3 + c5))
        self.graph = GraphMatcher(
            c3 + c5, g.width, g.layers, g.score_dim, t.delta, t.max_iters, t.tol,
            strict_mutual=g.strict_mutual, learn_graph=g.learn_graph, c_scale=g.c_scale,
        )

    def describe(self, image, lines):
        d = self.cfg.descriptor
        maps = self.backbone(image_to_tensor(image))
        return describe_lines(maps, lines, d.n, d.w, d.sigma, d.pooling)


@dataclass
class PipelineOutput:
    P: object
    M: object
    intermediates: list
    loss: torch.Tensor | None
    loss_feature: torch.Tensor | None
    loss_graph: torch.Tensor | None
    kept_a: list[int]
    kept_b: list[int]
    gt: MatchGroundTruth | None


def forward_pipeline(record: ImagePairRecord, model: LineMatcher, with_loss: bool = True) -> PipelineOutput | None:
    """Backbone, descriptors, exclusion, dustbins, graph blocks, transport and losses.

    Returns None when exclusion leaves no line in either image.
    """
    cfg = model.cfg
    la, lb = record.lines_a, record.lines_b
    if len(la) == 0 or len(lb) == 0:
        return _empty_side_output(model, la, lb, record.gt if with_loss else None)
    fa = model.describe(record.image_a, la)
    fb = model.describe(record.image_b, lb)
    if cfg.descriptor.exclusion:
        kept_a, kept_b = exclude_non_matches(fa.combined, fb.combined, cfg.descriptor.d_s)
    else:
        kept_a, kept_b = list(range(len(la))), list(range(len(lb)))
    if not kept_a and not kept_b:
        return None
    da = append_dustbin(fa.combined[kept_a], model.dustbin, kept_a)
    db = append_dustbin(fb.combined[kept_b], model.dustbin, kept_b)
    m, p, inter = model.graph(da.descriptors, db.descriptors)
    out = PipelineOutput(p, m, inter, None, None, None, kept_a, kept_b, None)
    if not with_loss:
        return out
    gt = record.gt
    lc = cfg.loss
    if lc.lam > 0 and gt.pairs:
        l_feat = feature_learning_loss(fa.shallow, fb.shallow, fa.deep, fb.deep, gt.pairs, LossConfig(lc.s3, lc.s5, lc.eta3, lc.eta5, lc.lam))
    else:
        l_feat = p.values.sum() * 0.0
    out.gt = gt.restrict(kept_a, kept_b)
    out.loss_graph = matching_loss(p, out.gt)
    out.loss_feature = l_feat
    out.loss = total_loss(l_feat, out.loss_graph, lc.lam)
    return out


def _empty_side_output(model, la, lb, gt):
    p = dustbin_plan(len(la), len(lb), dtype=model.dustbin.dtype)
    p.values = p.values + 0.0 * model.dustbin.sum()  # keeps the loss attached to the graph
    kept_a, kept_b = list(range(len(la))), list(range(len(lb)))
    out = PipelineOutput(p, None, [], None, None, None, kept_a, kept_b, gt)
    if gt is not None:
        out.loss_graph = matching_loss(p, gt)
        out.loss_feature = out.loss_graph * 0.0
        out.loss = total_loss(out.loss_feature, out.loss_graph, model.cfg.loss.lam)
    return out


def learning_rate(epoch: int, cfg: Config) -> float:
    """Epoch is 1-based; divide by ``lr_decay`` each epoch, never below ``lr_floor``."""
    t = cfg.train
    return max(t.lr / t.lr_decay ** (epoch - 1), t.lr_floor)


def augment_record(record: ImagePairRecord, rng: np.random.Generator, cfg: Config) -> ImagePairRecord:
    """Independent random rotation and resize of each view with exact line/gt remapping."""
    t = cfg.train
    hs, sizes = [], []
    for img in (record.image_a, record.image_b):
        s = float(rng.uniform(*t.aug_scale))
        h, w = img.shape[:2]
        size = (max(32, round(w * s)), max(32, round(h * s)))
        rot = rotation_about_center(float(rng.uniform(-t.aug_rotation, t.aug_rotation)), *size)
        hs.append(rot @ scaling(s))
        sizes.append(size)
    out = transform_pair(record.image_a, record.image_b, record.lines_a, record.lines_b, record.gt, hs[0], hs[1], sizes[0], sizes[1])
    return ImagePairRecord(*out, meta=record.meta)


def save_checkpoint(path, model: LineMatcher, optimizer=None, epoch: int = 0) -> None:
    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "config": model.cfg.to_dict(),
            "config_hash": model.cfg.hash(),
            "model": model.state_dict(),
            "optimizer": optimizer.state_dict() if optimizer is not None else None,
            "epoch": epoch,
        },
        path,
    )


def load_checkpoint(path) -> tuple[LineMatcher, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {blob.get('version')}")
    model = LineMatcher(Config.from_dict(blob["config"]))
    model.load_state_dict(blob["model"])
    model.eval()
    return model, blob


def train(
    dataset: Sequence[ImagePairRecord],
    cfg: Config | None = None,
    out_dir: str | Path | None = None,
    log_path: str | Path | None = None,
    model: LineMatcher | None = None,
    max_steps: int | None = None,
) -> LineMatcher:
    """Adam over per-record forward passes, loss averaged over each batch.

    Checkpoints ``epoch_XX.pt`` and ``last.pt`` go to ``out_dir``. A
    non-finite loss restores the last good parameters and raises
    ``NonFiniteLossError``.
    """
    cfg = cfg or Config()
    if not dataset:
        raise ValueError("empty dataset")
    t = cfg.train
    torch.manual_seed(t.seed)
    rng = np.random.default_rng(t.seed)
    model = model or LineMatcher(cfg)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=t.lr)
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    good_state = {k: v.clone() for k, v in model.state_dict().items()}
    writer = None
    fh = None
    if log_path:
        fh = open(log_path, "w", newline="")
        fh.write(f"# config_hash={cfg.hash()}\n")
        writer = csv.writer(fh)
        writer.writerow(["step", "epoch", "lr", "loss", "loss_feature", "loss_graph", "records", "skipped"])
    step = 0
    skipped_total = 0
    try:
        for epoch in range(1, t.epochs + 1):
            lr = learning_rate(epoch, cfg)
            for group in opt.param_groups:
                group["lr"] = lr
            order = rng.permutation(len(dataset))
            for start in range(0, len(order), t.batch_size):
                batch = [dataset[int(k)] for k in order[start:start + t.batch_size]]
                opt.zero_grad()
                losses, feats, graphs, skipped = [], [], [], 0
                for rec in batch:
                    if t.augment:
                        rec = augment_record(rec, rng, cfg)
                    out = forward_pipeline(rec, model)
                    if out is None:
                        skipped += 1
                        continue
                    losses.append(out.loss)
                    feats.append(float(out.loss_feature.detach()))
                    graphs.append(float(out.loss_graph.detach()))
                skipped_total += skipped
                if not losses:
                    continue
                loss = torch.stack(losses).mean()
                if not torch.isfinite(loss):
                    model.load_state_dict(good_state)
                    if out_dir:
                        save_checkpoint(out_dir / "last.pt", model, None, epoch)
                    raise NonFiniteLossError(f"non-finite loss at step {step + 1}")
                loss.backward()
                opt.step()
                step += 1
                if writer:
                    writer.writerow([step, epoch, f"{lr:.3g}", f"{float(loss.detach()):.6f}", f"{np.mean(feats):.6f}", f"{np.mean(graphs):.6f}", len(losses), skipped])
                if max_steps is not None and step >= max_steps:
                    break
            good_state = {k: v.clone() for k, v in model.state_dict().items()}
            if out_dir:
                save_checkpoint(out_dir / f"epoch_{epoch:02d}.pt", model, opt, epoch)
                save_checkpoint(out_dir / "last.pt", model, opt, epoch)
            log.info("epoch %d done (lr %.3g, %d steps, %d skipped records)", epoch, lr, step, skipped_total)
            if max_steps is not None and step >= max_steps:
                break
    finally:
        if fh:
            fh.close()
    model.eval()
    return model


@torch.no_grad()
def match_images(image_a, image_b, lines_a, lines_b, model: LineMatcher | str | Path) -> MatchSet:
    """Inference: matches in the original line indexing of both images."""
    if not isinstance(model, LineMatcher):
        model, _ = load_checkpoint(model)
    la = np.asarray(lines_a, dtype=np.float64).reshape(-1, 4)
    lb = np.asarray(lines_b, dtype=np.float64).reshape(-1, 4)
    if len(la) == 0 or len(lb) == 0:
        return MatchSet([], list(range(len(la))), list(range(len(lb))))
    rec = ImagePairRecord(image_a, image_b, la, lb, MatchGroundTruth([], list(range(len(la))), list(range(len(lb)))))
    out = forward_pipeline(rec, model, with_loss=False)
    if out is None:
        return MatchSet([], list(range(len(la))), list(range(len(lb))))
    local = extract_matches(out.P, model.cfg.transport.score_floor)
    matches = [(out.kept_a[i], out.kept_b[j], s) for i, j, s in local.matches]
    got_a = {i for i, _, _ in matches}
    got_b = {j for _, j, _ in matches}
    return MatchSet(matches, [i for i in range(len(la)) if i not in got_a], [j for j in range(len(lb)) if j not in got_b])


def matcher_for(model: LineMatcher):
    """Callable with the evaluation matcher signature."""
    return lambda ia, ib, la, lb: match_images(ia, ib, la, lb, model)

