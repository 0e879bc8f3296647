"""Training: Dice-CE objective, fold training loop, cross-validation, inference.

Validation convergence is operationalized as early stopping: training
ends at ``max_epochs`` or after ``patience`` epochs without a strict
improvement in validation DSC, whichever comes first.  Validation DSC
is computed with :func:`radpipe.metrics.dice_score` on hard argmax
masks of un-augmented samples in eval mode, so reported numbers match
the metrics module exactly.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import augment as augmod
from . import metrics, ndiff
from .errors import NumericalError, ValidationError
from .ndiff import Tensor
from .raseg import ModelConfig, RaSegModel, build_model, forward
from .rng import make_rng
from .volio import PreprocessedSample, Volume


@dataclass
class LossConfig:
    dice_weight: float = 1.0
    ce_weight: float = 1.0
    smooth: float = 1e-5

    def validate(self) -> "LossConfig":
        if self.dice_weight < 0 or self.ce_weight < 0:
            raise ValidationError(
                f"loss weights must be >= 0, got ({self.dice_weight}, {self.ce_weight})"
            )
        if self.dice_weight == 0 and self.ce_weight == 0:
            raise ValidationError("loss weights must not both be zero")
        if self.smooth <= 0:
            raise ValidationError(f"smooth must be > 0, got {self.smooth}")
        return self

    def to_dict(self) -> dict:
        return {"dice_weight": self.dice_weight, "ce_weight": self.ce_weight,
                "smooth": self.smooth}

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        return cls(
            dice_weight=float(d.get("dice_weight", 1.0)),
            ce_weight=float(d.get("ce_weight", 1.0)),
            smooth=float(d.get("smooth", 1e-5)),
        ).validate()


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 2
    max_epochs: int = 40
    patience: int = 10
    folds: int = 5
    seed: int = 0
    augment: augmod.AugmentConfig = field(default_factory=augmod.AugmentConfig)

    def validate(self) -> "TrainConfig":
        if self.lr <= 0:
            raise ValidationError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ValidationError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.patience < 1:
            raise ValidationError(f"patience must be >= 1, got {self.patience}")
        if self.folds < 2:
            raise ValidationError(f"folds must be >= 2, got {self.folds}")
        self.augment.validate()
        return self

    def to_dict(self) -> dict:
        return {
            "lr": self.lr,
            "batch_size": self.batch_size,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "folds": self.folds,
            "seed": self.seed,
            "augment": self.augment.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(
            lr=float(d.get("lr", 1e-3)),
            batch_size=int(d.get("batch_size", 2)),
            max_epochs=int(d.get("max_epochs", 40)),
            patience=int(d.get("patience", 10)),
            folds=int(d.get("folds", 5)),
            seed=int(d.get("seed", 0)),
            augment=augmod.AugmentConfig.from_dict(d.get("augment", {})),
        ).validate()


@dataclass
class FoldReport:
    fold_index: int
    best_val_dsc: float
    epoch_of_best: int
    history: list[dict] = field(default_factory=list)
    diagnostic: str = ""

    def to_dict(self) -> dict:
        return {
            "fold_index": self.fold_index,
            "best_val_dsc": self.best_val_dsc,
            "epoch_of_best": self.epoch_of_best,
            "history": self.history,
            "diagnostic": self.diagnostic,
        }


def dice_ce_loss(logits: Tensor, target_mask: Tensor, cfg: Optional[LossConfig] = None) -> Tensor:
    """Weighted soft-Dice (tumor channel) plus voxelwise cross-entropy.

    Dice is pooled over the whole batch; the smooth term sits in both
    numerator and denominator so an all-empty pair scores 1.
    """
    cfg = (cfg or LossConfig()).validate()
    if logits.ndim != 5 or logits.shape[1] != 2:
        raise ValidationError(f"logits must be (B,2,D,H,W), got {logits.shape}")
    if target_mask.ndim != 5 or target_mask.shape[1] != 1:
        raise ValidationError(f"target mask must be (B,1,D,H,W), got {target_mask.shape}")
    if target_mask.shape[2:] != logits.shape[2:] or target_mask.shape[0] != logits.shape[0]:
        raise ValidationError(
            f"target geometry {target_mask.shape} does not match logits {logits.shape}"
        )
    if not np.isin(np.unique(target_mask.data), (0.0, 1.0)).all():
        raise ValidationError("target mask must be binary")

    t = target_mask
    probs = ndiff.softmax_channel(logits)
    p_tumor = probs[:, 1:2]
    inter = ndiff.sum_axes(ndiff.mul(p_tumor, t))
    sums = ndiff.sum_axes(p_tumor) + ndiff.sum_axes(t)
    dice = (2.0 * inter + cfg.smooth) / (sums + cfg.smooth)
    dice_loss = 1.0 - dice

    ls = ndiff.log_softmax_channel(logits)
    picked = ndiff.add(ndiff.mul(t, ls[:, 1:2]), ndiff.mul(1.0 - t, ls[:, 0:1]))
    ce = ndiff.neg(ndiff.mean_axes(picked))

    return cfg.dice_weight * dice_loss + cfg.ce_weight * ce


def _sample_arrays(s: PreprocessedSample) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if s.tumor_mask is None or s.bbox_volume is None:
        raise ValidationError(f"training sample {s.sample_id or '?'} lacks a tumor mask/bbox")
    img = s.image.data[None, ...]
    return img, s.tumor_mask.data[None, ...], s.bbox_volume.data[None, ...]


def _predict_mask_array(model: RaSegModel, image: np.ndarray, bbox: Optional[np.ndarray]) -> np.ndarray:
    """Argmax mask (B,D,H,W) from a batched eval-mode forward pass."""
    x = Tensor(image.astype(np.float32))
    b = Tensor(bbox.astype(np.float32)) if bbox is not None else None
    with ndiff.no_grad():
        logits = forward(model, x, b, mode="eval")
    return np.argmax(logits.data, axis=1).astype(np.float32)


def train_fold(
    train_set: Sequence[PreprocessedSample],
    val_set: Sequence[PreprocessedSample],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    loss_cfg: Optional[LossConfig] = None,
    fold_index: int = 0,
) -> tuple[RaSegModel, FoldReport]:
    """Train one fold; returns the best-validation model and its report."""
    train_cfg.validate()
    loss_cfg = (loss_cfg or LossConfig()).validate()
    if not train_set or not val_set:
        raise ValidationError("train and validation sets must be nonempty")
    train_ids = {s.sample_id for s in train_set if s.sample_id}
    val_ids = {s.sample_id for s in val_set if s.sample_id}
    if train_ids & val_ids:
        raise ValidationError(f"train/val sets overlap: {sorted(train_ids & val_ids)[:3]}")

    model = build_model(model_cfg, seed=train_cfg.seed + 1000003 * fold_index)
    adam = ndiff.adam_init(model.params, lr=train_cfg.lr)
    dropout_rng = make_rng(train_cfg.seed, fold_index, 0xD20)

    best_params: dict[str, np.ndarray] = {k: p.data.copy() for k, p in model.params.items()}
    best_dsc = -1.0
    best_epoch = 0
    epochs_since_improvement = 0
    report = FoldReport(fold_index=fold_index, best_val_dsc=0.0, epoch_of_best=0)

    aug_cfg = train_cfg.augment

    for epoch in range(train_cfg.max_epochs):
        order = make_rng(train_cfg.seed, fold_index, epoch, 0x0DE2).permutation(len(train_set))
        epoch_losses = []
        aborted = False
        for start in range(0, len(order), train_cfg.batch_size):
            idxs = order[start : start + train_cfg.batch_size]
            imgs, tgts, boxes = [], [], []
            for i in idxs:
                params = augmod.sample_params(aug_cfg, sample_index=int(i), epoch=epoch)
                s = augmod.apply(train_set[int(i)], params)
                img, tgt, box = _sample_arrays(s)
                imgs.append(img)
                tgts.append(tgt)
                boxes.append(box)
            x = Tensor(np.stack(imgs).astype(np.float32))
            t = Tensor(np.stack(tgts).astype(np.float32))
            b = Tensor(np.stack(boxes).astype(np.float32))
            logits = forward(model, x, b, mode="train", rng=dropout_rng)
            loss = dice_ce_loss(logits, t, loss_cfg)
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                report.diagnostic = (
                    f"non-finite loss at epoch {epoch}, step {start // train_cfg.batch_size}; "
                    "stopped with the best checkpoint so far"
                )
                aborted = True
                break
            model.zero_grads()
            loss.backward()
            ndiff.adam_step(model.params, model.gradients(), adam)
            model.zero_grads()
            epoch_losses.append(loss_val)
        if aborted:
            break

        dscs = []
        for s in val_set:
            img, tgt, box = _sample_arrays(s)
            pred = _predict_mask_array(model, img[None, ...], box[None, ...])
            dscs.append(metrics.dice_score(pred[0], tgt[0]))
        val_dsc = float(np.mean(dscs))
        report.history.append(
            {"epoch": epoch, "train_loss": float(np.mean(epoch_losses)), "val_dsc": val_dsc}
        )
        if val_dsc > best_dsc:
            best_dsc = val_dsc
            best_epoch = epoch
            best_params = {k: p.data.copy() for k, p in model.params.items()}
            epochs_since_improvement = 0
        else:
            epochs_since_improvement += 1
            if epochs_since_improvement >= train_cfg.patience:
                break

    for k, p in model.params.items():
        p.data = best_params[k]
    report.best_val_dsc = max(best_dsc, 0.0)
    report.epoch_of_best = best_epoch
    return model, report


def _fold_partition(ids: list[str], folds: int, seed: int) -> list[list[str]]:
    """Deterministic id-keyed partition: sort, shuffle with the fold seed,
    split into near-equal contiguous chunks."""
    ordered = sorted(ids)
    perm = make_rng(seed, 0xF01D).permutation(len(ordered))
    shuffled = [ordered[i] for i in perm]
    base = len(ordered) // folds
    extra = len(ordered) % folds
    out = []
    at = 0
    for f in range(folds):
        size = base + (1 if f < extra else 0)
        out.append(shuffled[at : at + size])
        at += size
    return out


def cross_validate(
    dataset: Sequence[PreprocessedSample],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    loss_cfg: Optional[LossConfig] = None,
) -> tuple[list[RaSegModel], list[FoldReport], dict]:
    """K-fold cross-validation; returns per-fold models, reports, and a
    mean +/- sample-std DSC summary."""
    train_cfg.validate()
    if len(dataset) < train_cfg.folds:
        raise ValidationError(
            f"dataset of {len(dataset)} samples cannot support {train_cfg.folds} folds"
        )
    ids = [s.sample_id or f"idx{idx}" for idx, s in enumerate(dataset)]
    if len(set(ids)) != len(ids):
        raise ValidationError("sample ids must be unique for fold partitioning")
    by_id = {i: s for i, s in zip(ids, dataset)}
    partition = _fold_partition(ids, train_cfg.folds, train_cfg.seed)

    models: list[RaSegModel] = []
    reports: list[FoldReport] = []
    for f, val_ids in enumerate(partition):
        val_set = [by_id[i] for i in val_ids]
        train_set = [by_id[i] for i in ids if i not in set(val_ids)]
        model, report = train_fold(
            train_set, val_set, model_cfg, train_cfg, loss_cfg, fold_index=f
        )
        models.append(model)
        reports.append(report)

    dscs = np.array([r.best_val_dsc for r in reports], dtype=np.float64)
    summary = {
        "folds": train_cfg.folds,
        "mean_dsc": float(dscs.mean()),
        "std_dsc": float(dscs.std(ddof=1)) if len(dscs) > 1 else 0.0,
        "per_fold_dsc": [float(d) for d in dscs],
    }
    return models, reports, summary


def infer(model: RaSegModel, image: Volume, bbox: Optional[Volume] = None) -> Volume:
    """Eval-mode forward and channel argmax; bbox defaults to all-ones."""
    img = image.data[None, None, ...]
    box = bbox.data[None, None, ...] if bbox is not None else None
    pred = _predict_mask_array(model, img, box)
    return Volume(pred[0].astype(np.float32), image.spacing, image.origin)


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | os.PathLike, model: RaSegModel,
                    adam: Optional[ndiff.AdamState] = None) -> None:
    arrays = dict(model.state_arrays())
    meta: dict = {"kind": "raseg-checkpoint", "model_config": model.config.to_dict()}
    if adam is not None:
        for name, m in adam.m.items():
            arrays[f"adam.m.{name}"] = m
        for name, v in adam.v.items():
            arrays[f"adam.v.{name}"] = v
        meta["adam"] = {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2,
                        "eps": adam.eps, "step": adam.step}
    ndiff.save_archive(path, arrays, meta)


def load_checkpoint(path: str | os.PathLike) -> tuple[RaSegModel, Optional[ndiff.AdamState]]:
    arrays, meta = ndiff.load_archive(path)
    if meta.get("kind") != "raseg-checkpoint":
        raise ValidationError(f"{path} is not a model checkpoint")
    cfg = ModelConfig.from_dict(meta["model_config"])
    params = {}
    adam_m, adam_v = {}, {}
    for name, arr in arrays.items():
        if name.startswith("adam.m."):
            adam_m[name[len("adam.m."):]] = arr
        elif name.startswith("adam.v."):
            adam_v[name[len("adam.v."):]] = arr
        else:
            params[name] = Tensor(arr.astype(np.float32), requires_grad=True, name=name)
    model = RaSegModel(config=cfg, params=params)
    adam = None
    if "adam" in meta:
        h = meta["adam"]
        adam = ndiff.AdamState(lr=h["lr"], beta1=h["beta1"], beta2=h["beta2"], eps=h["eps"],
                               step=h["step"], m=adam_m, v=adam_v)
    return model, adam


def write_fold_reports(out_dir: str | os.PathLike, reports: list[FoldReport], summary: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    payload = {"summary": summary, "folds": [r.to_dict() for r in reports]}
    with open(os.path.join(out_dir, "fold_reports.json"), "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    lines = ["fold,dsc"]
    for r in reports:
        lines.append(f"{r.fold_index},{r.best_val_dsc:.6f}")
    with open(os.path.join(out_dir, "metrics.csv"), "w") as f:
        f.write("\n".join(lines) + "\n")
