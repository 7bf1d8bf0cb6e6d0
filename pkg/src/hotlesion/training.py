"""Training loop: strategy-driven batch assembly, Adam with exponential decay,
prototype updates by the same gradient steps, best-checkpoint selection on
validation level-3 macro-F1, deterministic step-level logging."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from . import taxonomy as tx
from .errors import DivergedLoss, EmptyTrainSet, InvalidConfig
from .losses import (
    Batch,
    LossConfig,
    MixupSample,
    MIXUP_STRATEGIES,
    batch_objective,
    mixup_image,
    sample_lambda,
    select_mixup_pairs,
)
from .model import HierarchicalModel, LabelMaps, ModelConfig, init_model
from .synthgen import load_png


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    initial_lr: float = 1e-4
    lr_decay: float = 0.95  # exponential factor per epoch
    epochs: int = 15
    augment_crop: bool = True
    augment_flip: bool = True
    crop_scale_min: float = 0.8
    flip_prob: float = 0.5
    strategy: str = "MX5"
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    val_metric: str = "macro_f1"  # or "accuracy"

    def __post_init__(self):
        if self.strategy not in MIXUP_STRATEGIES:
            raise InvalidConfig(f"unknown mixup strategy {self.strategy!r}")
        if self.initial_lr <= 0 or not 0 < self.lr_decay <= 1:
            raise InvalidConfig("bad learning-rate schedule")
        if self.strategy != "none" and self.batch_size < 2:
            raise InvalidConfig("mixup needs batch_size >= 2")

    def to_items(self, prefix: str = "train.") -> dict[str, str]:
        return {
            f"{prefix}batch_size": str(self.batch_size),
            f"{prefix}initial_lr": repr(self.initial_lr),
            f"{prefix}lr_decay": repr(self.lr_decay),
            f"{prefix}epochs": str(self.epochs),
            f"{prefix}strategy": self.strategy,
            f"{prefix}seed": str(self.seed),
            f"{prefix}p_mix": repr(self.loss.p_mix),
            f"{prefix}mixup_alpha": repr(self.loss.mixup_alpha),
            f"{prefix}lambda_mse": repr(self.loss.lambda_mse),
            f"{prefix}gamma": repr(self.loss.gamma),
            f"{prefix}val_metric": self.val_metric,
        }


class ImageStore:
    """Loads manifest images as float32 CHW tensors, caching them as uint8
    (4x smaller; the uint8 -> float32/255 conversion reproduces load_png
    bit-exactly)."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self._cache: dict[str, torch.Tensor] = {}

    def get(self, ref: str) -> torch.Tensor:
        hit = self._cache.get(ref)
        if hit is None:
            arr = load_png(self.root / ref)
            hit = torch.from_numpy((arr * 255.0).astype("uint8")).permute(2, 0, 1).contiguous()
            self._cache[ref] = hit
        return hit.to(torch.float32) / 255.0

    def views(self, rec: tx.LesionRecord, modality: str) -> tuple[torch.Tensor, torch.Tensor | None]:
        if modality == "clinical":
            return self.get(rec.clinical_ref), None
        if modality == "dermoscopic":
            return self.get(rec.dermoscopic_ref), None
        return self.get(rec.clinical_ref), self.get(rec.dermoscopic_ref)


def _augment(img: torch.Tensor, cfg: TrainConfig, rng: np.random.Generator) -> torch.Tensor:
    out = img
    if cfg.augment_crop:
        scale = rng.uniform(cfg.crop_scale_min, 1.0)
        size = out.shape[-1]
        crop = max(8, int(round(size * scale)))
        if crop < size:
            y0 = int(rng.integers(0, size - crop + 1))
            x0 = int(rng.integers(0, size - crop + 1))
            window = out[:, y0 : y0 + crop, x0 : x0 + crop].unsqueeze(0)
            out = torch.nn.functional.interpolate(
                window, size=(size, size), mode="bilinear", align_corners=False
            ).squeeze(0)
    if cfg.augment_flip and rng.random() < cfg.flip_prob:
        out = torch.flip(out, dims=[-1])
    return out


def make_epoch_batches(
    records: list[tx.LesionRecord],
    partition: tx.SubsetPartition,
    cfg: TrainConfig,
    store: ImageStore,
    modality: str,
    rng: np.random.Generator,
    augment: bool = True,
):
    """Yield Batch objects for one epoch: natural-distribution shuffle, then
    per-batch mixup pair selection. Exactly ceil(N / batch_size) batches."""
    order = rng.permutation(len(records))
    for start in range(0, len(records), cfg.batch_size):
        idx = order[start : start + cfg.batch_size].tolist()
        labels_l3 = [records[i].label.l3 for i in idx]
        pairs, singles = select_mixup_pairs(
            labels_l3, partition, cfg.strategy, cfg.loss.p_mix, rng
        )

        views = []
        for i in idx:
            v1, v2 = store.views(records[i], modality)
            if augment:
                v1 = _augment(v1, cfg, rng)
                v2 = None if v2 is None else _augment(v2, cfg, rng)
            views.append((v1, v2))

        multimodal = modality == "multimodal"
        plain_x = torch.stack([views[i][0] for i in singles]) if singles else torch.zeros(
            (0, *views[0][0].shape)
        )
        plain_x2 = (
            torch.stack([views[i][1] for i in singles])
            if multimodal and singles
            else (torch.zeros((0, *views[0][0].shape)) if multimodal else None)
        )
        mixups = []
        for i, j in pairs:
            lam = sample_lambda(cfg.loss.mixup_alpha, rng)
            m = MixupSample(
                x_mix=mixup_image(views[i][0], views[j][0], lam),
                i=i,
                j=j,
                lam=lam,
                labels_i=records[idx[i]].label,
                labels_j=records[idx[j]].label,
                x_mix2=mixup_image(views[i][1], views[j][1], lam) if multimodal else None,
            )
            mixups.append(m)
        yield Batch(
            plain_x=plain_x,
            plain_labels=[records[idx[i]].label for i in singles],
            mixups=mixups,
            plain_x2=plain_x2,
        )


@dataclass
class TrainResult:
    model: HierarchicalModel
    log: list[dict]
    best_epoch: int
    best_metric: float
    checkpoint_dir: Path | None = None


def _val_metrics(model, records, store, modality, maps: LabelMaps, taxonomy, gamma):
    from .evaluation import predictions_for, macro_prf

    preds = predictions_for(model, records, store, modality, maps, gamma)
    y_true = [maps.class_of(r.label.l3) for r in records]
    acc = {}
    for level, key in ((0, "l1"), (1, "l2")):
        if preds[key] is None:
            acc[key] = float("nan")
            continue
        truth = [getattr(r.label, key) for r in records]
        acc[key] = float(np.mean(np.array(preds[key]) == np.array(truth)))
    acc["l3"] = float(np.mean(np.array(preds["l3"]) == np.array(y_true)))
    p, r, f1, _ = macro_prf(y_true, preds["l3"])
    return {"acc_l1": acc["l1"], "acc_l2": acc["l2"], "acc_l3": acc["l3"], "macro_f1_l3": f1}


def train(
    records: list[tx.LesionRecord],
    taxonomy: tx.Taxonomy,
    partition: tx.SubsetPartition,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    data_root: str | Path,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Train on the manifest's train split, select the best epoch on the
    validation split, optionally save a checkpoint. Deterministic in seed."""
    train_recs = [r for r in records if r.split == "train"]
    val_recs = [r for r in records if r.split == "val"]
    if not train_recs:
        raise EmptyTrainSet("no records in the train split")
    maps = LabelMaps.from_taxonomy(taxonomy)
    for r in train_recs + val_recs:
        assert not r.is_unknown and taxonomy.id_flags[r.label.l3], (
            f"record {r.lesion_id} with OOD/unknown label reached training"
        )

    store = ImageStore(data_root)
    model = init_model(model_cfg, train_cfg.seed)
    opt = torch.optim.Adam(
        model.parameters(), lr=train_cfg.initial_lr, betas=(0.9, 0.999), eps=1e-8
    )
    rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 0x7A]))

    def classes(path: tx.LabelPath):
        return path.l1, path.l2, maps.class_of(path.l3)

    log: list[dict] = []
    best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    best_metric, best_epoch = -math.inf, -1
    step = 0
    for epoch in range(train_cfg.epochs):
        lr = train_cfg.initial_lr * train_cfg.lr_decay**epoch
        for group in opt.param_groups:
            group["lr"] = lr
        model.train()
        for batch in make_epoch_batches(
            train_recs, partition, train_cfg, store, model_cfg.modality, rng
        ):
            x, x2 = batch.stacked()
            outputs = model(x, x2)
            bank = getattr(model, "prototypes", None)
            loss, terms = batch_objective(
                outputs, batch, classes, model_cfg.variant, train_cfg.loss, bank
            )
            if not torch.isfinite(loss):
                raise DivergedLoss(f"non-finite loss at epoch {epoch} step {step}: {terms}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            log.append(
                {
                    "kind": "step",
                    "epoch": epoch,
                    "step": step,
                    "loss": float(loss.detach()),
                    "lr": lr,
                    "terms": terms,
                    "n_mixup": len(batch.mixups),
                }
            )
            step += 1
        model.eval()
        if val_recs:
            metrics = _val_metrics(
                model, val_recs, store, model_cfg.modality, maps, taxonomy, train_cfg.loss.gamma
            )
        else:
            metrics = {"acc_l1": float("nan"), "acc_l2": float("nan"), "acc_l3": 0.0, "macro_f1_l3": 0.0}
        selector = metrics["macro_f1_l3"] if train_cfg.val_metric == "macro_f1" else metrics["acc_l3"]
        log.append({"kind": "epoch", "epoch": epoch, "lr": lr, **metrics})
        if selector > best_metric:
            best_metric = selector
            best_epoch = epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}

    if train_cfg.epochs > 0:
        model.load_state_dict(best_state)
    model.eval()

    ckpt_dir = None
    if out_dir is not None:
        items = model_cfg.to_items()
        items.update(train_cfg.to_items())
        items["id_names"] = "\t".join(taxonomy.level3_names[i] for i in maps.id_l3)
        ckpt_dir = ckpt.save_checkpoint(out_dir, model, items, taxonomy)
        write_train_log(log, Path(out_dir) / "train_log.jsonl")
    return TrainResult(
        model=model,
        log=log,
        best_epoch=best_epoch,
        best_metric=best_metric if best_epoch >= 0 else 0.0,
        checkpoint_dir=ckpt_dir,
    )


def write_train_log(log: list[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for entry in log:
            fh.write(json.dumps(entry) + "\n")


def ablation_grid(
    records: list[tx.LesionRecord],
    taxonomy: tx.Taxonomy,
    partition: tx.SubsetPartition,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    data_root: str | Path,
    strategies: list[str],
    seeds: list[int] | None = None,
) -> list[dict]:
    """OOD AUROC per mixup strategy on the reserved-category OOD set.

    Strategy ``none`` trains the plain hierarchical variant (no prototypes);
    every other strategy trains the prototype variant routed by that strategy.
    Reports the median AUROC over seeds.
    """
    from dataclasses import replace

    from .evaluation import eval_ood

    seeds = seeds or [train_cfg.seed]
    store = ImageStore(data_root)
    maps = LabelMaps.from_taxonomy(taxonomy)
    id_test = [r for r in records if r.split == "test"]
    ood_17 = [r for r in records if r.split == "ood_test" and not r.is_unknown]
    ood_unk = [r for r in records if r.split == "ood_test" and r.is_unknown]
    rows = []
    for strategy in strategies:
        variant = "hierarchical" if strategy == "none" else "hierarchical_mpl"
        aurocs = []
        for seed in seeds:
            mc = replace(model_cfg, variant=variant)
            tc = replace(train_cfg, strategy=strategy, seed=seed)
            result = train(records, taxonomy, partition, mc, tc, data_root)
            report = eval_ood(
                result.model, id_test, ood_17, ood_unk, store, mc.modality, maps, tc.loss.gamma
            )
            aurocs.append(report["auroc_ood17"])
        rows.append(
            {
                "strategy": strategy,
                "variant": variant,
                "auroc_ood17": float(np.median(aurocs)),
                "seeds": list(seeds),
            }
        )
    return rows
