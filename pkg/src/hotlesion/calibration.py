"""Post-training threshold calibration.

OOD threshold: sweep the level-3 confidence threshold over 0.00..1.00 in
steps of 0.01; an image is predicted In-Distribution iff its score >= t
(ID is the positive class, so TPR counts ID images kept and FPR counts OOD
images mistakenly kept). The operating point comes from a policy: Youden's
J (default) or a TPR target.

Triage threshold: over correctly predicted validation images, the mean of
each image's minimum squared distance to the prototype bank.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import (
    EmptyScores,
    NoCorrectPredictions,
    UnreachableTarget,
    VariantMismatch,
)

GRID = np.round(np.arange(0, 101) * 0.01, 2)


@dataclass(frozen=True)
class SweepCurve:
    thresholds: np.ndarray  # 101 points, 0.00..1.00
    tpr: np.ndarray
    fpr: np.ndarray


@dataclass(frozen=True)
class Thresholds:
    t_ood: float
    t_triage: float


def _as_scores(values) -> np.ndarray:
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        raise EmptyScores("empty score list")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("scores must lie in [0,1]")
    return arr


def tpr_fpr_sweep(id_scores, ood_scores) -> SweepCurve:
    ids = _as_scores(id_scores)
    oods = _as_scores(ood_scores)
    tpr = np.array([(ids >= t).mean() for t in GRID])
    fpr = np.array([(oods >= t).mean() for t in GRID])
    return SweepCurve(thresholds=GRID.copy(), tpr=tpr, fpr=fpr)


def auroc(id_scores, ood_scores) -> float:
    """Probability a random ID score exceeds a random OOD score, ties half.

    Computed with the rank (Mann-Whitney) formulation, exact under ties.
    """
    ids = _as_scores(id_scores)
    oods = _as_scores(ood_scores)
    combined = np.concatenate([ids, oods])
    order = np.argsort(combined, kind="mergesort")
    ranks = np.empty(len(combined), dtype=np.float64)
    ranks[order] = np.arange(1, len(combined) + 1)
    # average ranks within tie groups
    sorted_vals = combined[order]
    i = 0
    while i < len(sorted_vals):
        j = i
        while j + 1 < len(sorted_vals) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        if j > i:
            ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    r_id = ranks[: len(ids)].sum()
    u = r_id - len(ids) * (len(ids) + 1) / 2.0
    return float(u / (len(ids) * len(oods)))


def select_ood_threshold(curve: SweepCurve, policy: str = "youden") -> float:
    """Pick the operating threshold from a sweep.

    ``youden``: argmax of TPR - FPR over the grid, ties broken toward the
    lower threshold. ``target_tpr:<q>``: the highest grid threshold still
    achieving TPR >= q (the most OOD filtering compatible with the target).
    """
    if policy == "youden":
        j = curve.tpr - curve.fpr
        return float(curve.thresholds[int(np.argmax(j))])
    if policy.startswith("target_tpr"):
        try:
            q = float(policy.split(":", 1)[1])
        except (IndexError, ValueError):
            raise ValueError(f"bad policy {policy!r}; expected target_tpr:<q>") from None
        ok = np.nonzero(curve.tpr >= q)[0]
        if ok.size == 0:
            raise UnreachableTarget(f"no threshold reaches TPR >= {q}")
        return float(curve.thresholds[int(ok.max())])
    raise ValueError(f"unknown policy {policy!r}")


def calibrate_checkpoint(
    ckpt_dir,
    records,
    data_root,
    policy: str = "youden",
    paper_faithful_sweep: bool = False,
) -> Thresholds:
    """Compute and persist t_ood and t_triage for a trained checkpoint.

    t_ood: sweep over validation-ID vs a held-out slice (every second record)
    of the ood_test set; ``paper_faithful_sweep`` uses test-ID vs the full OOD
    set instead. t_triage: mean minimum prototype distance over correctly
    predicted validation images (prototype variant only; +inf otherwise so the
    distance rule never fires).
    """
    from . import checkpoint as ckpt
    from .evaluation import forward_records, level3_scores
    from .model import LabelMaps, ModelConfig, init_model
    from .training import ImageStore

    meta = ckpt.load_meta(ckpt_dir)
    cfg = ModelConfig.from_items(meta)
    model = init_model(cfg, seed=0)
    ckpt.load_state(ckpt_dir, model)
    model.eval()
    maps = LabelMaps.from_taxonomy(ckpt.load_taxonomy(ckpt_dir))
    store = ImageStore(data_root)

    val = [r for r in records if r.split == "val"]
    ood = [r for r in records if r.split == "ood_test"]
    if paper_faithful_sweep:
        id_side = [r for r in records if r.split == "test"]
        ood_side = ood
    else:
        id_side = val
        ood_side = ood[::2]

    def scores(rs):
        fwd = forward_records(model, rs, store, cfg.modality)
        conf, _ = level3_scores(model, fwd, cfg.gamma)
        return conf

    curve = tpr_fpr_sweep(scores(id_side), scores(ood_side))
    t_ood = select_ood_threshold(curve, policy=policy)
    if cfg.variant == "hierarchical_mpl":
        t_triage = compute_triage_threshold(model, val, store, cfg.modality, maps, cfg.gamma)
    else:
        t_triage = float("inf")
    ckpt.update_meta(
        ckpt_dir,
        {"thresholds.t_ood": repr(float(t_ood)), "thresholds.t_triage": repr(float(t_triage))},
    )
    return Thresholds(t_ood=float(t_ood), t_triage=float(t_triage))


def compute_triage_threshold(
    model,
    records,
    store,
    modality: str,
    maps,
    gamma: float,
    batch: int = 64,
) -> float:
    """Mean minimum prototype distance over correctly predicted validation images."""
    if getattr(model, "prototypes", None) is None:
        raise VariantMismatch("triage threshold requires the prototype variant")
    if not records:
        raise EmptyScores("empty validation set")
    mins = []
    with torch.no_grad():
        for start in range(0, len(records), batch):
            chunk = records[start : start + batch]
            v1 = torch.stack([store.views(r, modality)[0] for r in chunk])
            v2 = None
            if modality == "multimodal":
                v2 = torch.stack([store.views(r, modality)[1] for r in chunk])
            out = model(v1, v2)
            diff = out.latent_l3.unsqueeze(1) - model.prototypes.unsqueeze(0)
            dists = (diff * diff).sum(-1)  # B x K
            pred = dists.argmin(dim=1)
            truth = torch.tensor([maps.class_of(r.label.l3) for r in chunk])
            correct = pred == truth
            if correct.any():
                mins.append(dists[correct].min(dim=1).values)
    if not mins:
        raise NoCorrectPredictions("no correctly predicted validation images")
    return float(torch.cat(mins).mean())
