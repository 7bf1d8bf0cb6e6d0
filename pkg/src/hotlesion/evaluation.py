"""Quantitative analyses: per-level macro P/R/F1, OOD AUROC, intra/inter-class
distance studies, confidence histograms, triage effectiveness and per-category
focused reports."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from . import taxonomy as tx
from .calibration import auroc
from .errors import EmptySet, InsufficientSamples, UnknownCategory
from .inference import Engine
from .model import HierarchicalModel, LabelMaps, level3_confidence

HIST_BINS = 50


# -- batched forward helpers ---------------------------------------------------


def forward_records(
    model: HierarchicalModel, records, store, modality: str, batch: int = 64
):
    """Concatenated outputs over records: dict of logits/latents arrays."""
    logits1, logits2, logits3, latents = [], [], [], []
    with torch.no_grad():
        for start in range(0, len(records), batch):
            chunk = records[start : start + batch]
            v1 = torch.stack([store.views(r, modality)[0] for r in chunk])
            v2 = None
            if modality == "multimodal":
                v2 = torch.stack([store.views(r, modality)[1] for r in chunk])
            out = model(v1, v2)
            if out.logits_l1 is not None:
                logits1.append(out.logits_l1)
                logits2.append(out.logits_l2)
            if out.logits_l3 is not None:
                logits3.append(out.logits_l3)
            latents.append(out.latents)
    return {
        "logits_l1": torch.cat(logits1) if logits1 else None,
        "logits_l2": torch.cat(logits2) if logits2 else None,
        "logits_l3": torch.cat(logits3) if logits3 else None,
        "latents": torch.cat(latents),
    }


def level3_scores(model, fwd, gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """(confidence, predicted class) arrays from a forward_records result."""
    bank = getattr(model, "prototypes", None)
    with torch.no_grad():
        if bank is not None:
            diff = fwd["latents"][:, 2].unsqueeze(1) - bank.unsqueeze(0)
            dists = (diff * diff).sum(-1)
            probs = F.softmax(-gamma * dists, dim=-1)
            conf, _ = probs.max(dim=-1)
            pred = dists.argmin(dim=-1)
        else:
            probs = F.softmax(fwd["logits_l3"], dim=-1)
            conf, pred = probs.max(dim=-1)
    return conf.numpy(), pred.numpy()


def predictions_for(model, records, store, modality, maps: LabelMaps, gamma: float):
    fwd = forward_records(model, records, store, modality)
    conf3, pred3 = level3_scores(model, fwd, gamma)
    preds = {"l3": pred3.tolist(), "conf_l3": conf3.tolist()}
    if fwd["logits_l1"] is not None:
        preds["l1"] = fwd["logits_l1"].argmax(dim=-1).tolist()
        preds["l2"] = fwd["logits_l2"].argmax(dim=-1).tolist()
    else:  # singular: caller derives ancestors from the level-3 prediction
        preds["l1"] = None
        preds["l2"] = None
    return preds


# -- macro metrics ---------------------------------------------------------------


def macro_prf(y_true, y_pred) -> tuple[float, float, float, dict]:
    """Macro precision/recall/F1 over the categories present in y_true.

    Per category: P = TP/(TP+FP), R = TP/(TP+FN) with 0/0 read as 0;
    F1 is the harmonic mean of that category's P and R.
    """
    y_true = list(y_true)
    y_pred = list(y_pred)
    cats = sorted(set(y_true))
    rows = {}
    for c in cats:
        tp = sum(1 for t, p in zip(y_true, y_pred) if t == c and p == c)
        fp = sum(1 for t, p in zip(y_true, y_pred) if t != c and p == c)
        fn = sum(1 for t, p in zip(y_true, y_pred) if t == c and p != c)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        rows[c] = {"precision": prec, "recall": rec, "f1": f1, "support": tp + fn}
    if not rows:
        raise EmptySet("no categories present")
    p = float(np.mean([r["precision"] for r in rows.values()]))
    r = float(np.mean([r["recall"] for r in rows.values()]))
    f = float(np.mean([r["f1"] for r in rows.values()]))
    return p, r, f, rows


@dataclass
class LevelMetrics:
    levels: dict[str, dict]  # "l1"/"l2"/"l3" -> {precision, recall, f1, per_category}


def eval_levels(
    model, records, store, modality: str, taxonomy: tx.Taxonomy, maps: LabelMaps, gamma: float
) -> LevelMetrics:
    if not records:
        raise EmptySet("no records to evaluate")
    preds = predictions_for(model, records, store, modality, maps, gamma)
    pred3 = preds["l3"]
    if preds["l1"] is None:
        pred1, pred2 = [], []
        for c in pred3:
            path = taxonomy.label_path(maps.id_l3[c])
            pred1.append(path.l1)
            pred2.append(path.l2)
    else:
        pred1, pred2 = preds["l1"], preds["l2"]
    out = {}
    for key, pred, truth in (
        ("l1", pred1, [r.label.l1 for r in records]),
        ("l2", pred2, [r.label.l2 for r in records]),
        ("l3", pred3, [maps.class_of(r.label.l3) for r in records]),
    ):
        p, r, f, rows = macro_prf(truth, pred)
        out[key] = {"precision": p, "recall": r, "f1": f, "per_category": rows}
    return LevelMetrics(levels=out)


# -- OOD evaluation ---------------------------------------------------------------


def eval_ood(model, id_records, ood17_records, unk_records, store, modality, maps, gamma):
    """AUROC of ID-vs-OOD separation for both OOD sets, plus the raw scores."""
    if not id_records:
        raise EmptySet("empty ID test set")

    def scores(records):
        if not records:
            return np.array([])
        fwd = forward_records(model, records, store, modality)
        conf, _ = level3_scores(model, fwd, gamma)
        return conf

    s_id = scores(id_records)
    s_17 = scores(ood17_records)
    s_unk = scores(unk_records)
    report = {
        "scores_id": s_id,
        "scores_ood17": s_17,
        "scores_unk": s_unk,
        "auroc_ood17": auroc(s_id, s_17) if s_17.size else float("nan"),
        "auroc_unk": auroc(s_id, s_unk) if s_unk.size else float("nan"),
    }
    return report


# -- latent distance studies --------------------------------------------------------


def _normalize(rows: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(rows, axis=-1, keepdims=True)
    return rows / np.maximum(norms, 1e-12)


def centroid_distances(embeddings: np.ndarray) -> float:
    """Mean Euclidean distance of rows to their centroid (no normalization)."""
    centroid = embeddings.mean(axis=0)
    return float(np.linalg.norm(embeddings - centroid, axis=1).mean())


def pairwise_centroid_matrix(centroids: np.ndarray) -> np.ndarray:
    diff = centroids[:, None, :] - centroids[None, :, :]
    return np.linalg.norm(diff, axis=-1)


@dataclass
class DistanceReport:
    per_category: dict[int, float]  # intra-class distance by category
    intra_min: float
    intra_max: float
    intra_mean: float
    matrix: np.ndarray | None = None  # inter-class distances
    inter_mean: float | None = None
    categories: list[int] | None = None


def _level_embeddings(model, records, store, modality, level: int) -> np.ndarray:
    fwd = forward_records(model, records, store, modality)
    return fwd["latents"][:, level - 1].numpy()


def intra_class(
    model, records, store, modality: str, level: int, labels: list[int], min_samples: int = 2
) -> DistanceReport:
    """Per-category mean distance of unit-normalized embeddings to their centroid."""
    embs = _normalize(_level_embeddings(model, records, store, modality, level))
    labels = np.asarray(labels)
    per = {}
    for c in sorted(set(labels.tolist())):
        rows = embs[labels == c]
        if len(rows) < min_samples:
            continue  # skipped with warning semantics; too few samples
        per[c] = centroid_distances(rows)
    if not per:
        raise InsufficientSamples("no category has enough samples")
    values = list(per.values())
    return DistanceReport(
        per_category=per,
        intra_min=float(min(values)),
        intra_max=float(max(values)),
        intra_mean=float(np.mean(values)),
    )


def inter_class(
    model, records, store, modality: str, level: int, labels: list[int], min_samples: int = 2
) -> DistanceReport:
    """Pairwise distances between unit-normalized category centroids."""
    embs = _normalize(_level_embeddings(model, records, store, modality, level))
    labels = np.asarray(labels)
    cats, cents = [], []
    for c in sorted(set(labels.tolist())):
        rows = embs[labels == c]
        if len(rows) < min_samples:
            continue
        cats.append(c)
        cents.append(_normalize(rows.mean(axis=0)[None, :])[0])
    if len(cats) < 2:
        raise InsufficientSamples("need at least two categories with enough samples")
    matrix = pairwise_centroid_matrix(np.stack(cents))
    off = matrix[~np.eye(len(cats), dtype=bool)]
    intra = {c: 0.0 for c in cats}
    return DistanceReport(
        per_category=intra,
        intra_min=0.0,
        intra_max=0.0,
        intra_mean=0.0,
        matrix=matrix,
        inter_mean=float(off.mean()),
        categories=cats,
    )


# -- confidence histograms --------------------------------------------------------


def confidence_histograms(model, record_sets: dict[str, list], store, modality, maps, gamma):
    """Normalized 50-bin histograms over [0,1] of per-level confidences per set."""
    edges = np.linspace(0.0, 1.0, HIST_BINS + 1)
    out: dict[str, dict[str, np.ndarray]] = {}
    for name, records in record_sets.items():
        if not records:
            raise EmptySet(f"record set {name!r} is empty")
        fwd = forward_records(model, records, store, modality)
        per_level = {}
        conf3, _ = level3_scores(model, fwd, gamma)
        per_level["l3"] = conf3
        if fwd["logits_l1"] is not None:
            per_level["l1"] = F.softmax(fwd["logits_l1"], dim=-1).max(dim=-1).values.numpy()
            per_level["l2"] = F.softmax(fwd["logits_l2"], dim=-1).max(dim=-1).values.numpy()
        hists = {}
        for level, conf in per_level.items():
            h, _ = np.histogram(np.clip(conf, 0.0, 1.0), bins=edges)
            hists[level] = h / h.sum()
        out[name] = {"histograms": hists, "mean": {k: float(v.mean()) for k, v in per_level.items()}}
    return out


# -- triage effectiveness -----------------------------------------------------------


@dataclass
class TriageReport:
    fraction_triaged: float
    triaged: dict[str, dict]  # modality -> {precision, recall, f1}
    non_triaged: dict[str, dict]
    increments_triaged: dict[str, dict]  # vs clinical-only, per modality
    increments_non_triaged: dict[str, dict]
    n_triaged: int
    n_total: int


def _subset_metrics(engine: Engine, records, store, maps, mask):
    """Level-3 macro metrics per modality on a subset of the ID test set."""
    chosen = [r for r, m in zip(records, mask) if m]
    out = {}
    for role in ("clinical", "dermoscopic", "multimodal"):
        model = engine.models.get(role)
        if model is None or not chosen:
            continue
        gamma = engine.configs[role].gamma
        preds = predictions_for(model, chosen, store, role, maps, gamma)
        truth = [maps.class_of(r.label.l3) for r in chosen]
        p, r, f, _ = macro_prf(truth, preds["l3"])
        key = "combined" if role == "multimodal" else role
        out[key] = {"precision": p, "recall": r, "f1": f}
    return out


def triage_effectiveness(engine: Engine, records, store) -> TriageReport:
    """Partition ID test records by the clinical pass's triage flag and compare
    per-modality metrics on both subsets."""
    if not records:
        raise EmptySet("no ID test records")
    maps = engine.maps
    flags = []
    for r in records:
        img = store.views(r, "clinical")[0].permute(1, 2, 0).numpy()
        decision = engine.diagnose_clinical(img)
        flags.append(decision.triage_recommended)
    flags = np.asarray(flags)
    triaged = _subset_metrics(engine, records, store, maps, flags)
    non_triaged = _subset_metrics(engine, records, store, maps, ~flags)

    def increments(block):
        base = block.get("clinical")
        if base is None:
            return {}
        return {
            k: {m: block[k][m] - base[m] for m in ("precision", "recall", "f1")}
            for k in block
            if k != "clinical"
        }

    return TriageReport(
        fraction_triaged=float(flags.mean()),
        triaged=triaged,
        non_triaged=non_triaged,
        increments_triaged=increments(triaged),
        increments_non_triaged=increments(non_triaged),
        n_triaged=int(flags.sum()),
        n_total=len(records),
    )


# -- focused category report ---------------------------------------------------------


def category_report(engine: Engine, records, store, category: str) -> dict:
    """Intra-class distance, top-5 inter-class matrix and triage stats for one
    level-3 category of the ID test set."""
    taxonomy = engine.taxonomy
    if category not in taxonomy.level3_names:
        raise UnknownCategory(f"unknown category {category!r}")
    cat_idx = taxonomy.level3_names.index(category)
    maps = engine.maps
    cat_records = [r for r in records if r.label is not None and r.label.l3 == cat_idx]
    if not cat_records:
        raise UnknownCategory(f"category {category!r} has no test records")

    role = "clinical" if "clinical" in engine.models else next(iter(engine.models))
    model = engine.models[role]
    gamma = engine.configs[role].gamma

    report: dict = {"category": category, "n_records": len(cat_records)}

    # intra-class distance (skipped for singleton categories)
    if len(cat_records) >= 2:
        embs = _normalize(_level_embeddings(model, cat_records, store, role, level=3))
        report["intra_class"] = centroid_distances(embs)
    else:
        report["intra_class"] = None

    # top-5 categories by mean predicted confidence over this category's images
    fwd = forward_records(model, cat_records, store, role)
    bank = getattr(model, "prototypes", None)
    with torch.no_grad():
        if bank is not None:
            diff = fwd["latents"][:, 2].unsqueeze(1) - bank.unsqueeze(0)
            probs = F.softmax(-gamma * (diff * diff).sum(-1), dim=-1)
        else:
            probs = F.softmax(fwd["logits_l3"], dim=-1)
        mean_conf = probs.mean(dim=0).numpy()
    top5 = np.argsort(-mean_conf)[:5].tolist()
    report["top5_categories"] = [taxonomy.level3_names[maps.id_l3[c]] for c in top5]

    # inter-class matrix between the top-5, from all test records of those categories
    top5_tax = {maps.id_l3[c] for c in top5}
    pool = [r for r in records if r.label is not None and r.label.l3 in top5_tax]
    labels = [r.label.l3 for r in pool]
    try:
        inter = inter_class(model, pool, store, role, level=3, labels=labels)
        report["top5_matrix"] = inter.matrix
        report["top5_inter_mean"] = inter.inter_mean
    except InsufficientSamples:
        report["top5_matrix"] = None
        report["top5_inter_mean"] = None

    # triage stats restricted to the category
    flags = []
    for r in cat_records:
        img = store.views(r, "clinical")[0].permute(1, 2, 0).numpy()
        flags.append(engine.diagnose_clinical(img).triage_recommended)
    report["fraction_triaged"] = float(np.mean(flags))
    return report
