"""Training objective: strategy-driven mixup plus the prototype-mixup loss.

Mixup strategies route pairs by head/middle/tail subset membership:

  MX1 H-H   MX2 M-M   MX3 T-T      (intra-subset)
  MX4 H-M   MX5 M-T   MX6 H-T      (inter-subset)

plus ``standard`` (any pair, all subsets) and ``none``. MX5 is the default
for the prototype variant; under the subset strategies head samples are
never paired unless the strategy itself names the head subset.

For a mixup image x_mix = lam*x_i + (1-lam)*x_j the per-level losses are the
lam-weighted cross-entropies of both source labels; the level-3 prototype
variant uses the weighted squared distances to both source prototypes (MSE
term) plus the weighted distance-softmax cross-entropy (DCE term), combined
as ``w_dce * dce + lambda_mse * mse``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .errors import BadLabel, DimMismatch, ShapeMismatch, VariantMismatch
from .model import HierarchicalOutput, prototype_distances
from .taxonomy import LabelPath, SubsetPartition

MIXUP_STRATEGIES = ("none", "standard", "MX1", "MX2", "MX3", "MX4", "MX5", "MX6")
_STRATEGY_SUBSETS = {
    "MX1": ("head", "head"),
    "MX2": ("middle", "middle"),
    "MX3": ("tail", "tail"),
    "MX4": ("head", "middle"),
    "MX5": ("middle", "tail"),
    "MX6": ("head", "tail"),
}


@dataclass(frozen=True)
class LossConfig:
    lambda_mse: float = 0.1  # weight of the MSE term in the combined prototype loss
    gamma: float = 1.0  # distance-softmax temperature
    mixup_alpha: float = 1.0  # Beta(alpha, alpha) shape for sampling lam
    p_mix: float = 0.5  # probability an eligible sample joins a mixup pair
    w_dce: float = 1.0  # weight of the DCE term (reading of the combined-loss coefficient)

    def __post_init__(self):
        if self.lambda_mse < 0 or self.mixup_alpha <= 0 or not 0 <= self.p_mix <= 1:
            raise ValueError(f"invalid loss config: {self}")


def sample_lambda(alpha: float, rng: np.random.Generator) -> float:
    if alpha <= 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    return float(rng.beta(alpha, alpha))


def select_mixup_pairs(
    labels_l3: list[int],
    partition: SubsetPartition,
    strategy: str,
    p_mix: float,
    rng: np.random.Generator,
) -> tuple[list[tuple[int, int]], list[int]]:
    """Pick (i, j) index pairs within a batch according to the strategy.

    Returns (pairs, singles) over batch positions. Pairs always join two
    distinct level-3 categories; each eligible sample enters a pair with
    probability p_mix. Batches without eligible partners yield fewer pairs.
    """
    n = len(labels_l3)
    if strategy == "none":
        return [], list(range(n))
    if strategy == "standard":
        subset_a = subset_b = None
    else:
        if strategy not in _STRATEGY_SUBSETS:
            raise ValueError(f"unknown mixup strategy {strategy!r}")
        subset_a, subset_b = _STRATEGY_SUBSETS[strategy]

    def side(i: int) -> str:
        return partition.subset_of(labels_l3[i])

    if subset_a is None:
        eligible = list(range(n))
    else:
        eligible = [i for i in range(n) if side(i) in (subset_a, subset_b)]

    chosen = [i for i in eligible if rng.random() < p_mix]
    used: set[int] = set()
    pairs: list[tuple[int, int]] = []
    for i in chosen:
        if i in used:
            continue
        if subset_a is None:
            partners = [
                j for j in chosen if j != i and j not in used and labels_l3[j] != labels_l3[i]
            ]
        elif subset_a == subset_b:
            partners = [
                j
                for j in chosen
                if j != i and j not in used and side(j) == subset_a and labels_l3[j] != labels_l3[i]
            ]
        else:
            want = subset_b if side(i) == subset_a else subset_a
            partners = [
                j for j in chosen if j not in used and side(j) == want and labels_l3[j] != labels_l3[i]
            ]
        if not partners:
            continue
        j = partners[int(rng.integers(0, len(partners)))]
        used.add(i)
        used.add(j)
        pairs.append((i, j))
    singles = [i for i in range(n) if i not in used]
    return pairs, singles


def mixup_image(x_i, x_j, lam: float):
    """Elementwise convex combination of two images (numpy or torch)."""
    if x_i.shape != x_j.shape:
        raise ShapeMismatch(f"image shapes differ: {x_i.shape} vs {x_j.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lam must be in [0,1], got {lam}")
    return lam * x_i + (1.0 - lam) * x_j


def mixup_ce_level(
    logits: torch.Tensor, y_i: int, y_j: int, lam: float
) -> torch.Tensor:
    """lam-weighted cross entropy against both source labels at one level."""
    n = logits.shape[-1]
    if not (0 <= y_i < n and 0 <= y_j < n):
        raise BadLabel(f"labels ({y_i}, {y_j}) out of range for {n} classes")
    logp = F.log_softmax(logits, dim=-1)
    return -(lam * logp[..., y_i] + (1.0 - lam) * logp[..., y_j])


def proto_mse_mixup(
    latent_l3: torch.Tensor,
    bank: torch.Tensor,
    i_cat: int,
    j_cat: int,
    lam: float,
) -> torch.Tensor:
    """Weighted squared distances of the mixup latent to both source prototypes."""
    if latent_l3.shape[-1] != bank.shape[-1]:
        raise DimMismatch(f"latent dim {latent_l3.shape[-1]} vs bank dim {bank.shape[-1]}")
    d_i = ((latent_l3 - bank[i_cat]) ** 2).sum(-1)
    d_j = ((latent_l3 - bank[j_cat]) ** 2).sum(-1)
    return lam * d_i + (1.0 - lam) * d_j


def distance_ce(distances: torch.Tensor, target: int, gamma: float) -> torch.Tensor:
    """Cross entropy where class probabilities are softmax(-gamma * distance)."""
    logp = F.log_softmax(-gamma * distances, dim=-1)
    return -logp[..., target]


def proto_dce_mixup(
    distances: torch.Tensor, i_cat: int, j_cat: int, lam: float, gamma: float
) -> torch.Tensor:
    """Weighted distance-softmax cross entropy against both source categories."""
    n = distances.shape[-1]
    if not (0 <= i_cat < n and 0 <= j_cat < n):
        raise DimMismatch(f"categories ({i_cat}, {j_cat}) out of range for {n} prototypes")
    return lam * distance_ce(distances, i_cat, gamma) + (1.0 - lam) * distance_ce(
        distances, j_cat, gamma
    )


def protmix_total(mse: torch.Tensor, dce: torch.Tensor, config: LossConfig) -> torch.Tensor:
    return config.w_dce * dce + config.lambda_mse * mse


# -- batch assembly -----------------------------------------------------------


@dataclass
class MixupSample:
    """One mixed training sample built from batch members i and j."""

    x_mix: torch.Tensor  # first (or only) view
    i: int
    j: int
    lam: float
    labels_i: LabelPath
    labels_j: LabelPath
    x_mix2: Optional[torch.Tensor] = None  # second view for multimodal training


@dataclass
class Batch:
    plain_x: torch.Tensor  # P x 3 x H x W (P may be 0)
    plain_labels: list[LabelPath]
    mixups: list[MixupSample]
    plain_x2: Optional[torch.Tensor] = None

    @property
    def size(self) -> int:
        return len(self.plain_labels) + len(self.mixups)

    def stacked(self) -> tuple[torch.Tensor, Optional[torch.Tensor]]:
        """All images in [plain..., mixup...] order, per view."""
        xs = [self.plain_x] if len(self.plain_labels) else []
        xs += [m.x_mix.unsqueeze(0) for m in self.mixups]
        x = torch.cat(xs, dim=0)
        if self.plain_x2 is None and not any(m.x_mix2 is not None for m in self.mixups):
            return x, None
        xs2 = [self.plain_x2] if len(self.plain_labels) else []
        xs2 += [m.x_mix2.unsqueeze(0) for m in self.mixups]
        return x, torch.cat(xs2, dim=0)


def batch_objective(
    outputs: HierarchicalOutput,
    batch: Batch,
    label_classes,
    variant: str,
    config: LossConfig,
    bank: torch.Tensor | None = None,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Mean per-sample loss over a batch plus a per-term breakdown.

    ``label_classes(path)`` maps a LabelPath to (y1, y2, y3) model class
    indices. Outputs must be the forward pass over ``batch.stacked()``.
    Plain samples are the lam=1 degenerate case of the mixup formulas.
    """
    if variant == "hierarchical_mpl" and bank is None:
        raise VariantMismatch("prototype variant requires the prototype bank")
    if variant != "hierarchical_mpl" and outputs.logits_l3 is None:
        raise VariantMismatch(f"variant {variant!r} needs level-3 logits")

    n_plain = len(batch.plain_labels)
    total = outputs.latent_l3.new_zeros(())
    sums: dict[str, torch.Tensor] = {}
    counts: dict[str, int] = {}

    def add(term: str, value: torch.Tensor):
        nonlocal total
        total = total + value
        if term not in sums:
            sums[term] = value.detach()
            counts[term] = 1
        else:
            sums[term] = sums[term] + value.detach()
            counts[term] += 1

    def level3_terms(row: int, prefix: str, yi3: int, yj3: int, lam: float):
        if variant == "hierarchical_mpl":
            dists = prototype_distances(outputs.latent_l3[row], bank)
            mse = proto_mse_mixup(outputs.latent_l3[row], bank, yi3, yj3, lam)
            dce = proto_dce_mixup(dists, yi3, yj3, lam, config.gamma)
            add(prefix + "proto_mse", config.lambda_mse * mse)
            add(prefix + "proto_dce", config.w_dce * dce)
        else:
            add(prefix + "ce_l3", mixup_ce_level(outputs.logits_l3[row], yi3, yj3, lam))

    for row, path in enumerate(batch.plain_labels):
        y1, y2, y3 = label_classes(path)
        if variant != "singular":
            add("ce_l1", mixup_ce_level(outputs.logits_l1[row], y1, y1, 1.0))
            add("ce_l2", mixup_ce_level(outputs.logits_l2[row], y2, y2, 1.0))
        level3_terms(row, "", y3, y3, 1.0)

    for k, m in enumerate(batch.mixups):
        row = n_plain + k
        yi1, yi2, yi3 = label_classes(m.labels_i)
        yj1, yj2, yj3 = label_classes(m.labels_j)
        if variant != "singular":
            add("mixup_ce_l1", mixup_ce_level(outputs.logits_l1[row], yi1, yj1, m.lam))
            add("mixup_ce_l2", mixup_ce_level(outputs.logits_l2[row], yi2, yj2, m.lam))
        level3_terms(row, "mixup_", yi3, yj3, m.lam)

    n = batch.size
    if n == 0:
        raise ValueError("empty batch")
    total = total / n
    breakdown = {k: float(sums[k] / counts[k]) for k in sums}
    return total, breakdown
