"""Hierarchical lesion classifier: CNN backbone -> transformer encoder ->
decoder with three learned hierarchical queries -> per-level heads.

Variants:
  singular          only the level-3 classifier head is trained/used
  hierarchical      independent heads for levels 1/2/3
  hierarchical_mpl  heads for levels 1/2; level 3 classified by nearest
                    prototype in the decoder's level-3 latent space

Fixed 2-D sinusoidal positional encodings are added to the input of every
encoder attention layer; the query embeddings are added at every decoder
layer the same way. Multimodal fusion concatenates the two memories along
the position axis, each keeping its own positional encoding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import taxonomy as tx
from .errors import (
    DimMismatch,
    InvalidConfig,
    MissingBank,
    ModalityMismatch,
    ShapeMismatch,
)

VARIANTS = ("singular", "hierarchical", "hierarchical_mpl")
MODALITIES = ("clinical", "dermoscopic", "multimodal")
BACKBONES = ("tiny_cnn", "resnet34")


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    backbone: str = "tiny_cnn"
    feature_dim: int = 64  # channel dimension d of memory/query embeddings
    encoder_layers: int = 2
    decoder_layers: int = 2
    attention_heads: int = 4
    variant: str = "hierarchical_mpl"
    modality: str = "clinical"
    level_sizes: tuple[int, int, int] = (2, 4, 12)
    ffn_dim: int = 128
    fusion: str = "sequence"  # or "channel": alternative reading of memory doubling
    gamma: float = 1.0  # distance-softmax temperature for the prototype variant

    def validate(self) -> None:
        if self.backbone not in BACKBONES:
            raise InvalidConfig(f"unknown backbone {self.backbone!r}")
        if self.variant not in VARIANTS:
            raise InvalidConfig(f"unknown variant {self.variant!r}")
        if self.modality not in MODALITIES:
            raise InvalidConfig(f"unknown modality {self.modality!r}")
        if self.feature_dim % self.attention_heads != 0:
            raise InvalidConfig(
                f"feature_dim {self.feature_dim} not divisible by heads {self.attention_heads}"
            )
        if self.level_sizes[0] != 2:
            raise InvalidConfig("level 1 must have exactly 2 categories")
        if self.fusion not in ("sequence", "channel"):
            raise InvalidConfig(f"unknown fusion mode {self.fusion!r}")
        if min(self.level_sizes) < 1 or self.image_size < 16:
            raise InvalidConfig("degenerate level sizes or image size")

    def to_items(self, prefix: str = "model.") -> dict[str, str]:
        return {
            f"{prefix}image_size": str(self.image_size),
            f"{prefix}backbone": self.backbone,
            f"{prefix}feature_dim": str(self.feature_dim),
            f"{prefix}encoder_layers": str(self.encoder_layers),
            f"{prefix}decoder_layers": str(self.decoder_layers),
            f"{prefix}attention_heads": str(self.attention_heads),
            f"{prefix}variant": self.variant,
            f"{prefix}modality": self.modality,
            f"{prefix}level_sizes": ",".join(str(s) for s in self.level_sizes),
            f"{prefix}ffn_dim": str(self.ffn_dim),
            f"{prefix}fusion": self.fusion,
            f"{prefix}gamma": repr(self.gamma),
        }

    @staticmethod
    def from_items(items: dict[str, str], prefix: str = "model.") -> "ModelConfig":
        def g(key, default=None):
            return items.get(prefix + key, default)

        cfg = ModelConfig(
            image_size=int(g("image_size", "64")),
            backbone=g("backbone", "tiny_cnn"),
            feature_dim=int(g("feature_dim", "64")),
            encoder_layers=int(g("encoder_layers", "2")),
            decoder_layers=int(g("decoder_layers", "2")),
            attention_heads=int(g("attention_heads", "4")),
            variant=g("variant", "hierarchical_mpl"),
            modality=g("modality", "clinical"),
            level_sizes=tuple(int(s) for s in g("level_sizes", "2,4,12").split(",")),
            ffn_dim=int(g("ffn_dim", "128")),
            fusion=g("fusion", "sequence"),
            gamma=float(g("gamma", "1.0")),
        )
        cfg.validate()
        return cfg


@dataclass
class HierarchicalOutput:
    """Per-level logits plus the level-3 latent from the decoder (batched).

    ``logits_l1``/``logits_l2`` are absent for the singular variant;
    ``logits_l3`` is absent for the prototype variant, where classification
    runs on distances to the prototype bank instead.
    """

    logits_l1: Optional[torch.Tensor]
    logits_l2: Optional[torch.Tensor]
    logits_l3: Optional[torch.Tensor]
    latent_l3: torch.Tensor
    latents: torch.Tensor = None  # B x 3 x d decoder outputs for all levels


def positional_encoding_2d(grid: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Fixed sinusoidal encoding over a grid x grid map, flattened to (grid^2, dim)."""
    if dim % 4 != 0:
        raise InvalidConfig(f"feature_dim must be divisible by 4 for 2-D encodings, got {dim}")
    half = dim // 2
    freqs = torch.exp(
        torch.arange(0, half, 2, dtype=torch.float64) * (-math.log(10000.0) / half)
    )
    pos = torch.arange(grid, dtype=torch.float64)
    angles = pos[:, None] * freqs[None, :]
    enc1d = torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)  # grid x half
    rows = enc1d[:, None, :].expand(grid, grid, half)
    cols = enc1d[None, :, :].expand(grid, grid, half)
    return torch.cat([rows, cols], dim=2).reshape(grid * grid, dim).to(dtype)


class TinyBackbone(nn.Module):
    """Four stride-2 conv stages mapping image_size -> image_size/16 grid.

    GroupNorm keeps activations at unit scale through the stack (the net
    trains from scratch); it is per-sample, so outputs stay independent of
    batch composition.
    """

    def __init__(self, dim: int):
        super().__init__()
        c = max(4, dim // 4)
        widths = [c, 2 * c, dim, dim]
        layers = []
        prev = 3
        for w in widths:
            layers += [
                nn.Conv2d(prev, w, 3, stride=2, padding=1),
                nn.GroupNorm(1, w),
                nn.ReLU(inplace=True),
            ]
            prev = w
        self.net = nn.Sequential(*layers)
        self.out_channels = dim

    def forward(self, x):
        return self.net(x)

    def grid_for(self, image_size: int) -> int:
        return image_size // 16


class Resnet34Backbone(nn.Module):
    """torchvision resnet34 trunk with a 1x1 projection and a fixed 7x7 grid."""

    def __init__(self, dim: int):
        super().__init__()
        from torchvision.models import resnet34

        trunk = resnet34(weights=None)
        self.features = nn.Sequential(*list(trunk.children())[:-2])
        self.project = nn.Conv2d(512, dim, kernel_size=1)
        self.pool = nn.AdaptiveAvgPool2d((7, 7))
        self.out_channels = dim

    def forward(self, x):
        return self.pool(self.project(self.features(x)))

    def grid_for(self, image_size: int) -> int:
        return 7


class _EncoderLayer(nn.Module):
    """Pre-LN self-attention block; positional encoding joins each attention input."""

    def __init__(self, dim, heads, ffn_dim):
        super().__init__()
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, ffn_dim), nn.ReLU(inplace=True), nn.Linear(ffn_dim, dim))

    def forward(self, x, pos):
        h = self.norm1(x)
        q = k = h + pos
        a, _ = self.attn(q, k, h, need_weights=False)
        x = x + a
        return x + self.ff(self.norm2(x))


class _DecoderLayer(nn.Module):
    """Pre-LN self+cross attention block; the learned queries join every
    attention input on the target side."""

    def __init__(self, dim, heads, ffn_dim):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.cross_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.norm3 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, ffn_dim), nn.ReLU(inplace=True), nn.Linear(ffn_dim, dim))

    def forward(self, t, memory, query_pos, mem_pos):
        h = self.norm1(t)
        q = k = h + query_pos
        a, _ = self.self_attn(q, k, h, need_weights=False)
        t = t + a
        h = self.norm2(t)
        a, _ = self.cross_attn(h + query_pos, memory + mem_pos, memory, need_weights=False)
        t = t + a
        return t + self.ff(self.norm3(t))


class HierarchicalModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        d = config.feature_dim
        if config.backbone == "tiny_cnn":
            self.backbone = TinyBackbone(d)
        else:
            self.backbone = Resnet34Backbone(d)
        grid = self.backbone.grid_for(config.image_size)
        if grid < 1:
            raise InvalidConfig(f"image_size {config.image_size} too small for backbone grid")
        self.grid = grid
        self.register_buffer("pos", positional_encoding_2d(grid, d), persistent=False)
        self.encoder = nn.ModuleList(
            _EncoderLayer(d, config.attention_heads, config.ffn_dim)
            for _ in range(config.encoder_layers)
        )
        self.enc_norm = nn.LayerNorm(d)
        self.decoder = nn.ModuleList(
            _DecoderLayer(d, config.attention_heads, config.ffn_dim)
            for _ in range(config.decoder_layers)
        )
        self.dec_norm = nn.LayerNorm(d)
        # hierarchical queries: one learned embedding per level, unit scale so
        # the three streams separate from the first decoder pass
        self.queries = nn.Parameter(torch.randn(3, d))
        n1, n2, n3 = config.level_sizes
        if config.variant != "singular":
            self.head_l1 = nn.Linear(d, n1)
            self.head_l2 = nn.Linear(d, n2)
        if config.variant in ("singular", "hierarchical"):
            self.head_l3 = nn.Linear(d, n3)
        if config.variant == "hierarchical_mpl":
            self.proto_weights = nn.Parameter(torch.randn(n3, d))

    @property
    def prototypes(self) -> torch.Tensor:
        """Prototype bank, one row per ID level-3 category.

        Rows are constrained to norm sqrt(d), the shell the LayerNorm'd
        decoder latents live on. Equal norms make the distance softmax
        sensitive to how far a latent sits from the whole bank (for equal-norm
        rows the softmax gaps reduce to inner-product differences, so
        off-manifold latents get near-uniform probabilities instead of
        confidently snapping to whichever prototype drifted closest).
        """
        w = self.__getattr__("proto_weights") if "proto_weights" in self._parameters else None
        if w is None:
            raise AttributeError("prototypes: not a prototype-variant model")
        scale = math.sqrt(w.shape[1])
        return scale * w / w.norm(dim=1, keepdim=True).clamp_min(1e-8)

    # -- pieces ---------------------------------------------------------

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        """Image batch -> memory embeddings (B x S x d)."""
        if images.dim() == 3:
            images = images.unsqueeze(0)
        expected = (3, self.config.image_size, self.config.image_size)
        if tuple(images.shape[1:]) != expected:
            raise ShapeMismatch(f"expected input {expected}, got {tuple(images.shape[1:])}")
        fmap = self.backbone(images)
        mem = fmap.flatten(2).transpose(1, 2)  # B x S x d
        pos = self.pos.to(mem.dtype)
        for layer in self.encoder:
            mem = layer(mem, pos)
        return self.enc_norm(mem)

    def decode(self, memory: torch.Tensor, mem_pos: torch.Tensor) -> torch.Tensor:
        b = memory.shape[0]
        t = torch.zeros(b, 3, memory.shape[2], dtype=memory.dtype, device=memory.device)
        qpos = self.queries.to(memory.dtype).unsqueeze(0).expand(b, -1, -1)
        for layer in self.decoder:
            t = layer(t, memory, qpos, mem_pos)
        return self.dec_norm(t)  # B x 3 x d

    def forward(
        self, images: torch.Tensor, images2: torch.Tensor | None = None
    ) -> HierarchicalOutput:
        multimodal = self.config.modality == "multimodal"
        if multimodal and images2 is None:
            raise ModalityMismatch("multimodal model requires both clinical and dermoscopic images")
        if not multimodal and images2 is not None:
            raise ModalityMismatch(f"{self.config.modality} model accepts a single image")
        mem = self.encode(images)
        pos = self.pos.to(mem.dtype)
        if multimodal:
            mem2 = self.encode(images2)
            mem = fuse_memories(mem, mem2, mode=self.config.fusion)
            mem_pos = torch.cat([pos, pos], dim=0) if self.config.fusion == "sequence" else pos
        else:
            mem_pos = pos
        latents = self.decode(mem, mem_pos)
        v = self.config.variant
        return HierarchicalOutput(
            logits_l1=self.head_l1(latents[:, 0]) if v != "singular" else None,
            logits_l2=self.head_l2(latents[:, 1]) if v != "singular" else None,
            logits_l3=self.head_l3(latents[:, 2]) if v != "hierarchical_mpl" else None,
            latent_l3=latents[:, 2],
            latents=latents,
        )


def init_model(config: ModelConfig, seed: int) -> HierarchicalModel:
    """Deterministic construction: same config+seed gives identical parameters."""
    config.validate()
    torch.manual_seed(seed)
    return HierarchicalModel(config)


def fuse_memories(
    mem_a: torch.Tensor, mem_b: torch.Tensor, mode: str = "sequence"
) -> torch.Tensor:
    """Concatenate two memories along the position axis (default) or channels."""
    if mem_a.shape[-1] != mem_b.shape[-1] and mode == "sequence":
        raise DimMismatch(
            f"memory dims differ: {mem_a.shape[-1]} vs {mem_b.shape[-1]}"
        )
    if mode == "sequence":
        return torch.cat([mem_a, mem_b], dim=-2)
    if mem_a.shape[-2] != mem_b.shape[-2]:
        raise DimMismatch("channel fusion requires equal sequence lengths")
    return torch.cat([mem_a, mem_b], dim=-1)


def prototype_distances(latent: torch.Tensor, bank: torch.Tensor) -> torch.Tensor:
    """Squared Euclidean distance from latent(s) to every prototype row."""
    if latent.shape[-1] != bank.shape[-1]:
        raise DimMismatch(f"latent dim {latent.shape[-1]} vs bank dim {bank.shape[-1]}")
    diff = latent.unsqueeze(-2) - bank
    return (diff * diff).sum(-1)


def level3_confidence(
    output: HierarchicalOutput,
    bank: torch.Tensor | None,
    variant: str,
    gamma: float = 1.0,
):
    """Level-3 confidence and prediction.

    softmax heads (singular/hierarchical): max softmax probability, argmax.
    prototype variant: probabilities proportional to exp(-gamma * distance),
    prediction is the nearest prototype.
    Returns (confidence, prediction) tensors of shape (B,).
    """
    if variant == "hierarchical_mpl":
        if bank is None:
            raise MissingBank("prototype variant needs a prototype bank")
        dists = prototype_distances(output.latent_l3, bank)
        probs = F.softmax(-gamma * dists, dim=-1)
        conf, pred = probs.max(dim=-1)
        return conf, pred
    if output.logits_l3 is None:
        raise MissingBank("no level-3 logits present")
    probs = F.softmax(output.logits_l3, dim=-1)
    conf, pred = probs.max(dim=-1)
    return conf, pred


@dataclass(frozen=True)
class LabelMaps:
    """Translation between taxonomy indices and model class indices.

    Level-3 model classes enumerate the taxonomy's ID categories in index
    order; levels 1-2 use the taxonomy ordering directly.
    """

    id_l3: tuple[int, ...]  # model class -> taxonomy level-3 index
    l3_to_class: dict[int, int] = field(default_factory=dict)

    @staticmethod
    def from_taxonomy(taxonomy: tx.Taxonomy) -> "LabelMaps":
        ids = taxonomy.id_level3_indices()
        return LabelMaps(id_l3=ids, l3_to_class={t: c for c, t in enumerate(ids)})

    def class_of(self, l3: int) -> int:
        return self.l3_to_class[l3]

    def level_sizes(self, taxonomy: tx.Taxonomy) -> tuple[int, int, int]:
        return (len(taxonomy.level1_names), len(taxonomy.level2_names), len(self.id_l3))
