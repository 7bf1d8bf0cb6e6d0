"""Deterministic synthetic paired-image dataset (clinical + dermoscopic views).

Each level-3 category is a point in a 5-dimensional appearance space:
base hue, shape eccentricity, border irregularity amplitude, coarse-texture
frequency and fine-texture frequency. A lesion is a radial-harmonic blob
carrying two sinusoidal texture fields:

  clinical view    - lesion at roughly 1/3 frame scale on a mottled skin
                     background, with camera noise; fine texture attenuated.
  dermoscopic view - lesion fills the frame, fine texture at full amplitude,
                     no camera noise.

The fine-texture attenuation factor (>= 4) is what makes designated
"clinically ambiguous" sibling categories separable only dermoscopically.
All randomness derives from (spec.seed, lesion index), so output is
byte-identical across runs and independent of rendering order.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import taxonomy as tx
from .configio import parse_kv, write_kv
from .errors import InvalidSpec, IoFailure, UnknownKind

FINE_ATTENUATION = 6.0  # clinical fine-texture cue is this much weaker (spec floor: 4)
UNKNOWN_KINDS = ("blur", "occlusion", "saturation")


@dataclass(frozen=True)
class CategoryParams:
    hue: float
    eccentricity: float
    border_irregularity: float
    coarse_freq: float
    fine_freq: float

    def validate(self) -> None:
        if not 0.0 <= self.hue <= 1.0:
            raise InvalidSpec(f"hue out of range: {self.hue}")
        if not 1.0 <= self.eccentricity <= 3.0:
            raise InvalidSpec(f"eccentricity out of range: {self.eccentricity}")
        if not 0.0 <= self.border_irregularity <= 1.0:
            raise InvalidSpec(f"border irregularity out of range: {self.border_irregularity}")
        if not 0.0 < self.coarse_freq <= 16.0 or not 0.0 < self.fine_freq <= 32.0:
            raise InvalidSpec("texture frequency out of range")


@dataclass(frozen=True)
class ImagePair:
    clinical: np.ndarray  # H x W x 3, float32 in [0, 1]
    dermoscopic: np.ndarray


@dataclass
class GenSpec:
    taxonomy: tx.Taxonomy
    per_category_counts: dict[int, int]  # level-3 index -> lesion count
    category_params: dict[int, CategoryParams]
    image_size: int
    patients: int
    seed: int
    id_cutoff: int
    id_percentile: float
    subset_thresholds: tuple[int, int, int]
    unknown_per_kind: int = 0
    ambiguous_pair: tuple[str, str] | None = None
    test_fraction: float = 0.15
    val_fraction: float = 0.2

    def validate(self) -> None:
        if self.image_size < 16:
            raise InvalidSpec("image_size must be >= 16")
        if self.patients < 1:
            raise InvalidSpec("patients must be >= 1")
        n = len(self.taxonomy.level3_names)
        for idx in self.per_category_counts:
            if not 0 <= idx < n:
                raise InvalidSpec(f"count for unknown category index {idx}")
        for idx, p in self.category_params.items():
            if not 0 <= idx < n:
                raise InvalidSpec(f"params for unknown category index {idx}")
            p.validate()
        missing = set(self.per_category_counts) - set(self.category_params)
        if missing:
            raise InvalidSpec(f"categories without params: {sorted(missing)}")
        if self.ambiguous_pair is not None:
            a, b = self.ambiguous_pair
            names = self.taxonomy.level3_names
            if a not in names or b not in names:
                raise InvalidSpec(f"ambiguous pair names not in taxonomy: {self.ambiguous_pair}")


# -- rendering ---------------------------------------------------------------


def _hsv(h: float, s: float, v: float) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v), dtype=np.float64)


def _lesion_field(
    size: int,
    params: CategoryParams,
    rng: np.random.Generator,
    radius: float,
    base_radius: float,
    center: tuple[float, float],
    fine_amp: float,
):
    """Render one lesion onto a transparent canvas; returns (rgb, mask)."""
    ax = np.linspace(-1.0, 1.0, size)
    xx, yy = np.meshgrid(ax, ax)
    cx, cy = center
    ex = np.sqrt(params.eccentricity)
    rot = rng.uniform(0.0, np.pi)
    xr = (xx - cx) * np.cos(rot) + (yy - cy) * np.sin(rot)
    yr = -(xx - cx) * np.sin(rot) + (yy - cy) * np.cos(rot)
    xr, yr = xr * ex, yr / ex
    rr = np.hypot(xr, yr)
    theta = np.arctan2(yr, xr)

    # radial harmonics k=2..5 give the irregular border; zero amplitude -> ellipse
    boundary = np.full_like(rr, radius)
    for k in range(2, 6):
        amp = params.border_irregularity * 0.25 * rng.uniform(0.3, 1.0)
        phase = rng.uniform(0.0, 2 * np.pi)
        boundary = boundary + radius * amp * np.cos(k * theta + phase)
    edge = 1.5 * (2.0 / size)  # ~1.5 px soft edge
    mask = np.clip((boundary - rr) / edge + 0.5, 0.0, 1.0)

    # texture is anchored to the lesion centre in the image frame and scaled by
    # the view's base radius: the pattern is stable across instances of a
    # category (the shape rotates; the texture does not)
    u = (xx - cx) / max(base_radius, 1e-6)
    v = (yy - cy) / max(base_radius, 1e-6)
    ca = 2.399 * params.coarse_freq  # orientation derived from the category itself
    fa = 1.711 * params.fine_freq
    coarse = np.sin(np.pi * params.coarse_freq * (u * np.cos(ca) + v * np.sin(ca)))
    fine = np.sin(np.pi * params.fine_freq * (u * np.cos(fa) + v * np.sin(fa)))

    base = _hsv(params.hue, 0.55, 0.45)
    shade = 1.0 + 0.12 * coarse + fine_amp * fine
    rgb = base[None, None, :] * shade[:, :, None]
    return np.clip(rgb, 0.0, 1.0), mask


def _skin_background(size: int, rng: np.random.Generator, brightness: float) -> np.ndarray:
    ax = np.linspace(0.0, 1.0, size)
    xx, yy = np.meshgrid(ax, ax)
    p1, p2 = rng.uniform(0.0, 2 * np.pi, size=2)
    mottle = 0.04 * np.sin(2 * np.pi * 1.7 * xx + p1) + 0.04 * np.sin(2 * np.pi * 2.3 * yy + p2)
    base = _hsv(0.07, 0.30, brightness)
    return np.clip(base[None, None, :] * (1.0 + mottle)[:, :, None], 0.0, 1.0)


def render_lesion_pair(
    params: CategoryParams, instance_seed: int, image_size: int = 64
) -> ImagePair:
    pair, _ = render_lesion_pair_with_masks(params, instance_seed, image_size)
    return pair


def render_lesion_pair_with_masks(
    params: CategoryParams, instance_seed: int, image_size: int = 64
):
    """Deterministic render; also returns the (clinical, dermoscopic) lesion masks."""
    params.validate()
    rng = np.random.default_rng(np.random.SeedSequence([int(instance_seed), 0x4C45]))

    # shared shape draws: consume identical rng stream for both views
    rot_seed = rng.integers(0, 2**31)
    fine_amp_dermo = 0.16

    def view(radius_base, center_jitter, fine_amp, background, noise_sigma, vrng):
        radius = radius_base * vrng.uniform(0.92, 1.08)
        cx = center_jitter * vrng.uniform(-1.0, 1.0)
        cy = center_jitter * vrng.uniform(-1.0, 1.0)
        rgb, mask = _lesion_field(
            image_size, params, vrng, radius, radius_base, (cx, cy), fine_amp
        )
        img = background * (1.0 - mask[:, :, None]) + rgb * mask[:, :, None]
        if noise_sigma > 0:
            img = img + vrng.normal(0.0, noise_sigma, size=img.shape)
        return np.clip(img, 0.0, 1.0).astype(np.float32), mask

    # clinical: small lesion, mottled skin, camera noise, attenuated fine texture
    crng = np.random.default_rng(np.random.SeedSequence([rot_seed, 1]))
    cl_bg = _skin_background(image_size, crng, brightness=0.85)
    clinical, cl_mask = view(0.30, 0.12, fine_amp_dermo / FINE_ATTENUATION, cl_bg, 0.02, crng)

    # dermoscopic: lesion fills the frame, clean capture, full fine texture
    drng = np.random.default_rng(np.random.SeedSequence([rot_seed, 2]))
    dm_bg = _skin_background(image_size, drng, brightness=0.92)
    dermoscopic, dm_mask = view(0.78, 0.0, fine_amp_dermo, dm_bg, 0.0, drng)

    return ImagePair(clinical=clinical, dermoscopic=dermoscopic), (cl_mask, dm_mask)


# -- unknown-image corruption -------------------------------------------------


def _gaussian_blur(img: np.ndarray, radius: float) -> np.ndarray:
    if radius <= 0:
        return img
    half = max(1, int(3 * radius))
    x = np.arange(-half, half + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (x / radius) ** 2)
    kernel /= kernel.sum()
    out = img.astype(np.float64)
    for axis in (0, 1):
        out = np.apply_along_axis(
            lambda m: np.convolve(np.pad(m, half, mode="edge"), kernel, mode="valid"),
            axis,
            out,
        )
    return out


def corrupt_unknown(
    pair: ImagePair,
    kind: str,
    seed: int,
    lesion_masks: tuple[np.ndarray, np.ndarray] | None = None,
    blur_radius: float = 4.0,
) -> ImagePair:
    """Produce an unusual-capture variant (OOD unknown): blur, occlusion or saturation."""
    if kind not in UNKNOWN_KINDS:
        raise UnknownKind(f"unknown corruption kind {kind!r}; expected one of {UNKNOWN_KINDS}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xC0]))
    views = []
    for vi, img in enumerate((pair.clinical, pair.dermoscopic)):
        img = img.astype(np.float64)
        if kind == "blur":
            img = _gaussian_blur(img, blur_radius)
        elif kind == "occlusion":
            mask = None if lesion_masks is None else lesion_masks[vi]
            img = _occlude(img, mask, rng)
        else:  # saturation: blow one channel out and clip
            ch = int(rng.integers(0, 3))
            img = img.copy()
            img[:, :, ch] = img[:, :, ch] * 3.0 + 0.25
        views.append(np.clip(img, 0.0, 1.0).astype(np.float32))
    return ImagePair(clinical=views[0], dermoscopic=views[1])


def _occlude(img: np.ndarray, mask: np.ndarray | None, rng: np.random.Generator) -> np.ndarray:
    size = img.shape[0]
    if mask is None:
        mask = np.ones((size, size))
    ys, xs = np.nonzero(mask > 0.5)
    if len(ys) == 0:
        ys, xs = np.arange(size), np.arange(size)
    y0, y1, x0, x1 = ys.min(), ys.max(), xs.min(), xs.max()
    target = 0.45 * (mask > 0.5).sum()
    gray = float(rng.uniform(0.1, 0.35))
    # grow a centered patch until it covers enough of the lesion mask
    for frac in np.linspace(0.5, 1.0, 11):
        cy, cx = (y0 + y1) // 2, (x0 + x1) // 2
        hh = max(1, int((y1 - y0 + 1) * frac / 2))
        hw = max(1, int((x1 - x0 + 1) * frac / 2))
        ry0, ry1 = max(0, cy - hh), min(size, cy + hh + 1)
        rx0, rx1 = max(0, cx - hw), min(size, cx + hw + 1)
        covered = (mask[ry0:ry1, rx0:rx1] > 0.5).sum()
        if covered >= target:
            break
    out = img.copy()
    out[ry0:ry1, rx0:rx1, :] = gray
    return out


# -- dataset generation --------------------------------------------------------


def _save_png(img: np.ndarray, path: Path) -> None:
    arr = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    try:
        Image.fromarray(arr).save(path, format="PNG")
    except OSError as exc:
        raise IoFailure(f"failed to write {path}: {exc}") from exc


def load_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def generate_dataset(spec: GenSpec, out_dir: str | Path) -> tuple[Path, list[tx.LesionRecord]]:
    """Write images + manifest + taxonomy + dataset meta under ``out_dir``.

    Returns the manifest path and the records. Per-lesion seeds derive from
    (spec.seed, lesion index) so regeneration is byte-identical.
    """
    spec.validate()
    out = Path(out_dir)
    images = out / "images"
    images.mkdir(parents=True, exist_ok=True)

    tax = spec.taxonomy
    prng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xFA]))
    records: list[tx.LesionRecord] = []
    lesion_index = 0

    def emit(l3: int | None, pair: ImagePair, patient: int) -> None:
        nonlocal lesion_index
        lid = f"L{lesion_index:06d}"
        cpath = f"images/{lid}_c.png"
        dpath = f"images/{lid}_d.png"
        _save_png(pair.clinical, out / cpath)
        _save_png(pair.dermoscopic, out / dpath)
        label = None if l3 is None else tax.label_path(l3)
        records.append(
            tx.LesionRecord(
                lesion_id=lid,
                patient_id=f"P{patient:05d}",
                clinical_ref=cpath,
                dermoscopic_ref=dpath,
                label=label,
            )
        )
        lesion_index += 1

    for l3 in sorted(spec.per_category_counts):
        params = spec.category_params[l3]
        for _ in range(spec.per_category_counts[l3]):
            seed_i = spec.seed * 1_000_003 + lesion_index
            pair = render_lesion_pair(params, seed_i, spec.image_size)
            emit(l3, pair, int(prng.integers(0, spec.patients)))

    # unusual-capture unknowns: random ID-category sources, then corrupted
    id_cats = sorted(spec.per_category_counts)
    for kind in UNKNOWN_KINDS:
        for _ in range(spec.unknown_per_kind):
            seed_i = spec.seed * 1_000_003 + lesion_index
            src = id_cats[int(prng.integers(0, len(id_cats)))]
            pair, masks = render_lesion_pair_with_masks(
                spec.category_params[src], seed_i, spec.image_size
            )
            pair = corrupt_unknown(pair, kind, seed_i, lesion_masks=masks)
            emit(None, pair, int(prng.integers(0, spec.patients)))

    labeled_tax, _ = tx.build_partition(
        _with_counts(tax, spec.per_category_counts),
        spec.id_cutoff,
        spec.id_percentile,
        spec.subset_thresholds,
    )
    records, _warn = tx.split_train_test(
        records,
        spec.test_fraction,
        spec.val_fraction,
        seed=spec.seed,
        taxonomy=labeled_tax,
    )

    manifest = out / "manifest.tsv"
    tx.write_manifest(records, labeled_tax, manifest)
    (out / "taxonomy.tsv").write_text(
        _with_counts(tax, spec.per_category_counts).to_document(), encoding="utf-8"
    )
    meta = {
        "seed": str(spec.seed),
        "image_size": str(spec.image_size),
        "patients": str(spec.patients),
        "id_cutoff": str(spec.id_cutoff),
        "id_percentile": str(spec.id_percentile),
        "head_min": str(spec.subset_thresholds[0]),
        "middle_min": str(spec.subset_thresholds[1]),
        "tail_min": str(spec.subset_thresholds[2]),
        "unknown_per_kind": str(spec.unknown_per_kind),
    }
    if spec.ambiguous_pair:
        meta["ambiguous_pair"] = "\t".join(spec.ambiguous_pair)
    write_kv(out / "dataset.meta", meta)
    return manifest, records


def _with_counts(tax: tx.Taxonomy, counts: dict[int, int]) -> tx.Taxonomy:
    full = tuple(counts.get(i, 0) for i in range(len(tax.level3_names)))
    from dataclasses import replace

    return replace(tax, counts=full)


# -- genspec documents ---------------------------------------------------------


def parse_genspec(text: str, seed: int | None = None) -> GenSpec:
    """Parse a genspec document: key-value header + category lines.

    Category lines: ``category\\t<l1>:<l2>:<l3>\\t<count>\\t<hue>\\t<ecc>\\t<irr>\\t<coarse>\\t<fine>``
    """
    header_lines, cat_lines = [], []
    for line in text.splitlines():
        if line.startswith("category\t"):
            cat_lines.append(line)
        else:
            header_lines.append(line)
    kv = parse_kv("\n".join(header_lines))

    l1_names: list[str] = []
    l2_names: list[str] = []
    l2_parents: list[int] = []
    l3_names: list[str] = []
    l3_parents: list[int] = []
    counts: dict[int, int] = {}
    params: dict[int, CategoryParams] = {}
    for line in cat_lines:
        fields = line.split("\t")
        if len(fields) != 8:
            raise InvalidSpec(f"bad category line: {line!r}")
        _, pathstr, count_s, hue, ecc, irr, coarse, fine = fields
        try:
            l1, l2, l3 = pathstr.split(":")
        except ValueError:
            raise InvalidSpec(f"category path must be l1:l2:l3, got {pathstr!r}") from None
        if l1 not in l1_names:
            l1_names.append(l1)
        if l2 not in l2_names:
            l2_names.append(l2)
            l2_parents.append(l1_names.index(l1))
        if l3 in l3_names:
            raise InvalidSpec(f"duplicate category {l3!r}")
        l3_names.append(l3)
        l3_parents.append(l2_names.index(l2))
        idx = len(l3_names) - 1
        counts[idx] = int(count_s)
        params[idx] = CategoryParams(
            hue=float(hue),
            eccentricity=float(ecc),
            border_irregularity=float(irr),
            coarse_freq=float(coarse),
            fine_freq=float(fine),
        )
    while len(l1_names) < 2:
        l1_names.append("malignant" if "malignant" not in l1_names else "benign")
    tax = tx.Taxonomy(
        level1_names=tuple(l1_names[:2]),
        level2_names=tuple(l2_names),
        level2_parents=tuple(l2_parents),
        level3_names=tuple(l3_names),
        level3_parents=tuple(l3_parents),
        id_flags=tuple(True for _ in l3_names),
    )
    amb = kv.get("ambiguous_pair")
    return GenSpec(
        taxonomy=tax,
        per_category_counts=counts,
        category_params=params,
        image_size=int(kv.get("image_size", "64")),
        patients=int(kv.get("patients", "500")),
        seed=seed if seed is not None else int(kv.get("seed", "0")),
        id_cutoff=int(kv.get("id_cutoff", "100")),
        id_percentile=float(kv.get("id_percentile", "0.25")),
        subset_thresholds=(
            int(kv.get("head_min", "10000")),
            int(kv.get("middle_min", "500")),
            int(kv.get("tail_min", "100")),
        ),
        unknown_per_kind=int(kv.get("unknown_per_kind", "0")),
        ambiguous_pair=tuple(amb.split("\t")) if amb else None,
        test_fraction=float(kv.get("test_fraction", "0.15")),
        val_fraction=float(kv.get("val_fraction", "0.2")),
    )


def load_genspec(path: str | Path, seed: int | None = None) -> GenSpec:
    return parse_genspec(Path(path).read_text(encoding="utf-8"), seed=seed)


def mini_genspec(seed: int | None = None) -> GenSpec:
    """The shipped desk-scale spec: 12 ID + 3 OOD categories, ~5k lesions."""
    from importlib import resources

    text = resources.files("hotlesion").joinpath("data/mini.genspec").read_text("utf-8")
    return parse_genspec(text, seed=seed)
