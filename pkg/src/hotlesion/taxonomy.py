"""Three-level label taxonomy, ID/OOD split, subset partition and dataset splits.

The label tree has exactly two level-1 categories (benign/malignant style),
level-2 families under them and fine-grained level-3 diagnoses. Level-3
categories are flagged In-Distribution (ID) or reserved Out-of-Distribution
(OOD); the ID set is further partitioned into head/middle/tail subsets by
sample count.

File formats (UTF-8, tab-separated):
  taxonomy document: one category per line, ``level<k>\\t<name>\\t<parent>\\t<count>``
    (parent empty for level 1, count optional).
  dataset manifest: header line then one record per line with fields
    ``lesion_id patient_id clinical_path dermoscopic_path level1 level2 level3 split``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import (
    CountBelowTailMin,
    DanglingParent,
    DuplicateName,
    EmptyCounts,
    MalformedDocument,
)

UNKNOWN_LABEL = "__unknown__"
SPLITS = ("train", "val", "test", "ood_test")


@dataclass(frozen=True)
class LabelPath:
    """Indices of one (level1, level2, level3) label under a Taxonomy."""

    l1: int
    l2: int
    l3: int


@dataclass(frozen=True)
class Taxonomy:
    level1_names: tuple[str, ...]
    level2_names: tuple[str, ...]
    level2_parents: tuple[int, ...]  # index into level1_names
    level3_names: tuple[str, ...]
    level3_parents: tuple[int, ...]  # index into level2_names
    id_flags: tuple[bool, ...]  # per level-3 category
    counts: tuple[int, ...] | None = None  # per level-3 category, optional

    def __post_init__(self):
        if len(self.level1_names) != 2:
            raise MalformedDocument(
                f"level 1 must have exactly 2 categories, got {len(self.level1_names)}"
            )
        if len(self.level2_parents) != len(self.level2_names):
            raise MalformedDocument("level-2 parent list length mismatch")
        if len(self.level3_parents) != len(self.level3_names):
            raise MalformedDocument("level-3 parent list length mismatch")
        if len(self.id_flags) != len(self.level3_names):
            raise MalformedDocument("id_flags length mismatch")

    # -- lookups ---------------------------------------------------------

    def label_path(self, l3: int) -> LabelPath:
        l2 = self.level3_parents[l3]
        return LabelPath(self.level2_parents[l2], l2, l3)

    def path_from_names(self, l1: str, l2: str, l3: str) -> LabelPath:
        try:
            i3 = self.level3_names.index(l3)
        except ValueError:
            raise DanglingParent(f"unknown level-3 category {l3!r}") from None
        path = self.label_path(i3)
        if self.level2_names[path.l2] != l2 or self.level1_names[path.l1] != l1:
            raise MalformedDocument(
                f"label {l1}:{l2}:{l3} disagrees with taxonomy parents "
                f"{self.level1_names[path.l1]}:{self.level2_names[path.l2]}"
            )
        return path

    def names_of(self, path: LabelPath) -> tuple[str, str, str]:
        return (
            self.level1_names[path.l1],
            self.level2_names[path.l2],
            self.level3_names[path.l3],
        )

    def id_level3_indices(self) -> tuple[int, ...]:
        return tuple(i for i, f in enumerate(self.id_flags) if f)

    def ood_level3_indices(self) -> tuple[int, ...]:
        return tuple(i for i, f in enumerate(self.id_flags) if not f)

    def with_id_split(self, id_set: set[int]) -> "Taxonomy":
        flags = tuple(i in id_set for i in range(len(self.level3_names)))
        return replace(self, id_flags=flags)

    # -- serialization ---------------------------------------------------

    def to_document(self) -> str:
        lines = []
        for name in self.level1_names:
            lines.append(f"level1\t{name}\t\t")
        for name, p in zip(self.level2_names, self.level2_parents):
            lines.append(f"level2\t{name}\t{self.level1_names[p]}\t")
        for i, (name, p) in enumerate(zip(self.level3_names, self.level3_parents)):
            count = "" if self.counts is None else str(self.counts[i])
            lines.append(f"level3\t{name}\t{self.level2_names[p]}\t{count}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        """sha256 of the canonical tree (names, parents and ID flags; not counts)."""
        h = hashlib.sha256()
        h.update("|".join(self.level1_names).encode())
        for name, p in zip(self.level2_names, self.level2_parents):
            h.update(f"{name}<{p}".encode())
        for name, p, f in zip(self.level3_names, self.level3_parents, self.id_flags):
            h.update(f"{name}<{p}:{int(f)}".encode())
        return h.hexdigest()


def load_taxonomy(document: str) -> Taxonomy:
    """Parse a taxonomy document; ID flags default to all-ID until a split is applied."""
    l1: list[str] = []
    l2: list[str] = []
    l2_parent: list[int] = []
    l3: list[str] = []
    l3_parent: list[int] = []
    counts: list[int] = []
    any_count = False
    for lineno, raw in enumerate(document.splitlines(), start=1):
        line = raw.rstrip("\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) < 2:
            raise MalformedDocument(f"line {lineno}: expected tab-separated fields")
        level = fields[0].strip()
        name = fields[1].strip()
        parent = fields[2].strip() if len(fields) > 2 else ""
        count_s = fields[3].strip() if len(fields) > 3 else ""
        if not name:
            raise MalformedDocument(f"line {lineno}: empty category name")
        if level == "level1":
            if name in l1:
                raise DuplicateName(f"line {lineno}: duplicate level-1 name {name!r}")
            l1.append(name)
        elif level == "level2":
            if name in l2:
                raise DuplicateName(f"line {lineno}: duplicate level-2 name {name!r}")
            if parent not in l1:
                raise DanglingParent(f"line {lineno}: level-2 {name!r} names missing level-1 {parent!r}")
            l2.append(name)
            l2_parent.append(l1.index(parent))
        elif level == "level3":
            if name in l3:
                raise DuplicateName(f"line {lineno}: duplicate level-3 name {name!r}")
            if parent not in l2:
                raise DanglingParent(f"line {lineno}: level-3 {name!r} names missing level-2 {parent!r}")
            l3.append(name)
            l3_parent.append(l2.index(parent))
            if count_s:
                try:
                    counts.append(int(count_s))
                except ValueError:
                    raise MalformedDocument(f"line {lineno}: bad count {count_s!r}") from None
                any_count = True
            else:
                counts.append(-1)
        else:
            raise MalformedDocument(f"line {lineno}: unknown level tag {level!r}")
    if not l3:
        raise MalformedDocument("document defines no level-3 categories")
    if any_count and any(c < 0 for c in counts):
        raise MalformedDocument("counts must be given for all level-3 categories or none")
    return Taxonomy(
        level1_names=tuple(l1),
        level2_names=tuple(l2),
        level2_parents=tuple(l2_parent),
        level3_names=tuple(l3),
        level3_parents=tuple(l3_parent),
        id_flags=tuple(True for _ in l3),
        counts=tuple(counts) if any_count else None,
    )


def load_taxonomy_file(path: str | Path) -> Taxonomy:
    return load_taxonomy(Path(path).read_text(encoding="utf-8"))


# -- ID/OOD split ---------------------------------------------------------


def split_id_ood(
    counts, cutoff: int, percentile: float
) -> tuple[frozenset[int], frozenset[int]]:
    """Split level-3 categories into ID and OOD sets by sample count.

    A category is OOD iff its count is below ``cutoff`` AND it lies in the
    bottom ``percentile`` of the observed count range, i.e. its count is below
    ``min + percentile * (max - min)``. Both conditions are required; for a
    uniform count distribution the range is degenerate and nothing is OOD.
    """
    counts = list(counts)
    if not counts:
        raise EmptyCounts("no category counts given")
    if not 0.0 < percentile < 1.0:
        raise ValueError(f"percentile must be in (0,1), got {percentile}")
    if any(c < 0 for c in counts):
        raise ValueError("counts must be nonnegative")
    lo, hi = min(counts), max(counts)
    range_cut = lo + percentile * (hi - lo)
    ood = frozenset(
        i for i, c in enumerate(counts) if c < cutoff and c < range_cut
    )
    id_set = frozenset(i for i in range(len(counts)) if i not in ood)
    return id_set, ood


# -- head/middle/tail partition --------------------------------------------


@dataclass(frozen=True)
class SubsetPartition:
    head: frozenset[int]
    middle: frozenset[int]
    tail: frozenset[int]
    ood: frozenset[int]
    thresholds: tuple[int, int, int]  # (head_min, middle_min, tail_min)

    def subset_of(self, l3: int) -> str:
        if l3 in self.head:
            return "head"
        if l3 in self.middle:
            return "middle"
        if l3 in self.tail:
            return "tail"
        if l3 in self.ood:
            return "ood"
        raise KeyError(f"level-3 index {l3} not covered by partition")

    def members(self, subset: str) -> frozenset[int]:
        return {"head": self.head, "middle": self.middle, "tail": self.tail, "ood": self.ood}[subset]


def partition_subsets(
    id_counts: dict[int, int],
    thresholds: tuple[int, int, int],
    ood: frozenset[int] = frozenset(),
) -> SubsetPartition:
    """Assign each ID category to head/middle/tail by count.

    head: count >= head_min; middle: middle_min <= count < head_min;
    tail: tail_min <= count < middle_min. Thresholds strictly decreasing.
    """
    head_min, middle_min, tail_min = thresholds
    if not (head_min > middle_min > tail_min >= 1):
        raise ValueError(f"thresholds must be strictly decreasing and >= 1: {thresholds}")
    head, middle, tail = set(), set(), set()
    for idx, count in id_counts.items():
        if count >= head_min:
            head.add(idx)
        elif count >= middle_min:
            middle.add(idx)
        elif count >= tail_min:
            tail.add(idx)
        else:
            raise CountBelowTailMin(
                f"category {idx} has count {count} < tail_min {tail_min}; it should be OOD"
            )
    return SubsetPartition(
        head=frozenset(head),
        middle=frozenset(middle),
        tail=frozenset(tail),
        ood=ood,
        thresholds=thresholds,
    )


def build_partition(
    taxonomy: Taxonomy,
    cutoff: int,
    percentile: float,
    thresholds: tuple[int, int, int],
) -> tuple[Taxonomy, SubsetPartition]:
    """Chain split_id_ood + partition_subsets on a taxonomy with counts."""
    if taxonomy.counts is None:
        raise EmptyCounts("taxonomy has no per-category counts")
    id_set, ood_set = split_id_ood(taxonomy.counts, cutoff, percentile)
    tax = taxonomy.with_id_split(set(id_set))
    id_counts = {i: taxonomy.counts[i] for i in id_set}
    return tax, partition_subsets(id_counts, thresholds, ood=ood_set)


# -- lesion records and dataset splits --------------------------------------


@dataclass(frozen=True)
class LesionRecord:
    lesion_id: str
    patient_id: str
    clinical_ref: str
    dermoscopic_ref: str
    label: LabelPath | None  # None marks the reserved __unknown__ token
    split: str = ""

    @property
    def is_unknown(self) -> bool:
        return self.label is None


def split_train_test(
    records: list[LesionRecord],
    test_fraction: float,
    val_fraction: float,
    seed: int,
    taxonomy: Taxonomy | None = None,
    allow_patient_overlap: bool = False,
) -> tuple[list[LesionRecord], dict]:
    """Assign train/val/test/ood_test splits, grouped by patient.

    Patients (not images) are partitioned at the train/test boundary, then
    train-side patients are split again into train/val. Records whose level-3
    label is OOD under the taxonomy flags, or carry the unknown token, always
    go to ood_test. Deterministic in ``seed``. Returns the records plus a
    warnings dict for degenerate cases (e.g. empty validation set).
    """
    if not 0.0 < test_fraction < 1.0 or not 0.0 < val_fraction < 1.0:
        raise ValueError("fractions must be in (0, 1)")
    id_flags = None if taxonomy is None else taxonomy.id_flags

    def is_ood(rec: LesionRecord) -> bool:
        if rec.is_unknown:
            return True
        return id_flags is not None and not id_flags[rec.label.l3]

    id_records = [r for r in records if not is_ood(r)]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5714]))

    if allow_patient_overlap:
        order = rng.permutation(len(id_records))
        n_test = int(len(id_records) * test_fraction)
        test_idx = set(order[:n_test].tolist())
        rest = [i for i in order.tolist() if i not in test_idx]
        n_val = int(len(rest) * val_fraction)
        val_idx = set(rest[:n_val])
        assign = {
            i: ("test" if i in test_idx else "val" if i in val_idx else "train")
            for i in range(len(id_records))
        }
        splits = {id(r): assign[i] for i, r in enumerate(id_records)}
    else:
        patients = sorted({r.patient_id for r in id_records})
        perm = rng.permutation(len(patients))
        n_test = int(len(patients) * test_fraction)
        test_patients = {patients[i] for i in perm[:n_test]}
        train_side = [patients[i] for i in perm[n_test:]]
        n_val = int(len(train_side) * val_fraction)
        val_patients = set(train_side[:n_val])
        splits = {}
        for r in id_records:
            if r.patient_id in test_patients:
                splits[id(r)] = "test"
            elif r.patient_id in val_patients:
                splits[id(r)] = "val"
            else:
                splits[id(r)] = "train"

    out = []
    n_per = {s: 0 for s in SPLITS}
    for r in records:
        split = "ood_test" if is_ood(r) else splits[id(r)]
        n_per[split] += 1
        out.append(replace(r, split=split))
    warnings = {}
    if n_per["val"] == 0:
        warnings["empty_val"] = "validation split is empty (too few patients)"
    if n_per["train"] == 0:
        warnings["empty_train"] = "training split is empty"
    return out, warnings


# -- manifest IO -------------------------------------------------------------

MANIFEST_FIELDS = (
    "lesion_id",
    "patient_id",
    "clinical_path",
    "dermoscopic_path",
    "level1",
    "level2",
    "level3",
    "split",
)


def write_manifest(records: list[LesionRecord], taxonomy: Taxonomy, path: str | Path) -> None:
    lines = ["\t".join(MANIFEST_FIELDS)]
    for r in records:
        if r.is_unknown:
            l1 = l2 = ""
            l3 = UNKNOWN_LABEL
        else:
            l1, l2, l3 = taxonomy.names_of(r.label)
        lines.append(
            "\t".join(
                (r.lesion_id, r.patient_id, r.clinical_ref, r.dermoscopic_ref, l1, l2, l3, r.split)
            )
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path: str | Path, taxonomy: Taxonomy) -> list[LesionRecord]:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or tuple(lines[0].split("\t")) != MANIFEST_FIELDS:
        raise MalformedDocument(f"manifest {path}: missing or bad header line")
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != len(MANIFEST_FIELDS):
            raise MalformedDocument(f"manifest line {lineno}: expected {len(MANIFEST_FIELDS)} fields")
        lesion_id, patient_id, cpath, dpath, l1, l2, l3, split = fields
        if split not in SPLITS:
            raise MalformedDocument(f"manifest line {lineno}: unknown split {split!r}")
        if l3 == UNKNOWN_LABEL:
            label = None
        else:
            label = taxonomy.path_from_names(l1, l2, l3)
        records.append(
            LesionRecord(
                lesion_id=lesion_id,
                patient_id=patient_id,
                clinical_ref=cpath,
                dermoscopic_ref=dpath,
                label=label,
                split=split,
            )
        )
    return records
