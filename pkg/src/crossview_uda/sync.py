"""Manifest I/O, multi-view synchronization and stratified splitting."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from crossview_uda.config import DomainRole, ModalityId, SampleRecord, SyncGroup, ViewId, ViewRole

SCHEMA_VERSION = 1
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class Manifest:
    records: tuple[SampleRecord, ...]
    class_names: tuple[str, ...]
    views: dict = field(default_factory=dict)  # view index -> ViewRole
    modalities: dict = field(default_factory=dict)  # modality name -> ModalityId
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if len(set(self.class_names)) != len(self.class_names):
            raise ValueError("class_names must be distinct")
        K = len(self.class_names)
        for rec in self.records:
            if rec.class_id is not None and rec.class_id >= K:
                raise ValueError(f"record {rec.clip_ref}: class_id {rec.class_id} outside [0,{K})")
            if self.views and rec.view not in self.views:
                raise ValueError(f"record {rec.clip_ref}: view {rec.view} not declared in header")
            if self.modalities and rec.modality not in self.modalities:
                raise ValueError(f"record {rec.clip_ref}: modality {rec.modality} not declared in header")
        anchors = [v for v, role in self.views.items() if ViewRole(role) is ViewRole.ANCHOR]
        if self.views and len(anchors) != 1:
            raise ValueError(f"manifest must declare exactly one anchor view, found {len(anchors)}")

    @property
    def K(self) -> int:
        return len(self.class_names)

    def view_id(self, index: int) -> ViewId:
        return ViewId(index, self.views[index])

    @property
    def anchor_view(self) -> int:
        return next(v for v, role in self.views.items() if ViewRole(role) is ViewRole.ANCHOR)

    def views_with_role(self, role: ViewRole) -> list[int]:
        return sorted(v for v, r in self.views.items() if ViewRole(r) is role)

    def modality_with_role(self, role: DomainRole) -> str:
        names = [m.name for m in self.modalities.values() if m.domain_role is role]
        if len(names) != 1:
            raise ValueError(f"expected exactly one {role.value} modality, found {names}")
        return names[0]

    def select(self, view: Optional[int] = None, modality: Optional[str] = None) -> list[SampleRecord]:
        return [
            r for r in self.records
            if (view is None or r.view == view) and (modality is None or r.modality == modality)
        ]

    def strip_target_labels(self) -> "Manifest":
        """Copy with labels removed from every target-modality record (the training-side view)."""
        targets = {m.name for m in self.modalities.values() if m.domain_role is DomainRole.TARGET}
        records = [r.without_label() if r.modality in targets else r for r in self.records]
        return Manifest(records, self.class_names, self.views, self.modalities, self.schema_version)

    # -- persistence -------------------------------------------------------

    def header(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "class_names": list(self.class_names),
            "views": {str(v): ViewRole(r).value for v, r in sorted(self.views.items())},
            "modalities": [
                {"index": m.index, "name": m.name, "domain_role": m.domain_role.value}
                for m in sorted(self.modalities.values(), key=lambda m: m.index)
            ],
        }

    def save(self, path) -> None:
        lines = [json.dumps(self.header(), sort_keys=True)]
        for r in self.records:
            lines.append(json.dumps({
                "clip_ref": r.clip_ref, "view": r.view, "modality": r.modality,
                "class": r.class_id, "start_frame": r.start_frame, "end_frame": r.end_frame,
            }, sort_keys=True))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path, strip_target_labels: bool = False) -> "Manifest":
        lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
        if not lines:
            raise ValueError(f"{path}: empty manifest")
        head = json.loads(lines[0])
        if head.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"{path}: unsupported schema_version {head.get('schema_version')!r}")
        views = {int(k): ViewRole(v) for k, v in head.get("views", {}).items()}
        modalities = {
            m["name"]: ModalityId(m["index"], m["name"], DomainRole(m["domain_role"]))
            for m in head.get("modalities", [])
        }
        records = []
        for n, line in enumerate(lines[1:], start=2):
            row = json.loads(line)
            try:
                records.append(SampleRecord(
                    clip_ref=row["clip_ref"], view=int(row["view"]), modality=row["modality"],
                    class_id=row.get("class"), start_frame=int(row["start_frame"]),
                    end_frame=int(row["end_frame"]),
                ))
            except KeyError as exc:
                raise ValueError(f"{path}:{n}: missing field {exc}") from None
        manifest = cls(records, head["class_names"], views, modalities, SCHEMA_VERSION)
        return manifest.strip_target_labels() if strip_target_labels else manifest


def _candidate_key(anchor: SampleRecord, rec: SampleRecord):
    return (-anchor.overlap(rec), rec.start_frame, rec.clip_ref)


def build_sync_groups(
    manifest: Manifest,
    anchor: int,
    positives: Sequence[int],
    min_overlap_frames: int = 1,
    modality: Optional[str] = None,
) -> list[SyncGroup]:
    """Align anchor-view records with same-class, temporally overlapping records of each positive view.

    For each positive view the candidate with the largest overlap wins; ties go to the smaller
    start_frame, then the lexicographically smaller clip_ref. Anchors lacking a match in any
    positive view become flagged singleton groups.
    """
    if anchor in positives:
        raise ValueError("anchor view cannot also be a positive view")
    if min_overlap_frames < 1:
        raise ValueError("min_overlap_frames must be >= 1")

    records = [r for r in manifest.records if modality is None or r.modality == modality]
    for r in records:
        if r.view in positives and r.class_id is None:
            raise ValueError(f"positive-view record {r.clip_ref} has no class label")

    # index positives by (view, class) sorted on start_frame so the scan can stop early
    index: dict[tuple[int, int], list[SampleRecord]] = {}
    for r in records:
        if r.view in positives:
            index.setdefault((r.view, r.class_id), []).append(r)
    for bucket in index.values():
        bucket.sort(key=lambda r: (r.start_frame, r.clip_ref))
    starts = {key: np.array([r.start_frame for r in bucket]) for key, bucket in index.items()}

    groups = []
    anchors = sorted((r for r in records if r.view == anchor), key=lambda r: (r.start_frame, r.clip_ref))
    for a in anchors:
        if a.class_id is None:
            continue
        chosen = []
        for view in positives:
            bucket = index.get((view, a.class_id), [])
            # candidates must start before the anchor ends
            stop = int(np.searchsorted(starts[(view, a.class_id)], a.end_frame, side="left")) if bucket else 0
            best = None
            for rec in bucket[:stop]:
                if a.overlap(rec) >= min_overlap_frames:
                    if best is None or _candidate_key(a, rec) < _candidate_key(a, best):
                        best = rec
            if best is None:
                chosen = None
                break
            chosen.append(best)
        if chosen is None:
            groups.append(SyncGroup(a, (), a.class_id, (a.start_frame, a.end_frame), flagged=True))
            continue
        lo = max([a.start_frame] + [r.start_frame for r in chosen])
        hi = min([a.end_frame] + [r.end_frame for r in chosen])
        if hi <= lo:
            # pairwise overlaps with the anchor do not imply a common window across all views
            groups.append(SyncGroup(a, (), a.class_id, (a.start_frame, a.end_frame), flagged=True))
            continue
        groups.append(SyncGroup(a, tuple(chosen), a.class_id, (lo, hi)))
    return groups


@dataclass(frozen=True)
class SplitAssignment:
    mapping: dict  # group id -> split name
    fractions: tuple[float, float, float] = (0.70, 0.15, 0.15)

    def groups_in(self, split: str) -> list[str]:
        return sorted(g for g, s in self.mapping.items() if s == split)

    def save(self, path) -> None:
        lines = [json.dumps({"clip_group_id": g, "split": s}) for g, s in sorted(self.mapping.items())]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "SplitAssignment":
        mapping = {}
        for line in Path(path).read_text().splitlines():
            if line.strip():
                row = json.loads(line)
                if row["split"] not in SPLITS:
                    raise ValueError(f"{path}: unknown split {row['split']!r}")
                mapping[row["clip_group_id"]] = row["split"]
        return cls(mapping)


def largest_remainder(n: int, fractions: Sequence[float]) -> list[int]:
    quotas = [n * f for f in fractions]
    sizes = [int(np.floor(q)) for q in quotas]
    remainders = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in remainders[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def stratified_split(
    groups: Iterable[SyncGroup],
    fractions: Sequence[float] = (0.70, 0.15, 0.15),
    seed: int = 0,
) -> SplitAssignment:
    """Per-class seeded shuffle, then contiguous train/val/test cuts sized by largest remainder."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three nonnegative values summing to 1, got {fractions}")
    by_class: dict[int, list[str]] = {}
    for g in groups:
        by_class.setdefault(g.class_id, []).append(g.group_id)
    mapping = {}
    for k in sorted(by_class):
        ids = sorted(by_class[k])
        if len(ids) < 3:
            raise ValueError(f"class {k} has only {len(ids)} groups; at least 3 are required")
        rng = np.random.default_rng([seed, k])
        order = rng.permutation(len(ids))
        sizes = largest_remainder(len(ids), fractions)
        cut = 0
        for split, size in zip(SPLITS, sizes):
            for i in order[cut:cut + size]:
                mapping[ids[i]] = split
            cut += size
    return SplitAssignment(mapping, fractions)


def assign_records_to_groups(manifest: Manifest, groups: Sequence[SyncGroup], anchor_view: int) -> dict:
    """Map every record's clip_ref to the clip-group it belongs to.

    Each record joins the anchor group whose interval overlaps it most (same class when the
    record is labelled); ties follow the synchronization tie-break. Records overlapping no
    anchor are left out.
    """
    by_class: dict = {}
    for g in groups:
        by_class.setdefault(g.class_id, []).append(g.anchor)
    all_anchors = sorted((g.anchor for g in groups), key=lambda r: (r.start_frame, r.clip_ref))
    for bucket in by_class.values():
        bucket.sort(key=lambda r: (r.start_frame, r.clip_ref))

    out = {}
    for g in groups:
        out[g.anchor.clip_ref] = g.group_id
        for p in g.positives:
            out.setdefault(p.clip_ref, g.group_id)
    for rec in manifest.records:
        if rec.clip_ref in out:
            continue
        pool = all_anchors if rec.class_id is None else by_class.get(rec.class_id, [])
        best = None
        for a in pool:
            if a.start_frame >= rec.end_frame:
                break
            if rec.overlap(a) > 0 and (best is None or _candidate_key(rec, a) < _candidate_key(rec, best)):
                best = a
        if best is not None:
            out[rec.clip_ref] = best.clip_ref
    return out
