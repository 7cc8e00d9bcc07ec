"""Superclass partitions of fine-grained class ids, and per-expert dataset views."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional

import numpy as np

from .data import LabeledDataset


class PartitionError(ValueError):
    pass


class DuplicateClassError(PartitionError):
    pass


class MissingClassError(PartitionError):
    pass


class EmptySuperclassError(PartitionError):
    pass


class MapFormatError(PartitionError):
    pass


@dataclass(frozen=True)
class SuperclassMap:
    """``members[i]`` lists superclass i's fine classes in ascending order.

    That order is the expert's local output index.
    """

    members: tuple

    def __post_init__(self):
        members = tuple(tuple(sorted(int(c) for c in group)) for group in self.members)
        object.__setattr__(self, "members", members)
        seen = set()
        for i, group in enumerate(members):
            if not group:
                raise EmptySuperclassError(f"superclass {i} is empty")
            for c in group:
                if c in seen:
                    raise DuplicateClassError(f"fine class {c} assigned twice")
                seen.add(c)
        missing = sorted(set(range(max(seen) + 1)) - seen) if seen else []
        if missing:
            raise MissingClassError(f"missing fine class(es) {missing}")

    @classmethod
    def from_assignment(cls, pairs: Iterable[tuple], n_classes: Optional[int] = None) -> "SuperclassMap":
        """Build from (fine_id, superclass_id) pairs; superclass ids must be 0..N-1."""
        assignment: dict = {}
        for fine, sup in pairs:
            if fine < 0 or sup < 0:
                raise MapFormatError("class ids must be non-negative")
            if fine in assignment:
                raise DuplicateClassError(f"fine class {fine} assigned twice")
            assignment[fine] = sup
        if not assignment:
            raise EmptySuperclassError("map defines no superclasses")
        n_super = max(assignment.values()) + 1
        groups: list = [[] for _ in range(n_super)]
        for fine, sup in assignment.items():
            groups[sup].append(fine)
        out = cls(tuple(groups))
        if n_classes is not None and out.n_classes != n_classes:
            missing = sorted(set(range(n_classes)) - set(assignment))
            if missing:
                raise MissingClassError(f"missing fine class(es) {missing}")
            raise PartitionError(f"map covers {out.n_classes} classes, dataset has {n_classes}")
        return out

    @classmethod
    def contiguous(cls, sizes: Iterable[int]) -> "SuperclassMap":
        groups, start = [], 0
        for s in sizes:
            groups.append(range(start, start + s))
            start += s
        return cls(tuple(groups))

    @property
    def n_superclasses(self) -> int:
        return len(self.members)

    @property
    def n_classes(self) -> int:
        return sum(len(g) for g in self.members)

    @property
    def mapping(self) -> Mapping[int, int]:
        return {c: i for i, group in enumerate(self.members) for c in group}

    @property
    def lookup(self) -> np.ndarray:
        """Array form of ``mapping``: ``lookup[fine] == superclass``."""
        table = np.empty(self.n_classes, dtype=np.int64)
        for i, group in enumerate(self.members):
            table[list(group)] = i
        return table

    def local_to_global(self, i: int) -> tuple:
        return self.members[i]

    def sizes(self) -> tuple:
        return tuple(len(g) for g in self.members)

    def extended(self, new_classes: Iterable[int]) -> "SuperclassMap":
        return SuperclassMap(self.members + (tuple(new_classes),))

    def to_text(self) -> str:
        lines = ["# fine_id\tsuperclass_id"]
        lines += [f"{c}\t{s}" for c, s in sorted(self.mapping.items())]
        return "\n".join(lines) + "\n"


def parse_superclass_map(text: str, n_classes: Optional[int] = None) -> SuperclassMap:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split("\t") if "\t" in line else line.split()
        if len(fields) != 2 or not all(f.strip().isdigit() for f in fields):
            raise MapFormatError(f"line {lineno}: expected '<fine_id>\\t<superclass_id>', got {line!r}")
        pairs.append((int(fields[0]), int(fields[1])))
    return SuperclassMap.from_assignment(pairs, n_classes)


def load_superclass_map(path, n_classes: Optional[int] = None) -> SuperclassMap:
    return parse_superclass_map(Path(path).read_text(encoding="ascii"), n_classes)


def relabel_superclass(ds: LabeledDataset, smap: SuperclassMap) -> LabeledDataset:
    if len(ds) and ds.labels.max() >= smap.n_classes:
        raise MissingClassError(f"label {int(ds.labels.max())} not covered by the superclass map")
    return LabeledDataset(ds.images, smap.lookup[ds.labels])


def restrict_to_superclass(ds: LabeledDataset, smap: SuperclassMap, i: int) -> tuple:
    """Samples of superclass ``i`` with local labels.

    Returns ``(dataset, local_to_global, sample_index)``.
    """
    if not 0 <= i < smap.n_superclasses:
        raise PartitionError(f"superclass id {i} not in [0, {smap.n_superclasses})")
    members = smap.local_to_global(i)
    to_local = np.full(max(smap.n_classes, ds.n_classes), -1, dtype=np.int64)
    to_local[list(members)] = np.arange(len(members))
    index = np.flatnonzero(np.isin(ds.labels, members))
    return LabeledDataset(ds.images[index], to_local[ds.labels[index]]), members, index
