"""Labelled CT cases and their on-disk layout.

A dataset directory holds::

    manifest.csv   volume_id,image,mask,n_slices,ct_label
    labels.csv     volume_id,slice_index,label
    truth.csv      volume_id,label
    volumes/<id>.rvol   image volume (hu or normalized)
    masks/<id>.rvol     hemorrhage mask volume
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError
from .io import read_csv, read_volume, write_csv, write_volume
from .preprocess import Volume

MANIFEST_HEADER = ("volume_id", "image", "mask", "n_slices", "ct_label")
LABELS_HEADER = ("volume_id", "slice_index", "label")
TRUTH_HEADER = ("volume_id", "label")


@dataclass
class LabeledSlice:
    image: np.ndarray
    label: int
    mask: np.ndarray


@dataclass
class Case:
    volume_id: str
    volume: Volume
    mask: Volume
    labels: np.ndarray
    ct_label: int

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.mask.kind != "mask":
            raise DataError(f"{self.volume_id}: mask volume has kind {self.mask.kind!r}")
        if self.mask.dims != self.volume.dims:
            raise DataError(f"{self.volume_id}: mask dims {self.mask.dims} != image dims {self.volume.dims}")
        if self.labels.shape != (self.volume.dims[0],):
            raise DataError(f"{self.volume_id}: {self.labels.shape[0]} labels for {self.volume.dims[0]} slices")
        has_blob = self.mask.voxels.reshape(self.volume.dims[0], -1).any(axis=1)
        if not np.array_equal(has_blob, self.labels == 1):
            raise DataError(f"{self.volume_id}: slice labels disagree with mask content")

    @property
    def n_slices(self) -> int:
        return self.volume.dims[0]

    @property
    def slices(self) -> list[LabeledSlice]:
        return [LabeledSlice(self.volume.voxels[z], int(self.labels[z]), self.mask.voxels[z])
                for z in range(self.n_slices)]


def write_dataset(cases: list[Case], directory: str | Path) -> None:
    root = Path(directory)
    try:
        (root / "volumes").mkdir(parents=True, exist_ok=True)
        (root / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create dataset directory {root}: {exc.strerror}") from None
    manifest, labels, truth = [], [], []
    for case in cases:
        image_rel = f"volumes/{case.volume_id}.rvol"
        mask_rel = f"masks/{case.volume_id}.rvol"
        for rel, vol in ((image_rel, case.volume), (mask_rel, case.mask)):
            try:
                write_volume(vol, root / rel)
            except OSError as exc:
                raise DataError(f"cannot write {root / rel}: {exc.strerror}") from None
        manifest.append((case.volume_id, image_rel, mask_rel, case.n_slices, case.ct_label))
        labels.extend((case.volume_id, z, int(lab)) for z, lab in enumerate(case.labels))
        truth.append((case.volume_id, case.ct_label))
    write_csv(root / "manifest.csv", MANIFEST_HEADER, manifest)
    write_csv(root / "labels.csv", LABELS_HEADER, labels)
    write_csv(root / "truth.csv", TRUTH_HEADER, truth)


def read_dataset(directory: str | Path) -> list[Case]:
    root = Path(directory)
    if not (root / "manifest.csv").is_file():
        raise DataError(f"no manifest.csv in {root}")
    manifest = read_csv(root / "manifest.csv", MANIFEST_HEADER)
    per_volume: dict[str, dict[int, int]] = {}
    for row in read_csv(root / "labels.csv", LABELS_HEADER):
        per_volume.setdefault(row["volume_id"], {})[int(row["slice_index"])] = int(row["label"])
    cases = []
    for row in manifest:
        vid = row["volume_id"]
        n = int(row["n_slices"])
        found = per_volume.get(vid, {})
        if sorted(found) != list(range(n)):
            raise FormatError(f"labels.csv does not list slices 0..{n - 1} of {vid}", path=str(root / "labels.csv"))
        cases.append(Case(
            volume_id=vid,
            volume=read_volume(root / row["image"]),
            mask=read_volume(root / row["mask"]),
            labels=np.array([found[z] for z in range(n)]),
            ct_label=int(row["ct_label"]),
        ))
    return cases
