"""Dataset preparation: derived artifacts and in-memory bundles.

For every manifest entry this computes (and caches on disk) the vesselness
map, the Otsu pseudo label, and for training images the superpixel
partition.  Vesselness and pseudo labels are stored as PGM, partitions as
16-bit raw grids with a JSON sidecar; the stored (8-bit quantized)
vesselness is what every later stage consumes, so reruns and the HTTP
service see byte-identical inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .core import (
    GrayImage,
    LabelGrid,
    Manifest,
    ManifestEntry,
    load_ground_truth,
    load_label_pgm,
    load_manifest,
    load_pgm,
    load_sequence,
    save_label_pgm,
    save_pgm,
)
from .layersep import VesselnessMap, pseudo_label_for_sequence
from .superpixel import SuperpixelPartition, default_target_count, load_partition, save_partition, slic


@dataclass
class SampleRecord:
    image_id: str
    image: GrayImage  # the key frame
    pseudo: LabelGrid
    vesselness: VesselnessMap
    truth: LabelGrid | None
    partition: SuperpixelPartition | None  # train images only


@dataclass
class DatasetBundle:
    train: list[SampleRecord]
    val: list[SampleRecord]
    test: list[SampleRecord]

    def totals(self) -> dict:
        return {"train": len(self.train), "val": len(self.val), "test": len(self.test)}


def _derived_paths(derived_dir: Path, entry: ManifestEntry) -> dict[str, Path]:
    base = derived_dir / entry.sequence_dir
    return {
        "base": base,
        "key": base / "key_frame.pgm",
        "vesselness": base / "vesselness.pgm",
        "pseudo": base / "pseudo.pgm",
        "partition": base / "partition.sp",
    }


def prepare_derived(
    manifest_path: str | Path,
    derived_dir: str | Path,
    disk_diameter: float = 20.0,
    xi_scale: float = 0.8,
    target_superpixels: int | None = None,
    compactness: float = 0.1,
) -> None:
    """Generate missing derived artifacts for every split (idempotent)."""
    manifest_path = Path(manifest_path)
    manifest = load_manifest(manifest_path)
    derived_dir = Path(derived_dir)
    for split in ("train", "val", "test"):
        for entry in manifest.split(split):
            paths = _derived_paths(derived_dir, entry)
            need_layers = not (paths["vesselness"].exists() and paths["pseudo"].exists() and paths["key"].exists())
            need_partition = split == "train" and not paths["partition"].exists()
            if not (need_layers or need_partition):
                continue
            paths["base"].mkdir(parents=True, exist_ok=True)
            if need_layers:
                seq = load_sequence(manifest_path.parent, entry)
                vmap, otsu, _ = pseudo_label_for_sequence(seq, disk_diameter, xi_scale)
                save_pgm(seq.key_frame, paths["key"])
                save_pgm(GrayImage(vmap.values), paths["vesselness"])
                save_label_pgm(otsu.labels, paths["pseudo"])
            if need_partition:
                key = load_pgm(paths["key"])
                target = target_superpixels or default_target_count(key.height, key.width)
                save_partition(slic(key, target, compactness), paths["partition"])


def load_bundle(manifest_path: str | Path, derived_dir: str | Path) -> DatasetBundle:
    """Load key frames plus derived artifacts; prepare_derived must have run."""
    manifest_path = Path(manifest_path)
    manifest = load_manifest(manifest_path)
    derived_dir = Path(derived_dir)
    splits: dict[str, list[SampleRecord]] = {"train": [], "val": [], "test": []}
    for split in ("train", "val", "test"):
        for entry in manifest.split(split):
            paths = _derived_paths(derived_dir, entry)
            if not paths["pseudo"].exists():
                raise FileNotFoundError(f"missing derived artifacts for {entry.sequence_dir}; run prepare_derived")
            record = SampleRecord(
                image_id=entry.sequence_dir,
                image=load_pgm(paths["key"]),
                pseudo=load_label_pgm(paths["pseudo"]),
                vesselness=VesselnessMap(load_pgm(paths["vesselness"]).data),
                truth=load_ground_truth(manifest_path.parent, entry),
                partition=load_partition(paths["partition"]) if split == "train" else None,
            )
            splits[split].append(record)
    return DatasetBundle(train=splits["train"], val=splits["val"], test=splits["test"])
