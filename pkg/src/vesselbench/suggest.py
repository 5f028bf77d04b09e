"""Query selection, the annotation store, and annotator backends.

Each iteration ranks the unlabeled superpixels of an image by fused
uncertainty (descending, ties to the lower id) and queries the top batch.
Annotations cover whole superpixels, pixel labels in ascending pixel-index
order, and accumulate monotonically in a per-image store that later
iterations may never overwrite.

AnnotationSet wire schema (JSON):
``{"image_id", "iteration", "superpixels": [{"id", "labels": RLE}]}``
where RLE is a list of run lengths over the superpixel's pixels in
ascending pixel-index order, alternating label values starting with 0 (a
leading 0-length run encodes a sequence that starts with label 1).
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field

import numpy as np

from .core import GrayImage, LabelGrid
from .superpixel import SuperpixelPartition
from .uncertainty import SuperpixelUncertainty


class AlreadyLabeled(ValueError):
    """A superpixel was annotated twice; the store is append-only."""


class BadAnnotation(ValueError):
    """Annotation payload does not match the queried superpixels."""


@dataclass(frozen=True)
class QueryBatch:
    image_id: str
    iteration: int
    superpixel_ids: tuple[int, ...]
    uncertainties: tuple[float, ...]

    def __post_init__(self):
        if len(set(self.superpixel_ids)) != len(self.superpixel_ids):
            raise ValueError("duplicate superpixel ids in a batch")


@dataclass(frozen=True, eq=False)
class AnnotationSet:
    image_id: str
    iteration: int
    superpixels: tuple[tuple[int, np.ndarray], ...]  # (id, labels over members)


@dataclass(frozen=True, eq=False)
class AnnotationRequest:
    """One batch plus the context an annotator needs to label it."""

    batch: QueryBatch
    partition: SuperpixelPartition
    image: GrayImage
    prediction: LabelGrid


class Annotator(ABC):
    """Resolves every queried batch of one iteration into annotations."""

    @abstractmethod
    def annotate_iteration(self, requests: list[AnnotationRequest]) -> list[AnnotationSet]:
        ...


def select_queries(uncertainty: SuperpixelUncertainty, labeled: set[int], n_b: int, image_id: str, iteration: int) -> QueryBatch:
    """Top ``min(n_b, pool)`` unlabeled superpixels by descending uncertainty.

    Ties break toward the lower superpixel id, so selection is reproducible
    and invariant under positive scaling of the uncertainty values.
    """
    if n_b < 0:
        raise ValueError("n_b must be >= 0")
    values = uncertainty.values
    pool = [i for i in range(len(values)) if i not in labeled]
    pool.sort(key=lambda i: (-values[i], i))
    chosen = pool[: min(n_b, len(pool))]
    return QueryBatch(
        image_id=image_id,
        iteration=iteration,
        superpixel_ids=tuple(chosen),
        uncertainties=tuple(float(values[i]) for i in chosen),
    )


def oracle_annotate(batch: QueryBatch, truth: LabelGrid, partition: SuperpixelPartition) -> AnnotationSet:
    """Ground-truth labels restricted to the queried superpixels."""
    flat = truth.labels.ravel()
    payload = tuple(
        (sp_id, flat[partition.members(sp_id)].astype(np.uint8))
        for sp_id in batch.superpixel_ids
    )
    return AnnotationSet(batch.image_id, batch.iteration, payload)


class OracleAnnotator(Annotator):
    """Automated annotator answering every query from stored ground truth."""

    def __init__(self, truths: dict[str, LabelGrid]):
        self.truths = truths

    def annotate_iteration(self, requests: list[AnnotationRequest]) -> list[AnnotationSet]:
        out = []
        for req in requests:
            truth = self.truths.get(req.batch.image_id)
            if truth is None:
                raise KeyError(f"no ground truth for {req.batch.image_id}")
            out.append(oracle_annotate(req.batch, truth, req.partition))
        return out


# ---------------------------------------------------------------------------
# annotation store (the cumulative labeled set of one image)

@dataclass
class AnnotationStore:
    labels_by_superpixel: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def superpixel_ids(self) -> set[int]:
        return set(self.labels_by_superpixel)

    def annotated_pixels(self, partition: SuperpixelPartition) -> int:
        return sum(len(partition.members(i)) for i in self.labels_by_superpixel)


def merge_annotations(store: AnnotationStore, new: AnnotationSet, partition: SuperpixelPartition) -> AnnotationStore:
    """Union of the store with a new set; overlap is a caller bug."""
    merged = AnnotationStore(dict(store.labels_by_superpixel))
    for sp_id, labels in new.superpixels:
        if sp_id in merged.labels_by_superpixel:
            raise AlreadyLabeled(f"superpixel {sp_id} of {new.image_id} already annotated")
        expected = len(partition.members(sp_id))
        if len(labels) != expected:
            raise BadAnnotation(f"superpixel {sp_id}: got {len(labels)} labels, expected {expected}")
        arr = np.asarray(labels, dtype=np.uint8)
        if arr.size and not np.isin(np.unique(arr), (0, 1)).all():
            raise BadAnnotation("labels must be binary")
        merged.labels_by_superpixel[sp_id] = arr
    return merged


def materialize_store(store: AnnotationStore, partition: SuperpixelPartition) -> tuple[np.ndarray, np.ndarray]:
    """(annotated_mask, annotated_labels) pixel grids for refinement."""
    shape = partition.assignment.shape
    mask = np.zeros(shape, dtype=bool).ravel()
    labels = np.zeros(shape, dtype=np.uint8).ravel()
    for sp_id, sp_labels in store.labels_by_superpixel.items():
        members = partition.members(sp_id)
        mask[members] = True
        labels[members] = sp_labels
    return mask.reshape(shape), labels.reshape(shape)


def annotated_pixel_fraction(stores: dict[str, AnnotationStore], partitions: dict[str, SuperpixelPartition]) -> float:
    """Exact budget accounting: annotated pixels over total training pixels."""
    annotated = sum(stores[i].annotated_pixels(partitions[i]) for i in stores)
    total = sum(p.assignment.size for p in partitions.values())
    return annotated / total if total else 0.0


# ---------------------------------------------------------------------------
# wire encoding

def rle_encode(labels: np.ndarray) -> list[int]:
    """Run lengths alternating values starting with 0."""
    runs: list[int] = []
    current, count = 0, 0
    for value in np.asarray(labels, dtype=np.uint8):
        if value == current:
            count += 1
        else:
            runs.append(count)
            current, count = int(value), 1
    runs.append(count)
    return runs


def rle_decode(runs: list[int], length: int) -> np.ndarray:
    out = np.zeros(length, dtype=np.uint8)
    pos, value = 0, 0
    for run in runs:
        if run < 0 or pos + run > length:
            raise BadAnnotation("run lengths exceed superpixel size")
        out[pos:pos + run] = value
        pos += run
        value ^= 1
    if pos != length:
        raise BadAnnotation(f"run lengths cover {pos} of {length} pixels")
    return out


def annotation_set_to_json(annotation: AnnotationSet) -> dict:
    return {
        "image_id": annotation.image_id,
        "iteration": annotation.iteration,
        "superpixels": [
            {"id": sp_id, "labels": rle_encode(labels)}
            for sp_id, labels in annotation.superpixels
        ],
    }


def annotation_set_from_json(obj: dict, partition: SuperpixelPartition) -> AnnotationSet:
    payload = []
    for item in obj["superpixels"]:
        sp_id = int(item["id"])
        size = len(partition.members(sp_id))
        payload.append((sp_id, rle_decode(list(item["labels"]), size)))
    return AnnotationSet(str(obj["image_id"]), int(obj["iteration"]), tuple(payload))
