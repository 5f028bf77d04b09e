"""Grayscale SLIC superpixels: the annotation and query granularity.

Local k-means in (intensity, x, y) with grid-seeded centers.  The distance
between pixel p and center c is ``sqrt((I_p - I_c)^2 + (m/S)^2 * d_xy^2)``
with grid interval S and compactness m on the unit intensity scale.  A
post-pass re-attaches orphaned 4-connected fragments to their largest
adjacent superpixel so every superpixel is one connected region.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import GrayImage

_FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


@dataclass(frozen=True, eq=False)
class SuperpixelPartition:
    assignment: np.ndarray  # (h, w) int32, ids dense in [0, n_superpixels)
    n_superpixels: int

    def __post_init__(self):
        a = np.ascontiguousarray(self.assignment, dtype=np.int32)
        a.flags.writeable = False
        object.__setattr__(self, "assignment", a)

    @property
    def height(self) -> int:
        return self.assignment.shape[0]

    @property
    def width(self) -> int:
        return self.assignment.shape[1]

    def members(self, sp_id: int) -> np.ndarray:
        """Flat pixel indices of one superpixel, ascending."""
        return np.flatnonzero(self.assignment.ravel() == sp_id)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment.ravel(), minlength=self.n_superpixels)


def default_target_count(height: int, width: int) -> int:
    """Scale the full-resolution superpixel density down to desk size."""
    return max(1, round(3000 * (height * width) / 512.0 ** 2))


def slic(image: GrayImage, target_count: int, compactness: float = 0.1, iters: int = 10) -> SuperpixelPartition:
    h, w = image.data.shape
    n_pixels = h * w
    if not 1 <= target_count <= n_pixels:
        raise ValueError(f"target_count must be in [1, {n_pixels}]")
    data = image.data

    interval = np.sqrt(n_pixels / target_count)
    ny = max(1, round(h / interval))
    nx = max(1, round(w / interval))
    cy = (np.arange(ny) + 0.5) * h / ny
    cx = (np.arange(nx) + 0.5) * w / nx
    centers_y, centers_x = np.meshgrid(cy, cx, indexing="ij")
    centers_y = centers_y.ravel()
    centers_x = centers_x.ravel()
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    centers_i = np.array([
        data[min(int(y), h - 1), min(int(x), w - 1)] for y, x in zip(centers_y, centers_x)
    ])

    spatial_w = (compactness / interval) ** 2
    reach = int(np.ceil(2 * interval))
    assignment = np.zeros((h, w), dtype=np.int32)

    for _ in range(iters):
        best = np.full((h, w), np.inf)
        assignment.fill(0)
        for cid in range(len(centers_y)):
            r0 = max(0, int(centers_y[cid]) - reach)
            r1 = min(h, int(centers_y[cid]) + reach + 1)
            c0 = max(0, int(centers_x[cid]) - reach)
            c1 = min(w, int(centers_x[cid]) + reach + 1)
            if r0 >= r1 or c0 >= c1:
                continue
            d_int = data[r0:r1, c0:c1] - centers_i[cid]
            d_sp = (yy[r0:r1, c0:c1] - centers_y[cid]) ** 2 + (xx[r0:r1, c0:c1] - centers_x[cid]) ** 2
            dist = d_int * d_int + spatial_w * d_sp
            win_best = best[r0:r1, c0:c1]
            better = dist < win_best  # strict: ties keep the lower id
            win_best[better] = dist[better]
            assignment[r0:r1, c0:c1][better] = cid
        for cid in range(len(centers_y)):
            mask = assignment == cid
            if mask.any():
                centers_i[cid] = data[mask].mean()
                centers_y[cid] = yy[mask].mean()
                centers_x[cid] = xx[mask].mean()

    assignment = _enforce_connectivity(assignment)
    return _densify(assignment)


def _enforce_connectivity(assignment: np.ndarray) -> np.ndarray:
    # Merging one orphan can strand pixels that were attached through it,
    # so repeat the pass until every id is a single component.
    work = assignment.copy()
    for _ in range(32):
        if _merge_orphans_once(work) == 0:
            return work
    raise RuntimeError("connectivity enforcement did not settle")


def _merge_orphans_once(work: np.ndarray) -> int:
    flat = work.ravel()
    orphans: list[np.ndarray] = []
    for sp_id in np.unique(work):
        comp, n_comp = ndimage.label(work == sp_id, structure=_FOUR_CONN)
        if n_comp <= 1:
            continue
        comp_flat = comp.ravel()
        pieces = [np.flatnonzero(comp_flat == c) for c in range(1, n_comp + 1)]
        pieces.sort(key=lambda p: (-len(p), p[0]))
        orphans.extend(pieces[1:])

    h, w = work.shape
    merged = 0
    for piece in sorted(orphans, key=lambda p: p[0]):
        own = flat[piece[0]]
        neighbor_ids: set[int] = set()
        rows, cols = np.unravel_index(piece, (h, w))
        for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            ny, nx = rows + dy, cols + dx
            ok = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
            neighbor_ids.update(int(v) for v in np.unique(work[ny[ok], nx[ok]]) if v != own)
        if not neighbor_ids:
            continue
        sizes = np.bincount(flat, minlength=int(flat.max()) + 1)
        target = max(sorted(neighbor_ids), key=lambda i: (sizes[i], -i))
        flat[piece] = target
        merged += 1
    return merged


def _densify(assignment: np.ndarray) -> SuperpixelPartition:
    flat = assignment.ravel()
    seen: dict[int, int] = {}
    remap = np.empty(int(flat.max()) + 1, dtype=np.int32)
    for value in flat:
        if int(value) not in seen:
            seen[int(value)] = len(seen)
            remap[value] = seen[int(value)]
    return SuperpixelPartition(remap[assignment], len(seen))


# ---------------------------------------------------------------------------
# 16-bit raw serialization with JSON sidecar

def save_partition(partition: SuperpixelPartition, raw_path: str | Path) -> None:
    if partition.n_superpixels > 65536:
        raise ValueError("id space exceeds 16 bits")
    raw_path = Path(raw_path)
    raw_path.write_bytes(partition.assignment.astype("<u2").tobytes())
    sidecar = {
        "n_superpixels": partition.n_superpixels,
        "width": partition.width,
        "height": partition.height,
    }
    raw_path.with_suffix(raw_path.suffix + ".json").write_text(json.dumps(sidecar) + "\n")


def load_partition(raw_path: str | Path) -> SuperpixelPartition:
    raw_path = Path(raw_path)
    meta = json.loads(raw_path.with_suffix(raw_path.suffix + ".json").read_text())
    grid = np.frombuffer(raw_path.read_bytes(), dtype="<u2")
    grid = grid.reshape(meta["height"], meta["width"]).astype(np.int32)
    return SuperpixelPartition(grid, meta["n_superpixels"])
