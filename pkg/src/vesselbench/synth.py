"""Deterministic synthetic angiogram sequences with known vessel ground truth.

Each sequence is assembled as
``clamp(background - contrast_profile[t] * vessel_darkness + noise)``:

* the background is a sum of ``background_rank`` separable smooth intensity
  fields (an explicit outer-product construction, so its stacked
  pixels-x-frames matrix is numerically low-rank) plus fixed curvilinear
  "rib" arcs, all static across frames;
* the vessel tree is a random recursive branching polyline rasterized as
  dark tubes whose width and opacity taper toward the tips, multiplied per
  frame by a contrast inflow/washout profile that peaks at the key frame;
* vessels are darker than the surrounding background, matching X-ray
  attenuation by contrast agent.

Identical configs produce bit-identical sequences and masks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import GrayImage, GraySequence, LabelGrid, Manifest, ManifestEntry, save_label_pgm, save_manifest, save_pgm
from .rng import Stream, stream_key


def default_contrast_profile(n_frames: int) -> tuple[float, ...]:
    """Raised-sine inflow/washout curve normalized to peak exactly at 1."""
    t = np.arange(n_frames, dtype=np.float64)
    profile = np.sin(np.pi * (t + 0.5) / n_frames) ** 1.5
    return tuple(profile / profile.max())


@dataclass(frozen=True)
class SynthConfig:
    seed: int
    width: int = 64
    height: int = 64
    n_frames: int = 20
    vessel_branches: int = 3
    max_vessel_width: float = 3.0
    background_rank: int = 2
    noise_sigma: float = 0.02
    contrast_profile: tuple[float, ...] = field(default=())

    def __post_init__(self):
        if self.width < 8 or self.height < 8:
            raise ValueError("image too small")
        if self.n_frames < 1:
            raise ValueError("need at least one frame")
        if self.background_rank < 1:
            raise ValueError("background_rank must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.vessel_branches < 0:
            raise ValueError("vessel_branches must be >= 0")
        profile = self.contrast_profile or default_contrast_profile(self.n_frames)
        profile = tuple(float(p) for p in profile)
        if len(profile) != self.n_frames:
            raise ValueError("contrast_profile length must equal n_frames")
        if any(not 0.0 <= p <= 1.0 for p in profile):
            raise ValueError("contrast_profile values must lie in [0, 1]")
        object.__setattr__(self, "contrast_profile", profile)

    @property
    def key_frame_index(self) -> int:
        return int(np.argmax(self.contrast_profile))


def _smooth_profile(n: int, stream: Stream, harmonics: int = 3) -> np.ndarray:
    """Zero-mean-ish low-frequency 1-D cosine mixture with max |value| 1."""
    t = np.linspace(0.0, 1.0, n)
    out = np.zeros(n)
    amps = stream.normal(harmonics)
    phases = stream.uniform(harmonics)
    for h in range(harmonics):
        out += amps[h] / (h + 1) * np.cos(np.pi * ((h + 1) * t + phases[h]))
    peak = np.abs(out).max()
    return out / peak if peak > 0 else out


def _background(config: SynthConfig) -> np.ndarray:
    h, w = config.height, config.width
    stream = Stream(config.seed, "background")
    base_u = 0.9 + 0.08 * _smooth_profile(h, stream)
    base_v = 0.9 + 0.08 * _smooth_profile(w, stream)
    bg = np.outer(base_u, base_v)
    for _ in range(config.background_rank - 1):
        u = _smooth_profile(h, stream)
        v = _smooth_profile(w, stream)
        bg = bg + 0.05 * np.outer(u, v)

    # Rib-like arcs: off-image circle bands, darker and wider than vessels
    # but narrower than the closing disk, so they survive into the
    # difference sequence as a static layer.
    rib_stream = Stream(config.seed, "ribs")
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    diag = float(np.hypot(h, w))
    for _ in range(3):
        side = rib_stream.uniform()
        cx = -0.8 * w if side < 0.5 else 1.8 * w
        cy = (0.2 + 0.6 * rib_stream.uniform()) * h
        radius = diag * (0.9 + 0.5 * rib_stream.uniform())
        thickness = 3.5 + 2.5 * rib_stream.uniform()
        depth = 0.10 + 0.08 * rib_stream.uniform()
        dist = np.abs(np.hypot(yy - cy, xx - cx) - radius)
        band = np.clip(thickness / 2 + 0.5 - dist, 0.0, 1.0)
        bg = bg - depth * band
    return bg


def _vessel_tree(config: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    """Rasterize the branching tree.

    Returns (alpha, darkness): alpha is tube coverage in [0, 1] (ground
    truth is alpha >= 0.5), darkness the per-pixel opacity to subtract at
    full contrast.
    """
    h, w = config.height, config.width
    alpha = np.zeros((h, w))
    darkness = np.zeros((h, w))
    if config.vessel_branches == 0:
        return alpha, darkness

    stream = Stream(config.seed, "vessels")
    scale = min(h, w)
    step = max(2.0, scale / 18.0)
    segments = []  # (y0, x0, y1, x1, width, depth)

    # root springs from a border, pointing inward
    border = int(stream.uniform() * 4)
    if border == 0:
        pos = np.array([0.0, (0.2 + 0.6 * stream.uniform()) * w]); ang = np.pi / 2
    elif border == 1:
        pos = np.array([h - 1.0, (0.2 + 0.6 * stream.uniform()) * w]); ang = -np.pi / 2
    elif border == 2:
        pos = np.array([(0.2 + 0.6 * stream.uniform()) * h, 0.0]); ang = 0.0
    else:
        pos = np.array([(0.2 + 0.6 * stream.uniform()) * h, w - 1.0]); ang = np.pi
    ang += 0.5 * (stream.uniform() - 0.5)

    max_steps = int(2.2 * scale / step)
    base_depth = 0.36 + 0.08 * stream.uniform()
    queue = [(pos, ang, float(config.max_vessel_width), base_depth, 0)]
    branches_left = config.vessel_branches - 1

    while queue:
        pos, ang, width, depth, start_step = queue.pop(0)
        for s in range(start_step, max_steps):
            # contrast attenuates strongly toward thin distal segments, the
            # systematic failure regime of enhancement-based pseudo labels
            frac = s / max_steps
            cur_w = max(1.0, width * (1.0 - 0.65 * frac))
            cur_d = depth * (1.0 - 0.85 * frac)
            ang += 0.45 * (stream.uniform() - 0.5)
            nxt = pos + step * np.array([np.sin(ang), np.cos(ang)])
            segments.append((pos[0], pos[1], nxt[0], nxt[1], cur_w, cur_d))
            pos = nxt
            if branches_left > 0 and s > 2 and stream.uniform() < 0.18:
                branches_left -= 1
                sign = 1.0 if stream.uniform() < 0.5 else -1.0
                child_ang = ang + sign * (0.5 + 0.5 * stream.uniform())
                queue.append((pos.copy(), child_ang, cur_w * 0.72, cur_d * 0.62, s + 1))
            if not (0 <= pos[0] < h and 0 <= pos[1] < w):
                break

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    for y0, x0, y1, x1, seg_w, seg_d in segments:
        lo_y, hi_y = sorted((y0, y1))
        lo_x, hi_x = sorted((x0, x1))
        pad = seg_w / 2 + 2
        r0, r1 = max(0, int(lo_y - pad)), min(h, int(hi_y + pad) + 1)
        c0, c1 = max(0, int(lo_x - pad)), min(w, int(hi_x + pad) + 1)
        if r0 >= r1 or c0 >= c1:
            continue
        py, px = yy[r0:r1, c0:c1], xx[r0:r1, c0:c1]
        dy, dx = y1 - y0, x1 - x0
        denom = dy * dy + dx * dx
        if denom < 1e-12:
            dist = np.hypot(py - y0, px - x0)
        else:
            t = np.clip(((py - y0) * dy + (px - x0) * dx) / denom, 0.0, 1.0)
            dist = np.hypot(py - (y0 + t * dy), px - (x0 + t * dx))
        cover = np.clip(seg_w / 2 + 0.5 - dist, 0.0, 1.0)
        alpha[r0:r1, c0:c1] = np.maximum(alpha[r0:r1, c0:c1], cover)
        darkness[r0:r1, c0:c1] = np.maximum(darkness[r0:r1, c0:c1], cover * seg_d)
    return alpha, darkness


def generate_sequence(config: SynthConfig) -> tuple[GraySequence, LabelGrid]:
    background = _background(config)
    alpha, darkness = _vessel_tree(config)
    mask = LabelGrid((alpha >= 0.5).astype(np.uint8))

    frames = []
    for t, contrast in enumerate(config.contrast_profile):
        frame = background - contrast * darkness
        if config.noise_sigma > 0:
            noise = Stream(config.seed, "noise", t).normal((config.height, config.width))
            frame = frame + config.noise_sigma * noise
        frames.append(GrayImage(np.clip(frame, 0.0, 1.0)))
    seq = GraySequence(frames=tuple(frames), key_frame_index=config.key_frame_index)
    return seq, mask


def sequence_seed(dataset_seed: int, index: int) -> int:
    return stream_key(dataset_seed, "sequence", index)


def write_dataset(
    out_dir: str | Path,
    dataset_seed: int,
    counts: tuple[int, int, int] = (20, 5, 10),
    width: int = 64,
    height: int = 64,
    n_frames: int = 20,
    **config_overrides,
) -> Path:
    """Generate train/val/test sequences plus manifest under ``out_dir``.

    Returns the manifest path.  Ground truth is written for every split:
    train truths feed the oracle annotator and budget accounting, val/test
    truths feed evaluation.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits: dict[str, list[ManifestEntry]] = {"train": [], "val": [], "test": []}
    index = 0
    for split, count in zip(("train", "val", "test"), counts):
        for _ in range(count):
            cfg = SynthConfig(
                seed=sequence_seed(dataset_seed, index),
                width=width, height=height, n_frames=n_frames,
                **config_overrides,
            )
            seq, mask = generate_sequence(cfg)
            seq_dir = out / f"{split}_{len(splits[split]):03d}"
            seq_dir.mkdir(exist_ok=True)
            for t, frame in enumerate(seq.frames):
                save_pgm(frame, seq_dir / f"frame_{t:03d}.pgm")
            save_label_pgm(mask, seq_dir / "truth.pgm")
            splits[split].append(ManifestEntry(
                sequence_dir=seq_dir.name,
                key_frame_index=seq.key_frame_index,
                ground_truth_path=f"{seq_dir.name}/truth.pgm",
            ))
            index += 1
    manifest = Manifest(train=tuple(splits["train"]), val=tuple(splits["val"]), test=tuple(splits["test"]))
    manifest_path = out / "manifest.json"
    save_manifest(manifest, manifest_path)
    return manifest_path
