"""Synthetic two-photon-like stacks with ground-truth spine detections.

Spines are Gaussian blobs beside a curved dendrite on a faint static tissue
texture. Each spine spans a few slices and tilts laterally with depth. The
whole slice content drifts between consecutive slices (the motion slice
alignment has to undo), and across timepoints the field of view may shift
in x, y and z while spines form or vanish.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .model import DEFAULT_VOXEL_SIZE_UM, BBox, Detection2D, ImageStack


@dataclass(frozen=True)
class SynthConfig:
    n_tracks: int = 20
    depth: int = 30
    width: int = 512
    height: int = 512
    timepoints: int = 1
    # max stack drift between consecutive slices, px (integer steps)
    drift: float = 5.0
    # max lateral motion of a spine per slice, px
    spine_tilt: float = 1.5
    missing_rate: float = 0.01
    noise: float = 20.0
    background: float = 500.0
    texture: float = 150.0
    dendrite_intensity: float = 1500.0
    dendrite_sigma: float = 4.0
    spine_amplitude: tuple[float, float] = (800.0, 2000.0)
    spine_radius: tuple[float, float] = (4.0, 8.0)
    spine_extent: tuple[int, int] = (2, 5)
    spine_offset: tuple[float, float] = (18.0, 45.0)
    min_separation: float = 6.0
    # max field-of-view shift between timepoints, px per axis (integer)
    time_shift: int = 0
    time_jitter: float = 0.0
    z_shift: int = 0
    turnover: float = 0.0
    embedding_dim: int = 16
    embedding_noise: float = 0.1
    seed: int = 0


@dataclass
class SynthSpine:
    index: int
    x: float
    y: float
    zc: int
    extent: int
    vx: float
    vy: float
    radius: float
    amplitude: float
    birth: int
    death: int
    base_embedding: np.ndarray = field(repr=False)

    def center(self, z: float) -> tuple[float, float]:
        """Head centre at depth ``z`` in the undrifted reference frame."""
        return self.x + self.vx * (z - self.zc), self.y + self.vy * (z - self.zc)

    def z_range(self) -> range:
        return range(self.zc - self.extent, self.zc + self.extent + 1)

    def section(self, z: int) -> tuple[float, float]:
        """Box half-size and peak intensity at depth ``z``."""
        u = (z - self.zc) / (self.extent + 0.5)
        shape = math.sqrt(max(0.0, 1.0 - u * u))
        return self.radius * (0.85 + 0.15 * shape), self.amplitude * (0.35 + 0.65 * shape)


@dataclass
class SynthDataset:
    config: SynthConfig
    stacks: list[ImageStack]
    detections: list[Detection2D]
    embeddings: dict[str, list[float]]
    spines: list[SynthSpine]
    slice_drift: list[np.ndarray]
    xy_shifts: list[tuple[int, int]]
    z_shifts: list[int]


def _dendrite_curve(cfg: SynthConfig, rng):
    amp = rng.uniform(0.05, 0.12) * cfg.height
    period = rng.uniform(0.8, 1.6) * cfg.width
    phase = rng.uniform(0, 2 * math.pi)
    base = cfg.height / 2

    def yc(x):
        return base + amp * np.sin(2 * np.pi * x / period + phase)

    def slope(x):
        return amp * 2 * np.pi / period * np.cos(2 * np.pi * x / period + phase)

    return yc, slope


def _drift_walk(cfg: SynthConfig, rng) -> np.ndarray:
    """Cumulative integer slice drift, (depth, 2), starting at (0, 0)."""
    walk = np.zeros((cfg.depth, 2))
    r = int(math.floor(cfg.drift))
    if r <= 0:
        return walk
    steps = [(dx, dy) for dx in range(-r, r + 1) for dy in range(-r, r + 1) if math.hypot(dx, dy) <= cfg.drift]
    picks = rng.integers(0, len(steps), size=cfg.depth - 1)
    walk[1:] = np.cumsum(np.array(steps, dtype=float)[picks], axis=0)
    return walk


def _boxes_clear(a: SynthSpine, b: SynthSpine, cfg: SynthConfig) -> bool:
    if a.birth >= b.death or b.birth >= a.death:
        return True
    for z in set(a.z_range()) & set(b.z_range()):
        ax, ay = a.center(z)
        bx, by = b.center(z)
        gap = a.section(z)[0] + b.section(z)[0] + cfg.min_separation
        if abs(ax - bx) < gap and abs(ay - by) < gap:
            return False
    return True


def _lifetimes(cfg: SynthConfig, rng) -> list[tuple[int, int]]:
    spans = []
    for _ in range(cfg.n_tracks):
        death = cfg.timepoints
        for t in range(1, cfg.timepoints):
            if cfg.turnover > 0 and rng.random() < cfg.turnover:
                death = t
                break
        spans.append((0, death))
    for t in range(1, cfg.timepoints):
        if cfg.turnover > 0:
            spans += [(t, cfg.timepoints)] * int(rng.binomial(cfg.n_tracks, cfg.turnover))
    return spans


def _sample_spines(cfg: SynthConfig, rng, yc, slope, margin: float) -> list[SynthSpine]:
    spines = []
    lo_e, hi_e = cfg.spine_extent
    for birth, death in _lifetimes(cfg, rng):
        for _ in range(5000):
            extent = min(int(rng.integers(lo_e, hi_e + 1)), (cfg.depth - 1) // 2)
            zc = int(rng.integers(extent, cfg.depth - extent))
            x = rng.uniform(0, cfg.width)
            side = rng.choice([-1.0, 1.0])
            offset = rng.uniform(*cfg.spine_offset) * math.sqrt(1 + float(slope(x)) ** 2)
            speed = rng.uniform(0, cfg.spine_tilt)
            heading = rng.uniform(0, 2 * math.pi)
            spine = SynthSpine(
                index=len(spines),
                x=x,
                y=float(yc(x)) + side * offset,
                zc=zc,
                extent=extent,
                vx=speed * math.cos(heading),
                vy=speed * math.sin(heading),
                radius=rng.uniform(*cfg.spine_radius),
                amplitude=rng.uniform(*cfg.spine_amplitude),
                birth=birth,
                death=death,
                base_embedding=rng.normal(size=cfg.embedding_dim),
            )
            m = spine.radius + margin
            inside = all(
                m <= cx <= cfg.width - m and m <= cy <= cfg.height - m
                for cx, cy in (spine.center(z) for z in spine.z_range())
            )
            if inside and all(_boxes_clear(spine, other, cfg) for other in spines):
                spines.append(spine)
                break
        else:
            raise RuntimeError("could not place synthetic spines; lower n_tracks or drift")
    return spines


def _render_blob(img, cx, cy, sigma, amp):
    h, w = img.shape
    r = int(math.ceil(4 * sigma))
    x0, x1 = max(int(cx) - r, 0), min(int(cx) + r + 2, w)
    y0, y1 = max(int(cy) - r, 0), min(int(cy) + r + 2, h)
    if x0 >= x1 or y0 >= y1:
        return
    xs = np.arange(x0, x1) + 0.5 - cx
    ys = np.arange(y0, y1) + 0.5 - cy
    img[y0:y1, x0:x1] += amp * np.exp(-(ys[:, None] ** 2 + xs[None, :] ** 2) / (2 * sigma * sigma))


def generate(cfg: SynthConfig | None = None, **overrides) -> SynthDataset:
    """Build a reproducible synthetic dataset; ``overrides`` patch ``cfg``."""
    cfg = cfg or SynthConfig()
    if overrides:
        cfg = SynthConfig(**{**asdict(cfg), **overrides})
    rng = np.random.default_rng(cfg.seed)
    yc, slope = _dendrite_curve(cfg, rng)

    xy_shifts = [(0, 0)]
    z_shifts = [0]
    for _ in range(1, cfg.timepoints):
        px, py = xy_shifts[-1]
        xy_shifts.append((px + int(rng.integers(-cfg.time_shift, cfg.time_shift + 1)),
                          py + int(rng.integers(-cfg.time_shift, cfg.time_shift + 1))))
        z_shifts.append(int(rng.integers(-cfg.z_shift, cfg.z_shift + 1)))
    walks = [_drift_walk(cfg, rng) for _ in range(cfg.timepoints)]
    reach = max(
        max(abs(sx) + np.abs(w[:, 0]).max(), abs(sy) + np.abs(w[:, 1]).max())
        for (sx, sy), w in zip(xy_shifts, walks)
    )
    spines = _sample_spines(cfg, rng, yc, slope, margin=reach + cfg.time_jitter + 2)

    # static tissue texture, padded so shifted crops stay inside
    pad = int(math.ceil(reach)) + 2
    texture = np.zeros((cfg.height + 2 * pad, cfg.width + 2 * pad))
    if cfg.texture:
        texture = ndimage.gaussian_filter(rng.normal(size=texture.shape), 6.0)
        texture *= cfg.texture / texture.std()

    xs = np.arange(cfg.width) + 0.5
    ys = np.arange(cfg.height) + 0.5
    dend_center = cfg.depth / 2 + rng.uniform(-0.15, 0.15) * cfg.depth
    dend_zsigma = cfg.depth / 3

    stacks, detections, embeddings = [], [], {}
    for t in range(cfg.timepoints):
        zs = z_shifts[t]
        jitter = {s.index: rng.uniform(-cfg.time_jitter, cfg.time_jitter, 2) if cfg.time_jitter else np.zeros(2)
                  for s in spines}
        volume = np.empty((cfg.depth, cfg.height, cfg.width))
        det_count = 0
        for z in range(cfg.depth):
            # slice z of this stack images reference depth z - zs
            ox = xy_shifts[t][0] + walks[t][z, 0]
            oy = xy_shifts[t][1] + walks[t][z, 1]
            xx = xs[None, :] - ox
            dist = (ys[:, None] - oy - yc(xx)) / np.sqrt(1 + slope(xx) ** 2)
            zfac = 0.4 + 0.6 * math.exp(-((z - zs - dend_center) ** 2) / (2 * dend_zsigma ** 2))
            tex = texture[pad - int(oy):pad - int(oy) + cfg.height, pad - int(ox):pad - int(ox) + cfg.width]
            img = cfg.background + tex + cfg.dendrite_intensity * zfac * np.exp(-dist ** 2 / (2 * cfg.dendrite_sigma ** 2))
            for s in spines:
                depth_ref = z - zs
                if not s.birth <= t < s.death or depth_ref not in s.z_range():
                    continue
                half, amp = s.section(depth_ref)
                cx, cy = s.center(depth_ref)
                cx += ox + jitter[s.index][0]
                cy += oy + jitter[s.index][1]
                _render_blob(img, cx, cy, half / 2, amp)
                if rng.random() < cfg.missing_rate:
                    continue
                det_id = f"d{t}_{det_count:05d}"
                det_count += 1
                detections.append(Detection2D(
                    id=det_id,
                    stack_id="fov0",
                    timepoint=t,
                    z=z,
                    bbox=BBox(cx - half, cy - half, cx + half, cy + half),
                    confidence=1.0,
                    gt_object_id=f"s{s.index:03d}_t{t}",
                    gt_track_id=f"s{s.index:03d}",
                ))
                vec = s.base_embedding + cfg.embedding_noise * rng.normal(size=cfg.embedding_dim)
                embeddings[det_id] = [float(v) for v in vec]
            if cfg.noise:
                img = img + rng.normal(0.0, cfg.noise, size=img.shape)
            volume[z] = img
        pixels = np.clip(np.rint(volume), 0, 65535).astype(np.uint16)
        stacks.append(ImageStack("fov0", t, pixels, DEFAULT_VOXEL_SIZE_UM))

    return SynthDataset(cfg, stacks, detections, embeddings, spines, walks, xy_shifts, z_shifts)


def write_dataset(ds: SynthDataset, out_dir) -> Path:
    """Write stacks, ground-truth detections and embeddings under ``out_dir``.

    Layout: ``stacks/t{t}/`` per timepoint, ``gt_detections.json``,
    ``embeddings.json`` and ``synth.json`` (generating parameters and the
    true drift and shifts).
    """
    from . import io

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for stack in ds.stacks:
        io.save_stack(stack, out / "stacks" / f"t{stack.timepoint}")
    io.save_detections(out / "gt_detections.json", ds.detections)
    io.save_embeddings(out / "embeddings.json", ds.embeddings)
    meta = {
        "format_version": io.FORMAT_VERSION,
        "config": asdict(ds.config),
        "slice_drift": [w.tolist() for w in ds.slice_drift],
        "xy_shifts": [list(s) for s in ds.xy_shifts],
        "z_shifts": ds.z_shifts,
    }
    (out / "synth.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return out
