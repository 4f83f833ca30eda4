"""Particle-image rendering: raw frames, rest frames, and the per-camera
intensity difference images that feed the network.

Particles are drawn as anti-aliased uniform-intensity discs at their
projected positions; under load the positions are displaced by the elastic
field before projection. Raw frames live in [0, 1], difference frames in
[-1, 1]. Rendering is deterministic for a fixed field, config, and load.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .contact import ForceDistribution, Indentation, particle_displacement
from .errors import ValidationError
from .geometry import SensorConfig, project_points


@dataclass(frozen=True)
class ParticleField:
    """Random particle positions on the particle plane, reproducible by seed."""

    positions: np.ndarray  # (n, 3) mm
    seed: int

    def __post_init__(self):
        object.__setattr__(
            self, "positions", np.ascontiguousarray(self.positions, dtype=np.float64)
        )


def sample_particle_field(cfg: SensorConfig, seed: int = None) -> ParticleField:
    """Draw particles uniformly over the surface extent at the configured
    density; the count is density * area rounded to the nearest integer."""
    if seed is None:
        seed = cfg.rng_seed
    area = cfg.surface_width_x * cfg.surface_width_y
    n = int(round(cfg.particle_density * area))
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 0x9A127])))
    pts = np.empty((n, 3))
    pts[:, 0] = rng.uniform(0.0, cfg.surface_width_x, n)
    pts[:, 1] = rng.uniform(0.0, cfg.surface_width_y, n)
    pts[:, 2] = cfg.particle_plane_height
    return ParticleField(pts, int(seed))


@dataclass
class FrameSet:
    """Per-camera grayscale difference images for one contact state."""

    frames: np.ndarray  # (camera_count, H, W) float32
    sample_id: int = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 3 or self.frames.shape[1] != self.frames.shape[2]:
            raise ValidationError("frames must be (cameras, size, size)")

    @property
    def camera_count(self) -> int:
        return self.frames.shape[0]

    def total_abs_intensity(self) -> np.ndarray:
        """Sum of |intensity| per camera, shape (camera_count,)."""
        return np.abs(self.frames).sum(axis=(1, 2)).astype(np.float64)


def _paint_discs(uv: np.ndarray, size: int, radius: float) -> np.ndarray:
    """Accumulate anti-aliased discs at continuous pixel positions.

    Pixel (i, j) has its center at (j + 0.5, i + 0.5); per-pixel disc
    coverage is approximated by clip(radius + 0.5 - dist, 0, 1).
    """
    img = np.zeros(size * size, dtype=np.float64)
    if len(uv) == 0:
        return img.reshape(size, size)
    reach = int(np.ceil(radius + 0.5))
    base_u = np.floor(uv[:, 0]).astype(np.int64)
    base_v = np.floor(uv[:, 1]).astype(np.int64)
    idx_chunks = []
    w_chunks = []
    for dv in range(-reach, reach + 1):
        for du in range(-reach, reach + 1):
            px = base_u + du
            py = base_v + dv
            dist = np.hypot(px + 0.5 - uv[:, 0], py + 0.5 - uv[:, 1])
            w = np.clip(radius + 0.5 - dist, 0.0, 1.0)
            ok = (w > 0.0) & (px >= 0) & (px < size) & (py >= 0) & (py < size)
            if not ok.any():
                continue
            idx_chunks.append(py[ok] * size + px[ok])
            w_chunks.append(w[ok])
    if idx_chunks:
        img = np.bincount(
            np.concatenate(idx_chunks), weights=np.concatenate(w_chunks), minlength=size * size
        )
    return img.reshape(size, size)


def render(
    field: ParticleField,
    load,
    cfg: SensorConfig,
    camera: int,
    rng: np.random.Generator = None,
) -> np.ndarray:
    """Render one camera's raw frame, optionally under load.

    `load` may be None (rest state), an Indentation, or a ForceDistribution;
    loaded particles are displaced by the elastic field before projection.
    Off-image particles are skipped; overlapping discs saturate at 1.
    Gaussian pixel noise is added when the config asks for it and an `rng`
    is supplied.
    """
    pts = field.positions
    if load is not None:
        pts = pts + particle_displacement(load, pts, cfg)
    # particles pushed to or below the pinhole plane cannot be imaged
    pts = pts[pts[:, 2] > 1e-9]
    uv, valid = project_points(pts, camera, cfg)
    img = _paint_discs(uv[valid], cfg.image_size, cfg.particle_radius_px)
    if cfg.image_noise_sigma > 0.0 and rng is not None:
        img = img + rng.normal(0.0, cfg.image_noise_sigma, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def difference_image(current: np.ndarray, rest: np.ndarray) -> np.ndarray:
    """Pixel-wise current - rest; range [-1, 1] for raw frames in [0, 1]."""
    current = np.asarray(current)
    rest = np.asarray(rest)
    if current.shape != rest.shape:
        raise ValidationError(f"frame shapes differ: {current.shape} vs {rest.shape}")
    return (current.astype(np.float32) - rest.astype(np.float32))


def render_rest_frames(field: ParticleField, cfg: SensorConfig) -> np.ndarray:
    """Undeformed reference frames for all cameras, shape (cams, H, W).

    Computed once per (field, config) and reused for every capture."""
    return np.stack([render(field, None, cfg, cam) for cam in range(cfg.camera_count)])


def capture(
    load,
    field: ParticleField,
    cfg: SensorConfig,
    rest: np.ndarray = None,
    sample_id: int = None,
) -> FrameSet:
    """Difference images of the loaded state against the rest state.

    `load` as in `render`. Passing precomputed `rest` frames avoids
    re-rendering the reference; captures with no load are exactly zero
    (when pixel noise is disabled).
    """
    if rest is None:
        rest = render_rest_frames(field, cfg)
    if rest.shape != (cfg.camera_count, cfg.image_size, cfg.image_size):
        raise ValidationError("rest frames do not match the configuration")
    if load is None and cfg.image_noise_sigma == 0.0:
        frames = np.zeros_like(rest, dtype=np.float32)
        return FrameSet(frames, sample_id=sample_id)
    frames = np.stack(
        [
            difference_image(render(field, load, cfg, cam), rest[cam])
            for cam in range(cfg.camera_count)
        ]
    )
    return FrameSet(frames, sample_id=sample_id)


# ---------------------------------------------------------------------------
# PGM export

def encode_difference(img: np.ndarray) -> np.ndarray:
    """Offset-encode a [-1, 1] difference image into [0, 1]."""
    return 0.5 + np.asarray(img, dtype=np.float64) / 2.0


def write_pgm(path, img: np.ndarray, bits: int = 8) -> None:
    """Write an intensity image in [0, 1] as binary PGM (P5), 8 or 16 bit."""
    if bits not in (8, 16):
        raise ValidationError("PGM depth must be 8 or 16 bits")
    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    maxval = (1 << bits) - 1
    q = np.rint(img * maxval)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode("ascii")
    if bits == 8:
        payload = q.astype(np.uint8).tobytes()
    else:
        payload = q.astype(">u2").tobytes()  # 16-bit PGM is big-endian
    with open(path, "wb") as fh:
        fh.write(header + payload)


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM written by `write_pgm` back into [0, 1] floats."""
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5" or len(parts) < 4:
        raise ValidationError("not a binary PGM file")
    w, h = (int(t) for t in parts[1].split())
    maxval = int(parts[2])
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    img = np.frombuffer(parts[3], dtype=dtype, count=w * h).reshape(h, w)
    return img.astype(np.float64) / maxval
