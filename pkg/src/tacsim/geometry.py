"""Sensor geometry: surface bin grid, camera layout, projection models,
field-of-view coverage, and the layer-stack thickness calculator.

Coordinate frame: x and y run along the two horizontal sides of the
rectangular sensing surface with the origin at a corner; z points from the
camera pinhole plane (z = 0) up towards the surface. All lengths in mm.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

PROJECTION_KINDS = ("pinhole", "equidistant-fisheye")

THICKNESS_VARIANTS = (
    "as-built",
    "relocated-connector",
    "relocated-board",
    "ideal-minimal",
)


def _quadrant_camera_positions(width_x: float, width_y: float) -> tuple:
    """2x2 camera grid at the quadrant centers of the surface, on z = 0."""
    xs = (0.25 * width_x, 0.75 * width_x)
    ys = (0.25 * width_y, 0.75 * width_y)
    return tuple((x, y, 0.0) for y in ys for x in xs)


@dataclass(frozen=True)
class SensorConfig:
    """Geometry and material description of one simulated sensor.

    A config is the single source of truth for a simulation run: surface
    extent, force-bin grid, camera layout and optics, particle statistics,
    and the elastic constants of the gel.
    """

    surface_width_x: float = 49.0       # mm
    surface_width_y: float = 51.0       # mm
    bin_nx: int = 25                    # bins along x (x varies fastest)
    bin_ny: int = 26                    # bins along y
    camera_count: int = 4
    camera_positions: tuple = None      # ((x, y, z) mm, ...); default 2x2 quadrant grid
    particle_plane_height: float = 5.0  # mm above the pinhole plane
    particle_depth: float = 2.0         # mm below the gel surface
    focal_length: float = 2.0           # mm
    sensor_width: float = 11.0          # mm, square image sensor
    image_size: int = 128               # pixels per side
    projection_kind: str = "pinhole"
    particle_density: float = 0.3       # particles per mm^2
    particle_radius_px: float = 1.5
    image_noise_sigma: float = 0.0      # optional Gaussian pixel noise
    effective_modulus: float = 5.477e5  # Pa, contact modulus of the gel
    poisson_ratio: float = 0.45
    traction_coeff: float = 0.3         # tangential traction model constant
    rng_seed: int = 0

    def __post_init__(self):
        if self.camera_positions is None:
            object.__setattr__(
                self,
                "camera_positions",
                _quadrant_camera_positions(self.surface_width_x, self.surface_width_y),
            )
        else:
            object.__setattr__(
                self,
                "camera_positions",
                tuple(tuple(float(c) for c in p) for p in self.camera_positions),
            )
        validate_config(self)

    @property
    def bin_count(self) -> int:
        return self.bin_nx * self.bin_ny

    @property
    def bin_width_x(self) -> float:
        return self.surface_width_x / self.bin_nx

    @property
    def bin_width_y(self) -> float:
        return self.surface_width_y / self.bin_ny

    @property
    def pixel_pitch(self) -> float:
        """Size of one pixel on the image sensor, mm."""
        return self.sensor_width / self.image_size

    @property
    def surface_height(self) -> float:
        """Height of the gel surface above the pinhole plane, mm."""
        return self.particle_plane_height + self.particle_depth


def validate_config(cfg: SensorConfig) -> None:
    if cfg.surface_width_x <= 0 or cfg.surface_width_y <= 0:
        raise ValidationError("surface widths must be positive")
    if cfg.bin_nx < 1 or cfg.bin_ny < 1:
        raise ValidationError("bin grid must be at least 1x1")
    if cfg.camera_count != len(cfg.camera_positions):
        raise ValidationError(
            f"camera_count={cfg.camera_count} but {len(cfg.camera_positions)} positions given"
        )
    if any(len(p) != 3 for p in cfg.camera_positions):
        raise ValidationError("camera positions must be 3D points")
    if cfg.particle_plane_height <= 0 or cfg.particle_depth <= 0:
        raise ValidationError("particle plane must lie above the cameras and below the surface")
    if cfg.focal_length <= 0 or cfg.sensor_width <= 0:
        raise ValidationError("focal_length and sensor_width must be positive")
    if cfg.image_size < 2:
        raise ValidationError("image_size must be at least 2")
    if cfg.projection_kind not in PROJECTION_KINDS:
        raise ValidationError(f"unknown projection_kind {cfg.projection_kind!r}")
    if cfg.particle_density <= 0 or cfg.particle_radius_px <= 0:
        raise ValidationError("particle density and radius must be positive")
    if cfg.image_noise_sigma < 0:
        raise ValidationError("image_noise_sigma must be non-negative")
    if cfg.effective_modulus <= 0:
        raise ValidationError("effective_modulus must be positive")
    if not 0 <= cfg.poisson_ratio < 0.5:
        raise ValidationError("poisson_ratio must lie in [0, 0.5)")
    if cfg.rng_seed < 0:
        raise ValidationError("rng_seed must be a non-negative integer")
    if any(p[2] >= cfg.particle_plane_height for p in cfg.camera_positions):
        raise ValidationError("cameras must sit below the particle plane")


def desk_config(**overrides) -> SensorConfig:
    """Default desk-scale config: 64x64 frames, smaller rendered particles.

    Keeps the full-size sensing surface and bin grid so that results are
    directly comparable with the full-resolution configuration.
    """
    params = dict(image_size=64, particle_radius_px=1.0)
    params.update(overrides)
    return SensorConfig(**params)


# ---------------------------------------------------------------------------
# Bin grid


def bin_index(point, cfg: SensorConfig) -> int:
    """Map a surface position (mm) to its row-major bin id.

    Bins tile the surface in equal-area rectangles; ids run with x fastest:
    id = ix + bin_nx * iy. Boundary points belong to the higher-index bin
    except on the far surface edges, which fold into the last bin.
    """
    x, y = float(point[0]), float(point[1])
    if not (0.0 <= x <= cfg.surface_width_x and 0.0 <= y <= cfg.surface_width_y):
        raise ValidationError(f"point ({x}, {y}) lies outside the sensor surface")
    ix = min(int(x * cfg.bin_nx / cfg.surface_width_x), cfg.bin_nx - 1)
    iy = min(int(y * cfg.bin_ny / cfg.surface_width_y), cfg.bin_ny - 1)
    return ix + cfg.bin_nx * iy


def bin_center(index: int, cfg: SensorConfig):
    """Inverse of `bin_index` up to bin resolution: center of bin `index`."""
    if not 0 <= index < cfg.bin_count:
        raise ValidationError(f"bin index {index} out of range")
    ix = index % cfg.bin_nx
    iy = index // cfg.bin_nx
    return ((ix + 0.5) * cfg.bin_width_x, (iy + 0.5) * cfg.bin_width_y)


def bin_centers(cfg: SensorConfig) -> np.ndarray:
    """(bin_count, 2) array of bin centers in row-major bin order."""
    xs = (np.arange(cfg.bin_nx) + 0.5) * cfg.bin_width_x
    ys = (np.arange(cfg.bin_ny) + 0.5) * cfg.bin_width_y
    gx, gy = np.meshgrid(xs, ys)
    return np.column_stack([gx.ravel(), gy.ravel()])


# ---------------------------------------------------------------------------
# Projection


def _relative(points: np.ndarray, cfg: SensorConfig, camera: int) -> np.ndarray:
    if not 0 <= camera < cfg.camera_count:
        raise ValidationError(f"camera id {camera} out of range")
    return np.asarray(points, dtype=np.float64) - np.asarray(cfg.camera_positions[camera])


def project_points(points: np.ndarray, camera: int, cfg: SensorConfig):
    """Project 3D points (N, 3) through one camera.

    Returns
    -------
    uv : (N, 2) float array
        Continuous pixel coordinates; the optical axis maps to the image
        center (image_size / 2).  Rows for invalid points are NaN.
    valid : (N,) bool array
        True where the point lies in front of the pinhole and its image
        falls on the pixel grid.
    """
    rel = _relative(points, cfg, camera)
    if rel.ndim == 1:
        rel = rel[None, :]
    z = rel[:, 2]
    in_front = z > 0.0
    zsafe = np.where(in_front, z, 1.0)
    if cfg.projection_kind == "pinhole":
        su = cfg.focal_length * rel[:, 0] / zsafe
        sv = cfg.focal_length * rel[:, 1] / zsafe
    else:  # equidistant fisheye: radial sensor distance = f * theta
        rxy = np.hypot(rel[:, 0], rel[:, 1])
        theta = np.arctan2(rxy, zsafe)
        with np.errstate(invalid="ignore"):
            scale = np.where(rxy > 0.0, cfg.focal_length * theta / np.where(rxy > 0, rxy, 1.0), 0.0)
        su = scale * rel[:, 0]
        sv = scale * rel[:, 1]
    half = cfg.image_size / 2.0
    u = su / cfg.pixel_pitch + half
    v = sv / cfg.pixel_pitch + half
    uv = np.column_stack([u, v])
    size = float(cfg.image_size)
    valid = in_front & (u >= 0.0) & (u < size) & (v >= 0.0) & (v < size)
    uv[~in_front] = np.nan
    return uv, valid


def project(point, camera: int, cfg: SensorConfig):
    """Project a single 3D point; returns (u, v) pixels or None if off-image.

    Raises ValidationError for points at or behind the pinhole plane.
    """
    rel = _relative(point, cfg, camera)
    if rel[2] <= 0.0:
        raise ValidationError("point lies at or behind the camera pinhole plane")
    uv, valid = project_points(np.asarray(point, dtype=np.float64)[None, :], camera, cfg)
    if not valid[0]:
        return None
    return float(uv[0, 0]), float(uv[0, 1])


def unproject_pixel(uv, camera: int, cfg: SensorConfig, plane_height: float = None):
    """Cast a pixel coordinate back to the horizontal plane at `plane_height`.

    Inverse of `project` for points on that plane. Defaults to the particle
    plane.
    """
    if plane_height is None:
        plane_height = cfg.particle_plane_height
    cam = np.asarray(cfg.camera_positions[camera], dtype=np.float64)
    dz = plane_height - cam[2]
    if dz <= 0:
        raise ValidationError("target plane must lie above the camera")
    half = cfg.image_size / 2.0
    su = (float(uv[0]) - half) * cfg.pixel_pitch
    sv = (float(uv[1]) - half) * cfg.pixel_pitch
    if cfg.projection_kind == "pinhole":
        direction = np.array([su / cfg.focal_length, sv / cfg.focal_length, 1.0])
        point = cam + direction * dz
    else:
        rs = math.hypot(su, sv)
        theta = rs / cfg.focal_length
        if theta >= math.pi / 2:
            raise ValidationError("fisheye ray does not intersect the plane")
        if rs == 0.0:
            point = cam + np.array([0.0, 0.0, dz])
        else:
            t = dz / math.cos(theta)
            direction = np.array(
                [math.sin(theta) * su / rs, math.sin(theta) * sv / rs, math.cos(theta)]
            )
            point = cam + direction * t
    return point


# ---------------------------------------------------------------------------
# Coverage


@dataclass
class CoverageReport:
    """Field-of-view footprint of every camera plus the uncovered fraction."""

    uncovered_fraction: float
    polygons: list            # [(camera_id, (n, 2) vertex array in mm), ...]
    resolution: int
    camera_ids: tuple

    def summary(self) -> str:
        return (
            f"coverage cameras={len(self.camera_ids)} "
            f"covered={1.0 - self.uncovered_fraction:.6g} "
            f"uncovered={self.uncovered_fraction:.6g}"
        )

    def write_csv(self, fh) -> None:
        fh.write("camera,vertex,x_mm,y_mm\n")
        for cam, poly in self.polygons:
            for k, (x, y) in enumerate(poly):
                fh.write(f"{cam},{k},{x:.6g},{y:.6g}\n")


def fov_polygon(camera: int, cfg: SensorConfig, samples_per_edge: int = 16) -> np.ndarray:
    """Footprint of a camera's image boundary on the particle plane.

    Exact corner rectangle for the pinhole model; a sampled boundary polygon
    for the fisheye model (rays steeper than the horizon are clamped).
    """
    size = float(cfg.image_size)
    if cfg.projection_kind == "pinhole":
        corners = [(0.0, 0.0), (size, 0.0), (size, size), (0.0, size)]
        pts = [unproject_pixel(c, camera, cfg)[:2] for c in corners]
        return np.asarray(pts)
    border = []
    t = np.linspace(0.0, size, samples_per_edge, endpoint=False)
    border.extend((float(x), 0.0) for x in t)
    border.extend((size, float(y)) for y in t)
    border.extend((size - float(x), size) for x in t)
    border.extend((0.0, size - float(y)) for y in t)
    pts = []
    half = size / 2.0
    max_r = (math.pi / 2 - 1e-3) * cfg.focal_length / cfg.pixel_pitch
    for u, v in border:
        du, dv = u - half, v - half
        r = math.hypot(du, dv)
        if r > max_r:
            du *= max_r / r
            dv *= max_r / r
        pts.append(unproject_pixel((half + du, half + dv), camera, cfg)[:2])
    return np.asarray(pts)


def _surface_raster(cfg: SensorConfig, resolution: int):
    ns_x = cfg.bin_nx * resolution
    ns_y = cfg.bin_ny * resolution
    xs = cfg.surface_width_x * (np.arange(ns_x) + 0.5) / ns_x
    ys = cfg.surface_width_y * (np.arange(ns_y) + 0.5) / ns_y
    gx, gy = np.meshgrid(xs, ys)
    return gx.ravel(), gy.ravel()


def coverage_report(cfg: SensorConfig, camera_ids=None, resolution: int = 10) -> CoverageReport:
    """Rasterize the surface and measure the fraction seen by no camera.

    The surface is sampled at `resolution` times the bin resolution on the
    particle plane; a point counts as covered when it projects onto the
    pixel grid of at least one camera.
    """
    if resolution < 1:
        raise ValidationError("resolution must be >= 1")
    if camera_ids is None:
        camera_ids = tuple(range(cfg.camera_count))
    camera_ids = tuple(int(c) for c in camera_ids)
    gx, gy = _surface_raster(cfg, resolution)
    pts = np.column_stack([gx, gy, np.full_like(gx, cfg.particle_plane_height)])
    covered = np.zeros(len(pts), dtype=bool)
    for cam in camera_ids:
        _, valid = project_points(pts, cam, cfg)
        covered |= valid
    polygons = [(cam, fov_polygon(cam, cfg)) for cam in camera_ids]
    return CoverageReport(
        uncovered_fraction=float(1.0 - covered.mean()),
        polygons=polygons,
        resolution=resolution,
        camera_ids=camera_ids,
    )


def covered_bins(cfg: SensorConfig, camera_ids=None) -> np.ndarray:
    """Sorted ids of bins whose center is in the FOV of at least one camera."""
    if camera_ids is None:
        camera_ids = tuple(range(cfg.camera_count))
    centers = bin_centers(cfg)
    pts = np.column_stack(
        [centers, np.full(len(centers), cfg.particle_plane_height)]
    )
    covered = np.zeros(len(pts), dtype=bool)
    for cam in camera_ids:
        _, valid = project_points(pts, int(cam), cfg)
        covered |= valid
    return np.flatnonzero(covered)


# ---------------------------------------------------------------------------
# Thickness dimensioning


@dataclass(frozen=True)
class DimensioningSpec:
    """Layer budget of the physical stack, bottom (camera board) to top.

    The LED board sits around the lenses and does not contribute. The
    commodity_* fields describe the smallest available off-the-shelf camera
    module used by the ideal-minimal variant.
    """

    silicone_stack_thickness: float = 0.9   # mm, the two layers above the particles
    lens_to_particle_distance: float = 4.0  # mm
    camera_module_thickness: float = 8.55   # mm, camera incl. lens mount
    interface_board_thickness: float = 1.1  # mm
    connector_thickness: float = 2.9        # mm, flex-cable connector under the board
    image_sensor_width: float = 0.65        # mm, commodity module sensor
    required_fov_width: float = 25.0        # mm, one interface board
    commodity_module_thickness: float = 1.158  # mm, smallest lens+sensor module
    commodity_focus_distance: float = 3.0      # mm, its minimum focus distance

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) <= 0:
                raise ValidationError(f"{f.name} must be strictly positive")


def paper_dimensioning_spec() -> DimensioningSpec:
    """Spec with the as-built hardware layer values."""
    return DimensioningSpec()


def pinhole_focal_bound(spec: DimensioningSpec) -> float:
    """Focal length needed to span required_fov_width from the minimum
    focus distance, by similar triangles on an ideal pinhole."""
    return (
        spec.commodity_focus_distance * spec.image_sensor_width / spec.required_fov_width
    )


def total_thickness(spec: DimensioningSpec, variant: str) -> float:
    """Overall sensor thickness in mm for one build variant.

    as-built sums every contributing layer; relocated-connector drops the
    flex connector; relocated-board additionally drops the interface board;
    ideal-minimal replaces the optical stack with the commodity module at
    its minimum focus distance (never worse than the current optics, so the
    variant ordering ideal <= board <= connector <= as-built always holds).
    """
    optics = spec.lens_to_particle_distance + spec.camera_module_thickness
    if variant == "as-built":
        result = (
            spec.silicone_stack_thickness
            + optics
            + spec.interface_board_thickness
            + spec.connector_thickness
        )
    elif variant == "relocated-connector":
        result = spec.silicone_stack_thickness + optics + spec.interface_board_thickness
    elif variant == "relocated-board":
        result = spec.silicone_stack_thickness + optics
    elif variant == "ideal-minimal":
        commodity = spec.commodity_focus_distance + spec.commodity_module_thickness
        result = spec.silicone_stack_thickness + min(commodity, optics)
    else:
        raise ValidationError(f"unknown thickness variant {variant!r}")
    if result <= 0:
        raise ValidationError(f"non-positive thickness for variant {variant!r}")
    return result


# ---------------------------------------------------------------------------
# Config files (flat "key = value" text) and hashing

_CONFIG_HEADER = "# tacsim sensor config"
_DIMSPEC_HEADER = "# tacsim dimensioning spec"


def _parse_kv(text: str) -> dict:
    out = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"line {ln}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in out:
            raise ValidationError(f"line {ln}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def _format_cameras(positions) -> str:
    return "; ".join(",".join(f"{c:.9g}" for c in p) for p in positions)


def _parse_cameras(text: str) -> tuple:
    positions = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        parts = [p for p in chunk.split(",") if p.strip()]
        if len(parts) != 3:
            raise ValidationError(f"camera position {chunk!r} is not an x,y,z triple")
        positions.append(tuple(float(p) for p in parts))
    if not positions:
        raise ValidationError("camera_positions is empty")
    return tuple(positions)


def _coerce_fields(cls, values: dict):
    field_types = {f.name: f.type for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, raw in values.items():
        if key not in field_types:
            raise ValidationError(f"unknown config key {key!r}")
        if key == "camera_positions":
            kwargs[key] = _parse_cameras(raw)
        elif key == "projection_kind":
            kwargs[key] = raw
        elif field_types[key] == "int":
            kwargs[key] = int(raw)
        else:
            kwargs[key] = float(raw)
    return cls(**kwargs)


def sensor_config_text(cfg: SensorConfig) -> str:
    """Canonical flat-text form of a config; also the hashing preimage."""
    lines = [_CONFIG_HEADER]
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if f.name == "camera_positions":
            lines.append(f"{f.name} = {_format_cameras(value)}")
        elif isinstance(value, float):
            lines.append(f"{f.name} = {value:.9g}")
        else:
            lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: SensorConfig) -> str:
    return hashlib.sha256(sensor_config_text(cfg).encode("utf-8")).hexdigest()


def save_sensor_config(cfg: SensorConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(sensor_config_text(cfg))


def load_sensor_config(path) -> SensorConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return _coerce_fields(SensorConfig, _parse_kv(fh.read()))


def save_dimensioning_spec(spec: DimensioningSpec, path) -> None:
    lines = [_DIMSPEC_HEADER]
    for f in dataclasses.fields(spec):
        lines.append(f"{f.name} = {getattr(spec, f.name):.9g}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dimensioning_spec(path) -> DimensioningSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return _coerce_fields(DimensioningSpec, _parse_kv(fh.read()))
