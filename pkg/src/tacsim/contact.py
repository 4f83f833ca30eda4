"""Analytic contact mechanics: ground-truth force distributions and the
interior displacement field of the gel.

A spherically-ended cylindrical indenter pressed into an elastic half-space
is modeled with the classical Hertz solution (surface pressure and total
load) plus a radial traction model for the small tangential components.
Particle motion inside the gel follows from superposing the classical
point-load half-space displacement solution over the per-bin normal loads.

Sign conventions: labels store the traction exerted on the gel surface with
Fz positive when pressing into the gel; tangential components are positive
pointing radially outward from the contact center. Geometry is in mm,
forces in N, pressures in Pa (conversions happen internally).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .geometry import SensorConfig, bin_centers

MM = 1e-3  # mm -> m


@dataclass(frozen=True)
class Indentation:
    """One vertical indentation: where, how deep, and with which tip."""

    center: tuple          # (x, y) mm on the surface
    depth: float           # mm, >= 0
    tip_radius: float = 5.0  # mm, sphere radius of the 10 mm indenter

    def __post_init__(self):
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))
        if self.depth < 0:
            raise ValidationError("indentation depth must be non-negative")
        if self.tip_radius <= 0:
            raise ValidationError("tip radius must be positive")
        if self.depth > self.tip_radius:
            raise ValidationError(
                "contact radius would exceed the spherical tip (sphere-only regime)"
            )


def contact_radius(ind: Indentation) -> float:
    """Hertz contact radius a = sqrt(R d), mm."""
    return math.sqrt(ind.tip_radius * ind.depth)


def total_load(ind: Indentation, e_star: float) -> float:
    """Total normal load P = (4/3) E* sqrt(R) d^{3/2}, N."""
    r_m = ind.tip_radius * MM
    d_m = ind.depth * MM
    return (4.0 / 3.0) * e_star * math.sqrt(r_m) * d_m ** 1.5


def peak_pressure(ind: Indentation, e_star: float) -> float:
    """Pressure at the contact center, p0 = 3P / (2 pi a^2), Pa."""
    if ind.depth == 0:
        return 0.0
    a_m = contact_radius(ind) * MM
    return 3.0 * total_load(ind, e_star) / (2.0 * math.pi * a_m * a_m)


def hertz_pressure(ind: Indentation, e_star: float, r) -> np.ndarray:
    """Contact pressure p(r) = p0 sqrt(1 - r^2/a^2) inside r <= a, else 0.

    Parameters
    ----------
    ind : Indentation
    e_star : float
        Effective contact modulus, Pa.
    r : array_like
        Radial distance(s) from the contact center, mm.

    Returns
    -------
    Pressure in Pa, same shape as `r`.
    """
    r = np.asarray(r, dtype=np.float64)
    if np.any(r < 0):
        raise ValidationError("radial distance must be non-negative")
    if ind.depth == 0:
        return np.zeros_like(r)
    a = contact_radius(ind)
    p0 = peak_pressure(ind, e_star)
    inside = r < a
    out = np.zeros_like(r)
    out[inside] = p0 * np.sqrt(1.0 - (r[inside] / a) ** 2)
    return out


@dataclass
class ForceDistribution:
    """Per-bin (Fx, Fy, Fz) contact forces over the sensor's bin grid.

    `forces` has shape (bin_count, 3) in newtons, rows in row-major bin
    order. `truncated` flags contact patches that extended beyond the
    surface boundary (forces then integrate only over the surface).
    """

    forces: np.ndarray
    bin_nx: int
    bin_ny: int
    truncated: bool = False

    def __post_init__(self):
        self.forces = np.asarray(self.forces, dtype=np.float64)
        if self.forces.shape != (self.bin_nx * self.bin_ny, 3):
            raise ValidationError(
                f"forces shape {self.forces.shape} does not match "
                f"{self.bin_nx}x{self.bin_ny} bins"
            )

    @classmethod
    def zeros(cls, cfg: SensorConfig) -> "ForceDistribution":
        return cls(np.zeros((cfg.bin_count, 3)), cfg.bin_nx, cfg.bin_ny)

    def total(self) -> np.ndarray:
        """Per-axis total force: sum over all bins, shape (3,)."""
        return self.forces.sum(axis=0)

    def component_grid(self, axis: int) -> np.ndarray:
        """One force component as a (bin_ny, bin_nx) grid."""
        return self.forces[:, axis].reshape(self.bin_ny, self.bin_nx)

    def __add__(self, other: "ForceDistribution") -> "ForceDistribution":
        if (self.bin_nx, self.bin_ny) != (other.bin_nx, other.bin_ny):
            raise ValidationError("bin grids differ")
        return ForceDistribution(
            self.forces + other.forces,
            self.bin_nx,
            self.bin_ny,
            truncated=self.truncated or other.truncated,
        )

    def scaled(self, factor: float) -> "ForceDistribution":
        return ForceDistribution(
            self.forces * factor, self.bin_nx, self.bin_ny, truncated=self.truncated
        )

    def write_grid_csv(self, fh, axis: int) -> None:
        grid = self.component_grid(axis)
        for row in grid:
            fh.write(",".join(f"{v:.6g}" for v in row) + "\n")


def _subsample_axis(width: float, n_bins: int, subsamples: int) -> np.ndarray:
    m = n_bins * subsamples
    return width * (np.arange(m) + 0.5) / m


def bin_forces(ind: Indentation, cfg: SensorConfig, subsamples: int = 8) -> ForceDistribution:
    """Integrate the contact tractions over every surface bin.

    Midpoint quadrature on a uniform grid of `subsamples`^2 points per bin.
    The normal traction is the Hertz pressure; the tangential traction is
    traction_coeff * p(r) * (local tip slope) pointing radially outward,
    which cancels in the total for centered contacts.

    Returns a ForceDistribution whose Fz column sums to the analytic total
    load up to quadrature error; the result is flagged truncated when the
    contact circle crosses the surface boundary.
    """
    if subsamples < 1:
        raise ValidationError("subsamples must be >= 1")
    cx, cy = ind.center
    if not (0.0 <= cx <= cfg.surface_width_x and 0.0 <= cy <= cfg.surface_width_y):
        raise ValidationError("indentation center lies outside the surface")
    dist = ForceDistribution.zeros(cfg)
    if ind.depth == 0:
        return dist

    a = contact_radius(ind)
    truncated = (
        cx - a < 0.0
        or cx + a > cfg.surface_width_x
        or cy - a < 0.0
        or cy + a > cfg.surface_width_y
    )

    xs = _subsample_axis(cfg.surface_width_x, cfg.bin_nx, subsamples)
    ys = _subsample_axis(cfg.surface_width_y, cfg.bin_ny, subsamples)
    dx = xs[None, :] - cx
    dy = ys[:, None] - cy
    r = np.hypot(dx, dy)

    p = hertz_pressure(ind, cfg.effective_modulus, r)
    cell_area_m2 = (cfg.bin_width_x / subsamples) * (cfg.bin_width_y / subsamples) * MM * MM
    fz = p * cell_area_m2

    # tangential traction: c_t * p * slope of the spherical tip at radius r
    inside = r < a
    slope = np.zeros_like(r)
    ri = r[inside]
    slope[inside] = ri / np.sqrt(ind.tip_radius ** 2 - ri ** 2)
    t_mag = cfg.traction_coeff * p * slope * cell_area_m2
    with np.errstate(invalid="ignore", divide="ignore"):
        inv_r = np.where(r > 0.0, 1.0 / np.where(r > 0.0, r, 1.0), 0.0)
    fx = t_mag * dx * inv_r
    fy = t_mag * dy * inv_r

    ny, nx, s = cfg.bin_ny, cfg.bin_nx, subsamples
    per_bin = np.stack(
        [
            comp.reshape(ny, s, nx, s).sum(axis=(1, 3)).ravel()
            for comp in (fx, fy, fz)
        ],
        axis=1,
    )
    return ForceDistribution(per_bin, nx, ny, truncated=truncated)


# ---------------------------------------------------------------------------
# Interior displacement (point normal load on a half-space)


def _halfspace_constants(e_star: float, nu: float):
    """Young's and shear modulus implied by a rigid indenter's E*."""
    e = e_star * (1.0 - nu * nu)
    g = e / (2.0 * (1.0 + nu))
    return e, g


def point_load_displacement(load_n: float, dx_mm, dy_mm, depth_mm, e_star: float, nu: float):
    """Displacement (mm) at interior points due to one surface point load.

    Classical half-space solution for a normal point load P at the origin,
    evaluated at horizontal offsets (dx, dy) and depth z below the surface:

        u_r = P/(4 pi G) * [ r z / rho^3 - (1-2 nu) r / (rho (rho + z)) ]
        u_z = P/(4 pi G) * [ 2 (1-nu) / rho + z^2 / rho^3 ]

    with rho = sqrt(r^2 + z^2); u_z is positive into the half-space and is
    returned as a negative sensor-frame z component (the gel moves toward
    the cameras under compression).
    """
    dx = np.asarray(dx_mm, dtype=np.float64) * MM
    dy = np.asarray(dy_mm, dtype=np.float64) * MM
    z = np.asarray(depth_mm, dtype=np.float64) * MM
    _, g = _halfspace_constants(e_star, nu)
    r = np.hypot(dx, dy)
    rho = np.sqrt(r * r + z * z)
    coef = load_n / (4.0 * math.pi * g)
    u_r = coef * (r * z / rho ** 3 - (1.0 - 2.0 * nu) * r / (rho * (rho + z)))
    u_down = coef * (2.0 * (1.0 - nu) / rho + z * z / rho ** 3)
    with np.errstate(invalid="ignore", divide="ignore"):
        inv_r = np.where(r > 0.0, 1.0 / np.where(r > 0.0, r, 1.0), 0.0)
    ux = u_r * dx * inv_r / MM
    uy = u_r * dy * inv_r / MM
    uz = -u_down / MM
    return ux, uy, uz


def particle_displacement(
    load,
    points,
    cfg: SensorConfig,
    e_star: float = None,
    poisson: float = None,
    diag: dict = None,
) -> np.ndarray:
    """Displacement of interior points under a bin-load distribution.

    Superposes the point-load half-space solution over every loaded bin
    center, treating each bin's Fz as a point load on the gel surface.
    Linear in the load by construction.

    Parameters
    ----------
    load : ForceDistribution or Indentation
        Indentations are first converted with `bin_forces`.
    points : (N, 3) array
        Particle positions in the sensor frame, mm; must lie strictly
        below the gel surface.
    diag : dict, optional
        If given, receives 'clamped_pairs': the number of (bin, point)
        pairs whose distance hit the half-bin-width singularity clamp.

    Returns
    -------
    (N, 3) displacements in mm.
    """
    if isinstance(load, Indentation):
        load = bin_forces(load, cfg)
    if e_star is None:
        e_star = cfg.effective_modulus
    if poisson is None:
        poisson = cfg.poisson_ratio
    points = np.asarray(points, dtype=np.float64)
    single = points.ndim == 1
    if single:
        points = points[None, :]
    if points.shape[1] != 3:
        raise ValidationError("points must have shape (N, 3)")
    depth = cfg.surface_height - points[:, 2]
    if np.any(depth <= 0):
        raise ValidationError("particles must lie strictly below the gel surface")

    centers = bin_centers(cfg)
    fz = load.forces[:, 2]
    active = np.flatnonzero(fz != 0.0)
    out = np.zeros_like(points)
    if active.size:
        dx = points[:, 0:1] - centers[active, 0][None, :]  # (N, B) mm
        dy = points[:, 1:2] - centers[active, 1][None, :]
        z = np.broadcast_to(depth[:, None], dx.shape)
        rho_mm = np.sqrt(dx * dx + dy * dy + z * z)
        clamp = 0.5 * min(cfg.bin_width_x, cfg.bin_width_y)
        clamped = rho_mm < clamp
        n_clamped = int(clamped.sum())
        if n_clamped:
            # stretch the offset vector to the clamp radius, keeping direction
            scale = np.where(clamped, clamp / np.maximum(rho_mm, 1e-12), 1.0)
            dx = dx * scale
            dy = dy * scale
            z = z * scale
        ux, uy, uz = point_load_displacement(1.0, dx, dy, z, e_star, poisson)
        w = fz[active][None, :]
        out[:, 0] = (ux * w).sum(axis=1)
        out[:, 1] = (uy * w).sum(axis=1)
        out[:, 2] = (uz * w).sum(axis=1)
        if diag is not None:
            diag["clamped_pairs"] = n_clamped
    elif diag is not None:
        diag["clamped_pairs"] = 0
    return out[0] if single else out
