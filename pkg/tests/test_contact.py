import math

import numpy as np
import pytest

from tacsim.contact import (
    ForceDistribution,
    Indentation,
    bin_forces,
    contact_radius,
    hertz_pressure,
    particle_displacement,
    peak_pressure,
    point_load_displacement,
    total_load,
)
from tacsim.errors import ValidationError
from tacsim.geometry import SensorConfig, bin_centers


@pytest.fixture(scope="module")
def cfg():
    return SensorConfig()


CENTER = (24.5, 25.5)


# ---------------------------------------------------------------------------
# Hertz pressure


def test_zero_depth_zero_pressure(cfg):
    ind = Indentation(CENTER, 0.0)
    r = np.linspace(0, 10, 50)
    assert np.all(hertz_pressure(ind, cfg.effective_modulus, r) == 0.0)


def test_contact_radius_hand_computed():
    # a = sqrt(R d) = sqrt(5 * 1.5)
    assert contact_radius(Indentation(CENTER, 1.5)) == pytest.approx(math.sqrt(7.5))


def test_total_load_max_depth(cfg):
    # (4/3) E* sqrt(R) d^1.5 with R = 5 mm, d = 1.5 mm and the default
    # modulus lands at the 3 N design point
    p = total_load(Indentation(CENTER, 1.5), cfg.effective_modulus)
    assert p == pytest.approx(3.0, abs=1e-3)


def test_pressure_profile_shape(cfg):
    ind = Indentation(CENTER, 1.0)
    a = contact_radius(ind)
    p0 = peak_pressure(ind, cfg.effective_modulus)
    r = np.array([0.0, 0.5 * a, 0.99 * a, a, 2 * a])
    p = hertz_pressure(ind, cfg.effective_modulus, r)
    assert p[0] == pytest.approx(p0)
    assert p[1] == pytest.approx(p0 * math.sqrt(0.75))
    assert p[2] < p[1]
    assert p[3] == 0.0 and p[4] == 0.0


def test_pressure_integrates_to_total_load(cfg):
    # independent oracle: 1D quadrature of 2 pi r p(r) dr
    ind = Indentation(CENTER, 1.2)
    a = contact_radius(ind)
    r = np.linspace(0, a, 20001)
    p = hertz_pressure(ind, cfg.effective_modulus, r)
    integral = np.trapezoid(2 * math.pi * r * 1e-3 * p, r * 1e-3)
    assert integral == pytest.approx(total_load(ind, cfg.effective_modulus), rel=1e-5)


def test_indentation_validation():
    with pytest.raises(ValidationError):
        Indentation(CENTER, -0.1)
    with pytest.raises(ValidationError):
        Indentation(CENTER, 6.0, tip_radius=5.0)  # beyond the spherical cap
    with pytest.raises(ValidationError):
        hertz_pressure(Indentation(CENTER, 1.0), 1e5, np.array([-1.0]))


# ---------------------------------------------------------------------------
# bin forces


def test_zero_depth_all_zero(cfg):
    dist = bin_forces(Indentation(CENTER, 0.0), cfg)
    assert np.all(dist.forces == 0.0)
    assert not dist.truncated


def test_centered_tangential_sums_cancel(cfg):
    dist = bin_forces(Indentation(CENTER, 1.5), cfg)
    fx, fy, fz = dist.total()
    assert abs(fx) < 1e-6 * fz
    assert abs(fy) < 1e-6 * fz
    assert fz > 0


def test_fz_conservation_default_grid(cfg):
    for depth in (0.3, 0.9, 1.5):
        ind = Indentation(CENTER, depth)
        dist = bin_forces(ind, cfg)
        assert dist.total()[2] == pytest.approx(
            total_load(ind, cfg.effective_modulus), rel=0.01
        )


def test_fz_conservation_against_fine_quadrature(cfg):
    # brute-force oracle: same integral at 4x the subsampling
    ind = Indentation((18.0, 30.0), 1.1)
    coarse = bin_forces(ind, cfg, subsamples=8)
    fine = bin_forces(ind, cfg, subsamples=32)
    assert coarse.total()[2] == pytest.approx(fine.total()[2], rel=5e-3)
    assert np.allclose(coarse.forces, fine.forces, atol=2e-3)


def test_monotone_total_in_depth(cfg):
    totals = [
        bin_forces(Indentation(CENTER, d), cfg).total()[2]
        for d in (0.3, 0.6, 0.9, 1.2, 1.5)
    ]
    assert all(b > a for a, b in zip(totals, totals[1:]))


def test_mirror_symmetry(cfg):
    # reflecting the center about the surface midline permutes the bins and
    # flips the mirrored tangential component
    ind = Indentation((15.0, 20.0), 1.3)
    mirrored = Indentation((cfg.surface_width_x - 15.0, 20.0), 1.3)
    d1 = bin_forces(ind, cfg)
    d2 = bin_forces(mirrored, cfg)
    g1 = {c: d1.component_grid(c) for c in range(3)}
    g2 = {c: d2.component_grid(c) for c in range(3)}
    scale = d1.total()[2]
    assert np.allclose(g2[2], g1[2][:, ::-1], atol=1e-9 * scale)
    assert np.allclose(g2[0], -g1[0][:, ::-1], atol=1e-9 * scale)
    assert np.allclose(g2[1], g1[1][:, ::-1], atol=1e-9 * scale)


def test_truncation_flag(cfg):
    inside = bin_forces(Indentation(CENTER, 1.5), cfg)
    assert not inside.truncated
    edge = bin_forces(Indentation((1.0, 25.5), 1.5), cfg)
    assert edge.truncated
    # truncated patch integrates to less than the analytic load
    assert edge.total()[2] < total_load(Indentation((1.0, 25.5), 1.5), cfg.effective_modulus)


def test_out_of_surface_center_rejected(cfg):
    with pytest.raises(ValidationError):
        bin_forces(Indentation((-2.0, 10.0), 1.0), cfg)


def test_force_distribution_add_and_scale(cfg):
    d1 = bin_forces(Indentation((15.0, 15.0), 1.0), cfg)
    d2 = bin_forces(Indentation((35.0, 35.0), 0.8), cfg)
    s = d1 + d2
    assert np.allclose(s.forces, d1.forces + d2.forces)
    assert np.allclose(d1.scaled(2.0).forces, 2.0 * d1.forces)


# ---------------------------------------------------------------------------
# interior displacement


def _boussinesq_reference(load, r, z, e_star, nu):
    """Textbook form written independently: vertical displacement under a
    point load, u_z = P (1+nu) [ z^2/rho^3 + 2(1-nu)/rho ] / (2 pi E)."""
    e = e_star * (1.0 - nu * nu)
    rho = math.hypot(r, z)
    return load * (1.0 + nu) * (z * z / rho ** 3 + 2.0 * (1.0 - nu) / rho) / (
        2.0 * math.pi * e
    )


def test_point_load_vertical_against_independent_formula(cfg):
    nu = cfg.poisson_ratio
    for load, depth in [(1.0, 2.0), (3.0, 1.0), (0.5, 4.0)]:
        ux, uy, uz = point_load_displacement(load, 0.0, 0.0, depth, cfg.effective_modulus, nu)
        ref = _boussinesq_reference(load, 0.0, depth * 1e-3, cfg.effective_modulus, nu)
        assert float(ux) == 0.0 and float(uy) == 0.0
        assert float(uz) == pytest.approx(-ref / 1e-3, rel=1e-12)


def test_point_load_radial_direction(cfg):
    # interior points move outward where the deep term dominates
    ux, uy, uz = point_load_displacement(1.0, 3.0, 0.0, 2.0, cfg.effective_modulus, 0.45)
    assert float(ux) > 0.0
    assert float(uy) == 0.0
    assert float(uz) < 0.0


def test_zero_load_zero_displacement(cfg):
    zero = ForceDistribution.zeros(cfg)
    pts = np.array([[10.0, 10.0, 5.0], [30.0, 20.0, 5.0]])
    assert np.all(particle_displacement(zero, pts, cfg) == 0.0)


def test_linearity_doubling_load(cfg):
    dist = bin_forces(Indentation((20.0, 20.0), 1.0), cfg)
    pts = np.array([[18.0, 21.0, 5.0], [25.0, 30.0, 5.0], [5.0, 45.0, 5.0]])
    u1 = particle_displacement(dist, pts, cfg)
    u2 = particle_displacement(dist.scaled(2.0), pts, cfg)
    assert np.array_equal(u2, 2.0 * u1)


def test_displacement_decay_beyond_contact(cfg):
    ind = Indentation(CENTER, 1.0)
    a = contact_radius(ind)
    dist = bin_forces(ind, cfg)
    radii = np.linspace(1.5 * a, 20.0, 12)
    pts = np.column_stack(
        [CENTER[0] + radii, np.full_like(radii, CENTER[1]), np.full_like(radii, 5.0)]
    )
    mags = np.linalg.norm(particle_displacement(dist, pts, cfg), axis=1)
    assert np.all(np.diff(mags) <= 1e-12)


def test_singularity_clamp_flagged(cfg):
    dist = ForceDistribution.zeros(cfg)
    target = 300
    dist.forces[target, 2] = 1.0
    cx, cy = bin_centers(cfg)[target]
    # particle almost touching the loaded bin center from below the surface
    pts = np.array([[cx, cy, cfg.surface_height - 1e-6]])
    diag = {}
    u = particle_displacement(dist, pts, cfg, diag=diag)
    assert np.all(np.isfinite(u))
    assert diag["clamped_pairs"] == 1
    # a particle on the particle plane is farther than the clamp: no flag
    diag2 = {}
    particle_displacement(dist, np.array([[cx, cy, 5.0]]), cfg, diag=diag2)
    assert diag2["clamped_pairs"] == 0


def test_particle_above_surface_rejected(cfg):
    dist = ForceDistribution.zeros(cfg)
    with pytest.raises(ValidationError):
        particle_displacement(dist, np.array([[10.0, 10.0, cfg.surface_height]]), cfg)


def test_displacement_from_indentation_equals_from_distribution(cfg):
    ind = Indentation((20.0, 26.0), 0.9)
    pts = np.array([[19.0, 25.0, 5.0]])
    via_ind = particle_displacement(ind, pts, cfg)
    via_dist = particle_displacement(bin_forces(ind, cfg), pts, cfg)
    assert np.array_equal(via_ind, via_dist)
