import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tacsim.errors import ValidationError
from tacsim.geometry import (
    DimensioningSpec,
    SensorConfig,
    bin_center,
    bin_centers,
    bin_index,
    config_hash,
    coverage_report,
    covered_bins,
    desk_config,
    load_dimensioning_spec,
    load_sensor_config,
    paper_dimensioning_spec,
    project,
    project_points,
    save_dimensioning_spec,
    save_sensor_config,
    total_thickness,
    unproject_pixel,
)


@pytest.fixture(scope="module")
def cfg():
    return SensorConfig()


# ---------------------------------------------------------------------------
# bin grid


def test_bin_index_corners(cfg):
    assert bin_index((0.0, 0.0), cfg) == 0
    eps = 1e-9
    assert bin_index((49.0 - eps, 51.0 - eps), cfg) == 649
    # boundary points fold into the last bin
    assert bin_index((49.0, 51.0), cfg) == 649


def test_bin_index_center_hand_computed(cfg):
    # surface center: grid cell (12, 13) -> 12 + 25*13
    assert bin_index((24.5, 25.5), cfg) == 337


def test_bin_index_rejects_outside(cfg):
    with pytest.raises(ValidationError):
        bin_index((-0.1, 10.0), cfg)
    with pytest.raises(ValidationError):
        bin_index((10.0, 51.2), cfg)


def test_bin_areas_equal(cfg):
    areas = cfg.bin_width_x * cfg.bin_width_y
    assert areas * cfg.bin_count == pytest.approx(
        cfg.surface_width_x * cfg.surface_width_y, rel=1e-9
    )


def test_bin_center_round_trip(cfg):
    for idx in range(0, cfg.bin_count, 37):
        assert bin_index(bin_center(idx, cfg), cfg) == idx


@given(
    x=st.floats(min_value=0.0, max_value=49.0, allow_nan=False),
    y=st.floats(min_value=0.0, max_value=51.0, allow_nan=False),
)
@settings(max_examples=200, deadline=None)
def test_bin_partition_every_point_in_exactly_one_bin(x, y):
    cfg = SensorConfig()
    idx = bin_index((x, y), cfg)
    assert 0 <= idx < cfg.bin_count
    cx, cy = bin_center(idx, cfg)
    assert abs(cx - x) <= cfg.bin_width_x / 2 + 1e-9
    assert abs(cy - y) <= cfg.bin_width_y / 2 + 1e-9


def test_bin_centers_match_scalar_map(cfg):
    centers = bin_centers(cfg)
    assert centers.shape == (650, 2)
    assert centers[337] == pytest.approx(bin_center(337, cfg))


# ---------------------------------------------------------------------------
# projection


def test_project_optical_axis_hits_image_center(cfg):
    cam = 0
    cx, cy, cz = cfg.camera_positions[cam]
    uv = project((cx, cy, cz + cfg.particle_plane_height), cam, cfg)
    assert uv == pytest.approx((cfg.image_size / 2, cfg.image_size / 2))


def test_project_pinhole_hand_computed():
    # focal 2 mm, plane 4 mm above the pinhole, 1 mm lateral offset:
    # sensor offset 0.5 mm (similar triangles); pitch 8/128 mm -> 8 px
    cfg = SensorConfig(
        camera_positions=((10.0, 10.0, 0.0),),
        camera_count=1,
        focal_length=2.0,
        sensor_width=8.0,
        image_size=128,
        particle_plane_height=4.0,
    )
    u, v = project((11.0, 10.0, 4.0), 0, cfg)
    assert (u, v) == pytest.approx((64.0 + 8.0, 64.0))


def test_project_fisheye_axis_and_first_order():
    base = dict(
        camera_positions=((10.0, 10.0, 0.0),),
        camera_count=1,
        focal_length=2.0,
        sensor_width=8.0,
        image_size=128,
        particle_plane_height=4.0,
    )
    fish = SensorConfig(projection_kind="equidistant-fisheye", **base)
    pin = SensorConfig(projection_kind="pinhole", **base)
    # theta = 0 -> exact center
    assert project((10.0, 10.0, 4.0), 0, fish) == pytest.approx((64.0, 64.0))
    # small angles: fisheye and pinhole agree to < 0.1 % in radial distance
    for theta in (0.01, 0.03, 0.05):
        p = (10.0 + 4.0 * math.tan(theta), 10.0, 4.0)
        uf, _ = project(p, 0, fish)
        up, _ = project(p, 0, pin)
        rf, rp = uf - 64.0, up - 64.0
        assert abs(rf - rp) / rp < 1e-3


def test_project_behind_pinhole_raises(cfg):
    with pytest.raises(ValidationError):
        project((12.25, 12.75, 0.0), 0, cfg)
    with pytest.raises(ValidationError):
        project((12.25, 12.75, -1.0), 0, cfg)


def test_project_off_image_returns_none(cfg):
    assert project((-100.0, -100.0, cfg.particle_plane_height), 0, cfg) is None


def test_unproject_inverts_project(cfg):
    rng = np.random.default_rng(3)
    pts = np.column_stack(
        [
            rng.uniform(5, 20, 50),
            rng.uniform(5, 20, 50),
            np.full(50, cfg.particle_plane_height),
        ]
    )
    uv, valid = project_points(pts, 0, cfg)
    assert valid.all()
    for p, q in zip(pts, uv):
        back = unproject_pixel(q, 0, cfg)
        assert np.allclose(back, p, atol=1e-6)


def test_unproject_inverts_project_fisheye():
    cfg = SensorConfig(projection_kind="equidistant-fisheye")
    pts = np.array([[3.0, 7.0, 5.0], [20.0, 22.0, 5.0], [12.25, 12.75, 5.0]])
    uv, valid = project_points(pts, 0, cfg)
    assert valid.all()
    for p, q in zip(pts, uv):
        assert np.allclose(unproject_pixel(q, 0, cfg), p, atol=1e-6)


# ---------------------------------------------------------------------------
# coverage


def test_default_config_fully_covered(cfg):
    rep = coverage_report(cfg)
    assert rep.uncovered_fraction == 0.0
    assert len(covered_bins(cfg)) == cfg.bin_count


def test_single_narrow_camera_uncovered_fraction():
    # one camera centered on the surface whose FOV spans half the surface
    # width per axis; oracle by area arithmetic:
    # covered = 24.5 x 24.5 of 49 x 51 -> uncovered = 1 - 600.25/2499
    half_extent = 49.0 / 4.0
    h = 5.0
    f = 2.0
    sensor_width = 2.0 * f * half_extent / h
    cfg1 = SensorConfig(
        camera_count=1,
        camera_positions=((24.5, 25.5, 0.0),),
        focal_length=f,
        sensor_width=sensor_width,
        particle_plane_height=h,
    )
    oracle = 1.0 - (2 * half_extent) ** 2 / (49.0 * 51.0)
    rep = coverage_report(cfg1, resolution=20)
    assert rep.uncovered_fraction == pytest.approx(oracle, abs=5e-3)
    assert rep.uncovered_fraction == pytest.approx(0.76, abs=0.01)


def test_three_camera_uncovered_quadrant(cfg):
    # removing camera 3 leaves its quadrant uncovered except the strips the
    # neighbors reach; oracle by area arithmetic with the default FOV
    # half-extent of 13.75 mm
    e = cfg.particle_plane_height * (cfg.sensor_width / 2) / cfg.focal_length
    assert e == pytest.approx(13.75)
    strip_y = (12.75 + e) - 25.5          # camera 1 reach into the quadrant
    strip_x = (12.25 + e) - 24.5          # camera 2 reach into the quadrant
    quad_w, quad_h = 49.0 - 24.5, 51.0 - 25.5
    covered = strip_y * quad_w + strip_x * quad_h - strip_x * strip_y
    oracle = (quad_w * quad_h - covered) / (49.0 * 51.0)
    rep = coverage_report(cfg, camera_ids=(0, 1, 2), resolution=20)
    assert rep.uncovered_fraction == pytest.approx(oracle, abs=5e-3)
    # roughly the missing quadrant
    assert 0.18 < rep.uncovered_fraction < 0.25


def test_covered_bins_subset_for_three_cameras(cfg):
    cov3 = covered_bins(cfg, (0, 1, 2))
    assert 0 < len(cov3) < cfg.bin_count
    # ratio close to the covered-area fraction
    assert len(cov3) / cfg.bin_count == pytest.approx(0.775, abs=0.03)


def test_coverage_csv_and_summary(cfg):
    rep = coverage_report(cfg)
    buf = io.StringIO()
    rep.write_csv(buf)
    lines = buf.getvalue().strip().splitlines()
    assert lines[0] == "camera,vertex,x_mm,y_mm"
    assert len(lines) == 1 + 4 * 4  # four pinhole corner polygons
    assert "uncovered=0" in rep.summary()


def test_fisheye_coverage_no_worse_than_pinhole():
    pin = SensorConfig()
    fish = SensorConfig(projection_kind="equidistant-fisheye")
    assert (
        coverage_report(fish).uncovered_fraction
        <= coverage_report(pin).uncovered_fraction
    )


# ---------------------------------------------------------------------------
# dimensioning


def test_total_thickness_reference_values():
    spec = paper_dimensioning_spec()
    assert total_thickness(spec, "as-built") == pytest.approx(17.45, abs=0.01)
    assert total_thickness(spec, "relocated-connector") == pytest.approx(14.55, abs=0.01)
    assert total_thickness(spec, "relocated-board") == pytest.approx(13.45, abs=0.01)
    ideal = total_thickness(spec, "ideal-minimal")
    assert ideal == pytest.approx(5.058, abs=0.01)
    assert 4.5 < ideal < 5.5


def test_total_thickness_unknown_variant():
    with pytest.raises(ValidationError):
        total_thickness(paper_dimensioning_spec(), "floating")


@given(
    silicone=st.floats(0.1, 5.0),
    lens=st.floats(0.5, 10.0),
    module=st.floats(0.5, 15.0),
    board=st.floats(0.1, 5.0),
    connector=st.floats(0.1, 5.0),
)
@settings(max_examples=100, deadline=None)
def test_variant_ordering_any_valid_spec(silicone, lens, module, board, connector):
    spec = DimensioningSpec(
        silicone_stack_thickness=silicone,
        lens_to_particle_distance=lens,
        camera_module_thickness=module,
        interface_board_thickness=board,
        connector_thickness=connector,
    )
    values = [total_thickness(spec, v) for v in
              ("ideal-minimal", "relocated-board", "relocated-connector", "as-built")]
    assert values == sorted(values)


def test_dimensioning_spec_rejects_nonpositive():
    with pytest.raises(ValidationError):
        DimensioningSpec(connector_thickness=0.0)


# ---------------------------------------------------------------------------
# config files


def test_sensor_config_round_trip(tmp_path):
    cfg = desk_config(rng_seed=7, projection_kind="equidistant-fisheye")
    path = tmp_path / "sensor.cfg"
    save_sensor_config(cfg, path)
    loaded = load_sensor_config(path)
    assert loaded == cfg
    assert config_hash(loaded) == config_hash(cfg)


def test_sensor_config_unknown_key(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("surface_width_x = 49\nwibble = 3\n")
    with pytest.raises(ValidationError, match="unknown config key"):
        load_sensor_config(path)


def test_sensor_config_partial_file_uses_defaults(tmp_path):
    path = tmp_path / "partial.cfg"
    path.write_text("image_size = 32\n# a comment\n")
    cfg = load_sensor_config(path)
    assert cfg.image_size == 32
    assert cfg.surface_width_x == 49.0


def test_dimensioning_spec_round_trip(tmp_path):
    spec = paper_dimensioning_spec()
    path = tmp_path / "dim.cfg"
    save_dimensioning_spec(spec, path)
    assert load_dimensioning_spec(path) == spec


def test_config_hash_changes_with_fields():
    assert config_hash(SensorConfig()) != config_hash(SensorConfig(rng_seed=1))


def test_config_validation_errors():
    with pytest.raises(ValidationError):
        SensorConfig(camera_count=3)  # four default positions
    with pytest.raises(ValidationError):
        SensorConfig(poisson_ratio=0.5)
    with pytest.raises(ValidationError):
        SensorConfig(projection_kind="orthographic")
