"""tacsim: multi-camera optical tactile sensor simulation and contact
force-distribution reconstruction.

The package simulates a camera-array tactile sensor end to end: analytic
contact mechanics stand in for the physical indenter and FEM labels,
a particle-image renderer produces the per-camera difference images, and a
small from-scratch neural network maps those images back to the discretized
3D force distribution, including a freeze-and-recalibrate protocol for
growing the camera set.
"""

from .contact import (
    ForceDistribution,
    Indentation,
    bin_forces,
    contact_radius,
    hertz_pressure,
    particle_displacement,
    peak_pressure,
    total_load,
)
from .errors import NumericalError, TacsimError, ValidationError
from .geometry import (
    CoverageReport,
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
    save_sensor_config,
    total_thickness,
    unproject_pixel,
)
from .net import (
    AdamState,
    Architecture,
    GradCheckReport,
    NetworkModel,
    Tensor,
    adam_step,
    build_model,
    gradient_check,
)
from .optics import (
    FrameSet,
    ParticleField,
    capture,
    difference_image,
    encode_difference,
    render,
    render_rest_frames,
    sample_particle_field,
    write_pgm,
)
from .pipeline import (
    Dataset,
    Metrics,
    MultiContactReport,
    TrainHyper,
    TrainReport,
    generate_dataset,
    metrics,
    multi_contact_eval,
    recalibrate,
    split_of_sample,
    train,
)

__version__ = "0.1.0"
