"""Ghost imaging with pseudo-thermal speckle: wave-optics simulation,
correlation and compressive-sensing reconstruction, image metrics."""

__version__ = "0.1.0"

from .analysis import (
    ProfileMetrics,
    double_slit_metrics,
    image_error,
    speckle_correlation_width,
    truth_on_grid,
)
from .estimators import CompressiveGhostImager, CorrelationGhostImager
from .forward import (
    MeasurementSet,
    OpticalLayout,
    RealizationRecord,
    conventional_image_analytic,
    conventional_image_ensemble,
    make_double_slit,
    pixelate,
    preset_layout,
    run_campaign,
    simulate_ghost_realization,
)
from .optics import (
    IntensityGrid,
    OpticalField,
    SamplingError,
    SourceSpec,
    TransmissionMask,
    apply_aperture,
    apply_thin_lens,
    apply_transmission,
    fresnel_propagate,
    generate_source_realization,
    intensity_of,
)
from .recon import (
    ROI,
    ReconResult,
    SensingSystem,
    SolverParams,
    assemble_sensing_system,
    cs_reconstruct,
    gi_reconstruct,
    lasso_fista,
    normalize_system,
)
