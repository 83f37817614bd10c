"""riskcam: risk-aware pixel attribution for CNN classifiers.

Builds MC-dropout volumes of CAM-family saliency maps, reduces them to an
enhanced expectation map with a per-pixel coefficient-of-variation risk map,
and evaluates methods with the ADCC suite (AverageDrop, Coherency,
Complexity, harmonic-mean ADCC) plus latency.
"""

from .attrib import (
    METHODS,
    AttributionConfig,
    SaliencyMap,
    grad_cam,
    grad_cam_pp,
    normalize_map,
    recipro_cam,
    score_cam,
    smooth_grad_cam_pp,
    upsample_bilinear,
)
from .errors import (
    CoherencyUndefinedError,
    DimensionError,
    DomainError,
    FormatError,
    GraphError,
    ParameterError,
    RiskcamError,
    VersionError,
)
from .metrics import MetricsReport, adcc, average_drop, coherency, complexity, evaluate_method, masked_input
from .model import (
    Model,
    ModelSpec,
    Prediction,
    WeightStore,
    build_default_model,
    load_model,
    load_weights,
    predict,
    save_weights,
    train_toy,
)
from .risk import PAVolume, RiskConfig, RiskResult, cv_map, expectation_map, explain_with_risk, pa_volume, variance_map

__version__ = "0.1.0"
