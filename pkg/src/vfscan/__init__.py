"""Semi-analytical single-bitflip resilience analysis for small CNNs."""

from .analysis import (
    AnalysisContext,
    SamplingPlan,
    Unit,
    VulnerabilityRecord,
    analyze_unit,
    compute_vf,
    find_delta,
    make_complete_plan,
    make_sampling_plan,
    mvf_total,
    run_analysis,
)
from .bitflip import approx_pow2, exact_epsilon, flip_bit
from .edm import (
    CvvGrid,
    ErrorDistributionMap,
    Vvss,
    build_edm,
    derive_vvss,
    filter_error_analysis,
    neuron_error_analysis,
)
from .engine import (
    InjectionSpec,
    LayerSpec,
    Network,
    forward,
    forward_injected,
    full_forward,
    golden_classify,
    grad_wrt_activation,
)
from .errors import AnalysisError, ConfigError, LoadError
from .fi import (
    FiCampaignSpec,
    FiResult,
    compare_mae,
    exhaustive_activation_fi,
    exhaustive_weight_fi,
    run_exhaustive_fi,
    run_sfi,
    sfi_sample_size,
)
from .model_io import load_batch, load_model, read_report, save_batch, save_model, write_report

__version__ = "0.1.0"
