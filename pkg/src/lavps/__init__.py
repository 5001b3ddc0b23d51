"""Amortised variational posterior sampling with diffusion priors.

Zero-shot midpoint-Gibbs sampling (MGDM), its amortised warm-started variant
(LAVPS), Gaussian-mixture oracles and a small benchmark harness.
"""

from .amortizer import AmortizerTrainConfig, InferenceModel, infer, train_amortizer
from .bench import (
    NonInferiorityResult,
    ParetoPoint,
    RunMetrics,
    non_inferiority_test,
    pareto_front,
    psnr,
    run_experiment,
    sliced_w1,
)
from .config import ConfigError, ExperimentConfig
from .denoiser import AnalyticDenoiser, DenoiserTrainConfig, MLPDenoiser, ddim_refine, denoise, train_denoiser
from .operators import (
    BernoulliMask,
    BlurKernels,
    DegradationOperator,
    FixedOperator,
    RectangleMask,
    block_downsample,
    circular_conv,
    guidance_log_likelihood,
    log_likelihood,
    mask,
    observe,
    sample_operator,
)
from .prior import (
    GaussianMixture,
    PosteriorOracle,
    exact_denoiser,
    exact_posterior,
    noised_marginal,
    random_mixture,
    sample_prior,
)
from .samplers import (
    LAVPSSampler,
    MGDMSampler,
    SamplerConfig,
    SamplerError,
    TraceRecord,
    initial_objective_pair,
    lavps_sample,
    mgdm_sample,
)
from .schedule import NoiseSchedule, bridge, coarse_grid, make_schedule, switch_bound, transition
from .stats import betainc, t_cdf, t_ppf
from .variational import (
    AdamState,
    Context,
    VariationalParams,
    adam_step,
    objective,
    objective_grad,
    zero_shot_init,
)

__version__ = "0.1.0"
