"""rflab: a desk-scale laboratory for rectified flows.

Train velocity fields on linear interpolation paths, rewire diffusion
denoisers onto them, run the Reflow procedure to straighten trajectories,
sample and invert with Euler/Heun/history-dependent update rules, and verify
everything against an analytic Gaussian-mixture oracle.
"""

from .diagnostics import (DiagnosticsReport, autocorrelation, chi2_quantile,
                          intersection_probe, reconstruction_error,
                          sliced_wasserstein, straightness)
from .errors import (ConfigError, DomainError, IntegrationFailure, NumericFailure,
                     RflabError, ShapeMismatch, TrainingFailure)
from .fields import (ConvertedDenoiserField, DiffusionConversion, GmmSpec,
                     GmmVelocityField, NeuralVelocityField, VelocityField,
                     analytic_velocity, convert_time_scale, converted_posterior_mean,
                     gmm_posterior_mean, gmm_scaled_posterior_mean, gmm_ve_denoiser,
                     gmm_vp_denoiser, interpolate, invert_converted_time, vp_alpha)
from .losses import (LinearFeatureDistance, LossSpec, TimestepDistribution,
                     loss_profile, objective_estimate, premetric_value,
                     sample_timestep)
from .nn import MlpParams, forward_mlp, init_mlp, load_checkpoint, save_checkpoint
from .optim import AdamState, adam_step, init_adam
from .pipeline import (IndependentCoupling, MixedCoupling, ModelSpec, PairDataset,
                       PairedCoupling, ReflowConfig, TrainConfig, TrainResult,
                       finetune_with_real, generate_pairs, invert_real_data,
                       load_pairs, reflow, save_pairs, train_flow)
from .samplers import (IntegrationResult, SolverConfig, TimeSchedule, euler_step,
                       heun_step, integrate, new_rule_step, steps_for_nfe)
from .tensor import Tape, Tensor, backward

__version__ = "0.1.0"
