"""Joint cloud optical thickness / effective radius retrieval with an
attention-augmented UNet, a per-pixel bi-spectral baseline and a synthetic
scene generator."""
from .data import (CloudProfile, ForwardModelParams, GenParams, TileIndex, aggregate_patches, build_tile_index,
                   extract_patches, forward_radiance, generate_profile, synth_profile)
from .ipa import build_lut, ipa_invert_pixel, ipa_retrieve_profile, lut_invert_pixel
from .losses import LossConfig, MetricsReport, improvement_pct, l2_loss, mae, mse, mto_loss, pearson
from .model import Model, ModelConfig, build_model, forward, load_checkpoint, save_checkpoint
from .tensor import Tensor, backward, finite_diff_grad, no_grad
from .training import TrainConfig, adam_step, evaluate_model, retrieve_profile, run_ablation, train

__version__ = "0.1.0"
