"""Segmentation with diffusion-based residual refinement on synthetic phantoms."""

from .config import DiffTrainConfig, ExperimentConfig, SegTrainConfig, load_config, save_config
from .data import degrade_mask, generate_phantoms, read_dataset, split_dataset, write_dataset
from .diffusion import (
    ConditioningBundle,
    NoisePredictor,
    PredictorConfig,
    build_predictor,
    compute_residual,
    denoise_step,
    diffusion_loss,
    forward_diffuse,
    refine,
)
from .metrics import dice, evaluate_cases, hd95, volumetric_similarity
from .pipeline import run_ablation, run_joint_finetune, run_refine_eval, run_train_diff, run_train_seg
from .schedule import NoiseSchedule, alpha_bar_at, linear_schedule, posterior_variance_at
from .segmentation import SegConfig, SegmentationModel, build_model, dice_ce_loss, predict, total_loss, train_epoch

__version__ = "0.1.0"
