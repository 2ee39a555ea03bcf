"""Noise-space alignment of a toy diffusion sampler with an image-space drift regularizer."""

from __future__ import annotations

from .align import AlignmentConfig, AlignmentReport, best_of_n, dno_optimize, mira_optimize
from .analysis import (
    AR1Process,
    DriftEstimate,
    ar1_kl,
    ar1_marginal,
    gaussian_marginal_kl,
    gaussian_trajectory_kl,
    mc_drift,
    mmd_drift,
)
from .preference import PreferencePair, dpo_loss, implicit_reward, mira_dpo_optimize
from .rewards import RewardSpec
from .sampler import NoiseBundle, TrajectoryRecord, sample
from .schedule import VarianceSchedule, build_linear_schedule
from .score_model import GuidanceSetting, MixtureScoreModel, gaussian_model, ring_model

__version__ = "0.1.0"
