"""Joint localization and calibration with an active reconfigurable intelligent surface."""

from .channel import ConfigError, ScenarioConfig, build_realization, scale_noise_to_snr, synthesize_observations
from .crlb import localization_bounds
from .esprit import coarse_estimate
from .geometry import ChannelParams, LocalizationState, Pose, forward_map
from .localize import SearchConfig, grid_search
from .refine import ls_refine

__version__ = "0.1.0"

__all__ = [
    "ChannelParams", "ConfigError", "LocalizationState", "Pose", "ScenarioConfig", "SearchConfig",
    "build_realization", "coarse_estimate", "forward_map", "grid_search", "localization_bounds",
    "ls_refine", "scale_noise_to_snr", "synthesize_observations",
]
