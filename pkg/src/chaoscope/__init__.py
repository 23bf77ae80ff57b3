"""chaoscope package.

Lyapunov spectra, reward chaos, noise robustness and MLE-regularized training
for closed-loop control systems.
"""

from chaoscope.config import Settings, SpectrumConfig, TrainerConfig, get_settings
from chaoscope.dynsys import DynamicalSystem, rollout, step
from chaoscope.errors import ChaoscopeError, ConfigError, NumericalError
from chaoscope.evals import noisy_eval, robustness_sweep
from chaoscope.lyapunov import StabilityClass, benettin_spectrum, classify, reward_mle, spectrum_over_samples
from chaoscope.mleg import train
from chaoscope.policy import PolicyParams, load_weights, save_weights

__all__: list[str] = [
    "ChaoscopeError",
    "ConfigError",
    "DynamicalSystem",
    "NumericalError",
    "PolicyParams",
    "Settings",
    "SpectrumConfig",
    "StabilityClass",
    "TrainerConfig",
    "benettin_spectrum",
    "classify",
    "get_settings",
    "load_weights",
    "noisy_eval",
    "reward_mle",
    "robustness_sweep",
    "rollout",
    "save_weights",
    "spectrum_over_samples",
    "step",
    "train",
]
