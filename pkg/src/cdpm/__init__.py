"""Decomposition-based forecasting with a conditional denoising seasonal model.

A multivariate window is normalized with historical statistics, split into
trend and seasonal parts by a moving average, and forecast by two coupled
models trained end to end: a diffusion denoiser conditioned on historical
patch statistics for the seasonal part, and a dual linear/root-pathway model
for the trend part.
"""

__version__ = "0.1.0"

from . import autodiff, data, diffusion, evaluation, model, seasonal, series, trend, training, variants  # noqa: F401
from .autodiff import Tensor, backward, no_grad  # noqa: F401
from .training import TrainConfig  # noqa: F401
