"""
chx: multipath parameter estimation on a training band and channel
extrapolation to other frequencies, for massive MIMO arrays.

The subpackages follow the processing chain:

- `chx.core`: frequency grids, channel matrices, RF compensation, normalization
- `chx.array`: array geometries, calibration patterns, interpolation
- `chx.synthesis`: planted multipath scenarios and ground-truth channels
- `chx.sage`: the SAGE estimator (VSS and DOA models) and reconstruction
- `chx.metrics`: MSE, beamforming efficiency, MR/ZF precoding, SINR, SE
- `chx.harness`: configurable end-to-end experiments and reports
"""

from .core import (ChannelMatrix, FrequencyGrid, RfResponse, Stage, TrainingBand,
                   band_from_center, compensate_rf, normalize, select_training_band)
from .errors import ChxError
from .sage import Model, SageConfig, SageEstimate, reconstruct, reconstruct_many, sage_run

__version__ = "0.1.0"

__all__ = [
    "ChannelMatrix", "FrequencyGrid", "RfResponse", "Stage", "TrainingBand",
    "band_from_center", "compensate_rf", "normalize", "select_training_band",
    "ChxError", "Model", "SageConfig", "SageEstimate", "reconstruct",
    "reconstruct_many", "sage_run", "__version__",
]
