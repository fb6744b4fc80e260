"""Cross-directional consistency network (CCNet) lab for multi-spectral re-identification.

Plain-numpy reference implementation: CdC loss and its closed-form gradient,
the ALNU normalization unit, a three-branch desk-scale encoder, PK-batch
training, and re-ID evaluation (CMC, mAP, masked-center missing modalities).
"""

from .errors import (CCNetError, ConfigError, FormatError, InputError, MetricError, OracleError,
                     ShapeError, TrainingError)
from .losses import ALPHA, LAMBDA, cdc_gradient, cdc_loss, cdc_modality_loss, cdc_sample_loss

__version__ = "0.1.0"
