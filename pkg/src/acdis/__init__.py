"""Missing-modality brain-tumor segmentation with anatomical consistency distillation
and modality feature synthesis, at desk scale."""

from .errors import (AcdisError, ConfigError, DataError, FormatError, NumericalError, ProtocolError,
                     ShapeError, VerificationError)
from .volume_data import MODALITIES, ModalityMask, MultiModalVolume, PhantomSpec, enumerate_masks, generate_phantom

__version__ = "0.1.0"
