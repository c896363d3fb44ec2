"""Joint low-light image compression and enhancement codec."""

from .coder import BitstreamContainer, compress, decompress, rans_decode, rans_encode
from .core import ImageTensor, Plane, load_image, resize_map, to_grayscale
from .checkpoint import load_checkpoint, save_checkpoint
from .entropy import CdfTableSet, build_cdf_tables, gaussian_likelihood, quantize
from .snr import compute_snr_map, snr_fuse
from .training import TrainConfig, Trainer, train_model
from .transforms import LowLightCodec, ModelConfig

__version__ = "0.1.0"

__all__ = [
    "BitstreamContainer",
    "CdfTableSet",
    "ImageTensor",
    "LowLightCodec",
    "ModelConfig",
    "Plane",
    "TrainConfig",
    "Trainer",
    "build_cdf_tables",
    "compress",
    "compute_snr_map",
    "decompress",
    "gaussian_likelihood",
    "load_checkpoint",
    "load_image",
    "quantize",
    "rans_decode",
    "rans_encode",
    "resize_map",
    "save_checkpoint",
    "snr_fuse",
    "to_grayscale",
    "train_model",
    "__version__",
]
