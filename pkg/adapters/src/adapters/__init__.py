"""Model adapters that turn image folders into engine-ready artifacts.

Every public operation consumes a directory of images (or an engine
matrix file) and emits one of the engine's on-disk formats, so the two
packages only meet at those files.
"""

from .autoencoders import AE_KINDS, ae_scores, reconstruction_mse, train_ae
from .backbones import BACKBONES, extract_embeddings
from .corr_cnn import cnn_scores
from .detector import detect_boxes, filter_boxes
from .difficulty import difficulty_scores, fit_difficulty, load_difficulty, save_difficulty
from .errors import (
    AdapterError,
    MissingTargets,
    MissingWeights,
    NoUsableImages,
    UndecodableImage,
)
from .vit import vit_scores

__all__ = [
    "AE_KINDS",
    "AdapterError",
    "BACKBONES",
    "MissingTargets",
    "MissingWeights",
    "NoUsableImages",
    "UndecodableImage",
    "ae_scores",
    "cnn_scores",
    "detect_boxes",
    "difficulty_scores",
    "extract_embeddings",
    "filter_boxes",
    "fit_difficulty",
    "load_difficulty",
    "reconstruction_mse",
    "save_difficulty",
    "train_ae",
    "vit_scores",
]
