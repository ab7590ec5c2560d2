"""Contrastive, attention-weighted token attributions for transformer text classifiers."""

__version__ = "0.1.0"

from .attribution import AttributionMap, contrast_map
from .corpus import Corpus, TokenSequence, Vocab, encode, load_csv, synth_sentiment
from .encoder import Encoder, EncoderConfig, TrainParams, load_model, save_model, train
from .errors import ContrastCatError
from .evalharness import METHODS, Attributor, evaluate
from .reflib import ReferenceLibrary, build_library, load_library, save_library
from .refine import RefinementConfig, refine, refine_and_aggregate

__all__ = [
    "AttributionMap", "Attributor", "ContrastCatError", "Corpus", "Encoder", "EncoderConfig",
    "METHODS", "ReferenceLibrary", "RefinementConfig", "TokenSequence", "TrainParams", "Vocab",
    "build_library", "contrast_map", "encode", "evaluate", "load_csv", "load_library",
    "load_model", "refine", "refine_and_aggregate", "save_library", "save_model",
    "synth_sentiment", "train",
]
