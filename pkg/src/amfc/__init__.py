"""Accelerated classification by chaining per-layer PCA projections of CNN feature maps."""

__version__ = "0.1.0"

from .chain import AmfcClassifier, AmfcModel, classify, project_chain, project_dataset
from .cnn import CNNClassifier, load_model, save_model, train
from .data import Dataset, load_corpus, make_folds, synth_corpus
from .featurespace import FeatureSpaceTransformer, LayerSpaceBank, build_bank, load_bank, save_bank
from .heads import GaussianNBHead, KNNHead, MLPHead

__all__ = [
    "AmfcClassifier",
    "AmfcModel",
    "CNNClassifier",
    "Dataset",
    "FeatureSpaceTransformer",
    "GaussianNBHead",
    "KNNHead",
    "LayerSpaceBank",
    "MLPHead",
    "build_bank",
    "classify",
    "load_bank",
    "load_corpus",
    "load_model",
    "make_folds",
    "project_chain",
    "project_dataset",
    "save_bank",
    "save_model",
    "synth_corpus",
    "train",
]
