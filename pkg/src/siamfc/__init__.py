"""Fully-convolutional Siamese similarity tracking toolkit."""

from .curation import BoundingBox, CropSpec, CuratedDataset, crop_scale, curate, sample_pair
from .evalbench import SuccessCurve, VotResult, iou, ope, vot_run
from .model_io import load_model, save_model
from .net import EmbeddingNet, build_net, init_params, score
from .ops import ConvSpec, ScoreMap
from .synth import SynthConfig, gen_dataset, gen_sequence
from .tracker import TrackerConfig, TrackerState, track
from .training import LabelMap, TrainConfig, logistic_loss, make_label_map, map_loss, train

__version__ = "0.1.0"

__all__ = [
    "BoundingBox",
    "ConvSpec",
    "CropSpec",
    "CuratedDataset",
    "EmbeddingNet",
    "LabelMap",
    "ScoreMap",
    "SuccessCurve",
    "SynthConfig",
    "TrackerConfig",
    "TrackerState",
    "TrainConfig",
    "VotResult",
    "build_net",
    "crop_scale",
    "curate",
    "gen_dataset",
    "gen_sequence",
    "init_params",
    "iou",
    "load_model",
    "logistic_loss",
    "make_label_map",
    "map_loss",
    "ope",
    "sample_pair",
    "save_model",
    "score",
    "track",
    "train",
    "vot_run",
]
