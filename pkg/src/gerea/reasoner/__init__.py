from .ensemble import ensemble_vote, vote_counts
from .estimator import FiDReader, ReaderInput, SeedEnsemble
from .model import EncodedExample, FiDModel, T5FiD, build_model, encode_example, sequence_nll
from .passages import ReformattedPassage, WordTokenizer, passage_template_hash, reformat_inputs
from .training import TrainConfig, train
from .visual import VISUAL_ENCODERS, VISUAL_SHAPES, SyntheticVisualEncoder, VisualFeature

__all__ = [
    "EncodedExample", "FiDModel", "FiDReader", "ReaderInput", "ReformattedPassage", "SeedEnsemble",
    "SyntheticVisualEncoder", "T5FiD", "TrainConfig", "VISUAL_ENCODERS", "VISUAL_SHAPES", "VisualFeature",
    "WordTokenizer", "build_model", "encode_example", "ensemble_vote", "passage_template_hash",
    "reformat_inputs", "sequence_nll", "train", "vote_counts",
]
