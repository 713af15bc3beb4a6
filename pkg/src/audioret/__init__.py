"""Audio-text retrieval with cross-modal embedding refinement, hybrid loss and attention pooling."""
from .audio import ChunkSet, PreprocessConfig, SnrSpec, ToyEncoder, Waveform, chunk, encode_clip, mix_noise, remove_silence
from .data import RetrievalData, SyntheticDatasetSpec, load_manifest, synthetic_dataset
from .errors import AudioRetError, ConfigError, DataError, NumericError, UsageError
from .objective import LossWeights, hybrid_loss
from .refinement import RefinerConfig, RefinerParams, embed_single, refine_pair
from .retrieval import EmbeddingIndex, map_at_k, recall_at_k, search, wilcoxon_signed_rank
from .train import Checkpoint, TrainConfig, ablate, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "AudioRetError", "Checkpoint", "ChunkSet", "ConfigError", "DataError", "EmbeddingIndex", "LossWeights",
    "NumericError", "PreprocessConfig", "RefinerConfig", "RefinerParams", "RetrievalData", "SnrSpec",
    "SyntheticDatasetSpec", "ToyEncoder", "TrainConfig", "UsageError", "Waveform", "ablate", "chunk",
    "embed_single", "encode_clip", "evaluate", "hybrid_loss", "load_manifest", "map_at_k", "mix_noise",
    "recall_at_k", "refine_pair", "remove_silence", "search", "synthetic_dataset", "train",
    "wilcoxon_signed_rank",
]
