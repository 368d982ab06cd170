"""Few-shot action recognition with decoupled spatio-temporal attribute
knowledge, dual-level prototype matching and episodic training."""

from .config import Config, load_config, save_config
from .data import SamplingPolicy, SyntheticDataset, SyntheticSpec, generate_synthetic
from .encoders import StubDualEncoder, VideoClip, build_encoder
from .episodic import (Episode, EvalReport, episode_forward, episode_loss,
                       evaluate, sample_episode, train)
from .knowledge import (FixtureClient, HttpChatClient, KnowledgeBase,
                        KnowledgeEntry, build_spatial_prompt,
                        build_temporal_prompt, encode_entry,
                        generate_attributes, load_kb, save_kb)
from .metrics import (SmoothMinConfig, bi_mhm_temporal, cosine_distance,
                      frame_distance_matrix, fuse, match_episode,
                      mean_hausdorff, otam, spatial_metric)
from .model import RecognitionModel, build_model, load_checkpoint, save_checkpoint
from .skc import SpatialKnowledgeCompensator
from .tkc import TemporalKnowledgeCompensator

__version__ = "0.1.0"

__all__ = [
    "Config", "load_config", "save_config",
    "SamplingPolicy", "SyntheticDataset", "SyntheticSpec", "generate_synthetic",
    "StubDualEncoder", "VideoClip", "build_encoder",
    "Episode", "EvalReport", "episode_forward", "episode_loss", "evaluate",
    "sample_episode", "train",
    "FixtureClient", "HttpChatClient", "KnowledgeBase", "KnowledgeEntry",
    "build_spatial_prompt", "build_temporal_prompt", "encode_entry",
    "generate_attributes", "load_kb", "save_kb",
    "SmoothMinConfig", "bi_mhm_temporal", "cosine_distance",
    "frame_distance_matrix", "fuse", "match_episode", "mean_hausdorff",
    "otam", "spatial_metric",
    "RecognitionModel", "build_model", "load_checkpoint", "save_checkpoint",
    "SpatialKnowledgeCompensator", "TemporalKnowledgeCompensator",
]
