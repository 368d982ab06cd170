"""Visual and text encoders.

The default backend is a deterministic stub: every patch (or attribute
string) is embedded by seeding a counter-based PRNG from a stable hash of
its bytes and drawing a unit-normalized vector. Equal content maps to equal
embeddings, any changed byte maps to an unrelated embedding, and no
pretrained weights are needed anywhere in the test suite.

A real dual-encoder backend plugs in through ``register_pretrained_loader``;
only the adapter surface ships here.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np
import torch

from .config import EncoderConfig
from .errors import ConfigError, DistFsarError


@dataclass
class VideoClip:
    """T RGB frames in [0,1], shape (T, H, W, 3)."""
    frames: np.ndarray
    class_id: int = -1
    source_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ValueError(f"frames must be (T, H, W, 3), got {self.frames.shape}")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class FrameFeatures:
    """Frame-level class-token features, shape (T, C)."""
    values: torch.Tensor


@dataclass
class PatchTokens:
    """Per-frame patch tokens, shape (T, P, C)."""
    values: torch.Tensor


@dataclass
class TextEmbedding:
    """A single C-dimensional text feature."""
    values: torch.Tensor


class DualEncoder(Protocol):
    """Contract every backend satisfies."""

    def encode_video(self, clip: VideoClip) -> tuple[FrameFeatures, PatchTokens]: ...

    def encode_text(self, text: str) -> TextEmbedding: ...

    def text_parameter_snapshot(self) -> list[np.ndarray]: ...


def _hash_to_unit_vector(payload: bytes, dim: int) -> np.ndarray:
    digest = hashlib.blake2b(payload, digest_size=16).digest()
    key = np.frombuffer(digest, dtype=np.uint64)
    rng = np.random.Generator(np.random.Philox(key=key))
    vec = rng.standard_normal(dim)
    norm = np.linalg.norm(vec)
    if norm == 0.0:  # standard normal draw of dim >= 1 is never exactly zero
        vec[0] = 1.0
        norm = 1.0
    return vec / norm


class StubDualEncoder:
    """Content-addressed embeddings; pure function of (config, input bytes).

    Patch tokens: one unit vector per spatial patch, keyed by the patch's
    pixel bytes. Frame features: the unit-normalized mean of that frame's
    patch tokens, so a frame embedding reflects patch composition.
    """

    def __init__(self, cfg: EncoderConfig, dtype: torch.dtype = torch.float32):
        grid = math.isqrt(cfg.patches)
        if grid * grid != cfg.patches:
            raise ConfigError(f"stub backend needs a square patch count, got {cfg.patches}")
        self.cfg = cfg
        self.grid = grid
        self.dtype = dtype
        self._salt = f"stub-v1:{cfg.seed}:{cfg.feature_dim}".encode("utf-8")

    def _patch_embedding(self, patch: np.ndarray) -> np.ndarray:
        payload = self._salt + b":patch:" + np.ascontiguousarray(patch, dtype=np.float32).tobytes()
        return _hash_to_unit_vector(payload, self.cfg.feature_dim)

    def encode_video(self, clip: VideoClip) -> tuple[FrameFeatures, PatchTokens]:
        T, C, P = self.cfg.frames, self.cfg.feature_dim, self.cfg.patches
        if clip.num_frames != T:
            raise ValueError(f"expected {T} frames, got {clip.num_frames}")
        if not np.isfinite(clip.frames).all():
            raise ValueError("clip contains non-finite pixel values")
        tokens = np.empty((T, P, C), dtype=np.float64)
        for t in range(T):
            rows = np.array_split(clip.frames[t], self.grid, axis=0)
            p = 0
            for band in rows:
                for cell in np.array_split(band, self.grid, axis=1):
                    tokens[t, p] = self._patch_embedding(cell)
                    p += 1
        frames = tokens.mean(axis=1)
        frames /= np.linalg.norm(frames, axis=1, keepdims=True)
        return (FrameFeatures(torch.as_tensor(frames, dtype=self.dtype)),
                PatchTokens(torch.as_tensor(tokens, dtype=self.dtype)))

    def encode_text(self, text: str) -> TextEmbedding:
        if not text:
            raise ValueError("cannot encode an empty string")
        payload = self._salt + b":text:" + text.encode("utf-8")
        vec = _hash_to_unit_vector(payload, self.cfg.feature_dim)
        return TextEmbedding(torch.as_tensor(vec, dtype=self.dtype))

    def text_parameter_snapshot(self) -> list[np.ndarray]:
        return []  # the stub text encoder has no parameters


PretrainedLoader = Callable[[str, EncoderConfig], DualEncoder]
_PRETRAINED_LOADER: PretrainedLoader | None = None


def register_pretrained_loader(loader: PretrainedLoader) -> None:
    """Install the factory used by ``encoder.backend = "pretrained"``."""
    global _PRETRAINED_LOADER
    _PRETRAINED_LOADER = loader


def build_encoder(cfg: EncoderConfig, dtype: torch.dtype = torch.float32) -> DualEncoder:
    if cfg.backend == "stub":
        return StubDualEncoder(cfg, dtype=dtype)
    if cfg.backend == "pretrained":
        if _PRETRAINED_LOADER is None:
            raise DistFsarError(
                "no pretrained backend registered; call register_pretrained_loader() "
                "with a loader for your weights"
            )
        if not cfg.weights_path:
            raise ConfigError("pretrained backend requires encoder.weights_path")
        return _PRETRAINED_LOADER(cfg.weights_path, cfg)
    raise ConfigError(f"unknown encoder backend {cfg.backend!r}")
