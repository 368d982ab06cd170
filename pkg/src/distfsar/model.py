"""The trainable recognition model and its checkpoint format.

The model bundles the (frozen or pluggable) dual encoder with the two
knowledge compensators. Checkpoints are a directory of one .npy file per
parameter plus a JSON manifest, which round-trips bit-exactly and carries
the config fingerprint and RNG state.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .config import Config, stable_hash
from .encoders import build_encoder
from .errors import FingerprintMismatchError
from .knowledge import AttributeFeatures
from .skc import SpatialKnowledgeCompensator
from .tkc import TemporalKnowledgeCompensator

CHECKPOINT_VERSION = 1


class RecognitionModel(nn.Module):
    """Dual encoder plus spatial/temporal knowledge compensators."""

    def __init__(self, cfg: Config, dtype: torch.dtype = torch.float32):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.encoder = build_encoder(cfg.encoder, dtype)
        self.skc = SpatialKnowledgeCompensator(cfg.skc, cfg.encoder.feature_dim)
        self.tkc = TemporalKnowledgeCompensator(cfg.tkc, cfg.encoder.feature_dim,
                                                cfg.encoder.frames)
        self.to(dtype)
        if isinstance(self.encoder, nn.Module) and not cfg.encoder.visual_trainable:
            for p in self.encoder.parameters():
                p.requires_grad_(False)

    def clip_representation(self, frames: torch.Tensor, patches: torch.Tensor,
                            attrs: AttributeFeatures | None):
        """Object prototypes (..., T, N, C) and frame prototypes (..., T, C)
        for one encoded clip, conditioned on a class's attribute features.

        ``attrs=None`` skips knowledge injection entirely (the attribute-free
        query-conditioning ablation): patch aggregation and the temporal
        transformer still run.
        """
        if attrs is None:
            protos = self.skc.prototype_self_attention(self.skc.prototypes)
            protos = protos.expand(*patches.shape[:-2], *protos.shape)
            obj = self.skc.patch_aggregate(protos, patches)
            frame = self.tkc.temporal_transformer(frames)
            return obj, frame
        obj = self.skc(patches, attrs.spatial)
        frame = self.tkc(frames, attrs.temporal)
        return obj, frame


def build_model(cfg: Config, dtype: torch.dtype = torch.float32) -> RecognitionModel:
    """Construct with parameter init derived from cfg.train.seed only."""
    with torch.random.fork_rng():
        torch.manual_seed(cfg.train.seed)
        return RecognitionModel(cfg, dtype=dtype)


@dataclass
class Checkpoint:
    model: RecognitionModel
    cfg: Config
    manifest: dict


def save_checkpoint(directory, model: RecognitionModel, cfg: Config,
                    extra: dict | None = None) -> dict:
    directory = os.fspath(directory)
    params_dir = os.path.join(directory, "params")
    os.makedirs(params_dir, exist_ok=True)
    names = []
    for name, tensor in sorted(model.state_dict().items()):
        fname = name.replace(".", "__") + ".npy"
        np.save(os.path.join(params_dir, fname), tensor.detach().cpu().numpy())
        names.append(name)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "config_fingerprint": cfg.fingerprint(),
        "parameters": names,
        "torch_rng_state": torch.get_rng_state().numpy().tobytes().hex(),
    }
    manifest.update(extra or {})
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_checkpoint(directory, dtype: torch.dtype = torch.float32,
                    restore_rng: bool = False) -> Checkpoint:
    directory = os.fspath(directory)
    with open(os.path.join(directory, "manifest.json"), "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise FingerprintMismatchError(
            f"unsupported checkpoint version {manifest.get('format_version')}")
    cfg = Config.from_dict(manifest["config"])
    if cfg.fingerprint() != manifest["config_fingerprint"]:
        raise FingerprintMismatchError("checkpoint config fingerprint mismatch")
    model = RecognitionModel(cfg, dtype=dtype)
    state = {}
    for name in manifest["parameters"]:
        fname = name.replace(".", "__") + ".npy"
        arr = np.load(os.path.join(directory, "params", fname))
        state[name] = torch.as_tensor(arr, dtype=dtype)
    model.load_state_dict(state)
    if restore_rng and "torch_rng_state" in manifest:
        raw = bytes.fromhex(manifest["torch_rng_state"])
        torch.set_rng_state(torch.frombuffer(bytearray(raw), dtype=torch.uint8))
    return Checkpoint(model=model, cfg=cfg, manifest=manifest)


def parameter_digest(model: nn.Module) -> str:
    """Content hash of all parameters, for determinism checks."""
    parts = {name: t.detach().cpu().numpy().tobytes().hex()
             for name, t in sorted(model.state_dict().items())}
    return stable_hash(parts)
