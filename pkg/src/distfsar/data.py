"""Dataset ingestion and the synthetic verification corpus.

Real datasets enter through a JSON manifest (class splits plus clip ids) and
a pluggable decoder. The synthetic backend renders clips of patch-aligned
sprites over phase-colored backgrounds: which sprites appear determines the
spatial channel, the order of the background phases determines the temporal
channel, and classes come in pairs that share sprites but differ in phase
order so order-invariant scorers cannot separate them.
"""
from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .config import Config, stable_hash
from .encoders import VideoClip
from .errors import DegenerateSpecError, SplitOverlapError


# ---------------------------------------------------------------------------
# frame sampling

@dataclass
class SamplingPolicy:
    frames: int
    mode: str = "eval_center_per_segment"  # or "train_random_per_segment"

    def __post_init__(self):
        if self.frames < 1:
            raise ValueError("frames must be >= 1")
        if self.mode not in ("eval_center_per_segment", "train_random_per_segment"):
            raise ValueError(f"unknown sampling mode {self.mode!r}")


def sample_frame_indices(n_frames: int, policy: SamplingPolicy,
                         rng: np.random.Generator | None = None) -> list[int]:
    """One index per segment; segment centers for eval, uniform draws for
    training. Videos shorter than the target length repeat nearest indices."""
    if n_frames < 1:
        raise ValueError("video has no frames")
    t = policy.frames
    indices = []
    for k in range(t):
        lo = (k * n_frames) // t
        hi = ((k + 1) * n_frames) // t
        center = ((2 * k + 1) * n_frames) // (2 * t)
        if policy.mode == "train_random_per_segment" and hi > lo:
            if rng is None:
                raise ValueError("training-mode sampling needs an rng")
            indices.append(int(rng.integers(lo, hi)))
        else:
            indices.append(center)
    return indices


def sample_frames(video: np.ndarray | VideoClip, policy: SamplingPolicy,
                  rng: np.random.Generator | None = None) -> VideoClip:
    frames = video.frames if isinstance(video, VideoClip) else np.asarray(video)
    idx = sample_frame_indices(frames.shape[0], policy, rng)
    clip = VideoClip(frames=frames[idx],
                     class_id=getattr(video, "class_id", -1),
                     source_id=getattr(video, "source_id", ""))
    return clip


# ---------------------------------------------------------------------------
# augmentation

def horizontal_flip(frames: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(frames[:, :, ::-1, :])


def crop(frames: np.ndarray, top: int, left: int, height: int, width: int) -> np.ndarray:
    t, h, w, _ = frames.shape
    if height > h or width > w:
        raise ValueError(f"crop {height}x{width} larger than frame {h}x{w}")
    return np.ascontiguousarray(frames[:, top:top + height, left:left + width, :])


def augment(clip: VideoClip, mode: str, rng: np.random.Generator | None = None,
            crop_area: float = 0.875, jitter: float = 0.1) -> VideoClip:
    """Train mode: clip-consistent flip / random crop / brightness jitter.
    Eval mode: center crop only. All frames of a clip share the transform."""
    frames = clip.frames
    _, h, w, _ = frames.shape
    side = crop_area ** 0.5
    ch, cw = max(1, round(h * side)), max(1, round(w * side))
    if mode == "eval":
        top, left = (h - ch) // 2, (w - cw) // 2
        frames = crop(frames, top, left, ch, cw)
    elif mode == "train":
        if rng is None:
            raise ValueError("training-mode augmentation needs an rng")
        if rng.random() < 0.5:
            frames = horizontal_flip(frames)
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        frames = crop(frames, top, left, ch, cw)
        factor = 1.0 + jitter * (2.0 * rng.random() - 1.0)
        frames = np.clip(frames * factor, 0.0, 1.0).astype(np.float32)
    else:
        raise ValueError(f"unknown augmentation mode {mode!r}")
    return VideoClip(frames=frames, class_id=clip.class_id, source_id=clip.source_id)


# ---------------------------------------------------------------------------
# manifest splits

@dataclass
class DatasetSplit:
    name: str
    classes: list[str]
    clips: dict[str, list[str]] = field(default_factory=dict)


SPLIT_NAMES = ("train", "val", "test")


def parse_manifest(payload: dict) -> dict[str, DatasetSplit]:
    if "splits" not in payload:
        raise ValueError("manifest has no 'splits' section")
    splits: dict[str, DatasetSplit] = {}
    for name in SPLIT_NAMES:
        section = payload["splits"].get(name, {"classes": [], "clips": {}})
        classes = list(section.get("classes", []))
        clips = {k: list(v) for k, v in section.get("clips", {}).items()}
        for label in classes:
            if not clips.get(label):
                raise ValueError(f"split {name!r}: class {label!r} has no clips")
        splits[name] = DatasetSplit(name=name, classes=classes, clips=clips)
    for a, b in itertools.combinations(SPLIT_NAMES, 2):
        overlap = set(splits[a].classes) & set(splits[b].classes)
        if overlap:
            raise SplitOverlapError(
                f"classes {sorted(overlap)} appear in both {a!r} and {b!r}")
    return splits


def load_split(manifest_path, name: str = "train") -> DatasetSplit:
    """Parse and validate the manifest, returning one split."""
    with open(manifest_path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    splits = parse_manifest(payload)
    if name not in splits:
        raise ValueError(f"unknown split {name!r}")
    return splits[name]


_CLIP_DECODER = None


def register_clip_decoder(decoder) -> None:
    """Install the (label, clip_id) -> VideoClip decoder backing manifest datasets."""
    global _CLIP_DECODER
    _CLIP_DECODER = decoder


class ManifestDataset:
    """Real-data ingestion: validated manifest plus a pluggable clip decoder.

    When a sampling policy is set, decoded videos are reduced to the policy's
    frame count on load (training mode additionally needs the caller's rng).
    """

    def __init__(self, payload: dict, sampling: SamplingPolicy | None = None):
        self.splits_by_name = parse_manifest(payload)
        self.sampling = sampling
        self._payload = payload

    def split(self, name: str) -> DatasetSplit:
        return self.splits_by_name[name]

    def clip_ids(self, label: str) -> list[str]:
        for split in self.splits_by_name.values():
            if label in split.clips:
                return list(split.clips[label])
        raise KeyError(f"unknown class {label!r}")

    def load_clip(self, label: str, clip_id: str,
                  rng: np.random.Generator | None = None) -> VideoClip:
        if _CLIP_DECODER is None:
            raise RuntimeError(
                "no clip decoder registered; call register_clip_decoder() with a "
                "video-file reader, or use a synthetic dataset")
        clip = _CLIP_DECODER(label, clip_id)
        if self.sampling is not None and clip.num_frames != self.sampling.frames:
            clip = sample_frames(clip, self.sampling, rng)
        return clip

    def content_hash(self) -> str:
        return stable_hash(self._payload)


# ---------------------------------------------------------------------------
# synthetic generator

SHAPE_WORDS = ["square", "disk", "cross", "stripes", "checker", "ring", "wedge", "dots"]
COLOR_WORDS = ["red", "orange", "yellow", "green", "cyan", "blue", "violet", "magenta"]
PHASE_WORDS = ["dim", "dusky", "medium", "pale", "bright", "glaring"]
FILLER_WORDS = ["plain backdrop", "square grid", "tiled floor", "soft shadow",
                "video border", "empty scene", "still camera", "flat lighting"]


@dataclass
class SyntheticSpec:
    n_classes: int = 10
    objects_per_class: int = 3
    clips_per_class: int = 20
    image_size: int = 32
    frames: int = 8
    noise: float = 0.0
    n_phases: int = 3
    sprite_vocab: int = 7
    n_distractors: int = 1
    bg_variants: int = 3    # per-phase background textures, drawn per frame cell
    grid: int = 4
    train_classes: int = 5
    val_classes: int = 0
    test_classes: int = 5

    def __post_init__(self):
        if self.train_classes + self.val_classes + self.test_classes != self.n_classes:
            raise ValueError("split sizes must sum to n_classes")
        if self.image_size % self.grid != 0:
            raise ValueError("image_size must be divisible by grid")
        if self.objects_per_class + self.n_distractors > self.grid * self.grid:
            raise ValueError("more sprites per frame than grid cells")
        if self.objects_per_class > self.sprite_vocab:
            raise ValueError("objects_per_class exceeds sprite vocabulary")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, raw: dict) -> "SyntheticSpec":
        return cls(**raw)


def _derive_rng(*parts) -> np.random.Generator:
    digest = hashlib.blake2b(":".join(str(p) for p in parts).encode(),
                             digest_size=16).digest()
    return np.random.Generator(np.random.Philox(key=np.frombuffer(digest, np.uint64)))


def _palindromic_lengths(total: int, parts: int) -> list[int]:
    """Split ``total`` into ``parts`` positive lengths, mirror-symmetric when
    possible, so reversing the part order reverses the sequence of lengths."""
    if parts > total:
        raise ValueError("more parts than items")
    lengths = [total // parts] * parts
    rest = total % parts
    i, j = 0, parts - 1
    while rest:
        if i == j:
            lengths[i] += rest
            rest = 0
        elif rest >= 2:
            lengths[i] += 1
            lengths[j] += 1
            rest -= 2
            i, j = i + 1, j - 1
        else:
            lengths[parts // 2] += rest  # odd leftover: middle gets it
            rest = 0
    return lengths


def _shape_mask(kind: int, size: int) -> np.ndarray:
    y, x = np.mgrid[0:size, 0:size]
    cy = cx = (size - 1) / 2.0
    kind = kind % len(SHAPE_WORDS)
    if kind == 0:    # square
        return np.ones((size, size), dtype=bool)
    if kind == 1:    # disk
        return (y - cy) ** 2 + (x - cx) ** 2 <= (size / 2.2) ** 2
    if kind == 2:    # cross
        half = max(1, size // 4)
        return (np.abs(y - cy) < half) | (np.abs(x - cx) < half)
    if kind == 3:    # stripes
        return (y // max(1, size // 4)) % 2 == 0
    if kind == 4:    # checker
        c = max(1, size // 4)
        return ((y // c) + (x // c)) % 2 == 0
    if kind == 5:    # ring
        r = (y - cy) ** 2 + (x - cx) ** 2
        return (r <= (size / 2.2) ** 2) & (r >= (size / 4.0) ** 2)
    if kind == 6:    # wedge
        return x >= y
    return ((y % max(2, size // 3)) < 2) & ((x % max(2, size // 3)) < 2)  # dots


class SyntheticDataset:
    """Deterministic renderer: class identity = (sprite set, phase order)."""

    def __init__(self, spec: SyntheticSpec, seed: int = 0):
        self.spec = spec
        self.seed = seed
        self.labels = [f"action-{c:02d}" for c in range(spec.n_classes)]
        self._sprites = self._build_sprites()
        self._sprite_names = self._build_sprite_names()
        self._phase_levels = self._build_phase_levels()
        self._bg_textures = self._build_bg_textures()
        self._phase_names = [
            f"{PHASE_WORDS[i % len(PHASE_WORDS)]} backdrop stage {i}"
            for i in range(spec.n_phases)]
        self.class_defs = self._build_class_defs()
        self._segment_lengths = _palindromic_lengths(spec.frames, spec.n_phases)
        self._cache: dict[tuple[int, int], np.ndarray] = {}

    # -- class layout -------------------------------------------------------

    def _build_class_defs(self) -> list[dict]:
        """Classes come in pairs: members 2p and 2p+1 share a sprite set but
        run their phases in opposite orders; adjacent pairs reuse the same
        base order so some classes differ in sprites only."""
        spec = self.spec
        perms = list(itertools.permutations(range(spec.n_phases)))
        defs = []
        for c in range(spec.n_classes):
            pair = c // 2
            objects = tuple(sorted(
                (pair * spec.objects_per_class + i) % spec.sprite_vocab
                for i in range(spec.objects_per_class)))
            base = perms[(pair // 2) % len(perms)]
            order = base if c % 2 == 0 else tuple(reversed(base))
            defs.append({"objects": objects, "order": order})
        seen = set()
        for c, d in enumerate(defs):
            key = (d["objects"], d["order"])
            if key in seen:
                raise DegenerateSpecError(
                    f"class {c} duplicates an earlier (objects, order) combination; "
                    f"reduce n_classes or enlarge the vocabularies")
            seen.add(key)
        return defs

    def _build_sprites(self) -> list[np.ndarray]:
        size = self.spec.image_size // self.spec.grid
        sprites = []
        for k in range(self.spec.sprite_vocab):
            rng = _derive_rng("sprite", self.seed, k)
            color = 0.35 + 0.65 * rng.random(3)
            mask = _shape_mask(k, size)
            cell = np.full((size, size, 3), 0.05, dtype=np.float32)
            cell[mask] = color.astype(np.float32)
            sprites.append(cell)
        flat = {s.tobytes() for s in sprites}
        if len(flat) != len(sprites):
            raise DegenerateSpecError("sprite vocabulary collapsed to identical patterns")
        return sprites

    def _build_sprite_names(self) -> list[str]:
        names = []
        for k in range(self.spec.sprite_vocab):
            name = f"{COLOR_WORDS[k % len(COLOR_WORDS)]} {SHAPE_WORDS[k % len(SHAPE_WORDS)]}"
            if name in names:
                name = f"{name} {k}"
            names.append(name)
        return names

    def _build_phase_levels(self) -> list[float]:
        n = self.spec.n_phases
        if n == 1:
            return [0.5]
        return [0.1 + 0.8 * i / (n - 1) for i in range(n)]

    def _build_bg_textures(self) -> list[list[np.ndarray]]:
        """Per phase, a small pool of background cell textures around the
        phase's base level. Cells draw a variant per frame, so clips of the
        same class differ in background composition but share the pool."""
        size = self.spec.image_size // self.spec.grid
        pools = []
        for p, level in enumerate(self._phase_levels):
            pool = []
            for v in range(max(1, self.spec.bg_variants)):
                rng = _derive_rng("bgtex", self.seed, p, v)
                speckle = 0.06 * rng.standard_normal((size, size, 1))
                cell = np.clip(level + speckle, 0.0, 1.0).astype(np.float32)
                pool.append(np.repeat(cell, 3, axis=2))
            pools.append(pool)
        return pools

    # -- rendering ----------------------------------------------------------

    def _render(self, class_idx: int, clip_idx: int) -> np.ndarray:
        spec = self.spec
        rng = _derive_rng("clip", self.seed, class_idx, clip_idx)
        cdef = self.class_defs[class_idx]
        cells = spec.grid * spec.grid
        ps = spec.image_size // spec.grid

        distractor_pool = [k for k in range(spec.sprite_vocab)
                           if k not in cdef["objects"]]
        distractors = list(rng.choice(distractor_pool, size=spec.n_distractors,
                                      replace=False)) if spec.n_distractors else []
        sprites = list(cdef["objects"]) + distractors
        placements = {}
        for phase in cdef["order"]:
            slots = rng.choice(cells, size=len(sprites), replace=False)
            placements[phase] = list(zip(sprites, slots))

        frames = np.empty((spec.frames, spec.image_size, spec.image_size, 3),
                          dtype=np.float32)
        t = 0
        for seg, phase in enumerate(cdef["order"]):
            textures = self._bg_textures[phase]
            for _ in range(self._segment_lengths[seg]):
                canvas = np.empty((spec.image_size, spec.image_size, 3),
                                  dtype=np.float32)
                variant = rng.integers(0, len(textures), size=cells)
                for slot in range(cells):
                    r, c = divmod(slot, spec.grid)
                    canvas[r * ps:(r + 1) * ps, c * ps:(c + 1) * ps] = \
                        textures[int(variant[slot])]
                for sprite, slot in placements[phase]:
                    r, c = divmod(int(slot), spec.grid)
                    canvas[r * ps:(r + 1) * ps, c * ps:(c + 1) * ps] = \
                        self._sprites[sprite]
                frames[t] = canvas
                t += 1
        if spec.noise > 0:
            frames = np.clip(
                frames + rng.normal(0.0, spec.noise, frames.shape).astype(np.float32),
                0.0, 1.0)
        return frames

    # -- dataset interface ---------------------------------------------------

    def classes(self, split: str | None = None) -> list[str]:
        if split is None:
            return list(self.labels)
        return self.split(split).classes

    def split(self, name: str) -> DatasetSplit:
        spec = self.spec
        bounds = {
            "train": (0, spec.train_classes),
            "val": (spec.train_classes, spec.train_classes + spec.val_classes),
            "test": (spec.train_classes + spec.val_classes, spec.n_classes),
        }
        lo, hi = bounds[name]
        classes = self.labels[lo:hi]
        return DatasetSplit(name=name, classes=classes,
                            clips={lb: self.clip_ids(lb) for lb in classes})

    def clip_ids(self, label: str) -> list[str]:
        return [f"{label}/clip-{k:03d}" for k in range(self.spec.clips_per_class)]

    def load_clip(self, label: str, clip_id: str) -> VideoClip:
        class_idx = self.labels.index(label)
        clip_idx = int(clip_id.rsplit("-", 1)[1])
        key = (class_idx, clip_idx)
        if key not in self._cache:
            rendered = self._render(class_idx, clip_idx)
            rendered.setflags(write=False)  # cached clips are shared, immutable
            self._cache[key] = rendered
        return VideoClip(frames=self._cache[key], class_id=class_idx,
                         source_id=clip_id)

    def to_manifest(self) -> dict:
        return {"splits": {name: {
            "classes": self.split(name).classes,
            "clips": self.split(name).clips,
        } for name in SPLIT_NAMES}}

    def content_hash(self) -> str:
        return stable_hash({"spec": self.spec.to_dict(), "seed": self.seed})

    # -- attribute knowledge --------------------------------------------------

    def _spatial_items(self, class_idx: int, count: int) -> list[str]:
        names = [self._sprite_names[o] for o in self.class_defs[class_idx]["objects"]]
        fillers = [w for w in FILLER_WORDS if w.lower() not in
                   {n.lower() for n in names}]
        extra = [f"scene element {j}" for j in range(max(0, count - len(names) - len(fillers)))]
        return (names + fillers + extra)[:count]

    def _temporal_items(self, class_idx: int, count: int) -> list[str]:
        names = [self._phase_names[p] for p in self.class_defs[class_idx]["order"]]
        extra = [f"hold posture step {j}" for j in range(max(0, count - len(names)))]
        return (names + extra)[:count]

    def fixture_responses(self, num_spatial: int, num_temporal: int) -> dict:
        """Canned LLM responses for the fixture client, one per (label, kind)."""
        out = {}
        for c, label in enumerate(self.labels):
            out[label] = {
                "spatial": "; ".join(self._spatial_items(c, num_spatial)),
                "temporal": "; ".join(self._temporal_items(c, num_temporal)),
            }
        return out


def generate_synthetic(spec: SyntheticSpec, seed: int = 0,
                       cfg: Config | None = None):
    """Build the dataset and a matching fixture knowledge base.

    The knowledge base is produced through the normal generation path with a
    fixture client, so its fingerprint matches ``cfg``.
    """
    from .knowledge import FixtureClient, ensure_coverage, new_kb

    cfg = cfg or Config()
    dataset = SyntheticDataset(spec, seed=seed)
    client = FixtureClient(dataset.fixture_responses(
        cfg.knowledge.num_spatial, cfg.knowledge.num_temporal))
    kb = new_kb(cfg)
    failures = ensure_coverage(kb, dataset.labels, client, cfg)
    if failures:
        raise DegenerateSpecError(f"fixture knowledge generation failed: {failures}")
    return dataset, kb
