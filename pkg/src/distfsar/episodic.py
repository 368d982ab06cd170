"""Episode sampling, the end-to-end forward pass, training and evaluation.

A training step samples an M-way K-shot episode, encodes support and query
clips, injects each candidate class's attribute features (query clips are
scored once per candidate class), matches prototypes and minimizes
cross-entropy over the negated fused distances.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F_nn

from .config import Config
from .data import augment, _derive_rng
from .encoders import VideoClip
from .errors import DivergenceError, InsufficientDataError
from .knowledge import AttributeFeatures, KnowledgeBase, encode_entry
from .metrics import cosine_distance, match_episode
from .model import RecognitionModel, build_model


@dataclass
class Episode:
    class_labels: list[str]
    support_clips: list[list[VideoClip]]   # per class, K clips each
    query_clips: list[VideoClip]
    query_labels: list[int]                # indices into class_labels

    def validate(self, shot: int) -> "Episode":
        if any(len(clips) != shot for clips in self.support_clips):
            raise ValueError("every support class must hold exactly K clips")
        support_ids = {c.source_id for clips in self.support_clips for c in clips}
        query_ids = {c.source_id for c in self.query_clips}
        if support_ids & query_ids:
            raise ValueError(f"support/query overlap: {support_ids & query_ids}")
        if any(not 0 <= lb < len(self.class_labels) for lb in self.query_labels):
            raise ValueError("query label outside the episode's class range")
        return self


def _allocate_queries(n_query: int, way: int, rng: np.random.Generator) -> list[int]:
    alloc = [n_query // way] * way
    for idx in rng.choice(way, size=n_query % way, replace=False):
        alloc[int(idx)] += 1
    return alloc


def sample_episode(dataset, classes: list[str], way: int, shot: int,
                   n_query: int, rng: np.random.Generator) -> Episode:
    """Uniform class and clip sampling without replacement; queries are
    spread as evenly as possible over the sampled classes."""
    if len(classes) < way:
        raise InsufficientDataError(
            f"need {way} classes, split holds {len(classes)}")
    order = rng.choice(len(classes), size=way, replace=False)
    chosen = [classes[int(i)] for i in order]
    alloc = _allocate_queries(n_query, way, rng)

    support, queries, query_labels = [], [], []
    for ci, label in enumerate(chosen):
        ids = dataset.clip_ids(label)
        need = shot + alloc[ci]
        if len(ids) < need:
            raise InsufficientDataError(
                f"class {label!r} holds {len(ids)} clips, episode needs {need}")
        picked = rng.choice(len(ids), size=need, replace=False)
        clips = [dataset.load_clip(label, ids[int(i)]) for i in picked]
        support.append(clips[:shot])
        for clip in clips[shot:]:
            queries.append(clip)
            query_labels.append(ci)
    shuffle = rng.permutation(len(queries))
    episode = Episode(
        class_labels=chosen,
        support_clips=support,
        query_clips=[queries[int(i)] for i in shuffle],
        query_labels=[query_labels[int(i)] for i in shuffle],
    )
    return episode.validate(shot)


def aggregate_support(shot_reps: list[tuple[torch.Tensor, torch.Tensor]]):
    """Elementwise mean of the K per-clip prototype pairs (identity for K=1)."""
    if len(shot_reps) == 1:
        return shot_reps[0]
    obj = torch.stack([o for o, _ in shot_reps]).mean(dim=0)
    frame = torch.stack([f for _, f in shot_reps]).mean(dim=0)
    return obj, frame


class EpisodeRunner:
    """Shared encode/attribute caches plus the episode forward pass.

    Caching is only safe while clip content is a pure function of its
    source id, so the trainer bypasses it when augmentation is on.
    ``eval_augment`` applies the deterministic eval-time transform (center
    crop) before encoding, for checkpoints trained with augmentation.
    """

    def __init__(self, model: RecognitionModel, kb: KnowledgeBase, cfg: Config,
                 use_cache: bool = True, eval_augment: bool = False):
        self.model = model
        self.kb = kb
        self.cfg = cfg
        self.use_cache = use_cache
        self.eval_augment = eval_augment
        self._clip_cache: dict[str, tuple[torch.Tensor, torch.Tensor]] = {}
        self._attr_cache: dict[str, AttributeFeatures] = {}

    def encode_clip(self, clip: VideoClip) -> tuple[torch.Tensor, torch.Tensor]:
        key = clip.source_id
        if self.use_cache and key and key in self._clip_cache:
            return self._clip_cache[key]
        if self.eval_augment:
            clip = augment(clip, "eval")
        frames, patches = self.model.encoder.encode_video(clip)
        out = (frames.values, patches.values)
        if self.use_cache and key:
            self._clip_cache[key] = out
        return out

    def class_attrs(self, label: str) -> AttributeFeatures:
        if label not in self._attr_cache:
            self._attr_cache[label] = encode_entry(self.kb.get(label),
                                                   self.model.encoder)
        return self._attr_cache[label]

    def forward(self, episode: Episode) -> torch.Tensor:
        """Logits (n_query, M) for one episode."""
        cfg = self.cfg
        labels = episode.class_labels
        spatial = torch.stack([self.class_attrs(lb).spatial for lb in labels])
        temporal = torch.stack([self.class_attrs(lb).temporal for lb in labels])
        way = len(labels)

        per_shot: list[list[tuple[torch.Tensor, torch.Tensor]]] = []
        class_reps = []
        for ci in range(way):
            frames = torch.stack([self.encode_clip(c)[0] for c in episode.support_clips[ci]])
            patches = torch.stack([self.encode_clip(c)[1] for c in episode.support_clips[ci]])
            k = frames.shape[0]
            attrs = AttributeFeatures(
                spatial=spatial[ci].expand(k, *spatial.shape[-2:]),
                temporal=temporal[ci].expand(k, *temporal.shape[-2:]))
            obj, frame = self.model.clip_representation(frames, patches, attrs)
            shots = [(obj[s], frame[s]) for s in range(k)]
            per_shot.append(shots)
            class_reps.append(aggregate_support(shots))

        conditioned = cfg.skc.query_conditioning == "candidate_class"
        query_reps = []
        for clip in episode.query_clips:
            frames, patches = self.encode_clip(clip)
            if conditioned:
                fb = frames.unsqueeze(0).expand(way, *frames.shape)
                pb = patches.unsqueeze(0).expand(way, *patches.shape)
                obj, frame = self.model.clip_representation(
                    fb, pb, AttributeFeatures(spatial=spatial, temporal=temporal))
                query_reps.append([(obj[c], frame[c]) for c in range(way)])
            else:
                query_reps.append(self.model.clip_representation(frames, patches, None))

        if cfg.train.shot_agg == "mean_scores" and cfg.train.shot > 1:
            shots = len(per_shot[0])
            stacked = torch.stack([
                match_episode(query_reps, [per_shot[c][s] for c in range(way)],
                              cfg.metric)
                for s in range(shots)])
            return stacked.mean(dim=0)
        return match_episode(query_reps, class_reps, cfg.metric)


def episode_forward(episode: Episode, model: RecognitionModel,
                    kb: KnowledgeBase, cfg: Config) -> torch.Tensor:
    return EpisodeRunner(model, kb, cfg).forward(episode)


def episode_loss(logits: torch.Tensor, labels) -> torch.Tensor:
    """Mean cross-entropy of softmax(logits) against the query labels."""
    target = torch.as_tensor(labels, dtype=torch.long, device=logits.device)
    return F_nn.cross_entropy(logits, target)


def _accuracy(logits: torch.Tensor, labels) -> float:
    target = torch.as_tensor(labels, dtype=torch.long)
    return float((logits.argmax(dim=1) == target).double().mean())


def episode_breakdown(runner: EpisodeRunner, episode: Episode) -> list[dict]:
    """Per-query diagnostics: per-class spatial/temporal/fused distances, the
    chosen class, and the frames-to-attributes attention weights under the
    chosen class's conditioning. Support shots are prototype-averaged."""
    from .metrics import score_pair

    cfg = runner.cfg
    labels = episode.class_labels
    class_reps = []
    for ci in range(len(labels)):
        shots = []
        for clip in episode.support_clips[ci]:
            frames, patches = runner.encode_clip(clip)
            shots.append(runner.model.clip_representation(
                frames, patches, runner.class_attrs(labels[ci])))
        class_reps.append(aggregate_support(shots))

    conditioned = cfg.skc.query_conditioning == "candidate_class"
    out = []
    with torch.no_grad():
        for qi, clip in enumerate(episode.query_clips):
            frames, patches = runner.encode_clip(clip)
            rows = []
            for ci, label in enumerate(labels):
                attrs = runner.class_attrs(label) if conditioned else None
                obj, frame = runner.model.clip_representation(frames, patches, attrs)
                score = score_pair(obj, frame, class_reps[ci][0], class_reps[ci][1],
                                   cfg.metric)
                rows.append({"class": label, "spatial": score.spatial,
                             "temporal": score.temporal, "fused": score.fused})
            chosen = min(range(len(rows)), key=lambda c: rows[c]["fused"])
            attrs = runner.class_attrs(labels[chosen])
            fused_frames = runner.model.tkc(
                frames, attrs.temporal, return_attention=True)
            out.append({
                "query_index": qi,
                "true_class": labels[episode.query_labels[qi]],
                "chosen_class": labels[chosen],
                "distances": rows,
                "attention": fused_frames[1].cpu().numpy(),
                "attribute_strings": runner.kb.get(labels[chosen]).temporal_attributes,
            })
    return out


# ---------------------------------------------------------------------------
# scorers (all share the signature: (episode, rng) -> logits)

def model_scorer(runner: EpisodeRunner):
    def score(episode: Episode, rng: np.random.Generator) -> torch.Tensor:
        with torch.no_grad():
            return runner.forward(episode)
    return score


def oracle_scorer(episode: Episode, rng: np.random.Generator) -> torch.Tensor:
    logits = torch.full((len(episode.query_clips), len(episode.class_labels)), -1e6)
    for i, lb in enumerate(episode.query_labels):
        logits[i, lb] = 0.0
    return logits


def random_scorer(episode: Episode, rng: np.random.Generator) -> torch.Tensor:
    return torch.as_tensor(rng.standard_normal(
        (len(episode.query_clips), len(episode.class_labels))))


def frame_mean_scorer(encoder):
    """Baseline: cosine distance between time-averaged frame features."""
    cache: dict[str, torch.Tensor] = {}

    def video_vector(clip: VideoClip) -> torch.Tensor:
        if clip.source_id and clip.source_id in cache:
            return cache[clip.source_id]
        frames, _ = encoder.encode_video(clip)
        vec = frames.values.mean(dim=0)
        if clip.source_id:
            cache[clip.source_id] = vec
        return vec

    def score(episode: Episode, rng: np.random.Generator) -> torch.Tensor:
        class_vecs = torch.stack([
            torch.stack([video_vector(c) for c in clips]).mean(dim=0)
            for clips in episode.support_clips])
        rows = []
        for clip in episode.query_clips:
            q = video_vector(clip)
            rows.append(-cosine_distance(q.expand_as(class_vecs), class_vecs))
        return torch.stack(rows)

    return score


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainResult:
    model: RecognitionModel
    losses: list[float] = field(default_factory=list)
    train_accuracy: list[float] = field(default_factory=list)
    episodes: int = 0


def train(cfg: Config, dataset, kb: KnowledgeBase,
          log_every: int = 0) -> TrainResult:
    """Episodic gradient training on the dataset's train split."""
    tr = cfg.train
    torch.manual_seed(tr.seed)
    model = build_model(cfg)
    runner = EpisodeRunner(model, kb, cfg, use_cache=not tr.augment)
    classes = dataset.split("train").classes
    missing = kb.covers(classes)
    if missing:
        from .errors import KnowledgeMissError
        raise KnowledgeMissError(f"knowledge base lacks entries for {missing}")

    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=tr.lr)
    total = tr.episodes_per_epoch * tr.epochs
    milestones = sorted({max(1, math.ceil(total * m)) for m in tr.milestones})
    scheduler = torch.optim.lr_scheduler.MultiStepLR(
        optimizer, milestones=milestones, gamma=tr.lr_decay)

    result = TrainResult(model=model)
    for idx in range(total):
        rng = _derive_rng("train-episode", tr.seed, idx)
        episode = sample_episode(dataset, classes, tr.way, tr.shot,
                                 tr.train_queries, rng)
        if tr.augment:
            episode = Episode(
                class_labels=episode.class_labels,
                support_clips=[[augment(c, "train", rng) for c in clips]
                               for clips in episode.support_clips],
                query_clips=[augment(c, "train", rng) for c in episode.query_clips],
                query_labels=episode.query_labels,
            )
        logits = runner.forward(episode)
        loss = episode_loss(logits, episode.query_labels)
        if not torch.isfinite(loss):
            raise DivergenceError(
                f"training loss became non-finite at episode {idx}",
                diagnostics={"episode": idx, "recent_losses": result.losses[-10:]})
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        scheduler.step()
        result.losses.append(float(loss.detach()))
        result.train_accuracy.append(_accuracy(logits.detach(), episode.query_labels))
        result.episodes = idx + 1
        if log_every and (idx + 1) % log_every == 0:
            window = result.train_accuracy[-log_every:]
            print(f"episode {idx + 1}/{total} loss={result.losses[-1]:.4f} "
                  f"acc={sum(window) / len(window):.3f}")
    return result


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class EvalReport:
    n_episodes: int
    mean_accuracy: float
    ci95_half_width: float
    per_episode_accuracy: list[float]
    seed: int
    split: str
    config_fingerprint: str
    scorer: str = "model"

    def to_dict(self) -> dict:
        return {
            "n_episodes": self.n_episodes,
            "mean_accuracy": self.mean_accuracy,
            "ci95_half_width": self.ci95_half_width,
            "per_episode_accuracy": self.per_episode_accuracy,
            "seed": self.seed,
            "split": self.split,
            "config_fingerprint": self.config_fingerprint,
            "scorer": self.scorer,
        }


def evaluate(scorer, dataset, split: str, n_episodes: int, seed: int,
             cfg: Config, workers: int = 1, scorer_name: str = "model") -> EvalReport:
    """Accuracy with a 95% confidence interval over sampled episodes.

    Episodes are derived from (seed, index), so results do not depend on the
    worker count; no parameters are updated.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    classes = dataset.split(split).classes
    tr = cfg.train

    def run_one(idx: int) -> float:
        rng = _derive_rng("eval-episode", seed, idx)
        episode = sample_episode(dataset, classes, tr.way, tr.shot,
                                 tr.eval_queries, rng)
        with torch.no_grad():
            logits = scorer(episode, rng)
        return _accuracy(logits, episode.query_labels)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            accs = list(pool.map(run_one, range(n_episodes)))
    else:
        accs = [run_one(i) for i in range(n_episodes)]

    mean = sum(accs) / len(accs)
    if len(accs) > 1:
        var = sum((a - mean) ** 2 for a in accs) / (len(accs) - 1)
        half = 1.96 * math.sqrt(var / len(accs))
    else:
        half = float("nan")
    return EvalReport(
        n_episodes=n_episodes, mean_accuracy=mean, ci95_half_width=half,
        per_episode_accuracy=accs, seed=seed, split=split,
        config_fingerprint=cfg.fingerprint(), scorer=scorer_name)
