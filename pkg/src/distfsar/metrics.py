"""Support-query matching metrics.

Spatial score: bidirectional mean Hausdorff distance between per-frame
object prototype sets, reduced over frames by best-match averaging in both
directions. Temporal score: either an ordered alignment DP over the frame
distance matrix (default) or the same Hausdorff-style reduction applied at
frame level. The fused score D = D_t + alpha * D_s, negated, serves as the
classification logit.

All functions are pure and operate on torch tensors; leading batch
dimensions are supported everywhere.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .config import MetricConfig
from .errors import ZeroVectorError


@dataclass
class SmoothMinConfig:
    """Soft-minimum settings for the alignment DP: hard min, or -lam*logsumexp."""
    lam: float = 0.1
    hard: bool = False

    def validate(self) -> "SmoothMinConfig":
        if not self.hard and self.lam <= 0:
            raise ValueError("smoothing temperature must be > 0 in smooth mode")
        return self


@dataclass
class MatchScore:
    """One support-query comparison; invariant: fused = temporal + alpha * spatial."""
    spatial: float
    temporal: float
    fused: float
    alpha: float


def _normalize_rows(x: torch.Tensor, what: str) -> torch.Tensor:
    norms = torch.linalg.vector_norm(x, dim=-1, keepdim=True)
    if (norms == 0).any():
        raise ZeroVectorError(f"{what} contains a zero-norm vector")
    return x / norms


def cosine_distance(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """1 - cos(u, v), in [0, 2]."""
    nu = _normalize_rows(u, "first argument")
    nv = _normalize_rows(v, "second argument")
    return 1.0 - (nu * nv).sum(dim=-1)


def pairwise_distances(a: torch.Tensor, b: torch.Tensor,
                       distance: str = "cosine") -> torch.Tensor:
    """All-pairs distances between row sets a (..., n, C) and b (..., m, C)."""
    if distance == "cosine":
        na = _normalize_rows(a, "first set")
        nb = _normalize_rows(b, "second set")
        return 1.0 - na @ nb.transpose(-1, -2)
    if distance == "euclidean":
        return torch.cdist(a, b)
    raise ValueError(f"unknown distance {distance!r}")


def mean_hausdorff(a: torch.Tensor, b: torch.Tensor, distance: str = "cosine",
                   literal_alg1: bool = False) -> torch.Tensor:
    """Bidirectional mean Hausdorff distance between two vector sets.

    Each direction averages the nearest-neighbour distance of every member;
    ``literal_alg1`` sums instead of averaging (a constant factor for fixed
    set sizes).
    """
    if a.shape[-2] == 0 or b.shape[-2] == 0:
        raise ValueError("sets must be nonempty")
    d = pairwise_distances(a, b, distance)
    reduce = torch.sum if literal_alg1 else torch.mean
    forward = reduce(d.min(dim=-1).values, dim=-1)
    backward = reduce(d.min(dim=-2).values, dim=-1)
    return forward + backward


def hausdorff_frame_matrix(q: torch.Tensor, s: torch.Tensor,
                           distance: str = "cosine",
                           literal_alg1: bool = False) -> torch.Tensor:
    """Frame-pair set distances for prototype tensors (..., T, N, C).

    Entry (i, j) is the mean Hausdorff distance between query frame i's and
    support frame j's prototype sets.
    """
    d = pairwise_distances(q.unsqueeze(-3), s.unsqueeze(-4), distance)
    # d: (..., T_q, T_s, N_q, N_s)
    reduce = torch.sum if literal_alg1 else torch.mean
    forward = reduce(d.min(dim=-1).values, dim=-1)
    backward = reduce(d.min(dim=-2).values, dim=-1)
    return forward + backward


def _best_match_over_frames(d: torch.Tensor) -> torch.Tensor:
    """(1/T) sum_i min_j d_ij + (1/T) sum_j min_i d_ij for (..., T_q, T_s)."""
    return d.min(dim=-1).values.mean(dim=-1) + d.min(dim=-2).values.mean(dim=-1)


def spatial_metric(q: torch.Tensor, s: torch.Tensor, distance: str = "cosine",
                   literal_alg1: bool = False) -> torch.Tensor:
    """Object-prototype set matching between videos, (..., T, N, C) inputs."""
    return _best_match_over_frames(hausdorff_frame_matrix(q, s, distance, literal_alg1))


def frame_distance_matrix(q: torch.Tensor, s: torch.Tensor,
                          distance: str = "cosine") -> torch.Tensor:
    """Pairwise frame distances for prototype matrices (..., T, C)."""
    return pairwise_distances(q, s, distance)


def bi_mhm_temporal(d: torch.Tensor) -> torch.Tensor:
    """Order-invariant temporal score: best-match averaging of a (..., T_q, T_s) matrix."""
    return _best_match_over_frames(d)


def _soft_min(stacked: torch.Tensor, cfg: SmoothMinConfig) -> torch.Tensor:
    """Minimum over dim 0, either hard or -lam * log sum exp(-x / lam)."""
    if cfg.hard:
        return stacked.min(dim=0).values
    return -cfg.lam * torch.logsumexp(-stacked / cfg.lam, dim=0)


def _otam_one_direction(d: torch.Tensor, cfg: SmoothMinConfig) -> torch.Tensor:
    """Alignment cost over d (..., T_q, T_s) with zero-padded boundary columns.

    Paths run from the top-left padded cell to the bottom-right padded cell;
    diagonal and vertical moves are always allowed, horizontal moves only
    along the first row and into the boundary columns, so inner support
    columns are all traversed while leading/trailing query frames may ride
    the free boundaries.
    """
    t_q, t_s = d.shape[-2], d.shape[-1]
    zeros = d.new_zeros(d.shape[:-1] + (1,))
    padded = torch.cat([zeros, d, zeros], dim=-1)  # (..., T_q, T_s + 2)
    row = torch.cumsum(padded[..., 0, :], dim=-1)
    for i in range(1, t_q):
        cost = padded[..., i, :]
        inner = cost[..., 1:t_s + 1] + _soft_min(
            torch.stack([row[..., 0:t_s], row[..., 1:t_s + 1]]), cfg)
        left = row[..., 0:1]  # boundary column is free: only the vertical move
        last = _soft_min(
            torch.stack([row[..., t_s], row[..., t_s + 1], inner[..., -1]]), cfg)
        row = torch.cat([left, inner, last.unsqueeze(-1)], dim=-1)
    return row[..., -1]


def otam(d: torch.Tensor, cfg: SmoothMinConfig | None = None) -> torch.Tensor:
    """Ordered temporal alignment score, averaged over both directions."""
    cfg = (cfg or SmoothMinConfig()).validate()
    forward = _otam_one_direction(d, cfg)
    backward = _otam_one_direction(d.transpose(-1, -2), cfg)
    return 0.5 * (forward + backward)


def fuse(temporal: torch.Tensor, spatial: torch.Tensor, alpha: float):
    """Fused support-query distance: temporal + alpha * spatial."""
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    return temporal + alpha * spatial


def temporal_score(q_frames: torch.Tensor, s_frames: torch.Tensor,
                   cfg: MetricConfig) -> torch.Tensor:
    """Configured temporal metric on the frame distance matrix."""
    d = frame_distance_matrix(q_frames, s_frames, cfg.distance)
    if cfg.temporal == "otam":
        return otam(d, SmoothMinConfig(lam=cfg.otam_lambda, hard=cfg.otam_hard))
    if cfg.temporal == "bi_mhm":
        return bi_mhm_temporal(d)
    raise ValueError(f"unknown temporal metric {cfg.temporal!r}")


def score_pair(q_obj: torch.Tensor, q_frames: torch.Tensor,
               s_obj: torch.Tensor, s_frames: torch.Tensor,
               cfg: MetricConfig) -> MatchScore:
    """Full spatial/temporal/fused breakdown for one support-query pair.

    The fused value is composed from the float components, so the
    ``fused = temporal + alpha * spatial`` identity holds exactly.
    """
    d_s = float(spatial_metric(q_obj, s_obj, cfg.distance, cfg.literal_alg1))
    d_t = float(temporal_score(q_frames, s_frames, cfg))
    return MatchScore(spatial=d_s, temporal=d_t,
                      fused=float(fuse(torch.tensor(d_t, dtype=torch.float64),
                                       torch.tensor(d_s, dtype=torch.float64),
                                       cfg.alpha)),
                      alpha=cfg.alpha)


def _stack_query_reps(query_reps, num_classes: int):
    """Normalize query representations to per-class (n_q, M, ...) tensors."""
    obj_rows, frame_rows = [], []
    for rep in query_reps:
        if isinstance(rep, (list, tuple)) and rep and isinstance(rep[0], (list, tuple)):
            per_class = list(rep)
            if len(per_class) != num_classes:
                raise ValueError("per-class query representation count mismatch")
        else:
            per_class = [rep] * num_classes
        obj_rows.append(torch.stack([p for p, _ in per_class]))
        frame_rows.append(torch.stack([f for _, f in per_class]))
    return torch.stack(obj_rows), torch.stack(frame_rows)


def match_episode(query_reps, class_reps, cfg: MetricConfig) -> torch.Tensor:
    """Logits (n_query, M): minus the fused distance per (query, class) pair.

    ``query_reps``: per query either one ``(obj_prototypes, frame_prototypes)``
    pair or a length-M sequence of such pairs when the query representation is
    conditioned on the candidate class. ``class_reps``: one aggregated pair
    per support class.
    """
    num_classes = len(class_reps)
    q_obj, q_frames = _stack_query_reps(query_reps, num_classes)
    s_obj = torch.stack([p for p, _ in class_reps])       # (M, T, N, C)
    s_frames = torch.stack([f for _, f in class_reps])    # (M, T, C)
    s_obj = s_obj.unsqueeze(0).expand(q_obj.shape[0], *s_obj.shape)
    s_frames = s_frames.unsqueeze(0).expand(q_frames.shape[0], *s_frames.shape)

    d_s = spatial_metric(q_obj, s_obj, cfg.distance, cfg.literal_alg1)
    d_t = temporal_score(q_frames, s_frames, cfg)
    fused = fuse(d_t, d_s, cfg.alpha)
    return -fused / cfg.temperature
