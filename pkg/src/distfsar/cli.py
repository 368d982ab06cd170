"""Batch command-line entry points.

Subcommands: ``knowledge-build`` (decompose labels into attribute entries),
``train`` (episodic training to a checkpoint), ``eval`` (accuracy with a
confidence interval), ``ablate`` (sweeps over alpha/G/L/N/metric), and
``report`` (CSV dumps of attention weights and per-class distances).

Exit codes: 0 success, 1 usage, 2 data/knowledge error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time

import numpy as np
import torch

from .config import Config, load_config, stable_hash
from .data import ManifestDataset, SyntheticDataset, SyntheticSpec, _derive_rng
from .episodic import (EpisodeRunner, episode_breakdown, evaluate,
                       frame_mean_scorer, model_scorer, oracle_scorer,
                       random_scorer, sample_episode, train)
from .errors import (ConfigError, CountMismatchError, DegenerateSpecError,
                     DivergenceError, FingerprintMismatchError,
                     InsufficientDataError, KnowledgeMissError,
                     SplitOverlapError, TransportError, ZeroVectorError)
from .knowledge import (FixtureClient, HttpChatClient, ensure_coverage,
                        load_kb, new_kb, save_kb)
from .model import load_checkpoint, save_checkpoint

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# shared helpers

def _load_dataset(path, cfg: Config | None = None):
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if "splits" in payload:
        from .data import SamplingPolicy
        sampling = SamplingPolicy(frames=cfg.encoder.frames) if cfg else None
        return ManifestDataset(payload, sampling=sampling)
    seed = payload.pop("seed", 0)
    spec = SyntheticSpec.from_dict(payload.get("synthetic", payload))
    return SyntheticDataset(spec, seed=seed)


def _run_manifest(out_dir: str, command: str, cfg: Config | None, outputs,
                  timings: dict, hashes: dict) -> None:
    manifest = {
        "command": command,
        "config": cfg.to_dict() if cfg else None,
        "hashes": hashes,
        "outputs": sorted(os.path.relpath(p, out_dir) for p in outputs),
        "timings_seconds": {k: round(v, 3) for k, v in timings.items()},
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_report(report, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _build_scorer(name: str, model, kb, cfg):
    if name == "model":
        return model_scorer(EpisodeRunner(model, kb, cfg,
                                          eval_augment=cfg.train.augment))
    if name == "oracle":
        return oracle_scorer
    if name == "random":
        return random_scorer
    if name == "frame_mean":
        return frame_mean_scorer(model.encoder)
    raise UsageError(f"unknown scorer {name!r}")


# ---------------------------------------------------------------------------
# knowledge-build

def cmd_knowledge_build(args) -> int:
    with open(args.labels, "r", encoding="utf-8") as fh:
        labels = [line.strip() for line in fh if line.strip()]
    cfg = load_config(args.config) if args.config else Config()
    cfg.knowledge.num_spatial = args.g
    cfg.knowledge.num_temporal = args.l
    if args.model_id:
        cfg.knowledge.model_id = args.model_id
    cfg.validate()

    if os.path.exists(args.out):
        kb = load_kb(args.out, cfg.knowledge_fingerprint(),
                     allow_mismatch=args.allow_mismatch)
    else:
        kb = new_kb(cfg)
    client = (FixtureClient.from_file(args.fixture) if args.fixture
              else HttpChatClient(model_id=cfg.knowledge.model_id,
                                  max_retries=cfg.knowledge.max_retries,
                                  backoff_seconds=cfg.knowledge.backoff_seconds))
    t0 = time.time()
    failures = ensure_coverage(kb, labels, client, cfg)
    save_kb(kb, args.out)
    covered = sum(1 for lb in labels if lb in kb)
    print(f"knowledge base: {covered}/{len(labels)} labels covered -> {args.out}")
    if failures:
        print("failed labels:", file=sys.stderr)
        for label, exc in sorted(failures.items()):
            print(f"  {label}: {exc}", file=sys.stderr)
        return EXIT_DATA
    if args.manifest_dir:
        os.makedirs(args.manifest_dir, exist_ok=True)
        _run_manifest(args.manifest_dir, "knowledge-build", cfg, [args.out],
                      {"build": time.time() - t0}, {"kb": kb.content_hash()})
    return EXIT_OK


# ---------------------------------------------------------------------------
# train

def _train_to_dir(cfg: Config, dataset, kb, out_dir: str) -> tuple[str, dict]:
    timings = {}
    t0 = time.time()
    result = train(cfg, dataset, kb)
    timings["train"] = time.time() - t0

    os.makedirs(out_dir, exist_ok=True)
    ckpt_dir = os.path.join(out_dir, "checkpoint")
    hashes = {"kb": kb.content_hash(), "dataset": dataset.content_hash()}
    save_checkpoint(ckpt_dir, result.model, cfg, extra={"hashes": hashes})

    curve = os.path.join(out_dir, "loss_curve.csv")
    with open(curve, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["episode", "loss", "train_accuracy"])
        for i, (loss, acc) in enumerate(zip(result.losses, result.train_accuracy)):
            writer.writerow([i, repr(loss), repr(acc)])
    _run_manifest(out_dir, "train", cfg,
                  [ckpt_dir, curve], timings, hashes)
    return ckpt_dir, hashes


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    dataset = _load_dataset(args.data, cfg)
    kb = load_kb(args.kb, cfg.knowledge_fingerprint(),
                 allow_mismatch=args.allow_mismatch)
    ckpt_dir, _ = _train_to_dir(cfg, dataset, kb, args.out)
    print(f"checkpoint written to {ckpt_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval

def _verify_hashes(manifest: dict, kb, dataset, allow_mismatch: bool):
    stored = manifest.get("hashes", {})
    current = {"kb": kb.content_hash(), "dataset": dataset.content_hash()}
    for key, value in current.items():
        if key in stored and stored[key] != value and not allow_mismatch:
            raise FingerprintMismatchError(
                f"checkpoint was trained against a different {key} "
                f"({stored[key]} != {value}); pass --allow-mismatch to override")


def cmd_eval(args) -> int:
    if args.episodes < 1:
        raise UsageError("--episodes must be >= 1")
    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.cfg
    if args.alpha is not None:
        cfg.metric.alpha = args.alpha
    if args.temporal_metric:
        cfg.metric.temporal = args.temporal_metric
    cfg.validate()
    dataset = _load_dataset(args.data, cfg)
    kb = load_kb(args.kb, cfg.knowledge_fingerprint(),
                 allow_mismatch=args.allow_mismatch)
    _verify_hashes(ckpt.manifest, kb, dataset, args.allow_mismatch)

    scorer = _build_scorer(args.scorer, ckpt.model, kb, cfg)
    t0 = time.time()
    report = evaluate(scorer, dataset, args.split, args.episodes, args.seed,
                      cfg, workers=args.workers, scorer_name=args.scorer)
    elapsed = time.time() - t0
    print(f"accuracy: {report.mean_accuracy:.4f} ± {report.ci95_half_width:.4f} "
          f"({args.episodes} episodes, split={args.split}, scorer={args.scorer})")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "eval_report.json")
        _write_report(report, path)
        _run_manifest(args.out, "eval", cfg, [path], {"eval": elapsed},
                      {"kb": kb.content_hash(), "dataset": dataset.content_hash()})
    return EXIT_OK


# ---------------------------------------------------------------------------
# ablate

def _ablate_eval(cfg, dataset, kb, ckpt_dir, episodes, seed, workers):
    ckpt = load_checkpoint(ckpt_dir)
    scorer = model_scorer(EpisodeRunner(ckpt.model, kb, cfg))
    return evaluate(scorer, dataset, "test", episodes, seed, cfg, workers=workers)


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    dataset = _load_dataset(args.data, cfg)
    kb = load_kb(args.kb, cfg.knowledge_fingerprint(),
                 allow_mismatch=args.allow_mismatch)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise UsageError("--values is empty")
    os.makedirs(args.out, exist_ok=True)

    retrain = args.sweep in ("G", "L", "N")
    base_ckpt = None
    if not retrain:
        base_ckpt, _ = _train_to_dir(cfg, dataset, kb,
                                     os.path.join(args.out, "base"))

    rows, outputs = [], []
    t0 = time.time()
    for value in values:
        cell_cfg = Config.from_dict(cfg.to_dict())
        try:
            if args.sweep == "alpha":
                cell_cfg.metric.alpha = float(value)
                report = _ablate_eval(cell_cfg, dataset, kb, base_ckpt,
                                      args.episodes, args.seed, args.workers)
            elif args.sweep == "metric":
                cell_cfg.metric.temporal = value
                cell_cfg.validate()
                report = _ablate_eval(cell_cfg, dataset, kb, base_ckpt,
                                      args.episodes, args.seed, args.workers)
            else:
                if args.sweep == "N":
                    cell_cfg.skc.num_prototypes = int(value)
                    cell_kb = kb
                else:
                    setattr(cell_cfg.knowledge,
                            "num_spatial" if args.sweep == "G" else "num_temporal",
                            int(value))
                    cell_cfg.validate()
                    if not isinstance(dataset, SyntheticDataset):
                        raise KnowledgeMissError(
                            f"{args.sweep} sweep needs to rebuild the knowledge "
                            f"base; only synthetic datasets can do so offline")
                    client = FixtureClient(dataset.fixture_responses(
                        cell_cfg.knowledge.num_spatial,
                        cell_cfg.knowledge.num_temporal))
                    cell_kb = new_kb(cell_cfg)
                    failures = ensure_coverage(cell_kb, dataset.labels, client,
                                               cell_cfg)
                    if failures:
                        raise KnowledgeMissError(f"fixture rebuild failed: {failures}")
                cell_dir = os.path.join(args.out, f"{args.sweep}_{value}")
                ckpt_dir, _ = _train_to_dir(cell_cfg, dataset, cell_kb, cell_dir)
                outputs.append(ckpt_dir)
                report = _ablate_eval(cell_cfg, dataset, cell_kb, ckpt_dir,
                                      args.episodes, args.seed, args.workers)
            rows.append([value, repr(report.mean_accuracy),
                         repr(report.ci95_half_width), ""])
            print(f"{args.sweep}={value}: {report.mean_accuracy:.4f} "
                  f"± {report.ci95_half_width:.4f}")
        except Exception as exc:  # record the cell failure, keep sweeping
            rows.append([value, "", "", f"{type(exc).__name__}: {exc}"])
            print(f"{args.sweep}={value}: FAILED ({exc})", file=sys.stderr)

    csv_path = os.path.join(args.out, f"sweep_{args.sweep}.csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([args.sweep, "accuracy", "ci95_half_width", "error"])
        writer.writerows(rows)
    outputs.append(csv_path)
    _run_manifest(args.out, "ablate", cfg, outputs,
                  {"sweep": time.time() - t0},
                  {"kb": kb.content_hash(), "dataset": dataset.content_hash()})
    print(f"sweep CSV -> {csv_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# report

def cmd_report(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.cfg
    dataset = _load_dataset(args.data, cfg)
    kb = load_kb(args.kb, cfg.knowledge_fingerprint(),
                 allow_mismatch=args.allow_mismatch)
    _verify_hashes(ckpt.manifest, kb, dataset, args.allow_mismatch)

    out_dir = args.out or os.path.join(args.checkpoint, os.pardir, "reports")
    out_dir = os.path.normpath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    runner = EpisodeRunner(ckpt.model, kb, cfg)
    rng = _derive_rng("report-episode", args.seed, 0)
    episode = sample_episode(dataset, dataset.split(args.split).classes,
                             cfg.train.way, cfg.train.shot,
                             cfg.train.eval_queries, rng)
    breakdown = episode_breakdown(runner, episode)

    outputs = []
    for entry in breakdown:
        qi = entry["query_index"]
        attn_path = os.path.join(out_dir, f"query_{qi:02d}_attention.csv")
        with open(attn_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["frame"] + list(entry["attribute_strings"]))
            for t, row in enumerate(np.asarray(entry["attention"])):
                writer.writerow([t] + [repr(float(x)) for x in row])
        dist_path = os.path.join(out_dir, f"query_{qi:02d}_distances.csv")
        with open(dist_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class", "spatial", "temporal", "fused",
                             "chosen", "true"])
            for row in entry["distances"]:
                writer.writerow([
                    row["class"], repr(row["spatial"]), repr(row["temporal"]),
                    repr(row["fused"]),
                    int(row["class"] == entry["chosen_class"]),
                    int(row["class"] == entry["true_class"]),
                ])
        outputs.extend([attn_path, dist_path])
    _run_manifest(out_dir, "report", cfg, outputs, {},
                  {"kb": kb.content_hash(), "dataset": dataset.content_hash()})
    print(f"wrote {len(outputs)} CSVs to {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument wiring

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="distfsar", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("knowledge-build", help="decompose labels into attributes")
    p.add_argument("--labels", required=True, help="text file, one label per line")
    p.add_argument("--g", type=int, default=6, help="spatial attributes per label")
    p.add_argument("--l", type=int, default=3, help="temporal attributes per label")
    p.add_argument("--out", required=True, help="knowledge base JSON path")
    p.add_argument("--fixture", help="canned-response JSON for offline builds")
    p.add_argument("--config", help="base config JSON")
    p.add_argument("--model-id", dest="model_id", help="LLM model identifier")
    p.add_argument("--allow-mismatch", action="store_true")
    p.add_argument("--manifest-dir", help="where to write the run manifest")
    p.set_defaults(func=cmd_knowledge_build)

    p = sub.add_parser("train", help="episodic training to a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--kb", required=True)
    p.add_argument("--data", required=True, help="manifest or synthetic spec JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--allow-mismatch", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy with a 95%% confidence interval")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--kb", required=True)
    p.add_argument("--episodes", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--scorer", default="model",
                   choices=["model", "oracle", "random", "frame_mean"])
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--alpha", type=float, help="override the fusion coefficient")
    p.add_argument("--temporal-metric", choices=["otam", "bi_mhm"])
    p.add_argument("--out", help="where to write eval_report.json")
    p.add_argument("--allow-mismatch", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="sweep alpha, G, L, N or the temporal metric")
    p.add_argument("--sweep", required=True,
                   choices=["alpha", "G", "L", "N", "metric"])
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--config", required=True)
    p.add_argument("--kb", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--episodes", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--allow-mismatch", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="dump attention weights and distances")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--kb", required=True)
    p.add_argument("--episode-dump", action="store_true",
                   help="dump one episode's per-query CSVs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--out")
    p.add_argument("--allow-mismatch", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    torch.set_num_threads(max(1, torch.get_num_threads()))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ValueError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (KnowledgeMissError, FingerprintMismatchError, TransportError,
            CountMismatchError, SplitOverlapError, InsufficientDataError,
            DegenerateSpecError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, ZeroVectorError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
