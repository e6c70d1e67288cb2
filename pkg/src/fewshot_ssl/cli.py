"""Command-line entry points: train, eval, gen-toy, extract-embeddings, inspect-checkpoint.

Exit codes: 0 success, 1 other failure, 2 invalid config or checkpoint
mismatch, 3 training aborted on a non-finite loss.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import serialize
from .config import ConfigError, RunConfig, load_config
from .data import generate_toy_corpus, ingest_split
from .episodic import EpisodeSpec, embed_images, evaluate_embeddings
from .model import CheckpointError, MultiTaskModel
from .nn import ConvEncoder
from .rng import stream
from .trainer import CsvMetricsSink, NonFiniteLossError, train

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NONFINITE = 0, 1, 2, 3


def _load(args, parser) -> RunConfig:
    if not args.config:
        parser.print_usage(sys.stderr)
        raise ConfigError("--config is required")
    return load_config(args.config)


def load_encoder(cfg: RunConfig, checkpoint) -> ConvEncoder:
    """Encoder weights (``encoder.*`` entries) from a checkpoint file."""
    try:
        entries = serialize.load(checkpoint)
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}") from None
    enc = ConvEncoder(cfg.encoder, stream(0, "init"))
    own = enc.state_dict()
    mine = {k[len("encoder."):]: v for k, v in entries.items() if k.startswith("encoder.")}
    if set(mine) != set(own):
        raise CheckpointError(f"checkpoint {checkpoint} does not hold an encoder matching the config "
                              f"(missing {sorted(set(own) - set(mine))[:3]}, unexpected {sorted(set(mine) - set(own))[:3]})")
    for k, v in own.items():
        if mine[k].shape != v.shape:
            raise CheckpointError(f"encoder.{k}: checkpoint shape {mine[k].shape} != config shape {v.shape}")
    enc.load_state_dict(mine)
    return enc


def export_embeddings(path, embeddings: np.ndarray, labels: np.ndarray) -> None:
    serialize.save(path, {"embeddings": embeddings.astype(np.float32), "labels": labels.astype(np.float32)})


def cmd_train(args, parser) -> int:
    cfg = _load(args, parser).with_overrides(args.seed, args.tasks, args.view_policy, args.epochs, args.output_dir)
    out = cfg.resolved_output_dir()
    out.mkdir(parents=True, exist_ok=True)
    cfg.write_snapshot(out)
    data = ingest_split(cfg.manifest, "train")
    model = MultiTaskModel(cfg.encoder, data.num_classes, cfg.heads(), cfg.train.tau,
                           cfg.train.symmetric_byol, seed=cfg.train.seed)
    csv_sink = CsvMetricsSink(out / "metrics.csv")

    def sink(rec):
        csv_sink(rec)
        parts = [f"{k}={v:.4f}" for k, v in (("sup", rec.loss_sup), ("rot", rec.loss_rot), ("byol", rec.loss_byol))
                 if v is not None]
        print(f"epoch {rec.epoch:3d} lr {rec.lr:.4g} loss {rec.loss_total:.4f} ({' '.join(parts)}) "
              f"{rec.wall_time_s:.1f}s", flush=True)

    try:
        train(cfg.train, data, model, sink=sink, augment=cfg.augment(), output_dir=out)
    except NonFiniteLossError as exc:
        print(f"error: {exc}; aborting", file=sys.stderr)
        return EXIT_NONFINITE
    print(f"wrote {out / 'checkpoint_final.bin'}")
    return EXIT_OK


def _eval_spec(cfg: RunConfig, args) -> EpisodeSpec:
    base = cfg.eval.episodes
    pick = lambda v, d: d if v is None else v  # noqa: E731
    return EpisodeSpec(pick(args.n_way, base.n_way), pick(args.k_shot, base.k_shot),
                       pick(args.q_query, base.q_query), pick(args.episodes, base.n_episodes),
                       pick(args.seed, base.seed))


def cmd_eval(args, parser) -> int:
    cfg = _load(args, parser)
    spec = _eval_spec(cfg, args)
    manifest = cfg.manifest
    split = args.split or cfg.eval.split
    encoder = load_encoder(cfg, args.checkpoint)
    data = ingest_split(manifest, split)
    train_classes = manifest.splits.get("train", []) if split != "train" else []
    overlap = sorted(set(train_classes) & set(data.class_names))
    if overlap:
        raise ConfigError(f"evaluation classes overlap training classes: {overlap[:5]}")
    emb = embed_images(encoder, data.images)
    if args.export_embeddings:
        export_embeddings(args.export_embeddings, emb, data.labels)
    report = evaluate_embeddings(emb, data, spec, checkpoint_id=Path(args.checkpoint).name,
                                 **cfg.eval.learner_options())
    print(report.summary())
    if report.ci_undefined:
        print("note: confidence interval undefined for a single episode")
    report_path = Path(args.report) if args.report else cfg.resolved_output_dir() / "eval_report.json"
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(report.to_json() + "\n", encoding="utf-8")
    if args.per_episode_csv:
        report.write_per_episode_csv(args.per_episode_csv)
    print(f"wrote {report_path}")
    return EXIT_OK


def cmd_extract(args, parser) -> int:
    cfg = _load(args, parser)
    encoder = load_encoder(cfg, args.checkpoint)
    data = ingest_split(cfg.manifest, args.split or cfg.eval.split)
    emb = embed_images(encoder, data.images)
    export_embeddings(args.out, emb, data.labels)
    print(f"wrote {args.out}: embeddings {list(emb.shape)}")
    return EXIT_OK


def cmd_gen_toy(args, parser) -> int:
    split = tuple(int(v) for v in args.split.split(","))
    if len(split) != 3:
        raise ConfigError("--split takes three counts: train,val,test")
    manifest = generate_toy_corpus(args.out, args.classes, args.per_class, args.size, split, args.seed, args.family)
    print(f"wrote {Path(args.out) / 'manifest.json'}: "
          + ", ".join(f"{k} {len(v)} classes" for k, v in manifest.splits.items()))
    return EXIT_OK


def cmd_inspect(args, parser) -> int:
    try:
        entries = serialize.load(args.checkpoint)
    except (OSError, serialize.SnapshotError) as exc:
        raise CheckpointError(str(exc)) from None
    total = 0
    for name, arr in entries.items():
        total += arr.size
        print(f"{name:48s} {str(list(arr.shape)):>20s}")
    meta = {k: float(v) for k, v in entries.items() if k.startswith("meta.")}
    print(f"{len(entries)} entries, {total} values" + (f", meta {meta}" if meta else ""))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fewshot-ssl", description="Multi-task few-shot pretraining and episodic evaluation.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a run config")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--tasks", help="comma list of sup, rot, byol")
    t.add_argument("--view-policy", help="separate, shared or two_view")
    t.add_argument("--epochs", type=int)
    t.add_argument("--output-dir")
    t.set_defaults(parser=t, func=cmd_train)

    e = sub.add_parser("eval", help="episodic evaluation of a checkpoint")
    e.add_argument("--config")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split")
    e.add_argument("--episodes", type=int)
    e.add_argument("--n-way", type=int)
    e.add_argument("--k-shot", type=int)
    e.add_argument("--q-query", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--report", help="EvalReport JSON path (default: <output dir>/eval_report.json)")
    e.add_argument("--per-episode-csv")
    e.add_argument("--export-embeddings", metavar="PATH")
    e.set_defaults(parser=e, func=cmd_eval)

    x = sub.add_parser("extract-embeddings", help="write frozen-encoder embeddings of a split")
    x.add_argument("--config")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--split")
    x.add_argument("--out", required=True)
    x.set_defaults(parser=x, func=cmd_extract)

    g = sub.add_parser("gen-toy", help="generate the synthetic toy corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--classes", type=int, default=12)
    g.add_argument("--per-class", type=int, default=60)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--split", default="8,2,2")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--family", default="mixed", choices=["mixed", "solid", "shape", "texture"])
    g.set_defaults(parser=g, func=cmd_gen_toy)

    i = sub.add_parser("inspect-checkpoint", help="list the entries of a checkpoint")
    i.add_argument("checkpoint")
    i.set_defaults(parser=i, func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, args.parser)
    except (ConfigError, CheckpointError, serialize.SnapshotError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
