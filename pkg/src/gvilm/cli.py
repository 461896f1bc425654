"""Command-line entry point: one binary, eight subcommands.

Exit codes: 0 success, 1 runtime failure (one-line diagnostic on stderr),
2 usage error (argparse). Every subcommand that owns an output directory
writes a run manifest there before doing any work.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, TrainConfig, config_as_dict, load_config, parse_config_text, replace
from .evaluation import (
    boundary_gap,
    frame_similarity_matrix,
    grounding_accuracy,
    heatmap_png,
    noun_group_masks,
    overlay_png,
    report,
    retrieval_metrics,
    similarity_matrix,
    temporal_row_labels,
    write_summary,
)
from .synthcorpus import Corpus, CorpusSpec, file_hash, generate_corpus, load_corpus, save_corpus
from .trainer import (
    CheckpointError,
    TrainError,
    gradcheck,
    load_checkpoint,
    load_model_from_checkpoint,
    train,
)


def write_manifest(out_dir: Path, command: str, args: dict, **extra) -> Path:
    """Record what is about to run; written before any computation."""
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "args": args,
        "code_version": __version__,
        "created_unix": time.time(),
    }
    manifest.update(extra)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def _load_run(ckpt_path: str, data_path: str):
    """Model + config + corpus from a checkpoint and a corpus file."""
    state = load_checkpoint(ckpt_path)
    config = parse_config_text(state["config_text"])
    corpus = load_corpus(data_path)
    model = load_model_from_checkpoint(ckpt_path, config, corpus)
    return model, config, corpus


def cmd_gen_data(args) -> int:
    patch = tuple(int(p) for p in args.patch.split("x"))
    spec = CorpusSpec(
        size=args.size,
        frames=args.frames,
        height=args.hw[0],
        width=args.hw[1],
        patch=patch,
        val_size=args.val_size,
        test_size=args.test_size,
        twoscene_frac=args.twoscene_frac,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_manifest(
        out.parent,
        "gen-data",
        {"out": str(out), "seed": args.seed, "spec": spec.as_dict()},
    )
    corpus = generate_corpus(spec, args.seed)
    save_corpus(corpus, out)
    print(f"wrote {len(corpus.items)} items to {out} (sha256 {file_hash(out)[:16]}...)")
    return 0


def cmd_train(args) -> int:
    config = load_config(args.config)
    corpus = load_corpus(args.data)
    out_dir = Path(args.out)
    write_manifest(
        out_dir,
        "train",
        {"config": args.config, "data": args.data, "out": args.out, "resume": args.resume},
        config=config_as_dict(config),
        corpus_hash=file_hash(args.data),
    )
    result = train(config, corpus, out_dir, resume_from=args.resume, log_every=args.log_every)
    print(f"finished {config.steps} steps; final checkpoint {result.checkpoint_path}")
    return 0


def cmd_gradcheck(args) -> int:
    worst_tol = 1e-4
    ok = True
    for seed in args.seeds:
        rep = gradcheck(seed=seed, eps=args.eps, coords_per_param=args.coords_per_param,
                        exhaustive=args.exhaustive)
        for name in ("temporal", "grounding", "contrastive", "total"):
            err = rep.max_rel_err[name]
            status = "ok" if err <= worst_tol else "FAIL"
            print(f"seed {seed} {name:12s} max rel err {err:.3e} ({rep.worst_param[name]}) {status}")
            ok = ok and err <= worst_tol
    return 0 if ok else 1


def _split_items(corpus: Corpus, split: str):
    items = corpus.split_items(split)
    if not items:
        raise ConfigError(f"corpus has no items in split {split!r}")
    return items


def cmd_eval_retrieval(args) -> int:
    model, config, corpus = _load_run(args.ckpt, args.data)
    out_dir = Path(args.out)
    write_manifest(
        out_dir,
        "eval-retrieval",
        {"ckpt": args.ckpt, "data": args.data, "split": args.split},
        corpus_hash=file_hash(args.data),
    )
    items = _split_items(corpus, args.split)
    sim = similarity_matrix(model, items, config)
    rep = retrieval_metrics(sim)
    np.save(out_dir / "sim_matrix.npy", sim)
    heatmap_png(sim, out_dir / "sim_matrix.png")
    summary = rep.as_dict() | {"split": args.split}
    write_summary(summary, out_dir / "retrieval.json")
    print(
        f"text->video retrieval ({args.split}, pool {rep.pool_size}): "
        f"R@1 {rep.r1:.1f} R@5 {rep.r5:.1f} R@10 {rep.r10:.1f} MedR {rep.medr:.1f}"
    )
    return 0


def cmd_eval_temporal(args) -> int:
    model, config, corpus = _load_run(args.ckpt, args.data)
    out_dir = Path(args.out)
    write_manifest(
        out_dir,
        "eval-temporal",
        {"ckpt": args.ckpt, "data": args.data, "split": args.split},
        corpus_hash=file_hash(args.data),
    )
    items = _split_items(corpus, args.split)
    twoscene = [it for it in items if len(np.unique(it.scene_label)) == 2]
    if not twoscene:
        raise ConfigError(f"split {args.split!r} has no two-scene items")
    pt = config.model.patch[0]
    gaps = []
    for i, item in enumerate(twoscene):
        matrix = frame_similarity_matrix(model, item.video)
        labels = temporal_row_labels(item.scene_label, pt)
        gaps.append(boundary_gap(matrix, labels))
        if i < args.save_matrices:
            np.save(out_dir / f"frame_sim_{i:03d}.npy", matrix)
            heatmap_png(matrix, out_dir / f"frame_sim_{i:03d}.png", scale=32)
    summary = {
        "mean_gap": float(np.mean(gaps)),
        "gaps": [float(g) for g in gaps],
        "n_items": len(gaps),
        "split": args.split,
    }
    write_summary(summary, out_dir / "temporal.json")
    print(f"boundary gap ({args.split}, {len(gaps)} two-scene items): mean {summary['mean_gap']:.4f}")
    return 0


def cmd_eval_grounding(args) -> int:
    model, config, corpus = _load_run(args.ckpt, args.data)
    out_dir = Path(args.out)
    write_manifest(
        out_dir,
        "eval-grounding",
        {"ckpt": args.ckpt, "data": args.data, "split": args.split},
        corpus_hash=file_hash(args.data),
    )
    items = _split_items(corpus, args.split)
    rep = grounding_accuracy(model, items, config)
    for i, item in enumerate(items[: args.save_overlays]):
        for k, (phrase, pred, true) in enumerate(noun_group_masks(model, item, config)):
            overlay_png(pred, true, out_dir / f"grounding_{i:03d}_{k}_{phrase.replace(' ', '-')}.png")
    summary = rep.as_dict() | {"split": args.split}
    write_summary(summary, out_dir / "grounding.json")
    print(
        f"grounding accuracy ({args.split}, {rep.n_pairs} pairs): "
        f"{rep.accuracy:.3f} (chance {rep.chance:.3f})"
    )
    return 0


def cmd_report(args) -> int:
    out_dir = Path(args.out) if args.out else Path(args.run) / "report"
    write_manifest(out_dir, "report", {"run": args.run})
    written = report(args.run, out_dir)
    print(f"wrote {len(written)} report files to {out_dir}")
    return 0


SCENARIOS = (
    # (name, w_temporal, w_grounding, w_contrastive, aug_enabled)
    ("scenario1", 1.0, 1.0, 1.0, True),
    ("scenario2", 0.0, 1.0, 1.0, False),
    ("scenario3", 1.0, 0.0, 1.0, True),
    ("scenario4", 0.0, 0.0, 1.0, False),
)


def cmd_ablate(args) -> int:
    base = load_config(args.config)
    corpus = load_corpus(args.data)
    data_hash = file_hash(args.data)
    out_dir = Path(args.out)
    write_manifest(
        out_dir,
        "ablate",
        {"config": args.config, "data": args.data, "out": args.out},
        corpus_hash=data_hash,
    )
    test_items = corpus.split_items("test")
    twoscene = [it for it in test_items if len(np.unique(it.scene_label)) == 2]
    rows = []
    for name, w_t, w_g, w_c, aug_on in SCENARIOS:
        cfg = replace(
            base,
            loss_w_temporal=w_t,
            loss_w_grounding=w_g,
            loss_w_contrastive=w_c,
            aug_enabled=aug_on,
        )
        run_dir = out_dir / name
        write_manifest(
            run_dir,
            "train",
            {"scenario": name, "weights": [w_t, w_g, w_c], "aug_enabled": aug_on},
            config=config_as_dict(cfg),
            corpus_hash=data_hash,
        )
        result = train(cfg, corpus, run_dir, log_every=args.log_every)
        model = result.model
        model.eval()
        rep = retrieval_metrics(similarity_matrix(model, test_items, cfg))
        ground = grounding_accuracy(model, test_items, cfg)
        row = {
            "scenario": name,
            "weights": [w_t, w_g, w_c],
            "R@1": rep.r1,
            "R@5": rep.r5,
            "R@10": rep.r10,
            "grounding": ground.accuracy,
        }
        if twoscene:
            pt = cfg.model.patch[0]
            gaps = [
                boundary_gap(
                    frame_similarity_matrix(model, it.video),
                    temporal_row_labels(it.scene_label, pt),
                )
                for it in twoscene
            ]
            row["gap"] = float(np.mean(gaps))
        rows.append(row)
    write_summary({"scenarios": rows}, out_dir / "ablation.json")
    cols = ["scenario", "R@1", "R@5", "R@10", "gap", "grounding"]
    lines = ["  ".join(f"{c:>10s}" for c in cols)]
    for row in rows:
        cells = []
        for c in cols:
            v = row.get(c)
            if isinstance(v, float):
                cells.append(f"{v:>10.3f}")
            else:
                cells.append(f"{str(v) if v is not None else '-':>10s}")
        lines.append("  ".join(cells))
    table = "\n".join(lines)
    (out_dir / "ablation.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gvilm",
        description=(
            "Grounded video-language pre-training on a synthetic moving-shapes "
            "corpus: data generation, training, gradient checks, and evaluation."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", help="generate a synthetic video-caption corpus file")
    p.add_argument("--out", required=True, help="output corpus file")
    p.add_argument("--size", type=int, default=320)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--hw", type=int, nargs=2, default=(32, 32), metavar=("H", "W"))
    p.add_argument("--twoscene-frac", type=float, default=0.25)
    p.add_argument("--val-size", type=int, default=32)
    p.add_argument("--test-size", type=int, default=32)
    p.add_argument("--patch", default="2x8x8", help="patch sizes TxHxW for divisibility checks")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the dual encoder on a corpus")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradcheck", help="finite-difference check of all loss gradients")
    p.add_argument("--seed", dest="seeds", type=int, action="append", default=None,
                   help="seed to check (repeatable; default 0)")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--coords-per-param", type=int, default=4)
    p.add_argument("--exhaustive", action="store_true", help="probe every coordinate")
    p.set_defaults(func=cmd_gradcheck)

    for name, fn in (
        ("eval-retrieval", cmd_eval_retrieval),
        ("eval-temporal", cmd_eval_temporal),
        ("eval-grounding", cmd_eval_grounding),
    ):
        p = sub.add_parser(name, help=f"{name.split('-', 1)[1]} evaluation of a checkpoint")
        p.add_argument("--ckpt", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--split", default="test", choices=("train", "val", "test"))
        if name == "eval-temporal":
            p.add_argument("--save-matrices", type=int, default=4)
        if name == "eval-grounding":
            p.add_argument("--save-overlays", type=int, default=4)
        p.set_defaults(func=fn)

    p = sub.add_parser("report", help="render summary, curves and heatmaps for a run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("ablate", help="train and compare the four objective scenarios")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "gradcheck" and args.seeds is None:
        args.seeds = [0]
    try:
        return args.func(args)
    except (ConfigError, TrainError, CheckpointError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
