"""Command-line workflows: synth-data, train, eval-classify, gen-episodes,
eval-episodes, grad-check, export-embeddings.

Every command accepts --config/--seed/--out, writes a resolved-config.json
alongside its outputs, and exits nonzero with a one-line cause on bad input.
Outputs carry no timestamps, so a rerun from the same seed and config is
byte-identical. MIXREP_OUT_DIR, when set, anchors relative --out paths."""

import argparse
import csv
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from .autodiff import finite_difference_check
from .config import RunConfig, load_run_config, write_resolved_config
from .data import load_dataset, save_dataset, synth_dataset
from .episodes import episode_ground_truth, generate_episodes, load_episodes, run_episode, save_episodes
from .errors import ConfigError, MixrepError
from .head import EmbeddingConfig, MixtureConfig, MixtureHead, load_checkpoint, save_checkpoint
from .metrics import classification_error, map_over_episodes, recall_at_k
from .rng import substream
from .training import class_index_map, fit, write_loss_trace

GRAD_CHECK_TOLERANCE = 1e-4


class _OutDir:
    """Tracks files written by one command so a failed run leaves nothing."""

    def __init__(self, path):
        self.dir = Path(path)
        self.created: list[Path] = []

    def file(self, name) -> Path:
        self.dir.mkdir(parents=True, exist_ok=True)
        p = self.dir / name
        self.created.append(p)
        return p

    def cleanup(self) -> None:
        for p in self.created:
            try:
                p.unlink()
            except FileNotFoundError:
                pass
        try:
            self.dir.rmdir()
        except OSError:
            pass


def _resolve_out(raw: str | None) -> Path | None:
    if raw is None:
        base = os.environ.get("MIXREP_OUT_DIR")
        return Path(base) if base else None
    p = Path(raw)
    base = os.environ.get("MIXREP_OUT_DIR")
    if base and not p.is_absolute():
        p = Path(base) / p
    return p


def _load_config(args) -> RunConfig:
    config = load_run_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        config = dataclasses.replace(config, seed=int(args.seed))
    return config


def _require_out(out: _OutDir | None) -> _OutDir:
    if out is None:
        raise ConfigError("this command writes files: pass --out (or set MIXREP_OUT_DIR)")
    return out


def _log_config(config: RunConfig, out: _OutDir | None) -> None:
    if out is not None:
        write_resolved_config(config, out.file("resolved-config.json"))


def _load_data(args):
    if not getattr(args, "data", None):
        raise ConfigError("missing --data (dataset JSONL path)")
    return load_dataset(args.data)


def _build_head(config: RunConfig, dataset) -> MixtureHead:
    input_dim = config.input_dim or dataset.records[0].features.shape[0]
    num_classes = len(class_index_map(dataset))
    if num_classes < 1:
        raise ConfigError("dataset has no trainable classes")
    return MixtureHead(
        config.embedding_config(input_dim),
        config.mixture_config(num_classes),
        task_mode=config.task_mode,
        seed=config.seed,
    )


# ---------------------------------------------------------------------------
# commands


def cmd_synth_data(args, out):
    config = _load_config(args)
    out = _require_out(out)
    if config.synth is None:
        raise ConfigError("synth-data needs a 'synth' section in the config")
    dataset = synth_dataset(config.synth, seed=config.seed)
    _log_config(config, out)
    save_dataset(dataset, out.file("dataset.jsonl"))
    n_bg = sum(r.is_background for r in dataset)
    print(f"wrote {len(dataset.records)} records "
          f"({len(dataset.classes())} classes, {n_bg} background) to {out.dir}")
    return 0


def cmd_train(args, out):
    config = _load_config(args)
    out = _require_out(out)
    dataset = _load_data(args)
    head = _build_head(config, dataset)
    result = fit(head, dataset, config.train_config(), config.batch_spec())
    _log_config(config, out)
    save_checkpoint(head, out.file("checkpoint.json"))
    write_loss_trace(result.trace, out.file("loss_trace.csv"))
    first, last = result.trace[0]["total"], result.trace[-1]["total"]
    print(f"trained {config.iterations} iterations: loss {first:.4f} -> {last:.4f}")
    print(f"checkpoint and loss trace in {out.dir}")
    return 0


def cmd_eval_classify(args, out):
    config = _load_config(args)
    if not args.checkpoint:
        raise ConfigError("missing --checkpoint")
    head = load_checkpoint(args.checkpoint)
    head.set_mode("eval")
    dataset = _load_data(args)
    cmap = class_index_map(dataset)
    if len(cmap) != head.mixture.num_classes:
        raise ConfigError(
            f"checkpoint expects {head.mixture.num_classes} classes, dataset has {len(cmap)}"
        )
    seen = [r for r in dataset if not r.is_background and r.label in cmap]
    splits = [("train", [r for r in seen if r.split in (None, "train")]),
              ("test", [r for r in seen if r.split == "test"])]
    # without an explicit config the checkpoint's own posterior rule applies
    posterior = config.posterior_mode if args.config else None
    rows = []
    for name, records in splits:
        if not records:
            continue
        err = classification_error(head, records, cmap, posterior_mode=posterior)
        rows.append((name, len(records), err))
        print(f"{name}: {err * 100:.2f}% error over {len(records)} records")
    if out is not None:
        _log_config(config, out)
        with open(out.file("classification.csv"), "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["split", "count", "error"])
            for name, count, err in rows:
                writer.writerow([name, count, repr(err)])
    return 0


def cmd_gen_episodes(args, out):
    config = _load_config(args)
    out = _require_out(out)
    dataset = _load_data(args)
    spec = config.episode_spec()
    episodes = generate_episodes(dataset, spec)
    _log_config(config, out)
    save_episodes(episodes, spec, out.file("episodes.jsonl"))
    print(f"wrote {len(episodes)} episodes ({spec.ways}-way {spec.shots}-shot, "
          f"{spec.queries_per_class} queries/class) to {out.dir}")
    return 0


def cmd_eval_episodes(args, out):
    config = _load_config(args)
    out = _require_out(out)
    if not args.checkpoint:
        raise ConfigError("missing --checkpoint")
    if not args.episodes:
        raise ConfigError("missing --episodes (episode JSONL path)")
    head = load_checkpoint(args.checkpoint)
    dataset = _load_data(args)
    file_episodes, spec = load_episodes(args.episodes, dataset)
    if args.shots:
        try:
            shot_counts = [int(s) for s in args.shots.split(",")]
        except ValueError:
            raise ConfigError(f"bad --shots list {args.shots!r}") from None
    else:
        shot_counts = [spec.shots]

    rows = []
    for shots in shot_counts:
        if shots == spec.shots:
            episodes = file_episodes
        else:
            # the episode file pins classes and queries for every shot count;
            # only the support draw depends on it
            episodes = generate_episodes(dataset, dataclasses.replace(spec, shots=shots))
        truth = [gt for ep in episodes for gt in episode_ground_truth(ep)]
        for steps in dict.fromkeys((0, config.finetune_steps)):
            detections = []
            fg_total = fg_correct = bg_total = bg_accepted = 0
            for ep in episodes:
                records = run_episode(head, ep, finetune_steps=steps,
                                      finetune_lr=config.finetune_lr)
                for query, record in zip(ep.queries, records):
                    predicted_bg = record.class_id not in ep.class_ids
                    if query.is_background:
                        bg_total += 1
                        bg_accepted += not predicted_bg
                    else:
                        fg_total += 1
                        fg_correct += record.class_id == query.label
                    if not predicted_bg:
                        detections.append(record)
            row = {
                "shots": shots,
                "finetune_steps": steps,
                "map": map_over_episodes(detections, truth, config.match_iou),
                "accuracy": fg_correct / fg_total,
                "background_false_accept": bg_accepted / bg_total if bg_total else "",
            }
            for k in config.recall_ks:
                row[f"recall_at_{k}"] = recall_at_k(detections, truth, k, config.match_iou)
            rows.append(row)
            recalls = "  ".join(f"R@{k} {row[f'recall_at_{k}']:.3f}" for k in config.recall_ks)
            bg_part = (f"  bg-accept {row['background_false_accept']:.3f}"
                       if bg_total else "")
            print(f"shots={shots} finetune={steps}: mAP {row['map']:.3f}  {recalls}"
                  f"  acc {row['accuracy']:.3f}{bg_part}")

    _log_config(config, out)
    columns = ["shots", "finetune_steps", "map"] + \
              [f"recall_at_{k}" for k in config.recall_ks] + \
              ["accuracy", "background_false_accept"]
    with open(out.file("episode_report.csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([row[c] if isinstance(row[c], (int, str)) else repr(row[c])
                             for c in columns])
    print(f"report in {out.dir}")
    return 0


def cmd_grad_check(args, out):
    config = _load_config(args)
    # fixed desk-scale shape: 4 classes x 2 modes, 8-dim embedding, batch 8
    head = MixtureHead(
        EmbeddingConfig(
            input_dim=8, layer_widths=(12, 8),
            final_l2_normalize=config.final_l2_normalize,
            bn_momentum=config.bn_momentum, bn_epsilon=config.bn_epsilon,
        ),
        MixtureConfig(
            num_classes=4, modes_per_class=2, sigma=config.sigma,
            margin=config.margin, posterior_mode=config.posterior_mode,
        ),
        task_mode=config.task_mode,
        seed=config.seed,
    )
    rng = substream(config.seed, "gradcheck", "inputs")
    X = rng.normal(size=(8, 8))
    labels = [0, 1, 2, 3, 0, 1, 2, -1 if config.task_mode == "detection" else 3]
    params = head.parameters()
    max_err = float(finite_difference_check(
        lambda _params: head.total_loss(X, labels, update_stats=False)[0], params
    ))
    passed = max_err <= GRAD_CHECK_TOLERANCE
    print(f"max relative gradient error: {max_err:.3e} "
          f"({'OK' if passed else 'FAIL'}, tolerance {GRAD_CHECK_TOLERANCE:.0e})")
    if out is not None:
        _log_config(config, out)
        body = json.dumps({"max_rel_err": max_err, "tolerance": GRAD_CHECK_TOLERANCE,
                           "passed": passed}, sort_keys=True, indent=2)
        out.file("grad_check.json").write_text(body + "\n", encoding="utf-8")
    return 0 if passed else 1


def cmd_export_embeddings(args, out):
    config = _load_config(args)
    out = _require_out(out)
    if not args.checkpoint:
        raise ConfigError("missing --checkpoint")
    head = load_checkpoint(args.checkpoint)
    dataset = _load_data(args)
    head.set_mode("eval")
    _log_config(config, out)
    path = out.file("embeddings.csv")
    dim = head.embedding.config.output_dim
    X = np.stack([rec.features for rec in dataset])
    emb = head.embedding.embed_batch(X)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label"] + [f"e{i}" for i in range(dim)])
        for rec, row in zip(dataset, emb):
            writer.writerow([rec.id, rec.label] + [repr(float(v)) for v in row])
    print(f"wrote {len(dataset.records)} embedding rows to {path}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mixrep",
        description="Distance-based classification with per-class mixture "
                    "representatives: training, episodic evaluation, metrics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, data=False, checkpoint=False, episodes=False, shots=False):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="run config JSON path")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory")
        if data:
            p.add_argument("--data", help="dataset JSONL path")
        if checkpoint:
            p.add_argument("--checkpoint", help="checkpoint JSON path")
        if episodes:
            p.add_argument("--episodes", help="episode JSONL path")
        if shots:
            p.add_argument("--shots", help="comma-separated shot counts, e.g. 1,5,10")
        p.set_defaults(func=func)
        return p

    add("synth-data", cmd_synth_data, "generate a synthetic dataset")
    add("train", cmd_train, "train a head on a dataset", data=True)
    add("eval-classify", cmd_eval_classify, "closed-set error of a checkpoint",
        data=True, checkpoint=True)
    add("gen-episodes", cmd_gen_episodes, "sample an episode benchmark file", data=True)
    add("eval-episodes", cmd_eval_episodes, "run the episodic benchmark",
        data=True, checkpoint=True, episodes=True, shots=True)
    add("grad-check", cmd_grad_check, "finite-difference check of the loss gradient")
    add("export-embeddings", cmd_export_embeddings, "embed a dataset to CSV",
        data=True, checkpoint=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out_path = _resolve_out(args.out)
    out = _OutDir(out_path) if out_path is not None else None
    try:
        return args.func(args, out)
    except MixrepError as e:
        if out is not None:
            out.cleanup()
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        if out is not None:
            out.cleanup()
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
