"""Command-line entry point.

Subcommands: gen-data, pretrain, probe, segment-retrieval, propagate,
crop-stats, ablate, report. Every run copies its config into the output
directory and records a manifest (config hash, seed, timestamps, artifacts).

Exit codes: 0 success, 2 config error, 3 missing file, 4 bad/incompatible
checkpoint, 1 any other package error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .config import Config, parse_config_file, sha256_text
from .crops import CropSpec, iou_histogram
from .errors import CheckpointFormatError, ConfigError, KnnMocoError
from .evaluation import (
    PropagationConfig,
    downsample_mask,
    jaccard_and_f,
    propagate_labels,
    segment_retrieval,
    upsample_mask,
)
from .synthdata import (
    LongTailSpec,
    generate,
    generate_video,
    load_dataset,
    longtail_counts,
    save_dataset,
)
from .trainer import (
    Metrics,
    load_encoder,
    pretrain,
    probe_checkpoint,
    spatial_feature_maps,
)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_CHECKPOINT = 4


class _Run:
    """Output directory plus the manifest bookkeeping every subcommand shares."""

    def __init__(self, subcommand: str, out_dir: str, config_path: str | None,
                 config_text: str | None, seed: int | None):
        self.subcommand = subcommand
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.config_path = config_path
        self.config_hash = sha256_text(config_text) if config_text is not None else ""
        self.seed = seed
        self.artifacts: list[str] = []
        self.started = datetime.now(timezone.utc).isoformat()
        if config_text is not None:
            copy = self.out / "config.txt"
            copy.write_text(config_text, encoding="utf-8")
            self.artifacts.append(str(copy))

    def artifact(self, name: str) -> Path:
        path = self.out / name
        self.artifacts.append(str(path))
        return path

    def finish(self) -> None:
        manifest = {
            "subcommand": self.subcommand,
            "config_path": self.config_path,
            "config_sha256": self.config_hash,
            "seed": self.seed,
            "started": self.started,
            "finished": datetime.now(timezone.utc).isoformat(),
            "artifacts": sorted(self.artifacts),
        }
        with open(self.out / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)


def _load_config(args) -> tuple[Config, str]:
    cfg, text = parse_config_file(args.config)
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        cfg.set(key.strip(), value.strip())
    if args.seed is not None:
        cfg.set("train.seed", str(args.seed))
    return cfg, text


def _seed_of(cfg: Config, args) -> int:
    if args.seed is not None:
        return args.seed
    return int(cfg.values.get("train.seed", 0))


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen_data(args) -> int:
    cfg, text = _load_config(args)
    gen = cfg.gen_config()
    seed = _seed_of(cfg, args)
    run = _Run("gen-data", args.out, args.config, text, seed)
    if gen.variant == "video":
        ds = generate_video(gen.num_classes, gen.sequences, gen.frames_per_seq, seed,
                            gen.side, speed_range=(gen.speed_lo, gen.speed_hi),
                            jitter=gen.jitter)
    else:
        counts = None
        if gen.distribution == "longtail":
            spec = LongTailSpec(gen.num_classes, gen.longtail_n_max, gen.longtail_n_min,
                                gen.longtail_alpha)
            counts = longtail_counts(spec)
        ds = generate(gen.variant, gen.num_classes, gen.n, seed,
                      (gen.objects_lo, gen.objects_hi), gen.side, counts)
    save_dataset(run.artifact("dataset.kmds"), ds)
    run.finish()
    return EXIT_OK


def _cmd_pretrain(args) -> int:
    cfg, text = _load_config(args)
    train_cfg = cfg.train_config()
    if args.seed is not None:
        train_cfg.seed = args.seed
    run = _Run("pretrain", args.out, args.config, text, train_cfg.seed)
    state = pretrain(train_cfg, run.out)
    run.artifacts.append(str(run.out / "checkpoint.kmco"))
    state.metrics.write_jsonl(run.artifact("metrics.jsonl"))
    state.metrics.write_summary_csv(run.artifact("summary.csv"))
    run.finish()
    return EXIT_OK


def _cmd_probe(args) -> int:
    cfg, text = _load_config(args)
    ev = cfg.eval_config()
    seed = _seed_of(cfg, args)
    run = _Run("probe", args.out, args.config, text, seed)
    ds = load_dataset(ev.probe_dataset)
    acc = probe_checkpoint(ev.checkpoint, ds, ev, seed)
    metrics = Metrics()
    metrics.add(kind="eval", protocol="linear_probe", score=acc, seed=seed)
    metrics.write_jsonl(run.artifact("metrics.jsonl"))
    with open(run.artifact("probe.csv"), "w", encoding="utf-8") as fh:
        fh.write("protocol,seed,accuracy\n")
        fh.write(f"linear_probe,{seed},{acc}\n")
    run.finish()
    return EXIT_OK


def _cmd_segment_retrieval(args) -> int:
    cfg, text = _load_config(args)
    ev = cfg.eval_config()
    seed = _seed_of(cfg, args)
    run = _Run("segment-retrieval", args.out, args.config, text, seed)
    train_ds = load_dataset(ev.train_dataset)
    val_ds = load_dataset(ev.val_dataset)
    tensors, enc_cfg, _ = load_encoder(ev.checkpoint)
    train_feats = spatial_feature_maps(tensors, enc_cfg, train_ds)
    val_feats = spatial_feature_maps(tensors, enc_cfg, val_ds)
    train_masks = [train_ds.semantic_mask(i) for i in range(len(train_ds))]
    val_masks = [val_ds.semantic_mask(i) for i in range(len(val_ds))]
    miou, per_class = segment_retrieval(
        train_feats, train_masks, val_feats, val_masks, ev.kmeans_k, ev.kmeans_iters, seed
    )
    metrics = Metrics()
    metrics.add(kind="eval", protocol="segment_retrieval", score=miou, seed=seed)
    metrics.write_jsonl(run.artifact("metrics.jsonl"))
    with open(run.artifact("segment_retrieval.csv"), "w", encoding="utf-8") as fh:
        fh.write("class,iou\n")
        for cls in sorted(per_class):
            fh.write(f"{cls},{per_class[cls]}\n")
        fh.write(f"mean,{miou}\n")
    run.finish()
    return EXIT_OK


def _cmd_propagate(args) -> int:
    cfg, text = _load_config(args)
    ev = cfg.eval_config()
    seed = _seed_of(cfg, args)
    run = _Run("propagate", args.out, args.config, text, seed)
    ds = load_dataset(ev.video_dataset)
    tensors, enc_cfg, _ = load_encoder(ev.checkpoint)
    prop_cfg = PropagationConfig(ev.k_prop, ev.radius, ev.prop_temperature, ev.context)
    rows = []
    for seq_idx, frames in enumerate(ds.sequences()):
        maps = spatial_feature_maps(tensors, enc_cfg, ds, frames)
        emb = np.stack(maps)
        hf, wf = emb.shape[1:3]
        first = downsample_mask(ds.masks[frames[0]].astype(np.int64), hf, wf)
        preds = propagate_labels(emb, first, prop_cfg)
        js, fs = [], []
        for t in range(1, len(frames)):
            pred_full = upsample_mask(preds[t], ds.side, ds.side)
            j, f = jaccard_and_f(pred_full, ds.masks[frames[t]].astype(np.int64))
            js.append(j)
            fs.append(f)
        rows.append((seq_idx, float(np.mean(js)), float(np.mean(fs))))
    mean_j = float(np.mean([r[1] for r in rows]))
    mean_f = float(np.mean([r[2] for r in rows]))
    metrics = Metrics()
    metrics.add(kind="eval", protocol="propagation_jf", score=(mean_j + mean_f) / 2.0,
                j=mean_j, f=mean_f, seed=seed)
    metrics.write_jsonl(run.artifact("metrics.jsonl"))
    with open(run.artifact("propagation.csv"), "w", encoding="utf-8") as fh:
        fh.write("sequence,j,f\n")
        for seq_idx, j, f in rows:
            fh.write(f"{seq_idx},{j},{f}\n")
        fh.write(f"mean,{mean_j},{mean_f}\n")
    run.finish()
    return EXIT_OK


def _final_epoch_mean_loss(metrics: Metrics) -> float:
    steps = [r for r in metrics.rows if r.get("kind") == "step"]
    if not steps:
        return float("nan")
    last_epoch = max(r["epoch"] for r in steps)
    vals = [r["loss_total"] for r in steps if r["epoch"] == last_epoch]
    return float(np.mean(vals))


def _cmd_crop_stats(args) -> int:
    cfg, text = _load_config(args)
    cs = cfg.cropstats_config()
    seed = _seed_of(cfg, args)
    run = _Run("crop-stats", args.out, args.config, text, seed)
    for name, lo, hi in cs.preset_specs():
        rng = np.random.default_rng([seed, 0xC20B])
        spec = CropSpec((lo, hi), cs.source_side)
        left, right, counts = iou_histogram(rng, cs.source_side, cs.source_side, spec,
                                            cs.draws, cs.bins)
        with open(run.artifact(f"hist_{name}.csv"), "w", encoding="utf-8") as fh:
            fh.write("bin_left,bin_right,count\n")
            for l, r, c in zip(left, right, counts):
                fh.write(f"{l},{r},{c}\n")
    if cs.iou_grid:
        ev = cfg.eval_config()
        probe_ds = load_dataset(ev.probe_dataset) if ev.probe_dataset else None
        with open(run.artifact("iou_threshold.csv"), "w", encoding="utf-8") as fh:
            fh.write("iou_max,final_loss,probe_accuracy\n")
            for thr in cs.iou_grid:
                train_cfg = cfg.train_config()
                train_cfg.iou_max = thr
                cell = run.out / f"iou_{thr:g}"
                state = pretrain(train_cfg, cell)
                state.metrics.write_jsonl(cell / "metrics.jsonl")
                loss = _final_epoch_mean_loss(state.metrics)
                acc = ""
                if probe_ds is not None:
                    acc = probe_checkpoint(cell / "checkpoint.kmco", probe_ds, ev,
                                           train_cfg.seed)
                fh.write(f"{thr},{loss},{acc}\n")
    run.finish()
    return EXIT_OK


def _ablate_cell(payload: tuple) -> dict:
    values, overrides, variant, seed, out_dir, config_text = payload
    cfg = Config(dict(values), dict(overrides)).with_variant(variant)
    train_cfg = cfg.train_config()
    train_cfg.seed = seed
    cell = Path(out_dir)
    state = pretrain(train_cfg, cell)
    state.metrics.write_jsonl(cell / "metrics.jsonl")
    state.metrics.write_summary_csv(cell / "summary.csv")
    row = {
        "variant": variant,
        "seed": seed,
        "final_loss": _final_epoch_mean_loss(state.metrics),
        "probe_accuracy": "",
    }
    ev = cfg.eval_config()
    if ev.probe_dataset:
        ds = load_dataset(ev.probe_dataset)
        row["probe_accuracy"] = probe_checkpoint(cell / "checkpoint.kmco", ds, ev, seed)
    return row


def _cmd_ablate(args) -> int:
    cfg, text = _load_config(args)
    ab = cfg.ablate_config()
    names = ab.variant_names()
    if not names:
        raise ConfigError("ablate: no variants declared")
    seed = _seed_of(cfg, args)
    run = _Run("ablate", args.out, args.config, text, seed)
    payloads = []
    for variant in names:
        for s in ab.seeds:
            cell_dir = run.out / f"cell_{variant}_s{s}"
            payloads.append((cfg.values, cfg.variant_overrides, variant, int(s),
                             str(cell_dir), text))
    threads = max(1, int(os.environ.get("KMCO_THREADS", "1")))
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(_ablate_cell, payloads))
    else:
        rows = [_ablate_cell(p) for p in payloads]
    with open(run.artifact("ablation.csv"), "w", encoding="utf-8") as fh:
        fh.write("variant,seed,final_loss,probe_accuracy\n")
        for row in rows:
            fh.write(f"{row['variant']},{row['seed']},{row['final_loss']},"
                     f"{row['probe_accuracy']}\n")
    with open(run.artifact("ablation_summary.csv"), "w", encoding="utf-8") as fh:
        fh.write("variant,mean_final_loss,mean_probe_accuracy\n")
        for variant in names:
            sel = [r for r in rows if r["variant"] == variant]
            losses = [r["final_loss"] for r in sel]
            accs = [r["probe_accuracy"] for r in sel if r["probe_accuracy"] != ""]
            mean_acc = float(np.mean(accs)) if accs else ""
            fh.write(f"{variant},{float(np.mean(losses))},{mean_acc}\n")
    run.finish()
    return EXIT_OK


def _cmd_report(args) -> int:
    run = _Run("report", args.out, None, None, None)
    lines_txt = []
    rows = []
    for run_dir in args.runs:
        metrics_path = Path(run_dir) / "metrics.jsonl"
        if not metrics_path.exists():
            raise FileNotFoundError(f"no metrics.jsonl under {run_dir}")
        events = [json.loads(line) for line in metrics_path.read_text().splitlines() if line]
        steps = [e for e in events if e.get("kind") == "step"]
        evals = [e for e in events if e.get("kind") == "eval"]
        final_loss = ""
        if steps:
            last_epoch = max(e["epoch"] for e in steps)
            final_loss = float(np.mean([e["loss_total"] for e in steps
                                        if e["epoch"] == last_epoch]))
        name = Path(run_dir).name
        rows.append((name, len(steps), final_loss,
                     ";".join(f"{e['protocol']}={e['score']:.6f}" for e in evals)))
        lines_txt.append(f"run {name}: steps={len(steps)} final_loss={final_loss}")
        for e in evals:
            lines_txt.append(f"  {e['protocol']}: {e['score']:.6f}")
    with open(run.artifact("report.csv"), "w", encoding="utf-8") as fh:
        fh.write("run,steps,final_epoch_mean_loss,eval_scores\n")
        for name, n_steps, loss, scores in rows:
            fh.write(f"{name},{n_steps},{loss},{scores}\n")
    (run.out / "report.txt").write_text("\n".join(lines_txt) + "\n", encoding="utf-8")
    run.artifacts.append(str(run.out / "report.txt"))
    run.finish()
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument plumbing


def _add_common(sub) -> None:
    sub.add_argument("--config", required=True, help="path to the experiment config file")
    sub.add_argument("--out", required=True, help="output directory for this run")
    sub.add_argument("--seed", type=int, default=None, help="override the configured seed")
    sub.add_argument("--set", action="append", metavar="KEY=VALUE",
                     help="inline config override, applied after the file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="knnmoco")
    subs = parser.add_subparsers(dest="command", required=True)
    for name, fn in [
        ("gen-data", _cmd_gen_data),
        ("pretrain", _cmd_pretrain),
        ("probe", _cmd_probe),
        ("segment-retrieval", _cmd_segment_retrieval),
        ("propagate", _cmd_propagate),
        ("crop-stats", _cmd_crop_stats),
        ("ablate", _cmd_ablate),
    ]:
        sub = subs.add_parser(name)
        _add_common(sub)
        sub.set_defaults(handler=fn)
    report = subs.add_parser("report")
    report.add_argument("--out", required=True)
    report.add_argument("runs", nargs="+", help="run directories containing metrics.jsonl")
    report.set_defaults(handler=_cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except CheckpointFormatError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except KnnMocoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


def entry() -> None:  # console-script shim
    sys.exit(main())
