"""``reidaug`` command line: one subcommand per pipeline stage.

Every command reads the same config file, writes into ``output_dir`` and
leaves a resolved-config snapshot next to its outputs.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import augment, baseline, evalkit, experiment, gan, grids
from . import neuralops as nops
from .config import ConfigError, RunConfig, dump_config, load_config, parse_overrides
from .data import (ChannelStats, DataError, Dataset, channel_means, load_directory, save_dataset,
                   split_query_gallery, synth_corpus, write_manifest)
from .occlude import occlude_dataset

log = logging.getLogger("reidaug")

EXIT_OK, EXIT_CONFIG, EXIT_TRAINING, EXIT_IO = 0, 2, 3, 4
TEST_OCCLUSION_STREAM = 0x7E57


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _stage_dir(cfg: RunConfig, name: str) -> Path:
    d = Path(cfg.output_dir) / name
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.resolved.yaml").write_text(dump_config(cfg), encoding="utf-8")
    return d


def _write_csv(path: Path, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in columns])


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_train(cfg: RunConfig) -> Dataset:
    d = cfg.data
    if d.train_dir:
        return load_directory(d.train_dir, "train")
    return synth_corpus(d.synth_ids, d.synth_imgs_per_id, d.synth_height, d.synth_width, d.synth_seed,
                        n_cameras=d.synth_cameras)


def load_test(cfg: RunConfig, stats: ChannelStats) -> tuple[Dataset, Dataset]:
    d = cfg.data
    if d.query_dir:
        query, gallery = load_directory(d.query_dir, "query"), load_directory(d.gallery_dir, "gallery")
    else:
        test = synth_corpus(d.test_ids, d.test_imgs_per_id, d.synth_height, d.synth_width, d.test_seed,
                            n_cameras=d.synth_cameras, first_id=d.synth_ids)
        query, gallery = split_query_gallery(test, d.queries_per_id)
    if cfg.eval.occlude_test:
        occ = cfg.occlusion
        query = experiment.occluded_copy(query, _reseed(occ, cfg.eval.seed, 1), stats)
        gallery = experiment.occluded_copy(gallery, _reseed(occ, cfg.eval.seed, 2), stats)
    return query, gallery


def _reseed(occ, seed: int, which: int):
    return replace(occ, seed=int(np.random.SeedSequence([seed, TEST_OCCLUSION_STREAM, which]).generate_state(1)[0]))


def _stats(cfg: RunConfig, train: Dataset) -> ChannelStats:
    return channel_means(train.without_junk())


def _latest_checkpoint(ckpt_dir: Path) -> Path | None:
    found = sorted(ckpt_dir.glob("epoch_*.ckpt"))
    return found[-1] if found else None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_stats(cfg: RunConfig, args) -> int:
    out = _stage_dir(cfg, "stats")
    stats = _stats(cfg, load_train(cfg))
    _write_json(out / "stats.json", {"mean_r": stats.mean_r, "mean_g": stats.mean_g,
                                     "mean_b": stats.mean_b, "count": stats.count})
    print(f"channel means R={stats.mean_r:.4f} G={stats.mean_g:.4f} B={stats.mean_b:.4f} over {stats.count} pixels")
    return EXIT_OK


def cmd_occlude(cfg: RunConfig, args) -> int:
    out = _stage_dir(cfg, "occlude")
    train = load_train(cfg)
    pairs = occlude_dataset(train, cfg.occlusion, _stats(cfg, train))
    records = []
    for s, p in zip(train.samples, pairs):
        r = p.rect
        records.append((s.origin_path or "", s.identity, s.camera, r.x, r.y, r.w, r.h))
    with open(out / "rects.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write("\t".join(str(v) for v in rec) + "\n")
    paths = grids.save_column_grids(out, [(p.original, p.occluded) for p in pairs])
    print(f"{len(pairs)} occluded pairs, {len(paths)} grids in {out}")
    return EXIT_OK


def cmd_train_gan(cfg: RunConfig, args) -> int:
    out = _stage_dir(cfg, "gan")
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    train = load_train(cfg)
    stats = _stats(cfg, train)
    state = None
    if args.resume:
        latest = _latest_checkpoint(ckpt_dir)
        if latest is not None:
            state = gan.load_state(latest, cfg.gan)
            log.info("resuming from %s (epoch %d)", latest, state.epoch)

    def on_epoch(st: gan.GanState) -> None:
        st.save(ckpt_dir / f"epoch_{st.epoch:04d}.ckpt", cfg.gan)
        _write_csv(out / "train_log.csv", st.log, ["epoch", "d_loss", "g_adv_loss", "g_l2_loss"])

    g, _, history = gan.train_gan(train, cfg.occlusion, stats, cfg.gan, state=state, on_epoch=on_epoch)
    gan.save_generator(g, out / "generator.ckpt")
    _write_csv(out / "train_log.csv", history, ["epoch", "d_loss", "g_adv_loss", "g_l2_loss"])
    if history:
        last = history[-1]
        print(f"trained {last['epoch']} epochs: d={last['d_loss']:.4f} adv={last['g_adv_loss']:.4f} "
              f"l2={last['g_l2_loss']:.5f}")
    return EXIT_OK


def _generator(cfg: RunConfig) -> gan.GeneratorNet:
    path = Path(cfg.output_dir) / "gan" / "generator.ckpt"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run train-gan first")
    return gan.load_generator(path)


def cmd_generate(cfg: RunConfig, args) -> int:
    m = cfg.augment.m if args.m is None else args.m
    if m < 0:
        raise ConfigError("m must be non-negative")
    out = _stage_dir(cfg, "augmented")
    train = load_train(cfg)
    stats = _stats(cfg, train)
    g = _generator(cfg)
    aug_plan = augment.plan(len(train), m, cfg.augment.seed)
    aug = augment.build_augmented_set(train, g, aug_plan, cfg.occlusion, stats)

    img_dir = out / "images"
    if img_dir.exists():
        shutil.rmtree(img_dir)
    records = []
    real = Dataset(aug.samples[:len(train)], "train")
    if cfg.data.train_dir:
        src = Path(cfg.data.train_dir)
        for s in real.samples:
            dst = img_dir / s.origin_path
            dst.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(src / s.origin_path, dst)
            records.append((s.origin_path, s.identity, s.camera))
    else:
        records += save_dataset(real, img_dir)
    records += save_dataset(Dataset(aug.samples[len(train):], "train"), img_dir)
    (img_dir / "manifest.tsv").unlink(missing_ok=True)
    write_manifest(img_dir / "manifest.tsv", records)

    show = aug_plan.order()[:cfg.augment.grid_count]
    columns = []
    for i, v in show:
        sub = Dataset((train.samples[i],), "train")
        ds, pairs = gan.generate_deoccluded(g, sub, cfg.occlusion, stats, aug_plan.seed, variant=v,
                                            indices=[i], return_pairs=True)
        columns.append((pairs[0].occluded, ds.samples[0].pixels, pairs[0].original))
    if columns:
        grids.save_column_grids(out / "grids", columns)
    print(f"augmented set: {len(train)} real + {m} generated = {len(aug)} samples in {img_dir}")
    return EXIT_OK


def _baseline_train_set(cfg: RunConfig) -> Dataset:
    manifest = Path(cfg.output_dir) / "augmented" / "images" / "manifest.tsv"
    if cfg.augment.use_for_baseline and manifest.exists():
        return load_directory(manifest.parent, "train")
    return load_train(cfg)


def cmd_train_baseline(cfg: RunConfig, args) -> int:
    out = _stage_dir(cfg, "baseline")
    train = _baseline_train_set(cfg)
    net, classes, history = baseline.train_classifier(train, cfg.baseline)
    baseline.save_classifier(net, classes, out / "classifier.ckpt")
    _write_csv(out / "train_log.csv", history, ["epoch", "lr", "loss", "accuracy"])
    print(f"trained on {len(train)} samples / {len(classes.identities)} identities; "
          f"final accuracy {history[-1]['accuracy']:.3f}")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, args) -> int:
    out = _stage_dir(cfg, "eval")
    path = Path(cfg.output_dir) / "baseline" / "classifier.ckpt"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run train-baseline first")
    net, _ = baseline.load_classifier(path)
    stats = _stats(cfg, load_train(cfg))
    query, gallery = load_test(cfg, stats)
    protocol = cfg.eval.protocol()
    qf, qm = baseline.extract_features(net, query), experiment.meta(query)
    gf, gm = baseline.extract_features(net, gallery), experiment.meta(gallery)
    if protocol.query_mode == "multi":
        qf, qm = evalkit.pool_multi_query(qf, qm, protocol.pooling)
    dist = evalkit.pairwise_distances(qf, gf)
    report = evalkit.evaluate(dist, qm, gm, protocol, cfg.eval.seed)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    print(f"mAP={report.mAP:.4f} rank1={report.rank(1):.4f} rank5={report.rank(5):.4f} "
          f"rank10={report.rank(10):.4f} (excluded queries: {report.excluded_queries})")
    if cfg.eval.rerank:
        e = cfg.eval
        rd = evalkit.rerank_k_reciprocal(dist, evalkit.pairwise_distances(qf, qf), evalkit.pairwise_distances(gf, gf),
                                         e.k1, e.k2, e.rerank_lambda)
        rr = evalkit.evaluate(rd, qm, gm, protocol, e.seed)
        (out / "report_reranked.json").write_text(rr.to_json(), encoding="utf-8")
        print(f"re-ranked: mAP={rr.mAP:.4f} rank1={rr.rank(1):.4f}")
    return EXIT_OK


def cmd_sensitivity(cfg: RunConfig, args) -> int:
    out = _stage_dir(cfg, "sensitivity")
    train = load_train(cfg)
    stats = _stats(cfg, train)
    g = _generator(cfg)
    query, gallery = load_test(cfg, stats)
    n = len(train)
    if args.m_values:
        m_values = [int(v) for v in args.m_values.split(",")]
    else:
        m_values = list(cfg.sensitivity.m_values) or [0, n, 2 * n]
    if any(m < 0 for m in m_values):
        raise ConfigError("M values must be non-negative")
    rows = experiment.sensitivity(train, query, gallery, g, m_values, cfg.occlusion, stats, cfg.baseline,
                                  cfg.eval.protocol(), cfg.augment.seed)
    _write_csv(out / "sensitivity.csv", rows, ["M", "n_train", "mAP", "rank1", "rank5", "rank10"])
    for r in rows:
        print(f"M={r['M']:>6d}  mAP={r['mAP']:.4f}  rank1={r['rank1']:.4f}")
    return EXIT_OK


COMMANDS = {
    "stats": cmd_stats,
    "occlude": cmd_occlude,
    "train-gan": cmd_train_gan,
    "generate": cmd_generate,
    "train-baseline": cmd_train_baseline,
    "evaluate": cmd_evaluate,
    "sensitivity": cmd_sensitivity,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reidaug", description="Random-occlusion GAN augmentation for person re-ID")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML or JSON run configuration")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value, e.g. --set gan.epochs=5")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "train-gan":
            p.add_argument("--resume", action="store_true", help="continue from the latest epoch checkpoint")
        if name == "generate":
            p.add_argument("--m", type=int, default=None, help="number of generated images (overrides augment.m)")
        if name == "sensitivity":
            p.add_argument("--m-values", default=None, help="comma-separated M values")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        cfg = load_config(args.config, parse_overrides(args.set))
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except gan.TrainingDiverged as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (OSError, DataError, nops.CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
