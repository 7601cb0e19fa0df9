"""Command-line entry point: ``tft {extract,train,eval,ablate,dump-attention}``.

Each command takes ``--config FILE`` (default ``$TFT_CONFIG``) and any number
of ``--section.key=value`` overrides, writes everything under ``--out`` and
records the resolved configuration there.  Exit status is 0 on success, 1 on
a data or runtime error and 2 on a usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from collections import Counter
from pathlib import Path
from typing import Sequence

import numpy as np

from . import audio_features as af
from .config import ConfigError, RunConfig, load_config
from .evaluation import (
    DatasetManifest,
    InputError,
    ManifestEntry,
    ablation_csv,
    format_ablation_report,
    format_protocol_report,
    protocol_csv,
    read_manifest,
    run_ablations,
    run_protocol,
)
from .model import ConfigError as ModelConfigError
from .model import LabelSet, TimeFrequencyTransformer
from .nncore.checkpoint import FormatError
from .nncore.tensor import NumericError, ShapeError, Tensor
from .training import checkpoint_load, checkpoint_save, fit, restore, stack_segments

logger = logging.getLogger("tftransformer")

INDEX_NAME = "index.csv"
INDEX_COLUMNS = ("utterance_id", "cache_file", "audio_path", "speaker_id", "session_id", "label", "n_segments")
CACHE_SUFFIX = ".tftf"

USAGE_ERRORS = (ConfigError, ModelConfigError, af.ConfigError)
RUN_ERRORS = (InputError, af.InputError, FormatError, af.FormatError, NumericError, ShapeError, OSError, RuntimeError)


class UsageError(Exception):
    pass


# ----------------------------------------------------------------------
# feature directory


def write_index(out_dir: Path, rows: Sequence[dict]) -> None:
    with open(out_dir / INDEX_NAME, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, INDEX_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def load_feature_dir(features_dir: str | Path, labels: LabelSet) -> tuple[DatasetManifest, dict[str, list]]:
    """Manifest and segments recorded by ``extract`` in ``features_dir``."""
    features_dir = Path(features_dir)
    index = features_dir / INDEX_NAME
    if not index.exists():
        raise InputError(f"{features_dir} has no {INDEX_NAME}; run `tft extract` first")
    entries, features = [], {}
    with open(index, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            try:
                label = labels.lookup(row["label"]).index
            except ValueError as exc:
                raise InputError(f"{index}: {exc}") from None
            uid = row["utterance_id"]
            entries.append(ManifestEntry(uid, row["audio_path"], row["speaker_id"], row["session_id"], label))
            features[uid] = af.read_feature_cache(features_dir / row["cache_file"])
    if not entries:
        raise InputError(f"{index} lists no utterances")
    return DatasetManifest(entries, labels), features


def _all_segments(manifest: DatasetManifest, features: dict) -> list:
    return [s for uid in manifest.ids() for s in features[uid]]


# ----------------------------------------------------------------------
# commands


def cmd_extract(args, cfg: RunConfig) -> int:
    labels = cfg.labels()
    feat_cfg = cfg.feature_config()
    manifest = read_manifest(args.manifest, labels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out)
    force = args.force or cfg.get("io", "force")
    rows, failures = [], []
    histogram: Counter[str] = Counter()
    skipped = 0
    for entry in manifest.entries:
        cache = out / f"{entry.utterance_id}{CACHE_SUFFIX}"
        try:
            segments = None
            if cache.exists() and not force:
                try:
                    segments = af.read_feature_cache(cache)
                    skipped += 1
                except af.FormatError:
                    logger.warning("%s: unreadable cache, re-extracting", cache)
            if segments is None:
                wave = af.read_wav(entry.path)
                if wave.sample_rate_hz != feat_cfg.sample_rate_hz:
                    raise af.InputError(
                        f"sample rate {wave.sample_rate_hz} Hz, expected {feat_cfg.sample_rate_hz} Hz"
                    )
                segments = af.extract_segments(wave, entry.utterance_id, entry.label, feat_cfg)
                af.write_feature_cache(segments, cache)
        except (OSError, af.InputError, af.FormatError, ValueError) as exc:
            failures.append((entry.utterance_id, str(exc)))
            logger.error("%s (%s): %s", entry.utterance_id, entry.path, exc)
            continue
        name = labels.names[entry.label]
        histogram[name] += len(segments)
        rows.append(
            {
                "utterance_id": entry.utterance_id,
                "cache_file": cache.name,
                "audio_path": entry.path,
                "speaker_id": entry.speaker_id,
                "session_id": entry.session_id,
                "label": name,
                "n_segments": len(segments),
            }
        )
    write_index(out, rows)
    lines = [f"utterances: {len(rows)} extracted ({skipped} from existing cache), {len(failures)} failed"]
    lines.append("segments per class:")
    lines += [f"  {name}: {histogram.get(name, 0)}" for name in labels.names]
    lines.append(f"  total: {sum(histogram.values())}")
    for uid, msg in failures:
        lines.append(f"failed {uid}: {msg}")
    summary = "\n".join(lines) + "\n"
    (out / "summary.txt").write_text(summary, encoding="utf-8")
    sys.stdout.write(summary)
    return 1 if failures else 0


def cmd_train(args, cfg: RunConfig) -> int:
    labels = cfg.labels()
    manifest, features = load_feature_dir(args.features, labels)
    X, y = stack_segments(_all_segments(manifest, features))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out)
    train_cfg = cfg.train_config(checkpoint_dir=str(out / "checkpoints"))
    extra = {"labels": list(labels.names)}
    if args.resume:
        model, optimizer, start = restore(checkpoint_load(args.resume), train_cfg)
        if model.cfg != cfg.model_config():
            raise UsageError(f"checkpoint {args.resume} was trained with a different model configuration")
    else:
        model = TimeFrequencyTransformer(cfg.model_config(), seed=train_cfg.seed)
        optimizer, start = None, 0
    logger.info("training %s (%d parameters) on %d segments", model.cfg.ablation_name, model.num_parameters(), len(X))
    optimizer, history = fit(model, X, y, train_cfg, optimizer, start, out / "train_log.csv")
    final_epoch = history[-1].epoch if history else start
    checkpoint_save(model, optimizer, final_epoch, out / "final.ckpt", extra)
    if history:
        last = history[-1]
        print(f"epoch {last.epoch}: mean_loss {last.mean_loss:.4f} train_war {100 * last.train_war:.2f}")
    print(f"checkpoint: {out / 'final.ckpt'}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    labels = cfg.labels()
    manifest, features = load_feature_dir(args.features, labels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out)
    result = run_protocol(
        manifest,
        features,
        cfg.model_config(),
        cfg.train_config(checkpoint_dir=str(out / "folds")),
        cfg.get("eval", "mode"),
        cfg.get("eval", "jobs"),
    )
    report = format_protocol_report(result, labels)
    (out / "report.txt").write_text(report, encoding="utf-8")
    (out / "results.csv").write_text(protocol_csv(result, labels), encoding="utf-8")
    with open(out / "predictions.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["utterance_id", "fold", "test_unit", "true", "predicted"])
        for i, fold in enumerate(result.folds):
            for uid, t, p in zip(fold.utterance_ids, fold.true, fold.predicted):
                w.writerow([uid, i, fold.test_unit, labels.names[t], labels.names[p]])
    sys.stdout.write(report)
    return 0


def cmd_ablate(args, cfg: RunConfig) -> int:
    labels = cfg.labels()
    manifest, features = load_feature_dir(args.features, labels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out)
    rows = run_ablations(
        manifest,
        features,
        cfg.model_config(),
        cfg.train_config(),
        cfg.get("eval", "mode"),
        cfg.only() or None,
        cfg.get("eval", "jobs"),
    )
    preset = cfg.get("features", "labels").lower()
    report = format_ablation_report(rows, preset.upper() if preset in ("iemocap", "casia") else "corpus")
    (out / "ablation.txt").write_text(report, encoding="utf-8")
    (out / "ablation.csv").write_text(ablation_csv(rows), encoding="utf-8")
    sys.stdout.write(report)
    return 0


AXES = {
    "time": ("frame", "frame"),
    "freq": ("band", "band"),
    "fusion": ("reduced_band", "reduced_band"),
}


def _save_matrix(path: Path, m: np.ndarray) -> None:
    np.savetxt(path, m, delimiter=",", fmt="%.9g")


def cmd_dump_attention(args, cfg: RunConfig) -> int:
    ckpt = checkpoint_load(args.checkpoint)
    model, _, _ = restore(ckpt)
    model.eval()
    uid, _, seg = args.sample_id.partition(":")
    seg_index = int(seg) if seg else 0
    cache = Path(args.features) / f"{uid}{CACHE_SUFFIX}"
    if not cache.exists():
        raise InputError(f"unknown sample {uid!r}: no cache {cache}")
    segments = [s for s in af.read_feature_cache(cache) if s.segment_index == seg_index]
    if not segments:
        raise InputError(f"utterance {uid!r} has no segment {seg_index}")
    segment = segments[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out)
    probs, trace = model(Tensor(segment.values[None, None].astype(model.dtype)))
    files = [{"file": "logmel.csv", "kind": "logmel", "rows": "band", "cols": "frame", "shape": list(segment.values.shape)}]
    _save_matrix(out / "logmel.csv", segment.values)
    for encoder, maps in trace.attention.items():
        rows_axis, cols_axis = AXES[encoder]
        for layer, attn in enumerate(maps):
            heads = attn[0]
            variants = [("mean", None, heads.mean(axis=0))]
            variants += [(f"head{h}", h, heads[h]) for h in range(heads.shape[0])]
            for tag, head, matrix in variants:
                name = f"{encoder}_layer{layer}_{tag}.csv"
                _save_matrix(out / name, matrix)
                files.append(
                    {
                        "file": name,
                        "kind": "attention",
                        "encoder": encoder,
                        "layer": layer,
                        "head": head,
                        "rows": f"query_{rows_axis}",
                        "cols": f"key_{cols_axis}",
                        "shape": list(matrix.shape),
                    }
                )
    meta = {
        "sample_id": args.sample_id,
        "utterance_id": uid,
        "segment_index": seg_index,
        "label": int(segment.label),
        "checkpoint": str(args.checkpoint),
        "architecture": model.cfg.ablation_name,
        "probabilities": [float(p) for p in probs.data[0]],
        "files": files,
    }
    (out / "attention.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {len(files)} matrices to {out}")
    return 0


# ----------------------------------------------------------------------
# argument handling


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tft", description="Speech emotion recognition with time, frequency and fused attention branches.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="config file (default: $TFT_CONFIG)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="shorthand for --train.seed")
        p.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    def training(p: argparse.ArgumentParser) -> None:
        p.add_argument("--epochs", type=int, help="shorthand for --train.epochs")
        p.add_argument("--lr", type=float, help="shorthand for --train.lr")
        p.add_argument("--batch-size", type=int, help="shorthand for --train.batch_size")

    p = sub.add_parser("extract", help="audio -> log-Mel feature caches")
    p.add_argument("manifest", help="CSV with path,speaker_id,session_id,label")
    p.add_argument("--force", action="store_true", help="overwrite existing caches")
    common(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train one model on all extracted features")
    p.add_argument("features", help="directory written by extract")
    p.add_argument("--resume", help="checkpoint to continue from")
    common(p)
    training(p)
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "cross-validated WAR/UAR"), ("ablate", cmd_ablate, "branch ablations")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("features", help="directory written by extract")
        p.add_argument("--mode", choices=["speaker", "session"], help="hold out speakers or sessions")
        p.add_argument("--jobs", type=int, help="folds trained in parallel")
        if name == "ablate":
            p.add_argument("--only", help="comma-separated subset of T+F,T+TF,F+TF,T+F+TF")
        common(p)
        training(p)
        p.set_defaults(func=func)

    p = sub.add_parser("dump-attention", help="export attention maps for one sample")
    p.add_argument("checkpoint")
    p.add_argument("features", help="directory written by extract")
    p.add_argument("sample_id", help="utterance id, optionally utterance_id:segment_index")
    common(p)
    p.set_defaults(func=cmd_dump_attention)
    return parser


def parse_overrides(extra: Sequence[str]) -> list[tuple[str, str]]:
    """``--section.key=value`` or ``--section.key value`` pairs."""
    pairs = []
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok.split("=", 1)[0]:
            raise UsageError(f"unrecognized argument {tok!r}")
        if "=" in tok:
            key, value = tok[2:].split("=", 1)
        elif i + 1 < len(extra):
            key, value = tok[2:], extra[i + 1]
            i += 1
        else:
            raise UsageError(f"{tok} needs a value")
        pairs.append((key, value))
        i += 1
    return pairs


SHORTHANDS = {
    "seed": "train.seed",
    "epochs": "train.epochs",
    "lr": "train.lr",
    "batch_size": "train.batch_size",
    "mode": "eval.mode",
    "jobs": "eval.jobs",
    "only": "eval.only",
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        overrides = parse_overrides(extra)
        overrides += [(dotted, str(getattr(args, attr))) for attr, dotted in SHORTHANDS.items() if getattr(args, attr, None) is not None]
        cfg = load_config(args.config, overrides)
        # fail on a bad configuration before any output is written
        cfg.labels(), cfg.feature_config(), cfg.model_config(), cfg.train_config()
        if not args.verbose:
            logging.getLogger().setLevel(cfg.get("io", "log_level").upper())
        return args.func(args, cfg)
    except (UsageError, *USAGE_ERRORS) as exc:
        print(f"tft {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (*RUN_ERRORS, ValueError) as exc:
        print(f"tft {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
