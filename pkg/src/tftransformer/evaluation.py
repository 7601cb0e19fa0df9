"""Cross-validation protocols, WAR/UAR metrics and result reports.

Folds hold out one speaker (or one session) at a time.  Test predictions from
all folds are pooled before the overall metrics are computed.
"""

from __future__ import annotations

import csv
import io
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .audio_features import LogMelSegment
from .model import ABLATIONS, LabelSet, ModelConfig, TimeFrequencyTransformer
from .training import TrainConfig, fit, stack_segments

logger = logging.getLogger(__name__)

MANIFEST_COLUMNS = ("path", "speaker_id", "session_id", "label")


class ConfigError(ValueError):
    pass


class InputError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    utterance_id: str
    path: str
    speaker_id: str
    session_id: str
    label: int


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    labels: LabelSet

    def __post_init__(self):
        ids = [e.utterance_id for e in self.entries]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise InputError(f"duplicate utterance ids: {dupes[:5]}")
        for e in self.entries:
            if not e.speaker_id or not e.session_id:
                raise InputError(f"{e.utterance_id}: empty speaker or session id")
            if not 0 <= e.label < len(self.labels):
                raise InputError(f"{e.utterance_id}: label {e.label} out of range")

    def __len__(self) -> int:
        return len(self.entries)

    def ids(self) -> list[str]:
        return [e.utterance_id for e in self.entries]


def read_manifest(path: str | os.PathLike, labels: LabelSet, id_from: str = "stem") -> DatasetManifest:
    """Parse ``path,speaker_id,session_id,label`` rows (optional header line).

    Utterance ids are the file stems; relative audio paths resolve against the
    manifest's directory.
    """
    base = Path(path).parent
    entries = []
    with open(path, newline="", encoding="utf-8") as f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            if not row or row[0].startswith("#"):
                continue
            if lineno == 1 and tuple(c.strip() for c in row) == MANIFEST_COLUMNS:
                continue
            if len(row) != 4:
                raise InputError(f"{path}:{lineno}: expected 4 columns, got {len(row)}")
            audio, speaker, session, label = (c.strip() for c in row)
            try:
                label_idx = labels.lookup(label).index
            except ValueError as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from None
            audio_path = Path(audio) if Path(audio).is_absolute() else base / audio
            uid = Path(audio).stem if id_from == "stem" else audio
            entries.append(ManifestEntry(uid, str(audio_path), speaker, session, label_idx))
    return DatasetManifest(entries, labels)


def write_manifest(path: str | os.PathLike, manifest: DatasetManifest) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(MANIFEST_COLUMNS)
        for e in manifest.entries:
            w.writerow([e.path, e.speaker_id, e.session_id, manifest.labels.names[e.label]])


# ----------------------------------------------------------------------
# folds


@dataclass
class Fold:
    test_unit: str
    train_ids: list[str]
    test_ids: list[str]


@dataclass
class FoldPlan:
    folds: list[Fold]
    mode: str


def build_folds(manifest: DatasetManifest, mode: str = "speaker") -> FoldPlan:
    """One fold per speaker (or session), ordered by unit id."""
    if mode not in ("speaker", "session"):
        raise ConfigError(f"unknown fold mode {mode!r}")
    unit_of = {
        e.utterance_id: (e.speaker_id if mode == "speaker" else e.session_id) for e in manifest.entries
    }
    units = sorted(set(unit_of.values()))
    if len(units) < 2:
        raise ConfigError(f"leave-one-{mode}-out needs at least 2 distinct {mode}s, found {len(units)}")
    ids = manifest.ids()
    folds = [
        Fold(
            unit,
            [u for u in ids if unit_of[u] != unit],
            [u for u in ids if unit_of[u] == unit],
        )
        for unit in units
    ]
    return FoldPlan(folds, mode)


# ----------------------------------------------------------------------
# metrics


@dataclass
class Metrics:
    confusion: np.ndarray  # rows = true class, cols = predicted
    war: float
    uar: float
    absent_classes: list[int] = field(default_factory=list)

    @property
    def total(self) -> int:
        return int(self.confusion.sum())


def compute_metrics(true_labels: Sequence[int], predicted_labels: Sequence[int], n_classes: int) -> Metrics:
    """Confusion matrix, WAR (overall accuracy) and UAR (mean per-class recall).

    Classes with no true samples are left out of the UAR mean and reported in
    ``absent_classes``.
    """
    t = np.asarray(true_labels, dtype=np.int64)
    p = np.asarray(predicted_labels, dtype=np.int64)
    if t.shape != p.shape or t.ndim != 1:
        raise InputError("true and predicted labels must be equal-length 1-D sequences")
    if t.size == 0:
        raise InputError("no labels to score")
    for arr in (t, p):
        if arr.min() < 0 or arr.max() >= n_classes:
            raise InputError(f"label out of range [0, {n_classes})")
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (t, p), 1)
    support = confusion.sum(axis=1)
    present = support > 0
    recalls = np.diag(confusion)[present] / support[present]
    war = float(np.trace(confusion) / confusion.sum())
    uar = float(recalls.mean())
    return Metrics(confusion, war, uar, np.flatnonzero(~present).tolist())


def aggregate_utterance(segment_probs: Sequence[np.ndarray]) -> int:
    """Mean of segment probability vectors, then argmax (lowest index on ties)."""
    if len(segment_probs) == 0:
        raise InputError("no segments to aggregate")
    mean = np.mean(np.asarray(segment_probs, dtype=np.float64), axis=0)
    return int(np.argmax(mean))


# ----------------------------------------------------------------------
# protocol


@dataclass
class FoldResult:
    test_unit: str
    metrics: Metrics
    utterance_ids: list[str]
    true: list[int]
    predicted: list[int]
    final_train_war: float
    final_loss: float


@dataclass
class ProtocolResult:
    mode: str
    folds: list[FoldResult]
    pooled: Metrics
    config_name: str = "T+F+TF"
    n_parameters: int = 0


def _run_fold(
    fold: Fold,
    fold_index: int,
    features: Mapping[str, list[LogMelSegment]],
    labels: Mapping[str, int],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
) -> FoldResult:
    cfg = replace(train_cfg, seed=train_cfg.seed + fold_index)
    if train_cfg.checkpoint_dir:
        cfg = replace(cfg, checkpoint_dir=str(Path(train_cfg.checkpoint_dir) / f"fold_{fold_index:02d}"))
    train_segments = [s for u in fold.train_ids for s in features[u]]
    X, y = stack_segments(train_segments)
    model = TimeFrequencyTransformer(model_cfg, seed=cfg.seed)
    _, history = fit(model, X, y, cfg)
    true, pred = [], []
    for uid in fold.test_ids:
        segs = features[uid]
        if not segs:
            raise InputError(f"utterance {uid} has no feature segments")
        Xt, _ = stack_segments(segs)
        probs = model.predict_proba(Xt, batch_size=train_cfg.batch_size)
        true.append(labels[uid])
        pred.append(aggregate_utterance(list(probs)))
    metrics = compute_metrics(true, pred, model_cfg.n_classes)
    last = history[-1] if history else None
    return FoldResult(
        fold.test_unit,
        metrics,
        list(fold.test_ids),
        true,
        pred,
        last.train_war if last else float("nan"),
        last.mean_loss if last else float("nan"),
    )


def _run_fold_job(args) -> FoldResult:
    fold, index = args[0], args[1]
    try:
        return _run_fold(*args)
    except Exception as exc:
        raise RuntimeError(f"fold {index} (test unit {fold.test_unit}): {exc}") from exc


def run_protocol(
    manifest: DatasetManifest,
    features: Mapping[str, list[LogMelSegment]],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    mode: str = "speaker",
    jobs: int = 1,
) -> ProtocolResult:
    """Train one model per fold from scratch and score held-out utterances.

    Fold ``i`` uses seed ``train_cfg.seed + i``.  With ``jobs > 1`` folds run
    in separate processes.
    """
    plan = build_folds(manifest, mode)
    labels = {e.utterance_id: e.label for e in manifest.entries}
    missing = [u for u in manifest.ids() if u not in features]
    if missing:
        raise InputError(f"no features for {len(missing)} utterances, e.g. {missing[:3]}")
    jobs_args = [(fold, i, features, labels, model_cfg, train_cfg) for i, fold in enumerate(plan.folds)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_fold_job, jobs_args))
    else:
        results = [_run_fold_job(args) for args in jobs_args]
    true = [t for r in results for t in r.true]
    pred = [p for r in results for p in r.predicted]
    pooled = compute_metrics(true, pred, model_cfg.n_classes)
    n_params = TimeFrequencyTransformer(model_cfg).num_parameters()
    return ProtocolResult(mode, results, pooled, model_cfg.ablation_name, n_params)


@dataclass
class AblationRow:
    name: str
    toggles: tuple[bool, bool, bool]
    n_parameters: int
    result: ProtocolResult


def run_ablations(
    manifest: DatasetManifest,
    features: Mapping[str, list[LogMelSegment]],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    mode: str = "speaker",
    only: Sequence[str] | None = None,
    jobs: int = 1,
) -> list[AblationRow]:
    names = list(ABLATIONS) if not only else [n for n in ABLATIONS if n in set(only)]
    unknown = set(only or ()) - set(ABLATIONS)
    if unknown:
        raise ConfigError(f"unknown ablation(s) {sorted(unknown)}; expected {list(ABLATIONS)}")
    rows = []
    for name in names:
        cfg = model_cfg.with_ablation(name)
        result = run_protocol(manifest, features, cfg, train_cfg, mode, jobs)
        rows.append(AblationRow(name, ABLATIONS[name], result.n_parameters, result))
    return rows


# ----------------------------------------------------------------------
# reports


def pct(x: float) -> str:
    return f"{100 * x:.2f}"


def _grid(confusion: np.ndarray, names: Sequence[str]) -> list[str]:
    width = max(6, *(len(n) for n in names), len(str(confusion.max())))
    lines = [" " * width + " " + " ".join(n.rjust(width) for n in names)]
    for name, row in zip(names, confusion):
        lines.append(name.rjust(width) + " " + " ".join(str(v).rjust(width) for v in row))
    return lines


def format_protocol_report(result: ProtocolResult, labels: LabelSet) -> str:
    unit = "Speaker" if result.mode == "speaker" else "Session"
    lines = [
        f"Protocol: Leave-One-{unit}-Out ({len(result.folds)} {unit.lower()}s)",
        f"Architecture: {result.config_name}",
        "",
    ]
    for i, fold in enumerate(result.folds):
        m = fold.metrics
        lines.append(f"[fold {i}] test {result.mode} {fold.test_unit}: n={m.total}  WAR {pct(m.war)}  UAR {pct(m.uar)}")
        if m.absent_classes:
            lines.append(
                "  note: UAR excludes classes absent from this fold: "
                + ", ".join(labels.names[c] for c in m.absent_classes)
            )
        lines += ["  " + row for row in _grid(m.confusion, labels.names)]
        lines.append("")
    m = result.pooled
    lines.append(f"[pooled] n={m.total}  WAR {pct(m.war)}  UAR {pct(m.uar)}")
    lines += ["  " + row for row in _grid(m.confusion, labels.names)]
    lines.append("")
    lines.append("| Architecture | WAR | UAR |")
    lines.append("|---|---|---|")
    lines.append(f"| {result.config_name} | {pct(m.war)} | {pct(m.uar)} |")
    return "\n".join(lines) + "\n"


def protocol_csv(result: ProtocolResult, labels: LabelSet) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    n = len(labels)
    w.writerow(["block", "test_unit", "n", "war", "uar"] + [f"cm_{i}_{j}" for i in range(n) for j in range(n)])
    rows = [(f"fold_{i}", f.test_unit, f.metrics) for i, f in enumerate(result.folds)]
    rows.append(("pooled", "all", result.pooled))
    for block, unit, m in rows:
        w.writerow([block, unit, m.total, pct(m.war), pct(m.uar)] + m.confusion.reshape(-1).tolist())
    return buf.getvalue()


def format_ablation_report(rows: Sequence[AblationRow], corpus: str = "corpus") -> str:
    mark = {True: "yes", False: "no"}
    lines = [
        f"| Architecture | T-Trans | F-Trans | TF-Trans | params | {corpus} WAR | {corpus} UAR |",
        "|---|---|---|---|---|---|---|",
    ]
    for r in rows:
        t, f, tf = r.toggles
        m = r.result.pooled
        lines.append(
            f"| {r.name} | {mark[t]} | {mark[f]} | {mark[tf]} | {r.n_parameters} | {pct(m.war)} | {pct(m.uar)} |"
        )
    return "\n".join(lines) + "\n"


def ablation_csv(rows: Sequence[AblationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["architecture", "t_trans", "f_trans", "tf_trans", "n_parameters", "war", "uar"])
    for r in rows:
        m = r.result.pooled
        w.writerow([r.name, *map(int, r.toggles), r.n_parameters, pct(m.war), pct(m.uar)])
    return buf.getvalue()
