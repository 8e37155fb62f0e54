"""Run orchestration shared by the command-line entry points."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint as ckpt
from .baseline import TransEModel, train_transe_snapshot
from .continual import advance_snapshot
from .dataset import Snapshot, Vocab, classify_hops
from .eval import FilterIndex, MetricsMatrix, evaluate, hop_breakdown, measure_latency, transfer_metrics
from .training import ModelState, TrainConfig, TrainLog, encode_triples, train_snapshot

logger = logging.getLogger(__name__)

EVAL_MODES = ("filtered", "raw")
BASELINES = ("none", "transe-finetune")
METRICS_HEADER = "snapshot,split,mode,MRR,Hits@1,Hits@3,Hits@10,FWT,BWT,queries,seconds"


@dataclass(frozen=True)
class RunConfig:
    """Everything a run depends on; ``train`` holds the optimisation settings."""

    data: str = ""
    snapshots: int = 0
    out: str = "runs/default"
    eval_mode: str = "filtered"
    deterministic: bool = True
    baseline: str = "none"
    threads: int = 1
    checkpoint: str = ""
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.eval_mode not in EVAL_MODES:
            raise ValueError(f"eval_mode must be one of {EVAL_MODES}, got {self.eval_mode!r}")
        if self.baseline not in BASELINES:
            raise ValueError(f"baseline must be one of {BASELINES}, got {self.baseline!r}")

    @classmethod
    def run_field_names(cls) -> list[str]:
        return [f.name for f in fields(cls) if f.name != "train"]

    def to_items(self) -> dict[str, str]:
        items = {name: ckpt.format_value(getattr(self, name)) for name in self.run_field_names()}
        items.update(ckpt.config_to_items(self.train))
        return items

    @classmethod
    def from_items(cls, items: dict[str, str]) -> "RunConfig":
        defaults = cls()
        known = set(cls.run_field_names()) | set(TrainConfig.field_names())
        unknown = sorted(set(items) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        kwargs = {}
        for name in cls.run_field_names():
            if name not in items:
                continue
            default = getattr(defaults, name)
            text = items[name]
            if isinstance(default, bool):
                kwargs[name] = ckpt.parse_bool(text)
            elif isinstance(default, int):
                kwargs[name] = int(text)
            else:
                kwargs[name] = text
        kwargs["train"] = ckpt.config_from_items(items)
        return cls(**kwargs)

    def replace(self, **changes) -> "RunConfig":
        return replace(self, **changes)


@dataclass
class RunResult:
    matrix: MetricsMatrix
    fwt: float | None
    bwt: float | None
    combined: dict | None
    rows: list = field(default_factory=list)
    logs: list = field(default_factory=list)
    bcu_reports: list = field(default_factory=list)
    model: object = None


class OutputLayout:
    """``<out>/{config, checkpoints/<i>/, metrics/, logs/}``."""

    def __init__(self, root):
        self.root = Path(root)
        self.checkpoints = self.root / "checkpoints"
        self.metrics = self.root / "metrics"
        self.logs = self.root / "logs"

    def create(self) -> "OutputLayout":
        for d in (self.checkpoints, self.metrics, self.logs):
            d.mkdir(parents=True, exist_ok=True)
        return self

    def checkpoint(self, i: int) -> Path:
        return self.checkpoints / str(i)

    def write_config(self, config: RunConfig) -> None:
        ckpt.write_kv(self.root / "config", config.to_items())


def _write(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


def filter_for(snapshots: Sequence[Snapshot], upto: int, mode: str) -> FilterIndex | None:
    if mode == "raw":
        return None
    return FilterIndex(s.all_triples for s in snapshots[:upto + 1])


def known_codes(snapshots: Sequence[Snapshot], upto: int) -> np.ndarray:
    parts = [s.all_triples for s in snapshots[:upto + 1]]
    return np.unique(encode_triples(np.concatenate(parts)))


def validation_mrr(model, snapshots: Sequence[Snapshot], i: int, mode: str = "filtered") -> float:
    snap = snapshots[i]
    m, _ = evaluate(model.scorer(), snap.valid, snap.n_entities, filter_for(snapshots, i, mode))
    return m["MRR"]


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def metrics_row(snapshot, split, mode, m: dict | None, fwt=None, bwt=None, seconds=None) -> str:
    if m is None:
        cells = ["", "", "", "", "0"]
    else:
        cells = [_fmt(m["MRR"]), _fmt(m["Hits@1"]), _fmt(m["Hits@3"]), _fmt(m["Hits@10"]),
                 str(m["queries"])]
    return ",".join([str(snapshot), split, mode, *cells[:4], _fmt(fwt), _fmt(bwt), cells[4],
                     _fmt(seconds)])


class _RegionEngine:
    def __init__(self, config: TrainConfig):
        self.model = ModelState(config)

    def advance(self, snap, history):
        return advance_snapshot(self.model, snap, history)

    def train(self, snap, valid_fn, codes):
        return train_snapshot(self.model, snap.train, snap.n_entities, valid_fn, codes)

    def save(self, path, vocab):
        ckpt.save_checkpoint(self.model, path, vocab)


class _TransEEngine:
    def __init__(self, config: TrainConfig):
        self.model = TransEModel(config)

    def advance(self, snap, history):
        self.model.advance(snap)
        return None

    def train(self, snap, valid_fn, codes):
        return train_transe_snapshot(self.model, snap.train, snap.n_entities, valid_fn, codes)

    def save(self, path, vocab):
        path.mkdir(parents=True, exist_ok=True)
        for name, arr in self.model.params().items():
            np.ascontiguousarray(arr, dtype="<f8").tofile(path / f"transe.{name}")
        if vocab is not None:
            vocab.write(path)


def _eval_block(model, snapshots, i_model, i_test, mode, deterministic):
    snap = snapshots[i_test]
    n_cand = snap.n_entities
    t0 = time.perf_counter()
    if len(snap.test) == 0:
        return None, None, None
    m, ranks = evaluate(model.scorer(), snap.test, n_cand, filter_for(snapshots, max(i_model, i_test), mode))
    seconds = None if deterministic else time.perf_counter() - t0
    return m, ranks, seconds


def run_continual(config: RunConfig, snapshots: Sequence[Snapshot], vocab: Vocab | None = None,
                  out=None, engine: str | None = None) -> RunResult:
    """Train snapshot by snapshot, evaluating every test set seen so far after each step.

    The zero-shot cell ``grid[i-1][i]`` is measured after the new snapshot's
    embeddings are prepared and before any training on it.
    """
    engine = engine or ("transe" if config.baseline == "transe-finetune" else "region")
    eng = _TransEEngine(config.train) if engine == "transe" else _RegionEngine(config.train)
    n = len(snapshots)
    mode = config.eval_mode
    layout = OutputLayout(out).create() if out is not None else None
    if layout is not None:
        layout.write_config(config)
    matrix = MetricsMatrix(n)
    result = RunResult(matrix=matrix, fwt=None, bwt=None, combined=None, model=eng.model)
    for i, snap in enumerate(snapshots):
        report = eng.advance(snap, snapshots[:i])
        if report is not None:
            result.bcu_reports.append(report)
            if layout is not None:
                _write(layout.logs / f"bcu_{i}.txt", "\n".join(report.lines()) + "\n")
        if i > 0:
            m, _, _ = _eval_block(eng.model, snapshots, i, i, mode, True)
            if m is not None:
                for name, grid in matrix.grid.items():
                    grid[i - 1, i] = m[name]
        valid_fn = None
        if len(snap.valid):
            def valid_fn(model, _i=i):
                return validation_mrr(model, snapshots, _i, mode)
        log = eng.train(snap, valid_fn, known_codes(snapshots, i))
        result.logs.append(log)
        if layout is not None:
            _write(layout.logs / f"train_{i}.csv", log.to_csv())
            eng.save(layout.checkpoint(i), vocab)
        for j in range(i + 1):
            m, _, _ = _eval_block(eng.model, snapshots, i, j, mode, True)
            if m is not None:
                matrix.set(i, j, m)
        logger.info("snapshot %d done: MRR on own test %.4f", i, matrix[i, i])

    try:
        result.fwt, result.bwt = transfer_metrics(matrix)
    except ValueError as exc:
        logger.warning("transfer metrics unavailable: %s", exc)

    final = n - 1
    rows = [METRICS_HEADER]
    hop_rows = ["snapshot,class,triples,MRR,Hits@1,Hits@3,Hits@10"]
    lat_rows = ["snapshot,queries,total_seconds,mean_seconds,candidates"]
    all_test = []
    scorer_factory = eng.model.scorer
    for j, snap in enumerate(snapshots):
        m, ranks, seconds = _eval_block(eng.model, snapshots, final, j, mode, config.deterministic)
        rows.append(metrics_row(j, "test", mode, m, seconds=seconds))
        all_test.append(snap.test)
        if m is not None:
            hb = hop_breakdown(snap.test, ranks, classify_hops(snap))
            for cls in ("multi_hop", "single_hop"):
                hm = hb[cls]
                hop_rows.append(",".join([str(j), cls, str(hb[f"{cls}_triples"])] +
                                         ([_fmt(hm[k]) for k in ("MRR", "Hits@1", "Hits@3", "Hits@10")]
                                          if hm else ["", "", "", ""])))
        lat = measure_latency(scorer_factory, snap.test, snapshots[final].n_entities,
                              filter_for(snapshots, final, mode))
        lat_rows.append(f"{j},{lat.queries},{lat.total_seconds:.6f},{lat.mean_seconds:.9f},"
                        f"{lat.candidates}")
    combined = np.concatenate(all_test) if all_test else np.zeros((0, 3), dtype=np.int64)
    if len(combined):
        t0 = time.perf_counter()
        result.combined, _ = evaluate(eng.model.scorer(), combined, snapshots[final].n_entities,
                                      filter_for(snapshots, final, mode))
        seconds = None if config.deterministic else time.perf_counter() - t0
        rows.append(metrics_row("all", "test", mode, result.combined, result.fwt, result.bwt, seconds))
    result.rows = rows
    if layout is not None:
        _write(layout.metrics / "metrics.csv", "\n".join(rows) + "\n")
        _write(layout.metrics / "matrix.csv", matrix.to_csv("MRR"))
        for k in (1, 3, 10):
            _write(layout.metrics / f"matrix_hits{k}.csv", matrix.to_csv(f"Hits@{k}"))
        _write(layout.metrics / "hops.csv", "\n".join(hop_rows) + "\n")
        # wall-clock timings live with the logs so metrics/ stays reproducible
        _write(layout.logs / "latency.csv", "\n".join(lat_rows) + "\n")
    return result


def run_train(checkpoint_dir, snapshots: Sequence[Snapshot], vocab: Vocab | None, out,
              epochs: int | None = None, eval_mode: str = "filtered") -> tuple[ModelState, TrainLog]:
    """Continue training a saved model; advances to the next snapshot when the current one is finished.

    ``epochs`` limits how many epochs run in this call; ``0`` leaves the
    checkpoint untouched.
    """
    model, ck_vocab = ckpt.load_checkpoint(checkpoint_dir)
    vocab = vocab if vocab is not None else ck_vocab
    i = model.snapshot
    finished = model.stopped or model.epoch >= model.config.epochs
    if epochs != 0 and finished and i + 1 < len(snapshots):
        i += 1
        advance_snapshot(model, snapshots[i], snapshots[:i])
    if i < 0 or i >= len(snapshots):
        raise ckpt.CheckpointError(f"checkpoint is at snapshot {i}; dataset has {len(snapshots)}")
    if epochs and model.epoch + epochs > model.config.epochs:
        model.set_config(model.config.replace(epochs=model.epoch + epochs))
    snap = snapshots[i]
    valid_fn = None
    if len(snap.valid):
        def valid_fn(m):
            return validation_mrr(m, snapshots, i, eval_mode)
    log = TrainLog()
    if epochs != 0:
        train_snapshot(model, snap.train, snap.n_entities, valid_fn, known_codes(snapshots, i), log,
                       stop_after=epochs)
    layout = OutputLayout(out).create()
    ckpt.save_checkpoint(model, layout.checkpoint(i), vocab)
    _write(layout.logs / f"train_{i}.csv", log.to_csv())
    return model, log


def run_eval(checkpoint_dir, snapshots: Sequence[Snapshot], out, eval_mode: str = "filtered",
             deterministic: bool = True) -> dict:
    """Evaluate a saved model on the validation set of its snapshot and every test set so far."""
    model, _ = ckpt.load_checkpoint(checkpoint_dir)
    i = model.snapshot
    if i < 0 or i >= len(snapshots):
        raise ckpt.CheckpointError(f"checkpoint is at snapshot {i}; dataset has {len(snapshots)}")
    layout = OutputLayout(out).create()
    rows = [METRICS_HEADER]
    out_metrics = {}
    snap = snapshots[i]
    if len(snap.valid):
        t0 = time.perf_counter()
        m, _ = evaluate(model.scorer(), snap.valid, snap.n_entities, filter_for(snapshots, i, eval_mode))
        rows.append(metrics_row(i, "valid", eval_mode, m,
                                seconds=None if deterministic else time.perf_counter() - t0))
        out_metrics["valid"] = m
    for j in range(i + 1):
        m, _, seconds = _eval_block(model, snapshots, i, j, eval_mode, deterministic)
        rows.append(metrics_row(j, "test", eval_mode, m, seconds=seconds))
        out_metrics[f"test_{j}"] = m
    _write(layout.metrics / "metrics.csv", "\n".join(rows) + "\n")
    return out_metrics


__all__ = ["RunConfig", "RunResult", "OutputLayout", "run_continual", "run_train", "run_eval",
           "validation_mrr", "METRICS_HEADER", "EVAL_MODES", "BASELINES"]
