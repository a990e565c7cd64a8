"""Size, latency and attack-matrix measurements, and the report files built from them."""

from __future__ import annotations

import csv
import json
import logging
import platform
import statistics
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .attacks import AdvBatch, AttackConfig, KnowledgeLevel, adr, attack_targets, train_surrogate, transfer_attack
from .data import WindowDataset, WindowSet
from .model import Model, TrainConfig, evaluate, predict_batch
from .records import MODEL_STATES, EvalRecord

log = logging.getLogger(__name__)

TIMING_LOCK = threading.Lock()
TABLE_HEADER = ("state", "latency_ms", "bytes", "accuracy", "f1")
CURVES_HEADER = ("phase", "attack", "p", "adr")
PHASES = {"original": "before", "proposed": "after"}


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def measure_latency(model: Model, batch, reps: int = 30, warmup: int = 5) -> float:
    """Median wall-clock milliseconds per forward pass over ``batch``, BLAS pinned to one thread.

    If the timer cannot resolve 1% of a pass, the batch is tiled until it
    can and the per-original-batch time is reported.
    """
    x = batch.values if isinstance(batch, WindowSet) else np.asarray(batch, dtype=np.float32)
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("measure_latency needs a non-empty 2-D batch")
    if reps < 10:
        raise ValueError(f"reps must be >= 10, got {reps}")
    resolution = time.get_clock_info("perf_counter").resolution
    factor = 1
    with TIMING_LOCK, threadpool_limits(limits=1):
        while True:
            xs = np.tile(x, (factor, 1))
            for _ in range(warmup):
                predict_batch(model, xs, batch=len(xs))
            times = []
            for _ in range(reps):
                t0 = time.perf_counter()
                predict_batch(model, xs, batch=len(xs))
                times.append(time.perf_counter() - t0)
            med = statistics.median(times)
            if resolution <= 0.01 * med or factor >= 1 << 10:
                return 1000.0 * med / factor
            factor *= 2


def measure_size(model: Model) -> int:
    """Byte length of the canonical serialised weights."""
    return len(model.to_bytes())


# --------------------------------------------------------------------------
# attack matrix


@dataclass
class BenchMatrix:
    records: list[EvalRecord] = field(default_factory=list)
    gaps: list[dict] = field(default_factory=list)

    def curve_cells(self) -> list[EvalRecord]:
        return [r for r in self.records if r.attack != "none"]

    def table_rows(self) -> list[EvalRecord]:
        return [r for r in self.records if r.attack == "none"]


def craft_batches(data: WindowDataset, attacks: Sequence[AttackConfig], p_levels: Sequence[int],
                  train_cfg: TrainConfig, surrogates: dict[int, Model] | None = None,
                  parallel: int = 1) -> tuple[dict[tuple[str, int], AdvBatch], list[dict], dict[int, Model]]:
    """Train one surrogate per access level and craft every attack on it.

    Cells are independent and individually seeded, so the result does not
    depend on ``parallel``. A failing cell is recorded as a gap.
    """
    d_train, d_val, d_test = data.split("train"), data.split("val"), data.split("test")
    floor = data.floor
    surrogates = dict(surrogates or {})
    batches: dict[tuple[str, int], AdvBatch] = {}
    gaps: list[dict] = []

    def level(p: int):
        out, errs = {}, []
        try:
            sur = surrogates.get(p) or train_surrogate(KnowledgeLevel(p), d_train, d_val, train_cfg)
        except Exception as exc:
            log.error("surrogate p=%d failed: %s", p, exc)
            return None, {}, [{"attack": a.kind, "p": p, "error": f"surrogate: {exc}"} for a in attacks]
        for a in attacks:
            try:
                targets = attack_targets(d_test, a.n_samples, a.seed)
                out[(a.kind, p)] = transfer_attack(sur, KnowledgeLevel(p), d_train, targets, a, floor)
            except Exception as exc:
                log.error("attack %s p=%d failed: %s", a.kind, p, exc)
                errs.append({"attack": a.kind, "p": p, "error": f"{type(exc).__name__}: {exc}"})
        return sur, out, errs

    if parallel > 1:
        with ThreadPoolExecutor(max_workers=parallel) as pool:
            results = list(pool.map(level, p_levels))
    else:
        results = [level(p) for p in p_levels]
    for p, (sur, out, errs) in zip(p_levels, results):
        if sur is not None:
            surrogates[p] = sur
        batches.update(out)
        gaps.extend(errs)
    return batches, gaps, surrogates


def score_batches(models: dict[str, Model], batches: dict[tuple[str, int], AdvBatch], seed: int,
                  attacks: Sequence[str], p_levels: Sequence[int], gaps: Sequence[dict] = ()) -> BenchMatrix:
    """ADR of each model state on every crafted batch; missing batches become gaps."""
    matrix = BenchMatrix(gaps=[dict(g) for g in gaps])
    missing = {(g["attack"], g["p"]) for g in gaps}
    for state, model in models.items():
        for kind in attacks:
            for p in p_levels:
                if (kind, p) not in batches:
                    if (kind, p) not in missing:
                        matrix.gaps.append({"attack": kind, "p": p, "error": "no batch"})
                    continue
                matrix.records.append(EvalRecord(model.name, state, kind, p, None, None,
                                                 adr(model, batches[(kind, p)]), None, None, _now(), seed))
    return matrix


def run_matrix(victim: Model, compressed: Model, attacks: Sequence[AttackConfig], p_levels: Sequence[int],
               data: WindowDataset, seed: int, train_cfg: TrainConfig | None = None,
               surrogates: dict[int, Model] | None = None, parallel: int = 1) -> BenchMatrix:
    """Attack x access-level ADR cells for the victim before and after compression."""
    cfg = train_cfg or TrainConfig(seed=seed)
    batches, gaps, _ = craft_batches(data, attacks, p_levels, cfg, surrogates, parallel)
    return score_batches({"original": victim, "proposed": compressed}, batches, seed,
                         [a.kind for a in attacks], p_levels, gaps)


def table_records(models: dict[str, Model], d_test: WindowSet, seed: int, reps: int = 30,
                  warmup: int = 5, batch: int = 64) -> list[EvalRecord]:
    """Clean-test accuracy/F1/recall, size and latency for each model state."""
    x = d_test.values[:batch]
    rows = []
    for state in sorted(models, key=lambda s: MODEL_STATES.index(s) if s in MODEL_STATES else len(MODEL_STATES)):
        m = models[state]
        met = evaluate(m, d_test)
        rows.append(EvalRecord(m.name, state, "none", 0, met.accuracy, met.f1, met.recall, measure_size(m),
                               measure_latency(m, x, reps, warmup), _now(), seed))
    return rows


# --------------------------------------------------------------------------
# report files


def _f(v) -> str:
    return "" if v is None or (isinstance(v, float) and np.isnan(v)) else f"{v:.6f}"


def emit_report(matrix: BenchMatrix, path: str | Path, manifest: dict | None = None,
                figures: bool = True) -> dict[str, Path]:
    """Write table.csv, curves.csv, records.json, manifest.json and PNG figures into ``path``.

    Everything except the timestamp fields and measured latencies is a
    pure function of the matrix, so re-emitting gives identical files.
    """
    if not matrix.records:
        raise ValueError("emit_report: empty matrix")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    files = {k: out / n for k, n in (("table", "table.csv"), ("curves", "curves.csv"),
                                      ("records", "records.json"), ("manifest", "manifest.json"))}
    table = matrix.table_rows()
    with files["table"].open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TABLE_HEADER)
        for r in table:
            w.writerow([r.state, f"{r.latency_ms:.3f}", r.size_bytes, _f(r.accuracy), _f(r.f1)])
    cells = sorted((r for r in matrix.curve_cells() if r.state in PHASES),
                   key=lambda r: (list(PHASES).index(r.state), r.attack, r.p))
    with files["curves"].open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVES_HEADER)
        for r in cells:
            w.writerow([PHASES[r.state], r.attack, r.p, _f(r.adr)])
    files["records"].write_text(json.dumps([r.to_dict() for r in matrix.records], indent=1, sort_keys=True) + "\n")
    doc = {
        "generated": _now(),
        "versions": {"gridshield": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "gpu_utilization": "not recorded: GPU measurement is out of scope",
        "memory": "serialized weight bytes",
        "table_columns": list(TABLE_HEADER),
        "curves_columns": list(CURVES_HEADER),
        "gaps": matrix.gaps,
        **(manifest or {}),
    }
    files["manifest"].write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")
    if figures:
        from .plotting import plot_curves, plot_table

        files["curves_png"] = plot_curves(cells, out / "curves.png")
        if table:
            files["table_png"] = plot_table(table, out / "table.png")
    return files
