"""Pipeline stages with on-disk outputs and stamp files for resumption."""

from __future__ import annotations

import hashlib
import json
import logging
import shutil
from pathlib import Path
from typing import Callable

from .bench import BenchMatrix, craft_batches, emit_report, score_batches, table_records
from .compress import baselines, run_algorithm2, write_leaderboard
from .config import PipelineConfig
from .data import generate_benign, ingest_csv, load_snapshot, make_windows, save_snapshot
from .errors import ConfigError, MissingArtifactError, StageError
from .model import Model, evaluate, reference_arch, train
from .nas import NasResult, run_nas
from .records import EvalRecord

log = logging.getLogger(__name__)

STAGES = ("gen-data", "train", "nas", "compress", "attack", "bench")
STAGE_DIRS = {"gen-data": "data", "train": "reference", "nas": "nas", "compress": "compress",
              "attack": "attack", "bench": "report"}
UPSTREAM = {
    "gen-data": (),
    "train": ("gen-data",),
    "nas": ("gen-data",),
    "compress": ("gen-data", "train", "nas"),
    "attack": ("gen-data", "train", "compress"),
    "bench": ("gen-data", "train", "compress", "attack"),
}
SECTIONS = {
    "gen-data": ("dataset",),
    "train": ("train",),
    "nas": ("nas", "train"),
    "compress": ("compress", "train"),
    "attack": ("attack", "train"),
    "bench": ("bench",),
}
STAMP = "stage.json"


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Runner:
    """Runs stages under ``out``; with ``resume`` a stage whose stamp matches is skipped."""

    def __init__(self, cfg: PipelineConfig, out: str | Path | None = None, resume: bool = False):
        self.cfg = cfg
        self.out = Path(out or cfg.output_dir)
        self.resume = resume

    def dir(self, stage: str) -> Path:
        return self.out / STAGE_DIRS[stage]

    def _stamp(self, stage: str) -> dict | None:
        p = self.dir(stage) / STAMP
        return json.loads(p.read_text()) if p.exists() else None

    def key(self, stage: str) -> str:
        parts = [self.cfg.section_hash(*SECTIONS[stage])]
        for up in UPSTREAM[stage]:
            stamp = self._stamp(up)
            if stamp is None:
                raise MissingArtifactError(self.dir(up), up)
            parts.append(stamp["key"])
        return hashlib.sha256("|".join([stage] + parts).encode()).hexdigest()[:16]

    def run(self, stage: str) -> str:
        """Execute one stage; returns "done" or "cached"."""
        key = self.key(stage)
        stamp = self._stamp(stage)
        if self.resume and stamp is not None and stamp.get("key") == key:
            return "cached"
        target = self.dir(stage)
        if target.exists():
            shutil.rmtree(target)
        target.mkdir(parents=True)
        self.out.mkdir(parents=True, exist_ok=True)
        self.cfg.dump(self.out / "resolved_config.yaml")
        try:
            STAGE_FUNCS[stage](self.cfg, self.out)
        except (ConfigError, MissingArtifactError):
            raise
        except Exception as exc:
            raise StageError(stage, exc) from exc
        (target / STAMP).write_text(json.dumps({"stage": stage, "key": key}, sort_keys=True) + "\n")
        return "done"

    def pipeline(self, report: Callable[[str, str], None] = lambda s, st: None) -> dict[str, str]:
        status = {}
        for stage in STAGES:
            status[stage] = self.run(stage)
            report(stage, status[stage])
        return status


# --------------------------------------------------------------------------
# stage bodies


def _need(path: Path, producer: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(path, producer)
    return path


def _dataset(out: Path):
    return load_snapshot(_need(out / "data" / "manifest.json", "gen-data").parent)


def _model(out: Path, rel: str, producer: str, name: str) -> Model:
    return Model.load(_need(out / rel / "weights.gsw", producer).parent, name=name)


def stage_gen_data(cfg: PipelineConfig, out: Path) -> None:
    d = cfg.dataset
    if d.csv_path:
        series = ingest_csv(d.csv_path)
    else:
        series = generate_benign(d.sites, d.days, cfg.seed, interval=d.interval, noise=d.noise, weekly=d.weekly)
    ds = make_windows(series, d.width, d.stride, d.malicious_ratio, cfg.seed, tuple(d.fractions))
    save_snapshot(ds, out / "data")


def stage_train(cfg: PipelineConfig, out: Path) -> None:
    ds = _dataset(out)
    d_train = ds.split("train")
    model = train(reference_arch(d_train.width), d_train, ds.split("val"), cfg.train_config(), name="original")
    model.save(out / "reference" / "model")
    metrics = {s: evaluate(model, ds.split(s)).to_dict() for s in ("val", "test")}
    (out / "reference" / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")


def stage_nas(cfg: PipelineConfig, out: Path) -> None:
    ds = _dataset(out)
    n = cfg.nas
    result = run_nas(ds.split("train"), ds.split("val"), n.C, n.F, n.n, n.budget, cfg.seed,
                     train_cfg=cfg.nas_train_config(), candidates=n.candidates, n_init=n.n_init,
                     parallel=cfg.parallel)
    result.save(out / "nas")


def stage_compress(cfg: PipelineConfig, out: Path) -> None:
    ds = _dataset(out)
    reference = _model(out, "reference/model", "train", "original")
    nas = NasResult.load(_need(out / "nas" / "result.json", "nas").parent)
    ccfg = cfg.compress_config()
    d_train, d_val = ds.split("train"), ds.split("val")
    res = run_algorithm2([c.arch for c in nas.top], d_train, d_val, ccfg,
                         original_bytes=reference.size_bytes(), parallel=cfg.parallel)
    target = out / "compress"
    res.best.save(target / "proposed")
    write_leaderboard(res.leaderboard, target / "leaderboard.csv")
    summary = {"selected": res.best.name, "failures": res.failures}
    (target / "selection.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for state, m in baselines(reference, d_train, d_val, ccfg).items():
        m.save(target / state)


def stage_attack(cfg: PipelineConfig, out: Path) -> None:
    ds = _dataset(out)
    victim = _model(out, "reference/model", "train", "original")
    proposed = _model(out, "compress/proposed", "compress", "proposed")
    attacks = cfg.attack_configs()
    p_levels = list(cfg.attack.p_levels)
    # full access with the victim's own recipe reproduces the victim, so reuse it
    batches, gaps, _ = craft_batches(ds, attacks, p_levels, cfg.train_config(), {100: victim}, cfg.parallel)
    matrix = score_batches({"original": victim, "proposed": proposed}, batches, cfg.seed,
                           [a.kind for a in attacks], p_levels, gaps)
    target = out / "attack"
    (target / "batches").mkdir(parents=True, exist_ok=True)
    for (kind, p), batch in sorted(batches.items()):
        batch.to_csv(target / "batches" / f"{kind}_p{p}.csv")
    doc = {"records": [r.to_dict() for r in matrix.records], "gaps": matrix.gaps}
    (target / "records.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def stage_bench(cfg: PipelineConfig, out: Path) -> None:
    ds = _dataset(out)
    paths = {"original": "reference/model", "quantized": "compress/quantized", "pruned": "compress/pruned",
             "projected": "compress/projected", "proposed": "compress/proposed"}
    producers = {"original": "train"}
    models = {s: _model(out, rel, producers.get(s, "compress"), s) for s, rel in paths.items()}
    b = cfg.bench
    table = table_records(models, ds.split("test"), cfg.seed, b.reps, b.warmup, b.batch)
    doc = json.loads(_need(out / "attack" / "records.json", "attack").read_text())
    matrix = BenchMatrix([EvalRecord(**r) for r in doc["records"]] + table, doc["gaps"])
    manifest = {
        "config": {k: v for k, v in cfg.to_dict().items() if k != "output_dir"},
        "seed": cfg.seed,
        "dataset": {"path": "data/dataset.csv", "sha256": sha256_file(out / "data" / "dataset.csv")},
        "models": {s: {"path": f"{rel}/weights.gsw", "sha256": sha256_file(out / rel / "weights.gsw")}
                   for s, rel in paths.items()},
        "latency": {"reps": b.reps, "warmup": b.warmup, "batch": b.batch, "threads": 1},
    }
    emit_report(matrix, out / "report", manifest)


STAGE_FUNCS = {
    "gen-data": stage_gen_data,
    "train": stage_train,
    "nas": stage_nas,
    "compress": stage_compress,
    "attack": stage_attack,
    "bench": stage_bench,
}
