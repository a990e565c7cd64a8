"""Synthetic smart-meter load profiles, theft functions f1-f6, windowing and splits."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import SchemaError

log = logging.getLogger(__name__)

F_KINDS = ("f1", "f2", "f3", "f4", "f5", "f6")
ATTACK_TAGS = ("fgsm", "bim", "cw", "cgan")
PROVENANCE_TAGS = ("benign",) + F_KINDS + ATTACK_TAGS
ACCESS_LEVELS = (20, 40, 60, 80, 100)


@dataclass
class LoadSeries:
    site_id: int
    readings: np.ndarray
    interval: int = 30
    tou_price: np.ndarray | None = None
    filled: np.ndarray | None = None
    start_hour: float = 0.0

    def __post_init__(self):
        self.readings = np.asarray(self.readings, dtype=np.float64)
        if self.tou_price is None:
            self.tou_price = tou_prices(len(self.readings), self.interval, self.start_hour)
        self.tou_price = np.asarray(self.tou_price, dtype=np.float64)
        if len(self.readings) != len(self.tou_price):
            raise ValueError(f"readings ({len(self.readings)}) and tou_price ({len(self.tou_price)}) differ in length")
        if np.any(self.readings < 0):
            raise ValueError("readings must be non-negative")

    def __len__(self) -> int:
        return len(self.readings)

    @property
    def per_day(self) -> int:
        return 1440 // self.interval


def tou_prices(n: int, interval: int = 30, start_hour: float = 0.0,
               peak: tuple[float, float] = (17.0, 21.0), peak_factor: float = 2.0) -> np.ndarray:
    """Two-tier time-of-use tariff: ``peak_factor`` inside the peak hours, 1 elsewhere."""
    hours = (start_hour + np.arange(n) * interval / 60.0) % 24.0
    return np.where((hours >= peak[0]) & (hours < peak[1]), peak_factor, 1.0)


def _daily_profile(per_day: int, morning: float, evening: float, amp_m: float, amp_e: float) -> np.ndarray:
    h = np.arange(per_day) * 24.0 / per_day

    def bump(center, width):
        d = np.minimum(np.abs(h - center), 24.0 - np.abs(h - center))
        return np.exp(-0.5 * (d / width) ** 2)

    prof = 0.5 + amp_m * bump(morning, 1.5) + amp_e * bump(evening, 2.0)
    return prof / prof.mean()


def generate_benign(
    sites: int,
    days: int,
    seed: int,
    *,
    interval: int = 30,
    base_load: float = 1.0,
    noise: float = 0.05,
    weekly: float = 0.15,
) -> list[LoadSeries]:
    """Double-peak daily load with weekly modulation and Gaussian noise.

    Each site gets its own peak timing, peak heights and a level in
    ``base_load * U(0.9, 1.1)``. ``noise`` scales both the per-interval noise
    (sd ``noise * base_load``) and a per-day level jitter; ``weekly`` is the
    weekend dip depth. The profile and the weekly factors are normalised to
    mean 1, so the long-run mean reading is ``base_load`` on average over sites.
    """
    if sites < 1 or days < 1:
        raise ValueError("sites and days must be >= 1")
    per_day = 1440 // interval
    out = []
    for site in range(sites):
        rng = np.random.default_rng([seed, site])
        level = base_load * rng.uniform(0.9, 1.1)
        prof = _daily_profile(per_day, rng.uniform(7.0, 9.0), rng.uniform(18.0, 20.0),
                              rng.uniform(0.4, 0.8), rng.uniform(0.6, 1.0))
        week = np.array([1.0] * 5 + [1.0 - weekly] * 2)
        week = week / week.mean()
        day_factor = week[np.arange(days) % 7] * (1.0 + noise * rng.standard_normal(days))
        x = level * (day_factor[:, None] * prof[None, :]).reshape(-1)
        x = x + noise * base_load * rng.standard_normal(x.shape)
        out.append(LoadSeries(site, np.clip(x, 0.0, None), interval))
    return out


def _kind_index(kind: str) -> int:
    if kind not in F_KINDS:
        raise ValueError(f"unknown malicious function {kind!r}; expected one of {F_KINDS}")
    return F_KINDS.index(kind) + 1


def apply_malice(s: LoadSeries, kind: str, seed: int, *, alpha: float | None = None) -> LoadSeries:
    """Return a tampered copy of ``s``.

    f1: x * a, one a ~ U(0.1, 0.8) per series (``alpha`` overrides the draw)
    f2: x_t * b_t, b_t ~ U(0.1, 0.8) per interval
    f3: zero inside one random contiguous 4-12 hour stretch
    f4: every reading replaced by the series mean
    f5: series mean times b_t ~ U(0.1, 0.8)
    f6: within each day, largest readings moved onto the cheapest intervals
    """
    rng = np.random.default_rng([seed, s.site_id, _kind_index(kind)])
    x = s.readings.copy()
    n = len(x)
    if kind == "f1":
        a = rng.uniform(0.1, 0.8) if alpha is None else alpha
        y = x * a
    elif kind == "f2":
        y = x * rng.uniform(0.1, 0.8, n)
    elif kind == "f3":
        hours = rng.uniform(4.0, 12.0)
        span = min(n, max(1, int(round(hours * 60 / s.interval))))
        start = int(rng.integers(0, n - span + 1))
        y = x.copy()
        y[start : start + span] = 0.0
    elif kind == "f4":
        y = np.full(n, x.mean())
    elif kind == "f5":
        y = x.mean() * rng.uniform(0.1, 0.8, n)
    else:
        y = np.empty_like(x)
        per_day = s.per_day
        for d0 in range(0, n, per_day):
            seg = slice(d0, min(n, d0 + per_day))
            vals = np.sort(x[seg])[::-1]
            order = np.argsort(s.tou_price[seg], kind="stable")
            day = np.empty_like(vals)
            day[order] = vals
            y[seg] = day
    return LoadSeries(s.site_id, y, s.interval, s.tou_price.copy(), start_hour=s.start_hour)


# --------------------------------------------------------------------------
# windows


@dataclass
class MeterWindow:
    values: np.ndarray
    label: int
    provenance: str
    site: int = -1


class WindowSet(Sequence[MeterWindow]):
    """Array-backed collection of labelled windows."""

    def __init__(self, values, labels, provenance, sites=None):
        self.values = np.asarray(values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ValueError(f"window values must be 2-D, got shape {self.values.shape}")
        self.labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        self.provenance = np.asarray(provenance, dtype=object).reshape(-1)
        n = len(self.values)
        self.sites = np.full(n, -1, dtype=np.int64) if sites is None else np.asarray(sites, dtype=np.int64)
        if not (len(self.labels) == len(self.provenance) == len(self.sites) == n):
            raise ValueError("window arrays are not aligned")
        bad = (self.labels == 1) != (self.provenance != "benign")
        if np.any(bad):
            raise ValueError("label must be 1 exactly when provenance is not 'benign'")

    @classmethod
    def from_windows(cls, windows: Sequence[MeterWindow]) -> "WindowSet":
        return cls([w.values for w in windows], [w.label for w in windows],
                   [w.provenance for w in windows], [w.site for w in windows])

    @classmethod
    def concat(cls, parts: Sequence["WindowSet"]) -> "WindowSet":
        return cls(np.concatenate([p.values for p in parts]), np.concatenate([p.labels for p in parts]),
                   np.concatenate([p.provenance for p in parts]), np.concatenate([p.sites for p in parts]))

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def __len__(self) -> int:
        return len(self.values)

    def __getitem__(self, i):
        if isinstance(i, (int, np.integer)):
            return MeterWindow(self.values[i], int(self.labels[i]), str(self.provenance[i]), int(self.sites[i]))
        return self.subset(np.arange(len(self))[i])

    def __iter__(self) -> Iterator[MeterWindow]:
        for i in range(len(self)):
            yield self[i]

    def subset(self, idx) -> "WindowSet":
        idx = np.asarray(idx)
        return WindowSet(self.values[idx], self.labels[idx], self.provenance[idx], self.sites[idx])

    def with_values(self, values) -> "WindowSet":
        return WindowSet(values, self.labels, self.provenance, self.sites)


@dataclass
class WindowDataset:
    """Train/val/test windows in reading units plus the frozen standardisation."""

    train: WindowSet
    val: WindowSet
    test: WindowSet
    mean: float
    std: float
    meta: dict = field(default_factory=dict)

    def standardize(self, ws: WindowSet) -> WindowSet:
        return ws.with_values((ws.values - np.float32(self.mean)) / np.float32(self.std))

    def to_readings(self, x: np.ndarray) -> np.ndarray:
        return x * np.float32(self.std) + np.float32(self.mean)

    @property
    def floor(self) -> float:
        """Standardised value of a zero reading."""
        return float((np.float32(0.0) - np.float32(self.mean)) / np.float32(self.std))

    def split(self, name: str, standardized: bool = True) -> WindowSet:
        ws = getattr(self, name)
        return self.standardize(ws) if standardized else ws


def _cut(series: Sequence[LoadSeries], width: int, stride: int):
    segs = []
    for s in series:
        if len(s) < width:
            warnings.warn(f"series for site {s.site_id} shorter than window {width}; skipped", stacklevel=3)
            continue
        for start in range(0, len(s) - width + 1, stride):
            segs.append((s, start))
    return segs


def make_windows(
    series: Sequence[LoadSeries],
    W: int = 48,
    stride: int = 48,
    malicious_ratio: float = 0.5,
    seed: int = 0,
    fractions: tuple[float, float, float] = (0.7, 0.15, 0.15),
    kinds: Sequence[str] = F_KINDS,
) -> WindowDataset:
    """Cut windows, tamper a ``malicious_ratio`` share with f1-f6, split and standardise.

    Malicious windows replace their benign source (the pair never co-occurs).
    Kinds are dealt round-robin over a shuffled selection so every f-function
    is equally represented. Mean/std come from benign training windows only.
    """
    if W < 8:
        raise ValueError(f"window width must be >= 8, got {W}")
    if not 0.0 < malicious_ratio < 1.0:
        raise ValueError(f"malicious_ratio must lie in (0, 1), got {malicious_ratio}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {fractions}")
    segs = _cut(series, W, stride)
    n = len(segs)
    if n == 0:
        raise ValueError("no series long enough to cut a single window")
    rng = np.random.default_rng(seed)
    n_mal = int(round(malicious_ratio * n))
    mal_idx = rng.permutation(n)[:n_mal]
    kind_of = {int(i): kinds[j % len(kinds)] for j, i in enumerate(mal_idx)}

    values = np.empty((n, W), dtype=np.float32)
    labels = np.zeros(n, dtype=np.int64)
    prov = np.empty(n, dtype=object)
    sites = np.empty(n, dtype=np.int64)
    for i, (s, start) in enumerate(segs):
        piece = LoadSeries(s.site_id, s.readings[start : start + W], s.interval,
                           s.tou_price[start : start + W], start_hour=(s.start_hour + start * s.interval / 60) % 24)
        sites[i] = s.site_id
        values[i] = piece.readings
        prov[i] = "benign"
        kind = kind_of.get(i)
        if kind is None:
            continue
        for attempt in range(10):
            tampered = apply_malice(piece, kind, seed=hash_seed(seed, i, attempt))
            if np.any(tampered.readings.astype(np.float32) != values[i]):
                values[i] = tampered.readings
                labels[i] = 1
                prov[i] = kind
                break
        else:
            log.warning("window %d: %s left the readings unchanged; kept benign", i, kind)

    order = rng.permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    parts = np.split(order, [n_train, n_train + n_val])
    full = WindowSet(values, labels, prov, sites)
    train, val, test = (full.subset(np.sort(p)) for p in parts)
    benign = train.values[train.labels == 0]
    if benign.size == 0:
        raise ValueError("no benign training windows to standardise with")
    mean = float(benign.astype(np.float64).mean())
    std = float(benign.astype(np.float64).std()) or 1.0
    meta = {"seed": seed, "W": W, "stride": stride, "malicious_ratio": malicious_ratio,
            "fractions": list(fractions), "kinds": list(kinds)}
    return WindowDataset(train, val, test, mean, std, meta)


def hash_seed(*parts: int) -> int:
    digest = hashlib.sha256(",".join(str(int(p)) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def access_subset(train: WindowSet, p: int, seed: int) -> WindowSet:
    """Stratified ``p`` percent sample of the training windows.

    Each label's indices are permuted once per seed and the first ``p``
    percent taken, so smaller access levels are nested inside larger ones.
    Order of the original set is preserved.
    """
    if p not in ACCESS_LEVELS:
        raise ValueError(f"access level must be one of {ACCESS_LEVELS}, got {p}")
    if p == 100:
        return train
    keep = []
    for label in (0, 1):
        idx = np.flatnonzero(train.labels == label)
        perm = np.random.default_rng([seed, label]).permutation(idx)
        keep.append(perm[: int(round(len(idx) * p / 100))])
    return train.subset(np.sort(np.concatenate(keep)))


# --------------------------------------------------------------------------
# CSV ingestion and snapshots

DEFAULT_SCHEMA = {"timestamp": "timestamp", "consumption": "consumption", "pv": "pv", "price": "price", "site": "site"}


def ingest_csv(path: str | Path, schema: dict[str, str] | None = None) -> list[LoadSeries]:
    """Read meter exports with timestamp + consumption columns (pv, price, site optional).

    The interval is the smallest step between consecutive timestamps of a
    site. Missing timestamps are filled with the last observed reading and
    flagged in ``LoadSeries.filled``.
    """
    cols = {**DEFAULT_SCHEMA, **(schema or {})}
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise SchemaError(f"{path}: empty file")
        for role in ("timestamp", "consumption"):
            if cols[role] not in reader.fieldnames:
                raise SchemaError(f"{path}: missing required column {cols[role]!r} ({role})")
        has_price = cols["price"] in reader.fieldnames
        has_site = cols["site"] in reader.fieldnames
        rows: dict[int, list[tuple[datetime, float, float | None]]] = {}
        for lineno, row in enumerate(reader, start=2):
            try:
                ts = datetime.fromisoformat(row[cols["timestamp"]].strip())
                value = float(row[cols["consumption"]])
                price = float(row[cols["price"]]) if has_price else None
                site = int(row[cols["site"]]) if has_site else 0
            except (TypeError, ValueError, AttributeError) as exc:
                raise SchemaError(f"{path}:{lineno}: malformed row ({exc})") from None
            if not np.isfinite(value) or value < 0:
                raise SchemaError(f"{path}:{lineno}: consumption must be a non-negative number")
            series_rows = rows.setdefault(site, [])
            if series_rows and ts <= series_rows[-1][0]:
                raise SchemaError(f"{path}:{lineno}: timestamps must be strictly increasing")
            series_rows.append((ts, value, price))
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    return [_fill_series(site, data, has_price) for site, data in sorted(rows.items())]


def _fill_series(site: int, data, has_price: bool) -> LoadSeries:
    stamps = [d[0] for d in data]
    if len(stamps) > 1:
        step = min(b - a for a, b in zip(stamps, stamps[1:]))
    else:
        step = timedelta(minutes=30)
    interval = int(step.total_seconds() // 60)
    span = int((stamps[-1] - stamps[0]) / step) + 1
    readings = np.empty(span)
    prices = np.empty(span)
    filled = np.ones(span, dtype=bool)
    for ts, value, price in data:
        k = int((ts - stamps[0]) / step)
        readings[k], filled[k] = value, False
        prices[k] = price if price is not None else np.nan
    for k in range(1, span):
        if filled[k]:
            readings[k] = readings[k - 1]
            prices[k] = prices[k - 1]
    start_hour = stamps[0].hour + stamps[0].minute / 60.0
    tou = prices if has_price else None
    if int(filled.sum()):
        log.info("site %d: filled %d gap readings", site, int(filled.sum()))
    return LoadSeries(site, readings, interval, tou, filled=filled, start_hour=start_hour)


def _fmt(v: np.float32) -> str:
    return np.format_float_positional(np.float32(v), unique=True, trim="-")


def save_snapshot(ds: WindowDataset, directory: str | Path) -> dict:
    """Write ``dataset.csv`` (raw readings) and ``manifest.json``; return the manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    W = ds.train.width
    csv_path = directory / "dataset.csv"
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["split", "site", "label", "provenance"] + [f"v{i}" for i in range(W)])
        for name in ("train", "val", "test"):
            ws = getattr(ds, name)
            for i in range(len(ws)):
                writer.writerow([name, int(ws.sites[i]), int(ws.labels[i]), ws.provenance[i]]
                                + [_fmt(v) for v in ws.values[i]])
    manifest = {
        **ds.meta,
        "mean": ds.mean,
        "std": ds.std,
        "counts": {name: len(getattr(ds, name)) for name in ("train", "val", "test")},
        "sha256": hashlib.sha256(csv_path.read_bytes()).hexdigest(),
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_snapshot(directory: str | Path) -> WindowDataset:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    buckets: dict[str, list] = {"train": [], "val": [], "test": []}
    with (directory / "dataset.csv").open(newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            buckets[row[0]].append(row)

    def build(rows) -> WindowSet:
        W = manifest["W"]
        if not rows:
            return WindowSet(np.empty((0, W), np.float32), [], [], [])
        vals = np.array([[np.float32(v) for v in r[4:]] for r in rows], dtype=np.float32)
        return WindowSet(vals, [int(r[2]) for r in rows], [r[3] for r in rows], [int(r[1]) for r in rows])

    meta = {k: manifest[k] for k in ("seed", "W", "stride", "malicious_ratio", "fractions", "kinds") if k in manifest}
    return WindowDataset(build(buckets["train"]), build(buckets["val"]), build(buckets["test"]),
                         manifest["mean"], manifest["std"], meta)
