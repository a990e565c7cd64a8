"""Structured pruning, int8 quantisation, PCA projection and candidate selection."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import WindowSet
from .model import ArchSpec, Layer, Metrics, Model, TrainConfig, evaluate, fake_quant, fit, forward, train
from .tensor import Tensor, backward, bce_loss

log = logging.getLogger(__name__)


@dataclass
class PruneConfig:
    sparsity: float = 0.45
    per_round: float = 0.1
    finetune_epochs: int = 1
    sample_size: int = 512
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.sparsity < 1:
            raise ValueError(f"sparsity must lie in [0, 1), got {self.sparsity}")
        if not 0 < self.per_round <= 1:
            raise ValueError(f"per_round must lie in (0, 1], got {self.per_round}")


@dataclass
class CompressConfig:
    prune: PruneConfig = field(default_factory=PruneConfig)
    finetune_epochs: int = 2
    weights: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    train: TrainConfig = field(default_factory=TrainConfig)
    energy: float = 0.95


def prunable_layers(arch: ArchSpec) -> list[int]:
    """Conv layers and every dense layer except the output."""
    last = len(arch.layers) - 1
    return [i for i, l in enumerate(arch.layers) if l.kind == "conv" or (l.kind == "dense" and i != last)]


def _sample(d: WindowSet, n: int, seed: int) -> WindowSet:
    if len(d) <= n:
        return d
    return d.subset(np.sort(np.random.default_rng([seed, 11]).choice(len(d), n, replace=False)))


def taylor_importance(model: Model, d_sample: WindowSet, batch: int = 256) -> dict[int, np.ndarray]:
    """First-order Taylor score per output channel of each prunable layer.

    Score = mean over windows of |sum over positions of activation * dLoss/dactivation|,
    i.e. the estimated loss change from zeroing that channel.
    """
    if not model.history:
        warnings.warn(f"{model.name}: importance scores on an untrained model are not meaningful",
                      RuntimeWarning, stacklevel=2)
    layers = prunable_layers(model.arch)
    totals = {i: np.zeros(model.arch.layers[i].units) for i in layers}
    weights = {k: Tensor(v) for k, v in model.weights().items()}
    x, y = d_sample.values, d_sample.labels
    for s in range(0, len(x), batch):
        taps: dict[int, Tensor] = {}
        xt = Tensor(x[s : s + batch], requires_grad=True)
        z = forward(model.arch, weights, xt, taps=taps)
        backward(bce_loss(z, y[s : s + batch], from_logits=True, reduction="sum"))
        for i in layers:
            a, g = taps[i].data.astype(np.float64), taps[i].grad.astype(np.float64)
            contrib = a * g if a.ndim == 2 else (a * g).sum(axis=1)
            totals[i] += np.abs(contrib).sum(axis=0)
    return {i: t / max(1, len(x)) for i, t in totals.items()}


def _next_param_layer(arch: ArchSpec, i: int) -> tuple[int, bool]:
    flat = False
    for j in range(i + 1, len(arch.layers)):
        kind = arch.layers[j].kind
        if kind == "flatten":
            flat = True
        if kind in ("conv", "dense"):
            return j, flat
    raise ValueError(f"layer {i} has no downstream parameter layer")


def prune_channels(model: Model, keep: dict[int, np.ndarray]) -> Model:
    """Physically remove channels/units not listed in ``keep`` and the weights that consume them."""
    if model.quantized:
        raise ValueError("prune before quantising")
    arch = model.arch
    params = {k: v.copy() for k, v in model.params.items()}
    layers = list(arch.layers)
    shapes = arch.shapes()
    for i in sorted(keep):
        idx = np.sort(np.asarray(keep[i], dtype=np.int64))
        layer = layers[i]
        if layer.kind == "conv":
            params[f"{i}.weight"] = params[f"{i}.weight"][idx]
        else:
            params[f"{i}.weight"] = params[f"{i}.weight"][:, idx]
        params[f"{i}.bias"] = params[f"{i}.bias"][idx]
        j, through_flatten = _next_param_layer(arch, i)
        wj = params[f"{j}.weight"]
        if layers[j].kind == "conv":
            params[f"{j}.weight"] = wj[:, idx, :]
        elif through_flatten:
            pre_flat = shapes[next(k for k in range(i, j) if layers[k + 1].kind == "flatten")]
            length, chans = pre_flat
            params[f"{j}.weight"] = wj.reshape(length, chans, -1)[:, idx, :].reshape(length * len(idx), -1)
        else:
            params[f"{j}.weight"] = wj[idx, :]
        layers[i] = replace(layer, units=len(idx))
        arch = ArchSpec(tuple(layers), arch.width, arch.channels)
        shapes = arch.shapes()
    out = Model(arch, params, name=model.name)
    out.history = list(model.history)
    out.meta = dict(model.meta)
    return out


def iterative_prune(model: Model, d_train: WindowSet, d_val: WindowSet | None, cfg: PruneConfig,
                    train_cfg: TrainConfig | None = None) -> Model:
    """Remove the lowest-importance channels per layer in rounds of ``per_round`` sparsity.

    Each round recomputes importance on the current model and fine-tunes
    afterwards. Sparsity is measured against the starting channel counts.
    """
    original = {i: model.arch.layers[i].units for i in prunable_layers(model.arch)}
    if cfg.sparsity == 0:
        return model.copy()
    rounds = math.ceil(cfg.sparsity / cfg.per_round - 1e-9)
    tcfg = replace(train_cfg or TrainConfig(), epochs=cfg.finetune_epochs, seed=cfg.seed)
    sample = _sample(d_train, cfg.sample_size, cfg.seed)
    current = model
    for r in range(1, rounds + 1):
        target = min(cfg.sparsity, r * cfg.per_round)
        scores = taylor_importance(current, sample)
        keep = {}
        for i, units0 in original.items():
            n_keep = int(round(units0 * (1 - target)))
            if n_keep < 1:
                warnings.warn(f"pruning would empty layer {i}; keeping one channel", RuntimeWarning, stacklevel=2)
                n_keep = 1
            order = np.argsort(-scores[i], kind="stable")
            keep[i] = np.sort(order[:n_keep])
        current = prune_channels(current, keep)
        if tcfg.epochs:
            current = fit(current, d_train, d_val, tcfg)
        log.info("prune round %d/%d sparsity %.2f -> %s", r, rounds, target, current.arch.describe())
    current.meta["sparsity"] = cfg.sparsity
    return current


def quantize(model: Model, bits: int = 8) -> Model:
    """Symmetric per-tensor int8 codes for every tensor; scale = max|w| / 127."""
    if bits != 8:
        raise ValueError("only 8-bit quantisation is supported")
    if model.quantized:
        return model.copy()
    q = {k: fake_quant(v) for k, v in model.params.items()}
    out = Model(model.arch, {k: c for k, (c, _) in q.items()}, {k: s for k, (_, s) in q.items()}, model.name)
    out.history = list(model.history)
    out.meta = dict(model.meta)
    return out


def fine_tune(model: Model, d_train: WindowSet, d_val: WindowSet | None, epochs: int,
              train_cfg: TrainConfig | None = None) -> Model:
    """Continue training; quantised models train through the int8 grid (STE) and stay int8."""
    if epochs == 0:
        return model.copy()
    cfg = replace(train_cfg or TrainConfig(), epochs=epochs)
    return fit(model, d_train, d_val, cfg, ste=model.quantized)


def pca_project(model: Model, d_sample: WindowSet, energy: float = 0.95, batch: int = 256) -> Model:
    """Replace each hidden dense layer by a rank-k factorisation from PCA of its responses.

    The layer ``relu(x W + b)`` becomes ``relu((x W U) U^T + b + mu (I - U U^T))``
    where U holds the top-k principal directions of the centred responses
    ``x W`` and mu is their mean. ``k`` is the smallest count whose retained
    variance reaches ``energy``; zero-variance directions are never kept, and
    ``energy=1`` reproduces the layer exactly on the sample distribution.
    """
    if not 0 < energy <= 1:
        raise ValueError(f"energy must lie in (0, 1], got {energy}")
    arch, w = model.arch, model.weights()
    targets = prunable_layers(arch)
    targets = [i for i in targets if arch.layers[i].kind == "dense"]
    stats = {i: [0, 0.0, 0.0] for i in targets}
    params = {k: Tensor(v) for k, v in w.items()}
    for s in range(0, len(d_sample), batch):
        taps: dict[int, Tensor] = {}
        forward(arch, params, Tensor(d_sample.values[s : s + batch]), taps=taps)
        for i in targets:
            resp = taps[i - 1].data.astype(np.float64) @ w[f"{i}.weight"].astype(np.float64)
            stats[i][0] += len(resp)
            stats[i][1] = stats[i][1] + resp.sum(axis=0)
            stats[i][2] = stats[i][2] + resp.T @ resp
    layers: list[Layer] = []
    new_params: dict[str, np.ndarray] = {}
    info = {}
    for i, layer in enumerate(arch.layers):
        j = len(layers)
        if i not in targets:
            layers.append(layer)
            if f"{i}.weight" in w:
                new_params[f"{j}.weight"], new_params[f"{j}.bias"] = w[f"{i}.weight"], w[f"{i}.bias"]
            continue
        n, total, outer = stats[i]
        mu = total / n
        cov = outer / n - np.outer(mu, mu)
        evals, evecs = np.linalg.eigh(cov)
        evals, evecs = np.clip(evals[::-1], 0, None), evecs[:, ::-1]
        frac = np.cumsum(evals) / evals.sum() if evals.sum() > 0 else np.ones_like(evals)
        rank = max(1, int(np.sum(evals > 1e-9 * max(evals[0], 1e-300))))
        k = rank if energy >= 1 else min(rank, int(np.searchsorted(frac, energy - 1e-12)) + 1)
        U = evecs[:, :k]
        W = w[f"{i}.weight"].astype(np.float64)
        b = w[f"{i}.bias"].astype(np.float64)
        layers.append(Layer("dense", k, activation="linear"))
        new_params[f"{j}.weight"] = (W @ U).astype(np.float32)
        new_params[f"{j}.bias"] = np.zeros(k, np.float32)
        layers.append(replace(layer))
        new_params[f"{j + 1}.weight"] = U.T.astype(np.float32)
        new_params[f"{j + 1}.bias"] = (b + mu - (mu @ U) @ U.T).astype(np.float32)
        info[i] = {"components": k, "retained": float(frac[k - 1]), "spectrum": evals}
    out = Model(ArchSpec(tuple(layers), arch.width, arch.channels), new_params, name=model.name)
    out.history = list(model.history)
    out.meta = dict(model.meta, projection=info)
    return out


# --------------------------------------------------------------------------
# selection


def weighted_score(accuracy: float, f1: float, size_ratio: float, weights: Sequence[float]) -> float:
    w_acc, w_f1, w_size = weights
    return w_acc * accuracy + w_f1 * f1 + w_size * (1.0 - size_ratio)


@dataclass(frozen=True)
class CompositeScore:
    accuracy: float
    f1: float
    size_ratio: float
    score: float
    flagged: bool


def composite_score(metrics: Metrics, compressed_bytes: int, original_bytes: int,
                    weights: Sequence[float] = (1 / 3, 1 / 3, 1 / 3)) -> CompositeScore:
    """Weighted accuracy + F1 + size reduction; weights must be non-negative and sum to 1."""
    if len(weights) != 3 or any(x < 0 for x in weights) or abs(sum(weights) - 1) > 1e-9:
        raise ValueError(f"weights must be three non-negative numbers summing to 1, got {weights}")
    if original_bytes <= 0:
        raise ValueError("original size must be positive")
    ratio = compressed_bytes / original_bytes
    flagged = ratio > 1
    if flagged:
        log.warning("compressed model (%d B) is larger than the original (%d B)", compressed_bytes, original_bytes)
    return CompositeScore(metrics.accuracy, metrics.f1, ratio,
                          weighted_score(metrics.accuracy, metrics.f1, ratio, weights), flagged)


@dataclass
class LeaderboardEntry:
    arch_id: str
    accuracy: float
    f1: float
    bytes: int
    original_bytes: int
    score: float
    model: Model | None = None


def select_best(entries: Sequence[LeaderboardEntry], weights: Sequence[float]) -> LeaderboardEntry:
    """Highest weighted score; ties go to the smaller model, then to arch_id order."""
    if not entries:
        raise ValueError("no candidates to select from")

    def key(e):
        s = weighted_score(e.accuracy, e.f1, e.bytes / e.original_bytes, weights)
        return (-round(s, 12), e.bytes, e.arch_id)

    return min(entries, key=key)


def write_leaderboard(entries: Sequence[LeaderboardEntry], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["arch_id", "accuracy", "f1", "bytes", "score"])
        for e in sorted(entries, key=lambda e: (-e.score, e.bytes, e.arch_id)):
            w.writerow([e.arch_id, f"{e.accuracy:.6f}", f"{e.f1:.6f}", e.bytes, f"{e.score:.6f}"])


def compress_candidate(model: Model, d_train: WindowSet, d_val: WindowSet, cfg: CompressConfig) -> Model:
    """Prune -> int8 -> fine-tune through the int8 grid."""
    pruned = iterative_prune(model, d_train, d_val, cfg.prune, cfg.train)
    return fine_tune(quantize(pruned), d_train, d_val, cfg.finetune_epochs, cfg.train)


@dataclass
class SelectionResult:
    best: Model
    leaderboard: list[LeaderboardEntry]
    failures: dict[str, str]


def run_algorithm2(candidates: Sequence[ArchSpec], d_train: WindowSet, d_val: WindowSet, cfg: CompressConfig,
                   original_bytes: int | None = None, pretrained: dict[str, Model] | None = None,
                   parallel: int = 1) -> SelectionResult:
    """Train, compress and score every candidate; keep the best composite score.

    ``original_bytes`` is the common reference size for the size term; when
    omitted each candidate is compared with its own uncompressed size.
    Candidates that raise are logged and skipped.
    """
    pretrained = pretrained or {}
    ids = [f"{k}:{a.describe()}" for k, a in enumerate(candidates)]

    def one(k: int):
        arch, arch_id = candidates[k], ids[k]
        base = pretrained.get(arch.describe()) or train(arch, d_train, d_val, cfg.train, name=arch_id)
        compressed = compress_candidate(base, d_train, d_val, cfg)
        compressed.name = arch_id
        m = evaluate(compressed, d_val)
        orig = original_bytes or base.size_bytes()
        size = compressed.size_bytes()
        sc = composite_score(m, size, orig, cfg.weights)
        return LeaderboardEntry(arch_id, m.accuracy, m.f1, size, orig, sc.score, compressed)

    entries, failures = [], {}

    def guarded(k):
        try:
            return one(k)
        except Exception as exc:  # one bad candidate must not sink the batch
            log.error("candidate %s failed: %s", ids[k], exc)
            failures[ids[k]] = f"{type(exc).__name__}: {exc}"
            return None

    if parallel > 1:
        with ThreadPoolExecutor(max_workers=parallel) as pool:
            results = list(pool.map(guarded, range(len(candidates))))
    else:
        results = [guarded(k) for k in range(len(candidates))]
    entries = [e for e in results if e is not None]
    if not entries:
        raise RuntimeError(f"every candidate failed: {failures}")
    best = select_best(entries, cfg.weights)
    return SelectionResult(best.model, entries, failures)


def baselines(original: Model, d_train: WindowSet, d_val: WindowSet, cfg: CompressConfig) -> dict[str, Model]:
    """Single-technique comparisons: int8 only, pruning only, projection only."""
    sample = _sample(d_train, cfg.prune.sample_size, cfg.prune.seed)
    out = {
        "quantized": quantize(original),
        "pruned": iterative_prune(original, d_train, d_val, cfg.prune, cfg.train),
        "projected": pca_project(original, sample, cfg.energy),
    }
    for state, m in out.items():
        m.name = state
    return out
