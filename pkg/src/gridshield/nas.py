"""Architecture search by Bayesian optimisation (GP surrogate + expected improvement)."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.stats import norm

from .errors import ShapeError
from .model import ArchSpec, Layer, Metrics, TrainConfig, conv, dense_layer, evaluate, maxpool, train

log = logging.getLogger(__name__)

MAX_BLOCKS = 4
VECTOR_LEN = 3 * MAX_BLOCKS - 1  # filters x4, kernels x4, pool bitmask, dense units, dropout


@dataclass(frozen=True)
class SearchSpace:
    """Conv blocks (filters, kernel, optional pool) -> dense -> dropout -> sigmoid.

    Encoded as ``[f1..f4, k1..k4, pool_mask, dense_units, dropout]``; absent
    blocks have filter and kernel 0 and a clear pool bit.
    """

    width: int = 48
    channels: int = 1
    filters: tuple[int, ...] = (32, 64, 128, 256, 512)
    kernels: tuple[int, ...] = (3, 5)
    dense_units: tuple[int, ...] = (128, 256, 512, 1024)
    dropouts: tuple[float, ...] = (0.3, 0.5)

    def decode(self, vec) -> ArchSpec:
        v = [float(a) for a in np.asarray(vec).reshape(-1)]
        if len(v) != VECTOR_LEN:
            raise ValueError(f"encoded vector must have length {VECTOR_LEN}, got {len(v)}")
        f, k, mask, units, rate = v[:4], v[4:8], int(v[8]), int(v[9]), v[10]
        n = sum(1 for x in f if x > 0)
        if n < 1 or any(x > 0 for x in f[n:]) or any(x > 0 for x in k[n:]) or mask >> n:
            raise ValueError(f"blocks must be a contiguous prefix: {v}")
        if any(int(x) not in self.filters for x in f[:n]) or any(int(x) not in self.kernels for x in k[:n]):
            raise ValueError(f"filters/kernels outside the search space: {v}")
        if units not in self.dense_units or not any(abs(rate - d) < 1e-9 for d in self.dropouts):
            raise ValueError(f"dense units/dropout outside the search space: {v}")
        layers: list[Layer] = []
        for i in range(n):
            layers.append(conv(int(f[i]), int(k[i])))
            if mask >> i & 1:
                layers.append(maxpool(2))
        layers += [Layer("flatten"), dense_layer(units), Layer("dropout", rate=rate), dense_layer(1, "sigmoid")]
        return ArchSpec(tuple(layers), self.width, self.channels)

    def encode(self, arch: ArchSpec) -> np.ndarray:
        vec = np.zeros(VECTOR_LEN)
        layers = list(arch.layers)
        i = block = 0
        while i < len(layers) and layers[i].kind == "conv":
            l = layers[i]
            if block >= MAX_BLOCKS or l.stride != 1 or l.activation != "relu":
                raise ValueError(f"architecture outside the search space at layer {i}")
            vec[block], vec[4 + block] = l.units, l.kernel
            i += 1
            if i < len(layers) and layers[i].kind == "maxpool":
                if layers[i].kernel != 2:
                    raise ValueError("only pool size 2 is in the search space")
                vec[8] += 1 << block
                i += 1
            block += 1
        tail = layers[i:]
        if (block == 0 or len(tail) != 4 or tail[0].kind != "flatten" or tail[1].kind != "dense"
                or tail[1].activation != "relu" or tail[2].kind != "dropout"):
            raise ValueError("architecture outside the search space")
        vec[9], vec[10] = tail[1].units, tail[2].rate
        self.decode(vec)
        return vec

    def is_valid(self, vec) -> bool:
        try:
            self.decode(vec)
        except (ValueError, ShapeError):
            return False
        return True

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        while True:
            n = int(rng.integers(1, MAX_BLOCKS + 1))
            vec = np.zeros(VECTOR_LEN)
            vec[:n] = rng.choice(self.filters, n)
            vec[4 : 4 + n] = rng.choice(self.kernels, n)
            vec[8] = int(rng.integers(0, 1 << n))
            vec[9] = rng.choice(self.dense_units)
            vec[10] = rng.choice(self.dropouts)
            if self.is_valid(vec):
                return vec

    def features(self, vec) -> np.ndarray:
        """Map an encoded vector into [0, 1]^14 for the GP kernel."""
        v = np.asarray(vec, dtype=float)
        f = np.where(v[:4] > 0, np.log2(np.maximum(v[:4], 1)) / np.log2(max(self.filters)), 0.0)
        k = np.where(v[4:8] > 0, v[4:8] / max(self.kernels), 0.0)
        pool = np.array([(int(v[8]) >> i) & 1 for i in range(MAX_BLOCKS)], dtype=float)
        units = np.log2(v[9]) / np.log2(max(self.dense_units))
        return np.concatenate([f, k, pool, [units, v[10]]])


# --------------------------------------------------------------------------
# Gaussian process


class GaussianProcess:
    """Zero-mean GP with an RBF kernel on standardised targets.

    With ``length_scale=None`` the length scale is picked from a fixed grid
    by log marginal likelihood, so fitting is deterministic.
    """

    GRID = (0.1, 0.2, 0.35, 0.5, 0.75, 1.0, 1.5, 2.5)

    def __init__(self, length_scale: float | None = None, noise: float = 1e-6):
        self.length_scale = length_scale
        self.noise = noise

    def _k(self, a, b, ls):
        d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
        return np.exp(-0.5 * d2 / ls**2)

    def fit(self, X, y) -> "GaussianProcess":
        self.X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        self.mu = y.mean()
        self.sd = y.std() or 1.0
        self.y = (y - self.mu) / self.sd
        grid = (self.length_scale,) if self.length_scale else self.GRID
        best = None
        for ls in grid:
            K = self._k(self.X, self.X, ls) + (self.noise + 1e-10) * np.eye(len(self.X))
            try:
                cf = cho_factor(K, lower=True)
            except np.linalg.LinAlgError:
                continue
            alpha = cho_solve(cf, self.y)
            lml = -0.5 * self.y @ alpha - np.log(np.diag(cf[0])).sum()
            if best is None or lml > best[0]:
                best = (lml, ls, cf, alpha)
        if best is None:
            raise np.linalg.LinAlgError("GP kernel matrix not positive definite for any length scale")
        _, self.ls_, self.cf_, self.alpha_ = best
        return self

    def predict(self, Xs):
        Xs = np.asarray(Xs, dtype=float)
        Ks = self._k(Xs, self.X, self.ls_)
        mean = Ks @ self.alpha_
        v = cho_solve(self.cf_, Ks.T)
        var = np.clip(1.0 - np.einsum("ij,ji->i", Ks, v), 0.0, None)
        return self.mu + self.sd * mean, self.sd * np.sqrt(var)


def expected_improvement(mean, sd, best: float) -> np.ndarray:
    """EI for maximisation; reduces to max(mean - best, 0) as sd -> 0."""
    mean = np.asarray(mean, dtype=float)
    sd = np.asarray(sd, dtype=float)
    gain = mean - best
    out = np.maximum(gain, 0.0)
    ok = sd > 1e-12
    z = gain[ok] / sd[ok]
    out[ok] = gain[ok] * norm.cdf(z) + sd[ok] * norm.pdf(z)
    return np.maximum(out, 0.0)


@dataclass
class BOState:
    space: SearchSpace
    observations: list[tuple[np.ndarray, float]] = field(default_factory=list)
    noise: float = 1e-6
    gp: GaussianProcess | None = None

    @property
    def best_observed(self) -> float:
        return max(p for _, p in self.observations) if self.observations else -np.inf

    def observe(self, vec, perf: float) -> None:
        self.observations.append((np.asarray(vec, dtype=float), float(perf)))
        if len(self.observations) >= 2:
            X = np.array([self.space.features(v) for v, _ in self.observations])
            self.gp = GaussianProcess(noise=self.noise).fit(X, [p for _, p in self.observations])

    def acquisition(self, vecs) -> np.ndarray:
        X = np.array([self.space.features(v) for v in vecs])
        mean, sd = self.gp.predict(X)
        return expected_improvement(mean, sd, self.best_observed)


def propose_batch(state: BOState, k: int, candidates: int, rng: np.random.Generator) -> list[np.ndarray]:
    seen = {tuple(v) for v, _ in state.observations}
    if len(state.observations) < 2 or state.gp is None:
        out = []
        while len(out) < k:
            v = state.space.sample(rng)
            if tuple(v) not in seen:
                seen.add(tuple(v))
                out.append(v)
        return out
    pool, keys = [], set()
    for _ in range(candidates * 4):
        v = state.space.sample(rng)
        if tuple(v) in seen or tuple(v) in keys:
            continue
        keys.add(tuple(v))
        pool.append(v)
        if len(pool) == candidates:
            break
    ei = state.acquisition(pool)
    order = np.argsort(-ei, kind="stable")
    return [pool[i] for i in order[:k]]


def propose_next(state: BOState, candidates: int = 500, seed: int | np.random.Generator = 0) -> ArchSpec:
    """Argmax of EI over ``candidates`` random decodable points (random before 2 observations)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return state.space.decode(propose_batch(state, 1, candidates, rng)[0])


def bayes_opt(objective: Callable[[np.ndarray], float], space: SearchSpace, budget: int, seed: int,
              n_init: int = 4, candidates: int = 500) -> BOState:
    """Plain BO loop over encoded vectors; used by run_nas and for testing the optimiser alone."""
    rng = np.random.default_rng(seed)
    state = BOState(space)
    for i in range(budget):
        if i < n_init:
            vec = propose_batch(BOState(space, list(state.observations)), 1, candidates, rng)[0]
        else:
            vec = propose_batch(state, 1, candidates, rng)[0]
        state.observe(vec, objective(vec))
    return state


# --------------------------------------------------------------------------
# NAS driver


@dataclass
class Candidate:
    arch: ArchSpec
    vector: list[float]
    metrics: Metrics
    perf: float

    def to_dict(self) -> dict:
        return {"arch": self.arch.to_dict(), "vector": self.vector, "metrics": self.metrics.to_dict(),
                "perf": self.perf}

    @classmethod
    def from_dict(cls, d: dict) -> "Candidate":
        return cls(ArchSpec.from_dict(d["arch"]), d["vector"], Metrics(**d["metrics"]), d["perf"])


@dataclass
class NasResult:
    top: list[Candidate]
    C: float
    F: float
    effective_C: float
    effective_F: float
    thresholds_met: bool
    log: list[dict]

    def to_dict(self) -> dict:
        return {"top": [c.to_dict() for c in self.top], "C": self.C, "F": self.F,
                "effective_C": self.effective_C, "effective_F": self.effective_F,
                "thresholds_met": self.thresholds_met, "evaluations": len(self.log)}

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "result.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        with (directory / "log.jsonl").open("w") as fh:
            for rec in self.log:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory: str | Path) -> "NasResult":
        directory = Path(directory)
        d = json.loads((directory / "result.json").read_text())
        log_path = directory / "log.jsonl"
        records = [json.loads(line) for line in log_path.read_text().splitlines()] if log_path.exists() else []
        return cls([Candidate.from_dict(c) for c in d["top"]], d["C"], d["F"], d["effective_C"],
                   d["effective_F"], d["thresholds_met"], records)


def performance(m: Metrics) -> float:
    return (m.accuracy + m.f1) / 2


def _evaluate_arch(arch, d_train, d_val, cfg):
    model = train(arch, d_train, d_val, cfg, name=arch.describe())
    return evaluate(model, d_val)


def run_nas(d_train, d_val, C: float, F: float, n: int, budget: int, seed: int,
            space: SearchSpace | None = None, train_cfg: TrainConfig | None = None,
            candidates: int = 500, n_init: int = 4, parallel: int = 1) -> NasResult:
    """Search until ``n`` architectures meet accuracy >= C and F1 >= F, or the budget runs out.

    If fewer than ``n`` meet the thresholds the best ``n`` by performance
    are returned with ``thresholds_met=False``; the effective thresholds
    are then the weakest accuracy/F1 among them.
    """
    if budget < n or n < 1:
        raise ValueError(f"need budget >= n >= 1, got budget={budget}, n={n}")
    if not (0 <= C <= 1 and 0 <= F <= 1):
        raise ValueError("thresholds C and F must lie in [0, 1]")
    space = space or SearchSpace(width=d_train.width)
    cfg = train_cfg or TrainConfig(epochs=10, seed=seed)
    rng = np.random.default_rng(seed)
    state = BOState(space)
    evaluated: list[Candidate] = []
    records: list[dict] = []
    width = max(1, parallel)

    def meets(c: Candidate) -> bool:
        return c.metrics.accuracy >= C and c.metrics.f1 >= F

    while len(evaluated) < budget and sum(meets(c) for c in evaluated) < n:
        k = min(width, budget - len(evaluated))
        if len(state.observations) < n_init:
            k = min(k, n_init - len(state.observations))
            vecs = propose_batch(BOState(space, list(state.observations)), k, candidates, rng)
        else:
            vecs = propose_batch(state, k, candidates, rng)
        archs = [space.decode(v) for v in vecs]
        if width == 1:
            results = [(0, _evaluate_arch(archs[0], d_train, d_val, cfg))]
        else:
            with ThreadPoolExecutor(max_workers=width) as pool:
                futs = {pool.submit(_evaluate_arch, a, d_train, d_val, cfg): i for i, a in enumerate(archs)}
                results = [(futs[f], f.result()) for f in as_completed(futs)]
        for i, metrics in results:
            cand = Candidate(archs[i], [float(x) for x in vecs[i]], metrics, performance(metrics))
            evaluated.append(cand)
            state.observe(vecs[i], cand.perf)
            records.append({"vector": cand.vector, "arch": archs[i].describe(), "accuracy": metrics.accuracy,
                            "f1": metrics.f1, "perf": cand.perf,
                            "timestamp": datetime.now(timezone.utc).isoformat()})
            log.info("nas %d/%d %s perf %.4f", len(evaluated), budget, archs[i].describe(), cand.perf)

    ranked = sorted(evaluated, key=lambda c: -c.perf)
    passing = [c for c in ranked if meets(c)]
    met = len(passing) >= n
    top = passing[:n] if met else ranked[:n]
    eff_c = C if met else min(c.metrics.accuracy for c in top)
    eff_f = F if met else min(c.metrics.f1 for c in top)
    if not met:
        log.warning("nas: only %d architectures met C=%.3f F=%.3f; thresholds relaxed", len(passing), C, F)
    return NasResult(top, C, F, eff_c, eff_f, met, records)


def random_search(d_train, d_val, budget: int, seed: int, space: SearchSpace | None = None,
                  train_cfg: TrainConfig | None = None) -> list[Candidate]:
    """Equal-budget random baseline, sorted by performance."""
    space = space or SearchSpace(width=d_train.width)
    cfg = train_cfg or TrainConfig(epochs=10, seed=seed)
    rng = np.random.default_rng([seed, 1])
    seen, out = set(), []
    while len(out) < budget:
        v = space.sample(rng)
        if tuple(v) in seen:
            continue
        seen.add(tuple(v))
        arch = space.decode(v)
        m = _evaluate_arch(arch, d_train, d_val, cfg)
        out.append(Candidate(arch, [float(x) for x in v], m, performance(m)))
    return sorted(out, key=lambda c: -c.perf)
