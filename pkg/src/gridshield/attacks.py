"""Evasion attacks on the detector and the gray-box transfer pipeline.

All attacks work on standardised windows and only ever move windows whose
ground-truth label is malicious: the adversary wants tampered readings to
pass as benign. ``floor`` is the standardised value of a zero reading;
when given, perturbed windows are clipped so readings stay non-negative.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .data import ACCESS_LEVELS, WindowSet, access_subset
from .errors import ModeCollapseError
from .model import ArchSpec, Model, TrainConfig, forward, predict_batch, reference_arch, train
from .optim import AdamState, adam_step
from .records import EvalRecord
from .tensor import Tensor, backward, bce_loss, concat, dense, mul, relu, tsum

log = logging.getLogger(__name__)

ATTACK_KINDS = ("fgsm", "bim", "cw", "cgan")


@dataclass
class AttackConfig:
    kind: str = "fgsm"
    epsilon: float = 0.05
    alpha: float = 0.01
    iterations: int = 10
    c_range: tuple[float, float] = (1e-3, 10.0)
    search_steps: int = 8
    cw_steps: int = 100
    cw_lr: float = 0.01
    cw_box: float | None = None
    kappa: float = 0.0
    n_samples: int = 512
    latent_dim: int = 16
    hidden: int = 64
    gan_lr: float = 1e-3
    gan_epochs: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS + ("none",):
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.kind == "bim" and not 0 < self.alpha <= self.epsilon:
            raise ValueError(f"BIM needs 0 < alpha <= epsilon, got alpha={self.alpha}, epsilon={self.epsilon}")
        if not self.c_range[0] < self.c_range[1]:
            raise ValueError(f"c_range must be increasing, got {self.c_range}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


@dataclass(frozen=True)
class KnowledgeLevel:
    p: int
    arch: ArchSpec | None = None

    def __post_init__(self):
        if self.p not in ACCESS_LEVELS:
            raise ValueError(f"access level must be one of {ACCESS_LEVELS}")

    @property
    def white_box(self) -> bool:
        return self.p == 100


@dataclass
class AdvBatch:
    kind: str
    originals: np.ndarray | None
    perturbed: np.ndarray
    labels: np.ndarray
    success: np.ndarray
    l2: np.ndarray | None = None
    linf: np.ndarray | None = None
    c: np.ndarray | None = None
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.originals is not None:
            d = (self.perturbed - self.originals).astype(np.float64)
            self.l2 = np.linalg.norm(d, axis=1)
            self.linf = np.abs(d).max(axis=1) if d.size else np.zeros(0)

    def __len__(self) -> int:
        return len(self.perturbed)

    def windows(self) -> WindowSet:
        """Adversarial windows (malicious rows only), tagged with the attack kind."""
        mal = self.labels == 1
        n = int(mal.sum())
        return WindowSet(self.perturbed[mal], np.ones(n), [self.kind] * n)

    def to_csv(self, path: str | Path) -> None:
        W = self.perturbed.shape[1]
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", "label", "success", "l2", "linf"] + [f"x{i}" for i in range(W)]
                       + [f"adv{i}" for i in range(W)])
            for i in range(len(self)):
                orig = self.originals[i] if self.originals is not None else np.full(W, np.nan)
                w.writerow([i, int(self.labels[i]), int(self.success[i]),
                            "" if self.l2 is None else f"{self.l2[i]:.9g}",
                            "" if self.linf is None else f"{self.linf[i]:.9g}"]
                           + [f"{v:.9g}" for v in orig] + [f"{v:.9g}" for v in self.perturbed[i]])


def _misclassified(model: Model, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return (predict_batch(model, x) > 0.5) != (y == 1)


def input_gradient(model: Model, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """d BCE(model(x), y) / dx, summed over the batch (rows independent)."""
    weights = {k: Tensor(v) for k, v in model.weights().items()}
    xt = Tensor(np.asarray(x, dtype=np.float32), requires_grad=True)
    z = forward(model.arch, weights, xt)
    backward(bce_loss(z, y, from_logits=True, reduction="sum"))
    return xt.grad


def _finish(kind, model, x, y, adv, floor, flags=None, c=None) -> AdvBatch:
    if floor is not None:
        adv = np.maximum(adv, np.float32(floor))
    adv = np.where((y == 1)[:, None], adv, x).astype(np.float32)
    return AdvBatch(kind, x.copy(), adv, y.copy(), _misclassified(model, adv, y), c=c, flags=flags or {})


def fgsm(model: Model, x, y, eps: float, floor: float | None = None) -> AdvBatch:
    """One signed-gradient step of size ``eps`` on the malicious rows."""
    if eps < 0:
        raise ValueError("eps must be >= 0")
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y).astype(np.int64)
    g = input_gradient(model, x, y)
    flags = {"zero_gradient": bool(not np.any(g[y == 1]))}
    if flags["zero_gradient"]:
        log.warning("fgsm: zero input gradient on every malicious window; returning inputs")
    adv = x + np.float32(eps) * np.sign(g)
    return _finish("fgsm", model, x, y, adv, floor, flags)


def bim(model: Model, x, y, eps: float, alpha: float, n_iter: int, floor: float | None = None) -> AdvBatch:
    """Iterated signed steps of size ``alpha``, each clipped back into the eps-ball."""
    if not 0 < alpha <= eps:
        raise ValueError(f"BIM needs 0 < alpha <= eps, got alpha={alpha}, eps={eps}")
    if n_iter < 1:
        raise ValueError("n_iter must be >= 1")
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y).astype(np.int64)
    lo, hi = x - np.float32(eps), x + np.float32(eps)
    adv = x.copy()
    zero = True
    for _ in range(n_iter):
        g = input_gradient(model, adv, y)
        zero = zero and not np.any(g[y == 1])
        adv = np.clip(adv + np.float32(alpha) * np.sign(g), lo, hi)
        if floor is not None:
            adv = np.maximum(adv, np.float32(floor))
    return _finish("bim", model, x, y, adv, floor, {"zero_gradient": bool(zero)})


def _margin_grad(model: Model, x: np.ndarray, c: np.ndarray, kappa: float):
    """Logit z and gradient of sum_i c_i * max(2 z_i, -kappa) w.r.t. x.

    The sigmoid score is viewed as the two-logit pair (z, -z), so the
    malicious-minus-benign margin is 2z.
    """
    weights = {k: Tensor(v) for k, v in model.weights().items()}
    xt = Tensor(x, requires_grad=True)
    z = forward(model.arch, weights, xt)
    active = (2 * z.data.reshape(-1) > -kappa).astype(np.float32)
    backward(tsum(mul(z, (2 * c * active).reshape(-1, 1).astype(np.float32))))
    return z.data.reshape(-1), xt.grad


def cw_fixed_c(model: Model, x: np.ndarray, c: np.ndarray, cfg: AttackConfig, floor: float | None = None):
    """Minimise ||d||_2 + c * max(margin, -kappa) by Adam on d for a fixed c per row.

    Returns (success, best perturbed rows, best l2). Success means some
    iterate was classified benign; "best" is the smallest-norm such iterate,
    or the last iterate when none succeeded.
    """
    n = len(x)
    delta = np.zeros_like(x)
    state = AdamState()
    best = x.copy()
    best_l2 = np.full(n, np.inf)
    ok = np.zeros(n, dtype=bool)
    for step in range(cfg.cw_steps + 1):
        cand = x + delta
        if floor is not None:
            cand = np.maximum(cand, np.float32(floor))
        z, gz = _margin_grad(model, cand, c, cfg.kappa)
        l2 = np.linalg.norm((cand - x).astype(np.float64), axis=1)
        hit = (z <= 0) & (l2 < best_l2)
        best[hit], best_l2[hit] = cand[hit], l2[hit]
        ok |= hit
        if step == cfg.cw_steps:
            break
        norm = np.linalg.norm(delta, axis=1, keepdims=True)
        g = gz + np.divide(delta, norm, out=np.zeros_like(delta), where=norm > 0)
        adam_step([delta], [g.astype(np.float32)], state, cfg.cw_lr)
        if cfg.cw_box is not None:
            np.clip(delta, -cfg.cw_box, cfg.cw_box, out=delta)
    last = x + delta if floor is None else np.maximum(x + delta, np.float32(floor))
    best[~ok] = last[~ok]
    best_l2[~ok] = np.linalg.norm((last[~ok] - x[~ok]).astype(np.float64), axis=1)
    return ok, best, best_l2


def cw(model: Model, x, y, cfg: AttackConfig, floor: float | None = None) -> AdvBatch:
    """Carlini-Wagner L2 with a per-row geometric binary search over c."""
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y).astype(np.int64)
    mal = np.flatnonzero(y == 1)
    xm = x[mal]
    n = len(mal)
    lo = np.full(n, cfg.c_range[0])
    hi = np.full(n, cfg.c_range[1])
    found_c = np.full(n, np.nan)
    best = xm.copy()
    best_l2 = np.full(n, np.inf)
    ever = np.zeros(n, dtype=bool)
    for _ in range(cfg.search_steps if n else 0):
        c = np.sqrt(lo * hi)
        ok, adv, l2 = cw_fixed_c(model, xm, c, cfg, floor)
        better = ok & (l2 < best_l2)
        best[better], best_l2[better] = adv[better], l2[better]
        found_c = np.where(ok, np.fmin(found_c, c), found_c)
        hi = np.where(ok, c, hi)
        lo = np.where(ok, lo, c)
        unseen = ~ever & ~ok
        best[unseen] = adv[unseen]
        ever |= ok
    out = x.copy()
    out[mal] = best
    c_full = np.full(len(x), np.nan)
    c_full[mal] = found_c
    return _finish("cw", model, x, y, out, floor, {"searched": int(n)}, c=c_full)


# --------------------------------------------------------------------------
# CGAN


class MLP:
    """Dense stack used for the CGAN generator and discriminator."""

    def __init__(self, sizes: list[int], seed: int, out_activation: str = "linear"):
        rng = np.random.default_rng(seed)
        self.sizes = sizes
        self.out_activation = out_activation
        self.params: dict[str, Tensor] = {}
        for i, (a, b) in enumerate(zip(sizes, sizes[1:])):
            lim = np.sqrt(6.0 / a)
            self.params[f"{i}.weight"] = Tensor(rng.uniform(-lim, lim, (a, b)).astype(np.float32), requires_grad=True)
            self.params[f"{i}.bias"] = Tensor(np.zeros(b, np.float32), requires_grad=True)

    def __call__(self, h: Tensor) -> Tensor:
        last = len(self.sizes) - 2
        for i in range(last + 1):
            h = dense(h, self.params[f"{i}.weight"], self.params[f"{i}.bias"])
            if i < last:
                h = relu(h)
        return h

    def tensors(self) -> list[Tensor]:
        return list(self.params.values())


class Generator:
    """G(z, label) -> standardised window."""

    def __init__(self, width: int, latent_dim: int = 16, hidden: int = 64, seed: int = 0):
        self.width = width
        self.latent_dim = latent_dim
        self.net = MLP([latent_dim + 2, hidden, hidden, width], seed)

    def __call__(self, z: np.ndarray, labels: np.ndarray) -> Tensor:
        return self.net(concat([Tensor(z), Tensor(_onehot(labels))], axis=1))

    def sample(self, n: int, label: int, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal((n, self.latent_dim)).astype(np.float32)
        return self(z, np.full(n, label)).data


class Discriminator:
    """D(x, label) -> real/fake logit."""

    def __init__(self, width: int, hidden: int = 64, seed: int = 1):
        self.net = MLP([width + 2, hidden, hidden, 1], seed)

    def __call__(self, x: Tensor, labels: np.ndarray) -> Tensor:
        return self.net(concat([x, Tensor(_onehot(labels))], axis=1))


def _onehot(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(labels), 2), dtype=np.float32)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def discriminator_accuracy(d: Discriminator, g: Generator, real: WindowSet, rng: np.random.Generator) -> float:
    n = len(real)
    fake = g.sample(n, 0, rng)
    p_real = d(Tensor(real.values), real.labels).data.reshape(-1) > 0
    p_fake = d(Tensor(fake), np.zeros(n, np.int64)).data.reshape(-1) > 0
    return float((p_real.sum() + (~p_fake).sum()) / (2 * n))


def train_cgan(accessible: WindowSet, cfg: AttackConfig, batch: int = 64) -> tuple[Generator, Discriminator]:
    """Non-saturating conditional GAN, ``cfg.gan_epochs`` passes over the accessible windows."""
    if len(np.unique(accessible.labels)) < 2:
        raise ValueError("cgan: accessible data must contain both labels")
    W = accessible.width
    g = Generator(W, cfg.latent_dim, cfg.hidden, seed=cfg.seed)
    d = Discriminator(W, cfg.hidden, seed=cfg.seed + 1)
    opt_g = AdamState(betas=(0.5, 0.999))
    opt_d = AdamState(betas=(0.5, 0.999))
    rng = np.random.default_rng(cfg.seed)
    x, y = accessible.values, accessible.labels
    for _ in range(cfg.gan_epochs):
        perm = rng.permutation(len(x))
        for i in range(0, len(x), batch):
            idx = perm[i : i + batch]
            m = len(idx)
            z = rng.standard_normal((m, cfg.latent_dim)).astype(np.float32)
            fake = g(z, y[idx]).data
            loss_d = bce_loss(d(Tensor(x[idx]), y[idx]), np.ones(m), from_logits=True) \
                + bce_loss(d(Tensor(fake), y[idx]), np.zeros(m), from_logits=True)
            backward(loss_d)
            adam_step([t.data for t in d.net.tensors()], [t.grad for t in d.net.tensors()], opt_d, cfg.gan_lr)
            loss_g = bce_loss(d(g(z, y[idx]), y[idx]), np.ones(m), from_logits=True)
            backward(loss_g)
            adam_step([t.data for t in g.net.tensors()], [t.grad for t in g.net.tensors()], opt_g, cfg.gan_lr)
    spread = float(g.sample(256, 0, np.random.default_rng(cfg.seed + 7)).var(axis=0).mean())
    if spread < 1e-4:
        raise ModeCollapseError(f"generator collapsed: mean per-feature variance {spread:.2e} < 1e-4")
    return g, d


def cgan_attack(accessible: WindowSet, cfg: AttackConfig, surrogate: Model | None = None,
                floor: float | None = None, max_rounds: int = 20) -> tuple[Generator, AdvBatch]:
    """Train a CGAN on the accessible slice and draw benign-conditioned windows.

    Draws are kept when ``surrogate`` scores them benign; they carry the
    malicious ground-truth label (they are injected readings). If too few
    pass after ``max_rounds`` draws, the batch is topped up with the
    rejected draws the surrogate scored most benign and flagged ``short``.
    """
    g, _ = train_cgan(accessible, cfg)
    rng = np.random.default_rng([cfg.seed, 99])
    kept, rejected, scores = [], [], []
    total = 0
    for _ in range(max_rounds):
        draw = g.sample(cfg.n_samples, 0, rng)
        if floor is not None:
            draw = np.maximum(draw, np.float32(floor))
        if surrogate is not None:
            prob = predict_batch(surrogate, draw)
            rejected.append(draw[prob >= 0.5])
            scores.append(prob[prob >= 0.5])
            draw = draw[prob < 0.5]
        kept.append(draw)
        total += len(draw)
        if total >= cfg.n_samples:
            break
    adv = np.concatenate(kept)[: cfg.n_samples]
    flags = {"accepted": int(len(adv))}
    if len(adv) < cfg.n_samples:
        flags["short"] = True
        log.warning("cgan: only %d of %d draws passed the surrogate filter", len(adv), cfg.n_samples)
        order = np.argsort(np.concatenate(scores), kind="stable")[: cfg.n_samples - len(adv)]
        adv = np.concatenate([adv, np.concatenate(rejected)[order]])
    adv = adv.astype(np.float32)
    labels = np.ones(len(adv), dtype=np.int64)
    success = (predict_batch(surrogate, adv) <= 0.5) if surrogate is not None else np.ones(len(adv), bool)
    return g, AdvBatch("cgan", None, adv, labels, success, flags=flags)


# --------------------------------------------------------------------------
# knowledge pipeline


def craft(kind: str, model: Model, x: np.ndarray, y: np.ndarray, cfg: AttackConfig,
          floor: float | None = None, accessible: WindowSet | None = None) -> AdvBatch:
    if kind == "fgsm":
        return fgsm(model, x, y, cfg.epsilon, floor)
    if kind == "bim":
        return bim(model, x, y, cfg.epsilon, cfg.alpha, cfg.iterations, floor)
    if kind == "cw":
        return cw(model, x, y, cfg, floor)
    if kind == "cgan":
        if accessible is None:
            raise ValueError("cgan needs the accessible training slice")
        return cgan_attack(accessible, cfg, model, floor)[1]
    if kind == "none":
        x = np.asarray(x, dtype=np.float32)
        return AdvBatch("none", x.copy(), x.copy(), np.asarray(y), _misclassified(model, x, y))
    raise ValueError(f"unknown attack kind {kind!r}")


def attack_targets(d_test: WindowSet, n: int | None, seed: int) -> WindowSet:
    """Malicious test windows to perturb, subsampled to ``n`` (order kept)."""
    mal = np.flatnonzero(d_test.labels == 1)
    if n is not None and len(mal) > n:
        mal = np.sort(np.random.default_rng([seed, 5]).choice(mal, n, replace=False))
    return d_test.subset(mal)


def train_surrogate(level: KnowledgeLevel, d_train: WindowSet, d_val: WindowSet, cfg: TrainConfig) -> Model:
    arch = level.arch or reference_arch(d_train.width)
    subset = access_subset(d_train, level.p, cfg.seed)
    return train(arch, subset, d_val, cfg, name=f"surrogate_p{level.p}")


def transfer_attack(surrogate: Model, level: KnowledgeLevel, d_train: WindowSet, targets: WindowSet,
                    attack: AttackConfig, floor: float | None = None) -> AdvBatch:
    accessible = access_subset(d_train, level.p, attack.seed) if attack.kind == "cgan" else None
    return craft(attack.kind, surrogate, targets.values, targets.labels, attack, floor, accessible)


def adr(model: Model, batch: AdvBatch) -> float:
    """Share of the batch's malicious windows the model still flags."""
    mal = batch.labels == 1
    if not mal.any():
        return float("nan")
    return float(np.mean(predict_batch(model, batch.perturbed[mal]) > 0.5))


def surrogate_pipeline(level: KnowledgeLevel, d_train: WindowSet, victim: Model, attack: AttackConfig,
                       d_val: WindowSet, d_test: WindowSet, train_cfg: TrainConfig,
                       floor: float | None = None, surrogate: Model | None = None,
                       state: str = "original") -> EvalRecord:
    """Train a surrogate on the p% slice, attack it, and score the victim on the transferred windows."""
    surrogate = surrogate or train_surrogate(level, d_train, d_val, train_cfg)
    targets = attack_targets(d_test, attack.n_samples, attack.seed)
    batch = transfer_attack(surrogate, level, d_train, targets, attack, floor)
    return EvalRecord(victim.name, state, attack.kind, level.p, None, None, adr(victim, batch), None, None,
                      datetime.now(timezone.utc).isoformat(), attack.seed)
