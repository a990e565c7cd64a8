"""CNN detector: architecture descriptors, weights, training and evaluation."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import serialize
from .data import ATTACK_TAGS, WindowSet
from .errors import DivergenceError, ShapeError
from .optim import Adam
from .tensor import Tensor, backward, bce_loss, conv1d, dense, dropout, flatten, maxpool1d, relu, reshape, sigmoid

log = logging.getLogger(__name__)

LAYER_KINDS = ("conv", "maxpool", "flatten", "dense", "dropout")
ACTIVATIONS = ("relu", "sigmoid", "linear")


@dataclass(frozen=True)
class Layer:
    kind: str
    units: int = 0  # filters for conv, units for dense
    kernel: int = 0  # conv kernel length or pool size
    stride: int = 1
    activation: str = "linear"
    rate: float = 0.0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


def conv(filters: int, kernel: int = 3, stride: int = 1, activation: str = "relu") -> Layer:
    return Layer("conv", filters, kernel, stride, activation)


def maxpool(size: int = 2) -> Layer:
    return Layer("maxpool", kernel=size, stride=size)


def dense_layer(units: int, activation: str = "relu") -> Layer:
    return Layer("dense", units, activation=activation)


@dataclass(frozen=True)
class ArchSpec:
    layers: tuple[Layer, ...]
    width: int = 48
    channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        self.shapes()

    def shapes(self) -> list[tuple[int, ...]]:
        """Per-sample output shape after each layer; raises ShapeError if invalid."""
        if not self.layers:
            raise ShapeError("architecture has no layers")
        last = self.layers[-1]
        if last.kind != "dense" or last.units != 1 or last.activation != "sigmoid":
            raise ShapeError("final layer must be dense(1, sigmoid)")
        shape: tuple[int, ...] = (self.width, self.channels)
        out = []
        for i, layer in enumerate(self.layers):
            if layer.kind == "conv":
                if len(shape) != 2:
                    raise ShapeError(f"layer {i}: conv after flatten")
                length = (shape[0] - layer.kernel) // layer.stride + 1
                if shape[0] < layer.kernel or length < 1:
                    raise ShapeError(f"layer {i}: conv kernel {layer.kernel} on length {shape[0]}")
                shape = (length, layer.units)
            elif layer.kind == "maxpool":
                if len(shape) != 2 or shape[0] // layer.kernel < 1:
                    raise ShapeError(f"layer {i}: pool {layer.kernel} on shape {shape}")
                shape = (shape[0] // layer.kernel, shape[1])
            elif layer.kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif layer.kind == "dense":
                if len(shape) != 1:
                    raise ShapeError(f"layer {i}: dense on unflattened shape {shape}")
                shape = (layer.units,)
            out.append(shape)
        return out

    def to_dict(self) -> dict:
        return {"width": self.width, "channels": self.channels, "layers": [asdict(l) for l in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(tuple(Layer(**l) for l in d["layers"]), d.get("width", 48), d.get("channels", 1))

    def describe(self) -> str:
        parts = []
        for l in self.layers:
            if l.kind == "conv":
                parts.append(f"c{l.units}k{l.kernel}")
            elif l.kind == "maxpool":
                parts.append("p")
            elif l.kind == "dense":
                parts.append(f"d{l.units}")
            elif l.kind == "dropout":
                parts.append(f"x{l.rate:g}")
        return "-".join(parts)


def reference_arch(width: int = 48, channels: int = 1) -> ArchSpec:
    """The fixed detector: three convs, pool, conv, dense 1024, dropout, sigmoid."""
    return ArchSpec((
        conv(128), conv(256), conv(256), maxpool(2), conv(512),
        Layer("flatten"), dense_layer(1024), Layer("dropout", rate=0.5), dense_layer(1, "sigmoid"),
    ), width, channels)


def param_shapes(arch: ArchSpec) -> dict[str, tuple[int, ...]]:
    shapes = {}
    prev = (arch.width, arch.channels)
    for i, (layer, out) in enumerate(zip(arch.layers, arch.shapes())):
        if layer.kind == "conv":
            shapes[f"{i}.weight"] = (layer.units, prev[1], layer.kernel)
            shapes[f"{i}.bias"] = (layer.units,)
        elif layer.kind == "dense":
            shapes[f"{i}.weight"] = (prev[0], layer.units)
            shapes[f"{i}.bias"] = (layer.units,)
        prev = out
    return shapes


def forward(arch: ArchSpec, params: dict[str, Tensor], x: Tensor,
            training: bool = False, rng: np.random.Generator | None = None,
            taps: dict[int, Tensor] | None = None) -> Tensor:
    """Logits of shape (N, 1). The final sigmoid is left to the caller.

    If ``taps`` is a dict it receives each layer's activated output, keyed
    by layer index (key -1 holds the input).
    """
    if x.ndim == 2:
        x = reshape(x, (x.shape[0], x.shape[1], 1))
    if x.shape[1:] != (arch.width, arch.channels):
        raise ShapeError(f"input shape {x.shape[1:]} != ({arch.width}, {arch.channels})")
    h = x
    if taps is not None:
        taps[-1] = h
    last = len(arch.layers) - 1
    for i, layer in enumerate(arch.layers):
        if layer.kind == "conv":
            h = conv1d(h, params[f"{i}.weight"], params[f"{i}.bias"], layer.stride)
        elif layer.kind == "maxpool":
            h = maxpool1d(h, layer.kernel)
        elif layer.kind == "flatten":
            h = flatten(h)
        elif layer.kind == "dense":
            h = dense(h, params[f"{i}.weight"], params[f"{i}.bias"])
        elif layer.kind == "dropout":
            h = dropout(h, layer.rate, training, rng)
        if layer.activation == "relu":
            h = relu(h)
        elif layer.activation == "sigmoid" and i != last:
            h = sigmoid(h)
        if taps is not None:
            taps[i] = h
    return h


def fake_quant(w: np.ndarray) -> tuple[np.ndarray, float]:
    """Symmetric per-tensor int8 codes and scale for ``w``."""
    peak = float(np.max(np.abs(w))) if w.size else 0.0
    scale = float(np.float32(peak / 127.0)) if peak > 0 else 1.0  # the stored scale is float32
    w64 = np.asarray(w, dtype=np.float64)  # float32 division can round past the half-step
    q = np.sign(w64) * np.floor(np.abs(w64) / scale + 0.5)
    return np.clip(q, -128, 127).astype(np.int8), scale


def quant_grid(w: np.ndarray) -> np.ndarray:
    """``w`` rounded onto its own int8 grid, as float32."""
    q, scale = fake_quant(w)
    return q.astype(np.float32) * np.float32(scale)


class Model:
    """Weights for an :class:`ArchSpec`, full precision or int8 + per-tensor scale."""

    def __init__(self, arch: ArchSpec, params: dict[str, np.ndarray], scales: dict[str, float] | None = None,
                 name: str = "model"):
        self.arch = arch
        self.params = params
        self.scales = scales
        self.name = name
        self.history: list[dict] = []
        self.meta: dict = {}
        expected = param_shapes(arch)
        if set(expected) != set(params):
            raise ShapeError(f"parameter names {sorted(params)} do not match architecture {sorted(expected)}")
        for k, shape in expected.items():
            if tuple(params[k].shape) != shape:
                raise ShapeError(f"parameter {k} has shape {params[k].shape}, expected {shape}")

    @classmethod
    def init(cls, arch: ArchSpec, seed: int = 0, name: str = "model") -> "Model":
        rng = np.random.default_rng(seed)
        params = {}
        for k, shape in param_shapes(arch).items():
            if k.endswith(".bias"):
                params[k] = np.zeros(shape, dtype=np.float32)
                continue
            fan_in = int(np.prod(shape[1:])) if len(shape) == 3 else shape[0]
            gain = 6.0 if arch.layers[int(k.split(".")[0])].activation == "relu" else 3.0
            limit = np.sqrt(gain / fan_in)
            params[k] = rng.uniform(-limit, limit, size=shape).astype(np.float32)
        return cls(arch, params, name=name)

    @property
    def quantized(self) -> bool:
        return self.scales is not None

    def weights(self) -> dict[str, np.ndarray]:
        """Float32 view of every parameter (dequantised when quantised)."""
        if not self.quantized:
            return self.params
        return {k: v.astype(np.float32) * np.float32(self.scales[k]) for k, v in self.params.items()}

    def logits(self, x, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
        params = {k: Tensor(v) for k, v in self.weights().items()}
        return forward(self.arch, params, x, training, rng)

    def predict_proba(self, x: np.ndarray, batch: int = 256) -> np.ndarray:
        return predict_batch(self, x, batch)

    def copy(self, name: str | None = None) -> "Model":
        m = Model(self.arch, {k: v.copy() for k, v in self.params.items()},
                  None if self.scales is None else dict(self.scales), name or self.name)
        m.history = list(self.history)
        m.meta = dict(self.meta)
        return m

    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def to_bytes(self) -> bytes:
        return serialize.dumps(self.params, self.scales)

    def size_bytes(self) -> int:
        return len(self.to_bytes())

    @classmethod
    def from_bytes(cls, blob: bytes, arch: ArchSpec, name: str = "model") -> "Model":
        tensors, scales = serialize.loads(blob)
        return cls(arch, tensors, scales or None, name)

    def save(self, directory: str | Path) -> int:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "arch.json").write_text(json.dumps(self.arch.to_dict(), indent=2) + "\n")
        (directory / "history.json").write_text(json.dumps(self.history) + "\n")
        return serialize.save(directory / "weights.gsw", self.params, self.scales)

    @classmethod
    def load(cls, directory: str | Path, name: str | None = None) -> "Model":
        directory = Path(directory)
        arch = ArchSpec.from_dict(json.loads((directory / "arch.json").read_text()))
        model = cls.from_bytes((directory / "weights.gsw").read_bytes(), arch, name or directory.name)
        hist = directory / "history.json"
        if hist.exists():
            model.history = json.loads(hist.read_text())
        return model


# --------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0 or self.patience < 1:
            raise ValueError(f"invalid TrainConfig {self}")


def _as_xy(d) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(d, WindowSet):
        return d.values, d.labels.astype(np.float32)
    x, y = d
    return np.asarray(x, dtype=np.float32), np.asarray(y, dtype=np.float32)


def batch_loss(model: Model, x: np.ndarray, y: np.ndarray, batch: int = 256) -> float:
    total = 0.0
    for i in range(0, len(x), batch):
        z = model.logits(x[i : i + batch])
        total += float(bce_loss(z, y[i : i + batch], from_logits=True, reduction="sum").data)
    return total / max(1, len(x))


def accuracy(model: Model, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean((predict_batch(model, x) > 0.5) == (y > 0.5))) if len(x) else float("nan")


def fit(model: Model, d_train, d_val, cfg: TrainConfig, ste: bool = False) -> Model:
    """Train from ``model``'s current weights; return the best-validation-loss checkpoint.

    With ``ste`` the forward pass uses int8-rounded weights while Adam
    updates latent float copies (straight-through estimator) and the
    returned checkpoint is quantised.
    """
    x, y = _as_xy(d_train)
    xv, yv = _as_xy(d_val) if d_val is not None and len(_as_xy(d_val)[0]) else (x, y)
    if cfg.epochs == 0:
        return model.copy()
    latent = {k: Tensor(v.copy(), requires_grad=True) for k, v in model.weights().items()}
    opt = Adam(list(latent.values()), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    probe = slice(0, min(len(x), 2048))

    def snapshot() -> Model:
        if ste:
            q = {k: fake_quant(t.data) for k, t in latent.items()}
            return Model(model.arch, {k: c for k, (c, _) in q.items()}, {k: s for k, (_, s) in q.items()}, model.name)
        return Model(model.arch, {k: t.data.copy() for k, t in latent.items()}, name=model.name)

    acc0 = accuracy(model, x[probe], y[probe])
    best, best_loss, stale, history = snapshot(), batch_loss(snapshot(), xv, yv), 0, []
    last_finite = 0
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(len(x))
        running = 0.0
        for i in range(0, len(x), cfg.batch_size):
            idx = perm[i : i + cfg.batch_size]
            if ste:
                used = {k: Tensor(quant_grid(t.data), requires_grad=True) for k, t in latent.items()}
            else:
                used = latent
            z = forward(model.arch, used, Tensor(x[idx]), training=True, rng=rng)
            loss = bce_loss(z, y[idx], from_logits=True)
            backward(loss)
            if ste:
                for k in latent:
                    latent[k].grad = used[k].grad
            opt.step()
            running += float(loss.data) * len(idx)
        train_loss = running / len(x)
        val_loss = batch_loss(snapshot(), xv, yv)
        if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
            raise DivergenceError(f"non-finite loss at epoch {epoch}", last_finite)
        last_finite = epoch
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})
        log.debug("%s epoch %d train %.4f val %.4f", model.name, epoch, train_loss, val_loss)
        if val_loss < best_loss - 1e-7:
            best, best_loss, stale = snapshot(), val_loss, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    acc1 = accuracy(best, x[probe], y[probe])
    if acc1 < acc0:
        warnings.warn(f"{model.name}: training accuracy fell from {acc0:.3f} to {acc1:.3f}", RuntimeWarning,
                      stacklevel=2)
    best.history = model.history + history
    return best


def train(arch: ArchSpec, d_train, d_val, cfg: TrainConfig, name: str = "model") -> Model:
    return fit(Model.init(arch, cfg.seed, name), d_train, d_val, cfg)


# --------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    adr: float | None = None
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def metrics_from_counts(tp: int, fp: int, fn: int, tn: int, adr: float | None = None) -> Metrics:
    total = tp + fp + fn + tn
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return Metrics((tp + tn) / total if total else 0.0, precision, recall, f1, adr, tp, fp, fn, tn)


def predict_batch(model: Model, windows, batch: int = 256) -> np.ndarray:
    """Malicious-class probabilities, one per window, in input order."""
    x = windows.values if isinstance(windows, WindowSet) else np.asarray(windows, dtype=np.float32)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != model.arch.width:
        raise ShapeError(f"window width {x.shape[1]} != model input width {model.arch.width}")
    if len(x) == 0:
        return np.empty(0, dtype=np.float32)
    weights = {k: Tensor(v) for k, v in model.weights().items()}
    out = [forward(model.arch, weights, Tensor(x[i : i + batch])).data.reshape(-1) for i in range(0, len(x), batch)]
    z = np.concatenate(out)
    return (1.0 / (1.0 + np.exp(-z.astype(np.float64)))).astype(np.float32)


def evaluate(model: Model, d: WindowSet) -> Metrics:
    """Confusion-count metrics at threshold 0.5; ADR over attack-tagged windows only."""
    if len(d) == 0:
        raise ValueError("evaluate: empty dataset")
    pred = predict_batch(model, d) > 0.5
    truth = d.labels == 1
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    tn = int(np.sum(~pred & ~truth))
    adv = np.isin(d.provenance, ATTACK_TAGS)
    adr = float(pred[adv].mean()) if adv.any() else None
    return metrics_from_counts(tp, fp, fn, tn, adr)
