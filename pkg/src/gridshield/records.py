from __future__ import annotations

from dataclasses import asdict, dataclass

MODEL_STATES = ("original", "quantized", "pruned", "projected", "proposed")


@dataclass(frozen=True)
class EvalRecord:
    """One measured cell: a model state under an attack at an access level."""

    model_id: str
    state: str
    attack: str
    p: int
    accuracy: float | None
    f1: float | None
    adr: float | None
    size_bytes: int | None
    latency_ms: float | None
    timestamp: str
    seed: int

    def to_dict(self) -> dict:
        return asdict(self)
