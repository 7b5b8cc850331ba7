"""Best-of-K displacement metrics and their report format."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError


def ade(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean per-step Euclidean distance between trajectories."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ContractError(f"ade shape mismatch: {pred.shape} vs {gt.shape}")
    return float(np.linalg.norm(pred - gt, axis=-1).mean())


def fde(pred: np.ndarray, gt: np.ndarray) -> float:
    """Euclidean distance at the final prediction step."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ContractError(f"fde shape mismatch: {pred.shape} vs {gt.shape}")
    return float(np.linalg.norm(pred[-1] - gt[-1]))


def best_of_k(preds: np.ndarray, gt: np.ndarray) -> tuple[float, float]:
    """Minimum ADE and minimum FDE over K samples, taken independently."""
    preds = np.asarray(preds, dtype=np.float64)
    if preds.ndim != 3 or preds.shape[0] == 0:
        raise ContractError(f"best_of_k needs a non-empty (K, T, 2) array, got {preds.shape}")
    ades = [ade(p, gt) for p in preds]
    fdes = [fde(p, gt) for p in preds]
    return min(ades), min(fdes)


@dataclass
class EvalRow:
    dataset: str
    k: int
    ade: float
    fde: float
    n_instances: int


@dataclass
class EvalReport:
    """Per-dataset metrics plus an unweighted cross-dataset average."""

    rows: list[EvalRow] = field(default_factory=list)

    def add(self, dataset: str, k: int, ades: list[float], fdes: list[float]) -> None:
        self.rows.append(
            EvalRow(dataset=dataset, k=k, ade=float(np.mean(ades)), fde=float(np.mean(fdes)), n_instances=len(ades))
        )

    @property
    def avg(self) -> EvalRow | None:
        if not self.rows:
            return None
        return EvalRow(
            dataset="AVG",
            k=self.rows[0].k,
            ade=float(np.mean([r.ade for r in self.rows])),
            fde=float(np.mean([r.fde for r in self.rows])),
            n_instances=sum(r.n_instances for r in self.rows),
        )

    def to_csv(self) -> str:
        lines = ["dataset,K,ade,fde,n_instances"]
        rows = list(self.rows)
        if len(self.rows) > 1:
            rows.append(self.avg)
        for r in rows:
            lines.append(f"{r.dataset},{r.k},{r.ade:.6f},{r.fde:.6f},{r.n_instances}")
        return "\n".join(lines) + "\n"
