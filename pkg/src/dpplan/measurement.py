"""Laplace-based query operators."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .matrix import DataVector, DimensionError, LinOp, Product, ensure_linop


def sample_laplace(scale: float, count: int, rng) -> np.ndarray:
    """i.i.d. Laplace(0, scale) draws by inverting the CDF."""
    if scale < 0:
        raise ValueError("Laplace scale must be nonnegative")
    u = 0.5 - rng.random(count)
    tail = np.maximum(1.0 - 2.0 * np.abs(u), np.finfo(float).tiny)
    return -scale * np.sign(u) * np.log(tail)


@dataclass
class Measurement:
    """Noisy answers ``y`` to ``Q`` on source ``source_id``.

    ``Q_eff`` addresses the base vector the source was derived from, so
    measurements on different derived sources can be combined in inference.
    """

    Q: LinOp
    y: np.ndarray
    noise_scale: float
    source_id: str
    Q_eff: LinOp | None = None
    epsilon: float = 0.0

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float).ravel()
        if self.Q_eff is None:
            self.Q_eff = self.Q
        if self.y.size != self.Q.rows:
            raise DimensionError("answer length does not match the query count")

    def to_dict(self):
        return {
            "Q": self.Q_eff.to_dict(),
            "y": self.y.tolist(),
            "noise_scale": self.noise_scale,
            "source_id": self.source_id,
        }


class VectorLaplaceOp:
    name = "vector_laplace"

    def __init__(self, Q: LinOp):
        self.Q = ensure_linop(Q)
        self.sensitivity = self.Q.sensitivity_l1()

    def run(self, payload, epsilon, rng):
        x = payload.values
        if x.size != self.Q.cols:
            raise DimensionError(f"query matrix has {self.Q.cols} columns, source has {x.size} cells")
        scale = self.sensitivity / epsilon
        return self.Q.matvec(x) + sample_laplace(scale, self.Q.rows, rng)


def vector_laplace(kernel, sv, Q, epsilon, base=None) -> Measurement:
    """Answer ``Q x`` with Laplace noise calibrated to the L1 sensitivity of Q."""
    op = VectorLaplaceOp(Q)
    n = kernel.size(sv)
    if op.Q.cols != n:
        raise DimensionError(f"query matrix has {op.Q.cols} columns, source has {n} cells")
    y = kernel.measure(sv, op, epsilon)
    M = kernel.lineage(sv, base)
    Q_eff = op.Q if M.shape[0] == M.shape[1] and M.kind == "identity" else Product(op.Q, M)
    return Measurement(op.Q, y, op.sensitivity / float(epsilon), sv.id, Q_eff, float(epsilon))


class NoisyCountOp:
    name = "noisy_count"

    def run(self, payload, epsilon, rng):
        size = float(payload.values.sum()) if isinstance(payload, DataVector) else float(len(payload))
        return size + float(sample_laplace(1.0 / epsilon, 1, rng)[0])


def noisy_count(kernel, sv, epsilon) -> float:
    return kernel.measure(sv, NoisyCountOp(), epsilon)
