"""Joint training objective: symmetric InfoNCE plus location cross-entropy."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import DimensionError, DomainError
from .numerics import Tensor

DEFAULT_TEMPERATURE = 0.1


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` over the batch (max-shifted)."""
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be (B, K), got {logits.shape}")
    B, K = logits.shape
    if labels.shape != (B,):
        raise DimensionError(f"expected {B} labels, got shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= K):
        raise DomainError(f"labels must lie in [0, {K})")
    logp = nx.log_softmax(logits, axis=-1)
    picked = logp[np.arange(B), labels]
    return nx.scale(nx.mean(picked), -1.0)


def infonce(U: Tensor, V: Tensor, temperature: float = DEFAULT_TEMPERATURE) -> Tensor:
    """Symmetric InfoNCE between matched rows of ``U`` and ``V``.

    Row ``i`` of both views is the positive pair; every other row in the batch
    is a negative. Averages the U->V and V->U cross-entropies.
    """
    if temperature <= 0:
        raise DomainError(f"temperature must be positive, got {temperature}")
    if U.shape != V.shape or U.ndim != 2:
        raise DimensionError(f"view embeddings must share a (B, d) shape, got {U.shape} and {V.shape}")
    B = U.shape[0]
    targets = np.arange(B)
    sim = nx.scale(nx.matmul(U, nx.transpose(V, (1, 0))), 1.0 / temperature)
    forward = cross_entropy(sim, targets)
    backward = cross_entropy(nx.transpose(sim, (1, 0)), targets)
    return nx.scale(nx.add(forward, backward), 0.5)


@dataclass
class LossValue:
    total: Tensor
    infonce: Tensor
    ce: Tensor
    temperature: float

    def values(self) -> tuple[float, float, float]:
        return self.total.item(), self.infonce.item(), self.ce.item()


def classification_loss(logits_u: Tensor, logits_v: Tensor, labels) -> Tensor:
    """Both views are supervised with the shared location label; the two terms are averaged."""
    return nx.scale(nx.add(cross_entropy(logits_u, labels), cross_entropy(logits_v, labels)), 0.5)


def total_loss(U: Tensor, V: Tensor, logits_u: Tensor, logits_v: Tensor, labels,
               temperature: float = DEFAULT_TEMPERATURE) -> LossValue:
    """Unit-weighted sum of the contrastive and classification terms."""
    labels = np.asarray(labels)
    if len(np.unique(labels)) != len(labels):
        raise DomainError("a contrastive batch cannot repeat a location id")
    l_nce = infonce(U, V, temperature)
    l_ce = classification_loss(logits_u, logits_v, labels)
    return LossValue(nx.add(l_nce, l_ce), l_nce, l_ce, temperature)
