"""Training losses and their analytic gradients.

Features passed in here are already intra-normalized. Every loss returns
its value together with gradients w.r.t. its inputs, so the trainer can
chain them into the encoder without an autodiff framework.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateBatch, ShapeMismatch
from .numerics import SubspaceShape, l2_normalize, log_softmax
from .quantizer import Codebook, soft_quantize, soft_quantize_vjp


@dataclass
class Prototypes:
    """Cosine classifier weights: ``W[m]`` is the ``d x Nc`` matrix of sub-prototypes."""

    W: np.ndarray  # (M, d, Nc)
    beta: float = 4.0

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        if self.W.ndim != 3:
            raise ShapeMismatch(f"prototype array must be (M, d, Nc), got {self.W.shape}")

    @property
    def n_classes(self) -> int:
        return self.W.shape[2]

    def copy(self) -> "Prototypes":
        return Prototypes(self.W.copy(), self.beta)


def init_prototypes(shape: SubspaceShape, n_classes: int, seed: int, beta: float = 4.0) -> Prototypes:
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((shape.M, n_classes, shape.d))
    return Prototypes(np.transpose(l2_normalize(W), (0, 2, 1)), beta)


def as_multi_hot(labels, n_classes: int | None = None) -> np.ndarray:
    """Accept integer class ids or a 0/1 matrix; return float ``(B, Nc)``."""
    labels = np.asarray(labels)
    if labels.ndim == 1:
        if n_classes is None:
            n_classes = int(labels.max()) + 1
        out = np.zeros((len(labels), n_classes))
        out[np.arange(len(labels)), labels] = 1.0
        return out
    return labels.astype(np.float64)


def _normalized_targets(labels: np.ndarray) -> np.ndarray:
    sums = labels.sum(axis=-1, keepdims=True)
    if np.any(sums <= 0):
        raise DegenerateBatch("every item needs at least one label")
    return labels / sums


def npq_loss(x: np.ndarray, q: np.ndarray, labels):
    """N-pair product quantization loss over a labeled batch.

    Row ``b`` of the similarity matrix holds ``x_b . q_j`` for every ``j``;
    its target is the label-agreement row ``y_b . y_j`` scaled to sum to 1.
    The loss is the batch mean of the softmax cross-entropy.

    Returns:
        ``(loss, grad_x, grad_q)``.
    """
    x = np.asarray(x, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if x.shape != q.shape or x.ndim != 2:
        raise ShapeMismatch(f"features {x.shape} and quantized {q.shape} must be matching (B, D) arrays")
    B = len(x)
    if B < 2:
        raise DegenerateBatch("N-pair loss needs a batch of at least 2")
    y = as_multi_hot(labels)
    if len(y) != B:
        raise ShapeMismatch("one label row per batch item required")
    agreement = y @ y.T
    sums = agreement.sum(axis=1, keepdims=True)
    if np.any(sums <= 0):
        raise DegenerateBatch("an anchor agrees with no item in the batch")
    target = agreement / sums
    S = x @ q.T
    logp = log_softmax(S)
    loss = -np.sum(target * logp) / B
    dS = (np.exp(logp) - target) / B
    return loss, dS @ q, dS.T @ x


def _blocks(x, M: int, d: int) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[-1] != M * d:
        raise ShapeMismatch(f"feature dimension {x.shape[-1]} does not match prototypes ({M} x {d})")
    return x.reshape(len(x), M, d)


def cls_loss(x: np.ndarray, labels, proto: Prototypes):
    """Cosine-classifier cross-entropy averaged over subspaces and batch.

    Returns:
        ``(loss, grad_x, grad_W)``; ``grad_x`` matches the shape of ``x``.
    """
    x = np.asarray(x, dtype=np.float64)
    M, d, nc = proto.W.shape
    blocks = _blocks(x, M, d)
    B = len(blocks)
    labels = np.atleast_1d(labels) if np.ndim(labels) == 0 else labels
    target = _normalized_targets(as_multi_hot(labels, nc))
    if target.shape != (B, nc):
        raise ShapeMismatch(f"labels must give {B} rows over {nc} classes, got {target.shape}")
    logits = proto.beta * np.einsum("bmd,mdc->bmc", blocks, proto.W)
    logp = log_softmax(logits)
    loss = -np.sum(target[:, None, :] * logp) / (B * M)
    dlogits = (np.exp(logp) - target[:, None, :]) / (B * M)
    grad_x = proto.beta * np.einsum("bmc,mdc->bmd", dlogits, proto.W)
    grad_W = proto.beta * np.einsum("bmd,bmc->mdc", blocks, dlogits)
    return loss, grad_x.reshape(x.shape), grad_W


def sem_loss(x: np.ndarray, proto: Prototypes):
    """Mean entropy of the per-subspace class predictions on unlabeled data.

    Returns:
        ``(loss, grad_x, grad_W)``. These are plain gradients of the entropy;
        the sign conventions of the mini-max game are applied by the caller.
    """
    x = np.asarray(x, dtype=np.float64)
    M, d, _ = proto.W.shape
    blocks = _blocks(x, M, d)
    B = len(blocks)
    logits = proto.beta * np.einsum("bmd,mdc->bmc", blocks, proto.W)
    logp = log_softmax(logits)
    p = np.exp(logp)
    H = -np.sum(p * logp, axis=-1)  # (B, M)
    loss = H.sum() / (B * M)
    # dH/dz_l = -p_l (log p_l + H)
    dlogits = -p * (logp + H[..., None]) / (B * M)
    grad_x = proto.beta * np.einsum("bmc,mdc->bmd", dlogits, proto.W)
    grad_W = proto.beta * np.einsum("bmd,bmc->mdc", blocks, dlogits)
    return loss, grad_x.reshape(x.shape), grad_W


@dataclass
class ObjectiveResult:
    total: float
    npq: float
    cls: float
    sem: float
    grad_labeled: np.ndarray  # d total / d labeled features
    grad_unlabeled: np.ndarray  # d total / d unlabeled features (SEM path, before reversal)
    grad_Z: np.ndarray
    grad_W: np.ndarray


def total_objective(
    x_labeled: np.ndarray,
    labels,
    x_unlabeled: np.ndarray,
    cb: Codebook,
    proto: Prototypes,
    lambda1: float,
    lambda2: float,
) -> ObjectiveResult:
    """``npq + lambda1 * cls - lambda2 * sem`` with plain gradients.

    ``grad_Z`` and ``grad_W`` are gradients of the total, so descending on
    them maximizes the entropy w.r.t. the prototypes. ``grad_unlabeled`` is
    meant to be fed to the encoder as its reversal gradient, which turns the
    encoder's update into entropy minimization.
    """
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError("balancing weights must be non-negative")
    q = soft_quantize(x_labeled, cb)
    l_npq, gx, gq = npq_loss(x_labeled, q, labels)
    gx_from_q, grad_Z = soft_quantize_vjp(x_labeled, cb, gq)
    l_cls, gx_cls, gW_cls = cls_loss(x_labeled, labels, proto)
    l_sem, gu_sem, gW_sem = sem_loss(x_unlabeled, proto)
    return ObjectiveResult(
        total=l_npq + lambda1 * l_cls - lambda2 * l_sem,
        npq=l_npq,
        cls=l_cls,
        sem=l_sem,
        grad_labeled=gx + gx_from_q + lambda1 * gx_cls,
        grad_unlabeled=-lambda2 * gu_sem,
        grad_Z=grad_Z,
        grad_W=lambda1 * gW_cls - lambda2 * gW_sem,
    )
