"""Semi-supervised training loop.

One step encodes a labeled and an unlabeled mini-batch, evaluates the total
objective, routes the entropy gradient through the encoder's reversal input
and applies ADAM to encoder weights, codewords and prototypes. Codewords and
prototypes are projected back to unit norm after every step.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _binio, encoder
from .errors import EmptyDataset, IoError, NonFiniteGradient, ShapeMismatch, TrainingDiverged
from .index import codebook_to_bytes, read_codebook
from .numerics import SubspaceShape, l2_normalize
from .objectives import Prototypes, as_multi_hot, init_prototypes, total_objective
from .quantizer import Codebook, init_codebook, soft_assign

log = logging.getLogger(__name__)

MAGIC = b"GPQM"
VERSION = 1


@dataclass
class TrainConfig:
    alpha: float = 20.0
    beta: float = 4.0
    K: int = 16
    d: int = 12
    M: int = 8
    hidden: int = 128
    lambda1: float = 0.1
    lambda2: float = 0.1
    lr: float = 0.0002
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    decay_rate: float = 0.9
    decay_interval: int = 500
    batch_size: int = 64
    epochs: int = 20
    seed: int = 0
    use_classifier: bool = True
    proto_update_every_epoch: bool = False

    def __post_init__(self):
        positive = ("alpha", "beta", "lr", "adam_eps", "decay_rate", "decay_interval", "batch_size", "hidden")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be non-negative")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        self.subspace  # validates M, d, K

    @property
    def subspace(self) -> SubspaceShape:
        return SubspaceShape(M=self.M, d=self.d, K=self.K)

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelState:
    params: encoder.EncoderParams
    codebook: Codebook
    prototypes: Prototypes
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    step: int = 0

    @property
    def shape(self) -> SubspaceShape:
        return self.codebook.shape

    def arrays(self) -> dict[str, np.ndarray]:
        out = self.params.arrays()
        out["Z"] = self.codebook.Z
        out["W"] = self.prototypes.W
        return out


def init_state(input_dim: int, n_classes: int, config: TrainConfig) -> ModelState:
    shape = config.subspace
    ss = np.random.SeedSequence(config.seed).spawn(3)
    seeds = [int(s.generate_state(1)[0]) for s in ss]
    return ModelState(
        params=encoder.init_params(input_dim, config.hidden, shape.D, seeds[0]),
        codebook=init_codebook(shape, seeds[1], config.alpha),
        prototypes=init_prototypes(shape, n_classes, seeds[2], config.beta),
    )


def make_batches(n_labeled: int, n_unlabeled: int, batch_size: int, seed: int):
    """Endless stream of epochs of ``(labeled_idx, unlabeled_idx)`` pairs.

    An epoch walks once through the larger of the two sets; the smaller one
    is recycled with a fresh shuffle whenever it runs out. Both sets are
    reshuffled independently at the start of every epoch.
    """
    if n_labeled == 0 or n_unlabeled == 0:
        raise EmptyDataset("both labeled and unlabeled sets must be non-empty")
    if batch_size > min(n_labeled, n_unlabeled):
        raise ValueError(f"batch size {batch_size} exceeds the smaller set ({min(n_labeled, n_unlabeled)})")
    rng = np.random.default_rng(seed)
    n_batches = max(n_labeled, n_unlabeled) // batch_size
    need = n_batches * batch_size

    def order(n):
        parts = [rng.permutation(n)]
        while sum(len(p) for p in parts) < need:
            parts.append(rng.permutation(n))
        return np.concatenate(parts)[:need]

    while True:
        lab = order(n_labeled)
        unl = order(n_unlabeled)
        yield [
            (lab[i * batch_size : (i + 1) * batch_size], unl[i * batch_size : (i + 1) * batch_size])
            for i in range(n_batches)
        ]


def learning_rate(step: int, config: TrainConfig) -> float:
    return config.lr * config.decay_rate ** (step / config.decay_interval)


def adam_step(state: ModelState, grads: dict[str, np.ndarray], config: TrainConfig) -> ModelState:
    """ADAM with bias correction and exponential decay, in place.

    After the update, codewords and prototype columns are re-projected onto
    the unit sphere.
    """
    arrays = state.arrays()
    for name, g in grads.items():
        if g.shape != arrays[name].shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, parameter has {arrays[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name}")
    lr = learning_rate(state.step, config)
    t = state.step + 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    for name, g in grads.items():
        m, v = state.moments.get(name, (np.zeros_like(g), np.zeros_like(g)))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.moments[name] = (m, v)
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        arrays[name] -= lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)
    state.step = t
    state.codebook.Z = l2_normalize(state.codebook.Z)
    state.prototypes.W = l2_normalize(state.prototypes.W.transpose(0, 2, 1)).transpose(0, 2, 1).copy()
    return state


@dataclass
class StepResult:
    total: float
    npq: float
    cls: float
    sem: float
    grads: dict[str, np.ndarray]


def compute_gradients(
    state: ModelState,
    raw_labeled: np.ndarray,
    labels: np.ndarray,
    raw_unlabeled: np.ndarray,
    config: TrainConfig,
) -> StepResult:
    """Objective value and routed gradients for one mini-batch.

    Codeword and prototype gradients are plain gradients of the total
    objective. The encoder gets the N-pair and classification gradients as
    is, and the entropy gradient through its reversal input.
    """
    shape = state.shape
    xl, cache_l = encoder.encode(state.params, raw_labeled, shape)
    xu, cache_u = encoder.encode(state.params, raw_unlabeled, shape)
    res = total_objective(
        xl, labels, xu, state.codebook, state.prototypes,
        config.lambda1 if config.use_classifier else 0.0,
        config.lambda2 if config.use_classifier else 0.0,
    )
    g_l = encoder.backward(state.params, cache_l, res.grad_labeled)
    g_u = encoder.backward(state.params, cache_u, np.zeros_like(xu), reversal_grad=res.grad_unlabeled)
    grads = {name: getattr(g_l, name) + getattr(g_u, name) for name in encoder.PARAM_NAMES}
    grads["Z"] = res.grad_Z
    if config.use_classifier:
        grads["W"] = res.grad_W
    return StepResult(res.total, res.npq, res.cls, res.sem, grads)


def update_codewords_from_prototypes(cb: Codebook, proto: Prototypes, alpha: float | None = None) -> Codebook:
    """Soft-assign each codeword against its subspace's prototypes, renormalized.

    Returns a new codebook; ``cb`` is left untouched.
    """
    M, d, _ = proto.W.shape
    if (M, d) != (cb.shape.M, cb.shape.d):
        raise ShapeMismatch("prototypes and codebook disagree on subspace layout")
    alpha = cb.alpha if alpha is None else alpha
    Z = np.empty_like(cb.Z)
    for m in range(M):
        q, _ = soft_assign(cb.Z[m], proto.W[m].T, alpha)
        Z[m] = l2_normalize(q)
    return Codebook(cb.shape, Z, cb.alpha)


def _check_unit_norms(state: ModelState, tol: float = 1e-6) -> None:
    zn = np.linalg.norm(state.codebook.Z, axis=-1)
    wn = np.linalg.norm(state.prototypes.W, axis=1)
    if np.abs(zn - 1).max() > tol or np.abs(wn - 1).max() > tol:
        raise AssertionError("unit-norm invariant violated after optimizer step")


def train(
    raw_labeled: np.ndarray,
    labels,
    raw_unlabeled: np.ndarray,
    config: TrainConfig,
    state: ModelState | None = None,
    callback=None,
):
    """Run ``config.epochs`` epochs and return ``(state, epoch_log)``.

    ``epoch_log`` holds one dict per epoch with the batch-mean ``npq``,
    ``cls``, ``sem`` and ``total`` losses.

    Raises:
        TrainingDiverged: when a loss becomes non-finite.
    """
    raw_labeled = np.asarray(raw_labeled, dtype=np.float64)
    raw_unlabeled = np.asarray(raw_unlabeled, dtype=np.float64)
    if raw_labeled.shape[1] != raw_unlabeled.shape[1]:
        raise ShapeMismatch("labeled and unlabeled inputs differ in dimension")
    y = as_multi_hot(labels)
    if state is None:
        state = init_state(raw_labeled.shape[1], y.shape[1], config)
    if y.shape[1] != state.prototypes.n_classes:
        raise ShapeMismatch(f"labels span {y.shape[1]} classes, prototypes have {state.prototypes.n_classes}")

    history = []
    batches = make_batches(len(raw_labeled), len(raw_unlabeled), config.batch_size, config.seed)
    for epoch in range(1, config.epochs + 1):
        sums = np.zeros(4)
        epoch_batches = next(batches)
        for li, ui in epoch_batches:
            try:
                with np.errstate(over="raise", invalid="raise"):
                    step = compute_gradients(state, raw_labeled[li], y[li], raw_unlabeled[ui], config)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"overflow at epoch {epoch}, step {state.step}: {exc}") from exc
            values = (step.npq, step.cls, step.sem, step.total)
            if not all(math.isfinite(v) for v in values):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {state.step}")
            sums += values
            try:
                adam_step(state, step.grads, config)
            except NonFiniteGradient as exc:
                raise TrainingDiverged(f"{exc} at epoch {epoch}, step {state.step}") from exc
            if not all(np.isfinite(a).all() for a in state.arrays().values()):
                raise TrainingDiverged(f"non-finite parameters after step {state.step}")
        _check_unit_norms(state)
        if config.proto_update_every_epoch and config.use_classifier:
            state.codebook = update_codewords_from_prototypes(state.codebook, state.prototypes, config.alpha)
        npq, cls, sem, total = sums / len(epoch_batches)
        entry = {"epoch": epoch, "npq": float(npq), "cls": float(cls), "sem": float(sem), "total": float(total)}
        history.append(entry)
        log.info("epoch %d npq=%.5f cls=%.5f sem=%.5f total=%.5f", epoch, npq, cls, sem, total)
        if callback is not None:
            callback(entry, state)
    return state, history


def encode_features(state: ModelState, raw: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Intra-normalized features for a raw ``(N, input)`` array."""
    raw = np.asarray(raw, dtype=np.float64)
    if len(raw) == 0:
        return np.zeros((0, state.shape.D))
    parts = [encoder.encode(state.params, raw[i : i + chunk], state.shape)[0] for i in range(0, len(raw), chunk)]
    return np.concatenate(parts)


def format_log(history: list[dict]) -> str:
    """One ``key=value`` line per epoch, full float precision."""
    lines = []
    for entry in history:
        lines.append(" ".join(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}" for k, v in entry.items()))
    return "\n".join(lines) + ("\n" if lines else "")


def checkpoint_bytes(state: ModelState) -> bytes:
    """``GPQM`` checkpoint: encoder block, codebook, prototypes, scales."""
    enc = encoder.to_bytes(state.params)
    W = state.prototypes.W  # (M, d, Nc) stored prototype-major like codewords
    return b"".join([
        MAGIC,
        _binio.pack("HI", VERSION, len(enc)),
        enc,
        codebook_to_bytes(state.codebook),
        _binio.pack("I", W.shape[2]),
        _binio.f32(W.transpose(0, 2, 1)),
        _binio.pack("dd", state.codebook.alpha, state.prototypes.beta),
    ])


def state_from_bytes(data: bytes) -> ModelState:
    reader = _binio.Reader(data)
    reader.magic(MAGIC)
    reader.version(VERSION)
    enc_len = reader.unpack("I")
    enc_reader = _binio.Reader(reader.take(enc_len))
    params = encoder.read_params(enc_reader)
    cb = read_codebook(reader)
    nc = reader.unpack("I")
    W = reader.array("f4", (cb.shape.M, nc, cb.shape.d)).astype(np.float64).transpose(0, 2, 1)
    alpha, beta = reader.unpack("dd")
    cb.alpha = alpha
    return ModelState(params, cb, Prototypes(W.copy(), beta))


def save_checkpoint(state: ModelState, path) -> None:
    try:
        with open(path, "wb") as fh:
            fh.write(checkpoint_bytes(state))
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> ModelState:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    return state_from_bytes(data)
