"""Self-supervised loss kernels and teacher maintenance."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ContractError, DimensionError, NumericalError, ParameterError
from .nn import Linear, Module, Parameter, trunc_normal

LOG_CLAMP = 1e-12


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def check_normalized(p, tol: float = 1e-5, what: str = "distribution"):
    sums = np.sum(_data(p), axis=-1, dtype=np.float64)
    if not np.all(np.isfinite(sums)):
        raise NumericalError(f"{what} contains non-finite values")
    if not np.all(np.abs(sums - 1.0) <= tol):
        worst = float(np.max(np.abs(sums - 1.0)))
        raise ContractError(f"{what} is not normalized (max |sum - 1| = {worst:.3g})")


class ProjectionHead(Module):
    """MLP -> L2-normalized bottleneck -> weight-normalized linear layer to K logits.

    With ``weight_norm`` each output unit's weight column has unit norm, so
    logits are cosines in ``[-1, 1]``.
    """

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 hidden_dim: int = 512, bottleneck_dim: int = 128, num_layers: int = 3,
                 weight_norm: bool = True):
        dims = [in_dim] + [hidden_dim] * (num_layers - 1) + [bottleneck_dim]
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.last = Parameter(trunc_normal(rng, (bottleneck_dim, out_dim)))
        self.weight_norm = weight_norm
        self.out_dim = out_dim

    def embed(self, x) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ag.gelu(x)
        return ag.l2_normalize(x, axis=-1)

    def forward(self, x) -> Tensor:
        w = self.last
        if self.weight_norm:
            w = w / ag.sqrt(ag.tsum(w * w, axis=0, keepdims=True))
        return ag.matmul(self.embed(x), w)


def clustering_loss(p_target, q_pred) -> Tensor:
    """Cross-entropy ``-sum_i p_i log q_i`` averaged over leading axes.

    The target is treated as a constant.
    """
    check_normalized(p_target, what="target")
    check_normalized(q_pred, what="prediction")
    q = ag.as_tensor(q_pred)
    p = np.asarray(_data(p_target), dtype=q.dtype)
    if p.shape[-1] != q.shape[-1]:
        raise DimensionError(f"distributions over {p.shape[-1]} vs {q.shape[-1]} dims")
    ce = -(ag.log(ag.clamp_min(q, LOG_CLAMP)) * p).sum(axis=-1)
    return ce.mean() if ce.ndim else ce


def teacher_distribution(logits, center, teacher_temp: float) -> Tensor:
    """Centered, sharpened softmax of teacher logits (never on the tape)."""
    if not teacher_temp > 0:
        raise ParameterError(f"teacher temperature must be positive, got {teacher_temp}")
    with ag.no_grad():
        logits = ag.as_tensor(logits)
        centered = logits.data - np.asarray(center, dtype=logits.dtype)
        return Tensor(ag.softmax(centered, teacher_temp).data)


class MemoryBank:
    """FIFO queue of L2-normalized key vectors."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ParameterError("memory bank capacity must be >= 1")
        self.capacity = capacity
        self.dim = dim
        self._buf = np.zeros((capacity, dim), dtype=np.float32)
        self._ptr = 0
        self._count = 0

    def __len__(self):
        return self._count

    def enqueue(self, keys):
        keys = np.atleast_2d(np.asarray(_data(keys), dtype=np.float64))
        if keys.shape[1] != self.dim:
            raise DimensionError(f"bank stores {self.dim}-d keys, got {keys.shape[1]}")
        keys = keys / np.maximum(np.linalg.norm(keys, axis=1, keepdims=True), 1e-12)
        for k in keys.astype(np.float32):
            self._buf[self._ptr] = k
            self._ptr = (self._ptr + 1) % self.capacity
            self._count = min(self._count + 1, self.capacity)

    @property
    def keys(self) -> np.ndarray:
        """Stored keys, oldest first."""
        if self._count < self.capacity:
            return self._buf[:self._count].copy()
        return np.concatenate([self._buf[self._ptr:], self._buf[:self._ptr]])

    def state(self) -> dict:
        return {"buffer": self._buf.copy(), "ptr": self._ptr, "count": self._count}

    def load_state(self, state: dict):
        self._buf = np.array(state["buffer"], dtype=np.float32)
        self._ptr = int(state["ptr"])
        self._count = int(state["count"])


def infonce_loss(query, key, bank: MemoryBank | np.ndarray, temperature: float) -> Tensor:
    """``-log(exp(<q,k>/t) / (exp(<q,k>/t) + sum_i exp(<q,n_i>/t)))``, batch-averaged."""
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    negatives = bank.keys if isinstance(bank, MemoryBank) else np.asarray(bank)
    if negatives.ndim != 2 or len(negatives) == 0:
        raise ContractError("InfoNCE needs at least one negative in the bank")
    q = ag.as_tensor(query)
    single = q.ndim == 1
    if single:
        q = q.reshape(1, -1)
    k = np.atleast_2d(_data(key)).astype(q.dtype)
    for name, arr in (("query", q.data), ("key", k)):
        if not np.allclose(np.linalg.norm(arr, axis=-1), 1.0, atol=1e-3):
            raise ContractError(f"{name} vectors must be unit-normalized")
    pos = (q * k).sum(axis=-1, keepdims=True)
    neg = ag.matmul(q, negatives.T.astype(q.dtype))
    logits = ag.concat([pos, neg], axis=-1)
    loss = -ag.log_softmax(logits, temperature)[:, 0]
    return loss.mean()


def ema_update(teacher, student, momentum: float):
    """``theta_t <- m * theta_t + (1 - m) * theta_s`` for every named parameter."""
    if not 0.0 <= momentum <= 1.0:
        raise ParameterError(f"EMA momentum must lie in [0, 1], got {momentum}")
    t_params = dict(teacher.named_parameters()) if isinstance(teacher, Module) else teacher
    s_params = dict(student.named_parameters()) if isinstance(student, Module) else student
    if set(t_params) != set(s_params):
        diff = sorted(set(t_params) ^ set(s_params))
        raise ContractError(f"teacher/student parameter names differ: {diff[:5]}")
    m = float(momentum)
    for name, tp in t_params.items():
        sd = _data(s_params[name])
        if isinstance(tp, Tensor):
            tp.data = (tp.data * tp.dtype.type(m) + sd * tp.dtype.type(1.0 - m)).astype(tp.dtype)
        else:
            t_params[name] = tp * m + sd * (1.0 - m)
    return teacher


def center_update(center, batch_logits, momentum: float) -> np.ndarray:
    """``c <- lambda * c + (1 - lambda) * mean(batch logits)``."""
    if not 0.0 <= momentum <= 1.0:
        raise ParameterError(f"center momentum must lie in [0, 1], got {momentum}")
    logits = np.asarray(_data(batch_logits), dtype=np.float64)
    logits = logits.reshape(-1, logits.shape[-1]) if logits.ndim > 1 else logits[None]
    if logits.shape[0] == 0:
        raise ContractError("center update needs a non-empty batch")
    center = np.asarray(center, dtype=np.float64)
    return momentum * center + (1.0 - momentum) * logits.mean(axis=0)


def masked_reconstruction_loss(pred, target, mask, eps: float = 1e-6) -> Tensor:
    """MSE between predictions and layer-normalized targets on masked tokens only."""
    pred = ag.as_tensor(pred)
    target = np.asarray(_data(target), dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != target.shape or mask.shape != pred.shape[:-1]:
        raise DimensionError(f"pred {pred.shape}, target {target.shape}, mask {mask.shape} disagree")
    count = int(mask.sum())
    if count == 0:
        raise ContractError("mask selects no tokens")
    tgt = target - target.mean(axis=-1, keepdims=True)
    tgt = tgt / np.sqrt((tgt * tgt).mean(axis=-1, keepdims=True) + eps)
    weight = mask[..., None].astype(pred.dtype) / (count * pred.shape[-1])
    diff = pred - tgt.astype(pred.dtype)
    return (diff * diff * weight).sum()
