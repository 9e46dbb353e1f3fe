"""Hebbian fast-weight memory: write, decay, normalise, retrieve, gate.

The memory ``M`` (``B×H×d_h×d_h``) is transient. It is built from key/value
co-activations of the current input, read back with the queries, and never
stored with the learned parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor

SCOPES = ("per_forward", "per_episode")


class StateError(RuntimeError):
    """Raised when a memory tensor does not fit the input it is used with."""


@dataclass(frozen=True)
class HfwConfig:
    d: int
    heads: int = 1
    eta_max: float = 1.0
    delta: float = 1.0
    eps: float = 1e-6
    memory_scope: str = "per_forward"
    # ablation hook: replace sigmoid(W_g x) by this constant
    gate_override: float | None = None

    def __post_init__(self):
        if self.d <= 0 or self.heads <= 0 or self.d % self.heads:
            raise ValueError(f"width {self.d} must be a positive multiple of heads {self.heads}")
        for label in ("eta_max", "delta", "eps"):
            if not getattr(self, label) > 0:
                raise ValueError(f"{label} must be strictly positive")
        if self.memory_scope not in SCOPES:
            raise ValueError(f"memory_scope must be one of {SCOPES}")

    @property
    def d_head(self) -> int:
        return self.d // self.heads


def _uniform_fan_in(rng: np.random.Generator, fan_in: int, shape, dtype) -> Tensor:
    bound = math.sqrt(3.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=dtype)


@dataclass
class HfwParams:
    """Learned parameters. Projection matrices are stored input-major (``d_in×d_out``)."""

    w_k: Tensor
    w_v: Tensor
    w_q: Tensor
    w_g: Tensor
    eta_logit: Tensor
    lambda_logit: Tensor
    gamma: Tensor
    beta: Tensor

    FIELDS = ("w_k", "w_v", "w_q", "w_g", "eta_logit", "lambda_logit", "gamma", "beta")

    @classmethod
    def init(cls, cfg: HfwConfig, rng: np.random.Generator, dtype=np.float32,
             eta_logit: float = -3.0, lambda_logit: float = 2.0) -> "HfwParams":
        d = cfg.d
        mats = [_uniform_fan_in(rng, d, (d, d), dtype) for _ in range(4)]
        return cls(
            *mats,
            eta_logit=Tensor(eta_logit, requires_grad=True, dtype=dtype),
            lambda_logit=Tensor(lambda_logit, requires_grad=True, dtype=dtype),
            gamma=Tensor(np.ones(d), requires_grad=True, dtype=dtype),
            beta=Tensor(np.zeros(d), requires_grad=True, dtype=dtype),
        )

    def named(self) -> dict[str, Tensor]:
        return {name: getattr(self, name) for name in self.FIELDS}


@dataclass
class FastMemory:
    m: Tensor

    @classmethod
    def zeros(cls, batch: int, cfg: HfwConfig, dtype=np.float32) -> "FastMemory":
        return cls(Tensor(np.zeros((batch, cfg.heads, cfg.d_head, cfg.d_head)), dtype=dtype))

    @property
    def batch(self) -> int:
        return self.m.shape[0]

    @property
    def heads(self) -> int:
        return self.m.shape[1]

    def expand(self, batch: int) -> "FastMemory":
        """Share a single-item memory across ``batch`` readers."""
        if self.batch == batch:
            return self
        if self.batch != 1:
            raise StateError(f"cannot expand memory of batch {self.batch} to {batch}")
        return FastMemory(T.broadcast_to(self.m, (batch,) + self.m.shape[1:]))

    def frobenius_norms(self) -> np.ndarray:
        return np.sqrt((self.m.data ** 2).sum(axis=(-2, -1)))


def effective_plasticity(params: HfwParams, cfg: HfwConfig) -> tuple[Tensor, Tensor]:
    eta = T.scale(T.sigmoid(params.eta_logit), cfg.eta_max)
    lam = T.sigmoid(params.lambda_logit)
    return eta, lam


def plasticity_values(params: HfwParams, cfg: HfwConfig) -> tuple[float, float]:
    with T.no_grad():
        eta, lam = effective_plasticity(params, cfg)
    return float(eta.data), float(lam.data)


def split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return T.transpose(T.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def project_kvq(x: Tensor, params: HfwParams, cfg: HfwConfig) -> tuple[Tensor, Tensor, Tensor]:
    if x.ndim != 3 or x.shape[-1] != cfg.d:
        raise DimensionError(f"expected B×N×{cfg.d} input, got {x.shape}")
    return tuple(split_heads(T.matmul(x, w), cfg.heads) for w in (params.w_k, params.w_v, params.w_q))


def associate(k: Tensor, v: Tensor, cfg: HfwConfig) -> Tensor:
    """Clamped key/value co-activation ``clamp(Kᵀ V / sqrt(N), -delta, delta)``."""
    n = k.shape[-2]
    raw = T.scale(T.matmul(k.swapaxes(-1, -2), v), 1.0 / math.sqrt(n))
    return T.clamp(raw, -cfg.delta, cfg.delta)


def memory_write(mem: FastMemory, a: Tensor, eta: Tensor, lam: Tensor, cfg: HfwConfig) -> FastMemory:
    raw = T.add(T.hadamard(lam, mem.m), T.hadamard(eta, a))
    return FastMemory(T.frobenius_normalize(raw, cfg.eps))


def retrieve(q: Tensor, mem: FastMemory) -> Tensor:
    return T.matmul(q, mem.m)


def gate_output(x: Tensor, r_merged: Tensor, params: HfwParams, gate_override: float | None = None) -> Tensor:
    if x.shape != r_merged.shape:
        raise DimensionError(f"gate input {x.shape} and retrieval {r_merged.shape} differ")
    if gate_override is None:
        gated = T.hadamard(T.sigmoid(T.matmul(x, params.w_g)), r_merged)
    else:
        gated = T.scale(r_merged, gate_override)
    return T.layer_norm(gated, params.gamma, params.beta)


def hfw_forward(x: Tensor, params: HfwParams, cfg: HfwConfig,
                mem: FastMemory | None = None) -> tuple[Tensor, FastMemory]:
    """One fast-weight pass. Returns the gated output and the written memory.

    With ``per_forward`` scope the incoming memory is ignored and a zero
    memory is used. With ``per_episode`` the caller threads ``mem`` through
    successive calls and zeroes it at episode start.
    """
    b = x.shape[0]
    if cfg.memory_scope == "per_forward" or mem is None:
        mem = FastMemory.zeros(b, cfg, x.dtype)
    elif mem.batch != b or mem.heads != cfg.heads:
        raise StateError(f"memory {mem.m.shape} is stale for input batch {b} with {cfg.heads} heads")
    k, v, q = project_kvq(x, params, cfg)
    eta, lam = effective_plasticity(params, cfg)
    mem = memory_write(mem, associate(k, v, cfg), eta, lam, cfg)
    r = merge_heads(retrieve(q, mem))
    return gate_output(x, r, params, cfg.gate_override), mem


def memory_lifetime(lam: float) -> float:
    """Mean number of writes an association survives under decay ``lam``."""
    if not 0.0 <= lam < 1.0:
        raise ValueError(f"decay must lie in [0, 1), got {lam}")
    return 1.0 / (1.0 - lam)
