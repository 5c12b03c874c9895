"""The inductive attention recurrent cell.

A single step reads a bounded FIFO memory of ``(key, value)`` pairs, where keys
encode the cell's own past predictions (with the gradient cut at the
prediction) and values are past hidden states.  The query is the previous
prediction, or the current frame in the ``query="frame"`` ablation.

All functions work on a leading batch axis; a single stream is a batch of one.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, fields
from typing import NamedTuple

import numpy as np

from . import numerics as nx
from .numerics import ContractError, NonFiniteError, ParamStore, Tensor

QUERY_MODES = ("prediction", "frame")
GATE_MODES = ("vector", "scalar")


@dataclass(frozen=True)
class CellConfig:
    d: int = 64
    C: int = 4
    F: int = 16
    S: int = 16
    heads: int = 4
    dropout: float = 0.0
    query: str = "prediction"
    gate: str = "vector"

    def __post_init__(self):
        if self.d <= 0 or self.d % 4:
            raise ContractError(f"d must be a positive multiple of 4, got {self.d}")
        if self.C < 1 or self.F < 1:
            raise ContractError("C and F must be positive")
        if self.S < 1:
            raise ContractError("memory capacity S must be >= 1")
        if self.heads < 1 or self.key_dim % self.heads or self.d % self.heads:
            raise ContractError(
                f"heads={self.heads} must divide key_dim={self.key_dim} and d={self.d}")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError("dropout must be in [0, 1)")
        if self.query not in QUERY_MODES:
            raise ContractError(f"query must be one of {QUERY_MODES}")
        if self.gate not in GATE_MODES:
            raise ContractError(f"gate must be one of {GATE_MODES}")

    @property
    def key_dim(self) -> int:
        return self.d // 4

    @property
    def head_dim(self) -> int:
        return self.key_dim // self.heads

    @property
    def value_head_dim(self) -> int:
        return self.d // self.heads

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, values: dict) -> "CellConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        out = {}
        for key, raw in values.items():
            if key not in kinds:
                continue
            default = getattr(cls, key)
            out[key] = type(default)(raw)
        return cls(**out)


def _layer_shapes(cfg: CellConfig) -> list[tuple[str, int, int]]:
    d, dk = cfg.d, cfg.key_dim
    H = cfg.heads
    query_in = cfg.C if cfg.query == "prediction" else cfg.F
    query_name = "E_Q" if cfg.query == "prediction" else "E_Qx"
    gate_out = d if cfg.gate == "vector" else 1
    return [
        ("E_x", cfg.F, d),
        (query_name, query_in, dk),
        ("E_K", cfg.C, dk),
        ("mha.q", dk, H * cfg.head_dim),
        ("mha.k", dk, H * cfg.head_dim),
        ("mha.v", d, H * cfg.value_head_dim),
        ("mha.o", d, d),
        ("ffn.fc1", d, 4 * d),
        ("ffn.fc2", 4 * d, d),
        ("gate.w1", 2 * d, d // 2),
        ("gate.w2", d // 2, gate_out),
        ("cls", d, cfg.C),
    ]


def init_params(cfg: CellConfig, rng: np.random.Generator,
                dtype=np.float32) -> ParamStore:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, unit norm gain."""
    store = ParamStore()
    for name, fan_in, fan_out in _layer_shapes(cfg):
        if name == "ffn.fc1":
            store.add("ffn.norm.gain", np.ones(cfg.d, dtype=dtype))
            store.add("ffn.norm.bias", np.zeros(cfg.d, dtype=dtype))
        bound = 1.0 / math.sqrt(fan_in)
        store.add(f"{name}.W", rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype))
        store.add(f"{name}.b", np.zeros(fan_out, dtype=dtype))
    return store


def zero_params(cfg: CellConfig, dtype=np.float64) -> ParamStore:
    store = init_params(cfg, nx.Rng(0), dtype)
    for name, value in store.items():
        store[name] = np.zeros_like(value)
    return store


def decay_exempt(name: str) -> bool:
    """Bias vectors and normalization parameters are excluded from weight decay."""
    return name.endswith(".b") or ".norm." in name


def _dense(P: dict, name: str, x) -> Tensor:
    return nx.affine(x, P[f"{name}.W"], P[f"{name}.b"])


# ------------------------------------------------------------------------ memory

class MemoryEntry(NamedTuple):
    key: Tensor
    value: Tensor


class IndexedMemory:
    """Bounded FIFO of memory entries, oldest first."""

    def __init__(self, capacity: int, entries=()):
        if capacity < 1:
            raise ContractError("memory capacity must be >= 1")
        self.capacity = capacity
        self._entries: deque[MemoryEntry] = deque(entries, maxlen=capacity)

    def push(self, key: Tensor, value: Tensor) -> None:
        self._entries.append(MemoryEntry(key, value))

    def copy(self) -> "IndexedMemory":
        return IndexedMemory(self.capacity, self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    def __getitem__(self, i) -> MemoryEntry:
        return self._entries[i]

    def keys(self) -> Tensor:
        """Stacked keys, shape (batch, len, key_dim)."""
        return nx.stack([e.key for e in self._entries], axis=-2)

    def values(self) -> Tensor:
        return nx.stack([e.value for e in self._entries], axis=-2)

    @property
    def nbytes(self) -> int:
        return sum(e.key.data.nbytes + e.value.data.nbytes for e in self._entries)


def memory_footprint_bytes(cfg: CellConfig | None = None, element_bytes: int = 4, *,
                           d: int | None = None, S: int | None = None) -> int:
    """Bytes held by a full memory: ``(d/4 + d) * S * element_bytes``."""
    if cfg is not None:
        d, S = cfg.d, cfg.S
    if d is None or S is None:
        raise ContractError("need a config or explicit d and S")
    return (d // 4 + d) * S * element_bytes


@dataclass
class IamState:
    memory: IndexedMemory
    last_prediction: Tensor | None = None
    t: int = 0

    @classmethod
    def initial(cls, cfg: CellConfig) -> "IamState":
        return cls(IndexedMemory(cfg.S))


@dataclass
class StepTrace:
    attention: np.ndarray | None   # (batch, heads, len), oldest slot first
    gate: np.ndarray               # (batch, d) or (batch, 1)
    o: Tensor
    e: Tensor


# ------------------------------------------------------------------- sub-blocks

def mha(q, K, V, P: dict, heads: int) -> tuple[Tensor, np.ndarray]:
    """Multi-head scaled dot-product attention with one query per batch row.

    ``q`` is (..., dk), ``K`` is (..., L, dk), ``V`` is (..., L, d).  Returns the
    output-projected result (..., d) and the weights (..., heads, L).
    """
    q, K, V = nx.as_tensor(q), nx.as_tensor(K), nx.as_tensor(V)
    L = K.shape[-2]
    if L == 0:
        raise ContractError("attention over an empty memory")
    if V.shape[-2] != L:
        raise ContractError("keys and values disagree on length")
    batch = q.shape[:-1]
    qp = _dense(P, "mha.q", q)
    kp = _dense(P, "mha.k", K)
    vp = _dense(P, "mha.v", V)
    hd = qp.shape[-1] // heads
    vd = vp.shape[-1] // heads
    qh = nx.reshape(qp, batch + (heads, 1, hd))
    kh = nx.swapaxes(nx.reshape(kp, batch + (L, heads, hd)), -2, -3)
    vh = nx.swapaxes(nx.reshape(vp, batch + (L, heads, vd)), -2, -3)
    scores = nx.mul(nx.matmul(qh, nx.swapaxes(kh, -1, -2)), 1.0 / math.sqrt(hd))
    weights = nx.softmax(scores)                          # (..., H, 1, L)
    ctx = nx.matmul(weights, vh)                          # (..., H, 1, vd)
    merged = nx.reshape(ctx, batch + (heads * vd,))
    out = _dense(P, "mha.o", merged)
    return out, weights.data.reshape(batch + (heads, L))


def ffn(x, P: dict, dropout: float = 0.0, rng=None, training: bool = False) -> Tensor:
    """Pre-norm GELU block with a 4x bottleneck and a residual connection."""
    x = nx.as_tensor(x)
    hidden = nx.gelu(_dense(P, "ffn.fc1", nx.layer_norm(x, P["ffn.norm.gain"],
                                                       P["ffn.norm.bias"])))
    hidden = nx.dropout(hidden, dropout, rng, training)
    return nx.add(_dense(P, "ffn.fc2", hidden), x)


def encode_query(source, P: dict, cfg: CellConfig) -> Tensor:
    name = "E_Q" if cfg.query == "prediction" else "E_Qx"
    return nx.relu(_dense(P, name, source))


def encode_key(prediction, P: dict) -> Tensor:
    return nx.relu(_dense(P, "E_K", prediction))


def inductive_attention(query_source, memory: IndexedMemory, P: dict, cfg: CellConfig,
                        rng=None, training: bool = False) -> tuple[Tensor, np.ndarray]:
    """FFN(MHA(E_Q(query_source), memory keys, memory values))."""
    if len(memory) == 0:
        raise ContractError("inductive attention needs a non-empty memory")
    q = encode_query(query_source, P, cfg)
    attended, weights = mha(q, memory.keys(), memory.values(), P, cfg.heads)
    attended = nx.dropout(attended, cfg.dropout, rng, training)
    return ffn(attended, P, cfg.dropout, rng, training), weights


def gate(o, e, P: dict) -> Tensor:
    """sigmoid(w2 relu(w1 [o; e])) -- elementwise (or scalar) mixing ratio."""
    hidden = nx.relu(_dense(P, "gate.w1", nx.concat([o, e], axis=-1)))
    return nx.sigmoid(_dense(P, "gate.w2", hidden))


def _checked(t: Tensor, stage: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteError(stage, f"non-finite values at stage {stage!r}")
    return t


def step(state: IamState, x, P: dict, cfg: CellConfig, rng=None, training: bool = False,
         *, detach_keys: bool = True, key_source=None
         ) -> tuple[Tensor, Tensor, IamState, StepTrace]:
    """Advance one stream (or a batch of streams) by one frame.

    ``x`` is (F,) or (batch, F); ``P`` maps parameter names to arrays or graph
    leaves.  ``key_source`` overrides the prediction that is encoded into the
    new memory key (used to substitute recorded constants); ``detach_keys=False``
    keeps the gradient path through the key, which the model never does.
    """
    x = nx.as_tensor(x)
    if x.shape[-1] != cfg.F:
        raise ContractError(f"expected frame dim F={cfg.F}, got {x.shape[-1]}")
    single = x.data.ndim == 1
    if single:
        x = nx.reshape(x, (1, cfg.F))
    batch = x.shape[0]

    e = _checked(nx.relu(_dense(P, "E_x", x)), "encode")
    if state.t == 0:
        o = Tensor(np.zeros((batch, cfg.d), dtype=e.dtype))
        weights = None
    else:
        source = state.last_prediction if cfg.query == "prediction" else x
        o, weights = inductive_attention(source, state.memory, P, cfg, rng, training)
        _checked(o, "attention")
    g = _checked(gate(o, e, P), "gate")
    # h = g*o + (1-g)*e
    h = nx.add(nx.mul(g, o), nx.mul(nx.sub(1.0, g), e))
    y = _checked(nx.softmax(_dense(P, "cls", h)), "classifier")

    if key_source is not None:
        key_pred = nx.as_tensor(key_source)
    else:
        key_pred = y.detach() if detach_keys else y
    memory = state.memory.copy()
    memory.push(encode_key(key_pred, P), h)
    new_state = IamState(memory, y, state.t + 1)
    trace = StepTrace(weights, g.data, o, e)
    if single:
        return nx.reshape(y, (cfg.C,)), nx.reshape(h, (cfg.d,)), new_state, trace
    return y, h, new_state, trace


# ------------------------------------------------------------ first-order control

@dataclass(frozen=True)
class FirstOrderConfig:
    d: int = 64
    C: int = 4
    F: int = 16


def init_first_order(cfg: FirstOrderConfig, rng: np.random.Generator,
                     dtype=np.float32) -> ParamStore:
    store = ParamStore()
    for name, fan_in, fan_out in (("fo.in", cfg.F, cfg.d), ("fo.rec", cfg.d, cfg.d),
                                  ("cls", cfg.d, cfg.C)):
        bound = 1.0 / math.sqrt(fan_in)
        store.add(f"{name}.W", rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype))
        store.add(f"{name}.b", np.zeros(fan_out, dtype=dtype))
    return store


@dataclass
class FirstOrderState:
    h: Tensor | None = None
    t: int = 0


def first_order_baseline_step(state: FirstOrderState, x, P: dict, cfg: FirstOrderConfig
                              ) -> tuple[Tensor, FirstOrderState]:
    """h_t = tanh(in(x_t) + relu(rec(h_{t-1}))), prediction = softmax(cls(h_t))."""
    x = nx.as_tensor(x)
    if x.shape[-1] != cfg.F:
        raise ContractError(f"expected frame dim F={cfg.F}, got {x.shape[-1]}")
    single = x.data.ndim == 1
    if single:
        x = nx.reshape(x, (1, cfg.F))
    z = _dense(P, "fo.in", x)
    if state.h is not None:
        z = nx.add(z, nx.relu(_dense(P, "fo.rec", state.h)))
    h = _checked(_tanh(z), "first_order")
    y = nx.softmax(_dense(P, "cls", h))
    new_state = FirstOrderState(h, state.t + 1)
    if single:
        return nx.reshape(y, (cfg.C,)), new_state
    return y, new_state


def _tanh(x: Tensor) -> Tensor:
    # tanh(z) = 2 sigmoid(2z) - 1
    return nx.sub(nx.mul(nx.sigmoid(nx.mul(x, 2.0)), 2.0), 1.0)
