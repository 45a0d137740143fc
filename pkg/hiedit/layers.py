"""
Trainable building blocks shared by every model component: linear projections,
layer norm, feed-forward, multi-head (cross-)attention and LoRA adapters.

Projections compute ``x · Wᵀ`` with ``W`` stored as [d_out, d_in].
Attention blocks carry no positional terms; position is added by the encoders.
"""
import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from .errors import ShapeError
from .tensor import (
    Tensor, add, concat, gelu, layernorm, masked_fill, matmul, mul, record_marker,
    reshape, softmax, swap_last, transpose,
)

logger = logging.getLogger(__name__)


def xavier_uniform(rng: np.random.Generator, d_out: int, d_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-bound, bound, size=(d_out, d_in))


def parameter(values: np.ndarray, trainable: bool = True) -> Tensor:
    return Tensor(values, requires_grad=trainable)


class Module:
    """
    Minimal parameter container.

    Tensors and sub-modules assigned as attributes are registered automatically,
    so ``named_parameters`` yields dotted paths such as ``block.w_q.weight``.
    """

    def __init__(self):
        object.__setattr__(self, "_parameters", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, key, value):
        if isinstance(value, Tensor):
            self._parameters[key] = value
            self._modules.pop(key, None)
        elif isinstance(value, Module):
            self._modules[key] = value
            self._parameters.pop(key, None)
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, tensor in self._parameters.items():
            yield f"{prefix}{name}", tensor
        for name, module in self._modules.items():
            yield from module.named_parameters(f"{prefix}{name}.")

    def parameters(self, trainable_only: bool = False) -> List[Tensor]:
        return [t for _, t in self.named_parameters() if t.requires_grad or not trainable_only]

    def zero_grad(self) -> None:
        for _, tensor in self.named_parameters():
            tensor.zero_grad()

    def freeze(self) -> None:
        for _, tensor in self.named_parameters():
            tensor.requires_grad = False

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: tensor.values.copy() for name, tensor in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if strict and (missing or unexpected):
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, values in state.items():
            if name not in own:
                continue
            if own[name].shape != values.shape:
                raise ShapeError(f"{name}: checkpoint shape {values.shape} != model shape {own[name].shape}")
            own[name].values[...] = values


class ModuleList(Module):
    def __init__(self, modules):
        super().__init__()
        object.__setattr__(self, "_items", [])
        for i, module in enumerate(modules):
            setattr(self, str(i), module)
            self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def _check_width(x: Tensor, width: int, what: str) -> None:
    if x.shape[-1] != width:
        raise ShapeError(f"{what}: expected width {width}, got input shape {x.shape}")


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 zero_init: bool = False):
        super().__init__()
        self.d_in = d_in
        self.d_out = d_out
        weight = np.zeros((d_out, d_in)) if zero_init else xavier_uniform(rng, d_out, d_in)
        self.weight = parameter(weight)
        self.has_bias = bias
        if bias:
            self.bias = parameter(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        _check_width(x, self.d_in, "Linear")
        out = matmul(x, transpose(self.weight))
        return add(out, self.bias) if self.has_bias else out


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = parameter(np.ones(d))
        self.beta = parameter(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return layernorm(x, self.gamma, self.beta, self.eps)


class FeedForward(Module):
    """Linear(d → 4d) → GELU (tanh approximation) → Linear(4d → d)."""

    def __init__(self, d: int, rng: np.random.Generator, expansion: int = 4):
        super().__init__()
        self.d = d
        self.fc1 = Linear(d, expansion * d, rng)
        self.fc2 = Linear(expansion * d, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return feed_forward(x, self)


def feed_forward(x: Tensor, block: FeedForward) -> Tensor:
    _check_width(x, block.d, "feed_forward")
    return block.fc2(gelu(block.fc1(x)))


# ---------------------------------------------------------------------------
# LoRA
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LoraSettings:
    rank: int = 8
    alpha: float = 16.0
    init_std: float = 0.02

    def __post_init__(self):
        if self.rank <= 0:
            raise ValueError("LoRA rank must be positive")


class LoraAdapter(Module):
    """
    Low-rank correction ``(alpha / rank) · B · A`` for a frozen [d_out, d_in] weight.

    A starts as N(0, init_std²), B as zeros, so a fresh adapter leaves the base layer unchanged.
    """

    def __init__(self, d_in: int, d_out: int, settings: LoraSettings, rng: np.random.Generator):
        super().__init__()
        self.rank = settings.rank
        self.alpha = settings.alpha
        self.A = parameter(rng.normal(0.0, settings.init_std, size=(settings.rank, d_in)))
        self.B = parameter(np.zeros((d_out, settings.rank)))

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @property
    def d_in(self) -> int:
        return self.A.shape[1]

    @property
    def d_out(self) -> int:
        return self.B.shape[0]


def _check_lora_dims(base: Tensor, adapter: LoraAdapter) -> None:
    if base.ndim != 2 or base.shape != (adapter.d_out, adapter.d_in):
        raise ShapeError(f"LoRA adapter for ({adapter.d_out}, {adapter.d_in}) "
                         f"cannot wrap base weight of shape {base.shape}")


def lora_forward(x: Tensor, base: Tensor, adapter: LoraAdapter) -> Tensor:
    """x · W_baseᵀ + (alpha/rank) · x · Aᵀ · Bᵀ."""
    _check_lora_dims(base, adapter)
    _check_width(x, adapter.d_in, "lora_forward")
    base_out = matmul(x, transpose(base))
    low_rank = matmul(matmul(x, transpose(adapter.A)), transpose(adapter.B))
    return add(base_out, mul(low_rank, adapter.scale))


def lora_merge(base: Tensor, adapter: LoraAdapter) -> Tensor:
    """Return the merged weight W_base + (alpha/rank) · B · A as a constant tensor."""
    _check_lora_dims(base, adapter)
    return Tensor(base.values + adapter.scale * (adapter.B.values @ adapter.A.values))


class LoraLinear(Module):
    """Bias-free [d_out, d_in] projection, optionally frozen behind a LoRA adapter."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 lora: Optional[LoraSettings] = None):
        super().__init__()
        self.d_in = d_in
        self.d_out = d_out
        self.weight = parameter(xavier_uniform(rng, d_out, d_in), trainable=lora is None)
        if lora is not None:
            self.adapter = LoraAdapter(d_in, d_out, lora, rng)
        self.has_adapter = lora is not None

    def __call__(self, x: Tensor) -> Tensor:
        if self.has_adapter:
            return lora_forward(x, self.weight, self.adapter)
        _check_width(x, self.d_in, "LoraLinear")
        return matmul(x, transpose(self.weight))


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

@dataclass
class AttentionDetails:
    """Per-call attention internals: weights [..., heads, n_q, n_kv] and pre-W_o head outputs."""
    weights: np.ndarray
    head_outputs: np.ndarray


class CrossAttentionBlock(Module):
    """
    Multi-head cross-attention with projections W_q, W_k, W_v, W_o.

    With ``residual_norm`` the block returns ``Norm(query + attention)``;
    self-attention is the special case key_value = query.
    """

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator, residual_norm: bool = True,
                 lora: Optional[LoraSettings] = None, ln_eps: float = 1e-5, label: str = ""):
        super().__init__()
        if heads <= 0 or d_model % heads != 0:
            raise ShapeError(f"d_model={d_model} is not divisible by heads={heads}")
        self.d_model = d_model
        self.heads = heads
        self.residual_norm = residual_norm
        self.label = label
        self.w_q = LoraLinear(d_model, d_model, rng, lora)
        self.w_k = LoraLinear(d_model, d_model, rng, lora)
        self.w_v = LoraLinear(d_model, d_model, rng, lora)
        self.w_o = LoraLinear(d_model, d_model, rng, lora)
        if residual_norm:
            self.norm = LayerNorm(d_model, ln_eps)

    def __call__(self, query: Tensor, key_value: Tensor, causal: bool = False) -> Tensor:
        return cross_attention(query, key_value, self, causal=causal)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    # (*B, n, d) -> (*B, h, n, d/h)
    *lead, n, d = x.shape
    x = reshape(x, (*lead, n, heads, d // heads))
    k = len(lead)
    return transpose(x, list(range(k)) + [k + 1, k, k + 2])


def _merge_heads(x: Tensor) -> Tensor:
    # (*B, h, n, dh) -> (*B, n, h*dh)
    *lead, h, n, dh = x.shape
    k = len(lead)
    x = transpose(x, list(range(k)) + [k + 1, k, k + 2])
    return reshape(x, (*lead, n, h * dh))


def cross_attention(query: Tensor, key_value: Tensor, block: CrossAttentionBlock, causal: bool = False,
                    return_details: bool = False):
    """
    softmax((Q·W_q)(K·W_k)ᵀ / √(d/heads)) · (V·W_v) per head, heads concatenated, then W_o.

    Args:
        query: [..., n_q, d_model]
        key_value: [..., n_kv, d_model] with the same leading dims as ``query``
        block: projection weights and head count
        causal: mask keys at positions after the query position
        return_details: also return AttentionDetails

    Returns:
        output of query shape, or (output, AttentionDetails)
    """
    _check_width(query, block.d_model, "cross_attention query")
    _check_width(key_value, block.d_model, "cross_attention key_value")
    if query.shape[:-2] != key_value.shape[:-2]:
        raise ShapeError(f"cross_attention: leading dims differ between {query.shape} and {key_value.shape}")
    n_q, n_kv = query.shape[-2], key_value.shape[-2]
    dh = block.d_model // block.heads

    q = _split_heads(block.w_q(query), block.heads)
    k = _split_heads(block.w_k(key_value), block.heads)
    v = _split_heads(block.w_v(key_value), block.heads)
    scores = mul(matmul(q, swap_last(k)), 1.0 / math.sqrt(dh))
    if causal:
        if n_q != n_kv:
            raise ShapeError(f"causal attention needs n_q == n_kv, got {n_q} and {n_kv}")
        scores = masked_fill(scores, np.triu(np.ones((n_q, n_kv), dtype=bool), k=1), -np.inf)
    weights = softmax(scores)
    heads_out = matmul(weights, v)
    out = block.w_o(_merge_heads(heads_out))
    if block.residual_norm:
        out = block.norm(add(query, out))
    record_marker("cross_attention", (query, key_value), out, label=block.label,
                  query=query.id, kv=key_value.id)
    if return_details:
        return out, AttentionDetails(weights=weights.values.copy(), head_outputs=heads_out.values.copy())
    return out


class TransformerLayer(Module):
    """Self-attention, optional cross-attention to a context, feed-forward; each with residual + norm."""

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator, cross: bool = False,
                 lora: Optional[LoraSettings] = None, ln_eps: float = 1e-5, label: str = ""):
        super().__init__()
        self.self_attn = CrossAttentionBlock(d_model, heads, rng, lora=lora, ln_eps=ln_eps,
                                             label=f"{label}.self_attn")
        self.has_cross = cross
        if cross:
            self.cross_attn = CrossAttentionBlock(d_model, heads, rng, ln_eps=ln_eps,
                                                  label=f"{label}.cross_attn")
        self.ff = FeedForward(d_model, rng)
        self.ff_norm = LayerNorm(d_model, ln_eps)

    def __call__(self, x: Tensor, context: Optional[Tensor] = None, causal: bool = False) -> Tensor:
        x = self.self_attn(x, x, causal=causal)
        if self.has_cross:
            if context is None:
                raise ValueError("TransformerLayer with cross-attention needs a context")
            x = self.cross_attn(x, context)
        return self.ff_norm(add(x, self.ff(x)))


def concat_rows(parts: List[Tensor]) -> Tensor:
    return concat(parts, axis=0)
