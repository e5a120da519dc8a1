"""Parameter store and the small set of neural building blocks.

Everything here is functional over ``Tensor``s; parameters live in a
``ParamStore`` keyed by dotted names so checkpoints are just
name -> array maps.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from ..errors import ContractViolation
from . import tensor as T
from .tensor import Tensor


class ParamStore:
    """Ordered name -> parameter map.

    Insertion order is preserved, which fixes the iteration order used
    by the optimizer and by checkpoint serialization.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise ContractViolation(f"parameter {name!r} registered twice")
        t = Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def n_scalars(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """Overwrite parameter values in place; names and shapes must match."""
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise ContractViolation(
                f"parameter name mismatch: missing={sorted(missing)} "
                f"unexpected={sorted(extra)}"
            )
        for k, t in self._params.items():
            arr = np.asarray(arrays[k], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ContractViolation(
                    f"shape mismatch for {k!r}: "
                    f"stored {arr.shape} vs expected {t.data.shape}"
                )
            t.data = arr.copy()

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for k, t in self._params.items():
            out.add(k, t.data.copy())
        return out


# -- layers ------------------------------------------------------------------


class Linear:
    """Affine map x @ w + b with scaled-Gaussian init."""

    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int,
                 rng: np.random.Generator, bias: bool = True):
        scale = 1.0 / math.sqrt(d_in)
        self.w = store.add(f"{name}.w", rng.normal(0.0, scale, (d_in, d_out)))
        self.b = store.add(f"{name}.b", np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.w)
        if self.b is not None:
            y = y + self.b
        return y


class MLP:
    """Linear stack with ReLU between layers (none after the last)."""

    def __init__(self, store: ParamStore, name: str, dims: Sequence[int],
                 rng: np.random.Generator):
        if len(dims) < 2:
            raise ContractViolation("MLP needs at least input and output dims")
        self.layers = [
            Linear(store, f"{name}.{i}", dims[i], dims[i + 1], rng)
            for i in range(len(dims) - 1)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i + 1 < len(self.layers):
                x = T.relu(x)
        return x


class LayerNorm:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""

    def __init__(self, store: ParamStore, name: str, d: int, eps: float = 1e-5):
        self.gamma = store.add(f"{name}.gamma", np.ones(d))
        self.beta = store.add(f"{name}.beta", np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        normed = centered / T.sqrt(var + self.eps)
        return normed * self.gamma + self.beta


class GRUCell:
    """Single gated recurrent step.

    h' = z * h + (1 - z) * n with z, r sigmoid gates and candidate
    n = tanh(Wn x + r * (Un h) + bn). With all-zero weights this
    reduces to h' = 0.5 * h, which the tests pin down.
    """

    def __init__(self, store: ParamStore, name: str, d_in: int, d_h: int,
                 rng: np.random.Generator):
        scale_x = 1.0 / math.sqrt(d_in)
        scale_h = 1.0 / math.sqrt(d_h)
        add = store.add
        self.wz = add(f"{name}.wz", rng.normal(0.0, scale_x, (d_in, d_h)))
        self.uz = add(f"{name}.uz", rng.normal(0.0, scale_h, (d_h, d_h)))
        self.bz = add(f"{name}.bz", np.zeros(d_h))
        self.wr = add(f"{name}.wr", rng.normal(0.0, scale_x, (d_in, d_h)))
        self.ur = add(f"{name}.ur", rng.normal(0.0, scale_h, (d_h, d_h)))
        self.br = add(f"{name}.br", np.zeros(d_h))
        self.wn = add(f"{name}.wn", rng.normal(0.0, scale_x, (d_in, d_h)))
        self.un = add(f"{name}.un", rng.normal(0.0, scale_h, (d_h, d_h)))
        self.bn = add(f"{name}.bn", np.zeros(d_h))

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        z = T.sigmoid(T.matmul(x, self.wz) + T.matmul(h, self.uz) + self.bz)
        r = T.sigmoid(T.matmul(x, self.wr) + T.matmul(h, self.ur) + self.br)
        n = T.tanh(T.matmul(x, self.wn) + r * T.matmul(h, self.un) + self.bn)
        return z * h + (1.0 - z) * n


def fourier_features(x: Tensor, freqs: Tensor) -> Tensor:
    """Map scalars to [cos(2 pi f x), sin(2 pi f x)] feature pairs.

    x: [..., m], freqs: [n_freq]  ->  [..., m * 2 * n_freq]
    At x == 0 the cosine block is exactly 1 and the sine block exactly 0.
    """
    xs = x.reshape(x.shape + (1,))
    ang = xs * (freqs * (2.0 * math.pi))
    out = T.concat([T.cos(ang), T.sin(ang)], axis=-1)
    flat = x.shape[:-1] + (x.shape[-1] * 2 * freqs.shape[-1],)
    return out.reshape(flat)


def masked_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray,
                     n_heads: int) -> Tensor:
    """Scaled dot-product attention with per-query key tables.

    q    : [..., Nq, D]
    k, v : [..., Nq, Nk, D]   (keys/values may differ per query, which is
                               how relative-position information enters)
    mask : bool [..., Nq, Nk], True where the key may be attended.

    Masked keys have their scores replaced by a large negative constant
    *before* softmax, so the output is exactly independent of masked
    key/value content (their softmax weight underflows to 0.0 and the
    replaced score carries no gradient). Queries whose key row is fully
    masked produce exact zero vectors.
    """
    d = q.shape[-1]
    if d % n_heads != 0:
        raise ContractViolation(f"model dim {d} not divisible by {n_heads} heads")
    if k.shape != v.shape or k.shape[-1] != d:
        raise ContractViolation(
            f"attention shape mismatch: q={q.shape} k={k.shape} v={v.shape}"
        )
    dh = d // n_heads
    nq, nk = k.shape[-3], k.shape[-2]
    batch = q.shape[:-2]
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != batch + (nq, nk):
        raise ContractViolation(
            f"attention mask shape {mask.shape} != {batch + (nq, nk)}"
        )

    qh = q.reshape(batch + (nq, 1, n_heads, dh))
    kh = k.reshape(batch + (nq, nk, n_heads, dh))
    vh = v.reshape(batch + (nq, nk, n_heads, dh))

    scores = (qh * kh).sum(axis=-1) * (1.0 / math.sqrt(dh))  # [..., Nq, Nk, H]
    scores = T.where_const(mask[..., None], scores, Tensor(-1e30))
    att = T.softmax(scores, axis=-2)

    att_e = att.reshape(batch + (nq, nk, n_heads, 1))
    out = (att_e * vh).sum(axis=-3)                          # [..., Nq, H, dh]
    out = out.reshape(batch + (nq, d))

    any_valid = mask.any(axis=-1)                            # [..., Nq]
    return T.where_const(any_valid[..., None], out, Tensor(0.0))


class AttentionBlock:
    """Pre-norm residual attention + feed-forward block.

    The query stream is a token set [..., Nq, D]; keys/values are built
    by projecting caller-supplied pair features [..., Nq, Nk, P]
    (typically: key token embedding concatenated with a relative-pose
    embedding).
    """

    def __init__(self, store: ParamStore, name: str, d: int, d_pair: int,
                 n_heads: int, rng: np.random.Generator):
        self.n_heads = n_heads
        self.ln_q = LayerNorm(store, f"{name}.ln_q", d)
        self.q_proj = Linear(store, f"{name}.q", d, d, rng)
        self.k_proj = Linear(store, f"{name}.k", d_pair, d, rng)
        self.v_proj = Linear(store, f"{name}.v", d_pair, d, rng)
        self.out_proj = Linear(store, f"{name}.out", d, d, rng)
        self.ln_ff = LayerNorm(store, f"{name}.ln_ff", d)
        self.ff = MLP(store, f"{name}.ff", [d, 4 * d, d], rng)

    def __call__(self, x: Tensor, pair: Tensor, mask: np.ndarray) -> Tensor:
        q = self.q_proj(self.ln_q(x))
        k = self.k_proj(pair)
        v = self.v_proj(pair)
        x = x + self.out_proj(masked_attention(q, k, v, mask, self.n_heads))
        x = x + self.ff(self.ln_ff(x))
        return x
