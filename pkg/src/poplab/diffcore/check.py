"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import ContractViolation
from .layers import ParamStore
from .tensor import Tensor


def grad_check(loss_fn: Callable[[], Tensor], store: ParamStore,
               eps: float = 1e-5, samples_per_param: int = 4,
               rng: np.random.Generator | None = None) -> dict:
    """Compare analytic gradients against central differences.

    ``loss_fn`` must rebuild the scalar loss from the current contents
    of ``store`` on every call (the graph is consumed by backward).
    For each parameter a few flat entries are sampled and perturbed by
    +/- eps; the numeric slope (f+ - f-) / (2 eps) is compared with the
    analytic gradient at that entry.

    Relative error uses max(|analytic|, |numeric|) as the denominator,
    floored at 1e-3 so that near-zero gradient pairs (where the
    difference is dominated by fp cancellation in f+ - f-) do not
    register as spurious large relative errors.

    Returns {"max_rel_err", "worst_param", "n_checked", "per_param"}.
    """
    if rng is None:
        rng = np.random.default_rng(0)

    store.zero_grads()
    loss = loss_fn()
    if loss.data.size != 1:
        raise ContractViolation("grad_check needs a scalar loss")
    loss.backward()
    analytic = {
        name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
        for name, p in store.items()
    }

    per_param: dict[str, float] = {}
    n_checked = 0
    for name, p in store.items():
        flat = p.data.reshape(-1)
        size = flat.size
        k = min(samples_per_param, size)
        idxs = rng.choice(size, size=k, replace=False)
        worst = 0.0
        for i in idxs:
            keep = flat[i]
            flat[i] = keep + eps
            f_plus = float(loss_fn().data)
            flat[i] = keep - eps
            f_minus = float(loss_fn().data)
            flat[i] = keep
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(analytic[name].reshape(-1)[i])
            denom = max(abs(a), abs(numeric), 1e-3)
            worst = max(worst, abs(a - numeric) / denom)
            n_checked += 1
        per_param[name] = worst

    worst_param = max(per_param, key=per_param.get) if per_param else ""
    return {
        "max_rel_err": max(per_param.values()) if per_param else 0.0,
        "worst_param": worst_param,
        "n_checked": n_checked,
        "per_param": per_param,
    }
