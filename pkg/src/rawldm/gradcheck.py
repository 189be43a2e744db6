"""Central finite-difference validation of autodiff gradients."""

from __future__ import annotations

from typing import Callable, Optional, Sequence, Union

import numpy as np

from .tensor import Tensor, no_grad


def grad_check(f: Callable[..., Tensor], x: Union[Tensor, Sequence[Tensor]], h: float = 1e-5,
               max_entries: Optional[int] = None, seed: int = 0) -> float:
    """Relative error between autodiff and central-difference gradients.

    ``f(*xs)`` must return a scalar tensor. Inputs are perturbed in place, so
    ``f`` may also ignore its arguments and read tensors it closes over (handy
    for module parameters). Inputs should be float64 for meaningful results.

    The error is ``||g_auto - g_fd|| / max(||g_auto||, ||g_fd||)`` over all
    checked entries; ``max_entries`` randomly subsamples large inputs.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.requires_grad = True
        t.grad = None
    out = f(*xs)
    out.backward()
    auto, numeric = [], []
    rng = np.random.default_rng(seed)
    for t in xs:
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                fp = f(*xs).item()
                flat[i] = orig - h
                fm = f(*xs).item()
            flat[i] = orig
            numeric.append((fp - fm) / (2.0 * h))
            auto.append(g.reshape(-1)[i])
    auto, numeric = np.asarray(auto, np.float64), np.asarray(numeric, np.float64)
    scale = max(np.linalg.norm(auto), np.linalg.norm(numeric))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(auto - numeric) / scale)
