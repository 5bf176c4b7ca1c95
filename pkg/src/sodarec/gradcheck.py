"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import torch


def grad_check(loss_fn: Callable[[], torch.Tensor], parameters: Sequence[torch.Tensor],
               tolerance: float | None = None, step: float = 1e-5, floor: float = 1e-6,
               max_entries: int | None = None, generator: torch.Generator | None = None) -> float:
    """Worst relative error between autograd and central differences.

    ``loss_fn`` is re-evaluated with each entry of each parameter nudged by
    ``+-step * max(1, |p|)``. Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    ``max_entries`` caps how many entries per parameter are probed (sampled
    with ``generator``). Raises AssertionError if ``tolerance`` is given and
    exceeded.
    """
    params = list(parameters)
    for p in params:
        p.grad = None
    loss = loss_fn()
    analytic = torch.autograd.grad(loss, params, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            idx = torch.arange(flat.numel())
            if max_entries is not None and flat.numel() > max_entries:
                idx = torch.randperm(flat.numel(), generator=generator)[:max_entries]
            gflat = g.reshape(-1)
            for i in idx.tolist():
                orig = flat[i].item()
                h = step * max(1.0, abs(orig))
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
                numeric = (up - down) / (2 * h)
                a = gflat[i].item()
                err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                worst = max(worst, err)
    if tolerance is not None and worst >= tolerance:
        raise AssertionError(f"gradient check failed: relative error {worst:.3e} >= {tolerance:.1e}")
    return worst
