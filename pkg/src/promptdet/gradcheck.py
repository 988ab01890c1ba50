"""Finite-difference verification of analytic gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import NumericError, Tensor, backward, detach_tape, graph_nodes, no_grad, precision


def grad_check(
    f: Callable[[], Tensor],
    leaves: Sequence[Tensor],
    h: float = 1e-4,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between backprop and central differences.

    ``f`` rebuilds the scalar loss from ``leaves`` each call. The check runs a
    64-bit shadow build: leaf data are promoted to float64 for the duration
    and restored afterwards. With ``max_coords`` set, at most that many
    coordinates per leaf are probed (chosen with ``seed``); otherwise every
    coordinate is.

    Values passed through ``detach`` are held at their unperturbed values
    during probing, matching the constant they are treated as in backprop.

    The error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    saved = [(leaf.data, leaf.requires_grad, leaf.grad) for leaf in leaves]
    rng = np.random.default_rng(seed)
    try:
        for leaf in leaves:
            leaf.data = np.array(leaf.data, dtype=np.float64)
            leaf.requires_grad = True
        with precision(np.float64):
            tape: list = []
            with detach_tape("record", tape):
                loss = f()
            if loss.data.size != 1:
                raise NumericError(f"grad_check needs a scalar objective, got {loss.shape}")
            for node in graph_nodes(loss):
                if not np.all(np.isfinite(node.data)):
                    raise NumericError("non-finite intermediate in grad_check graph")
            backward(loss, leaves)
            worst = 0.0
            for leaf in leaves:
                analytic = leaf.grad.reshape(-1).copy()
                flat = leaf.data.reshape(-1)
                coords = np.arange(flat.size)
                if max_coords is not None and flat.size > max_coords:
                    coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
                for i in coords:
                    orig = flat[i]
                    with no_grad():
                        flat[i] = orig + h
                        with detach_tape("replay", tape):
                            fp = float(f().data)
                        flat[i] = orig - h
                        with detach_tape("replay", tape):
                            fm = float(f().data)
                    flat[i] = orig
                    if not (np.isfinite(fp) and np.isfinite(fm)):
                        raise NumericError("non-finite objective under perturbation")
                    numeric = (fp - fm) / (2 * h)
                    err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
                    worst = max(worst, err)
            return worst
    finally:
        for leaf, (data, rg, grad) in zip(leaves, saved):
            leaf.data = data
            leaf.requires_grad = rg
            leaf.grad = grad
