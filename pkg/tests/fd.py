"""Central finite-difference gradient checking helpers.

Double precision, step 1e-4, relative tolerance 1e-3 (with a small absolute
floor for near-zero gradients) — shared by the unit tests and the
acceptance suite.
"""

from __future__ import annotations

import numpy as np
import torch

STEP = 1e-4
RTOL = 1e-3
# absolute floor for near-zero gradients where central differences are
# truncation-limited; same default as double-precision torch.gradcheck
ATOL = 1e-5


def _close(fd: float, an: float, rtol: float, atol: float) -> bool:
    return abs(fd - an) <= rtol * max(abs(fd), abs(an)) + atol


def _assert_close_with_refinement(eval_fd, an: float, where: str, h: float, rtol: float,
                                  atol: float):
    """Check FD at the primary step; on failure retry at h/10.

    A piecewise-linear kink (ReLU) within +-h of the base point makes the
    primary-step estimate one-sided even though the function is
    differentiable there; shrinking the step resolves it. A genuinely wrong
    analytic gradient fails at every step size.
    """
    fd = eval_fd(h)
    if _close(fd, an, rtol, atol):
        return
    fd_small = eval_fd(h / 10.0)
    assert _close(fd_small, an, rtol, atol), (
        f"{where}: finite-diff {fd:.10g} (step {h:g}) / {fd_small:.10g} (step {h / 10:g}) "
        f"vs analytic {an:.10g}"
    )


def check_input_gradients(
    fn,
    inputs: dict[str, torch.Tensor],
    n_coords: int = 32,
    seed: int = 0,
    h: float = STEP,
    rtol: float = RTOL,
    atol: float = ATOL,
) -> int:
    """Compare autograd to central differences w.r.t. every tensor in `inputs`.

    `fn(**inputs)` must return a scalar tensor. Samples up to n_coords
    coordinates spread over all input tensors. Returns the number of
    coordinates checked.
    """
    rng = np.random.default_rng(seed)
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in inputs.items()}
    loss = fn(**leaves)
    loss.backward()

    names = list(leaves)
    sizes = np.array([leaves[k].numel() for k in names])
    total = int(sizes.sum())
    n = min(n_coords, total)
    flat_choice = rng.choice(total, size=n, replace=False)
    checked = 0
    for flat in flat_choice:
        ti = int(np.searchsorted(np.cumsum(sizes), flat, side="right"))
        local = int(flat - (np.cumsum(sizes)[ti - 1] if ti else 0))
        name = names[ti]

        def eval_at(delta):
            probe = {k: v.detach().clone() for k, v in leaves.items()}
            flatview = probe[name].reshape(-1)
            flatview[local] += delta
            return float(fn(**probe))

        def eval_fd(step):
            return (eval_at(step) - eval_at(-step)) / (2 * step)

        an = float(leaves[name].grad.reshape(-1)[local])
        _assert_close_with_refinement(eval_fd, an, f"{name}[{local}]", h, rtol, atol)
        checked += 1
    return checked


def check_parameter_gradients(
    loss_fn,
    parameters: list[torch.Tensor],
    n_coords: int = 32,
    seed: int = 0,
    h: float = STEP,
    rtol: float = RTOL,
    atol: float = ATOL,
) -> int:
    """Compare autograd to central differences w.r.t. module parameters.

    `loss_fn()` recomputes the scalar loss from the parameters' current
    values; the surrounding discrete structure (matching, proposal sets)
    must already be frozen inside the closure.
    """
    rng = np.random.default_rng(seed)
    for p in parameters:
        p.grad = None
    loss = loss_fn()
    loss.backward()

    sizes = np.array([p.numel() for p in parameters])
    total = int(sizes.sum())
    n = min(n_coords, total)
    flat_choice = rng.choice(total, size=n, replace=False)
    cum = np.cumsum(sizes)
    checked = 0
    for flat in flat_choice:
        ti = int(np.searchsorted(cum, flat, side="right"))
        local = int(flat - (cum[ti - 1] if ti else 0))
        p = parameters[ti]

        def eval_fd(step):
            with torch.no_grad():
                base = float(p.reshape(-1)[local])
                p.reshape(-1)[local] = base + step
                f_plus = float(loss_fn())
                p.reshape(-1)[local] = base - step
                f_minus = float(loss_fn())
                p.reshape(-1)[local] = base
            return (f_plus - f_minus) / (2 * step)

        an = float(p.grad.reshape(-1)[local]) if p.grad is not None else 0.0
        _assert_close_with_refinement(eval_fd, an, f"param{ti}[{local}]", h, rtol, atol)
        checked += 1
    return checked
