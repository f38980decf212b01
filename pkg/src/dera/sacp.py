"""Symmetric conflict projection between the two alignment losses.

At each step the gradients of both alignment losses over the encoder
parameter subset are extracted separately.  If their inner product is
negative, each loss is re-weighted by a detached coefficient built from
the other's gradient:

    s   = <g_a, g_m>
    c_a = stopgrad(s / (|g_m| + eps))      (<= 0 in the conflict branch)
    c_m = stopgrad(s / (|g_a| + eps))
    re_a = loss_a - c_a * loss_m
    re_m = loss_m - c_m * loss_a

so the subsequent backward pass of the weighted total yields encoder
gradients lying along a consensus direction.  When there is no conflict
the original loss nodes are returned unchanged (same graph objects).

The coefficients normalize by the L2 norm (not its square), so the
conflicting component is damped rather than exactly zeroed; no
orthogonality property is claimed or asserted.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import (
    ContractError,
    NumericError,
    Tensor,
    backward,
    mul,
    stop_gradient,
    sub,
)

DEFAULT_EPS = 1e-8


@dataclass
class SacpOutcome:
    inner: float                 # <g_a, g_m> over encoder parameters
    conflicted: bool
    coeff_a: float | None        # s / (|g_m| + eps), only when conflicted
    coeff_m: float | None        # s / (|g_a| + eps)
    norm_a: float
    norm_m: float


def sacp_reformulate(loss_a: Tensor, loss_m: Tensor, encoder_params,
                     eps: float = DEFAULT_EPS) -> tuple[Tensor, Tensor, SacpOutcome]:
    """Detect gradient conflict and reformulate the alignment loss pair.

    Performs two extra backward passes over the retained graph.  Returns
    the (possibly reformulated) losses plus the measured outcome.  The
    coefficients are plain constants: backpropagating the reformulated
    pair reproduces the linear combination of the raw gradients exactly.
    """
    if eps <= 0:
        raise ContractError(f"eps must be positive, got {eps}")
    g_a = backward(loss_a, encoder_params)
    g_m = backward(loss_m, encoder_params)
    s = g_a.dot(g_m)
    norm_a = g_a.norm()
    norm_m = g_m.norm()
    if not np.isfinite(s):
        raise NumericError("non-finite alignment gradient inner product")

    if s >= 0:
        return loss_a, loss_m, SacpOutcome(s, False, None, None, norm_a, norm_m)

    c_a = s / (norm_m + eps)
    c_m = s / (norm_a + eps)
    dtype = loss_a.data.dtype
    c_a_node = stop_gradient(np.asarray(c_a, dtype=dtype))
    c_m_node = stop_gradient(np.asarray(c_m, dtype=dtype))
    loss_re_a = sub(loss_a, mul(c_a_node, loss_m))
    loss_re_m = sub(loss_m, mul(c_m_node, loss_a))
    return loss_re_a, loss_re_m, SacpOutcome(s, True, c_a, c_m, norm_a, norm_m)


def conflict_rate(history: Sequence, window: int | None = None) -> float:
    """Fraction of steps with a detected conflict over a trailing window."""
    flags = [h.conflicted if isinstance(h, SacpOutcome) else bool(h) for h in history]
    if window is not None:
        if window < 1:
            raise ContractError("window must be >= 1")
        flags = flags[-window:]
    if not flags:
        return 0.0
    return sum(flags) / len(flags)
