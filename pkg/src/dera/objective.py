"""Training-loss assembly: reconstruction, quantization, alignment terms.

The total is a weighted sum; when conflict projection is active the
alignment slots carry the reformulated pair.  Perceptual/adversarial
terms are out of scope here and enter only through named auxiliary hooks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    ContractError,
    Tensor,
    absolute,
    add,
    constant,
    mul,
    reduce_mean,
    stop_gradient,
    sub,
)


@dataclass
class LossWeights:
    align_appearance: float = 1.0     # weight of the appearance alignment loss
    align_motion: float = 0.5         # weight of the motion alignment loss
    commitment: float = 0.25          # commitment coefficient inside the VQ loss
    reconstruction: float = 1.0
    aux: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for name, value in self.as_dict().items():
            if value < 0:
                raise ContractError(f"loss weight {name} must be >= 0, got {value}")

    def as_dict(self) -> dict[str, float]:
        d = {
            "align_appearance": self.align_appearance,
            "align_motion": self.align_motion,
            "commitment": self.commitment,
            "reconstruction": self.reconstruction,
        }
        d.update(self.aux)
        return d


def recon_l1(x, x_r: Tensor) -> Tensor:
    """Mean absolute pixel error."""
    x = x if isinstance(x, Tensor) else constant(np.asarray(x, dtype=x_r.data.dtype))
    if x.shape != x_r.shape:
        raise ContractError(f"shape mismatch {x.shape} vs {x_r.shape}")
    return reduce_mean(absolute(sub(x_r, x)))


def vq_objective(z_pre: Tensor, e_quant: Tensor, beta: float) -> Tensor:
    """Codebook + commitment loss, mean over tokens and dims:
    |sg(z) - e|^2 + beta * |z - sg(e)|^2."""
    if z_pre.shape != e_quant.shape:
        raise ContractError(f"shape mismatch {z_pre.shape} vs {e_quant.shape}")
    codebook_diff = sub(stop_gradient(z_pre), e_quant)
    codebook_term = reduce_mean(mul(codebook_diff, codebook_diff))
    commit_diff = sub(z_pre, stop_gradient(e_quant))
    commit_term = reduce_mean(mul(commit_diff, commit_diff))
    beta_c = constant(np.asarray(beta, dtype=z_pre.data.dtype))
    return add(codebook_term, mul(beta_c, commit_term))


def total_loss(parts: dict[str, Tensor], weights: LossWeights,
               sacp_enabled: bool) -> tuple[Tensor, dict[str, tuple[float, float]]]:
    """Weighted sum of loss parts plus a per-term breakdown.

    `parts` must contain "recon" and "vq"; alignment slots are optional
    ("align_a"/"align_m" raw and, when the projection ran, "align_re_a"/
    "align_re_m").  With sacp_enabled the reformulated pair is summed when
    present, the raw pair otherwise.  The breakdown maps each summed term
    to (weight, value); weighted values sum to the returned total.
    """
    for key in ("recon", "vq"):
        if key not in parts or parts[key] is None:
            raise ContractError(f"missing loss part {key!r}")

    terms: list[tuple[str, float, Tensor]] = [
        ("recon", weights.reconstruction, parts["recon"]),
        ("vq", 1.0, parts["vq"]),
    ]

    align_a = parts.get("align_a")
    align_m = parts.get("align_m")
    if sacp_enabled and parts.get("align_re_a") is not None:
        align_a = parts["align_re_a"]
        align_m = parts["align_re_m"]
    if align_a is not None:
        terms.append(("align_a", weights.align_appearance, align_a))
    if align_m is not None:
        terms.append(("align_m", weights.align_motion, align_m))
    for name, weight in weights.aux.items():
        if name not in parts:
            raise ContractError(f"missing auxiliary loss part {name!r}")
        terms.append((name, weight, parts[name]))

    total: Tensor | None = None
    breakdown: dict[str, tuple[float, float]] = {}
    for name, weight, node in terms:
        breakdown[name] = (weight, float(node.data))
        if weight == 0.0:
            continue
        weighted = mul(constant(np.asarray(weight, dtype=node.data.dtype)), node)
        total = weighted if total is None else add(total, weighted)
    if total is None:  # every weight zero
        total = mul(constant(np.asarray(0.0, dtype=parts["recon"].data.dtype)),
                    parts["recon"])
    return total, breakdown
