"""Central finite-difference verification of analytic gradients.

Every differentiable primitive registers a sample-point generator and a
forward builder.  ``grad_check`` reduces the op's output to a scalar with
fixed random weights, differentiates analytically, then perturbs every
input element with central differences in float64 and reports the maximum
relative error per input tensor.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import ContractError, Parameter, Tensor, backward


@dataclass
class OpSpec:
    name: str
    sample: Callable[[np.random.Generator], list[np.ndarray]]
    forward: Callable[[list[Tensor]], Tensor]


@dataclass
class GradCheckReport:
    op_id: str
    max_rel_err: list[float]
    tol: float

    @property
    def passed(self) -> bool:
        return all(e < self.tol for e in self.max_rel_err)

    def __str__(self) -> str:
        errs = ", ".join(f"{e:.3e}" for e in self.max_rel_err)
        status = "pass" if self.passed else "FAIL"
        return f"{self.op_id:<28s} {status}  max rel err per input: [{errs}]"


def _r(rng, *shape):
    return rng.standard_normal(shape)


def _away_from_zero(x, margin=0.2):
    return np.where(np.abs(x) < margin, x + np.sign(x + 1e-9) * margin, x)


_CATALOGUE: dict[str, OpSpec] = {}


def _register(name):
    def deco(builder):
        sample, forward = builder()
        _CATALOGUE[name] = OpSpec(name, sample, forward)
        return builder
    return deco


@_register("add")
def _op_add():
    return (lambda rng: [_r(rng, 3, 4), _r(rng, 3, 4)],
            lambda xs: T.add(xs[0], xs[1]))


@_register("sub")
def _op_sub():
    return (lambda rng: [_r(rng, 3, 4), _r(rng, 4)],  # broadcast path
            lambda xs: T.sub(xs[0], xs[1]))


@_register("mul")
def _op_mul():
    return (lambda rng: [_r(rng, 2, 5), _r(rng, 2, 1)],
            lambda xs: T.mul(xs[0], xs[1]))


@_register("div")
def _op_div():
    return (lambda rng: [_r(rng, 3, 3), _away_from_zero(_r(rng, 3, 3))],
            lambda xs: T.div(xs[0], xs[1]))


@_register("matmul")
def _op_matmul():
    return (lambda rng: [_r(rng, 3, 4), _r(rng, 4, 2)],
            lambda xs: T.matmul(xs[0], xs[1]))


@_register("matmul_batched")
def _op_matmul_batched():
    return (lambda rng: [_r(rng, 2, 3, 4), _r(rng, 2, 4, 3)],
            lambda xs: T.matmul(xs[0], xs[1]))


@_register("transpose")
def _op_transpose():
    return (lambda rng: [_r(rng, 2, 3, 4)],
            lambda xs: T.swapaxes(xs[0], 1, 2))


@_register("reshape")
def _op_reshape():
    return (lambda rng: [_r(rng, 3, 4)],
            lambda xs: T.reshape(xs[0], (2, 6)))


@_register("permute")
def _op_permute():
    return (lambda rng: [_r(rng, 2, 3, 4)],
            lambda xs: T.permute(xs[0], (2, 0, 1)))


@_register("broadcast")
def _op_broadcast():
    return (lambda rng: [_r(rng, 1, 3)],
            lambda xs: T.broadcast_to(xs[0], (4, 3)))


@_register("concat")
def _op_concat():
    return (lambda rng: [_r(rng, 2, 3), _r(rng, 2, 2)],
            lambda xs: T.concat(xs, axis=1))


@_register("slice")
def _op_slice():
    return (lambda rng: [_r(rng, 4, 5)],
            lambda xs: xs[0][1:3, ::2])


@_register("sum")
def _op_sum():
    return (lambda rng: [_r(rng, 3, 4, 2)],
            lambda xs: T.reduce_sum(xs[0], axis=1))


@_register("mean")
def _op_mean():
    return (lambda rng: [_r(rng, 3, 4)],
            lambda xs: T.reduce_mean(xs[0], axis=-1, keepdims=True))


@_register("exp")
def _op_exp():
    return (lambda rng: [_r(rng, 3, 3)],
            lambda xs: T.exp(xs[0]))


@_register("log")
def _op_log():
    return (lambda rng: [np.abs(_r(rng, 3, 3)) + 0.5],
            lambda xs: T.log(xs[0]))


@_register("sqrt")
def _op_sqrt():
    return (lambda rng: [np.abs(_r(rng, 3, 3)) + 0.5],
            lambda xs: T.sqrt(xs[0]))


@_register("relu")
def _op_relu():
    # kink at 0 is zero-measure; sample away from it
    return (lambda rng: [_away_from_zero(_r(rng, 4, 4))],
            lambda xs: T.relu(xs[0]))


@_register("gelu")
def _op_gelu():
    return (lambda rng: [_r(rng, 4, 4)],
            lambda xs: T.gelu(xs[0]))


@_register("abs")
def _op_abs():
    return (lambda rng: [_away_from_zero(_r(rng, 4, 4))],
            lambda xs: T.absolute(xs[0]))


@_register("softmax")
def _op_softmax():
    return (lambda rng: [_r(rng, 7)],
            lambda xs: T.softmax(xs[0], axis=-1))


@_register("layer_norm")
def _op_layer_norm():
    return (lambda rng: [_r(rng, 4, 8), _r(rng, 8) * 0.5 + 1.0, _r(rng, 8) * 0.1],
            lambda xs: T.layer_norm(xs[0], xs[1], xs[2]))


@_register("embedding")
def _op_embedding():
    def sample(rng):
        return [_r(rng, 6, 3)]

    def forward(xs):
        ids = np.array([0, 2, 2, 5, 1])
        return T.embedding(xs[0], ids)

    return sample, forward


@_register("cross_entropy_with_logits")
def _op_ce():
    def sample(rng):
        return [_r(rng, 5, 7)]

    def forward(xs):
        targets = np.array([0, 3, 6, 2, 2])
        return T.cross_entropy_with_logits(xs[0], targets)

    return sample, forward


@_register("cosine_similarity")
def _op_cosine():
    return (lambda rng: [_r(rng, 16), _r(rng, 16)],
            lambda xs: T.cosine_similarity(xs[0], xs[1]))


@_register("attention")
def _op_attention():
    # composed scaled dot-product attention over one head
    def sample(rng):
        return [_r(rng, 5, 4), _r(rng, 5, 4), _r(rng, 5, 4)]

    def forward(xs):
        q, k, v = xs
        scores = T.matmul(q, T.swapaxes(k, 0, 1)) * (1.0 / np.sqrt(4.0))
        return T.matmul(T.softmax(scores, axis=-1), v)

    return sample, forward


@_register("straight_through")
def _op_ste():
    def sample(rng):
        return [_r(rng, 3, 4)]

    def forward(xs):
        snapped = T.constant(np.round(xs[0].data * 2) / 2)
        return T.straight_through(xs[0], snapped)

    return sample, forward


def catalogue() -> list[str]:
    return sorted(_CATALOGUE)


def grad_check(op_id: str, seed: int = 0, tol: float = 1e-4,
               step: float = 1e-5) -> GradCheckReport:
    """Compare analytic and central-difference gradients for one primitive.

    A failing report is returned (not raised); unknown op ids raise.
    """
    if op_id not in _CATALOGUE:
        raise ContractError(f"unknown op id {op_id!r}; known: {catalogue()}")
    spec = _CATALOGUE[op_id]
    rng = np.random.default_rng([seed, T._name_seed(op_id)])
    arrays = [np.asarray(a, dtype=np.float64) for a in spec.sample(rng)]
    params = [Parameter(f"x{i}", a) for i, a in enumerate(arrays)]

    with T.NondiffTape("record") as tape:
        out = spec.forward([p.value for p in params])
        weights = rng.standard_normal(out.shape)
        loss = T.reduce_sum(T.mul(out, T.constant(weights)))
    gv = backward(loss, params)

    def eval_loss() -> float:
        with tape.replay():
            out2 = spec.forward([p.value for p in params])
        return float((out2.data * weights).sum())

    errs = []
    for p in params:
        analytic = gv.block(p.name)
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            hi = eval_loss()
            flat[j] = orig - step
            lo = eval_loss()
            flat[j] = orig
            nflat[j] = (hi - lo) / (2 * step)
        rel = np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)
        errs.append(float(rel.max()))
    return GradCheckReport(op_id, errs, tol)


def run_catalogue(points: int = 10, tol: float = 1e-4,
                  verbose: bool = False) -> list[GradCheckReport]:
    """Check every registered primitive at several random points.

    Returns one report per op with the worst error across points.
    """
    reports = []
    for op_id in catalogue():
        worst: GradCheckReport | None = None
        for seed in range(points):
            rep = grad_check(op_id, seed=seed, tol=tol)
            if worst is None or max(rep.max_rel_err) > max(worst.max_rel_err):
                worst = rep
        reports.append(worst)
        if verbose:
            print(worst)
    return reports
